//! The six-section FaceCoT annotation: data model, tag grammar, parser,
//! serializer and conclusion extraction.
//!
//! The canonical text form is
//!
//! ```text
//! <Caption>…</Caption> <Facial Description>…</Facial Description> <Facial Attributes>…</Facial Attributes> <Reasoning>…</Reasoning> <Spoofing Description>…</Spoofing Description> <Conclusion>…</Conclusion>
//! ```
//!
//! Tag names are case-sensitive and non-recursive. Any `<name>` or `</name>`
//! token whose name is made of ASCII letters and spaces counts as a tag; tags
//! that are not one of the twelve known ones are malformed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest run of letters/spaces that is still read as a tag name.
const MAX_TAG_NAME_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SectionKind {
    Caption,
    FacialDescription,
    FacialAttributes,
    Reasoning,
    SpoofingDescription,
    Conclusion,
}

impl SectionKind {
    /// Canonical order.
    pub const ALL: [SectionKind; 6] = [
        SectionKind::Caption,
        SectionKind::FacialDescription,
        SectionKind::FacialAttributes,
        SectionKind::Reasoning,
        SectionKind::SpoofingDescription,
        SectionKind::Conclusion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Name as it appears between the angle brackets.
    pub fn tag_name(self) -> &'static str {
        match self {
            SectionKind::Caption => "Caption",
            SectionKind::FacialDescription => "Facial Description",
            SectionKind::FacialAttributes => "Facial Attributes",
            SectionKind::Reasoning => "Reasoning",
            SectionKind::SpoofingDescription => "Spoofing Description",
            SectionKind::Conclusion => "Conclusion",
        }
    }

    /// Field name in the structured (object) form.
    pub fn field_name(self) -> &'static str {
        match self {
            SectionKind::Caption => "caption",
            SectionKind::FacialDescription => "facial_description",
            SectionKind::FacialAttributes => "facial_attributes",
            SectionKind::Reasoning => "reasoning",
            SectionKind::SpoofingDescription => "spoofing_description",
            SectionKind::Conclusion => "conclusion",
        }
    }

    pub fn from_tag_name(name: &str) -> Option<SectionKind> {
        SectionKind::ALL.into_iter().find(|k| k.tag_name() == name)
    }

    pub fn open_tag(self) -> String {
        format!("<{}>", self.tag_name())
    }

    pub fn close_tag(self) -> String {
        format!("</{}>", self.tag_name())
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag_name())
    }
}

/// Final answer of an annotation. `Yes` means a presentation attack is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Yes => "Yes",
            Verdict::No => "No",
        }
    }

    pub fn is_spoof(self) -> bool {
        self == Verdict::Yes
    }

    pub fn flipped(self) -> Verdict {
        match self {
            Verdict::Yes => Verdict::No,
            Verdict::No => Verdict::Yes,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_verdict(s).ok_or_else(|| format!("not a verdict: {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Strictness {
    /// All six sections, canonical order, nothing but whitespace between tags.
    #[default]
    Strict,
    /// Any order, prose allowed around sections; each section still exactly once.
    Lenient,
}

impl FromStr for Strictness {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(Strictness::Strict),
            "lenient" => Ok(Strictness::Lenient),
            other => Err(format!("unknown strictness {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ParseError {
    #[error("missing section <{kind}>")]
    MissingSection { kind: SectionKind },
    #[error("duplicate section <{kind}> at byte {position}")]
    DuplicateSection { kind: SectionKind, position: usize },
    #[error("malformed tag at byte {position}: {detail}")]
    MalformedTag { position: usize, detail: String },
    #[error("section <{kind}> at byte {position} is out of canonical order")]
    OutOfOrder { kind: SectionKind, position: usize },
    #[error("conclusion {found:?} is neither Yes nor No")]
    InvalidConclusion { found: String },
    #[error("section <{kind}> at byte {position} is empty")]
    EmptySection { kind: SectionKind, position: usize },
    #[error("text outside of tags at byte {position}")]
    StrayText { position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SectionError {
    #[error("section <{0}> is empty")]
    Empty(SectionKind),
    #[error("section <{0}> contains a tag")]
    ContainsTag(SectionKind),
    #[error("conclusion {0:?} is neither Yes nor No")]
    InvalidConclusion(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoTSection {
    pub kind: SectionKind,
    pub text: String,
}

/// A complete six-section annotation. Section texts are stored trimmed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoTAnnotation {
    texts: [String; 6],
}

impl CoTAnnotation {
    /// Builds an annotation from the six texts in canonical order.
    pub fn new<S: Into<String>>(texts: [S; 6]) -> Result<Self, SectionError> {
        let texts = texts.map(|t| t.into().trim().to_string());
        for kind in SectionKind::ALL {
            let text = &texts[kind.index()];
            if text.is_empty() {
                return Err(SectionError::Empty(kind));
            }
            if contains_tag(text) {
                return Err(SectionError::ContainsTag(kind));
            }
        }
        let conclusion = &texts[SectionKind::Conclusion.index()];
        if normalize_verdict(conclusion).is_none() {
            return Err(SectionError::InvalidConclusion(conclusion.clone()));
        }
        Ok(Self { texts })
    }

    pub fn section(&self, kind: SectionKind) -> &str {
        &self.texts[kind.index()]
    }

    pub fn sections(&self) -> impl Iterator<Item = CoTSection> + '_ {
        SectionKind::ALL.into_iter().map(|kind| CoTSection {
            kind,
            text: self.texts[kind.index()].clone(),
        })
    }

    pub fn verdict(&self) -> Verdict {
        normalize_verdict(self.section(SectionKind::Conclusion))
            .expect("conclusion validated at construction")
    }

    /// Returns a copy with one section replaced, re-checking invariants.
    pub fn with_section(&self, kind: SectionKind, text: impl Into<String>) -> Result<Self, SectionError> {
        let mut texts = self.texts.clone();
        texts[kind.index()] = text.into();
        Self::new(texts)
    }

    pub fn to_structured(&self) -> StructuredAnnotation {
        let [caption, facial_description, facial_attributes, reasoning, spoofing_description, conclusion] =
            self.texts.clone();
        StructuredAnnotation {
            caption,
            facial_description,
            facial_attributes,
            reasoning,
            spoofing_description,
            conclusion,
        }
    }
}

impl fmt::Display for CoTAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_annotation(self))
    }
}

/// Object form with one named string field per section, used in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredAnnotation {
    pub caption: String,
    pub facial_description: String,
    pub facial_attributes: String,
    pub reasoning: String,
    pub spoofing_description: String,
    pub conclusion: String,
}

impl TryFrom<StructuredAnnotation> for CoTAnnotation {
    type Error = SectionError;

    fn try_from(s: StructuredAnnotation) -> Result<Self, Self::Error> {
        CoTAnnotation::new([
            s.caption,
            s.facial_description,
            s.facial_attributes,
            s.reasoning,
            s.spoofing_description,
            s.conclusion,
        ])
    }
}

impl Serialize for CoTAnnotation {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_structured().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CoTAnnotation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = StructuredAnnotation::deserialize(deserializer)?;
        CoTAnnotation::try_from(s).map_err(serde::de::Error::custom)
    }
}

/// Structured form where any section may be absent, as submitted by editors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facial_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facial_attributes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spoofing_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<String>,
}

impl PartialAnnotation {
    pub fn get(&self, kind: SectionKind) -> Option<&str> {
        match kind {
            SectionKind::Caption => self.caption.as_deref(),
            SectionKind::FacialDescription => self.facial_description.as_deref(),
            SectionKind::FacialAttributes => self.facial_attributes.as_deref(),
            SectionKind::Reasoning => self.reasoning.as_deref(),
            SectionKind::SpoofingDescription => self.spoofing_description.as_deref(),
            SectionKind::Conclusion => self.conclusion.as_deref(),
        }
    }

    /// Renders the present sections in canonical tag form. Absent or blank
    /// sections are left out so that the parser reports them as missing.
    pub fn to_text(&self) -> String {
        SectionKind::ALL
            .into_iter()
            .filter_map(|kind| {
                self.get(kind)
                    .filter(|t| !t.trim().is_empty())
                    .map(|t| format!("{}{}{}", kind.open_tag(), t.trim(), kind.close_tag()))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Ok flag plus every independent violation found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<ParseError>,
}

pub fn serialize_annotation(a: &CoTAnnotation) -> String {
    let mut out = String::new();
    for (i, kind) in SectionKind::ALL.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push('<');
        out.push_str(kind.tag_name());
        out.push('>');
        out.push_str(a.section(kind));
        out.push_str("</");
        out.push_str(kind.tag_name());
        out.push('>');
    }
    out
}

pub fn parse_annotation(text: &str, strictness: Strictness) -> Result<CoTAnnotation, ParseError> {
    let (annotation, mut errors) = analyze(text, strictness);
    match annotation {
        Some(a) if errors.is_empty() => Ok(a),
        _ => Err(errors.remove(0)),
    }
}

pub fn validate_annotation(text: &str, strictness: Strictness) -> ValidationReport {
    let (annotation, errors) = analyze(text, strictness);
    ValidationReport {
        ok: annotation.is_some() && errors.is_empty(),
        errors,
    }
}

/// Finds the first `<Conclusion>…</Conclusion>` span anywhere in `text` and
/// normalizes its content. Returns `None` when there is no span or the content
/// is not exactly Yes/No after normalization.
pub fn extract_conclusion(text: &str) -> Option<Verdict> {
    const OPEN: &str = "<Conclusion>";
    const CLOSE: &str = "</Conclusion>";
    let start = text.find(OPEN)? + OPEN.len();
    let len = text[start..].find(CLOSE)?;
    normalize_verdict(&text[start..start + len])
}

/// Trims whitespace, strips trailing `.`, `!` and `;`, and case-folds.
pub fn normalize_verdict(content: &str) -> Option<Verdict> {
    let stripped = content
        .trim()
        .trim_end_matches(['.', '!', ';'])
        .trim_end();
    if stripped.eq_ignore_ascii_case("yes") {
        Some(Verdict::Yes)
    } else if stripped.eq_ignore_ascii_case("no") {
        Some(Verdict::No)
    } else {
        None
    }
}

/// True if `text` contains anything the tokenizer would read as a tag.
pub fn contains_tag(text: &str) -> bool {
    scan_tags(text).next().is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagToken<'a> {
    Open(SectionKind),
    Close(SectionKind),
    Unknown(&'a str),
}

#[derive(Debug, Clone, Copy)]
struct Tag<'a> {
    start: usize,
    end: usize,
    token: TagToken<'a>,
}

fn scan_tags(text: &str) -> impl Iterator<Item = Tag<'_>> + '_ {
    let bytes = text.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i] != b'<' {
                i += 1;
                continue;
            }
            let start = i;
            i += 1;
            if let Some(tag) = read_tag(text, start) {
                i = tag.end;
                return Some(tag);
            }
        }
        None
    })
}

fn read_tag(text: &str, start: usize) -> Option<Tag<'_>> {
    let bytes = text.as_bytes();
    let mut j = start + 1;
    let closing = bytes.get(j) == Some(&b'/');
    if closing {
        j += 1;
    }
    let name_start = j;
    if !bytes.get(j)?.is_ascii_alphabetic() {
        return None;
    }
    while j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b' ') {
        j += 1;
        if j - name_start > MAX_TAG_NAME_LEN {
            return None;
        }
    }
    if bytes.get(j) != Some(&b'>') {
        return None;
    }
    let name = &text[name_start..j];
    let token = match (SectionKind::from_tag_name(name), closing) {
        (Some(kind), false) => TagToken::Open(kind),
        (Some(kind), true) => TagToken::Close(kind),
        (None, _) => TagToken::Unknown(&text[start..=j]),
    };
    Some(Tag {
        start,
        end: j + 1,
        token,
    })
}

fn malformed(position: usize, detail: impl Into<String>) -> ParseError {
    ParseError::MalformedTag {
        position,
        detail: detail.into(),
    }
}

/// Single pass over the tag stream that keeps going after errors so that
/// every independent violation is reported.
fn analyze(text: &str, strictness: Strictness) -> (Option<CoTAnnotation>, Vec<ParseError>) {
    let strict = strictness == Strictness::Strict;
    let mut errors = Vec::new();
    let mut found: [Option<String>; 6] = Default::default();
    let mut highest_seen: Option<usize> = None;
    // (kind, position of open tag, content start)
    let mut open: Option<(SectionKind, usize, usize)> = None;
    let mut cursor = 0;

    let check_stray = |errors: &mut Vec<ParseError>, from: usize, to: usize| {
        if strict {
            if let Some(off) = text[from..to].find(|c: char| !c.is_whitespace()) {
                errors.push(ParseError::StrayText { position: from + off });
            }
        }
    };

    for tag in scan_tags(text) {
        match (open, tag.token) {
            (None, TagToken::Open(kind)) => {
                check_stray(&mut errors, cursor, tag.start);
                open = Some((kind, tag.start, tag.end));
            }
            (None, TagToken::Close(kind)) => {
                check_stray(&mut errors, cursor, tag.start);
                errors.push(malformed(tag.start, format!("closing </{kind}> without opening tag")));
            }
            (None, TagToken::Unknown(raw)) => {
                if strict {
                    check_stray(&mut errors, cursor, tag.start);
                    errors.push(malformed(tag.start, format!("unknown tag {raw}")));
                }
            }
            (Some((kind, open_pos, content_start)), TagToken::Close(closed)) if closed == kind => {
                let content = text[content_start..tag.start].trim();
                if content.is_empty() {
                    errors.push(ParseError::EmptySection { kind, position: open_pos });
                }
                if found[kind.index()].is_some() {
                    errors.push(ParseError::DuplicateSection { kind, position: open_pos });
                } else {
                    if strict && highest_seen.is_some_and(|h| h > kind.index()) {
                        errors.push(ParseError::OutOfOrder { kind, position: open_pos });
                    }
                    highest_seen = Some(highest_seen.map_or(kind.index(), |h| h.max(kind.index())));
                    found[kind.index()] = Some(content.to_string());
                }
                open = None;
            }
            (Some((kind, open_pos, _)), TagToken::Close(other)) => {
                errors.push(malformed(
                    tag.start,
                    format!("</{other}> closes <{kind}> opened at byte {open_pos}"),
                ));
                open = None;
            }
            (Some((kind, open_pos, _)), TagToken::Open(next)) => {
                errors.push(malformed(
                    open_pos,
                    format!("<{kind}> is not closed before <{next}>"),
                ));
                open = Some((next, tag.start, tag.end));
            }
            (Some((kind, _, _)), TagToken::Unknown(raw)) => {
                errors.push(malformed(tag.start, format!("unknown tag {raw} inside <{kind}>")));
                continue;
            }
        }
        cursor = tag.end;
    }

    if let Some((kind, open_pos, _)) = open {
        errors.push(malformed(open_pos, format!("<{kind}> is never closed")));
    } else {
        check_stray(&mut errors, cursor, text.len());
    }

    for kind in SectionKind::ALL {
        if found[kind.index()].is_none() {
            errors.push(ParseError::MissingSection { kind });
        }
    }

    if let Some(conclusion) = &found[SectionKind::Conclusion.index()] {
        if !conclusion.is_empty() && normalize_verdict(conclusion).is_none() {
            errors.push(ParseError::InvalidConclusion {
                found: conclusion.clone(),
            });
        }
    }

    if !errors.is_empty() {
        return (None, errors);
    }
    let texts = found.map(|t| t.expect("all sections present"));
    match CoTAnnotation::new(texts) {
        Ok(a) => (Some(a), errors),
        // Unreachable in practice: every constructor check is mirrored above.
        Err(e) => (None, vec![malformed(0, e.to_string())]),
    }
}
