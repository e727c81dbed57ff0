//! Sample categories, the fourteen attack subtypes plus living faces, and the
//! sample record that ties an image to its ground truth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Live,
    Replay,
    Print,
    Mask,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Live, Category::Replay, Category::Print, Category::Mask];

    pub fn subtypes(self) -> Vec<Subtype> {
        Subtype::ALL.into_iter().filter(|s| s.category() == self).collect()
    }

    pub fn label(self) -> Verdict {
        match self {
            Category::Live => Verdict::No,
            _ => Verdict::Yes,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// Attack subtypes in the order of the published statistics table, followed
/// by living faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Subtype {
    Photo,
    Newspaper,
    Poster,
    Album,
    A4,
    FacialPrint,
    UpperBody,
    Phone,
    Pad,
    PC,
    Mask3D,
    RegionMask,
    Garagekit,
    Adultdull,
    Living,
}

impl Subtype {
    pub const ALL: [Subtype; 15] = [
        Subtype::Photo,
        Subtype::Newspaper,
        Subtype::Poster,
        Subtype::Album,
        Subtype::A4,
        Subtype::FacialPrint,
        Subtype::UpperBody,
        Subtype::Phone,
        Subtype::Pad,
        Subtype::PC,
        Subtype::Mask3D,
        Subtype::RegionMask,
        Subtype::Garagekit,
        Subtype::Adultdull,
        Subtype::Living,
    ];

    pub fn category(self) -> Category {
        use Subtype::*;
        match self {
            Photo | Newspaper | Poster | Album | A4 | FacialPrint | UpperBody => Category::Print,
            Phone | Pad | PC => Category::Replay,
            Mask3D | RegionMask | Garagekit | Adultdull => Category::Mask,
            Living => Category::Live,
        }
    }

    /// Identifier used in manifests and config files.
    pub fn name(self) -> &'static str {
        use Subtype::*;
        match self {
            Photo => "Photo",
            Newspaper => "Newspaper",
            Poster => "Poster",
            Album => "Album",
            A4 => "A4",
            FacialPrint => "FacialPrint",
            UpperBody => "UpperBody",
            Phone => "Phone",
            Pad => "Pad",
            PC => "PC",
            Mask3D => "Mask3D",
            RegionMask => "RegionMask",
            Garagekit => "Garagekit",
            Adultdull => "Adultdull",
            Living => "Living",
        }
    }

    /// Human-readable name used in statistics tables.
    pub fn display_name(self) -> &'static str {
        use Subtype::*;
        match self {
            FacialPrint => "Facial print",
            UpperBody => "Upper body",
            Mask3D => "3D mask",
            RegionMask => "Region mask",
            other => other.name(),
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown subtype {0:?}")]
pub struct UnknownSubtype(pub String);

impl FromStr for Subtype {
    type Err = UnknownSubtype;

    /// Accepts the identifier or the table name, ignoring case, spaces,
    /// hyphens and underscores.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = |x: &str| {
            x.chars()
                .filter(|c| !matches!(c, ' ' | '-' | '_'))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        };
        let wanted = key(s);
        Subtype::ALL
            .into_iter()
            .find(|t| key(t.name()) == wanted || key(t.display_name()) == wanted)
            .ok_or_else(|| UnknownSubtype(s.to_string()))
    }
}

impl TryFrom<String> for Subtype {
    type Error = UnknownSubtype;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Subtype> for String {
    fn from(s: Subtype) -> Self {
        s.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: String,
    /// Ground truth; `Yes` for attacks.
    pub label: Verdict,
    pub category: Category,
    pub subtype: Subtype,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("sample has an empty id")]
    EmptyId,
    #[error("sample {id}: subtype {subtype} belongs to {expected}, not {found}")]
    CategoryMismatch {
        id: String,
        subtype: Subtype,
        expected: Category,
        found: Category,
    },
    #[error("sample {id}: label {label} contradicts category {category}")]
    LabelMismatch {
        id: String,
        label: Verdict,
        category: Category,
    },
}

impl SampleRecord {
    /// Builds a record whose category and label follow from the subtype.
    pub fn new(id: impl Into<String>, image_ref: impl Into<String>, subtype: Subtype) -> Self {
        let category = subtype.category();
        Self {
            id: id.into(),
            image_ref: image_ref.into(),
            label: category.label(),
            category,
            subtype,
        }
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.id.trim().is_empty() {
            return Err(RecordError::EmptyId);
        }
        let expected = self.subtype.category();
        if expected != self.category {
            return Err(RecordError::CategoryMismatch {
                id: self.id.clone(),
                subtype: self.subtype,
                expected,
                found: self.category,
            });
        }
        if self.category.label() != self.label {
            return Err(RecordError::LabelMismatch {
                id: self.id.clone(),
                label: self.label,
                category: self.category,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_category_has_expected_subtypes() {
        assert_eq!(Category::Print.subtypes().len(), 7);
        assert_eq!(Category::Replay.subtypes(), vec![Subtype::Phone, Subtype::Pad, Subtype::PC]);
        assert_eq!(Category::Mask.subtypes().len(), 4);
        assert_eq!(Category::Live.subtypes(), vec![Subtype::Living]);
        let attacks = Subtype::ALL.iter().filter(|s| **s != Subtype::Living).count();
        assert_eq!(attacks, 14);
    }

    #[test]
    fn subtype_parsing_accepts_table_names() {
        assert_eq!("3D mask".parse::<Subtype>().unwrap(), Subtype::Mask3D);
        assert_eq!("Facial print".parse::<Subtype>().unwrap(), Subtype::FacialPrint);
        assert_eq!("upper_body".parse::<Subtype>().unwrap(), Subtype::UpperBody);
        assert_eq!("pc".parse::<Subtype>().unwrap(), Subtype::PC);
        assert_eq!("Hologram".parse::<Subtype>(), Err(UnknownSubtype("Hologram".into())));
    }

    #[test]
    fn record_invariants() {
        assert!(SampleRecord::new("a", "a.jpg", Subtype::Pad).validate().is_ok());
        let mut r = SampleRecord::new("b", "b.jpg", Subtype::Living);
        assert_eq!(r.label, Verdict::No);
        r.label = Verdict::Yes;
        assert!(matches!(r.validate(), Err(RecordError::LabelMismatch { .. })));
        let mut r = SampleRecord::new("c", "c.jpg", Subtype::Phone);
        r.category = Category::Print;
        assert!(matches!(r.validate(), Err(RecordError::CategoryMismatch { .. })));
    }

    #[test]
    fn record_json_uses_subtype_identifier() {
        let r = SampleRecord::new("s1", "img/s1.png", Subtype::Mask3D);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"id":"s1","image_ref":"img/s1.png","label":"Yes","category":"Mask","subtype":"Mask3D"}"#
        );
        let bad = json.replace("Mask3D", "Hologram");
        let err = serde_json::from_str::<SampleRecord>(&bad).unwrap_err();
        assert!(err.to_string().contains("unknown subtype"));
    }
}
