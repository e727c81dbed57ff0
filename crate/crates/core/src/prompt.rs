//! Prompt assembly for the annotator: image, examiner system prompt,
//! question, optional per-subtype hint and the ground-truth label.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::Verdict;
use crate::taxonomy::{RecordError, SampleRecord, Subtype, UnknownSubtype};

pub const DEFAULT_SYSTEM_PROMPT: &str = "In a face anti-spoofing detection system, a person has submitted an image for inspection. Now please assume the role of the examiner and respond to the question. I need you to strictly follow the format containing six specific parts: caption, facical description, facial attributes, reasoning, spoofing description, and conclusion. It is crucial that you adhere exactly to the outlined structure, and that the final answer in conclusion matches the standard correct answer exactly. Further explanation: In caption, provide a holistic description of the image. In facial description, focus on describing the facial features of the person in the image. In facial attributes, list the facial attributes. In reasoning, perform step-by-step logical reasoning based on the image description, facial description, and facial attributes. In spoofing description, describe the spoofing method and highlight the critical spoofing characteristics in detail. In conclusion, give the final answer \u{201c}Yes\u{201d} or \u{201c}No\u{201d} that must match the standard answer exactly. Format as follows: <Caption> [Holistic description of the image] </Caption> <Facial Description> [Detailed description of the person\u{2019}s facial features] </Facial Description> <Facial Attributes> [Describe facial attributes: \"eyes\": ..., \"mouth\": ...etc.] </Facial Attributes> <Reasoning> [Step-by-step logical reasoning based on the above] </Reasoning> <Spoofing Description> [Details of the spoofing method: ...] </Spoofing Description> <Conclusion> [Answer \u{201c}Yes\u{201d} or \u{201c}No\u{201d} matching the standard answer exactly] </Conclusion> Please carefully apply this format to analyze the given image and answer the related question.";

pub const DEFAULT_QUESTION: &str = "Is there any spoofing in this face image?";

/// Per-subtype hints. Subtypes not listed (living faces and masks) get none.
pub const DEFAULT_HINTS: [(Subtype, &str); 10] = [
    (Subtype::Photo, "Photographing a printed photo constitutes spoofing."),
    (Subtype::Newspaper, "Photographing a newspaper page constitutes spoofing."),
    (Subtype::Poster, "Photographing a poster constitutes spoofing."),
    (Subtype::Album, "Photographing an album page constitutes spoofing."),
    (Subtype::A4, "Photographing an A4-printed image constitutes spoofing."),
    (Subtype::FacialPrint, "Photographing a facial photo constitutes spoofing."),
    (Subtype::UpperBody, "Photographing a printed upper-body image constitutes spoofing."),
    (Subtype::Phone, "Photographing a phone screen constitutes spoofing."),
    (Subtype::Pad, "Photographing a tablet display constitutes spoofing."),
    (Subtype::PC, "Photographing a computer screen constitutes spoofing."),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptConfig {
    pub system_prompt: String,
    pub question: String,
    pub hints: BTreeMap<Subtype, String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            question: DEFAULT_QUESTION.to_string(),
            hints: DEFAULT_HINTS
                .iter()
                .map(|(s, h)| (*s, (*h).to_string()))
                .collect(),
        }
    }
}

/// On-disk form; missing fields fall back to the defaults.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptConfigFile {
    system_prompt: Option<String>,
    question: Option<String>,
    hints: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    UnknownSubtype(#[from] UnknownSubtype),
    #[error(transparent)]
    InvalidSample(#[from] RecordError),
    #[error("cannot read prompt config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid prompt config: {0}")]
    Json(#[from] serde_json::Error),
}

impl PromptConfig {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let file: PromptConfigFile = serde_json::from_str(text)?;
        let defaults = Self::default();
        let hints = match file.hints {
            None => defaults.hints,
            Some(map) => map
                .into_iter()
                .map(|(k, v)| Ok((k.parse::<Subtype>()?, v)))
                .collect::<Result<_, PromptError>>()?,
        };
        Ok(Self {
            system_prompt: file.system_prompt.unwrap_or(defaults.system_prompt),
            question: file.question.unwrap_or(defaults.question),
            hints,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = PromptConfigFile {
            system_prompt: Some(self.system_prompt.clone()),
            question: Some(self.question.clone()),
            hints: Some(
                self.hints
                    .iter()
                    .map(|(k, v)| (k.name().to_string(), v.clone()))
                    .collect(),
            ),
        };
        serde_json::to_string_pretty(&file).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub sample_id: String,
    pub image_ref: String,
    pub system_prompt: String,
    pub question: String,
    pub hint: Option<String>,
    pub label: Verdict,
}

impl PromptBundle {
    /// Text part of the user turn: question, hint and the standard answer.
    pub fn user_text(&self) -> String {
        let mut text = self.question.clone();
        if let Some(hint) = &self.hint {
            text.push_str("\nHint: ");
            text.push_str(hint);
        }
        text.push_str("\nStandard answer: ");
        text.push_str(self.label.as_str());
        text
    }
}

pub fn assemble_prompt(sample: &SampleRecord, cfg: &PromptConfig) -> Result<PromptBundle, PromptError> {
    sample.validate()?;
    Ok(PromptBundle {
        sample_id: sample.id.clone(),
        image_ref: sample.image_ref.clone(),
        system_prompt: cfg.system_prompt.clone(),
        question: cfg.question.clone(),
        hint: cfg.hints.get(&sample.subtype).cloned(),
        label: sample.label,
    })
}
