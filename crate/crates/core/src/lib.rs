//! Structured chain-of-thought annotations for face anti-spoofing: the
//! annotation grammar, the verify-and-retry annotation pipeline, reward
//! scoring, dataset building and evaluation metrics.

pub mod client;
pub mod dataset;
pub mod eval;
pub mod manifest;
pub mod pipeline;
pub mod prompt;
pub mod reward;
pub mod schema;
pub mod taxonomy;

pub use schema::{
    extract_conclusion, normalize_verdict, parse_annotation, serialize_annotation, validate_annotation,
    CoTAnnotation, CoTSection, ParseError, SectionKind, Strictness, ValidationReport, Verdict,
};
pub use taxonomy::{Category, SampleRecord, Subtype};
