//! Line-delimited record files. The first line is a schema header such as
//! `{"schema":"facecot/samples","version":1}`; every following non-blank line
//! is one JSON record.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const SAMPLES: &str = "facecot/samples";
pub const ATTEMPTS: &str = "facecot/attempts";
pub const STAGE1: &str = "facecot/stage1";
pub const STAGE2: &str = "facecot/stage2";
pub const PAIRS: &str = "facecot/pairs";
pub const EVENTS: &str = "facecot/events";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
}

impl ManifestHeader {
    pub fn new(schema: &str) -> Self {
        Self {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
        }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed manifest line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("manifest schema {found:?} (version {version}) where {expected:?} version {SCHEMA_VERSION} was expected")]
    SchemaMismatch {
        expected: String,
        found: String,
        version: u32,
    },
}

pub fn write_header<W: Write>(w: &mut W, schema: &str) -> io::Result<()> {
    serde_json::to_writer(&mut *w, &ManifestHeader::new(schema))?;
    w.write_all(b"\n")
}

pub fn write_record<W: Write, T: Serialize>(w: &mut W, record: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")
}

pub fn write_manifest<'a, W, T, I>(w: &mut W, schema: &str, records: I) -> io::Result<()>
where
    W: Write,
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    write_header(w, schema)?;
    for r in records {
        write_record(w, r)?;
    }
    Ok(())
}

pub fn manifest_string<'a, T, I>(schema: &str, records: I) -> String
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut buf = Vec::new();
    write_manifest(&mut buf, schema, records).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn write_manifest_file<'a, T, I>(path: &Path, schema: &str, records: I) -> io::Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut w = BufWriter::new(File::create(path)?);
    write_manifest(&mut w, schema, records)?;
    w.flush()
}

/// Calls `f` for each record with its 1-based line number. A header line is
/// optional; when present its schema must match.
pub fn for_each_record<R, T, F>(reader: R, schema: &str, mut f: F) -> Result<(), ManifestError>
where
    R: BufRead,
    T: DeserializeOwned,
    F: FnMut(usize, T) -> Result<(), ManifestError>,
{
    let mut first = true;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if std::mem::take(&mut first) {
            if let Some(header) = try_header(&line) {
                if header.schema != schema || header.version != SCHEMA_VERSION {
                    return Err(ManifestError::SchemaMismatch {
                        expected: schema.to_string(),
                        found: header.schema,
                        version: header.version,
                    });
                }
                continue;
            }
        }
        let record = serde_json::from_str(&line).map_err(|e| ManifestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        f(line_no, record)?;
    }
    Ok(())
}

fn try_header(line: &str) -> Option<ManifestHeader> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    value.get("schema")?;
    serde_json::from_value(value).ok()
}

pub fn read_manifest<R: BufRead, T: DeserializeOwned>(reader: R, schema: &str) -> Result<Vec<T>, ManifestError> {
    let mut out = Vec::new();
    for_each_record(reader, schema, |_, r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_manifest_file<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, ManifestError> {
    read_manifest(BufReader::new(File::open(path)?), schema)
}
