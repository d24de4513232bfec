use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Difficulty, Example};
use crate::error::{Error, Result};

/// Column mapping for a headed, tab-separated file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsvSchema {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: String,
    /// Optional difficulty column; read when present in the header.
    pub difficulty: Option<String>,
    /// Label strings in class-index order.
    pub labels: Vec<String>,
}

impl TsvSchema {
    /// Schema written by [`write_tsv`]: `text_a`, `text_b`, `label`,
    /// `difficulty`, with labels `0..num_classes`.
    pub fn standard(num_classes: usize) -> Self {
        TsvSchema {
            text_a: "text_a".into(),
            text_b: Some("text_b".into()),
            label: "label".into(),
            difficulty: Some("difficulty".into()),
            labels: (0..num_classes).map(|k| k.to_string()).collect(),
        }
    }
}

pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tsv(file, schema)
}

pub fn read_tsv<R: Read>(reader: R, schema: &TsvSchema) -> Result<Vec<Example>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| column(name).ok_or_else(|| Error::Schema(format!("missing column `{name}` in header")));
    let a_col = required(&schema.text_a)?;
    let label_col = required(&schema.label)?;
    // text_b is optional in the file: single-sentence tasks omit it.
    let b_col = schema.text_b.as_deref().and_then(column);
    let diff_col = schema.difficulty.as_deref().and_then(column);

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |col: usize, name: &str| {
            record.get(col).ok_or_else(|| Error::Data {
                line,
                msg: format!("missing `{name}` field"),
            })
        };
        let text_a = field(a_col, &schema.text_a)?.to_string();
        let raw_label = field(label_col, &schema.label)?;
        let label = schema
            .labels
            .iter()
            .position(|l| l == raw_label)
            .ok_or_else(|| Error::Data {
                line,
                msg: format!("unknown label `{raw_label}`"),
            })?;
        let text_b = match b_col {
            Some(c) => match record.get(c) {
                Some("") | None => None,
                Some(s) => Some(s.to_string()),
            },
            None => None,
        };
        let difficulty = match diff_col.and_then(|c| record.get(c)) {
            Some("") | None => None,
            Some(s) => Some(s.parse::<Difficulty>().map_err(|e| Error::Data {
                line,
                msg: e.to_string(),
            })?),
        };
        out.push(Example {
            text_a,
            text_b,
            label,
            difficulty,
        });
    }
    Ok(out)
}

/// Writes `examples` in the [`TsvSchema::standard`] layout.
pub fn write_tsv<W: Write>(writer: W, examples: &[Example], labels: &[String]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_writer(writer);
    w.write_record(["text_a", "text_b", "label", "difficulty"])?;
    for ex in examples {
        let label = labels.get(ex.label).ok_or(Error::Index {
            what: "label list",
            index: ex.label,
            bound: labels.len(),
        })?;
        let diff = ex.difficulty.map(|d| d.to_string()).unwrap_or_default();
        w.write_record([
            ex.text_a.as_str(),
            ex.text_b.as_deref().unwrap_or(""),
            label.as_str(),
            diff.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<tsv writer>", e))?;
    Ok(())
}

pub fn save_tsv(path: &Path, examples: &[Example], labels: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tsv(file, examples, labels)
}
