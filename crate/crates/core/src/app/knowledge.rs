//! Append-only store of classified text, one JSON record per line.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, InputFormat, LineError};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;
use crate::trainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: u64,
    pub text: String,
    pub predicted_label: usize,
    pub label_name: String,
    /// Probability of the predicted class.
    pub confidence: f64,
    pub source: String,
    /// RFC 3339, UTC.
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

/// A classified text that has not been stored yet.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub text: String,
    pub predicted_label: usize,
    pub confidence: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelNames(pub BTreeMap<usize, String>);

impl Default for LabelNames {
    fn default() -> Self {
        LabelNames(BTreeMap::from([
            (0, "unacceptable".to_string()),
            (1, "acceptable".to_string()),
        ]))
    }
}

impl LabelNames {
    pub fn name(&self, label: usize) -> String {
        self.0.get(&label).cloned().unwrap_or_else(|| format!("label_{label}"))
    }

    /// Parses `0=bad,1=good`.
    pub fn parse(names: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for part in names.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("label name {part:?} is not of the form index=name")))?;
            let k = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("label index {k:?} is not an integer")))?;
            map.insert(k, v.trim().to_string());
        }
        Ok(LabelNames(map))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Query {
    pub label: Option<usize>,
    /// Case-insensitive substring of the text.
    pub keyword: Option<String>,
    pub limit: Option<usize>,
}

impl Query {
    pub fn matches(&self, r: &KnowledgeRecord) -> bool {
        self.label.is_none_or(|l| r.predicted_label == l)
            && self
                .keyword
                .as_ref()
                .is_none_or(|k| r.text.to_lowercase().contains(&k.to_lowercase()))
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    path: PathBuf,
}

impl KnowledgeBase {
    /// A missing file is an empty store.
    pub fn open(path: impl Into<PathBuf>) -> Self {
        KnowledgeBase { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All records in storage order. A malformed line is an error naming it.
    pub fn records(&self) -> Result<Vec<KnowledgeRecord>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        let mut out: Vec<KnowledgeRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: KnowledgeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("corrupt store record: {e}"),
            })?;
            if out.last().is_some_and(|prev| prev.id >= rec.id) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("record id {} is not increasing", rec.id),
                });
            }
            out.push(rec);
        }
        Ok(out)
    }

    /// Stores `records` with fresh ids. Each record is written with a single
    /// append so a crash leaves at most one partial line.
    pub fn append(&self, records: Vec<NewRecord>, labels: &LabelNames) -> Result<Vec<KnowledgeRecord>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let mut next = self.records()?.last().map_or(1, |r| r.id + 1);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let mut stored = Vec::with_capacity(records.len());
        for r in records {
            let rec = KnowledgeRecord {
                id: next,
                label_name: labels.name(r.predicted_label),
                text: r.text,
                predicted_label: r.predicted_label,
                confidence: r.confidence,
                source: r.source,
                created_at: created_at.clone(),
                feedback: None,
            };
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
            next += 1;
            stored.push(rec);
        }
        file.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(stored)
    }

    /// Matching records, newest first.
    pub fn query(&self, q: &Query) -> Result<Vec<KnowledgeRecord>> {
        let mut hits: Vec<KnowledgeRecord> = self.records()?.into_iter().filter(|r| q.matches(r)).collect();
        hits.reverse();
        if let Some(limit) = q.limit {
            hits.truncate(limit);
        }
        Ok(hits)
    }
}

/// Classifies texts with `model`: argmax label and its probability.
pub fn classify(model: &Model, vocab: &Vocabulary, texts: &[String], max_len: usize) -> Result<Vec<(usize, f64)>> {
    let examples = texts
        .iter()
        .map(|t| vocab.encode(t, max_len))
        .collect::<Result<Vec<_>>>()?;
    let logits = trainer::logits(model, &examples, 64)?;
    let probs = logits.softmax_rows()?;
    let c = model.config().num_labels;
    Ok(probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub stored: Vec<KnowledgeRecord>,
    /// Lines that could not be parsed; the rest were stored.
    pub errors: Vec<LineError>,
}

/// Reads `input`, classifies each parsable line and appends it to `store`.
pub fn ingest_and_classify(
    model: &Model,
    vocab: &Vocabulary,
    input: &Path,
    format: InputFormat,
    store: &KnowledgeBase,
    labels: &LabelNames,
    max_len: usize,
) -> Result<IngestReport> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let (rows, errors) = data::parse_lenient(&text, format);
    let texts: Vec<String> = rows.iter().map(|(_, r)| r.text.clone()).collect();
    let predictions = if texts.is_empty() {
        Vec::new()
    } else {
        classify(model, vocab, &texts, max_len)?
    };
    let source = input.display().to_string();
    let new = texts
        .into_iter()
        .zip(predictions)
        .map(|(text, (predicted_label, confidence))| NewRecord {
            text,
            predicted_label,
            confidence,
            source: source.clone(),
        })
        .collect();
    Ok(IngestReport {
        stored: store.append(new, labels)?,
        errors,
    })
}
