//! CoLA-format ingestion, seeded splitting, permutation and batching.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub source_code: String,
    pub label: usize,
    pub author_annotation: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// `source \t label \t annotation \t sentence`
    #[default]
    Cola,
    /// `label \t sentence`
    Simple,
    /// One sentence per line, unlabeled.
    Text,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cola" => Ok(InputFormat::Cola),
            "simple" => Ok(InputFormat::Simple),
            "text" => Ok(InputFormat::Text),
            other => Err(Error::Config(format!("unknown input format {other:?}"))),
        }
    }
}

/// A line that could not be parsed; `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl From<LineError> for Error {
    fn from(e: LineError) -> Self {
        Error::Parse {
            line: e.line,
            message: e.message,
        }
    }
}

fn parse_label(raw: &str) -> std::result::Result<usize, String> {
    match raw.trim().parse::<i64>() {
        Ok(v @ (0 | 1)) => Ok(v as usize),
        Ok(v) => Err(format!("label {v} is not 0 or 1")),
        Err(_) => Err(format!("label {raw:?} is not an integer")),
    }
}

fn parse_line(line: &str, lineno: usize, format: InputFormat) -> std::result::Result<LabeledSentence, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    let (source_code, label, annotation, text) = match format {
        InputFormat::Cola => {
            if cols.len() != 4 {
                return Err(format!("expected 4 tab-separated columns, found {}", cols.len()));
            }
            (cols[0].to_string(), parse_label(cols[1])?, cols[2].to_string(), cols[3])
        }
        InputFormat::Simple => {
            if cols.len() != 2 {
                return Err(format!("expected 2 tab-separated columns, found {}", cols.len()));
            }
            (format!("line{lineno}"), parse_label(cols[0])?, String::new(), cols[1])
        }
        InputFormat::Text => (format!("line{lineno}"), 0, String::new(), line),
    };
    if text.trim().is_empty() {
        return Err("empty sentence".into());
    }
    Ok(LabeledSentence {
        source_code,
        label,
        author_annotation: annotation,
        text: text.to_string(),
    })
}

/// Parses every line, collecting malformed ones instead of stopping.
/// Blank lines are skipped.
pub fn parse_lenient(text: &str, format: InputFormat) -> (Vec<(usize, LabeledSentence)>, Vec<LineError>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1, format) {
            Ok(rec) => ok.push((i + 1, rec)),
            Err(message) => bad.push(LineError { line: i + 1, message }),
        }
    }
    (ok, bad)
}

/// Strict parse: the first malformed line is an error naming it.
pub fn parse_records(text: &str, format: InputFormat) -> Result<Vec<LabeledSentence>> {
    let (ok, bad) = parse_lenient(text, format);
    if let Some(first) = bad.into_iter().next() {
        return Err(first.into());
    }
    Ok(ok.into_iter().map(|(_, r)| r).collect())
}

pub fn load_records(path: impl AsRef<Path>, format: InputFormat) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, format)
}

/// Four-column CoLA TSV without a header.
pub fn load_cola_tsv(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>> {
    load_records(path, InputFormat::Cola)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<LabeledSentence>,
    pub validation: Vec<LabeledSentence>,
    pub split_seed: u64,
}

/// Size of the training part: `round(n·ratio)`, halves rounding up.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio).round() as usize
}

/// Seeded shuffle, then the first `round(n·ratio)` records train.
pub fn split(data: &[LabeledSentence], ratio: f64, seed: u64) -> Result<SplitDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    if data.len() < 2 {
        return Err(Error::Input(format!("cannot split {} records", data.len())));
    }
    let mut shuffled = data.to_vec();
    rng::shuffle(&mut shuffled, &mut rng::stream(rng::derive_seed(seed, rng::tag::SPLIT)));
    let validation = shuffled.split_off(train_size(data.len(), ratio));
    Ok(SplitDataset {
        train: shuffled,
        validation,
        split_seed: seed,
    })
}

/// Uniform seeded permutation.
pub fn permute<T: Clone>(data: &[T], seed: u64) -> Vec<T> {
    let mut out = data.to_vec();
    rng::shuffle(&mut out, &mut rng::stream(seed));
    out
}

/// Consecutive chunks; the last may be short.
pub fn batches<T>(data: &[T], batch_size: usize) -> Result<std::slice::Chunks<'_, T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(data.chunks(batch_size))
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(n: usize) -> Vec<LabeledSentence> {
        (0..n)
            .map(|i| LabeledSentence {
                source_code: format!("s{i}"),
                label: i % 2,
                author_annotation: String::new(),
                text: format!("sentence number {i}"),
            })
            .collect()
    }

    #[test]
    fn cola_line_mapping() {
        let recs = parse_records("gj04\t1\t\tThe dog barked.\n", InputFormat::Cola).unwrap();
        assert_eq!(
            recs,
            vec![LabeledSentence {
                source_code: "gj04".into(),
                label: 1,
                author_annotation: String::new(),
                text: "The dog barked.".into(),
            }]
        );
        assert!(parse_records("", InputFormat::Cola).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let text = "a\t1\t\tok\nb\t0\tbad\nc\tx\t\tnope\n";
        match parse_records(text, InputFormat::Cola) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let (ok, bad) = parse_lenient(text, InputFormat::Cola);
        assert_eq!(ok.len(), 1);
        assert_eq!(bad.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn simple_and_text_formats() {
        let recs = parse_records("1\tA sentence\n0\tanother one\n", InputFormat::Simple).unwrap();
        assert_eq!(recs[1].label, 0);
        assert_eq!(recs[1].text, "another one");
        let recs = parse_records("just text\n\nmore\n", InputFormat::Text).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(parse_records("2\tbad label\n", InputFormat::Simple).is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(train_size(8551, 0.8), 6841);
        let s = split(&records(10), 0.8, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (8, 2));
        let again = split(&records(10), 0.8, 1).unwrap();
        assert_eq!(s, again);
        assert!(matches!(split(&records(1), 0.8, 1), Err(Error::Input(_))));
        assert!(split(&records(5), 1.0, 1).is_err());
    }

    #[test]
    fn batch_counts() {
        let data: Vec<usize> = (0..6841).collect();
        let b: Vec<_> = batches(&data, 16).unwrap().collect();
        assert_eq!(b.len(), 428);
        assert_eq!(b.last().unwrap().len(), 9);
        assert_eq!(batches(&data[..16], 16).unwrap().count(), 1);
        assert_eq!(3 * steps_per_epoch(6841, 16), 1284);
    }

    #[test]
    fn permutation_golden_orders() {
        let data: Vec<usize> = (0..100).collect();
        for (s, t) in [(1u64, 2u64), (7, 8), (42, 43)] {
            assert_ne!(permute(&data, s), permute(&data, t));
        }
        assert_eq!(permute(&[5], 9), vec![5]);
        // Recorded once from the pinned ChaCha8 stream.
        let golden = permute(&(0..10).collect::<Vec<usize>>(), 2024);
        assert_eq!(golden, GOLDEN_2024);
    }

    const GOLDEN_2024: [usize; 10] = [5, 0, 2, 8, 3, 4, 6, 9, 1, 7];

    proptest! {
        #[test]
        fn split_is_partition(n in 2usize..300, ratio in 0.05f64..0.95, seed: u64) {
            let data = records(n);
            let s = split(&data, ratio, seed).unwrap();
            let mut all: Vec<_> = s.train.iter().chain(&s.validation).cloned().collect();
            all.sort();
            let mut orig = data.clone();
            orig.sort();
            prop_assert_eq!(all, orig);
            prop_assert_eq!(s.train.len(), train_size(n, ratio));
        }

        #[test]
        fn permute_preserves_multiset(v in prop::collection::vec(0u8..5, 0..50), seed: u64) {
            let mut p = permute(&v, seed);
            p.sort();
            let mut o = v.clone();
            o.sort();
            prop_assert_eq!(p, o);
        }
    }
}
