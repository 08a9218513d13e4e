//! Python bindings: vocabulary, model, training, metrics and the knowledgebase.

use std::collections::BTreeSet;

use mmtl::app::{KnowledgeBase, KnowledgeRecord, LabelNames, NewRecord, Query};
use mmtl::data::{self, LabeledSentence};
use mmtl::encoder::{Model, ModelConfig};
use mmtl::metrics::MetricsReport;
use mmtl::tokenizer::Vocabulary;
use mmtl::trainer::{self, MultiTrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: mmtl::Error) -> PyErr {
    match e {
        mmtl::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tp", r.confusion.tp)?;
    d.set_item("fp", r.confusion.fp)?;
    d.set_item("tn", r.confusion.tn)?;
    d.set_item("fn", r.confusion.fn_)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("mcc", r.mcc)?;
    d.set_item("roc_auc", r.roc_auc)?;
    d.set_item("loss", r.loss)?;
    Ok(d)
}

fn record_dict<'py>(py: Python<'py>, r: &KnowledgeRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", r.id)?;
    d.set_item("text", &r.text)?;
    d.set_item("predicted_label", r.predicted_label)?;
    d.set_item("label_name", &r.label_name)?;
    d.set_item("confidence", r.confidence)?;
    d.set_item("source", &r.source)?;
    d.set_item("created_at", &r.created_at)?;
    d.set_item("feedback", r.feedback.as_deref())?;
    Ok(d)
}

fn sentences(records: Vec<(String, usize)>) -> Vec<LabeledSentence> {
    records
        .into_iter()
        .map(|(text, label)| LabeledSentence {
            source_code: "python".into(),
            label,
            author_annotation: String::new(),
            text,
        })
        .collect()
}

fn parse_config(config: Option<&str>) -> PyResult<MultiTrainConfig> {
    let cfg: MultiTrainConfig = match config {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => MultiTrainConfig::default(),
    };
    cfg.train.validate().map_err(py_err)?;
    Ok(cfg)
}

#[pyclass(name = "Vocabulary", module = "mmtl_py")]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    fn build(corpus: Vec<String>, max_size: usize) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::build(&corpus, max_size).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        self.inner.tokenize(text)
    }

    /// Padded `input_ids` of `[CLS] text [SEP]`.
    fn encode(&self, text: &str, max_len: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.encode(text, max_len).map_err(py_err)?.input_ids)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }
}

#[pyclass(name = "Model", module = "mmtl_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, num_layers=2, hidden_size=64, num_heads=4, ff_size=128, max_positions=64, dropout=0.1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        num_layers: usize,
        hidden_size: usize,
        num_heads: usize,
        ff_size: usize,
        max_positions: usize,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            num_layers,
            hidden_size,
            num_heads,
            ff_size,
            max_positions,
            dropout,
            ..ModelConfig::mini(vocab_size)
        };
        Ok(PyModel {
            inner: Model::init(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_checkpoint().to_bytes().map_err(py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn kept_heads(&self, layer: usize) -> Vec<usize> {
        self.inner.kept_heads(layer)
    }

    fn prune_heads(&mut self, layer: usize, heads: Vec<usize>) -> PyResult<()> {
        let heads: BTreeSet<usize> = heads.into_iter().collect();
        self.inner.prune_heads(layer, &heads).map_err(py_err)
    }

    /// Class probabilities for each text.
    fn predict_proba(&self, vocab: &PyVocabulary, texts: Vec<String>, max_len: usize) -> PyResult<Vec<Vec<f64>>> {
        let batch = texts
            .iter()
            .map(|t| vocab.inner.encode(t, max_len))
            .collect::<mmtl::Result<Vec<_>>>()
            .map_err(py_err)?;
        self.inner.predict_proba(&batch).map_err(py_err)
    }

    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        vocab: &PyVocabulary,
        records: Vec<(String, usize)>,
        max_len: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let examples = trainer::encode_all(&vocab.inner, &sentences(records), max_len).map_err(py_err)?;
        let report = trainer::evaluate(&self.inner, &examples, 64).map_err(py_err)?;
        report_dict(py, &report)
    }
}

/// Fine-tunes `model` on `(text, label)` records. `config` is a JSON object
/// of training options; missing keys take their defaults. Returns the
/// selected model and the run log as JSON lines.
#[pyfunction]
#[pyo3(signature = (model, vocab, records, config=None, multi=true))]
fn finetune(
    py: Python<'_>,
    model: &PyModel,
    vocab: &PyVocabulary,
    records: Vec<(String, usize)>,
    config: Option<&str>,
    multi: bool,
) -> PyResult<(PyModel, String)> {
    let cfg = parse_config(config)?;
    let start = model.inner.to_checkpoint();
    let vocab = vocab.inner.clone();
    let all = sentences(records);
    let (ckpt, log) = py
        .detach(move || -> mmtl::Result<_> {
            let split = data::split(&all, cfg.train.split_ratio, cfg.train.seed)?;
            if multi {
                trainer::finetune_multi(&start, &vocab, &split, &cfg)
            } else {
                trainer::finetune_single(&start, &vocab, &split, &cfg.train)
            }
        })
        .map_err(py_err)?;
    Ok((
        PyModel {
            inner: Model::from_checkpoint(ckpt).map_err(py_err)?,
        },
        log.to_jsonl(true),
    ))
}

/// Metrics of hard predictions and positive-class scores.
#[pyfunction]
#[pyo3(signature = (predictions, scores, labels, loss=0.0))]
fn metrics<'py>(
    py: Python<'py>,
    predictions: Vec<usize>,
    scores: Vec<f64>,
    labels: Vec<usize>,
    loss: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = MetricsReport::evaluate(&predictions, &scores, &labels, loss).map_err(py_err)?;
    report_dict(py, &r)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<usize>) -> PyResult<f64> {
    mmtl::metrics::roc_auc(&scores, &labels).map_err(py_err)
}

#[pyclass(name = "KnowledgeBase", module = "mmtl_py")]
struct PyKnowledgeBase {
    inner: KnowledgeBase,
    labels: LabelNames,
}

#[pymethods]
impl PyKnowledgeBase {
    #[new]
    #[pyo3(signature = (path, labels=None))]
    fn new(path: &str, labels: Option<&str>) -> PyResult<Self> {
        let labels = match labels {
            Some(names) => LabelNames::parse(names).map_err(py_err)?,
            None => LabelNames::default(),
        };
        Ok(PyKnowledgeBase {
            inner: KnowledgeBase::open(path),
            labels,
        })
    }

    /// Classifies `texts` with `model` and stores them. Returns the new ids.
    #[pyo3(signature = (model, vocab, texts, source="python", max_len=64))]
    fn ingest(
        &self,
        model: &PyModel,
        vocab: &PyVocabulary,
        texts: Vec<String>,
        source: &str,
        max_len: usize,
    ) -> PyResult<Vec<u64>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let preds = mmtl::app::knowledge::classify(&model.inner, &vocab.inner, &texts, max_len).map_err(py_err)?;
        let new = texts
            .into_iter()
            .zip(preds)
            .map(|(text, (predicted_label, confidence))| NewRecord {
                text,
                predicted_label,
                confidence,
                source: source.to_string(),
            })
            .collect();
        let stored = self.inner.append(new, &self.labels).map_err(py_err)?;
        Ok(stored.iter().map(|r| r.id).collect())
    }

    /// Matching records, newest first.
    #[pyo3(signature = (label=None, keyword=None, limit=None))]
    fn query<'py>(
        &self,
        py: Python<'py>,
        label: Option<usize>,
        keyword: Option<String>,
        limit: Option<usize>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let q = Query { label, keyword, limit };
        self.inner
            .query(&q)
            .map_err(py_err)?
            .iter()
            .map(|r| record_dict(py, r))
            .collect()
    }

    fn __len__(&self) -> PyResult<usize> {
        Ok(self.inner.records().map_err(py_err)?.len())
    }
}

#[pymodule]
fn mmtl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyKnowledgeBase>()?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    Ok(())
}
