//! Training event log, serialized as one JSON object per line.

use serde::{Deserialize, Serialize};

use super::SelectionMetric;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEvent {
    pub model_id: usize,
    pub epoch: usize,
    /// Optimizer steps taken by this model so far.
    pub step: usize,
    /// 1-based batch index within the epoch.
    pub epoch_step: usize,
    /// Mean training loss over the batches since the previous validation.
    pub train_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub model_id: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: usize,
    pub seed: u64,
    pub optimizer_steps: usize,
    pub epochs_trained: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Validation(ValidationEvent),
    Selection {
        epoch: usize,
        metric: SelectionMetric,
        chosen: usize,
        candidates: Vec<CandidateScore>,
    },
    Model(ModelSummary),
    Final {
        model_id: usize,
        best_epoch: usize,
        best_step: usize,
        metrics: MetricsReport,
    },
    Timing {
        model_id: Option<usize>,
        phase: String,
        seconds: f64,
    },
}

impl LogEvent {
    pub fn is_timing(&self) -> bool {
        matches!(self, LogEvent::Timing { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub events: Vec<LogEvent>,
}

impl RunLog {
    pub fn validations(&self) -> impl Iterator<Item = &ValidationEvent> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Validation(v) => Some(v),
            _ => None,
        })
    }

    pub fn validations_of(&self, model_id: usize) -> impl Iterator<Item = &ValidationEvent> {
        self.validations().filter(move |v| v.model_id == model_id)
    }

    /// `(chosen, candidate scores)` of the selection event, if any.
    pub fn selection(&self) -> Option<(usize, &[CandidateScore])> {
        self.events.iter().find_map(|e| match e {
            LogEvent::Selection { chosen, candidates, .. } => Some((*chosen, candidates.as_slice())),
            _ => None,
        })
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelSummary> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Model(m) => Some(m),
            _ => None,
        })
    }

    /// `(model_id, metrics)` of the restored model.
    pub fn final_report(&self) -> Option<(usize, &MetricsReport)> {
        self.events.iter().find_map(|e| match e {
            LogEvent::Final { model_id, metrics, .. } => Some((*model_id, metrics)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self, include_timings: bool) -> String {
        let mut out = String::new();
        for e in &self.events {
            if e.is_timing() && !include_timings {
                continue;
            }
            out.push_str(&serde_json::to_string(e).expect("log events always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(e);
        }
        Ok(RunLog { events })
    }
}
