//! One-factor hyperparameter sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{finetune_multi, finetune_single, MultiTrainConfig, RunLog, TrainConfig};
use crate::data::SplitDataset;
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{fixed6, MetricsReport};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepField {
    BatchSize,
    Epochs,
    LearningRate,
    /// Validations per epoch.
    NVal,
    /// `off` keeps every head, `on` prunes the configured heads.
    Pruning,
}

impl SweepField {
    pub fn name(self) -> &'static str {
        match self {
            SweepField::BatchSize => "batch_size",
            SweepField::Epochs => "epochs",
            SweepField::LearningRate => "learning_rate",
            SweepField::NVal => "n_val",
            SweepField::Pruning => "pruning",
        }
    }

    /// Returns `base` with this field set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let invalid = || Error::Config(format!("invalid sweep cell {}={value:?}", self.name()));
        let positive = |s: &str| match s.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(invalid()),
        };
        let mut cfg = base.clone();
        match self {
            SweepField::BatchSize => cfg.batch_size = positive(value)?,
            SweepField::Epochs => cfg.epochs = positive(value)?,
            SweepField::LearningRate => {
                cfg.learning_rate = match value.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() && v > 0.0 => v,
                    _ => return Err(invalid()),
                }
            }
            // A trailing annotation such as "12 (35)" is ignored.
            SweepField::NVal => {
                let lead = value.trim().split(|c: char| !c.is_ascii_digit()).next().unwrap_or("");
                cfg.validations_per_epoch = positive(lead)?;
            }
            SweepField::Pruning => {
                cfg.prune_heads = match value.trim() {
                    "off" => Some(Vec::new()),
                    "on" => base.prune_heads.clone().filter(|h| !h.is_empty()),
                    _ => return Err(invalid()),
                }
            }
        }
        cfg.validate().map_err(|e| Error::Config(format!("sweep cell {}={value:?}: {e}", self.name())))?;
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(SweepField::BatchSize),
            "epochs" => Ok(SweepField::Epochs),
            "learning_rate" => Ok(SweepField::LearningRate),
            "n_val" | "validations_per_epoch" => Ok(SweepField::NVal),
            "pruning" => Ok(SweepField::Pruning),
            other => Err(Error::Config(format!("cannot sweep over {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: MetricsReport,
    pub log: RunLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub field: SweepField,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One row per cell: the swept value, then the final metrics.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "{}\ttp\tfp\ttn\tfn\taccuracy\tprecision\trecall\tf1\tmcc\troc_auc\tloss\n",
            self.field.name()
        );
        for row in &self.rows {
            let r = &row.report;
            let c = &r.confusion;
            let _ = write!(s, "{}\t{}\t{}\t{}\t{}", row.value.trim(), c.tp, c.fp, c.tn, c.fn_);
            for v in [r.accuracy, r.precision, r.recall, r.f1, r.mcc, r.roc_auc, r.loss] {
                let _ = write!(s, "\t{}", fixed6(v));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs one training per value of `field`, changing nothing else. With
/// `multi` each cell uses candidate selection, otherwise a single model.
///
/// Every cell is checked before any training starts.
pub fn sweep(
    start: &Checkpoint,
    vocab: &Vocabulary,
    data: &SplitDataset,
    field: SweepField,
    values: &[String],
    cfg: &MultiTrainConfig,
    multi: bool,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let cells: Vec<TrainConfig> = values
        .iter()
        .map(|v| field.apply(&cfg.train, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cells.len());
    for (value, train) in values.iter().zip(cells) {
        let log = if multi {
            let cell = MultiTrainConfig {
                train,
                ..cfg.clone()
            };
            finetune_multi(start, vocab, data, &cell)?.1
        } else {
            finetune_single(start, vocab, data, &train)?.1
        };
        let report = *log.final_report().expect("every run ends with a final report").1;
        rows.push(SweepRow {
            value: value.clone(),
            report,
            log,
        });
    }
    Ok(SweepTable { field, rows })
}
