//! Macro/micro F1, exact-match ratio and partial-match accuracy.
//!
//! Single-label samples go through the same code path as singleton sets.
//! A label that never occurs in either predictions or gold
//! (`tp = fp = fn = 0`) contributes an F1 of 0 to the macro average.

use serde::{Deserialize, Serialize};

use crate::domain::{EmotionLabel, LabelMode, LabelSet, LabelSpace, RewardMetric};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub label: EmotionLabel,
    #[serde(flatten)]
    pub counts: Counts,
}

/// Per-label confusion counts in label-space order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionCounts {
    pub per_label: Vec<LabelCounts>,
}

impl ConfusionCounts {
    pub fn get(&self, label: &str) -> Option<Counts> {
        self.per_label
            .iter()
            .find(|lc| lc.label.as_str() == label)
            .map(|lc| lc.counts)
    }

    pub fn summed(&self) -> Counts {
        self.per_label.iter().fold(Counts::default(), |acc, lc| Counts {
            tp: acc.tp + lc.counts.tp,
            fp: acc.fp + lc.counts.fp,
            fn_: acc.fn_ + lc.counts.fn_,
        })
    }
}

fn check_lengths(preds: &[LabelSet], golds: &[LabelSet]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "{} predictions vs {} gold label sets",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

pub fn confusion(preds: &[LabelSet], golds: &[LabelSet], space: &LabelSpace) -> Result<ConfusionCounts> {
    check_lengths(preds, golds)?;
    for set in preds.iter().chain(golds) {
        if let Some(stray) = set.iter().find(|l| !space.contains(l)) {
            return Err(Error::Argument(format!("label {stray:?} is not in the label space")));
        }
    }
    let per_label = space
        .labels()
        .iter()
        .map(|label| {
            let mut counts = Counts::default();
            for (p, g) in preds.iter().zip(golds) {
                match (p.contains(label), g.contains(label)) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => {}
                }
            }
            LabelCounts {
                label: label.clone(),
                counts,
            }
        })
        .collect();
    Ok(ConfusionCounts { per_label })
}

pub fn macro_f1(counts: &ConfusionCounts) -> f64 {
    if counts.per_label.is_empty() {
        return 0.0;
    }
    let sum: f64 = counts.per_label.iter().map(|lc| lc.counts.f1()).sum();
    sum / counts.per_label.len() as f64
}

pub fn micro_f1(counts: &ConfusionCounts) -> f64 {
    counts.summed().f1()
}

pub fn emr(preds: &[LabelSet], golds: &[LabelSet]) -> Result<f64> {
    check_lengths(preds, golds)?;
    if golds.is_empty() {
        return Err(Error::Argument("exact-match ratio needs at least one sample".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

pub fn pma(preds: &[LabelSet], golds: &[LabelSet]) -> Result<f64> {
    check_lengths(preds, golds)?;
    if golds.is_empty() {
        return Err(Error::Argument("partial-match accuracy needs at least one sample".into()));
    }
    let mut hits = 0usize;
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if g.is_empty() {
            return Err(Error::Argument(format!(
                "partial-match accuracy is undefined for empty gold set at sample {i}"
            )));
        }
        // |Y ∩ Z| > |Y| / 2, kept in integers.
        if 2 * p.intersection(g).count() > g.len() {
            hits += 1;
        }
    }
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub micro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pma: Option<f64>,
    pub counts: ConfusionCounts,
    pub n_samples: usize,
    pub n_parse_failures: usize,
}

impl MetricReport {
    /// Value of `metric`; EMR/PMA fall back to 0 in single-label mode.
    pub fn get(&self, metric: RewardMetric) -> f64 {
        match metric {
            RewardMetric::MicroF1 => self.micro_f1,
            RewardMetric::MacroF1 => self.macro_f1,
            RewardMetric::Emr => self.emr.unwrap_or(0.0),
            RewardMetric::Pma => self.pma.unwrap_or(0.0),
        }
    }
}

/// Full report. Unparseable predictions must already be represented as
/// empty sets; `parse_failures` only counts them.
pub fn report(
    preds: &[LabelSet],
    golds: &[LabelSet],
    space: &LabelSpace,
    parse_failures: usize,
) -> Result<MetricReport> {
    if parse_failures > preds.len() {
        return Err(Error::Argument(format!(
            "{parse_failures} parse failures for {} samples",
            preds.len()
        )));
    }
    let counts = confusion(preds, golds, space)?;
    let (emr, pma) = match space.mode() {
        LabelMode::Multi => (Some(emr(preds, golds)?), Some(pma(preds, golds)?)),
        LabelMode::Single => (None, None),
    };
    Ok(MetricReport {
        macro_f1: macro_f1(&counts),
        micro_f1: micro_f1(&counts),
        emr,
        pma,
        counts,
        n_samples: preds.len(),
        n_parse_failures: parse_failures,
    })
}
