//! Plan-quality metrics: exact-sequence success rate, position-wise mean
//! accuracy, and per-sample set IoU.
//!
//! All three are means of per-sample scores, so they are independent of
//! batch size and sample order. A batch-level IoU (pooling all samples into
//! two sets before intersecting) is deliberately not provided: its value
//! changes with the batch split. `set_accuracy` is the set-based reading of
//! per-action accuracy, exposed under its own name for comparison and never
//! substituted for `mean_accuracy`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

fn check_pairs(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Config(format!(
            "{} predictions against {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Config("metrics need at least one sample".into()));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Config(format!(
                "sample {}: prediction length {} != ground truth length {}",
                i,
                p.len(),
                g.len()
            )));
        }
        if p.is_empty() {
            return Err(Error::Config(format!("sample {}: empty plan", i)));
        }
    }
    Ok(())
}

fn sample_exact(pred: &[usize], gt: &[usize]) -> bool {
    pred == gt
}

fn sample_accuracy(pred: &[usize], gt: &[usize]) -> f64 {
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    hits as f64 / pred.len() as f64
}

fn sample_siou(pred: &[usize], gt: &[usize]) -> f64 {
    let p: BTreeSet<usize> = pred.iter().copied().collect();
    let g: BTreeSet<usize> = gt.iter().copied().collect();
    let inter = p.intersection(&g).count();
    let union = p.union(&g).count();
    inter as f64 / union as f64
}

fn sample_set_accuracy(pred: &[usize], gt: &[usize]) -> f64 {
    // fraction of predicted positions whose label occurs anywhere in the
    // ground truth: order-free per-action credit
    let g: BTreeSet<usize> = gt.iter().copied().collect();
    let hits = pred.iter().filter(|p| g.contains(p)).count();
    hits as f64 / pred.len() as f64
}

fn mean_over<F: Fn(&[usize], &[usize]) -> f64>(
    preds: &[Vec<usize>],
    gts: &[Vec<usize>],
    score: F,
) -> Result<f64> {
    check_pairs(preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| score(p, g)).sum();
    Ok(total / preds.len() as f64)
}

/// Fraction of samples whose predicted sequence matches exactly, order
/// included.
pub fn success_rate(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    mean_over(preds, gts, |p, g| if sample_exact(p, g) { 1.0 } else { 0.0 })
}

/// Mean over samples of the fraction of positions with the correct action.
pub fn mean_accuracy(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    mean_over(preds, gts, sample_accuracy)
}

/// Mean over samples of |set(pred) ∩ set(gt)| / |set(pred) ∪ set(gt)|;
/// duplicates collapse.
pub fn mean_siou(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    mean_over(preds, gts, sample_siou)
}

/// Order-free accuracy variant: per-position credit whenever the predicted
/// label occurs anywhere in the ground truth.
pub fn set_accuracy(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<f64> {
    mean_over(preds, gts, sample_set_accuracy)
}

/// One sample's scores inside an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub exact: bool,
    pub accuracy: f64,
    pub siou: f64,
}

/// Batch metrics plus the per-sample breakdown they were averaged from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub sr: f64,
    pub macc: f64,
    pub msiou: f64,
    pub per_sample: Vec<SampleScore>,
}

/// Scores a batch of predicted plans against ground truth.
pub fn evaluate_plans(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> Result<EvalReport> {
    check_pairs(preds, gts)?;
    let per_sample: Vec<SampleScore> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| SampleScore {
            exact: sample_exact(p, g),
            accuracy: sample_accuracy(p, g),
            siou: sample_siou(p, g),
        })
        .collect();
    let n = per_sample.len() as f64;
    Ok(EvalReport {
        n_samples: per_sample.len(),
        sr: per_sample.iter().filter(|s| s.exact).count() as f64 / n,
        macc: per_sample.iter().map(|s| s.accuracy).sum::<f64>() / n,
        msiou: per_sample.iter().map(|s| s.siou).sum::<f64>() / n,
        per_sample,
    })
}
