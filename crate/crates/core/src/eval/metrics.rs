//! Verification and ranking metrics over similarity scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Genuine (same identity) and impostor (different identity) similarity
/// scores. Higher means more similar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        ScoreSet { genuine, impostor }
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::arg(format!(
                "score set needs genuine and impostor scores (have {} / {})",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if let Some(bad) = self.genuine.iter().chain(&self.impostor).find(|s| !s.is_finite()) {
            return Err(Error::arg(format!("non-finite score {bad}")));
        }
        Ok(())
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of elements of ascending `s` that are `>= t`.
fn count_at_least(s: &[f64], t: f64) -> usize {
    s.len() - s.partition_point(|&x| x < t)
}

/// `(FAR, FRR)` at every candidate threshold in ascending order: each
/// distinct score, then +∞. A pair is accepted when `score >= threshold`.
fn error_rates(scores: &ScoreSet) -> Vec<(f64, f64)> {
    let g = sorted(&scores.genuine);
    let i = sorted(&scores.impostor);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (ng, ni) = (g.len() as f64, i.len() as f64);
    thresholds
        .into_iter()
        .map(|t| {
            let far = count_at_least(&i, t) as f64 / ni;
            let frr = 1.0 - count_at_least(&g, t) as f64 / ng;
            (far, frr)
        })
        .collect()
}

/// Equal error rate. FAR falls and FRR rises as the threshold sweeps up
/// through the distinct scores; the EER is read at the first threshold
/// where FAR ≤ FRR, linearly interpolated against the preceding threshold
/// when the two rates do not meet exactly. Lower thresholds win ties.
pub fn compute_eer(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let rates = error_rates(scores);
    let k = rates
        .iter()
        .position(|(far, frr)| far <= frr)
        .expect("at +inf FAR is 0");
    let (far1, frr1) = rates[k];
    if far1 == frr1 || k == 0 {
        return Ok(far1);
    }
    let (far0, frr0) = rates[k - 1];
    let d0 = far0 - frr0;
    let d1 = far1 - frr1;
    let a = d0 / (d0 - d1);
    Ok(far0 + a * (far1 - far0))
}

/// ROC points `(FPR, TPR)` from (0,0) to (1,1), sweeping the threshold down
/// through the distinct scores.
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    scores.validate()?;
    let mut pts: Vec<(f64, f64)> = error_rates(scores)
        .into_iter()
        .rev()
        .map(|(far, frr)| (far, 1.0 - frr))
        .collect();
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    Ok(pts)
}

/// Trapezoidal area under a ROC curve.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// True accept rate at the lowest threshold whose FAR does not exceed `max_far`.
pub fn tar_at_far(scores: &ScoreSet, max_far: f64) -> Result<f64> {
    Ok(roc_curve(scores)?
        .into_iter()
        .filter(|(fpr, _)| *fpr <= max_far)
        .map(|(_, tpr)| tpr)
        .fold(0.0, f64::max))
}

/// Rank-1 identification rate. `scores[p][g]` is the similarity of probe
/// `p` to gallery entry `g`; ties go to the lowest gallery index.
pub fn rank1(scores: &[Vec<f64>], gallery_ids: &[usize], probe_ids: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != probe_ids.len() {
        return Err(Error::arg("rank1: need one score row per probe"));
    }
    let mut hits = 0;
    for (row, &pid) in scores.iter().zip(probe_ids) {
        if row.len() != gallery_ids.len() || row.is_empty() {
            return Err(Error::dim("rank1", "gallery size", gallery_ids.len(), row.len()));
        }
        let mut best = 0;
        for (g, &s) in row.iter().enumerate() {
            if s > row[best] {
                best = g;
            }
        }
        if gallery_ids[best] == pid {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Ranks starting at 1 with ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt()
}
