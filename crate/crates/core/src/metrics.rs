//! Evaluation metrics: marginal coverage, average (hard and soft) set
//! size, class-conditional coverage gap, size-stratified coverage
//! violation, and worst-slab coverage.

use crate::conformal::PredictionSet;
use crate::core_math::{QuantileLevel, SmoothedIndicatorParams};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::losses::{dm_conformal_loss, QuantileParam};
use crate::model::MlpModel;
use crate::scores::ScoreSpec;
use crate::seeding;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub marg_cov: f64,
    pub avg_set_size: f64,
    pub avg_soft_size: f64,
    /// Percentage points.
    pub cov_gap: f64,
    pub sscv: f64,
    pub wsc: f64,
    /// NaN for classes absent from the test data.
    pub per_class_coverage: Vec<f64>,
    pub per_class_size: Vec<f64>,
}

impl MetricsReport {
    pub fn write_per_class_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "class,coverage,avg_set_size")?;
        for (c, (cov, size)) in self
            .per_class_coverage
            .iter()
            .zip(&self.per_class_size)
            .enumerate()
        {
            writeln!(w, "{c},{cov},{size}")?;
        }
        Ok(())
    }
}

fn check_lengths(sets: &[PredictionSet], labels: &[usize]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if sets.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: sets.len(),
            got: labels.len(),
        });
    }
    Ok(())
}

pub fn marginal_coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    check_lengths(sets, labels)?;
    let covered = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(covered as f64 / sets.len() as f64)
}

pub fn avg_set_size(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(sets.iter().map(|s| s.size()).sum::<usize>() as f64 / sets.len() as f64)
}

/// Mean over the split of the smoothed set size; by definition this is the
/// DM conformal loss value at the given quantile.
pub fn avg_soft_size(
    model: &MlpModel,
    q: f64,
    split: &[Example<'_>],
    tau: SmoothedIndicatorParams,
    score: &ScoreSpec,
) -> Result<f64> {
    Ok(dm_conformal_loss(model, QuantileParam::new(q)?, split, tau, score, false)?.value)
}

/// Per-class conditional coverage and mean set size; NaN for classes with
/// no test examples.
pub fn per_class_stats(
    sets: &[PredictionSet],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(sets, labels)?;
    let mut counts = vec![0usize; num_classes];
    let mut covered = vec![0usize; num_classes];
    let mut sizes = vec![0usize; num_classes];
    for (set, &y) in sets.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::InvalidLabel {
                label: y,
                num_classes,
            });
        }
        counts[y] += 1;
        sizes[y] += set.size();
        if set.contains(y) {
            covered[y] += 1;
        }
    }
    let coverage = (0..num_classes)
        .map(|c| {
            if counts[c] == 0 {
                f64::NAN
            } else {
                covered[c] as f64 / counts[c] as f64
            }
        })
        .collect();
    let size = (0..num_classes)
        .map(|c| {
            if counts[c] == 0 {
                f64::NAN
            } else {
                sizes[c] as f64 / counts[c] as f64
            }
        })
        .collect();
    Ok((coverage, size))
}

/// 100 x mean over observed classes of |class coverage - (1 - alpha)|.
/// Classes absent from the test data are excluded with a warning.
pub fn cov_gap(
    sets: &[PredictionSet],
    labels: &[usize],
    num_classes: usize,
    level: QuantileLevel,
) -> Result<f64> {
    let (coverage, _) = per_class_stats(sets, labels, num_classes)?;
    let target = 1.0 - level.alpha();
    let mut total = 0.0;
    let mut observed = 0usize;
    for (c, cov) in coverage.iter().enumerate() {
        if cov.is_nan() {
            eprintln!("warning: class {c} has no test examples; excluded from CovGap");
            continue;
        }
        total += (cov - target).abs();
        observed += 1;
    }
    if observed == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(100.0 * total / observed as f64)
}

/// Default size strata {0}, {1}, {2,3}, {4-6}, {7-10}, {11+}, clipped to K.
pub fn default_strata(num_classes: usize) -> Vec<(usize, usize)> {
    let raw = [(0, 0), (1, 1), (2, 3), (4, 6), (7, 10), (11, usize::MAX)];
    raw.iter()
        .filter(|&&(lo, _)| lo <= num_classes)
        .map(|&(lo, hi)| (lo, hi.min(num_classes)))
        .collect()
}

/// Max over non-empty size strata of |stratum coverage - (1 - alpha)|.
pub fn sscv(
    sets: &[PredictionSet],
    labels: &[usize],
    level: QuantileLevel,
    strata: &[(usize, usize)],
) -> Result<f64> {
    check_lengths(sets, labels)?;
    if strata.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let target = 1.0 - level.alpha();
    let mut worst: f64 = 0.0;
    for &(lo, hi) in strata {
        let mut n = 0usize;
        let mut covered = 0usize;
        for (set, &y) in sets.iter().zip(labels) {
            let size = set.size();
            if size >= lo && size <= hi {
                n += 1;
                if set.contains(y) {
                    covered += 1;
                }
            }
        }
        if n > 0 {
            worst = worst.max((covered as f64 / n as f64 - target).abs());
        }
    }
    Ok(worst)
}

/// Worst-slab coverage. Samples unit directions from the seed, projects
/// the features, and minimizes the coverage over contiguous windows of the
/// sorted projection holding between delta and 2*delta of the mass. Any
/// slab of mass >= delta contains such a window with no higher coverage,
/// so the reported value also lower-bounds (and never exceeds) the
/// marginal coverage.
pub fn wsc(
    features: &[&[f64]],
    sets: &[PredictionSet],
    labels: &[usize],
    delta: f64,
    n_directions: usize,
    seed: u64,
) -> Result<f64> {
    check_lengths(sets, labels)?;
    if features.len() != sets.len() {
        return Err(Error::DimMismatch {
            expected: sets.len(),
            got: features.len(),
        });
    }
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(Error::InvalidParam("delta must lie in (0,1)".into()));
    }
    if n_directions == 0 {
        return Err(Error::InvalidParam("n_directions must be >= 1".into()));
    }
    let n = sets.len();
    let d = features[0].len();
    let covered: Vec<f64> = sets
        .iter()
        .zip(labels)
        .map(|(s, &y)| if s.contains(y) { 1.0 } else { 0.0 })
        .collect();
    let marginal = covered.iter().sum::<f64>() / n as f64;

    let degenerate = (0..d).all(|j| {
        let mean = features.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        features.iter().all(|x| (x[j] - mean).abs() < 1e-12)
    });
    if degenerate {
        eprintln!("warning: degenerate features; WSC falls back to marginal coverage");
        return Ok(marginal);
    }

    let min_len = ((delta * n as f64).ceil() as usize).max(1);
    let mut worst = marginal;
    for i in 0..n_directions {
        let mut rng = seeding::stream(seed, "metrics.wsc", i as u64);
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);

        let mut order: Vec<usize> = (0..n).collect();
        let proj: Vec<f64> = features
            .iter()
            .map(|x| x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        order.sort_by(|&a, &b| proj[a].partial_cmp(&proj[b]).unwrap());

        // prefix sums of the coverage indicators in projection order
        let mut prefix = vec![0.0; n + 1];
        for (t, &idx) in order.iter().enumerate() {
            prefix[t + 1] = prefix[t] + covered[idx];
        }
        let max_len = (2 * min_len).min(n + 1);
        for len in min_len..max_len {
            for start in 0..=(n - len) {
                let avg = (prefix[start + len] - prefix[start]) / len as f64;
                if avg < worst {
                    worst = avg;
                }
            }
        }
    }
    Ok(worst)
}

/// Assemble the full report for one evaluated split.
#[allow(clippy::too_many_arguments)]
pub fn metrics_report(
    model: &MlpModel,
    q: f64,
    split: &[Example<'_>],
    sets: &[PredictionSet],
    tau: SmoothedIndicatorParams,
    score: &ScoreSpec,
    level: QuantileLevel,
    wsc_seed: u64,
) -> Result<MetricsReport> {
    let labels: Vec<usize> = split.iter().map(|&(_, y)| y).collect();
    let features: Vec<&[f64]> = split.iter().map(|&(x, _)| x).collect();
    let k = model.num_classes();
    let (per_class_coverage, per_class_size) = per_class_stats(sets, &labels, k)?;
    Ok(MetricsReport {
        marg_cov: marginal_coverage(sets, &labels)?,
        avg_set_size: avg_set_size(sets)?,
        avg_soft_size: avg_soft_size(model, q, split, tau, score)?,
        cov_gap: cov_gap(sets, &labels, k, level)?,
        sscv: sscv(sets, &labels, level, &default_strata(k))?,
        wsc: wsc(&features, sets, &labels, 0.1, 1000, wsc_seed)?,
        per_class_coverage,
        per_class_size,
    })
}
