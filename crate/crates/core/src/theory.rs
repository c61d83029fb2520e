//! Numerical checks of the distributional and bound-related claims:
//! the mini-batch quantile PMF and its Beta asymptotic, the batch-quantile
//! bias, the Holderian error bound for the pinball loss, the penalty-form
//! objective, quantile-error scaling experiments, and the score-spacing
//! diagnostics.

use crate::core_math::{
    empirical_quantile, kth_order_statistic, pinball_loss, QuantileLevel, SmoothedIndicatorParams,
};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, dm_conformal_loss, qr_loss, true_label_scores, QuantileParam,
};
use crate::model::MlpModel;
use crate::scores::ScoreSpec;
use crate::seeding;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::io::Write;

fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// PMF of the event that the j-th smallest of n scores is selected as the
/// batch quantile of a uniformly drawn size-s batch. `pmf[j-1]` holds the
/// probability for global index j (1-based).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantilePmf {
    pub n: usize,
    pub s: usize,
    pub alpha: f64,
    pub k: usize,
    pub pmf: Vec<f64>,
    /// Sum of the entries; 1 within 1e-9 for the exact formula, free for
    /// the Beta asymptotic.
    pub normalization: f64,
}

impl QuantilePmf {
    pub fn mode_index(&self) -> usize {
        let (j, _) = self
            .pmf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        j + 1
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "j,probability")?;
        for (j, p) in self.pmf.iter().enumerate() {
            writeln!(w, "{},{}", j + 1, p)?;
        }
        Ok(())
    }
}

fn batch_index(level: QuantileLevel, s: usize) -> Result<usize> {
    let k = level.conformal_index(s);
    if k > s {
        return Err(Error::InsufficientCalibration {
            k,
            m: s,
            alpha: level.alpha(),
        });
    }
    Ok(k)
}

/// Exact PMF via the order-statistic identity
/// P(j) = C(j-1, k-1) C(n-j, s-k) / C(n, s), k = ceil((1-alpha)(s+1)).
pub fn batch_quantile_pmf_exact(n: usize, s: usize, level: QuantileLevel) -> Result<QuantilePmf> {
    if s == 0 || s > n {
        return Err(Error::InvalidParam("need 1 <= s <= n".into()));
    }
    let k = batch_index(level, s)?;
    let ln_total = ln_choose(n, s);
    let mut pmf = vec![0.0; n];
    for j in k..=(n - (s - k)) {
        pmf[j - 1] = (ln_choose(j - 1, k - 1) + ln_choose(n - j, s - k) - ln_total).exp();
    }
    let normalization: f64 = pmf.iter().sum();
    if (normalization - 1.0).abs() > 1e-9 {
        return Err(Error::NonFinite("quantile pmf does not normalize"));
    }
    Ok(QuantilePmf {
        n,
        s,
        alpha: level.alpha(),
        k,
        pmf,
        normalization,
    })
}

/// Beta-density asymptotic: (e/n) * Beta(j/n; k, s-k+1) evaluated per j,
/// reported with its own normalization sum. The shapes follow the
/// corrected index convention of the exact PMF (the k-th of s uniform
/// order statistics is Beta(k, s-k+1) distributed); see the decisions
/// ledger for the relation to the printed expression.
pub fn batch_quantile_pmf_beta(n: usize, s: usize, level: QuantileLevel) -> Result<QuantilePmf> {
    if s == 0 || s > n {
        return Err(Error::InvalidParam("need 1 <= s <= n".into()));
    }
    let k = batch_index(level, s)?;
    if s == k {
        return Err(Error::InvalidParam(
            "degenerate Beta shape (s = k); asymptotic undefined".into(),
        ));
    }
    let a = k as f64;
    let b = (s - k) as f64 + 1.0;
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let mut pmf = vec![0.0; n];
    for j in 1..=n {
        let x = j as f64 / n as f64;
        if x >= 1.0 {
            // density vanishes (b > 1) or the expression degenerates at the
            // right endpoint; the asymptotic is an interior statement
            continue;
        }
        let ln_pdf = (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta;
        pmf[j - 1] = std::f64::consts::E / n as f64 * ln_pdf.exp();
    }
    let normalization: f64 = pmf.iter().sum();
    Ok(QuantilePmf {
        n,
        s,
        alpha: level.alpha(),
        k,
        pmf,
        normalization,
    })
}

/// Total-variation distance between two (sub-)distributions over the same
/// support after normalizing each to mass 1.
pub fn total_variation(p: &QuantilePmf, q: &QuantilePmf) -> f64 {
    assert_eq!(p.pmf.len(), q.pmf.len());
    0.5 * p
        .pmf
        .iter()
        .zip(&q.pmf)
        .map(|(&a, &b)| (a / p.normalization - b / q.normalization).abs())
        .sum::<f64>()
}

/// E[S_(J)] - S_(k_n) under the exact batch-quantile PMF, for a sorted
/// score vector of length n.
pub fn expected_batch_quantile_bias(
    sorted_scores: &[f64],
    s: usize,
    level: QuantileLevel,
) -> Result<f64> {
    let n = sorted_scores.len();
    let pmf = batch_quantile_pmf_exact(n, s, level)?;
    let expected: f64 = pmf
        .pmf
        .iter()
        .zip(sorted_scores)
        .map(|(&p, &v)| p * v)
        .sum();
    let k_n = level.conformal_index(n);
    if k_n > n {
        return Err(Error::InsufficientCalibration {
            k: k_n,
            m: n,
            alpha: level.alpha(),
        });
    }
    Ok(expected - sorted_scores[k_n - 1])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HebReport {
    /// Smallest constant validating dist(q, U) <= c * (loss(q) - min) over
    /// the probe grid.
    pub c_hat: f64,
    /// Exponent; the QR loss satisfies the bound with nu = 1.
    pub nu: f64,
    /// Closed interval of minimizers of the mean pinball loss.
    pub optimal_set: (f64, f64),
    pub min_loss: f64,
}

/// Mean pinball loss over a score set.
pub fn mean_pinball(scores: &[f64], q: f64, level: QuantileLevel) -> f64 {
    scores.iter().map(|&s| pinball_loss(q, s, level)).sum::<f64>() / scores.len() as f64
}

/// Minimizer set of the mean pinball loss: the unique order statistic
/// S_(ceil((1-alpha)m)) when (1-alpha)m is non-integer, otherwise the
/// interval between consecutive order statistics.
pub fn pinball_minimizer_interval(scores: &[f64], level: QuantileLevel) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).ok_or(()).unwrap());
    let m = sorted.len() as f64;
    let target = (1.0 - level.alpha()) * m;
    let rounded = target.round();
    if (target - rounded).abs() < 1e-9 {
        let i0 = rounded as usize;
        if i0 == 0 {
            // left tail: every q <= S_(1) minimizes; report the point
            return Ok((sorted[0], sorted[0]));
        }
        if i0 >= sorted.len() {
            let last = sorted[sorted.len() - 1];
            return Ok((last, last));
        }
        Ok((sorted[i0 - 1], sorted[i0]))
    } else {
        let i = target.ceil() as usize;
        let v = sorted[i.clamp(1, sorted.len()) - 1];
        Ok((v, v))
    }
}

/// Verify the Holderian error bound (nu = 1) for the QR loss at every
/// probe: dist(q, U) <= c_hat * (loss(q) - min loss).
pub fn heb_verify(scores: &[f64], level: QuantileLevel, probes: &[f64]) -> Result<HebReport> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).ok_or(()).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::TiedScores("score set contains ties"));
    }
    if probes.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let (lo, hi) = pinball_minimizer_interval(&sorted, level)?;
    let min_loss = mean_pinball(&sorted, lo, level);
    let mut c_hat: f64 = 0.0;
    for &q in probes {
        let dist = if q < lo {
            lo - q
        } else if q > hi {
            q - hi
        } else {
            0.0
        };
        if dist == 0.0 {
            continue;
        }
        let gap = mean_pinball(&sorted, q, level) - min_loss;
        if gap <= 0.0 {
            return Err(Error::NonFinite("positive distance with zero loss gap"));
        }
        c_hat = c_hat.max(dist / gap);
    }
    if !c_hat.is_finite() {
        return Err(Error::NonFinite("c_hat"));
    }
    Ok(HebReport {
        c_hat,
        nu: 1.0,
        optimal_set: (lo, hi),
        min_loss,
    })
}

/// Penalty-form objective: CE + lambda DM(q) + sigma (QR(q) - QR(q*)),
/// where q* is the exact order-statistic quantile on the dataset.
#[allow(clippy::too_many_arguments)]
pub fn penalty_objective(
    model: &MlpModel,
    q: f64,
    dataset: &[Example<'_>],
    lambda: f64,
    sigma: f64,
    level: QuantileLevel,
    tau: SmoothedIndicatorParams,
    score: &ScoreSpec,
) -> Result<f64> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidParam("sigma must be >= 0".into()));
    }
    let ce = cross_entropy(model, dataset, false)?.value;
    let dm = dm_conformal_loss(model, QuantileParam::new(q)?, dataset, tau, score, false)?.value;
    let scores = true_label_scores(model, dataset, score)?;
    let q_star = empirical_quantile(&scores, level)?;
    let qr_q = qr_loss(model, QuantileParam::new(q)?, dataset, level, score)?.value;
    let qr_star = qr_loss(model, QuantileParam::new(q_star)?, dataset, level, score)?.value;
    let penalty = qr_q - qr_star;
    debug_assert!(penalty >= -1e-12, "q* must minimize the QR loss");
    Ok(ce + lambda * dm + sigma * penalty.max(0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    /// The varying grid value (batch size s or sample size n).
    pub param: usize,
    pub mean_abs_err: f64,
    pub std_err: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub route: String,
    pub alpha: f64,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "route,alpha,param,mean_abs_err,std_err,trials")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.route, self.alpha, r.param, r.mean_abs_err, r.std_err, r.trials
            )?;
        }
        Ok(())
    }

    /// Least-squares slope of log(mean error) against log(param).
    pub fn log_log_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.mean_abs_err > 0.0)
            .map(|r| ((r.param as f64).ln(), r.mean_abs_err.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingRoute {
    /// Batch-quantile estimation: error of the size-s batch order
    /// statistic against the population quantile; the grid varies s.
    SaBatch { n: usize },
    /// Pinball subgradient descent on a fixed n-score sample; the grid
    /// varies n.
    DpsmDescent { steps: usize },
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Run pinball subgradient descent over a sorted score sample with a
/// decaying step size, tail-averaging the final quarter of the iterates.
/// The per-step subgradient uses binary-search counts, so each step is
/// O(log n).
pub fn pinball_descent(sorted: &[f64], level: QuantileLevel, steps: usize, q0: f64) -> f64 {
    let n = sorted.len() as f64;
    let alpha = level.alpha();
    let mut q = q0;
    let tail_start = steps - steps / 4;
    let mut tail_sum = 0.0;
    for t in 0..steps {
        // #{S <= q} via binary search; matches the sum of
        // pinball_subgradient_q over the sample
        let c_le = sorted.partition_point(|&s| s <= q);
        let g = (alpha * c_le as f64 - (1.0 - alpha) * (n - c_le as f64)) / n;
        let gamma = 0.5 / ((t + 1) as f64).sqrt();
        q -= gamma * g;
        if t >= tail_start {
            tail_sum += q;
        }
    }
    tail_sum / (steps - tail_start) as f64
}

/// Mean absolute error of the quantile estimate against the population
/// quantile of the Uniform(0,1) generator, per grid value.
pub fn quantile_error_scaling(
    route: ScalingRoute,
    grid: &[usize],
    level: QuantileLevel,
    trials: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if trials < 2 {
        return Err(Error::InvalidParam("need at least 2 trials".into()));
    }
    let pop_quantile = 1.0 - level.alpha();
    let mut rows = Vec::new();
    for (gi, &param) in grid.iter().enumerate() {
        if let ScalingRoute::SaBatch { .. } = route {
            if batch_index(level, param).is_err() {
                eprintln!(
                    "warning: alpha {} infeasible for batch size {param}; skipped",
                    level.alpha()
                );
                continue;
            }
        }
        let mut errs = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = seeding::stream(seed, "theory.scaling", (gi * trials + trial) as u64);
            let estimate = match route {
                ScalingRoute::SaBatch { n } => {
                    let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                    let batch = rand::seq::index::sample(&mut rng, n, param.min(n));
                    let batch_scores: Vec<f64> = batch.iter().map(|i| scores[i]).collect();
                    let k = batch_index(level, batch_scores.len())?;
                    kth_order_statistic(&batch_scores, k)?
                }
                ScalingRoute::DpsmDescent { steps } => {
                    let mut scores: Vec<f64> = (0..param).map(|_| rng.gen::<f64>()).collect();
                    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    pinball_descent(&scores, level, steps, 0.5)
                }
            };
            errs.push((estimate - pop_quantile).abs());
        }
        let (mean_abs_err, std_err) = mean_and_se(&errs);
        rows.push(ScalingRow {
            param,
            mean_abs_err,
            std_err,
            trials,
        });
    }
    let route_name = match route {
        ScalingRoute::SaBatch { .. } => "sa_batch",
        ScalingRoute::DpsmDescent { .. } => "dpsm_descent",
    };
    Ok(ScalingReport {
        route: route_name.into(),
        alpha: level.alpha(),
        rows,
    })
}

/// Empirical bi-Lipschitz constants of the score distribution: min and
/// max of n * (S_(j+1) - S_(j)) over interior j, excluding the top and
/// bottom 1% of indices.
pub fn bilipschitz_diagnostic(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.len() < 10 {
        return Err(Error::InvalidParam("need at least 10 scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).ok_or(()).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::TiedScores("score set contains ties"));
    }
    let n = sorted.len();
    let trim = n / 100;
    let lo = trim;
    let hi = n - 1 - trim; // spacings j in [lo, hi)
    let mut l1 = f64::INFINITY;
    let mut l2 = 0.0f64;
    for j in lo..hi {
        let spacing = (sorted[j + 1] - sorted[j]) * n as f64;
        l1 = l1.min(spacing);
        l2 = l2.max(spacing);
    }
    Ok((l1, l2))
}

/// For each target coverage c in the grid, set q to the c-level empirical
/// quantile of true-label scores and report the soft set size.
pub fn soft_size_curve(
    model: &MlpModel,
    split: &[Example<'_>],
    tau: SmoothedIndicatorParams,
    coverage_grid: &[f64],
    score: &ScoreSpec,
) -> Result<Vec<(f64, f64)>> {
    if coverage_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if coverage_grid.iter().any(|&c| !(0.0 < c && c < 1.0)) {
        return Err(Error::InvalidParam("coverage grid must lie in (0,1)".into()));
    }
    let scores = true_label_scores(model, split, score)?;
    let m = scores.len();
    let mut out = Vec::with_capacity(coverage_grid.len());
    for &c in coverage_grid {
        let k = ((c * (m as f64 + 1.0)).ceil() as usize).clamp(1, m);
        let q = kth_order_statistic(&scores, k)?;
        let soft =
            dm_conformal_loss(model, QuantileParam::new(q)?, split, tau, score, false)?.value;
        out.push((c, soft));
    }
    Ok(out)
}
