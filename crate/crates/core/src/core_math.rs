//! Scalar and vector primitives shared by every module: the sigmoid-smoothed
//! set-membership indicator, the pinball (quantile) loss, and empirical
//! quantiles via order statistics.

use crate::error::{Error, Result};

/// Temperature of the sigmoid relaxation of `1[S <= q]`, in score units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedIndicatorParams {
    temperature: f64,
}

impl SmoothedIndicatorParams {
    pub fn new(temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "temperature must be a positive finite real, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl Default for SmoothedIndicatorParams {
    /// 0.1 is a sharp-but-stable smoothing for scores on a unit scale.
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

/// Target mis-coverage level alpha in (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileLevel {
    alpha: f64,
}

impl QuantileLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(Error::InvalidParam(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Order-statistic index `ceil((1-alpha)(m+1))` used for conformal
    /// calibration on `m` scores (1-based).
    pub fn conformal_index(&self, m: usize) -> usize {
        ((1.0 - self.alpha) * (m as f64 + 1.0)).ceil() as usize
    }
}

/// Numerically stable logistic sigmoid: never exponentiates a large
/// positive argument.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid, computed from the saturating branch so both
/// tails underflow to zero instead of producing NaN.
fn sigmoid_deriv(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 - s)
}

/// Smoothed indicator `~1[S <= q] = sigmoid((q - S) / tau)`.
pub fn smoothed_indicator(
    score: f64,
    threshold: f64,
    params: SmoothedIndicatorParams,
) -> Result<f64> {
    if !score.is_finite() || !threshold.is_finite() {
        return Err(Error::NonFinite("smoothed_indicator"));
    }
    Ok(sigmoid((threshold - score) / params.temperature()))
}

/// Partial derivative of the smoothed indicator with respect to the
/// threshold `q`. Strictly positive and bounded by `1/(4 tau)`.
pub fn smoothed_indicator_grad_q(
    score: f64,
    threshold: f64,
    params: SmoothedIndicatorParams,
) -> Result<f64> {
    if !score.is_finite() || !threshold.is_finite() {
        return Err(Error::NonFinite("smoothed_indicator_grad_q"));
    }
    let tau = params.temperature();
    Ok(sigmoid_deriv((threshold - score) / tau) / tau)
}

/// Pinball loss for the (1-alpha)-quantile:
/// `(1-alpha)(s-q)` if `s >= q`, else `alpha(q-s)`.
pub fn pinball_loss(q: f64, s: f64, level: QuantileLevel) -> f64 {
    let alpha = level.alpha();
    if s >= q {
        (1.0 - alpha) * (s - q)
    } else {
        alpha * (q - s)
    }
}

/// Subgradient of the pinball loss in `q`. At the kink `s = q` the
/// `s <= q` branch is used, returning `+alpha`.
pub fn pinball_subgradient_q(q: f64, s: f64, level: QuantileLevel) -> f64 {
    let alpha = level.alpha();
    if s > q {
        -(1.0 - alpha)
    } else {
        alpha
    }
}

/// The `ceil((1-alpha)(m+1))`-th smallest of `m` scores: the conformal
/// empirical quantile. Errors when `m` is too small for the level.
pub fn empirical_quantile(scores: &[f64], level: QuantileLevel) -> Result<f64> {
    let m = scores.len();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = level.conformal_index(m);
    if k > m {
        return Err(Error::InsufficientCalibration {
            k,
            m,
            alpha: level.alpha(),
        });
    }
    kth_order_statistic(scores, k)
}

/// The k-th smallest value (1-based) via partial selection; no full sort.
pub fn kth_order_statistic(scores: &[f64], k: usize) -> Result<f64> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::OrderStatisticRange { k, n });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("kth_order_statistic"));
    }
    let mut buf: Vec<f64> = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    Ok(*kth)
}
