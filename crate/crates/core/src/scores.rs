//! Conformity scores mapping (probability vector, label) to a real value:
//! HPS (one minus the label probability), APS (cumulative sorted probability
//! with a randomized tie-breaking term), and RAPS (APS plus a rank
//! regularizer).

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Hps,
    Aps,
    Raps,
}

/// How the APS/RAPS randomization variable U is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Randomization {
    /// One U per example from an explicit caller-provided stream.
    Sampled,
    /// A fixed U; makes every score a deterministic function of
    /// (probs, label). Training losses use `FixedU(1.0)`.
    FixedU(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    #[serde(default)]
    pub raps_lambda: f64,
    #[serde(default = "default_kreg")]
    pub raps_kreg: usize,
    #[serde(default = "default_randomization")]
    pub randomization: Randomization,
}

fn default_kreg() -> usize {
    1
}

fn default_randomization() -> Randomization {
    Randomization::FixedU(1.0)
}

impl ScoreSpec {
    pub fn hps() -> Self {
        Self {
            kind: ScoreKind::Hps,
            raps_lambda: 0.0,
            raps_kreg: 1,
            randomization: Randomization::FixedU(1.0),
        }
    }

    pub fn aps(randomization: Randomization) -> Self {
        Self {
            kind: ScoreKind::Aps,
            raps_lambda: 0.0,
            raps_kreg: 1,
            randomization,
        }
    }

    pub fn raps(raps_lambda: f64, raps_kreg: usize, randomization: Randomization) -> Self {
        Self {
            kind: ScoreKind::Raps,
            raps_lambda,
            raps_kreg,
            randomization,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.raps_lambda < 0.0 || !self.raps_lambda.is_finite() {
            return Err(Error::InvalidParam(format!(
                "raps_lambda must be >= 0, got {}",
                self.raps_lambda
            )));
        }
        if self.raps_kreg < 1 || self.raps_kreg > num_classes {
            return Err(Error::InvalidParam(format!(
                "raps_kreg must lie in 1..={num_classes}, got {}",
                self.raps_kreg
            )));
        }
        if let Randomization::FixedU(u) = self.randomization {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::InvalidParam(format!(
                    "FixedU must lie in [0,1], got {u}"
                )));
            }
        }
        Ok(())
    }

    /// Resolve the randomization variable for one example.
    pub fn draw_u<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.randomization {
            Randomization::Sampled => rng.gen::<f64>(),
            Randomization::FixedU(u) => u,
        }
    }

    /// Upper bound on the score range: 1 for HPS/APS,
    /// `1 + lambda (K - k_reg)` for RAPS.
    pub fn max_score(&self, num_classes: usize) -> f64 {
        match self.kind {
            ScoreKind::Hps | ScoreKind::Aps => 1.0,
            ScoreKind::Raps => {
                1.0 + self.raps_lambda * (num_classes.saturating_sub(self.raps_kreg)) as f64
            }
        }
    }
}

fn check_probs(probs: &[f64], label: usize) -> Result<()> {
    if label >= probs.len() {
        return Err(Error::InvalidLabel {
            label,
            num_classes: probs.len(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if !(sum - 1.0).abs().is_finite() || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Class indices in descending-probability order, ties broken by ascending
/// class index.
pub fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// HPS score: `1 - probs[label]`.
pub fn hps_score(probs: &[f64], label: usize) -> Result<f64> {
    check_probs(probs, label)?;
    Ok(1.0 - probs[label])
}

/// APS score: cumulative mass of classes ranked above the label plus
/// `u` times the label's own probability.
pub fn aps_score(probs: &[f64], label: usize, u: f64) -> Result<f64> {
    check_probs(probs, label)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidParam(format!("u must lie in [0,1], got {u}")));
    }
    let order = descending_order(probs);
    let mut acc = 0.0;
    for &c in &order {
        if c == label {
            return Ok(acc + u * probs[c]);
        }
        acc += probs[c];
    }
    unreachable!("label validated above")
}

/// RAPS score: APS plus `lambda (rank - k_reg)^+`.
pub fn raps_score(probs: &[f64], label: usize, u: f64, spec: &ScoreSpec) -> Result<f64> {
    spec.validate(probs.len())?;
    let aps = aps_score(probs, label, u)?;
    let rank = descending_order(probs)
        .iter()
        .position(|&c| c == label)
        .unwrap()
        + 1;
    Ok(aps + spec.raps_lambda * (rank.saturating_sub(spec.raps_kreg)) as f64)
}

/// Score one (probs, label) pair under the spec with an explicit `u`.
pub fn score_one(probs: &[f64], label: usize, u: f64, spec: &ScoreSpec) -> Result<f64> {
    match spec.kind {
        ScoreKind::Hps => hps_score(probs, label),
        ScoreKind::Aps => aps_score(probs, label, u),
        ScoreKind::Raps => raps_score(probs, label, u, spec),
    }
}

/// Score every candidate class under the spec. One `u` is shared across the
/// K per-class scores, matching the single randomization variable in the
/// APS definition.
pub fn score_all_classes(probs: &[f64], u: f64, spec: &ScoreSpec) -> Result<Vec<f64>> {
    check_probs(probs, 0)?;
    spec.validate(probs.len())?;
    let k = probs.len();
    let order = descending_order(probs);
    let mut scores = vec![0.0; k];
    let mut acc = 0.0;
    for (pos, &c) in order.iter().enumerate() {
        let rank = pos + 1;
        scores[c] = match spec.kind {
            ScoreKind::Hps => 1.0 - probs[c],
            ScoreKind::Aps => acc + u * probs[c],
            ScoreKind::Raps => {
                acc + u * probs[c]
                    + spec.raps_lambda * (rank.saturating_sub(spec.raps_kreg)) as f64
            }
        };
        acc += probs[c];
    }
    Ok(scores)
}

/// Scores for every class together with the Jacobian rows
/// `grad[y][c] = dS_y / dprobs[c]`, treating the descending sort order and
/// ranks as locally constant (valid away from probability ties).
pub fn score_all_classes_with_grad(
    probs: &[f64],
    u: f64,
    spec: &ScoreSpec,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let scores = score_all_classes(probs, u, spec)?;
    let k = probs.len();
    let order = descending_order(probs);
    let mut grads = vec![vec![0.0; k]; k];
    match spec.kind {
        ScoreKind::Hps => {
            for y in 0..k {
                grads[y][y] = -1.0;
            }
        }
        ScoreKind::Aps | ScoreKind::Raps => {
            // dS_y/dp_c = 1 for classes ranked strictly above y, u for y itself;
            // the RAPS rank penalty has zero gradient at fixed rank.
            let mut above: Vec<usize> = Vec::with_capacity(k);
            for &c in &order {
                for &a in &above {
                    grads[c][a] = 1.0;
                }
                grads[c][c] = u;
                above.push(c);
            }
        }
    }
    Ok((scores, grads))
}
