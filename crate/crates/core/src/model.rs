//! A small feedforward softmax classifier with exact analytic gradients.
//!
//! All math is in f64. A model value is immutable; `sgd_step` returns the
//! successor. Losses drive the backward pass by supplying per-example
//! adjoints with respect to the output probabilities.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layered MLP: `dims = [d, h1, ..., K]`, hidden activations followed by a
/// log-sum-exp-stabilized softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    dims: Vec<usize>,
    /// Row-major `dims[l+1] x dims[l]` matrices.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Per-parameter gradients, shape-congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &GradientBundle) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for x in w {
                *x *= s;
            }
        }
        for b in &mut self.biases {
            for x in b {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|x| x.is_finite())
            && self.biases.iter().flatten().all(|x| x.is_finite())
    }
}

struct ForwardTrace {
    /// Input plus post-activation values per layer; last entry is the logits.
    activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl MlpModel {
    /// Symmetric uniform(-a, a) initialization with
    /// `a = sqrt(6 / (fan_in + fan_out))`, drawn from the given stream.
    pub fn new_seeded<R: Rng>(
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam(format!(
                "layer dims must have >= 2 positive entries, got {dims:?}"
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-a..a))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn activate(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.dims[0] {
            return Err(Error::DimMismatch {
                expected: self.dims[0],
                got: x.len(),
            });
        }
        let layers = self.dims.len() - 1;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        for l in 0..layers {
            let (rows, cols) = (self.dims[l + 1], self.dims[l]);
            let prev = &activations[l];
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                let mut z = self.biases[l][r];
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                for c in 0..cols {
                    z += row[c] * prev[c];
                }
                out[r] = if l + 1 < layers { self.activate(z) } else { z };
            }
            activations.push(out);
        }
        let probs = softmax(activations.last().unwrap());
        Ok(ForwardTrace {
            activations,
            probs,
        })
    }

    /// Class probabilities for one input: strictly positive, sums to 1.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.probs)
    }

    /// Exact gradient of a scalar loss given per-example adjoints
    /// `dL/dprobs`. Additive over examples.
    pub fn backward_scalar_loss(
        &self,
        batch: &[&[f64]],
        prob_adjoints: &[Vec<f64>],
    ) -> Result<GradientBundle> {
        if batch.len() != prob_adjoints.len() {
            return Err(Error::DimMismatch {
                expected: batch.len(),
                got: prob_adjoints.len(),
            });
        }
        let mut grads = GradientBundle::zeros_like(self);
        for (x, adj) in batch.iter().zip(prob_adjoints) {
            self.backward_one(x, adj, &mut grads)?;
        }
        Ok(grads)
    }

    fn backward_one(&self, x: &[f64], prob_adjoint: &[f64], grads: &mut GradientBundle) -> Result<()> {
        let k = self.num_classes();
        if prob_adjoint.len() != k {
            return Err(Error::DimMismatch {
                expected: k,
                got: prob_adjoint.len(),
            });
        }
        let trace = self.forward_trace(x)?;
        let p = &trace.probs;
        // softmax Jacobian: dlogit_j = p_j (g_j - sum_c g_c p_c)
        let dot: f64 = prob_adjoint.iter().zip(p).map(|(g, pi)| g * pi).sum();
        let mut delta: Vec<f64> = p
            .iter()
            .zip(prob_adjoint)
            .map(|(pi, g)| pi * (g - dot))
            .collect();

        let layers = self.dims.len() - 1;
        for l in (0..layers).rev() {
            let (rows, cols) = (self.dims[l + 1], self.dims[l]);
            let prev = &trace.activations[l];
            for r in 0..rows {
                grads.biases[l][r] += delta[r];
                let gw = &mut grads.weights[l][r * cols..(r + 1) * cols];
                for c in 0..cols {
                    gw[c] += delta[r] * prev[c];
                }
            }
            if l == 0 {
                break;
            }
            // propagate through W^T then the activation of layer l-1
            let mut prev_delta = vec![0.0; cols];
            for r in 0..rows {
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                for c in 0..cols {
                    prev_delta[c] += row[c] * delta[r];
                }
            }
            // recover pre-activations from post-activations
            for (c, d) in prev_delta.iter_mut().enumerate() {
                let a = trace.activations[l][c];
                let dz = match self.activation {
                    // a = max(z,0): a > 0 iff z > 0
                    Activation::Relu => {
                        if a > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    // a = tanh(z): derivative 1 - a^2
                    Activation::Tanh => 1.0 - a * a,
                };
                *d *= dz;
            }
            delta = prev_delta;
        }
        Ok(())
    }

    /// One SGD update: `theta <- theta - rate * g`, returning the successor.
    pub fn sgd_step(&self, grads: &GradientBundle, rate: f64) -> MlpModel {
        let mut next = self.clone();
        for (w, g) in next.weights.iter_mut().zip(&grads.weights) {
            for (x, y) in w.iter_mut().zip(g) {
                *x -= rate * y;
            }
        }
        for (b, g) in next.biases.iter_mut().zip(&grads.biases) {
            for (x, y) in b.iter_mut().zip(g) {
                *x -= rate * y;
            }
        }
        next
    }

    /// Flatten parameters for perturbation-based checks.
    pub fn params_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flatten()
            .chain(self.biases.iter().flatten())
            .copied()
            .collect()
    }

    pub fn with_params_flat(&self, flat: &[f64]) -> Result<MlpModel> {
        if flat.len() != self.num_params() {
            return Err(Error::DimMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut next = self.clone();
        let mut it = flat.iter();
        for w in &mut next.weights {
            for x in w {
                *x = *it.next().unwrap();
            }
        }
        for b in &mut next.biases {
            for x in b {
                *x = *it.next().unwrap();
            }
        }
        Ok(next)
    }

    pub fn grads_flat(grads: &GradientBundle) -> Vec<f64> {
        grads
            .weights
            .iter()
            .flatten()
            .chain(grads.biases.iter().flatten())
            .copied()
            .collect()
    }

    /// Versioned JSON checkpoint; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let record = CheckpointRecord {
            format_version: 1,
            dims: self.dims.clone(),
            activation: self.activation,
            params: self.params_flat(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &record)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MlpModel> {
        let file = std::fs::File::open(path)?;
        let record: CheckpointRecord = serde_json::from_reader(std::io::BufReader::new(file))?;
        if record.format_version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                record.format_version
            )));
        }
        let mut rng = crate::seeding::stream(0, "checkpoint.load", 0);
        let model = MlpModel::new_seeded(&record.dims, record.activation, &mut rng)?;
        model.with_params_flat(&record.params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format_version: u32,
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
