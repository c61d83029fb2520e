//! Training loops: plain cross-entropy, the two SA baselines (ConfTr, CUT),
//! and the bilevel DPSM loop that learns the quantile as an explicit scalar
//! by stochastic subgradient descent on the pinball loss.
//!
//! Determinism contract: identical (config, dataset) pairs produce
//! bit-identical models, quantiles, and traces. All randomness is derived
//! from the config seed through [`crate::seeding::stream`]; every method
//! draws its primary batch stream from the same label so that the
//! degenerate configurations (DPSM with lambda = gamma = 0, ConfTr with
//! lambda = 0) reproduce cross-entropy training exactly.

use crate::core_math::{empirical_quantile, QuantileLevel, SmoothedIndicatorParams};
use crate::data::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::losses::{
    batch_quantile, cross_entropy, cut_loss, dm_conformal_loss, qr_loss, sa_conftr_loss,
    QuantileParam,
};
use crate::model::{Activation, GradientBundle, MlpModel};
use crate::scores::ScoreSpec;
use crate::seeding;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ce,
    ConfTr,
    Cut,
    Dpsm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub lambda: f64,
    pub eta: f64,
    pub gamma: f64,
    pub tau_sigmoid: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// (epoch, multiplier) pairs; the multiplier is applied once at the
    /// start of the named epoch.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub q_init: f64,
    pub score: ScoreSpec,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden_dims() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ce,
            alpha: 0.1,
            lambda: 0.05,
            eta: 0.1,
            gamma: 0.01,
            tau_sigmoid: 0.1,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            lr_schedule: Vec::new(),
            momentum: 0.9,
            weight_decay: 0.0,
            q_init: 0.5,
            score: ScoreSpec::hps(),
            hidden_dims: default_hidden_dims(),
            activation: default_activation(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        QuantileLevel::new(self.alpha)?;
        SmoothedIndicatorParams::new(self.tau_sigmoid)?;
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidParam("lambda must be >= 0".into()));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::InvalidParam("eta must be >= 0".into()));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidParam("gamma must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam("momentum must lie in [0,1)".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidParam("weight_decay must be >= 0".into()));
        }
        if !self.q_init.is_finite() {
            return Err(Error::NonFinite("q_init"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParam("hidden dims must be positive".into()));
        }
        Ok(())
    }

    pub fn level(&self) -> QuantileLevel {
        QuantileLevel::new(self.alpha).unwrap()
    }

    pub fn tau(&self) -> SmoothedIndicatorParams {
        SmoothedIndicatorParams::new(self.tau_sigmoid).unwrap()
    }
}

/// The fixed 99-point alpha grid used by the CUT loss.
pub fn cut_alpha_grid() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// One per-epoch diagnostic record. Fields that a method does not define
/// (e.g. the learned quantile under plain CE) are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    pub upper_loss: f64,
    pub qr_loss: f64,
    /// Learned q (DPSM) or mean per-step batch quantile (ConfTr/CUT).
    pub q: f64,
    /// Dataset-level quantile Q-hat of true-label scores on the
    /// diagnostic split.
    pub dataset_quantile: f64,
    /// |q - Q-hat| for DPSM; mean per-step |q_hat_s - Q-hat| for SA methods.
    pub quantile_abs_err: f64,
    /// dm(q) - dm(Q-hat); defined for DPSM only.
    pub dm_gap: f64,
    /// qr(q) - qr(Q-hat); defined for DPSM only.
    pub qr_gap: f64,
    pub soft_set_size: f64,
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "epoch",
    "ce_loss",
    "upper_loss",
    "qr_loss",
    "q",
    "dataset_quantile",
    "quantile_abs_err",
    "dm_gap",
    "qr_gap",
    "soft_set_size",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.ce_loss,
                r.upper_loss,
                r.qr_loss,
                r.q,
                r.dataset_quantile,
                r.quantile_abs_err,
                r.dm_gap,
                r.qr_gap,
                r.soft_set_size
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MlpModel,
    /// Learned quantile; present for DPSM only.
    pub q: Option<f64>,
    pub trace: TrainTrace,
}

/// Shuffle-split a row set into two disjoint halves (sizes within 1),
/// each returned in ascending row order.
pub fn split_disjoint(rows: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = rows.to_vec();
    let mut rng = seeding::stream(seed, "trainer.split", 0);
    shuffled.shuffle(&mut rng);
    let d1_len = shuffled.len().div_ceil(2);
    let (a, b) = shuffled.split_at(d1_len);
    let mut d1 = a.to_vec();
    let mut d2 = b.to_vec();
    d1.sort_unstable();
    d2.sort_unstable();
    assert!(d1.iter().all(|i| !d2.contains(i)), "split halves overlap");
    assert!(d1.len().abs_diff(d2.len()) <= 1, "split halves unbalanced");
    (d1, d2)
}

/// Epoch-shuffled without-replacement batch stream over a fixed row list.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchStream {
    fn new(rows: Vec<usize>, seed: u64, label: &str) -> Self {
        Self {
            order: rows,
            cursor: usize::MAX, // force a shuffle before the first batch
            rng: seeding::stream(seed, label, 0),
        }
    }

    fn start_epoch(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next batch of `s` rows; reshuffles when fewer than `s` remain.
    fn next_batch(&mut self, s: usize) -> &[usize] {
        if self.cursor == usize::MAX || self.cursor + s > self.order.len() {
            self.start_epoch();
        }
        let batch = &self.order[self.cursor..self.cursor + s];
        self.cursor += s;
        batch
    }
}

struct SgdState {
    velocity: Vec<f64>,
    lr_mult: f64,
}

impl SgdState {
    fn new(model: &MlpModel) -> Self {
        Self {
            velocity: vec![0.0; model.num_params()],
            lr_mult: 1.0,
        }
    }

    fn apply_schedule(&mut self, schedule: &[(usize, f64)], epoch: usize) {
        for &(e, m) in schedule {
            if e == epoch {
                self.lr_mult *= m;
            }
        }
    }

    /// Momentum SGD with weight decay on the model parameters only.
    fn step(&mut self, model: &MlpModel, grads: &GradientBundle, config: &TrainConfig) -> Result<MlpModel> {
        let mut theta = model.params_flat();
        let g = MlpModel::grads_flat(grads);
        let lr = config.eta * self.lr_mult;
        for i in 0..theta.len() {
            self.velocity[i] =
                config.momentum * self.velocity[i] + g[i] + config.weight_decay * theta[i];
            theta[i] -= lr * self.velocity[i];
        }
        model.with_params_flat(&theta)
    }
}

/// Dispatch on `config.method`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    config.score.validate(dataset.num_classes())?;
    match config.method {
        Method::Ce => train_ce(config, dataset),
        Method::ConfTr | Method::Cut => train_sa(config, dataset),
        Method::Dpsm => train_dpsm(config, dataset),
    }
}

fn init_model(config: &TrainConfig, dataset: &Dataset) -> Result<MlpModel> {
    let mut dims = vec![dataset.dim()];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(dataset.num_classes());
    let mut rng = seeding::stream(config.seed, "trainer.init", 0);
    MlpModel::new_seeded(&dims, config.activation, &mut rng)
}

fn check_finite(model: &MlpModel, loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() || model.params_flat().iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalFailure { epoch });
    }
    Ok(())
}

/// Plain mini-batch SGD on cross-entropy with momentum, weight decay and
/// the learning-rate schedule.
pub fn train_ce(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    let rows = dataset.rows_in(Split::Train);
    if rows.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut model = init_model(config, dataset)?;
    let mut state = SgdState::new(&model);
    let mut stream = BatchStream::new(rows.clone(), config.seed, "trainer.batches.primary");
    let steps = rows.len() / config.batch_size.min(rows.len());
    let s = config.batch_size.min(rows.len());
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        state.apply_schedule(&config.lr_schedule, epoch);
        stream.start_epoch();
        for _ in 0..steps.max(1) {
            let batch_rows = stream.next_batch(s).to_vec();
            let batch = dataset.examples(&batch_rows);
            let ce = cross_entropy(&model, &batch, true)?;
            model = state.step(&model, ce.grad_model.as_ref().unwrap(), config)?;
        }
        let diag = dataset.examples(&rows);
        let record = epoch_diagnostics(&model, None, None, &diag, config, epoch)?;
        check_finite(&model, record.ce_loss, epoch)?;
        trace.records.push(record);
    }
    Ok(TrainOutput {
        model,
        q: None,
        trace,
    })
}

/// SA-based conformal training: per step minimizes
/// `CE + lambda * (ConfTr | CUT)` with SGD. With lambda = 0 the conformal
/// term is skipped entirely, reproducing `train_ce` bit-identically.
pub fn train_sa(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    let rows = dataset.rows_in(Split::Train);
    if rows.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let level = config.level();
    let tau = config.tau();
    let grid = cut_alpha_grid();
    let mut model = init_model(config, dataset)?;
    let mut state = SgdState::new(&model);
    let mut stream = BatchStream::new(rows.clone(), config.seed, "trainer.batches.primary");
    let s = config.batch_size.min(rows.len());
    let steps = (rows.len() / s).max(1);
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        state.apply_schedule(&config.lr_schedule, epoch);
        stream.start_epoch();
        let mut step_quantiles = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch_rows = stream.next_batch(s).to_vec();
            let batch = dataset.examples(&batch_rows);
            let ce = cross_entropy(&model, &batch, true)?;
            let mut grads = ce.grad_model.unwrap();
            if config.lambda > 0.0 {
                let conf = match config.method {
                    Method::ConfTr => sa_conftr_loss(&model, &batch, level, tau, &config.score, true)?,
                    Method::Cut => cut_loss(&model, &batch, &grid, &config.score, true)?,
                    _ => unreachable!("train_sa requires an SA method"),
                };
                grads.axpy(config.lambda, conf.grad_model.as_ref().unwrap());
                step_quantiles.push(batch_quantile(&model, &batch, level, &config.score)?);
            }
            model = state.step(&model, &grads, config)?;
        }
        let diag = dataset.examples(&rows);
        let step_q = if step_quantiles.is_empty() {
            None
        } else {
            Some(step_quantiles)
        };
        let record = epoch_diagnostics(&model, None, step_q.as_deref(), &diag, config, epoch)?;
        check_finite(&model, record.ce_loss, epoch)?;
        trace.records.push(record);
    }
    Ok(TrainOutput {
        model,
        q: None,
        trace,
    })
}

/// Bilevel DPSM training. The train split is shuffled once into disjoint
/// halves D1 and D2. Each step samples a batch from each half, computes
/// the CE gradient and the pinball subgradient on the D1 batch and the DM
/// conformal gradient at the current q on the D2 batch, then updates the
/// model with `eta (grad_CE + lambda grad_DM)` and the quantile with
/// `gamma grad_QR`. With lambda = gamma = 0 the loop degenerates to
/// cross-entropy training on D1.
pub fn train_dpsm(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    let rows = dataset.rows_in(Split::Train);
    if rows.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let (d1, d2) = split_disjoint(&rows, config.seed);
    if d1.is_empty() || d2.is_empty() {
        return Err(Error::EmptySplit("train half"));
    }
    let level = config.level();
    let tau = config.tau();
    let mut model = init_model(config, dataset)?;
    let mut q = config.q_init;
    let mut state = SgdState::new(&model);
    let mut stream1 = BatchStream::new(d1.clone(), config.seed, "trainer.batches.primary");
    let mut stream2 = BatchStream::new(d2.clone(), config.seed, "trainer.batches.secondary");
    let s = config.batch_size.min(d1.len()).min(d2.len());
    let steps = (d1.len() / s).max(1);
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        state.apply_schedule(&config.lr_schedule, epoch);
        stream1.start_epoch();
        for _ in 0..steps {
            let b1_rows = stream1.next_batch(s).to_vec();
            let b1 = dataset.examples(&b1_rows);
            let ce = cross_entropy(&model, &b1, true)?;
            let mut grads = ce.grad_model.unwrap();

            let mut q_grad = None;
            if config.gamma > 0.0 {
                let qr = qr_loss(&model, QuantileParam::new(q)?, &b1, level, &config.score)?;
                q_grad = qr.grad_q;
            }
            if config.lambda > 0.0 {
                let b2_rows = stream2.next_batch(s).to_vec();
                let b2 = dataset.examples(&b2_rows);
                let dm = dm_conformal_loss(
                    &model,
                    QuantileParam::new(q)?,
                    &b2,
                    tau,
                    &config.score,
                    true,
                )?;
                grads.axpy(config.lambda, dm.grad_model.as_ref().unwrap());
            }

            model = state.step(&model, &grads, config)?;
            if let Some(g) = q_grad {
                q -= config.gamma * g;
            }
        }
        let diag = dataset.examples(&d1);
        let record = epoch_diagnostics(&model, Some(q), None, &diag, config, epoch)?;
        check_finite(&model, record.ce_loss + record.qr_loss, epoch)?;
        if !q.is_finite() {
            return Err(Error::NumericalFailure { epoch });
        }
        trace.records.push(record);
    }
    Ok(TrainOutput {
        model,
        q: Some(q),
        trace,
    })
}

/// Per-epoch diagnostics on the diagnostic split: the dataset-level
/// quantile of true-label scores, the optimization gaps of the DM and QR
/// losses between the learned q and that quantile, and the soft set size.
pub fn epoch_diagnostics(
    model: &MlpModel,
    learned_q: Option<f64>,
    step_quantiles: Option<&[f64]>,
    diag: &[Example<'_>],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let level = config.level();
    let tau = config.tau();
    let scores = crate::losses::true_label_scores(model, diag, &config.score)?;
    let q_hat = empirical_quantile(&scores, level)?;
    let ce = cross_entropy(model, diag, false)?.value;
    let qr_at = |q: f64| -> Result<f64> {
        Ok(qr_loss(model, QuantileParam::new(q)?, diag, level, &config.score)?.value)
    };
    let dm_at = |q: f64| -> Result<f64> {
        Ok(dm_conformal_loss(model, QuantileParam::new(q)?, diag, tau, &config.score, false)?.value)
    };

    let (q_rec, quantile_abs_err, dm_gap, qr_gap, qr_value, soft_size) = match learned_q {
        Some(q) => (
            q,
            (q - q_hat).abs(),
            dm_at(q)? - dm_at(q_hat)?,
            qr_at(q)? - qr_at(q_hat)?,
            qr_at(q)?,
            dm_at(q)?,
        ),
        None => {
            let (q_rec, err) = match step_quantiles {
                Some(qs) if !qs.is_empty() => {
                    let mean_q = qs.iter().sum::<f64>() / qs.len() as f64;
                    let mean_err =
                        qs.iter().map(|&v| (v - q_hat).abs()).sum::<f64>() / qs.len() as f64;
                    (mean_q, mean_err)
                }
                _ => (f64::NAN, f64::NAN),
            };
            (q_rec, err, f64::NAN, f64::NAN, qr_at(q_hat)?, dm_at(q_hat)?)
        }
    };

    let upper_loss = ce + config.lambda * soft_size;
    Ok(EpochRecord {
        epoch,
        ce_loss: ce,
        upper_loss,
        qr_loss: qr_value,
        q: q_rec,
        dataset_quantile: q_hat,
        quantile_abs_err,
        dm_gap,
        qr_gap,
        soft_set_size: soft_size,
    })
}
