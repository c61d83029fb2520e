//! Experiment pipelines behind the CLI: dataset generation, training,
//! evaluation, and the theory-lab reports. Every command validates its
//! config before doing any work, writes its outputs under a single
//! directory with fixed filenames, and finishes by writing a manifest
//! (config echo + hash, seed, timestamps, file inventory) exactly once.

use crate::conformal::{calibrate, coverage_trial, write_predictions_csv};
use crate::core_math::{QuantileLevel, SmoothedIndicatorParams};
use crate::data::{load_csv, CsvSchema, Dataset, GaussianMixtureParams, Split};
use crate::error::{Error, Result};
use crate::losses::true_label_scores;
use crate::metrics::metrics_report;
use crate::model::MlpModel;
use crate::scores::ScoreSpec;
use crate::seeding;
use crate::theory::{
    batch_quantile_pmf_beta, batch_quantile_pmf_exact, bilipschitz_diagnostic, heb_verify,
    quantile_error_scaling, soft_size_curve, ScalingRoute,
};
use crate::trainer::{train, TrainConfig};
use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NumericalFailure { .. } => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

/// Collects the output inventory during a run; consumed when the manifest
/// is written so it can only be written once.
pub struct ManifestWriter {
    started: DateTime<Utc>,
    config: Value,
    seed: u64,
    outputs: Vec<String>,
}

impl ManifestWriter {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            started: Utc::now(),
            config: serde_json::to_value(config)?,
            seed,
            outputs: Vec::new(),
        })
    }

    pub fn add(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.outputs.push("manifest.json".to_string());
        let config_bytes = serde_json::to_vec(&self.config)?;
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config_hash: hex_digest(&config_bytes),
            config: self.config,
            started_at: self.started.to_rfc3339(),
            finished_at: Utc::now().to_rfc3339(),
            outputs: self.outputs,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(out_dir.join("manifest.json"), json)?;
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    Ok(())
}

fn write_file(out_dir: &Path, name: &str, bytes: &[u8], manifest: &mut ManifestWriter) -> Result<()> {
    fs::write(out_dir.join(name), bytes)?;
    manifest.add(name);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub data: GaussianMixtureParams,
    pub fractions: [f64; 4],
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            data: GaussianMixtureParams {
                k: 10,
                d: 20,
                n: 20_000,
                class_separation: 3.0,
                within_class_scale: 1.0,
            },
            fractions: [0.6, 0.05, 0.15, 0.2],
            seed: 0,
        }
    }
}

pub fn cmd_gen_data(config: &GenDataConfig, out_dir: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestWriter::new(config, config.seed)?;
    let mut dataset = crate::data::gen_gaussian_mixture(&config.data, config.seed)?;
    dataset.assign_splits(config.fractions, config.seed)?;
    dataset.save_csv(&out_dir.join("data.csv"))?;
    manifest.add("data.csv");
    manifest.finish(out_dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Path to a dataset CSV produced by gen-data or an external source.
    pub dataset: PathBuf,
    pub fractions: [f64; 4],
    pub split_seed: u64,
    pub train: TrainConfig,
}

/// Read the header of a dataset CSV to recover the feature count.
pub fn schema_for_file(path: &Path) -> Result<CsvSchema> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or(Error::EmptyDataset)?;
    let cols = header.split(',').count();
    if cols < 2 {
        return Err(Error::Config("dataset header needs features and a label".into()));
    }
    Ok(CsvSchema::default_for_dim(cols - 1))
}

pub fn load_split_dataset(path: &Path, fractions: [f64; 4], split_seed: u64) -> Result<Dataset> {
    let schema = schema_for_file(path)?;
    let mut dataset = load_csv(path, &schema)?;
    dataset.assign_splits(fractions, split_seed)?;
    Ok(dataset)
}

#[derive(Debug, Serialize)]
struct TrainResult {
    method: crate::trainer::Method,
    q: Option<f64>,
    epochs: usize,
    final_ce_loss: Option<f64>,
}

pub fn cmd_train(config: &TrainRunConfig, out_dir: &Path) -> Result<()> {
    config.train.validate()?;
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestWriter::new(config, config.train.seed)?;
    let dataset = load_split_dataset(&config.dataset, config.fractions, config.split_seed)?;
    let output = train(&config.train, &dataset)?;

    output.model.save(&out_dir.join("model.json"))?;
    manifest.add("model.json");

    let mut trace = Vec::new();
    output.trace.write_csv(&mut trace)?;
    write_file(out_dir, "trace.csv", &trace, &mut manifest)?;

    let result = TrainResult {
        method: config.train.method,
        q: output.q,
        epochs: output.trace.records.len(),
        final_ce_loss: output.trace.records.last().map(|r| r.ce_loss),
    };
    write_file(
        out_dir,
        "result.json",
        serde_json::to_string_pretty(&result)?.as_bytes(),
        &mut manifest,
    )?;
    manifest.finish(out_dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub fractions: [f64; 4],
    pub split_seed: u64,
    pub score: ScoreSpec,
    pub alpha: f64,
    pub tau: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct EvalAggregate {
    trials: usize,
    coverage_mean: f64,
    coverage_std: f64,
    set_size_mean: f64,
    set_size_std: f64,
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    aggregate: EvalAggregate,
    report: &'a crate::metrics::MetricsReport,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_eval(config: &EvalRunConfig, out_dir: &Path) -> Result<()> {
    let level = QuantileLevel::new(config.alpha)?;
    let tau = SmoothedIndicatorParams::new(config.tau)?;
    if config.trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestWriter::new(config, config.seed)?;
    let model = MlpModel::load(&config.checkpoint)?;
    config.score.validate(model.num_classes())?;
    let dataset = load_split_dataset(&config.dataset, config.fractions, config.split_seed)?;
    let cal = dataset.examples_in(Split::Cal);
    let test = dataset.examples_in(Split::Test);

    let mut trials_csv = Vec::new();
    writeln!(trials_csv, "trial,coverage,avg_set_size,threshold")?;
    let mut coverages = Vec::with_capacity(config.trials);
    let mut sizes = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let trial_seed = config.seed.wrapping_add(trial as u64);
        let out = coverage_trial(&model, &cal, &test, config.score.clone(), level, trial_seed)?;
        writeln!(
            trials_csv,
            "{},{},{},{}",
            trial, out.coverage, out.avg_set_size, out.threshold
        )?;
        coverages.push(out.coverage);
        sizes.push(out.avg_set_size);
    }
    write_file(out_dir, "trials.csv", &trials_csv, &mut manifest)?;

    // full metrics + prediction dump for the first trial
    let mut cal_rng = seeding::stream(config.seed, "conformal.cal", 0);
    let predictor = calibrate(&model, &cal, config.score.clone(), level, &mut cal_rng)?;
    let mut test_rng = seeding::stream(config.seed, "conformal.test", 0);
    let sets = predictor.predict_all(&test, &mut test_rng)?;
    let report = metrics_report(
        &model,
        predictor.threshold,
        &test,
        &sets,
        tau,
        &config.score,
        level,
        config.seed,
    )?;

    let (coverage_mean, coverage_std) = mean_std(&coverages);
    let (set_size_mean, set_size_std) = mean_std(&sizes);
    let output = EvalOutput {
        aggregate: EvalAggregate {
            trials: config.trials,
            coverage_mean,
            coverage_std,
            set_size_mean,
            set_size_std,
        },
        report: &report,
    };
    write_file(
        out_dir,
        "metrics.json",
        serde_json::to_string_pretty(&output)?.as_bytes(),
        &mut manifest,
    )?;

    let mut per_class = Vec::new();
    report.write_per_class_csv(&mut per_class)?;
    write_file(out_dir, "per_class.csv", &per_class, &mut manifest)?;

    let mut predictions = Vec::new();
    write_predictions_csv(&sets, &test, &mut predictions)?;
    write_file(out_dir, "predictions.csv", &predictions, &mut manifest)?;
    manifest.finish(out_dir)
}

#[derive(Debug, Clone, Serialize)]
pub enum TheoryCmd {
    Pmf {
        n: usize,
        s: usize,
        alpha: f64,
    },
    Scaling {
        alpha: f64,
        trials: usize,
    },
    Heb {
        m: usize,
        alpha: f64,
        instances: usize,
    },
    Bilipschitz {
        /// Optional trained checkpoint + dataset; falls back to uniform
        /// synthetic scores of this size when absent.
        checkpoint: Option<PathBuf>,
        dataset: Option<PathBuf>,
        n: usize,
    },
    SoftCurve {
        checkpoint: PathBuf,
        dataset: PathBuf,
        tau: f64,
    },
}

pub fn cmd_theory(cmd: &TheoryCmd, seed: u64, out_dir: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let mut manifest = ManifestWriter::new(cmd, seed)?;
    match cmd {
        TheoryCmd::Pmf { n, s, alpha } => {
            let level = QuantileLevel::new(*alpha)?;
            let exact = batch_quantile_pmf_exact(*n, *s, level)?;
            let mut buf = Vec::new();
            exact.write_csv(&mut buf)?;
            write_file(out_dir, "pmf_exact.csv", &buf, &mut manifest)?;
            match batch_quantile_pmf_beta(*n, *s, level) {
                Ok(beta) => {
                    let mut buf = Vec::new();
                    beta.write_csv(&mut buf)?;
                    write_file(out_dir, "pmf_beta.csv", &buf, &mut manifest)?;
                }
                Err(e) => eprintln!("warning: beta asymptotic skipped: {e}"),
            }
        }
        TheoryCmd::Scaling { alpha, trials } => {
            let level = QuantileLevel::new(*alpha)?;
            let sa = quantile_error_scaling(
                ScalingRoute::SaBatch { n: 4000 },
                &[10, 20, 40, 80, 160],
                level,
                *trials,
                seed,
            )?;
            let mut buf = Vec::new();
            sa.write_csv(&mut buf)?;
            write_file(out_dir, "scaling_sa.csv", &buf, &mut manifest)?;
            let dpsm = quantile_error_scaling(
                ScalingRoute::DpsmDescent { steps: 4000 },
                &[500, 2000, 8000],
                level,
                (*trials / 4).max(2),
                seed,
            )?;
            let mut buf = Vec::new();
            dpsm.write_csv(&mut buf)?;
            write_file(out_dir, "scaling_dpsm.csv", &buf, &mut manifest)?;
        }
        TheoryCmd::Heb { m, alpha, instances } => {
            let level = QuantileLevel::new(*alpha)?;
            let mut buf = Vec::new();
            writeln!(buf, "instance,c_hat,optimal_lo,optimal_hi,min_loss")?;
            for i in 0..*instances {
                let mut rng = seeding::stream(seed, "theory.heb", i as u64);
                let scores: Vec<f64> = (0..*m).map(|_| rng.gen::<f64>()).collect();
                let probes: Vec<f64> = (0..400).map(|t| -1.0 + t as f64 * (3.0 / 399.0)).collect();
                let report = heb_verify(&scores, level, &probes)?;
                writeln!(
                    buf,
                    "{},{},{},{},{}",
                    i, report.c_hat, report.optimal_set.0, report.optimal_set.1, report.min_loss
                )?;
            }
            write_file(out_dir, "heb.csv", &buf, &mut manifest)?;
        }
        TheoryCmd::Bilipschitz {
            checkpoint,
            dataset,
            n,
        } => {
            let scores = match (checkpoint, dataset) {
                (Some(ckpt), Some(data)) => {
                    let model = MlpModel::load(ckpt)?;
                    let ds = load_split_dataset(data, [1.0, 0.0, 0.0, 0.0], seed)?;
                    let examples = ds.examples_in(Split::Train);
                    true_label_scores(&model, &examples, &ScoreSpec::hps())?
                }
                _ => {
                    let mut rng = seeding::stream(seed, "theory.bilipschitz", 0);
                    (0..*n).map(|_| rng.gen::<f64>()).collect()
                }
            };
            let (l1, l2) = bilipschitz_diagnostic(&scores)?;
            let json = serde_json::json!({
                "l1_hat": l1,
                "l2_hat": l2,
                "n": scores.len(),
            });
            write_file(
                out_dir,
                "bilipschitz.json",
                serde_json::to_string_pretty(&json)?.as_bytes(),
                &mut manifest,
            )?;
        }
        TheoryCmd::SoftCurve {
            checkpoint,
            dataset,
            tau,
        } => {
            let model = MlpModel::load(checkpoint)?;
            let ds = load_split_dataset(dataset, [1.0, 0.0, 0.0, 0.0], seed)?;
            let examples = ds.examples_in(Split::Train);
            let tau = SmoothedIndicatorParams::new(*tau)?;
            let grid: Vec<f64> = (1..=49).map(|i| 0.02 * i as f64).collect();
            let curve = soft_size_curve(&model, &examples, tau, &grid, &ScoreSpec::hps())?;
            let mut buf = Vec::new();
            writeln!(buf, "coverage,soft_size")?;
            for (c, v) in curve {
                writeln!(buf, "{c},{v}")?;
            }
            write_file(out_dir, "softcurve.csv", &buf, &mut manifest)?;
        }
    }
    manifest.finish(out_dir)
}

/// Read and deserialize a JSON config file, surfacing parse errors as
/// config errors.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
