//! Split conformal calibration and prediction-set construction.
//!
//! A [`CalibratedPredictor`] wraps a trained model with a threshold
//! estimated on a held-out calibration split: the ceil((1-alpha)(m+1))-th
//! smallest true-label score. Prediction sets collect every label whose
//! score falls at or below the threshold (hard indicator; the boundary is
//! included).

use crate::core_math::{empirical_quantile, QuantileLevel};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::scores::{score_all_classes, score_one, ScoreSpec};
use crate::seeding;
use rand::Rng;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct CalibratedPredictor<'m> {
    pub model: &'m MlpModel,
    pub score: ScoreSpec,
    pub level: QuantileLevel,
    pub threshold: f64,
    pub calibration_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    /// Member class indices, ascending.
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }
}

/// Calibrate a predictor on held-out examples. For randomized scores
/// (APS/RAPS with `Randomization::Sampled`) one u is drawn per calibration
/// example from `rng`.
pub fn calibrate<'m, R: Rng>(
    model: &'m MlpModel,
    cal: &[Example<'_>],
    score: ScoreSpec,
    level: QuantileLevel,
    rng: &mut R,
) -> Result<CalibratedPredictor<'m>> {
    score.validate(model.num_classes())?;
    let m = cal.len();
    let k = level.conformal_index(m);
    if m == 0 || k > m {
        return Err(Error::InsufficientCalibration {
            k,
            m,
            alpha: level.alpha(),
        });
    }
    let mut scores = Vec::with_capacity(m);
    for &(x, y) in cal {
        let probs = model.forward(x)?;
        let u = score.draw_u(rng);
        scores.push(score_one(&probs, y, u, &score)?);
    }
    let threshold = empirical_quantile(&scores, level)?;
    Ok(CalibratedPredictor {
        model,
        score,
        level,
        threshold,
        calibration_size: m,
    })
}

impl CalibratedPredictor<'_> {
    /// Prediction set {y : S(x, y) <= threshold}. One u is drawn per call
    /// and shared across the K per-class scores.
    pub fn predict_set<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<PredictionSet> {
        let probs = self.model.forward(x)?;
        let u = self.score.draw_u(rng);
        let scores = score_all_classes(&probs, u, &self.score)?;
        let labels = scores
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s <= self.threshold)
            .map(|(y, _)| y)
            .collect();
        Ok(PredictionSet { labels })
    }

    /// Prediction sets over a whole split, one rng draw per example.
    pub fn predict_all<R: Rng>(
        &self,
        examples: &[Example<'_>],
        rng: &mut R,
    ) -> Result<Vec<PredictionSet>> {
        examples
            .iter()
            .map(|&(x, _)| self.predict_set(x, rng))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageOutcome {
    pub coverage: f64,
    pub avg_set_size: f64,
    pub threshold: f64,
}

/// One calibrate + evaluate pass; randomization for both phases derives
/// from `seed` so trials are reproducible.
pub fn coverage_trial(
    model: &MlpModel,
    cal: &[Example<'_>],
    test: &[Example<'_>],
    score: ScoreSpec,
    level: QuantileLevel,
    seed: u64,
) -> Result<CoverageOutcome> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cal_rng = seeding::stream(seed, "conformal.cal", 0);
    let predictor = calibrate(model, cal, score, level, &mut cal_rng)?;
    let mut test_rng = seeding::stream(seed, "conformal.test", 0);
    let sets = predictor.predict_all(test, &mut test_rng)?;
    let covered = sets
        .iter()
        .zip(test)
        .filter(|(set, &(_, y))| set.contains(y))
        .count();
    let total_size: usize = sets.iter().map(|s| s.size()).sum();
    Ok(CoverageOutcome {
        coverage: covered as f64 / test.len() as f64,
        avg_set_size: total_size as f64 / test.len() as f64,
        threshold: predictor.threshold,
    })
}

/// Prediction dump: one row per example with the covered flag and the
/// semicolon-joined member labels.
pub fn write_predictions_csv<W: Write>(
    sets: &[PredictionSet],
    examples: &[Example<'_>],
    mut w: W,
) -> Result<()> {
    writeln!(w, "example_id,true_label,set_size,covered,labels")?;
    for (i, (set, &(_, y))) in sets.iter().zip(examples).enumerate() {
        let joined: Vec<String> = set.labels.iter().map(|l| l.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            i,
            y,
            set.size(),
            set.contains(y),
            joined.join(";")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, Dataset, GaussianMixtureParams, Split};
    use crate::losses::true_label_scores;
    use crate::model::Activation;
    use crate::scores::Randomization;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(d: usize, k: usize, seed: u64) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpModel::new_seeded(&[d, 8, k], Activation::Tanh, &mut rng).unwrap()
    }

    fn mixture(seed: u64, n: usize) -> Dataset {
        let mut ds = gen_gaussian_mixture(
            &GaussianMixtureParams {
                k: 3,
                d: 4,
                n,
                class_separation: 2.0,
                within_class_scale: 1.0,
            },
            seed,
        )
        .unwrap();
        ds.assign_splits([0.0, 0.0, 0.5, 0.5], seed).unwrap();
        ds
    }

    #[test]
    fn threshold_nine_scores() {
        // m=9 uniform scores, alpha=0.1 -> k = ceil(0.9*10) = 9 -> 0.9
        let scores: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let level = QuantileLevel::new(0.1).unwrap();
        assert_relative_eq!(empirical_quantile(&scores, level).unwrap(), 0.9);
    }

    #[test]
    fn constant_scores_threshold() {
        // all calibration scores equal c -> threshold c, via a constant
        // (uniform-output) model and HPS
        let model = MlpModel::new_seeded(&[2, 3], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let zero = model.with_params_flat(&vec![0.0; model.num_params()]).unwrap();
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, -(i as f64)]).collect();
        let cal: Vec<Example<'_>> = xs.iter().map(|x| (x.as_slice(), 0)).collect();
        let level = QuantileLevel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = calibrate(&zero, &cal, ScoreSpec::hps(), level, &mut rng).unwrap();
        assert_relative_eq!(p.threshold, 1.0 - 1.0 / 3.0);
    }

    #[test]
    fn threshold_matches_sort_oracle() {
        let ds = mixture(3, 400);
        let model = tiny_model(4, 3, 3);
        let cal = ds.examples_in(Split::Cal);
        let level = QuantileLevel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = calibrate(&model, &cal, ScoreSpec::hps(), level, &mut rng).unwrap();

        let mut scores = true_label_scores(&model, &cal, &ScoreSpec::hps()).unwrap();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = level.conformal_index(scores.len());
        assert_eq!(p.threshold, scores[k - 1]);
        assert_eq!(p.calibration_size, cal.len());
    }

    #[test]
    fn insufficient_calibration_errors() {
        let model = tiny_model(4, 3, 0);
        let x = vec![0.0; 4];
        let cal: Vec<Example<'_>> = (0..5).map(|_| (x.as_slice(), 0)).collect();
        let level = QuantileLevel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = calibrate(&model, &cal, ScoreSpec::hps(), level, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientCalibration { k: 6, m: 5, .. }));
    }

    #[test]
    fn predict_set_extremes_and_fixture() {
        let model = tiny_model(4, 3, 1);
        let x = vec![0.3, -0.2, 0.5, 0.1];
        let level = QuantileLevel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let mut p = CalibratedPredictor {
            model: &model,
            score: ScoreSpec::hps(),
            level,
            threshold: 1.0, // >= max HPS score
            calibration_size: 100,
        };
        assert_eq!(p.predict_set(&x, &mut rng).unwrap().size(), 3);
        p.threshold = -0.1; // below all scores
        assert_eq!(p.predict_set(&x, &mut rng).unwrap().size(), 0);

        // HPS, probs [0.7, 0.2, 0.1], threshold 0.5 -> {0}
        let scores = score_all_classes(&[0.7, 0.2, 0.1], 1.0, &ScoreSpec::hps()).unwrap();
        let labels: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s <= 0.5)
            .map(|(y, _)| y)
            .collect();
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn boundary_score_is_included() {
        // calibrate and predict on the same example: its score equals the
        // threshold when it is the selected order statistic, and must be in
        let ds = mixture(4, 200);
        let model = tiny_model(4, 3, 4);
        let cal = ds.examples_in(Split::Cal);
        let level = QuantileLevel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = calibrate(&model, &cal, ScoreSpec::hps(), level, &mut rng).unwrap();
        let scores = true_label_scores(&model, &cal, &ScoreSpec::hps()).unwrap();
        let (idx, _) = scores
            .iter()
            .enumerate()
            .find(|&(_, &s)| s == p.threshold)
            .expect("threshold is one of the calibration scores");
        let (x, y) = cal[idx];
        assert!(p.predict_set(x, &mut rng).unwrap().contains(y));
    }

    #[test]
    fn monotone_nesting_in_alpha() {
        let ds = mixture(5, 400);
        let model = tiny_model(4, 3, 5);
        let cal = ds.examples_in(Split::Cal);
        let test = ds.examples_in(Split::Test);
        let spec = ScoreSpec::aps(Randomization::FixedU(1.0));
        let a1 = QuantileLevel::new(0.05).unwrap();
        let a2 = QuantileLevel::new(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p1 = calibrate(&model, &cal, spec.clone(), a1, &mut rng).unwrap();
        let p2 = calibrate(&model, &cal, spec, a2, &mut rng).unwrap();
        assert!(p1.threshold >= p2.threshold);
        for &(x, _) in &test {
            let s1 = p1.predict_set(x, &mut rng).unwrap();
            let s2 = p2.predict_set(x, &mut rng).unwrap();
            for l in &s2.labels {
                assert!(s1.contains(*l), "set at larger alpha not nested");
            }
        }
    }

    #[test]
    fn per_label_loop_agrees_with_score_all_classes() {
        let model = tiny_model(4, 3, 6);
        let x = vec![0.1, 0.9, -0.4, 0.2];
        let spec = ScoreSpec::aps(Randomization::FixedU(0.37));
        let p = CalibratedPredictor {
            model: &model,
            score: spec.clone(),
            level: QuantileLevel::new(0.1).unwrap(),
            threshold: 0.6,
            calibration_size: 50,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = p.predict_set(&x, &mut rng).unwrap();
        let probs = model.forward(&x).unwrap();
        let by_loop: Vec<usize> = (0..3)
            .filter(|&y| score_one(&probs, y, 0.37, &spec).unwrap() <= p.threshold)
            .collect();
        assert_eq!(set.labels, by_loop);
    }

    #[test]
    fn self_test_coverage_at_least_target() {
        // test set identical to calibration set: the threshold covers at
        // least ceil((1-alpha)(m+1)) of its own scores
        let ds = mixture(7, 300);
        let model = tiny_model(4, 3, 7);
        let cal = ds.examples_in(Split::Cal);
        let level = QuantileLevel::new(0.1).unwrap();
        let out = coverage_trial(&model, &cal, &cal, ScoreSpec::hps(), level, 0).unwrap();
        assert!(out.coverage >= 1.0 - level.alpha());
    }

    #[test]
    fn alpha_to_zero_gives_full_sets() {
        let ds = mixture(8, 6000);
        let model = tiny_model(4, 3, 8);
        let cal = ds.examples_in(Split::Cal);
        let test = ds.examples_in(Split::Test);
        let level = QuantileLevel::new(0.0005).unwrap();
        let out = coverage_trial(&model, &cal, &test, ScoreSpec::hps(), level, 0).unwrap();
        assert!(out.coverage >= 0.999);
        assert!(out.avg_set_size > 2.9);
    }

    #[test]
    fn exchangeability_coverage_interval() {
        // R repeated splits of exchangeable data: mean coverage must land
        // in [1-alpha, 1-alpha + 1/(m+1)] up to Monte Carlo error
        let level = QuantileLevel::new(0.1).unwrap();
        let model = tiny_model(4, 3, 10);
        let trials = 200usize;
        let mut coverages = Vec::with_capacity(trials);
        let mut m = 0usize;
        for t in 0..trials {
            let mut ds = gen_gaussian_mixture(
                &GaussianMixtureParams {
                    k: 3,
                    d: 4,
                    n: 160,
                    class_separation: 2.0,
                    within_class_scale: 1.0,
                },
                1000 + t as u64,
            )
            .unwrap();
            ds.assign_splits([0.0, 0.0, 0.5, 0.5], t as u64).unwrap();
            let cal = ds.examples_in(Split::Cal);
            let test = ds.examples_in(Split::Test);
            m = cal.len();
            let out =
                coverage_trial(&model, &cal, &test, ScoreSpec::hps(), level, t as u64).unwrap();
            coverages.push(out.coverage);
        }
        let mean = coverages.iter().sum::<f64>() / trials as f64;
        let var = coverages.iter().map(|c| (c - mean).powi(2)).sum::<f64>()
            / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        let lo = 1.0 - level.alpha() - 3.0 * se;
        let hi = 1.0 - level.alpha() + 1.0 / (m as f64 + 1.0) + 3.0 * se;
        assert!(
            mean >= lo && mean <= hi,
            "mean coverage {mean} outside [{lo}, {hi}]"
        );
    }

    #[test]
    fn prediction_dump_format() {
        let ds = mixture(11, 120);
        let model = tiny_model(4, 3, 11);
        let cal = ds.examples_in(Split::Cal);
        let test = ds.examples_in(Split::Test);
        let level = QuantileLevel::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = calibrate(&model, &cal, ScoreSpec::hps(), level, &mut rng).unwrap();
        let sets = p.predict_all(&test, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_predictions_csv(&sets, &test, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "example_id,true_label,set_size,covered,labels"
        );
        assert_eq!(lines.count(), test.len());
    }
}
