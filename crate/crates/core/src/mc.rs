//! Monte-Carlo dilution: repeated stochastic forward passes aggregated into
//! per-voxel mean predictions and standard-deviation uncertainty maps, and
//! sweeps of that procedure over dropout kinds, rates and placements.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dilution::{plan_placement, DilutionConfig, DropoutKind, Placement};
use crate::error::{Error, Result};
use crate::metrics::{
    self, dsc_divergence, error_map, mean_foreground_dsc, stats, CalibrationBins, ErrorMap,
};
use crate::nn::{unet_forward, UNetModel};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::{ClassMap, Tensor};

/// Running per-element count, mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, sample: &[f32]) {
        assert_eq!(sample.len(), self.mean.len(), "sample length changed");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let x = f64::from(x);
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    /// Combines two partial accumulations (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &Moments) {
        assert_eq!(self.mean.len(), other.mean.len(), "merging mismatched moments");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population (`1/n`) standard deviation per element.
    pub fn std(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| (s.max(0.0) / n).sqrt()).collect()
    }
}

/// Aggregate of `repetitions` diluted passes over one input.
#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    /// class_count × H × W mean of the softmax maps.
    pub mean: Tensor,
    /// class_count × H × W population standard deviation.
    pub std: Tensor,
    pub repetitions: usize,
    pub config: DilutionConfig,
    pub seed: u64,
    mean_f64: Vec<f64>,
    std_f64: Vec<f64>,
}

impl McResult {
    fn from_moments(m: &Moments, shape: &[usize], config: DilutionConfig, seed: u64) -> Self {
        let std_f64 = m.std();
        let mean_f64 = m.mean().to_vec();
        let to_tensor = |v: &[f64]| {
            Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect()).expect("shape from pass")
        };
        Self {
            mean: to_tensor(&mean_f64),
            std: to_tensor(&std_f64),
            repetitions: m.count() as usize,
            config,
            seed,
            mean_f64,
            std_f64,
        }
    }

    /// Argmax of the MC-mean softmax.
    pub fn predicted_classes(&self) -> ClassMap {
        ClassMap::argmax(&self.mean).expect("mean is C×H×W")
    }
}

/// One MC simulation; see [`mc_run_checkpoints`].
pub fn mc_run(
    model: &UNetModel,
    input: &Tensor,
    config: DilutionConfig,
    repetitions: usize,
    seed: u64,
) -> Result<McResult> {
    Ok(mc_run_checkpoints(model, input, config, &[repetitions], seed)?
        .pop()
        .expect("one checkpoint requested"))
}

/// Runs `max(checkpoints)` diluted passes and snapshots the aggregate after
/// each requested count. Pass `r` draws its masks from stream `(seed, r)`, so
/// the result for `R` is the same whether it is requested alone or as a
/// prefix of a longer run, and independent of thread scheduling.
pub fn mc_run_checkpoints(
    model: &UNetModel,
    input: &Tensor,
    config: DilutionConfig,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<McResult>> {
    if checkpoints.is_empty() || checkpoints.contains(&0) {
        return Err(Error::config("repetition count must be at least 1"));
    }
    config.validate()?;
    let plan = plan_placement(model, config);
    let max = *checkpoints.iter().max().expect("non-empty");
    let passes: Vec<Tensor> = (0..max as u64)
        .into_par_iter()
        .map(|r| {
            unet_forward(model, input, Some(&plan), RngStream::new(seed, r))
                .map(|p| p.probabilities)
        })
        .collect::<Result<_>>()?;
    let shape = passes[0].shape().to_vec();
    let mut moments = Moments::new(passes[0].len());
    let mut snapshots: Vec<Option<McResult>> = vec![None; checkpoints.len()];
    for (r, pass) in passes.iter().enumerate() {
        moments.push(pass.data());
        for (slot, &c) in snapshots.iter_mut().zip(checkpoints) {
            if c == r + 1 {
                *slot = Some(McResult::from_moments(&moments, &shape, config, seed));
            }
        }
    }
    Ok(snapshots.into_iter().map(|s| s.expect("every checkpoint reached")).collect())
}

/// How per-class standard deviations are reduced to one uncertainty value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintySummary {
    /// Std of the reference (full-model) class probability.
    #[default]
    ReferenceClass,
    /// Mean std over all classes.
    ClassMean,
}

/// Largest possible std of a variable bounded in `[0, 1]`.
pub const MAX_STD: f64 = 0.5;

pub fn uncertainty_map(result: &McResult, reference: &ClassMap) -> Result<Tensor> {
    uncertainty_map_with(result, reference, UncertaintySummary::ReferenceClass)
}

/// Per-voxel std divided by 0.5 and clamped to `[0, 1]`, as an H×W tensor.
pub fn uncertainty_map_with(
    result: &McResult,
    reference: &ClassMap,
    summary: UncertaintySummary,
) -> Result<Tensor> {
    let values = uncertainty_values(result, reference, summary)?;
    Tensor::from_vec(
        &[reference.height(), reference.width()],
        values.into_iter().map(|v| v as f32).collect(),
    )
}

fn uncertainty_values(
    result: &McResult,
    reference: &ClassMap,
    summary: UncertaintySummary,
) -> Result<Vec<f64>> {
    let (k, h, w) = result.std.chw()?;
    if reference.dims() != (h, w) {
        return Err(Error::shape(format!(
            "reference map {:?} does not match result {h}×{w}",
            reference.dims()
        )));
    }
    let n = h * w;
    let std = &result.std_f64;
    (0..n)
        .map(|i| {
            let s = match summary {
                UncertaintySummary::ReferenceClass => {
                    let c = usize::from(reference.labels()[i]);
                    if c >= k {
                        return Err(Error::Data(format!(
                            "reference label {c} out of range for {k} classes"
                        )));
                    }
                    std[c * n + i]
                }
                UncertaintySummary::ClassMean => (0..k).map(|c| std[c * n + i]).sum::<f64>() / k as f64,
            };
            Ok((s / MAX_STD).clamp(0.0, 1.0))
        })
        .collect()
}

/// Cartesian grid of dilution configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kinds: Vec<DropoutKind>,
    pub rates: Vec<f64>,
    pub placements: Vec<Placement>,
    #[serde(default = "default_true")]
    pub hermitian: bool,
    #[serde(default)]
    pub rescale: bool,
}

fn default_true() -> bool {
    true
}

/// Dropout rates evaluated in the reference protocol.
pub const PROTOCOL_RATES: [f64; 6] = [0.01, 0.02, 0.04, 0.08, 0.16, 0.32];

/// Repetitions per MC simulation in the reference protocol.
pub const PROTOCOL_REPETITIONS: usize = 30;

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            kinds: DropoutKind::ALL.to_vec(),
            rates: PROTOCOL_RATES.to_vec(),
            placements: Placement::ALL.to_vec(),
            hermitian: true,
            rescale: false,
        }
    }
}

impl SweepGrid {
    /// Configurations ordered by kind, then placement, then rate.
    pub fn configs(&self) -> Result<Vec<DilutionConfig>> {
        if self.kinds.is_empty() || self.rates.is_empty() || self.placements.is_empty() {
            return Err(Error::config(
                "sweep grid needs at least one kind, one rate and one placement",
            ));
        }
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &placement in &self.placements {
                for &rate in &self.rates {
                    out.push(DilutionConfig {
                        kind,
                        rate,
                        placement,
                        hermitian: self.hermitian,
                        rescale: self.rescale,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// MC repetition counts to report; the longest run is shared.
    pub repetitions: Vec<usize>,
    pub seed: u64,
    pub bins: usize,
    pub summary: UncertaintySummary,
    /// Keep per-sample uncertainty maps in the outcomes.
    pub keep_maps: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            repetitions: vec![PROTOCOL_REPETITIONS],
            seed: 0,
            bins: 10,
            summary: UncertaintySummary::ReferenceClass,
            keep_maps: false,
        }
    }
}

/// Evaluation input with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: usize,
    pub image: Tensor,
    pub truth: ClassMap,
}

/// Undiluted reference quantities for one sample.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub prediction: ClassMap,
    pub dsc: f64,
    pub errors: ErrorMap,
}

pub fn baseline(model: &UNetModel, sample: &EvalSample) -> Result<Baseline> {
    let pred = unet_forward(model, &sample.image, None, RngStream::new(0, 0))?.class_map();
    let dsc = mean_foreground_dsc(&pred, &sample.truth, model.class_count())?;
    let errors = error_map(&pred, &sample.truth)?;
    Ok(Baseline {
        prediction: pred,
        dsc,
        errors,
    })
}

#[derive(Debug, Clone)]
pub struct RepetitionOutcome {
    pub repetitions: usize,
    pub dsc_diluted: f64,
    pub dsc_baseline: f64,
    pub divergence_pct: Option<f64>,
    pub uce: f64,
    pub mean_uncertainty: f64,
    pub bins: CalibrationBins,
    pub uncertainty: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub sample_id: usize,
    /// One entry per requested repetition count, in request order.
    pub by_repetitions: Vec<RepetitionOutcome>,
}

/// Result of one grid point. A failed configuration carries its error
/// message instead of sample outcomes.
#[derive(Debug, Clone)]
pub struct ConfigOutcome {
    pub index: usize,
    pub config: DilutionConfig,
    pub samples: std::result::Result<Vec<SampleOutcome>, String>,
}

fn evaluate_sample(
    model: &UNetModel,
    sample: &EvalSample,
    base: &Baseline,
    config: DilutionConfig,
    options: &SweepOptions,
) -> Result<SampleOutcome> {
    let seed = derive_seed(options.seed, &[sample.id as u64]);
    let runs = mc_run_checkpoints(model, &sample.image, config, &options.repetitions, seed)?;
    let by_repetitions = runs
        .iter()
        .map(|run| {
            let dsc_diluted =
                mean_foreground_dsc(&run.predicted_classes(), &sample.truth, model.class_count())?;
            let values = uncertainty_values(run, &base.prediction, options.summary)?;
            let (uce, bins) = metrics::uce_from_values(&values, &base.errors, options.bins)?;
            let uncertainty = if options.keep_maps {
                Some(uncertainty_map_with(run, &base.prediction, options.summary)?)
            } else {
                None
            };
            Ok(RepetitionOutcome {
                repetitions: run.repetitions,
                dsc_diluted,
                dsc_baseline: base.dsc,
                divergence_pct: dsc_divergence(dsc_diluted, base.dsc),
                uce,
                mean_uncertainty: stats::mean(&values),
                bins,
                uncertainty,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SampleOutcome {
        sample_id: sample.id,
        by_repetitions,
    })
}

/// Evaluates every grid configuration on every sample. Outcomes are handed
/// to `sink` in grid order; an error inside one configuration is reported in
/// its outcome and the sweep continues.
pub fn sweep<F>(
    model: &UNetModel,
    samples: &[EvalSample],
    grid: &SweepGrid,
    options: &SweepOptions,
    mut sink: F,
) -> Result<Vec<Baseline>>
where
    F: FnMut(ConfigOutcome) -> Result<()>,
{
    let configs = grid.configs()?;
    if samples.is_empty() {
        return Err(Error::config("sweep needs at least one sample"));
    }
    if options.repetitions.is_empty() || options.repetitions.contains(&0) {
        return Err(Error::config("repetition counts must be at least 1"));
    }
    if options.bins == 0 {
        return Err(Error::config("bin count must be at least 1"));
    }
    let baselines: Vec<Baseline> = samples
        .par_iter()
        .map(|s| baseline(model, s))
        .collect::<Result<_>>()?;

    for (index, config) in configs.into_iter().enumerate() {
        let result = config.validate().and_then(|_| {
            samples
                .par_iter()
                .zip(&baselines)
                .map(|(s, b)| evaluate_sample(model, s, b, config, options))
                .collect::<Result<Vec<_>>>()
        });
        sink(ConfigOutcome {
            index,
            config,
            samples: result.map_err(|e| e.to_string()),
        })?;
    }
    Ok(baselines)
}

/// Cohort statistics of one configuration at one repetition count.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub repetitions: usize,
    pub samples: usize,
    pub dsc_baseline_mean: f64,
    pub dsc_diluted_mean: f64,
    pub divergence_mean: Option<f64>,
    /// Sample standard deviation of the per-sample divergences.
    pub divergence_sd: Option<f64>,
    pub uce_mean: f64,
    pub uce_sd: f64,
    pub mean_uncertainty: f64,
    pub pooled_bins: CalibrationBins,
}

/// Per-repetition-count cohort aggregates, in request order.
pub fn aggregate(samples: &[SampleOutcome]) -> Result<Vec<Aggregate>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::config("cannot aggregate an empty cohort"))?;
    (0..first.by_repetitions.len())
        .map(|j| {
            let rows: Vec<&RepetitionOutcome> = samples.iter().map(|s| &s.by_repetitions[j]).collect();
            let pick = |f: fn(&RepetitionOutcome) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            let divergences: Vec<f64> = rows.iter().filter_map(|r| r.divergence_pct).collect();
            let uces = pick(|r| r.uce);
            Ok(Aggregate {
                repetitions: rows[0].repetitions,
                samples: rows.len(),
                dsc_baseline_mean: stats::mean(&pick(|r| r.dsc_baseline)),
                dsc_diluted_mean: stats::mean(&pick(|r| r.dsc_diluted)),
                divergence_mean: (!divergences.is_empty()).then(|| stats::mean(&divergences)),
                divergence_sd: (!divergences.is_empty()).then(|| stats::sample_std_dev(&divergences)),
                uce_mean: stats::mean(&uces),
                uce_sd: stats::sample_std_dev(&uces),
                mean_uncertainty: stats::mean(&pick(|r| r.mean_uncertainty)),
                pooled_bins: CalibrationBins::pooled(rows.iter().map(|r| &r.bins))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (UNetModel, Tensor) {
        let arch = Architecture {
            base_channels: 4,
            depth: 2,
            class_count: 3,
            ..Architecture::default()
        };
        let model = UNetModel::new(arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap();
        (model, x)
    }

    fn result_from(values: &[[f32; 1]], config: DilutionConfig) -> McResult {
        // single voxel, two classes: class 0 gets v, class 1 gets 1 − v
        let mut m = Moments::new(2);
        for v in values {
            m.push(&[v[0], 1.0 - v[0]]);
        }
        McResult::from_moments(&m, &[2, 1, 1], config, 0)
    }

    fn cfg(kind: DropoutKind, rate: f64) -> DilutionConfig {
        DilutionConfig::new(kind, rate, Placement::Global)
    }

    #[test]
    fn one_pass_has_zero_std() {
        let (model, x) = toy();
        let c = cfg(DropoutKind::Signal, 0.3);
        let r = mc_run(&model, &x, c, 1, 5).unwrap();
        assert!(r.std.data().iter().all(|&v| v == 0.0));
        let plan = plan_placement(&model, c);
        let single = unet_forward(&model, &x, Some(&plan), RngStream::new(5, 0)).unwrap();
        assert!(r.mean.max_abs_diff(&single.probabilities) == 0.0);
    }

    #[test]
    fn zero_rate_has_negligible_std() {
        let (model, x) = toy();
        for kind in DropoutKind::ALL {
            let r = mc_run(&model, &x, cfg(kind, 0.0), 6, 5).unwrap();
            assert!(r.std.data().iter().all(|&v| v < 1e-6));
        }
    }

    #[test]
    fn reruns_are_bit_identical_and_prefix_consistent() {
        let (model, x) = toy();
        let c = cfg(DropoutKind::Frequency, 0.16);
        let a = mc_run(&model, &x, c, 30, 9).unwrap();
        let b = mc_run(&model, &x, c, 30, 9).unwrap();
        assert_eq!(a, b);
        let both = mc_run_checkpoints(&model, &x, c, &[5, 30], 9).unwrap();
        assert_eq!(both[1], a);
        assert_eq!(both[0], mc_run(&model, &x, c, 5, 9).unwrap());
    }

    #[test]
    fn zero_repetitions_rejected() {
        let (model, x) = toy();
        assert!(mc_run(&model, &x, cfg(DropoutKind::Signal, 0.1), 0, 1).unwrap_err().is_config());
    }

    #[test]
    fn mean_sums_to_one_and_std_bounded() {
        let (model, x) = toy();
        let r = mc_run(&model, &x, cfg(DropoutKind::Signal, 0.32), 12, 3).unwrap();
        let n = 64;
        for i in 0..n {
            let s: f32 = (0..3).map(|c| r.mean.data()[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(r.std.data().iter().all(|&v| (0.0..=0.5).contains(&v)));
    }

    #[test]
    fn uncertainty_map_examples() {
        let c = cfg(DropoutKind::Signal, 0.1);
        let reference = ClassMap::new(1, 1, vec![0]).unwrap();
        let still = result_from(&[[0.3], [0.3]], c);
        assert_eq!(uncertainty_map(&still, &reference).unwrap().data(), &[0.0]);

        let flip = result_from(&[[0.0], [1.0], [0.0], [1.0]], c);
        assert_eq!(uncertainty_map(&flip, &reference).unwrap().data(), &[1.0]);

        let ramp = result_from(&[[0.2], [0.4], [0.6], [0.8]], c);
        // independent arithmetic: mean 0.5, squared deviations .09 .01 .01 .09
        let expect_std = (0.2f64 / 4.0).sqrt();
        let u = uncertainty_map(&ramp, &reference).unwrap().data()[0];
        assert!((f64::from(u) - expect_std / 0.5).abs() < 1e-6);
        assert!((expect_std - 0.2236).abs() < 1e-4);
        assert!((f64::from(u) - 0.4472).abs() < 1e-4);

        assert!(uncertainty_map(&ramp, &ClassMap::filled(2, 1, 0)).is_err());
    }

    #[test]
    fn one_pass_moments_match_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let samples: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..16).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let mut all = Moments::new(16);
        let (mut left, mut right) = (Moments::new(16), Moments::new(16));
        for (i, s) in samples.iter().enumerate() {
            all.push(s);
            if i < 17 {
                left.push(s);
            } else {
                right.push(s);
            }
        }
        left.merge(&right);
        for e in 0..16 {
            let xs: Vec<f64> = samples.iter().map(|s| f64::from(s[e])).collect();
            let mean = xs.iter().sum::<f64>() / 40.0;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 40.0).sqrt();
            for m in [&all, &left] {
                assert!((m.mean()[e] - mean).abs() < 1e-9);
                assert!((m.std()[e] - std).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sweep_emits_full_grid_in_order() {
        let (model, x) = toy();
        let samples = vec![EvalSample {
            id: 0,
            image: x,
            truth: ClassMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap(),
        }];
        let options = SweepOptions {
            repetitions: vec![2],
            ..SweepOptions::default()
        };
        let mut seen = Vec::new();
        sweep(&model, &samples, &SweepGrid::default(), &options, |o| {
            seen.push(o);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 36);
        assert!(seen.iter().enumerate().all(|(i, o)| o.index == i && o.samples.is_ok()));
    }

    #[test]
    fn sweep_rejects_empty_rates_and_isolates_bad_configs() {
        let (model, x) = toy();
        let samples = vec![EvalSample {
            id: 0,
            image: x,
            truth: ClassMap::filled(8, 8, 1),
        }];
        let mut grid = SweepGrid {
            rates: vec![],
            ..SweepGrid::default()
        };
        let mut calls = 0;
        let err = sweep(&model, &samples, &grid, &SweepOptions::default(), |_| {
            calls += 1;
            Ok(())
        })
        .unwrap_err();
        assert!(err.is_config());
        assert_eq!(calls, 0);

        grid.rates = vec![0.1, 1.5];
        grid.kinds = vec![DropoutKind::Signal];
        grid.placements = vec![Placement::Encoder];
        let options = SweepOptions {
            repetitions: vec![2],
            ..SweepOptions::default()
        };
        let mut statuses = Vec::new();
        sweep(&model, &samples, &grid, &options, |o| {
            statuses.push(o.samples.is_ok());
            Ok(())
        })
        .unwrap();
        assert_eq!(statuses, vec![true, false]);
    }

    #[test]
    fn heavy_dilution_raises_uncertainty() {
        let (model, x) = toy();
        let reference = unet_forward(&model, &x, None, RngStream::new(0, 0)).unwrap().class_map();
        for kind in DropoutKind::ALL {
            let mean_u = |rate| {
                let r = mc_run(&model, &x, cfg(kind, rate), 10, 2).unwrap();
                let u = uncertainty_map(&r, &reference).unwrap();
                u.data().iter().map(|&v| f64::from(v)).sum::<f64>() / u.len() as f64
            };
            let (calm, noisy) = (mean_u(0.0), mean_u(0.32));
            assert!(noisy > calm + 1e-3, "{kind}: {calm} vs {noisy}");
        }
    }
}
