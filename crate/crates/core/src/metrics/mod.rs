//! Segmentation accuracy and uncertainty-calibration metrics.

mod sobel;
pub mod stats;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor};

pub use sobel::{gradient_impact_map, sobel_gradients};

fn same_dims(a: &ClassMap, b: &ClassMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "map {:?} does not match map {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Dice coefficient `2|A∩B| / (|A|+|B|)` of two binary maps (non-zero labels
/// are foreground). Two empty maps score 1.
pub fn dsc(prediction: &ClassMap, truth: &ClassMap) -> Result<f64> {
    same_dims(prediction, truth)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in prediction.labels().iter().zip(truth.labels()) {
        let (p, t) = (p != 0, t != 0);
        a += usize::from(p);
        b += usize::from(t);
        inter += usize::from(p && t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Mean one-vs-rest Dice over the foreground classes `1..class_count`.
pub fn mean_foreground_dsc(prediction: &ClassMap, truth: &ClassMap, class_count: usize) -> Result<f64> {
    same_dims(prediction, truth)?;
    if class_count < 2 {
        return Err(Error::config("mean foreground Dice needs at least 2 classes"));
    }
    let mut total = 0.0;
    for class in 1..class_count {
        let class = class as u8;
        total += dsc(&prediction.select(class), &truth.select(class))?;
    }
    Ok(total / (class_count - 1) as f64)
}

/// Relative Dice change in percent, `None` when the baseline is zero.
pub fn dsc_divergence(diluted_dsc: f64, baseline_dsc: f64) -> Option<f64> {
    (baseline_dsc > 0.0).then(|| 100.0 * (diluted_dsc - baseline_dsc) / baseline_dsc)
}

/// Voxels where the full model's prediction disagrees with ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMap(ClassMap);

impl ErrorMap {
    pub fn from_flags(height: usize, width: usize, flags: Vec<u8>) -> Result<Self> {
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::Data("error map values must be 0 or 1".into()));
        }
        Ok(Self(ClassMap::new(height, width, flags)?))
    }

    pub fn map(&self) -> &ClassMap {
        &self.0
    }

    pub fn flags(&self) -> &[u8] {
        self.0.labels()
    }

    pub fn error_count(&self) -> usize {
        self.flags().iter().filter(|&&f| f == 1).count()
    }
}

pub fn error_map(full_model_argmax: &ClassMap, ground_truth: &ClassMap) -> Result<ErrorMap> {
    same_dims(full_model_argmax, ground_truth)?;
    let flags = full_model_argmax
        .labels()
        .iter()
        .zip(ground_truth.labels())
        .map(|(a, b)| u8::from(a != b))
        .collect();
    Ok(ErrorMap(ClassMap::new(
        full_model_argmax.height(),
        full_model_argmax.width(),
        flags,
    )?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub error_count: usize,
    pub mean_uncertainty: f64,
    pub error_fraction: f64,
}

/// Equal-width uncertainty bins over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationBins {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Expected gap `Σ (|B|/n)·|err(B) − unc(B)|`.
    pub fn uce(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n as f64 * (b.error_fraction - b.mean_uncertainty).abs())
            .sum()
    }

    /// Pools voxel statistics from several bin sets with the same layout.
    pub fn pooled<'a>(sets: impl IntoIterator<Item = &'a CalibrationBins>) -> Result<CalibrationBins> {
        let mut acc: Option<BinAccumulator> = None;
        for set in sets {
            let a = acc.get_or_insert_with(|| BinAccumulator::new(set.bin_count()));
            if a.counts.len() != set.bin_count() {
                return Err(Error::shape("cannot pool calibration bins of different sizes"));
            }
            for (j, b) in set.bins.iter().enumerate() {
                a.counts[j] += b.count;
                a.uncertainty[j] += b.mean_uncertainty * b.count as f64;
                a.errors[j] += b.error_count;
            }
        }
        Ok(acc
            .ok_or_else(|| Error::shape("no calibration bins to pool"))?
            .finish())
    }

    /// CSV with header `bin_low,bin_high,count,mean_uncertainty,error_fraction`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count,mean_uncertainty,error_fraction")?;
        for b in &self.bins {
            writeln!(
                out,
                "{:.6},{:.6},{},{:.9},{:.9}",
                b.low, b.high, b.count, b.mean_uncertainty, b.error_fraction
            )?;
        }
        Ok(())
    }
}

struct BinAccumulator {
    counts: Vec<usize>,
    uncertainty: Vec<f64>,
    errors: Vec<usize>,
}

impl BinAccumulator {
    fn new(bin_count: usize) -> Self {
        Self {
            counts: vec![0; bin_count],
            uncertainty: vec![0.0; bin_count],
            errors: vec![0; bin_count],
        }
    }

    fn finish(self) -> CalibrationBins {
        let m = self.counts.len();
        let bins = (0..m)
            .map(|j| {
                let count = self.counts[j];
                let (mean_uncertainty, error_fraction) = if count == 0 {
                    (0.0, 0.0)
                } else {
                    (
                        self.uncertainty[j] / count as f64,
                        self.errors[j] as f64 / count as f64,
                    )
                };
                CalibrationBin {
                    low: j as f64 / m as f64,
                    high: (j + 1) as f64 / m as f64,
                    count,
                    error_count: self.errors[j],
                    mean_uncertainty,
                    error_fraction,
                }
            })
            .collect();
        CalibrationBins { bins }
    }
}

/// Bin of `u` among `m` equal-width bins: `(j/m, (j+1)/m]`, with `0` in the
/// first bin. Values on an interior edge fall into the lower bin.
pub fn bin_index(u: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut j = ((u * mf).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
    // the product can round across an edge; settle against the true edges
    while j > 0 && u <= j as f64 / mf {
        j -= 1;
    }
    while j + 1 < m && u > (j + 1) as f64 / mf {
        j += 1;
    }
    j
}

/// Uncertainty calibration error of normalized uncertainties against an
/// error map.
pub fn uce(uncertainty: &Tensor, errors: &ErrorMap, bin_count: usize) -> Result<(f64, CalibrationBins)> {
    let bins = calibration_bins(uncertainty, errors, bin_count)?;
    Ok((bins.uce(), bins))
}

pub fn calibration_bins(uncertainty: &Tensor, errors: &ErrorMap, bin_count: usize) -> Result<CalibrationBins> {
    let (c, h, w) = uncertainty.chw()?;
    if c != 1 || (h, w) != errors.map().dims() {
        return Err(Error::shape(format!(
            "uncertainty {:?} does not match error map {:?}",
            uncertainty.shape(),
            errors.map().dims()
        )));
    }
    let values: Vec<f64> = uncertainty.data().iter().map(|&u| f64::from(u)).collect();
    calibration_bins_from_values(&values, errors, bin_count)
}

/// [`uce`] on `f64` uncertainties in error-map order.
pub fn uce_from_values(uncertainty: &[f64], errors: &ErrorMap, bin_count: usize) -> Result<(f64, CalibrationBins)> {
    let bins = calibration_bins_from_values(uncertainty, errors, bin_count)?;
    Ok((bins.uce(), bins))
}

pub fn calibration_bins_from_values(
    uncertainty: &[f64],
    errors: &ErrorMap,
    bin_count: usize,
) -> Result<CalibrationBins> {
    if bin_count == 0 {
        return Err(Error::config("bin_count must be at least 1"));
    }
    if uncertainty.len() != errors.flags().len() {
        return Err(Error::shape(format!(
            "{} uncertainty values for an error map of {} voxels",
            uncertainty.len(),
            errors.flags().len()
        )));
    }
    let mut acc = BinAccumulator::new(bin_count);
    for (&u, &e) in uncertainty.iter().zip(errors.flags()) {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Data(format!("uncertainty {u} outside [0, 1]")));
        }
        let j = bin_index(u, bin_count);
        acc.counts[j] += 1;
        acc.uncertainty[j] += u;
        acc.errors[j] += usize::from(e);
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub mean_uncertainty: f64,
    pub error_fraction: f64,
    /// Share of all voxels in this bin.
    pub weight: f64,
}

/// Plot points of a reliability curve; empty bins are skipped.
pub fn reliability_points(bins: &CalibrationBins) -> Vec<ReliabilityPoint> {
    let n = bins.total();
    bins.bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| ReliabilityPoint {
            mean_uncertainty: b.mean_uncertainty,
            error_fraction: b.error_fraction,
            weight: b.count as f64 / n as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, v: &[u8]) -> ClassMap {
        ClassMap::new(h, w, v.to_vec()).unwrap()
    }

    fn row(values: &[f32]) -> Tensor {
        Tensor::from_vec(&[1, values.len()], values.to_vec()).unwrap()
    }

    /// Brute force: for each bin, scan every voxel and test membership
    /// against the explicit interval edges.
    fn uce_oracle(u: &[f64], e: &[u8], m: usize) -> f64 {
        let n = u.len() as f64;
        let mut total = 0.0;
        for j in 0..m {
            let lo = j as f64 / m as f64;
            let hi = (j + 1) as f64 / m as f64;
            let members: Vec<usize> = (0..u.len())
                .filter(|&i| (u[i] > lo || (j == 0 && u[i] >= 0.0)) && u[i] <= hi)
                .collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let err = members.iter().map(|&i| f64::from(e[i])).sum::<f64>() / k;
            let unc = members.iter().map(|&i| u[i]).sum::<f64>() / k;
            total += k / n * (err - unc).abs();
        }
        total
    }

    #[test]
    fn dsc_examples() {
        let a = map(2, 4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = map(2, 4, &[0, 0, 1, 1, 1, 1, 0, 0]);
        let c = map(2, 4, &[0, 0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &c).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let empty = ClassMap::filled(2, 4, 0);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert!(dsc(&a, &ClassMap::filled(4, 2, 0)).is_err());
    }

    #[test]
    fn divergence_examples() {
        assert_eq!(dsc_divergence(0.7, 0.7), Some(0.0));
        assert!((dsc_divergence(0.84, 0.8).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(dsc_divergence(0.5, 0.0), None);
        let diluted: f64 = 0.606 * (1.0 - 0.1453);
        assert!((diluted - 0.518).abs() < 5e-4);
        assert!((dsc_divergence(diluted, 0.606).unwrap() + 14.53).abs() < 1e-9);
    }

    #[test]
    fn error_map_examples() {
        let a = map(1, 3, &[0, 1, 2]);
        assert_eq!(error_map(&a, &a).unwrap().error_count(), 0);
        assert_eq!(error_map(&a, &map(1, 3, &[1, 2, 0])).unwrap().error_count(), 3);
        assert_eq!(error_map(&a, &map(1, 3, &[0, 1, 1])).unwrap().flags(), &[0, 0, 1]);
    }

    #[test]
    fn uce_extremes() {
        let errors = ErrorMap::from_flags(1, 4, vec![0; 4]).unwrap();
        assert_eq!(uce(&row(&[0.0; 4]), &errors, 10).unwrap().0, 0.0);
        assert_eq!(uce(&row(&[1.0; 4]), &errors, 10).unwrap().0, 1.0);
    }

    #[test]
    fn uce_worked_example() {
        let u = [0.05, 0.15, 0.15, 0.95];
        let errors = ErrorMap::from_flags(1, 4, vec![0, 0, 1, 1]).unwrap();
        let (value, bins) = uce_from_values(&u, &errors, 10).unwrap();
        assert!((value - 0.2).abs() < 1e-12, "{value}");
        let (from_tensor, _) = uce(&row(&u.map(|v| v as f32)), &errors, 10).unwrap();
        assert!((from_tensor - 0.2).abs() < 1e-7);
        assert_eq!(format!("{value:.4}"), "0.2000");
        let oracle = uce_oracle(&u, &[0, 0, 1, 1], 10);
        assert!((value - oracle).abs() < 1e-12);
        assert_eq!(bins.bins[0].count, 1);
        assert_eq!(bins.bins[1].count, 2);
        assert_eq!(bins.bins[9].count, 1);

        let points = reliability_points(&bins);
        let expect = [(0.05, 0.0), (0.15, 0.5), (0.95, 1.0)];
        assert_eq!(points.len(), 3);
        for (p, (u, e)) in points.iter().zip(expect) {
            assert!((p.mean_uncertainty - u).abs() < 1e-12 && (p.error_fraction - e).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_values_go_to_lower_bin() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000001, 10), 3);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.7, 1), 0);
    }

    #[test]
    fn calibrated_bins_lie_on_diagonal() {
        let bins = CalibrationBins {
            bins: (0..4)
                .map(|j| CalibrationBin {
                    low: j as f64 / 4.0,
                    high: (j + 1) as f64 / 4.0,
                    count: 10,
                    error_count: 5,
                    mean_uncertainty: (j as f64 + 0.5) / 4.0,
                    error_fraction: (j as f64 + 0.5) / 4.0,
                })
                .collect(),
        };
        assert!(reliability_points(&bins)
            .iter()
            .all(|p| p.mean_uncertainty == p.error_fraction));
        assert_eq!(bins.uce(), 0.0);
        let empty = CalibrationBins {
            bins: bins.bins.iter().map(|b| CalibrationBin { count: 0, ..*b }).collect(),
        };
        assert!(reliability_points(&empty).is_empty());
    }

    #[test]
    fn bins_csv_header() {
        let errors = ErrorMap::from_flags(1, 2, vec![0, 1]).unwrap();
        let (_, bins) = uce(&row(&[0.2, 0.9]), &errors, 2).unwrap();
        let mut buf = Vec::new();
        bins.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("bin_low,bin_high,count,mean_uncertainty,error_fraction"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn uce_matches_oracle_on_large_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let u: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let e: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let t = Tensor::from_vec(&[1, 250, 400], u.clone()).unwrap();
        let errors = ErrorMap::from_flags(250, 400, e.clone()).unwrap();
        for m in [1, 7, 10, 15] {
            let (value, bins) = uce(&t, &errors, m).unwrap();
            let oracle = uce_oracle(&u.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), &e, m);
            assert!((value - oracle).abs() < 1e-12, "m={m}: {value} vs {oracle}");
            assert_eq!(bins.total(), n);
        }
    }

    proptest! {
        #[test]
        fn dsc_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 36), b in proptest::collection::vec(0u8..2, 36)) {
            let (a, b) = (map(6, 6, &a), map(6, 6, &b));
            let ab = dsc(&a, &b).unwrap();
            prop_assert_eq!(ab, dsc(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn uce_zero_when_uncertainty_equals_error(e in proptest::collection::vec(0u8..2, 1..200)) {
            let n = e.len();
            let u: Vec<f32> = e.iter().map(|&v| f32::from(v)).collect();
            let errors = ErrorMap::from_flags(1, n, e).unwrap();
            let (value, bins) = uce(&Tensor::from_vec(&[1, n], u).unwrap(), &errors, 10).unwrap();
            prop_assert_eq!(value, 0.0);
            prop_assert_eq!(bins.total(), n);
        }
    }
}
