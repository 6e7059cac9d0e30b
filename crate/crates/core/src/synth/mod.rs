//! Deterministic synthetic segmentation samples: soft-edged ellipses over a
//! background, corrupted by noise confined to a radial frequency band.

mod dataset;
pub mod pgm;

pub use dataset::{
    load_dataset, load_sample, make_dataset, save_dataset, save_sample, Dataset, Manifest,
    MANIFEST_FILE,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::stats;
use crate::rng::stream;
use crate::spectral::{Fft2dPlan, Spectrum};
use crate::tensor::{ClassMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    /// Ellipses per foreground class.
    pub blob_count: usize,
    /// Radial band `(low, high)` in cycles per pixel.
    pub noise_band: (f64, f64),
    /// Standard deviation of the injected noise.
    pub noise_amp: f64,
    /// Scales the spread of class intensities around 0.5.
    pub contrast: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            class_count: 3,
            blob_count: 2,
            noise_band: (0.15, 0.4),
            noise_amp: 0.1,
            contrast: 1.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let (low, high) = self.noise_band;
        if !(low.is_finite() && high.is_finite() && 0.0 <= low && low < high && high <= 0.5) {
            return Err(Error::config(format!(
                "noise band ({low}, {high}) must satisfy 0 <= low < high <= 0.5"
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(format!(
                "image {}×{} is smaller than 8×8",
                self.height, self.width
            )));
        }
        if !(2..=8).contains(&self.class_count) {
            return Err(Error::config(format!(
                "class count {} outside 2..=8",
                self.class_count
            )));
        }
        if self.blob_count == 0 {
            return Err(Error::config("blob count must be at least 1"));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp.is_finite()) {
            return Err(Error::config(format!("noise amplitude {} is invalid", self.noise_amp)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::config(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        Ok(())
    }

    /// Noiseless intensity of class `c`. Levels are evenly spread over
    /// [0.25, 0.75] at full contrast; the background takes the middle level
    /// so that with three classes no edge ramps through a third intensity.
    pub fn class_intensity(&self, c: usize) -> f64 {
        let k = self.class_count;
        let mid = (k - 1) / 2;
        let slot = match c {
            0 => mid,
            c if c <= mid => c - 1,
            c => c,
        };
        let t = slot as f64 / (k - 1) as f64;
        0.5 + self.contrast * (0.25 + 0.5 * t - 0.5)
    }

    /// Half the gap between neighbouring class intensities.
    pub fn intensity_tolerance(&self) -> f64 {
        0.25 * self.contrast / (self.class_count - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 1×H×W, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: ClassMap,
    pub seed: u64,
    /// Generator parameters; `None` for ingested images.
    pub meta: Option<GenParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub class: u8,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Signed distance-like value: negative inside, in pixels near the edge.
    fn edge_distance(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        (r - 1.0) * self.rx.min(self.ry)
    }

    fn bounding_radius(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

/// Everything a sample is built from, before quantization.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub mask: ClassMap,
    pub ellipses: Vec<Ellipse>,
}

// Soft edge width in pixels.
const EDGE: f64 = 0.6;

fn place_ellipses<R: Rng>(params: &GenParams, rng: &mut R) -> Vec<Ellipse> {
    let (h, w) = (params.height as f64, params.width as f64);
    let extent = h.min(w);
    let mut out: Vec<Ellipse> = Vec::new();
    let mut scale = 1.0;
    for class in 1..params.class_count {
        for _ in 0..params.blob_count {
            let mut placed = false;
            while !placed {
                for _ in 0..200 {
                    let ry = rng.random_range(0.10..0.20) * extent * scale;
                    let rx = rng.random_range(0.10..0.20) * extent * scale;
                    let r = ry.max(rx);
                    let margin = r + 1.0;
                    if 2.0 * margin >= h.min(w) {
                        break;
                    }
                    let e = Ellipse {
                        class: class as u8,
                        cy: rng.random_range(margin..h - margin),
                        cx: rng.random_range(margin..w - margin),
                        ry,
                        rx,
                        angle: rng.random_range(0.0..std::f64::consts::PI),
                    };
                    let clear = out.iter().all(|o| {
                        let d = ((o.cy - e.cy).powi(2) + (o.cx - e.cx).powi(2)).sqrt();
                        d > o.bounding_radius() + r + 2.0
                    });
                    if clear {
                        out.push(e);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    scale *= 0.85;
                    if scale < 0.05 {
                        // no room left; further blobs are skipped
                        return out;
                    }
                }
            }
        }
    }
    out
}

/// White noise filtered to the radial band `[low, high]` cycles/pixel and
/// scaled to standard deviation `amp`.
pub fn band_limited_noise<R: Rng>(
    height: usize,
    width: usize,
    band: (f64, f64),
    amp: f64,
    rng: &mut R,
) -> Vec<f64> {
    let white: Vec<f64> = (0..height * width).map(|_| rng.sample(StandardNormal)).collect();
    if amp == 0.0 {
        return vec![0.0; height * width];
    }
    let plan = Fft2dPlan::new(height, width);
    let mut spectrum = plan.forward_real(&white);
    for u in 0..height {
        for v in 0..width {
            let r = radial_frequency(height, width, u, v);
            if r < band.0 || r > band.1 {
                spectrum.coefficients_mut()[u * width + v] = num_complex::Complex64::new(0.0, 0.0);
            }
        }
    }
    let (mut noise, _) = plan.inverse_real(&spectrum);
    let sd = stats::std_dev(&noise);
    let mean = stats::mean(&noise);
    if sd > 0.0 {
        for x in &mut noise {
            *x = (*x - mean) * amp / sd;
        }
    }
    noise
}

/// Radial frequency of bin `(u, v)` in cycles per pixel.
pub fn radial_frequency(height: usize, width: usize, u: usize, v: usize) -> f64 {
    let signed = |k: usize, n: usize| {
        let k = k as f64;
        let n = n as f64;
        if k > n / 2.0 {
            (k - n) / n
        } else {
            k / n
        }
    };
    signed(u, height).hypot(signed(v, width))
}

/// Fraction of spectral energy of `signal` whose radial frequency lies in
/// `[low, high]`.
pub fn band_energy_fraction(height: usize, width: usize, signal: &[f64], band: (f64, f64)) -> f64 {
    let spectrum: Spectrum = Fft2dPlan::new(height, width).forward_real(signal);
    let (mut inside, mut total) = (0.0, 0.0);
    for u in 0..height {
        for v in 0..width {
            let e = spectrum.get(u, v).norm_sqr();
            total += e;
            let r = radial_frequency(height, width, u, v);
            if (band.0..=band.1).contains(&r) {
                inside += e;
            }
        }
    }
    if total == 0.0 {
        1.0
    } else {
        inside / total
    }
}

pub fn render(seed: u64, params: &GenParams) -> Result<Rendering> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let ellipses = place_ellipses(params, &mut stream(seed, &[0]));
    let background = params.class_intensity(0);
    let mut clean = vec![background; h * w];
    let mut labels = vec![0u8; h * w];
    for e in &ellipses {
        let level = params.class_intensity(usize::from(e.class));
        for y in 0..h {
            for x in 0..w {
                let d = e.edge_distance(y as f64 + 0.5, x as f64 + 0.5);
                let a = 1.0 / (1.0 + (d / EDGE).exp());
                let i = y * w + x;
                clean[i] = clean[i] * (1.0 - a) + level * a;
                if a > 0.5 {
                    labels[i] = e.class;
                }
            }
        }
    }
    let noise = band_limited_noise(h, w, params.noise_band, params.noise_amp, &mut stream(seed, &[1]));
    Ok(Rendering {
        clean,
        noise,
        mask: ClassMap::new(h, w, labels)?,
        ellipses,
    })
}

pub fn generate_sample(seed: u64, params: &GenParams) -> Result<Sample> {
    let r = render(seed, params)?;
    let image = r
        .clean
        .iter()
        .zip(&r.noise)
        .map(|(c, n)| (c + n).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Sample {
        image: Tensor::from_vec(&[1, params.height, params.width], image)?,
        mask: r.mask,
        seed,
        meta: Some(*params),
    })
}

/// Smooth test image: low-pass noise (cut-off `cutoff` cycles/pixel) mapped
/// to `[0.2, 0.8]`, returned as a 1×H×W tensor.
pub fn smooth_test_image(height: usize, width: usize, cutoff: f64, seed: u64) -> Tensor {
    let noise = band_limited_noise(height, width, (0.0, cutoff), 1.0, &mut stream(seed, &[2]));
    let lo = noise.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = noise.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = noise.iter().map(|x| (0.2 + 0.6 * (x - lo) / span) as f32).collect();
    Tensor::from_vec(&[1, height, width], data).expect("requested shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mean_foreground_dsc;

    fn threshold_segment(params: &GenParams, image: &Tensor) -> ClassMap {
        let levels: Vec<f64> = (0..params.class_count).map(|c| params.class_intensity(c)).collect();
        let labels = image
            .data()
            .iter()
            .map(|&v| {
                let v = f64::from(v);
                (0..levels.len())
                    .min_by(|&a, &b| (levels[a] - v).abs().total_cmp(&(levels[b] - v).abs()))
                    .unwrap() as u8
            })
            .collect();
        ClassMap::new(params.height, params.width, labels).unwrap()
    }

    #[test]
    fn noiseless_threshold_oracle() {
        let params = GenParams {
            noise_amp: 0.0,
            ..GenParams::default()
        };
        for seed in 0..10 {
            let s = generate_sample(seed, &params).unwrap();
            let pred = threshold_segment(&params, &s.image);
            let d = mean_foreground_dsc(&pred, &s.mask, params.class_count).unwrap();
            assert!(d > 0.95, "seed {seed}: dsc {d}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = GenParams::default();
        assert_eq!(generate_sample(7, &p).unwrap(), generate_sample(7, &p).unwrap());
        assert_ne!(generate_sample(7, &p).unwrap().image, generate_sample(8, &p).unwrap().image);
    }

    #[test]
    fn noise_energy_stays_in_band() {
        let params = GenParams {
            noise_band: (0.2, 0.4),
            noise_amp: 0.08,
            ..GenParams::default()
        };
        for seed in 0..5 {
            let s = generate_sample(seed, &params).unwrap();
            let r = render(seed, &params).unwrap();
            let residual: Vec<f64> = s
                .image
                .data()
                .iter()
                .zip(&r.clean)
                .map(|(&v, c)| f64::from(v) - c)
                .collect();
            let frac = band_energy_fraction(64, 64, &residual, params.noise_band);
            assert!(frac >= 0.9, "seed {seed}: in-band fraction {frac}");
        }
    }

    #[test]
    fn invalid_band_is_config_error() {
        for band in [(0.3, 0.2), (-0.1, 0.2), (0.1, 0.6), (0.2, 0.2)] {
            let p = GenParams {
                noise_band: band,
                ..GenParams::default()
            };
            assert!(generate_sample(0, &p).unwrap_err().is_config(), "{band:?}");
        }
    }

    #[test]
    fn blob_centres_carry_class_intensity() {
        let p = GenParams::default();
        for seed in 0..20 {
            let r = render(seed, &p).unwrap();
            assert_eq!(r.ellipses.len(), (p.class_count - 1) * p.blob_count);
            for e in &r.ellipses {
                let (y, x) = (e.cy as usize, e.cx as usize);
                let v = r.clean[y * p.width + x];
                let level = p.class_intensity(usize::from(e.class));
                assert!((v - level).abs() < p.intensity_tolerance(), "seed {seed}");
                assert_eq!(r.mask.get(y, x), e.class);
            }
        }
    }

    #[test]
    fn samples_are_bounded_and_labels_in_range() {
        let p = GenParams::default();
        let s = generate_sample(3, &p).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(usize::from(s.mask.max_label()) < p.class_count);
        assert_eq!(s.image.shape(), &[1, 64, 64]);
    }

    #[test]
    fn smooth_image_is_low_pass() {
        let img = smooth_test_image(32, 32, 0.1, 4);
        let values: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
        let centered: Vec<f64> = values.iter().map(|v| v - stats::mean(&values)).collect();
        assert!(band_energy_fraction(32, 32, &centered, (0.0, 0.1)) > 0.999);
    }
}
