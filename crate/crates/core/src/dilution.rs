//! Signal- and frequency-space dropout masks, their application to feature
//! maps, and placement of dilution sites inside a U-Net.
//!
//! Signal dilution multiplies a map element-wise by a Bernoulli mask.
//! Frequency dilution transforms each channel with a 2D DFT, applies the mask
//! to the spectrum and transforms back. With `hermitian = true` one draw is
//! taken per conjugate-mirror orbit of bins, so the masked spectrum of a real
//! map is still Hermitian and the reconstruction is real.

use std::fmt;
use std::str::FromStr;

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, UNetModel};
use crate::rng::RngStream;
use crate::spectral::{hermitian_pairs, Fft2dPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutKind {
    Signal,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Encoder,
    Decoder,
    Global,
}

impl DropoutKind {
    pub const ALL: [DropoutKind; 2] = [DropoutKind::Signal, DropoutKind::Frequency];

    pub fn as_str(self) -> &'static str {
        match self {
            DropoutKind::Signal => "signal",
            DropoutKind::Frequency => "frequency",
        }
    }
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Encoder, Placement::Decoder, Placement::Global];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Encoder => "encoder",
            Placement::Decoder => "decoder",
            Placement::Global => "global",
        }
    }
}

impl fmt::Display for DropoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signal" => Ok(DropoutKind::Signal),
            "frequency" => Ok(DropoutKind::Frequency),
            other => Err(Error::config(format!("unknown dropout kind {other:?}"))),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Placement::Encoder),
            "decoder" => Ok(Placement::Decoder),
            "global" => Ok(Placement::Global),
            other => Err(Error::config(format!("unknown placement {other:?}"))),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DilutionConfig {
    pub kind: DropoutKind,
    pub rate: f64,
    pub placement: Placement,
    /// Frequency kind only: pair each bin with its conjugate mirror.
    #[serde(default = "default_true")]
    pub hermitian: bool,
    /// Scale surviving values by `1/(1−p)`.
    #[serde(default)]
    pub rescale: bool,
}

impl DilutionConfig {
    pub fn new(kind: DropoutKind, rate: f64, placement: Placement) -> Self {
        Self {
            kind,
            rate,
            placement,
            hermitian: true,
            rescale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)
    }
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(format!("dropout rate {p} outside [0, 1]")))
    }
}

/// Position of a dilution site inside a U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteId {
    /// After the second convolution of encoder level `l`, before pooling.
    Encoder(usize),
    Bottleneck,
    /// After the second convolution of decoder level `l`.
    Decoder(usize),
}

impl SiteId {
    /// Stable index used when deriving the site's random streams.
    pub fn stream_index(self, depth: usize) -> u64 {
        match self {
            SiteId::Encoder(l) => l as u64,
            SiteId::Bottleneck => depth as u64,
            SiteId::Decoder(l) => (depth + 1 + l) as u64,
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteId::Encoder(l) => write!(f, "encoder:{l}"),
            SiteId::Bottleneck => f.write_str("bottleneck"),
            SiteId::Decoder(l) => write!(f, "decoder:{l}"),
        }
    }
}

/// Which sites of a particular model are diluted, and how.
#[derive(Debug, Clone, PartialEq)]
pub struct DilutionPlan {
    pub sites: Vec<SiteId>,
    pub config: DilutionConfig,
}

impl DilutionPlan {
    pub fn contains(&self, site: SiteId) -> bool {
        self.sites.contains(&site)
    }

    /// Checks that every site exists in a model of the given depth.
    pub fn validate_for(&self, depth: usize) -> Result<()> {
        self.config.validate()?;
        for &site in &self.sites {
            let ok = match site {
                SiteId::Encoder(l) | SiteId::Decoder(l) => l < depth,
                SiteId::Bottleneck => true,
            };
            if !ok {
                return Err(Error::config(format!(
                    "dilution site {site} does not exist in a depth-{depth} model"
                )));
            }
        }
        Ok(())
    }
}

/// Encoder: one site per encoder level. Decoder: one per decoder level (the
/// output head is never a site). Global: both, plus the bottleneck.
pub fn plan_placement(model: &UNetModel, config: DilutionConfig) -> DilutionPlan {
    plan_for_depth(model.depth(), config)
}

pub fn plan_for_depth(depth: usize, config: DilutionConfig) -> DilutionPlan {
    let encoder = (0..depth).map(SiteId::Encoder);
    let decoder = (0..depth).rev().map(SiteId::Decoder);
    let sites = match config.placement {
        Placement::Encoder => encoder.collect(),
        Placement::Decoder => decoder.collect(),
        Placement::Global => encoder
            .chain(std::iter::once(SiteId::Bottleneck))
            .chain(decoder)
            .collect(),
    };
    DilutionPlan { sites, config }
}

/// Binary keep/drop mask. For frequency masks the spatial axes index
/// frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
    rate: f64,
    hermitian: bool,
}

impl BinaryMask {
    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let mut m = Self::constant(shape, false);
        m.rate = 1.0;
        m
    }

    fn constant(shape: &[usize], keep: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            keep: vec![keep; shape.iter().product()],
            rate: 0.0,
            hermitian: true,
        }
    }

    /// Builds a mask from explicit keep flags. `rate` is the nominal drop
    /// probability used for rescaling.
    pub fn from_keep(shape: &[usize], keep: Vec<bool>, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::shape(format!(
                "mask shape {shape:?} needs {} flags, got {}",
                shape.iter().product::<usize>(),
                keep.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            keep,
            rate,
            hermitian: false,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn set(&mut self, index: usize, keep: bool) {
        self.keep[index] = keep;
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    fn chw(&self) -> (usize, usize, usize) {
        match *self.shape.as_slice() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            [1, c, h, w] => (c, h, w),
            _ => (1, 1, self.keep.len()),
        }
    }

    /// Stacks per-channel H×W masks into a C×H×W mask.
    pub fn stack(planes: &[BinaryMask]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero masks"))?;
        let (_, h, w) = first.chw();
        let mut keep = Vec::with_capacity(planes.len() * h * w);
        for plane in planes {
            if plane.chw() != (1, h, w) {
                return Err(Error::shape(format!(
                    "cannot stack mask {:?} with {:?}",
                    plane.shape, first.shape
                )));
            }
            keep.extend_from_slice(&plane.keep);
        }
        Ok(Self {
            shape: vec![planes.len(), h, w],
            keep,
            rate: first.rate,
            hermitian: planes.iter().all(|p| p.hermitian),
        })
    }

    fn scale(&self, rescale: bool) -> f32 {
        match (rescale, self.rate < 1.0) {
            (true, true) => (1.0 / (1.0 - self.rate)) as f32,
            (true, false) => 0.0,
            (false, _) => 1.0,
        }
    }
}

fn bernoulli(p: f64) -> Result<Bernoulli> {
    check_rate(p)?;
    Bernoulli::new(p).map_err(|e| Error::config(format!("dropout rate {p}: {e}")))
}

/// I.i.d. mask with `P(drop) = p`.
pub fn sample_signal_mask<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Result<BinaryMask> {
    let drop = bernoulli(p)?;
    let n = shape.iter().product();
    let keep = (0..n).map(|_| !drop.sample(rng)).collect();
    Ok(BinaryMask {
        shape: shape.to_vec(),
        keep,
        rate: p,
        hermitian: false,
    })
}

/// Mask over the `h×w` frequency bins of one channel.
pub fn sample_frequency_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    p: f64,
    hermitian: bool,
    rng: &mut R,
) -> Result<BinaryMask> {
    let drop = bernoulli(p)?;
    let keep = if hermitian {
        let mut keep = vec![true; h * w];
        for orbit in hermitian_pairs(h, w)? {
            let k = !drop.sample(rng);
            for (u, v) in orbit.members() {
                keep[u * w + v] = k;
            }
        }
        keep
    } else {
        (0..h * w).map(|_| !drop.sample(rng)).collect()
    };
    Ok(BinaryMask {
        shape: vec![h, w],
        keep,
        rate: p,
        hermitian,
    })
}

fn check_mask_shape(feature_map: &Tensor, mask: &BinaryMask) -> Result<(usize, usize, usize)> {
    let dims = feature_map.chw()?;
    if mask.chw() != dims || mask.keep.len() != feature_map.len() {
        return Err(Error::shape(format!(
            "mask shape {:?} does not match feature map {:?}",
            mask.shape,
            feature_map.shape()
        )));
    }
    Ok(dims)
}

/// `X ⊙ D`, optionally scaled by `1/(1−p)`.
pub fn apply_signal_dropout(feature_map: &Tensor, mask: &BinaryMask, rescale: bool) -> Result<Tensor> {
    check_mask_shape(feature_map, mask)?;
    let scale = mask.scale(rescale);
    // Clearing the bits of dropped values gives an exact +0.0 and vectorizes.
    let data = feature_map
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| f32::from_bits(v.to_bits() & u32::from(k).wrapping_neg()))
        .map(|v| if scale == 1.0 { v } else { v * scale })
        .collect();
    Tensor::from_vec(feature_map.shape(), data)
}

/// Result of a frequency-space dilution.
#[derive(Debug, Clone)]
pub struct FrequencyDiluted {
    pub map: Tensor,
    /// Largest imaginary magnitude discarded by the inverse transform.
    pub imag_residual: f64,
}

/// `F⁻¹(F[X] ⊙ D)` per channel, real part.
pub fn apply_frequency_dropout(
    feature_map: &Tensor,
    mask: &BinaryMask,
    rescale: bool,
) -> Result<FrequencyDiluted> {
    let (c, h, w) = check_mask_shape(feature_map, mask)?;
    let plan = Fft2dPlan::new(h, w);
    let scale = f64::from(mask.scale(rescale));
    let mut out = feature_map.clone();
    let mut imag_residual = 0.0f64;
    let mut plane = vec![0.0f64; h * w];
    for ch in 0..c {
        let keep = &mask.keep[ch * h * w..(ch + 1) * h * w];
        if keep.iter().all(|&k| k) && scale == 1.0 {
            continue;
        }
        for (d, &s) in plane.iter_mut().zip(feature_map.plane(ch)) {
            *d = f64::from(s);
        }
        let mut spectrum = plan.forward_real(&plane);
        for (z, &k) in spectrum.coefficients_mut().iter_mut().zip(keep) {
            *z = if k { *z * scale } else { num_complex::Complex64::new(0.0, 0.0) };
        }
        let (re, residual) = plan.inverse_real(&spectrum);
        imag_residual = imag_residual.max(residual);
        for (d, s) in out.plane_mut(ch).iter_mut().zip(re) {
            *d = s as f32;
        }
    }
    debug_assert!(
        !mask.hermitian || imag_residual < 1e-6,
        "Hermitian mask left imaginary residual {imag_residual}"
    );
    Ok(FrequencyDiluted {
        map: out,
        imag_residual,
    })
}

/// Applies a mask of either kind.
pub fn apply_dropout(
    kind: DropoutKind,
    feature_map: &Tensor,
    mask: &BinaryMask,
    rescale: bool,
) -> Result<Tensor> {
    match kind {
        DropoutKind::Signal => apply_signal_dropout(feature_map, mask, rescale),
        DropoutKind::Frequency => Ok(apply_frequency_dropout(feature_map, mask, rescale)?.map),
    }
}

/// Diluted convolution block with the mask applied between the correlation
/// and the bias: `σ([X ∗ W] ⊙ D + b)` for signal dropout and
/// `σ(F⁻¹(F[X ∗ W] ⊙ D) + b)` for frequency dropout.
pub fn diluted_block_forward(
    input: &Tensor,
    block: &ConvBlock,
    kind: DropoutKind,
    mask: &BinaryMask,
    rescale: bool,
) -> Result<Tensor> {
    let pre = block.correlate(input)?;
    let masked = apply_dropout(kind, &pre, mask, rescale)?;
    Ok(block.finish(masked))
}

/// Samples independent per-channel masks for the map at one site.
pub fn sample_site_mask(
    config: &DilutionConfig,
    feature_map: &Tensor,
    stream: &RngStream,
    site_index: u64,
) -> Result<BinaryMask> {
    let (c, h, w) = feature_map.chw()?;
    let planes = (0..c as u64)
        .map(|ch| {
            let mut rng = stream.channel(site_index, ch);
            match config.kind {
                DropoutKind::Signal => sample_signal_mask(&[h, w], config.rate, &mut rng),
                DropoutKind::Frequency => {
                    sample_frequency_mask(h, w, config.rate, config.hermitian, &mut rng)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryMask::stack(&planes)
}

/// Dilutes a complete stage output at one plan site.
pub fn dilute_site(
    config: &DilutionConfig,
    feature_map: &Tensor,
    stream: &RngStream,
    site_index: u64,
) -> Result<Tensor> {
    let mask = sample_site_mask(config, feature_map, stream, site_index)?;
    apply_dropout(config.kind, feature_map, &mask, config.rescale)
}
