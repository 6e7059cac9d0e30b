use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::conv::{activation_backward, conv2d_backward, conv2d_forward, Activation, ConvBlock};
use crate::dilution::{dilute_site, DilutionPlan, SiteId};
use crate::error::{Error, Result};
use crate::rng::{stream, RngStream};
use crate::tensor::{ClassMap, Tensor};

/// Shape of a [`UNetModel`]; also the JSON descriptor stored in model files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub class_count: usize,
    pub kernel_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            class_count: 3,
            kernel_size: 3,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config(format!("degenerate architecture {self:?}")));
        }
        if self.class_count < 2 || self.class_count > 256 {
            return Err(Error::config(format!(
                "class_count must be in 2..=256, got {}",
                self.class_count
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Channel width at level `l` (the bottleneck is level `depth`).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Number of convolution blocks, output head included.
    pub fn block_count(&self) -> usize {
        4 * self.depth + 3
    }

    /// Required divisor of the input height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Two stacked ReLU convolution blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl Stage {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_forward(&conv2d_forward(input, &self.first)?, &self.second)
    }
}

/// Small U-Net: `depth` encoder stages with 2×2 max-pooling, a bottleneck,
/// `depth` decoder stages with nearest-neighbour upsampling and skip
/// concatenation, and a 1×1 identity head feeding a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    arch: Architecture,
    /// Indexed by level, shallowest first.
    pub encoder: Vec<Stage>,
    pub bottleneck: Stage,
    /// Indexed by level, shallowest first (evaluated deepest first).
    pub decoder: Vec<Stage>,
    pub head: ConvBlock,
}

/// Network output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// class_count × H × W
    pub logits: Tensor,
    /// Channel-wise softmax of `logits`.
    pub probabilities: Tensor,
}

impl Prediction {
    pub fn class_map(&self) -> ClassMap {
        ClassMap::argmax(&self.logits).expect("logits are C×H×W")
    }
}

impl UNetModel {
    /// He-uniform kernels (`±sqrt(6 / fan_in)`), zero biases. Each kernel has
    /// its own stream derived from `seed` and the block index.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        for (index, block) in model.blocks_mut().into_iter().enumerate() {
            let fan_in = block.in_channels() * block.kernel_size() * block.kernel_size();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = stream(seed, &[index as u64]);
            for w in block.kernel.data_mut() {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel_size;
        let stage = |cin, cout| Stage {
            first: ConvBlock::zeros(cin, cout, k, Activation::Relu),
            second: ConvBlock::zeros(cout, cout, k, Activation::Relu),
        };
        let encoder = (0..arch.depth)
            .map(|l| {
                let cin = if l == 0 { arch.in_channels } else { arch.channels(l - 1) };
                stage(cin, arch.channels(l))
            })
            .collect();
        let bottleneck = stage(arch.channels(arch.depth - 1), arch.channels(arch.depth));
        let decoder = (0..arch.depth)
            .map(|l| stage(arch.channels(l + 1) + arch.channels(l), arch.channels(l)))
            .collect();
        let head = ConvBlock::zeros(arch.channels(0), arch.class_count, 1, Activation::Identity);
        Ok(Self {
            arch,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.arch.depth
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    /// Blocks in parameter order: encoder levels, bottleneck, decoder levels,
    /// head.
    pub fn blocks(&self) -> Vec<&ConvBlock> {
        let mut out = Vec::with_capacity(self.arch.block_count());
        for s in self.encoder.iter().chain(std::iter::once(&self.bottleneck)).chain(&self.decoder) {
            out.push(&s.first);
            out.push(&s.second);
        }
        out.push(&self.head);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut ConvBlock> {
        let mut out = Vec::with_capacity(self.arch.block_count());
        for s in self
            .encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.bottleneck))
            .chain(self.decoder.iter_mut())
        {
            out.push(&mut s.first);
            out.push(&mut s.second);
        }
        out.push(&mut self.head);
        out
    }

    /// All parameter tensors: kernel then bias for each block.
    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks()
            .into_iter()
            .flat_map(|b| [&b.kernel, &b.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks_mut()
            .into_iter()
            .flat_map(|b| [&mut b.kernel, &mut b.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = input.chw()?;
        if c != self.arch.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, model expects {}",
                self.arch.in_channels
            )));
        }
        let m = self.arch.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "input {h}×{w} is not divisible by {m}; pad the input to a multiple of {m}"
            )));
        }
        Ok((h, w))
    }

    fn as_chw(input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.chw()?;
        input.clone().reshape(&[c, h, w])
    }

    /// Forward pass that hands every stage output to `hook`, which may
    /// replace it.
    pub fn forward_with<F>(&self, input: &Tensor, mut hook: F) -> Result<Prediction>
    where
        F: FnMut(SiteId, Tensor) -> Result<Tensor>,
    {
        self.check_input(input)?;
        let mut x = Self::as_chw(input)?;
        let mut skips = Vec::with_capacity(self.arch.depth);
        for (l, stage) in self.encoder.iter().enumerate() {
            let out = hook(SiteId::Encoder(l), stage.forward(&x)?)?;
            x = max_pool2(&out).0;
            skips.push(out);
        }
        x = hook(SiteId::Bottleneck, self.bottleneck.forward(&x)?)?;
        for l in (0..self.arch.depth).rev() {
            let up = upsample2(&x);
            let joined = up.concat_channels(&skips[l])?;
            x = hook(SiteId::Decoder(l), self.decoder[l].forward(&joined)?)?;
        }
        let logits = conv2d_forward(&x, &self.head)?;
        debug_assert!(logits.all_finite(), "non-finite logits");
        let probabilities = softmax_channels(&logits);
        Ok(Prediction {
            logits,
            probabilities,
        })
    }

    /// Undiluted stage outputs at every site.
    pub fn site_features(&self, input: &Tensor) -> Result<Vec<(SiteId, Tensor)>> {
        let mut out = Vec::new();
        self.forward_with(input, |site, t| {
            out.push((site, t.clone()));
            Ok(t)
        })?;
        Ok(out)
    }

    fn forward_trace(&self, input: &Tensor) -> Result<Trace> {
        self.check_input(input)?;
        let x = Self::as_chw(input)?;
        let mut enc = Vec::with_capacity(self.arch.depth);
        let mut pools = Vec::with_capacity(self.arch.depth);
        let mut cur = x;
        for stage in &self.encoder {
            let t = StageTrace::run(stage, cur)?;
            let (pooled, idx) = max_pool2(&t.out);
            pools.push(idx);
            enc.push(t);
            cur = pooled;
        }
        let bottleneck = StageTrace::run(&self.bottleneck, cur)?;
        let mut dec: Vec<Option<StageTrace>> = (0..self.arch.depth).map(|_| None).collect();
        let mut cur = bottleneck.out.clone();
        for l in (0..self.arch.depth).rev() {
            let joined = upsample2(&cur).concat_channels(&enc[l].out)?;
            let t = StageTrace::run(&self.decoder[l], joined)?;
            cur = t.out.clone();
            dec[l] = Some(t);
        }
        let logits = conv2d_forward(&cur, &self.head)?;
        Ok(Trace {
            enc,
            pools,
            bottleneck,
            dec: dec.into_iter().map(|t| t.expect("all levels visited")).collect(),
            logits,
        })
    }
}

/// Forward pass with optional dilution at the plan's sites. Without a plan the
/// pass is a pure function of model and input.
pub fn unet_forward(
    model: &UNetModel,
    input: &Tensor,
    dilution: Option<&DilutionPlan>,
    rng: RngStream,
) -> Result<Prediction> {
    match dilution {
        None => model.forward_with(input, |_, t| Ok(t)),
        Some(plan) => {
            plan.validate_for(model.depth())?;
            let depth = model.depth();
            model.forward_with(input, |site, t| {
                if plan.contains(site) {
                    dilute_site(&plan.config, &t, &rng, site.stream_index(depth))
                } else {
                    Ok(t)
                }
            })
        }
    }
}

struct StageTrace {
    input: Tensor,
    mid: Tensor,
    out: Tensor,
}

impl StageTrace {
    fn run(stage: &Stage, input: Tensor) -> Result<Self> {
        let mid = conv2d_forward(&input, &stage.first)?;
        let out = conv2d_forward(&mid, &stage.second)?;
        Ok(Self { input, mid, out })
    }

    /// Writes kernel/bias gradients for both blocks at `slot` and `slot + 1`
    /// and returns the gradient with respect to the stage input.
    fn backward(&self, stage: &Stage, mut grad: Tensor, grads: &mut [Tensor], slot: usize) -> Result<Tensor> {
        activation_backward(stage.second.activation, &self.out, &mut grad);
        let g2 = conv2d_backward(&self.mid, &stage.second, &grad)?;
        let mut grad = g2.input;
        activation_backward(stage.first.activation, &self.mid, &mut grad);
        let g1 = conv2d_backward(&self.input, &stage.first, &grad)?;
        grads[2 * slot] = g1.kernel;
        grads[2 * slot + 1] = g1.bias;
        grads[2 * slot + 2] = g2.kernel;
        grads[2 * slot + 3] = g2.bias;
        Ok(g1.input)
    }
}

struct Trace {
    enc: Vec<StageTrace>,
    pools: Vec<Vec<u32>>,
    bottleneck: StageTrace,
    dec: Vec<StageTrace>,
    logits: Tensor,
}

/// Loss and parameter gradients for one sample, aligned with
/// [`UNetModel::params`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub params: Vec<Tensor>,
}

fn check_target(model: &UNetModel, input: &Tensor, target: &ClassMap) -> Result<()> {
    let (_, h, w) = input.chw()?;
    if target.dims() != (h, w) {
        return Err(Error::shape(format!(
            "target {:?} does not match input {h}×{w}",
            target.dims()
        )));
    }
    if let Some(bad) = target
        .labels()
        .iter()
        .find(|&&l| usize::from(l) >= model.class_count())
    {
        return Err(Error::Data(format!(
            "target label {bad} out of range for {} classes",
            model.class_count()
        )));
    }
    Ok(())
}

/// Mean per-voxel cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, target: &ClassMap) -> Result<(f64, Tensor)> {
    let (k, h, w) = logits.chw()?;
    if target.dims() != (h, w) {
        return Err(Error::shape(format!(
            "target {:?} does not match logits {:?}",
            target.dims(),
            logits.shape()
        )));
    }
    let n = h * w;
    let probs = softmax_channels(logits);
    let mut grad = probs.clone();
    let inv_n = 1.0 / n as f32;
    let mut loss = 0.0f64;
    let data = logits.data();
    for (i, &t) in target.labels().iter().enumerate() {
        let t = usize::from(t);
        if t >= k {
            return Err(Error::Data(format!("target label {t} out of range for {k} classes")));
        }
        let max = (0..k).map(|c| data[c * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(max)
            + (0..k)
                .map(|c| f64::from(data[c * n + i] - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - f64::from(data[t * n + i]);
        grad.data_mut()[t * n + i] -= 1.0;
    }
    for g in grad.data_mut() {
        *g *= inv_n;
    }
    Ok((loss / n as f64, grad))
}

/// Exact gradients of the mean per-voxel cross-entropy of an undiluted pass.
pub fn unet_backward(model: &UNetModel, input: &Tensor, target: &ClassMap) -> Result<Gradients> {
    check_target(model, input, target)?;
    let trace = model.forward_trace(input)?;
    let (loss, grad_logits) = cross_entropy(&trace.logits, target)?;
    let depth = model.depth();
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();

    let head_in = &trace.dec[0].out;
    let gh = conv2d_backward(head_in, &model.head, &grad_logits)?;
    let head_slot = 2 * (4 * depth + 2);
    grads[head_slot] = gh.kernel;
    grads[head_slot + 1] = gh.bias;

    let mut grad = gh.input;
    let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
    for l in 0..depth {
        let slot = 2 * depth + 2 + 2 * l;
        let g_in = trace.dec[l].backward(&model.decoder[l], grad, &mut grads, slot)?;
        let up_ch = model.arch.channels(l + 1);
        let (g_up, g_skip) = split_channels(&g_in, up_ch)?;
        skip_grads[l] = Some(g_skip);
        grad = upsample2_backward(&g_up);
    }
    grad = trace
        .bottleneck
        .backward(&model.bottleneck, grad, &mut grads, 2 * depth)?;
    for l in (0..depth).rev() {
        let (c, h, w) = trace.enc[l].out.chw()?;
        let mut g_out = max_pool2_backward(&grad, &trace.pools[l], c, h, w);
        let skip = skip_grads[l].take().expect("every level has a skip gradient");
        for (a, b) in g_out.data_mut().iter_mut().zip(skip.data()) {
            *a += b;
        }
        grad = trace.enc[l].backward(&model.encoder[l], g_out, &mut grads, 2 * l)?;
    }
    debug_assert!(grads.iter().all(Tensor::all_finite), "non-finite gradient");
    Ok(Gradients {
        loss,
        params: grads,
    })
}

/// Channel-wise softmax of a K×H×W tensor.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (k, h, w) = logits.chw().expect("softmax on non-spatial tensor");
    let n = h * w;
    let data = logits.data();
    let mut out = vec![0.0f32; k * n];
    for i in 0..n {
        let max = (0..k).map(|c| data[c * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for c in 0..k {
            let e = f64::from(data[c * n + i] - max).exp();
            out[c * n + i] = e as f32;
            sum += e;
        }
        for c in 0..k {
            out[c * n + i] = (f64::from(out[c * n + i]) / sum) as f32;
        }
    }
    Tensor::from_vec(&[k, h, w], out).expect("softmax preserves shape")
}

/// 2×2 max-pool with stride 2; also returns the flat argmax of each window.
fn max_pool2(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = input.chw().expect("pool on non-spatial tensor");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let src = input.plane(ch);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (2 * y + dy) * w + 2 * x + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out[o] = src[best];
                idx[o] = (ch * h * w + best) as u32;
            }
        }
    }
    (
        Tensor::from_vec(&[c, oh, ow], out).expect("pool shape"),
        idx,
    )
}

fn max_pool2_backward(grad: &Tensor, idx: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = out.data_mut();
    for (&g, &i) in grad.data().iter().zip(idx) {
        data[i as usize] += g;
    }
    out
}

fn upsample2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.chw().expect("upsample on non-spatial tensor");
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let src = input.plane(ch);
        for y in 0..oh {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = row[x / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("upsample shape")
}

fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (c, oh, ow) = grad.chw().expect("upsample grad on non-spatial tensor");
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = grad.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += g[y * ow + x];
            }
        }
    }
    out
}

fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = t.chw()?;
    let cut = first * h * w;
    let a = Tensor::from_vec(&[first, h, w], t.data()[..cut].to_vec())?;
    let b = Tensor::from_vec(&[c - first, h, w], t.data()[cut..].to_vec())?;
    Ok((a, b))
}
