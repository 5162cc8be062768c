//! Stride-32 residual counter with a two-channel 1x1 head.
//!
//! Five stages, each opened by a downsampling residual block
//! (`3x3/2 -> ReLU -> 3x3` plus a `1x1/2` projection shortcut, summed and
//! rectified) and followed by `blocks_per_stage - 1` identity residual
//! blocks. A `1x1` convolution with two filters then produces the density
//! map (channel 0) and a map whose cells sum to the log noise variance
//! (channel 1). All convolution weights are stored `[k, k, c_in, c_out]`.
//!
//! The counting branch and both ranking branches evaluate the same
//! [`Params`]; there is no separate copy per branch.

pub mod checkpoint;
pub mod ops;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::RgbImage;
use crate::seed;
pub use ops::Scalar;
use ops::{conv_backward, conv_forward, relu_backward, relu_inplace, ConvCache, ConvShape};

pub const TOTAL_STRIDE: usize = 32;
pub const STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_channels: [usize; STAGES],
    pub blocks_per_stage: usize,
    /// Nominal `(height, width)`; both multiples of 32.
    pub input_size: (usize, usize),
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { stage_channels: [16, 32, 64, 128, 256], blocks_per_stage: 1, input_size: (320, 576), head_channels: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be positive multiples of 32")));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage == 0 {
            return Err(Error::Config("stage widths and blocks per stage must be positive".into()));
        }
        if self.head_channels != 2 {
            return Err(Error::Config(format!("head must have 2 channels, got {}", self.head_channels)));
        }
        Ok(())
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.input_size.0 / TOTAL_STRIDE, self.input_size.1 / TOTAL_STRIDE)
    }

    /// Trainable parameter count for a head with `head_channels` filters.
    pub fn parameter_count(&self, head_channels: usize) -> usize {
        let mut layout = Vec::new();
        self.layout(head_channels, &mut layout);
        layout.iter().filter(|t| t.trainable).map(|t| t.shape.iter().product::<usize>()).sum()
    }

    fn layout(&self, head_channels: usize, out: &mut Vec<TensorSpec>) {
        out.push(TensorSpec { name: "input.mean".into(), shape: vec![3], trainable: false });
        let mut c_in = 3;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let cin = if b == 0 { c_in } else { c };
                let p = format!("stage{s}.block{b}");
                out.push(TensorSpec::weight(format!("{p}.conv1.weight"), 3, cin, c));
                out.push(TensorSpec::bias(format!("{p}.conv1.bias"), c));
                out.push(TensorSpec::weight(format!("{p}.conv2.weight"), 3, c, c));
                out.push(TensorSpec::bias(format!("{p}.conv2.bias"), c));
                if b == 0 {
                    out.push(TensorSpec::weight(format!("{p}.proj.weight"), 1, cin, c));
                    out.push(TensorSpec::bias(format!("{p}.proj.bias"), c));
                }
            }
            c_in = c;
        }
        out.push(TensorSpec::weight("head.weight".into(), 1, c_in, head_channels));
        out.push(TensorSpec::bias("head.bias".into(), head_channels));
    }

    /// Stable 64-bit fingerprint of the architecture.
    pub fn hash64(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Debug, Clone)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

impl TensorSpec {
    fn weight(name: String, k: usize, c_in: usize, c_out: usize) -> Self {
        TensorSpec { name, shape: vec![k, k, c_in, c_out], trainable: true }
    }

    fn bias(name: String, c: usize) -> Self {
        TensorSpec { name, shape: vec![c], trainable: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
    shape: ConvShape,
}

#[derive(Debug, Clone)]
struct BlockRef {
    conv1: ConvRef,
    conv2: ConvRef,
    proj: Option<ConvRef>,
}

#[derive(Debug, Clone)]
struct Plan {
    mean: usize,
    blocks: Vec<BlockRef>,
    head: ConvRef,
}

impl Plan {
    fn new(config: &ModelConfig) -> Plan {
        // Tensor indices follow `ModelConfig::layout` exactly.
        let mut idx = 1;
        let mut next = |shape: ConvShape| {
            let r = ConvRef { weight: idx, bias: idx + 1, shape };
            idx += 2;
            r
        };
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for &c in &config.stage_channels {
            for b in 0..config.blocks_per_stage {
                let (cin, stride) = if b == 0 { (c_in, 2) } else { (c, 1) };
                let conv1 = next(ConvShape { k: 3, stride, pad: 1, c_in: cin, c_out: c });
                let conv2 = next(ConvShape { k: 3, stride: 1, pad: 1, c_in: c, c_out: c });
                let proj = (b == 0).then(|| next(ConvShape { k: 1, stride: 2, pad: 0, c_in: cin, c_out: c }));
                blocks.push(BlockRef { conv1, conv2, proj });
            }
            c_in = c;
        }
        let head = next(ConvShape { k: 1, stride: 1, pad: 0, c_in, c_out: config.head_channels });
        Plan { mean: 0, blocks, head }
    }
}

/// Named tensors of one model. Gradients use the same type.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
    plan: Plan,
}

pub type ModelParams = Params<f32>;

impl<T: Scalar> PartialEq for Params<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl<T: Scalar> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Vec::new();
        config.layout(config.head_channels, &mut layout);
        let tensors = layout
            .into_iter()
            .map(|s| Tensor { data: vec![T::zero(); s.shape.iter().product()], name: s.name, shape: s.shape, trainable: s.trainable })
            .collect();
        Ok(Params { config: config.clone(), tensors, plan: Plan::new(config) })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.fill(T::zero());
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            plan: self.plan.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    trainable: t.trainable,
                    data: t.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Adds `alpha * other` elementwise.
    pub fn add_scaled(&mut self, other: &Params<T>, alpha: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + alpha * y;
            }
        }
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())).map(|t| t.name.as_str())
    }

    pub fn set_input_mean(&mut self, mean: [f64; 3]) {
        let t = &mut self.tensors[self.plan.mean];
        for (d, m) in t.data.iter_mut().zip(mean) {
            *d = T::of_f64(m);
        }
    }

    pub fn input_mean(&self) -> [f64; 3] {
        let d = &self.tensors[self.plan.mean].data;
        [d[0].as_f64(), d[1].as_f64(), d[2].as_f64()]
    }
}

/// He-normal backbone, Xavier-uniform head. The log-variance filter starts
/// at zero so a fresh model predicts unit variance everywhere.
pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = Params::<f32>::zeros(config)?;
    let mut rng = seed::rng(seed, "init", 0);
    let head_weight = params.plan.head.weight;
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if !t.trainable || t.shape.len() != 4 {
            continue;
        }
        let (k, c_in, c_out) = (t.shape[0], t.shape[2], t.shape[3]);
        if i == head_weight {
            let limit = (6.0 / (c_in + c_out) as f64).sqrt();
            for ci in 0..c_in {
                t.data[ci * c_out] = rng.random_range(-limit..limit) as f32;
            }
        } else {
            let std = (2.0 / (k * k * c_in) as f64).sqrt();
            for v in t.data.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = (n * std) as f32;
            }
        }
    }
    Ok(params)
}

/// Image as a `[3, h, w]` buffer with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (h, w) = (img.height(), img.width());
        let mut data = vec![T::zero(); 3 * h * w];
        for (i, px) in img.as_raw().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * h * w + i] = T::of_f64(px[ch] as f64 / 255.0);
            }
        }
        ImageTensor { height: h, width: w, data }
    }
}

/// Per-channel mean over a set of images, in `[0, 1]` units.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.as_raw().chunks_exact(3) {
            for ch in 0..3 {
                sum[ch] += px[ch] as f64;
            }
        }
        n += img.height() * img.width();
    }
    if n == 0 {
        return [0.0; 3];
    }
    sum.map(|s| s / (255.0 * n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub height: usize,
    pub width: usize,
    /// Predicted density map, channel 0.
    pub density: Vec<T>,
    /// Channel 1; its cells sum to the log noise variance.
    pub logvar_map: Vec<T>,
}

impl<T: Scalar> ModelOutput<T> {
    /// Integrated count.
    pub fn count(&self) -> f64 {
        self.density.iter().map(|v| v.as_f64()).sum()
    }

    pub fn logvar(&self) -> f64 {
        self.logvar_map.iter().map(|v| v.as_f64()).sum()
    }

    /// Global average pooling of the density map.
    pub fn gap_count(&self) -> f64 {
        self.count() / (self.height * self.width) as f64
    }
}

/// Loss sensitivities with respect to the scalar read-outs of one forward.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OutputGrad {
    pub d_count: f64,
    pub d_logvar: f64,
    pub d_gap: f64,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    input: Vec<T>,
    in_h: usize,
    in_w: usize,
    c1: ConvCache<T>,
    h1: Vec<T>,
    c2: ConvCache<T>,
    proj: Option<ConvCache<T>>,
    out: Vec<T>,
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    blocks: Vec<BlockTrace<T>>,
    head_input: Vec<T>,
    head: ConvCache<T>,
}

impl<T: Scalar> Trace<T> {
    /// Which rectified units were active, in a fixed order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.h1.iter().chain(&b.out)).map(|&v| v > T::zero()).collect()
    }
}

fn conv<T: Scalar>(params: &Params<T>, r: &ConvRef, x: &[T], h: usize, w: usize) -> (Vec<T>, ConvCache<T>) {
    conv_forward(x, h, w, &r.shape, &params.tensors[r.weight].data, &params.tensors[r.bias].data)
}

/// Evaluates the model on one image. Input sides must be multiples of 32.
pub fn forward<T: Scalar>(params: &Params<T>, image: &ImageTensor<T>) -> Result<(ModelOutput<T>, Trace<T>)> {
    let (h, w) = (image.height, image.width);
    if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 || image.data.len() != 3 * h * w {
        return Err(Error::Shape {
            expected: "3 x H x W with H, W positive multiples of 32".into(),
            actual: format!("{} values for {h}x{w}", image.data.len()),
        });
    }
    let mean = &params.tensors[params.plan.mean].data;
    let mut x = image.data.clone();
    for (ch, plane) in x.chunks_exact_mut(h * w).enumerate() {
        for v in plane {
            *v = *v - mean[ch];
        }
    }
    let (mut cur_h, mut cur_w) = (h, w);
    let mut blocks = Vec::with_capacity(params.plan.blocks.len());
    for b in &params.plan.blocks {
        let (mut h1, c1) = conv(params, &b.conv1, &x, cur_h, cur_w);
        relu_inplace(&mut h1);
        let (oh, ow) = (c1.out_h, c1.out_w);
        let (mut out, c2) = conv(params, &b.conv2, &h1, oh, ow);
        let proj = match &b.proj {
            Some(p) => {
                let (sc, pc) = conv(params, p, &x, cur_h, cur_w);
                for (o, s) in out.iter_mut().zip(&sc) {
                    *o = *o + *s;
                }
                Some(pc)
            }
            None => {
                for (o, s) in out.iter_mut().zip(&x) {
                    *o = *o + *s;
                }
                None
            }
        };
        relu_inplace(&mut out);
        blocks.push(BlockTrace { input: x, in_h: cur_h, in_w: cur_w, c1, h1, c2, proj, out: out.clone() });
        x = out;
        cur_h = oh;
        cur_w = ow;
    }
    let (z, head) = conv(params, &params.plan.head, &x, cur_h, cur_w);
    let cells = cur_h * cur_w;
    let logvar_map = if params.config.head_channels > 1 { z[cells..2 * cells].to_vec() } else { vec![T::zero(); cells] };
    let output = ModelOutput { height: cur_h, width: cur_w, density: z[..cells].to_vec(), logvar_map };
    Ok((output, Trace { blocks, head_input: x, head }))
}

/// Evaluates without keeping the trace.
pub fn predict<T: Scalar>(params: &Params<T>, image: &ImageTensor<T>) -> Result<ModelOutput<T>> {
    forward(params, image).map(|(o, _)| o)
}

/// Reverse pass for one recorded forward. Gradients are added into `grads`.
pub fn backward<T: Scalar>(params: &Params<T>, trace: &Trace<T>, d_out: &OutputGrad, grads: &mut Params<T>) {
    let cells = trace.head.out_h * trace.head.out_w;
    let mut dz = vec![T::zero(); params.config.head_channels * cells];
    let d_density = T::of_f64(d_out.d_count + d_out.d_gap / cells as f64);
    dz[..cells].fill(d_density);
    if params.config.head_channels > 1 {
        dz[cells..2 * cells].fill(T::of_f64(d_out.d_logvar));
    }
    let mut dx = backward_conv(params, &params.plan.head, &trace.head_input, &trace.head, &dz, grads, true).unwrap();
    for (b, t) in params.plan.blocks.iter().zip(&trace.blocks).rev() {
        relu_backward(&t.out, &mut dx);
        let mut dh1 = backward_conv(params, &b.conv2, &t.h1, &t.c2, &dx, grads, true).unwrap();
        relu_backward(&t.h1, &mut dh1);
        let first = std::ptr::eq(b, &params.plan.blocks[0]);
        let need_input = !first;
        let d_in = backward_conv(params, &b.conv1, &t.input, &t.c1, &dh1, grads, need_input);
        let d_short = match (&b.proj, &t.proj) {
            (Some(p), Some(pc)) => backward_conv(params, p, &t.input, pc, &dx, grads, need_input),
            _ => Some(dx),
        };
        if first {
            break;
        }
        let mut d_in = d_in.unwrap();
        for (a, s) in d_in.iter_mut().zip(d_short.unwrap()) {
            *a = *a + s;
        }
        let _ = (t.in_h, t.in_w);
        dx = d_in;
    }
}

fn backward_conv<T: Scalar>(
    params: &Params<T>,
    r: &ConvRef,
    x: &[T],
    cache: &ConvCache<T>,
    d_out: &[T],
    grads: &mut Params<T>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (gw, gb) = two_mut(&mut grads.tensors, r.weight, r.bias);
    conv_backward(x, cache, &r.shape, &params.tensors[r.weight].data, d_out, &mut gw.data, &mut gb.data, need_dx)
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
