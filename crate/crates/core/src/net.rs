//! A small trainable super-resolution network, written out longhand:
//! plain-f64 tensors, zero-padded 3×3 convolutions with hand-derived
//! backward passes, periodic-rearrangement upsampling, a masked
//! Charbonnier loss, and Adam.
//!
//! The model is a conv+ReLU stack with one global residual connection:
//! the skip path is the bicubic upsample of the input's own channels, and
//! the final conv is zero-initialized, so an untrained model reproduces
//! the bicubic baseline bit-for-bit. Training only ever learns the
//! residual on top of it.
//!
//! Everything here is deterministic: seeded init, seeded shuffling and
//! patch sampling on one thread, and fixed accumulation order inside
//! every operation regardless of worker count.

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::pncc::PnccImage;
use crate::resample::{self, ResampleSpec};
use crate::synth::ScenePair;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Dense row-major value container for activations (C, H, W) and
/// convolution kernels (O, I, K, K).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} has no elements"
            )));
        }
        if data.len() != n {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    // NaN guard: active in debug and test builds only.
    #[track_caller]
    fn debug_check(&self, context: &str) {
        debug_assert!(
            self.data.iter().all(|v| v.is_finite()),
            "non-finite value after {context}"
        );
    }

    fn rank3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidArgument(format!(
                "{what} must have shape (C, H, W), got {:?}",
                self.shape
            ))),
        }
    }
}

/// Zero-padded cross-correlation preserving H×W. Kernel shape is
/// (O, I, K, K) with odd K; bias has one entry per output channel.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor> {
    let (ci, h, wd) = x.rank3("conv input")?;
    let (o, i, k) = match w.shape[..] {
        [o, i, kh, kw] if kh == kw && kh % 2 == 1 => (o, i, kh),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "kernel must have shape (O, I, K, K) with odd K, got {:?}",
                w.shape
            )))
        }
    };
    if i != ci || b.len() != o {
        return Err(Error::InvalidArgument(format!(
            "conv shapes disagree: input {ci} channels, kernel expects {i}, bias {} for {o} outputs",
            b.len()
        )));
    }
    let pad = k / 2;
    let plane = h * wd;
    let mut out = vec![0.0; o * plane];

    // Parallel over output channels only; each channel's accumulation
    // order is fixed (i, ky, kx ascending), so any worker count produces
    // identical bits.
    out.par_chunks_mut(plane).enumerate().for_each(|(oc, dst)| {
        dst.fill(b[oc]);
        for ic in 0..ci {
            let src = &x.data[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // Row y reads source row y + ky - pad; zero padding
                    // means out-of-range rows and columns contribute
                    // nothing, so the loop bounds simply shrink.
                    let y0 = pad.saturating_sub(ky);
                    let y1 = (h + pad - ky).min(h);
                    let x0 = pad.saturating_sub(kx);
                    let x1 = (wd + pad - kx).min(wd);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let drow = &mut dst[y * wd..(y + 1) * wd];
                        let srow = &src[sy * wd..(sy + 1) * wd];
                        for xx in x0..x1 {
                            drow[xx] += wv * srow[xx + kx - pad];
                        }
                    }
                }
            }
        }
    });
    let t = Tensor {
        shape: vec![o, h, wd],
        data: out,
    };
    t.debug_check("conv2d_forward");
    Ok(t)
}

/// Exact adjoints of `conv2d_forward` with respect to input, kernel, and
/// bias.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (ci, h, wd) = x.rank3("conv input")?;
    let (o, i, k) = match w.shape[..] {
        [o, i, kh, kw] if kh == kw && kh % 2 == 1 => (o, i, kh),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "kernel must have shape (O, I, K, K) with odd K, got {:?}",
                w.shape
            )))
        }
    };
    let (go_c, go_h, go_w) = grad_out.rank3("conv output gradient")?;
    if i != ci || go_c != o || go_h != h || go_w != wd {
        return Err(Error::InvalidArgument(format!(
            "conv backward shapes disagree: input ({ci},{h},{wd}), kernel {:?}, grad ({go_c},{go_h},{go_w})",
            w.shape
        )));
    }
    let pad = k / 2;
    let plane = h * wd;

    let mut grad_b = vec![0.0; o];
    for oc in 0..o {
        let mut acc = 0.0;
        for &g in &grad_out.data[oc * plane..(oc + 1) * plane] {
            acc += g;
        }
        grad_b[oc] = acc;
    }

    let mut grad_w = vec![0.0; o * ci * k * k];
    for oc in 0..o {
        let go = &grad_out.data[oc * plane..(oc + 1) * plane];
        for ic in 0..ci {
            let src = &x.data[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let y0 = pad.saturating_sub(ky);
                    let y1 = (h + pad - ky).min(h);
                    let x0 = pad.saturating_sub(kx);
                    let x1 = (wd + pad - kx).min(wd);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let grow = &go[y * wd..(y + 1) * wd];
                        let srow = &src[sy * wd..(sy + 1) * wd];
                        for xx in x0..x1 {
                            acc += grow[xx] * srow[xx + kx - pad];
                        }
                    }
                    grad_w[((oc * ci + ic) * k + ky) * k + kx] = acc;
                }
            }
        }
    }

    let mut grad_x = vec![0.0; ci * plane];
    for oc in 0..o {
        let go = &grad_out.data[oc * plane..(oc + 1) * plane];
        for ic in 0..ci {
            let dst = &mut grad_x[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data[((oc * ci + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y0 = pad.saturating_sub(ky);
                    let y1 = (h + pad - ky).min(h);
                    let x0 = pad.saturating_sub(kx);
                    let x1 = (wd + pad - kx).min(wd);
                    for y in y0..y1 {
                        let sy = y + ky - pad;
                        let grow = &go[y * wd..(y + 1) * wd];
                        let drow = &mut dst[sy * wd..(sy + 1) * wd];
                        for xx in x0..x1 {
                            drow[xx + kx - pad] += wv * grow[xx];
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor {
            shape: vec![ci, h, wd],
            data: grad_x,
        },
        Tensor {
            shape: w.shape.clone(),
            data: grad_w,
        },
        grad_b,
    ))
}

/// Elementwise max(x, 0).
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient through `relu` given the pre-activation input.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape != grad_out.shape {
        return Err(Error::InvalidArgument(format!(
            "relu backward shapes disagree: {:?} vs {:?}",
            x.shape, grad_out.shape
        )));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Periodic rearrangement: element (c·r² + dy·r + dx, y, x) moves to
/// (c, y·r + dy, x·r + dx), turning C·r² channels into an r×-larger grid.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.rank3("pixel_shuffle input")?;
    if r == 0 {
        return Err(Error::InvalidArgument("shuffle factor must be >= 1".into()));
    }
    if c_in % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "{c_in} channels are not divisible by r² = {}",
            r * r
        )));
    }
    let c_out = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; c_in * h * w];
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let src_c = (c * r + dy) * r + dx;
                let src = &x.data[src_c * h * w..(src_c + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[c * oh * ow + (y * r + dy) * ow + (xx * r + dx)] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![c_out, oh, ow],
        data: out,
    })
}

/// Exact inverse (and adjoint) of `pixel_shuffle`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.rank3("pixel_unshuffle input")?;
    if r == 0 {
        return Err(Error::InvalidArgument("shuffle factor must be >= 1".into()));
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial size {h}x{w} is not divisible by {r}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let c_out = c_in * r * r;
    let mut out = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        for dy in 0..r {
            for dx in 0..r {
                let dst_c = (c * r + dy) * r + dx;
                let dst = &mut out[dst_c * oh * ow..(dst_c + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[y * ow + xx] = x.data[c * h * w + (y * r + dy) * w + (xx * r + dx)];
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![c_out, oh, ow],
        data: out,
    })
}

/// Masked Charbonnier loss: mean over valid pixels and channels of
/// sqrt((p−t)² + ε²), plus its gradient with respect to `pred`. Invalid
/// pixels contribute nothing to either.
pub fn charbonnier_loss(pred: &Tensor, target: &Tensor, valid: &[bool], eps: f64) -> Result<(f64, Tensor)> {
    let (c, h, w) = pred.rank3("loss prediction")?;
    if pred.shape != target.shape {
        return Err(Error::InvalidArgument(format!(
            "loss shapes disagree: {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    if valid.len() != h * w {
        return Err(Error::InvalidArgument(format!(
            "mask has {} entries for {h}x{w} pixels",
            valid.len()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "charbonnier eps must be finite and positive, got {eps}"
        )));
    }
    let n_valid = valid.iter().filter(|&&b| b).count();
    if n_valid == 0 {
        return Err(Error::EmptyInput("loss needs at least one valid pixel".into()));
    }
    let denom = (n_valid * c) as f64;
    let e2 = eps * eps;
    let plane = h * w;
    let mut sum = 0.0;
    let mut grad = vec![0.0; c * plane];
    for ch in 0..c {
        for i in 0..plane {
            if !valid[i] {
                continue;
            }
            let d = pred.data[ch * plane + i] - target.data[ch * plane + i];
            let root = (d * d + e2).sqrt();
            sum += root;
            grad[ch * plane + i] = d / root / denom;
        }
    }
    Ok((
        sum / denom,
        Tensor {
            shape: pred.shape.clone(),
            data: grad,
        },
    ))
}

/// First/second moment accumulators and step count for one parameter
/// group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place. β1 = 0.9, β2 = 0.999,
/// ε = 1e−8.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam shapes disagree: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for j in 0..params.len() {
        let g = grads[j];
        state.m[j] = ADAM_BETA1 * state.m[j] + (1.0 - ADAM_BETA1) * g;
        state.v[j] = ADAM_BETA2 * state.v[j] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[j] / bc1;
        let v_hat = state.v[j] / bc2;
        params[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Which channels the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// All three coordinate channels.
    Xyz,
    /// The depth channel only; X and Y are reconstructed through the
    /// camera afterwards.
    Z,
}

/// What the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// All three normalized coordinate channels.
    Pncc,
    /// The normalized depth plane alone (the image's B channel), no
    /// geometric X/Y context.
    Depth,
}

impl HeadMode {
    pub fn out_channels(self) -> usize {
        match self {
            HeadMode::Xyz => 3,
            HeadMode::Z => 1,
        }
    }
}

impl InputMode {
    pub fn in_channels(self) -> usize {
        match self {
            InputMode::Pncc => 3,
            InputMode::Depth => 1,
        }
    }
}

/// Everything that determines a training run, architecture included; the
/// seed fixes every random draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Patch side length in input pixels; clamped to the image size.
    pub patch: usize,
    pub seed: u64,
    pub charbonnier_eps: f64,
    pub r: usize,
    pub head: HeadMode,
    pub input: InputMode,
    /// Feature width of the hidden layers.
    pub channels: usize,
    /// Total number of conv layers, the in/out adapters included.
    pub depth: usize,
}

impl TrainConfig {
    pub fn new(r: usize, head: HeadMode, input: InputMode) -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 20,
            batch: 8,
            patch: 64,
            seed: 0,
            charbonnier_eps: 1e-3,
            r,
            head,
            input,
            channels: 32,
            depth: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::InvalidArgument(
                "batch size and patch size must be at least 1".into(),
            ));
        }
        if !(self.charbonnier_eps > 0.0) || !self.charbonnier_eps.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "charbonnier eps must be finite and positive, got {}",
                self.charbonnier_eps
            )));
        }
        if self.r == 0 {
            return Err(Error::InvalidArgument("upscale factor must be at least 1".into()));
        }
        if self.channels == 0 || self.depth < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 1 feature channel and 2 layers, got {} and {}",
                self.channels, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    w: Tensor,
    b: Vec<f64>,
    opt_w: AdamState,
    opt_b: AdamState,
}

impl ConvLayer {
    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// The residual SR model plus its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct SrModel {
    cfg: TrainConfig,
    layers: Vec<ConvLayer>,
}

impl SrModel {
    /// Build and initialize from the seeded generator: hidden layers get
    /// fan-in-scaled normal weights drawn in declaration order, the final
    /// layer is all zeros so the untrained model is exactly the bicubic
    /// skip path.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let r2 = cfg.r * cfg.r;
        let out_ch = cfg.head.out_channels();
        let mut dims = Vec::with_capacity(cfg.depth);
        dims.push((cfg.input.in_channels(), cfg.channels));
        for _ in 0..cfg.depth - 2 {
            dims.push((cfg.channels, cfg.channels));
        }
        dims.push((cfg.channels, out_ch * r2));

        let layers = dims
            .iter()
            .enumerate()
            .map(|(li, &(ci, co))| {
                let n = co * ci * 9;
                let data = if li == cfg.depth - 1 {
                    vec![0.0; n]
                } else {
                    let std = (2.0 / (ci as f64 * 9.0)).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                ConvLayer {
                    w: Tensor {
                        shape: vec![co, ci, 3, 3],
                        data,
                    },
                    b: vec![0.0; co],
                    opt_w: AdamState::new(n),
                    opt_b: AdamState::new(co),
                }
            })
            .collect();
        Ok(SrModel { cfg, layers })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Exact count of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::n_params).sum()
    }

    /// All parameters in declaration order: per layer, kernel then bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Overwrite all parameters from `flatten_params` order. Optimizer
    /// state is not part of the flat vector and is left untouched.
    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "parameter blob has {} values, model needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        if let Some(bad) = flat.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter blob contains {bad}")));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    // Output channel -> input channel feeding its bicubic skip, if any.
    // Channels without a geometric counterpart in the input ride on a
    // zero skip and must be learned outright.
    fn skip_map(&self) -> Vec<Option<usize>> {
        match (self.cfg.input, self.cfg.head) {
            (InputMode::Pncc, HeadMode::Xyz) => vec![Some(0), Some(1), Some(2)],
            (InputMode::Pncc, HeadMode::Z) => vec![Some(2)],
            (InputMode::Depth, HeadMode::Z) => vec![Some(0)],
            (InputMode::Depth, HeadMode::Xyz) => vec![None, None, Some(0)],
        }
    }

    // Bicubic r× upsample of the skip-mapped input channels; unmapped
    // output channels stay zero.
    fn skip_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x.rank3("model input")?;
        let r = self.cfg.r;
        let (oh, ow) = (h * r, w * r);
        let map = self.skip_map();
        let mut out = vec![0.0; map.len() * oh * ow];
        let spec = ResampleSpec::upsample(r)?;
        for (oc, src) in map.iter().enumerate() {
            if let Some(ic) = src {
                let plane = &x.data[ic * h * w..(ic + 1) * h * w];
                let (up, uw, uh) = resample::bicubic_resize(plane, w, h, 1, &spec)?;
                debug_assert_eq!((uw, uh), (ow, oh));
                out[oc * oh * ow..(oc + 1) * oh * ow].copy_from_slice(&up);
            }
        }
        Tensor::new(vec![map.len(), oh, ow], out)
    }

    /// Forward pass on a raw input tensor: conv+ReLU stack, final conv,
    /// periodic rearrangement, plus the bicubic skip.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (c, _, _) = x.rank3("model input")?;
        if c != self.cfg.input.in_channels() {
            return Err(Error::State(format!(
                "model consumes {} input channels, got {c}",
                self.cfg.input.in_channels()
            )));
        }
        let mut h = x.clone();
        for (li, l) in self.layers.iter().enumerate() {
            h = conv2d_forward(&h, &l.w, &l.b)?;
            if li + 1 < self.layers.len() {
                h = relu(&h);
            }
        }
        let up = pixel_shuffle(&h, self.cfg.r)?;
        let skip = self.skip_tensor(x)?;
        debug_assert_eq!(up.shape(), skip.shape());
        let mut out = up;
        for (v, s) in out.data.iter_mut().zip(&skip.data) {
            *v += s;
        }
        out.debug_check("forward_tensor");
        Ok(out)
    }

    // Forward keeping pre-activations for the backward pass.
    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        let mut h = x.clone();
        for (li, l) in self.layers.iter().enumerate() {
            let pre = conv2d_forward(&h, &l.w, &l.b)?;
            h = if li + 1 < self.layers.len() {
                relu(&pre)
            } else {
                pre.clone()
            };
            acts.push(pre);
        }
        let up = pixel_shuffle(&h, self.cfg.r)?;
        let skip = self.skip_tensor(x)?;
        let mut out = up;
        for (v, s) in out.data.iter_mut().zip(&skip.data) {
            *v += s;
        }
        Ok((out, acts))
    }

    // Gradients of a scalar loss wrt every layer, given d(loss)/d(output).
    // The skip path is parameter-free, so it only matters for grad wrt the
    // input, which training never uses.
    fn backward(&self, acts: &[Tensor], grad_out: &Tensor) -> Result<Vec<(Tensor, Vec<f64>)>> {
        let mut grads: Vec<Option<(Tensor, Vec<f64>)>> = (0..self.layers.len()).map(|_| None).collect();
        let mut g = pixel_unshuffle(grad_out, self.cfg.r)?;
        for li in (0..self.layers.len()).rev() {
            // acts[li] is this layer's input (post-activation of the
            // previous one), acts[li + 1] its pre-activation output.
            let input = if li == 0 {
                acts[0].clone()
            } else {
                relu(&acts[li])
            };
            let (gx, gw, gb) = conv2d_backward(&input, &self.layers[li].w, &g)?;
            grads[li] = Some((gw, gb));
            g = if li == 0 {
                gx
            } else {
                relu_backward(&acts[li], &gx)?
            };
        }
        Ok(grads.into_iter().map(|g| g.expect("filled in loop")).collect())
    }

    fn apply_grads(&mut self, grads: &[(Tensor, Vec<f64>)], scale: f64, lr: f64) -> Result<()> {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            let gw_scaled: Vec<f64> = gw.data().iter().map(|g| g * scale).collect();
            let gb_scaled: Vec<f64> = gb.iter().map(|g| g * scale).collect();
            adam_step(l.w.data_mut(), &gw_scaled, &mut l.opt_w, lr)?;
            adam_step(&mut l.b, &gb_scaled, &mut l.opt_b, lr)?;
        }
        Ok(())
    }

    // Input tensor for one scene according to the input mode. The depth
    // mode feeds the normalized depth plane only.
    fn input_tensor(&self, img: &PnccImage) -> Result<Tensor> {
        let (w, h) = (img.width(), img.height());
        let data = match self.cfg.input {
            InputMode::Pncc => img.channels().to_vec(),
            InputMode::Depth => img.channel(2).to_vec(),
        };
        Tensor::new(vec![self.cfg.input.in_channels(), h, w], data)
    }

    // Target tensor for one scene according to the head mode.
    fn target_tensor(&self, img: &PnccImage) -> Result<Tensor> {
        let (w, h) = (img.width(), img.height());
        let data = match self.cfg.head {
            HeadMode::Xyz => img.channels().to_vec(),
            HeadMode::Z => img.channel(2).to_vec(),
        };
        Tensor::new(vec![self.cfg.head.out_channels(), h, w], data)
    }

    /// Run the model on a degraded image and wrap the result as a
    /// full-resolution image carrying the input's normalization.
    ///
    /// The Z head predicts one normalized depth plane; its X and Y are
    /// reconstructed by un-normalizing the depth and projecting through
    /// the full-resolution camera, which pins every predicted point to
    /// its pixel ray.
    pub fn predict(&self, lr: &PnccImage, hr_intr: &Intrinsics) -> Result<PnccImage> {
        let params = *lr.norm().ok_or_else(|| {
            Error::State("input image carries no normalization parameters".into())
        })?;
        let r = self.cfg.r;
        let (lw, lh) = (lr.width(), lr.height());
        let (hw, hh) = (lw * r, lh * r);
        if !hr_intr.matches_resolution(hw, hh) {
            return Err(Error::InvalidArgument(format!(
                "intrinsics are for {}x{} but the upscaled output is {hw}x{hh}",
                hr_intr.width, hr_intr.height
            )));
        }
        let x = self.input_tensor(lr)?;
        let y = self.forward_tensor(&x)?;
        let n = hw * hh;
        let channels = match self.cfg.head {
            HeadMode::Xyz => y.data,
            HeadMode::Z => {
                let mut ch = vec![0.0; 3 * n];
                for v in 0..hh {
                    for u in 0..hw {
                        let i = v * hw + u;
                        let b = y.data[i];
                        // Un-normalize to metric depth, project, and
                        // re-normalize; B itself passes through untouched.
                        let d = params.depth_from_b(b);
                        let px = (u as f64 - hr_intr.cx) * d / (hr_intr.fx * params.s);
                        let py = (v as f64 - hr_intr.cy) * d / (hr_intr.fy * params.s);
                        ch[i] = (px - params.offset[0]) / params.scale;
                        ch[n + i] = (py - params.offset[1]) / params.scale;
                        ch[2 * n + i] = b;
                    }
                }
                ch
            }
        };
        PnccImage::from_parts(hw, hh, channels, vec![true; n], Some(params))
    }

    /// Mean full-image loss over a dataset with the current parameters.
    pub fn dataset_loss(&self, data: &[ScenePair]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("dataset is empty".into()));
        }
        let mut sum = 0.0;
        for pair in data {
            let x = self.input_tensor(&pair.lr)?;
            let y = self.forward_tensor(&x)?;
            let t = self.target_tensor(&pair.hr)?;
            let (loss, _) = charbonnier_loss(&y, &t, pair.hr.valid(), self.cfg.charbonnier_eps)?;
            sum += loss;
        }
        Ok(sum / data.len() as f64)
    }

    /// Seeded minibatch training. Scene order is reshuffled every epoch
    /// and square patches are drawn per sample; every random draw comes
    /// from one sequential generator, so a (seed, config, dataset) triple
    /// fixes the trained parameters bit-for-bit.
    ///
    /// The returned curve holds the full-dataset loss before training and
    /// after each epoch (epochs + 1 entries).
    pub fn train(&mut self, data: &[ScenePair]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let cfg = self.cfg;
        let (lw, lh) = (data[0].lr.width(), data[0].lr.height());
        for (i, pair) in data.iter().enumerate() {
            if pair.lr.width() != lw || pair.lr.height() != lh {
                return Err(Error::InvalidArgument(format!(
                    "scene {i} is {}x{}, expected {lw}x{lh}: training needs one input size",
                    pair.lr.width(),
                    pair.lr.height()
                )));
            }
            if pair.hr.width() != lw * cfg.r || pair.hr.height() != lh * cfg.r {
                return Err(Error::InvalidArgument(format!(
                    "scene {i} target is {}x{}, expected the input size times {}",
                    pair.hr.width(),
                    pair.hr.height(),
                    cfg.r
                )));
            }
        }
        let patch = cfg.patch.min(lw).min(lh);
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();

        let mut curve = Vec::with_capacity(cfg.epochs + 1);
        curve.push(self.dataset_loss(data)?);

        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                // Accumulate mean gradients over the chunk.
                let mut acc: Option<Vec<(Tensor, Vec<f64>)>> = None;
                let mut batch_loss = 0.0;
                for &si in chunk {
                    let pair = &data[si];
                    let (x, t, mask) = sample_patch(self, pair, patch, &mut rng)?;
                    let (y, acts) = self.forward_cached(&x)?;
                    let (loss, grad) = charbonnier_loss(&y, &t, &mask, cfg.charbonnier_eps)?;
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!("training loss became {loss}")));
                    }
                    batch_loss += loss;
                    let grads = self.backward(&acts, &grad)?;
                    match &mut acc {
                        None => acc = Some(grads),
                        Some(a) => {
                            for ((aw, ab), (gw, gb)) in a.iter_mut().zip(&grads) {
                                for (x, y) in aw.data_mut().iter_mut().zip(gw.data()) {
                                    *x += y;
                                }
                                for (x, y) in ab.iter_mut().zip(gb) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                let _ = batch_loss;
                let grads = acc.expect("chunks are non-empty");
                self.apply_grads(&grads, 1.0 / chunk.len() as f64, cfg.lr)?;
            }
            curve.push(self.dataset_loss(data)?);
        }
        Ok(curve)
    }
}

/// The bicubic reference predictor: upsample all three channels r× and
/// keep the input's normalization. A zero-initialized XYZ model reproduces
/// this bit-for-bit, which is what anchors "training starts at bicubic".
pub fn bicubic_baseline(lr: &PnccImage, r: usize) -> Result<PnccImage> {
    let spec = ResampleSpec::upsample(r)?;
    let (up, ow, oh) = resample::bicubic_resize(lr.channels(), lr.width(), lr.height(), 3, &spec)?;
    PnccImage::from_parts(ow, oh, up, vec![true; ow * oh], lr.norm().copied())
}

// Draw one training patch: input crop, target crop, target-mask crop.
// Rejects patches whose target mask is all invalid, retrying nearby and
// falling back to the full frame (guaranteed non-empty by construction).
fn sample_patch(
    model: &SrModel,
    pair: &ScenePair,
    patch: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let cfg = model.config();
    let (lw, lh) = (pair.lr.width(), pair.lr.height());
    let r = cfg.r;
    for _ in 0..20 {
        let u0 = if lw > patch { rng.gen_range(0..=lw - patch) } else { 0 };
        let v0 = if lh > patch { rng.gen_range(0..=lh - patch) } else { 0 };
        let (hu0, hv0, hp) = (u0 * r, v0 * r, patch * r);
        let mask = crop_mask(pair.hr.valid(), pair.hr.width(), hu0, hv0, hp, hp);
        if !mask.iter().any(|&b| b) {
            continue;
        }
        let x = crop_tensor(&model.input_tensor(&pair.lr)?, u0, v0, patch, patch)?;
        let t = crop_tensor(&model.target_tensor(&pair.hr)?, hu0, hv0, hp, hp)?;
        return Ok((x, t, mask));
    }
    // Degenerate masks land here; the scene builder guarantees the full
    // frame has valid pixels.
    let x = model.input_tensor(&pair.lr)?;
    let t = model.target_tensor(&pair.hr)?;
    Ok((x, t, pair.hr.valid().to_vec()))
}

fn crop_tensor(t: &Tensor, u0: usize, v0: usize, cw: usize, ch: usize) -> Result<Tensor> {
    let (c, _h, w) = t.rank3("crop input")?;
    let mut out = vec![0.0; c * cw * ch];
    for cc in 0..c {
        for y in 0..ch {
            let src = &t.data()[cc * _h * w + (v0 + y) * w + u0..][..cw];
            out[cc * cw * ch + y * cw..cc * cw * ch + y * cw + cw].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

fn crop_mask(mask: &[bool], w: usize, u0: usize, v0: usize, cw: usize, ch: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        out.extend_from_slice(&mask[(v0 + y) * w + u0..(v0 + y) * w + u0 + cw]);
    }
    out
}
