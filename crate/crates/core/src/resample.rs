//! Bicubic resizing of scalar and multi-channel images, and min-pool
//! downsampling of validity masks.
//!
//! The resizer is a separable cubic-convolution filter with kernel
//! parameter a = -0.5 (Catmull-Rom), cell-center coordinate mapping
//! (src = (dst + 0.5) * in/out - 0.5) and replicate-clamped borders.
//! When an axis shrinks, the kernel support is widened by the inverse
//! scale and the weights renormalized, so heavy downsampling stays
//! anti-aliased. Each output sample is evaluated in anchored difference
//! form, out = v_anchor + sum w_j * (v_j - v_anchor), which preserves
//! constant inputs bit-exactly.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics};
use crate::pncc;

/// Kernel parameter for Catmull-Rom cubic interpolation.
pub const CATMULL_ROM_A: f64 = -0.5;

/// Scale factors supported by the degradation pipeline.
pub const SUPPORTED_SCALES: [usize; 3] = [4, 8, 16];

/// Resize factor plus the cubic-convolution free parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleSpec {
    /// Output size = round(input * factor), per axis.
    pub factor: f64,
    /// Cubic-convolution kernel parameter.
    pub a: f64,
}

impl ResampleSpec {
    pub fn new(factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "resample factor must be finite and positive, got {factor}"
            )));
        }
        Ok(ResampleSpec {
            factor,
            a: CATMULL_ROM_A,
        })
    }

    /// Exact 1/r downsample.
    pub fn downsample(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
        }
        ResampleSpec::new(1.0 / r as f64)
    }

    /// Exact r-times upsample.
    pub fn upsample(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        ResampleSpec::new(r as f64)
    }

    pub fn output_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let ow = (width as f64 * self.factor).round() as usize;
        let oh = (height as f64 * self.factor).round() as usize;
        if ow == 0 || oh == 0 {
            return Err(Error::InvalidArgument(format!(
                "factor {} maps {}x{} to a zero-sized output",
                self.factor, width, height
            )));
        }
        Ok((ow, oh))
    }
}

/// The cubic-convolution kernel with free parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// The four tap weights at fractional phase `t` in [0, 1), for taps at
/// offsets -1, 0, 1, 2 from the integer base sample.
pub fn cubic_taps(t: f64, a: f64) -> [f64; 4] {
    [
        cubic_kernel(1.0 + t, a),
        cubic_kernel(t, a),
        cubic_kernel(1.0 - t, a),
        cubic_kernel(2.0 - t, a),
    ]
}

/// One output sample along an axis: tap weights relative to base index
/// `lo` (stored by the caller), the anchor tap, and the raw weight sum.
struct TapSet {
    weights: Vec<f64>,
    anchor: usize,
    weight_sum: f64,
}

// Source indices outside [0, in_dim) replicate the border sample.
fn apply_taps(src: &[f64], stride: usize, offset: usize, in_dim: usize, taps: &TapSet, lo: isize) -> f64 {
    let fetch = |j: isize| -> f64 {
        let idx = j.clamp(0, in_dim as isize - 1) as usize;
        src[offset + idx * stride]
    };
    let anchor_val = fetch(lo + taps.anchor as isize);
    let mut acc = 0.0;
    for (k, &w) in taps.weights.iter().enumerate() {
        if k == taps.anchor {
            continue;
        }
        acc += w * (fetch(lo + k as isize) - anchor_val);
    }
    anchor_val + acc / taps.weight_sum
}

/// Resize a single H×W plane to out_w × out_h.
pub fn bicubic_resize_plane(
    src: &[f64],
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
    a: f64,
) -> Result<Vec<f64>> {
    if width == 0 || height == 0 || src.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "plane storage mismatch: {}x{} vs {} values",
            width,
            height,
            src.len()
        )));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("zero-sized resize output".into()));
    }
    if let Some(bad) = src.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "resize input must be finite, found {bad}"
        )));
    }

    // Tap positions are recomputed with their unclamped base so apply_taps
    // can clamp per fetch; keep (lo, taps) pairs together.
    let plan = |in_dim: usize, out_dim: usize| -> Vec<(isize, TapSet)> {
        let ratio = in_dim as f64 / out_dim as f64;
        let scale = (out_dim as f64 / in_dim as f64).min(1.0);
        let radius = 2.0 / scale;
        (0..out_dim)
            .map(|dst| {
                let src_pos = (dst as f64 + 0.5) * ratio - 0.5;
                let lo = (src_pos - radius).ceil() as isize;
                let hi = (src_pos + radius).floor() as isize;
                let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
                let mut weight_sum = 0.0;
                for j in lo..=hi {
                    let w = cubic_kernel((j as f64 - src_pos) * scale, a);
                    weights.push(w);
                    weight_sum += w;
                }
                let anchor_idx = (src_pos.round() as isize).clamp(lo, hi);
                (
                    lo,
                    TapSet {
                        weights,
                        anchor: (anchor_idx - lo) as usize,
                        weight_sum,
                    },
                )
            })
            .collect()
    };

    // Horizontal pass: width -> out_w, height rows unchanged.
    let h_plan = plan(width, out_w);
    let mut tmp = vec![0.0; out_w * height];
    for row in 0..height {
        for (x, (lo, taps)) in h_plan.iter().enumerate() {
            tmp[row * out_w + x] = apply_taps(src, 1, row * width, width, taps, *lo);
        }
    }

    // Vertical pass: height -> out_h over out_w columns.
    let v_plan = plan(height, out_h);
    let mut out = vec![0.0; out_w * out_h];
    for (y, (lo, taps)) in v_plan.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = apply_taps(&tmp, out_w, x, height, taps, *lo);
        }
    }
    Ok(out)
}

/// Resize a planar C×H×W image. Channels are resized independently with the
/// same plan, so stacking commutes with resizing bit-for-bit.
pub fn bicubic_resize(
    src: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    spec: &ResampleSpec,
) -> Result<(Vec<f64>, usize, usize)> {
    if channels == 0 || src.len() != channels * width * height {
        return Err(Error::InvalidArgument(format!(
            "planar storage mismatch: {channels}x{height}x{width} vs {} values",
            src.len()
        )));
    }
    let (out_w, out_h) = spec.output_dims(width, height)?;
    let plane = width * height;
    let mut out = Vec::with_capacity(channels * out_w * out_h);
    for c in 0..channels {
        let resized = bicubic_resize_plane(&src[c * plane..(c + 1) * plane], width, height, out_w, out_h, spec.a)?;
        out.extend_from_slice(&resized);
    }
    Ok((out, out_w, out_h))
}

/// Min-pool a validity mask by integer factor `r`: a low-resolution pixel is
/// valid only when every pixel of its r×r window is valid.
pub fn minpool_mask(valid: &[bool], width: usize, height: usize, r: usize) -> Result<Vec<bool>> {
    if r == 0 {
        return Err(Error::InvalidArgument("pool factor must be >= 1".into()));
    }
    if valid.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "mask storage mismatch: {}x{} vs {} values",
            width,
            height,
            valid.len()
        )));
    }
    if width % r != 0 || height % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "mask dimensions {width}x{height} are not divisible by {r}; crop first"
        )));
    }
    let (lw, lh) = (width / r, height / r);
    let mut out = vec![false; lw * lh];
    for ly in 0..lh {
        for lx in 0..lw {
            let mut all = true;
            'win: for dy in 0..r {
                for dx in 0..r {
                    if !valid[(ly * r + dy) * width + lx * r + dx] {
                        all = false;
                        break 'win;
                    }
                }
            }
            out[ly * lw + lx] = all;
        }
    }
    Ok(out)
}

/// Degrade a high-resolution depth map by integer factor `r`: invalid pixels
/// are filled from their nearest valid neighbor, the filled depth is
/// bicubically downsampled, the mask is min-pooled, and the intrinsics are
/// rescaled to the low resolution.
pub fn make_lr_pair(hr: &DepthMap, intr: &Intrinsics, r: usize) -> Result<(DepthMap, Intrinsics)> {
    if !SUPPORTED_SCALES.contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "scale must be one of {SUPPORTED_SCALES:?}, got {r}"
        )));
    }
    if !intr.matches_resolution(hr.width(), hr.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{} but depth map is {}x{}",
            intr.width,
            intr.height,
            hr.width(),
            hr.height()
        )));
    }
    if hr.width() % r != 0 || hr.height() % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "depth map {}x{} is not divisible by {r}; crop first",
            hr.width(),
            hr.height()
        )));
    }

    let mut filled = hr.data().to_vec();
    pncc::fill_invalid(&mut filled, 1, hr.width(), hr.height(), hr.valid())?;

    let spec = ResampleSpec::downsample(r)?;
    let (lr_data, lw, lh) = bicubic_resize(&filled, hr.width(), hr.height(), 1, &spec)?;
    debug_assert_eq!((lw, lh), (hr.width() / r, hr.height() / r));

    let lr_valid = minpool_mask(hr.valid(), hr.width(), hr.height(), r)?;
    let lr = DepthMap::from_parts(lw, lh, lr_data, lr_valid)?;
    let lr_intr = intr.rescaled(lw, lh)?;
    Ok((lr, lr_intr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn taps_at_half_phase_match_hand_values() {
        // k(1.5), k(0.5), k(0.5), k(1.5) with a = -0.5, evaluated by hand.
        let w = cubic_taps(0.5, CATMULL_ROM_A);
        assert_eq!(w, [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0]);
    }

    #[test]
    fn taps_partition_unity() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let t: f64 = rng.gen();
            let s: f64 = cubic_taps(t, CATMULL_ROM_A).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "phase {t}: sum {s}");
        }
    }

    #[test]
    fn constant_image_stays_constant_any_factor() {
        let src = vec![2.37; 15 * 11];
        for factor in [0.25, 0.4, 1.0, 2.0, 3.7] {
            let spec = ResampleSpec::new(factor).unwrap();
            let (out, ow, oh) = bicubic_resize(&src, 15, 11, 1, &spec).unwrap();
            assert_eq!(out.len(), ow * oh);
            assert!(out.iter().all(|&v| v == 2.37), "factor {factor}");
        }
    }

    #[test]
    fn linear_ramp_reproduced_at_interior_on_2x_upsample() {
        let (w, h) = (16, 4);
        let src: Vec<f64> = (0..w * h).map(|i| (i % w) as f64).collect();
        let spec = ResampleSpec::upsample(2).unwrap();
        let (out, ow, _oh) = bicubic_resize(&src, w, h, 1, &spec).unwrap();
        // src coordinate of out pixel x is x/2 - 0.25; taps stay unclamped
        // for 3 <= x <= 2w-4.
        for x in 3..(2 * w - 4) {
            let expect = x as f64 / 2.0 - 0.25;
            let got = out[ow + x]; // row 1, away from vertical border effects
            assert!((got - expect).abs() < 1e-12, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn resize_rejects_zero_output_and_bad_input() {
        let spec = ResampleSpec::new(0.001).unwrap();
        assert!(bicubic_resize(&vec![1.0; 16], 4, 4, 1, &spec).is_err());
        assert!(ResampleSpec::new(0.0).is_err());
        assert!(ResampleSpec::new(f64::NAN).is_err());
        let spec = ResampleSpec::new(1.0).unwrap();
        assert!(bicubic_resize(&[1.0, f64::NAN, 0.0, 1.0], 2, 2, 1, &spec).is_err());
    }

    #[test]
    fn channel_stacking_commutes_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let (w, h, c) = (13, 9, 3);
        let src: Vec<f64> = (0..c * w * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let spec = ResampleSpec::new(0.5).unwrap();
        let (stacked, ow, oh) = bicubic_resize(&src, w, h, c, &spec).unwrap();
        for ch in 0..c {
            let plane = &src[ch * w * h..(ch + 1) * w * h];
            let (solo, sw, sh) = bicubic_resize(plane, w, h, 1, &spec).unwrap();
            assert_eq!((sw, sh), (ow, oh));
            assert_eq!(solo, stacked[ch * ow * oh..(ch + 1) * ow * oh]);
        }
    }

    // Direct window-AND double loop, the oracle for minpool_mask.
    fn minpool_oracle(valid: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
        let (lw, lh) = (w / r, h / r);
        let mut out = vec![true; lw * lh];
        for y in 0..h {
            for x in 0..w {
                if !valid[y * w + x] {
                    out[(y / r) * lw + x / r] = false;
                }
            }
        }
        out
    }

    #[test]
    fn minpool_all_valid_stays_valid() {
        let m = minpool_mask(&vec![true; 16 * 8], 16, 8, 4).unwrap();
        assert!(m.iter().all(|&b| b));
        assert_eq!(m.len(), 4 * 2);
    }

    #[test]
    fn minpool_single_false_kills_exactly_its_cell() {
        let mut valid = vec![true; 16 * 8];
        valid[3 * 16 + 9] = false; // HR (9,3) -> LR (2,0)
        let m = minpool_mask(&valid, 16, 8, 4).unwrap();
        for (i, &b) in m.iter().enumerate() {
            assert_eq!(b, i != 2, "LR cell {i}");
        }
    }

    #[test]
    fn minpool_matches_window_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..50 {
            let (w, h, r) = (32, 24, 4);
            let valid: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.9)).collect();
            assert_eq!(minpool_mask(&valid, w, h, r).unwrap(), minpool_oracle(&valid, w, h, r));
        }
    }

    #[test]
    fn minpool_rejects_non_divisible() {
        assert!(minpool_mask(&vec![true; 10 * 8], 10, 8, 4).is_err());
    }

    proptest! {
        // Flipping any HR pixel true->false never turns an LR pixel false->true.
        #[test]
        fn minpool_is_monotone(seed in 0u64..500, flip in 0usize..(16 * 8)) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut valid: Vec<bool> = (0..16 * 8).map(|_| rng.gen_bool(0.8)).collect();
            let before = minpool_mask(&valid, 16, 8, 4).unwrap();
            valid[flip] = false;
            let after = minpool_mask(&valid, 16, 8, 4).unwrap();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(!(*a && !*b));
            }
        }
    }

    #[test]
    fn make_lr_pair_constant_depth() {
        let intr = Intrinsics::new(500.0, 500.0, 160.0, 120.0, 320, 240).unwrap();
        let hr = DepthMap::from_fn(320, 240, |_, _| Some(2.0)).unwrap();
        let (lr, lr_intr) = make_lr_pair(&hr, &intr, 4).unwrap();
        assert_eq!((lr.width(), lr.height()), (80, 60));
        assert_eq!(lr_intr.fx, 125.0);
        assert_eq!(lr_intr.cx, 40.0);
        assert!(lr.valid().iter().all(|&b| b));
        assert!(lr.data().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn make_lr_pair_rejects_bad_scale_and_dims() {
        let intr = Intrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
        let hr = DepthMap::from_fn(64, 48, |_, _| Some(1.0)).unwrap();
        assert!(make_lr_pair(&hr, &intr, 3).is_err());
        let intr2 = Intrinsics::new(60.0, 60.0, 30.0, 24.0, 60, 48).unwrap();
        let hr2 = DepthMap::from_fn(60, 48, |_, _| Some(1.0)).unwrap();
        assert!(make_lr_pair(&hr2, &intr2, 8).is_err());
    }

    #[test]
    fn lr_plane_matches_analytic_depth_at_cell_centers() {
        let (w, h, r) = (64, 48, 4);
        let ramp = |u: f64, v: f64| 1.5 + 0.002 * u + 0.001 * v;
        let intr = Intrinsics::new(60.0, 60.0, 32.0, 24.0, w, h).unwrap();
        let hr = DepthMap::from_fn(w, h, |u, v| Some(ramp(u as f64, v as f64))).unwrap();
        let (lr, _) = make_lr_pair(&hr, &intr, r).unwrap();
        // Interior LR pixels: the full antialias window stays inside the
        // image, away from replicate-border bias.
        for vl in 3..(h / r - 3) {
            for ul in 3..(w / r - 3) {
                let (su, sv) = ((ul as f64 + 0.5) * r as f64 - 0.5, (vl as f64 + 0.5) * r as f64 - 0.5);
                let expect = ramp(su, sv);
                let got = lr.depth(ul, vl);
                assert!(
                    (got - expect).abs() < 1e-4,
                    "LR ({ul},{vl}): {got} vs {expect}"
                );
            }
        }
    }
}
