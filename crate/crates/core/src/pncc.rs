//! The reversible normalized-coordinate image codec.
//!
//! `encode` backprojects a depth map through the camera, divides by the
//! metric pre-scale `s`, shifts each axis by its minimum and divides all
//! three axes by one shared scale (the largest axis extent), storing
//! X, Y, Z in the R, G, B planes. A single shared scale keeps the relative
//! axis extents intact, so decoded geometry is never stretched. Invalid
//! pixels are filled from their nearest valid neighbor to keep the image
//! smooth for downstream filtering; the validity mask still marks them as
//! holes, and decode honors the mask, not the filled values.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, PointCloud};
use serde::{Deserialize, Serialize};

/// Default metric pre-scale of the coordinate encoding, in meters. Chosen
/// as an indoor-sensor max range so typical desk scenes use a good chunk
/// of the unit cube.
pub const DEFAULT_PRESCALE: f64 = 10.0;

/// Axis extents at or below this are treated as zero (all points
/// coincide on that axis for any realistic camera).
const DEGENERATE_EXTENT: f64 = 1e-12;

/// Invertible mapping between metric camera coordinates and channel values.
///
/// `offset` and `scale` act in the divided-by-`s` domain:
/// channel = (coord/s − offset) / scale, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    /// Per-axis minimum of the observed coordinates, divided by `s`.
    pub offset: [f64; 3],
    /// One shared positive scale: the largest per-axis extent.
    pub scale: f64,
    /// Metric pre-scale from Eq-style coordinates to normalized ones.
    pub s: f64,
    /// Set when the observed extent was zero and `scale` was forced to 1.
    pub degenerate: bool,
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "normalization scale must be finite and positive, got {}",
                self.scale
            )));
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pre-scale s must be finite and positive, got {}",
                self.s
            )));
        }
        if let Some(o) = self.offset.iter().find(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "normalization offset must be finite, got {o}"
            )));
        }
        Ok(())
    }

    /// Metric point -> channel triple.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] / self.s - self.offset[0]) / self.scale,
            (p[1] / self.s - self.offset[1]) / self.scale,
            (p[2] / self.s - self.offset[2]) / self.scale,
        ]
    }

    /// Channel triple -> metric point. Exact algebraic inverse of
    /// `normalize` up to float rounding.
    pub fn un_normalize(&self, c: [f64; 3]) -> [f64; 3] {
        [
            (c[0] * self.scale + self.offset[0]) * self.s,
            (c[1] * self.scale + self.offset[1]) * self.s,
            (c[2] * self.scale + self.offset[2]) * self.s,
        ]
    }

    /// Depth in meters from the blue-channel value alone.
    pub fn depth_from_b(&self, b: f64) -> f64 {
        (b * self.scale + self.offset[2]) * self.s
    }

    /// Blue-channel value for a depth in meters.
    pub fn b_from_depth(&self, d: f64) -> f64 {
        (d / self.s - self.offset[2]) / self.scale
    }
}

/// A normalized-coordinate image: three planar channels (R = X, G = Y,
/// B = Z), a validity mask, and optionally the normalization that produced
/// it. Images built by `encode` have every channel value in [0, 1]; images
/// normalized with externally supplied parameters (shared across a scene
/// pair) or produced by a network may exceed that range slightly.
#[derive(Debug, Clone, PartialEq)]
pub struct PnccImage {
    width: usize,
    height: usize,
    /// 3 × H × W planar storage, R plane first.
    channels: Vec<f64>,
    valid: Vec<bool>,
    norm: Option<NormalizationParams>,
}

impl PnccImage {
    pub fn from_parts(
        width: usize,
        height: usize,
        channels: Vec<f64>,
        valid: Vec<bool>,
        norm: Option<NormalizationParams>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        let n = width * height;
        if channels.len() != 3 * n || valid.len() != n {
            return Err(Error::InvalidArgument(format!(
                "storage length mismatch: {width}x{height} needs {} channel values and {n} mask entries, got {} and {}",
                3 * n,
                channels.len(),
                valid.len()
            )));
        }
        if let Some(bad) = channels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "channel values must be finite, got {bad}"
            )));
        }
        if let Some(p) = &norm {
            p.validate()?;
        }
        Ok(PnccImage {
            width,
            height,
            channels,
            valid,
            norm,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar channel data, R plane then G then B.
    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.channels[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn value(&self, c: usize, u: usize, v: usize) -> f64 {
        self.channels[c * self.width * self.height + v * self.width + u]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn norm(&self) -> Option<&NormalizationParams> {
        self.norm.as_ref()
    }

    fn require_norm(&self) -> Result<&NormalizationParams> {
        self.norm.as_ref().ok_or_else(|| {
            Error::State("image carries no normalization parameters; decoding is undefined".into())
        })
    }

    /// Un-normalize the blue channel back to metric depth. Valid pixels get
    /// d = (B·scale + o_z)·s; invalid pixels get the 0.0 sentinel.
    ///
    /// Codec-produced channels always decode positive, but a network
    /// prediction can undershoot; pixels whose decoded depth is not
    /// positive are marked invalid rather than rejected, since they carry
    /// no usable depth.
    pub fn decode_depth(&self) -> Result<DepthMap> {
        let p = self.require_norm()?;
        let n = self.width * self.height;
        let b = &self.channels[2 * n..3 * n];
        let mut data = vec![0.0; n];
        let mut valid = self.valid.clone();
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let d = p.depth_from_b(b[i]);
            if d > 0.0 && d.is_finite() {
                data[i] = d;
            } else {
                valid[i] = false;
            }
        }
        DepthMap::from_parts(self.width, self.height, data, valid)
    }

    /// Un-normalize all three channels into one metric point per valid
    /// pixel, in row-major pixel order. Invalid pixels are skipped, so an
    /// all-invalid image decodes to an empty cloud.
    pub fn decode_pointcloud(&self) -> Result<PointCloud> {
        let p = self.require_norm()?;
        let n = self.width * self.height;
        let mut points = Vec::with_capacity(self.valid_count());
        for i in 0..n {
            if !self.valid[i] {
                continue;
            }
            points.push(p.un_normalize([
                self.channels[i],
                self.channels[n + i],
                self.channels[2 * n + i],
            ]));
        }
        PointCloud::new(points)
    }
}

// Raw Eq-style coordinates (x, y, z)/s per valid pixel, planar, plus the
// per-axis (min, max) over valid pixels.
fn raw_coords(d: &DepthMap, intr: &Intrinsics, s: f64) -> (Vec<f64>, [f64; 3], [f64; 3]) {
    let (w, h) = (d.width(), d.height());
    let n = w * h;
    let mut raw = vec![0.0; 3 * n];
    let mut mins = [f64::INFINITY; 3];
    let mut maxs = [f64::NEG_INFINITY; 3];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !d.valid()[i] {
                continue;
            }
            let depth = d.data()[i];
            let p = [
                (u as f64 - intr.cx) * depth / (intr.fx * s),
                (v as f64 - intr.cy) * depth / (intr.fy * s),
                depth / s,
            ];
            for c in 0..3 {
                raw[c * n + i] = p[c];
                mins[c] = mins[c].min(p[c]);
                maxs[c] = maxs[c].max(p[c]);
            }
        }
    }
    (raw, mins, maxs)
}

fn normalize_and_fill(
    mut raw: Vec<f64>,
    d: &DepthMap,
    params: NormalizationParams,
) -> Result<PnccImage> {
    let (w, h) = (d.width(), d.height());
    let n = w * h;
    for c in 0..3 {
        for i in 0..n {
            if d.valid()[i] {
                raw[c * n + i] = (raw[c * n + i] - params.offset[c]) / params.scale;
            }
        }
    }
    fill_invalid(&mut raw, 3, w, h, d.valid())?;
    PnccImage::from_parts(w, h, raw, d.valid().to_vec(), Some(params))
}

/// Encode a depth map into a normalized-coordinate image.
///
/// Per-axis minima become the offset and the largest axis extent becomes
/// the one shared scale, so every channel lands in [0, 1] and relative
/// extents are preserved. If all observed points coincide the scale is
/// forced to 1 and flagged. Invalid pixels are filled from their nearest
/// valid neighbor after normalization.
pub fn encode(d: &DepthMap, intr: &Intrinsics, s: f64) -> Result<PnccImage> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "pre-scale s must be finite and positive, got {s}"
        )));
    }
    if !intr.matches_resolution(d.width(), d.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{} but depth map is {}x{}",
            intr.width,
            intr.height,
            d.width(),
            d.height()
        )));
    }
    if d.valid_count() == 0 {
        return Err(Error::EmptyInput("cannot encode a depth map with zero valid pixels".into()));
    }
    let (raw, mins, maxs) = raw_coords(d, intr, s);
    let extent = (0..3).map(|c| maxs[c] - mins[c]).fold(0.0, f64::max);
    let (scale, degenerate) = if extent > DEGENERATE_EXTENT {
        (extent, false)
    } else {
        (1.0, true)
    };
    let params = NormalizationParams {
        offset: mins,
        scale,
        s,
        degenerate,
    };
    normalize_and_fill(raw, d, params)
}

/// Encode with externally supplied normalization instead of deriving it,
/// so two images of the same scene (a degraded input and its target) can
/// share one parameter set and be compared channel-for-channel. Values are
/// only guaranteed to land in [0, 1] when the parameters bound the
/// observed geometry.
pub fn encode_with_params(d: &DepthMap, intr: &Intrinsics, params: &NormalizationParams) -> Result<PnccImage> {
    params.validate()?;
    if !intr.matches_resolution(d.width(), d.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{} but depth map is {}x{}",
            intr.width,
            intr.height,
            d.width(),
            d.height()
        )));
    }
    if d.valid_count() == 0 {
        return Err(Error::EmptyInput("cannot encode a depth map with zero valid pixels".into()));
    }
    let (raw, _, _) = raw_coords(d, intr, params.s);
    normalize_and_fill(raw, d, *params)
}

/// Overwrite every invalid pixel of a planar multi-channel image with the
/// channel values of its nearest valid pixel (Euclidean pixel distance;
/// ties go to the valid pixel first in row-major order, smallest v then
/// smallest u). Valid pixels are never modified.
///
/// The search is exact: a per-column nearest-valid-row table reduces each
/// query to one candidate per column, O(W) per filled pixel. Integer
/// arithmetic throughout, so results are identical on every platform.
pub fn fill_invalid(
    channels: &mut [f64],
    n_channels: usize,
    width: usize,
    height: usize,
    valid: &[bool],
) -> Result<()> {
    let n = width * height;
    if n == 0 || valid.len() != n || n_channels == 0 || channels.len() != n_channels * n {
        return Err(Error::InvalidArgument(format!(
            "fill storage mismatch: {n_channels} channels of {width}x{height} vs {} values, {} mask entries",
            channels.len(),
            valid.len()
        )));
    }
    let n_valid = valid.iter().filter(|&&b| b).count();
    if n_valid == 0 {
        return Err(Error::EmptyInput("cannot fill an image with zero valid pixels".into()));
    }
    if n_valid == n {
        return Ok(());
    }

    let src = nearest_valid_map(valid, width, height);
    for c in 0..n_channels {
        let plane = &mut channels[c * n..(c + 1) * n];
        for i in 0..n {
            if !valid[i] {
                plane[i] = plane[src[i]];
            }
        }
    }
    Ok(())
}

// For every pixel, the linear index of its nearest valid pixel under the
// documented metric and tie rule (valid pixels map to themselves).
fn nearest_valid_map(valid: &[bool], width: usize, height: usize) -> Vec<usize> {
    const NONE: usize = usize::MAX;

    // Per column u: the valid row nearest to each row v, ties to the
    // smaller row. Column-major table, NONE marks empty columns.
    let mut col_near = vec![NONE; width * height];
    let mut up = vec![NONE; height];
    let mut down = vec![NONE; height];
    for u in 0..width {
        let mut last = NONE;
        for v in 0..height {
            if valid[v * width + u] {
                last = v;
            }
            up[v] = last;
        }
        last = NONE;
        for v in (0..height).rev() {
            if valid[v * width + u] {
                last = v;
            }
            down[v] = last;
        }
        for v in 0..height {
            col_near[u * height + v] = match (up[v], down[v]) {
                (NONE, NONE) => NONE,
                (a, NONE) => a,
                (NONE, b) => b,
                // Equidistant above/below: the smaller row wins.
                (a, b) => {
                    if v - a <= b - v {
                        a
                    } else {
                        b
                    }
                }
            };
        }
    }

    let mut src = vec![0usize; width * height];
    for vt in 0..height {
        for ut in 0..width {
            let i = vt * width + ut;
            if valid[i] {
                src[i] = i;
                continue;
            }
            // One candidate per column; lexicographic (d², v′, u′) min
            // realizes the row-major tie rule exactly.
            let mut best = (i64::MAX, usize::MAX, usize::MAX);
            for us in 0..width {
                let vs = col_near[us * height + vt];
                if vs == NONE {
                    continue;
                }
                let du = us as i64 - ut as i64;
                let dv = vs as i64 - vt as i64;
                let cand = (du * du + dv * dv, vs, us);
                if cand < best {
                    best = cand;
                }
            }
            src[i] = best.1 * width + best.2;
        }
    }
    src
}
