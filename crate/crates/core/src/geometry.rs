//! Core domain types and pinhole-camera backprojection.
//!
//! All depths are metric meters. Pixel (u, v) sits at continuous position
//! (u, v) — no half-pixel offset — so the backprojection of pixel (u, v)
//! with depth d is ((u - cx)·d/fx, (v - cy)·d/fy, d).

use crate::error::{Error, Result};

/// Pinhole parameters tagged with the resolution they are valid for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be finite and positive, got fx={fx}, fy={fy}"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "principal point must be finite, got cx={cx}, cy={cy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Rescale to a new resolution: fx, cx scale by target_w/width and
    /// fy, cy by target_h/height. Rescaling by k then 1/k restores every
    /// field to within one ulp.
    pub fn rescaled(&self, target_w: usize, target_h: usize) -> Result<Intrinsics> {
        if target_w == 0 || target_h == 0 {
            return Err(Error::InvalidArgument(format!(
                "target resolution must be at least 1x1, got {target_w}x{target_h}"
            )));
        }
        let kx = target_w as f64 / self.width as f64;
        let ky = target_h as f64 / self.height as f64;
        Ok(Intrinsics {
            fx: self.fx * kx,
            fy: self.fy * ky,
            cx: self.cx * kx,
            cy: self.cy * ky,
            width: target_w,
            height: target_h,
        })
    }

    pub fn matches_resolution(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// H×W grid of metric depths plus a validity mask.
///
/// The mask is authoritative: invalid pixels carry the sentinel depth 0.0,
/// and no operation ever reads the depth value of an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Build from raw row-major storage. Valid pixels must carry finite
    /// positive depth; invalid pixels are forced to the 0.0 sentinel
    /// regardless of the supplied value.
    pub fn from_parts(width: usize, height: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "depth map must be at least 1x1, got {width}x{height}"
            )));
        }
        let n = width * height;
        if data.len() != n || valid.len() != n {
            return Err(Error::InvalidArgument(format!(
                "storage length mismatch: {}x{} needs {} values, got data={}, valid={}",
                width,
                height,
                n,
                data.len(),
                valid.len()
            )));
        }
        let mut data = data;
        for (i, (d, &ok)) in data.iter_mut().zip(&valid).enumerate() {
            if !ok {
                *d = 0.0;
            } else if !(*d > 0.0) || !d.is_finite() {
                return Err(Error::Range(format!(
                    "valid pixel ({}, {}) must have finite positive depth, got {}",
                    i % width,
                    i / width,
                    *d
                )));
            }
        }
        Ok(DepthMap {
            width,
            height,
            data,
            valid,
        })
    }

    /// Per-pixel construction; `f(u, v)` returns `Some(depth)` for valid
    /// pixels and `None` for invalid ones.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Result<Self> {
        let mut data = vec![0.0; width * height];
        let mut valid = vec![false; width * height];
        for v in 0..height {
            for u in 0..width {
                if let Some(d) = f(u, v) {
                    data[v * width + u] = d;
                    valid[v * width + u] = true;
                }
            }
        }
        DepthMap::from_parts(width, height, data, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn depth(&self, u: usize, v: usize) -> f64 {
        self.data[self.idx(u, v)]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[self.idx(u, v)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// Unordered list of metric XYZ points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Numeric(format!(
                "point cloud must contain finite coordinates only, got {p:?}"
            )));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Backproject every valid pixel of `d` through `intr`, in row-major pixel
/// order. Invalid pixels are skipped, so the output has exactly one point
/// per valid pixel.
pub fn backproject(d: &DepthMap, intr: &Intrinsics) -> Result<PointCloud> {
    if !intr.matches_resolution(d.width(), d.height()) {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are for {}x{} but depth map is {}x{}",
            intr.width,
            intr.height,
            d.width(),
            d.height()
        )));
    }
    let mut points = Vec::with_capacity(d.valid_count());
    for v in 0..d.height() {
        for u in 0..d.width() {
            if !d.is_valid(u, v) {
                continue;
            }
            let depth = d.depth(u, v);
            points.push([
                (u as f64 - intr.cx) * depth / intr.fx,
                (v as f64 - intr.cy) * depth / intr.fy,
                depth,
            ]);
        }
    }
    PointCloud::new(points)
}
