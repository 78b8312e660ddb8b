//! Readers and writers for the on-disk artifacts: 16-bit depth maps,
//! 16-bit quantized coordinate images with a JSON sidecar, ASCII point
//! clouds, camera intrinsics, and model checkpoints.
//!
//! Every writer is deterministic (same value, same bytes) and every
//! reader consumes its input exactly: trailing bytes are an error that
//! names the offset. Byte layouts are frozen in docs/FORMATS.md.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, PointCloud};
use crate::net::{SrModel, TrainConfig};
use crate::pncc::{NormalizationParams, PnccImage};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// 0.1 mm per count: spans 0 to 6.5535 m in 16 bits, comfortably covering
/// desk-scale scenes.
pub const DEFAULT_DEPTH_UNIT_SCALE: f64 = 1e-4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNSR";
pub const CHECKPOINT_VERSION: u16 = 1;

/// The formats this module owns, with their canonical file extensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Depth16,
    Pncc48,
    PlyAscii,
    IntrinsicsJson,
    Checkpoint,
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Depth16 => "pgm",
            FileFormat::Pncc48 => "ppm",
            FileFormat::PlyAscii => "ply",
            FileFormat::IntrinsicsJson => "json",
            FileFormat::Checkpoint => "pnsr",
        }
    }
}

// Byte cursor that remembers where it is, for error offsets.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "unexpected end of file while reading {what}: needed {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_eof(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes after the end of the payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }

    // One ASCII token: skips leading whitespace and '#' comment lines, as
    // the netpbm header grammar allows.
    fn pnm_token(&mut self) -> Result<&'a str> {
        loop {
            match self.buf.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(self.pos as u64, "unexpected end of header")),
            }
        }
        let start = self.pos;
        while let Some(&b) = self.buf.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| Error::format(start as u64, "header token is not ASCII"))
    }

    fn pnm_usize(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        let tok = self.pnm_token()?;
        tok.parse().map_err(|_| {
            Error::format(start as u64, format!("{what} must be a decimal integer, got {tok:?}"))
        })
    }

    // The single whitespace byte separating the maxval from the samples.
    fn pnm_sample_gap(&mut self) -> Result<()> {
        match self.buf.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::format(
                self.pos as u64,
                "expected a whitespace byte before the sample data",
            )),
        }
    }
}

/// Write a depth map as a binary 16-bit graymap: counts of `unit_scale`
/// meters, big-endian, with 0 reserved for invalid pixels.
pub fn write_depth16(path: &Path, d: &DepthMap, unit_scale: f64) -> Result<()> {
    fs::write(path, depth16_bytes(d, unit_scale)?)?;
    Ok(())
}

fn depth16_bytes(d: &DepthMap, unit_scale: f64) -> Result<Vec<u8>> {
    if !(unit_scale > 0.0) || !unit_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "unit scale must be finite and positive, got {unit_scale}"
        )));
    }
    let (w, h) = (d.width(), d.height());
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let count = if d.valid()[i] {
                let c = (d.data()[i] / unit_scale).round();
                if !(c >= 1.0) || c > 65535.0 {
                    return Err(Error::Range(format!(
                        "depth {} m at pixel ({u}, {v}) is outside 1..=65535 counts at {unit_scale} m/count",
                        d.data()[i]
                    )));
                }
                c as u16
            } else {
                0
            };
            out.extend_from_slice(&count.to_be_bytes());
        }
    }
    Ok(out)
}

/// Read a depth map written by `write_depth16`. Counts scale back by
/// `unit_scale`; zero counts become invalid pixels.
pub fn read_depth16(path: &Path, unit_scale: f64) -> Result<DepthMap> {
    if !(unit_scale > 0.0) || !unit_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "unit scale must be finite and positive, got {unit_scale}"
        )));
    }
    let buf = fs::read(path)?;
    let mut cur = Cursor::new(&buf);
    let magic = cur.pnm_token()?;
    if magic != "P5" {
        return Err(Error::format(0, format!("expected a P5 graymap, got magic {magic:?}")));
    }
    let w = cur.pnm_usize("width")?;
    let h = cur.pnm_usize("height")?;
    let maxval = cur.pnm_usize("maxval")?;
    if maxval != 65535 {
        return Err(Error::format(
            cur.pos as u64,
            format!("only 16-bit graymaps are supported (maxval 65535), got {maxval}"),
        ));
    }
    cur.pnm_sample_gap()?;
    let samples = cur.take(w * h * 2, "depth samples")?;
    cur.expect_eof()?;
    let mut data = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        let count = u16::from_be_bytes([samples[2 * i], samples[2 * i + 1]]);
        if count != 0 {
            data[i] = count as f64 * unit_scale;
            valid[i] = true;
        }
    }
    DepthMap::from_parts(w, h, data, valid)
}

#[derive(Serialize, Deserialize)]
struct PnccSidecar {
    width: usize,
    height: usize,
    norm: Option<NormalizationParams>,
    /// Alternating run lengths over the row-major mask, first run counting
    /// `true` pixels (possibly 0).
    valid_rle: Vec<u32>,
}

fn mask_to_rle(mask: &[bool]) -> Vec<u32> {
    let mut rle = Vec::new();
    let mut current = true;
    let mut run = 0u32;
    for &b in mask {
        if b == current {
            run += 1;
        } else {
            rle.push(run);
            current = b;
            run = 1;
        }
    }
    rle.push(run);
    rle
}

fn rle_to_mask(rle: &[u32], n: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(n);
    let mut current = true;
    for &run in rle {
        if mask.len() + run as usize > n {
            return Err(Error::format(
                0,
                format!("mask run lengths cover more than the image's {n} pixels"),
            ));
        }
        for _ in 0..run {
            mask.push(current);
        }
        current = !current;
    }
    if mask.len() != n {
        return Err(Error::format(
            0,
            format!("mask run lengths cover {} pixels, image has {n}", mask.len()),
        ));
    }
    Ok(mask)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write a coordinate image as a 16-bit pixmap (channels quantized to
/// steps of 1/65535) plus a `<path>.json` sidecar carrying the exact
/// normalization parameters and the run-length-encoded valid mask.
pub fn write_pncc48(path: &Path, img: &PnccImage) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let mut out = format!("P6\n{w} {h}\n65535\n").into_bytes();
    for i in 0..n {
        for c in 0..3 {
            let v = img.channels()[c * n + i];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range(format!(
                    "channel {c} at pixel ({}, {}) is {v}, outside [0, 1]",
                    i % w,
                    i / w
                )));
            }
            let q = (v * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    let sidecar = PnccSidecar {
        width: w,
        height: h,
        norm: img.norm().copied(),
        valid_rle: mask_to_rle(img.valid()),
    };
    fs::write(path, out)?;
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar).expect("plain struct serializes") + "\n",
    )?;
    Ok(())
}

/// Read an image written by `write_pncc48`, sidecar included.
pub fn read_pncc48(path: &Path) -> Result<PnccImage> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::format(
            0,
            format!("missing sidecar {}: the pixmap alone cannot be decoded", side.display()),
        ));
    }
    let buf = fs::read(path)?;
    let mut cur = Cursor::new(&buf);
    let magic = cur.pnm_token()?;
    if magic != "P6" {
        return Err(Error::format(0, format!("expected a P6 pixmap, got magic {magic:?}")));
    }
    let w = cur.pnm_usize("width")?;
    let h = cur.pnm_usize("height")?;
    let maxval = cur.pnm_usize("maxval")?;
    if maxval != 65535 {
        return Err(Error::format(
            cur.pos as u64,
            format!("only 16-bit pixmaps are supported (maxval 65535), got {maxval}"),
        ));
    }
    cur.pnm_sample_gap()?;
    let n = w * h;
    let samples = cur.take(n * 6, "channel samples")?;
    cur.expect_eof()?;

    let text = fs::read_to_string(&side)?;
    let sidecar: PnccSidecar = serde_json::from_str(&text).map_err(|e| {
        Error::format(e.column() as u64, format!("bad sidecar {}: {e}", side.display()))
    })?;
    if sidecar.width != w || sidecar.height != h {
        return Err(Error::format(
            0,
            format!(
                "sidecar is for {}x{} but the pixmap is {w}x{h}",
                sidecar.width, sidecar.height
            ),
        ));
    }
    let valid = rle_to_mask(&sidecar.valid_rle, n)?;
    let mut channels = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            let o = (i * 3 + c) * 2;
            let q = u16::from_be_bytes([samples[o], samples[o + 1]]);
            channels[c * n + i] = q as f64 / 65535.0;
        }
    }
    PnccImage::from_parts(w, h, channels, valid, sidecar.norm)
}

/// Write a point cloud as ASCII PLY with double-precision x, y, z. Point
/// order is preserved; clouds decoded from images stay in row-major pixel
/// order.
pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, ply_bytes(pc))?;
    Ok(())
}

fn ply_bytes(pc: &PointCloud) -> Vec<u8> {
    let mut out = String::with_capacity(128 + pc.len() * 24);
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", pc.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str("end_header\n");
    for p in pc.points() {
        // `{}` prints the shortest decimal that round-trips the f64.
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out.into_bytes()
}

/// Read an ASCII PLY with x, y, z vertex properties (double or float).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let buf = fs::read(path)?;
    let text = std::str::from_utf8(&buf)
        .map_err(|e| Error::format(e.valid_up_to() as u64, "PLY must be ASCII text"))?;

    let mut rows: Vec<(u64, &str)> = Vec::new();
    let mut at = 0u64;
    for l in text.split_inclusive('\n') {
        rows.push((at, l.trim_end_matches(['\n', '\r'])));
        at += l.len() as u64;
    }
    let end = at;
    let mut row = 0usize;
    let mut next = |what: &str| -> Result<(u64, &str)> {
        let got = rows.get(row).copied();
        row += 1;
        got.ok_or_else(|| Error::format(end, format!("unexpected end of file, expected {what}")))
    };

    let (at, l) = next("the \"ply\" magic")?;
    if l != "ply" {
        return Err(Error::format(at, format!("expected \"ply\", got {l:?}")));
    }
    let (at, l) = next("the format line")?;
    if l != "format ascii 1.0" {
        return Err(Error::format(at, format!("only \"format ascii 1.0\" is supported, got {l:?}")));
    }

    // Header: comments allowed; exactly one vertex element with x, y, z.
    let mut n_vertices: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        let (at, l) = next("the header")?;
        if l == "end_header" {
            break;
        }
        if l.starts_with("comment ") || l == "comment" {
            continue;
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            if n_vertices.is_some() {
                return Err(Error::format(at, "duplicate vertex element"));
            }
            n_vertices = Some(rest.parse().map_err(|_| {
                Error::format(at, format!("vertex count must be an integer, got {rest:?}"))
            })?);
            continue;
        }
        if let Some(rest) = l.strip_prefix("property ") {
            let mut it = rest.split_whitespace();
            let ty = it.next().unwrap_or("");
            let name = it.next().unwrap_or("");
            if !matches!(ty, "double" | "float" | "float64" | "float32") {
                return Err(Error::format(at, format!("unsupported property type {ty:?}")));
            }
            props.push(name.to_string());
            continue;
        }
        return Err(Error::format(at, format!("unrecognized header line {l:?}")));
    }
    let n = n_vertices.ok_or_else(|| Error::format(end, "header lacks an element vertex line"))?;
    if props != ["x", "y", "z"] {
        return Err(Error::format(
            end,
            format!("vertex properties must be exactly x, y, z; got {props:?}"),
        ));
    }

    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let (at, l) = next("a vertex row")?;
        let mut coords = [0.0f64; 3];
        let mut it = l.split_whitespace();
        for c in coords.iter_mut() {
            let tok = it
                .next()
                .ok_or_else(|| Error::format(at, format!("vertex {k} has fewer than 3 coordinates")))?;
            *c = tok
                .parse()
                .map_err(|_| Error::format(at, format!("vertex {k} has a non-numeric coordinate {tok:?}")))?;
        }
        if it.next().is_some() {
            return Err(Error::format(at, format!("vertex {k} has more than 3 coordinates")));
        }
        points.push(coords);
    }
    if let Ok((at, _)) = next("nothing") {
        return Err(Error::format(at, "trailing data after the last vertex"));
    }
    PointCloud::new(points)
}

// Serialization mirror for Intrinsics with the frozen field names.
#[derive(Serialize, Deserialize)]
struct IntrinsicsFile {
    f_x: f64,
    f_y: f64,
    c_x: f64,
    c_y: f64,
    width: usize,
    height: usize,
}

/// Write camera intrinsics as JSON with f_x, f_y, c_x, c_y, width, height.
pub fn write_intrinsics(path: &Path, intr: &Intrinsics) -> Result<()> {
    let file = IntrinsicsFile {
        f_x: intr.fx,
        f_y: intr.fy,
        c_x: intr.cx,
        c_y: intr.cy,
        width: intr.width,
        height: intr.height,
    };
    fs::write(
        path,
        serde_json::to_string_pretty(&file).expect("plain struct serializes") + "\n",
    )?;
    Ok(())
}

/// Read intrinsics written by `write_intrinsics`, re-validating them.
pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path)?;
    let f: IntrinsicsFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(e.column() as u64, format!("bad intrinsics file: {e}")))?;
    Intrinsics::new(f.f_x, f.f_y, f.c_x, f.c_y, f.width, f.height)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    param_count: usize,
    /// Predictions reuse the input image's NormalizationParams; nothing
    /// scene-specific is baked into the checkpoint.
    norm_policy: String,
}

pub const NORM_POLICY_REUSE_INPUT: &str = "reuse-input";

/// Write a model checkpoint: "PNSR" magic, version u16, header length u32,
/// JSON header, then the parameters as little-endian f32 in declaration
/// order. All integers little-endian.
pub fn write_checkpoint(path: &Path, model: &SrModel) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

fn checkpoint_bytes(model: &SrModel) -> Vec<u8> {
    let header = CheckpointHeader {
        config: *model.config(),
        param_count: model.param_count(),
        norm_policy: NORM_POLICY_REUSE_INPUT.to_string(),
    };
    let header_json = serde_json::to_string(&header).expect("plain struct serializes");
    let params = model.flatten_params();
    let mut out = Vec::with_capacity(14 + header_json.len() + params.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

/// Read a checkpoint back into a model. Fails cleanly (no partial model)
/// on any truncation, version mismatch, or trailing garbage.
pub fn read_checkpoint(path: &Path) -> Result<SrModel> {
    let buf = fs::read(path)?;
    let mut cur = Cursor::new(&buf);
    let magic = cur.take(4, "magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("not a checkpoint: magic {magic:?}")));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len =
        u32::from_le_bytes(cur.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header_at = cur.pos as u64;
    let header_bytes = cur.take(header_len, "JSON header")?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(header_at, format!("bad checkpoint header: {e}")))?;
    if header.norm_policy != NORM_POLICY_REUSE_INPUT {
        return Err(Error::format(
            header_at,
            format!("unknown normalization policy {:?}", header.norm_policy),
        ));
    }
    let mut model = SrModel::new(header.config)?;
    if header.param_count != model.param_count() {
        return Err(Error::format(
            header_at,
            format!(
                "header claims {} parameters but the declared architecture has {}",
                header.param_count,
                model.param_count()
            ),
        ));
    }
    let blob = cur.take(header.param_count * 4, "parameter blob")?;
    cur.expect_eof()?;
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    model.load_params(&params)?;
    Ok(model)
}
