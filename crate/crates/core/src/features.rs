//! Dense two-level feature grids.
//!
//! A [`FeaturePyramid`] holds a coarse grid (one descriptor per 8x8 px cell,
//! described over a 16 px window) and a fine grid (one descriptor per 2x2 px
//! cell, described over an 8 px window). Descriptors are unit
//! length; cells without usable texture carry the zero vector and are
//! flagged textureless.
//!
//! Coarse descriptor `k` is anchored at the center of coarse cell `k`,
//! pixel coordinate `8k + 4`. Fine descriptor `k` is anchored at pixel
//! coordinate `2k`, so the fine descriptor at index `4k + 2` sits exactly on
//! the center of coarse cell `k`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, COARSE_CELL, FINE_CELL};

pub const PYRAMID_MAGIC: [u8; 4] = *b"PKLF";
pub const PYRAMID_VERSION: u32 = 1;
pub const PYRAMID_EXTENSION: &str = "pklf";
/// Histogram bins per subcell of the built-in descriptor.
pub const ORIENTATION_BINS: usize = 8;
pub const MIN_DIMS: usize = 8;
/// Windows whose mean gradient magnitude per pixel falls below this are textureless.
pub const MIN_MEAN_GRADIENT: f32 = 1e-3;

/// Subcell arrangement of a built-in descriptor window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Subcell side in pixels.
    pub subcell: usize,
    /// Subcells per window side.
    pub grid: usize,
}

impl Layout {
    pub const fn span(&self) -> usize {
        self.subcell * self.grid
    }

    pub const fn dims(&self) -> usize {
        self.grid * self.grid * ORIENTATION_BINS
    }
}

pub const COARSE_LAYOUT: Layout = Layout { subcell: 4, grid: 4 };
pub const FINE_LAYOUT: Layout = Layout { subcell: 4, grid: 2 };

const UNIT_TOLERANCE: f32 = 1e-6;

/// Row-major grid of fixed-length descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    dims: usize,
    data: Vec<f32>,
    textureless: Vec<bool>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dims))
            .ok_or_else(|| Error::Shape(format!("grid {rows}x{cols}x{dims} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "grid {rows}x{cols}x{dims} needs {expected} values, got {}",
                data.len()
            )));
        }
        let textureless = if dims == 0 {
            vec![true; rows * cols]
        } else {
            data.chunks_exact(dims).map(|d| d.iter().all(|&v| v == 0.0)).collect()
        };
        Ok(FeatureGrid {
            rows,
            cols,
            dims,
            data,
            textureless,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn descriptor(&self, index: usize) -> &[f32] {
        &self.data[index * self.dims..(index + 1) * self.dims]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.descriptor(row * self.cols + col)
    }

    #[inline]
    pub fn is_textureless(&self, index: usize) -> bool {
        self.textureless[index]
    }

    pub fn textured_count(&self) -> usize {
        self.textureless.iter().filter(|t| !**t).count()
    }

    /// Scales every nonzero descriptor to unit length. Descriptors already
    /// within `1e-6` of unit length are left untouched, which makes the
    /// operation exactly idempotent.
    pub fn renormalize(&mut self) {
        if self.dims == 0 {
            return;
        }
        for d in self.data.chunks_exact_mut(self.dims) {
            let norm = d.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            if norm == 0.0 || (norm - 1.0).abs() <= UNIT_TOLERANCE {
                continue;
            }
            d.iter_mut().for_each(|v| *v /= norm);
        }
        self.textureless = self
            .data
            .chunks_exact(self.dims)
            .map(|d| d.iter().all(|&v| v == 0.0))
            .collect();
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub coarse: FeatureGrid,
    pub fine: FeatureGrid,
    pub coarse_cell: usize,
    pub fine_cell: usize,
    pub source_id: String,
}

impl FeaturePyramid {
    /// Pixel size of the image the pyramid was extracted from.
    pub fn image_size(&self) -> (usize, usize) {
        (self.coarse.cols * self.coarse_cell, self.coarse.rows * self.coarse_cell)
    }

    fn check_shape(&self) -> Result<()> {
        let (w, h) = self.image_size();
        if self.fine.cols * self.fine_cell != w || self.fine.rows * self.fine_cell != h {
            return Err(Error::Shape(format!(
                "coarse grid {}x{} and fine grid {}x{} describe different images",
                self.coarse.cols, self.coarse.rows, self.fine.cols, self.fine.rows
            )));
        }
        Ok(())
    }
}

/// Where descriptors come from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureBackend {
    /// Built-in gradient-orientation histograms.
    #[default]
    BuiltinHog,
    /// Precomputed grids read from `<dir>/<source_id>.pklf`.
    InjectedFile { dir: PathBuf },
}

impl FeatureBackend {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureBackend::BuiltinHog => "builtin-hog",
            FeatureBackend::InjectedFile { .. } => "injected-file",
        }
    }
}

pub fn extract(image: &Image, backend: &FeatureBackend) -> Result<FeaturePyramid> {
    let (w, h) = (image.width(), image.height());
    if w % COARSE_CELL != 0 || h % COARSE_CELL != 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} is not a multiple of the {COARSE_CELL} px cell size"
        )));
    }
    match backend {
        FeatureBackend::BuiltinHog => Ok(extract_builtin(image)),
        FeatureBackend::InjectedFile { dir } => {
            let path = dir.join(format!("{}.{PYRAMID_EXTENSION}", image.source_id()));
            let mut p = load_pyramid(&path)?;
            if p.coarse.cols * COARSE_CELL != w
                || p.coarse.rows * COARSE_CELL != h
                || p.fine.cols * FINE_CELL != w
                || p.fine.rows * FINE_CELL != h
            {
                return Err(Error::Shape(format!(
                    "injected grids {}x{} / {}x{} do not fit a {w}x{h} image",
                    p.coarse.cols, p.coarse.rows, p.fine.cols, p.fine.rows
                )));
            }
            if p.coarse.dims < MIN_DIMS || p.fine.dims < MIN_DIMS {
                return Err(Error::Shape(format!(
                    "injected descriptors have {}/{} dims, need at least {MIN_DIMS}",
                    p.coarse.dims, p.fine.dims
                )));
            }
            if p.coarse.has_non_finite() || p.fine.has_non_finite() {
                return Err(Error::InvalidInput(format!(
                    "{} holds non-finite values",
                    path.display()
                )));
            }
            p.coarse.renormalize();
            p.fine.renormalize();
            p.source_id = image.source_id().to_string();
            Ok(p)
        }
    }
}

fn extract_builtin(image: &Image) -> FeaturePyramid {
    let grad = Gradients::new(image, COARSE_LAYOUT.span());
    FeaturePyramid {
        coarse: dense_histograms(&grad, COARSE_CELL, COARSE_LAYOUT, COARSE_CELL / 2),
        fine: dense_histograms(&grad, FINE_CELL, FINE_LAYOUT, 0),
        coarse_cell: COARSE_CELL,
        fine_cell: FINE_CELL,
        source_id: image.source_id().to_string(),
    }
}

/// Per-pixel gradient magnitude and orientation bin.
pub(crate) struct Gradients {
    /// Size of the source image.
    pub width: usize,
    pub height: usize,
    /// Mirrored margin around the image, in pixels.
    pub pad: usize,
    /// Padded rows of `width + 2 * pad` values.
    pub magnitude: Vec<f32>,
    /// Lower of the two orientation bins a pixel votes into.
    pub bin: Vec<u8>,
    /// Share of the vote going to `bin + 1`.
    pub frac: Vec<f32>,
}

/// Symmetric reflection of `i` into `0..n`, for `-n <= i < 2n`.
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    (if i < 0 {
        -1 - i
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    }) as usize
}

impl Gradients {
    /// Central differences over the image extended by symmetric reflection,
    /// evaluated on a `pad` px margin as well. At the edge pixels this is
    /// the same as replicating the border. Orientation covers the full
    /// circle, bin `b` centered on angle `b * 45deg`.
    pub fn new(image: &Image, pad: usize) -> Self {
        let (w, h) = (image.width(), image.height());
        assert!(pad <= w.min(h), "margin wider than the image");
        let px = image.pixels();
        let at = |x: isize, y: isize| px[mirror(y, h) * w + mirror(x, w)];
        let (pw, ph) = (w + 2 * pad, h + 2 * pad);
        let mut magnitude = Vec::with_capacity(pw * ph);
        let mut bin = Vec::with_capacity(pw * ph);
        let mut frac = Vec::with_capacity(pw * ph);
        for py in 0..ph {
            let y = py as isize - pad as isize;
            for qx in 0..pw {
                let x = qx as isize - pad as isize;
                let gx = (at(x + 1, y) - at(x - 1, y)) * 0.5;
                let gy = (at(x, y + 1) - at(x, y - 1)) * 0.5;
                magnitude.push((gx * gx + gy * gy).sqrt());
                let (b, f) = orientation_bin(gx, gy);
                bin.push(b);
                frac.push(f);
            }
        }
        Gradients {
            width: w,
            height: h,
            pad,
            magnitude,
            bin,
            frac,
        }
    }
}

/// Linear vote split between the two bins nearest the gradient angle.
#[inline]
pub(crate) fn orientation_bin(gx: f32, gy: f32) -> (u8, f32) {
    if gx == 0.0 && gy == 0.0 {
        return (0, 0.0);
    }
    let sector = std::f32::consts::TAU / ORIENTATION_BINS as f32;
    let t = gy.atan2(gx).rem_euclid(std::f32::consts::TAU) / sector;
    let lower = t.floor();
    ((lower as usize % ORIENTATION_BINS) as u8, t - lower)
}

/// One descriptor per `stride`-px cell. Descriptor `k` covers the
/// `layout.span()` px window centred on pixel `stride*k + anchor`, split
/// into `grid x grid` subcells; parts of the window past the image edge see
/// the mirrored image. Each pixel votes its gradient magnitude
/// trilinearly: linearly between the two nearest orientation bins and
/// bilinearly between the nearest subcell centres, so descriptors vary
/// smoothly under subpixel motion.
fn dense_histograms(grad: &Gradients, stride: usize, layout: Layout, anchor: usize) -> FeatureGrid {
    let cols = grad.width / stride;
    let rows = grad.height / stride;
    let span = layout.span();
    let dims = layout.dims();
    let half = (span / 2) as isize;
    let weights = subcell_weights(layout);
    let pad = grad.pad as isize;
    let padded_width = grad.width + 2 * grad.pad;
    debug_assert!(span / 2 <= grad.pad + anchor);

    let window_area = (span * span) as f32;
    let mut data = vec![0f32; rows * cols * dims];
    for r in 0..rows {
        let y_start = (stride * r + anchor) as isize - half;
        for c in 0..cols {
            let x_start = (stride * c + anchor) as isize - half;
            let d = &mut data[(r * cols + c) * dims..][..dims];
            for v in 0..span {
                let row = (y_start + v as isize + pad) as usize * padded_width;
                for u in 0..span {
                    let i = row + (x_start + u as isize + pad) as usize;
                    let m = grad.magnitude[i];
                    if m == 0.0 {
                        continue;
                    }
                    let (b0, f) = (grad.bin[i] as usize, grad.frac[i]);
                    let b1 = (b0 + 1) % ORIENTATION_BINS;
                    for &(sy, ay) in &weights[v] {
                        for &(sx, ax) in &weights[u] {
                            let w = m * ay * ax;
                            let h = &mut d[(sy * layout.grid + sx) * ORIENTATION_BINS..][..ORIENTATION_BINS];
                            h[b0] += w * (1.0 - f);
                            h[b1] += w * f;
                        }
                    }
                }
            }
            let mass: f32 = d.iter().sum();
            if mass / window_area < MIN_MEAN_GRADIENT {
                d.fill(0.0);
                continue;
            }
            let mean = mass / dims as f32;
            d.iter_mut().for_each(|v| *v -= mean);
            let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm <= f32::EPSILON * mass {
                d.fill(0.0);
                continue;
            }
            d.iter_mut().for_each(|v| *v /= norm);
        }
    }
    FeatureGrid::new(rows, cols, dims, data).expect("sized by construction")
}

/// Nonzero tent weights of each window offset towards the subcell centres.
fn subcell_weights(layout: Layout) -> Vec<Vec<(usize, f32)>> {
    let s = layout.subcell as f32;
    (0..layout.span())
        .map(|u| {
            let p = u as f32 + 0.5;
            (0..layout.grid)
                .map(|k| (k, (1.0 - (p - (k as f32 + 0.5) * s).abs() / s).max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect()
}

pub fn save_pyramid(p: &FeaturePyramid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_pyramid(p, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pyramid; its source id is the file stem.
pub fn load_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_pyramid(&mut BufReader::new(file), source_id).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Little-endian: magic, version, level count, `(rows, cols, dims)` per
/// level, then each level's `f32` payload. Levels are coarse then fine.
pub fn write_pyramid(p: &FeaturePyramid, w: &mut impl Write) -> std::io::Result<()> {
    let levels = [&p.coarse, &p.fine];
    w.write_all(&PYRAMID_MAGIC)?;
    w.write_all(&PYRAMID_VERSION.to_le_bytes())?;
    w.write_all(&(levels.len() as u32).to_le_bytes())?;
    for g in levels {
        for v in [g.rows, g.cols, g.dims] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    for g in levels {
        let mut buf = Vec::with_capacity(g.data.len() * 4);
        for v in &g.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_pyramid(r: &mut impl Read, source_id: impl Into<String>) -> Result<FeaturePyramid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    decode_pyramid(&bytes, source_id.into())
}

fn decode_pyramid(bytes: &[u8], source_id: String) -> Result<FeaturePyramid> {
    let mut cursor = 0usize;
    let mut u32_at = |what: &str| -> Result<u32> {
        let chunk = bytes
            .get(cursor..cursor + 4)
            .ok_or_else(|| Error::Format(format!("truncated header reading {what}")))?;
        cursor += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    };
    if bytes.len() < 4 || bytes[..4] != PYRAMID_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    u32_at("magic")?;
    let version = u32_at("version")?;
    if version != PYRAMID_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let level_count = u32_at("level count")?;
    if level_count != 2 {
        return Err(Error::Format(format!("expected 2 levels, found {level_count}")));
    }
    let mut shapes = Vec::with_capacity(2);
    for _ in 0..level_count {
        shapes.push((
            u32_at("rows")? as usize,
            u32_at("cols")? as usize,
            u32_at("dims")? as usize,
        ));
    }
    let header = cursor;
    let payload: usize = shapes
        .iter()
        .try_fold(0usize, |acc, &(r, c, d)| {
            r.checked_mul(c)?.checked_mul(d)?.checked_mul(4)?.checked_add(acc)
        })
        .ok_or_else(|| Error::Format("declared dims overflow".into()))?;
    if bytes.len() - header != payload {
        return Err(Error::Format(format!(
            "declared dims need {payload} payload bytes, file has {}",
            bytes.len() - header
        )));
    }
    let mut offset = header;
    let mut grids = Vec::with_capacity(2);
    for (rows, cols, dims) in shapes {
        let n = rows * cols * dims;
        let data = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        grids.push(FeatureGrid::new(rows, cols, dims, data)?);
    }
    let fine = grids.pop().unwrap();
    let coarse = grids.pop().unwrap();
    let p = FeaturePyramid {
        coarse,
        fine,
        coarse_cell: COARSE_CELL,
        fine_cell: FINE_CELL,
        source_id,
    };
    p.check_shape().map_err(|e| Error::Format(e.to_string()))?;
    Ok(p)
}

/// Header length in bytes for a two-level file.
pub const fn pyramid_header_len() -> usize {
    4 + 4 + 4 + 2 * 12
}
