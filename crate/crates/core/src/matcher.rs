//! Coarse-to-fine dense matching.
//!
//! The coarse stage scores every pair of textured coarse cells with a
//! dual softmax, `P(i, j) = softmax_j(S)(i, j) * softmax_i(S)(i, j)` where
//! `S(i, j) = <f_i, f_j> / temperature`, and keeps mutual nearest neighbours
//! whose probability exceeds the threshold. The fine stage crops a window of
//! fine descriptors in B around each coarse match, correlates it with the
//! fine descriptor at the centre of A's cell and takes the expectation of
//! the softmaxed correlation heatmap as a subpixel offset.
//!
//! `P` is never materialized. With `lse_r(i)` and `lse_c(j)` the row and
//! column log-sum-exp of `S`, `log P(i, j) = 2 S(i, j) - lse_r(i) - lse_c(j)`,
//! so row argmaxes of `P` are argmaxes of `2 S - lse_c` and column argmaxes
//! are argmaxes of `2 S - lse_r`. Two streaming passes over `S` suffice.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract, FeatureBackend, FeatureGrid, FeaturePyramid};
use crate::imaging::Image;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_FINE_TEMPERATURE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// Softmax temperature of the coarse similarity.
    pub temperature: f64,
    /// Minimum dual-softmax probability of an accepted coarse match.
    pub threshold: f64,
    /// Side of the fine refinement window, in fine cells. Odd.
    pub window: usize,
    /// Softmax temperature of the fine correlation heatmap.
    pub fine_temperature: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            temperature: DEFAULT_TEMPERATURE,
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW,
            fine_temperature: DEFAULT_FINE_TEMPERATURE,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.fine_temperature > 0.0 && self.fine_temperature.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "fine temperature must be positive, got {}",
                self.fine_temperature
            )));
        }
        Ok(())
    }
}

/// Row-major position in a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    pub cell_a: Cell,
    pub cell_b: Cell,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineMatch {
    /// Pixel coordinates `[x, y]` in image A.
    pub point_a: [f64; 2],
    /// Refined pixel coordinates `[x, y]` in image B.
    pub point_b: [f64; 2],
    pub confidence: f64,
    pub cell_a: Cell,
    pub cell_b: Cell,
    /// The refinement window in B was shifted to stay inside the grid.
    pub clamped: bool,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn textured_cells(g: &FeatureGrid) -> Vec<usize> {
    (0..g.len()).filter(|&i| !g.is_textureless(i)).collect()
}

fn check_grids(a: &FeatureGrid, b: &FeatureGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!("{} vs {} dims", a.dims(), b.dims())));
    }
    if a.has_non_finite() || b.has_non_finite() {
        return Err(Error::InvalidInput("feature grid holds NaN or infinite values".into()));
    }
    Ok(())
}

/// Dual-softmax mutual-nearest-neighbour matching between two coarse grids.
///
/// Textureless cells take no part in either softmax. Output is ordered by
/// `cell_a` in row-major order; every cell appears at most once per side.
pub fn coarse_match(a: &FeatureGrid, b: &FeatureGrid, temperature: f64, threshold: f64) -> Result<Vec<CoarseMatch>> {
    check_grids(a, b)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let ia = textured_cells(a);
    let ib = textured_cells(b);
    if ia.is_empty() || ib.is_empty() {
        return Ok(Vec::new());
    }
    let (na, nb) = (ia.len(), ib.len());
    let inv_t = 1.0 / temperature;
    let mut row = vec![0f64; nb];
    let fill_row = |i: usize, row: &mut [f64]| {
        let fa = a.descriptor(ia[i]);
        for (s, &j) in row.iter_mut().zip(&ib) {
            *s = dot(fa, b.descriptor(j)) * inv_t;
        }
    };

    // Pass 1: row log-sum-exp directly, column log-sum-exp online.
    let mut lse_r = vec![0f64; na];
    let mut col_max = vec![f64::NEG_INFINITY; nb];
    let mut col_sum = vec![0f64; nb];
    for (i, lse) in lse_r.iter_mut().enumerate() {
        fill_row(i, &mut row);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&s| (s - m).exp()).sum();
        *lse = m + sum.ln();
        for (j, &s) in row.iter().enumerate() {
            if s > col_max[j] {
                col_sum[j] = col_sum[j] * (col_max[j] - s).exp() + 1.0;
                col_max[j] = s;
            } else {
                col_sum[j] += (s - col_max[j]).exp();
            }
        }
    }
    let lse_c: Vec<f64> = col_max.iter().zip(&col_sum).map(|(m, s)| m + s.ln()).collect();

    // Pass 2: argmaxes of log P along rows and columns. Ties go to the lowest index.
    let mut row_best = vec![(0usize, 0f64); na];
    let mut col_best = vec![(usize::MAX, f64::NEG_INFINITY); nb];
    for i in 0..na {
        fill_row(i, &mut row);
        let mut best = (usize::MAX, f64::NEG_INFINITY, 0f64);
        for (j, &s) in row.iter().enumerate() {
            let by_row = 2.0 * s - lse_c[j];
            if by_row > best.1 {
                best = (j, by_row, s);
            }
            let by_col = 2.0 * s - lse_r[i];
            if by_col > col_best[j].1 {
                col_best[j] = (i, by_col);
            }
        }
        row_best[i] = (best.0, best.2);
    }

    let mut out = Vec::new();
    for (i, &(j, s)) in row_best.iter().enumerate() {
        if col_best[j].0 != i {
            continue;
        }
        let confidence = (2.0 * s - lse_r[i] - lse_c[j]).exp();
        if confidence > threshold {
            out.push(CoarseMatch {
                cell_a: Cell {
                    row: ia[i] / a.cols(),
                    col: ia[i] % a.cols(),
                },
                cell_b: Cell {
                    row: ib[j] / b.cols(),
                    col: ib[j] % b.cols(),
                },
                confidence,
            });
        }
    }
    Ok(out)
}

/// Softmax of `correlations / temperature`.
pub fn softmax_heatmap(correlations: &[f64], temperature: f64) -> Vec<f64> {
    let m = correlations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut heat: Vec<f64> = correlations.iter().map(|&c| ((c - m) / temperature).exp()).collect();
    let z: f64 = heat.iter().sum();
    heat.iter_mut().for_each(|h| *h /= z);
    heat
}

/// Expected `(dx, dy)` in cells relative to the centre of a `window` x
/// `window` row-major heatmap.
pub fn heatmap_expectation(heatmap: &[f64], window: usize) -> (f64, f64) {
    assert_eq!(heatmap.len(), window * window);
    let half = (window / 2) as f64;
    let (mut ex, mut ey) = (0.0, 0.0);
    for (k, &h) in heatmap.iter().enumerate() {
        ex += h * ((k % window) as f64 - half);
        ey += h * ((k / window) as f64 - half);
    }
    (ex, ey)
}

/// Fine-grid position of the descriptor anchored at a coarse cell's centre.
#[inline]
fn fine_center(cell: Cell, ratio: usize) -> Cell {
    Cell {
        row: cell.row * ratio + ratio / 2,
        col: cell.col * ratio + ratio / 2,
    }
}

/// Start of a `window`-wide span centred on `center`, shifted to fit in `len`.
#[inline]
fn window_start(center: usize, window: usize, len: usize) -> (usize, bool) {
    let half = window / 2;
    let ideal = center as isize - half as isize;
    let start = ideal.clamp(0, (len - window) as isize);
    (start as usize, start != ideal)
}

/// Refines one coarse match to subpixel coordinates in B.
///
/// `point_a` is the centre of A's coarse cell; `point_b` is the centre of
/// the (possibly shifted) window in B plus the heatmap expectation,
/// converted to pixels.
pub fn refine_match(
    m: &CoarseMatch,
    pa: &FeaturePyramid,
    pb: &FeaturePyramid,
    window: usize,
    fine_temperature: f64,
) -> Result<FineMatch> {
    let (fa, fb) = (&pa.fine, &pb.fine);
    if fa.dims() != fb.dims() {
        return Err(Error::DimensionMismatch(format!(
            "fine {} vs {} dims",
            fa.dims(),
            fb.dims()
        )));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    if fb.rows() < window || fb.cols() < window {
        return Err(Error::InvalidInput(format!(
            "{window}x{window} window does not fit a {}x{} fine grid",
            fb.cols(),
            fb.rows()
        )));
    }
    let ratio = pa.coarse_cell / pa.fine_cell;
    let ca = fine_center(m.cell_a, ratio);
    let center = fa.at(ca.row, ca.col);

    let cb = fine_center(m.cell_b, pb.coarse_cell / pb.fine_cell);
    let (r0, clamped_r) = window_start(cb.row, window, fb.rows());
    let (c0, clamped_c) = window_start(cb.col, window, fb.cols());
    let mut corr = Vec::with_capacity(window * window);
    for r in r0..r0 + window {
        for c in c0..c0 + window {
            corr.push(dot(center, fb.at(r, c)));
        }
    }
    let heat = softmax_heatmap(&corr, fine_temperature);
    let (dx, dy) = heatmap_expectation(&heat, window);
    let half = window / 2;
    let fcb = pb.fine_cell as f64;
    let fca = pa.fine_cell as f64;
    Ok(FineMatch {
        point_a: [ca.col as f64 * fca, ca.row as f64 * fca],
        point_b: [((c0 + half) as f64 + dx) * fcb, ((r0 + half) as f64 + dy) * fcb],
        confidence: m.confidence,
        cell_a: m.cell_a,
        cell_b: m.cell_b,
        clamped: clamped_r || clamped_c,
    })
}

/// Coarse matching followed by refinement of every coarse match.
pub fn match_pyramids(pa: &FeaturePyramid, pb: &FeaturePyramid, params: &MatchParams) -> Result<Vec<FineMatch>> {
    params.validate()?;
    let coarse = coarse_match(&pa.coarse, &pb.coarse, params.temperature, params.threshold)?;
    coarse
        .iter()
        .map(|m| refine_match(m, pa, pb, params.window, params.fine_temperature))
        .collect()
}

pub fn match_pair(a: &Image, b: &Image, backend: &FeatureBackend, params: &MatchParams) -> Result<Vec<FineMatch>> {
    params.validate()?;
    let pa = extract(a, backend)?;
    let pb = extract(b, backend)?;
    match_pyramids(&pa, &pb, params)
}

/// Text dump, one `xa ya xb yb conf` line per match, three decimals.
pub fn format_match_dump(matches: &[FineMatch]) -> String {
    let mut s = String::with_capacity(matches.len() * 40);
    for m in matches {
        let _ = writeln!(
            s,
            "{:.3} {:.3} {:.3} {:.3} {:.3}",
            m.point_a[0], m.point_a[1], m.point_b[0], m.point_b[1], m.confidence
        );
    }
    s
}
