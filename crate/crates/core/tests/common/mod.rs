#![allow(dead_code)]

use std::collections::BTreeSet;

use parkloc::features::FeatureGrid;
use parkloc::imaging::Image;
use parkloc::matcher::{Cell, FineMatch};
use parkloc::vehicle_filter::{BoundingBox, DetectionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise_image(id: &str, w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(id, w, h, (0..w * h).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Noise smoothed by a 3x3 box filter, so it can be resampled at subpixel
/// offsets without aliasing. Values stay in [0, 1].
pub fn smooth_noise(w: usize, h: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let raw: Vec<f32> = (0..w * h).map(|_| r.random::<f32>()).collect();
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            let mut n = 0f32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        acc += raw[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

/// `out(x, y) = src(x - tx, y - ty)` with bilinear interpolation and edge
/// clamping.
pub fn translate(src: &[f32], w: usize, h: usize, tx: f64, ty: f64) -> Vec<f32> {
    let sample = |x: i64, y: i64| src[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize] as f64;
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 - tx;
            let sy = y as f64 - ty;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = sample(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + sample(x0 + 1, y0) * fx * (1.0 - fy)
                + sample(x0, y0 + 1) * (1.0 - fx) * fy
                + sample(x0 + 1, y0 + 1) * fx * fy;
            out[y * w + x] = v as f32;
        }
    }
    out
}

pub fn grid_from(rows: usize, cols: usize, dims: usize, data: Vec<f32>) -> FeatureGrid {
    FeatureGrid::new(rows, cols, dims, data).unwrap()
}

/// Random grid of unit descriptors; each cell is left at zero with
/// probability `p_zero`.
pub fn random_grid(r: &mut ChaCha8Rng, rows: usize, cols: usize, dims: usize, p_zero: f64) -> FeatureGrid {
    let mut data = Vec::with_capacity(rows * cols * dims);
    for _ in 0..rows * cols {
        if r.random_bool(p_zero) {
            data.extend(std::iter::repeat_n(0f32, dims));
            continue;
        }
        let v: Vec<f64> = (0..dims).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        data.extend(v.iter().map(|x| (x / n) as f32));
    }
    grid_from(rows, cols, dims, data)
}

/// Grid whose cells are noisy copies of cells of `src`, in shuffled order.
pub fn perturbed_copy(r: &mut ChaCha8Rng, src: &FeatureGrid, noise: f64) -> FeatureGrid {
    let n = src.len();
    let dims = src.dims();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let mut data = Vec::with_capacity(n * dims);
    for &k in &order {
        let d = src.descriptor(k);
        if d.iter().all(|&v| v == 0.0) {
            data.extend_from_slice(d);
            continue;
        }
        let v: Vec<f64> = d
            .iter()
            .map(|&x| x as f64 + noise * (r.random::<f64>() * 2.0 - 1.0))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        data.extend(v.iter().map(|x| (x / norm) as f32));
    }
    grid_from(src.rows(), src.cols(), dims, data)
}

/// Materializes the dual-softmax matrix and applies the mutual-nearest-
/// neighbour and threshold rules literally. Returns `(cell_a, cell_b, P)`.
pub fn coarse_oracle(a: &FeatureGrid, b: &FeatureGrid, temperature: f64, threshold: f64) -> Vec<(Cell, Cell, f64)> {
    let live = |g: &FeatureGrid| -> Vec<usize> {
        (0..g.len())
            .filter(|&i| g.descriptor(i).iter().any(|&v| v != 0.0))
            .collect()
    };
    let (ia, ib) = (live(a), live(b));
    if ia.is_empty() || ib.is_empty() {
        return Vec::new();
    }
    let (na, nb) = (ia.len(), ib.len());
    // s[i * nb + j] = S(i, j)
    let mut s = vec![0f64; na * nb];
    for (i, &ai) in ia.iter().enumerate() {
        for (j, &bj) in ib.iter().enumerate() {
            let dot: f64 = a
                .descriptor(ai)
                .iter()
                .zip(b.descriptor(bj))
                .map(|(x, y)| *x as f64 * *y as f64)
                .sum();
            s[i * nb + j] = dot / temperature;
        }
    }
    // Row softmax first, then multiplied by the column softmax in place.
    let mut p = vec![0f64; na * nb];
    for i in 0..na {
        let row = &s[i * nb..(i + 1) * nb];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..nb {
            p[i * nb + j] = (row[j] - m).exp() / z;
        }
    }
    for j in 0..nb {
        let m = (0..na).map(|i| s[i * nb + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..na).map(|i| (s[i * nb + j] - m).exp()).sum();
        for i in 0..na {
            p[i * nb + j] *= (s[i * nb + j] - m).exp() / z;
        }
    }
    let argmax = |vals: &mut dyn Iterator<Item = f64>| -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, v) in vals.enumerate() {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let cell = |g: &FeatureGrid, k: usize| Cell {
        row: k / g.cols(),
        col: k % g.cols(),
    };
    let mut out = Vec::new();
    for i in 0..na {
        let j = argmax(&mut p[i * nb..(i + 1) * nb].iter().cloned());
        let back = argmax(&mut (0..na).map(|r| p[r * nb + j]));
        if back == i && p[i * nb + j] > threshold {
            out.push((cell(a, ia[i]), cell(b, ib[j]), p[i * nb + j]));
        }
    }
    out
}

pub fn pair_set(pairs: impl IntoIterator<Item = (Cell, Cell)>) -> BTreeSet<(Cell, Cell)> {
    pairs.into_iter().collect()
}

pub fn fine_match(xa: f64, ya: f64, xb: f64, yb: f64) -> FineMatch {
    FineMatch {
        point_a: [xa, ya],
        point_b: [xb, yb],
        confidence: 0.5,
        cell_a: Cell { row: 0, col: 0 },
        cell_b: Cell { row: 0, col: 0 },
        clamped: false,
    }
}

pub fn boxed(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1, "car", 0.9).unwrap()
}

/// Keeps a match unless either endpoint lies inside (edges included) a box
/// on its own side.
pub fn filter_oracle(matches: &[FineMatch], a: &DetectionSet, b: &DetectionSet) -> Vec<FineMatch> {
    let inside = |p: [f64; 2], boxes: &[BoundingBox]| {
        boxes
            .iter()
            .any(|bx| bx.x_min <= p[0] && p[0] <= bx.x_max && bx.y_min <= p[1] && p[1] <= bx.y_max)
    };
    matches
        .iter()
        .filter(|m| !inside(m.point_a, &a.boxes) && !inside(m.point_b, &b.boxes))
        .cloned()
        .collect()
}

/// Coordinates on a quarter-pixel lattice so that edge hits occur.
pub fn lattice(r: &mut ChaCha8Rng, max: f64) -> f64 {
    (r.random_range(0.0..max) * 4.0).round() / 4.0
}

pub fn random_box(r: &mut ChaCha8Rng, w: f64, h: f64) -> BoundingBox {
    let x0 = lattice(r, w - 1.0);
    let y0 = lattice(r, h - 1.0);
    let x1 = x0 + 0.25 + lattice(r, w / 2.0);
    let y1 = y0 + 0.25 + lattice(r, h / 2.0);
    boxed(x0, y0, x1, y1)
}

pub fn random_matches(r: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<FineMatch> {
    (0..n)
        .map(|_| fine_match(lattice(r, w), lattice(r, h), lattice(r, w), lattice(r, h)))
        .collect()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
