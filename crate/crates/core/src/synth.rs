//! Seeded synthetic parking-lot corpora.
//!
//! The lot is a long panorama split into equal-width sections. Each section
//! has smooth wall bands, a few textured pillars and floor markings, and a
//! row of parking slots. Vehicles are textured rectangles drawn from a small
//! template bank shared by every section, so identical-looking vehicles
//! appear in different places.
//!
//! The world is rendered twice: once for the gallery pass and once for the
//! query pass, where vehicles may have moved (churn). Gallery views sit at
//! fixed positions inside their section. Queries reuse gallery poses with
//! geometric and photometric jitter, so a spec with no churn and no jitter
//! produces query images identical to their gallery counterparts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricJitter {
    /// Offsets drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Gains drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometricJitter {
    pub max_translation: f64,
    pub max_rotation_deg: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionNoise {
    /// Each box edge moves by up to this many pixels.
    pub box_jitter: f64,
    /// Probability a vehicle goes undetected.
    pub miss_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_sections: usize,
    pub section_width: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub gallery_views_per_section: usize,
    pub queries_per_section: usize,
    pub wall_texture_strength: f64,
    /// Inclusive range of vehicles parked per section.
    pub vehicles_per_section: [usize; 2],
    pub vehicle_templates: usize,
    pub vehicle_width: usize,
    pub vehicle_height: usize,
    pub vehicle_churn: f64,
    pub photometric_jitter: PhotometricJitter,
    pub geometric_jitter: GeometricJitter,
    pub detection_noise: DetectionNoise,
    /// Share of a query view a section must cover to be one of its labels.
    pub label_overlap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 1,
            n_sections: 6,
            section_width: 512,
            image_width: 256,
            image_height: 192,
            gallery_views_per_section: 3,
            queries_per_section: 2,
            wall_texture_strength: 0.6,
            vehicles_per_section: [1, 3],
            vehicle_templates: 3,
            vehicle_width: 88,
            vehicle_height: 48,
            vehicle_churn: 0.0,
            photometric_jitter: PhotometricJitter::default(),
            geometric_jitter: GeometricJitter::default(),
            detection_noise: DetectionNoise::default(),
            label_overlap: 0.25,
        }
    }
}

impl SceneSpec {
    /// No churn and no jitter: every query is an exact copy of a gallery view.
    pub fn identity(seed: u64) -> Self {
        SceneSpec {
            seed,
            ..Default::default()
        }
    }

    /// Every vehicle moves between passes and all share one template, so
    /// vehicle matches point at the wrong sections.
    pub fn vehicle_confound(seed: u64) -> Self {
        SceneSpec {
            seed,
            vehicle_churn: 1.0,
            vehicle_templates: 1,
            wall_texture_strength: 0.4,
            geometric_jitter: GeometricJitter {
                max_translation: 2.0,
                max_rotation_deg: 0.5,
            },
            photometric_jitter: PhotometricJitter {
                brightness: 0.03,
                contrast: 0.05,
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    fn slot_width(&self) -> usize {
        self.vehicle_width + self.vehicle_width / 4
    }

    fn slots_per_section(&self) -> usize {
        self.section_width / self.slot_width()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_sections == 0 || self.gallery_views_per_section == 0 {
            return bad("need at least one section and one gallery view per section".into());
        }
        if self.image_width < 32 || self.image_height < 32 {
            return bad(format!("image {}x{} is too small", self.image_width, self.image_height));
        }
        if self.image_width > self.section_width {
            return bad("views must not be wider than a section".into());
        }
        if self.queries_per_section > self.gallery_views_per_section {
            return bad("queries_per_section exceeds gallery_views_per_section".into());
        }
        if !(0.0..=1.0).contains(&self.wall_texture_strength) {
            return bad("wall_texture_strength must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.vehicle_churn) {
            return bad("vehicle_churn must lie in [0, 1]".into());
        }
        let [lo, hi] = self.vehicles_per_section;
        if lo > hi || hi > self.slots_per_section() {
            return bad(format!(
                "vehicles_per_section {lo}..={hi} does not fit {} slots",
                self.slots_per_section()
            ));
        }
        if hi > 0 && self.vehicle_templates == 0 {
            return bad("vehicles need at least one template".into());
        }
        if self.vehicle_width < 8 || self.vehicle_height < 8 || self.vehicle_height * 2 > self.image_height {
            return bad("vehicle size out of range".into());
        }
        let p = &self.photometric_jitter;
        let g = &self.geometric_jitter;
        let d = &self.detection_noise;
        if p.brightness < 0.0 || !(0.0..1.0).contains(&p.contrast) {
            return bad("photometric jitter out of range".into());
        }
        if g.max_translation < 0.0 || g.max_rotation_deg < 0.0 || d.box_jitter < 0.0 {
            return bad("jitter magnitudes must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&d.miss_rate) {
            return bad("miss_rate must lie in [0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.label_overlap) || self.label_overlap == 0.0 {
            return bad("label_overlap must lie in (0, 0.5]".into());
        }
        Ok(())
    }
}

/// Paths written by [`generate`], relative to nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthOutputs {
    pub gallery_manifest: PathBuf,
    pub query_manifest: PathBuf,
    pub gallery_detections: PathBuf,
    pub query_detections: PathBuf,
    pub n_gallery: usize,
    pub n_queries: usize,
}

/// One rendered image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub id: String,
    pub image: GrayImage,
    pub labels: Vec<String>,
    /// Exact pixel bounds `(x_min, y_min, x_max, y_max)` of each visible
    /// vehicle, edges on pixel boundaries.
    pub vehicle_boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub gallery: Vec<RenderedView>,
    pub queries: Vec<RenderedView>,
}

#[derive(Clone, Copy, Debug)]
struct Vehicle {
    template: usize,
    x: usize,
    y: usize,
}

struct World {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    /// Vehicle number + 1 per pixel, 0 for background.
    owner: Vec<u16>,
}

pub fn section_name(s: usize) -> String {
    format!("S{s:02}")
}

/// Renders the whole corpus in memory.
pub fn render(spec: &SceneSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = render_background(spec, &mut rng);
    let templates: Vec<Vec<f32>> = (0..spec.vehicle_templates)
        .map(|_| vehicle_template(spec, &mut rng))
        .collect();

    let n_slots = spec.slots_per_section();
    let floor_y = spec.image_height - spec.vehicle_height - spec.image_height / 12;
    let place = |rng: &mut ChaCha8Rng, slot: usize, template: usize| {
        let section = slot / n_slots;
        let slack = spec.slot_width() - spec.vehicle_width;
        Vehicle {
            template,
            x: section * spec.section_width + (slot % n_slots) * spec.slot_width() + rng.random_range(0..=slack),
            y: floor_y - rng.random_range(0..=spec.image_height / 16),
        }
    };

    let mut occupied = vec![false; spec.n_sections * n_slots];
    let mut gallery_vehicles = Vec::new();
    for s in 0..spec.n_sections {
        let [lo, hi] = spec.vehicles_per_section;
        let n = rng.random_range(lo..=hi);
        let mut slots: Vec<usize> = (0..n_slots).collect();
        slots.shuffle(&mut rng);
        for &k in &slots[..n] {
            let slot = s * n_slots + k;
            occupied[slot] = true;
            let template = rng.random_range(0..spec.vehicle_templates);
            gallery_vehicles.push((slot, place(&mut rng, slot, template)));
        }
    }

    // Churn: each vehicle independently leaves its slot with the given
    // probability and parks in a random free slot anywhere in the lot.
    let mut query_vehicles = Vec::with_capacity(gallery_vehicles.len());
    let mut query_occupied = occupied.clone();
    for &(slot, v) in &gallery_vehicles {
        if rng.random::<f64>() < spec.vehicle_churn {
            query_occupied[slot] = false;
            let free: Vec<usize> = (0..query_occupied.len())
                .filter(|&k| !query_occupied[k] && k != slot)
                .collect();
            if let Some(&dest) = free.get(rng.random_range(0..free.len().max(1))) {
                query_occupied[dest] = true;
                query_vehicles.push(place(&mut rng, dest, v.template));
            } else {
                query_occupied[slot] = true;
                query_vehicles.push(v);
            }
        } else {
            query_vehicles.push(v);
        }
    }

    let gallery_vehicles: Vec<Vehicle> = gallery_vehicles.into_iter().map(|(_, v)| v).collect();
    let gallery_world = compose(spec, &background, &templates, &gallery_vehicles);
    let query_world = compose(spec, &background, &templates, &query_vehicles);

    let offsets: Vec<usize> = (0..spec.gallery_views_per_section)
        .map(|k| {
            let span = spec.section_width - spec.image_width;
            if spec.gallery_views_per_section == 1 {
                span / 2
            } else {
                k * span / (spec.gallery_views_per_section - 1)
            }
        })
        .collect();

    let mut gallery = Vec::new();
    for s in 0..spec.n_sections {
        for &off in &offsets {
            let x0 = (s * spec.section_width + off) as f64;
            let pose = Pose {
                x0,
                y0: 0.0,
                angle: 0.0,
            };
            let (image, boxes) = render_view(spec, &gallery_world, &pose, None);
            gallery.push(RenderedView {
                id: format!("g{:04}", gallery.len()),
                image,
                labels: vec![section_name(s)],
                vehicle_boxes: boxes,
            });
        }
    }

    let mut queries = Vec::new();
    for s in 0..spec.n_sections {
        let mut picks: Vec<usize> = (0..offsets.len()).collect();
        picks.shuffle(&mut rng);
        picks.truncate(spec.queries_per_section);
        picks.sort_unstable();
        for k in picks {
            let g = spec.geometric_jitter;
            let p = spec.photometric_jitter;
            let tx = symmetric(&mut rng, g.max_translation);
            let ty = symmetric(&mut rng, g.max_translation);
            let angle = symmetric(&mut rng, g.max_rotation_deg).to_radians();
            let brightness = symmetric(&mut rng, p.brightness);
            let gain = 1.0 + symmetric(&mut rng, p.contrast);
            let pose = Pose {
                x0: (s * spec.section_width + offsets[k]) as f64 + tx,
                y0: ty,
                angle,
            };
            let (image, boxes) = render_view(spec, &query_world, &pose, Some((brightness, gain)));
            queries.push(RenderedView {
                id: format!("q{:04}", queries.len()),
                image,
                labels: view_labels(spec, pose.x0),
                vehicle_boxes: boxes,
            });
        }
    }
    Ok(Corpus { gallery, queries })
}

/// Uniform in `[-m, m]`; no draw is consumed when `m` is zero so that
/// zero-jitter specs stay exact.
fn symmetric(rng: &mut ChaCha8Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

/// Sections covering at least `label_overlap` of the view, largest share
/// first, at most two.
fn view_labels(spec: &SceneSpec, x0: f64) -> Vec<String> {
    let w = spec.image_width as f64;
    let sw = spec.section_width as f64;
    let mut shares: Vec<(f64, usize)> = (0..spec.n_sections)
        .map(|s| {
            let lo = (s as f64 * sw).max(x0);
            let hi = ((s + 1) as f64 * sw).min(x0 + w);
            ((hi - lo).max(0.0) / w, s)
        })
        .filter(|&(share, _)| share >= spec.label_overlap)
        .collect();
    if shares.is_empty() {
        let centre = ((x0 + w / 2.0) / sw).floor().clamp(0.0, (spec.n_sections - 1) as f64) as usize;
        shares.push((1.0, centre));
    }
    shares.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    shares.truncate(2);
    shares.into_iter().map(|(_, s)| section_name(s)).collect()
}

struct Pose {
    x0: f64,
    y0: f64,
    angle: f64,
}

/// Samples the world through a view whose top-left corner sits at
/// `(x0, y0)`, rotated about the view centre. Returns the 8-bit image and
/// the pixel bounds of every vehicle contributing to it.
fn render_view(
    spec: &SceneSpec,
    world: &World,
    pose: &Pose,
    photometric: Option<(f64, f64)>,
) -> (GrayImage, Vec<[f64; 4]>) {
    let (w, h) = (spec.image_width, spec.image_height);
    let (sin, cos) = if pose.angle == 0.0 {
        (0.0, 1.0)
    } else {
        pose.angle.sin_cos()
    };
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let n_vehicles = world.owner.iter().copied().max().unwrap_or(0) as usize;
    let mut bounds: Vec<Option<[usize; 4]>> = vec![None; n_vehicles];
    let mut img = GrayImage::new(w as u32, h as u32);
    for v in 0..h {
        for u in 0..w {
            let (du, dv) = (u as f64 + 0.5 - cx, v as f64 + 0.5 - cy);
            let x = pose.x0 + cx + cos * du - sin * dv - 0.5;
            let y = pose.y0 + cy + sin * du + cos * dv - 0.5;
            let (value, taps) = sample(world, x, y);
            for (idx, weight) in taps {
                let o = world.owner[idx];
                if o > 0 && weight > 0.0 {
                    let b = &mut bounds[o as usize - 1];
                    *b = Some(match *b {
                        None => [u, v, u, v],
                        Some([a, c, d, e]) => [a.min(u), c.min(v), d.max(u), e.max(v)],
                    });
                }
            }
            let mut p = value as f64;
            if let Some((brightness, gain)) = photometric {
                p = (p - 0.5) * gain + 0.5 + brightness;
            }
            img.put_pixel(u as u32, v as u32, Luma([(p.clamp(0.0, 1.0) * 255.0).round() as u8]));
        }
    }
    let boxes = bounds
        .into_iter()
        .flatten()
        .map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64])
        .collect();
    (img, boxes)
}

/// Bilinear sample with replicated borders, plus the four taps and weights.
fn sample(world: &World, x: f64, y: f64) -> (f32, [(usize, f64); 4]) {
    let x = x.clamp(0.0, (world.width - 1) as f64);
    let y = y.clamp(0.0, (world.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(world.width - 1), (y0 + 1).min(world.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let taps = [
        (y0 * world.width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * world.width + x1, fx * (1.0 - fy)),
        (y1 * world.width + x0, (1.0 - fx) * fy),
        (y1 * world.width + x1, fx * fy),
    ];
    let v: f64 = taps
        .iter()
        .map(|&(i, w)| if w > 0.0 { world.pixels[i] as f64 * w } else { 0.0 })
        .sum();
    (v as f32, taps)
}

fn compose(spec: &SceneSpec, background: &[f32], templates: &[Vec<f32>], vehicles: &[Vehicle]) -> World {
    let width = spec.n_sections * spec.section_width;
    let height = spec.image_height;
    let mut pixels = background.to_vec();
    let mut owner = vec![0u16; width * height];
    let (vw, vh) = (spec.vehicle_width, spec.vehicle_height);
    for (n, v) in vehicles.iter().enumerate() {
        let t = &templates[v.template];
        for y in 0..vh {
            for x in 0..vw {
                let i = (v.y + y) * width + v.x + x;
                pixels[i] = t[y * vw + x];
                owner[i] = n as u16 + 1;
            }
        }
    }
    World {
        width,
        height,
        pixels,
        owner,
    }
}

/// Zero-mean noise smoothed by `passes` 3x3 box filters, scaled to unit
/// peak magnitude.
fn smooth_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, passes: usize) -> Vec<f32> {
    let mut px: Vec<f32> = (0..w * h).map(|_| rng.random::<f32>() - 0.5).collect();
    for _ in 0..passes {
        let src = px.clone();
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += src[yy * w + xx];
                        n += 1.0;
                    }
                }
                px[y * w + x] = sum / n;
            }
        }
    }
    let mean = px.iter().sum::<f32>() / px.len() as f32;
    let peak = px.iter().map(|v| (v - mean).abs()).fold(0.0, f32::max).max(1e-6);
    px.iter().map(|v| (v - mean) / peak).collect()
}

fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let width = spec.n_sections * spec.section_width;
    let h = spec.image_height;
    let wall_end = h * 11 / 20;
    let mut px = vec![0f32; width * h];

    // Smooth wall bands and a plain floor, identical in every section.
    let bands = [(0.0, 0.62f32), (0.22, 0.58), (0.4, 0.66), (0.75, 0.6)];
    for y in 0..h {
        let value = if y < wall_end {
            let t = y as f32 / wall_end as f32;
            let mut v = bands[0].1;
            for pair in bands.windows(2) {
                let (edge, next) = (pair[1].0 as f32, pair[1].1);
                let s = ((t - edge) * wall_end as f32 / 6.0 + 0.5).clamp(0.0, 1.0);
                let s = s * s * (3.0 - 2.0 * s);
                v += (next - pair[0].1) * s;
            }
            v
        } else {
            0.42
        };
        px[y * width..(y + 1) * width].fill(value);
    }

    let strength = spec.wall_texture_strength as f32;
    for s in 0..spec.n_sections {
        let base = s * spec.section_width;
        // Pillars: full-height textured columns.
        let n_pillars = rng.random_range(1..=2usize);
        for _ in 0..n_pillars {
            let pw = rng.random_range(28..=44usize);
            let px0 = base + rng.random_range(0..spec.section_width - pw);
            let tone = rng.random_range(0.45..0.7f32);
            let tex = smooth_noise(rng, pw, h, 1);
            for y in 0..h {
                for x in 0..pw {
                    let v = tone + strength * 0.3 * tex[y * pw + x];
                    px[y * width + px0 + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        // Wall posters and floor markings: textured patches.
        let n_patches = rng.random_range(3..=5usize);
        for k in 0..n_patches {
            let pw = rng.random_range(24..=56usize);
            let ph = rng.random_range(16..=32usize);
            let on_wall = k % 2 == 0;
            let py0 = if on_wall {
                rng.random_range(4..wall_end - ph)
            } else {
                rng.random_range(wall_end..h - ph)
            };
            let px0 = base + rng.random_range(0..spec.section_width - pw);
            let passes = rng.random_range(0..=1usize);
            let tex = smooth_noise(rng, pw, ph, passes);
            for y in 0..ph {
                for x in 0..pw {
                    let i = (py0 + y) * width + px0 + x;
                    px[i] = (px[i] + strength * 0.35 * tex[y * pw + x]).clamp(0.0, 1.0);
                }
            }
        }
    }
    px
}

fn vehicle_template(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (w, h) = (spec.vehicle_width, spec.vehicle_height);
    let body = if rng.random::<bool>() {
        rng.random_range(0.15..0.3f32)
    } else {
        rng.random_range(0.7..0.85f32)
    };
    let tex = smooth_noise(rng, w, h, 1);
    let mut px: Vec<f32> = tex.iter().map(|t| (body + 0.25 * t).clamp(0.0, 1.0)).collect();
    let mut fill = |x0: usize, y0: usize, x1: usize, y1: usize, v: f32| {
        for y in y0..y1 {
            for x in x0..x1 {
                px[y * w + x] = v;
            }
        }
    };
    // Windows and wheels.
    let split = w / 2 + rng.random_range(0..w / 8);
    fill(w / 8, h / 8, split - 2, h * 2 / 5, 0.08);
    fill(split + 2, h / 8, w * 7 / 8, h * 2 / 5, 0.1);
    fill(w / 10, h * 4 / 5, w / 10 + w / 6, h, 0.03);
    fill(w * 9 / 10 - w / 6, h * 4 / 5, w * 9 / 10, h, 0.03);
    px
}

fn manifest_text(views: &[RenderedView]) -> String {
    let mut s = String::new();
    for v in views {
        let _ = writeln!(s, "{} images/{}.png {}", v.id, v.id, v.labels.join(" "));
    }
    s
}

fn detections_text(views: &[RenderedView], noise: &DetectionNoise, rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    for v in views {
        let (w, h) = (v.image.width() as f64, v.image.height() as f64);
        for b in &v.vehicle_boxes {
            if noise.miss_rate > 0.0 && rng.random::<f64>() < noise.miss_rate {
                continue;
            }
            let mut b = *b;
            if noise.box_jitter > 0.0 {
                for c in b.iter_mut() {
                    *c += rng.random_range(-noise.box_jitter..=noise.box_jitter);
                }
                b = [b[0].max(0.0), b[1].max(0.0), b[2].min(w), b[3].min(h)];
                if b[0] >= b[2] || b[1] >= b[3] {
                    continue;
                }
            }
            let _ = writeln!(s, "{} car 1 {} {} {} {}", v.id, b[0], b[1], b[2], b[3]);
        }
    }
    s
}

/// Renders the corpus and writes images, manifests and detection files
/// into `out_dir`.
pub fn generate(spec: &SceneSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutputs> {
    let out = out_dir.as_ref();
    let corpus = render(spec)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for v in corpus.gallery.iter().chain(&corpus.queries) {
        let path = images.join(format!("{}.png", v.id));
        v.image
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    // Detection noise draws from its own stream so it never perturbs the scene.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6465_7465_6374);
    let files = [
        ("gallery.txt", manifest_text(&corpus.gallery)),
        ("queries.txt", manifest_text(&corpus.queries)),
        (
            "gallery_detections.txt",
            detections_text(&corpus.gallery, &spec.detection_noise, &mut noise_rng),
        ),
        (
            "query_detections.txt",
            detections_text(&corpus.queries, &spec.detection_noise, &mut noise_rng),
        ),
        ("scene.toml", spec.to_toml()),
    ];
    for (name, text) in &files {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SynthOutputs {
        gallery_manifest: out.join("gallery.txt"),
        query_manifest: out.join("queries.txt"),
        gallery_detections: out.join("gallery_detections.txt"),
        query_detections: out.join("query_detections.txt"),
        n_gallery: corpus.gallery.len(),
        n_queries: corpus.queries.len(),
    })
}
