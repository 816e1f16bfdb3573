//! Image loading and preprocessing.
//!
//! Every image entering the matcher is single-channel, intensities in
//! `[0, 1]`, and has both dimensions snapped down to a multiple of the
//! coarse cell size so the coarse and fine grids tile it exactly.

use std::path::Path;

use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};

/// Pixels per coarse feature cell. Preprocessed dimensions are multiples of this.
pub const COARSE_CELL: usize = 8;
/// Pixels per fine feature cell.
pub const FINE_CELL: usize = 2;
/// Smallest accepted side length after preprocessing.
pub const MIN_SIDE: usize = 32;
pub const DEFAULT_TARGET_LONG_SIDE: u32 = 640;

const LUMA_BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// A preprocessed grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    source_id: String,
    original_size: (u32, u32),
    resized_size: (u32, u32),
}

impl Image {
    /// Wraps row-major intensities. The image is treated as already
    /// preprocessed: its original and resized sizes are its own size.
    pub fn new(source_id: impl Into<String>, width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image {width}x{height} is smaller than {MIN_SIDE} px per side"
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("intensity {p} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            pixels,
            source_id: source_id.into(),
            original_size: (width as u32, height as u32),
            resized_size: (width as u32, height as u32),
        })
    }

    pub fn from_luma8(source_id: impl Into<String>, gray: &GrayImage) -> Result<Self> {
        let pixels = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(source_id, gray.width() as usize, gray.height() as usize, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Resolution of the decoded file before any resizing.
    pub fn original_size(&self) -> (u32, u32) {
        self.original_size
    }

    /// Factors mapping original-image pixel coordinates into this image's frame.
    ///
    /// Snapping only crops the right and bottom edges, so it does not enter
    /// the scale.
    pub fn scale_from_original(&self) -> (f64, f64) {
        (
            self.resized_size.0 as f64 / self.original_size.0 as f64,
            self.resized_size.1 as f64 / self.original_size.1 as f64,
        )
    }

    /// Quantizes to 8 bits (round to nearest).
    pub fn to_luma8(&self) -> GrayImage {
        let raw = self
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized by construction")
    }
}

/// Decodes `path` and preprocesses it. The source id is the file stem.
pub fn load_image(path: impl AsRef<Path>, target_long_side: u32) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    preprocess(&decoded, source_id, target_long_side)
}

/// Grayscale conversion, resize to `target_long_side` and snapping to the
/// coarse cell size.
pub fn preprocess(img: &DynamicImage, source_id: impl Into<String>, target_long_side: u32) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let gray = to_gray(img);
    let (rw, rh) = resized_dims(w, h, target_long_side as usize);
    let resized = if (rw, rh) == (w, h) {
        gray
    } else {
        resize_bilinear(&gray, w, h, rw, rh)
    };

    let sw = rw / COARSE_CELL * COARSE_CELL;
    let sh = rh / COARSE_CELL * COARSE_CELL;
    if sw < MIN_SIDE || sh < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} becomes {sw}x{sh} after preprocessing; need at least {MIN_SIDE} px per side"
        )));
    }
    let pixels = if sw == rw {
        resized[..rw * sh].to_vec()
    } else {
        resized
            .chunks_exact(rw)
            .take(sh)
            .flat_map(|row| row[..sw].iter().copied())
            .collect()
    };

    Ok(Image {
        width: sw,
        height: sh,
        pixels,
        source_id: source_id.into(),
        original_size: (w as u32, h as u32),
        resized_size: (rw as u32, rh as u32),
    })
}

/// Size after scaling the long side to `target_long_side`, aspect preserved.
/// A target of zero disables resizing.
pub fn resized_dims(width: usize, height: usize, target_long_side: usize) -> (usize, usize) {
    let long = width.max(height);
    if target_long_side == 0 || long == target_long_side {
        return (width, height);
    }
    let scale = target_long_side as f64 / long as f64;
    let short = |s: usize| ((s as f64 * scale).round() as usize).max(1);
    if width >= height {
        (target_long_side, short(height))
    } else {
        (short(width), target_long_side)
    }
}

/// BT.601 luma in `[0, 1]`.
pub fn to_gray(img: &DynamicImage) -> Vec<f32> {
    match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let y = LUMA_BT601[0] * p[0] as f64 + LUMA_BT601[1] * p[1] as f64 + LUMA_BT601[2] * p[2] as f64;
                y.clamp(0.0, 1.0) as f32
            })
            .collect(),
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
///
/// Destination pixel `u` samples source coordinate `(u + 0.5) * sw / dw - 0.5`.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh);
    let taps = |dst: usize, src_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst as f64;
        (0..dst)
            .map(|u| {
                let s = ((u as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(dw, sw);
    let ys = taps(dh, sh);

    let mut out = Vec::with_capacity(dw * dh);
    for &(y0, y1, fy) in &ys {
        let r0 = &src[y0 * sw..(y0 + 1) * sw];
        let r1 = &src[y1 * sw..(y1 + 1) * sw];
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}
