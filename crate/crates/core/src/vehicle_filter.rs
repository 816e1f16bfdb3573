//! Vehicle detections and removal of matches that land on vehicles.
//!
//! Detection files hold one record per line,
//! `source_id class score x_min y_min x_max y_max`, in original-image pixels.
//! Blank lines and anything after `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::FineMatch;

pub const VEHICLE_CLASSES: [&str; 4] = ["car", "truck", "bus", "motorcycle"];
pub const DEFAULT_MIN_SCORE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_label: String,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        class_label: impl Into<String>,
        score: f64,
    ) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
            class_label: class_label.into(),
            score,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("box has non-finite coordinates".into()));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::InvalidInput(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidInput(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Inclusive on every edge.
    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
            ..self.clone()
        }
    }

    pub fn intersects_image(&self, width: f64, height: f64) -> bool {
        self.x_max >= 0.0 && self.y_max >= 0.0 && self.x_min <= width && self.y_min <= height
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub source_id: String,
    pub boxes: Vec<BoundingBox>,
}

impl DetectionSet {
    pub fn empty(source_id: impl Into<String>) -> Self {
        DetectionSet {
            source_id: source_id.into(),
            boxes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> DetectionSet {
        DetectionSet {
            source_id: self.source_id.clone(),
            boxes: self.boxes.iter().map(|b| b.scaled(sx, sy)).collect(),
        }
    }

    /// Maps boxes from original pixels into a preprocessed image frame of
    /// `width` x `height`, dropping boxes that miss the image.
    pub fn to_image_frame(&self, scale: (f64, f64), width: usize, height: usize) -> DetectionSet {
        let mut out = self.scaled(scale.0, scale.1);
        let before = out.boxes.len();
        out.boxes.retain(|b| b.intersects_image(width as f64, height as f64));
        if out.boxes.len() != before {
            log::warn!(
                "{}: dropped {} box(es) outside the {width}x{height} image",
                self.source_id,
                before - out.boxes.len()
            );
        }
        out
    }
}

/// Which detections are kept when reading a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionFilter {
    pub classes: Vec<String>,
    pub min_score: f64,
}

impl Default for DetectionFilter {
    fn default() -> Self {
        DetectionFilter {
            classes: VEHICLE_CLASSES.iter().map(|s| s.to_string()).collect(),
            min_score: DEFAULT_MIN_SCORE,
        }
    }
}

impl DetectionFilter {
    /// Keeps everything.
    pub fn any() -> Self {
        DetectionFilter {
            classes: Vec::new(),
            min_score: 0.0,
        }
    }

    pub fn accepts(&self, b: &BoundingBox) -> bool {
        b.score >= self.min_score && (self.classes.is_empty() || self.classes.contains(&b.class_label))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::InvalidInput(format!(
                "min_score {} outside [0, 1]",
                self.min_score
            )));
        }
        Ok(())
    }
}

pub type DetectionMap = BTreeMap<String, DetectionSet>;

pub fn parse_detections(text: &str, origin: &str, filter: &DetectionFilter) -> Result<DetectionMap> {
    let mut map = DetectionMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(parse_err(format!("expected 7 fields, found {}", fields.len())));
        }
        let mut nums = [0f64; 5];
        for (k, f) in fields[2..].iter().enumerate() {
            nums[k] = f.parse().map_err(|_| parse_err(format!("not a number: {f:?}")))?;
        }
        let b = BoundingBox::new(nums[1], nums[2], nums[3], nums[4], fields[1], nums[0])
            .map_err(|e| parse_err(e.to_string()))?;
        let set = map
            .entry(fields[0].to_string())
            .or_insert_with(|| DetectionSet::empty(fields[0]));
        if filter.accepts(&b) {
            set.boxes.push(b);
        }
    }
    Ok(map)
}

pub fn load_detections(path: impl AsRef<Path>, filter: &DetectionFilter) -> Result<DetectionMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string(), filter)
}

/// Writes records in the file format; coordinates use the shortest
/// representation that reads back exactly.
pub fn format_detections<'a>(sets: impl IntoIterator<Item = &'a DetectionSet>) -> String {
    let mut s = String::new();
    for set in sets {
        for b in &set.boxes {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                set.source_id, b.class_label, b.score, b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
    }
    s
}

/// Which match endpoints must avoid vehicles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalRule {
    /// Removed when either endpoint lies in a box on its own image.
    #[default]
    EitherEndpoint,
    /// Removed only when both endpoints lie in boxes.
    BothEndpoints,
}

pub fn filter_matches(matches: &[FineMatch], det_a: &DetectionSet, det_b: &DetectionSet) -> Vec<FineMatch> {
    filter_matches_with(matches, det_a, det_b, RemovalRule::EitherEndpoint)
}

pub fn filter_matches_with(
    matches: &[FineMatch],
    det_a: &DetectionSet,
    det_b: &DetectionSet,
    rule: RemovalRule,
) -> Vec<FineMatch> {
    matches
        .iter()
        .filter(|m| survives(m, det_a, det_b, rule))
        .copied()
        .collect()
}

/// Count-only form of [`filter_matches_with`].
pub fn count_surviving(matches: &[FineMatch], det_a: &DetectionSet, det_b: &DetectionSet, rule: RemovalRule) -> usize {
    matches.iter().filter(|m| survives(m, det_a, det_b, rule)).count()
}

#[inline]
fn survives(m: &FineMatch, det_a: &DetectionSet, det_b: &DetectionSet, rule: RemovalRule) -> bool {
    let (in_a, in_b) = (det_a.contains(m.point_a), det_b.contains(m.point_b));
    match rule {
        RemovalRule::EitherEndpoint => !(in_a || in_b),
        RemovalRule::BothEndpoints => !(in_a && in_b),
    }
}
