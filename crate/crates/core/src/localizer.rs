//! Localization by maximum match count against a gallery.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract, FeatureBackend, FeaturePyramid};
use crate::gallery::{GalleryIndex, ManifestRecord};
use crate::imaging::{load_image, Image};
use crate::matcher::{match_pyramids, FineMatch, MatchParams};
use crate::vehicle_filter::{count_surviving, DetectionFilter, DetectionMap, DetectionSet, RemovalRule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeOptions {
    pub params: MatchParams,
    pub use_vehicle_filter: bool,
    pub removal_rule: RemovalRule,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions {
            params: MatchParams::default(),
            use_vehicle_filter: true,
            removal_rule: RemovalRule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub query_id: String,
    /// Surviving matches per entry, in index order.
    pub counts: Vec<usize>,
    /// Matches per entry before vehicle removal.
    pub raw_counts: Vec<usize>,
    pub best_index: usize,
    pub best_entry: String,
    pub predicted_section: String,
    pub best_count: usize,
    pub second_count: usize,
    pub second_best_ratio: f64,
    /// Set when no entry has any surviving match.
    pub low_confidence: bool,
}

impl LocalizationResult {
    /// `query_id predicted_section best_entry best_count second_count ratio`
    pub fn report_line(&self) -> String {
        format!(
            "{} {} {} {} {} {:.4}",
            self.query_id,
            self.predicted_section,
            self.best_entry,
            self.best_count,
            self.second_count,
            self.second_best_ratio
        )
    }
}

/// Index of the largest count (earliest on ties), the largest count and
/// the largest count among the other entries.
pub fn best_and_second(counts: &[usize]) -> Option<(usize, usize, usize)> {
    let mut best: Option<usize> = None;
    for (i, &c) in counts.iter().enumerate() {
        if best.is_none_or(|b| c > counts[b]) {
            best = Some(i);
        }
    }
    let b = best?;
    let second = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != b)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    Some((b, counts[b], second))
}

pub fn second_best_ratio(best: usize, second: usize) -> f64 {
    if best == 0 {
        0.0
    } else {
        second as f64 / best as f64
    }
}

/// Builds the result from per-entry counts.
pub fn decide(
    query_id: &str,
    counts: Vec<usize>,
    raw_counts: Vec<usize>,
    index: &GalleryIndex,
) -> Result<LocalizationResult> {
    if index.is_empty() {
        return Err(Error::InvalidInput("gallery index is empty".into()));
    }
    if counts.len() != index.len() || raw_counts.len() != index.len() {
        return Err(Error::InvalidInput(format!(
            "{} counts for {} entries",
            counts.len(),
            index.len()
        )));
    }
    let (b, best_count, second_count) = best_and_second(&counts).expect("index is not empty");
    let entry = &index.entries[b];
    Ok(LocalizationResult {
        query_id: query_id.to_string(),
        best_index: b,
        best_entry: entry.source_id.clone(),
        predicted_section: entry.section_id.clone(),
        best_count,
        second_count,
        second_best_ratio: second_best_ratio(best_count, second_count),
        low_confidence: best_count == 0,
        counts,
        raw_counts,
    })
}

/// Matches the query against every entry on the current rayon pool.
/// Results are in index order.
pub fn match_all(query: &FeaturePyramid, index: &GalleryIndex, params: &MatchParams) -> Result<Vec<Vec<FineMatch>>> {
    if index.is_empty() {
        return Err(Error::InvalidInput("gallery index is empty".into()));
    }
    params.validate()?;
    index.check_query(query)?;
    index
        .entries
        .par_iter()
        .map(|e| match_pyramids(query, &e.pyramid, params))
        .collect()
}

/// Counts from precomputed raw matches.
pub fn localize_from_matches(
    query_id: &str,
    matches: &[Vec<FineMatch>],
    query_detections: &DetectionSet,
    index: &GalleryIndex,
    use_vehicle_filter: bool,
    rule: RemovalRule,
) -> Result<LocalizationResult> {
    let raw: Vec<usize> = matches.iter().map(Vec::len).collect();
    let counts = if use_vehicle_filter {
        matches
            .iter()
            .zip(&index.entries)
            .map(|(m, e)| count_surviving(m, query_detections, &e.detections, rule))
            .collect()
    } else {
        raw.clone()
    };
    decide(query_id, counts, raw, index)
}

pub fn localize_pyramid(
    query: &FeaturePyramid,
    query_detections: &DetectionSet,
    index: &GalleryIndex,
    opts: &LocalizeOptions,
) -> Result<LocalizationResult> {
    let matches = match_all(query, index, &opts.params)?;
    localize_from_matches(
        &query.source_id,
        &matches,
        query_detections,
        index,
        opts.use_vehicle_filter,
        opts.removal_rule,
    )
}

/// `query_detections` must be in the preprocessed frame of `query`.
pub fn localize(
    query: &Image,
    query_detections: &DetectionSet,
    index: &GalleryIndex,
    backend: &FeatureBackend,
    opts: &LocalizeOptions,
) -> Result<LocalizationResult> {
    if index.is_empty() {
        return Err(Error::InvalidInput("gallery index is empty".into()));
    }
    let pyramid = extract(query, backend)?;
    localize_pyramid(&pyramid, query_detections, index, opts)
}

/// A preprocessed query ready for matching.
#[derive(Clone, Debug)]
pub struct QueryInput {
    pub pyramid: FeaturePyramid,
    /// Boxes in the preprocessed frame.
    pub detections: DetectionSet,
}

/// Loads, preprocesses and extracts every query record on the current
/// rayon pool. `detections` holds boxes in original pixels.
pub fn prepare_queries(
    records: &[ManifestRecord],
    backend: &FeatureBackend,
    target_long_side: u32,
    detections: &DetectionMap,
    filter: &DetectionFilter,
) -> Result<Vec<QueryInput>> {
    let known: HashSet<&str> = records.iter().map(|r| r.source_id.as_str()).collect();
    for id in detections.keys() {
        if !known.contains(id.as_str()) {
            log::warn!("detections for unknown query id {id}");
        }
    }
    records
        .par_iter()
        .map(|r| {
            let image = load_image(&r.image_path, target_long_side)?.with_source_id(r.source_id.clone());
            let pyramid = extract(&image, backend)?;
            let kept = DetectionSet {
                source_id: r.source_id.clone(),
                boxes: detections
                    .get(&r.source_id)
                    .map(|d| d.boxes.iter().filter(|b| filter.accepts(b)).cloned().collect())
                    .unwrap_or_default(),
            };
            Ok(QueryInput {
                pyramid,
                detections: kept.to_image_frame(image.scale_from_original(), image.width(), image.height()),
            })
        })
        .collect()
}

/// Localizes every query; queries and entries are matched in parallel and
/// results keep query order.
pub fn localize_all(
    queries: &[QueryInput],
    index: &GalleryIndex,
    opts: &LocalizeOptions,
) -> Result<Vec<LocalizationResult>> {
    queries
        .par_iter()
        .map(|q| localize_pyramid(&q.pyramid, &q.detections, index, opts))
        .collect()
}

pub fn format_report(results: &[LocalizationResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{}", r.report_line());
    }
    s
}
