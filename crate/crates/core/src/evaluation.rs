//! Accuracy, count-matrix normalization, second-best ratio histograms and
//! the vehicle-removal ablation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{GalleryIndex, ManifestRecord};
use crate::localizer::{localize_from_matches, match_all, LocalizationResult, QueryInput};
use crate::matcher::MatchParams;
use crate::vehicle_filter::RemovalRule;

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub query_id: String,
    pub image_path: PathBuf,
    pub labels: Vec<String>,
}

impl QueryAnnotation {
    pub fn new(query_id: impl Into<String>, image_path: impl Into<PathBuf>, labels: Vec<String>) -> Result<Self> {
        let query_id = query_id.into();
        if labels.is_empty() || labels.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "query {query_id} has {} labels, expected 1 or 2",
                labels.len()
            )));
        }
        Ok(QueryAnnotation {
            query_id,
            image_path: image_path.into(),
            labels,
        })
    }
}

pub fn annotations_from_manifest(records: &[ManifestRecord]) -> Result<Vec<QueryAnnotation>> {
    records
        .iter()
        .map(|r| QueryAnnotation::new(r.source_id.clone(), r.image_path.clone(), r.labels.clone()))
        .collect()
}

/// Names annotations whose labels are not gallery sections.
pub fn unknown_labels(annotations: &[QueryAnnotation], sections: &BTreeSet<String>) -> Vec<String> {
    annotations
        .iter()
        .flat_map(|a| {
            a.labels
                .iter()
                .filter(|l| !sections.contains(*l))
                .map(move |l| format!("{}:{l}", a.query_id))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub query_id: String,
    pub predicted_section: String,
    pub labels: Vec<String>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioHistogram {
    /// `bins + 1` equally spaced edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub verdicts: Vec<Verdict>,
    pub ratio_histogram: RatioHistogram,
    pub count_matrix: Vec<Vec<usize>>,
    pub normalized_matrix: Vec<Vec<f64>>,
}

/// Three decimals, the precision reports use.
pub fn format_accuracy(accuracy: f64) -> String {
    format!("{accuracy:.3}")
}

pub fn accuracy(results: &[LocalizationResult], annotations: &[QueryAnnotation]) -> Result<EvalReport> {
    evaluate(results, annotations, DEFAULT_HISTOGRAM_BINS)
}

/// A query is correct when its predicted section is one of its labels.
pub fn evaluate(results: &[LocalizationResult], annotations: &[QueryAnnotation], bins: usize) -> Result<EvalReport> {
    let by_id: HashMap<&str, &QueryAnnotation> = annotations.iter().map(|a| (a.query_id.as_str(), a)).collect();
    if by_id.len() != annotations.len() {
        return Err(Error::Evaluation("duplicate query ids in annotations".into()));
    }
    let mut seen = HashSet::new();
    let mut offenders = Vec::new();
    for r in results {
        if !by_id.contains_key(r.query_id.as_str()) {
            offenders.push(format!("{} (no annotation)", r.query_id));
        }
        if !seen.insert(r.query_id.as_str()) {
            offenders.push(format!("{} (duplicate result)", r.query_id));
        }
    }
    for a in annotations {
        if !seen.contains(a.query_id.as_str()) {
            offenders.push(format!("{} (no result)", a.query_id));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Evaluation(format!(
            "unmatched queries: {}",
            offenders.join(", ")
        )));
    }
    if results.is_empty() {
        return Err(Error::Evaluation("no queries to evaluate".into()));
    }

    let verdicts: Vec<Verdict> = results
        .iter()
        .map(|r| {
            let labels = by_id[r.query_id.as_str()].labels.clone();
            Verdict {
                correct: labels.contains(&r.predicted_section),
                query_id: r.query_id.clone(),
                predicted_section: r.predicted_section.clone(),
                labels,
            }
        })
        .collect();
    let n_correct = verdicts.iter().filter(|v| v.correct).count();
    let ratios: Vec<f64> = results.iter().map(|r| r.second_best_ratio).collect();
    let count_matrix: Vec<Vec<usize>> = results.iter().map(|r| r.counts.clone()).collect();
    let as_f64: Vec<Vec<f64>> = count_matrix
        .iter()
        .map(|row| row.iter().map(|&c| c as f64).collect())
        .collect();
    Ok(EvalReport {
        n_queries: results.len(),
        n_correct,
        accuracy: n_correct as f64 / results.len() as f64,
        verdicts,
        ratio_histogram: ratio_histogram(&ratios, bins)?,
        normalized_matrix: normalize_count_matrix(&as_f64),
        count_matrix,
    })
}

/// Divides each row by its maximum; all-zero rows stay zero.
pub fn normalize_count_matrix(matrix: &[Vec<f64>]) -> Vec<Vec<f64>> {
    matrix
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                row.iter().map(|&v| v / max).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect()
}

/// Equal-width bins over `[0, 1]`. Bin `k` holds `[edge_k, edge_k+1)`; the
/// last bin also holds 1. Ratios outside `[0, 1]` are clamped.
pub fn ratio_histogram(ratios: &[f64], bins: usize) -> Result<RatioHistogram> {
    if bins < 2 {
        return Err(Error::Evaluation(format!("need at least 2 bins, got {bins}")));
    }
    if ratios.iter().any(|r| r.is_nan()) {
        return Err(Error::Evaluation("NaN ratio".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|k| k as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &r in ratios {
        let r = r.clamp(0.0, 1.0);
        let k = edges[1..bins].iter().take_while(|&&e| e <= r).count();
        counts[k] += 1;
    }
    let (mean, median) = if ratios.is_empty() {
        (0.0, 0.0)
    } else {
        let mut sorted = ratios.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        (sorted.iter().sum::<f64>() / n as f64, median)
    };
    Ok(RatioHistogram {
        edges,
        counts,
        mean,
        median,
    })
}

/// Both ablation arms over the same raw matches.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub with_filter: Vec<LocalizationResult>,
    pub without_filter: Vec<LocalizationResult>,
    pub report_with: EvalReport,
    pub report_without: EvalReport,
}

/// Matches every query once and scores the raw matches with and without
/// vehicle removal.
pub fn run_ablation(
    queries: &[QueryInput],
    annotations: &[QueryAnnotation],
    index: &GalleryIndex,
    params: &MatchParams,
    rule: RemovalRule,
    bins: usize,
) -> Result<Ablation> {
    let arms: Vec<(LocalizationResult, LocalizationResult)> = queries
        .par_iter()
        .map(|q| {
            let raw = match_all(&q.pyramid, index, params)?;
            let id = &q.pyramid.source_id;
            Ok((
                localize_from_matches(id, &raw, &q.detections, index, true, rule)?,
                localize_from_matches(id, &raw, &q.detections, index, false, rule)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (with_filter, without_filter): (Vec<_>, Vec<_>) = arms.into_iter().unzip();
    Ok(Ablation {
        report_with: evaluate(&with_filter, annotations, bins)?,
        report_without: evaluate(&without_filter, annotations, bins)?,
        with_filter,
        without_filter,
    })
}

pub fn format_ablation_table(a: &Ablation) -> String {
    let rows = [("without vehicle remover", &a.report_without), ("full", &a.report_with)];
    let mut s = String::new();
    let _ = writeln!(s, "| {:<23} | accuracy | correct |", "");
    let _ = writeln!(s, "|{}|----------|---------|", "-".repeat(25));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "| {:<23} | {:<8} | {:>3}/{:<3} |",
            name,
            format_accuracy(r.accuracy),
            r.n_correct,
            r.n_queries
        );
    }
    s
}

pub fn format_summary(r: &EvalReport) -> String {
    format!(
        "queries {}\ncorrect {}\naccuracy {}\nratio_mean {:.4}\nratio_median {:.4}\n",
        r.n_queries,
        r.n_correct,
        format_accuracy(r.accuracy),
        r.ratio_histogram.mean,
        r.ratio_histogram.median
    )
}

pub fn verdicts_csv(r: &EvalReport) -> String {
    let mut s = String::from("query_id,predicted_section,labels,correct\n");
    for v in &r.verdicts {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            v.query_id,
            v.predicted_section,
            v.labels.join(";"),
            v.correct as u8
        );
    }
    s
}

pub fn histogram_csv(h: &RatioHistogram) -> String {
    let mut s = String::from("bin_low,bin_high,count\n");
    for (k, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{:.4},{:.4},{c}", h.edges[k], h.edges[k + 1]);
    }
    s
}

/// Count matrix with query ids down the side and entry ids across.
pub fn count_matrix_csv(query_ids: &[&str], entry_ids: &[&str], matrix: &[Vec<usize>]) -> String {
    let mut s = format!("query_id,{}\n", entry_ids.join(","));
    for (q, row) in query_ids.iter().zip(matrix) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "{q},{}", cells.join(","));
    }
    s
}

pub fn normalized_matrix_csv(query_ids: &[&str], entry_ids: &[&str], matrix: &[Vec<f64>]) -> String {
    let mut s = format!("query_id,{}\n", entry_ids.join(","));
    for (q, row) in query_ids.iter().zip(matrix) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{q},{}", cells.join(","));
    }
    s
}

/// Grayscale render of a normalized matrix, `cell` px per entry.
pub fn render_matrix(matrix: &[Vec<f64>], cell: u32) -> GrayImage {
    let rows = matrix.len() as u32;
    let cols = matrix.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let cell = cell.max(1);
    GrayImage::from_fn((cols * cell).max(1), (rows * cell).max(1), |x, y| {
        let v = matrix
            .get((y / cell) as usize)
            .and_then(|r| r.get((x / cell) as usize))
            .copied()
            .unwrap_or(0.0);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn save_matrix_png(matrix: &[Vec<f64>], cell: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    render_matrix(matrix, cell)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
