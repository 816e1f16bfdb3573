//! Section-labelled reference images and their persisted index.
//!
//! Manifests hold one record per line, `source_id image_path section_id
//! [section_id_2]`, with paths relative to the manifest's directory. Gallery
//! manifests carry exactly one section per record; query manifests may carry
//! two.
//!
//! An index directory contains `index.json` (format version, build
//! parameters and their hash, entry list), `manifest.txt` (verbatim copy),
//! `detections.txt` (boxes in preprocessed pixels) and one pyramid file per
//! entry under `pyramids/`.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{extract, load_pyramid, save_pyramid, FeatureBackend, FeaturePyramid, PYRAMID_EXTENSION};
use crate::imaging::load_image;
use crate::vehicle_filter::{format_detections, parse_detections, DetectionFilter, DetectionMap, DetectionSet};

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const INDEX_METADATA: &str = "index.json";
pub const INDEX_MANIFEST: &str = "manifest.txt";
pub const INDEX_DETECTIONS: &str = "detections.txt";
pub const INDEX_PYRAMIDS: &str = "pyramids";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub source_id: String,
    pub image_path: PathBuf,
    pub labels: Vec<String>,
}

/// Parses manifest text. `max_labels` is 1 for galleries and 2 for queries.
pub fn parse_manifest(text: &str, base_dir: &Path, origin: &str, max_labels: usize) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 || fields.len() > 2 + max_labels {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: format!(
                    "expected source_id, image_path and 1..={max_labels} section ids, found {} fields",
                    fields.len()
                ),
            });
        }
        let path = Path::new(fields[1]);
        out.push(ManifestRecord {
            source_id: fields[0].to_string(),
            image_path: if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            },
            labels: fields[2..].iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>, max_labels: usize) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(
        &text,
        path.parent().unwrap_or(Path::new("")),
        &path.display().to_string(),
        max_labels,
    )
}

/// Settings that determine the content of an index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub backend: FeatureBackend,
    pub target_long_side: u32,
    pub coarse_dims: usize,
    pub fine_dims: usize,
    pub detection_filter: DetectionFilter,
}

impl BuildParams {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("build params serialize");
        hex_digest(json.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub source_id: String,
    pub section_id: String,
    pub pyramid: FeaturePyramid,
    /// Boxes in the preprocessed image frame.
    pub detections: DetectionSet,
    pub original_resolution: (u32, u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub entries: Vec<GalleryEntry>,
    pub sections: BTreeSet<String>,
    pub build_params: BuildParams,
    pub manifest_text: String,
}

#[derive(Serialize, Deserialize)]
struct IndexMetadata {
    format_version: u32,
    build_params: BuildParams,
    build_params_hash: String,
    entries: Vec<EntryMetadata>,
}

#[derive(Serialize, Deserialize)]
struct EntryMetadata {
    source_id: String,
    section_id: String,
    pyramid: String,
    original_width: u32,
    original_height: u32,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, source_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.source_id == source_id)
    }

    /// Fails when a query pyramid cannot be matched against the entries.
    pub fn check_query(&self, query: &FeaturePyramid) -> Result<()> {
        let bp = &self.build_params;
        if query.coarse.dims() != bp.coarse_dims || query.fine.dims() != bp.fine_dims {
            return Err(Error::DimensionMismatch(format!(
                "query {} has {}/{} dims, index was built with {}/{}",
                query.source_id,
                query.coarse.dims(),
                query.fine.dims(),
                bp.coarse_dims,
                bp.fine_dims
            )));
        }
        Ok(())
    }

    /// Warns about query settings that differ from the build. Returns
    /// whether they agree.
    pub fn compare_query_settings(&self, backend: &FeatureBackend, target_long_side: u32) -> bool {
        let bp = &self.build_params;
        let mut same = true;
        if bp.backend.name() != backend.name() {
            log::warn!(
                "index built with {} features, querying with {}",
                bp.backend.name(),
                backend.name()
            );
            same = false;
        }
        if bp.target_long_side != target_long_side {
            log::warn!(
                "index built at long side {}, querying at {target_long_side}",
                bp.target_long_side
            );
            same = false;
        }
        same
    }

    /// Writes the index into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let pyr_dir = dir.join(INDEX_PYRAMIDS);
        std::fs::create_dir_all(&pyr_dir).map_err(|e| Error::io(&pyr_dir, e))?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let rel = format!("{INDEX_PYRAMIDS}/{i:05}.{PYRAMID_EXTENSION}");
            save_pyramid(&e.pyramid, dir.join(&rel))?;
            entries.push(EntryMetadata {
                source_id: e.source_id.clone(),
                section_id: e.section_id.clone(),
                pyramid: rel,
                original_width: e.original_resolution.0,
                original_height: e.original_resolution.1,
            });
        }
        let meta = IndexMetadata {
            format_version: INDEX_FORMAT_VERSION,
            build_params: self.build_params.clone(),
            build_params_hash: self.build_params.hash(),
            entries,
        };
        let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        json.push('\n');
        write_file(&dir.join(INDEX_METADATA), json.as_bytes())?;
        write_file(&dir.join(INDEX_MANIFEST), self.manifest_text.as_bytes())?;
        let dets = format_detections(self.entries.iter().map(|e| &e.detections));
        write_file(&dir.join(INDEX_DETECTIONS), dets.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Extracts every manifest image and attaches its detections.
///
/// `detections` holds boxes in original-image pixels; images without an
/// entry get an empty set. Extraction runs on the current rayon pool and
/// entries keep manifest order.
pub fn build_index(
    manifest_path: impl AsRef<Path>,
    backend: &FeatureBackend,
    target_long_side: u32,
    detections: &DetectionMap,
    detection_filter: &DetectionFilter,
) -> Result<GalleryIndex> {
    let manifest_path = manifest_path.as_ref();
    let manifest_text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let records = parse_manifest(
        &manifest_text,
        manifest_path.parent().unwrap_or(Path::new("")),
        &manifest_path.display().to_string(),
        1,
    )?;
    build_from_records(
        &records,
        manifest_text,
        backend,
        target_long_side,
        detections,
        detection_filter,
    )
}

pub fn build_from_records(
    records: &[ManifestRecord],
    manifest_text: String,
    backend: &FeatureBackend,
    target_long_side: u32,
    detections: &DetectionMap,
    detection_filter: &DetectionFilter,
) -> Result<GalleryIndex> {
    let mut seen = HashSet::new();
    let dupes: Vec<&str> = records
        .iter()
        .filter(|r| !seen.insert(r.source_id.as_str()))
        .map(|r| r.source_id.as_str())
        .collect();
    if !dupes.is_empty() {
        return Err(Error::Build(format!("duplicate source ids: {}", dupes.join(", "))));
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !r.image_path.is_file())
        .map(|r| r.image_path.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Build(format!("missing images: {}", missing.join(", "))));
    }
    if records.is_empty() {
        return Err(Error::Build("manifest lists no images".into()));
    }
    for id in detections.keys() {
        if !seen.contains(id.as_str()) {
            log::warn!("detections for unknown source id {id}");
        }
    }

    let entries = records
        .par_iter()
        .map(|r| {
            let image = load_image(&r.image_path, target_long_side)?.with_source_id(r.source_id.clone());
            let pyramid = extract(&image, backend)?;
            let raw = detections
                .get(&r.source_id)
                .cloned()
                .unwrap_or_else(|| DetectionSet::empty(r.source_id.clone()));
            let mut dets = DetectionSet {
                source_id: r.source_id.clone(),
                boxes: raw.boxes.into_iter().filter(|b| detection_filter.accepts(b)).collect(),
            };
            dets = dets.to_image_frame(image.scale_from_original(), image.width(), image.height());
            Ok(GalleryEntry {
                source_id: r.source_id.clone(),
                section_id: r.labels[0].clone(),
                pyramid,
                detections: dets,
                original_resolution: image.original_size(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let first = &entries[0].pyramid;
    let (cd, fd) = (first.coarse.dims(), first.fine.dims());
    if let Some(bad) = entries
        .iter()
        .find(|e| e.pyramid.coarse.dims() != cd || e.pyramid.fine.dims() != fd)
    {
        return Err(Error::Build(format!(
            "{} has {}/{} descriptor dims, first entry has {cd}/{fd}",
            bad.source_id,
            bad.pyramid.coarse.dims(),
            bad.pyramid.fine.dims()
        )));
    }
    Ok(GalleryIndex {
        sections: entries.iter().map(|e| e.section_id.clone()).collect(),
        build_params: BuildParams {
            backend: backend.clone(),
            target_long_side,
            coarse_dims: cd,
            fine_dims: fd,
            detection_filter: detection_filter.clone(),
        },
        entries,
        manifest_text,
    })
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<GalleryIndex> {
    let dir = dir.as_ref();
    let meta_path = dir.join(INDEX_METADATA);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: IndexMetadata =
        serde_json::from_str(&meta_text).map_err(|e| Error::Load(format!("{}: {e}", meta_path.display())))?;
    if meta.format_version != INDEX_FORMAT_VERSION {
        return Err(Error::Load(format!(
            "index format version {} is not supported (expected {INDEX_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.build_params_hash != meta.build_params.hash() {
        return Err(Error::Load("build parameters do not match their recorded hash".into()));
    }
    let manifest_path = dir.join(INDEX_MANIFEST);
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let det_path = dir.join(INDEX_DETECTIONS);
    let det_text = std::fs::read_to_string(&det_path).map_err(|e| Error::io(&det_path, e))?;
    let mut dets = parse_detections(&det_text, &det_path.display().to_string(), &DetectionFilter::any())?;

    let bp = &meta.build_params;
    let mut entries = Vec::with_capacity(meta.entries.len());
    for em in meta.entries {
        let mut pyramid = load_pyramid(dir.join(&em.pyramid))
            .map_err(|e| Error::Load(format!("entry {} ({}): {e}", em.source_id, em.pyramid)))?;
        if pyramid.coarse.dims() != bp.coarse_dims || pyramid.fine.dims() != bp.fine_dims {
            return Err(Error::Load(format!(
                "entry {} ({}) has {}/{} dims, build parameters say {}/{}",
                em.source_id,
                em.pyramid,
                pyramid.coarse.dims(),
                pyramid.fine.dims(),
                bp.coarse_dims,
                bp.fine_dims
            )));
        }
        pyramid.source_id = em.source_id.clone();
        entries.push(GalleryEntry {
            detections: dets
                .remove(&em.source_id)
                .unwrap_or_else(|| DetectionSet::empty(em.source_id.clone())),
            source_id: em.source_id,
            section_id: em.section_id,
            pyramid,
            original_resolution: (em.original_width, em.original_height),
        });
    }
    if let Some(id) = dets.keys().next() {
        return Err(Error::Load(format!("detections reference unknown entry {id}")));
    }
    Ok(GalleryIndex {
        sections: entries.iter().map(|e| e.section_id.clone()).collect(),
        build_params: meta.build_params,
        entries,
        manifest_text,
    })
}

/// SHA-256 over every file in `dir`, visited in sorted relative-path order.
pub fn directory_digest(dir: impl AsRef<Path>) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
            }
        }
        Ok(())
    }
    let dir = dir.as_ref();
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
