//! Request and response bodies shared by the HTTP handlers and the CLI.
//! Every function here is synchronous and works on a borrowed index.

use std::path::Path;

use bob_core::barcode::BunchOfBarcodes;
use bob_core::features::{ExtractorKind, ReferenceExtractor, REFERENCE_ID};
use bob_core::index_store::{index_slide, ArchiveIndex, IndexedSlide};
use bob_core::search::{barcode_minima, patch_knn, scan_knn, subsample, ScanQuery, SearchMode};
use bob_core::slide_io::open_slide;
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const DEFAULT_K: usize = 10;

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    #[default]
    Horizontal,
    Vertical,
}

pub fn resolve_mode(mode: ModeName, site: Option<&str>) -> Result<SearchMode, ApiError> {
    match (mode, site) {
        (ModeName::Horizontal, None) => Ok(SearchMode::Horizontal),
        (ModeName::Horizontal, Some(_)) => Err(ApiError::invalid("`site` applies to vertical search only")),
        (ModeName::Vertical, Some(s)) if !s.trim().is_empty() => Ok(SearchMode::Vertical(s.to_string())),
        (ModeName::Vertical, _) => Err(ApiError::invalid("vertical search needs a `site`")),
    }
}

const PATH_SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~');

pub fn thumbnail_url(slide_id: &str) -> String {
    format!("/slides/{}/thumbnail", utf8_percent_encode(slide_id, PATH_SEGMENT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub slide_id: String,
    pub primary_site: Option<String>,
    pub primary_diagnosis: Option<String>,
    pub barcodes: usize,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideList {
    pub extractor_id: String,
    pub barcode_len: usize,
    pub slides: Vec<SlideSummary>,
}

pub fn list_slides(index: &ArchiveIndex) -> SlideList {
    SlideList {
        extractor_id: index.extractor.extractor_id.clone(),
        barcode_len: index.barcode_len(),
        slides: index
            .slides()
            .map(|s| SlideSummary {
                slide_id: s.slide_id.clone(),
                primary_site: s.labels.primary_site.clone(),
                primary_diagnosis: s.labels.primary_diagnosis.clone(),
                barcodes: s.len(),
                thumbnail: thumbnail_url(&s.slide_id),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRequest {
    #[serde(default)]
    pub slide_id: Option<String>,
    /// Path of a slide directory readable by the server.
    #[serde(default)]
    pub upload: Option<String>,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Include each result's per-barcode minimum distances.
    #[serde(default)]
    pub minima: bool,
}

impl ScanRequest {
    pub fn for_slide(slide_id: impl Into<String>, k: usize) -> Self {
        Self {
            slide_id: Some(slide_id.into()),
            upload: None,
            mode: ModeName::Horizontal,
            site: None,
            k,
            fraction: None,
            seed: None,
            minima: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResultEntry {
    pub rank: usize,
    pub slide_id: String,
    pub distance: u32,
    pub primary_site: Option<String>,
    pub primary_diagnosis: Option<String>,
    pub thumbnail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minima: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResponse {
    pub query_id: String,
    pub uploaded: bool,
    pub mode: ModeName,
    pub site: Option<String>,
    pub k: usize,
    pub fraction: f64,
    pub seed: u64,
    pub results: Vec<ScanResultEntry>,
}

/// Indexes a slide directory that is not part of the archive, under the
/// archive's own configuration.
pub fn index_upload(index: &ArchiveIndex, dir: &Path) -> Result<IndexedSlide, ApiError> {
    let ex = &index.extractor;
    if ex.kind != ExtractorKind::BuiltIn || ex.extractor_id != REFERENCE_ID {
        return Err(ApiError::invalid(format!(
            "uploads need the built-in extractor; this index uses `{}`",
            ex.extractor_id
        )));
    }
    let slide = open_slide(dir).map_err(|e| ApiError::invalid(e.to_string()))?;
    let extractor = ReferenceExtractor::new(index.config.s_h)?;
    index_slide(&slide, &index.config, &extractor).map_err(|e| ApiError::invalid(e.to_string()))
}

/// Resolves the query bunch: the uploaded slide if given, else the indexed one.
pub fn query_bunch<'a>(
    index: &'a ArchiveIndex,
    req: &ScanRequest,
    upload: Option<&'a IndexedSlide>,
) -> Result<&'a BunchOfBarcodes, ApiError> {
    match (upload, &req.slide_id) {
        (Some(u), None) => Ok(&u.bob),
        (None, Some(id)) => index
            .get(id)
            .map(|s| &s.bob)
            .ok_or_else(|| ApiError::not_found(format!("unknown slide {id}"))),
        (Some(_), Some(_)) => Err(ApiError::invalid("give either `slide_id` or `upload`, not both")),
        (None, None) => Err(ApiError::invalid("give `slide_id` or `upload`")),
    }
}

/// Runs a scan search. `upload` must be the already indexed slide named by
/// `req.upload`, if any.
pub fn scan_search(index: &ArchiveIndex, req: &ScanRequest, upload: Option<&IndexedSlide>) -> Result<ScanResponse, ApiError> {
    if req.upload.is_some() != upload.is_some() {
        return Err(ApiError::internal("upload was not indexed"));
    }
    let mode = resolve_mode(req.mode, req.site.as_deref())?;
    let bunch = query_bunch(index, req, upload)?;
    let fraction = req.fraction.unwrap_or(1.0);
    let seed = req.seed.unwrap_or(0);
    let query = ScanQuery::new(bunch, mode, req.k).with_fraction(fraction, seed);
    let result = scan_knn(&query, index)?;
    let probe = if req.minima {
        Some(subsample(&bunch.barcodes, fraction, seed)?)
    } else {
        None
    };
    let results = result
        .ranked
        .into_iter()
        .enumerate()
        .map(|(i, hit)| {
            let slide = index.get(&hit.slide_id).expect("ranked slides are indexed");
            let minima = probe
                .as_ref()
                .map(|p| barcode_minima(p, &slide.bob.barcodes))
                .transpose()?;
            Ok(ScanResultEntry {
                rank: i + 1,
                thumbnail: thumbnail_url(&hit.slide_id),
                primary_site: slide.labels.primary_site.clone(),
                primary_diagnosis: slide.labels.primary_diagnosis.clone(),
                slide_id: hit.slide_id,
                distance: hit.distance,
                minima,
            })
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(ScanResponse {
        query_id: result.query_id,
        uploaded: upload.is_some(),
        mode: req.mode,
        site: req.site.clone(),
        k: req.k,
        fraction,
        seed,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRequest {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default)]
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResultEntry {
    pub rank: usize,
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub color_cluster: u32,
    pub distance: u32,
    pub primary_site: Option<String>,
    pub primary_diagnosis: Option<String>,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResponse {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub mode: ModeName,
    pub site: Option<String>,
    pub k: usize,
    pub results: Vec<PatchResultEntry>,
}

pub fn patch_search(index: &ArchiveIndex, req: &PatchRequest) -> Result<PatchResponse, ApiError> {
    let mode = resolve_mode(req.mode, req.site.as_deref())?;
    if req.k == 0 {
        return Err(ApiError::invalid("k must be at least 1"));
    }
    let slide = index
        .get(&req.slide_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown slide {}", req.slide_id)))?;
    let at = slide
        .bob
        .patches
        .iter()
        .position(|p| p.grid_x == req.grid_x && p.grid_y == req.grid_y)
        .ok_or_else(|| {
            ApiError::not_found(format!(
                "slide {} has no mosaic patch at ({}, {})",
                req.slide_id, req.grid_x, req.grid_y
            ))
        })?;
    let hits = patch_knn(&slide.bob.barcodes[at], index, req.k, &mode)?;
    let results = hits
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let labels = &index.get(&h.patch.slide_id).expect("hit slides are indexed").labels;
            PatchResultEntry {
                rank: i + 1,
                thumbnail: thumbnail_url(&h.patch.slide_id),
                primary_site: labels.primary_site.clone(),
                primary_diagnosis: labels.primary_diagnosis.clone(),
                grid_x: h.patch.grid_x,
                grid_y: h.patch.grid_y,
                origin_x: h.patch.origin_x,
                origin_y: h.patch.origin_y,
                color_cluster: h.patch.color_cluster,
                slide_id: h.patch.slide_id,
                distance: h.distance,
            }
        })
        .collect();
    Ok(PatchResponse {
        slide_id: req.slide_id.clone(),
        grid_x: req.grid_x,
        grid_y: req.grid_y,
        mode: req.mode,
        site: req.site.clone(),
        k: req.k,
        results,
    })
}
