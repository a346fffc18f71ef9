//! Per-slide bunches of barcodes, the archive index holding them, and its
//! on-disk container.

mod format;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::barcode::{minmax_barcode, BunchOfBarcodes};
use crate::error::{Error, Result};
use crate::features::{ExtractorDescriptor, FeatureExtractor};
use crate::mosaic::{build_mosaic, IndexingConfig, Mosaic, PatchRef};
use crate::slide_io::{normalize_label, open_slide, select_magnification, Level, SlideLabels, SlidePyramid};
use crate::tissue::{load_mask_override, segment_tissue, TissueMask};

pub use format::{decode_index, encode_index, load_index, save_index, FORMAT_VERSION, MAGIC};

/// Where a mosaic patch was read at the indexing magnification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub x: u32,
    pub y: u32,
    /// The window was shifted to fit inside the level.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSlide {
    pub slide_id: String,
    pub labels: SlideLabels,
    pub bob: BunchOfBarcodes,
    /// Aligned with `bob.patches`.
    pub placements: Vec<Placement>,
}

impl IndexedSlide {
    pub fn len(&self) -> usize {
        self.bob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bob.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveIndex {
    pub config: IndexingConfig,
    pub extractor: ExtractorDescriptor,
    slides: BTreeMap<String, IndexedSlide>,
}

impl ArchiveIndex {
    pub fn new(config: IndexingConfig, extractor: ExtractorDescriptor) -> Self {
        Self {
            config,
            extractor,
            slides: BTreeMap::new(),
        }
    }

    /// Barcode length shared by every slide.
    pub fn barcode_len(&self) -> usize {
        self.extractor.d.saturating_sub(1)
    }

    pub fn insert(&mut self, slide: IndexedSlide) -> Result<()> {
        if slide.bob.extractor_id != self.extractor.extractor_id {
            return Err(Error::ExtractorMismatch {
                expected: self.extractor.extractor_id.clone(),
                found: slide.bob.extractor_id.clone(),
            });
        }
        if slide.bob.barcode_len() != self.barcode_len() {
            return Err(Error::BarcodeLength(self.barcode_len(), slide.bob.barcode_len()));
        }
        if slide.placements.len() != slide.bob.len() {
            return Err(Error::Corrupt(format!("slide {} has misaligned placements", slide.slide_id)));
        }
        if self.slides.contains_key(&slide.slide_id) {
            return Err(Error::DuplicateSlide(slide.slide_id));
        }
        self.slides.insert(slide.slide_id.clone(), slide);
        Ok(())
    }

    pub fn get(&self, slide_id: &str) -> Option<&IndexedSlide> {
        self.slides.get(slide_id)
    }

    /// Slides in slide-id order.
    pub fn slides(&self) -> impl Iterator<Item = &IndexedSlide> {
        self.slides.values()
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }

    pub fn total_barcodes(&self) -> usize {
        self.slides.values().map(IndexedSlide::len).sum()
    }
}

/// Slide ids whose normalized primary site equals the normalized `site`.
pub fn filter_by_site(index: &ArchiveIndex, site: &str) -> Vec<String> {
    let wanted = normalize_label(site);
    index
        .slides()
        .filter(|s| s.labels.primary_site.as_deref() == Some(wanted.as_str()))
        .map(|s| s.slide_id.clone())
        .collect()
}

/// Tissue mask at the clustering magnification, honoring a mask override
/// stored beside the manifest.
pub fn clustering_mask(slide: &SlidePyramid, cfg: &IndexingConfig) -> Result<TissueMask> {
    let level = select_magnification(slide, cfg.m_x_c);
    if let Some(root) = slide.root() {
        if let Some(mask) = load_mask_override(root, level)? {
            return Ok(mask);
        }
    }
    segment_tissue(level, &cfg.segmentation)
}

/// Maps a clustering-magnification patch to an `s_h` window at the indexing
/// level, centered on the scaled patch center and shifted inside the level.
pub fn place_patch(patch: &PatchRef, cfg: &IndexingConfig, cluster_mag: f64, index_level: &Level) -> Result<Placement> {
    if index_level.width_px < cfg.s_h || index_level.height_px < cfg.s_h {
        return Err(Error::OutOfBounds {
            x: 0,
            y: 0,
            size: cfg.s_h,
            width: index_level.width_px,
            height: index_level.height_px,
        });
    }
    let scale = index_level.magnification / cluster_mag;
    let half_low = f64::from(cfg.s_l) / 2.0;
    let half_high = f64::from(cfg.s_h) / 2.0;
    let axis = |origin: u32, extent: u32| {
        let want = ((f64::from(origin) + half_low) * scale - half_high).round();
        let max = f64::from(extent - cfg.s_h);
        let got = want.clamp(0.0, max);
        (got as u32, got != want)
    };
    let (x, cx) = axis(patch.origin_x, index_level.width_px);
    let (y, cy) = axis(patch.origin_y, index_level.height_px);
    Ok(Placement { x, y, clamped: cx || cy })
}

/// Segments, builds the mosaic, and barcodes every mosaic patch read at
/// the indexing magnification.
pub fn index_slide(slide: &SlidePyramid, cfg: &IndexingConfig, extractor: &dyn FeatureExtractor) -> Result<IndexedSlide> {
    let mask = clustering_mask(slide, cfg)?;
    let mosaic = build_mosaic(slide, &mask, cfg)?;
    barcode_mosaic(slide, &mosaic, extractor)
}

pub fn barcode_mosaic(slide: &SlidePyramid, mosaic: &Mosaic, extractor: &dyn FeatureExtractor) -> Result<IndexedSlide> {
    let cfg = &mosaic.config;
    let descriptor = extractor.descriptor();
    let cluster_mag = select_magnification(slide, cfg.m_x_c).magnification;
    let index_level = select_magnification(slide, cfg.m_x_idx);

    let coded: Vec<(Placement, crate::barcode::Barcode)> = mosaic
        .patches
        .par_iter()
        .map(|patch| {
            let placement = place_patch(patch, cfg, cluster_mag, index_level)?;
            let pixels = || index_level.read_region(placement.x, placement.y, cfg.s_h);
            let features = extractor.extract(patch, &pixels)?;
            if features.d() != descriptor.d {
                return Err(Error::DimensionMismatch {
                    expected: descriptor.d,
                    found: features.d(),
                });
            }
            Ok((placement, minmax_barcode(&features)?))
        })
        .collect::<Result<_>>()?;
    let (placements, barcodes): (Vec<_>, Vec<_>) = coded.into_iter().unzip();

    Ok(IndexedSlide {
        slide_id: slide.slide_id.clone(),
        labels: slide.labels.clone(),
        bob: BunchOfBarcodes::new(&slide.slide_id, &descriptor.extractor_id, mosaic.patches.clone(), barcodes)?,
        placements,
    })
}

/// Result of indexing a directory of slides.
#[derive(Debug)]
pub struct IndexBuild {
    pub index: ArchiveIndex,
    /// Slides left out (unreadable, single-level, no tissue, ...).
    pub skipped: Vec<(PathBuf, Error)>,
}

/// Indexes every slide directory in `slide_dirs` in parallel. Slides that
/// fail are reported in `skipped`; duplicate ids are a hard error.
pub fn build_index(slide_dirs: &[impl AsRef<Path> + Sync], cfg: &IndexingConfig, extractor: &dyn FeatureExtractor) -> Result<IndexBuild> {
    cfg.validate()?;
    let results: Vec<(PathBuf, Result<IndexedSlide>)> = slide_dirs
        .par_iter()
        .map(|dir| {
            let dir = dir.as_ref().to_path_buf();
            let indexed = open_slide(&dir).and_then(|s| index_slide(&s, cfg, extractor));
            (dir, indexed)
        })
        .collect();

    let mut index = ArchiveIndex::new(cfg.clone(), extractor.descriptor());
    let mut skipped = Vec::new();
    for (dir, res) in results {
        match res {
            Ok(slide) => index.insert(slide)?,
            Err(e) => skipped.push((dir, e)),
        }
    }
    Ok(IndexBuild { index, skipped })
}
