//! Slide pyramids stored as a directory holding `manifest.json` plus one
//! lossless PNG per magnification level.

mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_corpus, ClassSpec, CorpusSpec, GeneratedSlide, TextureFamily};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Allowed rounding slack, in pixels, between declared and actual level sizes.
pub const GEOMETRY_TOLERANCE_PX: i64 = 1;

/// Lowercases, drops punctuation and collapses runs of whitespace.
pub fn normalize_label(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Organ and malignancy labels, normalized on construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideLabels {
    pub primary_site: Option<String>,
    pub primary_diagnosis: Option<String>,
}

impl SlideLabels {
    pub fn new(primary_site: Option<&str>, primary_diagnosis: Option<&str>) -> Self {
        let norm = |s: Option<&str>| s.map(normalize_label).filter(|s| !s.is_empty());
        Self {
            primary_site: norm(primary_site),
            primary_diagnosis: norm(primary_diagnosis),
        }
    }
}

/// One magnification level of a pyramid. Pixels are decoded lazily on the
/// first read and shared afterwards.
#[derive(Debug, Clone)]
pub struct Level {
    pub magnification: f64,
    pub width_px: u32,
    pub height_px: u32,
    file: Option<PathBuf>,
    raster: OnceLock<Arc<RgbImage>>,
}

impl Level {
    /// An in-memory level; used for uploads and tests.
    pub fn from_raster(magnification: f64, raster: RgbImage) -> Self {
        let lock = OnceLock::new();
        let (width_px, height_px) = raster.dimensions();
        let _ = lock.set(Arc::new(raster));
        Self {
            magnification,
            width_px,
            height_px,
            file: None,
            raster: lock,
        }
    }

    fn from_file(magnification: f64, width_px: u32, height_px: u32, file: PathBuf) -> Self {
        Self {
            magnification,
            width_px,
            height_px,
            file: Some(file),
            raster: OnceLock::new(),
        }
    }

    pub fn file(&self) -> Option<&Path> {
        self.file.as_deref()
    }

    /// Full raster of this level.
    pub fn raster(&self) -> Result<Arc<RgbImage>> {
        if let Some(r) = self.raster.get() {
            return Ok(r.clone());
        }
        let path = self
            .file
            .as_ref()
            .expect("level without raster must have a backing file");
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        // A concurrent reader may have won the race; both decoded the same file.
        let _ = self.raster.set(Arc::new(img));
        Ok(self.raster.get().expect("raster just set").clone())
    }

    /// Pixel-exact copy of the `size`×`size` square at (`x`, `y`).
    pub fn read_region(&self, x: u32, y: u32, size: u32) -> Result<RgbImage> {
        self.check_bounds(x, y, size)?;
        let raster = self.raster()?;
        Ok(image::imageops::crop_imm(raster.as_ref(), x, y, size, size).to_image())
    }

    pub(crate) fn check_bounds(&self, x: u32, y: u32, size: u32) -> Result<()> {
        let fits = |origin: u32, extent: u32| {
            size > 0 && u64::from(origin) + u64::from(size) <= u64::from(extent)
        };
        if fits(x, self.width_px) && fits(y, self.height_px) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x,
                y,
                size,
                width: self.width_px,
                height: self.height_px,
            })
        }
    }
}

/// A square pixel region addressed at a magnification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub level_magnification: f64,
    pub x: u32,
    pub y: u32,
    pub size_px: u32,
}

/// Multi-resolution slide, levels sorted by decreasing magnification.
#[derive(Debug, Clone)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub levels: Vec<Level>,
    pub labels: SlideLabels,
    root: Option<PathBuf>,
}

impl SlidePyramid {
    /// Builds an in-memory pyramid, enforcing the same invariants as [`open_slide`].
    pub fn new(slide_id: impl Into<String>, levels: Vec<Level>, labels: SlideLabels) -> Result<Self> {
        let slide = Self {
            slide_id: slide_id.into(),
            levels,
            labels,
            root: None,
        };
        slide.validate_geometry()?;
        Ok(slide)
    }

    /// Directory the slide was opened from, if any.
    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn magnifications(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.magnification).collect()
    }

    /// Lowest-magnification level, used for thumbnails.
    pub fn thumbnail_level(&self) -> &Level {
        self.levels.last().expect("pyramid has levels")
    }

    fn validate_geometry(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::InsufficientPyramid {
                slide_id: self.slide_id.clone(),
                levels: self.levels.len(),
            });
        }
        let geometry = |mag: f64, reason: String| Error::LevelGeometry {
            slide_id: self.slide_id.clone(),
            magnification: mag,
            reason,
        };
        for level in &self.levels {
            if !(level.magnification.is_finite() && level.magnification > 0.0) {
                return Err(geometry(level.magnification, "magnification must be positive".into()));
            }
            if level.width_px == 0 || level.height_px == 0 {
                return Err(geometry(level.magnification, "empty level".into()));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].magnification >= pair[0].magnification {
                return Err(geometry(
                    pair[1].magnification,
                    "levels must be listed in strictly decreasing magnification".into(),
                ));
            }
        }
        let base = &self.levels[0];
        for level in &self.levels[1..] {
            let ratio = level.magnification / base.magnification;
            let want_w = (f64::from(base.width_px) * ratio).round() as i64;
            let want_h = (f64::from(base.height_px) * ratio).round() as i64;
            if (i64::from(level.width_px) - want_w).abs() > GEOMETRY_TOLERANCE_PX
                || (i64::from(level.height_px) - want_h).abs() > GEOMETRY_TOLERANCE_PX
            {
                return Err(geometry(
                    level.magnification,
                    format!(
                        "{}x{} does not scale from level 0 (expected about {want_w}x{want_h})",
                        level.width_px, level.height_px
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub slide_id: String,
    #[serde(default)]
    pub labels: ManifestLabels,
    pub levels: Vec<ManifestLevel>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ManifestLabels {
    #[serde(default)]
    pub primary_site: Option<String>,
    #[serde(default)]
    pub primary_diagnosis: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestLevel {
    pub magnification: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub file: String,
}

/// Opens a slide directory. Level images are checked against the manifest
/// from their headers only; pixels are decoded on first access.
pub fn open_slide(path: impl AsRef<Path>) -> Result<SlidePyramid> {
    let root = path.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::BadManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;

    let mut levels = Vec::with_capacity(manifest.levels.len());
    for decl in &manifest.levels {
        let file = root.join(&decl.file);
        let (w, h) = image::image_dimensions(&file).map_err(|source| Error::Image {
            path: file.clone(),
            source,
        })?;
        let off = |actual: u32, declared: u32| (i64::from(actual) - i64::from(declared)).abs();
        if off(w, decl.width_px) > GEOMETRY_TOLERANCE_PX || off(h, decl.height_px) > GEOMETRY_TOLERANCE_PX {
            return Err(Error::LevelGeometry {
                slide_id: manifest.slide_id.clone(),
                magnification: decl.magnification,
                reason: format!(
                    "image {} is {w}x{h}, manifest declares {}x{}",
                    file.display(),
                    decl.width_px,
                    decl.height_px
                ),
            });
        }
        levels.push(Level::from_file(decl.magnification, w, h, file));
    }

    let labels = SlideLabels::new(
        manifest.labels.primary_site.as_deref(),
        manifest.labels.primary_diagnosis.as_deref(),
    );
    let mut slide = SlidePyramid::new(manifest.slide_id, levels, labels)?;
    slide.root = Some(root.to_path_buf());
    Ok(slide)
}

/// Lists slide directories (those holding a manifest) directly under `dir`,
/// sorted by path.
pub fn list_slide_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.join(MANIFEST_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Level whose magnification is nearest to `target`; ties go to the higher
/// magnification.
pub fn select_magnification(slide: &SlidePyramid, target: f64) -> &Level {
    select_level(&slide.levels, target)
}

pub(crate) fn select_level(levels: &[Level], target: f64) -> &Level {
    let mut best = &levels[0];
    let mut best_gap = (best.magnification - target).abs();
    for level in &levels[1..] {
        let gap = (level.magnification - target).abs();
        if gap < best_gap || (gap == best_gap && level.magnification > best.magnification) {
            best = level;
            best_gap = gap;
        }
    }
    best
}

/// Reads a region from the level nearest to `region.level_magnification`.
pub fn read_region(slide: &SlidePyramid, region: &Region) -> Result<RgbImage> {
    select_magnification(slide, region.level_magnification).read_region(region.x, region.y, region.size_px)
}
