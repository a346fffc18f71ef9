//! Mosaic construction: dense low-magnification patching, color clustering
//! of RGB histograms, then spatial clustering inside each color cluster with
//! one centroid-nearest patch kept per spatial cluster.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, sq_dist, KMeansParams};
use crate::slide_io::{select_magnification, Level, Region, SlidePyramid};
use crate::tissue::{tissue_fraction, SegParams, TissueMask};

/// A patch counts as tissue when at least this fraction of its pixels are tissue.
pub const TISSUE_PATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexingConfig {
    /// Number of color clusters.
    pub k_ch: usize,
    /// Fraction of each color cluster's patches kept in the mosaic.
    pub p_m: f64,
    /// Clustering magnification.
    pub m_x_c: f64,
    /// Indexing magnification.
    pub m_x_idx: f64,
    /// Patch side at the clustering magnification.
    pub s_l: u32,
    /// Patch side at the indexing magnification.
    pub s_h: u32,
    /// Histogram bins per channel.
    pub hist_bins: usize,
    pub kmeans: KMeansParams,
    pub segmentation: SegParams,
}

impl Default for IndexingConfig {
    fn default() -> Self {
        Self {
            k_ch: 9,
            p_m: 0.05,
            m_x_c: 5.0,
            m_x_idx: 20.0,
            s_l: 250,
            s_h: 1000,
            hist_bins: 8,
            kmeans: KMeansParams::default(),
            segmentation: SegParams::default(),
        }
    }
}

impl IndexingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k_ch == 0 {
            return bad("k_ch must be positive");
        }
        if !(self.p_m > 0.0 && self.p_m <= 1.0) {
            return bad("p_m must be in (0, 1]");
        }
        if !(self.m_x_c > 0.0 && self.m_x_idx > 0.0) {
            return bad("magnifications must be positive");
        }
        if self.s_l == 0 || self.s_h == 0 {
            return bad("patch sizes must be positive");
        }
        if self.hist_bins == 0 || self.hist_bins > 256 {
            return bad("hist_bins must be in 1..=256");
        }
        self.kmeans.validate()
    }
}

/// Patch on the dense grid at the clustering magnification.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    /// Top-left pixel at the clustering magnification, `grid * s_l`.
    pub origin_x: u32,
    pub origin_y: u32,
    pub color_cluster: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub slide_id: String,
    /// Selected patches in (grid_y, grid_x) order.
    pub patches: Vec<PatchRef>,
    pub config: IndexingConfig,
    /// Member count of every color cluster, empty ones included.
    pub color_cluster_sizes: Vec<usize>,
    /// Number of tissue patches on the dense grid.
    pub tissue_patches: usize,
}

impl Mosaic {
    /// `Σ max(1, round(p_M·|C_i|))` over nonempty color clusters.
    pub fn expected_size(p_m: f64, cluster_sizes: &[usize]) -> usize {
        cluster_sizes
            .iter()
            .filter(|&&n| n > 0)
            .map(|&n| spatial_cluster_count(p_m, n))
            .sum()
    }
}

/// Spatial clusters for a color cluster of `members` patches.
pub fn spatial_cluster_count(p_m: f64, members: usize) -> usize {
    ((p_m * members as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<PatchRef>,
    /// The patch side exceeds the level, so no grid cell exists.
    pub no_patches: bool,
}

/// Non-overlapping `s_l` grid over `level`; partial edge cells are dropped and
/// only cells with tissue fraction ≥ [`TISSUE_PATCH_THRESHOLD`] are kept.
pub fn dense_patch_grid(slide_id: &str, level: &Level, mask: &TissueMask, s_l: u32) -> Result<PatchGrid> {
    if mask.magnification != level.magnification || (mask.width, mask.height) != (level.width_px, level.height_px) {
        return Err(Error::InvalidConfig(format!(
            "mask at {}x ({}x{}) does not match level at {}x ({}x{})",
            mask.magnification, mask.width, mask.height, level.magnification, level.width_px, level.height_px
        )));
    }
    if s_l == 0 {
        return Err(Error::InvalidConfig("patch size must be positive".into()));
    }
    let (cols, rows) = (level.width_px / s_l, level.height_px / s_l);
    let mut patches = Vec::new();
    for gy in 0..rows {
        for gx in 0..cols {
            let region = Region {
                level_magnification: level.magnification,
                x: gx * s_l,
                y: gy * s_l,
                size_px: s_l,
            };
            if tissue_fraction(mask, &region)? >= TISSUE_PATCH_THRESHOLD {
                patches.push(PatchRef {
                    slide_id: slide_id.to_string(),
                    grid_x: gx,
                    grid_y: gy,
                    origin_x: region.x,
                    origin_y: region.y,
                    color_cluster: 0,
                });
            }
        }
    }
    Ok(PatchGrid {
        patches,
        no_patches: cols == 0 || rows == 0,
    })
}

/// Per-channel histograms with `bins` uniform bins over [0, 255],
/// concatenated R‖G‖B, each channel summing to 1.
pub fn rgb_histogram(raster: &RgbImage, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; 3 * bins];
    let n = u64::from(raster.width()) * u64::from(raster.height());
    if n == 0 {
        return hist;
    }
    for p in raster.pixels() {
        for (c, &v) in p.0.iter().enumerate() {
            hist[c * bins + usize::from(v) * bins / 256] += 1.0;
        }
    }
    let inv = 1.0 / n as f64;
    hist.iter_mut().for_each(|h| *h *= inv);
    hist
}

fn sub_seed(seed: u64, cluster: usize) -> u64 {
    seed ^ (cluster as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds the mosaic of `slide` from a tissue mask computed at the
/// clustering magnification.
pub fn build_mosaic(slide: &SlidePyramid, mask: &TissueMask, cfg: &IndexingConfig) -> Result<Mosaic> {
    cfg.validate()?;
    let level = select_magnification(slide, cfg.m_x_c);
    let grid = dense_patch_grid(&slide.slide_id, level, mask, cfg.s_l)?;
    let mut tissue = grid.patches;
    if tissue.is_empty() {
        return Err(Error::EmptySlide(slide.slide_id.clone()));
    }

    let raster = level.raster()?;
    let hists: Vec<Vec<f64>> = tissue
        .par_iter()
        .map(|p| {
            let patch = image::imageops::crop_imm(raster.as_ref(), p.origin_x, p.origin_y, cfg.s_l, cfg.s_l).to_image();
            rgb_histogram(&patch, cfg.hist_bins)
        })
        .collect();

    let color = kmeans(&hists, cfg.k_ch, &cfg.kmeans)?;
    for (p, &c) in tissue.iter_mut().zip(&color.assignments) {
        p.color_cluster = c as u32;
    }
    let sizes = color.cluster_sizes();

    let mut selected = Vec::new();
    for (c, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        let members: Vec<&PatchRef> = tissue.iter().filter(|p| p.color_cluster as usize == c).collect();
        let origins: Vec<Vec<f64>> = members
            .iter()
            .map(|p| vec![f64::from(p.origin_x), f64::from(p.origin_y)])
            .collect();
        let params = KMeansParams {
            seed: sub_seed(cfg.kmeans.seed, c),
            ..cfg.kmeans.clone()
        };
        let spatial = kmeans(&origins, spatial_cluster_count(cfg.p_m, size), &params)?;

        for (s, centroid) in spatial.centroids.iter().enumerate() {
            if spatial.empty[s] {
                continue;
            }
            let best = members
                .iter()
                .zip(&origins)
                .zip(&spatial.assignments)
                .filter(|(_, &a)| a == s)
                .map(|((p, o), _)| (sq_dist(o, centroid), p.grid_y, p.grid_x, *p))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
                .expect("nonempty spatial cluster");
            selected.push(best.3.clone());
        }
    }
    selected.sort_by_key(|p| (p.grid_y, p.grid_x));

    Ok(Mosaic {
        slide_id: slide.slide_id.clone(),
        patches: selected,
        config: cfg.clone(),
        color_cluster_sizes: sizes,
        tissue_patches: tissue.len(),
    })
}
