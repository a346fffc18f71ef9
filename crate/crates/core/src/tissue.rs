//! Tissue segmentation: Otsu threshold on luminance, 3×3 closing, and
//! small-component removal.

use std::collections::VecDeque;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide_io::{Level, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegParams {
    /// Lower clamp for the Otsu threshold.
    pub t_lo: Option<u8>,
    /// Upper clamp for the Otsu threshold; keeps noisy blank slides empty.
    pub t_hi: Option<u8>,
    pub close_iters: u32,
    pub min_component_px: usize,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            t_lo: None,
            t_hi: Some(230),
            close_iters: 1,
            min_component_px: 16,
        }
    }
}

/// Boolean tissue grid with a summed-area table for O(1) region fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub magnification: f64,
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
    integral: Vec<u64>,
    /// Set when the source raster had no usable contrast.
    pub no_tissue: bool,
    /// Luminance threshold applied (`lum < threshold` is tissue).
    pub threshold: Option<u8>,
}

impl TissueMask {
    pub fn from_bits(magnification: f64, width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        let integral = summed_area(width as usize, height as usize, &bits);
        Self {
            magnification,
            width,
            height,
            bits,
            integral,
            no_tissue: false,
            threshold: None,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> u64 {
        *self.integral.last().unwrap_or(&0)
    }

    /// Fraction of tissue pixels over the whole mask.
    pub fn fraction(&self) -> f64 {
        let area = u64::from(self.width) * u64::from(self.height);
        if area == 0 {
            0.0
        } else {
            self.count() as f64 / area as f64
        }
    }

    /// Tissue pixels inside the `w`×`h` rectangle at (`x`, `y`); caller checks bounds.
    fn rect_count(&self, x: u32, y: u32, w: u32, h: u32) -> u64 {
        let stride = self.width as usize + 1;
        let at = |xx: u32, yy: u32| self.integral[yy as usize * stride + xx as usize];
        at(x + w, y + h) + at(x, y) - at(x + w, y) - at(x, y + h)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

fn summed_area(w: usize, h: usize, bits: &[bool]) -> Vec<u64> {
    let stride = w + 1;
    let mut sat = vec![0u64; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += u64::from(bits[y * w + x]);
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    sat
}

/// Fraction of tissue pixels inside `region`, which is given in mask pixels.
pub fn tissue_fraction(mask: &TissueMask, region: &Region) -> Result<f64> {
    let s = region.size_px;
    let oob = || Error::OutOfBounds {
        x: region.x,
        y: region.y,
        size: s,
        width: mask.width,
        height: mask.height,
    };
    if s == 0 || u64::from(region.x) + u64::from(s) > u64::from(mask.width) {
        return Err(oob());
    }
    if u64::from(region.y) + u64::from(s) > u64::from(mask.height) {
        return Err(oob());
    }
    Ok(mask.rect_count(region.x, region.y, s, s) as f64 / (f64::from(s) * f64::from(s)))
}

/// ITU-R BT.601 luma, rounded to 8 bits.
pub fn luminance(p: [u8; 3]) -> u8 {
    let [r, g, b] = p.map(u32::from);
    ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8
}

pub fn luminance_histogram(raster: &RgbImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in raster.pixels() {
        hist[luminance(p.0) as usize] += 1;
    }
    hist
}

/// Otsu's threshold over a 256-bin histogram. Returns `t` maximizing the
/// between-class variance of the split `[0, t)` / `[t, 256)`, lowest `t` on
/// ties, or `None` when fewer than two bins are populated.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(u8, f64)> = None;
    for t in 1..256usize {
        w0 += hist[t - 1] as f64;
        sum0 += (t - 1) as f64 * hist[t - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Segments tissue on `level`. Pixels darker than the (clamped) Otsu
/// threshold are tissue; a raster without contrast yields an empty mask
/// with `no_tissue` set.
pub fn segment_tissue(level: &Level, params: &SegParams) -> Result<TissueMask> {
    let raster = level.raster()?;
    Ok(segment_raster(level.magnification, &raster, params))
}

pub fn segment_raster(magnification: f64, raster: &RgbImage, params: &SegParams) -> TissueMask {
    let (w, h) = raster.dimensions();
    let Some(mut t) = otsu_threshold(&luminance_histogram(raster)) else {
        let mut mask = TissueMask::from_bits(magnification, w, h, vec![false; w as usize * h as usize]);
        mask.no_tissue = true;
        return mask;
    };
    if let Some(lo) = params.t_lo {
        t = t.max(lo);
    }
    if let Some(hi) = params.t_hi {
        t = t.min(hi);
    }
    let mut bits: Vec<bool> = raster.pixels().map(|p| luminance(p.0) < t).collect();
    for _ in 0..params.close_iters {
        bits = close3x3(&bits, w as usize, h as usize);
    }
    remove_small_components(&mut bits, w as usize, h as usize, params.min_component_px);
    let mut mask = TissueMask::from_bits(magnification, w, h, bits);
    mask.no_tissue = mask.count() == 0;
    mask.threshold = Some(t);
    mask
}

/// Loads `mask_<magnification>.png` from `slide_root` if present; nonzero is tissue.
pub fn load_mask_override(slide_root: &Path, level: &Level) -> Result<Option<TissueMask>> {
    let path = slide_root.join(format!("mask_{}.png", level.magnification));
    if !path.is_file() {
        return Ok(None);
    }
    let img = image::open(&path)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?
        .to_luma8();
    if img.dimensions() != (level.width_px, level.height_px) {
        return Err(Error::LevelGeometry {
            slide_id: slide_root.display().to_string(),
            magnification: level.magnification,
            reason: format!(
                "mask override is {}x{}, level is {}x{}",
                img.width(),
                img.height(),
                level.width_px,
                level.height_px
            ),
        });
    }
    let bits = img.pixels().map(|p| p.0[0] != 0).collect();
    let mut mask = TissueMask::from_bits(level.magnification, img.width(), img.height(), bits);
    mask.no_tissue = mask.count() == 0;
    Ok(Some(mask))
}

fn dilate(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    morph(bits, w, h, false, |acc, v| acc || v)
}

// Outside the image counts as tissue so closing never eats the border.
fn erode(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    morph(bits, w, h, true, |acc, v| acc && v)
}

fn morph(bits: &[bool], w: usize, h: usize, init: bool, op: impl Fn(bool, bool) -> bool) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc = op(acc, bits[ny * w + nx]);
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub(crate) fn close3x3(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    if w == 0 || h == 0 {
        return bits.to_vec();
    }
    erode(&dilate(bits, w, h), w, h)
}

/// Clears 8-connected components smaller than `min_px`.
pub(crate) fn remove_small_components(bits: &mut [bool], w: usize, h: usize, min_px: usize) {
    if min_px <= 1 {
        return;
    }
    let mut seen = vec![false; bits.len()];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        component.clear();
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if component.len() < min_px {
            for &i in &component {
                bits[i] = false;
            }
        }
    }
}
