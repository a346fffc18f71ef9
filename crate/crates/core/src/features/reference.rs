//! Built-in handcrafted descriptor, `ref-v1`, 256 values:
//!
//! | range     | content                                                        |
//! |-----------|----------------------------------------------------------------|
//! | 0..32     | 4×4 cells, row-major, (mean, std) of luminance / 255           |
//! | 32..80    | 16-bin R, G, B histograms (fractions of pixels)                |
//! | 80..208   | 2×2 quadrants × {low, high} gradient magnitude × 16 orientations |
//! | 208..256  | 4×4 cells, row-major, mean R, G, B / 255                        |
//!
//! Luminance is `0.299 R + 0.587 G + 0.114 B`. Gradients are central
//! differences with replicated borders; orientation bins split [0, 2π) into
//! 16 equal sectors and a pixel is "high" when its magnitude is at least
//! [`GRADIENT_BAND_SPLIT`]. Orientation entries are fractions of the
//! quadrant's pixels. The whole vector is L2-normalized.

use std::f64::consts::TAU;

use image::RgbImage;

use super::{ExtractorDescriptor, ExtractorKind, FeatureExtractor, FeatureVector};
use crate::error::{Error, Result};
use crate::mosaic::PatchRef;

pub const REFERENCE_ID: &str = "ref-v1";
pub const REFERENCE_DIM: usize = 256;

const GRID: u32 = 4;
const COLOR_BINS: usize = 16;
const ORIENT_BINS: usize = 16;
/// Gradient magnitude, in luminance units, separating the two bands.
pub const GRADIENT_BAND_SPLIT: f64 = 8.0;

const LUM_OFF: usize = 0;
const HIST_OFF: usize = 32;
const GRAD_OFF: usize = 80;
const CELL_RGB_OFF: usize = 208;

#[derive(Debug, Clone)]
pub struct ReferenceExtractor {
    patch_size: u32,
}

impl ReferenceExtractor {
    pub fn new(patch_size: u32) -> Result<Self> {
        if patch_size < GRID {
            return Err(Error::InvalidConfig(format!(
                "reference extractor needs patches of at least {GRID} px"
            )));
        }
        Ok(Self { patch_size })
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn extract_raster(&self, raster: &RgbImage) -> Result<FeatureVector> {
        let (w, h) = raster.dimensions();
        if w != self.patch_size || h != self.patch_size {
            return Err(Error::RasterSize {
                width: w,
                height: h,
                expected: self.patch_size,
            });
        }
        let mut values = raw_reference_descriptor(raster);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let degenerate = norm == 0.0;
        if !degenerate {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(FeatureVector {
            values,
            extractor_id: REFERENCE_ID.to_string(),
            degenerate,
        })
    }
}

impl FeatureExtractor for ReferenceExtractor {
    fn descriptor(&self) -> ExtractorDescriptor {
        ExtractorDescriptor {
            extractor_id: REFERENCE_ID.to_string(),
            d: REFERENCE_DIM,
            kind: ExtractorKind::BuiltIn,
        }
    }

    fn extract(&self, _patch: &PatchRef, pixels: &dyn Fn() -> Result<RgbImage>) -> Result<FeatureVector> {
        self.extract_raster(&pixels()?)
    }
}

fn cell_bounds(i: u32, size: u32) -> (u32, u32) {
    (i * size / GRID, (i + 1) * size / GRID)
}

/// The unnormalized `ref-v1` layout. Any square raster of side ≥ 4 works.
pub fn raw_reference_descriptor(raster: &RgbImage) -> Vec<f64> {
    let (w, h) = raster.dimensions();
    let (wu, hu) = (w as usize, h as usize);
    let lum: Vec<f64> = raster
        .pixels()
        .map(|p| 0.299 * f64::from(p.0[0]) + 0.587 * f64::from(p.0[1]) + 0.114 * f64::from(p.0[2]))
        .collect();
    let mut out = vec![0.0; REFERENCE_DIM];

    for cy in 0..GRID {
        let (y0, y1) = cell_bounds(cy, h);
        for cx in 0..GRID {
            let (x0, x1) = cell_bounds(cx, w);
            let n = f64::from((x1 - x0) * (y1 - y0));
            let shift = lum[y0 as usize * wu + x0 as usize];
            let (mut sum, mut sum2) = (0.0, 0.0);
            let mut rgb = [0.0; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let l = lum[y as usize * wu + x as usize] - shift;
                    sum += l;
                    sum2 += l * l;
                    let p = raster.get_pixel(x, y).0;
                    for c in 0..3 {
                        rgb[c] += f64::from(p[c]);
                    }
                }
            }
            let mean = sum / n;
            let var = (sum2 / n - mean * mean).max(0.0);
            let mean = mean + shift;
            let cell = (cy * GRID + cx) as usize;
            out[LUM_OFF + 2 * cell] = mean / 255.0;
            out[LUM_OFF + 2 * cell + 1] = var.sqrt() / 255.0;
            for c in 0..3 {
                out[CELL_RGB_OFF + 3 * cell + c] = rgb[c] / n / 255.0;
            }
        }
    }

    let total = (wu * hu) as f64;
    for p in raster.pixels() {
        for c in 0..3 {
            out[HIST_OFF + c * COLOR_BINS + usize::from(p.0[c]) * COLOR_BINS / 256] += 1.0 / total;
        }
    }

    let at = |x: usize, y: usize| lum[y * wu + x];
    let (qw, qh) = (wu / 2, hu / 2);
    let quad_size = |q: usize| {
        let qx = if q % 2 == 0 { qw } else { wu - qw };
        let qy = if q / 2 == 0 { qh } else { hu - qh };
        (qx * qy) as f64
    };
    for y in 0..hu {
        for x in 0..wu {
            let gx = (at((x + 1).min(wu - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(hu - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            let mag = gx.hypot(gy);
            let theta = gy.atan2(gx).rem_euclid(TAU);
            let bin = ((theta / TAU * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
            let band = usize::from(mag >= GRADIENT_BAND_SPLIT);
            let q = usize::from(y >= qh) * 2 + usize::from(x >= qw);
            out[GRAD_OFF + q * 2 * ORIENT_BINS + band * ORIENT_BINS + bin] += 1.0 / quad_size(q);
        }
    }
    out
}
