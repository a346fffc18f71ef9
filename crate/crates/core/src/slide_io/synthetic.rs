//! Procedural labeled slide corpora. Each class gets its own texture family
//! (hue, stripe pattern, nucleus-like blobs); every slide has a tissue band
//! with a wavy edge and a near-white background.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_label, Manifest, ManifestLabels, ManifestLevel, MANIFEST_FILE};
use crate::error::{Error, Result};

/// Visual parameters of one synthetic tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureFamily {
    pub base_rgb: [u8; 3],
    pub accent_rgb: [u8; 3],
    /// Stripe period in level-0 pixels.
    pub stripe_period_px: f64,
    pub stripe_angle_deg: f64,
    /// Blend towards the accent color at stripe peaks, in [0, 1].
    pub stripe_contrast: f64,
    /// Probability that a blob cell holds a blob, in [0, 1].
    pub blob_density: f64,
    pub blob_radius_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub diagnosis: String,
    pub site: String,
    pub slides: usize,
    pub texture: TextureFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: Vec<ClassSpec>,
    /// Level-0 size.
    pub width_px: u32,
    pub height_px: u32,
    /// Pyramid magnifications, highest first.
    pub magnifications: Vec<f64>,
    pub background_fraction: f64,
    /// Per-channel uniform noise amplitude.
    #[serde(default = "default_noise")]
    pub noise: u8,
}

fn default_noise() -> u8 {
    10
}

/// Four visually distinct texture families spread over two sites.
pub fn demo_families() -> Vec<(&'static str, &'static str, TextureFamily)> {
    vec![
        (
            "lung adenocarcinoma",
            "lung",
            TextureFamily {
                base_rgb: [222, 140, 182],
                accent_rgb: [120, 50, 140],
                stripe_period_px: 48.0,
                stripe_angle_deg: 20.0,
                stripe_contrast: 0.25,
                blob_density: 0.15,
                blob_radius_px: 5.0,
            },
        ),
        (
            "lung squamous cell carcinoma",
            "lung",
            TextureFamily {
                base_rgb: [150, 88, 170],
                accent_rgb: [60, 30, 100],
                stripe_period_px: 24.0,
                stripe_angle_deg: 100.0,
                stripe_contrast: 0.15,
                blob_density: 0.6,
                blob_radius_px: 6.0,
            },
        ),
        (
            "brain lower grade glioma",
            "brain",
            TextureFamily {
                base_rgb: [214, 128, 96],
                accent_rgb: [150, 60, 40],
                stripe_period_px: 12.0,
                stripe_angle_deg: 90.0,
                stripe_contrast: 0.6,
                blob_density: 0.05,
                blob_radius_px: 3.0,
            },
        ),
        (
            "glioblastoma multiforme",
            "brain",
            TextureFamily {
                base_rgb: [128, 140, 204],
                accent_rgb: [40, 50, 120],
                stripe_period_px: 64.0,
                stripe_angle_deg: 45.0,
                stripe_contrast: 0.4,
                blob_density: 0.3,
                blob_radius_px: 10.0,
            },
        ),
    ]
}

impl CorpusSpec {
    /// `classes` (≤ 4) demo families with `slides_per_class` slides each.
    pub fn demo(classes: usize, slides_per_class: usize) -> Self {
        let classes = demo_families()
            .into_iter()
            .take(classes)
            .map(|(diagnosis, site, texture)| ClassSpec {
                diagnosis: diagnosis.into(),
                site: site.into(),
                slides: slides_per_class,
                texture,
            })
            .collect();
        Self {
            classes,
            width_px: 1280,
            height_px: 1280,
            magnifications: vec![20.0, 5.0, 1.25],
            background_fraction: 0.4,
            noise: default_noise(),
        }
    }

    pub fn total_slides(&self) -> usize {
        self.classes.iter().map(|c| c.slides).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCorpusSpec(m.to_string()));
        if self.classes.is_empty() {
            return bad("no classes");
        }
        if self.classes.iter().any(|c| c.slides == 0) {
            return bad("every class needs at least one slide");
        }
        if self.magnifications.len() < 2 {
            return bad("at least two magnifications required");
        }
        if self.magnifications.iter().any(|m| !(m.is_finite() && *m > 0.0))
            || self.magnifications.windows(2).any(|w| w[1] >= w[0])
        {
            return bad("magnifications must be positive and strictly decreasing");
        }
        if self.width_px == 0 || self.height_px == 0 {
            return bad("empty level-0 size");
        }
        let min_mag = *self.magnifications.last().unwrap();
        let ratio = min_mag / self.magnifications[0];
        if (f64::from(self.width_px) * ratio).round() < 1.0 || (f64::from(self.height_px) * ratio).round() < 1.0 {
            return bad("lowest level would be empty");
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad("background_fraction must be in [0, 1)");
        }
        for c in &self.classes {
            let t = &c.texture;
            if !(t.stripe_period_px > 0.0 && t.blob_radius_px > 0.0)
                || !(0.0..=1.0).contains(&t.stripe_contrast)
                || !(0.0..=1.0).contains(&t.blob_density)
            {
                return bad(&format!("invalid texture for class {}", c.diagnosis));
            }
        }
        Ok(())
    }
}

/// A slide written by [`generate_synthetic_corpus`].
#[derive(Debug, Clone, Serialize)]
pub struct GeneratedSlide {
    pub slide_id: String,
    pub path: PathBuf,
    pub diagnosis: String,
    pub site: String,
    /// Ground-truth tissue fraction of level 0.
    pub tissue_fraction: f64,
}

/// Writes every slide of `spec` under `out_dir`, one directory per slide.
/// Output is a pure function of `(spec, seed)`.
pub fn generate_synthetic_corpus(spec: &CorpusSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<GeneratedSlide>> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::with_capacity(spec.total_slides());
    for class in &spec.classes {
        let slug = normalize_label(&class.diagnosis).replace(' ', "-");
        for i in 0..class.slides {
            jobs.push((class, format!("{slug}-{i:03}"), master.random::<u64>()));
        }
    }

    use rayon::prelude::*;
    jobs.into_par_iter()
        .map(|(class, slide_id, slide_seed)| write_slide(spec, class, &slide_id, slide_seed, out_dir))
        .collect()
}

fn write_slide(spec: &CorpusSpec, class: &ClassSpec, slide_id: &str, seed: u64, out_dir: &Path) -> Result<GeneratedSlide> {
    let dir = out_dir.join(slide_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (base, tissue_fraction) = render_level0(spec, &class.texture, seed);

    let mut levels = Vec::with_capacity(spec.magnifications.len());
    let m0 = spec.magnifications[0];
    for (i, &mag) in spec.magnifications.iter().enumerate() {
        let raster = if i == 0 {
            base.clone()
        } else {
            let w = (f64::from(spec.width_px) * mag / m0).round() as u32;
            let h = (f64::from(spec.height_px) * mag / m0).round() as u32;
            imageops::resize(&base, w, h, FilterType::Triangle)
        };
        let file = format!("level_{i}.png");
        let path = dir.join(&file);
        raster.save(&path).map_err(|source| Error::Image { path, source })?;
        levels.push(ManifestLevel {
            magnification: mag,
            width_px: raster.width(),
            height_px: raster.height(),
            file,
        });
    }

    let manifest = Manifest {
        slide_id: slide_id.to_string(),
        labels: ManifestLabels {
            primary_site: Some(class.site.clone()),
            primary_diagnosis: Some(class.diagnosis.clone()),
        },
        levels,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(GeneratedSlide {
        slide_id: slide_id.to_string(),
        path: dir,
        diagnosis: class.diagnosis.clone(),
        site: class.site.clone(),
        tissue_fraction,
    })
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> [f64; 3] {
    c.map(|v| f64::from((i32::from(v) + rng.random_range(-amount..=amount)).clamp(0, 255)))
}

/// Renders level 0 and returns it with its ground-truth tissue fraction.
fn render_level0(spec: &CorpusSpec, tex: &TextureFamily, seed: u64) -> (RgbImage, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width_px, spec.height_px);
    let (wf, hf) = (f64::from(w), f64::from(h));

    let base = jitter(&mut rng, tex.base_rgb, 8);
    let accent = jitter(&mut rng, tex.accent_rgb, 8);
    let angle = (tex.stripe_angle_deg + rng.random_range(-10.0..10.0)).to_radians();
    let period = tex.stripe_period_px * rng.random_range(0.9..1.1);
    let stripe_phase = rng.random_range(0.0..2.0 * PI);
    let edge_phase = rng.random_range(0.0..2.0 * PI);
    let flipped = rng.random_bool(0.5);
    let edge_amp = 0.04 * wf;
    let edge_mid = wf * (1.0 - spec.background_fraction);
    let (cos_a, sin_a) = (angle.cos(), angle.sin());

    // One optional blob per square cell.
    let cell = (tex.blob_radius_px * 4.0).max(2.0);
    let cells_x = (wf / cell).ceil() as usize + 1;
    let cells_y = (hf / cell).ceil() as usize + 1;
    let blobs: Vec<Option<(f64, f64)>> = (0..cells_x * cells_y)
        .map(|i| {
            let (cx, cy) = ((i % cells_x) as f64, (i / cells_x) as f64);
            let present = rng.random_bool(tex.blob_density);
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            present.then_some((cx * cell + ox, cy * cell + oy))
        })
        .collect();
    let r2 = tex.blob_radius_px * tex.blob_radius_px;
    let nucleus = accent.map(|v| v * 0.8);

    let noise = i32::from(spec.noise);
    let mut img = RgbImage::new(w, h);
    let mut tissue_px = 0u64;
    for y in 0..h {
        let yf = f64::from(y);
        let edge = edge_mid + edge_amp * (2.0 * PI * 2.0 * yf / hf + edge_phase).sin();
        for x in 0..w {
            let xf = f64::from(x);
            let across = if flipped { wf - 1.0 - xf } else { xf };
            let px = if across < edge {
                tissue_px += 1;
                let s = 0.5 + 0.5 * (2.0 * PI * (xf * cos_a + yf * sin_a) / period + stripe_phase).sin();
                let t = tex.stripe_contrast * s;
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = base[k] * (1.0 - t) + accent[k] * t;
                }
                let (gx, gy) = ((xf / cell) as usize, (yf / cell) as usize);
                'cells: for ny in gy.saturating_sub(1)..=(gy + 1).min(cells_y - 1) {
                    for nx in gx.saturating_sub(1)..=(gx + 1).min(cells_x - 1) {
                        if let Some((bx, by)) = blobs[ny * cells_x + nx] {
                            if (bx - xf).powi(2) + (by - yf).powi(2) <= r2 {
                                c = nucleus;
                                break 'cells;
                            }
                        }
                    }
                }
                c.map(|v| (v as i32 + rng.random_range(-noise..=noise)).clamp(0, 255) as u8)
            } else {
                let v = 246 + rng.random_range(-5..=5);
                [0, 1, 2].map(|_| (v + rng.random_range(-2..=2)).clamp(0, 255) as u8)
            };
            img.put_pixel(x, y, Rgb(px));
        }
    }
    (img, tissue_px as f64 / (wf * hf))
}
