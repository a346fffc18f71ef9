//! Precomputed features in the whitespace-separated text format:
//!
//! ```text
//! #extractor_id=<id> d=<int>
//! <slide_id> <grid_x> <grid_y> <v_1> ... <v_d>
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::RgbImage;

use super::{ExtractorDescriptor, ExtractorKind, FeatureExtractor, FeatureVector};
use crate::error::{Error, Result};
use crate::mosaic::PatchRef;

pub type PatchKey = (String, u32, u32);

#[derive(Debug, Clone)]
pub struct ExternalFeatures {
    pub descriptor: ExtractorDescriptor,
    pub vectors: HashMap<PatchKey, FeatureVector>,
}

impl ExternalFeatures {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl FeatureExtractor for ExternalFeatures {
    fn descriptor(&self) -> ExtractorDescriptor {
        self.descriptor.clone()
    }

    fn extract(&self, patch: &PatchRef, _pixels: &dyn Fn() -> Result<RgbImage>) -> Result<FeatureVector> {
        self.vectors
            .get(&(patch.slide_id.clone(), patch.grid_x, patch.grid_y))
            .cloned()
            .ok_or_else(|| Error::UnknownPatch {
                slide_id: patch.slide_id.clone(),
                grid_x: patch.grid_x,
                grid_y: patch.grid_y,
            })
    }
}

pub fn import_external_features(path: impl AsRef<Path>, expected_id: Option<&str>) -> Result<ExternalFeatures> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_external_features(&text, expected_id)
}

fn parse_header(line: &str) -> Option<(String, usize)> {
    let rest = line.strip_prefix('#')?;
    let (mut id, mut d) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=')? {
            ("extractor_id", v) if !v.is_empty() => id = Some(v.to_string()),
            ("d", v) => d = v.parse::<usize>().ok(),
            _ => return None,
        }
    }
    Some((id?, d?))
}

pub fn parse_external_features(text: &str, expected_id: Option<&str>) -> Result<ExternalFeatures> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let err = |line: usize, reason: String| Error::FeatureFile { line: line + 1, reason };

    let (hline, header) = lines.next().ok_or_else(|| err(0, "empty file".into()))?;
    let (extractor_id, d) =
        parse_header(header.trim()).ok_or_else(|| err(hline, "expected `#extractor_id=<id> d=<int>`".into()))?;
    if d < 2 {
        return Err(err(hline, format!("d = {d} is too small for a barcode")));
    }
    if let Some(expected) = expected_id {
        if expected != extractor_id {
            return Err(Error::ExtractorMismatch {
                expected: expected.to_string(),
                found: extractor_id,
            });
        }
    }

    let mut vectors = HashMap::new();
    for (no, line) in lines {
        if line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + 3 {
            return Err(err(no, format!("expected {} values, found {}", d, fields.len().saturating_sub(3))));
        }
        let coord = |s: &str| s.parse::<u32>().map_err(|_| err(no, format!("bad grid coordinate `{s}`")));
        let key = (fields[0].to_string(), coord(fields[1])?, coord(fields[2])?);
        let mut values = Vec::with_capacity(d);
        for (i, raw) in fields[3..].iter().enumerate() {
            let v: f64 = raw.parse().map_err(|_| err(no, format!("bad number `{raw}`")))?;
            if !v.is_finite() {
                return Err(err(no, format!("non-finite value at position {}", i + 1)));
            }
            values.push(v);
        }
        let fv = FeatureVector {
            values,
            extractor_id: extractor_id.clone(),
            degenerate: false,
        };
        if vectors.insert(key.clone(), fv).is_some() {
            return Err(err(no, format!("duplicate patch {} ({}, {})", key.0, key.1, key.2)));
        }
    }

    Ok(ExternalFeatures {
        descriptor: ExtractorDescriptor {
            extractor_id,
            d,
            kind: ExtractorKind::External,
        },
        vectors,
    })
}

/// Renders rows in the text format. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn format_external_features(extractor_id: &str, d: usize, rows: &[(PatchKey, Vec<f64>)]) -> Result<String> {
    let mut out = format!("#extractor_id={extractor_id} d={d}\n");
    for ((slide, gx, gy), values) in rows {
        if values.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: values.len(),
            });
        }
        out.push_str(&format!("{slide} {gx} {gy}"));
        for v in values {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
