//! `BOB1` binary container. All integers little-endian; layout documented
//! in `docs/index-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ArchiveIndex, IndexedSlide, Placement};
use crate::barcode::{Barcode, BunchOfBarcodes};
use crate::error::{Error, Result};
use crate::features::{ExtractorDescriptor, ExtractorKind};
use crate::kmeans::KMeansParams;
use crate::mosaic::{IndexingConfig, PatchRef};
use crate::slide_io::SlideLabels;
use crate::tissue::SegParams;

pub const MAGIC: &[u8; 4] = b"BOB1";
pub const FORMAT_VERSION: u16 = 1;

// magic + version + reserved + total length
const HEADER_LEN: usize = 4 + 2 + 2 + 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Corrupt(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::Corrupt("string longer than 65535 bytes".into()))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn opt_str(&mut self, s: Option<&str>) -> Result<()> {
        match s {
            Some(s) => {
                self.u8(1);
                self.str(s)
            }
            None => {
                self.u8(0);
                Ok(())
            }
        }
    }
    fn opt_u8(&mut self, v: Option<u8>) {
        self.u8(u8::from(v.is_some()));
        self.u8(v.unwrap_or(0));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Corrupt(format!("bad flag byte {v}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = usize::from(self.u16()?);
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8".into()))
    }
    fn opt_str(&mut self) -> Result<Option<String>> {
        if self.flag()? {
            Ok(Some(self.str()?))
        } else {
            Ok(None)
        }
    }
    fn opt_u8(&mut self) -> Result<Option<u8>> {
        let present = self.flag()?;
        let v = self.u8()?;
        Ok(present.then_some(v))
    }
}

fn write_config(w: &mut Writer, cfg: &IndexingConfig, ex: &ExtractorDescriptor) -> Result<()> {
    w.len32(cfg.k_ch)?;
    w.f64(cfg.p_m);
    w.f64(cfg.m_x_c);
    w.f64(cfg.m_x_idx);
    w.u32(cfg.s_l);
    w.u32(cfg.s_h);
    w.len32(cfg.hist_bins)?;
    w.len32(cfg.kmeans.max_iters)?;
    w.f64(cfg.kmeans.rel_tol);
    w.u64(cfg.kmeans.seed);
    w.opt_u8(cfg.segmentation.t_lo);
    w.opt_u8(cfg.segmentation.t_hi);
    w.u32(cfg.segmentation.close_iters);
    w.len32(cfg.segmentation.min_component_px)?;
    w.str(&ex.extractor_id)?;
    w.u8(match ex.kind {
        ExtractorKind::BuiltIn => 0,
        ExtractorKind::External => 1,
    });
    w.len32(ex.d)
}

fn read_config(r: &mut Reader) -> Result<(IndexingConfig, ExtractorDescriptor)> {
    let cfg = IndexingConfig {
        k_ch: r.u32()? as usize,
        p_m: r.f64()?,
        m_x_c: r.f64()?,
        m_x_idx: r.f64()?,
        s_l: r.u32()?,
        s_h: r.u32()?,
        hist_bins: r.u32()? as usize,
        kmeans: KMeansParams {
            max_iters: r.u32()? as usize,
            rel_tol: r.f64()?,
            seed: r.u64()?,
        },
        segmentation: SegParams {
            t_lo: r.opt_u8()?,
            t_hi: r.opt_u8()?,
            close_iters: r.u32()?,
            min_component_px: r.u32()? as usize,
        },
    };
    let extractor_id = r.str()?;
    let kind = match r.u8()? {
        0 => ExtractorKind::BuiltIn,
        1 => ExtractorKind::External,
        v => return Err(Error::Corrupt(format!("unknown extractor kind {v}"))),
    };
    let d = r.u32()? as usize;
    if d < 2 {
        return Err(Error::Corrupt(format!("feature dimension {d} too small")));
    }
    Ok((cfg, ExtractorDescriptor { extractor_id, d, kind }))
}

/// Serializes `index` to the `BOB1` byte layout.
pub fn encode_index(index: &ArchiveIndex) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + 64 * index.total_barcodes()));
    w.0.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u16(0);
    w.u64(0); // total length, patched below
    write_config(&mut w, &index.config, &index.extractor)?;
    w.len32(index.barcode_len())?;
    w.len32(index.len())?;
    for slide in index.slides() {
        w.str(&slide.slide_id)?;
        w.opt_str(slide.labels.primary_site.as_deref())?;
        w.opt_str(slide.labels.primary_diagnosis.as_deref())?;
        w.len32(slide.len())?;
        for ((p, pl), b) in slide.bob.patches.iter().zip(&slide.placements).zip(&slide.bob.barcodes) {
            w.u32(p.grid_x);
            w.u32(p.grid_y);
            w.u32(p.origin_x);
            w.u32(p.origin_y);
            w.u32(p.color_cluster);
            w.u32(pl.x);
            w.u32(pl.y);
            w.u8(u8::from(pl.clamped));
            w.0.extend_from_slice(&b.to_bytes());
        }
    }
    let total = (w.0.len() + 4) as u64;
    w.0[8..16].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

/// Parses a `BOB1` byte buffer.
pub fn decode_index(bytes: &[u8]) -> Result<ArchiveIndex> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Version("missing BOB1 magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!("version {version}, expected {FORMAT_VERSION}")));
    }
    let _reserved = r.u16()?;
    let total = r.u64()?;
    if (bytes.len() as u64) < total {
        return Err(Error::Truncated);
    }
    if bytes.len() as u64 != total {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() as u64 - total)));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: r.pos };

    let (config, extractor) = read_config(&mut r)?;
    let l = r.u32()? as usize;
    if l != extractor.d - 1 {
        return Err(Error::Corrupt(format!("barcode length {l} for d = {}", extractor.d)));
    }
    let nbytes = l.div_ceil(8);
    let slide_count = r.u32()?;
    let mut slides = BTreeMap::new();
    for _ in 0..slide_count {
        let slide_id = r.str()?;
        let labels = SlideLabels {
            primary_site: r.opt_str()?,
            primary_diagnosis: r.opt_str()?,
        };
        let n = r.u32()? as usize;
        let mut patches = Vec::with_capacity(n.min(1 << 16));
        let mut placements = Vec::with_capacity(n.min(1 << 16));
        let mut barcodes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            patches.push(PatchRef {
                slide_id: slide_id.clone(),
                grid_x: r.u32()?,
                grid_y: r.u32()?,
                origin_x: r.u32()?,
                origin_y: r.u32()?,
                color_cluster: r.u32()?,
            });
            placements.push(Placement {
                x: r.u32()?,
                y: r.u32()?,
                clamped: r.flag()?,
            });
            barcodes.push(Barcode::from_bytes(r.take(nbytes)?, l)?);
        }
        let bob = BunchOfBarcodes::new(&slide_id, &extractor.extractor_id, patches, barcodes)?;
        let slide = IndexedSlide {
            slide_id: slide_id.clone(),
            labels,
            bob,
            placements,
        };
        if slides.insert(slide_id.clone(), slide).is_some() {
            return Err(Error::DuplicateSlide(slide_id));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("unparsed bytes before checksum".into()));
    }
    Ok(ArchiveIndex {
        config,
        extractor,
        slides,
    })
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_index(index: &ArchiveIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_index(index)?;
    let tmp = path.with_extension("bob.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<ArchiveIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index(&bytes)
}
