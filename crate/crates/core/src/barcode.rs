//! MinMax barcodes and packed Hamming distance.
//!
//! Bit `i` of a barcode lives in word `i / 64` at bit position `i % 64`;
//! serialized bytes follow the same little-endian order (bit `i` in byte
//! `i / 8`, position `i % 8`). Padding bits are always zero.

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::mosaic::PatchRef;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Barcode {
    words: Vec<u64>,
    len: usize,
}

impl Barcode {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut b = Self::zeros(bits.len());
        for (i, &bit) in bits.iter().enumerate() {
            if bit {
                b.words[i / 64] |= 1 << (i % 64);
            }
        }
        b
    }

    /// Decodes `len` bits from `len.div_ceil(8)` little-endian bytes.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Corrupt(format!("{} barcode bytes for {len} bits", bytes.len())));
        }
        let mut b = Self::zeros(len);
        for (i, &byte) in bytes.iter().enumerate() {
            b.words[i / 8] |= u64::from(byte) << (8 * (i % 8));
        }
        if len % 64 != 0 && b.words.last().is_some_and(|w| w >> (len % 64) != 0) {
            return Err(Error::Corrupt("nonzero barcode padding".into()));
        }
        Ok(b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

/// Bit `i` is set when `f[i+1] - f[i] > 0`; ties give 0.
pub fn minmax_barcode(f: &FeatureVector) -> Result<Barcode> {
    minmax_bits(&f.values)
}

pub fn minmax_bits(values: &[f64]) -> Result<Barcode> {
    if values.len() < 2 {
        return Err(Error::FeatureTooShort(values.len()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut b = Barcode::zeros(values.len() - 1);
    for (i, w) in values.windows(2).enumerate() {
        if w[1] - w[0] > 0.0 {
            b.words[i / 64] |= 1 << (i % 64);
        }
    }
    Ok(b)
}

/// Hamming distance between equal-length barcodes.
pub fn hamming(a: &Barcode, b: &Barcode) -> Result<u32> {
    if a.len != b.len {
        return Err(Error::BarcodeLength(a.len, b.len));
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// XOR + popcount over packed words. Callers guarantee equal lengths.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// The barcodes of one slide's mosaic, one per mosaic patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BunchOfBarcodes {
    pub slide_id: String,
    pub extractor_id: String,
    pub patches: Vec<PatchRef>,
    pub barcodes: Vec<Barcode>,
}

impl BunchOfBarcodes {
    pub fn new(slide_id: impl Into<String>, extractor_id: impl Into<String>, patches: Vec<PatchRef>, barcodes: Vec<Barcode>) -> Result<Self> {
        if barcodes.is_empty() {
            return Err(Error::EmptyBunch);
        }
        if patches.len() != barcodes.len() {
            return Err(Error::Corrupt(format!("{} patches for {} barcodes", patches.len(), barcodes.len())));
        }
        let l = barcodes[0].len();
        if let Some(b) = barcodes.iter().find(|b| b.len() != l) {
            return Err(Error::BarcodeLength(l, b.len()));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            extractor_id: extractor_id.into(),
            patches,
            barcodes,
        })
    }

    pub fn len(&self) -> usize {
        self.barcodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.barcodes.is_empty()
    }

    pub fn barcode_len(&self) -> usize {
        self.barcodes[0].len()
    }
}
