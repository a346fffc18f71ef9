//! Exhaustive Hamming search over an archive index: slide-to-slide scan
//! distance, patch k-NN, and top-5 majority vote.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barcode::{hamming_words, Barcode, BunchOfBarcodes};
use crate::error::{Error, Result};
use crate::index_store::{ArchiveIndex, IndexedSlide};
use crate::mosaic::PatchRef;
use crate::slide_io::normalize_label;

/// Vertical search stays inside one primary site; horizontal spans the archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "site", rename_all = "lowercase")]
pub enum SearchMode {
    Horizontal,
    Vertical(String),
}

impl SearchMode {
    fn admits(&self, slide: &IndexedSlide) -> bool {
        match self {
            SearchMode::Horizontal => true,
            SearchMode::Vertical(site) => slide.labels.primary_site.as_deref() == Some(normalize_label(site).as_str()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SearchMode::Vertical(site) if normalize_label(site).is_empty() => {
                Err(Error::InvalidConfig("vertical search needs a site".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanQuery<'a> {
    pub bunch: &'a BunchOfBarcodes,
    pub mode: SearchMode,
    pub k: usize,
    /// Share of the query's barcodes used, in (0, 1].
    pub mosaic_fraction: f64,
    /// Drives the subsample when `mosaic_fraction < 1`.
    pub seed: u64,
}

impl<'a> ScanQuery<'a> {
    pub fn new(bunch: &'a BunchOfBarcodes, mode: SearchMode, k: usize) -> Self {
        Self {
            bunch,
            mode,
            k,
            mosaic_fraction: 1.0,
            seed: 0,
        }
    }

    pub fn with_fraction(mut self, fraction: f64, seed: u64) -> Self {
        self.mosaic_fraction = fraction;
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanHit {
    pub slide_id: String,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query_id: String,
    /// Ascending distance, ties by slide id; never contains the query.
    pub ranked: Vec<ScanHit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchHit {
    pub patch: PatchRef,
    pub distance: u32,
}

fn check_lengths(a: &[Barcode], b: &[Barcode]) -> Result<()> {
    let (Some(first), Some(other)) = (a.first(), b.first()) else {
        return Err(Error::EmptyBunch);
    };
    let l = first.len();
    if let Some(bad) = a.iter().chain(b).find(|x| x.len() != l) {
        return Err(Error::BarcodeLength(l, bad.len()));
    }
    debug_assert_eq!(other.len(), l);
    Ok(())
}

/// For every query barcode, its minimum Hamming distance to `target`.
pub fn barcode_minima(query: &[Barcode], target: &[Barcode]) -> Result<Vec<u32>> {
    check_lengths(query, target)?;
    Ok(minima_unchecked(query, target))
}

fn minima_unchecked(query: &[Barcode], target: &[Barcode]) -> Vec<u32> {
    query
        .iter()
        .map(|q| {
            target
                .iter()
                .map(|t| hamming_words(q.words(), t.words()))
                .min()
                .expect("target nonempty")
        })
        .collect()
}

/// Lower median: the element at `(n - 1) / 2` in sorted order.
pub fn lower_median(values: &mut [u32]) -> Option<u32> {
    if values.is_empty() {
        return None;
    }
    let mid = (values.len() - 1) / 2;
    Some(*values.select_nth_unstable(mid).1)
}

/// Median over `query` barcodes of the minimum Hamming distance to any
/// `target` barcode. Not symmetric in its arguments.
pub fn scan_distance(query: &[Barcode], target: &[Barcode]) -> Result<u32> {
    let mut minima = barcode_minima(query, target)?;
    Ok(lower_median(&mut minima).expect("nonempty"))
}

/// Uniform subsample without replacement of `max(1, round(fraction·n))`
/// barcodes, returned in their original order.
pub fn subsample(barcodes: &[Barcode], fraction: f64, seed: u64) -> Result<Vec<Barcode>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("mosaic fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(barcodes.to_vec());
    }
    let n = barcodes.len();
    let take = ((fraction * n as f64).round() as usize).clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| barcodes[i].clone()).collect())
}

/// Top-`k` slides by scan distance from the query, excluding the query slide.
pub fn scan_knn(query: &ScanQuery, index: &ArchiveIndex) -> Result<SearchResult> {
    if query.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    query.mode.validate()?;
    if query.bunch.is_empty() {
        return Err(Error::EmptyBunch);
    }
    if query.bunch.barcode_len() != index.barcode_len() {
        return Err(Error::BarcodeLength(index.barcode_len(), query.bunch.barcode_len()));
    }
    let probe = subsample(&query.bunch.barcodes, query.mosaic_fraction, query.seed)?;

    let candidates: Vec<&IndexedSlide> = index
        .slides()
        .filter(|s| s.slide_id != query.bunch.slide_id && query.mode.admits(s))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates(query.bunch.slide_id.clone()));
    }

    let mut ranked: Vec<ScanHit> = candidates
        .par_iter()
        .map(|s| {
            let mut minima = minima_unchecked(&probe, &s.bob.barcodes);
            ScanHit {
                slide_id: s.slide_id.clone(),
                distance: lower_median(&mut minima).expect("nonempty"),
            }
        })
        .collect();
    ranked.sort_by(|a, b| a.distance.cmp(&b.distance).then_with(|| a.slide_id.cmp(&b.slide_id)));
    ranked.truncate(query.k);
    Ok(SearchResult {
        query_id: query.bunch.slide_id.clone(),
        ranked,
    })
}

/// Top-`k` individual patches by Hamming distance to `barcode`, ties by
/// (slide id, grid y, grid x).
pub fn patch_knn(barcode: &Barcode, index: &ArchiveIndex, k: usize, mode: &SearchMode) -> Result<Vec<PatchHit>> {
    mode.validate()?;
    if barcode.len() != index.barcode_len() {
        return Err(Error::BarcodeLength(index.barcode_len(), barcode.len()));
    }
    let mut hits: Vec<PatchHit> = index
        .slides()
        .filter(|s| mode.admits(s))
        .flat_map(|s| s.bob.patches.iter().zip(&s.bob.barcodes))
        .map(|(p, b)| PatchHit {
            patch: p.clone(),
            distance: hamming_words(barcode.words(), b.words()),
        })
        .collect();
    if hits.is_empty() {
        return Err(Error::EmptyCandidates("patch query".into()));
    }
    hits.sort_by(|a, b| {
        (a.distance, &a.patch.slide_id, a.patch.grid_y, a.patch.grid_x).cmp(&(
            b.distance,
            &b.patch.slide_id,
            b.patch.grid_y,
            b.patch.grid_x,
        ))
    });
    hits.truncate(k);
    Ok(hits)
}

/// Number of neighbours polled by [`classify_by_vote`].
pub const VOTE_K: usize = 5;

pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTally {
    pub label: String,
    pub votes: usize,
    pub distance_sum: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub label: String,
    /// Sorted by the same order used to pick the winner.
    pub tallies: Vec<LabelTally>,
    pub unanimous: bool,
    /// Fewer than [`VOTE_K`] candidates were available.
    pub short: bool,
    pub hits: Vec<ScanHit>,
}

/// Modal label; ties go to the smaller distance sum, then the
/// lexicographically smaller label.
pub fn majority_vote(labeled: &[(String, u32)]) -> Option<(String, Vec<LabelTally>)> {
    let mut by_label: BTreeMap<&str, (usize, u64)> = BTreeMap::new();
    for (label, d) in labeled {
        let e = by_label.entry(label.as_str()).or_default();
        e.0 += 1;
        e.1 += u64::from(*d);
    }
    let mut tallies: Vec<LabelTally> = by_label
        .into_iter()
        .map(|(label, (votes, distance_sum))| LabelTally {
            label: label.to_string(),
            votes,
            distance_sum,
        })
        .collect();
    tallies.sort_by(|a, b| {
        b.votes
            .cmp(&a.votes)
            .then(a.distance_sum.cmp(&b.distance_sum))
            .then_with(|| a.label.cmp(&b.label))
    });
    Some((tallies.first()?.label.clone(), tallies))
}

/// Labels `query` with the modal diagnosis of its top-5 vertical neighbours.
pub fn classify_by_vote(query: &IndexedSlide, index: &ArchiveIndex, site: &str) -> Result<Vote> {
    let q = ScanQuery::new(&query.bob, SearchMode::Vertical(site.to_string()), VOTE_K);
    let result = scan_knn(&q, index)?;
    let labeled: Vec<(String, u32)> = result
        .ranked
        .iter()
        .map(|h| {
            let label = index
                .get(&h.slide_id)
                .and_then(|s| s.labels.primary_diagnosis.clone())
                .unwrap_or_else(|| UNLABELED.to_string());
            (label, h.distance)
        })
        .collect();
    let (label, tallies) = majority_vote(&labeled).ok_or_else(|| Error::EmptyCandidates(query.slide_id.clone()))?;
    Ok(Vote {
        label,
        unanimous: tallies.len() == 1,
        short: result.ranked.len() < VOTE_K,
        tallies,
        hits: result.ranked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ExtractorDescriptor, ExtractorKind};
    use crate::index_store::Placement;
    use crate::mosaic::IndexingConfig;
    use crate::slide_io::SlideLabels;

    fn byte(v: u8) -> Barcode {
        Barcode::from_bits(&(0..8).map(|i| (v >> i) & 1 == 1).collect::<Vec<_>>())
    }

    fn patch(id: &str, i: u32) -> PatchRef {
        PatchRef {
            slide_id: id.into(),
            grid_x: i,
            grid_y: 0,
            origin_x: i,
            origin_y: 0,
            color_cluster: 0,
        }
    }

    fn slide(id: &str, site: &str, diag: &str, codes: &[u8]) -> IndexedSlide {
        let patches = (0..codes.len() as u32).map(|i| patch(id, i)).collect();
        IndexedSlide {
            slide_id: id.into(),
            labels: SlideLabels::new(Some(site), Some(diag)),
            bob: BunchOfBarcodes::new(id, "t", patches, codes.iter().map(|&c| byte(c)).collect()).unwrap(),
            placements: vec![Placement { x: 0, y: 0, clamped: false }; codes.len()],
        }
    }

    fn index(slides: Vec<IndexedSlide>) -> ArchiveIndex {
        let mut idx = ArchiveIndex::new(
            IndexingConfig::default(),
            ExtractorDescriptor {
                extractor_id: "t".into(),
                d: 9,
                kind: ExtractorKind::External,
            },
        );
        for s in slides {
            idx.insert(s).unwrap();
        }
        idx
    }

    #[test]
    fn identical_bunches() {
        let a: Vec<Barcode> = [1u8, 7, 200].iter().map(|&v| byte(v)).collect();
        assert_eq!(scan_distance(&a, &a).unwrap(), 0);
    }

    #[test]
    fn median_of_minima() {
        // Target is all zeros; minima are the popcounts 2, 5, 7.
        let q = vec![byte(0b11), byte(0b1_1111), byte(0b111_1111)];
        let t = vec![byte(0)];
        assert_eq!(barcode_minima(&q, &t).unwrap(), vec![2, 5, 7]);
        assert_eq!(scan_distance(&q, &t).unwrap(), 5);
        // Even count takes the lower median.
        let q4 = vec![byte(0b1), byte(0b111), byte(0b1111), byte(0xff)];
        assert_eq!(scan_distance(&q4, &t).unwrap(), 3);
    }

    #[test]
    fn not_commutative() {
        // b holds all of a plus two outliers.
        let a = vec![byte(0)];
        let b = vec![byte(0), byte(0xf0), byte(0xff)];
        assert_eq!(scan_distance(&a, &b).unwrap(), 0);
        assert_eq!(scan_distance(&b, &a).unwrap(), 4);
    }

    #[test]
    fn scan_errors() {
        assert!(matches!(scan_distance(&[], &[byte(1)]), Err(Error::EmptyBunch)));
        assert!(matches!(scan_distance(&[byte(1)], &[Barcode::zeros(9)]), Err(Error::BarcodeLength(8, 9))));
    }

    #[test]
    fn knn_ranks_and_excludes_query() {
        let idx = index(vec![
            slide("q", "lung", "a", &[0x00, 0x0f]),
            slide("near", "lung", "a", &[0x01, 0x0f]),
            slide("far", "brain", "b", &[0xff]),
            slide("mid", "brain", "b", &[0x03, 0x1f]),
            slide("tie", "lung", "a", &[0x1f, 0x00]),
        ]);
        let q = idx.get("q").unwrap();
        let r = scan_knn(&ScanQuery::new(&q.bob, SearchMode::Horizontal, 10), &idx).unwrap();
        let ids: Vec<&str> = r.ranked.iter().map(|h| h.slide_id.as_str()).collect();
        assert_eq!(ids, vec!["near", "tie", "mid", "far"]);
        assert_eq!(r.ranked.iter().map(|h| h.distance).collect::<Vec<_>>(), vec![0, 0, 1, 4]);

        let r = scan_knn(&ScanQuery::new(&q.bob, SearchMode::Vertical("Lung".into()), 1), &idx).unwrap();
        assert_eq!(r.ranked.len(), 1);
        let err = scan_knn(&ScanQuery::new(&q.bob, SearchMode::Vertical("kidney".into()), 3), &idx).unwrap_err();
        assert!(matches!(err, Error::EmptyCandidates(_)));
        let lonely = index(vec![slide("q", "lung", "a", &[0])]);
        let q = lonely.get("q").unwrap();
        assert!(scan_knn(&ScanQuery::new(&q.bob, SearchMode::Vertical("lung".into()), 3), &lonely).is_err());
    }

    #[test]
    fn subsample_is_seeded() {
        let codes: Vec<Barcode> = (0..20u8).map(byte).collect();
        let a = subsample(&codes, 0.3, 4).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, subsample(&codes, 0.3, 4).unwrap());
        assert_eq!(subsample(&codes[..1], 0.1, 0).unwrap().len(), 1);
        assert!(subsample(&codes, 0.0, 0).is_err());
        assert!(subsample(&codes, 1.5, 0).is_err());
    }

    #[test]
    fn patch_search() {
        let idx = index(vec![slide("a", "lung", "x", &[0x0f, 0xf0]), slide("b", "brain", "y", &[0x0f, 0x00])]);
        let hits = patch_knn(&byte(0x0f), &idx, 10, &SearchMode::Horizontal).unwrap();
        assert_eq!(hits.len(), 4);
        assert_eq!((hits[0].distance, hits[0].patch.slide_id.as_str()), (0, "a"));
        assert_eq!((hits[1].distance, hits[1].patch.slide_id.as_str()), (0, "b"));
        assert_eq!(hits[2].distance, 4);
        let lung = patch_knn(&byte(0x0f), &idx, 10, &SearchMode::Vertical("lung".into())).unwrap();
        assert_eq!(lung.len(), 2);
    }

    fn labeled(v: &[(&str, u32)]) -> Vec<(String, u32)> {
        v.iter().map(|&(l, d)| (l.to_string(), d)).collect()
    }

    #[test]
    fn votes() {
        let (l, _) = majority_vote(&labeled(&[("A", 1), ("A", 1), ("B", 1), ("B", 1), ("A", 1)])).unwrap();
        assert_eq!(l, "A");
        let (l, t) = majority_vote(&labeled(&[("A", 4), ("A", 6), ("B", 3), ("B", 4), ("C", 0)])).unwrap();
        assert_eq!(l, "B");
        assert_eq!((t[0].distance_sum, t[1].distance_sum), (7, 10));
        let (l, _) = majority_vote(&labeled(&[("Z", 2), ("Y", 2)])).unwrap();
        assert_eq!(l, "Y");
        assert!(majority_vote(&[]).is_none());
    }

    #[test]
    fn vote_flags() {
        let idx = index(vec![
            slide("q", "lung", "a", &[0x00]),
            slide("n1", "lung", "a", &[0x01]),
            slide("n2", "lung", "a", &[0x03]),
            slide("x", "brain", "b", &[0x00]),
        ]);
        let v = classify_by_vote(idx.get("q").unwrap(), &idx, "lung").unwrap();
        assert_eq!(v.label, "a");
        assert!(v.unanimous && v.short);
        assert_eq!(v.hits.len(), 2);
    }
}
