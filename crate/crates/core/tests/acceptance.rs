//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails.
//!
//! `BOB_MIN_HAMMING_RATE` overrides the throughput floor (evaluations/s).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bob_core::barcode::{hamming_words, minmax_barcode, Barcode, BunchOfBarcodes};
use bob_core::eval::{
    confusion_matrix, correct_retrieval_counts, loo_accuracy, random_baseline, run_plan, Attribute, EvalPlan,
    ExperimentSpec,
};
use bob_core::features::{ExtractorDescriptor, ExtractorKind, FeatureVector, ReferenceExtractor};
use bob_core::index_store::{build_index, decode_index, encode_index, save_index, ArchiveIndex, IndexedSlide, Placement};
use bob_core::mosaic::{build_mosaic, IndexingConfig, PatchRef};
use bob_core::search::{scan_distance, scan_knn, ScanQuery, SearchMode};
use bob_core::slide_io::{generate_synthetic_corpus, list_slide_dirs, open_slide, CorpusSpec, SlideLabels};
use bob_core::index_store::clustering_mask;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const CORPUS_SEED: u64 = 20;

type Outcome = Result<String, String>;

struct Corpus {
    _dir: TempDir,
    root: std::path::PathBuf,
    bytes: u64,
    index: ArchiveIndex,
}

fn acceptance_config() -> IndexingConfig {
    IndexingConfig {
        s_l: 16,
        s_h: 64,
        ..IndexingConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> u64 {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let meta = e.metadata().unwrap();
            if meta.is_dir() {
                dir_bytes(&e.path())
            } else {
                meta.len()
            }
        })
        .sum()
}

fn build_corpus() -> Result<Corpus, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("corpus");
    generate_synthetic_corpus(&CorpusSpec::demo(4, 10), CORPUS_SEED, &root).map_err(|e| e.to_string())?;
    let cfg = acceptance_config();
    let extractor = ReferenceExtractor::new(cfg.s_h).map_err(|e| e.to_string())?;
    let dirs = list_slide_dirs(&root).map_err(|e| e.to_string())?;
    let built = build_index(&dirs, &cfg, &extractor).map_err(|e| e.to_string())?;
    if !built.skipped.is_empty() {
        return Err(format!("{} slides skipped: {:?}", built.skipped.len(), built.skipped[0]));
    }
    Ok(Corpus {
        bytes: dir_bytes(&root),
        root,
        index: built.index,
        _dir: dir,
    })
}

fn naive_hamming(a: &[bool], b: &[bool]) -> u32 {
    let mut d = 0;
    for i in 0..a.len() {
        if a[i] != b[i] {
            d += 1;
        }
    }
    d
}

fn random_bits(rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    (0..len).map(|_| rng.random_bool(0.5)).collect()
}

fn hamming_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = 0;
    for len in [7usize, 255, 1024] {
        for _ in 0..4000 {
            let (a, b) = (random_bits(&mut rng, len), random_bits(&mut rng, len));
            let packed = bob_core::hamming(&Barcode::from_bits(&a), &Barcode::from_bits(&b)).map_err(|e| e.to_string())?;
            let naive = naive_hamming(&a, &b);
            if packed != naive {
                return Err(format!("L={len}: packed {packed} vs naive {naive}"));
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} pairs exact"))
}

fn naive_minmax(f: &[f64]) -> Vec<bool> {
    f.windows(2).map(|w| w[1] - w[0] > 0.0).collect()
}

fn minmax_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 0..1000 {
        let d = rng.random_range(2..=512);
        // Small-integer values keep α·f and f + c exact in binary floating point.
        let f: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(-64i32..=64)) / 4.0).collect();
        let fv = |v: Vec<f64>| FeatureVector::new(v, "t").unwrap();
        let base = minmax_barcode(&fv(f.clone())).map_err(|e| e.to_string())?;
        if base != Barcode::from_bits(&naive_minmax(&f)) {
            return Err(format!("vector {n}: differs from definition"));
        }
        for alpha in [0.5, 2.0, 10.0] {
            if minmax_barcode(&fv(f.iter().map(|x| alpha * x).collect())).unwrap() != base {
                return Err(format!("vector {n}: scale {alpha}"));
            }
        }
        for c in [-3.5, 0.25, 100.0] {
            if minmax_barcode(&fv(f.iter().map(|x| x + c).collect())).unwrap() != base {
                return Err(format!("vector {n}: shift {c}"));
            }
        }
    }
    Ok("1000 vectors, 3 scales, 3 shifts".into())
}

/// Independent median-of-minimum: bit vectors, full sort, lower median.
fn brute_scan(query: &[Vec<bool>], target: &[Vec<bool>]) -> u32 {
    let mut mins: Vec<u32> = query
        .iter()
        .map(|q| target.iter().map(|t| naive_hamming(q, t)).fold(u32::MAX, u32::min))
        .collect();
    mins.sort();
    mins[(mins.len() - 1) / 2]
}

fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for pair in 0..1000 {
        let na = rng.random_range(1..=50);
        let nb = rng.random_range(1..=50);
        let a: Vec<Vec<bool>> = (0..na).map(|_| random_bits(&mut rng, 255)).collect();
        let b: Vec<Vec<bool>> = (0..nb).map(|_| random_bits(&mut rng, 255)).collect();
        let pa: Vec<Barcode> = a.iter().map(|x| Barcode::from_bits(x)).collect();
        let pb: Vec<Barcode> = b.iter().map(|x| Barcode::from_bits(x)).collect();
        let got = scan_distance(&pa, &pb).map_err(|e| e.to_string())?;
        let want = brute_scan(&a, &b);
        if got != want {
            return Err(format!("pair {pair}: {got} vs brute {want}"));
        }
    }
    let mut x = vec![false; 255];
    let a = vec![x.clone()];
    let mut b = vec![x.clone()];
    x[..40].iter_mut().for_each(|v| *v = true);
    b.push(x.clone());
    x[..80].iter_mut().for_each(|v| *v = true);
    b.push(x);
    let pa: Vec<Barcode> = a.iter().map(|x| Barcode::from_bits(x)).collect();
    let pb: Vec<Barcode> = b.iter().map(|x| Barcode::from_bits(x)).collect();
    let ab = scan_distance(&pa, &pb).unwrap();
    let ba = scan_distance(&pb, &pa).unwrap();
    if ab == ba {
        return Err(format!("witness symmetric: {ab}"));
    }
    Ok(format!("1000 pairs exact; witness scan(A,B)={ab} scan(B,A)={ba}"))
}

fn mosaic_size_law(corpus: &Corpus) -> Outcome {
    let cfg = acceptance_config();
    let mut worst: f64 = 0.0;
    let mut large = 0;
    let dirs = list_slide_dirs(&corpus.root).map_err(|e| e.to_string())?;
    for dir in &dirs {
        let slide = open_slide(dir).map_err(|e| e.to_string())?;
        let mask = clustering_mask(&slide, &cfg).map_err(|e| e.to_string())?;
        let m = build_mosaic(&slide, &mask, &cfg).map_err(|e| e.to_string())?;
        let mut per_cluster: BTreeMap<u32, usize> = BTreeMap::new();
        for p in &m.patches {
            *per_cluster.entry(p.color_cluster).or_default() += 1;
        }
        let mut expected = 0;
        for (c, &size) in m.color_cluster_sizes.iter().enumerate() {
            if size == 0 {
                continue;
            }
            let want = ((cfg.p_m * size as f64).round() as usize).max(1);
            expected += want;
            let got = per_cluster.get(&(c as u32)).copied().unwrap_or(0);
            if got != want {
                return Err(format!("{}: cluster {c} has {got} patches, law gives {want}", slide.slide_id));
            }
        }
        if m.color_cluster_sizes.iter().sum::<usize>() != m.tissue_patches || m.patches.len() != expected {
            return Err(format!("{}: |M|={} expected {expected}", slide.slide_id, m.patches.len()));
        }
        if m.tissue_patches >= 200 {
            large += 1;
            worst = worst.max(m.patches.len() as f64 / m.tissue_patches as f64);
        }
    }
    if dirs.len() != 40 {
        return Err(format!("{} slides", dirs.len()));
    }
    if large == 0 {
        return Err("no slide reached 200 tissue patches".into());
    }
    if worst > 0.10 {
        return Err(format!("|M|/|P_T| reached {worst:.4}"));
    }
    Ok(format!("40 slides exact; {large} with >=200 tissue patches, max |M|/|P_T| = {worst:.4}"))
}

fn diagnoses(index: &ArchiveIndex) -> Vec<String> {
    let mut v: Vec<String> = index.slides().filter_map(|s| s.labels.primary_diagnosis.clone()).collect();
    v.sort();
    v.dedup();
    v
}

fn pooled_accuracy(index: &ArchiveIndex, k: usize) -> Result<f64, String> {
    let (mut hits, mut total) = (0.0, 0.0);
    for dx in diagnoses(index) {
        let r = loo_accuracy(index, &ExperimentSpec::new(Attribute::Diagnosis, dx, k)).map_err(|e| e.to_string())?;
        hits += r.accuracy * r.queries as f64;
        total += r.queries as f64;
    }
    Ok(hits / total)
}

fn retrieval(corpus: &Corpus) -> Outcome {
    let n = corpus.index.len();
    let acc10 = pooled_accuracy(&corpus.index, 10)?;
    let acc1 = pooled_accuracy(&corpus.index, 1)?;
    let chance10 = random_baseline(n, 10, 10).map_err(|e| e.to_string())?;
    let chance1 = random_baseline(n, 10, 1).map_err(|e| e.to_string())?;
    let margin = acc1 / chance1;
    let msg = format!(
        "k=10: {acc10:.3} (floor 0.95, chance {chance10:.3}); k=1: {acc1:.3} (floor 0.80, chance {chance1:.3}, {margin:.2}x)"
    );
    if acc10 >= 0.95 && acc1 >= 0.80 && margin >= 3.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn correct_counts(corpus: &Corpus) -> Outcome {
    let mut counts = Vec::new();
    let mut expectation = 0.0;
    for dx in diagnoses(&corpus.index) {
        let c = correct_retrieval_counts(&corpus.index, &ExperimentSpec::new(Attribute::Diagnosis, dx, 10))
            .map_err(|e| e.to_string())?;
        expectation = c.bernoulli_expectation;
        counts.extend(c.per_query.into_iter().map(|(_, n)| n as f64));
    }
    let median = bob_core::eval::median(&counts).unwrap();
    let msg = format!("median {median} vs 3 x {expectation:.3} = {:.3}", 3.0 * expectation);
    if median >= 3.0 * expectation {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn vote_classification(corpus: &Corpus) -> Outcome {
    let mut detail = Vec::new();
    let mut failed = false;
    for site in ["lung", "brain"] {
        let r = confusion_matrix(&corpus.index, site).map_err(|e| e.to_string())?;
        failed |= r.accuracy < 0.85;
        detail.push(format!("{site}: {:.3}", r.accuracy));
    }
    if failed {
        Err(detail.join("; "))
    } else {
        Ok(detail.join("; "))
    }
}

fn baseline_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 200_000;
    let mut detail = Vec::new();
    for (n, n_c, k) in [(10usize, 5usize, 1usize), (40, 10, 10), (100, 3, 10)] {
        let p = random_baseline(n, n_c, k).map_err(|e| e.to_string())?;
        // Other slides 0..n-1; the first n_c - 1 share the query's class.
        let mut hits = 0u64;
        for _ in 0..draws {
            hits += u64::from(sample(&mut rng, n - 1, k).iter().any(|i| i < n_c - 1));
        }
        let sim = hits as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let z = (sim - p).abs() / se;
        detail.push(format!("({n},{n_c},{k}): {p:.4} vs {sim:.4}, {z:.2} SE"));
        if z > 3.0 {
            return Err(detail.join("; "));
        }
    }
    Ok(detail.join("; "))
}

fn random_index(rng: &mut ChaCha8Rng) -> ArchiveIndex {
    let d = rng.random_range(2..=300);
    let mut cfg = IndexingConfig::default();
    cfg.k_ch = rng.random_range(1..=12);
    cfg.p_m = rng.random_range(0.01..0.5);
    cfg.kmeans.seed = rng.random();
    cfg.segmentation.t_lo = rng.random_bool(0.5).then(|| rng.random());
    let descriptor = ExtractorDescriptor {
        extractor_id: format!("x{}", rng.random::<u16>()),
        d,
        kind: if rng.random_bool(0.5) { ExtractorKind::BuiltIn } else { ExtractorKind::External },
    };
    let mut index = ArchiveIndex::new(cfg, descriptor.clone());
    for s in 0..rng.random_range(0..12) {
        let id = format!("slide-{s}-{}", rng.random::<u32>());
        let n = rng.random_range(1..20);
        let patches: Vec<PatchRef> = (0..n)
            .map(|_| PatchRef {
                slide_id: id.clone(),
                grid_x: rng.random_range(0..1000),
                grid_y: rng.random_range(0..1000),
                origin_x: rng.random(),
                origin_y: rng.random(),
                color_cluster: rng.random_range(0..12),
            })
            .collect();
        let barcodes = (0..n).map(|_| Barcode::from_bits(&random_bits(rng, d - 1))).collect();
        let placements = (0..n)
            .map(|_| Placement {
                x: rng.random(),
                y: rng.random(),
                clamped: rng.random_bool(0.2),
            })
            .collect();
        let pick = |rng: &mut ChaCha8Rng, v: &'static str| rng.random_bool(0.7).then_some(v);
        let (site, dx) = (pick(rng, "Lung"), pick(rng, "Adeno-carcinoma"));
        index
            .insert(IndexedSlide {
                labels: SlideLabels::new(site, dx),
                bob: BunchOfBarcodes::new(&id, &descriptor.extractor_id, patches, barcodes).unwrap(),
                placements,
                slide_id: id,
            })
            .unwrap();
    }
    index
}

fn round_trip(corpus: &Corpus) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let index = random_index(&mut rng);
        let bytes = encode_index(&index).map_err(|e| e.to_string())?;
        let back = decode_index(&bytes).map_err(|e| format!("index {i}: {e}"))?;
        if back != index || encode_index(&back).unwrap() != bytes {
            return Err(format!("index {i} differs after round trip"));
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("corpus.bob");
    save_index(&corpus.index, &path).map_err(|e| e.to_string())?;
    let size = std::fs::metadata(&path).unwrap().len();
    if bob_core::load_index(&path).map_err(|e| e.to_string())? != corpus.index {
        return Err("corpus index changed on reload".into());
    }
    let ratio = size as f64 / corpus.bytes as f64;
    let msg = format!("100 indexes bit-exact; corpus index {size} B / {} B = {:.4}%", corpus.bytes, ratio * 100.0);
    if ratio <= 0.001 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// gen-corpus, index, search and eval into `out`; returns the files to compare.
fn pipeline_run(out: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let e = |e: bob_core::Error| e.to_string();
    let corpus = out.join("corpus");
    generate_synthetic_corpus(&CorpusSpec::demo(4, 3), 99, &corpus).map_err(e)?;
    let cfg = acceptance_config();
    let extractor = ReferenceExtractor::new(cfg.s_h).map_err(e)?;
    let built = build_index(&list_slide_dirs(&corpus).map_err(e)?, &cfg, &extractor).map_err(e)?;
    save_index(&built.index, out.join("index.bob")).map_err(e)?;
    let index = bob_core::load_index(out.join("index.bob")).map_err(e)?;
    let mut search = String::new();
    for s in index.slides() {
        let r = scan_knn(&ScanQuery::new(&s.bob, SearchMode::Horizontal, 5).with_fraction(0.5, 7), &index).map_err(e)?;
        for h in r.ranked {
            search.push_str(&format!("{},{},{}\n", s.slide_id, h.slide_id, h.distance));
        }
    }
    let plan = EvalPlan {
        experiments: vec![ExperimentSpec {
            attribute: Attribute::Site,
            attribute_value: "brain".into(),
            top_k: 3,
            mosaic_fractions: vec![0.3, 1.0],
            repeats: 4,
        }],
        confusion_sites: vec!["lung".into()],
    };
    run_plan(&index, &plan, &out.join("eval")).map_err(e)?;
    let read = |rel: &str| std::fs::read(out.join(rel)).map_err(|err| format!("{rel}: {err}"));
    Ok(vec![
        ("index.bob".into(), read("index.bob")?),
        ("search".into(), search.into_bytes()),
        ("loo.csv".into(), read("eval/site-brain/loo.csv")?),
        ("confusion_lung.csv".into(), read("eval/confusion_lung.csv")?),
        ("summary.json".into(), read("eval/summary.json")?),
    ])
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = pipeline_run(a.path())?;
    let rb = pipeline_run(b.path())?;
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical", ra.len()))
}

fn hamming_throughput() -> Outcome {
    let floor: f64 = std::env::var("BOB_MIN_HAMMING_RATE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1e7);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let codes: Vec<Barcode> = (0..1024).map(|_| Barcode::from_bits(&random_bits(&mut rng, 255))).collect();
    let start = Instant::now();
    let mut acc = 0u64;
    let mut total = 0u64;
    while start.elapsed() < Duration::from_millis(500) {
        for q in &codes[..64] {
            for t in &codes {
                acc += u64::from(hamming_words(std::hint::black_box(q.words()), t.words()));
            }
        }
        total += 64 * codes.len() as u64;
    }
    let elapsed = start.elapsed();
    std::hint::black_box(acc);
    let rate = total as f64 / elapsed.as_secs_f64();
    let msg = format!("{rate:.3e} evaluations/s at L=255 (floor {floor:.1e})");
    if rate >= floor {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Gate {
    failures: usize,
}

impl Gate {
    fn run(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(d) => (false, d),
        };
        self.failures += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.2}s / {}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
}

fn main() -> ExitCode {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let secs = Duration::from_secs;
    let mut gate = Gate { failures: 0 };

    gate.run("hamming oracle", secs(10), hamming_oracle);
    gate.run("minmax invariances", secs(5), minmax_invariance);
    gate.run("scan distance oracle", secs(30), scan_oracle);

    let start = Instant::now();
    let corpus = match build_corpus() {
        Ok(c) => c,
        Err(e) => {
            println!("FAIL synthetic corpus: {e}");
            return ExitCode::FAILURE;
        }
    };
    let setup = start.elapsed();
    println!(
        "info corpus: {} slides, {} barcodes, built in {:.2}s",
        corpus.index.len(),
        corpus.index.total_barcodes(),
        setup.as_secs_f64()
    );

    gate.run("mosaic size law", mins(5).saturating_sub(setup), || mosaic_size_law(&corpus));
    gate.run("retrieval beats chance", mins(10).saturating_sub(setup), || retrieval(&corpus));
    gate.run("correct retrieval counts", mins(10).saturating_sub(setup), || correct_counts(&corpus));
    gate.run("vote classification", mins(5).saturating_sub(setup), || vote_classification(&corpus));
    gate.run("random baseline vs simulation", mins(1), baseline_monte_carlo);
    gate.run("index round trip", mins(2), || round_trip(&corpus));
    gate.run("pipeline determinism", mins(10), determinism);
    gate.run("hamming throughput", secs(30), hamming_throughput);

    if gate.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", gate.failures);
        ExitCode::FAILURE
    }
}
