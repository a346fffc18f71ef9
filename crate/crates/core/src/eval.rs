//! Leave-one-out retrieval experiments, random baselines, correct-retrieval
//! counts and vote confusion matrices, written as CSV plus a JSON summary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ExtractorDescriptor;
use crate::index_store::{ArchiveIndex, IndexedSlide};
use crate::mosaic::IndexingConfig;
use crate::search::{classify_by_vote, scan_knn, ScanQuery, SearchMode};
use crate::slide_io::normalize_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Site,
    Diagnosis,
}

impl Attribute {
    pub fn of(self, slide: &IndexedSlide) -> Option<&str> {
        match self {
            Attribute::Site => slide.labels.primary_site.as_deref(),
            Attribute::Diagnosis => slide.labels.primary_diagnosis.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub attribute: Attribute,
    pub attribute_value: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_fractions")]
    pub mosaic_fractions: Vec<f64>,
    /// Repetitions for fractions below 1; a full mosaic runs once.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_top_k() -> usize {
    10
}
fn default_fractions() -> Vec<f64> {
    vec![0.10, 0.30, 0.70, 1.00]
}
fn default_repeats() -> usize {
    50
}

impl ExperimentSpec {
    pub fn new(attribute: Attribute, value: impl Into<String>, top_k: usize) -> Self {
        Self {
            attribute,
            attribute_value: value.into(),
            top_k,
            mosaic_fractions: vec![1.0],
            repeats: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidExperiment("top_k must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidExperiment("repeats must be at least 1".into()));
        }
        if self.mosaic_fractions.is_empty() || self.mosaic_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidExperiment("fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn seeds(&self, fraction: f64) -> std::ops::Range<u64> {
        if fraction < 1.0 {
            0..self.repeats as u64
        } else {
            0..1
        }
    }
}

/// One retrieval run: a query at one mosaic fraction and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub query_id: String,
    pub fraction: f64,
    pub seed: u64,
    pub success: bool,
    pub correct_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSummary {
    pub fraction: f64,
    pub repeats: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attribute: Attribute,
    pub attribute_value: String,
    pub top_k: usize,
    pub mode: String,
    pub corpus_size: usize,
    pub queries: usize,
    pub rows: Vec<LooRow>,
    pub per_fraction: Vec<FractionSummary>,
    /// Mean accuracy at the largest fraction run.
    pub accuracy: f64,
    pub random_baseline: f64,
    /// Median same-attribute count in the top k at the largest fraction.
    pub median_correct: f64,
    pub bernoulli_expectation: f64,
}

/// Probability that a uniform `k`-subset of the other `n - 1` slides holds at
/// least one of the `n_c - 1` slides sharing the query's class:
/// `1 - C(n - n_c, k) / C(n - 1, k)`.
pub fn random_baseline(n: usize, n_c: usize, k: usize) -> Result<f64> {
    if n_c < 2 || n_c > n || k == 0 || k > n - 1 {
        return Err(Error::InvalidExperiment(format!(
            "baseline needs 2 <= n_c <= N and 1 <= k <= N-1 (N={n}, n_c={n_c}, k={k})"
        )));
    }
    let mut miss = 1.0;
    for i in 0..k {
        let others = n - n_c;
        if i >= others {
            return Ok(1.0);
        }
        miss *= (others - i) as f64 / (n - 1 - i) as f64;
    }
    Ok(1.0 - miss)
}

/// Expected same-class hits in the top `k` under uniform retrieval.
pub fn bernoulli_expectation(n: usize, n_c: usize, k: usize) -> f64 {
    k as f64 * (n_c as f64 - 1.0) / (n as f64 - 1.0)
}

/// Median with the midpoint rule for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn queries_for<'a>(index: &'a ArchiveIndex, spec: &ExperimentSpec) -> Result<Vec<&'a IndexedSlide>> {
    spec.validate()?;
    let wanted = normalize_label(&spec.attribute_value);
    let queries: Vec<&IndexedSlide> = index.slides().filter(|s| spec.attribute.of(s) == Some(wanted.as_str())).collect();
    if queries.len() < 2 {
        return Err(Error::InvalidExperiment(format!(
            "{:?} `{}` is carried by {} slide(s), need at least 2",
            spec.attribute,
            spec.attribute_value,
            queries.len()
        )));
    }
    Ok(queries)
}

/// Runs every (query, fraction, seed) retrieval with horizontal search.
pub fn run_loo(index: &ArchiveIndex, spec: &ExperimentSpec) -> Result<Vec<LooRow>> {
    let queries = queries_for(index, spec)?;
    let wanted = normalize_label(&spec.attribute_value);
    let jobs: Vec<(&IndexedSlide, f64, u64)> = spec
        .mosaic_fractions
        .iter()
        .flat_map(|&f| spec.seeds(f).map(move |seed| (f, seed)))
        .flat_map(|(f, seed)| queries.iter().map(move |q| (*q, f, seed)))
        .collect();
    jobs.par_iter()
        .map(|&(q, fraction, seed)| {
            let query = ScanQuery::new(&q.bob, SearchMode::Horizontal, spec.top_k).with_fraction(fraction, seed);
            let result = scan_knn(&query, index)?;
            let correct = result
                .ranked
                .iter()
                .filter(|h| index.get(&h.slide_id).and_then(|s| spec.attribute.of(s)) == Some(wanted.as_str()))
                .count();
            Ok(LooRow {
                query_id: q.slide_id.clone(),
                fraction,
                seed,
                success: correct > 0,
                correct_count: correct,
            })
        })
        .collect()
}

/// Aggregates rows; the result does not depend on row order.
pub fn summarize_rows(rows: &[LooRow]) -> (Vec<FractionSummary>, f64) {
    let fractions: BTreeSet<u64> = rows.iter().map(|r| r.fraction.to_bits()).collect();
    let mut fractions: Vec<f64> = fractions.into_iter().map(f64::from_bits).collect();
    fractions.sort_by(f64::total_cmp);
    let mut summaries = Vec::new();
    for &f in &fractions {
        let seeds: BTreeSet<u64> = rows.iter().filter(|r| r.fraction == f).map(|r| r.seed).collect();
        let accs: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let runs: Vec<&LooRow> = rows.iter().filter(|r| r.fraction == f && r.seed == s).collect();
                runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64
            })
            .collect();
        let (mean, std) = mean_std(&accs);
        summaries.push(FractionSummary {
            fraction: f,
            repeats: seeds.len(),
            mean_accuracy: mean,
            std_accuracy: std,
        });
    }
    let median_correct = fractions
        .last()
        .and_then(|&top| {
            let counts: Vec<f64> = rows.iter().filter(|r| r.fraction == top).map(|r| r.correct_count as f64).collect();
            median(&counts)
        })
        .unwrap_or(0.0);
    (summaries, median_correct)
}

/// Leave-one-out accuracy: a query succeeds when any of its top-k
/// neighbours shares the attribute value.
pub fn loo_accuracy(index: &ArchiveIndex, spec: &ExperimentSpec) -> Result<EvalReport> {
    let queries = queries_for(index, spec)?.len();
    let rows = run_loo(index, spec)?;
    let (per_fraction, median_correct) = summarize_rows(&rows);
    let n = index.len();
    let k = spec.top_k.min(n - 1);
    Ok(EvalReport {
        attribute: spec.attribute,
        attribute_value: normalize_label(&spec.attribute_value),
        top_k: spec.top_k,
        mode: "horizontal".into(),
        corpus_size: n,
        queries,
        accuracy: per_fraction.last().map(|s| s.mean_accuracy).unwrap_or(0.0),
        per_fraction,
        random_baseline: random_baseline(n, queries, k)?,
        median_correct,
        bernoulli_expectation: bernoulli_expectation(n, queries, k),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub per_query: Vec<(String, usize)>,
    pub median: f64,
    pub bernoulli_expectation: f64,
}

/// Same-attribute hits in each query's top k with the full mosaic.
pub fn correct_retrieval_counts(index: &ArchiveIndex, spec: &ExperimentSpec) -> Result<CountSummary> {
    let full = ExperimentSpec {
        mosaic_fractions: vec![1.0],
        repeats: 1,
        ..spec.clone()
    };
    let rows = run_loo(index, &full)?;
    let counts: Vec<f64> = rows.iter().map(|r| r.correct_count as f64).collect();
    let n = index.len();
    Ok(CountSummary {
        median: median(&counts).unwrap_or(0.0),
        bernoulli_expectation: bernoulli_expectation(n, rows.len(), spec.top_k.min(n - 1)),
        per_query: rows.into_iter().map(|r| (r.query_id, r.correct_count)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub site: String,
    /// Row and column labels, sorted.
    pub labels: Vec<String>,
    /// `matrix[true][predicted]`.
    pub matrix: Vec<Vec<usize>>,
    pub accuracy: f64,
}

impl ConfusionReport {
    pub fn row_sums(&self) -> Vec<usize> {
        self.matrix.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Top-5 vertical majority vote for every slide of `site`.
pub fn confusion_matrix(index: &ArchiveIndex, site: &str) -> Result<ConfusionReport> {
    let site_norm = normalize_label(site);
    let members: Vec<&IndexedSlide> = index
        .slides()
        .filter(|s| s.labels.primary_site.as_deref() == Some(site_norm.as_str()))
        .collect();
    let classes: BTreeSet<&str> = members.iter().filter_map(|s| s.labels.primary_diagnosis.as_deref()).collect();
    let per_class_ok = classes.iter().all(|c| {
        members.iter().filter(|s| s.labels.primary_diagnosis.as_deref() == Some(c)).count() >= 2
    });
    if classes.len() < 2 || !per_class_ok {
        return Err(Error::InvalidExperiment(format!(
            "site `{site_norm}` needs at least 2 diagnoses with 2 slides each"
        )));
    }
    let labeled: Vec<&IndexedSlide> = members.into_iter().filter(|s| s.labels.primary_diagnosis.is_some()).collect();
    let predictions: Vec<(String, String)> = labeled
        .par_iter()
        .map(|s| {
            let vote = classify_by_vote(s, index, &site_norm)?;
            Ok((s.labels.primary_diagnosis.clone().unwrap_or_default(), vote.label))
        })
        .collect::<Result<_>>()?;

    let labels: Vec<String> = predictions
        .iter()
        .flat_map(|(t, p)| [t.clone(), p.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos = |l: &str| labels.iter().position(|x| x == l).expect("label collected");
    let mut matrix = vec![vec![0; labels.len()]; labels.len()];
    for (t, p) in &predictions {
        matrix[pos(t)][pos(p)] += 1;
    }
    let trace: usize = (0..labels.len()).map(|i| matrix[i][i]).sum();
    Ok(ConfusionReport {
        site: site_norm,
        labels,
        matrix,
        accuracy: trace as f64 / predictions.len() as f64,
    })
}

/// Input of `bob eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    #[serde(default)]
    pub experiments: Vec<ExperimentSpec>,
    #[serde(default)]
    pub confusion_sites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub attribute: Attribute,
    pub attribute_value: String,
    pub top_k: usize,
    pub mode: String,
    pub corpus_size: usize,
    pub queries: usize,
    pub accuracy: f64,
    pub per_fraction: Vec<FractionSummary>,
    pub random_baseline: f64,
    pub median_correct: f64,
    pub bernoulli_expectation: f64,
    pub loo_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: IndexingConfig,
    pub extractor: ExtractorDescriptor,
    pub experiments: Vec<ExperimentSummary>,
    pub confusion: Vec<ConfusionReport>,
}

fn slug(s: &str) -> String {
    normalize_label(s).replace(' ', "-")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

pub fn write_loo_csv(rows: &[LooRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["query_id", "fraction", "seed", "success", "correct_count"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.query_id.clone(),
            r.fraction.to_string(),
            r.seed.to_string(),
            u8::from(r.success).to_string(),
            r.correct_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_confusion_csv(report: &ConfusionReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["true", "predicted", "count"]).map_err(csv_err)?;
    for (i, t) in report.labels.iter().enumerate() {
        for (j, p) in report.labels.iter().enumerate() {
            w.write_record([t.as_str(), p.as_str(), &report.matrix[i][j].to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs `plan` and writes `<attribute>-<value>/loo.csv` per experiment,
/// `confusion_<site>.csv` per site and `summary.json` under `out_dir`.
pub fn run_plan(index: &ArchiveIndex, plan: &EvalPlan, out_dir: &Path) -> Result<EvalSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut experiments = Vec::new();
    for spec in &plan.experiments {
        let report = loo_accuracy(index, spec)?;
        let attr = match spec.attribute {
            Attribute::Site => "site",
            Attribute::Diagnosis => "diagnosis",
        };
        let rel = format!("{attr}-{}/loo.csv", slug(&spec.attribute_value));
        let path = out_dir.join(&rel);
        let parent = path.parent().expect("has parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        write_loo_csv(&report.rows, &path)?;
        experiments.push(ExperimentSummary {
            attribute: report.attribute,
            attribute_value: report.attribute_value,
            top_k: report.top_k,
            mode: report.mode,
            corpus_size: report.corpus_size,
            queries: report.queries,
            accuracy: report.accuracy,
            per_fraction: report.per_fraction,
            random_baseline: report.random_baseline,
            median_correct: report.median_correct,
            bernoulli_expectation: report.bernoulli_expectation,
            loo_csv: rel,
        });
    }
    let mut confusion = Vec::new();
    for site in &plan.confusion_sites {
        let report = confusion_matrix(index, site)?;
        write_confusion_csv(&report, &out_dir.join(format!("confusion_{}.csv", slug(site))))?;
        confusion.push(report);
    }
    let summary = EvalSummary {
        config: index.config.clone(),
        extractor: index.extractor.clone(),
        experiments,
        confusion,
    };
    let path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
