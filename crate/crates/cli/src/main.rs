use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use bob_core::eval::{run_plan, EvalPlan};
use bob_core::features::{format_external_features, import_external_features, FeatureExtractor, ReferenceExtractor};
use bob_core::index_store::{build_index, clustering_mask, load_index, place_patch, save_index};
use bob_core::mosaic::{build_mosaic, IndexingConfig};
use bob_core::slide_io::{generate_synthetic_corpus, list_slide_dirs, open_slide, select_magnification, CorpusSpec, MANIFEST_FILE};
use bob_service::feedback::FeedbackStore;
use bob_service::payload::{index_upload, patch_search, scan_search, ModeName, PatchRequest, ScanRequest};
use bob_service::AppState;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

/// Index, search and evaluate whole-slide image archives with bunches of barcodes.
#[derive(Parser)]
#[command(name = "bob", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index from a directory of slides.
    Index {
        corpus_dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// IndexingConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Precomputed features replacing the built-in extractor.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Rank archive slides by scan distance to a query slide.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        query: QueryArgs,
        #[command(flatten)]
        mode: ModeArgs,
        #[arg(short, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print each result's per-barcode minimum distances.
        #[arg(long)]
        minima: bool,
    },
    /// Rank indexed patches by Hamming distance to one mosaic patch.
    Patch {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        grid_x: u32,
        #[arg(long)]
        grid_y: u32,
        #[command(flatten)]
        mode: ModeArgs,
        #[arg(short, default_value_t = 10)]
        k: usize,
    },
    /// Run the experiments of an evaluation plan.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Slide directory used for thumbnails.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Append-only feedback log; replayed at startup.
        #[arg(long)]
        feedback_log: Option<PathBuf>,
    },
    /// Write a synthetic labeled corpus.
    GenCorpus {
        spec: PathBuf,
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// List mosaic patches, or write their built-in features as a feature file.
    Mosaic {
        /// A slide directory or a directory of slides.
        path: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features_out: Option<PathBuf>,
        /// Extractor id written to the feature file header.
        #[arg(long, default_value = bob_core::features::REFERENCE_ID)]
        extractor_id: String,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct QueryArgs {
    /// Id of an indexed slide.
    #[arg(long)]
    slide: Option<String>,
    /// Slide directory outside the index.
    #[arg(long)]
    upload: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Horizontal,
    Vertical,
}

#[derive(Args)]
struct ModeArgs {
    #[arg(long, value_enum, default_value_t = Mode::Horizontal)]
    mode: Mode,
    #[arg(long)]
    site: Option<String>,
}

impl ModeArgs {
    fn name(&self) -> ModeName {
        match self.mode {
            Mode::Horizontal => ModeName::Horizontal,
            Mode::Vertical => ModeName::Vertical,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<IndexingConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => IndexingConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn slide_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(MANIFEST_FILE).is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Ok(list_slide_dirs(path)?)
    }
}

fn cmd_index(corpus: &Path, output: &Path, config: Option<&Path>, features: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let extractor: Box<dyn FeatureExtractor> = match features {
        Some(p) => Box::new(import_external_features(p, None)?),
        None => Box::new(ReferenceExtractor::new(cfg.s_h)?),
    };
    let dirs = list_slide_dirs(corpus)?;
    let built = build_index(&dirs, &cfg, extractor.as_ref())?;
    let skipped: Vec<_> = built
        .skipped
        .iter()
        .map(|(p, e)| json!({"path": p, "error": e.to_string()}))
        .collect();
    for (p, e) in &built.skipped {
        eprintln!("warning: skipped {}: {e}", p.display());
    }
    if built.index.is_empty() {
        bail!("no slide under {} could be indexed", corpus.display());
    }
    save_index(&built.index, output)?;
    print_json(&json!({
        "index": output,
        "slides": built.index.len(),
        "barcodes": built.index.total_barcodes(),
        "barcode_len": built.index.barcode_len(),
        "extractor_id": built.index.extractor.extractor_id,
        "bytes": fs::metadata(output)?.len(),
        "skipped": skipped,
    }))
}

fn cmd_gen_corpus(spec: &Path, seed: u64, output: &Path) -> Result<()> {
    let spec: CorpusSpec = read_json(spec)?;
    let slides = generate_synthetic_corpus(&spec, seed, output)?;
    print_json(&json!({ "output": output, "seed": seed, "slides": slides }))
}

fn cmd_mosaic(path: &Path, config: Option<&Path>, features_out: Option<&Path>, extractor_id: &str) -> Result<()> {
    let cfg = load_config(config)?;
    let extractor = ReferenceExtractor::new(cfg.s_h)?;
    let mut rows = Vec::new();
    let mut table = String::from("# slide_id grid_x grid_y x y size magnification\n");
    for dir in slide_dirs(path)? {
        let slide = open_slide(&dir)?;
        let mosaic = build_mosaic(&slide, &clustering_mask(&slide, &cfg)?, &cfg)?;
        let cluster_mag = select_magnification(&slide, cfg.m_x_c).magnification;
        let level = select_magnification(&slide, cfg.m_x_idx);
        for p in &mosaic.patches {
            let at = place_patch(p, &cfg, cluster_mag, level)?;
            table.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                p.slide_id, p.grid_x, p.grid_y, at.x, at.y, cfg.s_h, level.magnification
            ));
            if features_out.is_some() {
                let v = extractor.extract_raster(&level.read_region(at.x, at.y, cfg.s_h)?)?;
                rows.push(((p.slide_id.clone(), p.grid_x, p.grid_y), v.values));
            }
        }
    }
    match features_out {
        Some(out) => {
            let text = format_external_features(extractor_id, bob_core::features::REFERENCE_DIM, &rows)?;
            fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
            print_json(&json!({ "features": out, "patches": rows.len(), "extractor_id": extractor_id }))
        }
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn cmd_serve(index: &Path, host: &str, port: u16, corpus: Option<&Path>, feedback_log: Option<&Path>) -> Result<()> {
    let index = load_index(index)?;
    let store = match feedback_log {
        Some(p) => FeedbackStore::open(p).with_context(|| format!("opening {}", p.display()))?,
        None => FeedbackStore::in_memory(),
    };
    let state = AppState::new(index, store);
    if let Some(dir) = corpus {
        let n = state.register_corpus(dir)?;
        eprintln!("thumbnails for {n} slides from {}", dir.display());
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        bob_service::serve(listener, Arc::new(state)).await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index {
            corpus_dir,
            output,
            config,
            features,
        } => cmd_index(&corpus_dir, &output, config.as_deref(), features.as_deref()),
        Command::Search {
            index,
            query,
            mode,
            k,
            fraction,
            seed,
            minima,
        } => {
            let index = load_index(&index)?;
            let upload = query.upload.as_deref().map(|dir| index_upload(&index, dir)).transpose()?;
            let req = ScanRequest {
                slide_id: query.slide,
                upload: query.upload.map(|p| p.display().to_string()),
                mode: mode.name(),
                site: mode.site.clone(),
                k,
                fraction,
                seed,
                minima,
            };
            print_json(&scan_search(&index, &req, upload.as_ref())?)
        }
        Command::Patch {
            index,
            slide,
            grid_x,
            grid_y,
            mode,
            k,
        } => {
            let index = load_index(&index)?;
            let req = PatchRequest {
                slide_id: slide,
                grid_x,
                grid_y,
                k,
                mode: mode.name(),
                site: mode.site.clone(),
            };
            print_json(&patch_search(&index, &req)?)
        }
        Command::Eval { index, spec, output } => {
            let index = load_index(&index)?;
            let plan: EvalPlan = read_json(&spec)?;
            let summary = run_plan(&index, &plan, &output)?;
            let experiments: Vec<_> = summary
                .experiments
                .iter()
                .map(|e| {
                    json!({
                        "attribute": e.attribute,
                        "value": e.attribute_value,
                        "top_k": e.top_k,
                        "accuracy": e.accuracy,
                        "random_baseline": e.random_baseline,
                        "loo_csv": output.join(&e.loo_csv),
                    })
                })
                .collect();
            let confusion: Vec<_> = summary
                .confusion
                .iter()
                .map(|c| json!({"site": c.site, "accuracy": c.accuracy}))
                .collect();
            print_json(&json!({
                "summary": output.join("summary.json"),
                "experiments": experiments,
                "confusion": confusion,
            }))
        }
        Command::Serve {
            index,
            port,
            host,
            corpus,
            feedback_log,
        } => cmd_serve(&index, &host, port, corpus.as_deref(), feedback_log.as_deref()),
        Command::GenCorpus { spec, seed, output } => cmd_gen_corpus(&spec, seed, &output),
        Command::Mosaic {
            path,
            config,
            features_out,
            extractor_id,
        } => cmd_mosaic(&path, config.as_deref(), features_out.as_deref(), &extractor_id),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
