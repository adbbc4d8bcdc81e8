//! `llcv` — train, evaluate and run the LLC image classifier from the
//! command line.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or arguments), 2 data
//! error (missing files, corrupt images or bundles, malformed corpora),
//! 3 internal invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use llc_vision::pipeline::bundle::sidecar_path;
use llc_vision::pipeline::config::to_toml_string;
use llc_vision::pipeline::toy::split_counts;
use llc_vision::pipeline::{
    benchmark_sweep, evaluate, ingest_dataset, load_bundle, load_config, make_toy_corpus,
    save_bundle, train_full, PipelineConfig, Predictor,
};
use llc_vision::{Error, Result};

#[derive(Parser)]
#[command(
    name = "llcv",
    version,
    about = "Dense-descriptor image classification with LLC coding, spatial pyramids and open-set rejection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural toy corpus (known classes + two unknown holdouts)
    MakeToy {
        /// Output directory for the corpus
        #[arg(long)]
        out: PathBuf,
        /// Number of known classes (the two unknown classes come on top)
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Training images per class; val/test sizes derive from this
        #[arg(long = "per-class", default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model bundle on a dataset directory
    Train {
        /// Dataset root (one folder per class)
        data: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Where to write the model bundle (a .json sidecar appears next to it)
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a bundle on the test split of a dataset
    Evaluate {
        /// Trained model bundle
        #[arg(long)]
        bundle: PathBuf,
        /// Dataset root
        data: PathBuf,
        /// Write the report as JSON here (a .csv confusion matrix lands next to it)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the confusion CSV path
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Classify one or more images
    Classify {
        #[arg(long)]
        bundle: PathBuf,
        /// Images to classify
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Emit one JSON object per image instead of text
        #[arg(long)]
        json: bool,
    },
    /// Train and time the pipeline across dictionary-size / search-budget points
    Benchmark {
        data: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Sweep points as M:BUDGET pairs, comma separated; BUDGET 0 or
        /// "exact" means unbounded search (e.g. "1200:100,3600:500")
        #[arg(long)]
        sweep: String,
        /// Timing repetitions over the test split
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Write the sweep table as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print bundle metadata
    Inspect {
        bundle: PathBuf,
        /// Also dump the full embedded config as TOML
        #[arg(long)]
        config: bool,
    },
}

/// Flags that override values from `--config` (or the built-in defaults).
#[derive(Args)]
struct ConfigOverrides {
    /// TOML config file; missing keys fall back to the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the whole run
    #[arg(long)]
    seed: Option<u64>,
    /// Dictionary size M (number of k-means centers)
    #[arg(long = "dict-size")]
    dict_size: Option<usize>,
    /// Number of nearest bases per descriptor (K)
    #[arg(long)]
    knn: Option<usize>,
    /// kd-tree comparison budget; 0 means exact search
    #[arg(long = "max-comparisons")]
    max_comparisons: Option<usize>,
    /// Stage-1 confidence threshold
    #[arg(long)]
    t1: Option<f64>,
    /// Stage-2 (unknown) confidence threshold
    #[arg(long)]
    t2: Option<f64>,
    /// Skip CLAHE + median preprocessing
    #[arg(long = "no-preprocess")]
    no_preprocess: bool,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = self.dict_size {
            cfg.kmeans.m = m;
        }
        if let Some(k) = self.knn {
            cfg.llc.k = k;
        }
        if let Some(mc) = self.max_comparisons {
            cfg.llc.max_comparisons = if mc == 0 { None } else { Some(mc) };
        }
        if let Some(t1) = self.t1 {
            cfg.t1 = t1;
        }
        if let Some(t2) = self.t2 {
            cfg.t2 = t2;
        }
        if self.no_preprocess {
            cfg.preprocess_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// "M:BUDGET,M:BUDGET" -> sweep points; budget "0" or "exact" is unbounded.
fn parse_sweep(text: &str) -> Result<Vec<(usize, Option<usize>)>> {
    let mut points = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let (m, budget) = part.split_once(':').ok_or_else(|| {
            Error::InvalidArgument(format!("sweep point {part:?} is not of the form M:BUDGET"))
        })?;
        let m: usize = m
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad dictionary size in {part:?}")))?;
        let budget = match budget.trim() {
            "exact" | "0" => None,
            b => Some(b.parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!("bad comparison budget in {part:?}"))
            })?),
        };
        points.push((m, budget));
    }
    Ok(points)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy { out, classes, per_class, seed } => {
            let summary = make_toy_corpus(&out, classes, per_class, seed)?;
            let (tr, va, te) = split_counts(per_class);
            println!(
                "wrote {} images to {}: {} known + {} unknown classes, {tr} train / {va} val / {te} test each",
                summary.total_images,
                out.display(),
                summary.known_classes,
                summary.unknown_classes
            );
        }
        Command::Train { data, overrides, out } => {
            let cfg = overrides.resolve()?;
            let manifest = ingest_dataset(&data)?;
            let bundle = train_full(&manifest, &cfg)?;
            save_bundle(&out, &bundle)?;
            println!(
                "trained {} known classes (+{} unknown), feature dim {}, thresholds t1={:.2} t2={:.2} -> {}",
                bundle.num_known,
                bundle.class_names.len() - bundle.num_known,
                bundle.config.feature_len(),
                bundle.openset.t1,
                bundle.openset.t2,
                out.display()
            );
        }
        Command::Evaluate { bundle, data, out, csv } => {
            let bundle = load_bundle(&bundle)?;
            let manifest = ingest_dataset(&data)?;
            let report = evaluate(&bundle, &manifest)?;
            print!("{}", report.to_text());
            if let Some(out) = &out {
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
                write_file(out, &json)?;
                let csv_path = csv.clone().unwrap_or_else(|| out.with_extension("csv"));
                write_file(&csv_path, &report.confusion_csv())?;
                eprintln!("report: {} confusion: {}", out.display(), csv_path.display());
            } else if let Some(csv_path) = &csv {
                write_file(csv_path, &report.confusion_csv())?;
            }
        }
        Command::Classify { bundle, images, json } => {
            let bundle = load_bundle(&bundle)?;
            let predictor = Predictor::new(&bundle)?;
            for image in &images {
                let (result, timing) = predictor.classify_path(image)?;
                let name = &bundle.class_names[result.label];
                if json {
                    let line = serde_json::json!({
                        "image": image.display().to_string(),
                        "label": name,
                        "label_id": result.label,
                        "confidence": result.confidence,
                        "stage": result.stage,
                        "scores": result.scores,
                        "seconds": timing,
                    });
                    println!("{line}");
                } else {
                    println!(
                        "{}: {} (confidence {:.4}, stage {}, {:.3}s)",
                        image.display(),
                        name,
                        result.confidence,
                        result.stage,
                        timing.total()
                    );
                }
            }
        }
        Command::Benchmark { data, overrides, sweep, reps, out } => {
            let cfg = overrides.resolve()?;
            let points = parse_sweep(&sweep)?;
            let manifest = ingest_dataset(&data)?;
            let report = benchmark_sweep(&manifest, &cfg, &points, reps)?;
            print!("{}", report.to_text());
            if let Some(out) = &out {
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Internal(format!("sweep serialization: {e}")))?;
                write_file(out, &json)?;
            }
        }
        Command::Inspect { bundle: path, config } => {
            let bundle = load_bundle(&path)?;
            let hash: String =
                bundle.codebook_sha256().iter().map(|b| format!("{b:02x}")).collect();
            println!("bundle:          {}", path.display());
            println!("sidecar:         {}", sidecar_path(&path).display());
            println!("classes:         {} known + {} unknown", bundle.num_known, bundle.class_names.len() - bundle.num_known);
            for (id, name) in bundle.class_names.iter().enumerate() {
                let kind = if bundle.openset.unknown_ids.contains(&id) { " (unknown)" } else { "" };
                println!("  {id:3}  {name}{kind}");
            }
            println!("dictionary:      {} bases of dim {}", bundle.codebook.len(), bundle.codebook.dim());
            println!("codebook sha256: {hash}");
            println!("feature length:  {}", bundle.config.feature_len());
            println!("llc:             K={} sigma={} budget={:?}", bundle.config.llc.k, bundle.config.llc.sigma, bundle.config.llc.max_comparisons);
            println!("thresholds:      t1={} t2={}", bundle.openset.t1, bundle.openset.t2);
            println!("mode:            {}", if bundle.known_only() { "known-only (no open-set routing)" } else { "open-set" });
            println!("mlp1 arch:       {:?}", bundle.mlp1.arch);
            match &bundle.mlp2 {
                Some(m) => println!("mlp2 arch:       {:?}", m.arch),
                None => println!("mlp2 arch:       none"),
            }
            if config {
                println!("\n# embedded config\n{}", to_toml_string(&bundle.config)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive as Err but are not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
