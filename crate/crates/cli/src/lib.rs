//! Command-line orchestration of the synthetic-data pipeline.

pub mod config;
pub mod corpus;
pub mod error;
pub mod provenance;
pub mod server;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use docsynth::catalog::{validate_catalog, ClusterCatalog};
use docsynth::clustering::assign_stack;
use docsynth::datasynth::{balance, synthesize_dataset, DatasetManifest};
use docsynth::fusion::{build_oracle_catalog, fuse_labels};
use docsynth::gridsearch::grid_search;
use docsynth::inference::{segment_document, InferenceParams};
use docsynth::io::{load_label, load_rgb, read_bytes, save_label, save_label_visualization, sha256_file, sha256_hex, write_atomic};
use docsynth::metrics::{confusion, report, ConfusionCounts, MetricsReport};
use docsynth::pipeline::{assign_patches, corpus_seed, fit_corpus_clusters, generate_documents, layout, load_models, models_hash, run_e2e, save_models};
use docsynth::segmenter::{load_model, save_model, train, TrainConfig};
use docsynth::GenSeed;

use crate::config::RunConfig;
use crate::corpus::CorpusManifest;
use crate::error::{CliError, CliResult, ResultExt};
use crate::provenance::Provenance;

/// Environment variable naming the run directory.
pub const RUN_DIR_ENV: &str = "DOCSYNTH_RUN_DIR";

#[derive(Debug, Parser)]
#[command(name = "docsynth", version, about = "Synthetic labeled documents from clustered generator features")]
pub struct Cli {
    /// Directory holding every artifact of a run.
    #[arg(long, global = true, env = RUN_DIR_ENV, default_value = "run")]
    pub run_dir: PathBuf,
    /// TOML config file (or a provenance record to replay); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct PostprocessFlags {
    /// Fraction of overlap between neighbouring patches, in [0, 1).
    #[arg(long)]
    pub overlap_factor: Option<f64>,
    /// Text pixels below this confidence become background.
    #[arg(long)]
    pub min_confidence: Option<f64>,
    /// Text components smaller than this many pixels are removed.
    #[arg(long)]
    pub min_contour_area: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render corpus patches with labels.
    GenCorpus {
        #[arg(long)]
        patches: Option<usize>,
        /// Also write every feature stack (about 5.6 MB per patch).
        #[arg(long)]
        stacks: bool,
    },
    /// Fit one spherical k-means model per feature layer.
    FitClusters {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        pixel_budget: Option<usize>,
        /// Also write a catalog derived from the generator's own labels,
        /// skipping manual annotation.
        #[arg(long)]
        oracle_catalog: bool,
    },
    /// Serve the annotation API (and UI, if built) on localhost.
    Annotate {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Sample patches offered for cluster inspection.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Directory with the built annotation UI.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Fuse labels for the first corpus patches with the saved catalog.
    FusePreview {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Synthesize and balance a labeled training set.
    SynthDataset {
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        background_fraction: Option<f64>,
        #[arg(long)]
        min_class_pixels: Option<usize>,
    },
    /// Train the pixel classifier on the balanced dataset.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        hidden_width: Option<usize>,
    },
    /// Segment a document image.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Label PNG to write; a `_vis` color image is written next to it.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        post: PostprocessFlags,
    },
    /// Score predictions against ground truth (files or generated documents).
    Eval {
        /// Predicted label PNG, or a directory of them.
        #[arg(long, requires = "truth")]
        prediction: Option<PathBuf>,
        /// Ground-truth label PNG, or a directory with matching file names.
        #[arg(long, requires = "prediction")]
        truth: Option<PathBuf>,
        #[arg(long, conflicts_with = "prediction")]
        model: Option<PathBuf>,
        /// Generated documents to evaluate the model on.
        #[arg(long)]
        documents: Option<usize>,
        #[command(flatten)]
        post: PostprocessFlags,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Search post-processing parameters on generated documents.
    GridSearch {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        documents: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Run everything with an oracle catalog.
    E2e {
        /// Corpus patches to cluster.
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        dataset_patches: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Parses arguments, runs, reports errors; returns the exit status.
pub fn main_with_args(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let _ = e.print();
            let rendered = e.render().to_string();
            let message = rendered.lines().next().unwrap_or_default().trim_start_matches("error: ");
            let err = CliError::usage(message);
            eprintln!("{}", err.json_line());
            return err.kind.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            eprintln!("{}", e.json_line());
            e.kind.exit_code()
        }
    }
}

/// Loads the config file and applies global flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.pipeline.seed = GenSeed(seed);
    }
    Ok(config)
}

fn apply_post(params: &mut InferenceParams, flags: &PostprocessFlags) {
    if let Some(v) = flags.overlap_factor {
        params.overlap_factor = v;
    }
    if let Some(v) = flags.min_confidence {
        params.min_confidence = v;
    }
    if let Some(v) = flags.min_contour_area {
        params.min_contour_area = v;
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut config = resolve_config(cli)?;
    let dir = cli.run_dir.as_path();
    match &cli.command {
        Command::GenCorpus { patches, stacks } => {
            if let Some(n) = patches {
                config.pipeline.corpus_patches = *n;
            }
            config.validate()?;
            gen_corpus(dir, &config, *stacks)
        }
        Command::FitClusters { k, pixel_budget, oracle_catalog } => {
            if let Some(k) = k {
                config.pipeline.kmeans.k = *k;
            }
            if let Some(b) = pixel_budget {
                config.pipeline.pixel_budget = *b;
            }
            config.validate()?;
            fit_clusters(dir, &config, *oracle_catalog)
        }
        Command::Annotate { port, host, samples, ui_dir } => {
            let state = server::AppState::load(dir, *samples, ui_dir.clone())?;
            server::serve(state, SocketAddr::new(*host, *port))
        }
        Command::FusePreview { count } => fuse_preview(dir, &config, *count),
        Command::SynthDataset { patches, background_fraction, min_class_pixels } => {
            if let Some(n) = patches {
                config.pipeline.dataset_patches = *n;
            }
            if let Some(f) = background_fraction {
                config.pipeline.background_fraction = *f;
            }
            if let Some(m) = min_class_pixels {
                config.pipeline.min_class_pixels = *m;
            }
            config.validate()?;
            synth_dataset(dir, &config)
        }
        Command::Train { iterations, learning_rate, hidden_width } => {
            let t = &mut config.pipeline.train;
            if let Some(v) = iterations {
                t.iterations = *v;
            }
            if let Some(v) = learning_rate {
                t.learning_rate = *v;
            }
            if let Some(v) = hidden_width {
                t.hidden_width = *v;
            }
            config.validate()?;
            train_model(dir, &config)
        }
        Command::Infer { input, output, model, post } => {
            apply_post(&mut config.inference, post);
            config.validate()?;
            infer(dir, &config, input, output.as_deref(), model.as_deref())
        }
        Command::Eval { prediction, truth, model, documents, post, json } => {
            apply_post(&mut config.inference, post);
            if let Some(n) = documents {
                config.pipeline.eval_documents = *n;
            }
            config.validate()?;
            let r = match (prediction, truth) {
                (Some(p), Some(t)) => eval_files(dir, &config, p, t)?,
                _ => eval_model(dir, &config, model.as_deref())?,
            };
            print_report(&r, *json);
            Ok(())
        }
        Command::GridSearch { model, documents, json } => {
            if let Some(n) = documents {
                config.pipeline.grid_documents = *n;
            }
            config.validate()?;
            grid(dir, &config, model.as_deref(), *json)
        }
        Command::E2e { patches, dataset_patches, iterations } => {
            if let Some(n) = patches {
                config.pipeline.corpus_patches = *n;
            }
            if let Some(n) = dataset_patches {
                config.pipeline.dataset_patches = *n;
            }
            if let Some(n) = iterations {
                config.pipeline.train.iterations = *n;
            }
            config.validate()?;
            e2e(dir, &config)
        }
    }
}

fn print_report(r: &MetricsReport, json: bool) {
    if json {
        print!("{}", r.to_json().expect("report serializes"));
    } else {
        print!("{}", r.to_table());
    }
}

fn finish(dir: &Path, provenance: Provenance) -> CliResult<()> {
    let hash = provenance.write(dir)?;
    eprintln!("provenance {} sha256 {hash}", Provenance::path(dir, &provenance.command).display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Artifact loading

fn models_in(dir: &Path) -> CliResult<Vec<docsynth::clustering::ClusterModel>> {
    let models_dir = dir.join(layout::MODELS_DIR);
    if !models_dir.is_dir() {
        return Err(CliError::validation(format!(
            "no cluster models in {}; run `fit-clusters` first",
            models_dir.display()
        )));
    }
    Ok(load_models(&models_dir)?)
}

fn catalog_in(dir: &Path) -> CliResult<ClusterCatalog> {
    let path = dir.join(layout::CATALOG);
    if !path.exists() {
        return Err(CliError::validation(format!(
            "no catalog at {}; annotate the clusters first",
            path.display()
        )));
    }
    let text = String::from_utf8(read_bytes(&path)?)
        .map_err(|_| CliError::validation("catalog is not UTF-8"))?;
    ClusterCatalog::from_json(&text).ctx("reading catalog")
}

fn model_path(dir: &Path, model: Option<&Path>) -> CliResult<PathBuf> {
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| dir.join(layout::WEIGHTS));
    if !path.exists() {
        return Err(CliError::validation(format!(
            "no segmenter weights at {}; run `train` first",
            path.display()
        )));
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// Subcommands

pub fn gen_corpus(dir: &Path, config: &RunConfig, stacks: bool) -> CliResult<()> {
    let p = &config.pipeline;
    let manifest = corpus::generate(dir, p.corpus_patches, p.seed, &p.generator, stacks)?;
    println!("wrote {} corpus patches to {}", manifest.entries.len(), manifest.root.display());
    finish(
        dir,
        Provenance::new("gen-corpus", config)
            .argument("stacks", stacks)
            .output("corpus", manifest.hash()),
    )
}

pub fn fit_clusters(dir: &Path, config: &RunConfig, oracle_catalog: bool) -> CliResult<()> {
    let corpus = CorpusManifest::load(dir)?;
    // Stacks are regenerated from the recorded seeds; verify the generator
    // still reproduces the stored corpus before relying on it.
    corpus.stack(0)?;
    let p = &config.pipeline;
    let models = fit_corpus_clusters(
        corpus.entries.len(),
        corpus.seed,
        &corpus.generator,
        &p.kmeans,
        p.pixel_budget,
    )?;
    save_models(&dir.join(layout::MODELS_DIR), &models)?;
    let hash = models_hash(&models)?;
    println!("fit {} layer models (k = {})", models.len(), p.kmeans.k);
    let mut provenance = Provenance::new("fit-clusters", config)
        .argument("oracle_catalog", oracle_catalog)
        .input("corpus", corpus.hash())
        .output("models", hash);
    if oracle_catalog {
        let seeds: Vec<GenSeed> = (0..corpus.entries.len()).map(|i| corpus_seed(corpus.seed, i)).collect();
        let (assignments, truths): (Vec<_>, Vec<_>) =
            assign_patches(&seeds, &corpus.generator, &models)?.into_iter().unzip();
        let catalog = build_oracle_catalog(&assignments, &truths)?;
        write_atomic(&dir.join(layout::CATALOG), catalog.to_json()?.as_bytes())?;
        println!("wrote oracle catalog {}", dir.join(layout::CATALOG).display());
        provenance = provenance.output("catalog", catalog.hash()?);
    }
    finish(dir, provenance)
}

pub fn fuse_preview(dir: &Path, config: &RunConfig, count: usize) -> CliResult<()> {
    let models = models_in(dir)?;
    let catalog = catalog_in(dir)?;
    validate_catalog(&catalog, &models).into_result()?;
    let corpus = CorpusManifest::load(dir)?;
    let n = count.min(corpus.entries.len());
    let out = dir.join("preview");
    std::fs::create_dir_all(&out)?;
    let mut agree = 0usize;
    let mut total = 0usize;
    let mut provenance = Provenance::new("fuse-preview", config)
        .argument("count", n)
        .input("models", models_hash(&models)?)
        .input("catalog", catalog.hash()?)
        .input("corpus", corpus.hash());
    for i in 0..n {
        let fused = fuse_labels(&assign_stack(&models, &corpus.stack(i)?)?, &catalog)?;
        let truth = corpus.label(i)?;
        agree += fused.classes().iter().zip(truth.classes()).filter(|(a, b)| a == b).count();
        total += truth.classes().len();
        let path = out.join(format!("{i:06}_labels.png"));
        save_label(&path, &fused)?;
        save_label_visualization(&out.join(format!("{i:06}_vis.png")), &fused)?;
        provenance = provenance.output(&format!("preview/{i:06}"), sha256_file(&path)?);
    }
    println!(
        "fused {n} patches into {}; agreement with generator labels {:.4}",
        out.display(),
        agree as f64 / total.max(1) as f64
    );
    finish(dir, provenance)
}

pub fn synth_dataset(dir: &Path, config: &RunConfig) -> CliResult<()> {
    let models = models_in(dir)?;
    let catalog = catalog_in(dir)?;
    let p = &config.pipeline;
    let dataset_dir = dir.join(layout::DATASET_DIR);
    let manifest = synthesize_dataset(
        p.dataset_patches,
        p.seed.derive("dataset", 0),
        &p.generator,
        &models,
        &catalog,
        p.min_class_pixels,
        &dataset_dir,
    )?;
    let balanced = balance(&manifest, p.seed.derive("balance", 0), p.background_fraction)?;
    balanced.save(&dataset_dir.join(layout::BALANCED))?;
    println!("synthesized {:?}; balanced {:?}", manifest.counts(), balanced.counts());
    finish(
        dir,
        Provenance::new("synth-dataset", config)
            .input("models", models_hash(&models)?)
            .input("catalog", catalog.hash()?)
            .output("dataset", manifest.hash()?)
            .output("balanced", balanced.hash()?),
    )
}

pub fn train_model(dir: &Path, config: &RunConfig) -> CliResult<()> {
    let path = dir.join(layout::DATASET_DIR).join(layout::BALANCED);
    if !path.exists() {
        return Err(CliError::validation(format!(
            "no balanced dataset at {}; run `synth-dataset` first",
            path.display()
        )));
    }
    let manifest = DatasetManifest::load(&path)?;
    let p = &config.pipeline;
    let train_config = TrainConfig { seed: p.seed.derive("train", 0), ..p.train };
    let (model, report) = train(&manifest, &train_config, &p.augment)?;
    let hash = save_model(&dir.join(layout::WEIGHTS), &model, Some(&report))?;
    println!("trained {} iterations; final loss {:.4}", report.iterations_run, report.final_loss);
    finish(
        dir,
        Provenance::new("train", config).input("balanced", manifest.hash()?).output("weights", hash),
    )
}

pub fn infer(
    dir: &Path,
    config: &RunConfig,
    input: &Path,
    output: Option<&Path>,
    model: Option<&Path>,
) -> CliResult<()> {
    let weights = model_path(dir, model)?;
    let model = load_model(&weights)?;
    let doc = load_rgb(input).ctx(format!("reading {}", input.display()))?;
    let labels = segment_document(&model, &doc, &config.inference)?;
    let output = match output {
        Some(o) => o.to_path_buf(),
        None => {
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("document");
            dir.join("infer").join(format!("{stem}_labels.png"))
        }
    };
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let vis = {
        let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("labels");
        output.with_file_name(format!("{stem}_vis.png"))
    };
    save_label(&output, &labels)?;
    save_label_visualization(&vis, &labels)?;
    let hist = labels.histogram();
    println!(
        "wrote {} and {} (background {}, printed {}, handwritten {} pixels)",
        output.display(),
        vis.display(),
        hist[0],
        hist[1],
        hist[2]
    );
    finish(
        dir,
        Provenance::new("infer", config)
            .argument("input", input.display())
            .argument("output", output.display())
            .input("weights", sha256_file(&weights)?)
            .input("document", sha256_file(input)?)
            .output("labels", sha256_file(&output)?)
            .output("visualization", sha256_file(&vis)?),
    )
}

/// Pairs of (prediction, truth) files: the two paths, or same-named PNGs in two directories.
fn label_pairs(prediction: &Path, truth: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    if prediction.is_dir() != truth.is_dir() {
        return Err(CliError::validation("--prediction and --truth must both be files or both directories"));
    }
    if !prediction.is_dir() {
        return Ok(vec![(prediction.to_path_buf(), truth.to_path_buf())]);
    }
    let mut names: Vec<OsString> = std::fs::read_dir(prediction)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| Path::new(n).extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::validation(format!("no PNG files in {}", prediction.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let t = truth.join(&n);
            if t.exists() {
                Ok((prediction.join(&n), t))
            } else {
                Err(CliError::validation(format!("no ground truth {}", t.display())))
            }
        })
        .collect()
}

pub fn eval_files(dir: &Path, config: &RunConfig, prediction: &Path, truth: &Path) -> CliResult<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    let mut provenance = Provenance::new("eval", config)
        .argument("prediction", prediction.display())
        .argument("truth", truth.display());
    for (p, t) in label_pairs(prediction, truth)? {
        let pred = load_label(&p).ctx(format!("reading {}", p.display()))?;
        let gt = load_label(&t).ctx(format!("reading {}", t.display()))?;
        counts.merge(&confusion(&pred, &gt).ctx(format!("comparing {}", p.display()))?);
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        provenance = provenance
            .input(&format!("prediction/{name}"), sha256_file(&p)?)
            .input(&format!("truth/{name}"), sha256_file(&t)?);
    }
    write_eval(dir, provenance, &counts)
}

pub fn eval_model(dir: &Path, config: &RunConfig, model: Option<&Path>) -> CliResult<MetricsReport> {
    let weights = model_path(dir, model)?;
    let model = load_model(&weights)?;
    let p = &config.pipeline;
    let docs = generate_documents(p.seed, "eval", p.eval_documents, &p.documents, p.document_height, p.document_width)?;
    let mut counts = ConfusionCounts::default();
    for (doc, truth) in &docs {
        counts.merge(&confusion(&segment_document(&model, doc, &config.inference)?, truth)?);
    }
    let provenance = Provenance::new("eval", config).input("weights", sha256_file(&weights)?);
    write_eval(dir, provenance, &counts)
}

fn write_eval(dir: &Path, provenance: Provenance, counts: &ConfusionCounts) -> CliResult<MetricsReport> {
    let r = report(counts);
    std::fs::create_dir_all(dir)?;
    let json = r.to_json()?;
    write_atomic(&dir.join(layout::EVAL), json.as_bytes())?;
    finish(dir, provenance.output("eval", sha256_hex(json.as_bytes())))?;
    Ok(r)
}

pub fn grid(dir: &Path, config: &RunConfig, model: Option<&Path>, json: bool) -> CliResult<()> {
    let weights = model_path(dir, model)?;
    let model = load_model(&weights)?;
    let p = &config.pipeline;
    let docs = generate_documents(p.seed, "grid", p.grid_documents, &p.documents, p.document_height, p.document_width)?;
    let outcome = grid_search(&model, &docs, &p.grid)?;
    let text = outcome.to_json()?;
    write_atomic(&dir.join(layout::GRID), text.as_bytes())?;
    if json {
        print!("{text}");
    } else {
        print!("{}", outcome.to_table());
        let b = outcome.best;
        println!(
            "best: --overlap-factor {} --min-confidence {} --min-contour-area {}",
            b.overlap_factor, b.min_confidence, b.min_contour_area
        );
    }
    finish(
        dir,
        Provenance::new("grid-search", config)
            .input("weights", sha256_file(&weights)?)
            .output("grid", sha256_hex(text.as_bytes())),
    )
}

pub fn e2e(dir: &Path, config: &RunConfig) -> CliResult<()> {
    let r = run_e2e(&config.pipeline, dir)?;
    print!("{}", r.eval.to_table());
    let mut provenance = Provenance::new("e2e", config);
    for (name, hash) in r.hashes() {
        println!("{name:<9} {hash}");
        provenance = provenance.output(name, hash);
    }
    finish(dir, provenance)
}
