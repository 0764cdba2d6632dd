//! Multi-stage drivers shared by the command-line tool and the test suites.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::catalog::ClusterCatalog;
use crate::clustering::{
    assign_stack, fit_layers, AssignmentMap, ClusterModel, KMeansConfig, SamplePlan,
};
use crate::datasynth::{
    balance, synthesize_dataset, Category, DEFAULT_BACKGROUND_FRACTION, DEFAULT_MIN_CLASS_PIXELS,
};
use crate::docgen::{generate_document, generate_patch, GenConfig, LAYER_SIZES, LAYERS_PER_SIZE};
use crate::error::{Error, Result};
use crate::fusion::{build_oracle_catalog, fuse_labels};
use crate::gridsearch::{grid_search, GridOutcome, GridSpec};
use crate::image::{LabelImage, RgbRaster, NUM_CLASSES};
use crate::inference::segment_document;
use crate::io::{read_bytes, sha256_hex, write_atomic};
use crate::metrics::{confusion, report, ConfusionCounts, MetricsReport};
use crate::rng::GenSeed;
use crate::segmenter::{save_model, train, TrainConfig};

/// Default per-layer pixel budget for clustering.
pub const DEFAULT_PIXEL_BUDGET: usize = 200_000;

/// Patches generated concurrently while streaming a corpus.
const STREAM_CHUNK: usize = 16;

/// Seed of the `index`-th corpus patch.
pub fn corpus_seed(seed: GenSeed, index: usize) -> GenSeed {
    seed.derive("corpus", index as u64)
}

/// Layer sizes of every feature stack the generator emits.
pub fn stack_layer_sizes() -> Vec<usize> {
    LAYER_SIZES
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, LAYERS_PER_SIZE))
        .collect()
}

/// Fits one cluster model per layer on pixels sampled from `n` corpus
/// patches. Stacks are generated on the fly so memory stays bounded.
pub fn fit_corpus_clusters(
    n: usize,
    seed: GenSeed,
    config: &GenConfig,
    kmeans: &KMeansConfig,
    budget: usize,
) -> Result<Vec<ClusterModel>> {
    let plan = SamplePlan::new(n, &stack_layer_sizes(), budget, seed.derive("sample", 0))?;
    let mut samples = plan.empty_samples(crate::docgen::DEFAULT_CHANNELS);
    let indices: Vec<usize> = (0..plan.stacks()).collect();
    for chunk in indices.chunks(STREAM_CHUNK) {
        let stacks = chunk
            .par_iter()
            .map(|&i| generate_patch(corpus_seed(seed, i), config).map(|(_, _, s)| s))
            .collect::<Result<Vec<_>>>()?;
        for (&i, stack) in chunk.iter().zip(&stacks) {
            plan.gather(i, stack, &mut samples);
        }
    }
    fit_layers(&samples, kmeans, seed.derive("kmeans", 0))
}

/// Generates `n` patches from `seeds` and assigns their features to `models`.
pub fn assign_patches(
    seeds: &[GenSeed],
    config: &GenConfig,
    models: &[ClusterModel],
) -> Result<Vec<(Vec<AssignmentMap>, LabelImage)>> {
    seeds
        .par_iter()
        .map(|&s| {
            let (_, label, stack) = generate_patch(s, config)?;
            Ok((assign_stack(models, &stack)?, label))
        })
        .collect()
}

/// Outcome of fusing oracle-annotated clusters on generated patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionOracleReport {
    pub patches: usize,
    /// Fraction of pixels whose fused label equals ground truth.
    pub agreement: f64,
    /// `contingency[truth][fused]` pixel counts.
    pub contingency: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub catalog: ClusterCatalog,
    pub models_sha256: String,
    pub catalog_sha256: String,
    pub labels_sha256: String,
}

/// Clusters `n` generated patches, annotates the clusters from ground truth,
/// fuses every patch, and measures agreement with ground truth.
pub fn fusion_oracle(
    n: usize,
    seed: GenSeed,
    config: &GenConfig,
    kmeans: &KMeansConfig,
    budget: usize,
) -> Result<FusionOracleReport> {
    if n == 0 {
        return Err(Error::EmptyInput("patches"));
    }
    let models = fit_corpus_clusters(n, seed, config, kmeans, budget)?;
    let seeds: Vec<GenSeed> = (0..n).map(|i| corpus_seed(seed, i)).collect();
    let (assignments, truths): (Vec<_>, Vec<_>) =
        assign_patches(&seeds, config, &models)?.into_iter().unzip();
    let catalog = build_oracle_catalog(&assignments, &truths)?;
    let fused = assignments
        .par_iter()
        .map(|a| fuse_labels(a, &catalog))
        .collect::<Result<Vec<_>>>()?;

    let mut contingency = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut labels = Vec::new();
    for (f, t) in fused.iter().zip(&truths) {
        for (&p, &g) in f.classes().iter().zip(t.classes()) {
            contingency[g as usize][p as usize] += 1;
        }
        labels.extend_from_slice(f.classes());
    }
    let total: u64 = contingency.iter().flatten().sum();
    let correct: u64 = (0..NUM_CLASSES).map(|c| contingency[c][c]).sum();
    Ok(FusionOracleReport {
        patches: n,
        agreement: correct as f64 / total as f64,
        contingency,
        models_sha256: models_hash(&models)?,
        catalog_sha256: catalog.hash()?,
        catalog,
        labels_sha256: sha256_hex(&labels),
    })
}

/// Hash over the JSON form of every model, in layer order.
pub fn models_hash(models: &[ClusterModel]) -> Result<String> {
    let mut all = String::new();
    for m in models {
        all.push_str(&m.to_json()?);
        all.push('\n');
    }
    Ok(sha256_hex(all.as_bytes()))
}

/// Seed of the `index`-th document of a named evaluation split.
pub fn document_seed(seed: GenSeed, split: &str, index: usize) -> GenSeed {
    seed.derive(&format!("document-{split}"), index as u64)
}

/// Renders `n` documents of a split.
pub fn generate_documents(
    seed: GenSeed,
    split: &str,
    n: usize,
    config: &GenConfig,
    height: usize,
    width: usize,
) -> Result<Vec<(RgbRaster, LabelImage)>> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_document(document_seed(seed, split, i), config, height, width))
        .collect()
}

/// Settings of a complete pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2eConfig {
    pub seed: GenSeed,
    /// Patches clustered and used to build the oracle catalog.
    pub corpus_patches: usize,
    pub kmeans: KMeansConfig,
    pub pixel_budget: usize,
    /// Generator settings for corpus and dataset patches.
    pub generator: GenConfig,
    /// Patches synthesized before balancing.
    pub dataset_patches: usize,
    pub min_class_pixels: usize,
    pub background_fraction: f64,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub grid: GridSpec,
    pub grid_documents: usize,
    pub eval_documents: usize,
    pub document_height: usize,
    pub document_width: usize,
    /// Generator settings for evaluation documents.
    pub documents: GenConfig,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            seed: GenSeed(7),
            corpus_patches: 200,
            kmeans: KMeansConfig::default(),
            pixel_budget: DEFAULT_PIXEL_BUDGET,
            generator: GenConfig::default(),
            dataset_patches: 2000,
            min_class_pixels: DEFAULT_MIN_CLASS_PIXELS,
            background_fraction: DEFAULT_BACKGROUND_FRACTION,
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            grid: GridSpec::default(),
            grid_documents: 5,
            eval_documents: 10,
            document_height: 512,
            document_width: 512,
            documents: GenConfig::default(),
        }
    }
}

/// Hashes and results of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eReport {
    pub models_sha256: String,
    pub catalog_sha256: String,
    pub dataset_sha256: String,
    pub balanced_sha256: String,
    pub weights_sha256: String,
    pub grid_sha256: String,
    pub eval_sha256: String,
    pub dataset_counts: BTreeMap<Category, usize>,
    pub balanced_counts: BTreeMap<Category, usize>,
    pub grid: GridOutcome,
    pub eval_counts: ConfusionCounts,
    pub eval: MetricsReport,
}

impl E2eReport {
    /// The artifact hashes, in pipeline order.
    pub fn hashes(&self) -> [(&'static str, &str); 7] {
        [
            ("models", &self.models_sha256),
            ("catalog", &self.catalog_sha256),
            ("dataset", &self.dataset_sha256),
            ("balanced", &self.balanced_sha256),
            ("weights", &self.weights_sha256),
            ("grid", &self.grid_sha256),
            ("eval", &self.eval_sha256),
        ]
    }
}

/// File names inside an e2e output directory.
pub mod layout {
    pub const MODELS_DIR: &str = "clusters";
    pub const CATALOG: &str = "catalog.json";
    pub const DATASET_DIR: &str = "dataset";
    pub const BALANCED: &str = "balanced.jsonl";
    pub const WEIGHTS: &str = "segmenter.segm";
    pub const GRID: &str = "grid.json";
    pub const EVAL: &str = "eval.json";
    pub const REPORT: &str = "e2e.json";
}

/// Writes one JSON file per cluster model.
pub fn save_models(dir: &Path, models: &[ClusterModel]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in models {
        write_atomic(&dir.join(format!("layer_{:02}.json", m.layer_id)), m.to_json()?.as_bytes())?;
    }
    Ok(())
}

/// Loads every `layer_*.json` model in `dir`, ordered by layer id.
pub fn load_models(dir: &Path) -> Result<Vec<ClusterModel>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut models = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("layer_") && name.ends_with(".json") {
            let text = String::from_utf8(read_bytes(&path)?).map_err(|e| Error::Format {
                format: "cluster model",
                reason: e.to_string(),
            })?;
            models.push(ClusterModel::from_json(&text)?);
        }
    }
    if models.is_empty() {
        return Err(Error::EmptyInput("cluster models"));
    }
    models.sort_by_key(|m| m.layer_id);
    Ok(models)
}

/// Runs the whole pipeline with an oracle catalog, writing every artifact
/// under `out_dir`.
pub fn run_e2e(config: &E2eConfig, out_dir: &Path) -> Result<E2eReport> {
    let seed = config.seed;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Clustering and oracle annotation on the corpus.
    let models = fit_corpus_clusters(
        config.corpus_patches,
        seed,
        &config.generator,
        &config.kmeans,
        config.pixel_budget,
    )?;
    save_models(&out_dir.join(layout::MODELS_DIR), &models)?;
    let seeds: Vec<GenSeed> = (0..config.corpus_patches).map(|i| corpus_seed(seed, i)).collect();
    let (assignments, truths): (Vec<_>, Vec<_>) =
        assign_patches(&seeds, &config.generator, &models)?.into_iter().unzip();
    let catalog = build_oracle_catalog(&assignments, &truths)?;
    drop(assignments);
    write_atomic(&out_dir.join(layout::CATALOG), catalog.to_json()?.as_bytes())?;

    // Dataset synthesis and balancing.
    let dataset_dir = out_dir.join(layout::DATASET_DIR);
    let manifest = synthesize_dataset(
        config.dataset_patches,
        seed.derive("dataset", 0),
        &config.generator,
        &models,
        &catalog,
        config.min_class_pixels,
        &dataset_dir,
    )?;
    let balanced = balance(&manifest, seed.derive("balance", 0), config.background_fraction)?;
    balanced.save(&dataset_dir.join(layout::BALANCED))?;

    // Training.
    let train_config = TrainConfig { seed: seed.derive("train", 0), ..config.train };
    let (model, train_report) = train(&balanced, &train_config, &config.augment)?;
    let weights_sha256 = save_model(&out_dir.join(layout::WEIGHTS), &model, Some(&train_report))?;

    // Post-processing search and final evaluation on disjoint documents.
    let (h, w) = (config.document_height, config.document_width);
    let grid_docs = generate_documents(seed, "grid", config.grid_documents, &config.documents, h, w)?;
    let grid = grid_search(&model, &grid_docs, &config.grid)?;
    drop(grid_docs);
    let grid_json = grid.to_json()?;
    write_atomic(&out_dir.join(layout::GRID), grid_json.as_bytes())?;

    let eval_docs = generate_documents(seed, "eval", config.eval_documents, &config.documents, h, w)?;
    let mut eval_counts = ConfusionCounts::default();
    for (doc, truth) in &eval_docs {
        eval_counts.merge(&confusion(&segment_document(&model, doc, &grid.best)?, truth)?);
    }
    let eval = report(&eval_counts);
    let eval_json = eval.to_json()?;
    write_atomic(&out_dir.join(layout::EVAL), eval_json.as_bytes())?;

    let out = E2eReport {
        models_sha256: models_hash(&models)?,
        catalog_sha256: catalog.hash()?,
        dataset_sha256: manifest.hash()?,
        balanced_sha256: balanced.hash()?,
        weights_sha256,
        grid_sha256: sha256_hex(grid_json.as_bytes()),
        eval_sha256: sha256_hex(eval_json.as_bytes()),
        dataset_counts: manifest.counts(),
        balanced_counts: balanced.counts(),
        grid,
        eval_counts,
        eval,
    };
    let mut json = serde_json::to_string_pretty(&out)?;
    json.push('\n');
    write_atomic(&out_dir.join(layout::REPORT), json.as_bytes())?;
    Ok(out)
}
