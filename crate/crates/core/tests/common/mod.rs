//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. None of these call the code they check.

#![allow(dead_code)]

use docsynth::clustering::{fit_spherical_kmeans, KMeansConfig, SampleSet};
use docsynth::datasynth::{Category, DatasetManifest, ManifestEntry, ManifestHeader};
use docsynth::docgen::GenConfig;
use docsynth::segmenter::{Batch, Params};
use docsynth::{ConfidenceMap, GenSeed};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Spherical k-means

/// Unit vectors drawn uniformly on the sphere in `dim` dimensions.
pub fn random_unit_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.1 && norm <= 1.0 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Global optimum of `sum_i max_j cos(x_i, c_j)` for k = 2 by enumerating all
/// assignments. For a fixed partition the best centroids are the normalized
/// member sums, giving `sum_j |S_j|`.
pub fn exhaustive_two_cluster_optimum(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    let dim = vectors[0].len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        for (i, v) in vectors.iter().enumerate() {
            let s = &mut sums[((mask >> i) & 1) as usize];
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
        }
        let obj: f64 = sums.iter().map(|s| s.iter().map(|x| x * x).sum::<f64>().sqrt()).sum();
        best = best.max(obj);
    }
    best
}

/// Outcome of one toy k-means instance.
pub struct ToyKMeans {
    pub fitted: f64,
    pub optimum: f64,
    /// Every recorded objective sequence of the ten restarts was non-decreasing.
    pub monotone: bool,
}

/// Best of ten restarts on eight random 3-D unit vectors with k = 2.
pub fn toy_kmeans_instance(instance: u64) -> ToyKMeans {
    let mut rng = GenSeed(instance).stream("toy-kmeans");
    let vectors = random_unit_vectors(&mut rng, 8, 3);
    let rows: Vec<Vec<f32>> = vectors.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
    // The fit sees f32 inputs; the optimum is computed on the same values.
    let exact: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            r.iter().map(|&x| x as f64 / n).collect()
        })
        .collect();
    let samples = SampleSet::from_rows(&rows).unwrap();
    let config = KMeansConfig { k: 2, max_iter: 100, tol: 0.0, restarts: 1 };
    // Single fits expose each restart's history; the best-of-ten fit is the
    // one compared against the optimum.
    let mut monotone = true;
    for r in 0..10 {
        let m = fit_spherical_kmeans(&samples, &config, GenSeed(instance).derive("restart", r)).unwrap();
        monotone &= is_non_decreasing(&m.fit_meta.objective_history);
    }
    let best = fit_spherical_kmeans(
        &samples,
        &KMeansConfig { restarts: 10, ..config },
        GenSeed(instance),
    )
    .unwrap();
    monotone &= is_non_decreasing(&best.fit_meta.objective_history);
    ToyKMeans { fitted: best.fit_meta.objective, optimum: exhaustive_two_cluster_optimum(&exact), monotone }
}

pub fn is_non_decreasing(history: &[f64]) -> bool {
    history.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0))
}

// ---------------------------------------------------------------------------
// Reassembly

/// A random probability vector with a random dominant class.
pub fn random_distribution(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let a: f32 = rng.random_range(0.0..1.0);
    let b: f32 = rng.random_range(0.0..(1.0 - a));
    let mut p = [a, b, 0.0];
    p[2] = 1.0 - a - b;
    let k = rng.random_range(0..3);
    p.swap(0, k);
    p
}

pub fn random_confidence_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ConfidenceMap {
    ConfidenceMap::new(h, w, (0..h * w).map(|_| random_distribution(rng)).collect()).unwrap()
}

/// Per-pixel loop over every covering patch: highest maximum probability
/// wins, earlier patches win ties.
pub fn brute_force_reassemble(
    predictions: &[(ConfidenceMap, usize, usize)],
    height: usize,
    width: usize,
) -> Vec<[f32; 3]> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut chosen: Option<([f32; 3], f32)> = None;
            for (m, x0, y0) in predictions {
                if x < *x0 || y < *y0 || x >= x0 + m.width() || y >= y0 + m.height() {
                    continue;
                }
                let p = m.get(x - x0, y - y0);
                let score = p[0].max(p[1]).max(p[2]);
                if chosen.is_none_or(|(_, s)| score > s) {
                    chosen = Some((p, score));
                }
            }
            out.push(chosen.expect("pixel covered").0);
        }
    }
    out
}

/// Copies each patch into place; the caller guarantees a disjoint cover.
pub fn stitch(predictions: &[(ConfidenceMap, usize, usize)], height: usize, width: usize) -> Vec<[f32; 3]> {
    let mut out = vec![[f32::NAN; 3]; height * width];
    for (m, x0, y0) in predictions {
        for y in 0..m.height().min(height - y0) {
            for x in 0..m.width().min(width - x0) {
                out[(y0 + y) * width + x0 + x] = m.get(x, y);
            }
        }
    }
    out
}

/// Patch origins on a grid with stride `stride`, last patch flush with the
/// far edge.
pub fn grid_offsets(length: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + patch < length).collect();
    v.push(length.saturating_sub(patch));
    v.dedup();
    v
}

// ---------------------------------------------------------------------------
// Gradients

/// A batch of random standardized features with random targets.
pub fn random_batch(seed: u64, dim: usize, n: usize) -> Batch {
    let mut rng = GenSeed(seed).stream("batch");
    Batch {
        dim,
        features: (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        targets: (0..n).map(|_| rng.random_range(0..3u8)).collect(),
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences over `per_tensor` random coordinates of every tensor.
pub fn max_gradient_error(params: &Params, batch: &Batch, per_tensor: usize, seed: u64) -> f64 {
    let (_, grad) = params.loss_and_grad(batch);
    let mut rng = GenSeed(seed).stream("coords");
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..4 {
        let len = params.tensors()[t].len();
        if len == 0 {
            continue;
        }
        for _ in 0..per_tensor.min(len) {
            let i = rng.random_range(0..len);
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += eps;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= eps;
            let numeric = (plus.loss(batch) - minus.loss(batch)) / (2.0 * eps);
            let analytic = grad.tensors()[t][i];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Manifests

/// A manifest with random category counts and no files behind it.
pub fn random_manifest(rng: &mut ChaCha8Rng) -> DatasetManifest {
    let n = rng.random_range(2..400);
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        // The first two entries guarantee both text categories are present.
        let category = match index {
            0 => Category::PrintedOnly,
            1 => Category::HandwritingContaining,
            _ => match rng.random_range(0..3) {
                0 => Category::BackgroundOnly,
                1 => Category::PrintedOnly,
                _ => Category::HandwritingContaining,
            },
        };
        entries.push(ManifestEntry {
            index,
            seed: GenSeed(index as u64),
            patch: format!("patches/{index:06}.png"),
            label: format!("labels/{index:06}.png"),
            patch_sha256: String::new(),
            label_sha256: String::new(),
            category,
        });
    }
    DatasetManifest {
        header: ManifestHeader {
            format_version: 1,
            seed: GenSeed(0),
            generator: GenConfig::default(),
            catalog_sha256: String::new(),
            models_sha256: String::new(),
            min_class_pixels: 32,
            balance: None,
        },
        entries,
        root: std::path::PathBuf::from("."),
    }
}

// ---------------------------------------------------------------------------
// Pipeline fixtures

/// Cluster models and an oracle catalog fit on a small corpus.
pub fn small_oracle(
    seed: GenSeed,
    patches: usize,
    config: &GenConfig,
) -> (Vec<docsynth::clustering::ClusterModel>, docsynth::catalog::ClusterCatalog) {
    use docsynth::pipeline::{assign_patches, corpus_seed, fit_corpus_clusters};
    let models =
        fit_corpus_clusters(patches, seed, config, &KMeansConfig::default(), 20_000).unwrap();
    let seeds: Vec<GenSeed> = (0..patches).map(|i| corpus_seed(seed, i)).collect();
    let (assignments, truths): (Vec<_>, Vec<_>) =
        assign_patches(&seeds, config, &models).unwrap().into_iter().unzip();
    let catalog = docsynth::fusion::build_oracle_catalog(&assignments, &truths).unwrap();
    (models, catalog)
}
