//! Spherical k-means over per-pixel feature vectors, one model per layer.
//!
//! Samples are compared by cosine similarity to unit-norm centroids. The
//! fit alternates assignment (argmax cosine) and update (normalized member
//! sum), which never decreases the objective `sum_i max_j cos(x_i, c_j)`.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::docgen::{FeatureLayer, FeatureStack};
use crate::error::{Error, Result};
use crate::rng::GenSeed;

/// Most stacks that contribute training pixels.
pub const MAX_SAMPLE_STACKS: usize = 100;
/// Norms below this are treated as zero vectors.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves further than this (Euclidean).
    pub tol: f64,
    /// Independent k-means++ starts; the best objective wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 20,
            max_iter: 100,
            tol: 1e-4,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub objective: f64,
    /// Objective after every update step, then the final objective.
    pub objective_history: Vec<f64>,
    pub converged: bool,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub layer_id: usize,
    /// Side length of the layer the model was fit on (0 if unknown).
    pub layer_size: usize,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub fit_meta: FitMeta,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn with_layer(mut self, layer_id: usize, layer_size: usize) -> Self {
        self.layer_id = layer_id;
        self.layer_size = layer_size;
        self
    }

    /// Index of the centroid with the largest dot product; lowest id on ties.
    #[inline]
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (j, c) in self.centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(v).map(|(a, &b)| a * b as f64).sum();
            if d > best_dot {
                best_dot = d;
                best = j;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ClusterModel = serde_json::from_str(s)?;
        if m.k == 0 || m.centroids.len() != m.k {
            return Err(Error::Format {
                format: "cluster model",
                reason: format!("k = {} but {} centroids", m.k, m.centroids.len()),
            });
        }
        Ok(m)
    }
}

/// Per-pixel cluster ids of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMap {
    pub layer_id: usize,
    pub size: usize,
    pub k: usize,
    ids: Vec<u16>,
}

impl AssignmentMap {
    pub fn new(layer_id: usize, size: usize, k: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != size * size {
            return Err(Error::dims(size * size, ids.len()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= k) {
            return Err(Error::param("ids", format!("cluster id {bad} >= k = {k}")));
        }
        Ok(Self {
            layer_id,
            size,
            k,
            ids,
        })
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.ids[y * self.size + x]
    }

    /// Pixel count per cluster id.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &id in &self.ids {
            c[id as usize] += 1;
        }
        c
    }

    pub fn upsample_nearest(&self, target: usize) -> Result<AssignmentMap> {
        let ids = crate::image::upsample_nearest(&self.ids, self.size, self.size, target, target)?;
        Ok(AssignmentMap {
            layer_id: self.layer_id,
            size: target,
            k: self.k,
            ids,
        })
    }
}

/// A flat set of `dim`-dimensional sample vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::param("samples", "rows differ in length"));
        }
        Ok(Self {
            dim,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Fits `restarts` independent runs and keeps the best objective.
pub fn fit_spherical_kmeans(
    samples: &SampleSet,
    config: &KMeansConfig,
    seed: GenSeed,
) -> Result<ClusterModel> {
    let n = samples.len();
    if config.k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if samples.dim == 0 {
        return Err(Error::param("samples", "dimension must be at least 1"));
    }
    if n < config.k {
        return Err(Error::TooFewSamples {
            needed: config.k,
            got: n,
        });
    }
    let unit = normalize_rows(samples);
    let mut best: Option<ClusterModel> = None;
    for r in 0..config.restarts.max(1) {
        let model = fit_once(&unit, samples.dim, config, seed.derive("kmeans-restart", r as u64));
        if best
            .as_ref()
            .is_none_or(|b| model.fit_meta.objective > b.fit_meta.objective)
        {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Smallest objective gain for which a sample is moved.
const MOVE_EPSILON: f64 = 1e-12;

fn normalize_rows(samples: &SampleSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.data.len());
    for row in samples.data.chunks_exact(samples.dim) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            out.extend(std::iter::repeat_n(0.0, samples.dim));
        } else {
            out.extend(row.iter().map(|&v| v as f64 / norm));
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    (norm >= ZERO_NORM).then(|| v.iter().map(|x| x / norm).collect())
}

fn canonical(dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    c[0] = 1.0;
    c
}

/// Best (cosine, id) per row; lowest id on ties.
fn assign_rows(unit: &[f64], dim: usize, centroids: &[Vec<f64>]) -> Vec<(f64, usize)> {
    unit.par_chunks(dim * 1024)
        .flat_map_iter(|block| {
            block.chunks_exact(dim).map(|x| {
                let mut best = (f64::NEG_INFINITY, 0);
                for (j, c) in centroids.iter().enumerate() {
                    let d = dot(x, c);
                    if d > best.0 {
                        best = (d, j);
                    }
                }
                best
            })
        })
        .collect()
}

/// k-means++ seeding with cosine distance `1 - cos`.
fn init_plus_plus(unit: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = unit.len() / dim;
    let row = |i: usize| &unit[i * dim..(i + 1) * dim];
    let nonzero: Vec<usize> = (0..n).filter(|&i| row(i).iter().any(|&v| v != 0.0)).collect();
    if nonzero.is_empty() {
        return vec![canonical(dim); k];
    }
    let mut centroids = vec![row(nonzero[rng.random_range(0..nonzero.len())]).to_vec()];
    let mut closest: Vec<f64> = (0..n).map(|i| dot(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = closest.iter().map(|&c| (1.0 - c).max(0.0).powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            nonzero[rng.random_range(0..nonzero.len())]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = normalized(row(pick)).unwrap_or_else(|| canonical(dim));
        for (i, best) in closest.iter_mut().enumerate() {
            *best = best.max(dot(row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Local search over single-sample moves. Moving `x` from cluster `a` to `b`
/// changes the partition objective `sum_j |S_j|` by
/// `|S_b + x| - |S_b| - (|S_a| - |S_a - x|)`; improving moves are applied
/// immediately, in row order, until a full pass makes none. This escapes
/// assignment fixpoints that are not local optima of the objective.
fn refine_by_moves(
    unit: &[f64],
    dim: usize,
    centroids: Vec<Vec<f64>>,
    max_passes: usize,
    history: &mut Vec<f64>,
) -> Vec<Vec<f64>> {
    let k = centroids.len();
    let n = unit.len() / dim;
    let row = |i: usize| &unit[i * dim..(i + 1) * dim];
    let mut labels: Vec<usize> = assign_rows(unit, dim, &centroids).iter().map(|a| a.1).collect();
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut members = vec![0usize; k];
    for (i, &j) in labels.iter().enumerate() {
        members[j] += 1;
        for (s, x) in sums[j].iter_mut().zip(row(i)) {
            *s += x;
        }
    }
    let mut norms: Vec<f64> = sums.iter().map(|s| norm(s)).collect();
    let mut shifted = vec![0.0f64; dim];
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..n {
            let x = row(i);
            let a = labels[i];
            if members[a] <= 1 {
                continue;
            }
            for (t, (s, v)) in shifted.iter_mut().zip(sums[a].iter().zip(x)) {
                *t = s - v;
            }
            let loss = norms[a] - norm(&shifted);
            let mut best: Option<(f64, usize)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let grown: f64 = sums[b].iter().zip(x).map(|(s, v)| (s + v) * (s + v)).sum::<f64>().sqrt();
                let gain = grown - norms[b] - loss;
                if gain > MOVE_EPSILON && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, b));
                }
            }
            if let Some((_, b)) = best {
                for (d, v) in x.iter().enumerate() {
                    sums[a][d] -= v;
                    sums[b][d] += v;
                }
                norms[a] = norm(&sums[a]);
                norms[b] = norm(&sums[b]);
                members[a] -= 1;
                members[b] += 1;
                labels[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        history.push(norms.iter().sum());
    }
    sums.iter()
        .zip(centroids)
        .map(|(s, c)| normalized(s).unwrap_or(c))
        .collect()
}

fn fit_once(unit: &[f64], dim: usize, config: &KMeansConfig, seed: GenSeed) -> ClusterModel {
    let k = config.k;
    let mut rng = seed.stream("kmeans-init");
    let mut centroids = init_plus_plus(unit, dim, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..config.max_iter {
        iterations += 1;
        let assigned = assign_rows(unit, dim, &centroids);

        // Fixed summation order: rows ascending within each cluster.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut members = vec![0usize; k];
        for (i, &(_, j)) in assigned.iter().enumerate() {
            members[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(&unit[i * dim..(i + 1) * dim]) {
                *s += x;
            }
        }

        let mut next: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut reseeded = Vec::new();
        for j in 0..k {
            if members[j] == 0 {
                // Farthest sample from its own centroid that is not already a reseed.
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !reseeded.contains(i))
                    .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                    .map(|(i, _)| i)
                    .expect("n >= k");
                reseeded.push(far);
                next.push(
                    normalized(&unit[far * dim..(far + 1) * dim])
                        .unwrap_or_else(|| centroids[j].clone()),
                );
            } else {
                next.push(normalized(&sums[j]).unwrap_or_else(|| centroids[j].clone()));
            }
        }

        let objective: f64 = (0..k)
            .filter(|&j| members[j] > 0)
            .map(|j| dot(&sums[j], &next[j]))
            .sum();
        history.push(objective);

        let movement = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < config.tol {
            converged = true;
            break;
        }
    }

    let centroids = refine_by_moves(unit, dim, centroids, config.max_iter, &mut history);

    // Zero rows score 0 against every centroid, so they add nothing here.
    let objective: f64 = assign_rows(unit, dim, &centroids).iter().map(|(d, _)| d).sum();
    history.push(objective);
    ClusterModel {
        layer_id: 0,
        layer_size: 0,
        k,
        centroids,
        fit_meta: FitMeta {
            iterations,
            objective,
            objective_history: history,
            converged,
            sample_count: unit.len() / dim,
        },
    }
}

/// Assigns every pixel of `layer` to its most similar centroid.
pub fn assign(model: &ClusterModel, layer: &FeatureLayer) -> Result<AssignmentMap> {
    if layer.channels() != model.dim() {
        return Err(Error::dims(
            format!("{} channels", model.dim()),
            format!("{} channels", layer.channels()),
        ));
    }
    let n = layer.pixel_count();
    let channels = layer.channels();
    let ids: Vec<u16> = (0..n)
        .into_par_iter()
        .with_min_len(4096)
        .map_init(
            || vec![0.0f32; channels],
            |buf, i| {
                layer.pixel_into(i, buf);
                model.nearest(buf) as u16
            },
        )
        .collect();
    Ok(AssignmentMap {
        layer_id: model.layer_id,
        size: layer.size(),
        k: model.k,
        ids,
    })
}

/// Assigns each model's layer of `stack`.
pub fn assign_stack(models: &[ClusterModel], stack: &FeatureStack) -> Result<Vec<AssignmentMap>> {
    models
        .iter()
        .map(|m| {
            let layer = stack.layers().get(m.layer_id).ok_or_else(|| {
                Error::param("layer_id", format!("stack has no layer {}", m.layer_id))
            })?;
            assign(m, layer)
        })
        .collect()
}

/// Training pixels drawn from one layer across stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSamples {
    pub layer_id: usize,
    pub size: usize,
    pub samples: SampleSet,
}

/// Which pixels of which stacks to sample, per layer.
///
/// Pixels are drawn uniformly without replacement from the union of all
/// pixels of a layer over the first [`MAX_SAMPLE_STACKS`] stacks.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    sizes: Vec<usize>,
    n_stacks: usize,
    /// layer -> stack -> ascending pixel indices
    picks: Vec<Vec<Vec<u32>>>,
}

impl SamplePlan {
    pub fn new(
        n_stacks: usize,
        layer_sizes: &[usize],
        per_layer_budget: usize,
        seed: GenSeed,
    ) -> Result<Self> {
        if n_stacks == 0 {
            return Err(Error::EmptyInput("feature stacks"));
        }
        if per_layer_budget == 0 {
            return Err(Error::param("per_layer_budget", "must be at least 1"));
        }
        let n_stacks = n_stacks.min(MAX_SAMPLE_STACKS);
        let picks = layer_sizes
            .iter()
            .enumerate()
            .map(|(layer, &size)| {
                let per_stack = size * size;
                let total = per_stack * n_stacks;
                let mut chosen: Vec<usize> = if per_layer_budget >= total {
                    (0..total).collect()
                } else {
                    let mut rng = seed.indexed_stream("pixel-sample", layer as u64);
                    index::sample(&mut rng, total, per_layer_budget).into_vec()
                };
                chosen.sort_unstable();
                let mut by_stack = vec![Vec::new(); n_stacks];
                for g in chosen {
                    by_stack[g / per_stack].push((g % per_stack) as u32);
                }
                by_stack
            })
            .collect();
        Ok(Self {
            sizes: layer_sizes.to_vec(),
            n_stacks,
            picks,
        })
    }

    /// Number of stacks the plan draws from.
    pub fn stacks(&self) -> usize {
        self.n_stacks
    }

    /// Selected pixel count per stack for `layer`.
    pub fn counts(&self, layer: usize) -> Vec<usize> {
        self.picks[layer].iter().map(Vec::len).collect()
    }

    pub fn empty_samples(&self, channels: usize) -> Vec<LayerSamples> {
        self.sizes
            .iter()
            .enumerate()
            .map(|(layer_id, &size)| LayerSamples {
                layer_id,
                size,
                samples: SampleSet::new(channels),
            })
            .collect()
    }

    /// Appends the planned pixels of stack `index` to `out`. Stacks must be
    /// gathered in ascending index order for a deterministic sample order.
    pub fn gather(&self, index: usize, stack: &FeatureStack, out: &mut [LayerSamples]) {
        if index >= self.n_stacks {
            return;
        }
        for (layer, dst) in out.iter_mut().enumerate() {
            let l = stack.layer(layer);
            let mut buf = vec![0.0f32; l.channels()];
            for &p in &self.picks[layer][index] {
                l.pixel_into(p as usize, &mut buf);
                dst.samples.data.extend_from_slice(&buf);
            }
        }
    }
}

/// Samples up to `per_layer_budget` pixels per layer from the first
/// [`MAX_SAMPLE_STACKS`] stacks.
pub fn sample_training_pixels(
    stacks: &[FeatureStack],
    per_layer_budget: usize,
    seed: GenSeed,
) -> Result<Vec<LayerSamples>> {
    let first = stacks.first().ok_or(Error::EmptyInput("feature stacks"))?;
    let sizes: Vec<usize> = first.layers().iter().map(|l| l.size()).collect();
    let plan = SamplePlan::new(stacks.len(), &sizes, per_layer_budget, seed)?;
    let mut out = plan.empty_samples(first.layer(0).channels());
    for (i, s) in stacks.iter().take(plan.stacks()).enumerate() {
        plan.gather(i, s, &mut out);
    }
    Ok(out)
}

/// Fits one model per layer sample set.
pub fn fit_layers(
    samples: &[LayerSamples],
    config: &KMeansConfig,
    seed: GenSeed,
) -> Result<Vec<ClusterModel>> {
    samples
        .par_iter()
        .map(|s| {
            fit_spherical_kmeans(&s.samples, config, seed.derive("layer", s.layer_id as u64))
                .map(|m| m.with_layer(s.layer_id, s.size))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(rows: &[[f64; 3]]) -> SampleSet {
        SampleSet::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn single_cluster_is_spherical_mean() {
        let s = unit_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.5], [3.0, 3.0, 0.0]]);
        let m = fit_spherical_kmeans(&s, &KMeansConfig { k: 1, ..Default::default() }, GenSeed(1))
            .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let sum = [1.0 + h, 1.0 + h, 1.0];
        let norm = (sum.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for (c, s) in m.centroids[0].iter().zip(sum) {
            assert!((c - s / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn separated_axes() {
        let s = unit_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let m = fit_spherical_kmeans(&s, &KMeansConfig { k: 2, ..Default::default() }, GenSeed(3))
            .unwrap();
        assert!((m.fit_meta.objective - 4.0).abs() < 1e-12);
        let mut found: Vec<usize> = m
            .centroids
            .iter()
            .map(|c| c.iter().position(|&v| (v - 1.0).abs() < 1e-12).unwrap())
            .collect();
        found.sort();
        assert_eq!(found, vec![0, 1]);
    }

    #[test]
    fn rejects_too_few_samples() {
        let s = unit_rows(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(
            fit_spherical_kmeans(&s, &KMeansConfig { k: 2, ..Default::default() }, GenSeed(0)),
            Err(Error::TooFewSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn zero_vectors_do_not_poison_centroids() {
        let s = unit_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let m = fit_spherical_kmeans(&s, &KMeansConfig { k: 2, ..Default::default() }, GenSeed(4))
            .unwrap();
        for c in &m.centroids {
            assert!(c.iter().all(|v| v.is_finite()));
            assert!((dot(c, c).sqrt() - 1.0).abs() < 1e-9);
        }
        let all_zero = unit_rows(&[[0.0; 3]; 3]);
        let m = fit_spherical_kmeans(&all_zero, &KMeansConfig { k: 2, ..Default::default() }, GenSeed(4))
            .unwrap();
        assert_eq!(m.centroids[0], canonical(3));
    }

    fn model_from(centroids: Vec<Vec<f64>>) -> ClusterModel {
        ClusterModel {
            layer_id: 0,
            layer_size: 2,
            k: centroids.len(),
            centroids,
            fit_meta: FitMeta {
                iterations: 0,
                objective: 0.0,
                objective_history: vec![],
                converged: true,
                sample_count: 0,
            },
        }
    }

    #[test]
    fn assignment_conventions() {
        let model = model_from(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.6, 0.8, 0.0],
        ]);
        // 2x2 layer, 3 channels, channel-major
        let px = [[0.6f32, 0.8, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 5.0], [2.0, 0.1, 0.0]];
        let mut data = vec![0.0; 12];
        for (i, p) in px.iter().enumerate() {
            for c in 0..3 {
                data[c * 4 + i] = p[c];
            }
        }
        let layer = FeatureLayer::new(2, 3, data).unwrap();
        let a = assign(&model, &layer).unwrap();
        assert_eq!(a.ids(), &[3, 0, 2, 0]);

        let wrong = FeatureLayer::new(2, 2, vec![0.0; 8]).unwrap();
        assert!(assign(&model, &wrong).is_err());
    }

    #[test]
    fn assignment_matches_naive_cosine_loop() {
        let mut rng = GenSeed(21).stream("t");
        let k = 7;
        let centroids: Vec<Vec<f64>> = (0..k)
            .map(|_| normalized(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let model = model_from(centroids.clone());
        let data: Vec<f32> = (0..8 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = FeatureLayer::new(32, 8, data).unwrap();
        let a = assign(&model, &layer).unwrap();
        for i in 0..32 * 32 {
            let x: Vec<f64> = layer.pixel(i).iter().map(|&v| v as f64).collect();
            let nx = dot(&x, &x).sqrt();
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let cos = dot(&x, c) / (nx * dot(c, c).sqrt());
                if cos > best.0 {
                    best = (cos, j);
                }
            }
            assert_eq!(a.ids()[i] as usize, best.1, "pixel {i}");
        }
    }

    #[test]
    fn converged_model_is_a_fixpoint() {
        let mut rng = GenSeed(5).stream("t");
        let rows: Vec<Vec<f32>> = (0..300)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let s = SampleSet::from_rows(&rows).unwrap();
        let cfg = KMeansConfig { k: 5, max_iter: 1000, tol: 1e-12, restarts: 1 };
        let m = fit_spherical_kmeans(&s, &cfg, GenSeed(9)).unwrap();
        assert!(m.fit_meta.converged);
        let unit = normalize_rows(&s);
        let assigned = assign_rows(&unit, 4, &m.centroids);
        let mut sums = vec![vec![0.0; 4]; 5];
        for (i, &(_, j)) in assigned.iter().enumerate() {
            for d in 0..4 {
                sums[j][d] += unit[i * 4 + d];
            }
        }
        for (j, s) in sums.iter().enumerate() {
            let c = normalized(s).unwrap();
            for d in 0..4 {
                assert!((c[d] - m.centroids[j][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_history_is_monotone() {
        let mut rng = GenSeed(6).stream("t");
        let rows: Vec<Vec<f32>> = (0..2000)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let s = SampleSet::from_rows(&rows).unwrap();
        let m = fit_spherical_kmeans(&s, &KMeansConfig::default(), GenSeed(2)).unwrap();
        for w in m.fit_meta.objective_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{w:?}");
        }
        for c in &m.centroids {
            assert!((dot(c, c).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_plan_exhaustive_and_deterministic() {
        let plan = SamplePlan::new(3, &[4, 8], 1_000_000, GenSeed(1)).unwrap();
        assert_eq!(plan.counts(0), vec![16, 16, 16]);
        assert_eq!(plan.counts(1), vec![64, 64, 64]);
        let a = SamplePlan::new(10, &[32], 500, GenSeed(2)).unwrap();
        let b = SamplePlan::new(10, &[32], 500, GenSeed(2)).unwrap();
        assert_eq!(a.picks, b.picks);
        assert_eq!(a.counts(0).iter().sum::<usize>(), 500);
        assert!(SamplePlan::new(0, &[32], 10, GenSeed(0)).is_err());
        assert!(sample_training_pixels(&[], 10, GenSeed(0)).is_err());
    }

    #[test]
    fn sample_counts_are_uniform_across_stacks() {
        let budget = 50_000;
        let plan = SamplePlan::new(100, &[256], budget, GenSeed(77)).unwrap();
        let counts = plan.counts(0);
        assert_eq!(counts.iter().sum::<usize>(), budget);
        // Hypergeometric spread is below the binomial one; use the binomial bound.
        let p = 1.0 / 100.0;
        let mean = budget as f64 * p;
        let sd = (budget as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd + 1e-9, "count {c}");
        }
    }

    #[test]
    fn model_json_roundtrip() {
        let m = model_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let back = ClusterModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn assignment_is_scale_free(
            v in proptest::collection::vec(-1.0f32..1.0, 8),
            scale in 0.01f32..100.0,
        ) {
            let mut rng = GenSeed(3).stream("t");
            let centroids: Vec<Vec<f64>> = (0..5)
                .map(|_| normalized(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
                .collect();
            let model = model_from(centroids);
            let scaled: Vec<f32> = v.iter().map(|x| x * scale).collect();
            let dots: Vec<f64> = model.centroids.iter().map(|c| c.iter().zip(&v).map(|(a, &b)| a * b as f64).sum()).collect();
            let mut sorted = dots.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            // Skip numerically tied cases.
            prop_assume!(sorted[0] - sorted[1] > 1e-5);
            prop_assert_eq!(model.nearest(&v), model.nearest(&scaled));
        }
    }
}
