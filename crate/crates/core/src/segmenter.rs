//! Per-pixel three-class segmenter.
//!
//! Every pixel is described by a fixed feature vector: the raw grayscale
//! window around it, box-filtered means at several scales and the window's
//! intensity variance, all read from a reflect-101 padded image. A small
//! multilayer perceptron (or a linear model when the hidden width is 0) maps
//! standardized features to class probabilities.
//!
//! Training runs mini-batch SGD with momentum on softmax cross-entropy over
//! class-balanced pixels drawn from augmented patches, with a cosine learning
//! rate schedule.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentPlan};
use crate::datasynth::DatasetManifest;
use crate::docgen::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::image::{ConfidenceMap, LabelImage, Raster, NUM_CLASSES};
use crate::io::{read_bytes, sha256_hex, write_atomic};
use crate::rng::GenSeed;

/// Layout of the per-pixel feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureDef {
    /// Raw window is `(2r + 1)²` pixels.
    pub window_radius: usize,
    /// Number of box-mean scales; scale `l` has radius `3·2^l − 1`.
    pub pyramid_levels: usize,
}

impl Default for FeatureDef {
    fn default() -> Self {
        Self { window_radius: 7, pyramid_levels: 3 }
    }
}

impl FeatureDef {
    pub fn window(&self) -> usize {
        2 * self.window_radius + 1
    }

    /// Feature dimension: window pixels, one mean per scale, and the variance.
    pub fn dim(&self) -> usize {
        self.window() * self.window() + self.pyramid_levels + 1
    }

    pub fn box_radii(&self) -> Vec<usize> {
        (0..self.pyramid_levels).map(|l| 3 * (1 << l) - 1).collect()
    }

    /// Largest offset from the center pixel any feature reads.
    pub fn reach(&self) -> usize {
        self.box_radii().into_iter().chain([self.window_radius]).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels > 8 {
            return Err(Error::param("pyramid_levels", "at most 8 scales are supported"));
        }
        if self.window_radius > 64 {
            return Err(Error::param("window_radius", "at most 64 is supported"));
        }
        Ok(())
    }
}

/// Reflect-101 index into `[0, n)`: `-1 → 1`, `n → n − 2`.
#[inline]
pub fn reflect101(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Computes the features of the pixel at `(cx, cy)` of a buffer whose rows
/// are `stride` apart. The buffer must extend `def.reach()` pixels around it.
fn features_from(def: &FeatureDef, buf: &[f32], stride: usize, cx: usize, cy: usize, out: &mut [f32]) {
    let r = def.window_radius;
    let w = def.window();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for dy in 0..w {
        let row = (cy + dy - r) * stride + cx - r;
        let src = &buf[row..row + w];
        out[dy * w..(dy + 1) * w].copy_from_slice(src);
        for &v in src {
            sum += v as f64;
            sum_sq += (v as f64) * (v as f64);
        }
    }
    let mut k = w * w;
    for radius in def.box_radii() {
        let side = 2 * radius + 1;
        let mut s = 0.0f64;
        for dy in 0..side {
            let row = (cy + dy - radius) * stride + cx - radius;
            s += buf[row..row + side].iter().map(|&v| v as f64).sum::<f64>();
        }
        out[k] = (s / (side * side) as f64) as f32;
        k += 1;
    }
    let n = (w * w) as f64;
    let mean = sum / n;
    out[k] = (sum_sq / n - mean * mean).max(0.0) as f32;
}

/// Features of pixel `(x, y)` read directly through reflect-101 indexing.
pub fn extract_features(def: &FeatureDef, image: &Raster, x: usize, y: usize) -> Vec<f32> {
    let reach = def.reach();
    let side = 2 * reach + 1;
    let mut buf = Vec::with_capacity(side * side);
    for dy in 0..side {
        for dx in 0..side {
            let sx = reflect101(x as i64 + dx as i64 - reach as i64, image.width());
            let sy = reflect101(y as i64 + dy as i64 - reach as i64, image.height());
            buf.push(image.get(sx, sy));
        }
    }
    let mut out = vec![0.0; def.dim()];
    features_from(def, &buf, side, reach, reach, &mut out);
    out
}

/// An image reflect-101 padded by the feature reach, for fast extraction.
pub struct PaddedImage {
    def: FeatureDef,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl PaddedImage {
    pub fn new(def: &FeatureDef, image: &Raster) -> Self {
        let reach = def.reach();
        let stride = image.width() + 2 * reach;
        let rows = image.height() + 2 * reach;
        let mut data = Vec::with_capacity(stride * rows);
        for py in 0..rows {
            let sy = reflect101(py as i64 - reach as i64, image.height());
            for px in 0..stride {
                let sx = reflect101(px as i64 - reach as i64, image.width());
                data.push(image.get(sx, sy));
            }
        }
        Self { def: *def, height: image.height(), width: image.width(), stride, data }
    }

    pub fn features_into(&self, x: usize, y: usize, out: &mut [f32]) {
        let reach = self.def.reach();
        features_from(&self.def, &self.data, self.stride, x + reach, y + reach, out);
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

// ---------------------------------------------------------------------------
// Model

/// Trained classifier. Weight matrices are stored input-major:
/// `w1[i * hidden + j]` connects input `i` to hidden unit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub def: FeatureDef,
    pub hidden: usize,
    /// Per-feature standardization.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// `dim × hidden` (empty for a linear model).
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// `(hidden or dim) × 3`.
    pub w2: Vec<f32>,
    pub b2: [f32; NUM_CLASSES],
}

const SEGM_MAGIC: &[u8; 4] = b"SEGM";
const SEGM_VERSION: u16 = 1;

impl SegModel {
    /// All-zero weights: predicts the uniform distribution everywhere.
    pub fn zeros(def: FeatureDef, hidden: usize) -> Self {
        let d = def.dim();
        let fan_in = if hidden > 0 { hidden } else { d };
        Self {
            def,
            hidden,
            mean: vec![0.0; d],
            std: vec![1.0; d],
            w1: vec![0.0; d * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; fan_in * NUM_CLASSES],
            b2: [0.0; NUM_CLASSES],
        }
    }

    pub fn dim(&self) -> usize {
        self.def.dim()
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        let fan_in = if self.hidden > 0 { self.hidden } else { d };
        let ok = self.mean.len() == d
            && self.std.len() == d
            && self.w1.len() == d * self.hidden
            && self.b1.len() == self.hidden
            && self.w2.len() == fan_in * NUM_CLASSES;
        if !ok {
            return Err(Error::Format { format: "SEGM", reason: "inconsistent dimensions".into() });
        }
        let all = self
            .mean
            .iter()
            .chain(&self.std)
            .chain(&self.w1)
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2);
        if all.clone().any(|v| !v.is_finite()) || self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format { format: "SEGM", reason: "non-finite weights".into() });
        }
        Ok(())
    }

    /// Class logits for one raw feature vector. `scratch` holds the
    /// standardized features followed by hidden activations.
    fn logits(&self, features: &[f32], scratch: &mut Vec<f32>) -> [f32; NUM_CLASSES] {
        let d = self.dim();
        scratch.clear();
        scratch.extend(
            features.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s),
        );
        let mut out = self.b2;
        if self.hidden == 0 {
            for i in 0..d {
                let z = scratch[i];
                let w = &self.w2[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                for k in 0..NUM_CLASSES {
                    out[k] += z * w[k];
                }
            }
            return out;
        }
        let h = self.hidden;
        scratch.extend_from_slice(&self.b1);
        let (z, act) = scratch.split_at_mut(d);
        for (i, &zi) in z.iter().enumerate() {
            let w = &self.w1[i * h..(i + 1) * h];
            for (a, &wij) in act.iter_mut().zip(w) {
                *a += zi * wij;
            }
        }
        for (j, &a) in act.iter().enumerate() {
            if a > 0.0 {
                let w = &self.w2[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
                for k in 0..NUM_CLASSES {
                    out[k] += a * w[k];
                }
            }
        }
        out
    }

    /// Class probabilities for one raw feature vector.
    pub fn predict_features(&self, features: &[f32]) -> [f32; NUM_CLASSES] {
        let mut scratch = Vec::new();
        softmax32(self.logits(features, &mut scratch))
    }

    /// Per-pixel class probabilities of a 256×256 grayscale patch.
    pub fn predict_patch(&self, image: &Raster) -> Result<ConfidenceMap> {
        if (image.height(), image.width()) != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::dims(
                format!("{PATCH_SIZE}x{PATCH_SIZE}"),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        let padded = PaddedImage::new(&self.def, image);
        let probs: Vec<[f32; NUM_CLASSES]> = (0..PATCH_SIZE)
            .into_par_iter()
            .flat_map_iter(|y| {
                let mut feat = vec![0.0; self.dim()];
                let mut scratch = Vec::new();
                (0..PATCH_SIZE)
                    .map(|x| {
                        padded.features_into(x, y, &mut feat);
                        softmax32(self.logits(&feat, &mut scratch))
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(ConfidenceMap::from_parts_unchecked(PATCH_SIZE, PATCH_SIZE, probs))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SEGM_MAGIC);
        out.extend_from_slice(&SEGM_VERSION.to_le_bytes());
        for v in [self.def.window_radius, self.def.pyramid_levels, self.dim(), self.hidden] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for block in [&self.mean, &self.std, &self.w1, &self.b1, &self.w2, &self.b2.to_vec()] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format { format: "SEGM", reason: reason.to_string() };
        if bytes.len() < 22 || &bytes[..4] != SEGM_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SEGM_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let word = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let def = FeatureDef { window_radius: word(0), pyramid_levels: word(1) };
        def.validate()?;
        let (dim, hidden) = (word(2), word(3));
        if dim != def.dim() {
            return Err(bad("feature dimension does not match its definition"));
        }
        let fan_in = if hidden > 0 { hidden } else { dim };
        let sizes = [dim, dim, dim * hidden, hidden, fan_in * NUM_CLASSES, NUM_CLASSES];
        let body = &bytes[22..];
        if body.len() != 4 * sizes.iter().sum::<usize>() {
            return Err(bad("truncated or oversized weight data"));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| (&mut floats).take(n).collect::<Vec<f32>>();
        let mean = take(sizes[0]);
        let std = take(sizes[1]);
        let w1 = take(sizes[2]);
        let b1 = take(sizes[3]);
        let w2 = take(sizes[4]);
        let b2v = take(sizes[5]);
        let model = Self { def, hidden, mean, std, w1, b1, w2, b2: [b2v[0], b2v[1], b2v[2]] };
        model.check()?;
        Ok(model)
    }
}

fn softmax32(logits: [f32; NUM_CLASSES]) -> [f32; NUM_CLASSES] {
    let l = logits.map(f64::from);
    let p = softmax64(&l);
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

fn softmax64(l: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Patches drawn per iteration.
    pub batch_patches: usize,
    /// Pixels drawn from each patch.
    pub pixels_per_patch: usize,
    pub seed: GenSeed,
    /// Hidden layer width; 0 trains a linear model.
    pub hidden_width: usize,
    pub momentum: f64,
    pub features: FeatureDef,
    /// Pixels drawn to estimate feature standardization.
    pub standardization_samples: usize,
    /// Loss history is recorded as means over windows of this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 20_000,
            batch_patches: 16,
            pixels_per_patch: 8,
            seed: GenSeed(0),
            hidden_width: 32,
            momentum: 0.9,
            features: FeatureDef::default(),
            standardization_samples: 4096,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if self.batch_patches == 0 || self.pixels_per_patch == 0 {
            return Err(Error::param("batch", "must be at least 1 pixel"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must be in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every", "must be at least 1"));
        }
        self.features.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_patches * self.pixels_per_patch
    }
}

/// Cosine-annealed learning rate at step `t` of `total` (reaches 0 at `t = total`).
pub fn learning_rate(initial: f64, t: usize, total: usize) -> f64 {
    0.5 * initial * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Training-time parameters, in double precision, same layout as [`SegModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Standardized features and targets of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dim: usize,
    /// Row-major `len × dim`.
    pub features: Vec<f64>,
    pub targets: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Samples per gradient chunk; chunk gradients are summed in index order.
const GRAD_CHUNK: usize = 32;

impl Params {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        let fan_in = if hidden > 0 { hidden } else { dim };
        Self {
            dim,
            hidden,
            w1: vec![0.0; dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; fan_in * NUM_CLASSES],
            b2: vec![0.0; NUM_CLASSES],
        }
    }

    /// He-initialized hidden layer, small output layer, zero biases.
    pub fn init(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(dim, hidden);
        let n1 = Normal::new(0.0, (2.0 / dim as f64).sqrt()).unwrap();
        for w in &mut p.w1 {
            *w = n1.sample(rng);
        }
        let fan_in = if hidden > 0 { hidden } else { dim };
        let n2 = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        for w in &mut p.w2 {
            *w = n2.sample(rng);
        }
        p
    }

    /// Mutable views of every tensor, in a fixed order.
    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn forward(&self, z: &[f64], act: &mut Vec<f64>) -> [f64; NUM_CLASSES] {
        let mut out = [self.b2[0], self.b2[1], self.b2[2]];
        if self.hidden == 0 {
            for (i, &zi) in z.iter().enumerate() {
                for k in 0..NUM_CLASSES {
                    out[k] += zi * self.w2[i * NUM_CLASSES + k];
                }
            }
            return out;
        }
        let h = self.hidden;
        act.clear();
        act.extend_from_slice(&self.b1);
        for (i, &zi) in z.iter().enumerate() {
            for (a, &w) in act.iter_mut().zip(&self.w1[i * h..(i + 1) * h]) {
                *a += zi * w;
            }
        }
        for (j, &a) in act.iter().enumerate() {
            if a > 0.0 {
                for k in 0..NUM_CLASSES {
                    out[k] += a * self.w2[j * NUM_CLASSES + k];
                }
            }
        }
        out
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch) -> f64 {
        let mut act = Vec::new();
        let total: f64 = (0..batch.len())
            .map(|i| {
                let p = softmax64(&self.forward(batch.row(i), &mut act));
                -p[batch.targets[i] as usize].max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        total / batch.len() as f64
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, Params) {
        let n = batch.len();
        let chunks: Vec<(f64, Params)> = (0..n.div_ceil(GRAD_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = Params::zeros(self.dim, self.hidden);
                let mut loss = 0.0;
                let mut act = Vec::new();
                for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
                    loss += self.accumulate(batch.row(i), batch.targets[i], &mut g, &mut act);
                }
                (loss, g)
            })
            .collect();
        let mut grad = Params::zeros(self.dim, self.hidden);
        let mut loss = 0.0;
        for (l, g) in chunks {
            loss += l;
            for (dst, src) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let scale = 1.0 / n as f64;
        for t in grad.tensors_mut() {
            for v in t.iter_mut() {
                *v *= scale;
            }
        }
        (loss * scale, grad)
    }

    /// Adds one sample's unscaled gradient to `g`; returns its loss.
    fn accumulate(&self, z: &[f64], target: u8, g: &mut Params, act: &mut Vec<f64>) -> f64 {
        let p = softmax64(&self.forward(z, act));
        let loss = -p[target as usize].max(f64::MIN_POSITIVE).ln();
        let mut d = p;
        d[target as usize] -= 1.0;
        for k in 0..NUM_CLASSES {
            g.b2[k] += d[k];
        }
        if self.hidden == 0 {
            for (i, &zi) in z.iter().enumerate() {
                for k in 0..NUM_CLASSES {
                    g.w2[i * NUM_CLASSES + k] += zi * d[k];
                }
            }
            return loss;
        }
        let h = self.hidden;
        let mut dact = vec![0.0; h];
        for (j, &a) in act.iter().enumerate() {
            if a > 0.0 {
                let w = &self.w2[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
                for k in 0..NUM_CLASSES {
                    g.w2[j * NUM_CLASSES + k] += a * d[k];
                    dact[j] += w[k] * d[k];
                }
            }
        }
        for (gb, da) in g.b1.iter_mut().zip(&dact) {
            *gb += da;
        }
        for (i, &zi) in z.iter().enumerate() {
            if zi != 0.0 {
                for (gw, da) in g.w1[i * h..(i + 1) * h].iter_mut().zip(&dact) {
                    *gw += zi * da;
                }
            }
        }
        loss
    }

    fn to_model(&self, def: FeatureDef, mean: Vec<f32>, std: Vec<f32>) -> SegModel {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        SegModel {
            def,
            hidden: self.hidden,
            mean,
            std,
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: [self.b2[0] as f32, self.b2[1] as f32, self.b2[2] as f32],
        }
    }
}

/// In-memory training patches with per-class pixel indices.
pub struct TrainingSet {
    images: Vec<Raster>,
    labels: Vec<LabelImage>,
    /// `text_pixels[i][c - 1]` lists the pixels of text class `c` in patch `i`.
    text_pixels: Vec<[Vec<u32>; 2]>,
    /// Patches containing each class.
    holders: [Vec<usize>; NUM_CLASSES],
}

impl TrainingSet {
    pub fn new(pairs: Vec<(Raster, LabelImage)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("training patches"));
        }
        let mut images = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        let mut text_pixels = Vec::with_capacity(pairs.len());
        let mut holders: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, (image, label)) in pairs.into_iter().enumerate() {
            if (image.height(), image.width()) != (label.height(), label.width()) {
                return Err(Error::dims(
                    format!("{}x{}", image.height(), image.width()),
                    format!("{}x{}", label.height(), label.width()),
                ));
            }
            let mut lists: [Vec<u32>; 2] = Default::default();
            let mut has_background = false;
            for (p, &c) in label.classes().iter().enumerate() {
                match c {
                    0 => has_background = true,
                    c => lists[c as usize - 1].push(p as u32),
                }
            }
            if has_background {
                holders[0].push(i);
            }
            for c in 1..NUM_CLASSES {
                if !lists[c - 1].is_empty() {
                    holders[c].push(i);
                }
            }
            images.push(image);
            labels.push(label);
            text_pixels.push(lists);
        }
        Ok(Self { images, labels, text_pixels, holders })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Classes with at least one pixel anywhere in the set.
    pub fn present_classes(&self) -> Vec<u8> {
        (0..NUM_CLASSES as u8).filter(|&c| !self.holders[c as usize].is_empty()).collect()
    }
}

/// Attempts per sampled pixel before accepting whatever class lands there.
const MAX_PIXEL_ATTEMPTS: usize = 64;

/// Draws `pixels` raw feature vectors of (ideally) class `target` from one
/// augmented patch. Returns the features and the actual augmented labels.
fn sample_slot(
    set: &TrainingSet,
    def: &FeatureDef,
    augment: &AugmentConfig,
    target: u8,
    pixels: usize,
    rng: &mut ChaCha8Rng,
    features: &mut Vec<f32>,
    targets: &mut Vec<u8>,
) {
    let holders = &set.holders[target as usize];
    let idx = holders[rng.random_range(0..holders.len())];
    let (image, label) = (&set.images[idx], &set.labels[idx]);
    let (h, w) = (image.height(), image.width());
    let plan = AugmentPlan::sample_with(rng, augment, h, w);
    let mapper = plan.mapper();

    let reach = def.reach();
    let side = 2 * reach + 1;
    let mut buf = vec![0.0f32; side * side];
    let mut out = vec![0.0f32; def.dim()];
    for _ in 0..pixels {
        let mut pick = (0usize, 0usize);
        for _ in 0..MAX_PIXEL_ATTEMPTS {
            let (u, v) = if target == 0 {
                (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64)
            } else {
                let list = &set.text_pixels[idx][target as usize - 1];
                let p = list[rng.random_range(0..list.len())] as usize;
                let (u, v) = mapper.approx_forward((p % w) as f64, (p / w) as f64);
                (u.round(), v.round())
            };
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            pick = (u as usize, v as usize);
            if plan.label_at(&mapper, label, pick.0, pick.1) == target {
                break;
            }
        }
        let (u, v) = pick;
        for dy in 0..side {
            let oy = reflect101(v as i64 + dy as i64 - reach as i64, h);
            for dx in 0..side {
                let ox = reflect101(u as i64 + dx as i64 - reach as i64, w);
                buf[dy * side + dx] = plan.image_at(&mapper, image, ox, oy);
            }
        }
        features_from(def, &buf, side, reach, reach, &mut out);
        features.extend_from_slice(&out);
        targets.push(plan.label_at(&mapper, label, u, v));
    }
}

/// Draws one class-balanced batch of raw features: each patch slot gets a
/// uniformly chosen target class. Slot streams make the batch independent
/// of thread count.
pub fn sample_batch(
    set: &TrainingSet,
    config: &TrainConfig,
    augment: &AugmentConfig,
    seed: GenSeed,
) -> (Vec<f32>, Vec<u8>) {
    let classes = set.present_classes();
    let slots: Vec<(Vec<f32>, Vec<u8>)> = (0..config.batch_patches)
        .into_par_iter()
        .map(|s| {
            let mut rng = seed.indexed_stream("slot", s as u64);
            let target = classes[rng.random_range(0..classes.len())];
            let mut f = Vec::with_capacity(config.pixels_per_patch * config.features.dim());
            let mut t = Vec::with_capacity(config.pixels_per_patch);
            sample_slot(
                set,
                &config.features,
                augment,
                target,
                config.pixels_per_patch,
                &mut rng,
                &mut f,
                &mut t,
            );
            (f, t)
        })
        .collect();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (f, t) in slots {
        features.extend(f);
        targets.extend(t);
    }
    (features, targets)
}

/// Training outcome recorded next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub patches: usize,
    pub iterations_run: usize,
    /// Mean batch loss over consecutive windows of `log_every` iterations.
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
}

fn standardize(raw: &[f32], mean: &[f32], std: &[f32], dim: usize) -> Vec<f64> {
    raw.chunks_exact(dim)
        .flat_map(|row| {
            row.iter().zip(mean).zip(std).map(|((&x, &m), &s)| ((x - m) / s) as f64)
        })
        .collect()
}

/// Trains on an in-memory set.
pub fn train_on(
    set: &TrainingSet,
    config: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<(SegModel, TrainReport)> {
    config.validate()?;
    augment.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyInput("training patches"));
    }
    let def = config.features;
    let d = def.dim();

    // Feature standardization from a dedicated class-balanced sample.
    let mut mean = vec![0.0f32; d];
    let mut std = vec![1.0f32; d];
    if config.standardization_samples > 0 {
        let per_batch = config.batch_size();
        let rounds = config.standardization_samples.div_ceil(per_batch);
        let mut sum = vec![0.0f64; d];
        let mut sum_sq = vec![0.0f64; d];
        let mut n = 0usize;
        for r in 0..rounds {
            let (raw, _) = sample_batch(set, config, augment, config.seed.derive("standardize", r as u64));
            for row in raw.chunks_exact(d) {
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v as f64;
                    sum_sq[i] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        for i in 0..d {
            let m = sum[i] / n as f64;
            mean[i] = m as f32;
            std[i] = (sum_sq[i] / n as f64 - m * m).max(0.0).sqrt().max(1e-3) as f32;
        }
    }

    let mut params = Params::init(d, config.hidden_width, &mut config.seed.stream("init"));
    let mut velocity = Params::zeros(d, config.hidden_width);
    let mut history = Vec::new();
    let mut window = 0.0;
    let mut last_loss = f64::NAN;
    for t in 0..config.iterations {
        let (raw, targets) = sample_batch(set, config, augment, config.seed.derive("batch", t as u64));
        let batch = Batch { dim: d, features: standardize(&raw, &mean, &std, d), targets };
        let (loss, grad) = params.loss_and_grad(&batch);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        let lr = learning_rate(config.learning_rate, t, config.iterations);
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grad.tensors())
        {
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = config.momentum * *vi - lr * gi;
                *pi += *vi;
            }
        }
        window += loss;
        last_loss = loss;
        if (t + 1) % config.log_every == 0 {
            history.push(window / config.log_every as f64);
            window = 0.0;
        }
    }
    let model = params.to_model(def, mean, std);
    model.check().map_err(|_| Error::NonFiniteLoss { iteration: config.iterations })?;
    let report = TrainReport {
        config: *config,
        augment: *augment,
        patches: set.len(),
        iterations_run: config.iterations,
        loss_history: history,
        final_loss: last_loss,
        dataset_sha256: None,
    };
    Ok((model, report))
}

/// Trains on every entry of a dataset manifest.
pub fn train(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<(SegModel, TrainReport)> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyInput("dataset manifest"));
    }
    let set = TrainingSet::new(manifest.load_all()?)?;
    let (model, mut report) = train_on(&set, config, augment)?;
    report.dataset_sha256 = Some(manifest.hash()?);
    Ok((model, report))
}

/// Sidecar written next to the binary weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub feature_def: FeatureDef,
    pub hidden_width: usize,
    pub weights_sha256: String,
    pub training: Option<TrainReport>,
}

/// Path of the JSON sidecar belonging to a weights file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    weights.with_file_name(name)
}

/// Writes weights and their sidecar; returns the weights hash.
pub fn save_model(path: &Path, model: &SegModel, report: Option<&TrainReport>) -> Result<String> {
    let bytes = model.to_bytes();
    let hash = sha256_hex(&bytes);
    write_atomic(path, &bytes)?;
    let sidecar = ModelSidecar {
        format: format!("SEGM v{SEGM_VERSION}"),
        feature_def: model.def,
        hidden_width: model.hidden,
        weights_sha256: hash.clone(),
        training: report.cloned(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    write_atomic(&sidecar_path(path), json.as_bytes())?;
    Ok(hash)
}

pub fn load_model(path: &Path) -> Result<SegModel> {
    SegModel::from_bytes(&read_bytes(path)?)
}
