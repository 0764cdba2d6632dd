//! Multi-resolution feature stacks standing in for generator activations,
//! and their binary file format.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::render::smooth_field;
use super::GenConfig;
use crate::error::{Error, Result};
use crate::image::LabelImage;
use crate::rng::GenSeed;

/// Layer sizes, ascending. Two layers are emitted per size.
pub const LAYER_SIZES: [usize; 4] = [32, 64, 128, 256];
pub const LAYERS_PER_SIZE: usize = 2;
pub const NUM_LAYERS: usize = LAYER_SIZES.len() * LAYERS_PER_SIZE;
/// Channels per layer: three class-linked, five nuisance.
pub const DEFAULT_CHANNELS: usize = 8;
const SIGNAL_CHANNELS: usize = 3;
const NUISANCE_AMPLITUDE: f32 = 0.15;

const MAGIC: &[u8; 4] = b"FSTK";
const VERSION: u16 = 1;

/// One layer: `channels` planes of `size`×`size` values, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    size: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureLayer {
    pub fn new(size: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * channels {
            return Err(Error::dims(size * size * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("data", "feature values must be finite"));
        }
        Ok(Self {
            size,
            channels,
            data,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.size * self.size
    }

    /// Plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    /// Gathers the feature vector of pixel index `i` (row-major) into `out`.
    #[inline]
    pub fn pixel_into(&self, i: usize, out: &mut [f32]) {
        let n = self.pixel_count();
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = self.data[c * n + i];
        }
    }

    pub fn pixel(&self, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.channels];
        self.pixel_into(i, &mut v);
        v
    }
}

/// The eight feature layers of one generated patch (two per size, ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    layers: Vec<FeatureLayer>,
}

impl FeatureStack {
    pub fn new(layers: Vec<FeatureLayer>) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(Error::Format {
                format: "feature stack",
                reason: format!("expected {NUM_LAYERS} layers, got {}", layers.len()),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            let want = LAYER_SIZES[i / LAYERS_PER_SIZE];
            if l.size != want {
                return Err(Error::Format {
                    format: "feature stack",
                    reason: format!("layer {i} has size {}, expected {want}", l.size),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[FeatureLayer] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> &FeatureLayer {
        &self.layers[id]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.layers.iter().map(|l| 4 + 4 * l.data.len()).sum();
        let mut out = Vec::with_capacity(8 + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.size as u16).to_le_bytes());
            out.extend_from_slice(&(l.channels as u16).to_le_bytes());
            for v in &l.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            format: "FSTK",
            reason: reason.to_string(),
        };
        let mut cur = Reader { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u16().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = cur.u16().ok_or_else(|| bad("truncated header"))? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let size = cur.u16().ok_or_else(|| bad("truncated layer header"))? as usize;
            let channels = cur.u16().ok_or_else(|| bad("truncated layer header"))? as usize;
            let n = size * size * channels;
            let raw = cur.take(4 * n).ok_or_else(|| bad("truncated layer data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            layers.push(FeatureLayer::new(size, channels, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        FeatureStack::new(layers)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Per-block class fractions `[background, printed, handwritten]` at `size`×`size`.
pub(crate) fn block_fractions(label: &LabelImage, size: usize) -> Vec<[f32; 3]> {
    let f = label.height() / size;
    let norm = 1.0 / (f * f) as f32;
    let mut out = vec![[0.0f32; 3]; size * size];
    for y in 0..label.height() {
        for x in 0..label.width() {
            out[(y / f) * size + x / f][label.get(x, y) as usize] += norm;
        }
    }
    out
}

/// Downsamples a label so that any block containing ink takes the text class
/// with the most pixels in it (printed on ties); ink-free blocks are background.
pub fn downsample_ink_priority(label: &LabelImage, size: usize) -> Result<LabelImage> {
    crate::image::integer_factors(size, size, label.height(), label.width())?;
    let classes = block_fractions(label, size)
        .into_iter()
        .map(|[_, p, h]| {
            if p == 0.0 && h == 0.0 {
                0
            } else if h > p {
                2
            } else {
                1
            }
        })
        .collect();
    LabelImage::new(size, size, classes)
}

/// Builds the eight layers for a rendered 256×256 patch.
///
/// * 256 layers: ink location (any class) plus texture; no class identity.
/// * 64/128 layers: block class fractions, text channels scaled by the block
///   area so any ink in a block outweighs its background share.
/// * 32 layers: coarse text density only.
///
/// Channels 3..8 are nuisance: the paper texture and smooth random fields.
/// Gaussian noise of `feature_noise_sigma` is added to every channel.
pub(crate) fn build_stack(
    seed: GenSeed,
    config: &GenConfig,
    label: &LabelImage,
    texture: &[f32],
) -> FeatureStack {
    let full = label.height();
    let ink: Vec<f32> = label
        .classes()
        .iter()
        .map(|&c| if c != 0 { 1.0 } else { 0.0 })
        .collect();
    let mut layers = Vec::with_capacity(NUM_LAYERS);
    for (level, &size) in LAYER_SIZES.iter().enumerate() {
        let fractions = block_fractions(label, size);
        let gain = ((full / size) * (full / size)) as f32;
        let tex = downsample_plane(texture, full, size);
        for variant in 0..LAYERS_PER_SIZE {
            let layer_id = level * LAYERS_PER_SIZE + variant;
            let mut rng = seed.indexed_stream("features", layer_id as u64);
            let n = size * size;
            let mut data = vec![0.0f32; DEFAULT_CHANNELS * n];
            let (signal, nuisance) = data.split_at_mut(SIGNAL_CHANNELS * n);
            match size {
                256 => structural_channels(signal, &ink, size, variant),
                32 => layout_channels(signal, &fractions, size, variant),
                _ => semantic_channels(signal, &fractions, gain, variant),
            }
            nuisance_channels(nuisance, &tex, size, config.background_texture_level, &mut rng);
            if config.feature_noise_sigma > 0.0 {
                let normal = Normal::new(0.0, config.feature_noise_sigma as f32)
                    .expect("sigma validated non-negative");
                for v in data.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            layers.push(FeatureLayer {
                size,
                channels: DEFAULT_CHANNELS,
                data,
            });
        }
    }
    FeatureStack { layers }
}

fn structural_channels(out: &mut [f32], ink: &[f32], size: usize, variant: usize) {
    let n = size * size;
    let at = |x: i64, y: i64| -> f32 {
        if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
            0.0
        } else {
            ink[y as usize * size + x as usize]
        }
    };
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let m = ink[i];
            let (xi, yi) = (x as i64, y as i64);
            if variant == 0 {
                let mut density = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        density += at(xi + dx, yi + dy);
                    }
                }
                out[i] = m;
                out[n + i] = 1.0 - m;
                out[2 * n + i] = density / 9.0;
            } else {
                let interior = at(xi - 1, yi) * at(xi + 1, yi) * at(xi, yi - 1) * at(xi, yi + 1);
                out[i] = 0.8 * m;
                out[n + i] = 0.8 * (1.0 - m);
                out[2 * n + i] = m * (1.0 - interior);
            }
        }
    }
}

fn semantic_channels(out: &mut [f32], fractions: &[[f32; 3]], gain: f32, variant: usize) {
    let n = fractions.len();
    for (i, &[bg, printed, hand]) in fractions.iter().enumerate() {
        if variant == 0 {
            out[i] = bg;
            out[n + i] = gain * printed;
            out[2 * n + i] = gain * hand;
        } else {
            out[i] = 0.5 * bg;
            out[n + i] = (gain * printed).sqrt();
            out[2 * n + i] = (gain * hand).sqrt();
        }
    }
}

fn layout_channels(out: &mut [f32], fractions: &[[f32; 3]], size: usize, variant: usize) {
    let n = size * size;
    let density: Vec<f32> = fractions.iter().map(|f| f[1] + f[2]).collect();
    let scale = if variant == 0 { 1.0 } else { 0.7 };
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let lo = x.saturating_sub(2);
            let hi = (x + 2).min(size - 1);
            let row: f32 = (lo..=hi).map(|xx| density[y * size + xx]).sum::<f32>()
                / (hi - lo + 1) as f32;
            out[i] = scale * density[i];
            out[n + i] = scale * (1.0 - density[i]);
            out[2 * n + i] = scale * row;
        }
    }
}

fn nuisance_channels(
    out: &mut [f32],
    tex: &[f32],
    size: usize,
    texture_level: f64,
    rng: &mut ChaCha8Rng,
) {
    let n = size * size;
    let level = texture_level as f32;
    for (i, v) in out[..n].iter_mut().enumerate() {
        *v = NUISANCE_AMPLITUDE * level * tex[i];
    }
    for c in 1..out.len() / n {
        let cell = rng.random_range(4..=16).min(size);
        let field = smooth_field(rng, size, size, cell);
        for (v, f) in out[c * n..(c + 1) * n].iter_mut().zip(field) {
            *v = NUISANCE_AMPLITUDE * f;
        }
    }
}

fn downsample_plane(plane: &[f32], full: usize, size: usize) -> Vec<f32> {
    let f = full / size;
    let norm = 1.0 / (f * f) as f32;
    let mut out = vec![0.0f32; size * size];
    for y in 0..full {
        for x in 0..full {
            out[(y / f) * size + x / f] += plane[y * full + x] * norm;
        }
    }
    out
}
