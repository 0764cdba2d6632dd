//! Deterministic procedural document generator.
//!
//! Produces document patches with exact ground-truth labels and a
//! multi-resolution [`FeatureStack`] per patch whose relationship to the
//! labels is known by construction. This stands in for a trained image
//! generator so that clustering and label fusion can be checked against
//! ground truth.

mod features;
pub mod font;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use features::{
    downsample_ink_priority, FeatureLayer, FeatureStack, DEFAULT_CHANNELS, LAYERS_PER_SIZE,
    LAYER_SIZES, NUM_LAYERS,
};
pub use render::{GLYPH_ADVANCE, GLYPH_SCALE, LINE_PITCH};

use crate::error::{Error, Result};
use crate::image::{LabelImage, RgbRaster};
use crate::rng::GenSeed;
use render::Canvas;

/// Side length of a generated patch.
pub const PATCH_SIZE: usize = 256;

/// Every ink pixel is at least this much darker (in grayscale) than the
/// paper it was drawn on.
pub const INK_CONTRAST_MARGIN: f32 = 0.35;

/// Probability that a patch shows only margin (no printed block).
const BLANK_PATCH_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Probability that each printed line slot carries text.
    pub printed_density: f64,
    /// Probability that a patch (or a margin-note slot of a page) carries handwriting.
    pub handwriting_probability: f64,
    /// Standard deviation of Gaussian noise added to every feature channel.
    pub feature_noise_sigma: f64,
    /// Strength of the paper texture.
    pub background_texture_level: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            printed_density: 0.7,
            handwriting_probability: 0.3,
            feature_noise_sigma: 0.05,
            background_texture_level: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} not in [0, 1]")))
            }
        };
        unit("printed_density", self.printed_density)?;
        unit("handwriting_probability", self.handwriting_probability)?;
        unit("background_texture_level", self.background_texture_level)?;
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(Error::param(
                "feature_noise_sigma",
                format!("{} must be a finite non-negative number", self.feature_noise_sigma),
            ));
        }
        Ok(())
    }
}

/// A generated patch: RGB image, ground truth, and the paper texture it was drawn on.
pub struct RenderedPatch {
    pub image: RgbRaster,
    pub label: LabelImage,
    texture: Vec<f32>,
}

/// Renders a 256×256 patch without building its feature stack.
pub fn render_patch(seed: GenSeed, config: &GenConfig) -> Result<RenderedPatch> {
    config.validate()?;
    let mut paper_rng = seed.stream("paper");
    let mut canvas = Canvas::new(
        PATCH_SIZE,
        PATCH_SIZE,
        config.background_texture_level,
        &mut paper_rng,
    );

    let mut layout = seed.stream("layout");
    if config.printed_density > 0.0 && !layout.random_bool(BLANK_PATCH_PROBABILITY) {
        let y0 = layout.random_range(-40..100);
        let y1 = (y0 + layout.random_range(90..300)).min(PATCH_SIZE as i64 + 20);
        let x0 = layout.random_range(-30..60);
        let x1 = layout.random_range(180..290);
        canvas.printed_block(&mut layout, (x0, y0, x1, y1), config.printed_density);
    }

    let mut pen = seed.stream("pen");
    if pen.random_bool(config.handwriting_probability) {
        let words = pen.random_range(1..=3);
        for _ in 0..words {
            let x = pen.random_range(10.0..150.0);
            let y = pen.random_range(30.0..226.0);
            let length = pen.random_range(50.0..120.0);
            canvas.pen_word(&mut pen, x, y, length);
        }
    }

    let (image, label, texture) = canvas.finish();
    Ok(RenderedPatch {
        image,
        label,
        texture,
    })
}

impl RenderedPatch {
    /// Builds the feature stack for this patch.
    pub fn features(&self, seed: GenSeed, config: &GenConfig) -> FeatureStack {
        features::build_stack(seed, config, &self.label, &self.texture)
    }

    /// Paper texture in `[-1, 1]`, before ink.
    pub fn texture(&self) -> &[f32] {
        &self.texture
    }
}

/// Generates one 256×256 patch, its label and its feature stack.
pub fn generate_patch(
    seed: GenSeed,
    config: &GenConfig,
) -> Result<(RgbRaster, LabelImage, FeatureStack)> {
    let patch = render_patch(seed, config)?;
    let stack = patch.features(seed, config);
    Ok((patch.image, patch.label, stack))
}

/// Renders a full page: printed paragraphs in a main column and
/// handwritten notes in the margins and between lines.
pub fn generate_document(
    seed: GenSeed,
    config: &GenConfig,
    height: usize,
    width: usize,
) -> Result<(RgbRaster, LabelImage)> {
    config.validate()?;
    if height < PATCH_SIZE || width < PATCH_SIZE {
        return Err(Error::param(
            "dimensions",
            format!("{height}x{width} is smaller than {PATCH_SIZE}x{PATCH_SIZE}"),
        ));
    }
    let mut paper_rng = seed.stream("doc-paper");
    let mut canvas = Canvas::new(height, width, config.background_texture_level, &mut paper_rng);
    let (h, w) = (height as i64, width as i64);

    let mut layout = seed.stream("doc-layout");
    let left = w * 8 / 100;
    let right = w - w * 22 / 100;
    let top = h * 6 / 100;
    let bottom = h - h * 6 / 100;
    let mut paragraph_bottoms = Vec::new();
    if config.printed_density > 0.0 {
        let mut y = top;
        while y < bottom - LINE_PITCH as i64 {
            let lines = layout.random_range(2..=7) as i64;
            let y1 = (y + lines * LINE_PITCH as i64).min(bottom);
            let indent = if layout.random_bool(0.5) { 2 * GLYPH_ADVANCE as i64 } else { 0 };
            canvas.printed_block(&mut layout, (left + indent, y, right, y1), config.printed_density);
            paragraph_bottoms.push(y1);
            y = y1 + layout.random_range(1..=2) as i64 * LINE_PITCH as i64;
        }
    }

    let mut pen = seed.stream("doc-pen");
    // One note slot per 96 px of margin height, plus interlinear slots.
    let slots = (height / 96).max(1);
    for s in 0..slots {
        if pen.random_bool(config.handwriting_probability) {
            let x = pen.random_range((right + 8) as f64..(w - 60).max(right + 9) as f64);
            let y = (s as f64 + pen.random_range(0.2..0.8)) * 96.0;
            let length = pen.random_range(40.0..(w - right) as f64 - 10.0).max(40.0);
            canvas.pen_word(&mut pen, x, y.min(h as f64 - 12.0), length);
        }
    }
    for &py in &paragraph_bottoms {
        if pen.random_bool(config.handwriting_probability * 0.5) {
            let x = pen.random_range(left as f64..(right - 120) as f64);
            let length = pen.random_range(60.0..140.0);
            canvas.pen_word(&mut pen, x, py as f64 + 4.0, length);
        }
    }

    let (image, label, _) = canvas.finish();
    Ok((image, label))
}
