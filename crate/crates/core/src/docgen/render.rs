//! Drawing primitives: textured paper, printed glyph rows and pen strokes.
//!
//! Ink is rendered hard-edged (no anti-aliasing) so that the label marks
//! exactly the pixels that received ink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::font::{self, GLYPHS, GLYPH_HEIGHT, GLYPH_WIDTH};
use crate::image::{Class, LabelImage, RgbRaster};

/// Pixels per font cell.
pub const GLYPH_SCALE: usize = 2;
/// Horizontal advance of one glyph, including spacing.
pub const GLYPH_ADVANCE: usize = GLYPH_WIDTH * GLYPH_SCALE + 2;
/// Vertical distance between printed baselines.
pub const LINE_PITCH: usize = GLYPH_HEIGHT * GLYPH_SCALE + 8;

const PAPER: [f32; 3] = [0.94, 0.91, 0.84];
const PRINTED_INK: [f32; 3] = [0.10, 0.09, 0.08];
const PEN_INK: [f32; 3] = [0.22, 0.30, 0.62];

pub(crate) struct Canvas {
    pub height: usize,
    pub width: usize,
    pub rgb: RgbRaster,
    pub label: LabelImage,
    /// Paper texture before any ink, in `[-1, 1]`.
    pub texture: Vec<f32>,
    printed_ink: [f32; 3],
    pen_ink: [f32; 3],
}

impl Canvas {
    pub fn new(height: usize, width: usize, texture_level: f64, rng: &mut ChaCha8Rng) -> Canvas {
        let tint: f32 = rng.random_range(-0.02..0.02);
        let paper = PAPER.map(|c| c + tint);
        let coarse = smooth_field(rng, height, width, 48);
        let fine = smooth_field(rng, height, width, 6);
        let amp = texture_level as f32;
        let mut texture = Vec::with_capacity(height * width);
        let mut rgb = RgbRaster::filled(height, width, paper);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let grain: f32 = rng.random_range(-1.0..1.0);
                let t = (0.6 * (2.0 * coarse[i] - 1.0) + 0.3 * (2.0 * fine[i] - 1.0) + 0.1 * grain)
                    .clamp(-1.0, 1.0);
                texture.push(t);
                let shade = 0.06 * amp * t;
                rgb.set(x, y, paper.map(|c| c + shade));
            }
        }
        let jitter = |base: [f32; 3], rng: &mut ChaCha8Rng| {
            let d: f32 = rng.random_range(-0.03..0.03);
            base.map(|c| c + d)
        };
        let printed_ink = jitter(PRINTED_INK, rng);
        let pen_ink = jitter(PEN_INK, rng);
        Canvas {
            height,
            width,
            rgb,
            label: LabelImage::background(height, width),
            texture,
            printed_ink,
            pen_ink,
        }
    }

    #[inline]
    fn ink(&mut self, x: i64, y: i64, class: Class) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        let base = match class {
            Class::Printed => self.printed_ink,
            _ => self.pen_ink,
        };
        // Ink absorbs a little paper texture so it is not perfectly flat.
        let t = self.texture[y * self.width + x];
        self.rgb.set(x, y, base.map(|c| c + 0.02 * t));
        self.label.set(x, y, class);
    }

    /// Draws one glyph with its top-left corner at `(x, y)`.
    pub fn glyph(&mut self, glyph: usize, x: i64, y: i64) {
        for row in 0..GLYPH_HEIGHT {
            for col in 0..GLYPH_WIDTH {
                if !font::is_set(glyph, col, row) {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        self.ink(
                            x + (col * GLYPH_SCALE + dx) as i64,
                            y + (row * GLYPH_SCALE + dy) as i64,
                            Class::Printed,
                        );
                    }
                }
            }
        }
    }

    /// Fills `[x0, x1)` starting at top `y` with random words; returns true if anything was drawn.
    pub fn printed_line(&mut self, rng: &mut ChaCha8Rng, x0: i64, x1: i64, y: i64) -> bool {
        let mut x = x0;
        let mut drawn = false;
        loop {
            let len = rng.random_range(2..=8) as i64;
            if x + len * GLYPH_ADVANCE as i64 > x1 {
                break;
            }
            for _ in 0..len {
                self.glyph(rng.random_range(0..GLYPHS.len()), x, y);
                x += GLYPH_ADVANCE as i64;
            }
            drawn = true;
            x += GLYPH_ADVANCE as i64;
        }
        drawn
    }

    /// A paragraph of printed lines inside the rectangle. Each line is set
    /// with probability `density`; the last line of the block is shortened.
    pub fn printed_block(
        &mut self,
        rng: &mut ChaCha8Rng,
        (x0, y0, x1, y1): (i64, i64, i64, i64),
        density: f64,
    ) {
        let mut y = y0;
        while y + (GLYPH_HEIGHT * GLYPH_SCALE) as i64 <= y1 {
            let last = y + (LINE_PITCH + GLYPH_HEIGHT * GLYPH_SCALE) as i64 > y1;
            if rng.random_bool(density) {
                let end = if last {
                    x0 + ((x1 - x0) as f64 * rng.random_range(0.3..1.0)) as i64
                } else {
                    x1
                };
                self.printed_line(rng, x0, end, y);
            }
            y += LINE_PITCH as i64;
        }
    }

    /// One handwritten word: a smooth wavy stroke from `(x, y)` rightwards.
    ///
    /// Control points oscillate around a slanted baseline; consecutive
    /// midpoints are joined by quadratic Bezier segments and a round pen is
    /// stamped along the curve.
    pub fn pen_word(&mut self, rng: &mut ChaCha8Rng, x: f64, y: f64, length: f64) {
        let amplitude = rng.random_range(5.0..11.0);
        let step = rng.random_range(6.0..10.0);
        let slope = rng.random_range(-0.12..0.12);
        let radius = rng.random_range(1.0..1.6);
        let n = ((length / step) as usize).max(3);
        let points: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let px = x + i as f64 * step + rng.random_range(-1.5..1.5);
                let up = if i % 2 == 0 { -1.0 } else { 1.0 };
                let py = y + slope * i as f64 * step + up * amplitude * rng.random_range(0.4..1.0);
                (px, py)
            })
            .collect();
        let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        let mut start = points[0];
        for i in 1..points.len() {
            let ctrl = points[i];
            let end = if i + 1 < points.len() {
                mid(points[i], points[i + 1])
            } else {
                points[i]
            };
            let chord = ((end.0 - start.0).powi(2) + (end.1 - start.1).powi(2)).sqrt()
                + ((ctrl.0 - start.0).powi(2) + (ctrl.1 - start.1).powi(2)).sqrt();
            let steps = (chord / 0.4).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let a = (1.0 - t) * (1.0 - t);
                let b = 2.0 * (1.0 - t) * t;
                let c = t * t;
                let px = a * start.0 + b * ctrl.0 + c * end.0;
                let py = a * start.1 + b * ctrl.1 + c * end.1;
                self.stamp(px, py, radius);
            }
            start = end;
        }
    }

    fn stamp(&mut self, cx: f64, cy: f64, radius: f64) {
        let r = radius.ceil() as i64;
        let (ix, iy) = (cx.floor() as i64, cy.floor() as i64);
        for y in iy - r..=iy + r + 1 {
            for x in ix - r..=ix + r + 1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    self.ink(x, y, Class::Handwritten);
                }
            }
        }
    }

    pub fn finish(mut self) -> (RgbRaster, LabelImage, Vec<f32>) {
        self.rgb.quantize_8bit();
        (self.rgb, self.label, self.texture)
    }
}

/// Bilinear value noise in `[0, 1]` with control points every `cell` pixels.
pub(crate) fn smooth_field(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    cell: usize,
) -> Vec<f32> {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = y as f32 / cell as f32;
        let y0 = fy as usize;
        let ty = fy - y0 as f32;
        for x in 0..width {
            let fx = x as f32 / cell as f32;
            let x0 = fx as usize;
            let tx = fx - x0 as f32;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}
