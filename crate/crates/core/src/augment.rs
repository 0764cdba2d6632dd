//! Paired image/label augmentation.
//!
//! One geometric transform (crop, shear, shift, elastic distortion, rotation)
//! is sampled per call and applied to both image (bilinear) and label
//! (nearest). Contrast and inversion touch only the image. Pixels mapped from
//! outside the canvas are filled with paper white and background.
//!
//! [`AugmentPlan`] exposes the transform per output pixel so training can
//! evaluate just the pixels it samples instead of warping whole patches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelImage, Raster};
use crate::rng::GenSeed;

/// Intensity used for pixels mapped from outside the canvas.
pub const FILL_INTENSITY: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_probability: f64,
    pub shear_probability: f64,
    pub shift_probability: f64,
    pub distortion_probability: f64,
    pub rotation_probability: f64,
    pub contrast_probability: f64,
    pub inversion_probability: f64,
    /// Smallest kept side fraction of a crop (resized back to full size).
    pub crop_min_scale: f64,
    /// Maximum absolute shear coefficient.
    pub max_shear: f64,
    /// Maximum shift as a fraction of the side length.
    pub max_shift: f64,
    /// Maximum displacement of an elastic grid node, in pixels.
    pub max_distortion: f64,
    /// Nodes per side of the elastic displacement grid.
    pub distortion_grid: usize,
    /// Maximum absolute rotation in degrees.
    pub max_rotation_degrees: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_probability: 0.5,
            shear_probability: 0.5,
            shift_probability: 0.5,
            distortion_probability: 0.5,
            rotation_probability: 0.5,
            contrast_probability: 0.5,
            inversion_probability: 0.2,
            crop_min_scale: 0.85,
            max_shear: 0.1,
            max_shift: 0.08,
            max_distortion: 3.0,
            distortion_grid: 4,
            max_rotation_degrees: 10.0,
            contrast_min: 0.7,
            contrast_max: 1.3,
        }
    }
}

impl AugmentConfig {
    /// A configuration that never changes anything.
    pub fn disabled() -> Self {
        Self {
            crop_probability: 0.0,
            shear_probability: 0.0,
            shift_probability: 0.0,
            distortion_probability: 0.0,
            rotation_probability: 0.0,
            contrast_probability: 0.0,
            inversion_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("crop_probability", self.crop_probability),
            ("shear_probability", self.shear_probability),
            ("shift_probability", self.shift_probability),
            ("distortion_probability", self.distortion_probability),
            ("rotation_probability", self.rotation_probability),
            ("contrast_probability", self.contrast_probability),
            ("inversion_probability", self.inversion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(name, format!("{p} not in [0, 1]")));
            }
        }
        if !(self.crop_min_scale > 0.0 && self.crop_min_scale <= 1.0) {
            return Err(Error::param("crop_min_scale", "must be in (0, 1]"));
        }
        for (name, v) in [
            ("max_shear", self.max_shear),
            ("max_shift", self.max_shift),
            ("max_distortion", self.max_distortion),
            ("max_rotation_degrees", self.max_rotation_degrees),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be finite and non-negative"));
            }
        }
        if self.distortion_grid < 2 {
            return Err(Error::param("distortion_grid", "needs at least 2 nodes per side"));
        }
        if !(self.contrast_min > 0.0 && self.contrast_min <= self.contrast_max) {
            return Err(Error::param("contrast_min", "need 0 < contrast_min <= contrast_max"));
        }
        Ok(())
    }
}

/// Elastic displacement field on a coarse grid, bilinearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct Distortion {
    /// Nodes per side.
    pub grid: usize,
    /// Row-major node displacements `[dx, dy]` in pixels.
    pub nodes: Vec<[f64; 2]>,
}

impl Distortion {
    fn displacement(&self, u: f64, v: f64, height: usize, width: usize) -> [f64; 2] {
        let g = self.grid;
        let gx = (u / (width.max(2) - 1) as f64 * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
        let gy = (v / (height.max(2) - 1) as f64 * (g - 1) as f64).clamp(0.0, (g - 1) as f64);
        let (x0, y0) = ((gx as usize).min(g - 2), (gy as usize).min(g - 2));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let n = |x: usize, y: usize| self.nodes[y * g + x];
        let mut d = [0.0; 2];
        for (k, dk) in d.iter_mut().enumerate() {
            let top = n(x0, y0)[k] * (1.0 - fx) + n(x0 + 1, y0)[k] * fx;
            let bottom = n(x0, y0 + 1)[k] * (1.0 - fx) + n(x0 + 1, y0 + 1)[k] * fx;
            *dk = top * (1.0 - fy) + bottom * fy;
        }
        d
    }
}

/// One sampled augmentation. Fields are public so callers can build exact
/// transforms (for example a pure rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub height: usize,
    pub width: usize,
    /// Kept side fraction and top-left corner (as a fraction of the free margin).
    pub crop: Option<(f64, f64, f64)>,
    /// Shear coefficients along x and y.
    pub shear: (f64, f64),
    /// Shift in pixels.
    pub shift: (f64, f64),
    pub distortion: Option<Distortion>,
    /// Rotation in radians, about the image center.
    pub rotation: f64,
    pub contrast: Option<f64>,
    pub invert: bool,
}

impl AugmentPlan {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            crop: None,
            shear: (0.0, 0.0),
            shift: (0.0, 0.0),
            distortion: None,
            rotation: 0.0,
            contrast: None,
            invert: false,
        }
    }

    /// A pure rotation by `radians`.
    pub fn rotation(height: usize, width: usize, radians: f64) -> Self {
        Self { rotation: radians, ..Self::identity(height, width) }
    }

    /// Samples a plan; each operation is drawn independently.
    pub fn sample(seed: GenSeed, config: &AugmentConfig, height: usize, width: usize) -> Self {
        let mut rng = seed.stream("augment");
        Self::sample_with(&mut rng, config, height, width)
    }

    pub fn sample_with(
        rng: &mut ChaCha8Rng,
        c: &AugmentConfig,
        height: usize,
        width: usize,
    ) -> Self {
        let mut plan = Self::identity(height, width);
        // Every draw happens regardless of the coin so plans stay aligned across configs.
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let on = [
            rng.random_bool(c.crop_probability),
            rng.random_bool(c.shear_probability),
            rng.random_bool(c.shift_probability),
            rng.random_bool(c.distortion_probability),
            rng.random_bool(c.rotation_probability),
            rng.random_bool(c.contrast_probability),
            rng.random_bool(c.inversion_probability),
        ];
        let crop = (
            rng.random_range(c.crop_min_scale..=1.0),
            rng.random::<f64>(),
            rng.random::<f64>(),
        );
        let shear = (sym(rng, c.max_shear), sym(rng, c.max_shear));
        let shift = (
            sym(rng, c.max_shift) * width as f64,
            sym(rng, c.max_shift) * height as f64,
        );
        let nodes: Vec<[f64; 2]> = (0..c.distortion_grid * c.distortion_grid)
            .map(|_| [sym(rng, c.max_distortion), sym(rng, c.max_distortion)])
            .collect();
        let rotation = sym(rng, c.max_rotation_degrees).to_radians();
        let gain = rng.random_range(c.contrast_min..=c.contrast_max);

        if on[0] {
            plan.crop = Some(crop);
        }
        if on[1] {
            plan.shear = shear;
        }
        if on[2] {
            plan.shift = shift;
        }
        if on[3] {
            plan.distortion = Some(Distortion { grid: c.distortion_grid, nodes });
        }
        if on[4] {
            plan.rotation = rotation;
        }
        if on[5] {
            plan.contrast = Some(gain);
        }
        plan.invert = on[6];
        plan
    }

    pub fn is_geometric(&self) -> bool {
        self.crop.is_some()
            || self.shear != (0.0, 0.0)
            || self.shift != (0.0, 0.0)
            || self.distortion.is_some()
            || self.rotation != 0.0
    }

    /// Affine part, as the map from (distorted) output to source coordinates.
    fn affine(&self) -> [f64; 6] {
        let (h, w) = (self.height as f64, self.width as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        // Crop: output (u, v) -> crop window coordinates.
        let (s, ox, oy) = match self.crop {
            Some((s, fx, fy)) => (s, fx * (1.0 - s) * (w - 1.0), fy * (1.0 - s) * (h - 1.0)),
            None => (1.0, 0.0, 0.0),
        };
        let (sin, cos) = self.rotation.sin_cos();
        let (kx, ky) = self.shear;
        // Rotation then shear, about the center.
        let m = [cos + kx * sin, -sin + kx * cos, ky * cos + sin, -ky * sin + cos];
        // p = m · (s·q + o − c) + c − shift
        let tx = m[0] * (ox - cx) + m[1] * (oy - cy) + cx - self.shift.0;
        let ty = m[2] * (ox - cx) + m[3] * (oy - cy) + cy - self.shift.1;
        [m[0] * s, m[1] * s, tx, m[2] * s, m[3] * s, ty]
    }

    /// Prepares the per-pixel source-coordinate map.
    pub fn mapper(&self) -> Mapper<'_> {
        Mapper { plan: self, a: self.affine(), identity: !self.is_geometric() }
    }

    /// Applies the intensity operations to one value.
    #[inline]
    pub fn intensity(&self, v: f32) -> f32 {
        let mut v = v;
        if let Some(g) = self.contrast {
            v = (0.5 + g as f32 * (v - 0.5)).clamp(0.0, 1.0);
        }
        if self.invert {
            v = 1.0 - v;
        }
        v
    }

    /// Augmented image value at output pixel `(u, v)`.
    pub fn image_at(&self, mapper: &Mapper, image: &Raster, u: usize, v: usize) -> f32 {
        let (sx, sy) = mapper.source(u as f64, v as f64);
        self.intensity(bilinear(image, sx, sy))
    }

    /// Augmented class id at output pixel `(u, v)`.
    pub fn label_at(&self, mapper: &Mapper, label: &LabelImage, u: usize, v: usize) -> u8 {
        let (sx, sy) = mapper.source(u as f64, v as f64);
        nearest(label, sx, sy)
    }

    pub fn apply_image(&self, image: &Raster) -> Result<Raster> {
        self.check(image.height(), image.width())?;
        let mapper = self.mapper();
        Ok(Raster::from_fn(self.height, self.width, |x, y| {
            self.image_at(&mapper, image, x, y)
        }))
    }

    pub fn apply_label(&self, label: &LabelImage) -> Result<LabelImage> {
        self.check(label.height(), label.width())?;
        if !self.is_geometric() {
            return Ok(label.clone());
        }
        let mapper = self.mapper();
        let mut classes = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                classes.push(self.label_at(&mapper, label, x, y));
            }
        }
        LabelImage::new(self.height, self.width, classes)
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if (height, width) != (self.height, self.width) {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{height}x{width}"),
            ));
        }
        Ok(())
    }
}

/// Output-to-source coordinate map of a plan.
pub struct Mapper<'a> {
    plan: &'a AugmentPlan,
    a: [f64; 6],
    identity: bool,
}

impl Mapper<'_> {
    #[inline]
    pub fn source(&self, u: f64, v: f64) -> (f64, f64) {
        if self.identity {
            return (u, v);
        }
        let (mut u, mut v) = (u, v);
        if let Some(d) = &self.plan.distortion {
            let [dx, dy] = d.displacement(u, v, self.plan.height, self.plan.width);
            u += dx;
            v += dy;
        }
        let a = &self.a;
        (a[0] * u + a[1] * v + a[2], a[3] * u + a[4] * v + a[5])
    }

    /// Output position whose affine image is `(sx, sy)`, ignoring the
    /// elastic distortion (which moves points by at most its node amplitude).
    pub fn approx_forward(&self, sx: f64, sy: f64) -> (f64, f64) {
        if self.identity {
            return (sx, sy);
        }
        let a = &self.a;
        let (bx, by) = (sx - a[2], sy - a[5]);
        let det = a[0] * a[4] - a[1] * a[3];
        ((a[4] * bx - a[1] * by) / det, (a[0] * by - a[3] * bx) / det)
    }
}

/// Bilinear sample; neighbors outside the canvas read as [`FILL_INTENSITY`].
#[inline]
pub fn bilinear(image: &Raster, x: f64, y: f64) -> f32 {
    let (h, w) = (image.height() as i64, image.width() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            FILL_INTENSITY
        } else {
            image.values()[(y * w + x) as usize]
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
}

/// Nearest-neighbor class lookup; outside the canvas is background.
#[inline]
pub fn nearest(label: &LabelImage, x: f64, y: f64) -> u8 {
    let (xi, yi) = (x.round(), y.round());
    if xi < 0.0 || yi < 0.0 || xi >= label.width() as f64 || yi >= label.height() as f64 {
        return 0;
    }
    label.get(xi as usize, yi as usize)
}

/// Augments an image/label pair with a plan sampled from `seed`.
pub fn augment(
    image: &Raster,
    label: &LabelImage,
    seed: GenSeed,
    config: &AugmentConfig,
) -> Result<(Raster, LabelImage)> {
    config.validate()?;
    if (image.height(), image.width()) != (label.height(), label.width()) {
        return Err(Error::dims(
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", label.height(), label.width()),
        ));
    }
    let plan = AugmentPlan::sample(seed, config, image.height(), image.width());
    Ok((plan.apply_image(image)?, plan.apply_label(label)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_pair(seed: u64, size: usize) -> (Raster, LabelImage) {
        let mut rng = GenSeed(seed).stream("test");
        let image = Raster::from_fn(size, size, |_, _| rng.random::<f32>());
        let classes = (0..size * size).map(|_| rng.random_range(0..3u8)).collect();
        (image, LabelImage::new(size, size, classes).unwrap())
    }

    #[test]
    fn disabled_config_is_identity() {
        let (img, lab) = random_pair(1, 32);
        for s in 0..20 {
            let (a, b) = augment(&img, &lab, GenSeed(s), &AugmentConfig::disabled()).unwrap();
            assert_eq!(a, img);
            assert_eq!(b, lab);
        }
    }

    #[test]
    fn inversion_only_flips_image_and_keeps_label() {
        let (img, lab) = random_pair(2, 32);
        let cfg = AugmentConfig { inversion_probability: 1.0, ..AugmentConfig::disabled() };
        let (a, b) = augment(&img, &lab, GenSeed(0), &cfg).unwrap();
        for (x, y) in a.values().iter().zip(img.values()) {
            assert!((x - (1.0 - y)).abs() < 1e-6);
        }
        assert_eq!(b, lab);
    }

    #[test]
    fn contrast_follows_gain_formula() {
        let plan = AugmentPlan { contrast: Some(1.2), ..AugmentPlan::identity(4, 4) };
        assert!((plan.intensity(0.75) - 0.8).abs() < 1e-6);
        assert_eq!(plan.intensity(0.0), 0.0);
    }

    #[test]
    fn shift_moves_content_and_fills_edges() {
        let (img, lab) = random_pair(3, 16);
        let plan = AugmentPlan { shift: (3.0, -2.0), ..AugmentPlan::identity(16, 16) };
        let a = plan.apply_image(&img).unwrap();
        let b = plan.apply_label(&lab).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (sx, sy) = (x as i64 - 3, y as i64 + 2);
                if (0..16).contains(&sx) && (0..16).contains(&sy) {
                    assert_eq!(a.get(x, y), img.get(sx as usize, sy as usize));
                    assert_eq!(b.get(x, y), lab.get(sx as usize, sy as usize));
                } else {
                    assert_eq!(a.get(x, y), FILL_INTENSITY);
                    assert_eq!(b.get(x, y), 0);
                }
            }
        }
    }

    #[test]
    fn rotation_round_trip_keeps_labels_inside_the_disk() {
        let size = 128;
        let c = (size as f64 - 1.0) / 2.0;
        let (_, lab) = random_pair(4, size);
        // Blocky content so nearest-neighbor resampling is meaningful.
        let blocky = LabelImage::new(
            size,
            size,
            (0..size * size)
                .map(|i| {
                    let (x, y) = (i % size, i / size);
                    let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    if r > c - 2.0 { 0 } else { lab.get(x / 8, y / 8) }
                })
                .collect(),
        )
        .unwrap();
        let mut rng = GenSeed(5).stream("angles");
        for _ in 0..10 {
            let theta = rng.random_range(-10.0f64..10.0).to_radians();
            let there = AugmentPlan::rotation(size, size, theta).apply_label(&blocky).unwrap();
            let back = AugmentPlan::rotation(size, size, -theta).apply_label(&there).unwrap();
            let same = back
                .classes()
                .iter()
                .zip(blocky.classes())
                .filter(|(a, b)| a == b)
                .count();
            assert!(same as f64 / (size * size) as f64 >= 0.98, "theta {theta}: {same}");
        }
    }

    #[test]
    fn lazy_access_matches_full_warp() {
        let (img, lab) = random_pair(6, 48);
        let cfg = AugmentConfig {
            crop_probability: 1.0,
            shear_probability: 1.0,
            shift_probability: 1.0,
            distortion_probability: 1.0,
            rotation_probability: 1.0,
            contrast_probability: 1.0,
            inversion_probability: 1.0,
            ..AugmentConfig::default()
        };
        let plan = AugmentPlan::sample(GenSeed(7), &cfg, 48, 48);
        let (a, b) = (plan.apply_image(&img).unwrap(), plan.apply_label(&lab).unwrap());
        let m = plan.mapper();
        for (x, y) in [(0, 0), (47, 3), (20, 31), (47, 47)] {
            assert_eq!(plan.image_at(&m, &img, x, y), a.get(x, y));
            assert_eq!(plan.label_at(&m, &lab, x, y), b.get(x, y));
        }
    }

    #[test]
    fn approx_forward_inverts_the_affine_part() {
        let cfg = AugmentConfig { distortion_probability: 0.0, ..AugmentConfig::default() };
        for s in 0..20 {
            let plan = AugmentPlan::sample(GenSeed(s), &cfg, 64, 64);
            let m = plan.mapper();
            let (sx, sy) = m.source(10.0, 50.0);
            let (u, v) = m.approx_forward(sx, sy);
            assert!((u - 10.0).abs() < 1e-9 && (v - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (img, _) = random_pair(8, 16);
        let lab = LabelImage::background(16, 8);
        assert!(augment(&img, &lab, GenSeed(0), &AugmentConfig::default()).is_err());
        let bad = AugmentConfig { inversion_probability: 2.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range_and_deterministic(seed in 0u64..1000) {
            let (img, lab) = random_pair(seed, 24);
            let cfg = AugmentConfig::default();
            let (a, b) = augment(&img, &lab, GenSeed(seed), &cfg).unwrap();
            prop_assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(b.classes().iter().all(|&c| c < 3));
            let (a2, b2) = augment(&img, &lab, GenSeed(seed), &cfg).unwrap();
            prop_assert_eq!(a, a2);
            prop_assert_eq!(b, b2);
        }

        #[test]
        fn intensity_only_paths_keep_label(seed in 0u64..1000) {
            let (img, lab) = random_pair(seed, 16);
            let cfg = AugmentConfig {
                contrast_probability: 0.5,
                inversion_probability: 0.5,
                ..AugmentConfig::disabled()
            };
            let (_, b) = augment(&img, &lab, GenSeed(seed), &cfg).unwrap();
            prop_assert_eq!(b, lab);
        }
    }
}
