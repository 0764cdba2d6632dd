//! Raster types shared by every stage, plus the few resamplers the pipeline
//! needs.
//!
//! Storage is row-major with a top-left origin and y pointing down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of pixel classes.
pub const NUM_CLASSES: usize = 3;

/// Pixel class of a label image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Printed = 1,
    Handwritten = 2,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Background, Class::Printed, Class::Handwritten];

    pub fn from_id(id: u8) -> Option<Class> {
        match id {
            0 => Some(Class::Background),
            1 => Some(Class::Printed),
            2 => Some(Class::Handwritten),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn is_text(self) -> bool {
        self != Class::Background
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Printed => "printed",
            Class::Handwritten => "handwritten",
        }
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dims(height * width, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("values", format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            values: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    /// Builds a raster from a closure, clamping every value into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Copy of the `h`×`w` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, h: usize, w: usize) -> Result<Raster> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::dims(
                format!("window within {}x{}", self.height, self.width),
                format!("{h}x{w} at ({x}, {y})"),
            ));
        }
        let mut values = Vec::with_capacity(h * w);
        for row in y..y + h {
            values.extend_from_slice(&self.values[row * self.width + x..row * self.width + x + w]);
        }
        Ok(Raster {
            height: h,
            width: w,
            values,
        })
    }
}

/// RGB image, three channels per pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RgbRaster {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != 3 * height * width {
            return Err(Error::dims(3 * height * width, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("values", format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut values = Vec::with_capacity(3 * height * width);
        for _ in 0..height * width {
            values.extend(rgb.iter().map(|c| c.clamp(0.0, 1.0)));
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        for c in 0..3 {
            self.values[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Round every channel to the nearest multiple of 1/255, so the raster
    /// survives an 8-bit PNG round trip unchanged.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.values {
            *v = (*v * 255.0).round() / 255.0;
        }
    }
}

/// Per-pixel class ids in `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelImage {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl LabelImage {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::dims(height * width, classes.len()));
        }
        if let Some(c) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::param("classes", format!("class id {c} not in {{0,1,2}}")));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            classes: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: Class) {
        self.classes[y * self.width + x] = class.id();
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &c in &self.classes {
            h[c as usize] += 1;
        }
        h
    }

    pub fn text_pixels(&self) -> usize {
        self.classes.iter().filter(|&&c| c != 0).count()
    }

    pub fn upsample_nearest(&self, height: usize, width: usize) -> Result<LabelImage> {
        let classes = upsample_nearest(&self.classes, self.height, self.width, height, width)?;
        Ok(LabelImage {
            height,
            width,
            classes,
        })
    }

    /// Block-majority downsampling; ties go to the lowest class id.
    pub fn downsample_majority(&self, height: usize, width: usize) -> Result<LabelImage> {
        let (fy, fx) = integer_factors(height, width, self.height, self.width)?;
        let mut classes = Vec::with_capacity(height * width);
        for by in 0..height {
            for bx in 0..width {
                let mut counts = [0usize; NUM_CLASSES];
                for y in by * fy..(by + 1) * fy {
                    for x in bx * fx..(bx + 1) * fx {
                        counts[self.get(x, y) as usize] += 1;
                    }
                }
                classes.push(argmax_first(&counts) as u8);
            }
        }
        Ok(LabelImage {
            height,
            width,
            classes,
        })
    }

    pub fn crop(&self, x: usize, y: usize, h: usize, w: usize) -> Result<LabelImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::dims(
                format!("window within {}x{}", self.height, self.width),
                format!("{h}x{w} at ({x}, {y})"),
            ));
        }
        let mut classes = Vec::with_capacity(h * w);
        for row in y..y + h {
            classes.extend_from_slice(&self.classes[row * self.width + x..row * self.width + x + w]);
        }
        Ok(LabelImage {
            height: h,
            width: w,
            classes,
        })
    }
}

/// Per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    probs: Vec<[f32; NUM_CLASSES]>,
}

impl ConfidenceMap {
    /// Validates that each 3-vector is a probability distribution (sum within 1e-6).
    pub fn new(height: usize, width: usize, probs: Vec<[f32; NUM_CLASSES]>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::dims(height * width, probs.len()));
        }
        for p in &probs {
            let sum: f64 = p.iter().map(|&v| v as f64).sum();
            if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::param("probs", format!("{p:?} is not a distribution")));
            }
        }
        Ok(Self {
            height,
            width,
            probs,
        })
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        probs: Vec<[f32; NUM_CLASSES]>,
    ) -> Self {
        debug_assert_eq!(probs.len(), height * width);
        Self {
            height,
            width,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[[f32; NUM_CLASSES]] {
        &self.probs
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; NUM_CLASSES] {
        self.probs[y * self.width + x]
    }

    /// Per-pixel argmax (ties go to the lowest class id).
    pub fn argmax(&self) -> LabelImage {
        LabelImage {
            height: self.height,
            width: self.width,
            classes: self.probs.iter().map(|p| argmax_first(p) as u8).collect(),
        }
    }
}

/// ITU-R BT.601 luma.
pub fn to_grayscale(img: &RgbRaster) -> Raster {
    let values = img
        .values
        .chunks_exact(3)
        .map(|c| (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).clamp(0.0, 1.0))
        .collect();
    Raster {
        height: img.height,
        width: img.width,
        values,
    }
}

/// Nearest-neighbor upsampling by an integer factor per axis.
pub fn upsample_nearest<T: Copy>(
    values: &[T],
    height: usize,
    width: usize,
    target_height: usize,
    target_width: usize,
) -> Result<Vec<T>> {
    if values.len() != height * width {
        return Err(Error::dims(height * width, values.len()));
    }
    let (fy, fx) = integer_factors(height, width, target_height, target_width)?;
    let mut out = Vec::with_capacity(target_height * target_width);
    for y in 0..target_height {
        let row = &values[(y / fy) * width..(y / fy + 1) * width];
        for x in 0..target_width {
            out.push(row[x / fx]);
        }
    }
    Ok(out)
}

/// Box-filter downsampling: each output pixel is the mean of its source block.
pub fn downsample_box(img: &Raster, target_height: usize, target_width: usize) -> Result<Raster> {
    let (fy, fx) = integer_factors(target_height, target_width, img.height, img.width)?;
    let norm = 1.0 / (fy * fx) as f64;
    let mut values = Vec::with_capacity(target_height * target_width);
    for by in 0..target_height {
        for bx in 0..target_width {
            let mut sum = 0.0f64;
            for y in by * fy..(by + 1) * fy {
                for x in bx * fx..(bx + 1) * fx {
                    sum += img.get(x, y) as f64;
                }
            }
            values.push(((sum * norm) as f32).clamp(0.0, 1.0));
        }
    }
    Ok(Raster {
        height: target_height,
        width: target_width,
        values,
    })
}

/// Integer factors `(big / small)` per axis, or an error if either does not divide.
pub(crate) fn integer_factors(
    small_h: usize,
    small_w: usize,
    big_h: usize,
    big_w: usize,
) -> Result<(usize, usize)> {
    if small_h == 0 || small_w == 0 || big_h % small_h != 0 {
        return Err(Error::NonIntegerScale {
            from: small_h,
            to: big_h,
        });
    }
    if big_w % small_w != 0 {
        return Err(Error::NonIntegerScale {
            from: small_w,
            to: big_w,
        });
    }
    Ok((big_h / small_h, big_w / small_w))
}

/// Index of the first maximum.
pub(crate) fn argmax_first<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grayscale_weights() {
        let img = RgbRaster::new(1, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let g = to_grayscale(&img);
        assert!((g.get(0, 0) - 1.0).abs() < 1e-6);
        assert_eq!(g.get(1, 0), 0.0);
        assert!((g.get(2, 0) - 0.299).abs() < 1e-7);
    }

    #[test]
    fn upsample_blocks() {
        let src = LabelImage::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let up = src.upsample_nearest(4, 4).unwrap();
        assert_eq!(
            up.classes(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 0, 0, 2, 2, 0, 0]
        );
        assert_eq!(src.upsample_nearest(2, 2).unwrap(), src);
        assert!(matches!(
            src.upsample_nearest(3, 3),
            Err(Error::NonIntegerScale { .. })
        ));
    }

    #[test]
    fn upsample_scales_histogram() {
        let classes: Vec<u8> = (0..64 * 64).map(|i| ((i * 7 + i / 64) % 3) as u8).collect();
        let src = LabelImage::new(64, 64, classes).unwrap();
        let up = src.upsample_nearest(256, 256).unwrap();
        let (a, b) = (src.histogram(), up.histogram());
        for c in 0..3 {
            assert_eq!(b[c], 16 * a[c]);
        }
    }

    #[test]
    fn downsample_box_cases() {
        let c = Raster::filled(8, 8, 0.3);
        let d = downsample_box(&c, 2, 2).unwrap();
        assert!(d.values().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let checker = Raster::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(downsample_box(&checker, 1, 1).unwrap().get(0, 0), 0.5);
        assert!(downsample_box(&c, 3, 3).is_err());
    }

    #[test]
    fn downsample_box_matches_block_means() {
        let vals: Vec<f32> = (0..64).map(|i| ((i * 37 % 64) as f32) / 63.0).collect();
        let img = Raster::new(8, 8, vals.clone()).unwrap();
        let d = downsample_box(&img, 2, 2).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        s += vals[(by * 4 + y) * 8 + bx * 4 + x];
                    }
                }
                assert!((d.get(bx, by) - s / 16.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn confidence_map_rejects_non_distributions() {
        assert!(ConfidenceMap::new(1, 1, vec![[0.5, 0.5, 0.1]]).is_err());
        assert!(ConfidenceMap::new(1, 1, vec![[0.2, 0.3, 0.5]]).is_ok());
    }

    proptest! {
        #[test]
        fn gray_input_is_fixed_point(v in 0.0f32..=1.0) {
            let g = to_grayscale(&RgbRaster::filled(2, 2, [v, v, v]));
            prop_assert!(g.values().iter().all(|&x| (x - v).abs() < 1e-6));
        }

        #[test]
        fn grayscale_stays_in_range(vals in proptest::collection::vec(0.0f32..=1.0, 48)) {
            let g = to_grayscale(&RgbRaster::new(4, 4, vals).unwrap());
            prop_assert!(g.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn upsample_then_majority_is_identity(
            classes in proptest::collection::vec(0u8..3, 16),
            factor in 1usize..5,
        ) {
            let src = LabelImage::new(4, 4, classes).unwrap();
            let up = src.upsample_nearest(4 * factor, 4 * factor).unwrap();
            prop_assert_eq!(up.downsample_majority(4, 4).unwrap(), src);
        }

        #[test]
        fn downsample_box_stays_in_range(vals in proptest::collection::vec(0.0f32..=1.0, 64)) {
            let d = downsample_box(&Raster::new(8, 8, vals).unwrap(), 4, 4).unwrap();
            prop_assert!(d.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
