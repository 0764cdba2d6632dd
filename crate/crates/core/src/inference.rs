//! Whole-document segmentation: tiling, patch prediction, max-confidence
//! reassembly and post-processing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::label_components;
use crate::docgen::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::image::{argmax_first, to_grayscale, ConfidenceMap, LabelImage, Raster, RgbRaster, NUM_CLASSES};
use crate::segmenter::{reflect101, SegModel};

/// Post-processing defaults.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.7;
pub const DEFAULT_MIN_CONTOUR_AREA: usize = 50;
pub const DEFAULT_OVERLAP_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceParams {
    pub overlap_factor: f64,
    pub min_confidence: f64,
    pub min_contour_area: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            overlap_factor: DEFAULT_OVERLAP_FACTOR,
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            min_contour_area: DEFAULT_MIN_CONTOUR_AREA,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        check_overlap(self.overlap_factor)?;
        check_confidence(self.min_confidence)
    }
}

fn check_overlap(f: f64) -> Result<()> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::param("overlap_factor", format!("{f} not in [0, 1)")))
    }
}

fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::param("min_confidence", format!("{c} not in [0, 1]")))
    }
}

/// Patch offsets along one axis: multiples of the stride, plus a final
/// offset flush with the far edge.
pub fn tile_offsets(length: usize, patch: usize, overlap_factor: f64) -> Result<Vec<usize>> {
    check_overlap(overlap_factor)?;
    if patch == 0 {
        return Err(Error::param("patch_size", "must be at least 1"));
    }
    if length <= patch {
        return Ok(vec![0]);
    }
    let stride = ((patch as f64 * (1.0 - overlap_factor)).round() as usize).max(1);
    let mut offsets: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + patch <= length).collect();
    if offsets.last().map_or(true, |&o| o + patch < length) {
        offsets.push(length - patch);
    }
    Ok(offsets)
}

/// One tile of a document.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub image: Raster,
}

/// Tiles of a document, together with its (possibly padded) extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiling {
    pub height: usize,
    pub width: usize,
    /// Extent after reflect padding documents smaller than a patch.
    pub padded_height: usize,
    pub padded_width: usize,
    pub tiles: Vec<Tile>,
}

/// Splits `document` into `patch × patch` tiles in row-major scan order.
/// Documents smaller than a patch are reflect-padded at the far edges.
pub fn tile(document: &Raster, patch: usize, overlap_factor: f64) -> Result<Tiling> {
    check_overlap(overlap_factor)?;
    let (h, w) = (document.height(), document.width());
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("document"));
    }
    let (ph, pw) = (h.max(patch), w.max(patch));
    let padded;
    let source = if (ph, pw) != (h, w) {
        padded = Raster::from_fn(ph, pw, |x, y| {
            document.get(reflect101(x as i64, w), reflect101(y as i64, h))
        });
        &padded
    } else {
        document
    };
    let xs = tile_offsets(pw, patch, overlap_factor)?;
    let ys = tile_offsets(ph, patch, overlap_factor)?;
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push(Tile { x, y, image: source.crop(x, y, patch, patch)? });
        }
    }
    Ok(Tiling { height: h, width: w, padded_height: ph, padded_width: pw, tiles })
}

/// Per-pixel selection of the covering patch with the highest maximum class
/// probability (earliest patch on ties); its full distribution is copied.
pub fn reassemble(
    predictions: &[(ConfidenceMap, usize, usize)],
    height: usize,
    width: usize,
) -> Result<ConfidenceMap> {
    let mut best = vec![f32::NEG_INFINITY; height * width];
    let mut probs = vec![[0.0f32; NUM_CLASSES]; height * width];
    for (conf, x0, y0) in predictions {
        let ye = (y0 + conf.height()).min(height);
        let xe = (x0 + conf.width()).min(width);
        for y in *y0..ye {
            for x in *x0..xe {
                let p = conf.get(x - x0, y - y0);
                let score = p.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let i = y * width + x;
                if score > best[i] {
                    best[i] = score;
                    probs[i] = p;
                }
            }
        }
    }
    if let Some(i) = best.iter().position(|&b| b == f32::NEG_INFINITY) {
        return Err(Error::Uncovered { x: i % width, y: i / width });
    }
    Ok(ConfidenceMap::from_parts_unchecked(height, width, probs))
}

/// Argmax, then low-confidence text → background, then removal of text
/// components (8-connected, per class) with fewer than `min_contour_area` pixels.
pub fn postprocess(conf: &ConfidenceMap, min_confidence: f64, min_contour_area: usize) -> Result<LabelImage> {
    check_confidence(min_confidence)?;
    let (h, w) = (conf.height(), conf.width());
    let mut classes: Vec<u8> = conf
        .probs()
        .iter()
        .map(|p| {
            let c = argmax_first(p);
            if c != 0 && (p[c] as f64) < min_confidence {
                0
            } else {
                c as u8
            }
        })
        .collect();
    if min_contour_area > 0 {
        for class in 1..NUM_CLASSES as u8 {
            let mask: Vec<bool> = classes.iter().map(|&c| c == class).collect();
            let (ids, areas) = label_components(&mask, h, w);
            for (c, &id) in classes.iter_mut().zip(&ids) {
                if id != 0 && areas[id as usize - 1] < min_contour_area {
                    *c = 0;
                }
            }
        }
    }
    LabelImage::new(h, w, classes)
}

/// Confidence map of a grayscale document: tile, predict, reassemble.
pub fn predict_document(model: &SegModel, document: &Raster, overlap_factor: f64) -> Result<ConfidenceMap> {
    let tiling = tile(document, PATCH_SIZE, overlap_factor)?;
    let predictions = tiling
        .tiles
        .par_iter()
        .map(|t| Ok((model.predict_patch(&t.image)?, t.x, t.y)))
        .collect::<Result<Vec<_>>>()?;
    let full = reassemble(&predictions, tiling.padded_height, tiling.padded_width)?;
    Ok(crop_confidence(&full, tiling.width, tiling.height))
}

fn crop_confidence(conf: &ConfidenceMap, width: usize, height: usize) -> ConfidenceMap {
    if (conf.width(), conf.height()) == (width, height) {
        return conf.clone();
    }
    let probs = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| conf.get(x, y))
        .collect();
    ConfidenceMap::from_parts_unchecked(height, width, probs)
}

/// Full pipeline on a color document.
pub fn segment_document(model: &SegModel, document: &RgbRaster, params: &InferenceParams) -> Result<LabelImage> {
    params.validate()?;
    let gray = to_grayscale(document);
    let conf = predict_document(model, &gray, params.overlap_factor)?;
    postprocess(&conf, params.min_confidence, params.min_contour_area)
}
