//! Exhaustive search over post-processing parameters.
//!
//! Confidence maps are computed once per overlap factor and reused for every
//! threshold combination. The objective is dataset-level mIoU; ties go to the
//! lexicographically smallest `(overlap, confidence, area)`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_grayscale, ConfidenceMap, LabelImage, RgbRaster};
use crate::inference::{postprocess, predict_document, InferenceParams};
use crate::metrics::{confusion, report, ConfusionCounts, MetricsReport};
use crate::segmenter::SegModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub overlap_factors: Vec<f64>,
    pub min_confidences: Vec<f64>,
    pub min_contour_areas: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            overlap_factors: vec![0.0, 0.5],
            min_confidences: vec![0.3, 0.7, 0.9],
            min_contour_areas: vec![15, 30, 55],
        }
    }
}

impl GridSpec {
    /// A grid containing one point.
    pub fn single(p: &InferenceParams) -> Self {
        Self {
            overlap_factors: vec![p.overlap_factor],
            min_confidences: vec![p.min_confidence],
            min_contour_areas: vec![p.min_contour_area],
        }
    }

    /// Grid points in ascending lexicographic order, duplicates removed.
    pub fn points(&self) -> Vec<InferenceParams> {
        let sorted_f = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let mut areas = self.min_contour_areas.clone();
        areas.sort_unstable();
        areas.dedup();
        let mut out = Vec::new();
        for &overlap_factor in &sorted_f(&self.overlap_factors) {
            for &min_confidence in &sorted_f(&self.min_confidences) {
                for &min_contour_area in &areas {
                    out.push(InferenceParams { overlap_factor, min_confidence, min_contour_area });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.overlap_factors.is_empty()
            || self.min_confidences.is_empty()
            || self.min_contour_areas.is_empty()
        {
            return Err(Error::EmptyInput("grid axis"));
        }
        for p in self.points() {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: InferenceParams,
    pub counts: ConfusionCounts,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: InferenceParams,
    pub best_report: MetricsReport,
    /// One row per grid point, in lexicographic order.
    pub rows: Vec<GridRow>,
}

impl GridOutcome {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>8} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
            "overlap", "min_conf", "area", "mIoU", "IoU-bg", "IoU-pr", "IoU-hw"
        );
        for r in &self.rows {
            let c = &r.report.classes;
            let mark = if r.params == self.best { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:>8.2} {:>8.2} {:>6} {:>7.3} {:>7.3} {:>7.3} {:>7.3}{mark}",
                r.params.overlap_factor,
                r.params.min_confidence,
                r.params.min_contour_area,
                r.report.miou,
                c[0].iou,
                c[1].iou,
                c[2].iou,
            );
        }
        s
    }
}

/// Dataset-level confusion of post-processed predictions.
pub fn evaluate_maps(
    maps: &[ConfidenceMap],
    truths: &[LabelImage],
    min_confidence: f64,
    min_contour_area: usize,
) -> Result<ConfusionCounts> {
    let per_doc = maps
        .par_iter()
        .zip(truths)
        .map(|(m, t)| confusion(&postprocess(m, min_confidence, min_contour_area)?, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfusionCounts::sum(&per_doc))
}

/// Evaluates one parameter set from scratch, without any caching.
pub fn evaluate_params(
    model: &SegModel,
    eval_set: &[(RgbRaster, LabelImage)],
    params: &InferenceParams,
) -> Result<MetricsReport> {
    let mut total = ConfusionCounts::default();
    for (doc, truth) in eval_set {
        let pred = crate::inference::segment_document(model, doc, params)?;
        total.merge(&confusion(&pred, truth)?);
    }
    Ok(report(&total))
}

pub fn grid_search(
    model: &SegModel,
    eval_set: &[(RgbRaster, LabelImage)],
    grid: &GridSpec,
) -> Result<GridOutcome> {
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    grid.validate()?;
    let grays: Vec<_> = eval_set.iter().map(|(d, _)| to_grayscale(d)).collect();
    let truths: Vec<LabelImage> = eval_set.iter().map(|(_, t)| t.clone()).collect();
    let points = grid.points();

    let mut rows = Vec::with_capacity(points.len());
    let mut cached: Option<(f64, Vec<ConfidenceMap>)> = None;
    for p in &points {
        if cached.as_ref().map(|(f, _)| *f) != Some(p.overlap_factor) {
            let maps = grays
                .iter()
                .map(|g| predict_document(model, g, p.overlap_factor))
                .collect::<Result<Vec<_>>>()?;
            cached = Some((p.overlap_factor, maps));
        }
        let maps = &cached.as_ref().unwrap().1;
        let counts = evaluate_maps(maps, &truths, p.min_confidence, p.min_contour_area)?;
        rows.push(GridRow { params: *p, counts, report: report(&counts) });
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.report.miou > rows[best].report.miou {
            best = i;
        }
    }
    Ok(GridOutcome { best: rows[best].params, best_report: rows[best].report, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::FeatureDef;

    #[test]
    fn default_grid_has_eighteen_ordered_points() {
        let pts = GridSpec::default().points();
        assert_eq!(pts.len(), 18);
        assert_eq!(pts[0], InferenceParams { overlap_factor: 0.0, min_confidence: 0.3, min_contour_area: 15 });
        assert_eq!(pts[17], InferenceParams { overlap_factor: 0.5, min_confidence: 0.9, min_contour_area: 55 });
        for w in pts.windows(2) {
            let key = |p: &InferenceParams| (p.overlap_factor, p.min_confidence, p.min_contour_area);
            assert!(key(&w[0]) < key(&w[1]));
        }
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let model = SegModel::zeros(FeatureDef::default(), 0);
        let doc = (RgbRaster::filled(256, 256, [1.0; 3]), LabelImage::background(256, 256));
        assert!(grid_search(&model, &[], &GridSpec::default()).is_err());
        let empty = GridSpec { min_confidences: vec![], ..GridSpec::default() };
        assert!(grid_search(&model, &[doc.clone()], &empty).is_err());
        let bad = GridSpec { overlap_factors: vec![1.0], ..GridSpec::default() };
        assert!(grid_search(&model, &[doc], &bad).is_err());
    }

    #[test]
    fn single_point_grid_returns_that_point_and_ties_keep_the_first() {
        let model = SegModel::zeros(FeatureDef::default(), 0);
        let doc = (RgbRaster::filled(256, 300, [1.0; 3]), LabelImage::background(256, 300));
        let p = InferenceParams { overlap_factor: 0.5, min_confidence: 0.7, min_contour_area: 50 };
        let out = grid_search(&model, std::slice::from_ref(&doc), &GridSpec::single(&p)).unwrap();
        assert_eq!(out.best, p);
        assert_eq!(out.rows.len(), 1);
        // A zero model predicts background everywhere, so every point ties.
        let small = GridSpec {
            overlap_factors: vec![0.5, 0.0],
            min_confidences: vec![0.9, 0.3],
            min_contour_areas: vec![30, 15],
        };
        let out = grid_search(&model, &[doc], &small).unwrap();
        assert_eq!(out.rows.len(), 8);
        assert_eq!(out.best, InferenceParams { overlap_factor: 0.0, min_confidence: 0.3, min_contour_area: 15 });
        assert_eq!(out.best_report.miou, 1.0);
        assert!(out.to_table().lines().count() == 9);
    }
}
