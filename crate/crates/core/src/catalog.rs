//! The annotation data model: a role per layer and a class per cluster.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::{AssignmentMap, ClusterModel};
use crate::error::{Error, Result};
use crate::image::{Class, RgbRaster};
use crate::io::sha256_hex;

/// Annotation guidance shown to the annotator, in minutes.
pub const ANNOTATION_BUDGET_MINUTES: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    /// High resolution: clusters say where text is.
    Structural,
    /// Mid resolution: clusters say which kind of text.
    Semantic,
    Ignored,
}

impl LayerRole {
    /// Role implied by layer size alone.
    pub fn for_size(size: usize) -> LayerRole {
        match size {
            256 => LayerRole::Structural,
            64 | 128 => LayerRole::Semantic,
            _ => LayerRole::Ignored,
        }
    }

    pub fn allows(self, class: ClusterClass) -> bool {
        match self {
            LayerRole::Structural => matches!(class, ClusterClass::Background | ClusterClass::Text),
            LayerRole::Semantic => !matches!(class, ClusterClass::Text),
            LayerRole::Ignored => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterClass {
    Background,
    Printed,
    Handwritten,
    /// Text of unknown kind; only valid on structural layers.
    Text,
}

impl ClusterClass {
    /// Pixel class for semantic votes; `None` for `Text`.
    pub fn pixel_class(self) -> Option<Class> {
        match self {
            ClusterClass::Background => Some(Class::Background),
            ClusterClass::Printed => Some(Class::Printed),
            ClusterClass::Handwritten => Some(Class::Handwritten),
            ClusterClass::Text => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabel {
    pub id: usize,
    pub class: ClusterClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: usize,
    pub size: usize,
    pub role: LayerRole,
    pub clusters: Vec<ClusterLabel>,
}

impl LayerEntry {
    pub fn class_of(&self, cluster: usize) -> Option<ClusterClass> {
        self.clusters.iter().find(|c| c.id == cluster).map(|c| c.class)
    }

    /// Dense lookup table `cluster id -> class` of length `k`; unassigned ids are `None`.
    pub fn lookup(&self, k: usize) -> Vec<Option<ClusterClass>> {
        let mut table = vec![None; k];
        for c in &self.clusters {
            if c.id < k {
                table[c.id] = Some(c.class);
            }
        }
        table
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterCatalog {
    pub layers: Vec<LayerEntry>,
}

impl ClusterCatalog {
    pub fn layer(&self, layer_id: usize) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Layers sorted by id, clusters sorted by id.
    pub fn canonicalized(&self) -> ClusterCatalog {
        let mut c = self.clone();
        c.layers.sort_by_key(|l| l.layer_id);
        for l in &mut c.layers {
            l.clusters.sort_by_key(|c| c.id);
        }
        c
    }

    /// Canonical JSON: sorted, pretty-printed, newline-terminated.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.canonicalized())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

/// Shape information a catalog is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub layer_id: usize,
    /// `None` when the source does not record the layer size.
    pub size: Option<usize>,
    pub k: usize,
}

impl From<&ClusterModel> for LayerShape {
    fn from(m: &ClusterModel) -> Self {
        LayerShape {
            layer_id: m.layer_id,
            size: (m.layer_size > 0).then_some(m.layer_size),
            k: m.k,
        }
    }
}

impl From<&AssignmentMap> for LayerShape {
    fn from(a: &AssignmentMap) -> Self {
        LayerShape {
            layer_id: a.layer_id,
            size: Some(a.size),
            k: a.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    DuplicateLayer { layer_id: usize },
    MissingModel { layer_id: usize },
    MissingLayer { layer_id: usize },
    SizeMismatch { layer_id: usize, catalog: usize, model: usize },
    DuplicateCluster { layer_id: usize, cluster: usize },
    ClusterOutOfRange { layer_id: usize, cluster: usize, k: usize },
    MissingAssignment { layer_id: usize, cluster: usize },
    RoleViolation { layer_id: usize, cluster: usize, role: LayerRole, class: ClusterClass },
    NoStructuralLayer,
    NoSemanticLayer,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Issue::DuplicateLayer { layer_id } => write!(f, "layer {layer_id} listed twice"),
            Issue::MissingModel { layer_id } => write!(f, "layer {layer_id} has no cluster model"),
            Issue::MissingLayer { layer_id } => write!(f, "layer {layer_id} has no role"),
            Issue::SizeMismatch { layer_id, catalog, model } => {
                write!(f, "layer {layer_id}: catalog size {catalog}, model size {model}")
            }
            Issue::DuplicateCluster { layer_id, cluster } => {
                write!(f, "layer {layer_id}: cluster {cluster} listed twice")
            }
            Issue::ClusterOutOfRange { layer_id, cluster, k } => {
                write!(f, "layer {layer_id}: cluster {cluster} out of range (k = {k})")
            }
            Issue::MissingAssignment { layer_id, cluster } => {
                write!(f, "layer {layer_id}: cluster {cluster} unassigned")
            }
            Issue::RoleViolation { layer_id, cluster, role, class } => write!(
                f,
                "layer {layer_id}: cluster {cluster} labeled {class:?} on a {role:?} layer"
            ),
            Issue::NoStructuralLayer => write!(f, "no structural layer"),
            Issue::NoSemanticLayer => write!(f, "no semantic layer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            let msg: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
            Err(Error::InvalidCatalog(msg.join("; ")))
        }
    }
}

/// Checks a catalog against the cluster models it annotates.
pub fn validate_catalog(catalog: &ClusterCatalog, models: &[ClusterModel]) -> ValidationReport {
    let shapes: Vec<LayerShape> = models.iter().map(LayerShape::from).collect();
    validate_shapes(catalog, &shapes)
}

pub fn validate_shapes(catalog: &ClusterCatalog, shapes: &[LayerShape]) -> ValidationReport {
    let mut issues = Vec::new();
    let by_id: BTreeMap<usize, &LayerShape> = shapes.iter().map(|s| (s.layer_id, s)).collect();
    let mut seen = BTreeSet::new();
    for entry in &catalog.layers {
        if !seen.insert(entry.layer_id) {
            issues.push(Issue::DuplicateLayer { layer_id: entry.layer_id });
            continue;
        }
        let Some(shape) = by_id.get(&entry.layer_id) else {
            issues.push(Issue::MissingModel { layer_id: entry.layer_id });
            continue;
        };
        if let Some(size) = shape.size {
            if size != entry.size {
                issues.push(Issue::SizeMismatch {
                    layer_id: entry.layer_id,
                    catalog: entry.size,
                    model: size,
                });
            }
        }
        let mut ids = BTreeSet::new();
        for c in &entry.clusters {
            if !ids.insert(c.id) {
                issues.push(Issue::DuplicateCluster { layer_id: entry.layer_id, cluster: c.id });
            }
            if c.id >= shape.k {
                issues.push(Issue::ClusterOutOfRange {
                    layer_id: entry.layer_id,
                    cluster: c.id,
                    k: shape.k,
                });
            }
            if !entry.role.allows(c.class) {
                issues.push(Issue::RoleViolation {
                    layer_id: entry.layer_id,
                    cluster: c.id,
                    role: entry.role,
                    class: c.class,
                });
            }
        }
        if entry.role != LayerRole::Ignored {
            for cluster in (0..shape.k).filter(|id| !ids.contains(id)) {
                issues.push(Issue::MissingAssignment { layer_id: entry.layer_id, cluster });
            }
        }
    }
    for s in shapes {
        if !seen.contains(&s.layer_id) {
            issues.push(Issue::MissingLayer { layer_id: s.layer_id });
        }
    }
    if !catalog.layers.iter().any(|l| l.role == LayerRole::Structural) {
        issues.push(Issue::NoStructuralLayer);
    }
    if !catalog.layers.iter().any(|l| l.role == LayerRole::Semantic) {
        issues.push(Issue::NoSemanticLayer);
    }
    ValidationReport { issues }
}

/// Highlight color for overlays.
pub const OVERLAY_TINT: [f32; 3] = [1.0, 0.0, 1.0];

/// Tints the pixels of `cluster_id` at 50% opacity over `patch`.
pub fn render_overlay(
    patch: &RgbRaster,
    assignment: &AssignmentMap,
    cluster_id: usize,
) -> Result<RgbRaster> {
    if cluster_id >= assignment.k {
        return Err(Error::param(
            "cluster_id",
            format!("{cluster_id} >= k = {}", assignment.k),
        ));
    }
    if patch.height() != patch.width() {
        return Err(Error::dims("square patch", format!("{}x{}", patch.height(), patch.width())));
    }
    let up = assignment.upsample_nearest(patch.height())?;
    let mut out = patch.clone();
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            if up.get(x, y) as usize == cluster_id {
                let p = patch.get(x, y);
                out.set(x, y, [0, 1, 2].map(|c| 0.5 * p[c] + 0.5 * OVERLAY_TINT[c]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> Vec<LayerShape> {
        vec![
            LayerShape { layer_id: 0, size: Some(64), k: 3 },
            LayerShape { layer_id: 1, size: Some(256), k: 2 },
        ]
    }

    fn complete() -> ClusterCatalog {
        ClusterCatalog {
            layers: vec![
                LayerEntry {
                    layer_id: 1,
                    size: 256,
                    role: LayerRole::Structural,
                    clusters: vec![
                        ClusterLabel { id: 1, class: ClusterClass::Text },
                        ClusterLabel { id: 0, class: ClusterClass::Background },
                    ],
                },
                LayerEntry {
                    layer_id: 0,
                    size: 64,
                    role: LayerRole::Semantic,
                    clusters: vec![
                        ClusterLabel { id: 0, class: ClusterClass::Background },
                        ClusterLabel { id: 1, class: ClusterClass::Printed },
                        ClusterLabel { id: 2, class: ClusterClass::Handwritten },
                    ],
                },
            ],
        }
    }

    #[test]
    fn complete_catalog_is_valid() {
        assert_eq!(validate_shapes(&complete(), &shapes()).issues, vec![]);
    }

    #[test]
    fn structural_layer_cannot_carry_handwriting() {
        let mut c = complete();
        c.layers[0].clusters[0].class = ClusterClass::Handwritten;
        let report = validate_shapes(&c, &shapes());
        assert_eq!(
            report.issues,
            vec![Issue::RoleViolation {
                layer_id: 1,
                cluster: 1,
                role: LayerRole::Structural,
                class: ClusterClass::Handwritten
            }]
        );
    }

    #[test]
    fn cluster_id_equal_to_k_is_out_of_range() {
        let mut c = complete();
        c.layers[1].clusters.push(ClusterLabel { id: 3, class: ClusterClass::Printed });
        let report = validate_shapes(&c, &shapes());
        assert_eq!(
            report.issues,
            vec![Issue::ClusterOutOfRange { layer_id: 0, cluster: 3, k: 3 }]
        );
    }

    #[test]
    fn missing_assignments_and_roles_are_reported() {
        let mut c = complete();
        c.layers[1].clusters.pop();
        c.layers[1].role = LayerRole::Ignored;
        let report = validate_shapes(&c, &shapes());
        assert_eq!(report.issues, vec![Issue::NoSemanticLayer]);
        c.layers[1].role = LayerRole::Semantic;
        let report = validate_shapes(&c, &shapes());
        assert_eq!(report.issues, vec![Issue::MissingAssignment { layer_id: 0, cluster: 2 }]);
        c.layers.pop();
        let report = validate_shapes(&c, &shapes());
        assert!(report.issues.contains(&Issue::MissingLayer { layer_id: 0 }));
        assert!(report.into_result().is_err());
    }

    #[test]
    fn canonical_json_is_stable() {
        let json = complete().to_json().unwrap();
        let back = ClusterCatalog::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert!(json.contains("\"structural\""));
        assert!(json.contains("\"handwritten\""));
        assert_eq!(back.hash().unwrap(), complete().hash().unwrap());
    }

    #[test]
    fn overlay_tints_only_the_chosen_cluster() {
        let patch = RgbRaster::filled(4, 4, [0.8, 0.7, 0.6]);
        let a = AssignmentMap::new(0, 2, 3, vec![0, 1, 1, 0]).unwrap();
        let out = render_overlay(&patch, &a, 1).unwrap();
        let changed = (0..16).filter(|i| out.get(i % 4, i / 4) != patch.get(i % 4, i / 4)).count();
        assert_eq!(changed, 2 * 4);
        assert_eq!(out.get(2, 0), [0.9, 0.35, 0.8]);

        assert_eq!(render_overlay(&patch, &a, 2).unwrap(), patch);
        let full = AssignmentMap::new(0, 2, 3, vec![2; 4]).unwrap();
        let all = render_overlay(&patch, &full, 2).unwrap();
        assert!((0..16).all(|i| all.get(i % 4, i / 4) != patch.get(i % 4, i / 4)));
        assert!(render_overlay(&patch, &a, 3).is_err());
    }
}
