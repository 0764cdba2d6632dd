//! Fuses annotated per-layer cluster maps into one label image.
//!
//! Structural layers decide *where* text is, semantic layers decide *which*
//! text it is:
//!
//! 1. The text mask is the union, over structural layers, of pixels whose
//!    cluster is annotated `Text`.
//! 2. Every masked pixel collects one vote per semantic layer (nearest
//!    upsampled); background votes are dropped.
//! 3. The majority class wins. Ties go to the class leading among the
//!    highest-resolution layers that break the tie, then to printed text.
//! 4. Masked pixels without text votes, and all unmasked pixels, are background.

use std::collections::BTreeMap;

use crate::catalog::{
    validate_shapes, ClusterCatalog, ClusterClass, ClusterLabel, LayerEntry, LayerRole,
    LayerShape,
};
use crate::clustering::AssignmentMap;
use crate::docgen::downsample_ink_priority;
use crate::error::{Error, Result};
use crate::image::{Class, LabelImage, NUM_CLASSES};

struct Voter<'a> {
    map: &'a AssignmentMap,
    factor: usize,
    table: Vec<Option<ClusterClass>>,
}

impl Voter<'_> {
    #[inline]
    fn class_at(&self, x: usize, y: usize) -> Option<ClusterClass> {
        self.table[self.map.get(x / self.factor, y / self.factor) as usize]
    }
}

/// Fuses `assignments` (one per layer of a single patch) using `catalog`.
pub fn fuse_labels(assignments: &[AssignmentMap], catalog: &ClusterCatalog) -> Result<LabelImage> {
    let by_layer: BTreeMap<usize, &AssignmentMap> =
        assignments.iter().map(|a| (a.layer_id, a)).collect();

    // Ignored layers need no assignment; everything the catalog uses must validate.
    let used = ClusterCatalog {
        layers: catalog
            .layers
            .iter()
            .filter(|l| l.role != LayerRole::Ignored || by_layer.contains_key(&l.layer_id))
            .cloned()
            .collect(),
    };
    let shapes: Vec<LayerShape> = by_layer
        .values()
        .filter(|a| used.layer(a.layer_id).is_some())
        .map(|a| LayerShape::from(*a))
        .collect();
    validate_shapes(&used, &shapes).into_result()?;

    let target = used
        .layers
        .iter()
        .filter(|l| l.role == LayerRole::Structural)
        .map(|l| l.size)
        .max()
        .ok_or_else(|| Error::InvalidCatalog("no structural layer".into()))?;

    let voters = |role: LayerRole| -> Result<Vec<Voter>> {
        used.layers
            .iter()
            .filter(|l| l.role == role)
            .map(|l| {
                let map = by_layer[&l.layer_id];
                if map.size == 0 || target % map.size != 0 {
                    return Err(Error::NonIntegerScale { from: map.size, to: target });
                }
                Ok(Voter { map, factor: target / map.size, table: l.lookup(map.k) })
            })
            .collect()
    };
    let structural = voters(LayerRole::Structural)?;
    let mut semantic = voters(LayerRole::Semantic)?;
    // Highest resolution first; stable so equal sizes keep catalog order (irrelevant for votes).
    semantic.sort_by_key(|v| std::cmp::Reverse(v.map.size));

    let mut label = LabelImage::background(target, target);
    for y in 0..target {
        for x in 0..target {
            let masked = structural
                .iter()
                .any(|v| v.class_at(x, y) == Some(ClusterClass::Text));
            if !masked {
                continue;
            }
            label.set(x, y, vote(&semantic, x, y));
        }
    }
    Ok(label)
}

fn vote(semantic: &[Voter], x: usize, y: usize) -> Class {
    let mut totals = [0usize; NUM_CLASSES];
    for v in semantic {
        if let Some(c) = v.class_at(x, y).and_then(ClusterClass::pixel_class) {
            totals[c as usize] += 1;
        }
    }
    let (printed, hand) = (totals[1], totals[2]);
    if printed == 0 && hand == 0 {
        return Class::Background;
    }
    if printed != hand {
        return if printed > hand { Class::Printed } else { Class::Handwritten };
    }
    // Tie: walk resolution groups from the finest down.
    let mut i = 0;
    while i < semantic.len() {
        let size = semantic[i].map.size;
        let mut group = [0usize; NUM_CLASSES];
        while i < semantic.len() && semantic[i].map.size == size {
            if let Some(c) = semantic[i].class_at(x, y).and_then(ClusterClass::pixel_class) {
                group[c as usize] += 1;
            }
            i += 1;
        }
        if group[1] != group[2] {
            return if group[1] > group[2] { Class::Printed } else { Class::Handwritten };
        }
    }
    Class::Printed
}

/// Builds the catalog a perfect annotator would produce from ground truth:
/// each cluster takes the majority class of its member pixels, and roles
/// follow layer size.
///
/// `assignments[p]` holds the per-layer maps of patch `p`, `truths[p]` its label.
/// Sub-256 layers are compared against the ink-priority downsampled truth.
pub fn build_oracle_catalog(
    assignments: &[Vec<AssignmentMap>],
    truths: &[LabelImage],
) -> Result<ClusterCatalog> {
    if assignments.is_empty() {
        return Err(Error::EmptyInput("labeled sample set"));
    }
    if assignments.len() != truths.len() {
        return Err(Error::dims(
            format!("{} truths", assignments.len()),
            format!("{} truths", truths.len()),
        ));
    }
    // layer_id -> (size, k, counts[cluster][class])
    let mut tallies: BTreeMap<usize, (usize, usize, Vec<[usize; NUM_CLASSES]>)> = BTreeMap::new();
    for (maps, truth) in assignments.iter().zip(truths) {
        let mut downsampled: BTreeMap<usize, LabelImage> = BTreeMap::new();
        for map in maps {
            let reference = if map.size == truth.height() {
                truth
            } else {
                if !downsampled.contains_key(&map.size) {
                    downsampled.insert(map.size, downsample_ink_priority(truth, map.size)?);
                }
                &downsampled[&map.size]
            };
            let entry = tallies
                .entry(map.layer_id)
                .or_insert_with(|| (map.size, map.k, vec![[0; NUM_CLASSES]; map.k]));
            if entry.0 != map.size || entry.1 != map.k {
                return Err(Error::dims(
                    format!("layer {} of size {} with k = {}", map.layer_id, entry.0, entry.1),
                    format!("size {} with k = {}", map.size, map.k),
                ));
            }
            for (&id, &class) in map.ids().iter().zip(reference.classes()) {
                entry.2[id as usize][class as usize] += 1;
            }
        }
    }

    let layers = tallies
        .into_iter()
        .map(|(layer_id, (size, _, counts))| {
            let role = LayerRole::for_size(size);
            let clusters = match role {
                LayerRole::Ignored => Vec::new(),
                LayerRole::Structural => counts
                    .iter()
                    .enumerate()
                    .map(|(id, c)| ClusterLabel {
                        id,
                        class: if c[1] + c[2] > c[0] {
                            ClusterClass::Text
                        } else {
                            ClusterClass::Background
                        },
                    })
                    .collect(),
                LayerRole::Semantic => counts
                    .iter()
                    .enumerate()
                    .map(|(id, c)| ClusterLabel {
                        id,
                        class: match crate::image::argmax_first(c) {
                            1 => ClusterClass::Printed,
                            2 => ClusterClass::Handwritten,
                            _ => ClusterClass::Background,
                        },
                    })
                    .collect(),
            };
            LayerEntry { layer_id, size, role, clusters }
        })
        .collect();
    Ok(ClusterCatalog { layers })
}
