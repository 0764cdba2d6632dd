//! Labeled dataset synthesis and class-content balancing.
//!
//! Each entry is produced by generating a patch, assigning its features to
//! the cluster models and fusing the assignments with the catalog. Patches
//! are stored as 8-bit grayscale PNGs, labels as class-id PNGs, and the
//! listing as JSON lines: one header record followed by one record per entry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{validate_catalog, ClusterCatalog};
use crate::clustering::{assign_stack, ClusterModel};
use crate::docgen::{render_patch, GenConfig};
use crate::error::{Error, Result};
use crate::fusion::fuse_labels;
use crate::image::{to_grayscale, Class, LabelImage, Raster};
use crate::io::{
    decode_gray_png, decode_label_png, encode_gray_png, encode_label_png, read_bytes, sha256_hex,
    write_atomic,
};
use crate::pipeline::models_hash;
use crate::rng::GenSeed;

/// File name of the manifest inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Pixels of a text class a patch needs before it counts as containing it.
pub const DEFAULT_MIN_CLASS_PIXELS: usize = 32;
/// Share of background-only patches kept by [`balance`], relative to the text patches.
pub const DEFAULT_BACKGROUND_FRACTION: f64 = 0.1;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BackgroundOnly,
    PrintedOnly,
    HandwritingContaining,
}

/// Classifies a label by its text content. Handwriting takes precedence.
pub fn categorize_patch(label: &LabelImage, min_class_pixels: usize) -> Category {
    let h = label.histogram();
    if h[Class::Handwritten as usize] >= min_class_pixels {
        Category::HandwritingContaining
    } else if h[Class::Printed as usize] >= min_class_pixels {
        Category::PrintedOnly
    } else {
        Category::BackgroundOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub seed: GenSeed,
    pub background_fraction: f64,
    /// Entry count before balancing.
    pub source_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub seed: GenSeed,
    pub generator: GenConfig,
    pub catalog_sha256: String,
    pub models_sha256: String,
    pub min_class_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Position in the unbalanced dataset.
    pub index: usize,
    pub seed: GenSeed,
    /// Paths relative to the dataset directory.
    pub patch: String,
    pub label: String,
    pub patch_sha256: String,
    pub label_sha256: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&HeaderLine { header: self.header.clone() })?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or(Error::EmptyInput("manifest"))?;
        let HeaderLine { header } = serde_json::from_str(first)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                format: "manifest",
                reason: format!("unsupported version {}", header.format_version),
            });
        }
        let entries = lines.map(serde_json::from_str).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { header, entries, root: root.to_path_buf() })
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_jsonl()?.as_bytes()))
    }

    /// Writes the manifest to `path` (atomically).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Loads a manifest; entry paths resolve against its parent directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            format: "manifest",
            reason: e.to_string(),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_jsonl(&text, &root)
    }

    pub fn counts(&self) -> BTreeMap<Category, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.category).or_insert(0) += 1;
        }
        m
    }

    pub fn count(&self, category: Category) -> usize {
        self.entries.iter().filter(|e| e.category == category).count()
    }

    /// Loads entry `i`, checking both file hashes and the recorded category.
    pub fn load_entry(&self, i: usize) -> Result<(Raster, LabelImage)> {
        let e = &self.entries[i];
        let patch = self.read_checked(&e.patch, &e.patch_sha256)?;
        let label = self.read_checked(&e.label, &e.label_sha256)?;
        let image = decode_gray_png(&patch)?;
        let label = decode_label_png(&label)?;
        let category = categorize_patch(&label, self.header.min_class_pixels);
        if category != e.category {
            return Err(Error::Format {
                format: "manifest",
                reason: format!(
                    "entry {} recorded as {:?} but its label is {:?}",
                    e.index, e.category, category
                ),
            });
        }
        Ok((image, label))
    }

    /// Loads every entry in parallel, verifying hashes and categories.
    pub fn load_all(&self) -> Result<Vec<(Raster, LabelImage)>> {
        (0..self.entries.len()).into_par_iter().map(|i| self.load_entry(i)).collect()
    }

    /// Checks every file against its recorded hash and category.
    pub fn verify(&self) -> Result<()> {
        (0..self.entries.len())
            .into_par_iter()
            .try_for_each(|i| self.load_entry(i).map(|_| ()))
    }

    fn read_checked(&self, rel: &str, expected: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = read_bytes(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != expected {
            return Err(Error::HashMismatch {
                path,
                expected: expected.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }
}

/// Seed of the `index`-th synthesized patch.
pub fn synth_seed(seed: GenSeed, index: usize) -> GenSeed {
    seed.derive("synth", index as u64)
}

/// Generates one fused training pair.
pub fn synthesize_patch(
    seed: GenSeed,
    config: &GenConfig,
    models: &[ClusterModel],
    catalog: &ClusterCatalog,
) -> Result<(Raster, LabelImage)> {
    let patch = render_patch(seed, config)?;
    let stack = patch.features(seed, config);
    let assignments = assign_stack(models, &stack)?;
    let label = fuse_labels(&assignments, catalog)?;
    Ok((to_grayscale(&patch.image), label))
}

/// Synthesizes `n` fused patches into `out_dir` and writes the manifest there.
pub fn synthesize_dataset(
    n: usize,
    seed: GenSeed,
    config: &GenConfig,
    models: &[ClusterModel],
    catalog: &ClusterCatalog,
    min_class_pixels: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    config.validate()?;
    validate_catalog(catalog, models).into_result()?;
    for sub in ["patches", "labels"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let entries = (0..n)
        .into_par_iter()
        .map(|index| {
            let s = synth_seed(seed, index);
            let (image, label) = synthesize_patch(s, config, models, catalog)?;
            let patch = format!("patches/{index:06}.png");
            let label_path = format!("labels/{index:06}.png");
            let patch_bytes = encode_gray_png(&image)?;
            let label_bytes = encode_label_png(&label)?;
            write_atomic(&out_dir.join(&patch), &patch_bytes)?;
            write_atomic(&out_dir.join(&label_path), &label_bytes)?;
            Ok(ManifestEntry {
                index,
                seed: s,
                patch,
                label: label_path,
                patch_sha256: sha256_hex(&patch_bytes),
                label_sha256: sha256_hex(&label_bytes),
                category: categorize_patch(&label, min_class_pixels),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        header: ManifestHeader {
            format_version: FORMAT_VERSION,
            seed,
            generator: *config,
            catalog_sha256: catalog.hash()?,
            models_sha256: models_hash(models)?,
            min_class_pixels,
            balance: None,
        },
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Keeps `m = min(#handwriting, #printed-only)` entries of each text category
/// plus `round(background_fraction · 2m)` background-only entries (all of
/// them if fewer exist). Selection is uniform and seeded; order is preserved.
pub fn balance(
    manifest: &DatasetManifest,
    seed: GenSeed,
    background_fraction: f64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&background_fraction) {
        return Err(Error::param(
            "background_fraction",
            format!("{background_fraction} not in [0, 1]"),
        ));
    }
    let members = |c: Category| -> Vec<usize> {
        (0..manifest.entries.len())
            .filter(|&i| manifest.entries[i].category == c)
            .collect()
    };
    let hand = members(Category::HandwritingContaining);
    let printed = members(Category::PrintedOnly);
    let background = members(Category::BackgroundOnly);
    if hand.is_empty() || printed.is_empty() {
        return Err(Error::Unbalanceable(format!(
            "need at least one entry of each text category, found {} handwriting-containing and {} printed-only",
            hand.len(),
            printed.len()
        )));
    }
    let m = hand.len().min(printed.len());
    let n_bg = ((background_fraction * 2.0 * m as f64).round() as usize).min(background.len());

    let mut keep = Vec::with_capacity(2 * m + n_bg);
    for (tag, pool, count) in [
        ("handwriting", &hand, m),
        ("printed", &printed, m),
        ("background", &background, n_bg),
    ] {
        let mut rng = seed.stream(&format!("balance-{tag}"));
        keep.extend(index::sample(&mut rng, pool.len(), count).into_iter().map(|j| pool[j]));
    }
    keep.sort_unstable();

    let mut header = manifest.header.clone();
    header.balance = Some(BalanceRecord {
        seed,
        background_fraction,
        source_entries: manifest.entries.len(),
    });
    Ok(DatasetManifest {
        header,
        entries: keep.into_iter().map(|i| manifest.entries[i].clone()).collect(),
        root: manifest.root.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(index: usize, category: Category) -> ManifestEntry {
        ManifestEntry {
            index,
            seed: GenSeed(index as u64),
            patch: format!("patches/{index:06}.png"),
            label: format!("labels/{index:06}.png"),
            patch_sha256: String::new(),
            label_sha256: String::new(),
            category,
        }
    }

    fn synthetic_manifest(cats: &[Category]) -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader {
                format_version: FORMAT_VERSION,
                seed: GenSeed(0),
                generator: GenConfig::default(),
                catalog_sha256: String::new(),
                models_sha256: String::new(),
                min_class_pixels: DEFAULT_MIN_CLASS_PIXELS,
                balance: None,
            },
            entries: cats.iter().enumerate().map(|(i, &c)| entry(i, c)).collect(),
            root: PathBuf::new(),
        }
    }

    fn counts(p: usize, h: usize, b: usize) -> DatasetManifest {
        let mut cats = vec![Category::PrintedOnly; p];
        cats.extend(std::iter::repeat_n(Category::HandwritingContaining, h));
        cats.extend(std::iter::repeat_n(Category::BackgroundOnly, b));
        synthetic_manifest(&cats)
    }

    #[test]
    fn categorize_thresholds() {
        let mut label = LabelImage::background(16, 16);
        assert_eq!(categorize_patch(&label, 10), Category::BackgroundOnly);
        label.set(0, 0, Class::Handwritten);
        assert_ne!(categorize_patch(&label, 10), Category::HandwritingContaining);
        for x in 1..10 {
            label.set(x, 0, Class::Handwritten);
        }
        assert_eq!(categorize_patch(&label, 10), Category::HandwritingContaining);
        let mut printed = LabelImage::background(16, 16);
        for x in 0..10 {
            printed.set(x, 3, Class::Printed);
        }
        assert_eq!(categorize_patch(&printed, 10), Category::PrintedOnly);
        assert_eq!(categorize_patch(&printed, 11), Category::BackgroundOnly);
    }

    #[test]
    fn balance_arithmetic() {
        let m = counts(70, 30, 50);
        let b = balance(&m, GenSeed(1), 0.1).unwrap();
        assert_eq!(b.count(Category::PrintedOnly), 30);
        assert_eq!(b.count(Category::HandwritingContaining), 30);
        assert_eq!(b.count(Category::BackgroundOnly), 6);
        assert_eq!(b.entries.len(), 66);
        assert_eq!(b.header.balance.as_ref().unwrap().source_entries, 150);
    }

    #[test]
    fn balance_keeps_equal_counts_in_full_and_is_a_subset() {
        let m = counts(20, 20, 3);
        let b = balance(&m, GenSeed(2), 0.5).unwrap();
        assert_eq!(b.count(Category::PrintedOnly), 20);
        assert_eq!(b.count(Category::HandwritingContaining), 20);
        // round(0.5 * 40) = 20 requested, only 3 available.
        assert_eq!(b.count(Category::BackgroundOnly), 3);
        for e in &b.entries {
            assert_eq!(&m.entries[e.index], e);
        }
        assert!(b.entries.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn balance_is_seeded() {
        let m = counts(100, 40, 60);
        let a = balance(&m, GenSeed(3), 0.1).unwrap();
        assert_eq!(a, balance(&m, GenSeed(3), 0.1).unwrap());
        assert_ne!(a.entries, balance(&m, GenSeed(4), 0.1).unwrap().entries);
    }

    #[test]
    fn balance_rejects_missing_text_category() {
        assert!(matches!(
            balance(&counts(10, 0, 5), GenSeed(0), 0.1),
            Err(Error::Unbalanceable(_))
        ));
        assert!(balance(&counts(0, 10, 5), GenSeed(0), 0.1).is_err());
        assert!(balance(&counts(5, 5, 5), GenSeed(0), 1.5).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = balance(&counts(4, 3, 2), GenSeed(9), 0.2).unwrap();
        let text = m.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), m.entries.len() + 1);
        let back = DatasetManifest::from_jsonl(&text, Path::new("")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }
}
