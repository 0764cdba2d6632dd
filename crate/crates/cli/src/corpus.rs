//! The generated corpus: rendered patches, their labels and the seeds that
//! reproduce their feature stacks.

use std::path::{Path, PathBuf};

use docsynth::docgen::{generate_patch, FeatureStack, GenConfig};
use docsynth::io::{encode_label_png, encode_rgb_png, read_bytes, sha256_hex, write_atomic};
use docsynth::pipeline::corpus_seed;
use docsynth::{GenSeed, LabelImage, RgbRaster};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, ResultExt};

pub const CORPUS_DIR: &str = "corpus";
pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub index: usize,
    pub seed: GenSeed,
    pub image: String,
    pub label: String,
    pub image_sha256: String,
    pub label_sha256: String,
    /// Present when stacks were exported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: GenSeed,
    pub generator: GenConfig,
    pub entries: Vec<CorpusEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(CORPUS_DIR).join(CORPUS_MANIFEST)
    }

    pub fn load(run_dir: &Path) -> CliResult<Self> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Err(CliError::validation(format!(
                "no corpus at {}; run `gen-corpus` first",
                path.display()
            )));
        }
        let bytes = read_bytes(&path)?;
        let mut m: CorpusManifest = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::validation(format!("invalid corpus manifest: {e}")))?;
        m.root = run_dir.join(CORPUS_DIR);
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    fn entry(&self, index: usize) -> CliResult<&CorpusEntry> {
        self.entries
            .get(index)
            .ok_or_else(|| CliError::validation(format!("corpus has no patch {index}")))
    }

    /// Stored PNG bytes of a patch, hash-checked.
    pub fn image_bytes(&self, index: usize) -> CliResult<Vec<u8>> {
        let e = self.entry(index)?;
        checked(&self.root.join(&e.image), &e.image_sha256)
    }

    pub fn image(&self, index: usize) -> CliResult<RgbRaster> {
        Ok(docsynth::io::decode_rgb_png(&self.image_bytes(index)?)?)
    }

    pub fn label(&self, index: usize) -> CliResult<LabelImage> {
        let e = self.entry(index)?;
        Ok(docsynth::io::decode_label_png(&checked(&self.root.join(&e.label), &e.label_sha256)?)?)
    }

    /// Regenerates the feature stack of a patch and checks that the
    /// generator still renders the stored image.
    pub fn stack(&self, index: usize) -> CliResult<FeatureStack> {
        let e = self.entry(index)?;
        let (image, _, stack) = generate_patch(e.seed, &self.generator)?;
        if sha256_hex(&encode_rgb_png(&image)?) != e.image_sha256 {
            return Err(CliError::validation(format!(
                "corpus patch {index} no longer matches its seed; regenerate the corpus"
            )));
        }
        Ok(stack)
    }
}

fn checked(path: &Path, expected: &str) -> CliResult<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(docsynth::Error::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            actual,
        }
        .into());
    }
    Ok(bytes)
}

/// Renders `n` corpus patches into `run_dir/corpus`.
pub fn generate(
    run_dir: &Path,
    n: usize,
    seed: GenSeed,
    config: &GenConfig,
    export_stacks: bool,
) -> CliResult<CorpusManifest> {
    if n == 0 {
        return Err(CliError::validation("corpus needs at least one patch"));
    }
    config.validate()?;
    let root = run_dir.join(CORPUS_DIR);
    for sub in ["patches", "labels", "stacks"].iter().take(if export_stacks { 3 } else { 2 }) {
        std::fs::create_dir_all(root.join(sub)).ctx(format!("creating {}", root.join(sub).display()))?;
    }
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let s = corpus_seed(seed, index);
        let (image, label, stack) = generate_patch(s, config)?;
        let image_bytes = encode_rgb_png(&image)?;
        let label_bytes = encode_label_png(&label)?;
        let image_path = format!("patches/{index:06}.png");
        let label_path = format!("labels/{index:06}.png");
        write_atomic(&root.join(&image_path), &image_bytes)?;
        write_atomic(&root.join(&label_path), &label_bytes)?;
        let stack_path = if export_stacks {
            let p = format!("stacks/{index:06}.bin");
            write_atomic(&root.join(&p), &stack.to_bytes())?;
            Some(p)
        } else {
            None
        };
        entries.push(CorpusEntry {
            index,
            seed: s,
            image: image_path,
            label: label_path,
            image_sha256: sha256_hex(&image_bytes),
            label_sha256: sha256_hex(&label_bytes),
            stack: stack_path,
        });
    }
    let manifest = CorpusManifest { seed, generator: *config, entries, root: root.clone() };
    write_atomic(&root.join(CORPUS_MANIFEST), manifest.to_json().as_bytes())?;
    Ok(manifest)
}
