//! Run configuration: defaults, then an optional TOML file, then flags.

use std::path::Path;

use docsynth::inference::InferenceParams;
use docsynth::pipeline::E2eConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Every tunable of every subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: E2eConfig,
    /// Post-processing used by `infer` and model-based `eval`.
    pub inference: InferenceParams,
}

impl RunConfig {
    /// Reads a TOML config, or the `config` object of a JSON provenance record.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Record {
                config: RunConfig,
            }
            let record: Record = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("invalid provenance record {}: {e}", path.display())))?;
            return Ok(record.config);
        }
        toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let p = &self.pipeline;
        p.generator.validate()?;
        p.documents.validate()?;
        p.train.validate()?;
        p.augment.validate()?;
        p.grid.validate()?;
        self.inference.validate()?;
        if p.corpus_patches == 0 || p.dataset_patches == 0 {
            return Err(CliError::validation("patch counts must be at least 1"));
        }
        Ok(())
    }
}
