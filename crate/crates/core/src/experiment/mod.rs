//! Experiment configuration and the pipelines behind each CLI subcommand.
//! Every artifact directory holds the resolved config and its hash.

mod ablate;
mod runs;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::textaug::AugmentConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub use ablate::{grid_cells, parse_grid_arg, run_ablate, table4_cells, AblateRequest, AblationOutcome, Cell, GridAxis};
pub use runs::{
    run_augment, run_eval, run_gradcheck, run_synth, run_train, CheckpointMeta, DatasetSpec, EvalRequest,
    GradcheckReport, SplitSelection, SynthRequest, TrainSummary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation, test.
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEncoderKind {
    #[default]
    Toy,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub kind: TextEncoderKind,
    /// Output size of the toy encoder.
    pub dim: usize,
    /// Identity of the frozen toy encoder; not tied to the experiment seed.
    pub seed: u64,
    /// MMEB file of precomputed text embeddings, for `kind = "file"`.
    pub path: Option<PathBuf>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            kind: TextEncoderKind::Toy,
            dim: 64,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub audio_emb: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Global seed; copied into every component seed on resolution.
    pub seed: u64,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub text_encoder: TextEncoderConfig,
}


impl ExperimentConfig {
    /// Parse JSON, reporting the path of the first offending field.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copy the global seed into every component seed.
    pub fn resolved(mut self) -> ExperimentConfig {
        self.augment.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.augment
            .validate()
            .map_err(|(field, msg)| Error::config(format!("augment.{field}"), msg))?;
        self.train.validate()?;
        self.model.validate()?;
        self.eval.subsets().validate()?;
        let f = self.split.fractions;
        if f.iter().any(|&x| x.is_nan() || x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.fractions", "must be three positive fractions summing to 1"));
        }
        match self.text_encoder.kind {
            TextEncoderKind::Toy => {
                if self.text_encoder.dim != self.model.text_dim {
                    return Err(Error::config(
                        "model.text_dim",
                        format!("must equal text_encoder.dim ({})", self.text_encoder.dim),
                    ));
                }
            }
            TextEncoderKind::File => {
                if self.text_encoder.path.is_none() {
                    return Err(Error::config("text_encoder.path", "required when kind is \"file\""));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved config, with the
    /// output directory left out so that reruns elsewhere share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone().resolved();
        c.out_dir = None;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub(crate) fn required<'a>(field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::config(field, "required (set it in the config or pass the flag)"))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Create `dir` for a run with config hash `hash`. A directory that already
/// holds a run is only reused with `force`.
pub(crate) fn prepare_out_dir(dir: &Path, hash: &str, force: bool) -> Result<()> {
    let marker = dir.join("config.sha256");
    if marker.exists() && !force {
        let existing = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
        let existing = existing.trim();
        return Err(Error::InvalidArgument(if existing == hash {
            format!("{} already holds a run with config hash {hash}; pass --force to overwrite", dir.display())
        } else {
            format!(
                "{} holds a run with a different config (hash {existing}); choose another directory or pass --force",
                dir.display()
            )
        }));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<String> {
    let hash = cfg.hash();
    write_text(&dir.join("config.json"), &(cfg.to_json() + "\n"))?;
    write_text(&dir.join("config.sha256"), &(hash.clone() + "\n"))?;
    Ok(hash)
}
