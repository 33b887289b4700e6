//! The experiment configuration file: one TOML document holding every
//! stage's settings plus the global seed and output root.
//!
//! Stage seeds and the global seed interact as follows. Every stage section
//! has its own `seed` field, but a config usually sets only the global
//! `seed`; loading then derives each stage seed from it through a named
//! substream. A stage seed written explicitly in the file wins over the
//! derived one, which is how a single stage can be re-randomized without
//! disturbing the rest of the pipeline.
//!
//! Unknown keys anywhere in the document are errors, so typos fail loudly
//! instead of silently running defaults.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{LilError, Result};
use crate::procgen::{DZ_MIN, N_LIGHTS};
use crate::rng;
use crate::search::SearchConfig;
use crate::trainer::{RegTrainConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcgenConfig {
    pub n_scenes: usize,
    pub k_lights: usize,
    pub dz: usize,
    pub seed: u64,
}

impl Default for ProcgenConfig {
    fn default() -> Self {
        ProcgenConfig {
            n_scenes: 2000,
            k_lights: 1,
            dz: 64,
            seed: 0,
        }
    }
}

/// Which teacher supplies offset-search targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// "oracle", "regressor", or "external".
    pub name: String,
    /// Exchange directory for the external teacher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exchange_dir: Option<PathBuf>,
    pub timeout_s: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            name: "oracle".into(),
            exchange_dir: None,
            timeout_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelightConfig {
    /// How many lighting-table entries get an offset.
    pub k: usize,
}

impl Default for RelightConfig {
    fn default() -> Self {
        RelightConfig { k: N_LIGHTS }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_scenes: usize,
    pub seed: u64,
    /// Scenes shown in the qualitative grid.
    pub qualitative: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_scenes: 50,
            seed: 0,
            qualitative: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub n_scenes: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            n_scenes: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_root: PathBuf,
    pub procgen: ProcgenConfig,
    pub trainer: TrainConfig,
    pub baseline: RegTrainConfig,
    pub teacher: TeacherConfig,
    pub search: SearchConfig,
    pub relight: RelightConfig,
    pub eval: EvalConfig,
    pub robustness: RobustnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out_root: PathBuf::from("runs/default"),
            procgen: ProcgenConfig::default(),
            trainer: TrainConfig::default(),
            baseline: RegTrainConfig::default(),
            teacher: TeacherConfig::default(),
            search: SearchConfig::default(),
            relight: RelightConfig::default(),
            eval: EvalConfig::default(),
            robustness: RobustnessConfig::default(),
        }
    }
}

/// Stage sections and the substream label their seed derives from.
const SEED_STAGES: [(&str, &str); 6] = [
    ("procgen", "stage/procgen"),
    ("trainer", "stage/trainer"),
    ("baseline", "stage/baseline"),
    ("search", "stage/search"),
    ("eval", "stage/eval"),
    ("robustness", "stage/robustness"),
];

fn has_explicit_seed(raw: &toml::Value, section: &str) -> bool {
    raw.get(section)
        .and_then(|s| s.get("seed"))
        .is_some()
}

/// TOML integers are i64, so derived seeds are masked into that range to
/// keep the resolved config serializable.
fn derive_seed(global: u64, label: &str) -> u64 {
    rng::substream_seed(global, label) & (i64::MAX as u64)
}

impl ExperimentConfig {
    /// Parses a TOML document and resolves stage seeds against the global
    /// seed. `seed_override` (the `--seed` flag) replaces the global seed
    /// before resolution, so it re-randomizes every derived stage.
    pub fn from_toml(text: &str, seed_override: Option<u64>) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LilError::Config(e.to_string()))?;
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| LilError::Config(e.to_string()))?;
        if let Some(seed) = seed_override {
            if seed > i64::MAX as u64 {
                return Err(LilError::Config(format!(
                    "seed {seed} does not fit a TOML integer"
                )));
            }
            cfg.seed = seed;
        }
        for (section, label) in SEED_STAGES {
            if seed_override.is_some() || !has_explicit_seed(&raw, section) {
                let derived = derive_seed(cfg.seed, label);
                match section {
                    "procgen" => cfg.procgen.seed = derived,
                    "trainer" => cfg.trainer.seed = derived,
                    "baseline" => cfg.baseline.seed = derived,
                    "search" => cfg.search.seed = derived,
                    "eval" => cfg.eval.seed = derived,
                    "robustness" => cfg.robustness.seed = derived,
                    _ => unreachable!(),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| LilError::io(path, e))?;
        Self::from_toml(&text, seed_override)
    }

    pub fn validate(&self) -> Result<()> {
        if self.procgen.n_scenes == 0 {
            return Err(LilError::Config("procgen.n_scenes must be positive".into()));
        }
        if self.procgen.dz < DZ_MIN {
            return Err(LilError::Config(format!(
                "procgen.dz must be at least {DZ_MIN}, got {}",
                self.procgen.dz
            )));
        }
        if self.relight.k == 0 || self.relight.k > N_LIGHTS {
            return Err(LilError::Config(format!(
                "relight.k must be in 1..={N_LIGHTS}, got {}",
                self.relight.k
            )));
        }
        if self.eval.n_scenes == 0 || self.robustness.n_scenes == 0 {
            return Err(LilError::Config("evaluation scene counts must be positive".into()));
        }
        match self.teacher.name.as_str() {
            "oracle" | "regressor" => {}
            "external" => {
                if self.teacher.exchange_dir.is_none() {
                    return Err(LilError::Config(
                        "teacher.exchange_dir is required for the external teacher".into(),
                    ));
                }
            }
            other => {
                return Err(LilError::Config(format!(
                    "unknown teacher '{other}' (expected oracle, regressor, or external)"
                )))
            }
        }
        self.trainer.validate()?;
        self.search.validate()?;
        Ok(())
    }

    /// Serializes the fully resolved config (all seeds concrete) so a run
    /// directory records exactly what produced it.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| LilError::Config(e.to_string()))?;
        crate::io::atomic_write(path, text.as_bytes())
    }
}
