//! Typed experiment configuration.
//!
//! Configurations are TOML documents parsed strictly: unknown keys are
//! errors reported with their full field path.  A `profile` key selects the
//! baseline the document overrides — `desk` (small volumes, quick runs,
//! the default) or `paper-scale` (full-size volumes and batch sizes).
//! Loading materialises every field, so a saved snapshot re-loads to an
//! identical configuration without consulting the profile again, which is
//! what makes runs reproducible from the snapshot alone.

use crate::error::{Error, Result};
use crate::fusion::{FusionMode, GatHeadConfig};
use crate::popgraph::WeightMethod;
use crate::segnet::SegNetConfig;
use crate::synth::SynthConfig;
use crate::trainer::{Architecture, TrainSchedule, TrainTask};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Numeric precision of tensors during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

/// Baseline defaults a configuration file overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    PaperScale,
}

/// Population-graph construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Out-degree of every node.
    pub k: usize,
    /// Minkowski exponent of the feature distance.
    pub p: f64,
    /// Square the distance inside the similarity kernel.
    pub squared_kernel: bool,
    pub weight_method: WeightMethod,
    /// Nearest-neighbour count of the mutual-information estimator.
    pub mi_neighbors: usize,
    /// Averaging repetitions of the (jittered) estimator.
    pub mi_reps: usize,
    /// Training patients attached around each test patient.
    pub context_size: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 7,
            p: 2.0,
            squared_kernel: false,
            weight_method: WeightMethod::MutualInformation,
            mi_neighbors: 3,
            mi_reps: 30,
            context_size: 18,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::Config {
                path: format!("graph.{path}"),
                reason,
            })
        };
        if self.k == 0 {
            return fail("k", "neighbour count must be positive".into());
        }
        if !(self.p.is_finite() && self.p >= 1.0) {
            return fail("p", format!("Minkowski exponent {} must be at least 1", self.p));
        }
        if self.mi_neighbors == 0 || self.mi_reps == 0 {
            return fail("mi_neighbors", "mutual-information estimator parameters must be positive".into());
        }
        if self.context_size == 0 {
            return fail("context_size", "context size must be positive".into());
        }
        Ok(())
    }
}

/// Everything one run (or plan of runs) needs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub precision: Precision,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub task: TrainTask,
    pub architecture: Architecture,
    /// Slices per training stack (test time uses every slice).
    pub slices_per_stack: usize,
    /// Segmentation checkpoint for the frozen-backbone architecture.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_checkpoint: Option<PathBuf>,
    pub synth: SynthConfig,
    pub graph: GraphConfig,
    pub segnet: SegNetConfig,
    pub head: GatHeadConfig,
    pub fusion_mode: FusionMode,
    pub schedule: TrainSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            precision: Precision::F64,
            seed: 0,
            task: TrainTask::Icu,
            architecture: Architecture::UGat,
            slices_per_stack: 4,
            pretrained_checkpoint: None,
            synth: SynthConfig::default(),
            graph: GraphConfig::default(),
            segnet: SegNetConfig::default(),
            head: GatHeadConfig::default(),
            fusion_mode: FusionMode::Concat,
            schedule: TrainSchedule::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: 32³ volumes, stacks of 4, batches of 8.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-scale defaults: 96³ volumes, stacks of 10, batches of 18,
    /// a deeper and wider segmentation network.
    pub fn paper_scale() -> Self {
        ExperimentConfig {
            profile: Profile::PaperScale,
            slices_per_stack: 10,
            synth: SynthConfig {
                n_patients: 132,
                shape: [96, 96, 96],
                ..SynthConfig::default()
            },
            segnet: SegNetConfig {
                base_filters: 32,
                depth: 4,
                input_size: (96, 96),
                embed_dim: 64,
                ..SegNetConfig::default()
            },
            schedule: TrainSchedule {
                batch: 18,
                ..TrainSchedule::default()
            },
            ..Self::default()
        }
    }

    fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::PaperScale => Self::paper_scale(),
        }
    }

    /// Parse a TOML document over its profile's defaults.  Unknown keys
    /// anywhere are errors carrying the offending field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            path: String::new(),
            reason: format!("not valid TOML: {e}"),
        })?;
        let overrides = toml::Value::Table(overrides);
        let profile = match overrides.get("profile") {
            None => Profile::default(),
            Some(v) => {
                let name = v.as_str().ok_or_else(|| Error::Config {
                    path: "profile".into(),
                    reason: format!("expected a string, got {v}"),
                })?;
                match name {
                    "desk" => Profile::Desk,
                    "paper-scale" => Profile::PaperScale,
                    other => {
                        return Err(Error::Config {
                            path: "profile".into(),
                            reason: format!("unknown profile '{other}', expected desk|paper-scale"),
                        })
                    }
                }
            }
        };
        let mut merged = toml::Value::try_from(Self::for_profile(profile)).map_err(|e| {
            Error::Config {
                path: String::new(),
                reason: format!("serialising profile defaults failed: {e}"),
            }
        })?;
        deep_merge(&mut merged, overrides);
        let cfg: Self = serde_path_to_error::deserialize(merged).map_err(|e| Error::Config {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    /// Fully materialised TOML snapshot; re-loading it reproduces this
    /// configuration exactly.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            path: String::new(),
            reason: format!("serialising config failed: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)
            .map_err(|e| Error::io(format!("writing config {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.graph.validate()?;
        self.segnet.validate()?;
        self.schedule.validate()?;
        if self.slices_per_stack == 0 {
            return Err(Error::Config {
                path: "slices_per_stack".into(),
                reason: "must be positive".into(),
            });
        }
        if self.slices_per_stack > self.synth.shape[0] {
            return Err(Error::Config {
                path: "slices_per_stack".into(),
                reason: format!(
                    "stack of {} slices exceeds the volume depth {}",
                    self.slices_per_stack, self.synth.shape[0]
                ),
            });
        }
        if self.architecture.uses_image()
            && self.segnet.input_size != (self.synth.shape[1], self.synth.shape[2])
        {
            return Err(Error::Config {
                path: "segnet.input_size".into(),
                reason: format!(
                    "network expects {:?} slices but volumes are {:?}",
                    self.segnet.input_size,
                    (self.synth.shape[1], self.synth.shape[2])
                ),
            });
        }
        if self.architecture == Architecture::UGatPretrained && self.pretrained_checkpoint.is_none()
        {
            return Err(Error::Config {
                path: "pretrained_checkpoint".into(),
                reason: "the frozen-backbone architecture needs a segmentation checkpoint".into(),
            });
        }
        if self.architecture == Architecture::SegOnly && self.task != TrainTask::SegOnly {
            return Err(Error::Config {
                path: "architecture".into(),
                reason: "seg-only architecture requires task = \"seg-only\"".into(),
            });
        }
        if self.task == TrainTask::SegOnly && self.architecture != Architecture::SegOnly {
            return Err(Error::Config {
                path: "task".into(),
                reason: "the seg-only task trains only the seg-only architecture".into(),
            });
        }
        Ok(())
    }
}

/// Recursively overlay `over` onto `base` (tables merge, scalars replace).
fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_desk_profile() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::desk());
        assert_eq!(cfg.schedule.batch, 8);
        assert_eq!(cfg.synth.shape, [32, 32, 32]);
    }

    #[test]
    fn profile_selects_paper_scale_defaults() {
        let cfg = ExperimentConfig::from_toml_str("profile = \"paper-scale\"").unwrap();
        assert_eq!(cfg.schedule.batch, 18);
        assert_eq!(cfg.synth.shape, [96, 96, 96]);
        assert_eq!(cfg.slices_per_stack, 10);
        assert_eq!(cfg.segnet.depth, 4);
    }

    #[test]
    fn overrides_merge_deeply_over_the_profile() {
        let cfg = ExperimentConfig::from_toml_str(
            "profile = \"paper-scale\"\n\
             task = \"mort\"\n\
             [schedule]\n\
             lr = 1e-3\n\
             [graph]\n\
             k = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.task, TrainTask::Mort);
        assert_eq!(cfg.schedule.lr, 1e-3);
        assert_eq!(cfg.schedule.batch, 18, "untouched profile default survives");
        assert_eq!(cfg.graph.k, 5);
        assert_eq!(cfg.graph.mi_reps, 30);
    }

    #[test]
    fn unknown_keys_fail_with_their_field_path() {
        let err = ExperimentConfig::from_toml_str("[schedule]\nlearning_rate = 1e-3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("schedule"), "{err}");
        let err = ExperimentConfig::from_toml_str("frobnicate = 3\n").unwrap_err().to_string();
        assert!(err.contains("frobnicate"), "{err}");
        let err = ExperimentConfig::from_toml_str("profile = \"cluster\"").unwrap_err().to_string();
        assert!(err.contains("profile"), "{err}");
    }

    #[test]
    fn invalid_values_fail_validation_with_paths() {
        let err = ExperimentConfig::from_toml_str("[graph]\nk = 0\n").unwrap_err().to_string();
        assert!(err.contains("graph.k"), "{err}");
        let err = ExperimentConfig::from_toml_str("slices_per_stack = 64\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("slices_per_stack"), "{err}");
        let err = ExperimentConfig::from_toml_str("architecture = \"u-gat-pretrained\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("pretrained_checkpoint"), "{err}");
    }

    #[test]
    fn snapshots_round_trip_identically() {
        let mut cfg = ExperimentConfig::paper_scale();
        cfg.seed = 1234;
        cfg.task = TrainTask::Multilabel;
        cfg.architecture = Architecture::Sage;
        cfg.schedule.lr = 2.5e-4;
        cfg.graph.squared_kernel = true;
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        // And a desk snapshot too (different profile defaults in play).
        let desk = ExperimentConfig::desk();
        let back = ExperimentConfig::from_toml_str(&desk.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, desk);
    }

    #[test]
    fn mismatched_geometry_is_caught() {
        let err = ExperimentConfig::from_toml_str("[synth]\nshape = [32, 64, 64]\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("segnet.input_size"), "{err}");
    }
}
