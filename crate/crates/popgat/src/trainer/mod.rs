//! Nested cross-validation training of the multimodal models.
//!
//! A [`folds::FoldPlan`] fixes twenty train/validation/test splits.  For
//! each split, [`engine::run_single`] fits the architecture under a
//! [`TrainSchedule`] (Adam, staged pretraining, early stopping on
//! validation loss, best-validation checkpointing) and evaluates the held
//! out fold.  All data-dependent statistics — imputation means, z-scoring,
//! graph feature weights, the similarity kernel's mean distance — are
//! fitted on the training fold alone.  Every run is bit-reproducible from
//! its (configuration, seed) pair.

pub mod augment;
pub mod data;
pub mod engine;
pub mod folds;
pub mod model;
pub mod subsample;

pub use augment::{augment_mask, augment_pair, augment_volume, AugmentParams};
pub use data::{fusion_features, PreparedCohort, PreparedPatient};
pub use engine::{run_plan, run_single, FittedStats, PlanResult, RunContext};
pub use folds::{make_fold_plan, FoldAssignment, FoldPlan, INNER_ROTATIONS, OUTER_FOLDS, RUNS_PER_PLAN};
pub use model::ModelBundle;
pub use subsample::{central_stack, equidistant_stacks, random_stack};

use crate::error::{Error, Result};
use crate::metrics::{mean_std, MeanStd};
use crate::popgraph::severity_encode;
use crate::tabular::{Outcomes, Task};
use serde::{Deserialize, Serialize};

/// What the run optimises and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTask {
    Icu,
    Vent,
    Mort,
    /// All three outcomes at once through three sigmoid outputs.
    Multilabel,
    /// Segmentation only; the classification head is unused.
    SegOnly,
}

impl TrainTask {
    pub fn name(&self) -> &'static str {
        match self {
            TrainTask::Icu => "icu",
            TrainTask::Vent => "vent",
            TrainTask::Mort => "mort",
            TrainTask::Multilabel => "multilabel",
            TrainTask::SegOnly => "seg-only",
        }
    }

    /// Number of classification outputs (zero for segmentation-only).
    pub fn n_labels(&self) -> usize {
        match self {
            TrainTask::Multilabel => 3,
            TrainTask::SegOnly => 0,
            _ => 1,
        }
    }

    pub fn single(&self) -> Option<Task> {
        match self {
            TrainTask::Icu => Some(Task::Icu),
            TrainTask::Vent => Some(Task::Vent),
            TrainTask::Mort => Some(Task::Mort),
            _ => None,
        }
    }

    /// Names of the predicted labels, aligned with [`TrainTask::n_labels`].
    pub fn label_names(&self) -> Vec<&'static str> {
        match self {
            TrainTask::Multilabel => vec!["icu", "vent", "mort"],
            TrainTask::SegOnly => vec![],
            single => vec![match single {
                TrainTask::Icu => "icu",
                TrainTask::Vent => "vent",
                TrainTask::Mort => "mort",
                _ => unreachable!(),
            }],
        }
    }

    /// Classification targets for one patient, aligned with `label_names`.
    pub fn targets(&self, o: &Outcomes) -> Vec<f64> {
        match self {
            TrainTask::Multilabel => {
                vec![f64::from(o.icu), f64::from(o.vent), f64::from(o.mort)]
            }
            TrainTask::SegOnly => vec![],
            _ => vec![f64::from(o.get(self.single().unwrap()))],
        }
    }

    /// Discrete target for mutual-information feature weighting: the
    /// binary outcome for single tasks, ordinal severity for multilabel.
    pub fn graph_label(&self, o: &Outcomes) -> u32 {
        match self {
            TrainTask::Multilabel => severity_encode(o),
            TrainTask::SegOnly => u32::from(o.icu),
            _ => u32::from(o.get(self.single().unwrap())),
        }
    }

    /// Binary label used for fold stratification (ICU when the task has
    /// no single binary outcome of its own).
    pub fn stratify_label(&self, o: &Outcomes) -> u8 {
        match self {
            TrainTask::Multilabel | TrainTask::SegOnly => u8::from(o.icu),
            _ => u8::from(o.get(self.single().unwrap())),
        }
    }
}

/// Model families compared in the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Segmentation network + fusion + graph attention head.
    UGat,
    /// Same, but the segmentation network is loaded frozen from a
    /// segmentation-only checkpoint and only the head trains.
    UGatPretrained,
    /// Graph attention replaced by GraphSAGE layers.
    Sage,
    /// Graph head replaced by a per-patient MLP (same fused features).
    Mlp,
    /// Metadata-only MLP baseline (no image, no graph).
    MlpMetadata,
    /// Plain convolutional encoder + fusion + MLP (no segmentation task).
    ConvMlp,
    /// Segmentation network alone.
    SegOnly,
    /// Unweighted k-nearest-neighbour vote over the node features.
    Knn,
    /// Similarity-weighted k-nearest-neighbour vote.
    Wknn,
}

impl Architecture {
    pub const ALL: [Architecture; 9] = [
        Architecture::UGat,
        Architecture::UGatPretrained,
        Architecture::Sage,
        Architecture::Mlp,
        Architecture::MlpMetadata,
        Architecture::ConvMlp,
        Architecture::SegOnly,
        Architecture::Knn,
        Architecture::Wknn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::UGat => "u-gat",
            Architecture::UGatPretrained => "u-gat-pretrained",
            Architecture::Sage => "sage",
            Architecture::Mlp => "mlp",
            Architecture::MlpMetadata => "mlp-metadata",
            Architecture::ConvMlp => "conv-mlp",
            Architecture::SegOnly => "seg-only",
            Architecture::Knn => "knn",
            Architecture::Wknn => "wknn",
        }
    }

    /// Whether the model consumes the image volume at all.
    pub fn uses_image(&self) -> bool {
        !matches!(
            self,
            Architecture::MlpMetadata | Architecture::Knn | Architecture::Wknn
        )
    }

    /// Whether a population graph is built over the fused features.
    pub fn uses_graph(&self) -> bool {
        matches!(
            self,
            Architecture::UGat | Architecture::UGatPretrained | Architecture::Sage
        )
    }

    /// Whether the model trains by gradient descent.
    pub fn is_neural(&self) -> bool {
        !matches!(self, Architecture::Knn | Architecture::Wknn)
    }

    /// Whether the segmentation sub-network participates (and its Dice
    /// loss enters the objective).
    pub fn has_segmentation(&self) -> bool {
        matches!(
            self,
            Architecture::UGat
                | Architecture::UGatPretrained
                | Architecture::Sage
                | Architecture::Mlp
                | Architecture::SegOnly
        )
    }

    pub fn segnet_frozen(&self) -> bool {
        matches!(self, Architecture::UGatPretrained)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument {
                op: "architecture",
                reason: format!(
                    "unknown architecture '{s}', expected one of {:?}",
                    Architecture::ALL.map(|a| a.name())
                ),
            })
    }
}

/// Optimisation schedule shared by all neural runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    /// Patients per gradient step.
    pub batch: usize,
    /// Patients sampled (without replacement) per epoch.
    pub epoch_size: usize,
    /// Earliest epoch count before early stopping may trigger.
    pub min_epochs: usize,
    /// `min_epochs` when the segmentation network arrives pretrained.
    pub min_epochs_pretrained: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Hard cap on epochs.
    pub max_epochs: usize,
    /// Epochs during which the segmentation loss sees lung-only labels
    /// (healthy lung vs everything else).
    pub pretrain_lung_epochs: usize,
    /// Epochs before the classification loss switches on.
    pub pretrain_cls_epochs: usize,
    /// Random affine + intensity augmentation during training.
    pub augment: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr: 5e-4,
            weight_decay: 3e-5,
            batch: 8,
            epoch_size: 80,
            min_epochs: 25,
            min_epochs_pretrained: 5,
            patience: 5,
            max_epochs: 60,
            pretrain_lung_epochs: 10,
            pretrain_cls_epochs: 20,
            augment: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::Config {
                path: format!("schedule.{path}"),
                reason,
            })
        };
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be finite and non-negative".into());
        }
        if self.batch == 0 || self.epoch_size == 0 {
            return fail("batch", "batch and epoch_size must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience", "patience must be at least one epoch".into());
        }
        if self.patience > self.min_epochs || self.patience > self.min_epochs_pretrained {
            return fail(
                "patience",
                format!(
                    "patience {} must not exceed min_epochs {} (pretrained: {})",
                    self.patience, self.min_epochs, self.min_epochs_pretrained
                ),
            );
        }
        if self.pretrain_lung_epochs > self.pretrain_cls_epochs {
            return fail(
                "pretrain_lung_epochs",
                format!(
                    "lung-only phase ({}) cannot outlast the classification warm-up ({})",
                    self.pretrain_lung_epochs, self.pretrain_cls_epochs
                ),
            );
        }
        if self.max_epochs < self.min_epochs {
            return fail(
                "max_epochs",
                format!("max_epochs {} below min_epochs {}", self.max_epochs, self.min_epochs),
            );
        }
        Ok(())
    }

    /// Minimum epochs for the given architecture (pretrained backbones
    /// fine-tune for less).
    pub fn effective_min_epochs(&self, arch: Architecture) -> usize {
        if arch.segnet_frozen() {
            self.min_epochs_pretrained
        } else {
            self.min_epochs
        }
    }

    /// First epoch of the final training phase; validation-loss tracking
    /// for early stopping starts here because earlier phases optimise a
    /// different (partial) objective.
    pub fn final_phase_start(&self, arch: Architecture, task: TrainTask) -> usize {
        if !arch.has_segmentation() || arch.segnet_frozen() {
            0
        } else if task == TrainTask::SegOnly {
            self.pretrain_lung_epochs
        } else {
            self.pretrain_cls_epochs
        }
    }
}

/// One epoch's learning-curve entry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Average precision on validation (NaN when the task has no labels).
    pub val_ap: f64,
}

/// Test-fold evaluation of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub outer: usize,
    pub inner: usize,
    pub epochs_trained: usize,
    /// Epoch whose weights were kept (best validation loss).
    pub best_epoch: usize,
    /// Per-label values, aligned with [`TrainTask::label_names`].
    pub threshold: Vec<f64>,
    pub ap: Vec<f64>,
    pub auc: Vec<f64>,
    pub bacc: Vec<f64>,
    pub f1: Vec<f64>,
    /// Merged-pathology and healthy-lung Dice over the test fold, when
    /// the architecture segments.
    pub dice_pathology: Option<f64>,
    pub dice_healthy: Option<f64>,
}

impl RunMetrics {
    pub fn macro_ap(&self) -> f64 {
        mean_of(&self.ap)
    }
    pub fn macro_auc(&self) -> f64 {
        mean_of(&self.auc)
    }
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Aggregate over all runs of a plan, mirroring the report layout
/// `{task, architecture, ap, auc, bacc, f1}` with mean ± std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub architecture: String,
    pub n_runs: usize,
    pub ap: MeanStd,
    pub auc: MeanStd,
    pub bacc: MeanStd,
    pub f1: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_pathology: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice_healthy: Option<MeanStd>,
    pub runs: Vec<RunMetrics>,
}

impl MetricsReport {
    pub fn from_runs(task: TrainTask, arch: Architecture, runs: Vec<RunMetrics>) -> Self {
        let collect = |f: fn(&RunMetrics) -> &Vec<f64>| -> Vec<f64> {
            runs.iter().map(|r| mean_of(f(r))).filter(|v| v.is_finite()).collect()
        };
        let dices = |f: fn(&RunMetrics) -> Option<f64>| -> Option<MeanStd> {
            let v: Vec<f64> = runs.iter().filter_map(f).collect();
            if v.is_empty() {
                None
            } else {
                Some(mean_std(&v))
            }
        };
        MetricsReport {
            task: task.name().into(),
            architecture: arch.name().into(),
            n_runs: runs.len(),
            ap: mean_std(&collect(|r| &r.ap)),
            auc: mean_std(&collect(|r| &r.auc)),
            bacc: mean_std(&collect(|r| &r.bacc)),
            f1: mean_std(&collect(|r| &r.f1)),
            dice_pathology: dices(|r| r.dice_pathology),
            dice_healthy: dices(|r| r.dice_healthy),
            runs,
        }
    }
}

/// Arithmetic mean of member probability vectors (the inner-loop
/// ensemble).  Expects the four inner models; other counts are tolerated
/// with a warning.
pub fn ensemble_average(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::InvalidArgument {
            op: "ensemble_average",
            reason: "no member predictions".into(),
        });
    }
    if members.len() != INNER_ROTATIONS {
        log::warn!(
            "ensemble_average: averaging {} members, expected {INNER_ROTATIONS}",
            members.len()
        );
    }
    let n = members[0].len();
    if members.iter().any(|m| m.len() != n) {
        return Err(Error::InvalidArgument {
            op: "ensemble_average",
            reason: "member prediction vectors differ in length".into(),
        });
    }
    let scale = 1.0 / members.len() as f64;
    Ok((0..n)
        .map(|i| members.iter().map(|m| m[i]).sum::<f64>() * scale)
        .collect())
}
