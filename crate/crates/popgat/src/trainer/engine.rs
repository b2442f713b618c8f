//! The run engine: per-fold statistics, the epoch loop, evaluation and
//! artifact writing.
//!
//! One call to [`run_single`] executes a complete train/validate/test run
//! for one fold assignment; [`run_plan`] maps it over all twenty runs of a
//! fold plan.  Every random decision draws from a stream derived from
//! `(seed, purpose, run index)`, so results are bit-reproducible and runs
//! are independent of execution order.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{knn_classify, wknn_classify, write_predictions_csv, PredictionRow};
use crate::gnn::{AttentionExport, AttentionTrace, EdgeList};
use crate::metrics::{
    average_precision, dice_summary, roc_auc, thresholded_metrics, youden_threshold, DiceSummary,
};
use crate::popgraph::{attach_test_node, fit_weights, knn_graph, FeatureWeights, PopulationGraph};
use crate::radiomics::extract_radiomics;
use crate::rng::stream_indexed;
use crate::scalar::Scalar;
use crate::tabular::{Preprocessor, StandardScaler, METADATA_COLUMNS};
use crate::tensor::{load_checkpoint_into, save_checkpoint, Adam, ParamStore, Tape, TensorId};
use crate::trainer::augment::AugmentParams;
use crate::trainer::data::{fusion_features, PreparedCohort};
use crate::trainer::folds::{make_fold_plan, FoldAssignment, FoldPlan, INNER_ROTATIONS};
use crate::trainer::model::ModelBundle;
use crate::trainer::subsample::{central_stack, random_stack};
use crate::trainer::{
    Architecture, EpochRow, MetricsReport, RunMetrics, TrainTask,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

const DICE_EPS: f64 = 1e-6;

/// Fold-local preprocessing state.  Everything here is a function of the
/// training fold alone; validation and test patients only ever pass
/// through `transform`-style calls.
#[derive(Debug, Clone)]
pub struct FittedStats {
    /// Imputation + z-scoring of the metadata columns.
    pub metadata_prep: Preprocessor,
    /// Z-scoring of the four radiomics features.
    pub radiomics_scaler: StandardScaler,
    /// Feature weights over the 18 node features (metadata ‖ radiomics).
    pub weights: FeatureWeights,
}

impl FittedStats {
    pub fn fit(
        cohort: &PreparedCohort,
        train: &[usize],
        task: TrainTask,
        graph: &crate::config::GraphConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument {
                op: "FittedStats::fit",
                reason: "empty training fold".into(),
            });
        }
        let meta_rows: Vec<&[Option<f64>]> = train
            .iter()
            .map(|&i| cohort.patients[i].metadata.as_slice())
            .collect();
        let metadata_prep = Preprocessor::fit(&meta_rows, &METADATA_COLUMNS)?;
        let scan_vol = cohort.scan_volume_mm3();
        let rad_rows: Vec<Vec<f64>> = train
            .iter()
            .map(|&i| fusion_features(&cohort.patients[i].gt_radiomics, scan_vol).to_vec())
            .collect();
        let radiomics_scaler = StandardScaler::fit(&rad_rows)?;
        let mut node_rows = Vec::with_capacity(train.len());
        for (&i, rad) in train.iter().zip(&rad_rows) {
            let mut row = metadata_prep.transform(&cohort.patients[i].metadata)?;
            row.extend(radiomics_scaler.transform(rad)?);
            node_rows.push(row);
        }
        let labels: Vec<u32> = train
            .iter()
            .map(|&i| task.graph_label(&cohort.patients[i].outcomes))
            .collect();
        let weights = fit_weights(
            &node_rows,
            &labels,
            graph.weight_method,
            graph.mi_neighbors,
            graph.mi_reps,
            rng,
        )?;
        Ok(FittedStats {
            metadata_prep,
            radiomics_scaler,
            weights,
        })
    }
}

/// Predictions for one label column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelPredictions {
    pub label: String,
    pub rows: Vec<PredictionRow>,
}

/// Attention matrices of one test patient's attachment graph.  Node 0 is
/// the test patient; `context_ids` are the training patients, nearest
/// first, at nodes 1..=len.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientAttention {
    pub id: String,
    pub context_ids: Vec<String>,
    pub export: AttentionExport,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub history: Vec<EpochRow>,
    pub predictions: Vec<LabelPredictions>,
    pub attention: Vec<PatientAttention>,
    /// Test-way validation probabilities per label (threshold fitting).
    pub val_probs: Vec<Vec<f64>>,
    pub val_targets: Vec<Vec<bool>>,
    pub test_probs: Vec<Vec<f64>>,
    pub test_targets: Vec<Vec<bool>>,
    pub test_ids: Vec<String>,
}

/// All runs of one plan plus the aggregated report.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub plan: FoldPlan,
    pub runs: Vec<RunResult>,
    pub report: MetricsReport,
}

/// Identification of one run within a plan (used for stream derivation
/// and artifact naming).
#[derive(Debug, Clone, Copy)]
pub struct RunContext {
    pub outer: usize,
    pub inner: usize,
}

impl RunContext {
    fn index(&self) -> u64 {
        (self.outer * INNER_ROTATIONS + self.inner) as u64
    }
}

struct EngineCtx<'a, T: Scalar> {
    cohort: &'a PreparedCohort,
    cfg: &'a ExperimentConfig,
    fold: &'a FoldAssignment,
    arch: Architecture,
    task: TrainTask,
    stats: FittedStats,
    /// Z-scored metadata, all patients.
    meta_z: Vec<Vec<f64>>,
    /// Z-scored ground-truth radiomics features, all patients.
    rad_z_gt: Vec<Vec<f64>>,
    /// 18-dim node rows (metadata ‖ ground-truth radiomics), all patients.
    node_gt: Vec<Vec<f64>>,
    /// Classification targets, all patients.
    targets: Vec<Vec<f64>>,
    bundle: ModelBundle,
    store: ParamStore<T>,
    s: usize,
    z_full: usize,
    plane: usize,
    augment_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    stack_rng: ChaCha8Rng,
    queue_rng: ChaCha8Rng,
}

struct BatchOut {
    loss: TensorId,
    /// Classification probabilities [B, n_labels] when the head ran.
    probs: Option<TensorId>,
}

/// Cached fused feature rows of the training fold (train-local order).
struct ContextCache<T> {
    rows: Vec<Vec<T>>,
    width: usize,
}

struct ScoredOne {
    probs: Vec<f64>,
    dice: Option<DiceSummary>,
    attention: Option<PatientAttention>,
}

/// Chunk `n` items aiming for `target` per chunk, absorbing a trailing
/// singleton into the previous chunk (heads that normalise over a batch
/// degenerate on single rows).
fn balanced_chunks(n: usize, target: usize) -> Vec<Range<usize>> {
    let t = target.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + t).min(n);
        if n - end == 1 {
            end = n;
        }
        out.push(start..end);
        start = end;
    }
    out
}

/// Per-pixel argmax class of [n, c, hw]-shaped probabilities.
fn predicted_labels<T: Scalar>(probs: &[T], n: usize, classes: usize, hw: usize) -> Vec<u8> {
    let mut out = vec![0u8; n * hw];
    for s in 0..n {
        for px in 0..hw {
            let mut best = 0usize;
            let mut best_v = probs[s * classes * hw + px];
            for c in 1..classes {
                let v = probs[(s * classes + c) * hw + px];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[s * hw + px] = best as u8;
        }
    }
    out
}

fn seg_groups(lung_phase: bool) -> Vec<Vec<usize>> {
    if lung_phase {
        vec![vec![0], vec![1, 2, 3]]
    } else {
        vec![vec![0], vec![1], vec![2], vec![3]]
    }
}

impl<'a, T: Scalar> EngineCtx<'a, T> {
    fn n_labels(&self) -> usize {
        self.task.n_labels()
    }

    /// Extract (augmented) slices `range` of patient `i` as network input
    /// plus flattened ground-truth labels.
    fn stack_data(
        &self,
        i: usize,
        range: &Range<usize>,
        aug: &AugmentParams,
    ) -> Result<(Vec<T>, Vec<u8>)> {
        let p = &self.cohort.patients[i];
        let shape = self.cohort.shape;
        let (vol, mask) = crate::trainer::augment::augment_pair(&p.volume, &p.mask, shape, aug)?;
        let lo = range.start * self.plane;
        let hi = range.end * self.plane;
        let x: Vec<T> = vol[lo..hi].iter().map(|&v| T::from_f64(v as f64)).collect();
        Ok((x, mask[lo..hi].to_vec()))
    }

    /// Image forward for a batch of stacks: optional segmentation
    /// probabilities and the per-patient embedding.
    fn image_forward(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        patients: usize,
        slices: usize,
        training: bool,
    ) -> Result<(Option<TensorId>, TensorId)> {
        if let Some(segnet) = &self.bundle.segnet {
            let out = segnet.forward(tape, &mut self.store, x, training)?;
            let z = segnet.embed(tape, &self.store, out.bottleneck, patients, slices)?;
            Ok((Some(out.probs), z))
        } else if let Some(conv) = &self.bundle.conv {
            let z = conv.embed(tape, &mut self.store, x, patients, slices, training)?;
            Ok((None, z))
        } else {
            Err(Error::InvalidArgument {
                op: "image forward",
                reason: "architecture has no image encoder".into(),
            })
        }
    }

    /// Z-scored radiomics features for one patient's stack, predicted
    /// from the segmentation when available, ground truth otherwise.
    fn stack_radiomics(
        &self,
        tape: &Tape<T>,
        seg_probs: Option<TensorId>,
        batch_pos: usize,
        patient: usize,
        slices: usize,
    ) -> Result<Vec<f64>> {
        match seg_probs {
            Some(probs) => {
                let shape = tape.shape(probs).to_vec();
                let (classes, hw) = (shape[1], shape[2] * shape[3]);
                let data = tape.data(probs);
                let lo = batch_pos * slices * classes * hw;
                let hi = (batch_pos + 1) * slices * classes * hw;
                let mask = predicted_labels(&data[lo..hi], slices, classes, hw);
                let rv = extract_radiomics(&mask, self.cohort.voxel_volume_mm3)?;
                let stack_vol = (slices * hw) as f64 * self.cohort.voxel_volume_mm3;
                self.stats
                    .radiomics_scaler
                    .transform(&fusion_features(&rv, stack_vol))
            }
            None => Ok(self.rad_z_gt[patient].clone()),
        }
    }

    /// One forward pass over a batch of patients: staged segmentation +
    /// classification losses and (when active) the predicted
    /// probabilities.
    #[allow(clippy::too_many_arguments)]
    fn forward_batch(
        &mut self,
        tape: &mut Tape<T>,
        patients: &[usize],
        ranges: &[Range<usize>],
        augs: Option<&[AugmentParams]>,
        training: bool,
        lung_phase: bool,
        cls_on: bool,
    ) -> Result<BatchOut> {
        let b = patients.len();
        let slices = ranges.first().map_or(0, |r| r.len());
        let identity = AugmentParams::identity();

        let mut seg_probs = None;
        let mut z_image = None;
        let mut dice = None;
        if self.arch.uses_image() {
            let mut xdata = Vec::with_capacity(b * slices * self.plane);
            let mut gt: Vec<u8> = Vec::with_capacity(b * slices * self.plane);
            for (bi, (&i, range)) in patients.iter().zip(ranges).enumerate() {
                let aug = augs.map_or(&identity, |a| &a[bi]);
                let (x, m) = self.stack_data(i, range, aug)?;
                xdata.extend(x);
                gt.extend(m);
            }
            let (h, w) = (self.cohort.shape[1], self.cohort.shape[2]);
            let x = tape.leaf(xdata, &[b * slices, 1, h, w], false)?;
            let (probs, z) = self.image_forward(tape, x, b, slices, training)?;
            if let Some(probs) = probs {
                dice = Some(tape.dice_loss(probs, &gt, &seg_groups(lung_phase), T::from_f64(DICE_EPS))?);
                seg_probs = Some(probs);
            }
            z_image = Some(z);
        }

        let mut cls_probs = None;
        let mut bce = None;
        if cls_on {
            let mut rad_rows = Vec::with_capacity(b);
            for (bi, &i) in patients.iter().enumerate() {
                rad_rows.push(self.stack_radiomics(tape, seg_probs, bi, i, slices)?);
            }
            let rad_data: Vec<T> = rad_rows
                .iter()
                .flat_map(|r| r.iter().map(|&v| T::from_f64(v)))
                .collect();
            let rad = tape.leaf(rad_data, &[b, 4], false)?;
            let meta_data: Vec<T> = patients
                .iter()
                .flat_map(|&i| self.meta_z[i].iter().map(|&v| T::from_f64(v)))
                .collect();
            let meta = tape.leaf(meta_data, &[b, self.meta_z[0].len()], false)?;

            let graph = if self.arch.uses_graph() {
                let rows: Vec<Vec<f64>> =
                    patients.iter().map(|&i| self.node_gt[i].clone()).collect();
                let k_eff = self.cfg.graph.k.min(b.saturating_sub(1)).max(1);
                let pg = knn_graph(
                    &rows,
                    &self.stats.weights,
                    k_eff,
                    self.cfg.graph.p,
                    self.cfg.graph.squared_kernel,
                )?;
                Some(EdgeList::from_population(&pg))
            } else {
                None
            };
            let probs = self.bundle.classify(
                tape,
                &mut self.store,
                z_image,
                rad,
                meta,
                graph.as_ref(),
                training,
                if training { Some(&mut self.dropout_rng) } else { None },
                None,
            )?;
            let targets: Vec<T> = patients
                .iter()
                .flat_map(|&i| self.targets[i].iter().map(|&v| T::from_f64(v)))
                .collect();
            bce = Some(tape.bce_loss(probs, &targets)?);
            cls_probs = Some(probs);
        }

        let loss = match (dice, bce) {
            (Some(d), Some(c)) => tape.add(d, c)?,
            (Some(d), None) => d,
            (None, Some(c)) => c,
            (None, None) => {
                return Err(Error::InvalidArgument {
                    op: "forward_batch",
                    reason: "no active loss component".into(),
                })
            }
        };
        Ok(BatchOut {
            loss,
            probs: cls_probs,
        })
    }

    /// Cache eval-mode fused rows of every training patient (ground-truth
    /// radiomics) for use as attachment context at test time.
    fn build_context_cache(&mut self) -> Result<ContextCache<T>> {
        let width = self
            .bundle
            .fusion
            .as_ref()
            .map(|f| f.out_width())
            .ok_or(Error::InvalidArgument {
                op: "context cache",
                reason: "architecture has no fusion block".into(),
            })?;
        let train = self.fold.train.clone();
        let mut rows = Vec::with_capacity(train.len());
        for chunk in balanced_chunks(train.len(), self.cfg.schedule.batch) {
            let patients = &train[chunk];
            let mut tape = Tape::new();
            let full = 0..self.z_full;
            let ranges: Vec<Range<usize>> = vec![full; patients.len()];
            let identity = AugmentParams::identity();
            let mut xdata = Vec::new();
            for &i in patients {
                let (x, _) = self.stack_data(i, &ranges[0], &identity)?;
                xdata.extend(x);
            }
            let (h, w) = (self.cohort.shape[1], self.cohort.shape[2]);
            let x = tape.leaf(xdata, &[patients.len() * self.z_full, 1, h, w], false)?;
            let (_, z) = self.image_forward(&mut tape, x, patients.len(), self.z_full, false)?;
            let rad_data: Vec<T> = patients
                .iter()
                .flat_map(|&i| self.rad_z_gt[i].iter().map(|&v| T::from_f64(v)))
                .collect();
            let rad = tape.leaf(rad_data, &[patients.len(), 4], false)?;
            let meta_data: Vec<T> = patients
                .iter()
                .flat_map(|&i| self.meta_z[i].iter().map(|&v| T::from_f64(v)))
                .collect();
            let meta = tape.leaf(meta_data, &[patients.len(), self.meta_z[0].len()], false)?;
            let fusion = self.bundle.fusion.as_ref().unwrap();
            let z_c = fusion.forward(&mut tape, &self.store, z, rad, meta)?;
            let data = tape.data(z_c);
            for r in 0..patients.len() {
                rows.push(data[r * width..(r + 1) * width].to_vec());
            }
        }
        Ok(ContextCache { rows, width })
    }

    /// Test-way scoring of one patient: full volume, attachment to the
    /// training-fold graph, best-checkpoint weights.
    fn score_patient(
        &mut self,
        i: usize,
        train_graph: Option<&PopulationGraph>,
        train_rows: &[Vec<f64>],
        cache: Option<&ContextCache<T>>,
        collect_attention: bool,
    ) -> Result<ScoredOne> {
        let mut tape = Tape::new();
        let identity = AugmentParams::identity();
        let mut dice = None;
        let mut z_image = None;
        let mut rad_z = self.rad_z_gt[i].clone();
        if self.arch.uses_image() {
            let full = 0..self.z_full;
            let (x, _) = self.stack_data(i, &full, &identity)?;
            let (h, w) = (self.cohort.shape[1], self.cohort.shape[2]);
            let x = tape.leaf(x, &[self.z_full, 1, h, w], false)?;
            let (seg_probs, z) = self.image_forward(&mut tape, x, 1, self.z_full, false)?;
            if let Some(probs) = seg_probs {
                let shape = tape.shape(probs).to_vec();
                let (classes, hw) = (shape[1], shape[2] * shape[3]);
                let mask = predicted_labels(tape.data(probs), self.z_full, classes, hw);
                dice = Some(dice_summary(&mask, &self.cohort.patients[i].mask, classes)?);
                let rv = extract_radiomics(&mask, self.cohort.voxel_volume_mm3)?;
                rad_z = self
                    .stats
                    .radiomics_scaler
                    .transform(&fusion_features(&rv, self.cohort.scan_volume_mm3()))?;
            }
            z_image = Some(z);
        }
        if self.task == TrainTask::SegOnly {
            return Ok(ScoredOne {
                probs: vec![],
                dice,
                attention: None,
            });
        }

        let rad = tape.leaf(rad_z.iter().map(|&v| T::from_f64(v)).collect(), &[1, 4], false)?;
        let meta_row = &self.meta_z[i];
        let meta = tape.leaf(
            meta_row.iter().map(|&v| T::from_f64(v)).collect(),
            &[1, meta_row.len()],
            false,
        )?;

        let n_labels = self.n_labels();
        let (probs, attention) = if self.arch.uses_graph() {
            let graph = train_graph.ok_or(Error::InvalidArgument {
                op: "score_patient",
                reason: "graph architecture without a training graph".into(),
            })?;
            let cache = cache.ok_or(Error::InvalidArgument {
                op: "score_patient",
                reason: "graph architecture without a context cache".into(),
            })?;
            let mut row = meta_row.clone();
            row.extend(rad_z.iter().copied());
            let ctx_size = self
                .cfg
                .graph
                .context_size
                .min(train_rows.len())
                .max(graph.k);
            let att = attach_test_node(graph, train_rows, &row, &self.stats.weights, ctx_size)?;
            let el = EdgeList::from_attachment(&att);
            let fusion = self.bundle.fusion.as_ref().unwrap();
            let zc_own = fusion.forward(&mut tape, &self.store, z_image.unwrap(), rad, meta)?;
            let ctx_data: Vec<T> = att
                .context
                .iter()
                .flat_map(|&t| cache.rows[t].iter().copied())
                .collect();
            let ctx = tape.leaf(ctx_data, &[att.context.len(), cache.width], false)?;
            let zc_all = tape.concat(&[zc_own, ctx], 0)?;
            let mut trace = if collect_attention && self.bundle.gat.is_some() {
                Some(AttentionTrace::new(el.n_nodes))
            } else {
                None
            };
            let out = self.bundle.head_forward(
                &mut tape,
                &mut self.store,
                zc_all,
                Some(&el),
                false,
                None,
                trace.as_mut(),
            )?;
            let attention = trace
                .map(|t| -> Result<PatientAttention> {
                    Ok(PatientAttention {
                        id: self.cohort.patients[i].id.clone(),
                        context_ids: att
                            .context
                            .iter()
                            .map(|&t| self.cohort.patients[self.fold.train[t]].id.clone())
                            .collect(),
                        export: t.export()?,
                    })
                })
                .transpose()?;
            (out, attention)
        } else {
            let out = self.bundle.classify(
                &mut tape,
                &mut self.store,
                z_image,
                rad,
                meta,
                None,
                false,
                None,
                None,
            )?;
            (out, None)
        };
        let data = tape.data(probs);
        Ok(ScoredOne {
            probs: (0..n_labels).map(|l| Scalar::to_f64(data[l])).collect(),
            dice,
            attention,
        })
    }
}

/// Train and evaluate one fold assignment.
pub fn run_single<T: Scalar>(
    cohort: &PreparedCohort,
    cfg: &ExperimentConfig,
    fold: &FoldAssignment,
    out_dir: Option<&Path>,
    collect_attention: bool,
) -> Result<RunResult> {
    let arch = cfg.architecture;
    let task = cfg.task;
    let run = RunContext {
        outer: fold.outer,
        inner: fold.inner,
    };
    let [z_full, h, w] = cohort.shape;
    if arch.uses_image() {
        if cfg.segnet.input_size != (h, w) {
            return Err(Error::Config {
                path: "segnet.input_size".into(),
                reason: format!(
                    "network expects {:?} slices but cohort volumes are {:?}",
                    cfg.segnet.input_size,
                    (h, w)
                ),
            });
        }
        if cfg.slices_per_stack > z_full {
            return Err(Error::Config {
                path: "slices_per_stack".into(),
                reason: format!("stack of {} slices exceeds depth {z_full}", cfg.slices_per_stack),
            });
        }
    }
    cfg.schedule.validate()?;

    let mut mi_rng = stream_indexed(cfg.seed, "mi", run.index());
    let stats = FittedStats::fit(cohort, &fold.train, task, &cfg.graph, &mut mi_rng)?;

    let scan_vol = cohort.scan_volume_mm3();
    let n = cohort.n();
    let mut meta_z = Vec::with_capacity(n);
    let mut rad_z_gt = Vec::with_capacity(n);
    let mut node_gt = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for p in &cohort.patients {
        let m = stats.metadata_prep.transform(&p.metadata)?;
        let r = stats
            .radiomics_scaler
            .transform(&fusion_features(&p.gt_radiomics, scan_vol))?;
        let mut row = m.clone();
        row.extend(r.iter().copied());
        meta_z.push(m);
        rad_z_gt.push(r);
        node_gt.push(row);
        targets.push(task.targets(&p.outcomes));
    }

    if !arch.is_neural() {
        return run_knn(cohort, cfg, fold, &stats, &node_gt, &targets, out_dir);
    }

    let mut init_rng = stream_indexed(cfg.seed, "init", run.index());
    let mut store = ParamStore::<T>::new();
    let bundle = ModelBundle::register(
        &mut store,
        arch,
        task,
        &cfg.segnet,
        &cfg.head,
        cfg.fusion_mode,
        &mut init_rng,
    )?;
    if arch.segnet_frozen() {
        let path = cfg.pretrained_checkpoint.as_ref().ok_or(Error::Config {
            path: "pretrained_checkpoint".into(),
            reason: "frozen backbone requires a checkpoint".into(),
        })?;
        let loaded = load_checkpoint_into(&mut store, path, "segnet")?;
        if loaded == 0 {
            return Err(Error::InvalidArgument {
                op: "run_single",
                reason: format!(
                    "checkpoint {} holds no segmentation parameters",
                    path.display()
                ),
            });
        }
        store.set_trainable_prefix("segnet.", false);
    }

    let mut ctx = EngineCtx {
        cohort,
        cfg,
        fold,
        arch,
        task,
        stats,
        meta_z,
        rad_z_gt,
        node_gt,
        targets,
        bundle,
        store,
        s: cfg.slices_per_stack,
        z_full,
        plane: h * w,
        augment_rng: stream_indexed(cfg.seed, "augment", run.index()),
        dropout_rng: stream_indexed(cfg.seed, "dropout", run.index()),
        stack_rng: stream_indexed(cfg.seed, "stack", run.index()),
        queue_rng: stream_indexed(cfg.seed, "queue", run.index()),
    };

    let (history, best_epoch, epochs_trained) = train_loop(&mut ctx, run)?;
    let eval = evaluate(&mut ctx, collect_attention)?;
    let metrics = assemble_metrics(&ctx, run, epochs_trained, best_epoch, &eval)?;
    let result = RunResult {
        metrics,
        history,
        predictions: eval.predictions,
        attention: eval.attention,
        val_probs: eval.val_probs,
        val_targets: eval.val_targets,
        test_probs: eval.test_probs,
        test_targets: eval.test_targets,
        test_ids: fold
            .test
            .iter()
            .map(|&i| cohort.patients[i].id.clone())
            .collect(),
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, cfg, Some(&ctx.store), &result)?;
    }
    Ok(result)
}

fn train_loop<T: Scalar>(
    ctx: &mut EngineCtx<'_, T>,
    run: RunContext,
) -> Result<(Vec<EpochRow>, usize, usize)> {
    let schedule = ctx.cfg.schedule.clone();
    let arch = ctx.arch;
    let task = ctx.task;
    let min_epochs = schedule.effective_min_epochs(arch);
    let final_phase = schedule.final_phase_start(arch, task);
    let has_trainable_seg = arch.has_segmentation() && !arch.segnet_frozen();

    let mut adam = Adam::new(&ctx.store, schedule.lr, schedule.weight_decay);
    let mut queue = ctx.fold.train.to_vec();
    let mut qpos = queue.len();
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snap: Option<Vec<Vec<T>>> = None;
    let mut bad_epochs = 0usize;
    let mut epochs_trained = 0usize;

    for epoch in 0..schedule.max_epochs {
        epochs_trained = epoch + 1;
        let lung_phase = has_trainable_seg && epoch < schedule.pretrain_lung_epochs;
        let cls_on = task.n_labels() > 0
            && (!has_trainable_seg || epoch >= schedule.pretrain_cls_epochs);

        // --- Training pass over `epoch_size` patients from the queue.
        let mut picked = Vec::with_capacity(schedule.epoch_size);
        while picked.len() < schedule.epoch_size {
            if qpos >= queue.len() {
                queue.shuffle(&mut ctx.queue_rng);
                qpos = 0;
            }
            picked.push(queue[qpos]);
            qpos += 1;
        }
        let mut train_loss_sum = 0.0;
        let mut train_seen = 0usize;
        for chunk in balanced_chunks(picked.len(), schedule.batch) {
            let patients = &picked[chunk];
            let mut ranges = Vec::with_capacity(patients.len());
            let mut augs = Vec::with_capacity(patients.len());
            for _ in patients {
                ranges.push(if ctx.arch.uses_image() {
                    random_stack(ctx.z_full, ctx.s, &mut ctx.stack_rng)?
                } else {
                    0..0
                });
                augs.push(if schedule.augment {
                    AugmentParams::sample(ctx.cohort.shape, &mut ctx.augment_rng)
                } else {
                    AugmentParams::identity()
                });
            }
            let mut tape = Tape::new();
            let patients = patients.to_vec();
            let out = ctx.forward_batch(
                &mut tape,
                &patients,
                &ranges,
                Some(&augs),
                true,
                lung_phase,
                cls_on,
            )?;
            let loss_v = Scalar::to_f64(tape.data(out.loss)[0]);
            if !loss_v.is_finite() {
                return Err(Error::Degenerate {
                    what: "training loss",
                    reason: format!(
                        "loss {loss_v} at epoch {epoch}, outer {} inner {} — aborting run",
                        run.outer, run.inner
                    ),
                });
            }
            tape.backward(out.loss)?;
            tape.accumulate_param_grads(&mut ctx.store);
            adam.step(&mut ctx.store);
            ctx.store.zero_grad();
            train_loss_sum += loss_v * patients.len() as f64;
            train_seen += patients.len();
        }
        let train_loss = train_loss_sum / train_seen.max(1) as f64;

        // --- Validation on the central stack of each validation patient.
        let (val_loss, val_ap) = validation_pass(ctx, lung_phase, cls_on)?;
        if !val_loss.is_finite() {
            return Err(Error::Degenerate {
                what: "validation loss",
                reason: format!(
                    "loss {val_loss} at epoch {epoch}, outer {} inner {} — aborting run",
                    run.outer, run.inner
                ),
            });
        }
        history.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_ap,
        });

        // --- Best-checkpoint tracking and early stopping, active only in
        // the final phase (earlier phases optimise a different objective).
        if epoch >= final_phase {
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_snap = Some(ctx.store.snapshot());
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
            }
            if epoch + 1 >= min_epochs && bad_epochs >= schedule.patience {
                break;
            }
        }
    }

    match best_snap {
        Some(snap) => ctx.store.restore(&snap)?,
        None => log::warn!(
            "run {}-{}: no final-phase epoch completed; keeping last weights",
            run.outer,
            run.inner
        ),
    }
    Ok((history, best_epoch, epochs_trained))
}

/// Quick per-epoch validation: loss of the currently trained objective on
/// each validation patient's central stack (plus macro AP when the
/// classifier is active).
fn validation_pass<T: Scalar>(
    ctx: &mut EngineCtx<'_, T>,
    lung_phase: bool,
    cls_on: bool,
) -> Result<(f64, f64)> {
    let val = ctx.fold.val.to_vec();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let n_labels = ctx.n_labels();
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); n_labels];
    let mut labels: Vec<Vec<bool>> = vec![Vec::new(); n_labels];
    for chunk in balanced_chunks(val.len(), ctx.cfg.schedule.batch) {
        let patients = val[chunk].to_vec();
        let range = if ctx.arch.uses_image() {
            central_stack(ctx.z_full, ctx.s)?
        } else {
            0..0
        };
        let ranges: Vec<Range<usize>> = vec![range; patients.len()];
        let mut tape = Tape::new();
        let out = ctx.forward_batch(&mut tape, &patients, &ranges, None, false, lung_phase, cls_on)?;
        loss_sum += Scalar::to_f64(tape.data(out.loss)[0]) * patients.len() as f64;
        seen += patients.len();
        if let Some(p) = out.probs {
            let data = tape.data(p);
            for (bi, &i) in patients.iter().enumerate() {
                for l in 0..n_labels {
                    probs[l].push(Scalar::to_f64(data[bi * n_labels + l]));
                    labels[l].push(ctx.targets[i][l] != 0.0);
                }
            }
        }
    }
    let val_loss = loss_sum / seen.max(1) as f64;
    let val_ap = if cls_on && n_labels > 0 {
        let mut aps = Vec::new();
        for l in 0..n_labels {
            match average_precision(&probs[l], &labels[l]) {
                Ok(ap) => aps.push(ap),
                Err(_) => log::debug!("validation AP degenerate for label {l}"),
            }
        }
        if aps.is_empty() {
            f64::NAN
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    } else {
        f64::NAN
    };
    Ok((val_loss, val_ap))
}

type ScoredSet = (
    Vec<Vec<f64>>,
    Vec<Vec<bool>>,
    Vec<DiceSummary>,
    Vec<PatientAttention>,
);

/// Score a list of patients the test way and collect per-label vectors.
fn score_set<T: Scalar>(
    ctx: &mut EngineCtx<'_, T>,
    patients: &[usize],
    train_graph: Option<&PopulationGraph>,
    train_rows: &[Vec<f64>],
    cache: Option<&ContextCache<T>>,
    with_attention: bool,
) -> Result<ScoredSet> {
    let n_labels = ctx.n_labels();
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); n_labels];
    let mut labels: Vec<Vec<bool>> = vec![Vec::new(); n_labels];
    let mut dices = Vec::new();
    let mut attention = Vec::new();
    for &i in patients {
        let scored = ctx.score_patient(i, train_graph, train_rows, cache, with_attention)?;
        for l in 0..n_labels {
            probs[l].push(scored.probs[l]);
            labels[l].push(ctx.targets[i][l] != 0.0);
        }
        if let Some(d) = scored.dice {
            dices.push(d);
        }
        if let Some(a) = scored.attention {
            attention.push(a);
        }
    }
    Ok((probs, labels, dices, attention))
}

struct EvalOutput {
    predictions: Vec<LabelPredictions>,
    attention: Vec<PatientAttention>,
    val_probs: Vec<Vec<f64>>,
    val_targets: Vec<Vec<bool>>,
    test_probs: Vec<Vec<f64>>,
    test_targets: Vec<Vec<bool>>,
    thresholds: Vec<f64>,
    test_dice: Vec<DiceSummary>,
}

fn evaluate<T: Scalar>(ctx: &mut EngineCtx<'_, T>, collect_attention: bool) -> Result<EvalOutput> {
    let n_labels = ctx.n_labels();
    let (train_graph, train_rows, cache) = if ctx.arch.uses_graph() {
        let rows: Vec<Vec<f64>> = ctx.fold.train.iter().map(|&i| ctx.node_gt[i].clone()).collect();
        let k_eff = ctx
            .cfg
            .graph
            .k
            .min(rows.len().saturating_sub(1))
            .max(1);
        let graph = knn_graph(
            &rows,
            &ctx.stats.weights,
            k_eff,
            ctx.cfg.graph.p,
            ctx.cfg.graph.squared_kernel,
        )?;
        let cache = ctx.build_context_cache()?;
        (Some(graph), rows, Some(cache))
    } else {
        (None, Vec::new(), None)
    };

    let val = ctx.fold.val.clone();
    let test = ctx.fold.test.clone();
    let (val_probs, val_targets, _, _) = score_set(
        ctx,
        &val,
        train_graph.as_ref(),
        &train_rows,
        cache.as_ref(),
        false,
    )?;
    let (test_probs, test_targets, test_dice, attention) = score_set(
        ctx,
        &test,
        train_graph.as_ref(),
        &train_rows,
        cache.as_ref(),
        collect_attention,
    )?;

    let mut thresholds = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        let t = match youden_threshold(&val_probs[l], &val_targets[l]) {
            Ok((t, _)) => t,
            Err(e) => {
                log::warn!("label {l}: threshold selection degenerate ({e}); using 0.5");
                0.5
            }
        };
        thresholds.push(t);
    }

    let label_names = ctx.task.label_names();
    let mut predictions = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        let rows: Vec<PredictionRow> = test
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                PredictionRow::new(
                    ctx.cohort.patients[i].id.clone(),
                    u8::from(ctx.targets[i][l] != 0.0),
                    test_probs[l][j],
                    thresholds[l],
                )
            })
            .collect();
        predictions.push(LabelPredictions {
            label: label_names[l].to_string(),
            rows,
        });
    }

    Ok(EvalOutput {
        predictions,
        attention,
        val_probs,
        val_targets,
        test_probs,
        test_targets,
        thresholds,
        test_dice,
    })
}

fn assemble_metrics<T: Scalar>(
    ctx: &EngineCtx<'_, T>,
    run: RunContext,
    epochs_trained: usize,
    best_epoch: usize,
    eval: &EvalOutput,
) -> Result<RunMetrics> {
    let n_labels = ctx.n_labels();
    let mut ap = Vec::with_capacity(n_labels);
    let mut auc = Vec::with_capacity(n_labels);
    let mut bacc = Vec::with_capacity(n_labels);
    let mut f1 = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        let scores = &eval.test_probs[l];
        let labels = &eval.test_targets[l];
        ap.push(average_precision(scores, labels).unwrap_or(f64::NAN));
        auc.push(roc_auc(scores, labels).unwrap_or(f64::NAN));
        match thresholded_metrics(scores, labels, eval.thresholds[l]) {
            Ok(tm) => {
                bacc.push(tm.balanced_accuracy);
                f1.push(tm.f1);
            }
            Err(_) => {
                bacc.push(f64::NAN);
                f1.push(f64::NAN);
            }
        }
    }
    let (dice_pathology, dice_healthy) = if eval.test_dice.is_empty() {
        (None, None)
    } else {
        let nd = eval.test_dice.len() as f64;
        (
            Some(eval.test_dice.iter().map(|d| d.merged_pathology).sum::<f64>() / nd),
            Some(eval.test_dice.iter().map(|d| d.healthy).sum::<f64>() / nd),
        )
    };
    Ok(RunMetrics {
        outer: run.outer,
        inner: run.inner,
        epochs_trained,
        best_epoch,
        threshold: eval.thresholds.clone(),
        ap,
        auc,
        bacc,
        f1,
        dice_pathology,
        dice_healthy,
    })
}

/// Non-neural baselines: (weighted) k-nearest-neighbour votes over the
/// 18-dim node features, thresholded on validation scores.
fn run_knn(
    cohort: &PreparedCohort,
    cfg: &ExperimentConfig,
    fold: &FoldAssignment,
    stats: &FittedStats,
    node_gt: &[Vec<f64>],
    targets: &[Vec<f64>],
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let n_labels = cfg.task.n_labels();
    if n_labels == 0 {
        return Err(Error::InvalidArgument {
            op: "run_knn",
            reason: "nearest-neighbour baselines need a classification task".into(),
        });
    }
    let train_rows: Vec<Vec<f64>> = fold.train.iter().map(|&i| node_gt[i].clone()).collect();
    let k = cfg.graph.k.min(train_rows.len());
    let score = |i: usize, l: usize| -> Result<f64> {
        let labels_u8: Vec<u8> = fold
            .train
            .iter()
            .map(|&t| u8::from(targets[t][l] != 0.0))
            .collect();
        match cfg.architecture {
            Architecture::Wknn => wknn_classify(
                &node_gt[i],
                &train_rows,
                &labels_u8,
                &stats.weights,
                k,
                cfg.graph.p,
                cfg.graph.squared_kernel,
            ),
            _ => knn_classify(&node_gt[i], &train_rows, &labels_u8, k),
        }
    };
    let collect = |set: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
        let mut probs = vec![Vec::new(); n_labels];
        let mut labels = vec![Vec::new(); n_labels];
        for &i in set {
            for l in 0..n_labels {
                probs[l].push(score(i, l)?);
                labels[l].push(targets[i][l] != 0.0);
            }
        }
        Ok((probs, labels))
    };
    let (val_probs, val_targets) = collect(&fold.val)?;
    let (test_probs, test_targets) = collect(&fold.test)?;

    let mut thresholds = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        thresholds.push(match youden_threshold(&val_probs[l], &val_targets[l]) {
            Ok((t, _)) => t,
            Err(_) => 0.5,
        });
    }
    let label_names = cfg.task.label_names();
    let predictions: Vec<LabelPredictions> = (0..n_labels)
        .map(|l| LabelPredictions {
            label: label_names[l].to_string(),
            rows: fold
                .test
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    PredictionRow::new(
                        cohort.patients[i].id.clone(),
                        u8::from(targets[i][l] != 0.0),
                        test_probs[l][j],
                        thresholds[l],
                    )
                })
                .collect(),
        })
        .collect();

    let mut ap = Vec::new();
    let mut auc = Vec::new();
    let mut bacc = Vec::new();
    let mut f1 = Vec::new();
    for l in 0..n_labels {
        ap.push(average_precision(&test_probs[l], &test_targets[l]).unwrap_or(f64::NAN));
        auc.push(roc_auc(&test_probs[l], &test_targets[l]).unwrap_or(f64::NAN));
        match thresholded_metrics(&test_probs[l], &test_targets[l], thresholds[l]) {
            Ok(tm) => {
                bacc.push(tm.balanced_accuracy);
                f1.push(tm.f1);
            }
            Err(_) => {
                bacc.push(f64::NAN);
                f1.push(f64::NAN);
            }
        }
    }
    let result = RunResult {
        metrics: RunMetrics {
            outer: fold.outer,
            inner: fold.inner,
            epochs_trained: 0,
            best_epoch: 0,
            threshold: thresholds,
            ap,
            auc,
            bacc,
            f1,
            dice_pathology: None,
            dice_healthy: None,
        },
        history: Vec::new(),
        predictions,
        attention: Vec::new(),
        val_probs,
        val_targets,
        test_probs,
        test_targets,
        test_ids: fold
            .test
            .iter()
            .map(|&i| cohort.patients[i].id.clone())
            .collect(),
    };
    if let Some(dir) = out_dir {
        write_artifacts::<f64>(dir, cfg, None, &result)?;
    }
    Ok(result)
}

fn write_artifacts<T: Scalar>(
    dir: &Path,
    cfg: &ExperimentConfig,
    store: Option<&ParamStore<T>>,
    result: &RunResult,
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating run directory {}", dir.display()), e))?;
    cfg.save(&dir.join("config.toml"))?;
    if let Some(store) = store {
        save_checkpoint(store, &dir.join("checkpoint.bin"))?;
    }
    if !result.history.is_empty() {
        let path = dir.join("history.csv");
        let wrap = |e: csv::Error| Error::Csv {
            path: path.display().to_string(),
            source: e,
        };
        let mut wtr = csv::Writer::from_path(&path).map_err(wrap)?;
        for row in &result.history {
            wtr.serialize(row).map_err(wrap)?;
        }
        wtr.flush().map_err(|e| Error::Io {
            context: path.display().to_string(),
            source: e,
        })?;
    }
    for preds in &result.predictions {
        write_predictions_csv(
            &dir.join(format!("predictions_{}.csv", preds.label)),
            &preds.rows,
        )?;
    }
    let metrics_json =
        serde_json::to_string_pretty(&result.metrics).map_err(|e| Error::Json {
            context: "serialising run metrics".into(),
            source: e,
        })?;
    std::fs::write(dir.join("metrics.json"), metrics_json)
        .map_err(|e| Error::io(format!("writing {}", dir.join("metrics.json").display()), e))?;
    if !result.attention.is_empty() {
        let att_json = serde_json::to_string_pretty(&result.attention).map_err(|e| Error::Json {
            context: "serialising attention traces".into(),
            source: e,
        })?;
        std::fs::write(dir.join("attention.json"), att_json)
            .map_err(|e| Error::io(format!("writing {}", dir.join("attention.json").display()), e))?;
    }
    Ok(())
}

/// Run the full twenty-run plan (in parallel) and aggregate the report.
pub fn run_plan<T: Scalar>(
    cohort: &PreparedCohort,
    cfg: &ExperimentConfig,
    out_root: Option<&Path>,
    collect_attention: bool,
) -> Result<PlanResult> {
    cfg.validate()?;
    let labels = cohort.stratify_labels(cfg.task);
    let plan = make_fold_plan(&labels, cfg.seed)?;
    if let Some(root) = out_root {
        std::fs::create_dir_all(root)
            .map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        cfg.save(&root.join("config.toml"))?;
    }
    let runs: Result<Vec<RunResult>> = plan
        .runs
        .par_iter()
        .map(|fold| {
            let dir = out_root.map(|r| r.join(format!("{}_{}", fold.outer, fold.inner)));
            run_single::<T>(cohort, cfg, fold, dir.as_deref(), collect_attention)
        })
        .collect();
    let runs = runs?;
    let report = MetricsReport::from_runs(
        cfg.task,
        cfg.architecture,
        runs.iter().map(|r| r.metrics.clone()).collect(),
    );
    if let Some(root) = out_root {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
            context: "serialising metrics report".into(),
            source: e,
        })?;
        std::fs::write(root.join("report.json"), json)
            .map_err(|e| Error::io(format!("writing {}", root.join("report.json").display()), e))?;
    }
    Ok(PlanResult { plan, runs, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::segnet::SegNetConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::trainer::TrainSchedule;

    fn tiny_cohort(n: usize, seed: u64) -> PreparedCohort {
        let cfg = SynthConfig {
            n_patients: n,
            shape: [8, 8, 8],
            seed,
            ..SynthConfig::default()
        };
        PreparedCohort::from_cohort(&generate(&cfg).unwrap()).unwrap()
    }

    fn tiny_config(arch: Architecture) -> ExperimentConfig {
        ExperimentConfig {
            architecture: arch,
            slices_per_stack: 4,
            synth: SynthConfig {
                n_patients: 20,
                shape: [8, 8, 8],
                ..SynthConfig::default()
            },
            segnet: SegNetConfig {
                base_filters: 2,
                depth: 2,
                input_size: (8, 8),
                embed_dim: 8,
                ..SegNetConfig::default()
            },
            schedule: TrainSchedule {
                batch: 4,
                epoch_size: 8,
                min_epochs: 2,
                min_epochs_pretrained: 2,
                patience: 2,
                max_epochs: 3,
                pretrain_lung_epochs: 1,
                pretrain_cls_epochs: 1,
                augment: false,
                ..TrainSchedule::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn fitted_statistics_depend_only_on_the_training_fold() {
        let mut cohort = tiny_cohort(12, 3);
        let cfg = tiny_config(Architecture::UGat);
        let train: Vec<usize> = (0..8).collect();
        let mut rng = stream_indexed(9, "mi", 0);
        let a = FittedStats::fit(&cohort, &train, TrainTask::Icu, &cfg.graph, &mut rng).unwrap();
        // Perturb two patients outside the fold, including their labels.
        for i in [9, 11] {
            cohort.patients[i].metadata = vec![Some(1e6); NUM_META];
            cohort.patients[i].outcomes.icu = !cohort.patients[i].outcomes.icu;
        }
        let mut rng = stream_indexed(9, "mi", 0);
        let b = FittedStats::fit(&cohort, &train, TrainTask::Icu, &cfg.graph, &mut rng).unwrap();
        assert_eq!(a.weights.weights, b.weights.weights);
        assert_eq!(a.radiomics_scaler.mean, b.radiomics_scaler.mean);
        assert_eq!(a.metadata_prep.imputer.means, b.metadata_prep.imputer.means);
        assert_eq!(a.metadata_prep.scaler.std, b.metadata_prep.scaler.std);
    }
    const NUM_META: usize = crate::tabular::NUM_METADATA;

    #[test]
    fn knn_baselines_score_every_split_deterministically() {
        let cohort = tiny_cohort(20, 5);
        for arch in [Architecture::Knn, Architecture::Wknn] {
            let cfg = tiny_config(arch);
            let labels = cohort.stratify_labels(cfg.task);
            let plan = make_fold_plan(&labels, 11).unwrap();
            let fold = &plan.runs[0];
            let a = run_single::<f64>(&cohort, &cfg, fold, None, false).unwrap();
            let b = run_single::<f64>(&cohort, &cfg, fold, None, false).unwrap();
            assert_eq!(a.test_probs, b.test_probs, "{}", arch.name());
            assert!(a.test_probs[0].iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(a.predictions[0].rows.len(), fold.test.len());
            assert!(a.metrics.threshold[0].is_finite());
            assert!(a.history.is_empty());
        }
    }

    #[test]
    fn balanced_chunks_never_leave_a_singleton() {
        assert_eq!(balanced_chunks(9, 8), vec![0..9]);
        assert_eq!(balanced_chunks(17, 8), vec![0..8, 8..17]);
        assert_eq!(balanced_chunks(16, 8), vec![0..8, 8..16]);
        assert_eq!(balanced_chunks(1, 8), vec![0..1]);
        assert_eq!(balanced_chunks(0, 8), Vec::<Range<usize>>::new());
    }

    #[test]
    fn metadata_mlp_runs_bit_identically_and_writes_artifacts() {
        let cohort = tiny_cohort(15, 8);
        let mut cfg = tiny_config(Architecture::MlpMetadata);
        cfg.seed = 21;
        let labels = cohort.stratify_labels(cfg.task);
        let plan = make_fold_plan(&labels, cfg.seed).unwrap();
        let fold = &plan.runs[3];
        let dir = tempfile::tempdir().unwrap();
        let a = run_single::<f64>(&cohort, &cfg, fold, Some(dir.path()), false).unwrap();
        let b = run_single::<f64>(&cohort, &cfg, fold, None, false).unwrap();
        assert_eq!(a.test_probs, b.test_probs, "same seed must be bit-identical");
        assert_eq!(a.metrics.ap, b.metrics.ap);
        assert_eq!(
            a.history.iter().map(|h| h.val_loss.to_bits()).collect::<Vec<_>>(),
            b.history.iter().map(|h| h.val_loss.to_bits()).collect::<Vec<_>>()
        );
        assert!(dir.path().join("config.toml").is_file());
        assert!(dir.path().join("checkpoint.bin").is_file());
        assert!(dir.path().join("history.csv").is_file());
        assert!(dir.path().join("predictions_icu.csv").is_file());
        assert!(dir.path().join("metrics.json").is_file());
        // The snapshot reloads to the exact configuration that produced it.
        let reloaded = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(reloaded, cfg);
    }

    #[test]
    fn graph_run_with_small_unet_completes_end_to_end() {
        let cohort = tiny_cohort(20, 13);
        let cfg = tiny_config(Architecture::UGat);
        let labels = cohort.stratify_labels(cfg.task);
        let plan = make_fold_plan(&labels, 2).unwrap();
        let fold = &plan.runs[0];
        let result = run_single::<f64>(&cohort, &cfg, fold, None, true).unwrap();
        assert_eq!(result.test_probs[0].len(), fold.test.len());
        assert!(result.test_probs[0].iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(result.metrics.dice_pathology.is_some());
        assert_eq!(result.history.len(), result.metrics.epochs_trained);
        // Attention was collected for every test patient and its rows are
        // properly normalised.
        assert_eq!(result.attention.len(), fold.test.len());
        let export = &result.attention[0].export;
        assert!(!export.head_averaged.is_empty());
        for matrix in &export.head_averaged {
            for row in &matrix.rows {
                let total: f64 = row.neighbors.iter().map(|n| n.alpha).sum();
                assert!((total - 1.0).abs() < 1e-6, "attention row sums to {total}");
            }
        }
    }

    #[test]
    fn four_patient_overfit_reaches_small_loss() {
        let synth = SynthConfig {
            n_patients: 8,
            shape: [8, 8, 8],
            seed: 17,
            // Generous pathology burden so every class has voxel support.
            ggo_base: 0.20,
            other_base: 0.12,
            ..SynthConfig::default()
        };
        let cohort = PreparedCohort::from_cohort(&generate(&synth).unwrap()).unwrap();
        let mut cfg = tiny_config(Architecture::UGat);
        cfg.synth = synth;
        cfg.segnet.base_filters = 4;
        // Train on the whole volume so the objective is stationary.
        cfg.slices_per_stack = 8;
        // Four training samples are too few for the MI estimator.
        cfg.graph.weight_method = crate::popgraph::WeightMethod::Uniform;
        cfg.schedule = TrainSchedule {
            lr: 1e-2,
            weight_decay: 0.0,
            batch: 4,
            epoch_size: 4,
            min_epochs: 100,
            min_epochs_pretrained: 100,
            patience: 100,
            max_epochs: 100,
            pretrain_lung_epochs: 0,
            pretrain_cls_epochs: 0,
            augment: false,
        };
        // Overfit check: train == validation == test, four patients.
        let idx: Vec<usize> = vec![0, 1, 2, 3];
        let fold = FoldAssignment {
            outer: 0,
            inner: 0,
            train: idx.clone(),
            val: idx.clone(),
            test: idx,
        };
        let result = run_single::<f64>(&cohort, &cfg, &fold, None, false).unwrap();
        let first = result.history.first().unwrap().train_loss;
        let last = result.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should decrease from {first} but ended at {last}"
        );
        assert!(last < 0.1, "overfit loss should fall below 0.1, got {last}");
    }
}
