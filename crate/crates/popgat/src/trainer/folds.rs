//! Nested stratified cross-validation fold plans.
//!
//! The cohort is split into five outer folds, stratified on a binary label
//! so that positive counts per fold differ by at most one.  Each outer fold
//! serves once as the test set; the remaining four folds rotate through the
//! validation role, giving four inner runs per outer fold and twenty runs
//! in total.

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;

pub const OUTER_FOLDS: usize = 5;
pub const INNER_ROTATIONS: usize = OUTER_FOLDS - 1;
pub const RUNS_PER_PLAN: usize = OUTER_FOLDS * INNER_ROTATIONS;

/// One of the twenty train/validation/test assignments.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    /// Outer fold index (0..5); `test` is that fold.
    pub outer: usize,
    /// Inner rotation index (0..4) selecting the validation fold.
    pub inner: usize,
    /// Patient indices used for fitting (three folds).
    pub train: Vec<usize>,
    /// Patient indices used for early stopping and threshold selection.
    pub val: Vec<usize>,
    /// Patient indices held out entirely from this outer fold's runs.
    pub test: Vec<usize>,
}

/// The full nested-CV plan over one cohort.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    /// Patient indices per outer fold; disjoint, covering the cohort.
    pub outer_folds: Vec<Vec<usize>>,
    /// All twenty runs in (outer, inner) order.
    pub runs: Vec<FoldAssignment>,
}

impl FoldPlan {
    /// Runs belonging to one outer fold, in inner-rotation order.
    pub fn runs_for_outer(&self, outer: usize) -> &[FoldAssignment] {
        &self.runs[outer * INNER_ROTATIONS..(outer + 1) * INNER_ROTATIONS]
    }
}

/// Build a stratified nested-CV plan from per-patient binary labels.
///
/// Positives and negatives are shuffled separately, then dealt into the
/// five folds by one continuous round-robin pass (positives first), so both
/// the per-fold positive counts and the fold sizes differ by at most one.
/// The starting fold of the deal is itself randomised so no fold is
/// systematically larger across seeds.  Requires at least ten patients and
/// both classes present.
pub fn make_fold_plan(labels: &[u8], seed: u64) -> Result<FoldPlan> {
    let n = labels.len();
    if n < 2 * OUTER_FOLDS {
        return Err(Error::InvalidArgument {
            op: "make_fold_plan",
            reason: format!("{n} patients is too few; need at least {}", 2 * OUTER_FOLDS),
        });
    }
    let mut positives: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Degenerate {
            what: "make_fold_plan",
            reason: format!(
                "stratification needs both classes; got {} positive and {} negative",
                positives.len(),
                negatives.len()
            ),
        });
    }

    let mut rng = stream(seed, "fold-plan");
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut outer_folds: Vec<Vec<usize>> = vec![Vec::new(); OUTER_FOLDS];
    let mut cursor = rng.random_range(0..OUTER_FOLDS);
    for &i in positives.iter().chain(&negatives) {
        outer_folds[cursor].push(i);
        cursor = (cursor + 1) % OUTER_FOLDS;
    }
    for fold in &mut outer_folds {
        fold.sort_unstable();
    }
    if let Some(empty) = outer_folds.iter().position(|f| f.is_empty()) {
        return Err(Error::Degenerate {
            what: "make_fold_plan",
            reason: format!("outer fold {empty} is empty"),
        });
    }
    if outer_folds.iter().any(|f| !f.iter().any(|&i| labels[i] != 0)) {
        log::warn!(
            "make_fold_plan: some outer fold has no positive patients \
             ({} positives across {OUTER_FOLDS} folds); validation metrics may degenerate",
            positives.len()
        );
    }

    let mut runs = Vec::with_capacity(RUNS_PER_PLAN);
    for outer in 0..OUTER_FOLDS {
        let others: Vec<usize> = (0..OUTER_FOLDS).filter(|&f| f != outer).collect();
        for (inner, &val_fold) in others.iter().enumerate() {
            let mut train = Vec::new();
            for &f in &others {
                if f != val_fold {
                    train.extend_from_slice(&outer_folds[f]);
                }
            }
            train.sort_unstable();
            runs.push(FoldAssignment {
                outer,
                inner,
                train,
                val: outer_folds[val_fold].clone(),
                test: outer_folds[outer].clone(),
            });
        }
    }
    Ok(FoldPlan { outer_folds, runs })
}
