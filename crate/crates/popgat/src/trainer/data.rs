//! In-memory cohort representation used by the training engine.
//!
//! [`PreparedCohort`] holds every patient's normalised volume, ground-truth
//! mask, raw metadata (missing values preserved — imputation is fitted per
//! training fold, never globally) and outcome labels.

use crate::error::{Error, Result};
use crate::radiomics::RadiomicsVector;
use crate::synth::Cohort;
use crate::tabular::Outcomes;
use crate::trainer::TrainTask;
use crate::volume::preprocess_volume;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct PreparedPatient {
    pub id: String,
    /// Intensities normalised to [0, 1], row-major (z, y, x).
    pub volume: Vec<f32>,
    /// Ground-truth class labels (0 background, 1 healthy lung, 2
    /// ground-glass, 3 other pathology).
    pub mask: Vec<u8>,
    /// Raw metadata with missing entries preserved.
    pub metadata: Vec<Option<f64>>,
    pub outcomes: Outcomes,
    pub gt_radiomics: RadiomicsVector,
}

#[derive(Debug, Clone)]
pub struct PreparedCohort {
    /// Common volume extents (z, y, x).
    pub shape: [usize; 3],
    pub voxel_volume_mm3: f64,
    pub patients: Vec<PreparedPatient>,
}

impl PreparedCohort {
    /// Normalise a generated (or re-read) cohort for training.  All
    /// volumes must share one shape; intensities are clipped and min-max
    /// scaled per patient at the volume's native spacing.
    pub fn from_cohort(cohort: &Cohort) -> Result<Self> {
        if cohort.patients.is_empty() {
            return Err(Error::InvalidArgument {
                op: "PreparedCohort::from_cohort",
                reason: "cohort has no patients".into(),
            });
        }
        let shape = cohort.patients[0].volume.shape;
        let voxel_volume_mm3 = cohort.patients[0].volume.voxel_volume_mm3();
        let mut patients = Vec::with_capacity(cohort.patients.len());
        for p in &cohort.patients {
            if p.volume.shape != shape || p.mask.shape != shape {
                return Err(Error::InvalidArgument {
                    op: "PreparedCohort::from_cohort",
                    reason: format!(
                        "patient {} volume {:?} / mask {:?} differ from cohort shape {:?}",
                        p.record.id, p.volume.shape, p.mask.shape, shape
                    ),
                });
            }
            let spacing = p.volume.spacing_mm[0];
            let pre = preprocess_volume(&p.volume, spacing)?;
            if pre.shape != shape {
                return Err(Error::InvalidArgument {
                    op: "PreparedCohort::from_cohort",
                    reason: format!(
                        "preprocessing changed patient {} shape to {:?}",
                        p.record.id, pre.shape
                    ),
                });
            }
            patients.push(PreparedPatient {
                id: p.record.id.clone(),
                volume: pre.data,
                mask: p.mask.as_u8()?.to_vec(),
                metadata: p.record.metadata.clone(),
                outcomes: p.record.outcomes,
                gt_radiomics: p.gt_radiomics,
            });
        }
        Ok(PreparedCohort {
            shape,
            voxel_volume_mm3,
            patients,
        })
    }

    /// Read a cohort directory written by the generator and prepare it.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_cohort(&crate::synth::read_cohort(dir)?)
    }

    pub fn n(&self) -> usize {
        self.patients.len()
    }

    /// Physical volume of one full scan.
    pub fn scan_volume_mm3(&self) -> f64 {
        self.voxel_volume_mm3 * self.shape.iter().product::<usize>() as f64
    }

    /// Binary stratification labels for fold planning under `task`.
    pub fn stratify_labels(&self, task: TrainTask) -> Vec<u8> {
        self.patients
            .iter()
            .map(|p| task.stratify_label(&p.outcomes))
            .collect()
    }
}

/// The four radiomics features the fusion network and population graph
/// consume: relative tissue composition plus the lung-to-scan volume
/// fraction.  Expressing the fourth feature as a fraction of the scanned
/// volume keeps it comparable between slice stacks and full volumes.
pub fn fusion_features(rv: &RadiomicsVector, scan_volume_mm3: f64) -> [f64; 4] {
    [
        rv.rel_healthy,
        rv.rel_ggo,
        rv.rel_other,
        if scan_volume_mm3 > 0.0 {
            rv.total_lung / scan_volume_mm3
        } else {
            0.0
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiomics::extract_radiomics;
    use crate::synth::{generate, SynthConfig};

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            n_patients: 6,
            shape: [8, 8, 8],
            seed: 77,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn prepared_cohort_normalises_volumes_and_keeps_labels() {
        let cohort = generate(&tiny_config()).unwrap();
        let prep = PreparedCohort::from_cohort(&cohort).unwrap();
        assert_eq!(prep.n(), 6);
        assert_eq!(prep.shape, [8, 8, 8]);
        for (p, src) in prep.patients.iter().zip(&cohort.patients) {
            assert_eq!(p.volume.len(), 512);
            assert!(p.volume.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(p.mask, src.mask.as_u8().unwrap());
            assert_eq!(p.outcomes, src.record.outcomes);
            assert_eq!(p.id, src.record.id);
        }
        let icu = prep.stratify_labels(TrainTask::Icu);
        let expected: Vec<u8> = cohort
            .patients
            .iter()
            .map(|p| u8::from(p.record.outcomes.icu))
            .collect();
        assert_eq!(icu, expected);
    }

    #[test]
    fn fusion_features_are_scale_free_fractions() {
        let mask = vec![0, 1, 1, 2, 3, 0, 1, 2];
        let rv = extract_radiomics(&mask, 2.0).unwrap();
        let f = fusion_features(&rv, mask.len() as f64 * 2.0);
        assert!((f[0] - 0.5).abs() < 1e-12, "3 healthy of 6 lung voxels");
        assert!((f[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((f[2] - 1.0 / 6.0).abs() < 1e-12);
        assert!((f[3] - 6.0 / 8.0).abs() < 1e-12, "lung fills 6 of 8 voxels");
        // Doubling the voxel size leaves every feature unchanged.
        let rv2 = extract_radiomics(&mask, 4.0).unwrap();
        let f2 = fusion_features(&rv2, mask.len() as f64 * 4.0);
        assert_eq!(f, f2);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut cohort = generate(&tiny_config()).unwrap();
        cohort.patients[1].volume.shape = [8, 8, 4];
        assert!(PreparedCohort::from_cohort(&cohort).is_err());
    }
}
