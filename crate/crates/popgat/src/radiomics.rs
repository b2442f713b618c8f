//! Volumetric radiomics extracted from segmentation masks, plus the
//! two-sample t-statistics used for cohort group comparisons.
//!
//! The mask convention is: 0 background, 1 healthy lung, 2 ground-glass
//! opacity, 3 other pathology.  Absolute volumes are voxel counts scaled by
//! the physical voxel volume; relative volumes divide by the total lung
//! volume (sum of the three lung classes).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_HEALTHY: u8 = 1;
pub const CLASS_GGO: u8 = 2;
pub const CLASS_OTHER: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Volumetric burden features for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsVector {
    pub abs_healthy: f64,
    pub abs_ggo: f64,
    pub abs_other: f64,
    pub total_lung: f64,
    pub rel_healthy: f64,
    pub rel_ggo: f64,
    pub rel_other: f64,
    /// Set when the mask contained no lung voxels at all; the relative
    /// fractions are reported as 0 in that case.
    pub degenerate: bool,
}

impl RadiomicsVector {
    /// Names of the compact feature set used by the population graph and
    /// the fusion network: the three tissue fractions plus total volume.
    pub const FEATURE_NAMES: [&'static str; 4] =
        ["rel_healthy", "rel_ggo", "rel_other", "total_lung"];

    pub fn features(&self) -> [f64; 4] {
        [self.rel_healthy, self.rel_ggo, self.rel_other, self.total_lung]
    }
}

/// Sum voxel counts per class and convert to physical volumes.
pub fn extract_radiomics(mask: &[u8], voxel_volume_mm3: f64) -> Result<RadiomicsVector> {
    if !(voxel_volume_mm3 > 0.0) {
        return Err(Error::InvalidArgument {
            op: "extract_radiomics",
            reason: format!("voxel volume must be positive, got {voxel_volume_mm3}"),
        });
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &v in mask {
        if (v as usize) < NUM_CLASSES {
            counts[v as usize] += 1;
        } else {
            return Err(Error::InvalidArgument {
                op: "extract_radiomics",
                reason: format!("mask label {v} out of range 0..{NUM_CLASSES}"),
            });
        }
    }
    let abs_healthy = counts[CLASS_HEALTHY as usize] as f64 * voxel_volume_mm3;
    let abs_ggo = counts[CLASS_GGO as usize] as f64 * voxel_volume_mm3;
    let abs_other = counts[CLASS_OTHER as usize] as f64 * voxel_volume_mm3;
    let total_lung = abs_healthy + abs_ggo + abs_other;
    let degenerate = total_lung == 0.0;
    if degenerate {
        log::warn!("extract_radiomics: mask contains no lung voxels");
    }
    let rel = |abs: f64| if degenerate { 0.0 } else { abs / total_lung };
    Ok(RadiomicsVector {
        abs_healthy,
        abs_ggo,
        abs_other,
        total_lung,
        rel_healthy: rel(abs_healthy),
        rel_ggo: rel(abs_ggo),
        rel_other: rel(abs_other),
        degenerate,
    })
}

/// Summary statistics of one cohort group (sample std, n-1 denominator).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl GroupSummary {
    pub fn new(mean: f64, std: f64, n: usize) -> Self {
        Self { mean, std, n }
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Degenerate {
                what: "GroupSummary",
                reason: format!("need at least 2 values, got {}", values.len()),
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument {
                op,
                reason: format!("group size must be >= 2, got {}", self.n),
            });
        }
        if !(self.std >= 0.0) {
            return Err(Error::InvalidArgument {
                op,
                reason: format!("standard deviation must be >= 0, got {}", self.std),
            });
        }
        Ok(())
    }
}

/// Result of a two-sample t-test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    // Symmetric distribution: P(|T| > |t|) = 2 F(-|t|).
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * dist.cdf(-t.abs())
}

fn degenerate_t(a: &GroupSummary, b: &GroupSummary, df: f64) -> TTest {
    if a.mean == b.mean {
        TTest { t: 0.0, df, p: 1.0 }
    } else {
        TTest {
            t: (a.mean - b.mean).signum() * f64::INFINITY,
            df,
            p: 0.0,
        }
    }
}

/// Welch's unequal-variance t-test with Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &GroupSummary, b: &GroupSummary) -> Result<TTest> {
    a.validate("welch_t_test")?;
    b.validate("welch_t_test")?;
    let (na, nb) = (a.n as f64, b.n as f64);
    let (va, vb) = (a.std * a.std / na, b.std * b.std / nb);
    if va + vb == 0.0 {
        return Ok(degenerate_t(a, b, na + nb - 2.0));
    }
    let t = (a.mean - b.mean) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(TTest {
        t,
        df,
        p: two_sided_p(t, df),
    })
}

/// Classical pooled-variance (equal-variance) two-sample t-test.
pub fn student_t_test(a: &GroupSummary, b: &GroupSummary) -> Result<TTest> {
    a.validate("student_t_test")?;
    b.validate("student_t_test")?;
    let (na, nb) = (a.n as f64, b.n as f64);
    let df = na + nb - 2.0;
    let pooled_var =
        ((na - 1.0) * a.std * a.std + (nb - 1.0) * b.std * b.std) / df;
    let denom = (pooled_var * (1.0 / na + 1.0 / nb)).sqrt();
    if denom == 0.0 {
        return Ok(degenerate_t(a, b, df));
    }
    let t = (a.mean - b.mean) / denom;
    Ok(TTest {
        t,
        df,
        p: two_sided_p(t, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn all_healthy_mask_gives_unit_healthy_fraction() {
        let mask = vec![CLASS_HEALTHY; 64];
        let r = extract_radiomics(&mask, 1.0).unwrap();
        assert_eq!((r.rel_healthy, r.rel_ggo, r.rel_other), (1.0, 0.0, 0.0));
        assert!(!r.degenerate);
    }

    #[test]
    fn physical_volumes_match_hand_computation() {
        // 50 healthy / 30 GGO / 20 other voxels at 3.6 mm isotropic spacing.
        let mut mask = vec![CLASS_HEALTHY; 50];
        mask.extend(vec![CLASS_GGO; 30]);
        mask.extend(vec![CLASS_OTHER; 20]);
        mask.extend(vec![CLASS_BACKGROUND; 10]);
        let vv = 3.6f64.powi(3); // 46.656 mm^3
        let r = extract_radiomics(&mask, vv).unwrap();
        assert!((r.abs_healthy - 2332.8).abs() < 1e-9);
        assert!((r.abs_ggo - 1399.68).abs() < 1e-9);
        assert!((r.abs_other - 933.12).abs() < 1e-9);
        assert!((r.rel_healthy - 0.5).abs() < 1e-12);
        assert!((r.rel_ggo - 0.3).abs() < 1e-12);
        assert!((r.rel_other - 0.2).abs() < 1e-12);
        assert!((r.total_lung - (r.abs_healthy + r.abs_ggo + r.abs_other)).abs() < 1e-9);
    }

    #[test]
    fn empty_lung_mask_is_flagged_degenerate() {
        let r = extract_radiomics(&vec![CLASS_BACKGROUND; 32], 1.0).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.rel_healthy, r.rel_ggo, r.rel_other), (0.0, 0.0, 0.0));
        assert_eq!(r.total_lung, 0.0);
    }

    #[test]
    fn matches_voxel_count_oracle_on_random_masks() {
        let mut rng = crate::rng::stream(11, "radiomics-oracle");
        for _ in 0..100 {
            let mask: Vec<u8> = (0..512).map(|_| rng.random_range(0..4) as u8).collect();
            let vv = rng.random_range(0.5..50.0);
            let r = extract_radiomics(&mask, vv).unwrap();
            let count = |c: u8| mask.iter().filter(|&&v| v == c).count() as f64;
            assert_eq!(r.abs_healthy, count(CLASS_HEALTHY) * vv);
            assert_eq!(r.abs_ggo, count(CLASS_GGO) * vv);
            assert_eq!(r.abs_other, count(CLASS_OTHER) * vv);
            if !r.degenerate {
                assert!((r.rel_healthy + r.rel_ggo + r.rel_other - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_groups_give_t_zero_p_one() {
        let g = GroupSummary::new(5.0, 2.0, 30);
        for test in [welch_t_test(&g, &g).unwrap(), student_t_test(&g, &g).unwrap()] {
            assert_eq!(test.t, 0.0);
            assert!((test.p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_equal_means_gives_p_one() {
        let a = GroupSummary::new(3.0, 0.0, 5);
        let b = GroupSummary::new(3.0, 0.0, 9);
        assert_eq!(welch_t_test(&a, &b).unwrap().p, 1.0);
        assert_eq!(student_t_test(&a, &b).unwrap().p, 1.0);
    }

    #[test]
    fn group_swap_flips_t_and_preserves_p() {
        let a = GroupSummary::new(8.4, 4.9, 53);
        let b = GroupSummary::new(6.7, 4.1, 79);
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
        let ab = student_t_test(&a, &b).unwrap();
        let ba = student_t_test(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    #[test]
    fn summary_from_values_uses_sample_std() {
        let s = GroupSummary::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(GroupSummary::from_values(&[1.0]).is_err());
    }

    /// Known cohort summary statistics with hand-computed expected p-values
    /// (checked against scipy.stats reference implementations).
    #[test]
    fn reference_cohort_pvalues() {
        // Leukocytes, ICU vs non-ICU.
        let icu = GroupSummary::new(8.4, 4.9, 53);
        let non = GroupSummary::new(6.7, 4.1, 79);
        let w = welch_t_test(&icu, &non).unwrap();
        assert!((w.p - 0.0399).abs() < 1e-3, "welch leukocytes p = {}", w.p);
        let s = student_t_test(&icu, &non).unwrap();
        assert!((s.p - 0.0329).abs() < 1e-3, "pooled leukocytes p = {}", s.p);

        // C-reactive protein, ICU vs non-ICU: strongly significant.
        let icu = GroupSummary::new(12.19, 9.30, 53);
        let non = GroupSummary::new(6.10, 6.26, 78);
        assert!(welch_t_test(&icu, &non).unwrap().p < 0.01);
        assert!(student_t_test(&icu, &non).unwrap().p < 0.01);

        // Lactate dehydrogenase, deceased vs surviving: the pooled test
        // reproduces the reported significance, Welch does not (tiny group
        // with huge variance).
        let dec = GroupSummary::new(607.3, 500.1, 17);
        let sur = GroupSummary::new(368.4, 318.7, 106);
        let s = student_t_test(&dec, &sur).unwrap();
        assert!((s.t - 2.626).abs() < 2e-3, "t = {}", s.t);
        assert_eq!(s.df, 121.0);
        assert!((s.p - 0.0098).abs() < 1e-3, "pooled LDH p = {}", s.p);
        assert!(welch_t_test(&dec, &sur).unwrap().p > 0.05);

        // Creatine kinase, deceased vs surviving.
        let dec = GroupSummary::new(843.2, 1878.8, 17);
        let sur = GroupSummary::new(217.6, 673.0, 105);
        let s = student_t_test(&dec, &sur).unwrap();
        assert!((s.p - 0.0111).abs() < 1e-3, "pooled CK p = {}", s.p);
    }
}
