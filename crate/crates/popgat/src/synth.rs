//! Synthetic cohort generator: phantom chest volumes with two-lobe "lungs",
//! severity-coupled pathology blobs, matching ground-truth masks, and
//! metadata with planted couplings.
//!
//! Each patient draws an ordinal severity 0..=3; outcome labels are the
//! thresholds icu = s≥1, vent = s≥2, mort = s≥3, so the nesting
//! mort ⇒ vent ⇒ icu holds by construction.  Ground-glass and "other"
//! pathology burdens rise with severity; intensities are monotone
//! (background < healthy < ground-glass < other) in synthetic
//! Hounsfield-like units so the fixed clipping window applies.  Metadata
//! couples to severity and the realized pathology burden with per-column
//! strengths; `temperature` and `thrombocytes` are deliberately left
//! uncoupled as negative controls for feature-weighting tests.

use crate::error::{Error, Result};
use crate::radiomics::{self, RadiomicsVector, CLASS_GGO, CLASS_HEALTHY, CLASS_OTHER};
use crate::rng::stream_indexed;
use crate::tabular::{self, Outcomes, PatientRecord, NUM_METADATA};
use crate::volume::{self, Volume, VolumeData};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Volume extents (z, y, x).
    pub shape: [usize; 3],
    /// Isotropic voxel spacing in millimetres.
    pub spacing_mm: f64,
    /// Probabilities of severities 0..=3; outcome prevalences follow as
    /// the tail sums (icu = 1 - p0, vent = p2 + p3, mort = p3).
    pub severity_probs: [f64; 4],
    /// Ground-glass burden (fraction of lung) at severity 0 and per step.
    pub ggo_base: f64,
    pub ggo_per_severity: f64,
    /// "Other pathology" burden at severity 0 and per step.
    pub other_base: f64,
    pub other_per_severity: f64,
    /// Standard deviation of the per-patient burden jitter.
    pub burden_noise: f64,
    /// Global multiplier on metadata-severity coupling strengths.
    pub coupling: f64,
    /// Global multiplier on metadata noise levels.
    pub metadata_noise: f64,
    /// Per-cell probability of a missing metadata value.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            shape: [32, 32, 32],
            spacing_mm: 3.6,
            severity_probs: [0.60, 0.11, 0.15, 0.14],
            ggo_base: 0.02,
            ggo_per_severity: 0.13,
            other_base: 0.01,
            other_per_severity: 0.06,
            burden_noise: 0.03,
            coupling: 1.0,
            metadata_noise: 1.0,
            missing_rate: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.severity_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.severity_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument {
                op: "SynthConfig",
                reason: format!("severity_probs must be nonnegative and sum to 1, got {:?}", self.severity_probs),
            });
        }
        if self.n_patients == 0 {
            return Err(Error::InvalidArgument {
                op: "SynthConfig",
                reason: "n_patients must be positive".into(),
            });
        }
        if self.shape.iter().any(|&d| d < 4) {
            return Err(Error::InvalidArgument {
                op: "SynthConfig",
                reason: format!("volume extents must be at least 4, got {:?}", self.shape),
            });
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidArgument {
                op: "SynthConfig",
                reason: format!("spacing must be positive, got {}", self.spacing_mm),
            });
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidArgument {
                op: "SynthConfig",
                reason: format!("missing_rate must be in [0, 1), got {}", self.missing_rate),
            });
        }
        for (name, v) in [
            ("ggo_base", self.ggo_base),
            ("ggo_per_severity", self.ggo_per_severity),
            ("other_base", self.other_base),
            ("other_per_severity", self.other_per_severity),
            ("burden_noise", self.burden_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument {
                    op: "SynthConfig",
                    reason: format!("{name} must be in [0, 1], got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// One generated patient with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthPatient {
    pub record: PatientRecord,
    pub severity: u32,
    /// Synthetic-Hounsfield intensity volume.
    pub volume: Volume,
    /// Ground-truth class-label volume.
    pub mask: Volume,
    pub gt_radiomics: RadiomicsVector,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: SynthConfig,
    pub patients: Vec<SynthPatient>,
}

/// Mean border intensities per tissue class in synthetic HU.
const HU_BACKGROUND: (f32, f32) = (-900.0, 40.0);
const HU_HEALTHY: (f32, f32) = (-700.0, 55.0);
const HU_GGO: (f32, f32) = (-450.0, 65.0);
const HU_OTHER: (f32, f32) = (-100.0, 65.0);

/// Metadata generator table: base value, per-severity slope, noise sd,
/// clamp range, and a term proportional to the realized pathology burden.
struct MetaSpec {
    name: &'static str,
    base: f64,
    slope: f64,
    noise: f64,
    min: f64,
    max: f64,
    burden: f64,
}

const fn meta(name: &'static str, base: f64, slope: f64, noise: f64, min: f64, max: f64, burden: f64) -> MetaSpec {
    MetaSpec { name, base, slope, noise, min, max, burden }
}

/// Ordered exactly like [`tabular::METADATA_COLUMNS`].  `sex` is handled
/// separately (fair Bernoulli).  `temperature` and `thrombocytes` have
/// zero slope and zero burden term: they are the uncoupled controls.
const META_SPECS: [MetaSpec; NUM_METADATA] = [
    meta("age", 55.0, 4.0, 12.0, 20.0, 95.0, 0.0),
    meta("sex", 0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    meta("temperature", 36.8, 0.0, 0.7, 34.0, 42.0, 0.0),
    meta("spo2", 96.0, -2.2, 2.0, 70.0, 100.0, -4.0),
    meta("leukocytes", 6.5, 0.7, 2.8, 0.5, 40.0, 0.0),
    meta("lymphocytes", 1.5, -0.2, 0.5, 0.05, 5.0, 0.0),
    meta("crp", 4.0, 3.2, 3.5, 0.1, 60.0, 8.0),
    meta("creatinine", 1.0, 0.15, 0.3, 0.3, 8.0, 0.0),
    meta("d_dimer", 800.0, 550.0, 700.0, 50.0, 20000.0, 0.0),
    meta("ldh", 260.0, 85.0, 100.0, 80.0, 3000.0, 0.0),
    meta("creatine_kinase", 150.0, 130.0, 260.0, 20.0, 10000.0, 0.0),
    meta("troponin_t", 10.0, 8.0, 12.0, 1.0, 500.0, 0.0),
    meta("il6", 22.0, 24.0, 22.0, 1.0, 1000.0, 30.0),
    meta("thrombocytes", 250.0, 0.0, 60.0, 20.0, 800.0, 0.0),
];

fn draw_severity(probs: &[f64; 4], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return s as u32;
        }
    }
    3
}

struct Lobe {
    center: [f64; 3],
    semi: [f64; 3],
}

fn lung_lobes(rng: &mut ChaCha8Rng) -> [Lobe; 2] {
    let jitter = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        n * sd
    };
    let make = |rng: &mut ChaCha8Rng, cx: f64| Lobe {
        center: [
            0.5 + jitter(rng, 0.015),
            0.5 + jitter(rng, 0.015),
            cx + jitter(rng, 0.012),
        ],
        semi: [
            0.36 * (1.0 + jitter(rng, 0.05)),
            0.30 * (1.0 + jitter(rng, 0.05)),
            0.16 * (1.0 + jitter(rng, 0.05)),
        ],
    };
    [make(rng, 0.30), make(rng, 0.70)]
}

/// Paint spherical blobs of `class` over healthy-lung voxels until
/// `target` voxels are converted (or attempts run out).
fn paint_blobs(
    mask: &mut [u8],
    shape: [usize; 3],
    lung: &[usize],
    class: u8,
    target: usize,
    rng: &mut ChaCha8Rng,
) {
    let [nz, ny, nx] = shape;
    let min_extent = nz.min(ny).min(nx) as f64;
    let mut painted = 0usize;
    let mut attempts = 0usize;
    while painted < target && attempts < 500 {
        attempts += 1;
        let center = lung[rng.random_range(0..lung.len())];
        let cz = (center / (ny * nx)) as f64;
        let cy = ((center / nx) % ny) as f64;
        let cx = (center % nx) as f64;
        let r = rng.random_range(0.045..0.115) * min_extent;
        let r2 = r * r;
        let lo = |c: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + r).ceil() as usize + 1).min(n);
        for z in lo(cz)..hi(cz, nz) {
            for y in lo(cy)..hi(cy, ny) {
                for x in lo(cx)..hi(cx, nx) {
                    let dz = z as f64 - cz;
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if dz * dz + dy * dy + dx * dx <= r2 {
                        let idx = (z * ny + y) * nx + x;
                        if mask[idx] == CLASS_HEALTHY {
                            mask[idx] = class;
                            painted += 1;
                        }
                    }
                }
            }
        }
    }
}

fn rasterize(cfg: &SynthConfig, severity: u32, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let [nz, ny, nx] = cfg.shape;
    let n = nz * ny * nx;
    let mut mask = vec![0u8; n];
    let lobes = lung_lobes(rng);
    let mut lung: Vec<usize> = Vec::new();
    for z in 0..nz {
        let uz = (z as f64 + 0.5) / nz as f64;
        for y in 0..ny {
            let uy = (y as f64 + 0.5) / ny as f64;
            for x in 0..nx {
                let ux = (x as f64 + 0.5) / nx as f64;
                let inside = lobes.iter().any(|l| {
                    let dz = (uz - l.center[0]) / l.semi[0];
                    let dy = (uy - l.center[1]) / l.semi[1];
                    let dx = (ux - l.center[2]) / l.semi[2];
                    dz * dz + dy * dy + dx * dx <= 1.0
                });
                if inside {
                    let idx = (z * ny + y) * nx + x;
                    mask[idx] = CLASS_HEALTHY;
                    lung.push(idx);
                }
            }
        }
    }

    if !lung.is_empty() {
        let s = severity as f64;
        let noise = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
            let n: f64 = rng.sample(StandardNormal);
            n * sd
        };
        let mut ggo_frac = (cfg.ggo_base + cfg.ggo_per_severity * s + noise(rng, cfg.burden_noise)).clamp(0.0, 0.70);
        let mut other_frac =
            (cfg.other_base + cfg.other_per_severity * s + noise(rng, cfg.burden_noise * 0.6)).clamp(0.0, 0.45);
        let total = ggo_frac + other_frac;
        if total > 0.85 {
            ggo_frac *= 0.85 / total;
            other_frac *= 0.85 / total;
        }
        let ggo_target = (ggo_frac * lung.len() as f64).round() as usize;
        let other_target = (other_frac * lung.len() as f64).round() as usize;
        paint_blobs(&mut mask, cfg.shape, &lung, CLASS_OTHER, other_target, rng);
        paint_blobs(&mut mask, cfg.shape, &lung, CLASS_GGO, ggo_target, rng);
    }

    let mut hu = Vec::with_capacity(n);
    for &m in &mask {
        let (mean, sd) = match m {
            x if x == CLASS_HEALTHY => HU_HEALTHY,
            x if x == CLASS_GGO => HU_GGO,
            x if x == CLASS_OTHER => HU_OTHER,
            _ => HU_BACKGROUND,
        };
        let g: f32 = rng.sample(StandardNormal);
        hu.push(mean + sd * g);
    }
    (hu, mask)
}

fn sample_metadata(
    severity: u32,
    burden: f64,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<f64>> {
    let s = severity as f64;
    let mut row = Vec::with_capacity(NUM_METADATA);
    for (j, spec) in META_SPECS.iter().enumerate() {
        debug_assert_eq!(spec.name, tabular::METADATA_COLUMNS[j]);
        let value = if spec.name == "sex" {
            f64::from(rng.random::<bool>())
        } else {
            let g: f64 = rng.sample(StandardNormal);
            let v = spec.base
                + cfg.coupling * (spec.slope * s + spec.burden * burden)
                + cfg.metadata_noise * spec.noise * g;
            v.clamp(spec.min, spec.max)
        };
        // Missingness afterward so the RNG stream shape stays fixed.
        if rng.random::<f64>() < cfg.missing_rate {
            row.push(None);
        } else {
            row.push(Some(value));
        }
    }
    row
}

/// Generate the full cohort in memory, deterministically from the seed.
pub fn generate(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let voxel_volume = cfg.spacing_mm.powi(3);
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut rng = stream_indexed(cfg.seed, "synth-patient", i as u64);
        let severity = draw_severity(&cfg.severity_probs, &mut rng);
        let (hu, mask) = rasterize(cfg, severity, &mut rng);
        let gt_radiomics = radiomics::extract_radiomics(&mask, voxel_volume)?;
        let burden = gt_radiomics.rel_ggo + gt_radiomics.rel_other;
        let metadata = sample_metadata(severity, burden, cfg, &mut rng);
        let outcomes = Outcomes {
            icu: severity >= 1,
            vent: severity >= 2,
            mort: severity >= 3,
        };
        let spacing = [cfg.spacing_mm; 3];
        patients.push(SynthPatient {
            record: PatientRecord {
                id: format!("p{i:03}"),
                metadata,
                outcomes,
            },
            severity,
            volume: Volume {
                shape: cfg.shape,
                spacing_mm: spacing,
                data: VolumeData::F32(hu),
            },
            mask: Volume {
                shape: cfg.shape,
                spacing_mm: spacing,
                data: VolumeData::U8(mask),
            },
            gt_radiomics,
        });
    }
    Ok(Cohort {
        config: cfg.clone(),
        patients,
    })
}

/// Ground-truth sidecar written next to the cohort for oracle tests.
#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub severities: Vec<u32>,
    pub gt_radiomics: Vec<RadiomicsVector>,
}

/// Write the cohort as `metadata.csv`, `volumes/<id>.json|.bin`,
/// `masks/<id>.json|.bin` and a `ground_truth.json` sidecar.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    std::fs::create_dir_all(dir.join("volumes"))
        .map_err(|e| Error::io(format!("creating {}", dir.join("volumes").display()), e))?;
    std::fs::create_dir_all(dir.join("masks"))
        .map_err(|e| Error::io(format!("creating {}", dir.join("masks").display()), e))?;
    let records: Vec<PatientRecord> = cohort.patients.iter().map(|p| p.record.clone()).collect();
    tabular::write_metadata_csv(&dir.join("metadata.csv"), &records)?;
    for p in &cohort.patients {
        volume::write_volume(&dir.join("volumes").join(format!("{}.json", p.record.id)), &p.volume)?;
        volume::write_volume(&dir.join("masks").join(format!("{}.json", p.record.id)), &p.mask)?;
    }
    let gt = GroundTruth {
        config: cohort.config.clone(),
        severities: cohort.patients.iter().map(|p| p.severity).collect(),
        gt_radiomics: cohort.patients.iter().map(|p| p.gt_radiomics).collect(),
    };
    let text = serde_json::to_string_pretty(&gt).map_err(|e| Error::Json {
        context: "serializing ground truth".into(),
        source: e,
    })?;
    std::fs::write(dir.join("ground_truth.json"), text)
        .map_err(|e| Error::io(format!("writing {}", dir.join("ground_truth.json").display()), e))?;
    Ok(())
}

/// Read back a cohort written by [`write_cohort`].
pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let records = tabular::read_metadata_csv(&dir.join("metadata.csv"))?;
    let gt_text = std::fs::read_to_string(dir.join("ground_truth.json"))
        .map_err(|e| Error::io(format!("reading {}", dir.join("ground_truth.json").display()), e))?;
    let gt: GroundTruth = serde_json::from_str(&gt_text).map_err(|e| Error::Json {
        context: "parsing ground truth".into(),
        source: e,
    })?;
    if gt.severities.len() != records.len() || gt.gt_radiomics.len() != records.len() {
        return Err(Error::Format {
            path: dir.display().to_string(),
            reason: format!(
                "ground truth covers {} patients but metadata has {}",
                gt.severities.len(),
                records.len()
            ),
        });
    }
    let mut patients = Vec::with_capacity(records.len());
    for (i, record) in records.into_iter().enumerate() {
        let vol = volume::read_volume(&dir.join("volumes").join(format!("{}.json", record.id)))?;
        let mask = volume::read_volume(&dir.join("masks").join(format!("{}.json", record.id)))?;
        patients.push(SynthPatient {
            record,
            severity: gt.severities[i],
            volume: vol,
            mask,
            gt_radiomics: gt.gt_radiomics[i],
        });
    }
    Ok(Cohort {
        config: gt.config,
        patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiomics::{extract_radiomics, GroupSummary};

    fn small_cfg(seed: u64, n: usize) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            shape: [16, 16, 16],
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg(7, 6);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (pa, pb) in a.patients.iter().zip(&b.patients) {
            assert_eq!(pa.volume, pb.volume);
            assert_eq!(pa.mask, pb.mask);
            assert_eq!(pa.record.metadata, pb.record.metadata);
            assert_eq!(pa.severity, pb.severity);
        }
    }

    #[test]
    fn outcome_labels_are_nested() {
        let cohort = generate(&small_cfg(11, 60)).unwrap();
        for p in &cohort.patients {
            let o = &p.record.outcomes;
            assert!(!o.mort || o.vent, "mort without vent");
            assert!(!o.vent || o.icu, "vent without icu");
            let expected = Outcomes {
                icu: p.severity >= 1,
                vent: p.severity >= 2,
                mort: p.severity >= 3,
            };
            assert_eq!(*o, expected);
        }
    }

    #[test]
    fn prevalences_near_targets() {
        let cfg = SynthConfig {
            n_patients: 400,
            shape: [8, 8, 8],
            seed: 3,
            ..SynthConfig::default()
        };
        let cohort = generate(&cfg).unwrap();
        let frac = |f: fn(&Outcomes) -> bool| {
            cohort.patients.iter().filter(|p| f(&p.record.outcomes)).count() as f64 / 400.0
        };
        let icu = frac(|o| o.icu);
        let vent = frac(|o| o.vent);
        let mort = frac(|o| o.mort);
        assert!((icu - 0.40).abs() < 0.08, "icu prevalence {icu}");
        assert!((vent - 0.29).abs() < 0.08, "vent prevalence {vent}");
        assert!((mort - 0.14).abs() < 0.06, "mort prevalence {mort}");
    }

    #[test]
    fn gt_radiomics_match_mask_extraction_exactly() {
        let cohort = generate(&small_cfg(5, 8)).unwrap();
        for p in &cohort.patients {
            let again = extract_radiomics(p.mask.as_u8().unwrap(), p.volume.voxel_volume_mm3()).unwrap();
            assert_eq!(p.gt_radiomics, again);
        }
    }

    #[test]
    fn ggo_burden_rises_with_severity() {
        let cohort = generate(&SynthConfig {
            shape: [16, 16, 16],
            seed: 19,
            ..SynthConfig::default()
        })
        .unwrap();
        let group = |sev: u32| -> Vec<f64> {
            cohort
                .patients
                .iter()
                .filter(|p| p.severity == sev)
                .map(|p| p.gt_radiomics.rel_ggo)
                .collect()
        };
        let (low, high) = (group(0), group(3));
        assert!(low.len() >= 10 && high.len() >= 10, "{} / {}", low.len(), high.len());
        let t = crate::radiomics::student_t_test(
            &GroupSummary::from_values(&high).unwrap(),
            &GroupSummary::from_values(&low).unwrap(),
        )
        .unwrap();
        // One-sided: severity-3 burden above severity-0 burden, p < 0.01.
        assert!(t.t > 0.0, "t = {}", t.t);
        assert!(t.p / 2.0 < 0.01, "one-sided p = {}", t.p / 2.0);
    }

    #[test]
    fn intensities_are_monotone_across_tissue_classes() {
        let cohort = generate(&small_cfg(23, 30)).unwrap();
        let p = cohort
            .patients
            .iter()
            .find(|p| p.severity == 3 && p.gt_radiomics.rel_other > 0.02)
            .expect("severity-3 patient with other-pathology burden");
        let hu = p.volume.as_f32().unwrap();
        let mask = p.mask.as_u8().unwrap();
        let mean_of = |class: u8| {
            let vals: Vec<f32> = hu
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m == class)
                .map(|(&v, _)| v)
                .collect();
            vals.iter().sum::<f32>() / vals.len() as f32
        };
        let bg = mean_of(0);
        let healthy = mean_of(CLASS_HEALTHY);
        let ggo = mean_of(CLASS_GGO);
        let other = mean_of(CLASS_OTHER);
        assert!(bg < healthy && healthy < ggo && ggo < other, "{bg} {healthy} {ggo} {other}");
    }

    #[test]
    fn cohort_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate(&small_cfg(12, 4)).unwrap();
        write_cohort(dir.path(), &cohort).unwrap();
        let back = read_cohort(dir.path()).unwrap();
        assert_eq!(back.patients.len(), 4);
        for (a, b) in cohort.patients.iter().zip(&back.patients) {
            assert_eq!(a.record.id, b.record.id);
            assert_eq!(a.record.metadata, b.record.metadata);
            assert_eq!(a.volume, b.volume);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.severity, b.severity);
            assert_eq!(a.gt_radiomics, b.gt_radiomics);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.severity_probs = [0.5, 0.5, 0.5, 0.5];
        assert!(generate(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.missing_rate = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.n_patients = 0;
        assert!(cfg.validate().is_err());
    }
}
