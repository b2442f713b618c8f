//! Patient metadata handling: CSV I/O, mean imputation, z-scoring with a
//! strict fit/transform split, and node-feature assembly.
//!
//! All statistics (imputation means, scaler means and deviations) are
//! fitted on training rows only and then frozen; validation and test rows
//! are transformed with the training statistics.  Sex is encoded 0/1 in
//! the CSV before any scaling.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Canonical metadata column order (after `id,icu,vent,mort`).
pub const METADATA_COLUMNS: [&str; 14] = [
    "age",
    "sex",
    "temperature",
    "spo2",
    "leukocytes",
    "lymphocytes",
    "crp",
    "creatinine",
    "d_dimer",
    "ldh",
    "creatine_kinase",
    "troponin_t",
    "il6",
    "thrombocytes",
];

pub const NUM_METADATA: usize = METADATA_COLUMNS.len();

/// Outcome labels for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcomes {
    pub icu: bool,
    pub vent: bool,
    pub mort: bool,
}

impl Outcomes {
    pub fn get(&self, task: Task) -> bool {
        match task {
            Task::Icu => self.icu,
            Task::Vent => self.vent,
            Task::Mort => self.mort,
        }
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.icu, self.vent, self.mort]
    }
}

/// The three binary prediction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Icu,
    Vent,
    Mort,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Icu, Task::Vent, Task::Mort];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Icu => "icu",
            Task::Vent => "vent",
            Task::Mort => "mort",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icu" => Ok(Task::Icu),
            "vent" => Ok(Task::Vent),
            "mort" => Ok(Task::Mort),
            other => Err(Error::InvalidArgument {
                op: "task",
                reason: format!("unknown task '{other}', expected icu|vent|mort"),
            }),
        }
    }
}

/// One patient: identifier, raw metadata (missing allowed), outcome labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub metadata: Vec<Option<f64>>,
    pub outcomes: Outcomes,
}

/// Read patient metadata from CSV.  The header must be exactly
/// `id,icu,vent,mort` followed by the canonical metadata columns; an empty
/// cell denotes a missing value.
pub fn read_metadata_csv(path: &Path) -> Result<Vec<PatientRecord>> {
    let mut expected = vec!["id", "icu", "vent", "mort"];
    expected.extend(METADATA_COLUMNS);
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != expected {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected header {:?}, found {:?}", expected.join(","), header.join(",")),
        });
    }
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let id = field(0);
        if !seen.insert(id.clone()) {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("duplicate patient id '{id}'"),
            });
        }
        let parse_label = |i: usize, name: &str| -> Result<bool> {
            match field(i).as_str() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("row {}: label {name} must be 0 or 1, got '{other}'", line + 2),
                }),
            }
        };
        let outcomes = Outcomes {
            icu: parse_label(1, "icu")?,
            vent: parse_label(2, "vent")?,
            mort: parse_label(3, "mort")?,
        };
        let mut metadata = Vec::with_capacity(NUM_METADATA);
        for (j, name) in METADATA_COLUMNS.iter().enumerate() {
            let cell = field(4 + j);
            if cell.is_empty() {
                metadata.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    reason: format!("row {}: column {name} value '{cell}' is not a number", line + 2),
                })?;
                metadata.push(Some(v));
            }
        }
        records.push(PatientRecord { id, metadata, outcomes });
    }
    Ok(records)
}

/// Write patient metadata CSV in the canonical layout.
pub fn write_metadata_csv(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut header = vec!["id", "icu", "vent", "mort"];
    header.extend(METADATA_COLUMNS);
    let io_err = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    writer.write_record(&header).map_err(io_err)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            (r.outcomes.icu as u8).to_string(),
            (r.outcomes.vent as u8).to_string(),
            (r.outcomes.mort as u8).to_string(),
        ];
        for v in &r.metadata {
            row.push(match v {
                Some(x) => format!("{x}"),
                None => String::new(),
            });
        }
        writer.write_record(&row).map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io("flushing metadata csv", e))?;
    Ok(())
}

/// Per-column means fitted on training rows; replaces missing entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanImputer {
    pub means: Vec<f64>,
}

impl MeanImputer {
    /// Fit on the given rows (typically the training split).  Every column
    /// must have at least one observed value among them.
    pub fn fit(rows: &[&[Option<f64>]], column_names: &[&str]) -> Result<Self> {
        let d = column_names.len();
        let mut sums = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for row in rows {
            if row.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "MeanImputer::fit",
                    lhs: vec![row.len()],
                    rhs: vec![d],
                });
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(x) = v {
                    sums[j] += x;
                    counts[j] += 1;
                }
            }
        }
        let mut means = vec![0.0; d];
        for j in 0..d {
            if counts[j] == 0 {
                return Err(Error::Degenerate {
                    what: "MeanImputer::fit",
                    reason: format!("column '{}' has no observed values in the fit rows", column_names[j]),
                });
            }
            means[j] = sums[j] / counts[j] as f64;
        }
        Ok(Self { means })
    }

    pub fn transform(&self, row: &[Option<f64>]) -> Result<Vec<f64>> {
        if row.len() != self.means.len() {
            return Err(Error::ShapeMismatch {
                op: "MeanImputer::transform",
                lhs: vec![row.len()],
                rhs: vec![self.means.len()],
            });
        }
        Ok(row
            .iter()
            .zip(&self.means)
            .map(|(v, m)| v.unwrap_or(*m))
            .collect())
    }
}

/// Z-scoring with population standard deviation; constant columns map to 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Degenerate {
                what: "StandardScaler::fit",
                reason: "no fit rows".into(),
            });
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for row in rows {
            if row.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "StandardScaler::fit",
                    lhs: vec![row.len()],
                    rhs: vec![d],
                });
            }
            for (j, v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut std = vec![0.0; d];
        for row in rows {
            for (j, v) in row.iter().enumerate() {
                std[j] += (v - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n as f64).sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "StandardScaler::transform",
                lhs: vec![row.len()],
                rhs: vec![self.mean.len()],
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s == 0.0 { 0.0 } else { (v - m) / s })
            .collect())
    }
}

/// Imputation followed by z-scoring, both fitted on the same training rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preprocessor {
    pub imputer: MeanImputer,
    pub scaler: StandardScaler,
}

impl Preprocessor {
    pub fn fit(rows: &[&[Option<f64>]], column_names: &[&str]) -> Result<Self> {
        let imputer = MeanImputer::fit(rows, column_names)?;
        let imputed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| imputer.transform(r))
            .collect::<Result<_>>()?;
        let scaler = StandardScaler::fit(&imputed)?;
        Ok(Self { imputer, scaler })
    }

    pub fn transform(&self, row: &[Option<f64>]) -> Result<Vec<f64>> {
        self.scaler.transform(&self.imputer.transform(row)?)
    }
}

/// Concatenate metadata and radiomics feature vectors (metadata first).
pub fn assemble_node_features(metadata: &[f64], radiomics: &[f64], expected: usize) -> Result<Vec<f64>> {
    let mut f = Vec::with_capacity(metadata.len() + radiomics.len());
    f.extend_from_slice(metadata);
    f.extend_from_slice(radiomics);
    if f.len() != expected {
        return Err(Error::ShapeMismatch {
            op: "assemble_node_features",
            lhs: vec![f.len()],
            rhs: vec![expected],
        });
    }
    Ok(f)
}
