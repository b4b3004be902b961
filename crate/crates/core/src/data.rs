//! Feature-space data model: schemas, samples, datasets, and the CSV
//! interchange format.
//!
//! A dataset is a flat list of feature vectors, each tagged with a
//! participant identity and one of the four task portions P1–P4. The file
//! format is plain comma-separated text with a
//! `participant_id,task_portion,<feature...>` header; blank lines and lines
//! starting with `#` are ignored.

use crate::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

/// One of the four task portions. P1 is the baseline reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Portion {
    P1,
    P2,
    P3,
    P4,
}

impl Portion {
    pub const ALL: [Portion; 4] = [Portion::P1, Portion::P2, Portion::P3, Portion::P4];

    /// Zero-based index, P1 = 0.
    pub fn index(self) -> usize {
        match self {
            Portion::P1 => 0,
            Portion::P2 => 1,
            Portion::P3 => 2,
            Portion::P4 => 3,
        }
    }
}

impl fmt::Display for Portion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index() + 1)
    }
}

impl FromStr for Portion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "P1" => Ok(Portion::P1),
            "P2" => Ok(Portion::P2),
            "P3" => Ok(Portion::P3),
            "P4" => Ok(Portion::P4),
            other => Err(other.to_string()),
        }
    }
}

/// Whether feature values are in raw units or baseline-referenced units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    Raw,
    Normalized,
}

/// Ordered feature names; the dimension `d` of the feature space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    names: Vec<String>,
}

impl FeatureSchema {
    /// Build a schema from feature names. Names must be unique and non-empty,
    /// and there must be at least one.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidSchema("no feature names given".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::InvalidSchema(format!("feature {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidSchema(format!("duplicate feature name `{n}`")));
            }
        }
        Ok(FeatureSchema { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Feature-space dimension.
    pub fn dimension(&self) -> usize {
        self.names.len()
    }
}

/// A single tagged feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub participant_id: String,
    pub portion: Portion,
    pub features: Vec<f64>,
}

/// An immutable collection of samples sharing one schema and one space tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub samples: Vec<Sample>,
    pub space: Space,
}

impl Dataset {
    /// Assemble a dataset, validating that every sample matches the schema
    /// dimension and is finite.
    pub fn new(schema: FeatureSchema, samples: Vec<Sample>, space: Space) -> Result<Self> {
        let d = schema.dimension();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.features.len(),
                });
            }
            if let Some(j) = s.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row: i + 1,
                    column: schema.names()[j].clone(),
                    value: s.features[j].to_string(),
                });
            }
        }
        Ok(Dataset {
            schema,
            samples,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Participant ids in order of first appearance, deduplicated.
    pub fn participants(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.participant_id) {
                seen.push(s.participant_id.clone());
            }
        }
        seen
    }

    /// Portions present for a participant, in P1..P4 order.
    pub fn portions_of(&self, participant: &str) -> Vec<Portion> {
        Portion::ALL
            .into_iter()
            .filter(|p| {
                self.samples
                    .iter()
                    .any(|s| s.participant_id == participant && s.portion == *p)
            })
            .collect()
    }

    /// Feature vectors of one (participant, portion) group as an `n × d`
    /// matrix, in file order. Errors with [`Error::EmptyGroup`] when no
    /// sample matches.
    pub fn group(&self, participant: &str, portion: Portion) -> Result<Array2<f64>> {
        let rows: Vec<&Sample> = self
            .samples
            .iter()
            .filter(|s| s.participant_id == participant && s.portion == portion)
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyGroup {
                participant: participant.to_string(),
                portion: portion.to_string(),
            });
        }
        let d = self.schema.dimension();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, s) in rows.iter().enumerate() {
            for (j, v) in s.features.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        Ok(m)
    }

    /// Per-feature mean and population standard deviation of one group.
    pub fn group_statistics(
        &self,
        participant: &str,
        portion: Portion,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        Ok(feature_statistics(&self.group(participant, portion)?))
    }

    /// Per-feature mean and population standard deviation over all samples.
    pub fn overall_statistics(&self) -> Result<(Array1<f64>, Array1<f64>)> {
        if self.samples.is_empty() {
            return Err(Error::EmptyGroup {
                participant: "<all>".into(),
                portion: "<all>".into(),
            });
        }
        let mut m = Array2::zeros((self.samples.len(), self.schema.dimension()));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, v) in s.features.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        Ok(feature_statistics(&m))
    }
}

/// Per-feature mean and population standard deviation (divide by `n`) of a
/// non-empty `n × d` point matrix.
pub fn feature_statistics(points: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = points.nrows() as f64;
    let mean = points.sum_axis(ndarray::Axis(0)) / n;
    let mut var = Array1::zeros(points.ncols());
    for row in points.rows() {
        for (j, v) in row.iter().enumerate() {
            let c = v - mean[j];
            var[j] += c * c;
        }
    }
    var /= n;
    (mean, var.mapv(f64::sqrt))
}

/// Load a dataset from the CSV interchange format; the result is tagged
/// [`Space::Raw`]. When `schema` is given, the file must contain every named
/// feature column and the dataset takes the schema's column order; extra
/// columns are ignored.
pub fn load_dataset(path: impl AsRef<Path>, schema: Option<&FeatureSchema>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_dataset_from(BufReader::new(file), path.display().to_string(), schema)
}

fn load_dataset_from(
    reader: impl BufRead,
    origin: String,
    schema: Option<&FeatureSchema>,
) -> Result<Dataset> {
    let mut lines = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin.clone(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        lines.push((lineno + 1, trimmed.to_string()));
    }
    let Some((_, header)) = lines.first() else {
        return Err(Error::EmptyFile(origin));
    };

    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let pid_col = columns
        .iter()
        .position(|c| c == "participant_id")
        .ok_or_else(|| Error::MissingColumn("participant_id".into()))?;
    let portion_col = columns
        .iter()
        .position(|c| c == "task_portion")
        .ok_or_else(|| Error::MissingColumn("task_portion".into()))?;

    let file_features: Vec<(usize, String)> = columns
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pid_col && *i != portion_col)
        .map(|(i, c)| (i, c.clone()))
        .collect();

    // Column indices to read, in schema order.
    let (schema, feature_cols): (FeatureSchema, Vec<usize>) = match schema {
        Some(s) => {
            let mut cols = Vec::with_capacity(s.dimension());
            for name in s.names() {
                let idx = file_features
                    .iter()
                    .find(|(_, c)| c == name)
                    .map(|(i, _)| *i)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))?;
                cols.push(idx);
            }
            (s.clone(), cols)
        }
        None => {
            let names: Vec<String> = file_features.iter().map(|(_, c)| c.clone()).collect();
            let cols = file_features.iter().map(|(i, _)| *i).collect();
            (FeatureSchema::new(names)?, cols)
        }
    };

    let mut samples = Vec::with_capacity(lines.len().saturating_sub(1));
    for (row, line) in &lines[1..] {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::MalformedRow {
                row: *row,
                expected: columns.len(),
                found: fields.len(),
            });
        }
        let portion = fields[portion_col]
            .parse::<Portion>()
            .map_err(|label| Error::UnknownPortion { row: *row, label })?;
        let mut features = Vec::with_capacity(feature_cols.len());
        for (j, &col) in feature_cols.iter().enumerate() {
            let raw = fields[col];
            let value: f64 = raw.parse().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: *row,
                    column: schema.names()[j].clone(),
                    value: raw.to_string(),
                });
            }
            features.push(value);
        }
        samples.push(Sample {
            participant_id: fields[pid_col].to_string(),
            portion,
            features,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyFile(origin));
    }
    Dataset::new(schema, samples, Space::Raw)
}

/// Write a dataset in the CSV interchange format. Floats are written with
/// the shortest representation that parses back to the same bits, so a
/// write/load round trip is exact.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e| Error::io(path.display().to_string(), e);
    write!(out, "participant_id,task_portion").map_err(io_err)?;
    for name in dataset.schema.names() {
        write!(out, ",{name}").map_err(io_err)?;
    }
    writeln!(out).map_err(io_err)?;
    for s in &dataset.samples {
        debug_assert!(!s.participant_id.contains(','), "ids must be comma-free");
        write!(out, "{},{}", s.participant_id, s.portion).map_err(io_err)?;
        for v in &s.features {
            write!(out, ",{v}").map_err(io_err)?;
        }
        writeln!(out).map_err(io_err)?;
    }
    Ok(())
}
