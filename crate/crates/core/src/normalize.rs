//! Baseline-referenced z-score normalization with fixed-range clipping and
//! the inverse transform back to raw units.
//!
//! Each participant's first task portion serves as their personal reference:
//! `x' = (x - mu_baseline) / (sigma_baseline + eps)`, clamped to a fixed
//! range afterwards. All downstream modeling and transport analysis happens
//! in this space.

use crate::data::{feature_statistics, Dataset, Portion, Sample, Space};
use crate::{Error, Result};
use ndarray::Array1;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Per-participant baseline mean/std in raw units, plus the stabilizing
/// constant added to sigma before dividing.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStats {
    pub participant_id: String,
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
    pub eps: f64,
    pub baseline_portion: Portion,
}

/// Inclusive clamp range applied after normalization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "clip range must satisfy lo < hi with finite bounds, got [{lo}, {hi}]"
            )));
        }
        Ok(ClipRange { lo, hi })
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

impl Default for ClipRange {
    /// ±5 normalized units; wide enough that near-Gaussian baselines are
    /// effectively never clipped.
    fn default() -> Self {
        ClipRange { lo: -5.0, hi: 5.0 }
    }
}

pub const DEFAULT_EPS: f64 = 1e-6;

/// Mean and population std of a participant's baseline-portion samples.
pub fn compute_baseline(
    dataset: &Dataset,
    participant: &str,
    baseline_portion: Portion,
    eps: f64,
) -> Result<BaselineStats> {
    let group = dataset.group(participant, baseline_portion)?;
    let (mu, sigma) = feature_statistics(&group);
    Ok(BaselineStats {
        participant_id: participant.to_string(),
        mu,
        sigma,
        eps,
        baseline_portion,
    })
}

/// `clamp((x - mu) / (sigma + eps), lo, hi)` per coordinate.
pub fn apply(x: &[f64], stats: &BaselineStats, clip: ClipRange) -> Result<Vec<f64>> {
    if x.len() != stats.mu.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.mu.len(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, v)| clip.clamp((v - stats.mu[i]) / (stats.sigma[i] + stats.eps)))
        .collect())
}

/// Inverse of [`apply`] on unclipped points: `x_norm * (sigma + eps) + mu`.
pub fn invert(x_norm: &[f64], stats: &BaselineStats) -> Result<Vec<f64>> {
    if x_norm.len() != stats.mu.len() {
        return Err(Error::DimensionMismatch {
            expected: stats.mu.len(),
            got: x_norm.len(),
        });
    }
    Ok(x_norm
        .iter()
        .enumerate()
        .map(|(i, v)| v * (stats.sigma[i] + stats.eps) + stats.mu[i])
        .collect())
}

/// Normalize every sample with its own participant's baseline statistics.
/// Returns the transformed dataset plus the per-participant statistics used.
pub fn normalize_dataset(
    dataset: &Dataset,
    baseline_portion: Portion,
    eps: f64,
    clip: ClipRange,
) -> Result<(Dataset, BTreeMap<String, BaselineStats>)> {
    let mut stats = BTreeMap::new();
    for pid in dataset.participants() {
        stats.insert(
            pid.clone(),
            compute_baseline(dataset, &pid, baseline_portion, eps)?,
        );
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let st = &stats[&s.participant_id];
        samples.push(Sample {
            participant_id: s.participant_id.clone(),
            portion: s.portion,
            features: apply(&s.features, st, clip)?,
        });
    }
    let normalized = Dataset::new(dataset.schema.clone(), samples, Space::Normalized)?;
    Ok((normalized, stats))
}

/// Write baseline statistics as a CSV sidecar:
/// `participant_id,mu_<f>...,sigma_<f>...`.
pub fn write_baseline_stats(
    stats: &BTreeMap<String, BaselineStats>,
    feature_names: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e| Error::io(path.display().to_string(), e);
    write!(out, "participant_id").map_err(io_err)?;
    for n in feature_names {
        write!(out, ",mu_{n}").map_err(io_err)?;
    }
    for n in feature_names {
        write!(out, ",sigma_{n}").map_err(io_err)?;
    }
    writeln!(out).map_err(io_err)?;
    for (pid, st) in stats {
        write!(out, "{pid}").map_err(io_err)?;
        for v in st.mu.iter().chain(st.sigma.iter()) {
            write!(out, ",{v}").map_err(io_err)?;
        }
        writeln!(out).map_err(io_err)?;
    }
    Ok(())
}

/// Read a baseline-statistics sidecar written by [`write_baseline_stats`].
/// `eps` and the baseline portion are not stored in the file and must be
/// supplied by the caller.
pub fn read_baseline_stats(
    path: impl AsRef<Path>,
    eps: f64,
    baseline_portion: Portion,
) -> Result<BTreeMap<String, BaselineStats>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                let t = line.trim().to_string();
                if !t.is_empty() && !t.starts_with('#') {
                    break t;
                }
            }
            None => return Err(Error::EmptyFile(path.display().to_string())),
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"participant_id") {
        return Err(Error::MissingColumn("participant_id".into()));
    }
    let d = (cols.len() - 1) / 2;
    if cols.len() != 1 + 2 * d || d == 0 {
        return Err(Error::MissingColumn("mu_*/sigma_* pairs".into()));
    }
    let mut stats = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::MalformedRow {
                row: lineno + 2,
                expected: cols.len(),
                found: fields.len(),
            });
        }
        let parse = |s: &str, col: usize| -> Result<f64> {
            let v: f64 = s.parse().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: lineno + 2,
                    column: cols[col].to_string(),
                    value: s.to_string(),
                });
            }
            Ok(v)
        };
        let mut mu = Array1::zeros(d);
        let mut sigma = Array1::zeros(d);
        for j in 0..d {
            mu[j] = parse(fields[1 + j], 1 + j)?;
            sigma[j] = parse(fields[1 + d + j], 1 + d + j)?;
        }
        stats.insert(
            fields[0].to_string(),
            BaselineStats {
                participant_id: fields[0].to_string(),
                mu,
                sigma,
                eps,
                baseline_portion,
            },
        );
    }
    Ok(stats)
}
