//! Simulated closed-loop controller: a sliding window over a normalized
//! feature stream is compared against a baseline reference distribution by
//! rolling transport energy, and the energy drives discrete
//! increase/hold/reduce decisions with hysteresis and a cooldown.
//!
//! The feedback edge of the loop (the adapted system changing the user's
//! state) is simulated by scripted stream switching only; no behavioral
//! model is implemented here.

use crate::sbp::{sbp_energy_warm, EmpiricalDistribution, Potentials, SBPConfig};
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

/// Default sliding-window capacity in samples.
pub const DEFAULT_WINDOW: usize = 200;
/// Default stride between energy recomputations, in samples.
pub const DEFAULT_STRIDE: usize = 50;
/// Calibration quantiles for the low and high energy thresholds.
pub const CALIBRATION_QUANTILES: (f64, f64) = (0.2, 0.8);
/// Default hysteresis margin as a fraction of the threshold band.
pub const DEFAULT_HYSTERESIS_FRACTION: f64 = 0.1;
/// Default cooldown horizon in decision points.
pub const DEFAULT_COOLDOWN: usize = 2;

/// Sliding window over the incoming stream plus the fixed baseline
/// reference it is compared against.
#[derive(Debug, Clone)]
pub struct WindowState {
    capacity: usize,
    stride: usize,
    reference: EmpiricalDistribution,
    sbp: SBPConfig,
    buffer: VecDeque<Vec<f64>>,
    ingested: usize,
    warm: Option<Potentials>,
}

impl WindowState {
    /// A window of `capacity` samples whose energy against `reference` is
    /// recomputed every `stride` ingests once the window has filled.
    pub fn new(
        reference: EmpiricalDistribution,
        capacity: usize,
        stride: usize,
        sbp: SBPConfig,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig(
                "window capacity must be positive".into(),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        sbp.validate()?;
        Ok(WindowState {
            capacity,
            stride,
            reference,
            sbp,
            buffer: VecDeque::with_capacity(capacity),
            ingested: 0,
            warm: None,
        })
    }

    /// Number of samples ingested so far; doubles as the timestamp index of
    /// the decision emitted at a stride boundary.
    pub fn ingested(&self) -> usize {
        self.ingested
    }

    pub fn dimension(&self) -> usize {
        self.reference.dimension()
    }

    /// Push one sample FIFO. Returns a fresh window-versus-reference energy
    /// exactly at stride boundaries once the window is full, otherwise
    /// nothing. Consecutive solves warm-start from the previous potentials.
    pub fn ingest(&mut self, sample: &[f64]) -> Result<Option<f64>> {
        let d = self.reference.dimension();
        if sample.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sample.len(),
            });
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(sample.to_vec());
        self.ingested += 1;
        if self.buffer.len() < self.capacity || (self.ingested - self.capacity) % self.stride != 0
        {
            return Ok(None);
        }
        let mut points = Array2::zeros((self.capacity, d));
        for (i, row) in self.buffer.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                points[[i, j]] = *v;
            }
        }
        let window = EmpiricalDistribution::uniform(points)?;
        let result = sbp_energy_warm(&window, &self.reference, &self.sbp, self.warm.as_ref())?;
        self.warm = Some(result.potentials);
        Ok(Some(result.energy))
    }
}

/// Discrete control output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    IncreaseChallenge,
    Hold,
    ReduceChallenge,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::IncreaseChallenge => "IncreaseChallenge",
            Decision::Hold => "Hold",
            Decision::ReduceChallenge => "ReduceChallenge",
        })
    }
}

impl FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "IncreaseChallenge" => Ok(Decision::IncreaseChallenge),
            "Hold" => Ok(Decision::Hold),
            "ReduceChallenge" => Ok(Decision::ReduceChallenge),
            other => Err(other.to_string()),
        }
    }
}

/// One trace entry: the decision taken at sample `index` for `energy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub index: usize,
    pub energy: f64,
    pub decision: Decision,
}

/// Thresholds and debouncing for the decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub theta_low: f64,
    pub theta_high: f64,
    /// Hysteresis margin widening a threshold against entering a new
    /// direction; leaving it again is judged at the bare threshold.
    pub hysteresis: f64,
    /// Number of subsequent decision points during which a direction
    /// reversal is suppressed to Hold.
    pub cooldown: usize,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.hysteresis;
        if !self.theta_low.is_finite() || !self.theta_high.is_finite() || !h.is_finite() {
            return Err(Error::InvalidConfig("thresholds must be finite".into()));
        }
        if h < 0.0 {
            return Err(Error::InvalidConfig("hysteresis must be >= 0".into()));
        }
        if !(self.theta_low + h < self.theta_high - h) {
            return Err(Error::InvalidConfig(format!(
                "hysteresis bands overlap: {} + {h} must stay below {} - {h}",
                self.theta_low, self.theta_high
            )));
        }
        Ok(())
    }
}

/// Threshold rule alone, without cooldown: the previous decision widens the
/// band that must be crossed to enter a different direction, so energies
/// rattling inside the margin cannot flip the output.
pub fn decide(energy: f64, prev: Decision, cfg: &ControllerConfig) -> Decision {
    let high = if prev != Decision::ReduceChallenge {
        cfg.theta_high + cfg.hysteresis
    } else {
        cfg.theta_high
    };
    let low = if prev != Decision::IncreaseChallenge {
        cfg.theta_low - cfg.hysteresis
    } else {
        cfg.theta_low
    };
    if energy > high {
        Decision::ReduceChallenge
    } else if energy < low {
        Decision::IncreaseChallenge
    } else {
        Decision::Hold
    }
}

/// Stateful decision maker: [`decide`] plus cooldown suppression of
/// direction reversals. Deterministic in the energy sequence, so replaying
/// a trace's energies through a fresh controller reproduces its decisions.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    prev: Decision,
    last_direction: Option<Decision>,
    since_direction: usize,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Controller {
            cfg,
            prev: Decision::Hold,
            last_direction: None,
            since_direction: 0,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    /// Decision for the next energy reading.
    pub fn step(&mut self, energy: f64) -> Decision {
        let mut decision = decide(energy, self.prev, &self.cfg);
        if decision != Decision::Hold {
            if let Some(last) = self.last_direction {
                if decision != last && self.since_direction < self.cfg.cooldown {
                    decision = Decision::Hold;
                }
            }
        }
        if decision == Decision::Hold {
            self.since_direction = self.since_direction.saturating_add(1);
        } else {
            self.last_direction = Some(decision);
            self.since_direction = 0;
        }
        self.prev = decision;
        decision
    }
}

/// Decisions a fresh controller produces for an energy sequence.
pub fn replay_decisions(energies: &[f64], cfg: &ControllerConfig) -> Result<Vec<Decision>> {
    let mut controller = Controller::new(*cfg)?;
    Ok(energies.iter().map(|&e| controller.step(e)).collect())
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Session thresholds from a calibration run's energies: theta_low and
/// theta_high are the 0.2 and 0.8 quantiles, the hysteresis margin is a
/// fixed fraction of the band, and the cooldown takes its default.
pub fn calibrate_thresholds(energies: &[f64]) -> Result<ControllerConfig> {
    if energies.len() < 2 {
        return Err(Error::InvalidConfig(
            "calibration needs at least 2 energies".into(),
        ));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidConfig(
            "calibration energies must be finite".into(),
        ));
    }
    let mut sorted = energies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite energies"));
    let theta_low = quantile(&sorted, CALIBRATION_QUANTILES.0);
    let theta_high = quantile(&sorted, CALIBRATION_QUANTILES.1);
    if !(theta_high > theta_low) {
        return Err(Error::InvalidConfig(
            "calibration energies are constant between the quantiles".into(),
        ));
    }
    let cfg = ControllerConfig {
        theta_low,
        theta_high,
        hysteresis: DEFAULT_HYSTERESIS_FRACTION * (theta_high - theta_low),
        cooldown: DEFAULT_COOLDOWN,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Feed a stream through a window and controller, collecting the full
/// decision trace. An empty stream yields an empty trace.
pub fn simulate<I>(
    stream: I,
    window: &mut WindowState,
    controller: &mut Controller,
) -> Result<Vec<ControlDecision>>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut trace = Vec::new();
    for sample in stream {
        if let Some(energy) = window.ingest(&sample)? {
            let decision = controller.step(energy);
            trace.push(ControlDecision {
                index: window.ingested(),
                energy,
                decision,
            });
        }
    }
    Ok(trace)
}

pub fn write_trace_csv_to(trace: &[ControlDecision], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "index,energy,decision")?;
    for t in trace {
        writeln!(out, "{},{},{}", t.index, t.energy, t.decision)?;
    }
    Ok(())
}

pub fn write_trace_csv(trace: &[ControlDecision], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    write_trace_csv_to(trace, &mut out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a feature stream: a header line naming the feature columns, then
/// one comma-separated record per line. Unlike the dataset interchange
/// format there are no participant or portion columns.
pub fn read_stream(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_stream_from(std::io::BufReader::new(file), path.display().to_string())
}

fn read_stream_from(reader: impl BufRead, origin: String) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
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
    let names: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let mut rows = Vec::with_capacity(lines.len().saturating_sub(1));
    for (row, line) in &lines[1..] {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(Error::MalformedRow {
                row: *row,
                expected: names.len(),
                found: fields.len(),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for (j, raw) in fields.iter().enumerate() {
            let value: f64 = raw.parse().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: *row,
                    column: names[j].clone(),
                    value: raw.to_string(),
                });
            }
            values.push(value);
        }
        rows.push(values);
    }
    Ok((names, rows))
}
