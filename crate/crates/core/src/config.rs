//! Flat `key = value` configuration files with dotted keys namespacing the
//! modules (`sbp.epsilon`, `gan.lambda_var`), plus command-line `--set`
//! overrides. Appliers consume the keys they understand destructively so
//! that leftover keys can be reported as typos.

use crate::adaptive::{DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::data::Portion;
use crate::gan::{CriticConfig, GeneratorConfig, TrainConfig};
use crate::harness::{ExperimentConfig, VirtualCohortConfig};
use crate::normalize::ClipRange;
use crate::sbp::{Epsilon, SBPConfig};
use crate::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Parsed key/value pairs, ordered for reproducible error listings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    values: BTreeMap<String, String>,
}

impl FlatConfig {
    /// Parse configuration text: one `key = value` per line, `#` comments,
    /// blank lines ignored, later duplicates override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "line {}: empty key",
                    lineno + 1
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FlatConfig { values })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Insert or override one value; command-line flags go through here so
    /// they shadow file entries.
    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.trim().into(), value.trim().into());
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn take_parsed<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
    {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("key `{key}`: cannot parse `{raw}`"))
            }),
        }
    }

    fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors with the list of unconsumed keys; call after every applier.
    pub fn ensure_empty(&self) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
        Err(Error::InvalidConfig(format!(
            "unknown configuration keys: {}",
            keys.join(", ")
        )))
    }

    /// Consume `sbp.*` keys.
    pub fn apply_sbp(&mut self, cfg: &mut SBPConfig) -> Result<()> {
        if let Some(raw) = self.take("sbp.epsilon") {
            cfg.epsilon = parse_epsilon(&raw)?;
        }
        self.take_into("sbp.tolerance", &mut cfg.tolerance)?;
        self.take_into("sbp.max_iterations", &mut cfg.max_iterations)?;
        self.take_into("sbp.epsilon_scaling_steps", &mut cfg.epsilon_scaling_steps)?;
        Ok(())
    }

    /// Consume `gan.*` keys across the generator, critic and schedule.
    pub fn apply_gan(
        &mut self,
        generator: &mut GeneratorConfig,
        critic: &mut CriticConfig,
        train: &mut TrainConfig,
    ) -> Result<()> {
        self.take_into("gan.latent_dim", &mut generator.latent_dim)?;
        if let Some(dim) = self.take_parsed::<usize>("gan.embedding_dim")? {
            generator.embedding_dim = dim;
            critic.embedding_dim = dim;
        }
        self.take_into("gan.residual_blocks", &mut generator.residual_blocks)?;
        self.take_into("gan.width", &mut generator.width)?;
        let mut lo = generator.clip.lo;
        let mut hi = generator.clip.hi;
        self.take_into("gan.clip_lo", &mut lo)?;
        self.take_into("gan.clip_hi", &mut hi)?;
        if (lo, hi) != (generator.clip.lo, generator.clip.hi) {
            generator.clip = ClipRange::new(lo, hi)?;
        }
        self.take_into("gan.pack_size", &mut critic.pack_size)?;
        if let Some(raw) = self.take("gan.widths") {
            critic.widths = parse_list(&raw, "gan.widths")?;
        }
        self.take_into("gan.leaky_slope", &mut critic.leaky_slope)?;
        self.take_into("gan.lambda_gp", &mut train.lambda_gp)?;
        self.take_into("gan.lambda_var", &mut train.lambda_var)?;
        self.take_into("gan.critic_steps", &mut train.critic_steps_per_gen_step)?;
        self.take_into("gan.batch_size", &mut train.batch_size)?;
        self.take_into("gan.learning_rate", &mut train.learning_rate)?;
        self.take_into("gan.beta1", &mut train.beta1)?;
        self.take_into("gan.beta2", &mut train.beta2)?;
        self.take_into("gan.generator_steps", &mut train.generator_steps)?;
        self.take_into("gan.checkpoint_every", &mut train.checkpoint_every)?;
        Ok(())
    }

    /// Consume `cohort.*` keys.
    pub fn apply_cohort(&mut self, cfg: &mut VirtualCohortConfig) -> Result<()> {
        self.take_into("cohort.participants", &mut cfg.num_participants)?;
        self.take_into("cohort.samples_per_group", &mut cfg.samples_per_group)?;
        if let Some(raw) = self.take("cohort.features") {
            cfg.feature_names = raw.split(',').map(|s| s.trim().to_string()).collect();
        }
        self.take_into("cohort.baseline_mean_lo", &mut cfg.baseline_mean_range.0)?;
        self.take_into("cohort.baseline_mean_hi", &mut cfg.baseline_mean_range.1)?;
        self.take_into("cohort.baseline_std_lo", &mut cfg.baseline_std_range.0)?;
        self.take_into("cohort.baseline_std_hi", &mut cfg.baseline_std_range.1)?;
        for (i, portion) in ["p2", "p3", "p4"].iter().enumerate() {
            let key = format!("cohort.drift_{portion}");
            if let Some(raw) = self.take(&key) {
                cfg.portion_drifts[i] = parse_list(&raw, &key)?;
            }
            self.take_into(
                &format!("cohort.inflation_{portion}"),
                &mut cfg.portion_inflation[i],
            )?;
        }
        Ok(())
    }

    /// Consume shared experiment keys (`seed`, `transitions`,
    /// `baseline_portion`, `direction`) plus all namespaced module keys.
    pub fn apply_experiment(&mut self, cfg: &mut ExperimentConfig) -> Result<()> {
        self.take_into("seed", &mut cfg.seed)?;
        if let Some(raw) = self.take("transitions") {
            cfg.transitions = parse_transitions(&raw)?;
        }
        if let Some(raw) = self.take("baseline_portion") {
            cfg.baseline_portion = raw
                .parse()
                .map_err(|label| Error::InvalidConfig(format!("bad portion `{label}`")))?;
        }
        if let Some(raw) = self.take("direction") {
            let pair = parse_transitions(&raw)?;
            if pair.len() != 2 {
                return Err(Error::InvalidConfig(format!(
                    "key `direction`: expected exactly 2 transitions, got {}",
                    pair.len()
                )));
            }
            cfg.direction_pair = (pair[0], pair[1]);
        }
        self.apply_sbp(&mut cfg.sbp)?;
        self.apply_gan(&mut cfg.generator, &mut cfg.critic, &mut cfg.train)?;
        self.apply_cohort(&mut cfg.cohort)?;
        Ok(())
    }

    /// Consume `adaptive.*` keys.
    pub fn apply_adaptive(&mut self, cfg: &mut AdaptiveSettings) -> Result<()> {
        self.take_into("adaptive.window", &mut cfg.window)?;
        self.take_into("adaptive.stride", &mut cfg.stride)?;
        self.take_into("adaptive.calibration_windows", &mut cfg.calibration_windows)?;
        cfg.theta_low = self.take_parsed("adaptive.theta_low")?.or(cfg.theta_low);
        cfg.theta_high = self.take_parsed("adaptive.theta_high")?.or(cfg.theta_high);
        cfg.hysteresis = self.take_parsed("adaptive.hysteresis")?.or(cfg.hysteresis);
        cfg.cooldown = self.take_parsed("adaptive.cooldown")?.or(cfg.cooldown);
        Ok(())
    }
}

/// Controller-loop settings; thresholds left unset are calibrated from the
/// first energies of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptiveSettings {
    pub window: usize,
    pub stride: usize,
    /// Number of leading energies used for quantile calibration when no
    /// explicit thresholds are configured.
    pub calibration_windows: usize,
    pub theta_low: Option<f64>,
    pub theta_high: Option<f64>,
    pub hysteresis: Option<f64>,
    pub cooldown: Option<usize>,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        AdaptiveSettings {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            calibration_windows: 10,
            theta_low: None,
            theta_high: None,
            hysteresis: None,
            cooldown: None,
        }
    }
}

/// `median:0.05` scales the median ground cost; `absolute:0.3` is a fixed
/// value in squared feature units. A bare number means `median:<number>`.
pub fn parse_epsilon(raw: &str) -> Result<Epsilon> {
    let bad = || Error::InvalidConfig(format!("bad epsilon `{raw}` (median:X or absolute:X)"));
    let eps = match raw.split_once(':') {
        Some(("median", v)) => Epsilon::MedianScale(v.trim().parse().map_err(|_| bad())?),
        Some(("absolute", v)) => Epsilon::Absolute(v.trim().parse().map_err(|_| bad())?),
        Some(_) => return Err(bad()),
        None => Epsilon::MedianScale(raw.trim().parse().map_err(|_| bad())?),
    };
    Ok(eps)
}

/// Comma-separated transition list, e.g. `P1:P2,P1:P3`.
pub fn parse_transitions(raw: &str) -> Result<Vec<(Portion, Portion)>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        let Some((from, to)) = part.split_once(':') else {
            return Err(Error::InvalidConfig(format!(
                "bad transition `{part}` (expected FROM:TO, e.g. P1:P2)"
            )));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<Portion>()
                .map_err(|label| Error::InvalidConfig(format!("bad portion `{label}`")))
        };
        out.push((parse(from)?, parse(to)?));
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("empty transition list".into()));
    }
    Ok(out)
}

fn parse_list<T: FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("key `{key}`: cannot parse `{s}`")))
        })
        .collect()
}
