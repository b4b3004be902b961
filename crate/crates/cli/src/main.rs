//! Command-line front end: each subcommand wraps one pipeline stage, reads
//! the same flat configuration format, derives all randomness from one
//! global seed, and leaves a manifest describing what it did.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use cogbridge::adaptive::{
    calibrate_thresholds, read_stream, write_trace_csv, ControlDecision, Controller,
    ControllerConfig, WindowState, DEFAULT_COOLDOWN, DEFAULT_HYSTERESIS_FRACTION,
};
use cogbridge::config::{parse_transitions, AdaptiveSettings, FlatConfig};
use cogbridge::data::{load_dataset, write_dataset, Dataset, Portion, Sample, Space};
use cogbridge::gan::{read_generator_checkpoint, train};
use cogbridge::harness::{
    compare_tables, feature_report, generate_virtual_cohort, ExperimentConfig,
};
use cogbridge::normalize::{normalize_dataset, write_baseline_stats, DEFAULT_EPS};
use cogbridge::sbp::{energy_table, write_diagnostics, EnergyTable};
use cogbridge::selftest::run_selftests;
use cogbridge::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cogbridge",
    version,
    about = "Validate whether synthetic EEG-feature distributions preserve the \
             transition geometry of real recordings",
    after_help = "Configuration: flat `key = value` files with dotted keys \
                  (sbp.epsilon, gan.lambda_var, cohort.participants, adaptive.window); \
                  `--set key=value` overrides file entries and `--seed` overrides `seed`."
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set gan.lambda_var=0.5.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Global random seed; every stage derives its randomness from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Size of the worker thread pool (default: one per core). Results are
    /// identical at any degree.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Escalate non-converged transport solves to a runtime failure.
    #[arg(long, global = true)]
    strict: bool,

    /// Directory for outputs and the run manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw feature CSV and write it back in canonical form.
    Ingest {
        /// Input CSV with participant_id, task_portion and feature columns.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Canonicalized output (default: <out-dir>/dataset.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Baseline z-score a raw dataset per participant.
    Normalize {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Baseline task portion supplying the reference statistics.
        #[arg(long, value_name = "PORTION")]
        baseline: Option<String>,
        /// Normalized output (default: <out-dir>/normalized.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Baseline statistics sidecar (default: <out-dir>/baseline_stats.csv).
        #[arg(long, value_name = "FILE")]
        stats: Option<PathBuf>,
    },
    /// Draw a virtual cohort with known group structure.
    Cohort {
        /// Output CSV (default: <out-dir>/cohort.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train the conditional generator on a normalized dataset.
    Train {
        /// Normalized dataset (the output of `normalize`).
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
    },
    /// Draw synthetic samples from a trained generator checkpoint.
    Generate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Normalized dataset whose per-group sample counts are matched.
        #[arg(long, value_name = "FILE", conflicts_with = "per_group")]
        like: Option<PathBuf>,
        /// Draw this many samples for every (participant, portion) pair.
        #[arg(long, value_name = "N")]
        per_group: Option<usize>,
        /// Output CSV (default: <out-dir>/synthetic.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Transport energies between task portions, one row per participant.
    Energy {
        /// Normalized dataset.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Transition list such as P1:P2,P1:P3.
        #[arg(long, value_name = "LIST")]
        transitions: Option<String>,
        /// Output CSV (default: <out-dir>/energies.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compare real and synthetic energy tables.
    Compare {
        #[arg(long, value_name = "FILE")]
        real: PathBuf,
        #[arg(long, value_name = "FILE")]
        synth: PathBuf,
        /// Output JSON (default: <out-dir>/comparison.json).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-feature distribution statistics of real versus synthetic data.
    Report {
        /// Normalized real dataset.
        #[arg(long, value_name = "FILE")]
        real: PathBuf,
        /// Normalized synthetic dataset.
        #[arg(long, value_name = "FILE")]
        synth: PathBuf,
        /// Output CSV (default: <out-dir>/feature_report.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run the closed-loop controller over a recorded feature stream.
    Simulate {
        /// Baseline reference distribution (feature-column CSV).
        #[arg(long, value_name = "FILE")]
        reference: PathBuf,
        /// Feature stream to ingest (feature-column CSV).
        #[arg(long, value_name = "FILE")]
        stream: PathBuf,
        /// Decision trace output (default: <out-dir>/trace.csv).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run the embedded sanity-check suite.
    Selftest,
}

/// What every subcommand records next to its outputs. `created_unix` is the
/// only field allowed to differ between identical runs.
#[derive(Serialize)]
struct Manifest {
    command: String,
    created_unix: u64,
    versions: BTreeMap<String, String>,
    seed: u64,
    strict: bool,
    inputs: Vec<String>,
    outputs: Vec<String>,
    effective_config: serde_json::Value,
}

struct Context {
    experiment: ExperimentConfig,
    adaptive: AdaptiveSettings,
    strict: bool,
    out_dir: PathBuf,
}

impl Context {
    fn from_cli(cli: &Cli) -> Result<Self> {
        let mut flat = match &cli.config {
            Some(path) => FlatConfig::from_file(path)?,
            None => FlatConfig::default(),
        };
        for pair in &cli.overrides {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "--set expects KEY=VALUE, got `{pair}`"
                )));
            };
            flat.set(key, value);
        }
        if let Some(seed) = cli.seed {
            flat.set("seed", &seed.to_string());
        }
        let mut experiment = ExperimentConfig::default();
        flat.apply_experiment(&mut experiment)?;
        let mut adaptive = AdaptiveSettings::default();
        flat.apply_adaptive(&mut adaptive)?;
        flat.ensure_empty()?;
        Ok(Context {
            experiment,
            adaptive,
            strict: cli.strict,
            out_dir: cli.out_dir.clone(),
        })
    }

    fn out_path(&self, flag: &Option<PathBuf>, default_name: &str) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.out_dir.join(default_name))
    }

    fn write_manifest(
        &self,
        command: &str,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<()> {
        let mut versions = BTreeMap::new();
        versions.insert("cogbridge".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("cogbridge-cli".into(), env!("CARGO_PKG_VERSION").into());
        let manifest = Manifest {
            command: command.into(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            versions,
            seed: self.experiment.seed,
            strict: self.strict,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            effective_config: serde_json::json!({
                "experiment": serde_json::to_value(&self.experiment).expect("config serializes"),
                "adaptive": serde_json::to_value(self.adaptive).expect("config serializes"),
            }),
        };
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Clap's rendering includes the usage contract.
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            std::process::exit(1);
        }
    }
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_normalized(path: &Path) -> Result<Dataset> {
    let mut dataset = load_dataset(path, None)?;
    dataset.space = Space::Normalized;
    Ok(dataset)
}

fn parse_portion(raw: &str) -> Result<Portion> {
    raw.parse()
        .map_err(|label| Error::InvalidConfig(format!("bad portion `{label}`")))
}

fn run(cli: &Cli) -> Result<i32> {
    let ctx = Context::from_cli(cli)?;
    std::fs::create_dir_all(&ctx.out_dir)
        .map_err(|e| Error::io(ctx.out_dir.display().to_string(), e))?;
    match &cli.command {
        Command::Ingest { input, out } => {
            let dataset = load_dataset(input, None)?;
            let out = ctx.out_path(out, "dataset.csv");
            write_dataset(&dataset, &out)?;
            ctx.write_manifest("ingest", &[input], &[&out])?;
            println!(
                "ingested {} samples from {} participants",
                dataset.len(),
                dataset.participants().len()
            );
        }
        Command::Normalize {
            input,
            baseline,
            out,
            stats,
        } => {
            let dataset = load_dataset(input, None)?;
            let portion = match baseline {
                Some(raw) => parse_portion(raw)?,
                None => ctx.experiment.baseline_portion,
            };
            let clip = ctx.experiment.generator.clip;
            let (normalized, stats_map) =
                normalize_dataset(&dataset, portion, DEFAULT_EPS, clip)?;
            let out = ctx.out_path(out, "normalized.csv");
            let stats_out = ctx.out_path(stats, "baseline_stats.csv");
            write_dataset(&normalized, &out)?;
            write_baseline_stats(&stats_map, normalized.schema.names(), &stats_out)?;
            ctx.write_manifest("normalize", &[input], &[&out, &stats_out])?;
            println!("normalized {} samples against {portion}", normalized.len());
        }
        Command::Cohort { out } => {
            let mut cfg = ctx.experiment.cohort.clone();
            cfg.seed = ctx.experiment.seed;
            let dataset = generate_virtual_cohort(&cfg)?;
            let out = ctx.out_path(out, "cohort.csv");
            write_dataset(&dataset, &out)?;
            ctx.write_manifest("cohort", &[], &[&out])?;
            println!(
                "cohort of {} participants, {} samples",
                cfg.num_participants,
                dataset.len()
            );
        }
        Command::Train { input } => {
            let dataset = load_normalized(input)?;
            let mut train_cfg = ctx.experiment.train.clone();
            train_cfg.seed = ctx.experiment.seed;
            let checkpoint_dir = ctx.out_dir.join("checkpoints");
            std::fs::create_dir_all(&checkpoint_dir)
                .map_err(|e| Error::io(checkpoint_dir.display().to_string(), e))?;
            train_cfg.checkpoint_dir = Some(checkpoint_dir.clone());
            let result = train(
                &dataset,
                &ctx.experiment.generator,
                &ctx.experiment.critic,
                &train_cfg,
            )?;
            let log_path = ctx.out_dir.join("training_log.csv");
            result.log.write_csv(&log_path)?;
            let final_ckpt = checkpoint_dir.join("generator_final.ckpt");
            ctx.write_manifest("train", &[input], &[&final_ckpt, &log_path])?;
            println!(
                "trained {} generator steps; checkpoint at {}",
                train_cfg.generator_steps,
                final_ckpt.display()
            );
        }
        Command::Generate {
            checkpoint,
            like,
            per_group,
            out,
        } => {
            let model = read_generator_checkpoint(checkpoint)?;
            // One sub-seed per group, drawn in deterministic group order.
            let mut seeds = ChaCha20Rng::seed_from_u64(ctx.experiment.seed);
            let mut samples = Vec::new();
            let groups: Vec<(String, Portion, usize)> = match (like, per_group) {
                (Some(path), None) => {
                    let reference = load_normalized(path)?;
                    if reference.schema.names() != model.feature_names {
                        return Err(Error::SchemaMismatch(format!(
                            "checkpoint features {:?} vs dataset {:?}",
                            model.feature_names,
                            reference.schema.names()
                        )));
                    }
                    let mut groups = Vec::new();
                    for pid in reference.participants() {
                        for portion in reference.portions_of(&pid) {
                            let n = reference.group(&pid, portion)?.nrows();
                            groups.push((pid.clone(), portion, n));
                        }
                    }
                    groups
                }
                (None, Some(n)) => {
                    let mut groups = Vec::new();
                    for pid in &model.participants {
                        for portion in Portion::ALL {
                            groups.push((pid.clone(), portion, *n));
                        }
                    }
                    groups
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "generate needs exactly one of --like or --per-group".into(),
                    ))
                }
            };
            for (pid, portion, n) in groups {
                let seed = seeds.next_u64();
                let drawn = model.generate(&pid, portion, n, seed)?;
                for row in drawn.rows() {
                    samples.push(Sample {
                        participant_id: pid.clone(),
                        portion,
                        features: row.to_vec(),
                    });
                }
            }
            let schema = cogbridge::data::FeatureSchema::new(model.feature_names.clone())?;
            let synthetic = Dataset::new(schema, samples, Space::Normalized)?;
            let out = ctx.out_path(out, "synthetic.csv");
            write_dataset(&synthetic, &out)?;
            ctx.write_manifest("generate", &[checkpoint.as_path()], &[&out])?;
            println!("generated {} synthetic samples", synthetic.len());
        }
        Command::Energy {
            input,
            transitions,
            out,
        } => {
            let dataset = load_normalized(input)?;
            let transitions = match transitions {
                Some(raw) => parse_transitions(raw)?,
                None => ctx.experiment.transitions.clone(),
            };
            let (table, diagnostics) =
                energy_table(&dataset, &transitions, &ctx.experiment.sbp)?;
            if ctx.strict {
                if let Some(diag) = diagnostics.iter().find(|d| !d.converged) {
                    return Err(Error::NotConverged {
                        iterations: diag.iterations,
                        marginal_error: diag.marginal_error,
                        tolerance: ctx.experiment.sbp.tolerance,
                    });
                }
            }
            let out = ctx.out_path(out, "energies.csv");
            table.write_csv(&out)?;
            let diag_path = ctx.out_dir.join("diagnostics.jsonl");
            write_diagnostics(&diagnostics, &diag_path)?;
            ctx.write_manifest("energy", &[input], &[&out, &diag_path])?;
            println!(
                "computed {} energies over {} participants",
                table.participants.len() * table.transitions.len(),
                table.participants.len()
            );
        }
        Command::Compare { real, synth, out } => {
            let real_table = EnergyTable::read_csv(real)?;
            let synth_table = EnergyTable::read_csv(synth)?;
            let report =
                compare_tables(&real_table, &synth_table, ctx.experiment.direction_pair)?;
            let out = ctx.out_path(out, "comparison.json");
            report.write_json(&out)?;
            ctx.write_manifest("compare", &[real, synth], &[&out])?;
            println!("direction agreement: {}", report.direction_agreement);
            for s in &report.summaries {
                match s.rank_correlation {
                    Some(rho) => println!("rank correlation {}: {rho}", s.transition),
                    None => println!("rank correlation {}: undefined (constant column)", s.transition),
                }
            }
        }
        Command::Report { real, synth, out } => {
            let real_ds = load_normalized(real)?;
            let synth_ds = load_normalized(synth)?;
            let report = feature_report(&real_ds, &synth_ds, ctx.experiment.generator.clip)?;
            let out = ctx.out_path(out, "feature_report.csv");
            report.write_csv(&out)?;
            let hist_path = ctx.out_dir.join("feature_histograms.csv");
            report.write_histograms_csv(&hist_path)?;
            ctx.write_manifest("report", &[real, synth], &[&out, &hist_path])?;
            println!("reported {} features", report.rows.len());
        }
        Command::Simulate {
            reference,
            stream,
            out,
        } => {
            let (ref_names, ref_rows) = read_stream(reference)?;
            let (stream_names, stream_rows) = read_stream(stream)?;
            if ref_names != stream_names {
                return Err(Error::SchemaMismatch(format!(
                    "reference columns {ref_names:?} vs stream {stream_names:?}"
                )));
            }
            if ref_rows.is_empty() {
                return Err(Error::EmptyFile(reference.display().to_string()));
            }
            let d = ref_names.len();
            let mut points = ndarray::Array2::zeros((ref_rows.len(), d));
            for (i, row) in ref_rows.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    points[[i, j]] = *v;
                }
            }
            let reference_dist =
                cogbridge::sbp::EmpiricalDistribution::uniform(points)?;
            let mut window = WindowState::new(
                reference_dist,
                ctx.adaptive.window,
                ctx.adaptive.stride,
                ctx.experiment.sbp,
            )?;
            let mut energies = Vec::new();
            for row in &stream_rows {
                if let Some(energy) = window.ingest(row)? {
                    energies.push((window.ingested(), energy));
                }
            }
            let (controller_cfg, skip) = match (ctx.adaptive.theta_low, ctx.adaptive.theta_high)
            {
                (Some(low), Some(high)) => {
                    let cfg = ControllerConfig {
                        theta_low: low,
                        theta_high: high,
                        hysteresis: ctx
                            .adaptive
                            .hysteresis
                            .unwrap_or(DEFAULT_HYSTERESIS_FRACTION * (high - low)),
                        cooldown: ctx.adaptive.cooldown.unwrap_or(DEFAULT_COOLDOWN),
                    };
                    cfg.validate()?;
                    (cfg, 0)
                }
                (None, None) => {
                    let k = ctx.adaptive.calibration_windows.min(energies.len());
                    let calibration: Vec<f64> =
                        energies[..k].iter().map(|(_, e)| *e).collect();
                    let mut cfg = calibrate_thresholds(&calibration)?;
                    if let Some(h) = ctx.adaptive.hysteresis {
                        cfg.hysteresis = h;
                    }
                    if let Some(c) = ctx.adaptive.cooldown {
                        cfg.cooldown = c;
                    }
                    cfg.validate()?;
                    (cfg, k)
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "set both adaptive.theta_low and adaptive.theta_high, or neither \
                         for quantile calibration"
                            .into(),
                    ))
                }
            };
            let mut controller = Controller::new(controller_cfg)?;
            let trace: Vec<ControlDecision> = energies[skip..]
                .iter()
                .map(|&(index, energy)| ControlDecision {
                    index,
                    energy,
                    decision: controller.step(energy),
                })
                .collect();
            let out = ctx.out_path(out, "trace.csv");
            write_trace_csv(&trace, &out)?;
            ctx.write_manifest("simulate", &[reference, stream], &[&out])?;
            println!(
                "emitted {} decisions ({} calibration windows)",
                trace.len(),
                skip
            );
        }
        Command::Selftest => {
            let checks = run_selftests();
            let mut passed = 0;
            for c in &checks {
                if c.passed {
                    passed += 1;
                    println!("ok      {}", c.name);
                } else {
                    println!("FAILED  {}: {}", c.name, c.detail);
                }
            }
            println!("{passed}/{} checks passed", checks.len());
            ctx.write_manifest("selftest", &[], &[])?;
            if passed != checks.len() {
                return Ok(1);
            }
        }
    }
    Ok(0)
}
