//! Fast built-in sanity suite exercising one hand-checkable example from
//! every module; the CLI exposes it as the `selftest` subcommand. Each
//! check is independent and cheap, so the whole suite runs in seconds.

use crate::adaptive::{calibrate_thresholds, decide, Decision, WindowState};
use crate::data::{Dataset, FeatureSchema, Portion, Sample, Space};
use crate::gan::{critic_loss, pack, variance_loss, CriticConfig, CriticModel, PackedBatch};
use crate::harness::{direction_agreement, fixtures, group_summary};
use crate::normalize::{apply, compute_baseline, invert, ClipRange};
use crate::sbp::{gaussian_transport_oracle, sbp_energy, EmpiricalDistribution, SBPConfig};
use crate::autodiff::Tape;
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Failure explanation; empty when passed.
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(), String>) -> SelfCheck {
    match run() {
        Ok(()) => SelfCheck {
            name,
            passed: true,
            detail: String::new(),
        },
        Err(detail) => SelfCheck {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, detail: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.into())
    }
}

fn close(value: f64, expected: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure(
        (value - expected).abs() <= tol,
        format!("{what}: got {value}, expected {expected} within {tol}"),
    )
}

fn tiny_dataset() -> Dataset {
    let schema = FeatureSchema::new(vec!["theta".into(), "alpha".into()]).unwrap();
    let rows = [
        (Portion::P1, [1.0, -2.0]),
        (Portion::P1, [3.0, 0.0]),
        (Portion::P1, [5.0, 2.0]),
        (Portion::P2, [4.0, 4.0]),
        (Portion::P2, [6.0, 5.0]),
    ];
    let samples = rows
        .iter()
        .map(|(portion, f)| Sample {
            participant_id: "p01".into(),
            portion: *portion,
            features: f.to_vec(),
        })
        .collect();
    Dataset::new(schema, samples, Space::Raw).unwrap()
}

/// Run every embedded check and collect the outcomes.
pub fn run_selftests() -> Vec<SelfCheck> {
    vec![
        check("normalize: baseline re-normalizes to mean zero", || {
            let data = tiny_dataset();
            let stats = compute_baseline(&data, "p01", Portion::P1, 1e-6)
                .map_err(|e| e.to_string())?;
            let clip = ClipRange::default();
            let group = data.group("p01", Portion::P1).map_err(|e| e.to_string())?;
            let mut mean = vec![0.0; 2];
            for row in group.rows() {
                let z = apply(row.as_slice().unwrap(), &stats, clip)
                    .map_err(|e| e.to_string())?;
                for (m, v) in mean.iter_mut().zip(&z) {
                    *m += v / group.nrows() as f64;
                }
            }
            ensure(
                mean.iter().all(|m| m.abs() <= 1e-9),
                format!("baseline mean {mean:?}"),
            )
        }),
        check("normalize: invert after apply is the identity", || {
            let data = tiny_dataset();
            let stats = compute_baseline(&data, "p01", Portion::P1, 1e-6)
                .map_err(|e| e.to_string())?;
            let x = [2.5, -1.25];
            let z = apply(&x, &stats, ClipRange::default()).map_err(|e| e.to_string())?;
            let back = invert(&z, &stats).map_err(|e| e.to_string())?;
            close(back[0], x[0], 1e-12, "roundtrip x0")?;
            close(back[1], x[1], 1e-12, "roundtrip x1")
        }),
        check("autodiff: d(x*x)/dx equals 2x", || {
            let mut tape = Tape::new();
            let x = tape.leaf(array![[1.5]]);
            let y = tape.mul(x, x);
            let grads = tape.grad(y, &[x]).map_err(|e| e.to_string())?;
            close(tape.value(grads[0])[[0, 0]], 3.0, 1e-12, "gradient")
        }),
        check("gan: constant critic loss equals lambda_gp", || {
            let cfg = CriticConfig {
                pack_size: 2,
                widths: vec![4],
                leaky_slope: 0.2,
                embedding_dim: 2,
            };
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            let mut critic = CriticModel::init(&cfg, vec!["a".into()], 2, &mut rng)
                .map_err(|e| e.to_string())?;
            for t in critic.tensors_mut() {
                t.fill(0.0);
            }
            let conditions = vec![(0usize, Portion::P1)];
            let feats = array![[0.1, 0.2, 0.3, 0.4]];
            let mk = |f: Array2<f64>| PackedBatch {
                features: f,
                conditions: conditions.clone(),
            };
            let (parts, _) = critic_loss(
                &critic,
                &mk(feats.clone()),
                &mk(feats.clone() * 0.5),
                &mk(feats * 0.75),
                10.0,
            )
            .map_err(|e| e.to_string())?;
            close(parts.total, 10.0, 1e-12, "critic loss")
        }),
        check("gan: variance-matching hand case equals 2", || {
            let cond = vec![(0usize, Portion::P1); 4];
            let real = array![[1.0, 2.0], [-1.0, 0.0], [1.0, -2.0], [-1.0, 0.0]];
            let generated = array![[1.0, 5.0], [-1.0, 5.0], [1.0, 5.0], [-1.0, 5.0]];
            let l = variance_loss(&real, &cond, &generated, &cond).map_err(|e| e.to_string())?;
            close(l, 2.0, 1e-12, "variance loss")
        }),
        check("gan: pack concatenates same-condition samples", || {
            let s = |f: Vec<f64>| Sample {
                participant_id: "p01".into(),
                portion: Portion::P2,
                features: f,
            };
            let (features, condition) =
                pack(&[s(vec![1.0, 2.0]), s(vec![3.0, 4.0])]).map_err(|e| e.to_string())?;
            ensure(
                features == vec![1.0, 2.0, 3.0, 4.0] && condition == ("p01".into(), Portion::P2),
                format!("pack gave {features:?}"),
            )?;
            let mut other = s(vec![9.0, 9.0]);
            other.portion = Portion::P3;
            ensure(
                pack(&[s(vec![1.0, 2.0]), other]).is_err(),
                "mixed-condition pack must be rejected",
            )
        }),
        check("sbp: singleton translation costs the squared distance", || {
            let a = EmpiricalDistribution::uniform(array![[0.0, 0.0]]).map_err(|e| e.to_string())?;
            let b = EmpiricalDistribution::uniform(array![[3.0, 4.0]]).map_err(|e| e.to_string())?;
            let r = sbp_energy(&a, &b, &SBPConfig::default()).map_err(|e| e.to_string())?;
            close(r.energy, 25.0, 1e-9, "singleton energy")
        }),
        check("sbp: marginals are feasible on a random problem", || {
            let mut rng = ChaCha20Rng::seed_from_u64(5);
            let mut draw = |n: usize| {
                use rand_distr::{Distribution, StandardNormal};
                Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut rng))
            };
            let a = EmpiricalDistribution::uniform(draw(20)).map_err(|e| e.to_string())?;
            let b = EmpiricalDistribution::uniform(draw(25)).map_err(|e| e.to_string())?;
            let r = sbp_energy(&a, &b, &SBPConfig::default()).map_err(|e| e.to_string())?;
            ensure(
                r.converged && r.marginal_error <= 1e-8,
                format!("marginal error {}", r.marginal_error),
            )
        }),
        check("sbp: unit mean shift of equal Gaussians costs 1", || {
            let oracle = gaussian_transport_oracle(
                &array![0.0],
                &array![[1.0]],
                &array![1.0],
                &array![[1.0]],
            )
            .map_err(|e| e.to_string())?;
            close(oracle, 1.0, 1e-12, "1-D oracle")
        }),
        check("harness: reference tables agree on 7 of 10 directions", || {
            let real = fixtures::reference_real_energies();
            let synth = fixtures::reference_synthetic_energies();
            let pair = ((Portion::P1, Portion::P2), (Portion::P1, Portion::P3));
            let agreement =
                direction_agreement(&real, &synth, pair).map_err(|e| e.to_string())?;
            ensure(agreement == 0.7, format!("agreement {agreement}"))
        }),
        check("harness: reference group mean reproduces exactly", || {
            let real = fixtures::reference_real_energies();
            let (mean, _) = group_summary(&real, (Portion::P1, Portion::P2))
                .map_err(|e| e.to_string())?;
            close(mean, 0.0006407, 1e-12, "group mean")
        }),
        check("adaptive: threshold rule on hand values", || {
            let cfg = crate::adaptive::ControllerConfig {
                theta_low: 1.0,
                theta_high: 2.0,
                hysteresis: 0.2,
                cooldown: 0,
            };
            ensure(decide(1.5, Decision::Hold, &cfg) == Decision::Hold, "midway")?;
            ensure(
                decide(2.4, Decision::Hold, &cfg) == Decision::ReduceChallenge,
                "theta_high + 2h",
            )?;
            ensure(
                decide(0.7, Decision::Hold, &cfg) == Decision::IncreaseChallenge,
                "theta_low - 2h",
            )
        }),
        check("adaptive: quantile calibration on 0..=10", || {
            let energies: Vec<f64> = (0..=10).map(|i| i as f64).collect();
            let cfg = calibrate_thresholds(&energies).map_err(|e| e.to_string())?;
            close(cfg.theta_low, 2.0, 1e-12, "theta_low")?;
            close(cfg.theta_high, 8.0, 1e-12, "theta_high")
        }),
        check("adaptive: window of 10 stride 5 fires at samples 10 and 15", || {
            let reference = EmpiricalDistribution::uniform(array![
                [0.0],
                [1.0],
                [-1.0],
                [0.5]
            ])
            .map_err(|e| e.to_string())?;
            let mut window = WindowState::new(reference, 10, 5, SBPConfig::default())
                .map_err(|e| e.to_string())?;
            let mut fired = Vec::new();
            for i in 1..=15 {
                let out = window.ingest(&[0.1 * i as f64]).map_err(|e| e.to_string())?;
                if out.is_some() {
                    fired.push(i);
                }
            }
            ensure(fired == vec![10, 15], format!("fired at {fired:?}"))
        }),
    ]
}
