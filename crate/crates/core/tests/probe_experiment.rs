use cogbridge::data::Portion;
use cogbridge::gan::read_generator_checkpoint;
use cogbridge::harness::{
    generate_virtual_cohort, generate_virtual_cohort_with_truth, run_experiment,
    ExperimentConfig, ExperimentInput,
};
use cogbridge::normalize::{normalize_dataset, DEFAULT_EPS};

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - mx)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mx) * (b - mx)).sum();
    cov / (vx * vy).sqrt()
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[test]
#[ignore]
fn probe_default_experiment() {
    let out = std::path::Path::new("/tmp/exp_probe");
    let _ = std::fs::remove_dir_all(out);
    std::fs::create_dir_all(out).unwrap();
    let cfg = ExperimentConfig::default();
    let t0 = std::time::Instant::now();
    let report = run_experiment(ExperimentInput::Cohort, &cfg, out).unwrap();
    println!("PROBE run_experiment took {:.1}s", t0.elapsed().as_secs_f64());
    println!("PROBE agreement {}", report.direction_agreement);
    for s in &report.summaries {
        println!(
            "PROBE transition {} rank_corr {:?} real_mean {:.4} synth_mean {:.4}",
            s.transition, s.rank_correlation, s.real_mean, s.synthetic_mean
        );
    }
    println!(
        "PROBE real table:\n{}",
        std::fs::read_to_string(out.join("energy_real.csv")).unwrap()
    );
    println!(
        "PROBE synth table:\n{}",
        std::fs::read_to_string(out.join("energy_synth.csv")).unwrap()
    );

    let mut seed_state = cfg.seed;
    let cohort_seed = splitmix(&mut seed_state);
    let mut cohort_cfg = cfg.cohort.clone();
    cohort_cfg.seed = cohort_seed;
    let truth = generate_virtual_cohort_with_truth(&cohort_cfg).unwrap();
    let oracle = truth
        .oracle_energy_table(&cfg.transitions, true)
        .unwrap();
    let real_tab =
        cogbridge::sbp::EnergyTable::read_csv(out.join("energy_real.csv")).unwrap();
    let synth_tab =
        cogbridge::sbp::EnergyTable::read_csv(out.join("energy_synth.csv")).unwrap();
    for (ti, tr) in cfg.transitions.iter().enumerate() {
        let o: Vec<f64> = (0..10).map(|p| oracle.energies[[p, ti]]).collect();
        let r = real_tab.column(*tr).unwrap();
        let s = synth_tab.column(*tr).unwrap();
        println!(
            "PROBE {:?} spearman oracle-real {:.3} oracle-synth {:.3} real-synth {:.3}",
            tr,
            spearman(&o, &r),
            spearman(&o, &s),
            spearman(&r, &s)
        );
    }
    let raw = generate_virtual_cohort(&cohort_cfg).unwrap();
    let (normalized, _) =
        normalize_dataset(&raw, cfg.baseline_portion, DEFAULT_EPS, cfg.generator.clip).unwrap();
    let model =
        read_generator_checkpoint(out.join("checkpoints/generator_final.ckpt")).unwrap();
    let group_mean = |m: &ndarray::Array2<f64>| -> Vec<f64> {
        (0..m.ncols()).map(|j| m.column(j).mean().unwrap()).collect()
    };
    let group_var = |m: &ndarray::Array2<f64>| -> Vec<f64> {
        (0..m.ncols())
            .map(|j| {
                let c = m.column(j);
                let mu = c.mean().unwrap();
                c.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c.len() as f64
            })
            .collect()
    };
    let norm2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    println!("PROBE per-participant shift decomposition, P1->P4:");
    for (i, pid) in normalized.participants().iter().enumerate() {
        let r1 = normalized.group(pid, Portion::P1).unwrap();
        let r2 = normalized.group(pid, Portion::P4).unwrap();
        let g1 = model.generate(pid, Portion::P1, 800, 500 + i as u64).unwrap();
        let g2 = model.generate(pid, Portion::P4, 800, 900 + i as u64).unwrap();
        let (rm1, rm2) = (group_mean(&r1), group_mean(&r2));
        let (gm1, gm2) = (group_mean(&g1), group_mean(&g2));
        let (rv1, rv2) = (group_var(&r1), group_var(&r2));
        let (gv1, gv2) = (group_var(&g1), group_var(&g2));
        println!(
            "{pid}: real |P1m|^2 {:.3} shift^2 {:.3} var1 {:.2},{:.2},{:.2} var2 {:.2},{:.2},{:.2} | synth |P1m|^2 {:.3} shift^2 {:.3} var1 {:.2},{:.2},{:.2} var2 {:.2},{:.2},{:.2}",
            rm1.iter().map(|x| x * x).sum::<f64>(),
            norm2(&rm2, &rm1),
            rv1[0], rv1[1], rv1[2],
            rv2[0], rv2[1], rv2[2],
            gm1.iter().map(|x| x * x).sum::<f64>(),
            norm2(&gm2, &gm1),
            gv1[0], gv1[1], gv1[2],
            gv2[0], gv2[1], gv2[2],
        );
    }
}
