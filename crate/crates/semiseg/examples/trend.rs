use rayon::prelude::*;
use semiseg::network::BackboneConfig;
use semiseg::trainer::{ExperimentConfig, FrameworkBase, OracleBackendKind, OracleMode, Trainer};
use semiseg::volumes::{Case, PhantomDatasetSpec};
use std::time::Instant;

fn dataset_spec(master_seed: u64) -> PhantomDatasetSpec {
    PhantomDatasetSpec {
        n_cases: 20,
        shape: [32, 32, 32],
        spacing: [1.0, 1.0, 1.0],
        radii_range: [5.0, 10.0],
        center_jitter: 4.0,
        wobble: 0.1,
        contrast_jitter: std::env::var("CJIT").map(|v| v.parse().unwrap()).unwrap_or(0.0),
        contrast: std::env::var("CONTR").map(|v| v.parse().unwrap()).unwrap_or(1.0),
        noise_sigma: std::env::var("NOISE").map(|v| v.parse().unwrap()).unwrap_or(0.4),
        bias_amp: std::env::var("BIAS").map(|v| v.parse().unwrap()).unwrap_or(0.0),
        bias_scale: std::env::var("BSCALE").map(|v| v.parse().unwrap()).unwrap_or(24.0),
        master_seed,
        m_labeled: 1,
        n_test: 4,
        split_seed: 11,
    }
}

fn cases(spec: &PhantomDatasetSpec) -> Vec<Case> {
    let mut cs = spec.generate().unwrap();
    for c in cs.iter_mut() {
        c.volume.normalize_zscore();
    }
    cs
}

fn config(kind: &str, seed: u64, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone = BackboneConfig::tiny();
    cfg.dataset.m_labeled = 1;
    cfg.dataset.n_test = 4;
    cfg.dataset.split_seed = 11;
    cfg.training.t_max = 300;
    cfg.training.patch = [32, 32, 32];
    cfg.training.batch_labeled = std::env::var("BL").map(|v| v.parse().unwrap()).unwrap_or(1);
    cfg.training.batch_unlabeled = std::env::var("BU").map(|v| v.parse().unwrap()).unwrap_or(1);
    cfg.training.eval_every = 300;
    cfg.training.seed = seed;
    cfg.training.student_dropout = std::env::var("DROPOUT").map(|v| v == "1").unwrap_or(false);
    cfg.training.lr0 = std::env::var("LR").map(|v| v.parse().unwrap()).unwrap_or(0.03);
    cfg.training.lr_decay_every = std::env::var("DECAY").map(|v| v.parse().unwrap()).unwrap_or(300);
    cfg.consistency.teacher_input_noise = std::env::var("TNOISE").map(|v| v == "1").unwrap_or(true);
    cfg.oracle.degradation_radius = 1.0;
    cfg.oracle.degradation_flip_rate = 0.05;
    match kind {
        "sup" => {
            cfg.framework.base = FrameworkBase::Supervised;
            cfg.framework.oracle_mode = OracleMode::Plain;
        }
        "mt" => {
            cfg.framework.base = FrameworkBase::Mt;
            cfg.framework.oracle_mode = OracleMode::Plain;
        }
        "semisam" => {
            cfg.framework.base = FrameworkBase::Mt;
            cfg.framework.oracle_mode = OracleMode::Semisam;
            cfg.oracle.backend = OracleBackendKind::Synthetic;
        }
        _ => unreachable!(),
    }
    cfg.output.dir = out.to_path_buf();
    cfg
}

fn main() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let seeds = [101u64, 202, 303];
    let kinds = ["sup", "mt", "semisam"];
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for kind in kinds {
            jobs.push((kind, seed));
        }
    }
    // oracle label quality on this distribution, for calibration
    {
        let spec = dataset_spec(77);
        let cs = cases(&spec);
        let mut qualities = Vec::new();
        for c in cs.iter().take(8) {
            let gt = c.mask.as_ref().unwrap();
            let mut rng = rand::SeedableRng::seed_from_u64(1);
            let deg = semiseg::oracle::synth_oracle(
                gt,
                semiseg::oracle::Degradation::new(1.0, 0.05),
                &mut rng,
            );
            qualities.push(semiseg::metrics::dice(&deg, gt).unwrap() * 100.0);
        }
        eprintln!(
            "[diag] oracle label dice vs gt: {:?}",
            qualities.iter().map(|d| (d * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
    }
    let results: Vec<(String, u64, f64, f64)> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let spec = dataset_spec(std::env::var("PERSEED").map(|v| v == "1").unwrap_or(false).then_some(seed).unwrap_or(77));
            let cfg = config(kind, seed, &dir.path().join(format!("{kind}-{seed}")));
            let mut trainer = Trainer::from_cases(cfg, cases(&spec)).unwrap();
            let run_t0 = Instant::now();
            let mut engaged = 0usize;
            for _ in 0..300 {
                let row = trainer.step().unwrap();
                if !row.sam_skipped {
                    engaged += 1;
                }
            }
            let report = trainer.evaluate().unwrap();
            let teacher_dice = if kind != "sup" {
                semiseg::trainer::evaluate(
                    trainer.backbone(),
                    &trainer.state.theta_prime,
                    trainer.test_cases(),
                    [32, 32, 32],
                    [16, 16, 16],
                    semiseg::metrics::DistanceUnit::Voxel,
                )
                .unwrap()
                .mean_dice_pct
            } else {
                f64::NAN
            };
            eprintln!(
                "[diag] {kind} seed {seed}: student {:.2} teacher {:.2} engaged {engaged}",
                report.mean_dice_pct, teacher_dice
            );
            (
                kind.to_string(),
                seed,
                report.mean_dice_pct,
                run_t0.elapsed().as_secs_f64(),
            )
        })
        .collect();
    let mut means = std::collections::BTreeMap::new();
    for (kind, seed, dice, secs) in &results {
        println!("{kind:8} seed {seed}: dice {dice:6.2}%  ({secs:.0}s)");
        means.entry(kind.clone()).or_insert_with(Vec::new).push(*dice);
    }
    for (kind, v) in &means {
        println!("{kind:8} mean: {:.2}%", v.iter().sum::<f64>() / v.len() as f64);
    }
    println!("total wall: {:.0}s", t0.elapsed().as_secs_f64());
}
