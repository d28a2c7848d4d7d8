use rayon::prelude::*;
use semiseg::network::BackboneConfig;
use semiseg::trainer::{ExperimentConfig, FrameworkBase, OracleBackendKind, OracleMode, Trainer};
use semiseg::volumes::{make_phantom, split_case_ids, Case, PhantomSpec};
use std::time::Instant;

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

const SPLIT_SEED: u64 = 11;

/// 20 phantoms: the case the split labels gets a canonical mid-difficulty
/// spec; everything else draws from the hard distribution.
fn build_cases(master: u64) -> Vec<Case> {
    let ids: Vec<String> = (0..20).map(|i| format!("case{i:03}")).collect();
    let split = split_case_ids(&ids, 1, 4, SPLIT_SEED).unwrap();
    let labeled_id = split.labeled[0].clone();
    let side: usize = env("VOL", 48);
    let shape = [side, side, side];
    let mid = (side as f64 - 1.0) / 2.0;
    let hard_bias = env("BIAS", 0.8);
    let noise = env("NOISE", 0.45);
    let scale = env("BSCALE", 9.0);
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let canonical = *id == labeled_id;
            let spec = PhantomSpec {
                shape,
                spacing: [1.0; 3],
                center_range: if canonical {
                    [[mid, mid]; 3]
                } else {
                    let j = env("JIT", 8.0);
                    [[mid - j, mid + j]; 3]
                },
                radii_range: if canonical {
                    [[7.5, 7.5]; 3]
                } else {
                    [[5.0, 10.0]; 3]
                },
                wobble: if canonical { 0.05 } else { 0.1 },
                contrast: 1.0,
                noise_sigma: noise,
                bias_amp: if canonical { env("LBIAS", 0.5) } else { hard_bias },
                bias_scale: scale,
                geom_seed: semiseg::rng::derive_seed(master, &[i as u64, 1]),
                noise_seed: semiseg::rng::derive_seed(master, &[i as u64, 2]),
            };
            let (mut volume, mask) = make_phantom(&spec).unwrap();
            volume.normalize_zscore();
            Case {
                id: id.clone(),
                volume,
                mask: Some(mask),
            }
        })
        .collect()
}

fn config(kind: &str, seed: u64, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone = BackboneConfig::tiny();
    cfg.dataset.m_labeled = 1;
    cfg.dataset.n_test = 4;
    cfg.dataset.split_seed = SPLIT_SEED;
    cfg.training.t_max = 300;
    cfg.training.patch = [32, 32, 32];
    cfg.training.batch_labeled = env("BL", 1);
    cfg.training.batch_unlabeled = env("BU", 2);
    cfg.training.eval_every = 300;
    cfg.training.seed = seed;
    cfg.training.student_dropout = false;
    cfg.training.lr0 = env("LR", 0.03);
    cfg.training.lr_decay_every = env("DECAY", 100);
    cfg.consistency.teacher_input_noise = env("TNOISE", 0u8) == 1;
    cfg.oracle.degradation_radius = 1.0;
    cfg.oracle.degradation_flip_rate = 0.05;
    match kind {
        "sup" => cfg.framework.base = FrameworkBase::Supervised,
        "mt" => cfg.framework.base = FrameworkBase::Mt,
        _ => {
            cfg.framework.base = FrameworkBase::Mt;
            cfg.framework.oracle_mode = OracleMode::Semisam;
            cfg.oracle.backend = OracleBackendKind::Synthetic;
        }
    }
    cfg.output.dir = out.to_path_buf();
    cfg
}

fn main() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = std::env::var("SEEDS").map(|v| v.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or_else(|_| vec![101, 202, 303]);
    let mut jobs = Vec::new();
    for &seed in seeds.iter() {
        for kind in ["sup", "mt", "semisam"] {
            jobs.push((kind, seed));
        }
    }
    let results: Vec<(String, u64, f64)> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let cfg = config(kind, seed, &dir.path().join(format!("{kind}-{seed}")));
            let mut trainer = Trainer::from_cases(cfg, build_cases(seed)).unwrap();
            let mut engaged = 0;
            for _ in 0..300 {
                if !trainer.step().unwrap().sam_skipped {
                    engaged += 1;
                }
            }
            let dice = trainer.evaluate().unwrap().mean_dice_pct;
            eprintln!("[diag] {kind:8} seed {seed}: dice {dice:6.2} engaged {engaged}");
            (kind.to_string(), seed, dice)
        })
        .collect();
    let mut means = std::collections::BTreeMap::new();
    for (kind, _, dice) in &results {
        means.entry(kind.clone()).or_insert_with(Vec::new).push(*dice);
    }
    for (kind, v) in &means {
        println!("{kind:8} mean: {:.2}%", v.iter().sum::<f64>() / v.len() as f64);
    }
    println!("total wall: {:.0}s", t0.elapsed().as_secs_f64());
}
