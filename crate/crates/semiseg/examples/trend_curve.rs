use semiseg::network::BackboneConfig;
use semiseg::trainer::{ExperimentConfig, FrameworkBase, OracleBackendKind, OracleMode, Trainer};
use semiseg::volumes::{Case, PhantomDatasetSpec};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let spec = PhantomDatasetSpec {
        n_cases: 20,
        shape: [32, 32, 32],
        spacing: [1.0, 1.0, 1.0],
        radii_range: [5.0, 10.0],
        center_jitter: 4.0,
        wobble: 0.1,
        contrast_jitter: env("CJIT", 0.0),
        contrast: env("CONTR", 1.0),
        noise_sigma: env("NOISE", 0.45),
        bias_amp: env("BIAS", 0.7),
        bias_scale: env("BSCALE", 24.0),
        master_seed: env("MASTER", 101),
        m_labeled: env("M", 1usize),
        n_test: 4,
        split_seed: 11,
    };
    let mut cases: Vec<Case> = spec.generate().unwrap();
    for c in cases.iter_mut() {
        c.volume.normalize_zscore();
    }
    let dir = tempfile::tempdir().unwrap();
    let kinds: Vec<&str> = match std::env::var("ARMS").ok().as_deref() { Some("sup") => vec!["sup"], _ => vec!["sup", "mt", "semisam"] };
    for kind in kinds {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone = BackboneConfig::tiny();
        cfg.dataset.m_labeled = env("M", 1usize);
        cfg.dataset.n_test = 4;
        cfg.dataset.split_seed = 11;
        cfg.training.t_max = 300;
        cfg.training.patch = [32, 32, 32];
        cfg.training.batch_labeled = env("BL", 1);
        cfg.training.batch_unlabeled = env("BU", 2);
        cfg.training.eval_every = 300;
        cfg.training.seed = env("SEED", 101);
        cfg.training.student_dropout = env("DROPOUT", 0u8) == 1;
        cfg.training.lr0 = env("LR", 0.03);
        cfg.training.lr_decay_every = env("DECAY", 300);
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
        cfg.output.dir = dir.path().join(kind);
        let mut tr = Trainer::from_cases(cfg, cases.clone()).unwrap();
        print!("{kind:8}");
        let mut engaged = 0;
        for t in 0..300 {
            let row = tr.step().unwrap();
            if !row.sam_skipped {
                engaged += 1;
            }
            if (t + 1) % 50 == 0 {
                print!(" {:5.1}", tr.evaluate().unwrap().mean_dice_pct);
            }
        }
        println!("   (engaged {engaged})");
    }
}
