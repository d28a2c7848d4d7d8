//! The training state machine: batch assembly, the per-iteration SGD step
//! over the composed objective, the EMA teacher, sliding-window inference,
//! checkpointing, and evaluation.
//!
//! Determinism: every random decision flows through named ChaCha streams
//! derived from the config seed (`init`, `data`, `noise`, `dropout`) plus a
//! derived oracle seed. Streams are consumed in a fixed documented order per
//! step — labeled patches, unlabeled patches, per-patch noise sub-seeds, then
//! per-patch dropout sub-seeds (labeled, unlabeled student, teacher). Oracle
//! prompt sampling and the synthetic backend derive their RNG from query
//! content instead of consuming any stream, so enabling the oracle branch
//! cannot shift the trajectory of the other branches, and caching answers is
//! observationally transparent. Exactly one thread mutates [`TrainState`];
//! per-patch forwards/backwards fan out and are reduced in batch order.

pub mod checkpoint;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SegError};
use crate::grid::numel;
use crate::losses;
use crate::metrics::{self, CaseMetrics, DistanceUnit, MetricsReport};
use crate::network::{Backbone, ForwardMode, ParamVector, ProbMap};
use crate::oracle::{
    extract_prompts, CachedOracle, Degradation, OracleBackend, PromptSet, QueryKey, SpoolAdapter,
    SyntheticOracle,
};
use crate::rng::{derive_seed, hash_bytes};
use crate::schedules::{lambda_c_base, lambda_s_base, LrSchedule};
use crate::teacher::{ema_alpha, ema_update, estimate_uncertainty, uncertainty_mask};
use crate::volumes::{sample_patch, split_dataset, BinaryMask, Case, Volume};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    ExperimentConfig, FrameworkBase, OracleBackendKind, OracleMode, RunManifest,
};

const TAG_INIT: u64 = 0x696e_6974;
const TAG_DATA: u64 = 0x6461_7461;
const TAG_NOISE: u64 = 0x6e6f_6973;
const TAG_DROPOUT: u64 = 0x6472_6f70;
const TAG_ORACLE: u64 = 0x6f72_636c;
const TAG_PROMPT: u64 = 0x7072_6d74;

/// Mutable training state: iteration counter, student and teacher parameters,
/// optimizer momentum, and the named RNG streams.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub t: u64,
    pub theta: ParamVector,
    pub theta_prime: ParamVector,
    pub momentum: Vec<f64>,
    pub rng_data: ChaCha8Rng,
    pub rng_noise: ChaCha8Rng,
    pub rng_dropout: ChaCha8Rng,
    pub oracle_seed: u64,
}

impl TrainState {
    pub fn new(backbone: &Backbone, seed: u64) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_INIT]));
        let theta = backbone.init_params(&mut init_rng);
        let theta_prime = theta.clone();
        let momentum = vec![0.0; theta.len()];
        TrainState {
            t: 0,
            theta,
            theta_prime,
            momentum,
            rng_data: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_DATA])),
            rng_noise: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_NOISE])),
            rng_dropout: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_DROPOUT])),
            oracle_seed: derive_seed(seed, &[TAG_ORACLE]),
        }
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        TrainState {
            t: ckpt.t,
            theta: ckpt.theta.clone(),
            theta_prime: ckpt.theta_prime.clone(),
            momentum: ckpt.momentum.clone(),
            rng_data: ckpt.rng_data.clone(),
            rng_noise: ckpt.rng_noise.clone(),
            rng_dropout: ckpt.rng_dropout.clone(),
            oracle_seed: ckpt.oracle_seed,
        }
    }
}

/// One CSV log row; every iteration writes one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: u64,
    pub lr: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub l_sup: f64,
    pub l_con: f64,
    pub l_sam: f64,
    pub total: f64,
    pub sam_skipped: bool,
    pub sam_skip_count: usize,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "t,lr,lambda_c,lambda_s,l_sup,l_con,l_sam,total,sam_skipped,sam_skip_count"
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
            self.t,
            self.lr,
            self.lambda_c,
            self.lambda_s,
            self.l_sup,
            self.l_con,
            self.l_sam,
            self.total,
            self.sam_skipped,
            self.sam_skip_count
        )
    }

    /// The loss trajectory fields, for bit-exact sequence comparison.
    pub fn loss_fields(&self) -> [f64; 6] {
        [
            self.lambda_c,
            self.lambda_s,
            self.l_sup,
            self.l_con,
            self.l_sam,
            self.total,
        ]
    }
}

/// Everything a finished (or aborted) run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub reports: Vec<(u64, MetricsReport)>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub output_dir: PathBuf,
}

struct LabeledDraw {
    volume: Volume,
    mask: BinaryMask,
    dropout_seed: Option<u64>,
}

struct UnlabeledDraw {
    case_id: String,
    offset: [usize; 3],
    volume: Volume,
    dropout_seed: Option<u64>,
    noise_seed: Option<u64>,
    teacher_seed: Option<u64>,
}

/// The assembled training loop.
pub struct Trainer {
    pub config: ExperimentConfig,
    backbone: Backbone,
    lr: LrSchedule,
    labeled: Vec<(String, Volume, BinaryMask)>,
    unlabeled: Vec<(String, Volume)>,
    test: Vec<(String, Volume, BinaryMask)>,
    oracle: Option<CachedOracle>,
    pub state: TrainState,
}

impl Trainer {
    /// Build a trainer over pre-loaded cases (the file-based entry point is
    /// [`train`]). Dataset and oracle misconfiguration is reported here,
    /// before step 0.
    pub fn from_cases(config: ExperimentConfig, cases: Vec<Case>) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone)?;
        let split = split_dataset(
            &cases,
            config.dataset.m_labeled,
            config.dataset.n_test,
            config.dataset.split_seed,
        )?;
        let ids = &split.ids;
        let labeled = ids
            .labeled
            .iter()
            .cloned()
            .zip(split.labeled.into_iter())
            .map(|(id, (v, m))| (id, v, m))
            .collect();
        let unlabeled = ids
            .unlabeled
            .iter()
            .cloned()
            .zip(split.unlabeled.into_iter())
            .collect::<Vec<_>>();
        let test = ids
            .test
            .iter()
            .cloned()
            .zip(split.test.into_iter())
            .map(|(id, (v, m))| (id, v, m))
            .collect();

        let state = TrainState::new(&backbone, config.training.seed);
        let oracle = Self::build_oracle(&config, &cases, state.oracle_seed)?;
        let lr = LrSchedule {
            lr0: config.training.lr0,
            decay_every: config.training.lr_decay_every,
            decay_factor: config.training.lr_decay_factor,
        };
        Ok(Trainer {
            config,
            backbone,
            lr,
            labeled,
            unlabeled,
            test,
            oracle,
            state,
        })
    }

    /// Resume from a checkpoint: same config contract, restored state.
    pub fn from_cases_resumed(
        config: ExperimentConfig,
        cases: Vec<Case>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        if ckpt.backbone != config.backbone {
            return Err(SegError::Checkpoint(
                "checkpoint backbone config differs from experiment config".into(),
            ));
        }
        let mut trainer = Self::from_cases(config, cases)?;
        if ckpt.theta.len() != trainer.state.theta.len() {
            return Err(SegError::Checkpoint(format!(
                "checkpoint has {} parameters, backbone expects {}",
                ckpt.theta.len(),
                trainer.state.theta.len()
            )));
        }
        trainer.state = TrainState::from_checkpoint(ckpt);
        Ok(trainer)
    }

    fn build_oracle(
        config: &ExperimentConfig,
        cases: &[Case],
        oracle_seed: u64,
    ) -> Result<Option<CachedOracle>> {
        if config.framework.oracle_mode != OracleMode::Semisam {
            return Ok(None);
        }
        let backend = match config.oracle.backend {
            OracleBackendKind::AlwaysSkip => OracleBackend::AlwaysSkip,
            OracleBackendKind::Synthetic => {
                let mut truths = std::collections::HashMap::new();
                for c in cases {
                    let mask = c.mask.clone().ok_or_else(|| {
                        SegError::InvalidConfig(format!(
                            "synthetic oracle backend needs ground truth for every case, missing for {}",
                            c.id
                        ))
                    })?;
                    truths.insert(c.id.clone(), mask);
                }
                OracleBackend::Synthetic(SyntheticOracle::new(
                    Degradation::new(
                        config.oracle.degradation_radius,
                        config.oracle.degradation_flip_rate,
                    ),
                    oracle_seed,
                    truths,
                ))
            }
            OracleBackendKind::Adapter => {
                let dir = config.oracle.spool_dir.clone().ok_or_else(|| {
                    SegError::InvalidConfig("adapter backend requires oracle.spool_dir".into())
                })?;
                std::fs::create_dir_all(&dir).map_err(|e| SegError::io(&dir, e))?;
                OracleBackend::Adapter(SpoolAdapter::new(
                    dir,
                    std::time::Duration::from_millis(config.oracle.timeout_ms),
                ))
            }
        };
        Ok(Some(CachedOracle::new(backend, config.oracle.cache_capacity)))
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn test_cases(&self) -> &[(String, Volume, BinaryMask)] {
        &self.test
    }

    /// Draw one step's batches. All stream consumption happens here, in a
    /// fixed order, so parallel execution downstream cannot perturb replay.
    fn draw_batches(&mut self) -> Result<(Vec<LabeledDraw>, Vec<UnlabeledDraw>)> {
        let tcfg = &self.config.training;
        let patch = tcfg.patch;
        let mut labeled = Vec::with_capacity(tcfg.batch_labeled);
        for _ in 0..tcfg.batch_labeled {
            let idx = self.state.rng_data.gen_range(0..self.labeled.len());
            let (_, vol, mask) = &self.labeled[idx];
            let sample = sample_patch(vol, Some(mask), patch, &mut self.state.rng_data)?;
            labeled.push(LabeledDraw {
                volume: sample.volume,
                mask: sample.mask.unwrap(),
                dropout_seed: None,
            });
        }
        let mut unlabeled = Vec::new();
        if self.config.framework.base != FrameworkBase::Supervised {
            for _ in 0..tcfg.batch_unlabeled {
                let idx = self.state.rng_data.gen_range(0..self.unlabeled.len());
                let (case_id, vol) = &self.unlabeled[idx];
                let sample = sample_patch(vol, None, patch, &mut self.state.rng_data)?;
                unlabeled.push(UnlabeledDraw {
                    case_id: case_id.clone(),
                    offset: sample.offset,
                    volume: sample.volume,
                    dropout_seed: None,
                    noise_seed: None,
                    teacher_seed: None,
                });
            }
        }
        // per-patch noise sub-seeds
        if self.config.consistency.teacher_input_noise {
            for u in unlabeled.iter_mut() {
                u.noise_seed = Some(self.state.rng_noise.gen());
            }
        }
        // per-patch dropout sub-seeds: labeled, unlabeled student, teacher
        if tcfg.student_dropout {
            for l in labeled.iter_mut() {
                l.dropout_seed = Some(self.state.rng_dropout.gen());
            }
            for u in unlabeled.iter_mut() {
                u.dropout_seed = Some(self.state.rng_dropout.gen());
            }
        }
        if self.config.framework.base == FrameworkBase::Uamt {
            for u in unlabeled.iter_mut() {
                u.teacher_seed = Some(self.state.rng_dropout.gen());
            }
        }
        Ok((labeled, unlabeled))
    }

    /// One SGD step over the composed objective; increments `t`.
    pub fn step(&mut self) -> Result<LogRow> {
        let t = self.state.t;
        let t_max = self.config.training.t_max;
        let w_base = self.config.consistency.w_base;
        let lr = self.lr.at(t);
        let lambda_c = lambda_c_base(t, t_max, w_base);
        let lambda_s = lambda_s_base(t, t_max, w_base);
        let (labeled, unlabeled) = self.draw_batches()?;

        let backbone = &self.backbone;
        let theta = &self.state.theta;
        let theta_prime = &self.state.theta_prime;

        // supervised branch
        let n_l = labeled.len() as f64;
        let sup: Vec<(f64, ParamVector)> = labeled
            .par_iter()
            .map(|p| -> Result<(f64, ParamVector)> {
                let mut drng;
                let mode = match p.dropout_seed {
                    None => ForwardMode::Deterministic,
                    Some(s) => {
                        drng = ChaCha8Rng::seed_from_u64(s);
                        ForwardMode::Stochastic(&mut drng)
                    }
                };
                let (probs, cache) = backbone.forward_cached(theta, &p.volume, mode)?;
                let (loss, mut gp) = losses::supervised_loss_with_grad(&probs, &p.mask)?;
                for g in gp.iter_mut() {
                    *g /= n_l;
                }
                let grad = backbone.backward(theta, &probs, &cache, &gp)?;
                Ok((loss, grad))
            })
            .collect::<Result<_>>()?;
        let l_sup = sup.iter().map(|(l, _)| l).sum::<f64>() / n_l;

        // consistency branch: student forward + teacher target + prompts
        struct UOut {
            probs: ProbMap,
            cache: crate::network::ForwardCache,
            l_con: f64,
            gp_con: Vec<f64>,
            prompts: Option<PromptSet>,
        }
        let uamt = self.config.framework.base == FrameworkBase::Uamt;
        let semisam = self.config.framework.oracle_mode == OracleMode::Semisam;
        let ccfg = self.config.consistency.clone();
        let k_positive = self.config.oracle.k_positive;
        let oracle_seed = self.state.oracle_seed;
        let u_outs: Vec<UOut> = unlabeled
            .par_iter()
            .map(|u| -> Result<UOut> {
                let mut drng;
                let mode = match u.dropout_seed {
                    None => ForwardMode::Deterministic,
                    Some(s) => {
                        drng = ChaCha8Rng::seed_from_u64(s);
                        ForwardMode::Stochastic(&mut drng)
                    }
                };
                let (probs, cache) = backbone.forward_cached(theta, &u.volume, mode)?;
                let teacher_input = match u.noise_seed {
                    Some(seed) => {
                        let mut nrng = ChaCha8Rng::seed_from_u64(seed);
                        crate::network::perturb_input(
                            &u.volume,
                            &mut nrng,
                            ccfg.noise_sigma,
                            ccfg.noise_clip,
                        )
                    }
                    None => u.volume.clone(),
                };
                let (teacher_probs, gate) = if uamt {
                    let mut trng = ChaCha8Rng::seed_from_u64(u.teacher_seed.unwrap());
                    let (mean, umap) = estimate_uncertainty(
                        backbone,
                        theta_prime,
                        &teacher_input,
                        ccfg.k_passes,
                        &mut trng,
                    )?;
                    let gate = uncertainty_mask(&umap, t, t_max);
                    (mean, Some(gate))
                } else {
                    (
                        backbone.forward(theta_prime, &teacher_input, ForwardMode::Deterministic)?,
                        None,
                    )
                };
                let (l_con, gp_con) =
                    losses::consistency_loss_with_grad(&probs, &teacher_probs, gate.as_ref())?;
                let prompts = if semisam {
                    let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(
                        oracle_seed,
                        &[
                            TAG_PROMPT,
                            hash_bytes(u.case_id.as_bytes()),
                            u.offset[0] as u64,
                            u.offset[1] as u64,
                            u.offset[2] as u64,
                        ],
                    ));
                    Some(extract_prompts(&probs, k_positive, &mut prng))
                } else {
                    None
                };
                Ok(UOut {
                    probs,
                    cache,
                    l_con,
                    gp_con,
                    prompts,
                })
            })
            .collect::<Result<_>>()?;

        // oracle queries run sequentially (shared LRU cache)
        let mut sam_terms: Vec<Option<(f64, Vec<f64>)>> = Vec::with_capacity(u_outs.len());
        let mut sam_skip_count = 0usize;
        for (u, out) in unlabeled.iter().zip(u_outs.iter()) {
            let term = match (&mut self.oracle, &out.prompts) {
                (Some(oracle), Some(prompts)) if !prompts.is_empty() => {
                    let key = QueryKey {
                        case_id: u.case_id.clone(),
                        offset: u.offset,
                    };
                    let label = oracle.query(&key, &u.volume, prompts)?;
                    match label.mask {
                        Some(mask) => {
                            Some(losses::sam_consistency_loss_with_grad(&out.probs, &mask)?)
                        }
                        None => {
                            sam_skip_count += 1;
                            None
                        }
                    }
                }
                (Some(_), Some(_)) => {
                    // cold start: empty prediction, nothing to prompt with
                    sam_skip_count += 1;
                    None
                }
                _ => None,
            };
            sam_terms.push(term);
        }
        let n_u = unlabeled.len() as f64;
        let l_con = if u_outs.is_empty() {
            0.0
        } else {
            u_outs.iter().map(|o| o.l_con).sum::<f64>() / n_u
        };
        let sam_used = sam_terms.iter().filter(|t| t.is_some()).count();
        let l_sam = if sam_used == 0 {
            0.0
        } else {
            sam_terms
                .iter()
                .flatten()
                .map(|(l, _)| l)
                .sum::<f64>()
                / sam_used as f64
        };
        let sam_skipped = !semisam || sam_used == 0;

        let breakdown =
            losses::total_objective_base(l_sup, l_con, l_sam, t, t_max, w_base, sam_skipped)?;

        // backward over unlabeled patches with combined prob-gradients
        let u_grads: Vec<ParamVector> = u_outs
            .par_iter()
            .zip(sam_terms.par_iter())
            .map(|(out, sam)| -> Result<ParamVector> {
                let mut gp = vec![0.0; out.gp_con.len()];
                let wc = lambda_c / n_u;
                for (g, &c) in gp.iter_mut().zip(out.gp_con.iter()) {
                    *g = wc * c;
                }
                if let Some((_, gp_sam)) = sam {
                    let ws = lambda_s / sam_used as f64;
                    for (g, &s) in gp.iter_mut().zip(gp_sam.iter()) {
                        *g += ws * s;
                    }
                }
                backbone.backward(theta, &out.probs, &out.cache, &gp)
            })
            .collect::<Result<_>>()?;

        // reduce gradients in batch order, then SGD with momentum + weight decay
        let mut grad = ParamVector::zeros(self.state.theta.len());
        for (_, g) in &sup {
            for (a, b) in grad.0.iter_mut().zip(g.0.iter()) {
                *a += b;
            }
        }
        for g in &u_grads {
            for (a, b) in grad.0.iter_mut().zip(g.0.iter()) {
                *a += b;
            }
        }
        let tcfg = &self.config.training;
        for i in 0..self.state.theta.len() {
            let g = grad.0[i] + tcfg.weight_decay * self.state.theta.0[i];
            self.state.momentum[i] = tcfg.momentum * self.state.momentum[i] + g;
            self.state.theta.0[i] -= lr * self.state.momentum[i];
        }
        if self.config.framework.base != FrameworkBase::Supervised {
            let alpha = ema_alpha(t);
            let student = self.state.theta.clone();
            ema_update(&mut self.state.theta_prime, &student, alpha)?;
        }
        self.state.t += 1;

        Ok(LogRow {
            t,
            lr,
            lambda_c: breakdown.lambda_c,
            lambda_s: breakdown.lambda_s,
            l_sup: breakdown.l_sup,
            l_con: breakdown.l_con,
            l_sam: breakdown.l_sam,
            total: breakdown.total,
            sam_skipped: breakdown.sam_skipped,
            sam_skip_count,
        })
    }

    /// Evaluate the student on the held-out test cases.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let patch = self.config.training.patch;
        let stride = half_stride(patch);
        evaluate(
            &self.backbone,
            &self.state.theta,
            &self.test,
            patch,
            stride,
            DistanceUnit::Voxel,
        )
    }

    /// Run the loop to `t_max`, writing the per-iteration CSV log, periodic
    /// checkpoints and evaluation reports, and a final checkpoint. On a
    /// non-finite loss the run aborts and the last written checkpoint stays
    /// on disk.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let out_dir = self.config.output.dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| SegError::io(&out_dir, e))?;
        let manifest_path = out_dir.join("run_manifest.json");
        let manifest = RunManifest::new(&self.config);
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| SegError::io(&manifest_path, e))?;

        let log_path = out_dir.join("train_log.csv");
        let mut log = std::io::BufWriter::new(
            std::fs::File::create(&log_path).map_err(|e| SegError::io(&log_path, e))?,
        );
        writeln!(log, "{}", LogRow::csv_header()).map_err(|e| SegError::io(&log_path, e))?;

        let mut rows = Vec::new();
        let mut reports = Vec::new();
        let t_max = self.config.training.t_max;
        let eval_every = self.config.training.eval_every;
        let final_ckpt = out_dir.join("checkpoint_final.json");
        while self.state.t < t_max {
            let row = match self.step() {
                Ok(row) => row,
                Err(e) => {
                    eprintln!(
                        "aborting at t={}: {e}; last checkpoint preserved under {}",
                        self.state.t,
                        out_dir.display()
                    );
                    return Err(e);
                }
            };
            writeln!(log, "{}", row.to_csv_line()).map_err(|e| SegError::io(&log_path, e))?;
            rows.push(row);
            let done = self.state.t;
            if done % eval_every == 0 || done == t_max {
                self.checkpoint()
                    .save(&out_dir.join(format!("checkpoint_t{done}.json")))?;
                let report = self.evaluate()?;
                let stem = out_dir.join(format!("eval_t{done}"));
                std::fs::write(stem.with_extension("csv"), report.to_csv())
                    .map_err(|e| SegError::io(&stem, e))?;
                std::fs::write(stem.with_extension("json"), report.to_json()?)
                    .map_err(|e| SegError::io(&stem, e))?;
                reports.push((done, report));
            }
        }
        log.flush().map_err(|e| SegError::io(&log_path, e))?;
        self.checkpoint().save(&final_ckpt)?;
        Ok(TrainOutcome {
            rows,
            reports,
            final_checkpoint: final_ckpt,
            log_path,
            output_dir: out_dir,
        })
    }

    /// Snapshot the current state as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            t: self.state.t,
            backbone: self.config.backbone,
            theta: self.state.theta.clone(),
            theta_prime: self.state.theta_prime.clone(),
            momentum: self.state.momentum.clone(),
            rng_data: self.state.rng_data.clone(),
            rng_noise: self.state.rng_noise.clone(),
            rng_dropout: self.state.rng_dropout.clone(),
            oracle_seed: self.state.oracle_seed,
            config: self.config.clone(),
        }
    }
}

/// File-based training entry point: loads the dataset directory named in the
/// config and runs to completion.
pub fn train(config: ExperimentConfig) -> Result<TrainOutcome> {
    let cases = crate::volumes::load_dataset_dir(&config.dataset.data_dir)?;
    Trainer::from_cases(config, cases)?.run()
}

/// Resume a run from a checkpoint file.
pub fn train_resumed(config: ExperimentConfig, ckpt_path: &std::path::Path) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cases = crate::volumes::load_dataset_dir(&config.dataset.data_dir)?;
    Trainer::from_cases_resumed(config, cases, &ckpt)?.run()
}

/// Half-patch stride used for evaluation-time sliding windows.
pub fn half_stride(patch: [usize; 3]) -> [usize; 3] {
    [
        (patch[0] / 2).max(1),
        (patch[1] / 2).max(1),
        (patch[2] / 2).max(1),
    ]
}

/// Window origins along one axis: steps of `stride` plus a final window
/// flushed to the end, so every voxel is covered.
pub fn window_offsets(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1);
    if dim <= patch {
        return vec![0];
    }
    let last = dim - patch;
    let mut offs: Vec<usize> = (0..last).step_by(stride).collect();
    offs.push(last);
    offs.dedup();
    offs
}

/// Sliding-window class probabilities for a whole volume: overlapping window
/// probabilities are averaged voxel-wise.
pub fn infer_prob_volume(
    backbone: &Backbone,
    params: &ParamVector,
    volume: &Volume,
    patch_shape: [usize; 3],
    stride: [usize; 3],
) -> Result<ProbMap> {
    let (padded, before) = crate::volumes::pad_amounts(volume.shape, patch_shape);
    let mut work = volume.clone();
    if padded != volume.shape {
        let mut big = Volume::zeros(padded, volume.spacing);
        for z in 0..volume.shape[0] {
            for y in 0..volume.shape[1] {
                let src = crate::grid::idx3(volume.shape, z, y, 0);
                let dst = crate::grid::idx3(padded, z + before[0], y + before[1], before[2]);
                big.data[dst..dst + volume.shape[2]]
                    .copy_from_slice(&volume.data[src..src + volume.shape[2]]);
            }
        }
        work = big;
    }
    let mut origins = Vec::new();
    for z in window_offsets(padded[0], patch_shape[0], stride[0]) {
        for y in window_offsets(padded[1], patch_shape[1], stride[1]) {
            for x in window_offsets(padded[2], patch_shape[2], stride[2]) {
                origins.push([z, y, x]);
            }
        }
    }
    let windows: Vec<(usize, ProbMap)> = origins
        .par_iter()
        .enumerate()
        .map(|(i, &o)| -> Result<(usize, ProbMap)> {
            let mut patch = Volume::zeros(patch_shape, work.spacing);
            for z in 0..patch_shape[0] {
                for y in 0..patch_shape[1] {
                    let src = crate::grid::idx3(padded, z + o[0], y + o[1], o[2]);
                    let dst = crate::grid::idx3(patch_shape, z, y, 0);
                    patch.data[dst..dst + patch_shape[2]]
                        .copy_from_slice(&work.data[src..src + patch_shape[2]]);
                }
            }
            let probs = backbone.forward(params, &patch, ForwardMode::Deterministic)?;
            Ok((i, probs))
        })
        .collect::<Result<_>>()?;

    let pvol = numel(padded);
    let classes = backbone.config().num_classes;
    let mut acc = vec![0.0f64; classes * pvol];
    let mut count = vec![0.0f64; pvol];
    for (i, probs) in &windows {
        let o = origins[*i];
        let wvol = numel(patch_shape);
        for z in 0..patch_shape[0] {
            for y in 0..patch_shape[1] {
                for x in 0..patch_shape[2] {
                    let src = crate::grid::idx3(patch_shape, z, y, x);
                    let dst = crate::grid::idx3(padded, z + o[0], y + o[1], x + o[2]);
                    for c in 0..classes {
                        acc[c * pvol + dst] += probs.data[c * wvol + src];
                    }
                    count[dst] += 1.0;
                }
            }
        }
    }
    // every voxel of the padded volume is covered by at least one window
    debug_assert!(count.iter().all(|&c| c >= 1.0));

    // crop back to the source shape while averaging
    let svol = numel(volume.shape);
    let mut data = vec![0.0f64; classes * svol];
    for z in 0..volume.shape[0] {
        for y in 0..volume.shape[1] {
            for x in 0..volume.shape[2] {
                let src = crate::grid::idx3(padded, z + before[0], y + before[1], x + before[2]);
                let dst = crate::grid::idx3(volume.shape, z, y, x);
                for c in 0..classes {
                    data[c * svol + dst] = acc[c * pvol + src] / count[src];
                }
            }
        }
    }
    Ok(ProbMap {
        num_classes: classes,
        shape: volume.shape,
        data,
    })
}

/// Sliding-window inference to a binary mask: averaged probabilities,
/// foreground wins only on a strict majority (ties go to background).
pub fn infer_volume(
    backbone: &Backbone,
    params: &ParamVector,
    volume: &Volume,
    patch_shape: [usize; 3],
    stride: [usize; 3],
) -> Result<BinaryMask> {
    let probs = infer_prob_volume(backbone, params, volume, patch_shape, stride)?;
    let vol = probs.vol();
    let fg = probs.foreground();
    let bg = probs.channel(0);
    let data = (0..vol).map(|i| u8::from(fg[i] > bg[i])).collect();
    Ok(BinaryMask::from_vec(volume.shape, data))
}

/// Per-case inference + metrics over a test set; cases fan out in parallel
/// and are reported in input order.
pub fn evaluate(
    backbone: &Backbone,
    params: &ParamVector,
    test: &[(String, Volume, BinaryMask)],
    patch_shape: [usize; 3],
    stride: [usize; 3],
    unit: DistanceUnit,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(SegError::InvalidConfig("test set is empty".into()));
    }
    let cases: Vec<CaseMetrics> = test
        .par_iter()
        .map(|(id, vol, truth)| -> Result<CaseMetrics> {
            let pred = infer_volume(backbone, params, vol, patch_shape, stride)?;
            metrics::case_metrics(id, &pred, truth, vol.spacing, unit)
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_cases(cases, unit))
}

/// Metric report straight from already-computed predictions (used by tests
/// and the `eval` CLI path).
pub fn report_from_predictions(
    items: &[(String, BinaryMask, BinaryMask, [f64; 3])],
    unit: DistanceUnit,
) -> Result<MetricsReport> {
    let cases: Vec<CaseMetrics> = items
        .iter()
        .map(|(id, pred, truth, spacing)| metrics::case_metrics(id, pred, truth, *spacing, unit))
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_cases(cases, unit))
}
