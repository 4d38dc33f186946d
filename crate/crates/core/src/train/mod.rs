//! Two-stage training: supervised next-token fine-tuning, then group
//! relative policy optimization with the SFT checkpoint as both the starting
//! point and the frozen reference.
//!
//! Every stochastic choice is derived from `(seed, stream, step)`, so a run
//! resumed from a checkpoint continues bit-identically to the uninterrupted
//! run.

mod adam;
mod checkpoint;
mod metrics;

pub use adam::{grad_norm, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint, CHECKPOINT_VERSION,
    MANIFEST_FILE, PARAMS_FILE,
};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};

use crate::data::{vocab_checksum, Corpus, DataError};
use crate::eval::{evaluate, EvalError, ModelDecoder};
use crate::model::{DecodeSettings, ModelConfig, ModelError, PolicyModel, Prompt, TokenId};
use crate::rewards::RewardSpec;
use crate::rl::{self, LossOutcome, RlConfig, RlError};
use crate::rng::{derive, fnv1a64, streams, SeededRng};
use crate::tensor::{Tensor, TensorError};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("train: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub(crate) fn contract(msg: impl Into<String>) -> TrainError {
    TrainError::Contract(msg.into())
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sft,
    Grpo,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Grpo => "grpo",
        }
    }
}

/// Learning-rate schedule over 1-based optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant { lr: f64 },
    Cosine { peak: f64, total_steps: u64, warmup_steps: u64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } => {
                if !(lr > 0.0) {
                    return Err(contract(format!("learning rate must be positive, got {lr}")));
                }
            }
            LrSchedule::Cosine { peak, total_steps, warmup_steps } => {
                if !(peak > 0.0) {
                    return Err(contract(format!("peak learning rate must be positive, got {peak}")));
                }
                if warmup_steps >= total_steps {
                    return Err(contract(format!(
                        "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Linear warmup to `peak` at `step == warmup_steps`, then a half-cosine
    /// to exactly zero at `step == total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { peak, total_steps, warmup_steps } => {
                if step <= warmup_steps {
                    peak * step as f64 / warmup_steps as f64
                } else {
                    let progress =
                        (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
                    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Rollout decode settings (GRPO); `max_len` also bounds dev-set greedy
    /// decoding in both stages.
    pub decode: DecodeSettings,
    pub rl: Option<RlConfig>,
    pub reward: Option<RewardSpec>,
    /// Inner optimizer updates per old-policy snapshot.
    pub inner_updates: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.model.validate()?;
        if self.batch_size < 1 {
            return Err(contract("batch_size must be >= 1"));
        }
        if self.max_steps < 1 || self.eval_every < 1 {
            return Err(contract("max_steps and eval_every must be >= 1"));
        }
        if self.decode.max_len < 1 {
            return Err(contract("decode max_len must be >= 1"));
        }
        if self.inner_updates < 1 {
            return Err(contract("inner_updates must be >= 1"));
        }
        match self.stage {
            Stage::Sft => Ok(()),
            Stage::Grpo => {
                let rl = self
                    .rl
                    .as_ref()
                    .ok_or_else(|| contract("grpo stage requires an RL config"))?;
                rl.validate()?;
                if self.reward.is_none() {
                    return Err(contract("grpo stage requires a reward spec"));
                }
                if self.inner_updates > 1 && self.eval_every % self.inner_updates != 0 {
                    return Err(contract(
                        "eval_every must be a multiple of inner_updates so checkpoints land on snapshot boundaries",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Stable digest of the fully resolved configuration.
    pub fn digest(&self) -> String {
        format!("{:016x}", fnv1a64(format!("{self:?}").as_bytes()))
    }
}

/// One supervised step: mean masked cross-entropy over the batch's
/// transcription tokens, one Adam update. Returns (loss, gradient norm).
pub fn sft_step(
    model: &mut PolicyModel<f32>,
    prompts: &[&Prompt],
    optimizer: &mut Adam<f32>,
    lr: f64,
) -> Result<(f64, f64)> {
    if prompts.is_empty() {
        return Err(contract("empty SFT batch"));
    }
    let graph = model.graph(true);
    let mut total: Option<Tensor<f32>> = None;
    let mut count = 0usize;
    for p in prompts {
        let (nll, c) = graph.sft_example_nll(p)?;
        count += c;
        total = Some(match total {
            Some(acc) => acc.add(&nll)?,
            None => nll,
        });
    }
    let loss = total.expect("non-empty batch").scale(1.0 / count as f64);
    loss.backward()?;
    let loss_value = loss.value() as f64;
    let grads = graph.gradients();
    drop(graph);
    let norm = grad_norm(&grads);
    optimizer.step(model.params_mut(), &grads, lr);
    Ok((loss_value, norm))
}

/// Step metrics emitted by [`grpo_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoStepOutcome {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
    pub degenerate_groups: u64,
    pub skipped_groups: u64,
    pub beam_shortfalls: u64,
    pub grad_norm: f64,
    /// True when every group was degenerate under skip_group and the update
    /// was skipped.
    pub skipped: bool,
}

/// One GRPO step: builds a rollout group per prompt, assembles the loss,
/// applies one Adam update.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    policy: &mut PolicyModel<f32>,
    ref_model: &PolicyModel<f32>,
    old_model: &PolicyModel<f32>,
    batch: &[&(Prompt, Vec<TokenId>)],
    rl_cfg: &RlConfig,
    reward_spec: &RewardSpec,
    decode: &DecodeSettings,
    optimizer: &mut Adam<f32>,
    lr: f64,
    seed: u64,
) -> Result<GrpoStepOutcome> {
    if batch.is_empty() {
        return Err(contract("empty GRPO prompt batch"));
    }
    let graph = policy.graph(true);
    let mut groups = Vec::with_capacity(batch.len());
    for (slot, (prompt, reference)) in batch.iter().enumerate() {
        let group = rl::build_rollout_group(
            &graph,
            ref_model,
            old_model,
            prompt,
            reference,
            reward_spec,
            rl_cfg,
            decode,
            derive(seed, &[slot as u64]),
        )?;
        groups.push(group);
    }

    let mut reward_sum = 0.0;
    let mut reward_n = 0usize;
    let mut adv_sum = 0.0;
    let mut adv_n = 0usize;
    let mut degenerate_groups = 0u64;
    let mut beam_shortfalls = 0u64;
    for g in &groups {
        if g.degenerate {
            degenerate_groups += 1;
        }
        if g.beam_shortfall {
            beam_shortfalls += 1;
        }
        for h in &g.hyps {
            reward_sum += h.reward;
            reward_n += 1;
            if let Some(a) = h.advantage {
                adv_sum += a.abs();
                adv_n += 1;
            }
        }
    }
    let mean_reward = reward_sum / reward_n.max(1) as f64;
    let mean_abs_advantage = adv_sum / adv_n.max(1) as f64;

    match rl::grpo_loss(&groups, rl_cfg)? {
        LossOutcome::AllSkipped { skipped_groups } => Ok(GrpoStepOutcome {
            loss: 0.0,
            mean_reward,
            mean_abs_advantage: 0.0,
            kl_mean: 0.0,
            clip_fraction: 0.0,
            degenerate_groups,
            skipped_groups: skipped_groups as u64,
            beam_shortfalls,
            grad_norm: 0.0,
            skipped: true,
        }),
        LossOutcome::Loss { loss, stats } => {
            loss.backward()?;
            let loss_value = loss.value() as f64;
            let grads = graph.gradients();
            drop(graph);
            let norm = grad_norm(&grads);
            optimizer.step(policy.params_mut(), &grads, lr);
            Ok(GrpoStepOutcome {
                loss: loss_value,
                mean_reward,
                mean_abs_advantage,
                kl_mean: stats.kl_mean,
                clip_fraction: stats.clip_fraction,
                degenerate_groups,
                skipped_groups: stats.skipped_groups as u64,
                beam_shortfalls,
                grad_norm: norm,
                skipped: false,
            })
        }
    }
}

/// Where the starting parameters come from.
#[derive(Debug, Clone)]
pub enum ModelInit<'a> {
    Fresh(ModelConfig),
    Checkpoint(&'a Path),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_step: u64,
    pub final_dev_wer: Option<f64>,
    pub best_dev_wer: Option<f64>,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Pooled greedy dev-set WER as a rate.
pub fn dev_wer(model: &PolicyModel<f32>, corpus: &Corpus, max_len: usize) -> Result<f64> {
    let decoder = ModelDecoder::greedy(model, max_len);
    let report = evaluate(&decoder, corpus, 0)?;
    Ok(report.overall.wer_pct / 100.0)
}

fn check_corpus(model: &PolicyModel<f32>, corpus: &Corpus, what: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(contract(format!("{what} corpus is empty")));
    }
    let expected = vocab_checksum(model.vocab());
    if corpus.header.vocab_checksum != expected {
        return Err(contract(format!(
            "{what} corpus vocab checksum {:016x} does not match the model's {expected:016x}",
            corpus.header.vocab_checksum
        )));
    }
    for u in &corpus.utterances {
        if u.frame_dim != model.config().frame_dim {
            return Err(contract(format!(
                "{what} corpus frame dim {} does not match the model's {}",
                u.frame_dim,
                model.config().frame_dim
            )));
        }
    }
    Ok(())
}

/// Full training run: steps, periodic dev evaluation, best/last checkpoints,
/// line-flushed metrics log. Resuming from a `last` checkpoint continues the
/// uninterrupted run bit for bit.
pub fn run(
    cfg: &TrainConfig,
    init: ModelInit<'_>,
    resume: Option<&Path>,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    out_dir: &Path,
) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| TrainError::Io { path: out_dir.display().to_string(), source: e })?;

    // reference policy for GRPO: the init checkpoint, frozen
    let ref_model = match (cfg.stage, &init) {
        (Stage::Grpo, ModelInit::Checkpoint(path)) => {
            let (model, _, _) = load_checkpoint(path)?.into_model()?;
            Some(model)
        }
        (Stage::Grpo, ModelInit::Fresh(_)) => {
            return Err(contract(
                "grpo requires a fine-tuned checkpoint as init; it doubles as the reference policy",
            ))
        }
        (Stage::Sft, _) => None,
    };

    let (mut model, mut optimizer, start_step, mut best) = match resume {
        Some(dir) => {
            let (model, adam, meta) = load_checkpoint(dir)?.into_model()?;
            let adam =
                adam.ok_or_else(|| contract("resume checkpoint has no optimizer state"))?;
            (model, adam, meta.step, meta.best_dev_wer)
        }
        None => match &init {
            ModelInit::Fresh(mc) => {
                let model = PolicyModel::new(mc.clone(), cfg.seed)?;
                let adam = Adam::new(model.params());
                (model, adam, 0, None)
            }
            ModelInit::Checkpoint(path) => {
                let (model, _, _) = load_checkpoint(path)?.into_model()?;
                let adam = Adam::new(model.params());
                (model, adam, 0, None)
            }
        },
    };
    if model.config() != &cfg.model {
        return Err(contract(format!(
            "configured model {:?} does not match checkpoint model {:?}",
            cfg.model,
            model.config()
        )));
    }
    check_corpus(&model, train_corpus, "train")?;
    check_corpus(&model, dev_corpus, "dev")?;

    let vocab = *model.vocab();
    let digest = cfg.digest();
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path)
        .map_err(|e| TrainError::Io { path: metrics_path.display().to_string(), source: e })?;
    let best_dir = out_dir.join("best");
    let last_dir = out_dir.join("last");

    // precomputed per-utterance prompts
    let sft_prompts: Vec<Prompt> = match cfg.stage {
        Stage::Sft => train_corpus
            .utterances
            .iter()
            .map(|u| u.training_prompt(&vocab))
            .collect::<std::result::Result<_, _>>()?,
        Stage::Grpo => Vec::new(),
    };
    let grpo_prompts: Vec<(Prompt, Vec<TokenId>)> = match cfg.stage {
        Stage::Grpo => train_corpus
            .utterances
            .iter()
            .map(|u| Ok((u.inference_prompt()?, u.transcript.clone())))
            .collect::<Result<_>>()?,
        Stage::Sft => Vec::new(),
    };

    let mut old_model: Option<PolicyModel<f32>> = None;
    let mut final_dev = None;
    let n_train = train_corpus.len();
    let batch_size = cfg.batch_size.min(n_train);

    for step in start_step + 1..=cfg.max_steps {
        let lr = cfg.schedule.lr_at(step);
        let mut record = match cfg.stage {
            Stage::Sft => {
                let mut rng = SeededRng::stream(cfg.seed, &[streams::SFT_BATCH, step]);
                let idx = rng.sample_distinct(n_train, batch_size);
                let batch: Vec<&Prompt> = idx.iter().map(|&i| &sft_prompts[i]).collect();
                let (loss, norm) = sft_step(&mut model, &batch, &mut optimizer, lr)?;
                MetricsRecord::new(step, Stage::Sft.as_str(), lr, loss, norm)
            }
            Stage::Grpo => {
                if (step - start_step - 1) % cfg.inner_updates == 0 {
                    old_model = Some(model.clone());
                }
                let old = old_model.as_ref().expect("snapshot taken at round start");
                let rl_cfg = cfg.rl.as_ref().expect("validated");
                let reward_spec = cfg.reward.as_ref().expect("validated");
                let mut rng = SeededRng::stream(cfg.seed, &[streams::GRPO_BATCH, step]);
                let idx = rng.sample_distinct(n_train, batch_size);
                let batch: Vec<&(Prompt, Vec<TokenId>)> =
                    idx.iter().map(|&i| &grpo_prompts[i]).collect();
                let out = grpo_step(
                    &mut model,
                    ref_model.as_ref().expect("grpo has a reference"),
                    old,
                    &batch,
                    rl_cfg,
                    reward_spec,
                    &cfg.decode,
                    &mut optimizer,
                    lr,
                    derive(cfg.seed, &[streams::ROLLOUT, step]),
                )?;
                let mut r =
                    MetricsRecord::new(step, Stage::Grpo.as_str(), lr, out.loss, out.grad_norm);
                r.mean_reward = Some(out.mean_reward);
                r.mean_abs_advantage = Some(out.mean_abs_advantage);
                r.kl_mean = Some(out.kl_mean);
                r.clip_fraction = Some(out.clip_fraction);
                r.degenerate_groups = Some(out.degenerate_groups);
                r.skipped_groups = Some(out.skipped_groups);
                r.beam_shortfalls = Some(out.beam_shortfalls);
                if out.skipped {
                    r.step_skipped = Some(true);
                }
                r
            }
        };

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let wer = dev_wer(&model, dev_corpus, cfg.decode.max_len)?;
            record.dev_wer = Some(wer);
            final_dev = Some(wer);
            let improved = best.is_none_or(|b| wer < b);
            if improved {
                best = Some(wer);
                save_checkpoint(
                    &best_dir,
                    &model,
                    Some(&optimizer),
                    &CheckpointMeta {
                        step,
                        seed: cfg.seed,
                        config_digest: digest.clone(),
                        dev_wer: Some(wer),
                        best_dev_wer: best,
                    },
                )?;
            }
            record.best_dev_wer = best;
            save_checkpoint(
                &last_dir,
                &model,
                Some(&optimizer),
                &CheckpointMeta {
                    step,
                    seed: cfg.seed,
                    config_digest: digest.clone(),
                    dev_wer: Some(wer),
                    best_dev_wer: best,
                },
            )?;
        }
        writer
            .append(&record)
            .map_err(|e| TrainError::Io { path: metrics_path.display().to_string(), source: e })?;
    }

    Ok(RunOutcome {
        final_step: cfg.max_steps,
        final_dev_wer: final_dev,
        best_dev_wer: best,
        best_dir,
        last_dir,
        metrics_path,
    })
}
