//! Group-relative policy optimization.
//!
//! The objective, per group of G generations from one prompt, is the PPO
//! clipped surrogate with group-standardized sequence rewards as the
//! advantage for every token of a hypothesis, minus a per-token KL penalty
//! against the frozen reference policy (the k3 estimator `r - log r - 1`).
//! Three aggregation/normalization schemes select between the base
//! algorithm, its token-level variant with decoupled clipping and degenerate
//! group skipping, and the length-bias-free variant with a fixed
//! normalization constant and no std division.
//!
//! Only the current policy's log-probs carry gradient; old-policy and
//! reference log-probs enter as constants.

use crate::model::{
    DecodeMode, DecodeSettings, ModelError, PolicyGraph, PolicyModel, Prompt, TokenId, Vocab,
};
use crate::rewards::{reward, RewardSpec};
use crate::rng::{derive, streams};
use crate::tensor::{Elem, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("rl: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn contract(msg: impl Into<String>) -> RlError {
    RlError::Contract(msg.into())
}

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlAlgorithm {
    Grpo,
    Dapo,
    DrGrpo,
}

impl RlAlgorithm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "grpo" => Some(RlAlgorithm::Grpo),
            "dapo" => Some(RlAlgorithm::Dapo),
            "drgrpo" => Some(RlAlgorithm::DrGrpo),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RlAlgorithm::Grpo => "grpo",
            RlAlgorithm::Dapo => "dapo",
            RlAlgorithm::DrGrpo => "drgrpo",
        }
    }
}

/// How per-token surrogate terms aggregate into the scalar objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNormalization {
    /// `(1/G) sum_i (1/|o_i|) sum_t`: per-sample length normalization.
    PerSample,
    /// `(1/sum_i |o_i|) sum_i sum_t`: token-level aggregation over the batch.
    PerTokenBatch,
    /// `(1/(G * L_max)) sum_i sum_t`: fixed constant in place of per-sample
    /// lengths.
    UnnormalizedSum,
}

/// What to do with a group whose rewards all coincide (zero variance).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegenerateGroupPolicy {
    /// Keep the group with all-zero advantages; the KL term still applies.
    ZeroAdvantage,
    /// Drop the group from the step entirely (dynamic-sampling analog).
    SkipGroup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlConfig {
    pub algorithm: RlAlgorithm,
    pub clip_low: f64,
    pub clip_high: f64,
    pub beta: f64,
    pub group_size: usize,
    pub normalize_by_std: bool,
    pub loss_norm: LossNormalization,
    pub degenerate_policy: DegenerateGroupPolicy,
    /// Fixed generation-length constant for `UnnormalizedSum`; equals the
    /// configured decode budget.
    pub max_gen_len: usize,
}

impl RlConfig {
    pub fn grpo(beta: f64, group_size: usize, max_gen_len: usize) -> Self {
        RlConfig {
            algorithm: RlAlgorithm::Grpo,
            clip_low: 0.2,
            clip_high: 0.2,
            beta,
            group_size,
            normalize_by_std: true,
            loss_norm: LossNormalization::PerSample,
            degenerate_policy: DegenerateGroupPolicy::ZeroAdvantage,
            max_gen_len,
        }
    }

    pub fn dapo(group_size: usize, max_gen_len: usize) -> Self {
        RlConfig {
            algorithm: RlAlgorithm::Dapo,
            clip_low: 0.2,
            clip_high: 0.28,
            beta: 0.0,
            group_size,
            normalize_by_std: true,
            loss_norm: LossNormalization::PerTokenBatch,
            degenerate_policy: DegenerateGroupPolicy::SkipGroup,
            max_gen_len,
        }
    }

    pub fn dr_grpo(beta: f64, group_size: usize, max_gen_len: usize) -> Self {
        RlConfig {
            algorithm: RlAlgorithm::DrGrpo,
            clip_low: 0.2,
            clip_high: 0.2,
            beta,
            group_size,
            normalize_by_std: false,
            loss_norm: LossNormalization::UnnormalizedSum,
            degenerate_policy: DegenerateGroupPolicy::ZeroAdvantage,
            max_gen_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_low > 0.0) {
            return Err(contract(format!("clip_low must be > 0, got {}", self.clip_low)));
        }
        if self.clip_high < self.clip_low {
            return Err(contract(format!(
                "clip_high {} must be >= clip_low {}",
                self.clip_high, self.clip_low
            )));
        }
        if self.group_size < 2 {
            return Err(contract(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(contract(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.max_gen_len < 1 {
            return Err(contract("max_gen_len must be >= 1"));
        }
        match self.algorithm {
            RlAlgorithm::Grpo => {
                if !self.normalize_by_std || self.loss_norm != LossNormalization::PerSample {
                    return Err(contract(
                        "grpo preset requires std-normalized advantages and per-sample aggregation",
                    ));
                }
            }
            RlAlgorithm::Dapo => {
                if self.beta != 0.0 {
                    return Err(contract("dapo removes the KL term; beta must be 0"));
                }
                if self.clip_high <= self.clip_low {
                    return Err(contract("dapo requires a decoupled upper clip (clip_high > clip_low)"));
                }
                if self.loss_norm != LossNormalization::PerTokenBatch {
                    return Err(contract("dapo requires token-level loss aggregation"));
                }
            }
            RlAlgorithm::DrGrpo => {
                if self.normalize_by_std || self.loss_norm != LossNormalization::UnnormalizedSum {
                    return Err(contract(
                        "dr-grpo removes std normalization and uses the fixed-length sum",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Result of advantage estimation over one group's rewards.
#[derive(Debug, Clone, PartialEq)]
pub enum AdvantageOutcome {
    Values(Vec<f64>),
    /// Degenerate group under [`DegenerateGroupPolicy::SkipGroup`].
    Skip,
}

/// Group-relative advantages: reward minus group mean, divided by the
/// population standard deviation when `normalize_by_std`.
pub fn advantages(
    rewards: &[f64],
    normalize_by_std: bool,
    policy: DegenerateGroupPolicy,
) -> Result<AdvantageOutcome> {
    let g = rewards.len();
    if g < 2 {
        return Err(contract(format!("advantage estimation needs G >= 2, got {g}")));
    }
    // all-equal rewards ARE sigma = 0, even when the floating-point mean of
    // identical values rounds away from them
    let degenerate = rewards.windows(2).all(|w| w[0] == w[1]);
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let sigma = var.sqrt();
    if degenerate || sigma == 0.0 {
        return Ok(match policy {
            DegenerateGroupPolicy::ZeroAdvantage => AdvantageOutcome::Values(vec![0.0; g]),
            DegenerateGroupPolicy::SkipGroup => AdvantageOutcome::Skip,
        });
    }
    let values = rewards
        .iter()
        .map(|r| {
            let centered = r - mean;
            if normalize_by_std {
                centered / sigma
            } else {
                centered
            }
        })
        .collect();
    Ok(AdvantageOutcome::Values(values))
}

/// Per-token k3 KL estimate `r - log r - 1` with `r = exp(logp_ref -
/// logp_cur)`. Nonnegative, zero exactly when the log-probs coincide.
pub fn kl_divergence_term(logp_ref: &[f64], logp_cur: &[f64]) -> Result<Vec<f64>> {
    if logp_ref.len() != logp_cur.len() {
        return Err(contract(format!(
            "kl term needs equal lengths, got {} and {}",
            logp_ref.len(),
            logp_cur.len()
        )));
    }
    Ok(logp_ref
        .iter()
        .zip(logp_cur)
        .map(|(&lr, &lc)| {
            let d = lr - lc;
            d.exp() - d - 1.0
        })
        .collect())
}

/// One generated hypothesis inside a rollout group.
#[derive(Debug, Clone)]
pub struct Hypothesis<E: Elem> {
    pub tokens: Vec<TokenId>,
    /// Differentiable per-token log-probs under the current policy.
    pub logp_cur: Tensor<E>,
    /// Constant per-token log-probs under the sampling-time policy.
    pub logp_old: Vec<f64>,
    /// Constant per-token log-probs under the frozen reference.
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    /// Sequence-level advantage, broadcast to every token.
    pub advantage: Option<f64>,
}

impl<E: Elem> Hypothesis<E> {
    fn check(&self) -> Result<()> {
        let m = self.tokens.len();
        if m == 0 {
            return Err(contract("hypothesis with no tokens"));
        }
        if self.logp_cur.numel() != m || self.logp_old.len() != m || self.logp_ref.len() != m {
            return Err(contract(format!(
                "log-prob lengths must equal |o_i| = {m}: cur {}, old {}, ref {}",
                self.logp_cur.numel(),
                self.logp_old.len(),
                self.logp_ref.len()
            )));
        }
        Ok(())
    }
}

/// The G hypotheses generated for one prompt.
#[derive(Debug, Clone)]
pub struct RolloutGroup<E: Elem> {
    pub hyps: Vec<Hypothesis<E>>,
    /// Degenerate group dropped under `SkipGroup`; contributes zero loss and
    /// zero gradient.
    pub skipped: bool,
    /// All rewards in the group coincided (zero variance).
    pub degenerate: bool,
    /// Beam mode produced fewer than G distinct hypotheses.
    pub beam_shortfall: bool,
}

/// A sampled hypothesis before the differentiable log-probs are attached.
#[derive(Debug, Clone)]
pub struct DraftHypothesis {
    pub tokens: Vec<TokenId>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub advantage: Option<f64>,
}

/// Constant rollout data for one prompt: everything except the current
/// policy's log-probs, which get re-attached per inner update.
#[derive(Debug, Clone)]
pub struct DraftGroup {
    pub hyps: Vec<DraftHypothesis>,
    pub skipped: bool,
    pub degenerate: bool,
    pub beam_shortfall: bool,
}

/// Diagnostics from one loss construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub token_count: usize,
    /// Fraction of tokens whose importance ratio fell outside the clip
    /// interval.
    pub clip_fraction: f64,
    /// Mean per-token k3 KL estimate against the reference.
    pub kl_mean: f64,
    pub active_groups: usize,
    pub skipped_groups: usize,
}

pub enum LossOutcome<E: Elem> {
    Loss { loss: Tensor<E>, stats: LossStats },
    /// Every group was skipped; there is nothing to optimize this step.
    AllSkipped { skipped_groups: usize },
}

/// Builds the scalar loss (negated objective) over a batch of rollout
/// groups.
pub fn grpo_loss<E: Elem>(groups: &[RolloutGroup<E>], cfg: &RlConfig) -> Result<LossOutcome<E>> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(contract("no rollout groups"));
    }
    let active: Vec<&RolloutGroup<E>> = groups.iter().filter(|g| !g.skipped).collect();
    let skipped_groups = groups.len() - active.len();
    if active.is_empty() {
        return Ok(LossOutcome::AllSkipped { skipped_groups });
    }
    for g in &active {
        if g.hyps.is_empty() {
            return Err(contract("rollout group with no hypotheses"));
        }
        for h in &g.hyps {
            h.check()?;
            if h.advantage.is_none() {
                return Err(contract("advantages missing; populate them before building the loss"));
            }
        }
    }

    let batch = active.len() as f64;
    let total_tokens: usize = active
        .iter()
        .map(|g| g.hyps.iter().map(|h| h.tokens.len()).sum::<usize>())
        .sum();

    let mut objective: Option<Tensor<E>> = None;
    let mut clipped_tokens = 0usize;
    let mut kl_sum = 0.0f64;

    for group in &active {
        let group_size = group.hyps.len() as f64;
        for hyp in &group.hyps {
            let adv = hyp.advantage.expect("checked above");
            let m = hyp.tokens.len();
            let lo = Tensor::constant(
                hyp.logp_old.iter().map(|&v| E::from_f64(v)).collect(),
                vec![m],
            )?;
            let ratio = hyp.logp_cur.sub(&lo)?.exp();
            for &r in ratio.data() {
                let r = r.to_f64();
                if r < 1.0 - cfg.clip_low || r > 1.0 + cfg.clip_high {
                    clipped_tokens += 1;
                }
            }
            let clipped = ratio.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high)?;
            let surrogate = ratio.scale(adv).minimum(&clipped.scale(adv))?;

            let lc_values: Vec<f64> = hyp.logp_cur.data().iter().map(|&v| v.to_f64()).collect();
            kl_sum += kl_divergence_term(&hyp.logp_ref, &lc_values)?.iter().sum::<f64>();

            let token_objective = if cfg.beta != 0.0 {
                let lr = Tensor::constant(
                    hyp.logp_ref.iter().map(|&v| E::from_f64(v)).collect(),
                    vec![m],
                )?;
                let delta = lr.sub(&hyp.logp_cur)?;
                let kl = delta.exp().sub(&delta)?.add_scalar(-1.0);
                surrogate.sub(&kl.scale(cfg.beta))?
            } else {
                surrogate
            };

            let coeff = match cfg.loss_norm {
                LossNormalization::PerSample => 1.0 / (batch * group_size * m as f64),
                LossNormalization::PerTokenBatch => 1.0 / total_tokens as f64,
                LossNormalization::UnnormalizedSum => {
                    1.0 / (batch * group_size * cfg.max_gen_len as f64)
                }
            };
            let term = token_objective.sum().scale(coeff);
            objective = Some(match objective {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
    }

    let loss = objective.expect("at least one active hypothesis").neg();
    let stats = LossStats {
        token_count: total_tokens,
        clip_fraction: clipped_tokens as f64 / total_tokens as f64,
        kl_mean: kl_sum / total_tokens as f64,
        active_groups: active.len(),
        skipped_groups,
    };
    Ok(LossOutcome::Loss { loss, stats })
}

/// Strips one trailing `<EOS>`; rewards are computed on the bare transcript.
pub fn strip_eos(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.last() {
        Some(&t) if t == Vocab::EOS => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

/// Samples G hypotheses for one prompt from the old policy (multinomial or
/// top-G beams), scores them under the frozen reference, and attaches
/// rewards and advantages. The result is plain data; see [`attach_policy`].
#[allow(clippy::too_many_arguments)]
pub fn sample_draft_group<E: Elem>(
    ref_model: &PolicyModel<E>,
    old_model: &PolicyModel<E>,
    prompt: &Prompt,
    reference: &[TokenId],
    reward_spec: &RewardSpec,
    cfg: &RlConfig,
    decode: &DecodeSettings,
    seed: u64,
) -> Result<DraftGroup> {
    cfg.validate()?;
    let mut sampled: Vec<(Vec<TokenId>, Vec<f64>)> = Vec::with_capacity(cfg.group_size);
    let mut beam_shortfall = false;
    match decode.mode {
        DecodeMode::Sample { temperature } => {
            for i in 0..cfg.group_size {
                let draw_seed = derive(seed, &[streams::ROLLOUT, i as u64]);
                let (tokens, lps) =
                    old_model.sample(prompt, decode.max_len, temperature, draw_seed)?;
                sampled.push((tokens, lps.iter().map(|&v| v.to_f64()).collect()));
            }
        }
        DecodeMode::Beam { .. } => {
            let beams = old_model.beam_search(prompt, cfg.group_size, decode.max_len)?;
            if beams.len() < cfg.group_size {
                beam_shortfall = true;
            }
            if beams.len() < 2 {
                return Err(contract(format!(
                    "beam decoding produced {} hypothesis(es); need at least 2 for a group",
                    beams.len()
                )));
            }
            for b in beams {
                sampled.push((b.tokens, b.token_logps.iter().map(|&v| v.to_f64()).collect()));
            }
        }
    }

    let mut rewards = Vec::with_capacity(sampled.len());
    let mut hyps = Vec::with_capacity(sampled.len());
    for (tokens, logp_old) in sampled {
        let r = reward(reward_spec, reference, strip_eos(&tokens));
        rewards.push(r);
        let logp_ref: Vec<f64> = ref_model
            .score(prompt, &tokens)?
            .iter()
            .map(|&v| v.to_f64())
            .collect();
        hyps.push(DraftHypothesis { tokens, logp_old, logp_ref, reward: r, advantage: None });
    }

    let degenerate = rewards.windows(2).all(|w| w[0] == w[1]);
    let mut skipped = false;
    match advantages(&rewards, cfg.normalize_by_std, cfg.degenerate_policy)? {
        AdvantageOutcome::Values(values) => {
            for (h, a) in hyps.iter_mut().zip(values) {
                h.advantage = Some(a);
            }
        }
        AdvantageOutcome::Skip => skipped = true,
    }
    Ok(DraftGroup { hyps, skipped, degenerate, beam_shortfall })
}

/// Scores a draft group under the live policy graph, producing the rollout
/// group the loss is built from.
pub fn attach_policy<E: Elem>(
    policy: &PolicyGraph<'_, E>,
    prompt: &Prompt,
    draft: &DraftGroup,
) -> Result<RolloutGroup<E>> {
    let mut hyps = Vec::with_capacity(draft.hyps.len());
    for h in &draft.hyps {
        let logp_cur = if draft.skipped {
            // no gradient will flow; keep the shape contract with constants
            Tensor::constant(
                h.logp_old.iter().map(|&v| E::from_f64(v)).collect(),
                vec![h.tokens.len()],
            )?
        } else {
            policy.score_tensor(prompt, &h.tokens)?
        };
        hyps.push(Hypothesis {
            tokens: h.tokens.clone(),
            logp_cur,
            logp_old: h.logp_old.clone(),
            logp_ref: h.logp_ref.clone(),
            reward: h.reward,
            advantage: h.advantage,
        });
    }
    Ok(RolloutGroup {
        hyps,
        skipped: draft.skipped,
        degenerate: draft.degenerate,
        beam_shortfall: draft.beam_shortfall,
    })
}

/// Samples G hypotheses for one prompt from the old policy, scores each
/// under the current, old, and reference policies, and computes rewards and
/// advantages.
#[allow(clippy::too_many_arguments)]
pub fn build_rollout_group<E: Elem>(
    policy: &PolicyGraph<'_, E>,
    ref_model: &PolicyModel<E>,
    old_model: &PolicyModel<E>,
    prompt: &Prompt,
    reference: &[TokenId],
    reward_spec: &RewardSpec,
    cfg: &RlConfig,
    decode: &DecodeSettings,
    seed: u64,
) -> Result<RolloutGroup<E>> {
    let draft =
        sample_draft_group(ref_model, old_model, prompt, reference, reward_spec, cfg, decode, seed)?;
    attach_policy(policy, prompt, &draft)
}
