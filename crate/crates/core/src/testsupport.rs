//! Oracles shared by integration and acceptance suites.
//!
//! Everything here checks the library from the outside (finite differences,
//! brute-force recursion); nothing in the crate's production paths calls
//! into this module.

#![doc(hidden)]

use crate::model::{DecodeMode, DecodeSettings, ModelConfig, PolicyModel, Prompt};
use crate::rewards::{RewardKind, RewardSpec};
use crate::rl::{self, LossOutcome, RlAlgorithm, RlConfig};
use crate::rng::SeededRng;

/// Result of one finite-difference sweep of the RL loss over every model
/// parameter.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub components: usize,
    /// Smallest distance of any token's importance ratio from a clip
    /// boundary; sweeps are only meaningful away from the kink.
    pub min_boundary_distance: f64,
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        frame_dim: 4,
        word_tokens: 4, // vocabulary of 12 with the reserved block
        ffn: 16,
        max_seq: 48,
    }
}

fn perturbed(model: &PolicyModel<f64>, scale: f64, seed: u64) -> PolicyModel<f64> {
    let mut out = model.clone();
    let mut rng = SeededRng::new(seed);
    for i in 0..out.params().len() {
        for v in out.params_mut().values_mut(i) {
            *v += scale * rng.normal();
        }
    }
    out
}

fn preset(algorithm: RlAlgorithm, group: usize, max_gen: usize) -> RlConfig {
    match algorithm {
        RlAlgorithm::Grpo => RlConfig::grpo(0.04, group, max_gen),
        RlAlgorithm::Dapo => RlConfig::dapo(group, max_gen),
        RlAlgorithm::DrGrpo => RlConfig::dr_grpo(0.04, group, max_gen),
    }
}

/// Central finite differences (64-bit, step 1e-4) of the full RL loss —
/// sampled rollouts held fixed — against the analytic gradient, over every
/// parameter of a tiny policy.
pub fn grpo_loss_fd_check(algorithm: RlAlgorithm, kind: RewardKind, seed: u64) -> FdReport {
    let cfg = tiny_cfg();
    let policy = PolicyModel::<f64>::new(cfg.clone(), seed).expect("valid tiny config");
    let old_model = perturbed(&policy, 0.01, seed ^ 0xa5a5);
    let ref_model = perturbed(&policy, 0.02, seed ^ 0x5a5a);

    let mut rng = SeededRng::new(seed ^ 0x77);
    let n_frames = 3;
    let frames: Vec<f32> = (0..n_frames * cfg.frame_dim).map(|_| rng.normal() as f32).collect();
    let prompt = Prompt::inference(frames, n_frames, cfg.frame_dim).expect("valid prompt");

    let rl_cfg = preset(algorithm, 3, 6);
    let decode = DecodeSettings { mode: DecodeMode::Sample { temperature: 1.0 }, max_len: 6 };
    let spec = RewardSpec::with_unit_scale(kind);
    // the reference is the first hypothesis the group will sample, so exact
    // match separates rewards even on an untrained policy
    let group_seed = seed ^ 0x1234;
    let (probe, _) = old_model
        .sample(&prompt, decode.max_len, 1.0, crate::rng::derive(group_seed, &[crate::rng::streams::ROLLOUT, 0]))
        .expect("probe sample");
    let reference: Vec<u32> = rl::strip_eos(&probe).to_vec();
    let draft = rl::sample_draft_group(
        &ref_model, &old_model, &prompt, &reference, &spec, &rl_cfg, &decode, group_seed,
    )
    .expect("draft group");

    let loss_value = |m: &PolicyModel<f64>| -> f64 {
        let graph = m.graph(false);
        let group = rl::attach_policy(&graph, &prompt, &draft).expect("attach");
        match rl::grpo_loss(&[group], &rl_cfg).expect("loss") {
            LossOutcome::Loss { loss, .. } => loss.value(),
            LossOutcome::AllSkipped { .. } => 0.0,
        }
    };

    // analytic gradients and boundary distances at the base point
    let graph = policy.graph(true);
    let group = rl::attach_policy(&graph, &prompt, &draft).expect("attach");
    let mut min_boundary_distance = f64::INFINITY;
    for h in &group.hyps {
        for (lc, lo) in h.logp_cur.data().iter().zip(&h.logp_old) {
            let rho = (lc - lo).exp();
            let d = (rho - (1.0 - rl_cfg.clip_low))
                .abs()
                .min((rho - (1.0 + rl_cfg.clip_high)).abs());
            min_boundary_distance = min_boundary_distance.min(d);
        }
    }
    let skipped = group.skipped;
    let analytic: Vec<Vec<f64>> = match rl::grpo_loss(&[group], &rl_cfg).expect("loss") {
        LossOutcome::Loss { loss, .. } => {
            loss.backward().expect("backward");
            graph.gradients()
        }
        LossOutcome::AllSkipped { .. } => {
            graph.param_tensors().iter().map(|t| vec![0.0; t.numel()]).collect()
        }
    };
    assert!(!skipped, "fixture must produce a non-degenerate group (seed {seed})");

    // step chosen so truncation error sits well below the 1e-4 gate while
    // staying far above f64 roundoff on a O(1) loss
    let h = 1e-5;
    let mut max_rel_err: f64 = 0.0;
    let mut components = 0usize;
    for i in 0..policy.params().len() {
        for j in 0..policy.params().values(i).len() {
            let eval = |delta: f64| -> f64 {
                let mut m = policy.clone();
                m.params_mut().values_mut(i)[j] += delta;
                loss_value(&m)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[i][j];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            max_rel_err = max_rel_err.max((a - fd).abs() / denom);
            components += 1;
        }
    }
    FdReport { max_rel_err, components, min_boundary_distance }
}

/// All nine preset-by-reward combinations.
pub fn all_gradcheck_combinations() -> Vec<(RlAlgorithm, RewardKind)> {
    let algos = [RlAlgorithm::Grpo, RlAlgorithm::Dapo, RlAlgorithm::DrGrpo];
    let kinds = [RewardKind::Wer, RewardKind::ExactMatch, RewardKind::TotalErrors];
    let mut out = Vec::new();
    for a in algos {
        for k in kinds {
            out.push((a, k));
        }
    }
    out
}
