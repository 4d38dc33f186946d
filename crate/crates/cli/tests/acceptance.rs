//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (visible with `--nocapture`).
//!
//! Criteria 7-9 share one three-seed pipeline fixture (supervised stage,
//! policy-optimization stage, out-of-domain evaluation, and both domain
//! adaptation arms), built once and reused.

use grpolab_core::data::{
    generate_corpus, split_corpus, BigramLm, Corpus, Domain, DomainSpec, PrototypeTable,
};
use grpolab_core::eval::{evaluate, ModelDecoder, RateBlock};
use grpolab_core::model::{
    DecodeMode, DecodeSettings, ModelConfig, PolicyModel, Prompt, TokenId, Vocab,
};
use grpolab_core::rewards::{RewardKind, RewardSpec};
use grpolab_core::rl::{
    self, advantages, kl_divergence_term, AdvantageOutcome, DegenerateGroupPolicy, Hypothesis,
    LossNormalization, LossOutcome, RlConfig, RolloutGroup,
};
use grpolab_core::rng::SeededRng;
use grpolab_core::tensor::Tensor;
use grpolab_core::testsupport::{all_gradcheck_combinations, grpo_loss_fd_check};
use grpolab_core::train::{
    load_checkpoint, read_metrics, run, LrSchedule, ModelInit, Stage, TrainConfig,
};
use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (algo, kind) in all_gradcheck_combinations() {
        let report = grpo_loss_fd_check(algo, kind, 2024);
        assert!(
            report.min_boundary_distance > 1e-6,
            "{algo:?}/{kind:?}: token within 1e-6 of a clip boundary"
        );
        assert!(
            report.max_rel_err < 1e-4,
            "{algo:?}/{kind:?}: max relative error {} over {} parameter components",
            report.max_rel_err,
            report.components
        );
        worst = worst.max(report.max_rel_err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "criterion 01 PASS: gradients match finite differences for all 9 preset/reward \
         combinations, worst rel err {worst:.2e}, {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: alignment vs brute-force recursion, exhaustive

fn recursive_distance(r: &[u32], h: &[u32]) -> usize {
    fn go(
        r: &[u32],
        h: &[u32],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == r.len() {
            return h.len() - j;
        }
        if j == h.len() {
            return r.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let sub = go(r, h, i + 1, j + 1, memo) + usize::from(r[i] != h[j]);
        let ins = go(r, h, i, j + 1, memo) + 1;
        let del = go(r, h, i + 1, j, memo) + 1;
        let d = sub.min(ins).min(del);
        memo.insert((i, j), d);
        d
    }
    go(r, h, 0, 0, &mut HashMap::new())
}

#[test]
fn criterion_02_alignment_matches_recursive_oracle_exhaustively() {
    let start = Instant::now();
    let mut seqs: Vec<Vec<u32>> = vec![Vec::new()];
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..5 {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 0..3u32 {
                let mut t = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    assert_eq!(seqs.len(), 364);
    let mut pairs = 0usize;
    for r in &seqs {
        for h in &seqs {
            assert_eq!(
                grpolab_core::align::align(r, h).total_errors(),
                recursive_distance(r, h),
                "ref {r:?} hyp {h:?}"
            );
            pairs += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!("criterion 02 PASS: DP alignment equals recursive edit distance on {pairs} pairs, {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 3: advantage properties over 1000 random groups

#[test]
fn criterion_03_advantage_properties() {
    let mut rng = SeededRng::new(33);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let g = rng.uniform_range(2, 10);
        let rewards: Vec<f64> = (0..g).map(|_| 2.0 * rng.normal()).collect();
        let AdvantageOutcome::Values(a) =
            advantages(&rewards, true, DegenerateGroupPolicy::ZeroAdvantage).unwrap()
        else {
            continue;
        };
        let mean = a.iter().sum::<f64>() / g as f64;
        assert!(mean.abs() < 1e-9, "group mean {mean}");
        let sigma = rewards_population_std(&a);
        if rewards_population_std(&rewards) > 0.0 {
            assert!((sigma - 1.0).abs() < 1e-9, "population std {sigma}");
        }

        // scale invariance: powers of two scale exactly in IEEE arithmetic
        let c = 2f64.powi(rng.uniform_range(0, 16) as i32 - 8);
        let scaled: Vec<f64> = rewards.iter().map(|r| c * r).collect();
        let b = advantages(&scaled, true, DegenerateGroupPolicy::ZeroAdvantage).unwrap();
        assert_eq!(AdvantageOutcome::Values(a.clone()), b, "std-normalized advantages must absorb scale exactly");

        let AdvantageOutcome::Values(u) =
            advantages(&rewards, false, DegenerateGroupPolicy::ZeroAdvantage).unwrap()
        else {
            panic!()
        };
        let AdvantageOutcome::Values(v) =
            advantages(&scaled, false, DegenerateGroupPolicy::ZeroAdvantage).unwrap()
        else {
            panic!()
        };
        for (x, y) in u.iter().zip(&v) {
            assert_eq!(c * x, *y, "unnormalized advantages must scale linearly");
        }
        checked += 1;
    }
    println!("criterion 03 PASS: mean/std/scale properties hold over {checked} random groups");
}

fn rewards_population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

// ---------------------------------------------------------------------------
// criterion 4: KL estimator

#[test]
fn criterion_04_kl_estimator() {
    let mut rng = SeededRng::new(44);
    for _ in 0..10_000 {
        let lr = -6.0 * rng.uniform();
        let lc = -6.0 * rng.uniform();
        let v = kl_divergence_term(&[lr], &[lc]).unwrap()[0];
        assert!(v >= 0.0, "kl({lr},{lc}) = {v}");
    }
    let lp = [-1.5, -0.25, -4.0];
    assert!(kl_divergence_term(&lp, &lp).unwrap().iter().all(|&v| v == 0.0));
    let at_two = kl_divergence_term(&[std::f64::consts::LN_2 - 1.0], &[-1.0]).unwrap()[0];
    let expect = 2.0 - std::f64::consts::LN_2 - 1.0;
    assert!(
        (at_two - expect).abs() < 1e-12,
        "k3 at r=2: {at_two} vs {expect}"
    );
    println!("criterion 04 PASS: k3 nonnegative on 10000 pairs, zero at equality, exact at r=2");
}

// ---------------------------------------------------------------------------
// criterion 5: length-bias discrimination

fn leaf_hyp(lp: &[f64], adv: f64) -> Hypothesis<f64> {
    Hypothesis {
        tokens: vec![9; lp.len()],
        logp_cur: Tensor::leaf(lp.to_vec(), vec![lp.len()], true).unwrap(),
        logp_old: lp.to_vec(),
        logp_ref: lp.to_vec(),
        reward: 0.0,
        advantage: Some(adv),
    }
}

fn token_weights(norm: LossNormalization) -> (f64, f64) {
    let short = [-0.8];
    let long = [-0.8; 10];
    let h1 = leaf_hyp(&short, 1.0);
    let h2 = leaf_hyp(&long, 1.0);
    let (t1, t2) = (h1.logp_cur.clone(), h2.logp_cur.clone());
    let group =
        RolloutGroup { hyps: vec![h1, h2], skipped: false, degenerate: false, beam_shortfall: false };
    let mut cfg = match norm {
        LossNormalization::PerSample => RlConfig::grpo(0.0, 2, 10),
        LossNormalization::PerTokenBatch => RlConfig::dapo(2, 10),
        LossNormalization::UnnormalizedSum => RlConfig::dr_grpo(0.0, 2, 10),
    };
    cfg.loss_norm = norm;
    match rl::grpo_loss(&[group], &cfg).unwrap() {
        LossOutcome::Loss { loss, .. } => loss.backward().unwrap(),
        LossOutcome::AllSkipped { .. } => panic!("unexpected skip"),
    }
    let w1 = t1.grad().unwrap()[0].abs();
    let w2g = t2.grad().unwrap();
    for &g in &w2g {
        assert_eq!(g.abs(), w2g[0].abs(), "tokens of one hypothesis share a weight");
    }
    (w1, w2g[0].abs())
}

#[test]
fn criterion_05_length_bias_discrimination() {
    let (ps1, ps2) = token_weights(LossNormalization::PerSample);
    let (tb1, tb2) = token_weights(LossNormalization::PerTokenBatch);
    let ratio = (tb2 / tb1) / (ps2 / ps1);
    assert!(
        (ratio - 10.0).abs() < 1e-9,
        "long-hypothesis tokens must weigh 10x more under per-token aggregation, got {ratio}"
    );
    let (us1, us2) = token_weights(LossNormalization::UnnormalizedSum);
    assert!(
        (us1 - us2).abs() < 1e-15,
        "fixed-constant normalization must weight all tokens identically: {us1} vs {us2}"
    );
    println!("criterion 05 PASS: per-token weight ratio exactly 10x ({ratio:.12}), fixed-length weights equal");
}

// ---------------------------------------------------------------------------
// criterion 6: clip semantics

#[test]
fn criterion_06_clip_semantics() {
    let cfg = RlConfig::dapo(2, 8); // beta 0, clip [0.8, 1.28]
    // positive advantage, ratio forced above 1 + clip_high
    let lc = [-1.0, -2.5];
    let lo: Vec<f64> = lc.iter().map(|v| v - 2f64.ln()).collect(); // rho = 2
    check_clipped(&lc, &lo, 1.0, &cfg);
    // mirrored: negative advantage, ratio below 1 - clip_low
    let lo_up: Vec<f64> = lc.iter().map(|v| v + 2f64.ln()).collect(); // rho = 0.5
    check_clipped(&lc, &lo_up, -1.0, &cfg);
    println!("criterion 06 PASS: clipped tokens carry exactly zero gradient (both directions, finite-difference verified)");
}

fn check_clipped(lc: &[f64], lo: &[f64], adv: f64, cfg: &RlConfig) {
    let build = |lc_vals: &[f64]| -> (f64, Option<Vec<f64>>) {
        let h = Hypothesis {
            tokens: vec![9; lc_vals.len()],
            logp_cur: Tensor::leaf(lc_vals.to_vec(), vec![lc_vals.len()], true).unwrap(),
            logp_old: lo.to_vec(),
            logp_ref: lc_vals.to_vec(),
            reward: 0.0,
            advantage: Some(adv),
        };
        let t = h.logp_cur.clone();
        let group =
            RolloutGroup { hyps: vec![h], skipped: false, degenerate: false, beam_shortfall: false };
        match rl::grpo_loss(&[group], cfg).unwrap() {
            LossOutcome::Loss { loss, .. } => {
                loss.backward().unwrap();
                (loss.value(), t.grad())
            }
            LossOutcome::AllSkipped { .. } => panic!("unexpected skip"),
        }
    };
    let (base, grads) = build(lc);
    assert!(
        grads.unwrap().iter().all(|&g| g == 0.0),
        "clipped branch must zero the gradient"
    );
    for i in 0..lc.len() {
        for delta in [1e-4, -1e-4] {
            let mut lc2 = lc.to_vec();
            lc2[i] += delta;
            let (perturbed, _) = build(&lc2);
            assert_eq!(perturbed, base, "loss must not move with the responsible log-prob");
        }
    }
}

// ---------------------------------------------------------------------------
// criteria 7-9: shared three-seed pipeline fixture

struct SeedOutcome {
    seed: u64,
    sft_dev: f64,
    grpo_dev: f64,
    sft_clean_wer: f64,
    sft_ood: RateBlock,
    grpo_ood: RateBlock,
    sft_adapt_ood_wer: f64,
    grpo_adapt_ood_wer: f64,
    sft_adapt_clean_deg: f64,
    grpo_adapt_clean_deg: f64,
    reward_first_half: f64,
    reward_second_half: f64,
}

struct Pipeline {
    seeds: Vec<SeedOutcome>,
    wall: Duration,
}

fn fixture() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(|| {
        let start = Instant::now();
        let handles: Vec<_> =
            [1u64, 2, 3].into_iter().map(|s| std::thread::spawn(move || run_seed(s))).collect();
        let seeds = handles.into_iter().map(|h| h.join().expect("seed pipeline")).collect();
        Pipeline { seeds, wall: start.elapsed() }
    })
}

fn greedy_overall(model: &PolicyModel<f32>, corpus: &Corpus) -> RateBlock {
    evaluate(&ModelDecoder::greedy(model, 12), corpus, 0).unwrap().overall
}

fn run_seed(seed: u64) -> SeedOutcome {
    let cfg = ModelConfig::default();
    let vocab = cfg.vocab();
    let protos = PrototypeTable::new(seed, cfg.word_tokens, cfg.frame_dim);
    let bigram = BigramLm::new(seed, cfg.word_tokens);
    let clean = generate_corpus(
        seed, 3000, Domain::Clean, &DomainSpec::clean(), &vocab, &protos, &bigram,
    )
    .unwrap();
    let (train_c, dev_c, test_c) = split_corpus(&clean, seed, 0.9, 0.05).unwrap();
    let ood = generate_corpus(
        seed.wrapping_add(1000), 800, Domain::Ood, &DomainSpec::ood(), &vocab, &protos, &bigram,
    )
    .unwrap();
    let (ood_train, ood_dev, ood_test) = split_corpus(&ood, seed, 0.6, 0.2).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let decode_greedy = DecodeSettings { mode: DecodeMode::greedy(), max_len: 12 };
    let decode_sample = DecodeSettings { mode: DecodeMode::Sample { temperature: 1.0 }, max_len: 12 };

    // supervised stage
    let sft_cfg = TrainConfig {
        stage: Stage::Sft,
        schedule: LrSchedule::Cosine { peak: 1e-2, total_steps: 800, warmup_steps: 50 },
        batch_size: 24,
        max_steps: 800,
        eval_every: 200,
        seed,
        model: cfg.clone(),
        decode: decode_greedy,
        rl: None,
        reward: None,
        inner_updates: 1,
    };
    let sft =
        run(&sft_cfg, ModelInit::Fresh(cfg.clone()), None, &train_c, &dev_c, &dir.path().join("sft"))
            .unwrap();
    let (sft_model, _, _) = load_checkpoint(&sft.best_dir).unwrap().into_model().unwrap();
    let sft_ood = greedy_overall(&sft_model, &ood_test);
    let sft_clean_wer = greedy_overall(&sft_model, &test_c).wer_pct;

    // policy-optimization stage (default configuration: WER reward,
    // beta 0.04, G = 6, multinomial sampling)
    let grpo_cfg = TrainConfig {
        stage: Stage::Grpo,
        schedule: LrSchedule::Constant { lr: 3e-4 },
        batch_size: 8,
        max_steps: 400,
        eval_every: 50,
        seed,
        model: cfg.clone(),
        decode: decode_sample,
        rl: Some(RlConfig::grpo(0.04, 6, 12)),
        reward: Some(RewardSpec::with_unit_scale(RewardKind::Wer)),
        inner_updates: 1,
    };
    let grpo = run(
        &grpo_cfg,
        ModelInit::Checkpoint(&sft.best_dir),
        None,
        &train_c,
        &dev_c,
        &dir.path().join("grpo"),
    )
    .unwrap();
    let (grpo_model, _, _) = load_checkpoint(&grpo.best_dir).unwrap().into_model().unwrap();
    let grpo_ood = greedy_overall(&grpo_model, &ood_test);

    let records = read_metrics(&grpo.metrics_path).unwrap();
    let rewards: Vec<f64> = records.iter().filter_map(|r| r.mean_reward).collect();
    let half = rewards.len() / 2;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (reward_first_half, reward_second_half) = (mean(&rewards[..half]), mean(&rewards[half..]));

    // domain adaptation arms with matched step budgets
    let adapt_steps = 400u64;
    let sft_adapt_cfg = TrainConfig {
        stage: Stage::Sft,
        schedule: LrSchedule::Cosine { peak: 2e-3, total_steps: adapt_steps, warmup_steps: 20 },
        batch_size: 16,
        max_steps: adapt_steps,
        eval_every: 50,
        seed,
        model: cfg.clone(),
        decode: decode_greedy,
        rl: None,
        reward: None,
        inner_updates: 1,
    };
    let sft_adapt = run(
        &sft_adapt_cfg,
        ModelInit::Checkpoint(&sft.best_dir),
        None,
        &ood_train,
        &ood_dev,
        &dir.path().join("sft-adapt"),
    )
    .unwrap();
    let (sa_model, _, _) = load_checkpoint(&sft_adapt.best_dir).unwrap().into_model().unwrap();

    let grpo_adapt_cfg = TrainConfig {
        stage: Stage::Grpo,
        schedule: LrSchedule::Constant { lr: 3e-4 },
        batch_size: 8,
        max_steps: adapt_steps,
        eval_every: 50,
        seed,
        model: cfg.clone(),
        decode: decode_sample,
        rl: Some(RlConfig::grpo(0.04, 6, 12)),
        reward: Some(RewardSpec::with_unit_scale(RewardKind::Wer)),
        inner_updates: 1,
    };
    let grpo_adapt = run(
        &grpo_adapt_cfg,
        ModelInit::Checkpoint(&sft.best_dir),
        None,
        &ood_train,
        &ood_dev,
        &dir.path().join("grpo-adapt"),
    )
    .unwrap();
    let (ga_model, _, _) = load_checkpoint(&grpo_adapt.best_dir).unwrap().into_model().unwrap();

    SeedOutcome {
        seed,
        sft_dev: sft.best_dev_wer.unwrap(),
        grpo_dev: grpo.best_dev_wer.unwrap(),
        sft_clean_wer,
        sft_ood,
        grpo_ood,
        sft_adapt_ood_wer: greedy_overall(&sa_model, &ood_test).wer_pct,
        grpo_adapt_ood_wer: greedy_overall(&ga_model, &ood_test).wer_pct,
        sft_adapt_clean_deg: greedy_overall(&sa_model, &test_c).wer_pct - sft_clean_wer,
        grpo_adapt_clean_deg: greedy_overall(&ga_model, &test_c).wer_pct - sft_clean_wer,
        reward_first_half,
        reward_second_half,
    }
}

#[test]
fn criterion_07_end_to_end_wer_trend() {
    let p = fixture();
    let mut wins = 0;
    let mut rels = Vec::new();
    for s in &p.seeds {
        let rel = (s.sft_dev - s.grpo_dev) / s.sft_dev;
        rels.push(format!("seed {}: {:+.1}%", s.seed, 100.0 * rel));
        if rel >= 0.05 {
            wins += 1;
        }
    }
    assert!(
        wins >= 2,
        "GRPO must cut dev WER by >= 5% relative on at least 2 of 3 seeds: {rels:?}"
    );
    assert!(
        p.wall < Duration::from_secs(900),
        "full pipeline took {:?}, budget is 15 minutes",
        p.wall
    );
    // train-stream reward trend, averaged over seeds
    let first: f64 = p.seeds.iter().map(|s| s.reward_first_half).sum::<f64>() / 3.0;
    let second: f64 = p.seeds.iter().map(|s| s.reward_second_half).sum::<f64>() / 3.0;
    assert!(
        second >= first,
        "mean train reward must not decrease across run halves: {first:.4} -> {second:.4}"
    );
    println!(
        "criterion 07 PASS: relative dev-WER change {rels:?} ({wins}/3 beyond -5%), \
         reward trend {first:.4} -> {second:.4}, pipeline wall time {:?}",
        p.wall
    );
}

#[test]
fn criterion_08_hallucination_trend() {
    let p = fixture();
    let mut ins_reduced = 0;
    let mut ins_dominant = 0;
    let mut pooled_sft = (0.0, 0.0, 0.0);
    for s in &p.seeds {
        if s.grpo_ood.ins_pct < s.sft_ood.ins_pct {
            ins_reduced += 1;
        }
        if s.sft_ood.ins_pct > s.sft_ood.del_pct && s.sft_ood.ins_pct > s.sft_ood.sub_pct {
            ins_dominant += 1;
        }
        pooled_sft.0 += s.sft_ood.ins_pct;
        pooled_sft.1 += s.sft_ood.del_pct;
        pooled_sft.2 += s.sft_ood.sub_pct;
    }
    assert!(
        ins_reduced >= 2,
        "GRPO must strictly reduce the pooled OOD insertion rate on at least 2 of 3 seeds"
    );
    assert!(
        ins_dominant >= 2 && pooled_sft.0 > pooled_sft.1 && pooled_sft.0 > pooled_sft.2,
        "insertions must be the largest SFT error component on the OOD set \
         (ins/del/sub summed over seeds: {pooled_sft:?})"
    );
    let detail: Vec<String> = p
        .seeds
        .iter()
        .map(|s| {
            format!(
                "seed {}: SFT {:.1}/{:.1}/{:.1} -> GRPO ins {:.1}",
                s.seed, s.sft_ood.ins_pct, s.sft_ood.del_pct, s.sft_ood.sub_pct, s.grpo_ood.ins_pct
            )
        })
        .collect();
    println!(
        "criterion 08 PASS: OOD insertions dominate SFT errors ({ins_dominant}/3) and GRPO \
         reduces them ({ins_reduced}/3): {detail:?}"
    );
}

#[test]
fn criterion_09_domain_adaptation_trend() {
    let p = fixture();
    let mut grpo_wins = 0;
    for s in &p.seeds {
        if s.grpo_adapt_ood_wer < s.sft_adapt_ood_wer {
            grpo_wins += 1;
        }
        assert!(
            s.grpo_adapt_clean_deg <= s.sft_adapt_clean_deg + 2.0,
            "seed {}: GRPO-adaptation clean degradation {:+.2} exceeds SFT-adaptation's {:+.2} + 2 points",
            s.seed,
            s.grpo_adapt_clean_deg,
            s.sft_adapt_clean_deg
        );
    }
    assert!(
        grpo_wins >= 2,
        "GRPO adaptation must beat SFT adaptation on OOD WER on at least 2 of 3 seeds"
    );
    let detail: Vec<String> = p
        .seeds
        .iter()
        .map(|s| {
            format!(
                "seed {}: ood {:.1} vs {:.1}, clean {:.1} deg {:+.1} vs {:+.1}",
                s.seed,
                s.grpo_adapt_ood_wer,
                s.sft_adapt_ood_wer,
                s.sft_clean_wer,
                s.grpo_adapt_clean_deg,
                s.sft_adapt_clean_deg
            )
        })
        .collect();
    println!("criterion 09 PASS: GRPO-adaptation beats SFT-adaptation ({grpo_wins}/3): {detail:?}");
}

// ---------------------------------------------------------------------------
// criterion 10: CLI determinism

fn grpolab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_grpolab")).args(args).output().expect("binary runs")
}

fn assert_success(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn file_eq(a: &Path, b: &Path) {
    let x = std::fs::read(a).unwrap();
    let y = std::fs::read(b).unwrap();
    assert_eq!(x, y, "{} and {} differ", a.display(), b.display());
}

#[test]
fn criterion_10_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();

    // identical gen-data runs -> byte-identical corpora
    for tag in ["a", "b"] {
        let st = grpolab(&[
            "gen-data", "--seed", "11", "--count", "60", "--word-tokens", "12", "--frame-dim", "6",
            "--split", "0.7,0.15,0.15",
            "--out", base.join(format!("{tag}.corpus")).to_str().unwrap(),
        ]);
        assert_success(&st);
    }
    for suffix in ["train", "dev", "test"] {
        file_eq(&base.join(format!("a.corpus.{suffix}")), &base.join(format!("b.corpus.{suffix}")));
    }

    // identical sft runs -> byte-identical metrics logs and checkpoints
    let train = base.join("a.corpus.train");
    let dev = base.join("a.corpus.dev");
    for tag in ["sft-a", "sft-b"] {
        let st = grpolab(&[
            "sft",
            "--train", train.to_str().unwrap(),
            "--dev", dev.to_str().unwrap(),
            "--out", base.join(tag).to_str().unwrap(),
            "--steps", "20", "--eval-every", "10", "--batch-size", "4",
            "--hidden", "16", "--layers", "1", "--ffn", "32", "--word-tokens", "12",
            "--seed", "3",
        ]);
        assert_success(&st);
    }
    for rel in
        ["metrics.jsonl", "best/manifest.txt", "best/params.bin", "last/manifest.txt", "last/params.bin"]
    {
        file_eq(&base.join("sft-a").join(rel), &base.join("sft-b").join(rel));
    }

    // identical grpo runs -> byte-identical metrics logs and checkpoints
    for tag in ["grpo-a", "grpo-b"] {
        let st = grpolab(&[
            "grpo",
            "--train", train.to_str().unwrap(),
            "--dev", dev.to_str().unwrap(),
            "--init", base.join("sft-a/best").to_str().unwrap(),
            "--out", base.join(tag).to_str().unwrap(),
            "--reward", "wer", "--algo", "grpo", "--beta", "0.04",
            "--num-generations", "3", "--steps", "6", "--eval-every", "3",
            "--batch-size", "2", "--max-gen-len", "8", "--seed", "5",
        ]);
        assert_success(&st);
    }
    for rel in
        ["metrics.jsonl", "best/manifest.txt", "best/params.bin", "last/manifest.txt", "last/params.bin"]
    {
        file_eq(&base.join("grpo-a").join(rel), &base.join("grpo-b").join(rel));
    }

    // identical eval runs -> byte-identical reports
    for tag in ["eval-a", "eval-b"] {
        let st = grpolab(&[
            "eval",
            "--ckpt", base.join("grpo-a/best").to_str().unwrap(),
            "--corpus", dev.to_str().unwrap(),
            "--out", base.join(tag).to_str().unwrap(),
        ]);
        assert_success(&st);
    }
    file_eq(&base.join("eval-a/report.json"), &base.join("eval-b/report.json"));

    println!("criterion 10 PASS: gen-data, sft, grpo and eval are byte-identical across reruns");
}

// ---------------------------------------------------------------------------
// criterion 11: decoding

fn enumerate_completions(
    model: &PolicyModel<f32>,
    prompt: &Prompt,
    budget: usize,
) -> Vec<(Vec<TokenId>, f64)> {
    use grpolab_core::tensor::kernels::log_softmax_row;
    let vocab = model.vocab().size();
    let mut out = Vec::new();
    let (state, logits) = model.prefill(prompt).unwrap();
    let mut stack = vec![(state, logits, Vec::<TokenId>::new(), 0.0f64)];
    while let Some((state, logits, tokens, total)) = stack.pop() {
        let mut lp = vec![0.0f32; vocab];
        log_softmax_row(&logits, &mut lp);
        for tok in 0..vocab as TokenId {
            if tok == Vocab::PAD {
                continue;
            }
            let mut seq = tokens.clone();
            seq.push(tok);
            let t2 = total + lp[tok as usize] as f64;
            if tok == Vocab::EOS || seq.len() == budget {
                out.push((seq, t2));
            } else {
                let mut st = state.clone();
                let lg = st.advance_token(tok).unwrap();
                stack.push((st, lg, seq, t2));
            }
        }
    }
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0))
    });
    out
}

#[test]
fn criterion_11_decoding() {
    // beam width 1 equals greedy on 1000 prompts, exactly
    let cfg = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        frame_dim: 4,
        word_tokens: 8,
        ffn: 32,
        max_seq: 48,
    };
    let model = PolicyModel::<f32>::new(cfg.clone(), 77).unwrap();
    let mut rng = SeededRng::new(78);
    for _ in 0..1000 {
        let n = rng.uniform_range(1, 6);
        let frames: Vec<f32> = (0..n * cfg.frame_dim).map(|_| rng.normal() as f32).collect();
        let prompt = Prompt::inference(frames, n, cfg.frame_dim).unwrap();
        let greedy = model.greedy(&prompt, 8).unwrap();
        let beams = model.beam_search(&prompt, 1, 8).unwrap();
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].tokens, greedy);
    }

    // beam search matches exhaustive enumeration: 4 word tokens, budget 4
    let cfg4 = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        frame_dim: 4,
        word_tokens: 4,
        ffn: 32,
        max_seq: 48,
    };
    let model4 = PolicyModel::<f32>::new(cfg4.clone(), 79).unwrap();
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(80 + seed);
        let frames: Vec<f32> = (0..2 * cfg4.frame_dim).map(|_| rng.normal() as f32).collect();
        let prompt = Prompt::inference(frames, 2, cfg4.frame_dim).unwrap();
        let all = enumerate_completions(&model4, &prompt, 4);
        let beams = model4.beam_search(&prompt, all.len(), 4).unwrap();
        assert_eq!(beams.len(), all.len());
        for (b, (seq, total)) in beams.iter().zip(&all) {
            assert_eq!(&b.tokens, seq, "ranked hypothesis mismatch");
            assert_eq!(b.total_logp.to_bits(), total.to_bits(), "score mismatch");
        }
    }
    println!(
        "criterion 11 PASS: beam(1) == greedy on 1000 prompts; beam search equals exhaustive \
         enumeration on 4-word/4-step instances"
    );
}
