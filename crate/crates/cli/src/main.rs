//! Operator entry point: corpus generation, the two training stages,
//! evaluation reports, a standalone scoring tool, and report comparison.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{ConfigFile, Resolver};
use grpolab_core::align::{align, corpus_wer, AlignmentStats};
use grpolab_core::data::{
    generate_corpus, read_corpus, split_corpus, write_corpus, BigramLm, DataError, Domain,
    DomainSpec, PrototypeTable,
};
use grpolab_core::eval::{
    compare, evaluate, render_delta_text, render_text, EvalReport, ModelDecoder,
};
use grpolab_core::model::{DecodeMode, DecodeSettings, ModelConfig, PolicyModel, Vocab};
use grpolab_core::rewards::{RewardKind, RewardSpec};
use grpolab_core::rl::{RlAlgorithm, RlConfig};
use grpolab_core::train::{
    load_checkpoint, run, LrSchedule, ModelInit, Stage, TrainConfig, TrainError,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

// ---------------------------------------------------------------------------
// errors and exit codes

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    kind: ErrorKind,
    msg: String,
}

impl CliError {
    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Runtime, msg: msg.into() }
    }

    fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }

    /// Single-line machine-parseable rendering.
    fn render_line(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Runtime => "runtime",
        };
        let msg: String = self.msg.replace(['\n', '\t'], " ");
        format!("error[{kind}]: {}", msg.trim())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError { kind: ErrorKind::Usage, msg: msg.into() }
}

pub fn data_err(msg: impl Into<String>) -> CliError {
    CliError { kind: ErrorKind::Data, msg: msg.into() }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Contract(_) => usage(e.to_string()),
            _ => data_err(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Contract(_) => usage(e.to_string()),
            TrainError::Data(d) => d.into(),
            other => CliError::runtime(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// command line surface

#[derive(Parser)]
#[command(
    name = "grpolab",
    version,
    about = "Desk-scale speech-to-text lab: synthetic corpora, supervised fine-tuning, \
             group-relative policy optimization, and WER reporting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic noisy-channel corpus
    GenData(GenDataArgs),
    /// Supervised next-token fine-tuning
    Sft(SftArgs),
    /// Policy-optimization fine-tuning from an SFT checkpoint
    Grpo(GrpoArgs),
    /// Evaluate a checkpoint on a corpus and write a report
    Eval(EvalArgs),
    /// Standalone WER tool over reference/hypothesis token files
    Score(ScoreArgs),
    /// Field-wise delta between two evaluation reports
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// key = value file supplying any of this command's flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// clean | ood
    #[arg(long)]
    domain: Option<String>,
    /// Output corpus file (with --split, writes <out>.train/.dev/.test)
    #[arg(long)]
    out: PathBuf,
    /// Three fractions "train,dev,test" summing to 1
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    word_tokens: Option<usize>,
    #[arg(long)]
    frame_dim: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    spurious_rate: Option<f64>,
    #[arg(long)]
    phantom_rate: Option<f64>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    frames_per_token_min: Option<usize>,
    #[arg(long)]
    frames_per_token_max: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    word_tokens: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Completion budget for dev-set greedy decoding
    #[arg(long)]
    max_gen_len: Option<usize>,
    /// Start from an existing checkpoint (domain adaptation)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue an interrupted run from its `last` checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GrpoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fine-tuned checkpoint: starting point and frozen reference policy
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// wer | em | ed
    #[arg(long)]
    reward: Option<String>,
    #[arg(long)]
    reward_scale: Option<f64>,
    /// grpo | dapo | drgrpo
    #[arg(long)]
    algo: Option<String>,
    /// KL weight (dapo requires 0)
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    clip_low: Option<f64>,
    #[arg(long)]
    clip_high: Option<f64>,
    #[arg(long)]
    num_generations: Option<usize>,
    /// zero | skip: what to do with zero-variance groups
    #[arg(long)]
    degenerate: Option<String>,
    /// sample | beam
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_gen_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Prompts per step
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer updates per old-policy snapshot
    #[arg(long)]
    inner_updates: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// greedy | beam
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_gen_len: Option<usize>,
    #[arg(long)]
    worst_k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference token file: one utterance per line, space-separated ids
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    /// Optional directory for the alignment report
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline report.json
    #[arg(long)]
    a: PathBuf,
    /// Candidate report.json
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's rich rendering for help/version
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", usage(e.to_string()).render_line());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Sft(args) => cmd_sft(args),
        Command::Grpo(args) => cmd_grpo(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Score(args) => cmd_score(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render_line());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, CliError> {
    match path {
        Some(p) => {
            check_input_exists(p)?;
            ConfigFile::load(p)
        }
        None => Ok(ConfigFile::default()),
    }
}

fn check_input_exists(path: &Path) -> Result<(), CliError> {
    if !path.exists() {
        return Err(data_err(format!("{}: no such file or directory", path.display())));
    }
    Ok(())
}

fn required_path(
    r: &mut Resolver<'_>,
    key: &str,
    flag: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let s = r
        .settle_opt(key, flag.map(|p| p.display().to_string()))?
        .ok_or_else(|| usage(format!("--{key} is required")))?;
    Ok(PathBuf::from(s))
}

fn load_corpus_checked(path: &Path) -> Result<grpolab_core::data::Corpus, CliError> {
    check_input_exists(path)?;
    Ok(read_corpus(path)?)
}

fn load_model_checked(path: &Path) -> Result<PolicyModel<f32>, CliError> {
    check_input_exists(path)?;
    let (model, _, _) = load_checkpoint(path)?.into_model()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let mut r = Resolver::new(&file);
    let seed = r.settle("seed", args.seed, 0)?;
    let count = r.settle("count", args.count, 1000)?;
    let domain_s = r.settle("domain", args.domain, "clean".to_string())?;
    let domain = Domain::parse(&domain_s)
        .ok_or_else(|| usage(format!("unknown domain {domain_s:?} (clean|ood)")))?;
    let word_tokens = r.settle("word-tokens", args.word_tokens, 56)?;
    let frame_dim = r.settle("frame-dim", args.frame_dim, 16)?;
    let defaults = DomainSpec::for_domain(domain);
    let spec = DomainSpec {
        noise_sigma: r.settle("noise-sigma", args.noise_sigma, defaults.noise_sigma)?,
        frames_per_token_min: r.settle(
            "frames-per-token-min",
            args.frames_per_token_min,
            defaults.frames_per_token_min,
        )?,
        frames_per_token_max: r.settle(
            "frames-per-token-max",
            args.frames_per_token_max,
            defaults.frames_per_token_max,
        )?,
        spurious_rate: r.settle("spurious-rate", args.spurious_rate, defaults.spurious_rate)?,
        phantom_rate: r.settle("phantom-rate", args.phantom_rate, defaults.phantom_rate)?,
        dropout_rate: r.settle("dropout-rate", args.dropout_rate, defaults.dropout_rate)?,
    };
    let split = r.settle_opt("split", args.split)?;
    r.reject_unknown_keys()?;

    let vocab = Vocab::new(word_tokens).map_err(|e| usage(e.to_string()))?;
    let protos = PrototypeTable::new(seed, word_tokens, frame_dim);
    let bigram = BigramLm::new(seed, word_tokens);
    let corpus = generate_corpus(seed, count, domain, &spec, &vocab, &protos, &bigram)?;

    match split {
        None => {
            write_corpus(&args.out, &corpus)?;
            println!("wrote {} utterances to {}", corpus.len(), args.out.display());
        }
        Some(fractions) => {
            let parts: Vec<f64> = fractions
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("bad split {fractions:?}")))
                })
                .collect::<Result<_, _>>()?;
            if parts.len() != 3 || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(usage(format!(
                    "--split needs three fractions summing to 1, got {fractions:?}"
                )));
            }
            let (train, dev, test) = split_corpus(&corpus, seed, parts[0], parts[1])?;
            for (suffix, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
                let path = PathBuf::from(format!("{}.{suffix}", args.out.display()));
                write_corpus(&path, part)?;
                println!("wrote {} utterances to {}", part.len(), path.display());
            }
        }
    }
    persist_next_to_file(&r, &args.out, "gen-data")
}

/// Resolved config for file-producing commands lands beside the file.
fn persist_next_to_file(r: &Resolver<'_>, out: &Path, command: &str) -> Result<(), CliError> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty());
    let name = format!(
        "{}.config.resolved",
        out.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    );
    let target_dir = dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut text = format!("# resolved configuration: {command}\n");
    for (k, v) in &r.resolved {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = target_dir.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// sft / grpo

fn model_config_for(
    r: &mut Resolver<'_>,
    model: &ModelArgs,
    train_corpus: &grpolab_core::data::Corpus,
) -> Result<ModelConfig, CliError> {
    let frame_dim = train_corpus
        .utterances
        .first()
        .map(|u| u.frame_dim)
        .ok_or_else(|| data_err("train corpus is empty"))?;
    let cfg = ModelConfig {
        hidden: r.settle("hidden", model.hidden, 64)?,
        layers: r.settle("layers", model.layers, 2)?,
        heads: r.settle("heads", model.heads, 2)?,
        frame_dim,
        word_tokens: r.settle("word-tokens", model.word_tokens, 56)?,
        ffn: r.settle("ffn", model.ffn, 256)?,
        max_seq: r.settle("max-seq", model.max_seq, 256)?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_sft(args: SftArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let mut r = Resolver::new(&file);
    let train_path = required_path(&mut r, "train", args.train)?;
    let dev_path = required_path(&mut r, "dev", args.dev)?;
    let out = required_path(&mut r, "out", args.out)?;
    let seed = r.settle("seed", args.seed, 0)?;
    let steps = r.settle("steps", args.steps, 3000)?;
    let batch_size = r.settle("batch-size", args.batch_size, 32)?;
    let peak_lr = r.settle("peak-lr", args.peak_lr, 1e-2)?;
    let warmup = r.settle("warmup-steps", args.warmup_steps, (steps / 10).max(1))?;
    let eval_every = r.settle("eval-every", args.eval_every, 200)?;
    let max_gen_len = r.settle("max-gen-len", args.max_gen_len, 12)?;
    let init = r.settle_opt("init", args.init.map(|p| p.display().to_string()))?;
    let resume = r.settle_opt("resume", args.resume.map(|p| p.display().to_string()))?;

    let train_corpus = load_corpus_checked(&train_path)?;
    let dev_corpus = load_corpus_checked(&dev_path)?;
    let model = model_config_for(&mut r, &args.model, &train_corpus)?;
    r.reject_unknown_keys()?;

    let cfg = TrainConfig {
        stage: Stage::Sft,
        schedule: LrSchedule::Cosine { peak: peak_lr, total_steps: steps, warmup_steps: warmup },
        batch_size,
        max_steps: steps,
        eval_every,
        seed,
        model: model.clone(),
        decode: DecodeSettings { mode: DecodeMode::greedy(), max_len: max_gen_len },
        rl: None,
        reward: None,
        inner_updates: 1,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    r.persist(&out, "sft")?;
    let init_spec = match &init {
        Some(p) => {
            check_input_exists(Path::new(p))?;
            ModelInit::Checkpoint(Path::new(p))
        }
        None => ModelInit::Fresh(model.clone()),
    };
    let outcome = run(
        &cfg,
        init_spec,
        resume.as_deref().map(Path::new),
        &train_corpus,
        &dev_corpus,
        &out,
    )?;
    println!(
        "sft done: {} steps, best dev WER {:.4}, checkpoints at {} and {}",
        outcome.final_step,
        outcome.best_dev_wer.unwrap_or(f64::NAN),
        outcome.best_dir.display(),
        outcome.last_dir.display()
    );
    Ok(())
}

fn cmd_grpo(args: GrpoArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let mut r = Resolver::new(&file);
    let train_path = required_path(&mut r, "train", args.train)?;
    let dev_path = required_path(&mut r, "dev", args.dev)?;
    let out = required_path(&mut r, "out", args.out)?;
    let init = required_path(&mut r, "init", args.init)?;
    let resume = r.settle_opt("resume", args.resume.map(|p| p.display().to_string()))?;
    let seed = r.settle("seed", args.seed, 0)?;
    let steps = r.settle("steps", args.steps, 1000)?;
    let batch_size = r.settle("batch-size", args.batch_size, 16)?;
    let lr = r.settle("lr", args.lr, 3e-4)?;
    let eval_every = r.settle("eval-every", args.eval_every, 100)?;
    let reward_s = r.settle("reward", args.reward, "wer".to_string())?;
    let reward_kind = RewardKind::parse(&reward_s)
        .ok_or_else(|| usage(format!("unknown reward {reward_s:?} (wer|em|ed)")))?;
    let reward_scale = r.settle("reward-scale", args.reward_scale, 1.0)?;
    let algo_s = r.settle("algo", args.algo, "grpo".to_string())?;
    let algo = RlAlgorithm::parse(&algo_s)
        .ok_or_else(|| usage(format!("unknown algorithm {algo_s:?} (grpo|dapo|drgrpo)")))?;
    let num_generations = r.settle("num-generations", args.num_generations, 6)?;
    let max_gen_len = r.settle("max-gen-len", args.max_gen_len, 12)?;
    let beta = r.settle_opt("beta", args.beta)?;
    let clip_low = r.settle_opt("clip-low", args.clip_low)?;
    let clip_high = r.settle_opt("clip-high", args.clip_high)?;
    let degenerate = r.settle_opt("degenerate", args.degenerate)?;
    let decode_s = r.settle("decode", args.decode, "sample".to_string())?;
    let temperature = r.settle("temperature", args.temperature, 1.0)?;
    let inner_updates = r.settle("inner-updates", args.inner_updates, 1)?;
    r.reject_unknown_keys()?;

    let mut rl = match algo {
        RlAlgorithm::Grpo => RlConfig::grpo(beta.unwrap_or(0.04), num_generations, max_gen_len),
        RlAlgorithm::Dapo => {
            if let Some(b) = beta {
                if b != 0.0 {
                    return Err(usage(format!(
                        "--algo dapo removes the KL-divergence term; --beta {b} conflicts (use 0)"
                    )));
                }
            }
            RlConfig::dapo(num_generations, max_gen_len)
        }
        RlAlgorithm::DrGrpo => {
            RlConfig::dr_grpo(beta.unwrap_or(0.04), num_generations, max_gen_len)
        }
    };
    if let Some(c) = clip_low {
        rl.clip_low = c;
    }
    if let Some(c) = clip_high {
        rl.clip_high = c;
    }
    if let Some(d) = degenerate {
        rl.degenerate_policy = match d.as_str() {
            "zero" => grpolab_core::rl::DegenerateGroupPolicy::ZeroAdvantage,
            "skip" => grpolab_core::rl::DegenerateGroupPolicy::SkipGroup,
            other => {
                return Err(usage(format!("unknown degenerate policy {other:?} (zero|skip)")))
            }
        };
    }
    rl.validate().map_err(|e| usage(e.to_string()))?;

    let decode_mode = match decode_s.as_str() {
        "sample" => DecodeMode::Sample { temperature },
        "beam" => DecodeMode::Beam { width: num_generations },
        other => return Err(usage(format!("unknown decode mode {other:?} (sample|beam)"))),
    };

    let train_corpus = load_corpus_checked(&train_path)?;
    let dev_corpus = load_corpus_checked(&dev_path)?;
    check_input_exists(&init)?;
    let (init_model, _, _) = load_checkpoint(&init)?.into_model()?;
    // model dimensions come from the checkpoint
    let model = init_model.config().clone();

    let cfg = TrainConfig {
        stage: Stage::Grpo,
        schedule: LrSchedule::Constant { lr },
        batch_size,
        max_steps: steps,
        eval_every,
        seed,
        model,
        decode: DecodeSettings { mode: decode_mode, max_len: max_gen_len },
        rl: Some(rl),
        reward: Some(
            RewardSpec::new(reward_kind, reward_scale).map_err(|e| usage(e.to_string()))?,
        ),
        inner_updates,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    r.persist(&out, "grpo")?;
    let outcome = run(
        &cfg,
        ModelInit::Checkpoint(&init),
        resume.as_deref().map(Path::new),
        &train_corpus,
        &dev_corpus,
        &out,
    )?;
    println!(
        "grpo done: {} steps, best dev WER {:.4}, checkpoints at {} and {}",
        outcome.final_step,
        outcome.best_dev_wer.unwrap_or(f64::NAN),
        outcome.best_dir.display(),
        outcome.last_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / score / compare

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let mut r = Resolver::new(&file);
    let ckpt = required_path(&mut r, "ckpt", args.ckpt)?;
    let corpus_path = required_path(&mut r, "corpus", args.corpus)?;
    let out = required_path(&mut r, "out", args.out)?;
    let decode_s = r.settle("decode", args.decode, "greedy".to_string())?;
    let beam_size = r.settle("beam-size", args.beam_size, 4)?;
    let max_gen_len = r.settle("max-gen-len", args.max_gen_len, 12)?;
    let worst_k = r.settle("worst-k", args.worst_k, 5)?;
    r.reject_unknown_keys()?;

    let model = load_model_checked(&ckpt)?;
    let corpus = load_corpus_checked(&corpus_path)?;
    let mode = match decode_s.as_str() {
        "greedy" => DecodeMode::greedy(),
        "beam" => DecodeMode::Beam { width: beam_size },
        other => return Err(usage(format!("unknown decode mode {other:?} (greedy|beam)"))),
    };
    let decoder =
        ModelDecoder { model: &model, settings: DecodeSettings { mode, max_len: max_gen_len } };
    let report =
        evaluate(&decoder, &corpus, worst_k).map_err(|e| CliError::runtime(e.to_string()))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    r.persist(&out, "eval")?;
    let text = render_text(&report);
    let json = serde_json::to_string(&report).expect("reports serialize");
    std::fs::write(out.join("report.txt"), &text)
        .and_then(|_| std::fs::write(out.join("report.json"), format!("{json}\n")))
        .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    print!("{text}");
    Ok(())
}

fn read_token_file(path: &Path) -> Result<Vec<Vec<u32>>, CliError> {
    check_input_exists(path)?;
    let text =
        std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let tokens: Vec<u32> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>().map_err(|_| {
                    data_err(format!("{}:{}: bad token {s:?}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<_, _>>()?;
        out.push(tokens);
    }
    Ok(out)
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let refs = read_token_file(&args.reference)?;
    let hyps = read_token_file(&args.hyp)?;
    if refs.len() != hyps.len() {
        return Err(data_err(format!(
            "reference has {} lines, hypothesis has {}",
            refs.len(),
            hyps.len()
        )));
    }
    let stats: Vec<AlignmentStats> = refs.iter().zip(&hyps).map(|(r, h)| align(r, h)).collect();
    let pooled_wer = corpus_wer(stats.iter());
    let (mut ins, mut del, mut sub, mut n) = (0usize, 0usize, 0usize, 0usize);
    for s in &stats {
        ins += s.insertions;
        del += s.deletions;
        sub += s.substitutions;
        n += s.ref_len;
    }
    let mut text = String::new();
    text.push_str(&format!("utterances {}  ref_tokens {n}\n", stats.len()));
    text.push_str(&format!("ins {ins}  del {del}  sub {sub}\n"));
    text.push_str(&format!("WER {pooled_wer:.4}\n"));
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
        std::fs::write(out.join("score.txt"), &text)
            .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
        write_resolved(
            out,
            "score",
            &[("ref", args.reference.display().to_string()), ("hyp", args.hyp.display().to_string())],
        )?;
    }
    Ok(())
}

/// Minimal resolved-config persistence for commands without a resolver.
fn write_resolved(out: &Path, command: &str, pairs: &[(&str, String)]) -> Result<(), CliError> {
    let mut text = format!("# resolved configuration: {command}\n");
    for (k, v) in pairs {
        text.push_str(&format!("{k} = {v}\n"));
    }
    let path = out.join("config.resolved");
    std::fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    check_input_exists(path)?;
    let text =
        std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(text.trim())
        .map_err(|e| data_err(format!("{}: not a report file: {e}", path.display())))
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let a = read_report(&args.a)?;
    let b = read_report(&args.b)?;
    let delta = compare(&a, &b);
    let text = render_delta_text(&delta);
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
        let json = serde_json::to_string(&delta).expect("deltas serialize");
        std::fs::write(out.join("delta.txt"), &text)
            .and_then(|_| std::fs::write(out.join("delta.json"), format!("{json}\n")))
            .map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
        write_resolved(
            out,
            "compare",
            &[("a", args.a.display().to_string()), ("b", args.b.display().to_string())],
        )?;
    }
    Ok(())
}
