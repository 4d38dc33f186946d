//! Decoder-only causal policy over a mixed stream of special tokens,
//! projected acoustic frames, and text tokens.
//!
//! The input layout is `<User> <BOS> <TASK> <S-BOS> s_1..s_N <System> <BOS>
//! x_1..x_T <EOS>`: a fixed special-token head, one projected embedding per
//! acoustic frame, a two-token tail, then the transcript. Loss and decoding
//! only ever touch transcript positions.

mod decode;
mod forward;

pub use decode::{BeamHypothesis, DecodeState};
pub use forward::PolicyGraph;

use crate::rng::{streams, SeededRng};
use crate::tensor::{Elem, TensorError};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model: {0}")]
    Contract(String),
}

pub(crate) fn contract(msg: impl Into<String>) -> ModelError {
    ModelError::Contract(msg.into())
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Token vocabulary: a fixed block of reserved ids below all word tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    word_count: usize,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const USER: TokenId = 1;
    pub const BOS: TokenId = 2;
    pub const S_BOS: TokenId = 3;
    pub const SYSTEM: TokenId = 4;
    pub const EOS: TokenId = 5;
    /// Stand-in for the constant natural-language instruction.
    pub const TASK: TokenId = 6;
    const SPARE: TokenId = 7;
    pub const NUM_RESERVED: usize = 8;

    pub fn new(word_count: usize) -> Result<Self> {
        if word_count == 0 {
            return Err(contract("vocab needs at least one word token"));
        }
        let _ = Self::SPARE;
        Ok(Vocab { word_count })
    }

    pub fn size(&self) -> usize {
        Self::NUM_RESERVED + self.word_count
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    /// Token id of the `i`-th word (0-based).
    pub fn word(&self, i: usize) -> TokenId {
        debug_assert!(i < self.word_count);
        (Self::NUM_RESERVED + i) as TokenId
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        (id as usize) >= Self::NUM_RESERVED && (id as usize) < self.size()
    }

    /// 0-based word index of a word token id.
    pub fn word_index(&self, id: TokenId) -> Option<usize> {
        self.is_word(id).then(|| id as usize - Self::NUM_RESERVED)
    }
}

/// Architecture hyperparameters. Defaults are the desk-scale configuration:
/// trains in minutes while leaving measurable headroom between the two
/// training stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub frame_dim: usize,
    pub word_tokens: usize,
    pub ffn: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            layers: 2,
            heads: 2,
            frame_dim: 16,
            word_tokens: 56,
            ffn: 256,
            max_seq: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(contract("hidden, layers and heads must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(contract(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.frame_dim == 0 || self.word_tokens == 0 || self.ffn == 0 || self.max_seq < 8 {
            return Err(contract("degenerate model dimensions"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.word_tokens).expect("word_tokens validated positive")
    }

    pub(crate) fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub(crate) fn attn_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// How completions are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    /// Multinomial sampling from the full softmax (`temperature == 0` is
    /// greedy decoding).
    Sample { temperature: f64 },
    /// Beam search with the given width.
    Beam { width: usize },
}

impl DecodeMode {
    pub fn greedy() -> Self {
        DecodeMode::Sample { temperature: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSettings {
    pub mode: DecodeMode,
    /// Completion-length budget, including the terminating `<EOS>`.
    pub max_len: usize,
}

/// A decoding/training prompt: acoustic frames plus, for training prompts,
/// the reference transcript.
#[derive(Debug, Clone)]
pub struct Prompt {
    frames: Vec<f32>,
    n_frames: usize,
    frame_dim: usize,
    transcript: Option<Vec<TokenId>>,
}

impl Prompt {
    const HEAD: [TokenId; 4] = [Vocab::USER, Vocab::BOS, Vocab::TASK, Vocab::S_BOS];
    const TAIL: [TokenId; 2] = [Vocab::SYSTEM, Vocab::BOS];

    pub fn inference(frames: Vec<f32>, n_frames: usize, frame_dim: usize) -> Result<Self> {
        if n_frames == 0 {
            return Err(contract("prompt needs at least one frame"));
        }
        if frames.len() != n_frames * frame_dim {
            return Err(contract(format!(
                "frame buffer has {} values, expected {}x{}",
                frames.len(),
                n_frames,
                frame_dim
            )));
        }
        Ok(Prompt { frames, n_frames, frame_dim, transcript: None })
    }

    pub fn training(
        frames: Vec<f32>,
        n_frames: usize,
        frame_dim: usize,
        transcript: Vec<TokenId>,
        vocab: &Vocab,
    ) -> Result<Self> {
        if transcript.is_empty() {
            return Err(contract("training prompt needs a non-empty transcript"));
        }
        if let Some(&bad) = transcript.iter().find(|&&t| !vocab.is_word(t)) {
            return Err(contract(format!(
                "transcript may only contain word tokens, found id {bad}"
            )));
        }
        let mut p = Self::inference(frames, n_frames, frame_dim)?;
        p.transcript = Some(transcript);
        Ok(p)
    }

    pub fn head_ids() -> &'static [TokenId] {
        &Self::HEAD
    }

    pub fn tail_ids() -> &'static [TokenId] {
        &Self::TAIL
    }

    /// Positions before the first transcript token: head, frames, tail.
    pub fn prefix_len(&self) -> usize {
        Self::HEAD.len() + self.n_frames + Self::TAIL.len()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn transcript(&self) -> Option<&[TokenId]> {
        self.transcript.as_deref()
    }

    /// Loss mask over the training input positions (prefix plus transcript):
    /// true exactly where the next-token target is a transcript token or the
    /// closing `<EOS>`.
    pub fn loss_mask(&self) -> Result<Vec<bool>> {
        let t = self
            .transcript
            .as_ref()
            .ok_or_else(|| contract("loss_mask on an inference prompt"))?
            .len();
        let p = self.prefix_len();
        let mut mask = vec![false; p + t];
        for m in mask.iter_mut().skip(p - 1) {
            *m = true;
        }
        Ok(mask)
    }
}

/// Flat named parameter storage. Creation order is the canonical order for
/// checkpoints and gradient vectors.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<E>>,
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }

    fn add(&mut self, name: String, shape: Vec<usize>, values: Vec<E>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.names.len() - 1
    }

    /// Appends a named array (checkpoint loading).
    pub fn push_entry(&mut self, name: String, shape: Vec<usize>, values: Vec<E>) {
        self.add(name, shape, values);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[E] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [E] {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub frame_w: usize,
    pub frame_b: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub seg_emb: usize,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Input layout segments. Positions are embedded as `content +
/// pos_emb[offset within segment] + seg_emb[segment]`, which exposes frame
/// and transcript ordinals to attention regardless of how long the frame
/// block is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Segment {
    Head = 0,
    Frames = 1,
    Tail = 2,
    Text = 3,
}

pub(crate) const NUM_SEGMENTS: usize = 4;

/// The policy network. Parameters are plain arrays; graph tensors are built
/// on demand per training step. A model is immutable during decoding, so
/// shared references can decode concurrently.
#[derive(Debug, Clone)]
pub struct PolicyModel<E: Elem> {
    cfg: ModelConfig,
    vocab: Vocab,
    store: ParamStore<E>,
    pub(crate) ids: ParamIds,
}

impl<E: Elem> PolicyModel<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocab();
        let mut rng = SeededRng::stream(seed, &[streams::PARAM_INIT]);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let v = vocab.size();

        // weight matrices are [fan_in, fan_out]; embeddings use a fixed scale
        let mut normal = |store: &mut ParamStore<E>, name: &str, shape: Vec<usize>| -> usize {
            let n: usize = shape.iter().product();
            let std = if name.ends_with("emb.weight") {
                0.1
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let values = (0..n).map(|_| E::from_f64(rng.normal() * std)).collect();
            store.add(name.to_string(), shape, values)
        };
        let zeros = |store: &mut ParamStore<E>, name: &str, shape: Vec<usize>| -> usize {
            let n: usize = shape.iter().product();
            store.add(name.to_string(), shape, vec![E::ZERO; n])
        };
        let ones = |store: &mut ParamStore<E>, name: &str, shape: Vec<usize>| -> usize {
            let n: usize = shape.iter().product();
            store.add(name.to_string(), shape, vec![E::ONE; n])
        };

        let frame_w = normal(&mut store, "frame_proj.weight", vec![cfg.frame_dim, h]);
        let frame_b = zeros(&mut store, "frame_proj.bias", vec![h]);
        let tok_emb = normal(&mut store, "tok_emb.weight", vec![v, h]);
        let pos_emb = normal(&mut store, "pos_emb.weight", vec![cfg.max_seq, h]);
        let seg_emb = normal(&mut store, "seg_emb.weight", vec![NUM_SEGMENTS, h]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIds {
                ln1_g: ones(&mut store, &p("ln1.gamma"), vec![h]),
                ln1_b: zeros(&mut store, &p("ln1.beta"), vec![h]),
                wq: normal(&mut store, &p("attn.wq.weight"), vec![h, h]),
                bq: zeros(&mut store, &p("attn.wq.bias"), vec![h]),
                wk: normal(&mut store, &p("attn.wk.weight"), vec![h, h]),
                bk: zeros(&mut store, &p("attn.wk.bias"), vec![h]),
                wv: normal(&mut store, &p("attn.wv.weight"), vec![h, h]),
                bv: zeros(&mut store, &p("attn.wv.bias"), vec![h]),
                wo: normal(&mut store, &p("attn.wo.weight"), vec![h, h]),
                bo: zeros(&mut store, &p("attn.wo.bias"), vec![h]),
                ln2_g: ones(&mut store, &p("ln2.gamma"), vec![h]),
                ln2_b: zeros(&mut store, &p("ln2.beta"), vec![h]),
                w1: normal(&mut store, &p("mlp.w1.weight"), vec![h, cfg.ffn]),
                b1: zeros(&mut store, &p("mlp.w1.bias"), vec![cfg.ffn]),
                w2: normal(&mut store, &p("mlp.w2.weight"), vec![cfg.ffn, h]),
                b2: zeros(&mut store, &p("mlp.w2.bias"), vec![h]),
            });
        }
        let lnf_g = ones(&mut store, "ln_f.gamma", vec![h]);
        let lnf_b = zeros(&mut store, "ln_f.beta", vec![h]);
        let out_w = normal(&mut store, "out_proj.weight", vec![h, v]);
        let out_b = zeros(&mut store, "out_proj.bias", vec![v]);

        Ok(PolicyModel {
            cfg,
            vocab,
            store,
            ids: ParamIds {
                frame_w,
                frame_b,
                tok_emb,
                pos_emb,
                seg_emb,
                blocks,
                lnf_g,
                lnf_b,
                out_w,
                out_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    /// Replaces all parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, other: &ParamStore<E>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(contract(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                other.len(),
                self.store.len()
            )));
        }
        for i in 0..other.len() {
            if other.name(i) != self.store.name(i) || other.shape(i) != self.store.shape(i) {
                return Err(contract(format!(
                    "parameter {} mismatch: checkpoint {}{:?}, model {}{:?}",
                    i,
                    other.name(i),
                    other.shape(i),
                    self.store.name(i),
                    self.store.shape(i)
                )));
            }
        }
        for i in 0..other.len() {
            self.store.values_mut(i).copy_from_slice(other.values(i));
        }
        Ok(())
    }

    pub(crate) fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.frame_dim() != self.cfg.frame_dim {
            return Err(contract(format!(
                "prompt frame dim {} does not match model frame dim {}",
                prompt.frame_dim(),
                self.cfg.frame_dim
            )));
        }
        if prompt.prefix_len() >= self.cfg.max_seq {
            return Err(contract(format!(
                "prompt prefix of {} positions exceeds max sequence {}",
                prompt.prefix_len(),
                self.cfg.max_seq
            )));
        }
        Ok(())
    }

    pub(crate) fn check_completion(&self, completion: &[TokenId]) -> Result<()> {
        if completion.is_empty() {
            return Err(contract("empty completion"));
        }
        if completion.contains(&Vocab::PAD) {
            return Err(contract("completion contains <PAD>"));
        }
        if let Some(&bad) = completion.iter().find(|&&t| t as usize >= self.vocab.size()) {
            return Err(contract(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }
}
