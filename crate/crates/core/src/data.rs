//! Synthetic noisy-channel corpus.
//!
//! Each word token owns a fixed prototype vector (drawn once from a seeded
//! unit Gaussian and shared across domains). An utterance samples a
//! transcript from a seeded bigram language model, then emits one to three
//! noisy copies of each token's prototype as its acoustic frames. Domains
//! differ only in channel physics: noise scale, spurious pure-noise frame
//! insertion, and frame dropout. The out-of-domain regime is the desk-scale
//! analog of adverse acoustics.

use crate::model::{Prompt, TokenId, Vocab};
use crate::rng::{fnv1a64, streams, SeededRng};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {record}: {msg}")]
    Parse { path: String, record: usize, msg: String },
    #[error("data: {0}")]
    Contract(String),
}

fn contract(msg: impl Into<String>) -> DataError {
    DataError::Contract(msg.into())
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Transcript lengths sampled per utterance (inclusive). Enough spread that
/// stopping must be learned, narrow enough that the variable frame-to-token
/// alignment is learnable in a minutes-scale supervised run.
pub const TRANSCRIPT_LEN_MIN: usize = 3;
pub const TRANSCRIPT_LEN_MAX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Clean,
    Ood,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Clean => "clean",
            Domain::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(Domain::Clean),
            "ood" => Some(Domain::Ood),
            _ => None,
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Domain::Clean => 0,
            Domain::Ood => 1,
        }
    }
}

/// One utterance: acoustic frames plus the reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub domain: Domain,
    pub transcript: Vec<TokenId>,
    /// Row-major `n_frames x frame_dim`.
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub frame_dim: usize,
}

impl Utterance {
    pub fn training_prompt(&self, vocab: &Vocab) -> crate::model::Result<Prompt> {
        Prompt::training(
            self.frames.clone(),
            self.n_frames,
            self.frame_dim,
            self.transcript.clone(),
            vocab,
        )
    }

    pub fn inference_prompt(&self) -> crate::model::Result<Prompt> {
        Prompt::inference(self.frames.clone(), self.n_frames, self.frame_dim)
    }
}

/// Cap on trailing spurious events per utterance.
pub const MAX_SPURIOUS_EVENTS: usize = 8;

/// Channel physics of one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    /// Per-dimension Gaussian noise added to each emitted prototype.
    pub noise_sigma: f64,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    /// Probability of appending one more spurious acoustic event after the
    /// speech ends (geometric continuation, capped at
    /// [`MAX_SPURIOUS_EVENTS`]). Trailing events carry no transcript
    /// content; they are what provokes prior-driven run-on output.
    pub spurious_rate: f64,
    /// Probability that a spurious event is a phantom word (a real
    /// prototype's frames, like background speech) rather than one
    /// pure-noise frame.
    pub phantom_rate: f64,
    /// Probability of dropping a real frame (a token always keeps at least
    /// one).
    pub dropout_rate: f64,
}

impl DomainSpec {
    /// In-domain default: enough noise that supervised training lands at a
    /// low but nonzero error rate, and a short pure-noise tail so the
    /// policy can learn that trailing noise means stop.
    pub fn clean() -> Self {
        DomainSpec {
            noise_sigma: 0.3,
            frames_per_token_min: 1,
            frames_per_token_max: 3,
            spurious_rate: 0.4,
            phantom_rate: 0.0,
            dropout_rate: 0.0,
        }
    }

    /// Out-of-domain default: heavier noise plus a longer spurious tail
    /// that mixes pure noise with phantom words (background speech).
    /// Calibrated so a clean-trained supervised model shows an
    /// insertion-dominated error profile here.
    pub fn ood() -> Self {
        DomainSpec {
            noise_sigma: 0.35,
            frames_per_token_min: 1,
            frames_per_token_max: 3,
            spurious_rate: 0.7,
            phantom_rate: 0.3,
            dropout_rate: 0.0,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Clean => Self::clean(),
            Domain::Ood => Self::ood(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(contract("noise_sigma must be >= 0"));
        }
        if self.frames_per_token_min < 1 || self.frames_per_token_max < self.frames_per_token_min {
            return Err(contract("frames-per-token range must satisfy 1 <= min <= max"));
        }
        if !(0.0..1.0).contains(&self.spurious_rate) || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(contract("spurious and dropout rates must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.phantom_rate) {
            return Err(contract("phantom rate must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One fixed d-dimensional vector per word token; the shared "lexicon"
/// across domains.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    frame_dim: usize,
    vectors: Vec<f32>,
}

impl PrototypeTable {
    pub fn new(seed: u64, word_count: usize, frame_dim: usize) -> Self {
        let mut rng = SeededRng::stream(seed, &[streams::PROTOTYPES]);
        let vectors = (0..word_count * frame_dim)
            .map(|_| rng.normal() as f32)
            .collect();
        PrototypeTable { frame_dim, vectors }
    }

    pub fn word_count(&self) -> usize {
        self.vectors.len() / self.frame_dim
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn row(&self, word: usize) -> &[f32] {
        &self.vectors[word * self.frame_dim..(word + 1) * self.frame_dim]
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.vectors.len() * 4 + 8);
        bytes.extend_from_slice(&(self.frame_dim as u64).to_le_bytes());
        for v in &self.vectors {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

/// Seeded random bigram language model over word tokens; gives transcripts
/// a learnable prior (the precondition for prior-driven hallucination).
#[derive(Debug, Clone)]
pub struct BigramLm {
    word_count: usize,
    initial: Vec<f64>,
    transitions: Vec<f64>,
}

impl BigramLm {
    pub fn new(seed: u64, word_count: usize) -> Self {
        let mut rng = SeededRng::stream(seed, &[streams::BIGRAM]);
        let mut softmax_row = |n: usize| -> Vec<f64> {
            let logits: Vec<f64> = (0..n).map(|_| rng.normal() * 1.5).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = out.iter().sum();
            for p in out.iter_mut() {
                *p /= sum;
            }
            out
        };
        let initial = softmax_row(word_count);
        let mut transitions = Vec::with_capacity(word_count * word_count);
        for _ in 0..word_count {
            transitions.extend(softmax_row(word_count));
        }
        BigramLm { word_count, initial, transitions }
    }

    pub fn sample_transcript(&self, rng: &mut SeededRng, len: usize) -> Vec<usize> {
        let mut words = Vec::with_capacity(len);
        let mut prev = rng.categorical(&self.initial);
        words.push(prev);
        for _ in 1..len {
            let row = &self.transitions[prev * self.word_count..(prev + 1) * self.word_count];
            prev = rng.categorical(row);
            words.push(prev);
        }
        words
    }
}

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusHeader {
    pub version: u32,
    pub vocab_checksum: u64,
    pub proto_checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

pub fn vocab_checksum(vocab: &Vocab) -> u64 {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(vocab.size() as u64).to_le_bytes());
    bytes.extend_from_slice(&(Vocab::NUM_RESERVED as u64).to_le_bytes());
    fnv1a64(&bytes)
}

/// Generates `count` utterances. Transcripts come from the bigram sampler,
/// frames from the prototype table plus the domain's channel physics. Fully
/// determined by `(seed, domain, count)` for a fixed lexicon.
pub fn generate_corpus(
    seed: u64,
    count: usize,
    domain: Domain,
    spec: &DomainSpec,
    vocab: &Vocab,
    protos: &PrototypeTable,
    bigram: &BigramLm,
) -> Result<Corpus> {
    if count < 1 {
        return Err(contract("corpus count must be >= 1"));
    }
    spec.validate()?;
    if protos.word_count() != vocab.word_count() {
        return Err(contract(format!(
            "prototype table covers {} words, vocab has {}",
            protos.word_count(),
            vocab.word_count()
        )));
    }
    let d = protos.frame_dim();
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = SeededRng::stream(seed, &[streams::UTTERANCE, domain.tag(), i as u64]);
        let len = rng.uniform_range(TRANSCRIPT_LEN_MIN, TRANSCRIPT_LEN_MAX);
        let words = bigram.sample_transcript(&mut rng, len);
        let transcript: Vec<TokenId> = words.iter().map(|&w| vocab.word(w)).collect();

        let mut frames: Vec<f32> = Vec::new();
        let mut n_frames = 0usize;
        for &w in &words {
            let k = rng.uniform_range(spec.frames_per_token_min, spec.frames_per_token_max);
            let mut emitted = 0usize;
            for j in 0..k {
                let drop_roll = rng.uniform();
                let must_keep = emitted == 0 && j == k - 1;
                let keep = must_keep || drop_roll >= spec.dropout_rate;
                if keep {
                    let proto = protos.row(w);
                    for &p in proto {
                        frames.push(p + (spec.noise_sigma * rng.normal()) as f32);
                    }
                    n_frames += 1;
                    emitted += 1;
                }
            }
        }
        if spec.spurious_rate > 0.0 {
            let mut events = 0usize;
            while events < MAX_SPURIOUS_EVENTS && rng.uniform() < spec.spurious_rate {
                if rng.uniform() < spec.phantom_rate {
                    // phantom word: a real prototype's frames, no transcript
                    let w = rng.uniform_range(0, protos.word_count() - 1);
                    let k = rng.uniform_range(spec.frames_per_token_min, spec.frames_per_token_max);
                    for _ in 0..k {
                        for &p in protos.row(w) {
                            frames.push(p + (spec.noise_sigma * rng.normal()) as f32);
                        }
                        n_frames += 1;
                    }
                } else {
                    for _ in 0..d {
                        frames.push(rng.normal() as f32);
                    }
                    n_frames += 1;
                }
                events += 1;
            }
        }
        utterances.push(Utterance {
            id: format!("{}-{:06}", domain.as_str(), i),
            domain,
            transcript,
            frames,
            n_frames,
            frame_dim: d,
        });
    }
    Ok(Corpus {
        header: CorpusHeader {
            version: CORPUS_FORMAT_VERSION,
            vocab_checksum: vocab_checksum(vocab),
            proto_checksum: protos.checksum(),
        },
        utterances,
    })
}

/// Nearest-prototype decoder: assigns each frame to its closest prototype
/// (squared L2, lowest word on ties). With `collapse`, consecutive
/// duplicates merge. This is the measuring-stick decoder used to compare
/// channel difficulty across domains.
pub fn oracle_decode(
    frames: &[f32],
    n_frames: usize,
    frame_dim: usize,
    protos: &PrototypeTable,
    collapse: bool,
) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let frame = &frames[f * frame_dim..(f + 1) * frame_dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for w in 0..protos.word_count() {
            let proto = protos.row(w);
            let mut dist = 0.0f64;
            for (a, b) in frame.iter().zip(proto) {
                let diff = (*a - *b) as f64;
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = w;
            }
        }
        let tok = (Vocab::NUM_RESERVED + best) as TokenId;
        if !(collapse && out.last() == Some(&tok)) {
            out.push(tok);
        }
    }
    out
}

/// Seeded disjoint partition into train/dev/test by shuffled position.
pub fn split_corpus(corpus: &Corpus, seed: u64, train_frac: f64, dev_frac: f64) -> Result<(Corpus, Corpus, Corpus)> {
    if !(train_frac > 0.0 && dev_frac >= 0.0 && train_frac + dev_frac <= 1.0) {
        return Err(contract(format!(
            "invalid split fractions train={train_frac} dev={dev_frac}"
        )));
    }
    let n = corpus.len();
    let mut rng = SeededRng::stream(seed, &[streams::SPLIT]);
    let order = rng.sample_distinct(n, n);
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_dev = (n as f64 * dev_frac).round() as usize;
    let take = |range: std::ops::Range<usize>| Corpus {
        header: corpus.header,
        utterances: range.map(|i| corpus.utterances[order[i]].clone()).collect(),
    };
    let end_dev = (n_train + n_dev).min(n);
    Ok((take(0..n_train), take(n_train..end_dev), take(end_dev..n)))
}

/// Serializes a corpus: a header line with format version and
/// vocab/prototype checksums, then one tab-separated record per utterance
/// (`id domain T tokens N d frames`), frames printed with 9 significant
/// digits so f32 values round-trip exactly.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    let h = &corpus.header;
    let _ = writeln!(
        out,
        "grpo-asr-corpus\tversion={}\tvocab_checksum={:016x}\tproto_checksum={:016x}",
        h.version, h.vocab_checksum, h.proto_checksum
    );
    for u in &corpus.utterances {
        let tokens = u
            .transcript
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let mut frames = String::with_capacity(u.frames.len() * 16);
        for (i, v) in u.frames.iter().enumerate() {
            if i > 0 {
                frames.push(' ');
            }
            let _ = write!(frames, "{v:.8e}");
        }
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            u.id,
            u.domain.as_str(),
            u.transcript.len(),
            tokens,
            u.n_frames,
            u.frame_dim,
            frames
        );
    }
    fs::write(path, out).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let path_s = path.display().to_string();
    let parse_err = |record: usize, msg: String| DataError::Parse { path: path_s.clone(), record, msg };

    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty corpus file".into()))?;
    let header = parse_header(header_line).map_err(|msg| parse_err(0, msg))?;

    let mut utterances = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let record = lineno; // header is record 0
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(parse_err(record, format!("expected 7 tab-separated fields, got {}", fields.len())));
        }
        let id = fields[0].to_string();
        let domain = Domain::parse(fields[1])
            .ok_or_else(|| parse_err(record, format!("unknown domain {:?}", fields[1])))?;
        let t: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(record, format!("bad transcript length {:?}", fields[2])))?;
        let transcript: Vec<TokenId> = fields[3]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<TokenId>().map_err(|_| parse_err(record, format!("bad token {s:?}"))))
            .collect::<Result<_>>()?;
        if transcript.len() != t {
            return Err(parse_err(record, format!("declared T={t} but found {} tokens", transcript.len())));
        }
        let n: usize = fields[4]
            .parse()
            .map_err(|_| parse_err(record, format!("bad frame count {:?}", fields[4])))?;
        let d: usize = fields[5]
            .parse()
            .map_err(|_| parse_err(record, format!("bad frame dim {:?}", fields[5])))?;
        let frames: Vec<f32> = fields[6]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|_| parse_err(record, format!("bad frame value {s:?}"))))
            .collect::<Result<_>>()?;
        if frames.len() != n * d {
            return Err(parse_err(
                record,
                format!("declared {n}x{d} frames but found {} values", frames.len()),
            ));
        }
        utterances.push(Utterance { id, domain, transcript, frames, n_frames: n, frame_dim: d });
    }
    Ok(Corpus { header, utterances })
}

fn parse_header(line: &str) -> std::result::Result<CorpusHeader, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.first() != Some(&"grpo-asr-corpus") {
        return Err("not a corpus file (bad magic)".into());
    }
    let mut version = None;
    let mut vocab_checksum = None;
    let mut proto_checksum = None;
    for f in &fields[1..] {
        if let Some(v) = f.strip_prefix("version=") {
            version = v.parse::<u32>().ok();
        } else if let Some(v) = f.strip_prefix("vocab_checksum=") {
            vocab_checksum = u64::from_str_radix(v, 16).ok();
        } else if let Some(v) = f.strip_prefix("proto_checksum=") {
            proto_checksum = u64::from_str_radix(v, 16).ok();
        }
    }
    match (version, vocab_checksum, proto_checksum) {
        (Some(version), Some(vocab_checksum), Some(proto_checksum)) => {
            if version != CORPUS_FORMAT_VERSION {
                return Err(format!("unsupported corpus version {version}"));
            }
            Ok(CorpusHeader { version, vocab_checksum, proto_checksum })
        }
        _ => Err("header missing version or checksums".into()),
    }
}
