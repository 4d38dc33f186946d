//! Corpus evaluation and reporting.
//!
//! Decodes every utterance, aligns against the reference, and pools counts
//! into per-domain and overall rates. Error rates are percentages of pooled
//! reference tokens, so insertion + deletion + substitution rates sum to the
//! WER. Insertion-dominated profiles on out-of-domain data are the
//! hallucination diagnostic.

use crate::align::{align, AlignmentStats};
use crate::data::{oracle_decode, Corpus, PrototypeTable, Utterance};
use crate::model::{DecodeMode, DecodeSettings, ModelError, PolicyModel, TokenId};
use crate::rl::strip_eos;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Anything that turns an utterance's frames into a transcript hypothesis.
pub trait Decoder {
    fn decode(&self, utt: &Utterance) -> Result<Vec<TokenId>>;
    /// Human-readable decode settings recorded in the report.
    fn description(&self) -> String;
}

/// Policy-model decoder: greedy or beam search. Sampling is rejected here;
/// reports must be pure functions of the checkpoint and corpus.
pub struct ModelDecoder<'a> {
    pub model: &'a PolicyModel<f32>,
    pub settings: DecodeSettings,
}

impl<'a> ModelDecoder<'a> {
    pub fn greedy(model: &'a PolicyModel<f32>, max_len: usize) -> Self {
        ModelDecoder { model, settings: DecodeSettings { mode: DecodeMode::greedy(), max_len } }
    }
}

impl Decoder for ModelDecoder<'_> {
    fn decode(&self, utt: &Utterance) -> Result<Vec<TokenId>> {
        let prompt = utt.inference_prompt()?;
        let tokens = match self.settings.mode {
            DecodeMode::Sample { temperature: 0.0 } => {
                self.model.greedy(&prompt, self.settings.max_len)?
            }
            DecodeMode::Sample { temperature } => {
                return Err(EvalError::Contract(format!(
                    "evaluation decodes deterministically; temperature {temperature} not allowed"
                )))
            }
            DecodeMode::Beam { width } => {
                let beams = self.model.beam_search(&prompt, width, self.settings.max_len)?;
                beams
                    .into_iter()
                    .next()
                    .ok_or_else(|| EvalError::Contract("beam search returned no hypotheses".into()))?
                    .tokens
            }
        };
        Ok(strip_eos(&tokens).to_vec())
    }

    fn description(&self) -> String {
        match self.settings.mode {
            DecodeMode::Sample { .. } => format!("greedy max_len={}", self.settings.max_len),
            DecodeMode::Beam { width } => {
                format!("beam width={width} max_len={}", self.settings.max_len)
            }
        }
    }
}

/// Nearest-prototype decoder from the data module, usable as an evaluation
/// baseline.
pub struct OracleDecoder<'a> {
    pub protos: &'a PrototypeTable,
    pub collapse: bool,
}

impl Decoder for OracleDecoder<'_> {
    fn decode(&self, utt: &Utterance) -> Result<Vec<TokenId>> {
        Ok(oracle_decode(&utt.frames, utt.n_frames, utt.frame_dim, self.protos, self.collapse))
    }

    fn description(&self) -> String {
        format!("nearest-prototype collapse={}", self.collapse)
    }
}

/// Pooled counts and percentage rates for one slice of the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RateBlock {
    pub utterances: u64,
    pub ref_tokens: u64,
    pub insertions: u64,
    pub deletions: u64,
    pub substitutions: u64,
    /// Percent of pooled reference tokens.
    pub wer_pct: f64,
    pub ins_pct: f64,
    pub del_pct: f64,
    pub sub_pct: f64,
}

impl RateBlock {
    fn absorb(&mut self, s: &AlignmentStats) {
        self.utterances += 1;
        self.ref_tokens += s.ref_len as u64;
        self.insertions += s.insertions as u64;
        self.deletions += s.deletions as u64;
        self.substitutions += s.substitutions as u64;
    }

    fn finalize(&mut self) {
        let n = self.ref_tokens.max(1) as f64;
        self.ins_pct = 100.0 * self.insertions as f64 / n;
        self.del_pct = 100.0 * self.deletions as f64 / n;
        self.sub_pct = 100.0 * self.substitutions as f64 / n;
        self.wer_pct =
            100.0 * (self.insertions + self.deletions + self.substitutions) as f64 / n;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstEntry {
    pub id: String,
    pub insertions: u64,
    pub deletions: u64,
    pub substitutions: u64,
    pub ref_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decode: String,
    pub overall: RateBlock,
    pub per_domain: BTreeMap<String, RateBlock>,
    /// Top offenders by insertion count.
    pub worst: Vec<WorstEntry>,
}

/// Decodes and aligns every utterance, pooling counts (never averaging
/// per-utterance rates).
pub fn evaluate(decoder: &dyn Decoder, corpus: &Corpus, worst_k: usize) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(EvalError::Contract("cannot evaluate an empty corpus".into()));
    }
    let mut overall = RateBlock::default();
    let mut per_domain: BTreeMap<String, RateBlock> = BTreeMap::new();
    let mut entries: Vec<WorstEntry> = Vec::with_capacity(corpus.len());
    for utt in &corpus.utterances {
        let hyp = decoder.decode(utt)?;
        let stats = align(&utt.transcript, &hyp);
        overall.absorb(&stats);
        per_domain.entry(utt.domain.as_str().to_string()).or_default().absorb(&stats);
        entries.push(WorstEntry {
            id: utt.id.clone(),
            insertions: stats.insertions as u64,
            deletions: stats.deletions as u64,
            substitutions: stats.substitutions as u64,
            ref_len: stats.ref_len as u64,
        });
    }
    overall.finalize();
    for block in per_domain.values_mut() {
        block.finalize();
    }
    entries.sort_by(|a, b| b.insertions.cmp(&a.insertions).then_with(|| a.id.cmp(&b.id)));
    entries.truncate(worst_k);
    Ok(EvalReport {
        decode: decoder.description(),
        overall,
        per_domain,
        worst: entries,
    })
}

/// Field-wise differences between two reports (b minus a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub a_decode: String,
    pub b_decode: String,
    pub a_wer_pct: f64,
    pub b_wer_pct: f64,
    pub wer_delta_points: f64,
    pub ins_delta_points: f64,
    pub del_delta_points: f64,
    pub sub_delta_points: f64,
    pub insertions_delta: i64,
    pub deletions_delta: i64,
    pub substitutions_delta: i64,
    /// `(b - a) / a`; None when `a` is zero and the change is undefined.
    pub relative_wer_change: Option<f64>,
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> DeltaReport {
    let relative_wer_change = if a.overall.wer_pct > 0.0 {
        Some((b.overall.wer_pct - a.overall.wer_pct) / a.overall.wer_pct)
    } else {
        None
    };
    DeltaReport {
        a_decode: a.decode.clone(),
        b_decode: b.decode.clone(),
        a_wer_pct: a.overall.wer_pct,
        b_wer_pct: b.overall.wer_pct,
        wer_delta_points: b.overall.wer_pct - a.overall.wer_pct,
        ins_delta_points: b.overall.ins_pct - a.overall.ins_pct,
        del_delta_points: b.overall.del_pct - a.overall.del_pct,
        sub_delta_points: b.overall.sub_pct - a.overall.sub_pct,
        insertions_delta: b.overall.insertions as i64 - a.overall.insertions as i64,
        deletions_delta: b.overall.deletions as i64 - a.overall.deletions as i64,
        substitutions_delta: b.overall.substitutions as i64 - a.overall.substitutions as i64,
        relative_wer_change,
    }
}

fn render_block(out: &mut String, label: &str, b: &RateBlock) {
    let _ = writeln!(
        out,
        "{label:<10} utts {:>6}  refs {:>7}  WER {:>7.2}%  Ins {:>6.2}%  Del {:>6.2}%  Sub {:>6.2}%",
        b.utterances, b.ref_tokens, b.wer_pct, b.ins_pct, b.del_pct, b.sub_pct
    );
}

/// Human-readable rendering of a report (the machine-readable form is the
/// serde JSON line).
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "decode: {}", report.decode);
    render_block(&mut out, "overall", &report.overall);
    for (domain, block) in &report.per_domain {
        render_block(&mut out, domain, block);
    }
    if !report.worst.is_empty() {
        let _ = writeln!(out, "worst offenders by insertions:");
        for w in &report.worst {
            let _ = writeln!(
                out,
                "  {:<16} ins {:>3}  del {:>3}  sub {:>3}  ref {:>3}",
                w.id, w.insertions, w.deletions, w.substitutions, w.ref_len
            );
        }
    }
    out
}

pub fn render_delta_text(d: &DeltaReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "a: {}  (WER {:.2}%)", d.a_decode, d.a_wer_pct);
    let _ = writeln!(out, "b: {}  (WER {:.2}%)", d.b_decode, d.b_wer_pct);
    let _ = writeln!(
        out,
        "delta points: WER {:+.2}  Ins {:+.2}  Del {:+.2}  Sub {:+.2}",
        d.wer_delta_points, d.ins_delta_points, d.del_delta_points, d.sub_delta_points
    );
    match d.relative_wer_change {
        Some(r) => {
            let _ = writeln!(out, "relative WER change: {:+.2}%", 100.0 * r);
        }
        None => {
            let _ = writeln!(out, "relative WER change: undefined (baseline WER is 0)");
        }
    }
    out
}
