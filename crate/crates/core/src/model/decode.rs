//! Incremental no-grad decoding with per-layer key/value caches.
//!
//! Per-position math mirrors `forward.rs` op for op (same kernels, same
//! accumulation order) so scores recorded while sampling replay exactly
//! under `PolicyGraph::score_tensor`.

use super::forward::LN_EPS;
use super::{contract, PolicyModel, Prompt, Result, Segment, TokenId, Vocab};
use crate::rng::SeededRng;
use crate::tensor::kernels;
use crate::tensor::Elem;

#[derive(Clone)]
struct LayerCache<E: Elem> {
    k: Vec<E>,
    v: Vec<E>,
}

/// Decoder state after consuming some positions. Cloning forks the state
/// (used by beam search).
#[derive(Clone)]
pub struct DecodeState<'m, E: Elem> {
    model: &'m PolicyModel<E>,
    pos: usize,
    text_count: usize,
    caches: Vec<LayerCache<E>>,
}

impl<E: Elem> PolicyModel<E> {
    fn embed_position<F>(&self, seg: Segment, offset: usize, content: F) -> Vec<E>
    where
        F: FnOnce(&Self) -> Vec<E>,
    {
        let h = self.config().hidden;
        let mut row = content(self);
        let pe = &self.params().values(self.ids.pos_emb)[offset * h..(offset + 1) * h];
        for (o, &p) in row.iter_mut().zip(pe) {
            *o += p;
        }
        let s = seg as usize;
        let se = &self.params().values(self.ids.seg_emb)[s * h..(s + 1) * h];
        for (o, &v) in row.iter_mut().zip(se) {
            *o += v;
        }
        row
    }

    fn token_row(&self, tok: TokenId, seg: Segment, offset: usize) -> Vec<E> {
        let h = self.config().hidden;
        self.embed_position(seg, offset, |m| {
            m.params().values(m.ids.tok_emb)[tok as usize * h..(tok as usize + 1) * h].to_vec()
        })
    }

    fn frame_row(&self, frame: &[f32], offset: usize) -> Vec<E> {
        let h = self.config().hidden;
        let d = self.config().frame_dim;
        self.embed_position(Segment::Frames, offset, |m| {
            let fe: Vec<E> = frame.iter().map(|&f| E::from_f64(f as f64)).collect();
            let mut row = vec![E::ZERO; h];
            kernels::vec_mat(&fe, m.params().values(m.ids.frame_w), d, h, &mut row);
            let bias = m.params().values(m.ids.frame_b);
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
            row
        })
    }

    /// Runs the prompt prefix through the decoder, returning the state and
    /// the logits row predicting the first completion token.
    pub fn prefill(&self, prompt: &Prompt) -> Result<(DecodeState<'_, E>, Vec<E>)> {
        self.check_prompt(prompt)?;
        let mut state = DecodeState {
            model: self,
            pos: 0,
            text_count: 0,
            caches: vec![
                LayerCache { k: Vec::new(), v: Vec::new() };
                self.config().layers
            ],
        };
        let mut logits = Vec::new();
        for (i, &tok) in Prompt::head_ids().iter().enumerate() {
            let row = self.token_row(tok, Segment::Head, i);
            logits = state.advance_row(row);
        }
        let d = prompt.frame_dim();
        for f in 0..prompt.n_frames() {
            let row = self.frame_row(&prompt.frames()[f * d..(f + 1) * d], f);
            logits = state.advance_row(row);
        }
        for (i, &tok) in Prompt::tail_ids().iter().enumerate() {
            let row = self.token_row(tok, Segment::Tail, i);
            logits = state.advance_row(row);
        }
        Ok((state, logits))
    }
}

impl<'m, E: Elem> DecodeState<'m, E> {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one transcript token, returning the logits row for the next
    /// position.
    pub fn advance_token(&mut self, tok: TokenId) -> Result<Vec<E>> {
        if tok as usize >= self.model.vocab().size() {
            return Err(contract(format!("token id {tok} outside vocabulary")));
        }
        if self.pos >= self.model.config().max_seq {
            return Err(contract(format!(
                "position {} exceeds max sequence {}",
                self.pos,
                self.model.config().max_seq
            )));
        }
        let row = self.model.token_row(tok, Segment::Text, self.text_count);
        self.text_count += 1;
        Ok(self.advance_row(row))
    }

    fn advance_row(&mut self, mut x: Vec<E>) -> Vec<E> {
        let model = self.model;
        let cfg = model.config();
        let h = cfg.hidden;
        let hd = cfg.head_dim();
        let scale = E::from_f64(cfg.attn_scale());
        let t = self.pos;
        let pv = |id: usize| model.params().values(id);

        for (block, cache) in model.ids.blocks.iter().zip(self.caches.iter_mut()) {
            let mut ln1 = vec![E::ZERO; h];
            kernels::layer_norm_row(&x, pv(block.ln1_g), pv(block.ln1_b), E::from_f64(LN_EPS), &mut ln1);
            let mut q = vec![E::ZERO; h];
            kernels::vec_mat(&ln1, pv(block.wq), h, h, &mut q);
            add_assign(&mut q, pv(block.bq));
            let mut k = vec![E::ZERO; h];
            kernels::vec_mat(&ln1, pv(block.wk), h, h, &mut k);
            add_assign(&mut k, pv(block.bk));
            let mut v = vec![E::ZERO; h];
            kernels::vec_mat(&ln1, pv(block.wv), h, h, &mut v);
            add_assign(&mut v, pv(block.bv));
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);

            let mut ctx = vec![E::ZERO; h];
            let valid = t + 1;
            let mut scores = vec![E::ZERO; valid];
            for a in 0..cfg.heads {
                let (s, e) = (a * hd, (a + 1) * hd);
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = kernels::dot(&q[s..e], &cache.k[j * h + s..j * h + e]) * scale;
                }
                kernels::softmax_prefix(&mut scores, valid);
                let ctx_head = &mut ctx[s..e];
                for (j, &p) in scores.iter().enumerate() {
                    kernels::axpy(p, &cache.v[j * h + s..j * h + e], ctx_head);
                }
            }
            let mut attn = vec![E::ZERO; h];
            kernels::vec_mat(&ctx, pv(block.wo), h, h, &mut attn);
            add_assign(&mut attn, pv(block.bo));
            add_assign(&mut x, &attn);

            let mut ln2 = vec![E::ZERO; h];
            kernels::layer_norm_row(&x, pv(block.ln2_g), pv(block.ln2_b), E::from_f64(LN_EPS), &mut ln2);
            let mut hid = vec![E::ZERO; cfg.ffn];
            kernels::vec_mat(&ln2, pv(block.w1), h, cfg.ffn, &mut hid);
            add_assign(&mut hid, pv(block.b1));
            for u in hid.iter_mut() {
                *u = u.fmax(E::ZERO);
            }
            let mut m = vec![E::ZERO; h];
            kernels::vec_mat(&hid, pv(block.w2), cfg.ffn, h, &mut m);
            add_assign(&mut m, pv(block.b2));
            add_assign(&mut x, &m);
        }

        let mut xf = vec![E::ZERO; h];
        kernels::layer_norm_row(&x, pv(model.ids.lnf_g), pv(model.ids.lnf_b), E::from_f64(LN_EPS), &mut xf);
        let vocab = model.vocab().size();
        let mut logits = vec![E::ZERO; vocab];
        kernels::vec_mat(&xf, pv(model.ids.out_w), h, vocab, &mut logits);
        add_assign(&mut logits, pv(model.ids.out_b));
        self.pos = t + 1;
        logits
    }
}

fn add_assign<E: Elem>(out: &mut [E], rhs: &[E]) {
    for (o, &r) in out.iter_mut().zip(rhs) {
        *o += r;
    }
}

/// Argmax over non-`<PAD>` entries, lowest index on ties. `<PAD>` never
/// carries sequence content, and scoring contracts reject it, so decoding
/// suppresses it outright.
fn argmax_suppressed<E: Elem>(row: &[E]) -> usize {
    let mut best = if Vocab::PAD == 0 { 1 } else { 0 };
    for (i, &v) in row.iter().enumerate() {
        if i as TokenId == Vocab::PAD {
            continue;
        }
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Temperature-shaped softmax over the logits with `<PAD>` suppressed.
/// Computed in f64 regardless of the model element type.
fn sampling_distribution<E: Elem>(logits: &[E], temperature: f64) -> Vec<f64> {
    let mut z: Vec<f64> = logits.iter().map(|&l| l.to_f64() / temperature).collect();
    z[Vocab::PAD as usize] = f64::NEG_INFINITY;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for p in z.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in z.iter_mut() {
        *p /= sum;
    }
    z
}

/// One ranked beam-search hypothesis.
#[derive(Debug, Clone)]
pub struct BeamHypothesis<E: Elem> {
    pub tokens: Vec<TokenId>,
    pub token_logps: Vec<E>,
    /// Sum of per-token log-probs (no length penalty).
    pub total_logp: f64,
}

impl<E: Elem> PolicyModel<E> {
    fn generation_budget(&self, prompt: &Prompt, max_len: usize) -> Result<usize> {
        if max_len < 1 {
            return Err(contract("max_len must be at least 1"));
        }
        let room = self.config().max_seq.saturating_sub(prompt.prefix_len());
        if room == 0 {
            return Err(contract("prompt leaves no room to generate"));
        }
        Ok(max_len.min(room))
    }

    /// Draws one completion. `temperature == 0` is greedy decoding; any
    /// positive temperature reshapes the sampling distribution while the
    /// returned log-probs are always the model's (temperature-free) scores
    /// of the chosen tokens.
    pub fn sample(
        &self,
        prompt: &Prompt,
        max_len: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<(Vec<TokenId>, Vec<E>)> {
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(contract(format!("invalid temperature {temperature}")));
        }
        let budget = self.generation_budget(prompt, max_len)?;
        let mut rng = SeededRng::new(seed);
        let (mut state, mut logits) = self.prefill(prompt)?;
        let vocab = self.vocab().size();
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let mut logp_row = vec![E::ZERO; vocab];
        for step in 0..budget {
            kernels::log_softmax_row(&logits, &mut logp_row);
            let tok = if temperature == 0.0 {
                argmax_suppressed(&logits) as TokenId
            } else {
                rng.categorical(&sampling_distribution(&logits, temperature)) as TokenId
            };
            tokens.push(tok);
            logps.push(logp_row[tok as usize]);
            if tok == Vocab::EOS || step + 1 == budget {
                break;
            }
            logits = state.advance_token(tok)?;
        }
        Ok((tokens, logps))
    }

    /// Greedy decoding (temperature-zero sampling).
    pub fn greedy(&self, prompt: &Prompt, max_len: usize) -> Result<Vec<TokenId>> {
        self.sample(prompt, max_len, 0.0, 0).map(|(t, _)| t)
    }

    /// Standard beam search over summed log-probs, no length penalty. Beams
    /// that emit `<EOS>` freeze; up to `beam_size` hypotheses come back
    /// sorted by score (ties broken by token sequence).
    pub fn beam_search(
        &self,
        prompt: &Prompt,
        beam_size: usize,
        max_len: usize,
    ) -> Result<Vec<BeamHypothesis<E>>> {
        if beam_size < 1 {
            return Err(contract("beam_size must be at least 1"));
        }
        let budget = self.generation_budget(prompt, max_len)?;
        let (state, logits) = self.prefill(prompt)?;

        struct Beam<'m, E: Elem> {
            state: DecodeState<'m, E>,
            logits: Vec<E>,
            tokens: Vec<TokenId>,
            logps: Vec<E>,
            total: f64,
        }
        let mut live = vec![Beam { state, logits, tokens: Vec::new(), logps: Vec::new(), total: 0.0 }];
        let mut done: Vec<BeamHypothesis<E>> = Vec::new();
        let vocab = self.vocab().size();
        let mut logp_row = vec![E::ZERO; vocab];

        for step in 0..budget {
            let mut candidates: Vec<(usize, TokenId, E, f64)> = Vec::with_capacity(live.len() * vocab);
            for (bi, b) in live.iter().enumerate() {
                kernels::log_softmax_row(&b.logits, &mut logp_row);
                for (tok, &lp) in logp_row.iter().enumerate() {
                    if tok as TokenId == Vocab::PAD {
                        continue;
                    }
                    candidates.push((bi, tok as TokenId, lp, b.total + lp.to_f64()));
                }
            }
            candidates.sort_by(|a, b| {
                b.3.partial_cmp(&a.3)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| {
                        let sa = (&live[a.0].tokens, a.1);
                        let sb = (&live[b.0].tokens, b.1);
                        sa.cmp(&sb)
                    })
            });
            candidates.truncate(beam_size);

            let last = step + 1 == budget;
            let mut next = Vec::with_capacity(candidates.len());
            for (bi, tok, lp, total) in candidates {
                let src = &live[bi];
                let mut tokens = src.tokens.clone();
                tokens.push(tok);
                let mut logps = src.logps.clone();
                logps.push(lp);
                if tok == Vocab::EOS || last {
                    done.push(BeamHypothesis { tokens, token_logps: logps, total_logp: total });
                } else {
                    let mut state = src.state.clone();
                    let logits = state.advance_token(tok)?;
                    next.push(Beam { state, logits, tokens, logps, total });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }

        done.sort_by(|a, b| {
            b.total_logp
                .partial_cmp(&a.total_logp)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        done.truncate(beam_size);
        Ok(done)
    }

    /// Per-token log-probabilities of `completion` under this model
    /// (no-grad; same values as `PolicyGraph::score_tensor`).
    pub fn score(&self, prompt: &Prompt, completion: &[TokenId]) -> Result<Vec<E>> {
        let graph = self.graph(false);
        Ok(graph.score_tensor(prompt, completion)?.data().to_vec())
    }
}
