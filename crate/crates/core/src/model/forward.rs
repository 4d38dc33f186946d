//! Full-sequence forward pass on the autodiff graph.
//!
//! The decode module implements the same computation incrementally without
//! graph nodes; the two must stay bit-identical, which is why both are built
//! from the kernels in `tensor::kernels` and why the op order here is never
//! reshuffled.

use super::{contract, ModelError, PolicyModel, Prompt, Result, Segment, TokenId, Vocab};
use crate::tensor::{Elem, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// A model's parameters lifted into graph leaves, plus the ops to run the
/// policy on them. With `requires_grad` the leaves collect gradients for the
/// optimizer; without, this is the reference scoring path.
pub struct PolicyGraph<'m, E: Elem> {
    model: &'m PolicyModel<E>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Elem> PolicyModel<E> {
    pub fn graph(&self, requires_grad: bool) -> PolicyGraph<'_, E> {
        let tensors = (0..self.params().len())
            .map(|i| {
                Tensor::leaf(
                    self.params().values(i).to_vec(),
                    self.params().shape(i).to_vec(),
                    requires_grad,
                )
                .expect("stored parameter shapes are valid")
            })
            .collect();
        PolicyGraph { model: self, tensors }
    }
}

impl<'m, E: Elem> PolicyGraph<'m, E> {
    fn t(&self, id: usize) -> &Tensor<E> {
        &self.tensors[id]
    }

    pub fn model(&self) -> &'m PolicyModel<E> {
        self.model
    }

    /// Leaf tensors in parameter-store order.
    pub fn param_tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    /// Gradients per parameter in store order (zeros where a parameter was
    /// not reached).
    pub fn gradients(&self) -> Vec<Vec<E>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![E::ZERO; t.numel()]))
            .collect()
    }

    /// Logits `[prefix + |text|, vocab]` for the prompt followed by `text`.
    pub fn logits(&self, prompt: &Prompt, text: &[TokenId]) -> Result<Tensor<E>> {
        let cfg = self.model.config();
        self.model.check_prompt(prompt)?;
        let total = prompt.prefix_len() + text.len();
        if total > cfg.max_seq {
            return Err(contract(format!(
                "sequence of {total} positions exceeds max sequence {}",
                cfg.max_seq
            )));
        }
        let ids = &self.model.ids;

        let head: Vec<usize> = Prompt::head_ids().iter().map(|&t| t as usize).collect();
        let tail: Vec<usize> = Prompt::tail_ids().iter().map(|&t| t as usize).collect();
        let head_emb = Tensor::embedding(self.t(ids.tok_emb), &head)?;
        let frames: Vec<E> = prompt.frames().iter().map(|&f| E::from_f64(f as f64)).collect();
        let frames = Tensor::constant(frames, vec![prompt.n_frames(), prompt.frame_dim()])
            .map_err(ModelError::Tensor)?;
        let frame_emb = frames
            .matmul(self.t(ids.frame_w))?
            .add_bias(self.t(ids.frame_b))?;
        let tail_emb = Tensor::embedding(self.t(ids.tok_emb), &tail)?;
        let mut parts = vec![head_emb, frame_emb, tail_emb];
        if !text.is_empty() {
            let text_ids: Vec<usize> = text.iter().map(|&t| t as usize).collect();
            parts.push(Tensor::embedding(self.t(ids.tok_emb), &text_ids)?);
        }
        let emb = Tensor::concat_rows(&parts)?;
        let mut pos_ids = Vec::with_capacity(total);
        let mut seg_ids = Vec::with_capacity(total);
        let mut push_segment = |len: usize, seg: Segment| {
            for i in 0..len {
                pos_ids.push(i);
                seg_ids.push(seg as usize);
            }
        };
        push_segment(head.len(), Segment::Head);
        push_segment(prompt.n_frames(), Segment::Frames);
        push_segment(tail.len(), Segment::Tail);
        push_segment(text.len(), Segment::Text);
        let pos = Tensor::embedding(self.t(ids.pos_emb), &pos_ids)?;
        let seg = Tensor::embedding(self.t(ids.seg_emb), &seg_ids)?;
        let mut x = emb.add(&pos)?.add(&seg)?;

        for block in &ids.blocks {
            let ln1 = x.layer_norm(self.t(block.ln1_g), self.t(block.ln1_b), LN_EPS)?;
            let q = ln1.matmul(self.t(block.wq))?.add_bias(self.t(block.bq))?;
            let k = ln1.matmul(self.t(block.wk))?.add_bias(self.t(block.bk))?;
            let v = ln1.matmul(self.t(block.wv))?.add_bias(self.t(block.bv))?;
            let hd = cfg.head_dim();
            let mut ctx_heads = Vec::with_capacity(cfg.heads);
            for a in 0..cfg.heads {
                let (s, e) = (a * hd, (a + 1) * hd);
                let qa = q.slice_cols(s, e)?;
                let ka = k.slice_cols(s, e)?;
                let va = v.slice_cols(s, e)?;
                let scores = qa.matmul_nt(&ka)?.scale(cfg.attn_scale());
                let probs = scores.causal_softmax()?;
                ctx_heads.push(probs.matmul(&va)?);
            }
            let ctx = Tensor::concat_cols(&ctx_heads)?;
            let attn = ctx.matmul(self.t(block.wo))?.add_bias(self.t(block.bo))?;
            x = x.add(&attn)?;
            let ln2 = x.layer_norm(self.t(block.ln2_g), self.t(block.ln2_b), LN_EPS)?;
            let m = ln2
                .matmul(self.t(block.w1))?
                .add_bias(self.t(block.b1))?
                .relu()
                .matmul(self.t(block.w2))?
                .add_bias(self.t(block.b2))?;
            x = x.add(&m)?;
        }

        let xf = x.layer_norm(self.t(ids.lnf_g), self.t(ids.lnf_b), LN_EPS)?;
        Ok(xf.matmul(self.t(ids.out_w))?.add_bias(self.t(ids.out_b))?)
    }

    /// Per-token log-probabilities of `completion` given the prompt,
    /// differentiable through the policy parameters.
    pub fn score_tensor(&self, prompt: &Prompt, completion: &[TokenId]) -> Result<Tensor<E>> {
        self.model.check_completion(completion)?;
        let text = &completion[..completion.len() - 1];
        let logits = self.logits(prompt, text)?;
        let p = prompt.prefix_len();
        let rows = logits.slice_rows(p - 1, p + completion.len() - 1)?;
        let logp = rows.log_softmax_last();
        let ids: Vec<usize> = completion.iter().map(|&t| t as usize).collect();
        Ok(logp.gather_last(&ids)?)
    }

    /// Summed next-token NLL over the masked positions of a training prompt
    /// (the transcript tokens and the closing `<EOS>`), plus the token
    /// count.
    pub fn sft_example_nll(&self, prompt: &Prompt) -> Result<(Tensor<E>, usize)> {
        let transcript = prompt
            .transcript()
            .ok_or_else(|| contract("sft requires a training prompt with a transcript"))?;
        let logits = self.logits(prompt, transcript)?;
        let p = prompt.prefix_len();
        let t = transcript.len();
        let rows = logits.slice_rows(p - 1, p + t)?;
        let logp = rows.log_softmax_last();
        let mut targets: Vec<usize> = transcript.iter().map(|&x| x as usize).collect();
        targets.push(Vocab::EOS as usize);
        let nll = logp.gather_last(&targets)?.sum().neg();
        Ok((nll, t + 1))
    }
}
