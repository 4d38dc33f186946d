//! Word-level Levenshtein alignment.
//!
//! Unit-cost dynamic programming over token-id sequences, producing the
//! substitution/deletion/insertion breakdown and the alignment path. Among
//! minimal alignments, ties are broken preferring substitution over
//! insertion over deletion so error breakdowns are reproducible.

/// One edit step of an alignment path. Positions index into the reference
/// and hypothesis sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { ref_pos: usize, hyp_pos: usize },
    Substitute { ref_pos: usize, hyp_pos: usize },
    Insert { hyp_pos: usize },
    Delete { ref_pos: usize },
}

/// Alignment counts for one (reference, hypothesis) pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignmentStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference length N.
    pub ref_len: usize,
    pub path: Vec<EditOp>,
}

impl AlignmentStats {
    pub fn total_errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Pools counts from another alignment into this one (path dropped).
    pub fn absorb(&mut self, other: &AlignmentStats) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_len += other.ref_len;
        self.path.clear();
    }
}

/// Aligns `hyp` against `reference` with unit edit costs.
///
/// Among minimal alignments the diagonal-step count (matches plus
/// substitutions) is maximized. Since every minimal alignment satisfies
/// `Ins - Del = |hyp| - |ref|`, that pins the whole breakdown, keeps it
/// deterministic, and makes the counts mirror under swapping the arguments.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> AlignmentStats {
    let n = reference.len();
    let m = hyp.len();
    let width = m + 1;
    let mut dist = vec![0usize; (n + 1) * width];
    // secondary objective: diagonal steps on a minimal path (maximized)
    let mut diag_steps = vec![0usize; (n + 1) * width];
    // 0 = diag (match/sub), 1 = insert, 2 = delete
    let mut back = vec![0u8; (n + 1) * width];
    for j in 0..=m {
        dist[j] = j;
        back[j] = 1;
    }
    for i in 1..=n {
        dist[i * width] = i;
        back[i * width] = 2;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hyp[j - 1]);
            // (cost, diag_steps, backpointer); preference order on exact
            // ties of both objectives: substitution, insertion, deletion
            let candidates = [
                (
                    dist[(i - 1) * width + (j - 1)] + sub_cost,
                    diag_steps[(i - 1) * width + (j - 1)] + 1,
                    0u8,
                ),
                (dist[i * width + (j - 1)] + 1, diag_steps[i * width + (j - 1)], 1u8),
                (dist[(i - 1) * width + j] + 1, diag_steps[(i - 1) * width + j], 2u8),
            ];
            let mut best = candidates[0];
            for c in &candidates[1..] {
                if c.0 < best.0 || (c.0 == best.0 && c.1 > best.1) {
                    best = *c;
                }
            }
            dist[i * width + j] = best.0;
            diag_steps[i * width + j] = best.1;
            back[i * width + j] = best.2;
        }
    }

    let mut stats = AlignmentStats {
        ref_len: n,
        ..Default::default()
    };
    let mut path = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match back[i * width + j] {
            0 => {
                i -= 1;
                j -= 1;
                if reference[i] == hyp[j] {
                    path.push(EditOp::Match { ref_pos: i, hyp_pos: j });
                } else {
                    stats.substitutions += 1;
                    path.push(EditOp::Substitute { ref_pos: i, hyp_pos: j });
                }
            }
            1 => {
                j -= 1;
                stats.insertions += 1;
                path.push(EditOp::Insert { hyp_pos: j });
            }
            _ => {
                i -= 1;
                stats.deletions += 1;
                path.push(EditOp::Delete { ref_pos: i });
            }
        }
    }
    path.reverse();
    stats.path = path;
    debug_assert_eq!(stats.total_errors(), dist[n * width + m]);
    stats
}

/// Word error rate: `(Sub + Del + Ins) / N`.
///
/// Empty-reference convention: the denominator is clamped to 1, so an empty
/// reference with a non-empty hypothesis scores `Ins` (hallucinated output
/// is still penalized). Both empty scores 0. WER may exceed 1.
pub fn wer(stats: &AlignmentStats) -> f64 {
    if stats.ref_len == 0 && stats.total_errors() == 0 {
        return 0.0;
    }
    stats.total_errors() as f64 / (stats.ref_len.max(1)) as f64
}

/// Corpus-level WER: pooled errors over pooled reference length, not the
/// mean of per-utterance rates.
pub fn corpus_wer<'a, I>(per_utterance: I) -> f64
where
    I: IntoIterator<Item = &'a AlignmentStats>,
{
    let mut pooled = AlignmentStats::default();
    for s in per_utterance {
        pooled.absorb(s);
    }
    wer(&pooled)
}
