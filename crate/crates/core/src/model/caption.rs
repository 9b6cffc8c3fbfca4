use super::encoder::argmax;
use super::ModelConfig;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{CrossInput, Initializer, Linear, ParamSet, TransformerLayer};
use crate::tensor::{AttentionMask, Graph, ParamId, Real, Tensor, Var};

/// Autoregressive caption decoder whose only context is one role embedding.
#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub token_embed: ParamId,
    /// `(max_len + 2) x d` learned positions.
    pub pos_embed: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
    pub max_len: usize,
}

/// Teacher-forcing sequences, one per role embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptionBatch {
    /// `BOS` followed by the reference tokens.
    pub inputs: Vec<Vec<usize>>,
    /// The reference tokens followed by `EOS`.
    pub targets: Vec<Vec<usize>>,
    /// References that were cut to `max_len`.
    pub truncated: usize,
}

impl CaptionBatch {
    pub fn new(references: &[Vec<u32>], max_len: usize) -> Self {
        let mut batch = Self::default();
        for r in references {
            let kept = &r[..r.len().min(max_len)];
            if kept.len() < r.len() {
                batch.truncated += 1;
            }
            let toks: Vec<usize> = kept.iter().map(|&t| t as usize).collect();
            let mut input = vec![BOS as usize];
            input.extend_from_slice(&toks);
            let mut target = toks;
            target.push(EOS as usize);
            batch.inputs.push(input);
            batch.targets.push(target);
        }
        batch
    }

    pub fn flat_targets(&self) -> Vec<usize> {
        self.targets.iter().flatten().copied().collect()
    }

    /// Per-token weights `1 / len` so each sequence contributes its mean CE.
    pub fn mean_weights<T: Real>(&self) -> Vec<T> {
        self.targets
            .iter()
            .flat_map(|t| {
                let w = T::one() / T::from_usize(t.len()).unwrap();
                std::iter::repeat_n(w, t.len())
            })
            .collect()
    }
}

/// Block-diagonal causal mask over concatenated sequences, and the mask tying
/// every position to its own sequence's memory row.
fn packed_masks(lens: &[usize]) -> (AttentionMask, AttentionMask) {
    let owner: Vec<usize> = lens.iter().enumerate().flat_map(|(s, &l)| std::iter::repeat_n(s, l)).collect();
    let start: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &l| {
            let s = *acc;
            *acc += l;
            Some(s)
        })
        .collect();
    let n = owner.len();
    let self_mask = AttentionMask::from_fn(n, n, |q, k| owner[q] == owner[k] && k <= q && k >= start[owner[q]]);
    let cross_mask = AttentionMask::from_fn(n, lens.len(), |q, m| owner[q] == m);
    (self_mask, cross_mask)
}

impl CaptionDecoder {
    pub fn new(cfg: &ModelConfig, ps: &mut ParamSet, init: &mut Initializer) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|l| TransformerLayer::new(ps, init, &format!("cap.layer{l}"), d, cfg.n_heads, cfg.ffn_dim, true, cfg.dropout))
            .collect();
        Self {
            token_embed: ps.add("cap.token_embed", init.normal(cfg.vocab_size, d, 0.02)),
            pos_embed: ps.add("cap.pos_embed", init.normal(cfg.max_caption_len + 2, d, 0.02)),
            layers,
            head: Linear::new(ps, init, "cap.head", d, cfg.vocab_size, true),
            max_len: cfg.max_caption_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.head.out_dim
    }

    /// Logits for every position of every sequence, concatenated in order.
    /// Sequence `s` is conditioned on row `s` of `z`.
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        z: Var,
        seqs: &[Vec<usize>],
    ) -> Result<Var> {
        if seqs.len() != g.value(z).rows() {
            return Err(Error::Shape(format!("{} sequences for {} role embeddings", seqs.len(), g.value(z).rows())));
        }
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        if lens.iter().any(|&l| l == 0 || l > self.max_len + 2) {
            return Err(Error::Shape(format!("caption lengths {lens:?} outside 1..={}", self.max_len + 2)));
        }
        let tokens: Vec<usize> = seqs.iter().flatten().copied().collect();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", self.vocab_size())));
        }
        let positions: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        let emb = ps.var(g, self.token_embed);
        let x = g.gather(emb, &tokens);
        let pos = ps.var(g, self.pos_embed);
        let p = g.gather(pos, &positions);
        let mut h = g.add(x, p);
        let (self_mask, cross_mask) = packed_masks(&lens);
        for layer in &self.layers {
            h = layer
                .forward(
                    g,
                    ps,
                    h,
                    &self_mask,
                    Some(CrossInput {
                        memory: z,
                        mask: Some(&cross_mask),
                    }),
                )?
                .hidden;
        }
        Ok(self.head.forward(g, ps, h))
    }

    /// Greedy decoding for every row of `z` in parallel. Each caption starts
    /// after `BOS` and stops at `EOS` (excluded) or after `max_len` tokens.
    pub fn generate<T: Real>(&self, ps: &ParamSet<T>, z: &Tensor<T>, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let max_len = max_len.min(self.max_len);
        let n = z.rows();
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let seqs: Vec<Vec<usize>> = active
                .iter()
                .map(|&s| std::iter::once(BOS as usize).chain(out[s].iter().map(|&t| t as usize)).collect())
                .collect();
            let mut zrows = Vec::with_capacity(active.len() * z.cols());
            for &s in &active {
                zrows.extend_from_slice(z.row(s));
            }
            let mut g = Graph::new();
            let zv = g.input(Tensor::new(vec![active.len(), z.cols()], zrows)?);
            let logits = self.forward(&mut g, ps, zv, &seqs)?;
            let logits = g.value(logits);
            let mut next_active = Vec::with_capacity(active.len());
            let mut row = 0;
            for (&s, seq) in active.iter().zip(&seqs) {
                row += seq.len();
                let tok = argmax(logits.row(row - 1)) as u32;
                if tok != EOS {
                    out[s].push(tok);
                    next_active.push(s);
                }
            }
            active = next_active;
        }
        Ok(out)
    }
}
