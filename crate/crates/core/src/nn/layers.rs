use super::{Initializer, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, AttentionMask, AttentionOutput, Graph, ParamId, Real, Tensor, Var};

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init.fan_in(in_dim, out_dim));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, ps: &'p ParamSet<T>, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = ps.var(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, ps: &'p ParamSet<T>, x: Var) -> Var {
        let gamma = ps.var(g, self.gamma);
        let beta = ps.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// One-hidden-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(ps, init, &format!("{name}.hidden"), in_dim, hidden, true),
            out: Linear::new(ps, init, &format!("{name}.out"), hidden, out_dim, true),
        }
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, ps: &'p ParamSet<T>, x: Var) -> Var {
        let h = self.hidden.forward(g, ps, x);
        let h = g.gelu(h);
        self.out.forward(g, ps, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, init: &mut Initializer, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(ps, init, &format!("{name}.q"), d, d, true),
            k: Linear::new(ps, init, &format!("{name}.k"), d, d, true),
            v: Linear::new(ps, init, &format!("{name}.v"), d, d, true),
            o: Linear::new(ps, init, &format!("{name}.o"), d, d, true),
            n_heads,
        }
    }

    /// Returns the output projection and the per-head weights.
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        query: Var,
        memory: Var,
        mask: &AttentionMask,
    ) -> Result<(Var, AttentionOutput)> {
        let q = self.q.forward(g, ps, query);
        let k = self.k.forward(g, ps, memory);
        let v = self.v.forward(g, ps, memory);
        let att = multi_head_attention(g, q, k, v, self.n_heads, mask)?;
        let out = self.o.forward(g, ps, att.output);
        Ok((out, att))
    }
}

/// Memory and key mask handed to a decoder layer.
pub struct CrossInput<'m> {
    pub memory: Var,
    pub mask: Option<&'m AttentionMask>,
}

pub struct LayerOutput {
    pub hidden: Var,
    pub cross: Option<AttentionOutput>,
}

/// Post-norm transformer layer: self-attention, optional cross-attention,
/// position-wise feed-forward, each wrapped in residual + layer norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: Option<MultiHeadAttention>,
    pub ffn: Mlp,
    pub norm_self: LayerNorm,
    pub norm_cross: Option<LayerNorm>,
    pub norm_ffn: LayerNorm,
    pub dropout: f64,
    /// Reject cross-attention calls that carry no key mask.
    pub require_cross_mask: bool,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        d: usize,
        n_heads: usize,
        ffn_dim: usize,
        with_cross: bool,
        dropout: f64,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(ps, init, &format!("{name}.self"), d, n_heads),
            cross_attn: with_cross
                .then(|| MultiHeadAttention::new(ps, init, &format!("{name}.cross"), d, n_heads)),
            ffn: Mlp::new(ps, init, &format!("{name}.ffn"), d, ffn_dim, d),
            norm_self: LayerNorm::new(ps, &format!("{name}.norm_self"), d),
            norm_cross: with_cross.then(|| LayerNorm::new(ps, &format!("{name}.norm_cross"), d)),
            norm_ffn: LayerNorm::new(ps, &format!("{name}.norm_ffn"), d),
            dropout,
            require_cross_mask: false,
        }
    }

    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        x: Var,
        self_mask: &AttentionMask,
        cross: Option<CrossInput<'_>>,
    ) -> Result<LayerOutput> {
        let (sa, _) = self.self_attn.forward(g, ps, x, x, self_mask)?;
        let sa = g.dropout(sa, self.dropout);
        let h = g.add(x, sa);
        let mut h = self.norm_self.forward(g, ps, h);

        let mut cross_out = None;
        match (&self.cross_attn, cross) {
            (Some(attn), Some(ci)) => {
                let n_mem = g.value(ci.memory).rows();
                let n_q = g.value(h).rows();
                let full;
                let mask = match ci.mask {
                    Some(m) => m,
                    None if self.require_cross_mask => {
                        return Err(Error::Invalid(
                            "cross-attention memory supplied without a mask".into(),
                        ))
                    }
                    None => {
                        full = AttentionMask::all(n_q, n_mem);
                        &full
                    }
                };
                let (ca, att) = attn.forward(g, ps, h, ci.memory, mask)?;
                let ca = g.dropout(ca, self.dropout);
                let h2 = g.add(h, ca);
                h = self.norm_cross.as_ref().unwrap().forward(g, ps, h2);
                cross_out = Some(att);
            }
            (None, Some(_)) => {
                return Err(Error::Invalid(
                    "memory supplied to a layer without cross-attention".into(),
                ))
            }
            (Some(_), None) => {
                return Err(Error::Invalid("decoder layer needs a memory input".into()))
            }
            (None, None) => {}
        }

        let f = self.ffn.forward(g, ps, h);
        let f = g.dropout(f, self.dropout);
        let h2 = g.add(h, f);
        let hidden = self.norm_ffn.forward(g, ps, h2);
        Ok(LayerOutput {
            hidden,
            cross: cross_out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(with_cross: bool) -> (ParamSet, TransformerLayer) {
        let mut ps = ParamSet::new();
        let mut init = Initializer::new(3);
        let l = TransformerLayer::new(&mut ps, &mut init, "l", 4, 2, 8, with_cross, 0.0);
        (ps, l)
    }

    fn input(n: usize) -> Tensor<f32> {
        Tensor::new(vec![n, 4], (0..n * 4).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn encoder_layer_preserves_token_count() {
        let (ps, l) = layer(false);
        let mut g = Graph::new();
        let x = g.input(input(5));
        let out = l.forward(&mut g, &ps, x, &AttentionMask::all(5, 5), None).unwrap();
        assert_eq!(g.shape(out.hidden), &[5, 4]);
    }

    #[test]
    fn zero_ffn_reduces_to_normalised_attention_sublayer() {
        let (mut ps, l) = layer(false);
        for lin in [&l.ffn.hidden, &l.ffn.out] {
            *ps.get_mut(lin.w) = Tensor::zeros(ps.get(lin.w).shape());
            *ps.get_mut(lin.b.unwrap()) = Tensor::zeros(ps.get(lin.b.unwrap()).shape());
        }
        let mut g = Graph::new();
        let x = g.input(input(3));
        let mask = AttentionMask::all(3, 3);
        let out = l.forward(&mut g, &ps, x, &mask, None).unwrap();
        let (sa, _) = l.self_attn.forward(&mut g, &ps, x, x, &mask).unwrap();
        let h = g.add(x, sa);
        let sub = l.norm_self.forward(&mut g, &ps, h);
        // the zeroed FFN adds nothing before the final norm
        let expect = l.norm_ffn.forward(&mut g, &ps, sub);
        let diff = g.value(out.hidden).max_abs_diff(g.value(expect));
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn cross_attention_contract() {
        let (ps, l) = layer(true);
        let mut g = Graph::new();
        let x = g.input(input(2));
        let m = g.input(input(3));
        let mask = AttentionMask::all(2, 2);
        assert!(l.forward(&mut g, &ps, x, &mask, None).is_err());
        let out = l
            .forward(&mut g, &ps, x, &mask, Some(CrossInput { memory: m, mask: None }))
            .unwrap();
        assert_eq!(g.shape(out.hidden), &[2, 4]);
        let mut strict = l.clone();
        strict.require_cross_mask = true;
        assert!(strict
            .forward(&mut g, &ps, x, &mask, Some(CrossInput { memory: m, mask: None }))
            .is_err());

        let (ps2, enc) = layer(false);
        let mut g2 = Graph::new();
        let x2 = g2.input(input(2));
        let m2 = g2.input(input(3));
        assert!(enc
            .forward(&mut g2, &ps2, x2, &mask, Some(CrossInput { memory: m2, mask: None }))
            .is_err());
    }
}
