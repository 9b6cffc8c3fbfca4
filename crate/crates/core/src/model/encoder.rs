use std::collections::BTreeSet;

use super::{ModelConfig, ObjectChannel, SampleInputs};
use crate::data::Role;
use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear, Mlp, ParamSet, TransformerLayer};
use crate::tensor::{sigmoid, AttentionMask, Graph, ParamId, Real, Var};

/// Video-object encoder with the verb and role classification heads.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub event_proj: Linear,
    pub object_proj: Linear,
    /// `max_events x d` event positional table.
    pub event_pe: ParamId,
    /// Box geometry `(cx, cy, w, h, area)` to `d`.
    pub box_pe: Linear,
    pub layers: Vec<TransformerLayer>,
    pub verb_head: Mlp,
    pub role_head: Mlp,
    pub object_channel: ObjectChannel,
    pub max_events: usize,
}

/// Encoder outputs for one video.
pub struct Stage1 {
    /// Contextualised proposals `o'`; absent when objects are not encoded.
    pub objects: Option<Var>,
    /// Contextualised events `e'`.
    pub events: Var,
    pub verb_logits: Var,
    pub role_logits: Var,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, ps: &mut ParamSet, init: &mut Initializer) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                TransformerLayer::new(ps, init, &format!("enc.layer{l}"), d, cfg.n_heads, cfg.ffn_dim, false, cfg.dropout)
            })
            .collect();
        Self {
            event_proj: Linear::new(ps, init, "enc.event_proj", cfg.d_vid, d, false),
            object_proj: Linear::new(ps, init, "enc.object_proj", cfg.d_obj, d, false),
            event_pe: ps.add("enc.event_pe", init.normal(cfg.max_events, d, 0.02)),
            box_pe: Linear::new(ps, init, "enc.box_pe", 5, d, true),
            layers,
            verb_head: Mlp::new(ps, init, "enc.verb_mlp", d, cfg.verb_hidden, cfg.n_verbs),
            role_head: Mlp::new(ps, init, "enc.role_mlp", d, cfg.role_hidden, Role::COUNT),
            object_channel: cfg.object_channel,
            max_events: cfg.max_events,
        }
    }

    fn check_inputs(&self, x: &SampleInputs) -> Result<()> {
        let e = x.num_events();
        if e == 0 || e > self.max_events {
            return Err(Error::Shape(format!("{e} events, model supports 1..={}", self.max_events)));
        }
        if x.event_features.cols() != self.event_proj.in_dim {
            return Err(Error::Shape(format!(
                "event features have {} dims, model expects {}",
                x.event_features.cols(),
                self.event_proj.in_dim
            )));
        }
        if self.object_channel == ObjectChannel::Objects && x.object_features.cols() != self.object_proj.in_dim {
            return Err(Error::Shape(format!(
                "object features have {} dims, model expects {}",
                x.object_features.cols(),
                self.object_proj.in_dim
            )));
        }
        Ok(())
    }

    /// Input token sequence: object tokens (unless disabled) followed by event tokens.
    pub fn embed_tokens<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        x: &SampleInputs,
    ) -> Result<Var> {
        self.check_inputs(x)?;
        let pe = ps.var(g, self.event_pe);
        let ev_in = g.input(x.event_features.cast());
        let ev = self.event_proj.forward(g, ps, ev_in);
        let ev_idx: Vec<usize> = (0..x.num_events()).collect();
        let ev_pe = g.gather(pe, &ev_idx);
        let events = g.add(ev, ev_pe);
        if self.object_channel == ObjectChannel::EventCopies {
            return Ok(events);
        }
        let obj_in = g.input(x.object_features.cast());
        let obj = self.object_proj.forward(g, ps, obj_in);
        let obj_pe = g.gather(pe, &x.proposal_event);
        let geo = g.input(x.box_features.cast());
        let box_pe = self.box_pe.forward(g, ps, geo);
        let objects = g.add(obj, obj_pe);
        let objects = g.add(objects, box_pe);
        Ok(g.concat_rows(&[objects, events]))
    }

    /// Unmasked self-attention stack; splits the result back into objects and events.
    pub fn encode<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        tokens: Var,
        n_objects: usize,
    ) -> Result<(Option<Var>, Var)> {
        let n = g.value(tokens).rows();
        let mask = AttentionMask::all(n, n);
        let mut h = tokens;
        for layer in &self.layers {
            h = layer.forward(g, ps, h, &mask, None)?.hidden;
        }
        if n_objects == 0 {
            return Ok((None, h));
        }
        let objects = g.slice_rows(h, 0, n_objects);
        let events = g.slice_rows(h, n_objects, n - n_objects);
        Ok((Some(objects), events))
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, ps: &'p ParamSet<T>, x: &SampleInputs) -> Result<Stage1> {
        let tokens = self.embed_tokens(g, ps, x)?;
        let n_objects = match self.object_channel {
            ObjectChannel::Objects => x.num_proposals(),
            ObjectChannel::EventCopies => 0,
        };
        let (objects, events) = self.encode(g, ps, tokens, n_objects)?;
        let verb_logits = self.verb_head.forward(g, ps, events);
        let role_logits = self.role_head.forward(g, ps, events);
        Ok(Stage1 {
            objects,
            events,
            verb_logits,
            role_logits,
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending; lower indices first on ties.
pub fn top_k<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-role sigmoid probabilities of one event's role logits.
pub fn role_probabilities<T: Real>(logits: &[T]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z.to_f64_lossy())).collect()
}

/// Roles whose probability strictly exceeds `theta`. May be empty.
pub fn role_set<T: Real>(logits: &[T], theta: f64) -> BTreeSet<Role> {
    role_probabilities(logits)
        .into_iter()
        .enumerate()
        .filter(|&(_, p)| p > theta)
        .map(|(i, _)| Role::from_id(i).expect("role head has one logit per role"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{inputs, tiny_config};
    use super::super::Model;
    use super::*;
    use crate::tensor::Tensor;

    fn run(model: &Model, x: &SampleInputs) -> (Tensor, Tensor, Tensor) {
        let mut g = Graph::new();
        let s1 = model.net.encoder.forward(&mut g, &model.params, x).unwrap();
        (
            g.value(s1.objects.unwrap()).clone(),
            g.value(s1.events).clone(),
            g.value(s1.verb_logits).clone(),
        )
    }

    #[test]
    fn token_count_is_objects_plus_events() {
        let cfg = ModelConfig {
            d_vid: 7,
            d_obj: 6,
            ..tiny_config()
        };
        let model = Model::new(cfg, 1).unwrap();
        let x = inputs(3, 5, 3, 15, 7, 6);
        assert_eq!(x.num_proposals(), 165);
        let mut g = Graph::new();
        let t = model.net.encoder.embed_tokens(&mut g, &model.params, &x).unwrap();
        assert_eq!(g.value(t).shape(), &[170, 8]);
    }

    #[test]
    fn zero_feature_token_is_sum_of_position_terms() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let mut x = inputs(4, 2, 3, 2, 7, 6);
        x.object_features.data_mut().fill(0.0);
        x.box_features.data_mut().fill(0.0);
        let mut g = Graph::new();
        let t = model.net.encoder.embed_tokens(&mut g, &model.params, &x).unwrap();
        let enc = &model.net.encoder;
        let pe = model.params.get(enc.event_pe);
        let bias = model.params.get(enc.box_pe.b.unwrap());
        for (j, v) in g.value(t).row(0).iter().enumerate() {
            assert_eq!(*v, pe.get(0, j) + bias.data()[j]);
        }
    }

    #[test]
    fn identical_proposals_in_different_events_differ_by_pe() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let mut x = inputs(5, 3, 3, 2, 7, 6);
        // frame 1 is in event 0, frame 3 in event 1
        let (a, b) = (2, 6);
        assert_eq!((x.proposal_event[a], x.proposal_event[b]), (0, 1));
        let feat = x.object_features.row(a).to_vec();
        x.object_features.row_mut(b).copy_from_slice(&feat);
        let geo = x.box_features.row(a).to_vec();
        x.box_features.row_mut(b).copy_from_slice(&geo);
        let mut g = Graph::new();
        let t = model.net.encoder.embed_tokens(&mut g, &model.params, &x).unwrap();
        let pe = model.params.get(model.net.encoder.event_pe);
        for j in 0..8 {
            let diff = g.value(t).get(b, j) - g.value(t).get(a, j);
            assert!((diff - (pe.get(1, j) - pe.get(0, j))).abs() < 1e-6);
        }
    }

    #[test]
    fn border_proposals_take_the_earlier_event_pe() {
        let x = inputs(6, 3, 3, 2, 7, 6);
        // frame 2 is shared by events 0 and 1
        assert_eq!(x.proposal_event[4], 0);
        assert_eq!(x.proposal_event[5], 0);
    }

    #[test]
    fn object_permutation_is_equivariant() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let x = inputs(7, 2, 3, 3, 7, 6);
        let n = x.num_proposals();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut y = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            y.object_features.row_mut(dst).copy_from_slice(x.object_features.row(src));
            y.box_features.row_mut(dst).copy_from_slice(x.box_features.row(src));
            y.proposal_event[dst] = x.proposal_event[src];
        }
        let (oa, ea, _) = run(&model, &x);
        let (ob, eb, _) = run(&model, &y);
        assert!(ea.max_abs_diff(&eb) < 1e-6);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((ob.get(dst, j) - oa.get(src, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn verb_logits_depend_on_each_object() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let x = inputs(8, 2, 3, 2, 7, 6);
        let (_, _, base) = run(&model, &x);
        for p in 0..x.num_proposals() {
            let mut y = x.clone();
            y.object_features.row_mut(p)[0] += 0.5;
            let (_, _, v) = run(&model, &y);
            assert!(v.max_abs_diff(&base) > 0.0, "proposal {p} has no influence");
        }
    }

    #[test]
    fn encode_is_pure() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let x = inputs(9, 3, 3, 2, 7, 6);
        let a = run(&model, &x);
        let b = run(&model, &x);
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig {
            n_verbs: 20,
            ..tiny_config()
        };
        let model = Model::new(cfg, 7).unwrap();
        let x = inputs(10, 5, 3, 2, 7, 6);
        let mut g = Graph::new();
        let s1 = model.net.encoder.forward(&mut g, &model.params, &x).unwrap();
        assert_eq!(g.value(s1.verb_logits).shape(), &[5, 20]);
        assert_eq!(g.value(s1.role_logits).shape(), &[5, 11]);
    }

    #[test]
    fn zeroed_verb_head_ties_to_lowest_id() {
        let mut model = Model::new(tiny_config(), 8).unwrap();
        let head = model.net.encoder.verb_head.clone();
        model.params.get_mut(head.out.w).data_mut().fill(0.0);
        model.params.get_mut(head.out.b.unwrap()).data_mut().fill(0.25);
        let x = inputs(11, 2, 3, 2, 7, 6);
        let mut g = Graph::new();
        let s1 = model.net.encoder.forward(&mut g, &model.params, &x).unwrap();
        let logits = g.value(s1.verb_logits);
        assert!(logits.data().iter().all(|&v| v == 0.25));
        assert_eq!(argmax(logits.row(0)), 0);
    }

    #[test]
    fn role_threshold_is_strict() {
        assert!(role_set(&[0.0f32; 11], 0.5).is_empty());
        let mut z = [0.0f32; 11];
        z[3] = 10.0;
        let p = role_probabilities(&z);
        assert!((p[3] - 0.9999546).abs() < 1e-6);
        assert_eq!(role_set(&z, 0.5), [Role::from_id(3).unwrap()].into_iter().collect());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[1.0f32, 3.0, 3.0, 0.0], 3), vec![1, 2, 0]);
        assert_eq!(argmax(&[2.0f32, 2.0]), 0);
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let model = Model::new(tiny_config(), 9).unwrap();
        let x = inputs(12, 2, 3, 2, 5, 6);
        let mut g = Graph::<f32>::new();
        assert!(matches!(model.net.encoder.forward(&mut g, &model.params, &x), Err(Error::Shape(_))));
    }
}
