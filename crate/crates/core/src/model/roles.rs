use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AlphaReduction, Encoder, ModelConfig, ObjectChannel, QuerySource, SampleInputs, Stage1};
use crate::data::{BoundingBox, FrameSchedule, Role};
use crate::error::{Error, Result};
use crate::nn::{CrossInput, Initializer, ParamSet, TransformerLayer};
use crate::tensor::{AttentionMask, Graph, ParamId, Real, Tensor, Var};

/// One `(event, role)` query slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RoleQuery {
    pub event: usize,
    pub role: Role,
}

/// Role-object decoder: role queries attend to each other and, through the
/// event mask, to the proposals of their own event.
#[derive(Clone, Debug)]
pub struct RoleDecoder {
    /// `11 x d` role embeddings.
    pub role_embed: ParamId,
    /// Event positional table added to queries; the encoder's table when shared.
    pub query_pe: ParamId,
    /// `|V| x d` verb embeddings, present for ground-truth-verb queries.
    pub verb_embed: Option<ParamId>,
    pub layers: Vec<TransformerLayer>,
    pub query_source: QuerySource,
    pub object_channel: ObjectChannel,
    pub alpha_reduction: AlphaReduction,
}

/// Decoder outputs: one role embedding `z` per query and the final-layer
/// cross-attention map over all proposals.
pub struct Stage2<T: Real> {
    pub z: Var,
    /// `queries x proposals`
    pub alpha: Tensor<T>,
    pub mask: AttentionMask,
    /// Per-head cross-attention weights of every layer.
    pub layer_weights: Vec<Vec<Var>>,
}

/// Highest-attention proposal for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub frame: usize,
    pub slot: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Queries for every `(event, role)` pair, ordered by event then role id.
pub fn build_role_queries(role_sets: &[BTreeSet<Role>]) -> Vec<RoleQuery> {
    role_sets
        .iter()
        .enumerate()
        .flat_map(|(event, roles)| roles.iter().map(move |&role| RoleQuery { event, role }))
        .collect()
}

/// Query `(i, k)` may attend proposal `p` iff `p`'s frame lies in event `i`.
pub fn build_event_mask(queries: &[RoleQuery], schedule: &FrameSchedule, proposal_frame: &[usize]) -> Result<AttentionMask> {
    for q in queries {
        match schedule.per_event_frames.get(q.event) {
            None => return Err(Error::Invalid(format!("query for unknown event {}", q.event))),
            Some(f) if f.is_empty() => return Err(Error::Invalid(format!("event {} has no frames", q.event))),
            _ => {}
        }
    }
    let mask = AttentionMask::from_fn(queries.len(), proposal_frame.len(), |q, p| {
        schedule.contains(queries[q].event, proposal_frame[p])
    });
    mask.check_rows()?;
    Ok(mask)
}

impl RoleDecoder {
    pub fn new(cfg: &ModelConfig, ps: &mut ParamSet, init: &mut Initializer, encoder: &Encoder) -> Self {
        let d = cfg.d_model;
        let role_embed = ps.add("roles.role_embed", init.normal(Role::COUNT, d, 0.02));
        let query_pe = if cfg.share_event_pe {
            encoder.event_pe
        } else {
            ps.add("roles.query_pe", init.normal(cfg.max_events, d, 0.02))
        };
        let verb_embed = (cfg.query_source == QuerySource::GtVerb)
            .then(|| ps.add("roles.verb_embed", init.normal(cfg.n_verbs, d, 0.02)));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut layer =
                    TransformerLayer::new(ps, init, &format!("roles.layer{l}"), d, cfg.n_heads, cfg.ffn_dim, true, cfg.dropout);
                layer.require_cross_mask = true;
                layer
            })
            .collect();
        Self {
            role_embed,
            query_pe,
            verb_embed,
            layers,
            query_source: cfg.query_source,
            object_channel: cfg.object_channel,
            alpha_reduction: cfg.alpha_reduction,
        }
    }

    /// `q_ik = r_k + c_i + PE_i` where `c_i` is `e'_i`, or the embedding of
    /// event `i`'s ground-truth verb in the verb-query variant.
    pub fn query_vectors<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        queries: &[RoleQuery],
        events: Var,
        gt_verbs: Option<&[usize]>,
    ) -> Result<Var> {
        let ev_idx: Vec<usize> = queries.iter().map(|q| q.event).collect();
        let role_idx: Vec<usize> = queries.iter().map(|q| q.role.id()).collect();
        let roles = ps.var(g, self.role_embed);
        let r = g.gather(roles, &role_idx);
        let context = match (self.query_source, self.verb_embed) {
            (QuerySource::Event, _) => g.gather(events, &ev_idx),
            (QuerySource::GtVerb, Some(table)) => {
                let verbs = gt_verbs.ok_or_else(|| Error::Invalid("verb-query decoder needs ground-truth verbs".into()))?;
                let idx = ev_idx
                    .iter()
                    .map(|&i| verbs.get(i).copied().ok_or_else(|| Error::Invalid(format!("no verb for event {i}"))))
                    .collect::<Result<Vec<_>>>()?;
                let t = ps.var(g, table);
                g.gather(t, &idx)
            }
            (QuerySource::GtVerb, None) => return Err(Error::Invalid("verb embedding table missing".into())),
        };
        let pe = ps.var(g, self.query_pe);
        let pe = g.gather(pe, &ev_idx);
        let q = g.add(r, context);
        Ok(g.add(q, pe))
    }

    /// Memory the decoder attends to: `o'`, or per-proposal copies of the
    /// earliest containing event's `e'` in the degraded variant.
    pub fn memory<T: Real>(&self, g: &mut Graph<'_, T>, s1: &Stage1, x: &SampleInputs) -> Var {
        match (self.object_channel, s1.objects) {
            (ObjectChannel::Objects, Some(o)) => o,
            _ => g.gather(s1.events, &x.proposal_event),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        ps: &'p ParamSet<T>,
        x: &SampleInputs,
        s1: &Stage1,
        queries: &[RoleQuery],
        gt_verbs: Option<&[usize]>,
    ) -> Result<Stage2<T>> {
        if queries.is_empty() {
            return Err(Error::Invalid("no role queries".into()));
        }
        let mask = build_event_mask(queries, &x.schedule, &x.proposal_frame)?;
        let q = self.query_vectors(g, ps, queries, s1.events, gt_verbs)?;
        let memory = self.memory(g, s1, x);
        let self_mask = AttentionMask::all(queries.len(), queries.len());
        let mut h = q;
        let mut last = None;
        let mut layer_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(
                g,
                ps,
                h,
                &self_mask,
                Some(CrossInput {
                    memory,
                    mask: Some(&mask),
                }),
            )?;
            h = out.hidden;
            if let Some(c) = &out.cross {
                layer_weights.push(c.head_weights.clone());
            }
            last = out.cross;
        }
        let att = last.ok_or_else(|| Error::Invalid("role decoder has no layers".into()))?;
        let alpha = match self.alpha_reduction {
            AlphaReduction::Mean => att.mean_weights(g),
            AlphaReduction::Max => {
                let mut acc = g.value(att.head_weights[0]).clone();
                for &hw in &att.head_weights[1..] {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.value(hw).data()) {
                        *a = a.max(b);
                    }
                }
                acc
            }
        };
        Ok(Stage2 {
            z: h,
            alpha,
            mask,
            layer_weights,
        })
    }
}

/// Highest-α proposal among those the query may attend; ties go to the
/// smallest `(frame, slot)`.
pub fn extract_grounding<T: Real>(alpha_row: &[T], mask_row: &[bool], x: &SampleInputs) -> Option<GroundingPrediction> {
    let mut best: Option<usize> = None;
    for p in 0..alpha_row.len() {
        if !mask_row[p] {
            continue;
        }
        best = match best {
            None => Some(p),
            Some(b) => {
                let key = |i: usize| (x.proposal_frame[i], x.proposal_slot[i]);
                if alpha_row[p] > alpha_row[b] || (alpha_row[p] == alpha_row[b] && key(p) < key(b)) {
                    Some(p)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.map(|p| GroundingPrediction {
        frame: x.proposal_frame[p],
        slot: x.proposal_slot[p],
        bbox: x.boxes[p],
        score: alpha_row[p].to_f64_lossy(),
    })
}
