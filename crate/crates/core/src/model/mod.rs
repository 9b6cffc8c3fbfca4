//! The three-stage network: a video-object encoder with verb and role heads,
//! a role-object decoder with event-aware cross-attention, and a caption
//! decoder conditioned on each role embedding.

mod caption;
mod encoder;
mod roles;

use serde::{Deserialize, Serialize};

pub use caption::{CaptionBatch, CaptionDecoder};
pub use encoder::{argmax, role_probabilities, role_set, top_k, Encoder, Stage1};
pub use roles::{
    build_event_mask, build_role_queries, extract_grounding, GroundingPrediction, RoleDecoder, RoleQuery, Stage2,
};

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{BoundingBox, FrameSchedule, VerbLexicon, VideoSample, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{read_checkpoint, write_checkpoint, Checkpoint, Initializer, ParamSet};
use crate::tensor::Tensor;

/// What the role decoder attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectChannel {
    /// Contextualised object proposals.
    Objects,
    /// Degraded variant: objects are never encoded and every proposal slot
    /// holds a copy of its event's embedding.
    EventCopies,
}

/// Which vector is added to the role embedding when forming a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySource {
    /// Contextualised event embedding.
    Event,
    /// Learned embedding of the ground-truth verb.
    GtVerb,
}

/// How per-head cross-attention maps are reduced before grounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaReduction {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub verb_hidden: usize,
    pub role_hidden: usize,
    pub n_verbs: usize,
    pub vocab_size: usize,
    pub d_vid: usize,
    pub d_obj: usize,
    pub max_events: usize,
    pub max_caption_len: usize,
    pub share_event_pe: bool,
    pub object_channel: ObjectChannel,
    pub query_source: QuerySource,
    pub alpha_reduction: AlphaReduction,
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig, n_verbs: usize, vocab_size: usize, d_vid: usize, d_obj: usize) -> Self {
        Self {
            d_model: run.d_model,
            n_heads: run.n_heads,
            n_layers: run.n_layers,
            ffn_dim: 4 * run.d_model,
            dropout: run.dropout,
            verb_hidden: 2048,
            role_hidden: 1024,
            n_verbs,
            vocab_size,
            d_vid,
            d_obj,
            max_events: 5,
            max_caption_len: run.max_caption_len,
            share_event_pe: true,
            object_channel: ObjectChannel::Objects,
            query_source: QuerySource::Event,
            alpha_reduction: AlphaReduction::Mean,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_verbs == 0 || self.vocab_size < 5 {
            return Err(Error::Invalid("model needs verbs and a non-trivial vocabulary".into()));
        }
        Ok(())
    }
}

/// Parameter layout of the whole network; holds ids only, no values.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub roles: RoleDecoder,
    pub captions: CaptionDecoder,
}

/// Network layout plus its float32 parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut ps = ParamSet::new();
        let mut init = Initializer::new(seed);
        let encoder = Encoder::new(&cfg, &mut ps, &mut init);
        let roles = RoleDecoder::new(&cfg, &mut ps, &mut init, &encoder);
        let captions = CaptionDecoder::new(&cfg, &mut ps, &mut init);
        Ok(Self {
            net: Network {
                cfg,
                encoder,
                roles,
                captions,
            },
            params: ps,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Parameters as named tensors, in layout order.
    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Rebuilds a model from a checkpoint carrying `model_config` in its metadata.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ckpt.meta["model_config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        let named = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .cloned()
            .collect();
        model.params.load_from(named)?;
        Ok(model)
    }
}

/// A model together with everything needed to run it on new videos.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub lexicon: VerbLexicon,
    pub run: RunConfig,
}

impl TrainedModel {
    /// Checkpoint holding the parameters, `extra` tensors after them, and
    /// metadata merged with `extra_meta`.
    pub fn to_checkpoint(&self, extra: Vec<(String, Tensor<f32>)>, extra_meta: serde_json::Value) -> Checkpoint {
        let mut meta = serde_json::json!({
            "model_config": self.model.cfg(),
            "vocab": self.vocab,
            "lexicon": self.lexicon,
            "run_config": self.run,
        });
        if let (Some(m), serde_json::Value::Object(x)) = (meta.as_object_mut(), extra_meta) {
            m.extend(x);
        }
        let mut tensors = self.model.named_params();
        tensors.extend(extra);
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{k}`")))
        };
        let parse_err = |k: &str, e: serde_json::Error| Error::Format(format!("checkpoint `{k}`: {e}"));
        Ok(Self {
            model: Model::from_checkpoint(ckpt)?,
            vocab: serde_json::from_value(field("vocab")?).map_err(|e| parse_err("vocab", e))?,
            lexicon: serde_json::from_value(field("lexicon")?).map_err(|e| parse_err("lexicon", e))?,
            run: serde_json::from_value(field("run_config")?).map_err(|e| parse_err("run_config", e))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(Vec::new(), serde_json::Value::Null))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Per-video tensors the network consumes.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    pub event_features: Tensor<f32>,
    pub object_features: Tensor<f32>,
    /// `N x 5` normalised box geometry.
    pub box_features: Tensor<f32>,
    pub boxes: Vec<BoundingBox>,
    /// Frame of each proposal.
    pub proposal_frame: Vec<usize>,
    pub proposal_slot: Vec<usize>,
    /// Earliest event containing each proposal's frame.
    pub proposal_event: Vec<usize>,
    pub schedule: FrameSchedule,
}

impl SampleInputs {
    pub fn from_sample(s: &VideoSample) -> Result<Self> {
        let mut geo = Vec::with_capacity(s.proposals.len() * 5);
        let mut proposal_event = Vec::with_capacity(s.proposals.len());
        for p in &s.proposals {
            geo.extend_from_slice(&p.bbox.position_features(s.frame_width, s.frame_height));
            let ev = s.schedule.first_event_of(p.frame).ok_or_else(|| {
                Error::Invalid(format!("video {}: frame {} belongs to no event", s.id, p.frame))
            })?;
            proposal_event.push(ev);
        }
        Ok(Self {
            event_features: s.event_features.clone(),
            object_features: s.object_features.clone(),
            box_features: Tensor::new(vec![s.proposals.len(), 5], geo)?,
            boxes: s.proposals.iter().map(|p| p.bbox).collect(),
            proposal_frame: s.proposals.iter().map(|p| p.frame).collect(),
            proposal_slot: s.proposals.iter().map(|p| p.slot).collect(),
            proposal_event,
            schedule: s.schedule.clone(),
        })
    }

    pub fn num_events(&self) -> usize {
        self.event_features.rows()
    }

    pub fn num_proposals(&self) -> usize {
        self.object_features.rows()
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::data::{build_frame_schedule, uniform_events};

    /// Random inputs for a `frames x slots` video with `events` events.
    pub fn inputs(seed: u64, events: usize, frames_per_event: usize, slots: usize, d_vid: usize, d_obj: usize) -> SampleInputs {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let duration = (events * (frames_per_event - 1)) as f64;
        let schedule = build_frame_schedule(duration, &uniform_events(duration, events), 1.0).unwrap();
        let t = schedule.num_frames();
        let n = t * slots;
        let mut boxes = Vec::new();
        let mut frames = Vec::new();
        let mut slot_ids = Vec::new();
        for f in 0..t {
            for s in 0..slots {
                let x1 = rng.random_range(0.0..50.0);
                let y1 = rng.random_range(0.0..50.0);
                boxes.push(BoundingBox::new(x1, y1, x1 + rng.random_range(5.0..50.0), y1 + rng.random_range(5.0..50.0)));
                frames.push(f);
                slot_ids.push(s);
            }
        }
        let geo: Vec<f32> = boxes.iter().flat_map(|b| b.position_features(100.0, 100.0)).collect();
        let proposal_event = frames.iter().map(|&f| schedule.first_event_of(f).unwrap()).collect();
        let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        SampleInputs {
            event_features: rand_t(&mut rng, events, d_vid),
            object_features: rand_t(&mut rng, n, d_obj),
            box_features: Tensor::new(vec![n, 5], geo).unwrap(),
            boxes,
            proposal_frame: frames,
            proposal_slot: slot_ids,
            proposal_event,
            schedule,
        }
    }

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 16,
            dropout: 0.0,
            verb_hidden: 12,
            role_hidden: 10,
            n_verbs: 6,
            vocab_size: 12,
            d_vid: 7,
            d_obj: 6,
            max_events: 5,
            max_caption_len: 6,
            share_event_pe: true,
            object_channel: ObjectChannel::Objects,
            query_source: QuerySource::Event,
            alpha_reduction: AlphaReduction::Mean,
        }
    }
}
