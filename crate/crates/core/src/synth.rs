//! Seeded synthetic videos with planted, recoverable structure.
//!
//! Each event's feature is its verb's prototype plus noise. Every ground-truth
//! role of an event is carried by exactly one proposal whose feature adds the
//! role, attribute and noun prototypes; its caption names that attribute and
//! noun. All other proposals are unit Gaussian noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_frame_schedule, uniform_events, write_dataset, BoundingBox, EventAnnotation, GroundingDict, ObjectProposal,
    Role, SituationAnnotation, Split, VerbEntry, VerbId, VerbLexicon, VideoSample,
};
use crate::error::{Error, Result};
use crate::model::GroundingPrediction;
use crate::predict::{PredictionRecord, RolePrediction, VideoPrediction};
use crate::tensor::Tensor;

const VERB_NAMES: [&str; 40] = [
    "hit", "push", "pull", "carry", "throw", "catch", "kick", "open", "close", "lift", "drop", "hold", "walk", "run",
    "jump", "climb", "ride", "drive", "talk", "point", "wave", "eat", "drink", "cut", "pour", "read", "write", "sit",
    "stand", "fall", "chase", "hug", "shoot", "fight", "dance", "swim", "look", "touch", "grab", "turn",
];

const ATTRIBUTES: [&str; 16] = [
    "red", "blue", "green", "old", "young", "tall", "small", "big", "dark", "bright", "wooden", "metal", "striped",
    "shiny", "broken", "quiet",
];

const NOUNS: [&str; 60] = [
    "robot", "man", "woman", "dog", "cat", "car", "truck", "ball", "box", "door", "chair", "table", "lamp", "cup",
    "bottle", "knife", "sword", "gun", "bike", "horse", "tree", "wall", "window", "phone", "book", "bag", "hat", "coat",
    "boat", "plane", "rock", "rope", "stick", "shield", "guitar", "drum", "bench", "fence", "bridge", "tower", "kite",
    "flag", "cart", "bowl", "plate", "glass", "mirror", "clock", "key", "ladder", "hammer", "shovel", "bucket",
    "basket", "pillow", "blanket", "camera", "radio", "helmet", "mask",
];

/// Roles a verb may take besides `Arg0`.
const EXTRA_ROLES: [Role; 5] = [Role::Arg1, Role::Arg2, Role::ALoc, Role::AMnr, Role::ADir];

fn template(role: Role, attribute: &str, noun: &str) -> String {
    match role {
        Role::ALoc => format!("in the {attribute} {noun}"),
        Role::ADir => format!("toward the {attribute} {noun}"),
        Role::AMnr => format!("with {attribute} {noun}"),
        _ => format!("the {attribute} {noun}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Training videos.
    pub n_videos: usize,
    /// Validation videos, which also carry box annotations.
    pub n_val: usize,
    pub n_verbs: usize,
    /// Content words, split one fifth attributes and the rest nouns.
    pub n_words: usize,
    pub d_vid: usize,
    pub d_obj: usize,
    /// Proposals per frame.
    pub m: usize,
    /// Sampled frames per video.
    pub frames: usize,
    pub fps: f64,
    pub n_events: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Plant entities on any event frame, border frames included, instead of the middle one.
    pub border_plants: bool,
    /// Draw verbs with Zipf-distributed frequencies instead of uniformly.
    pub zipf: bool,
    pub frame_width: f64,
    pub frame_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 50,
            n_val: 20,
            n_verbs: 20,
            n_words: 50,
            d_vid: 64,
            d_obj: 64,
            m: 15,
            frames: 11,
            fps: 1.0,
            n_events: 5,
            sigma: 0.1,
            seed: 7,
            border_plants: false,
            zipf: false,
            frame_width: 320.0,
            frame_height: 240.0,
        }
    }
}

impl SynthConfig {
    fn n_attributes(&self) -> usize {
        (self.n_words / 5).max(1)
    }

    fn n_nouns(&self) -> usize {
        self.n_words - self.n_attributes()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("synthetic config: {m}")));
        if self.n_verbs == 0 || self.n_verbs > VERB_NAMES.len() {
            return bad(format!("n_verbs must be in 1..={}", VERB_NAMES.len()));
        }
        if self.n_words < 2 || self.n_attributes() > ATTRIBUTES.len() || self.n_nouns() > NOUNS.len() {
            return bad(format!(
                "n_words {} needs at most {} attributes and {} nouns",
                self.n_words,
                ATTRIBUTES.len(),
                NOUNS.len()
            ));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.n_events == 0 || self.frames < self.n_events + 1 {
            return bad(format!("{} frames cannot hold {} events", self.frames, self.n_events));
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        let max_roles = 1 + EXTRA_ROLES.len().min(3);
        if self.m < max_roles {
            return bad(format!("{} slots per frame cannot hold {max_roles} planted roles", self.m));
        }
        if self.n_nouns() < max_roles * self.n_events {
            return bad(format!("{} nouns cannot give every entity of a video its own noun", self.n_nouns()));
        }
        if self.d_vid == 0 || self.d_obj == 0 {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }

    fn duration(&self) -> f64 {
        (self.frames - 1) as f64 / self.fps
    }
}

/// One planted role entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub role: Role,
    pub frame: usize,
    pub slot: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub attribute: String,
    pub noun: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSecret {
    pub verb: VerbId,
    pub plants: Vec<Plant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSecret {
    pub video: String,
    pub events: Vec<EventSecret>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Secrets {
    pub config: SynthConfig,
    pub videos: Vec<VideoSecret>,
}

impl Secrets {
    pub fn get(&self, video: &str) -> Option<&VideoSecret> {
        self.videos.iter().find(|v| v.video == video)
    }
}

pub struct SynthData {
    pub samples: Vec<VideoSample>,
    pub lexicon: VerbLexicon,
    pub secrets: Secrets,
}

struct Prototypes {
    verbs: Vec<Vec<f32>>,
    roles: Vec<Vec<f32>>,
    attributes: Vec<Vec<f32>>,
    nouns: Vec<Vec<f32>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BoundingBox {
    let w = rng.random_range(0.15..0.4) * cfg.frame_width;
    let h = rng.random_range(0.15..0.4) * cfg.frame_height;
    let x1 = rng.random_range(0.0..cfg.frame_width - w);
    let y1 = rng.random_range(0.0..cfg.frame_height - h);
    BoundingBox::new(x1.floor(), y1.floor(), (x1 + w).floor(), (y1 + h).floor())
}

fn build_lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<VerbLexicon> {
    let verbs = (0..cfg.n_verbs)
        .map(|id| {
            let extra = rng.random_range(1..=3);
            let mut roles: BTreeSet<Role> = EXTRA_ROLES.choose_multiple(rng, extra).copied().collect();
            roles.insert(Role::Arg0);
            VerbEntry {
                id,
                name: VERB_NAMES[id].to_string(),
                roles,
            }
        })
        .collect();
    VerbLexicon::new(verbs)
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn generate_video(
    cfg: &SynthConfig,
    lexicon: &VerbLexicon,
    protos: &Prototypes,
    verb_dist: &WeightedIndex<f64>,
    index: usize,
    split: Split,
) -> Result<(VideoSample, VideoSecret)> {
    let mut rng = video_rng(cfg.seed, index);
    let id = match split {
        Split::Train => format!("train{index:04}"),
        Split::Val => format!("val{:04}", index - cfg.n_videos),
    };
    let duration = cfg.duration();
    let events = uniform_events(duration, cfg.n_events);
    let schedule = build_frame_schedule(duration, &events, cfg.fps)?;
    let t = schedule.num_frames();

    let mut proposals = Vec::with_capacity(t * cfg.m);
    let mut object_features: Vec<f32> = Vec::with_capacity(t * cfg.m * cfg.d_obj);
    for frame in 0..t {
        for slot in 0..cfg.m {
            proposals.push(ObjectProposal {
                frame,
                slot,
                bbox: random_box(&mut rng, cfg),
            });
            object_features.extend(gaussian(&mut rng, cfg.d_obj, 1.0));
        }
    }

    let mut nouns: Vec<usize> = (0..cfg.n_nouns()).collect();
    nouns.shuffle(&mut rng);
    let mut nouns = nouns.into_iter();

    let mut event_features = Vec::with_capacity(cfg.n_events * cfg.d_vid);
    let mut ann_events = Vec::with_capacity(cfg.n_events);
    let mut secrets = Vec::with_capacity(cfg.n_events);
    let mut grounding = GroundingDict::default();
    for (i, frames) in schedule.per_event_frames.iter().enumerate() {
        let verb = verb_dist.sample(&mut rng);
        let noise = gaussian(&mut rng, cfg.d_vid, cfg.sigma);
        event_features.extend(protos.verbs[verb].iter().zip(&noise).map(|(p, n)| p + n));

        let roles = lexicon.roles_for_verb(verb)?;
        let mut slots: Vec<usize> = (0..cfg.m).collect();
        slots.shuffle(&mut rng);
        let mut plants = Vec::with_capacity(roles.len());
        let mut role_caps = BTreeMap::new();
        for (k, &role) in roles.iter().enumerate() {
            let frame = if cfg.border_plants {
                *frames.choose(&mut rng).expect("events have frames")
            } else {
                frames[frames.len() / 2]
            };
            // entities of one event on the same frame take distinct slots
            let slot = slots[k];
            let attribute = rng.random_range(0..cfg.n_attributes());
            let noun = nouns.next().expect("noun budget checked");
            let noise = gaussian(&mut rng, cfg.d_obj, cfg.sigma);
            let row = frame * cfg.m + slot;
            let feat = &mut object_features[row * cfg.d_obj..(row + 1) * cfg.d_obj];
            for (j, f) in feat.iter_mut().enumerate() {
                *f = protos.roles[role.id()][j] + protos.attributes[attribute][j] + protos.nouns[noun][j] + noise[j];
            }
            let caption = template(role, ATTRIBUTES[attribute], NOUNS[noun]);
            let bbox = proposals[row].bbox;
            if split == Split::Val && role.is_visual() {
                grounding.insert(i, role, frame, bbox);
            }
            role_caps.insert(role, vec![caption.clone()]);
            plants.push(Plant {
                role,
                frame,
                slot,
                bbox,
                attribute: ATTRIBUTES[attribute].to_string(),
                noun: NOUNS[noun].to_string(),
                caption,
            });
        }
        ann_events.push(EventAnnotation {
            verbs: vec![verb],
            roles: role_caps,
        });
        secrets.push(EventSecret { verb, plants });
    }

    let sample = VideoSample {
        id: id.clone(),
        split,
        duration_s: duration,
        events,
        schedule,
        frame_width: cfg.frame_width,
        frame_height: cfg.frame_height,
        slots_per_frame: cfg.m,
        event_features: Tensor::new(vec![cfg.n_events, cfg.d_vid], event_features)?,
        proposals,
        object_features: Tensor::new(vec![t * cfg.m, cfg.d_obj], object_features)?,
        annotation: SituationAnnotation {
            events: ann_events,
            grounding: (split == Split::Val).then_some(grounding),
        },
    };
    Ok((sample, VideoSecret { video: id, events: secrets }))
}

/// Generates `n_videos` training and `n_val` validation videos.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = build_lexicon(cfg, &mut rng)?;
    let protos = Prototypes {
        verbs: (0..cfg.n_verbs).map(|_| gaussian(&mut rng, cfg.d_vid, 1.0)).collect(),
        roles: (0..Role::COUNT).map(|_| gaussian(&mut rng, cfg.d_obj, 1.0)).collect(),
        attributes: (0..cfg.n_attributes()).map(|_| gaussian(&mut rng, cfg.d_obj, 1.0)).collect(),
        nouns: (0..cfg.n_nouns()).map(|_| gaussian(&mut rng, cfg.d_obj, 1.0)).collect(),
    };
    let freqs: Vec<f64> = (0..cfg.n_verbs)
        .map(|r| if cfg.zipf { 1.0 / (r + 1) as f64 } else { 1.0 })
        .collect();
    let verb_dist = WeightedIndex::new(&freqs).map_err(|e| Error::Invalid(format!("verb weights: {e}")))?;

    let total = cfg.n_videos + cfg.n_val;
    let made: Vec<(VideoSample, VideoSecret)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let split = if i < cfg.n_videos { Split::Train } else { Split::Val };
            generate_video(cfg, &lexicon, &protos, &verb_dist, i, split)
        })
        .collect::<Result<_>>()?;
    let (samples, videos) = made.into_iter().unzip();
    Ok(SynthData {
        samples,
        lexicon,
        secrets: Secrets {
            config: cfg.clone(),
            videos,
        },
    })
}

pub const SECRETS: &str = "secrets.json";

/// Writes the dataset layout plus `secrets.json`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    write_dataset(dir, &data.samples, &data.lexicon)?;
    let path = dir.join(SECRETS);
    let text = serde_json::to_string_pretty(&data.secrets).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_secrets(path: &Path) -> Result<Secrets> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Perfect predictions from the planted ground truth.
pub fn oracle_predict(sample: &VideoSample, secrets: &Secrets, lexicon: &VerbLexicon) -> Result<VideoPrediction> {
    let secret = secrets
        .get(&sample.id)
        .ok_or_else(|| Error::Invalid(format!("no secrets for video {}", sample.id)))?;
    let events = secret
        .events
        .iter()
        .enumerate()
        .map(|(i, ev)| {
            let mut top5 = vec![ev.verb];
            top5.extend((0..lexicon.len()).filter(|&v| v != ev.verb).take(4));
            PredictionRecord {
                event: i,
                verb: ev.verb,
                verb_name: lexicon.name(ev.verb).unwrap_or("?").to_string(),
                top5,
                roles: ev
                    .plants
                    .iter()
                    .map(|p| RolePrediction {
                        role: p.role,
                        caption: p.caption.clone(),
                        grounding: Some(GroundingPrediction {
                            frame: p.frame,
                            slot: p.slot,
                            bbox: p.bbox,
                            score: 1.0,
                        }),
                        alpha: None,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(VideoPrediction {
        video: sample.id.clone(),
        regime: "oracle".into(),
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_dataset, ValidationOptions};
    use crate::metrics::{evaluate, EvalOptions};

    fn small() -> SynthConfig {
        SynthConfig {
            n_videos: 6,
            n_val: 3,
            d_vid: 16,
            d_obj: 16,
            ..Default::default()
        }
    }

    #[test]
    fn generated_data_validates_and_plants_stay_in_their_event() {
        for border in [false, true] {
            let cfg = SynthConfig {
                border_plants: border,
                ..small()
            };
            let data = generate(&cfg).unwrap();
            assert_eq!(data.samples.len(), 9);
            assert!(validate_dataset(&data.samples, &data.lexicon, &ValidationOptions::default()).is_empty());
            for (s, sec) in data.samples.iter().zip(&data.secrets.videos) {
                assert_eq!(s.num_frames(), 11);
                for (i, ev) in sec.events.iter().enumerate() {
                    assert_eq!(&ev.plants.iter().map(|p| p.role).collect::<BTreeSet<_>>(), data.lexicon.roles_for_verb(ev.verb).unwrap());
                    for p in &ev.plants {
                        assert!(s.schedule.contains(i, p.frame));
                        if !border {
                            assert_eq!(s.schedule.first_event_of(p.frame), Some(i));
                        }
                        assert_eq!(s.proposals[s.proposal_index(p.frame, p.slot)].bbox, p.bbox);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_dataset_keeps_a_valid_lexicon() {
        let data = generate(&SynthConfig {
            n_videos: 0,
            n_val: 0,
            ..small()
        })
        .unwrap();
        assert!(data.samples.is_empty());
        assert_eq!(data.lexicon.len(), 20);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        assert!(generate(&SynthConfig { m: 2, ..small() }).is_err());
        assert!(generate(&SynthConfig { sigma: -1.0, ..small() }).is_err());
        assert!(generate(&SynthConfig { n_verbs: 100, ..small() }).is_err());
    }

    #[test]
    fn zero_noise_plants_depend_only_on_their_draws() {
        let data = generate(&SynthConfig { sigma: 0.0, ..small() }).unwrap();
        let mut seen: BTreeMap<(Role, String, String), Vec<f32>> = BTreeMap::new();
        let mut repeats = 0;
        for (s, sec) in data.samples.iter().zip(&data.secrets.videos) {
            for p in sec.events.iter().flat_map(|e| &e.plants) {
                let row = s.object_features.row(s.proposal_index(p.frame, p.slot)).to_vec();
                let key = (p.role, p.attribute.clone(), p.noun.clone());
                if let Some(prev) = seen.insert(key, row.clone()) {
                    assert_eq!(prev, row);
                    repeats += 1;
                }
            }
        }
        assert!(repeats > 0);
        let mut by_verb: BTreeMap<VerbId, Vec<f32>> = BTreeMap::new();
        for (s, sec) in data.samples.iter().zip(&data.secrets.videos) {
            for (i, ev) in sec.events.iter().enumerate() {
                let row = s.event_features.row(i).to_vec();
                if let Some(prev) = by_verb.insert(ev.verb, row.clone()) {
                    assert_eq!(prev, row);
                }
            }
        }
    }

    #[test]
    fn nearest_prototype_recovers_verbs_and_nouns_at_zero_noise() {
        let data = generate(&SynthConfig { sigma: 0.0, ..small() }).unwrap();
        // verbs: identical features imply identical verbs
        let mut verb_of: Vec<(Vec<f32>, VerbId)> = Vec::new();
        for (s, sec) in data.samples.iter().zip(&data.secrets.videos) {
            for (i, ev) in sec.events.iter().enumerate() {
                let f = s.event_features.row(i).to_vec();
                match verb_of.iter().find(|(g, _)| *g == f) {
                    Some((_, v)) => assert_eq!(*v, ev.verb),
                    None => verb_of.push((f, ev.verb)),
                }
            }
        }
        // planted rows are exactly role + attribute + noun prototypes, so a
        // prototype read off one video identifies the noun in every other
        let mut noun_of: Vec<(Vec<f32>, String)> = Vec::new();
        for (s, sec) in data.samples.iter().zip(&data.secrets.videos) {
            for p in sec.events.iter().flat_map(|e| &e.plants) {
                let f = s.object_features.row(s.proposal_index(p.frame, p.slot)).to_vec();
                match noun_of.iter().find(|(g, _)| *g == f) {
                    Some((_, n)) => assert_eq!(*n, p.noun),
                    None => noun_of.push((f, p.noun.clone())),
                }
            }
        }
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let data = generate(&small()).unwrap();
        let refs: Vec<&VideoSample> = data.samples.iter().collect();
        let preds: Vec<VideoPrediction> = refs
            .iter()
            .map(|s| oracle_predict(s, &data.secrets, &data.lexicon).unwrap())
            .collect();
        let r = evaluate(&preds, &refs, &EvalOptions::default()).unwrap();
        assert_eq!(r.verb.acc_at_1, 1.0);
        assert_eq!(r.srl.rouge_l, 1.0);
        assert_eq!(r.srl.exact_match, 1.0);
        assert_eq!(r.roles.macro_f1, 1.0);
        assert_eq!(r.iou(0.5), Some(1.0));
        assert_eq!(r.iou(0.3), Some(1.0));
        assert!(r.is_finite());
    }

    #[test]
    fn zipf_skews_verb_frequencies() {
        let data = generate(&SynthConfig {
            zipf: true,
            n_videos: 40,
            n_val: 0,
            ..small()
        })
        .unwrap();
        let mut counts = vec![0usize; 20];
        for sec in &data.secrets.videos {
            for e in &sec.events {
                counts[e.verb] += 1;
            }
        }
        assert!(counts[0] > counts[19] * 3);
    }
}
