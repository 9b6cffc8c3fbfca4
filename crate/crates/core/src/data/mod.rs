//! Domain types, on-disk dataset format, vocabulary and frame/event association.

mod io;
mod role;
mod schedule;
mod validate;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use io::{
    load_dataset, load_dataset_unchecked, read_lexicon, write_dataset, Dataset, FeatureHeader, LoadOutcome, LEXICON,
    MANIFEST,
};
pub use role::Role;
pub use schedule::{associate_proposals, build_frame_schedule, check_tiling, uniform_events, FrameSchedule};
pub use validate::{validate_dataset, validate_sample, ValidationIssue, ValidationOptions};
pub use vocab::{normalize, Tokenizer, Vocabulary, WhitespaceTokenizer, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type VerbId = usize;

/// A contiguous time segment of a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Axis-aligned box in pixel corners, serialised as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= width && 0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= height
    }

    /// `(cx, cy, w, h, area)` normalised by the frame size.
    pub fn position_features(&self, width: f64, height: f64) -> [f32; 5] {
        let w = self.width() / width;
        let h = self.height() / height;
        [
            ((self.x1 + self.x2) / 2.0 / width) as f32,
            ((self.y1 + self.y2) / 2.0 / height) as f32,
            w as f32,
            h as f32,
            (w * h) as f32,
        ]
    }
}

/// A detector box on one sampled frame. Its feature vector is row
/// `frame * M + slot` of [`VideoSample::object_features`].
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal {
    pub frame: usize,
    pub slot: usize,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbEntry {
    pub id: VerbId,
    pub name: String,
    pub roles: BTreeSet<Role>,
}

/// Verb table and the verb-to-roles mapping.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerbLexicon {
    pub verbs: Vec<VerbEntry>,
}

impl VerbLexicon {
    pub fn new(verbs: Vec<VerbEntry>) -> Result<Self> {
        for (i, v) in verbs.iter().enumerate() {
            if v.id != i {
                return Err(Error::Invalid(format!("verb `{}` has id {} at position {i}", v.name, v.id)));
            }
            if v.roles.is_empty() {
                return Err(Error::Invalid(format!("verb `{}` maps to no roles", v.name)));
            }
        }
        Ok(Self { verbs })
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn roles_for_verb(&self, verb: VerbId) -> Result<&BTreeSet<Role>> {
        self.verbs
            .get(verb)
            .map(|v| &v.roles)
            .ok_or(Error::UnknownVerb(verb))
    }

    pub fn name(&self, verb: VerbId) -> Option<&str> {
        self.verbs.get(verb).map(|v| v.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<VerbId> {
        self.verbs.iter().position(|v| v.name == name)
    }
}

/// Box annotations per `(event, role)`: frame index to box.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, BTreeMap<String, BoundingBox>>")]
#[serde(into = "BTreeMap<String, BTreeMap<String, BoundingBox>>")]
pub struct GroundingDict {
    pub entries: BTreeMap<(usize, Role), BTreeMap<usize, BoundingBox>>,
}

impl GroundingDict {
    pub fn get(&self, event: usize, role: Role) -> Option<&BTreeMap<usize, BoundingBox>> {
        self.entries.get(&(event, role)).filter(|m| !m.is_empty())
    }

    pub fn insert(&mut self, event: usize, role: Role, frame: usize, bbox: BoundingBox) {
        self.entries.entry((event, role)).or_default().insert(frame, bbox);
    }
}

impl TryFrom<BTreeMap<String, BTreeMap<String, BoundingBox>>> for GroundingDict {
    type Error = Error;

    fn try_from(raw: BTreeMap<String, BTreeMap<String, BoundingBox>>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (key, frames) in raw {
            let (ev, role) = key
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("grounding key `{key}` is not `event/role`")))?;
            let ev: usize = ev
                .parse()
                .map_err(|_| Error::Format(format!("grounding key `{key}` has a bad event index")))?;
            let role: Role = role.parse()?;
            let mut map = BTreeMap::new();
            for (f, b) in frames {
                let f: usize = f
                    .parse()
                    .map_err(|_| Error::Format(format!("grounding frame `{f}` under `{key}`")))?;
                map.insert(f, b);
            }
            entries.insert((ev, role), map);
        }
        Ok(Self { entries })
    }
}

impl From<GroundingDict> for BTreeMap<String, BTreeMap<String, BoundingBox>> {
    fn from(g: GroundingDict) -> Self {
        g.entries
            .into_iter()
            .map(|((ev, role), frames)| {
                (
                    format!("{ev}/{role}"),
                    frames.into_iter().map(|(f, b)| (f.to_string(), b)).collect(),
                )
            })
            .collect()
    }
}

/// Ground truth for one event. The first verb is the primary annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub verbs: Vec<VerbId>,
    pub roles: BTreeMap<Role, Vec<String>>,
}

impl EventAnnotation {
    pub fn primary_verb(&self) -> Option<VerbId> {
        self.verbs.first().copied()
    }

    pub fn verb_set(&self) -> BTreeSet<VerbId> {
        self.verbs.iter().copied().collect()
    }

    pub fn role_set(&self) -> BTreeSet<Role> {
        self.roles.keys().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SituationAnnotation {
    pub events: Vec<EventAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingDict>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One video: event features, object proposals and their features, ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub split: Split,
    pub duration_s: f64,
    pub events: Vec<Event>,
    pub schedule: FrameSchedule,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Proposals per frame (`M`).
    pub slots_per_frame: usize,
    /// `events x D_vid`
    pub event_features: Tensor<f32>,
    /// Ordered by `(frame, slot)`.
    pub proposals: Vec<ObjectProposal>,
    /// `(T * M) x D_obj`, row-aligned with `proposals`.
    pub object_features: Tensor<f32>,
    pub annotation: SituationAnnotation,
}

impl VideoSample {
    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn num_frames(&self) -> usize {
        self.schedule.num_frames()
    }

    pub fn proposal_index(&self, frame: usize, slot: usize) -> usize {
        frame * self.slots_per_frame + slot
    }

    /// Proposal indices per event.
    pub fn event_proposals(&self) -> Result<Vec<Vec<usize>>> {
        associate_proposals(&self.schedule, &self.proposals)
    }

    pub fn d_vid(&self) -> usize {
        self.event_features.cols()
    }

    pub fn d_obj(&self) -> usize {
        self.object_features.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> VerbLexicon {
        use Role::*;
        VerbLexicon::new(vec![
            VerbEntry {
                id: 0,
                name: "hit".into(),
                roles: [Arg0, Arg1, Arg2, AMnr, ALoc].into_iter().collect(),
            },
            VerbEntry {
                id: 1,
                name: "stand".into(),
                roles: [Arg0].into_iter().collect(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn roles_for_verb_lookups() {
        use Role::*;
        let lex = lexicon();
        let hit = lex.id_of("hit").unwrap();
        let expect: BTreeSet<Role> = [Arg0, Arg1, Arg2, AMnr, ALoc].into_iter().collect();
        assert_eq!(lex.roles_for_verb(hit).unwrap(), &expect);
        assert_eq!(lex.roles_for_verb(1).unwrap(), &[Arg0].into_iter().collect());
        assert!(matches!(lex.roles_for_verb(7), Err(Error::UnknownVerb(7))));
    }

    #[test]
    fn lexicon_rejects_empty_role_sets() {
        let bad = vec![VerbEntry {
            id: 0,
            name: "x".into(),
            roles: BTreeSet::new(),
        }];
        assert!(VerbLexicon::new(bad).is_err());
    }

    #[test]
    fn grounding_dict_json_shape() {
        let mut g = GroundingDict::default();
        g.insert(1, Role::Arg0, 3, BoundingBox::new(1.0, 2.0, 3.0, 4.0));
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#"{"1/Arg0":{"3":[1.0,2.0,3.0,4.0]}}"#);
        let back: GroundingDict = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<GroundingDict>(r#"{"1-Arg0":{}}"#).is_err());
    }

    #[test]
    fn box_position_features() {
        let b = BoundingBox::new(0.0, 0.0, 50.0, 25.0);
        let f = b.position_features(100.0, 100.0);
        assert_eq!(f, [0.25, 0.125, 0.5, 0.25, 0.125]);
        assert!(b.is_within(100.0, 100.0));
        assert!(!BoundingBox::new(5.0, 0.0, 5.0, 1.0).is_within(10.0, 10.0));
    }
}
