//! Inference: verbs, role sets chosen by a pluggable regime, role captions
//! and attention-derived grounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Role, SituationAnnotation, VerbId, VerbLexicon, VideoSample};
use crate::error::{Error, Result};
use crate::model::{
    argmax, build_role_queries, extract_grounding, role_set, top_k, GroundingPrediction, SampleInputs, TrainedModel,
};
use crate::tensor::{Graph, Tensor};

/// Inputs available when choosing each event's role set.
pub struct SelectionContext<'a> {
    pub predicted_verbs: &'a [VerbId],
    /// `events x 11`
    pub role_logits: &'a Tensor<f32>,
    pub theta_role: f64,
    pub lexicon: &'a VerbLexicon,
    pub annotation: Option<&'a SituationAnnotation>,
}

/// Picks the roles to caption for every event.
pub trait RoleSelector: Send + Sync {
    fn name(&self) -> &str;
    fn select(&self, ctx: &SelectionContext<'_>) -> Result<Vec<BTreeSet<Role>>>;
}

/// Ground-truth role sets.
pub struct GtRoles;

impl RoleSelector for GtRoles {
    fn name(&self) -> &str {
        "gt-roles"
    }

    fn select(&self, ctx: &SelectionContext<'_>) -> Result<Vec<BTreeSet<Role>>> {
        let ann = ctx
            .annotation
            .ok_or_else(|| Error::Invalid("gt-roles regime needs annotated videos".into()))?;
        Ok(ann.events.iter().map(|e| e.role_set()).collect())
    }
}

/// Roles mapped from the predicted verb.
pub struct PredGtMap;

impl RoleSelector for PredGtMap {
    fn name(&self) -> &str {
        "pred-gt-map"
    }

    fn select(&self, ctx: &SelectionContext<'_>) -> Result<Vec<BTreeSet<Role>>> {
        ctx.predicted_verbs
            .iter()
            .map(|&v| ctx.lexicon.roles_for_verb(v).cloned())
            .collect()
    }
}

/// Roles from the multi-label head; an empty prediction falls back to `{Arg0}`.
pub struct PredPred;

impl RoleSelector for PredPred {
    fn name(&self) -> &str {
        "pred-pred"
    }

    fn select(&self, ctx: &SelectionContext<'_>) -> Result<Vec<BTreeSet<Role>>> {
        Ok((0..ctx.role_logits.rows())
            .map(|i| {
                let s = role_set(ctx.role_logits.row(i), ctx.theta_role);
                if s.is_empty() {
                    [Role::Arg0].into_iter().collect()
                } else {
                    s
                }
            })
            .collect())
    }
}

type Factory = fn() -> Box<dyn RoleSelector>;

/// Role-selection regimes by name.
pub struct RegimeRegistry {
    entries: BTreeMap<String, Factory>,
}

impl Default for RegimeRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("gt-roles", || Box::new(GtRoles));
        r.register("pred-gt-map", || Box::new(PredGtMap));
        r.register("pred-verb-gt-map", || Box::new(PredGtMap));
        r.register("pred-pred", || Box::new(PredPred));
        r
    }
}

impl RegimeRegistry {
    pub fn register(&mut self, name: &str, f: Factory) {
        self.entries.insert(name.to_string(), f);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<Box<dyn RoleSelector>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::Invalid(format!("unknown regime `{name}`; expected one of {}", self.names().join(", "))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolePrediction {
    pub role: Role,
    pub caption: String,
    pub grounding: Option<GroundingPrediction>,
    /// Dense attention over all proposals, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f32>>,
}

/// Prediction for one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub event: usize,
    pub verb: VerbId,
    pub verb_name: String,
    pub top5: Vec<VerbId>,
    pub roles: Vec<RolePrediction>,
}

/// All event predictions of one video; one JSON line in a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video: String,
    pub regime: String,
    pub events: Vec<PredictionRecord>,
}

pub struct Predictor<'a> {
    pub bundle: &'a TrainedModel,
    pub theta_role: f64,
    pub max_len: usize,
    pub dump_alpha: bool,
}

impl<'a> Predictor<'a> {
    pub fn new(bundle: &'a TrainedModel) -> Self {
        Self {
            bundle,
            theta_role: bundle.run.theta_role,
            max_len: bundle.model.cfg().max_caption_len,
            dump_alpha: false,
        }
    }

    pub fn predict_situation(&self, sample: &VideoSample, selector: &dyn RoleSelector) -> Result<VideoPrediction> {
        let model = &self.bundle.model;
        let x = SampleInputs::from_sample(sample)?;
        let mut g = Graph::new();
        let s1 = model.net.encoder.forward(&mut g, &model.params, &x)?;
        let verb_logits = g.value(s1.verb_logits).clone();
        let role_logits = g.value(s1.role_logits).clone();
        let verbs: Vec<VerbId> = (0..verb_logits.rows()).map(|i| argmax(verb_logits.row(i))).collect();
        let annotation = Some(&sample.annotation).filter(|a| !a.events.is_empty());
        let sets = selector.select(&SelectionContext {
            predicted_verbs: &verbs,
            role_logits: &role_logits,
            theta_role: self.theta_role,
            lexicon: &self.bundle.lexicon,
            annotation,
        })?;
        if sets.len() != verbs.len() {
            return Err(Error::Invalid(format!(
                "video {}: regime produced {} role sets for {} events",
                sample.id,
                sets.len(),
                verbs.len()
            )));
        }
        let mut events: Vec<PredictionRecord> = verbs
            .iter()
            .enumerate()
            .map(|(i, &v)| PredictionRecord {
                event: i,
                verb: v,
                verb_name: self.bundle.lexicon.name(v).unwrap_or("?").to_string(),
                top5: top_k(verb_logits.row(i), 5),
                roles: Vec::new(),
            })
            .collect();
        let queries = build_role_queries(&sets);
        if queries.is_empty() {
            return Ok(VideoPrediction {
                video: sample.id.clone(),
                regime: selector.name().to_string(),
                events,
            });
        }
        // the verb-query variant reads annotated verbs, falling back to predictions
        let gt_verbs: Vec<VerbId> = match annotation {
            Some(a) => a.events.iter().zip(&verbs).map(|(e, &p)| e.primary_verb().unwrap_or(p)).collect(),
            None => verbs.clone(),
        };
        let s2 = model.net.roles.forward(&mut g, &model.params, &x, &s1, &queries, Some(&gt_verbs))?;
        let z = g.value(s2.z).clone();
        let captions = model.net.captions.generate(&model.params, &z, self.max_len)?;
        for (qi, q) in queries.iter().enumerate() {
            events[q.event].roles.push(RolePrediction {
                role: q.role,
                caption: self.bundle.vocab.decode_caption(&captions[qi]),
                grounding: extract_grounding(s2.alpha.row(qi), s2.mask.row(qi), &x),
                alpha: self.dump_alpha.then(|| s2.alpha.row(qi).to_vec()),
            });
        }
        Ok(VideoPrediction {
            video: sample.id.clone(),
            regime: selector.name().to_string(),
            events,
        })
    }

    /// Predictions for many videos, evaluated in parallel, returned in input order.
    pub fn predict_all(&self, samples: &[&VideoSample], selector: &dyn RoleSelector) -> Result<Vec<VideoPrediction>> {
        samples
            .par_iter()
            .map(|s| self.predict_situation(s, selector))
            .collect()
    }
}

pub fn write_predictions(path: &Path, preds: &[VideoPrediction]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::json(path, e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<VideoPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}
