//! Evaluation: verb accuracy and recall, role P/R/F1, caption metrics and
//! attention-grounding IoU.

mod caption;
mod classify;
mod grounding;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use caption::{cider, cider_grouped, cider_scores, rouge_l, IdfScope};
pub use classify::{
    accuracy_from_ranked, recall_from_ranked, role_prf, verb_accuracy_at_k, verb_recall_at_k, Prf, RolePrf,
};
pub use grounding::{box_iou, grounding_score, GroundingEvent, GroundingOptions, GroundingScore};

use crate::data::{normalize, Role, VerbId, VideoSample};
use crate::error::{Error, Result};
use crate::predict::VideoPrediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub thetas: Vec<f64>,
    /// Score verbs against the primary annotation only instead of any annotated verb.
    pub primary_verb_only: bool,
    pub idf_scope: IdfScope,
    pub grounding: GroundingOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thetas: vec![0.3, 0.5],
            primary_verb_only: false,
            idf_scope: IdfScope::Global,
            grounding: GroundingOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbReport {
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub recall_at_5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrlReport {
    /// ×10 scale, so a perfect corpus reads 100.
    pub cider: f64,
    pub cider_vb: f64,
    pub cider_arg: f64,
    pub rouge_l: f64,
    /// Fraction of pairs whose caption equals one of its references.
    pub exact_match: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub theta: f64,
    #[serde(flatten)]
    pub score: GroundingScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub events: usize,
    pub verb: VerbReport,
    pub srl: SrlReport,
    pub grounding: Vec<GroundingReport>,
    pub roles: RolePrf,
}

impl EvalReport {
    /// Grounding score at `theta`, if it was evaluated.
    pub fn iou(&self, theta: f64) -> Option<f64> {
        self.grounding
            .iter()
            .find(|g| (g.theta - theta).abs() < 1e-12)
            .map(|g| g.score.score)
    }

    pub fn is_finite(&self) -> bool {
        let v = &self.verb;
        let s = &self.srl;
        [v.acc_at_1, v.acc_at_5, v.recall_at_5, s.cider, s.cider_vb, s.cider_arg, s.rouge_l, s.exact_match, self.roles.macro_f1]
            .iter()
            .chain(self.grounding.iter().map(|g| &g.score.score))
            .all(|x| x.is_finite())
    }

    pub fn to_table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "videos {}  events {}  caption pairs {}", self.videos, self.events, self.srl.pairs);
        let _ = writeln!(t, "{:<14}{:>10}", "metric", "value");
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(t, "{k:<14}{v:>10.4}");
        };
        row("acc@1", self.verb.acc_at_1);
        row("acc@5", self.verb.acc_at_5);
        row("recall@5", self.verb.recall_at_5);
        row("cider", self.srl.cider);
        row("cider-vb", self.srl.cider_vb);
        row("cider-arg", self.srl.cider_arg);
        row("rouge-l", self.srl.rouge_l);
        row("exact-match", self.srl.exact_match);
        for g in &self.grounding {
            row(&format!("iou@{}", g.theta), g.score.score);
        }
        row("role macro-f1", self.roles.macro_f1);
        let _ = writeln!(t, "{:<8}{:>10}{:>10}{:>10}{:>9}", "role", "precision", "recall", "f1", "support");
        for (role, p) in &self.roles.per_role {
            let _ = writeln!(
                t,
                "{:<8}{:>10.4}{:>10.4}{:>10.4}{:>9}",
                role.name(),
                p.precision,
                p.recall,
                p.f1,
                p.support
            );
        }
        t
    }
}

/// Scores predictions against their annotated samples, matched by video id.
pub fn evaluate(preds: &[VideoPrediction], samples: &[&VideoSample], opts: &EvalOptions) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions to evaluate".into()));
    }
    let by_id: BTreeMap<&str, &VideoSample> = samples.iter().map(|s| (s.id.as_str(), *s)).collect();

    let mut ranked: Vec<Vec<VerbId>> = Vec::new();
    let mut gt_verbs: Vec<BTreeSet<VerbId>> = Vec::new();
    let mut pred_roles: Vec<BTreeSet<Role>> = Vec::new();
    let mut gt_roles: Vec<BTreeSet<Role>> = Vec::new();
    let mut cands: Vec<String> = Vec::new();
    let mut refs: Vec<Vec<String>> = Vec::new();
    let mut verb_keys: Vec<VerbId> = Vec::new();
    let mut role_keys: Vec<Role> = Vec::new();
    let mut ground: Vec<GroundingEvent> = Vec::new();

    for p in preds {
        let s = by_id
            .get(p.video.as_str())
            .ok_or_else(|| Error::Invalid(format!("prediction for unknown video `{}`", p.video)))?;
        let ann = &s.annotation;
        if ann.events.len() != p.events.len() {
            return Err(Error::Invalid(format!(
                "video {}: {} predicted events, {} annotated",
                p.video,
                p.events.len(),
                ann.events.len()
            )));
        }
        for (i, (rec, gt)) in p.events.iter().zip(&ann.events).enumerate() {
            let mut r = vec![rec.verb];
            r.extend(rec.top5.iter().copied().filter(|&v| v != rec.verb));
            ranked.push(r);
            gt_verbs.push(match (opts.primary_verb_only, gt.primary_verb()) {
                (true, Some(v)) => [v].into_iter().collect(),
                _ => gt.verb_set(),
            });
            pred_roles.push(rec.roles.iter().map(|r| r.role).collect());
            gt_roles.push(gt.role_set());

            let primary = gt.primary_verb().unwrap_or(rec.verb);
            let mut gev = GroundingEvent {
                gt_roles: gt.role_set(),
                ..Default::default()
            };
            for (&role, references) in &gt.roles {
                let pr = rec.roles.iter().find(|r| r.role == role);
                cands.push(pr.map(|r| r.caption.clone()).unwrap_or_default());
                refs.push(references.clone());
                verb_keys.push(primary);
                role_keys.push(role);
                if let Some(g) = pr.and_then(|r| r.grounding.as_ref()) {
                    gev.predictions.insert(role, (g.frame, g.bbox));
                }
                if let Some(frames) = ann.grounding.as_ref().and_then(|d| d.get(i, role)) {
                    gev.annotations.insert(role, frames.clone());
                }
            }
            ground.push(gev);
        }
    }

    let srl = if cands.is_empty() {
        SrlReport {
            cider: 0.0,
            cider_vb: 0.0,
            cider_arg: 0.0,
            rouge_l: 0.0,
            exact_match: 0.0,
            pairs: 0,
        }
    } else {
        let n = cands.len() as f64;
        let exact = cands
            .iter()
            .zip(&refs)
            .filter(|(c, r)| {
                let c = normalize(c);
                r.iter().any(|x| normalize(x) == c)
            })
            .count();
        SrlReport {
            cider: 10.0 * cider(&cands, &refs)?,
            cider_vb: 10.0 * cider_grouped(&cands, &refs, &verb_keys, opts.idf_scope)?,
            cider_arg: 10.0 * cider_grouped(&cands, &refs, &role_keys, opts.idf_scope)?,
            rouge_l: cands.iter().zip(&refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / n,
            exact_match: exact as f64 / n,
            pairs: cands.len(),
        }
    };

    Ok(EvalReport {
        videos: preds.len(),
        events: ranked.len(),
        verb: VerbReport {
            acc_at_1: accuracy_from_ranked(&ranked, &gt_verbs, 1),
            acc_at_5: accuracy_from_ranked(&ranked, &gt_verbs, 5),
            recall_at_5: recall_from_ranked(&ranked, &gt_verbs, 5),
        },
        srl,
        grounding: opts
            .thetas
            .iter()
            .map(|&theta| GroundingReport {
                theta,
                score: grounding_score(&ground, theta, &opts.grounding),
            })
            .collect(),
        roles: role_prf(&pred_roles, &gt_roles),
    })
}
