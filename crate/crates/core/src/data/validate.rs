use std::collections::HashSet;
use std::fmt;

use super::{VerbLexicon, VideoSample};

/// One problem found in one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationIssue {
    pub video: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "video {}: {}", self.video, self.message)
    }
}

#[derive(Clone, Debug)]
pub struct ValidationOptions {
    pub expected_events: Option<usize>,
    pub max_gt_verbs: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            expected_events: Some(5),
            max_gt_verbs: 10,
        }
    }
}

/// Checks every type invariant of a single sample.
pub fn validate_sample(
    sample: &VideoSample,
    lexicon: &VerbLexicon,
    opts: &ValidationOptions,
) -> Vec<ValidationIssue> {
    let mut out = Vec::new();
    let mut bad = |msg: String| {
        out.push(ValidationIssue {
            video: sample.id.clone(),
            message: msg,
        })
    };
    let n_events = sample.events.len();
    if let Some(n) = opts.expected_events {
        if n_events != n {
            bad(format!("has {n_events} events, expected {n}"));
        }
    }
    if sample.event_features.rows() != n_events {
        bad(format!(
            "event feature rows {} differ from event count {n_events}",
            sample.event_features.rows()
        ));
    }
    let t = sample.num_frames();
    let m = sample.slots_per_frame;
    if m == 0 {
        bad("slots_per_frame is 0".into());
    }
    if sample.proposals.len() != t * m {
        bad(format!(
            "{} proposals, expected T*M = {t}*{m} = {}",
            sample.proposals.len(),
            t * m
        ));
    }
    if sample.object_features.rows() != sample.proposals.len() {
        bad(format!(
            "object feature rows {} differ from proposal count {}",
            sample.object_features.rows(),
            sample.proposals.len()
        ));
    }
    for (i, p) in sample.proposals.iter().enumerate() {
        if m > 0 && (p.frame != i / m || p.slot != i % m) {
            bad(format!(
                "proposal {i} is (frame {}, slot {}), expected (frame {}, slot {})",
                p.frame,
                p.slot,
                i / m,
                i % m
            ));
        }
        if p.frame >= t {
            bad(format!("proposal {i} frame {} outside the {t}-frame schedule", p.frame));
        }
        if !p.bbox.is_within(sample.frame_width, sample.frame_height) {
            bad(format!(
                "proposal {i} has malformed box {:?} for a {}x{} frame",
                <[f64; 4]>::from(p.bbox),
                sample.frame_width,
                sample.frame_height
            ));
        }
    }

    let ann = &sample.annotation;
    if ann.events.len() != n_events {
        bad(format!(
            "annotation covers {} events, video has {n_events}",
            ann.events.len()
        ));
    }
    for (i, ev) in ann.events.iter().enumerate() {
        if ev.verbs.is_empty() || ev.verbs.len() > opts.max_gt_verbs {
            bad(format!(
                "event {i} has {} ground-truth verbs, expected 1..={}",
                ev.verbs.len(),
                opts.max_gt_verbs
            ));
        }
        for &v in &ev.verbs {
            if v >= lexicon.len() {
                bad(format!("event {i} references unknown verb id {v}"));
            }
        }
        if let Some(primary) = ev.primary_verb() {
            if let Ok(allowed) = lexicon.roles_for_verb(primary) {
                for role in ev.roles.keys() {
                    if !allowed.contains(role) {
                        bad(format!(
                            "event {i} role {role} is not among the roles of verb `{}`",
                            lexicon.name(primary).unwrap_or("?")
                        ));
                    }
                }
            }
        }
        for (role, caps) in &ev.roles {
            if caps.is_empty() || caps.iter().any(|c| c.trim().is_empty()) {
                bad(format!("event {i} role {role} lacks a non-empty reference caption"));
            }
        }
    }
    if let Some(g) = &ann.grounding {
        for (&(ev, role), frames) in &g.entries {
            if ev >= n_events {
                bad(format!("grounding entry for missing event {ev}"));
                continue;
            }
            if !role.is_visual() {
                bad(format!("grounding entry {ev}/{role} is not a visual role"));
            }
            for (&f, b) in frames {
                if ev < sample.schedule.num_events() && !sample.schedule.contains(ev, f) {
                    bad(format!("grounding entry {ev}/{role} uses frame {f} outside the event"));
                }
                if !b.is_within(sample.frame_width, sample.frame_height) {
                    bad(format!("grounding entry {ev}/{role} frame {f} has a malformed box"));
                }
            }
        }
    }
    out
}

/// Per-sample checks plus dataset-wide consistency (unique ids, shared dims).
pub fn validate_dataset(
    samples: &[VideoSample],
    lexicon: &VerbLexicon,
    opts: &ValidationOptions,
) -> Vec<ValidationIssue> {
    let mut out: Vec<ValidationIssue> = samples
        .iter()
        .flat_map(|s| validate_sample(s, lexicon, opts))
        .collect();
    let mut seen = HashSet::new();
    if let Some(first) = samples.first() {
        for s in samples {
            if !seen.insert(s.id.as_str()) {
                out.push(ValidationIssue {
                    video: s.id.clone(),
                    message: "duplicate video id".into(),
                });
            }
            if s.d_vid() != first.d_vid() || s.d_obj() != first.d_obj() {
                out.push(ValidationIssue {
                    video: s.id.clone(),
                    message: format!(
                        "feature dims ({}, {}) differ from dataset dims ({}, {})",
                        s.d_vid(),
                        s.d_obj(),
                        first.d_vid(),
                        first.d_obj()
                    ),
                });
            }
            if s.slots_per_frame != first.slots_per_frame {
                out.push(ValidationIssue {
                    video: s.id.clone(),
                    message: format!(
                        "{} proposals per frame, dataset uses {}",
                        s.slots_per_frame, first.slots_per_frame
                    ),
                });
            }
        }
    }
    out
}
