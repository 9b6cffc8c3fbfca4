use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Role};

/// Intersection over union; a zero-area box scores 0.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        log::warn!("degenerate box in IoU: {a:?} vs {b:?}");
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (aa + ab - inter)
}

/// Ground truth and predictions for one event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundingEvent {
    pub gt_roles: BTreeSet<Role>,
    /// Predicted `(frame, box)` per role.
    pub predictions: BTreeMap<Role, (usize, BoundingBox)>,
    /// Annotated boxes per role, keyed by frame.
    pub annotations: BTreeMap<Role, BTreeMap<usize, BoundingBox>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingOptions {
    /// Roles considered visual.
    pub roles_eval: BTreeSet<Role>,
    /// Normalise by every evaluated GT role, annotated or not.
    pub strict: bool,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            roles_eval: [Role::Arg0, Role::Arg1, Role::Arg2].into_iter().collect(),
            strict: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingScore {
    pub score: f64,
    pub events_scored: usize,
    pub events_excluded: usize,
}

fn role_hit(ev: &GroundingEvent, role: Role, theta: f64) -> bool {
    let (Some(ann), Some((frame, pred))) = (ev.annotations.get(&role), ev.predictions.get(&role)) else {
        return false;
    };
    ann.get(frame).is_some_and(|gt| box_iou(pred, gt) > theta)
}

/// Mean over events of the fraction of evaluated roles whose predicted frame
/// is annotated and whose box overlaps the annotation by more than `theta`.
pub fn grounding_score(events: &[GroundingEvent], theta: f64, opts: &GroundingOptions) -> GroundingScore {
    let mut total = 0.0;
    let mut out = GroundingScore::default();
    for ev in events {
        let roles: Vec<Role> = ev
            .gt_roles
            .iter()
            .copied()
            .filter(|r| opts.roles_eval.contains(r))
            .collect();
        let annotated: Vec<Role> = roles
            .iter()
            .copied()
            .filter(|r| ev.annotations.get(r).is_some_and(|m| !m.is_empty()))
            .collect();
        if annotated.is_empty() {
            out.events_excluded += 1;
            continue;
        }
        let denom = if opts.strict { roles.len() } else { annotated.len() };
        let hits = annotated.iter().filter(|&&r| role_hit(ev, r, theta)).count();
        total += hits as f64 / denom as f64;
        out.events_scored += 1;
    }
    if out.events_excluded > 0 {
        log::info!("grounding: {} events without annotated evaluated roles excluded", out.events_excluded);
    }
    if out.events_scored > 0 {
        out.score = total / out.events_scored as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((box_iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(box_iou(&a, &b(3.0, 3.0, 3.0, 8.0)), 0.0);
    }

    fn event(preds: &[(Role, usize, BoundingBox)], anns: &[(Role, usize, BoundingBox)]) -> GroundingEvent {
        let mut ev = GroundingEvent::default();
        for &(r, f, bx) in preds {
            ev.gt_roles.insert(r);
            ev.predictions.insert(r, (f, bx));
        }
        for &(r, f, bx) in anns {
            ev.gt_roles.insert(r);
            ev.annotations.entry(r).or_default().insert(f, bx);
        }
        ev
    }

    #[test]
    fn score_examples() {
        let opts = GroundingOptions::default();
        let a = b(0.0, 0.0, 10.0, 10.0);
        let exact = event(&[(Role::Arg0, 2, a)], &[(Role::Arg0, 2, a)]);
        assert_eq!(grounding_score(&[exact], 0.5, &opts).score, 1.0);

        let wrong_frame = event(&[(Role::Arg0, 1, a)], &[(Role::Arg0, 2, a)]);
        assert_eq!(grounding_score(&[wrong_frame], 0.5, &opts).score, 0.0);

        let half = event(
            &[(Role::Arg0, 2, b(5.0, 0.0, 15.0, 10.0)), (Role::Arg1, 2, a)],
            &[(Role::Arg0, 2, a), (Role::Arg1, 2, b(50.0, 50.0, 60.0, 60.0))],
        );
        assert_eq!(grounding_score(&[half.clone()], 0.3, &opts).score, 0.5);
        assert_eq!(grounding_score(&[half], 0.5, &opts).score, 0.0);
    }

    #[test]
    fn unannotated_and_non_visual_roles() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let mut ev = event(&[(Role::Arg0, 2, a)], &[(Role::Arg0, 2, a)]);
        ev.gt_roles.insert(Role::Arg1);
        ev.gt_roles.insert(Role::ALoc);
        let lenient = grounding_score(&[ev.clone()], 0.5, &GroundingOptions::default());
        assert_eq!(lenient.score, 1.0);
        let strict = grounding_score(
            &[ev],
            0.5,
            &GroundingOptions {
                strict: true,
                ..Default::default()
            },
        );
        assert_eq!(strict.score, 0.5);

        let none = event(&[(Role::Arg0, 2, a)], &[]);
        let s = grounding_score(&[none], 0.5, &GroundingOptions::default());
        assert_eq!((s.events_scored, s.events_excluded), (0, 1));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0f64..50.0, 0.0f64..50.0, 1.0f64..40.0, 1.0f64..40.0).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(p in arb_box(), q in arb_box()) {
            let i = box_iou(&p, &q);
            prop_assert_eq!(i, box_iou(&q, &p));
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!((box_iou(&p, &p) - 1.0).abs() < 1e-12);
            if p != q {
                prop_assert!(i < 1.0);
            }
        }

        #[test]
        fn score_monotone_in_theta(boxes in proptest::collection::vec((arb_box(), arb_box(), 0usize..3), 1..12)) {
            let events: Vec<GroundingEvent> = boxes
                .chunks(3)
                .map(|c| {
                    let roles = [Role::Arg0, Role::Arg1, Role::Arg2];
                    let preds: Vec<_> = c.iter().zip(roles).map(|((p, _, f), r)| (r, *f, *p)).collect();
                    let anns: Vec<_> = c.iter().zip(roles).map(|((_, g, _), r)| (r, 1, *g)).collect();
                    event(&preds, &anns)
                })
                .collect();
            let opts = GroundingOptions::default();
            let lo = grounding_score(&events, 0.3, &opts).score;
            let hi = grounding_score(&events, 0.5, &opts).score;
            prop_assert!(hi <= lo);
        }
    }
}
