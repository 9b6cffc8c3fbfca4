use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Role, VerbId};
use crate::model::top_k;

/// Fraction of events whose top-`k` ranking hits any ground-truth verb.
pub fn verb_accuracy_at_k(logits: &[Vec<f64>], gt: &[BTreeSet<VerbId>], k: usize) -> f64 {
    let ranked: Vec<Vec<VerbId>> = logits.iter().map(|l| top_k(l, k)).collect();
    accuracy_from_ranked(&ranked, gt, k)
}

/// [`verb_accuracy_at_k`] on precomputed rankings.
pub fn accuracy_from_ranked(ranked: &[Vec<VerbId>], gt: &[BTreeSet<VerbId>], k: usize) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(gt)
        .filter(|(r, g)| r.iter().take(k).any(|v| g.contains(v)))
        .count();
    hits as f64 / ranked.len() as f64
}

/// Macro average over verb classes in the ground truth of the fraction of
/// that class's events retrieved within the top `k`.
pub fn verb_recall_at_k(logits: &[Vec<f64>], gt: &[BTreeSet<VerbId>], k: usize) -> f64 {
    let ranked: Vec<Vec<VerbId>> = logits.iter().map(|l| top_k(l, k)).collect();
    recall_from_ranked(&ranked, gt, k)
}

pub fn recall_from_ranked(ranked: &[Vec<VerbId>], gt: &[BTreeSet<VerbId>], k: usize) -> f64 {
    let mut per: BTreeMap<VerbId, (usize, usize)> = BTreeMap::new();
    for (r, g) in ranked.iter().zip(gt) {
        for &c in g {
            let e = per.entry(c).or_default();
            e.1 += 1;
            if r.iter().take(k).any(|&v| v == c) {
                e.0 += 1;
            }
        }
    }
    if per.is_empty() {
        return 0.0;
    }
    per.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Events where the role is in the ground truth.
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolePrf {
    pub per_role: BTreeMap<Role, Prf>,
    /// Mean F1 over roles with non-zero support.
    pub macro_f1: f64,
}

/// Per-role binary precision, recall and F1 over all events.
pub fn role_prf(pred: &[BTreeSet<Role>], gt: &[BTreeSet<Role>]) -> RolePrf {
    let mut out = RolePrf::default();
    let mut f1s = Vec::new();
    for role in Role::ALL {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            match (p.contains(&role), g.contains(&role)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        let support = tp + fne;
        if support == 0 && fp == 0 {
            continue;
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            f1s.push(f1);
        }
        out.per_role.insert(
            role,
            Prf {
                precision,
                recall,
                f1,
                support,
            },
        );
    }
    out.macro_f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn set<T: Ord + Copy>(v: &[T]) -> BTreeSet<T> {
        v.iter().copied().collect()
    }

    #[test]
    fn accuracy_examples() {
        let logits = vec![vec![0.1, 0.9, 0.0], vec![0.5, 0.2, 0.3]];
        let gt = vec![set(&[1]), set(&[2])];
        assert_eq!(verb_accuracy_at_k(&logits, &gt, 1), 0.5);
        assert_eq!(verb_accuracy_at_k(&logits, &gt, 2), 1.0);
        let ranked = vec![vec![4, 7, 1, 0, 9]];
        assert_eq!(accuracy_from_ranked(&ranked, &[set(&[3, 9, 11])], 5), 1.0);
        assert_eq!(accuracy_from_ranked(&ranked, &[set(&[3, 9, 11])], 1), 0.0);
    }

    #[test]
    fn recall_toy_tally() {
        // 5 classes; per-class hits at k=1: c0 2/2, c1 0/1, c2 1/2, c3 0/1
        let ranked = vec![vec![0], vec![0], vec![2], vec![3], vec![4], vec![1]];
        let gt = vec![set(&[0]), set(&[0]), set(&[2]), set(&[2]), set(&[1]), set(&[3])];
        let expect = (1.0 + 0.0 + 0.5 + 0.0) / 4.0;
        assert!((recall_from_ranked(&ranked, &gt, 1) - expect).abs() < 1e-12);
        let perfect: Vec<Vec<usize>> = gt.iter().map(|g| g.iter().copied().collect()).collect();
        assert_eq!(recall_from_ranked(&perfect, &gt, 1), 1.0);
    }

    #[test]
    fn role_prf_cases() {
        use Role::*;
        let gt = vec![set(&[Arg0, Arg1]), set(&[Arg0]), set(&[Arg0, ALoc])];
        let r = role_prf(&gt, &gt);
        assert!(r.per_role.values().all(|p| p.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
        let pred = vec![set(&[Arg0]), set(&[Arg0, Arg2]), set(&[Arg0])];
        let r = role_prf(&pred, &gt);
        assert_eq!(r.per_role[&Arg1].recall, 0.0);
        assert_eq!(r.per_role[&Arg1].f1, 0.0);
        assert_eq!(r.per_role[&Arg2].precision, 0.0);
        // macro over Arg0, Arg1, ALoc only
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn role_prf_matches_confusion_oracle() {
        use Role::*;
        let roles = [Arg0, Arg1, Arg2, ALoc];
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for i in 0..20usize {
            pred.push(roles.iter().copied().filter(|r| (i * 7 + r.id() * 3) % 5 < 3).collect::<BTreeSet<_>>());
            gt.push(roles.iter().copied().filter(|r| (i * 3 + r.id()) % 4 < 2).collect::<BTreeSet<_>>());
        }
        let r = role_prf(&pred, &gt);
        let mut f1s = Vec::new();
        for role in roles {
            let tp = (0..20).filter(|&i| pred[i].contains(&role) && gt[i].contains(&role)).count() as f64;
            let pp = (0..20).filter(|&i| pred[i].contains(&role)).count() as f64;
            let gp = (0..20).filter(|&i| gt[i].contains(&role)).count() as f64;
            let (p, rc) = (tp / pp, tp / gp);
            let f = 2.0 * p * rc / (p + rc);
            assert!((r.per_role[&role].f1 - f).abs() < 1e-12);
            f1s.push(f);
        }
        assert!((r.macro_f1 - f1s.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn accuracy_is_monotone_in_k(vals in proptest::collection::vec(-3.0f64..3.0, 40), gts in proptest::collection::vec(0usize..8, 5)) {
            let logits: Vec<Vec<f64>> = vals.chunks(8).map(|c| c.to_vec()).collect();
            let gt: Vec<BTreeSet<usize>> = gts.iter().map(|&g| set(&[g])).collect();
            let mut prev = 0.0;
            for k in 1..=8 {
                let a = verb_accuracy_at_k(&logits, &gt, k);
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}
