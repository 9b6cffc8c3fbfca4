//! Training objectives and the verb-loss strategy registry.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::data::VerbId;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// How the per-event verb cross-entropy terms are shaped.
///
/// A strategy contributes a per-class weight, a focal exponent, and
/// optionally per-video sampling weights; the loss itself is always the
/// fused weighted focal cross-entropy.
pub trait VerbLoss: Debug + Send + Sync {
    fn name(&self) -> &str;

    fn class_weight(&self, _verb: VerbId) -> f64 {
        1.0
    }

    fn gamma(&self) -> f64 {
        0.0
    }

    /// Per-video draw probabilities replacing uniform shuffling.
    fn sampling_weights(&self) -> Option<&[f64]> {
        None
    }
}

/// Training-set statistics handed to strategy constructors.
#[derive(Clone, Debug, Default)]
pub struct VerbLossContext {
    pub n_verbs: usize,
    /// Primary verb of every event, grouped by video.
    pub video_verbs: Vec<Vec<VerbId>>,
    pub focal_gamma: f64,
}

impl VerbLossContext {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_verbs];
        for v in self.video_verbs.iter().flatten() {
            c[*v] += 1;
        }
        c
    }
}

#[derive(Debug)]
pub struct PlainCe;

impl VerbLoss for PlainCe {
    fn name(&self) -> &str {
        "plain"
    }
}

/// Class weights `N / (C * n_c)` over the `C` classes present, so uniform
/// frequencies give weight 1 everywhere.
#[derive(Debug)]
pub struct ReweightedCe {
    weights: Vec<f64>,
}

impl ReweightedCe {
    pub fn from_counts(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let present = counts.iter().filter(|&&c| c > 0).count().max(1);
        let weights = counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    1.0
                } else {
                    total as f64 / (present as f64 * c as f64)
                }
            })
            .collect();
        Self { weights }
    }
}

impl VerbLoss for ReweightedCe {
    fn name(&self) -> &str {
        "reweighted"
    }

    fn class_weight(&self, verb: VerbId) -> f64 {
        self.weights.get(verb).copied().unwrap_or(1.0)
    }
}

#[derive(Debug)]
pub struct FocalCe {
    pub gamma: f64,
}

impl VerbLoss for FocalCe {
    fn name(&self) -> &str {
        "focal"
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Plain cross-entropy with videos drawn by [`balanced_sample_weights`].
#[derive(Debug)]
pub struct BalancedSampling {
    weights: Vec<f64>,
}

impl VerbLoss for BalancedSampling {
    fn name(&self) -> &str {
        "balanced-sampling"
    }

    fn sampling_weights(&self) -> Option<&[f64]> {
        Some(&self.weights)
    }
}

type Constructor = fn(&VerbLossContext) -> Result<Box<dyn VerbLoss>>;

/// Verb-loss strategies selectable by name at run time.
pub struct VerbLossRegistry {
    entries: BTreeMap<String, Constructor>,
}

impl Default for VerbLossRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("plain", |_| Ok(Box::new(PlainCe)));
        r.register("reweighted", |ctx| Ok(Box::new(ReweightedCe::from_counts(&ctx.class_counts()))));
        r.register("focal", |ctx| {
            if !(ctx.focal_gamma > 0.0) {
                return Err(Error::Config {
                    key: "focal_gamma".into(),
                    msg: "must be positive in focal mode".into(),
                });
            }
            Ok(Box::new(FocalCe { gamma: ctx.focal_gamma }))
        });
        r.register("balanced-sampling", |ctx| {
            Ok(Box::new(BalancedSampling {
                weights: balanced_sample_weights(&ctx.video_verbs),
            }))
        });
        r
    }
}

impl VerbLossRegistry {
    pub fn register(&mut self, name: &str, make: Constructor) {
        self.entries.insert(name.to_string(), make);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, ctx: &VerbLossContext) -> Result<Box<dyn VerbLoss>> {
        let make = self.entries.get(name).ok_or_else(|| Error::Config {
            key: "verb_loss_mode".into(),
            msg: format!("unknown mode `{name}`; registered: {}", self.names().join(", ")),
        })?;
        make(ctx)
    }
}

/// Per-video weight: mean over its events of the inverse frequency of the
/// event's verb, normalised to sum to one.
pub fn balanced_sample_weights(video_verbs: &[Vec<VerbId>]) -> Vec<f64> {
    let mut counts: BTreeMap<VerbId, usize> = BTreeMap::new();
    for v in video_verbs.iter().flatten() {
        *counts.entry(*v).or_default() += 1;
    }
    let raw: Vec<f64> = video_verbs
        .iter()
        .map(|vs| {
            if vs.is_empty() {
                0.0
            } else {
                vs.iter().map(|v| 1.0 / counts[v] as f64).sum::<f64>() / vs.len() as f64
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        raw
    }
}

/// Mean over events of the strategy-weighted (focal) cross-entropy.
pub fn verb_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, gt: &[VerbId], strategy: &dyn VerbLoss) -> Result<Var> {
    let (e, v) = (g.value(logits).rows(), g.value(logits).cols());
    if gt.len() != e {
        return Err(Error::Shape(format!("{} verb targets for {e} events", gt.len())));
    }
    if let Some(&bad) = gt.iter().find(|&&t| t >= v) {
        return Err(Error::UnknownVerb(bad));
    }
    let weights: Vec<T> = gt
        .iter()
        .map(|&t| T::from_f64_lossy(strategy.class_weight(t) / e as f64))
        .collect();
    Ok(g.cross_entropy(logits, gt, &weights, T::from_f64_lossy(strategy.gamma())))
}

/// Mean binary cross-entropy over every `(event, role)` decision.
pub fn role_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[T]) -> Result<Var> {
    let n = g.value(logits).len();
    if targets.len() != n {
        return Err(Error::Shape(format!("{} role targets for {n} logits", targets.len())));
    }
    Ok(g.bce_with_logits(logits, targets, T::one() / T::from_usize(n).unwrap()))
}

/// Sum over sequences of each sequence's mean token cross-entropy.
pub fn caption_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    if flat.len() != g.value(logits).rows() {
        return Err(Error::Shape(format!("{} caption targets for {} logit rows", flat.len(), g.value(logits).rows())));
    }
    let weights: Vec<T> = targets
        .iter()
        .flat_map(|t| std::iter::repeat_n(T::one() / T::from_usize(t.len()).unwrap(), t.len()))
        .collect();
    Ok(g.cross_entropy(logits, &flat, &weights, T::zero()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub verb: f64,
    pub role: f64,
    pub caption: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            verb: 1.0,
            role: 1.0,
            caption: 1.0,
        }
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub verb: f64,
    pub role: f64,
    pub caption: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn weighted(verb: f64, role: f64, caption: f64, w: &LossWeights) -> Self {
        Self {
            verb,
            role,
            caption,
            total: w.verb * verb + w.role * role + w.caption * caption,
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.verb += o.verb;
        self.role += o.role;
        self.caption += o.caption;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.verb *= s;
        self.role *= s;
        self.caption *= s;
        self.total *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.verb.is_finite() && self.role.is_finite() && self.caption.is_finite() && self.total.is_finite()
    }
}

/// `w_v * verb + w_r * role + w_c * caption` on the tape. Absent terms count as zero.
pub fn total_loss<T: Real>(g: &mut Graph<'_, T>, verb: Option<Var>, role: Option<Var>, caption: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, weight) in [(verb, w.verb), (role, w.role), (caption, w.caption)] {
        if let Some(t) = term {
            let s = g.scale(t, T::from_f64_lossy(weight));
            acc = Some(match acc {
                Some(a) => g.add(a, s),
                None => s,
            });
        }
    }
    acc.ok_or_else(|| Error::Invalid("no loss term to optimise".into()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    fn logits(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| f(i / cols, i % cols)).collect()).unwrap()
    }

    fn value(g: &Graph<'_, f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn uniform_verb_logits_give_log_classes() {
        let mut g = Graph::<f64>::new();
        let z = g.input(logits(5, 20, |_, _| 0.0));
        let l = verb_loss(&mut g, z, &[0, 3, 7, 19, 2], &PlainCe).unwrap();
        assert!((value(&g, l) - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut g = Graph::<f64>::new();
        let z = g.input(logits(2, 3, |r, c| if c == r { 1e3 } else { 0.0 }));
        let l = verb_loss(&mut g, z, &[0, 1], &PlainCe).unwrap();
        assert!(value(&g, l) < 1e-12);
        let z = g.input(logits(2, 3, |r, c| if c == r { 1e3 } else { 0.0 }));
        assert!(matches!(verb_loss(&mut g, z, &[0, 3], &PlainCe), Err(Error::UnknownVerb(3))));
    }

    #[test]
    fn focal_at_p_point_nine() {
        // logits (ln 9, 0) give p = 0.9 for class 0
        let mut g = Graph::<f64>::new();
        let z = g.input(logits(1, 2, |_, c| if c == 0 { 9f64.ln() } else { 0.0 }));
        let l = verb_loss(&mut g, z, &[0], &FocalCe { gamma: 2.0 }).unwrap();
        let oracle = 0.01 * -(0.9f64.ln());
        assert!((value(&g, l) - oracle).abs() < 1e-12);
        assert!((value(&g, l) - 0.001054).abs() < 1e-6);
    }

    #[test]
    fn role_loss_cases() {
        let mut g = Graph::<f64>::new();
        let z = g.input(logits(5, 11, |_, _| 0.0));
        let t: Vec<f64> = (0..55).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let l = role_loss(&mut g, z, &t).unwrap();
        assert!((value(&g, l) - 2f64.ln()).abs() < 1e-12);
        let z = g.input(logits(5, 11, |r, c| if t[r * 11 + c] == 1.0 { 800.0 } else { -800.0 }));
        let l = role_loss(&mut g, z, &t).unwrap();
        assert!(value(&g, l) < 1e-12);
    }

    #[test]
    fn role_loss_matches_scalar_oracle() {
        let zt = logits(5, 11, |r, c| ((r * 11 + c) as f64 * 1.7).sin() * 4.0);
        let t: Vec<f64> = (0..55).map(|i| (i % 4 == 1) as u8 as f64).collect();
        let mut oracle = 0.0;
        for (i, &z) in zt.data().iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            oracle -= t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln();
        }
        oracle /= 55.0;
        let mut g = Graph::<f64>::new();
        let z = g.input(zt);
        let l = role_loss(&mut g, z, &t).unwrap();
        assert!((value(&g, l) - oracle).abs() < 1e-6);
    }

    #[test]
    fn caption_loss_cases() {
        let mut g = Graph::<f64>::new();
        let z = g.input(logits(3, 54, |_, _| 0.0));
        let l = caption_loss(&mut g, z, &[vec![4, 2], vec![2]]).unwrap();
        assert!((value(&g, l) - 2.0 * 54f64.ln()).abs() < 1e-12);

        let targets = vec![vec![5, 6, 2], vec![7, 2]];
        let zt = logits(5, 10, |r, c| ((r * 10 + c) as f64 * 0.61).cos() * 3.0);
        let mut oracle = 0.0;
        let mut row = 0;
        for seq in &targets {
            let mut s = 0.0;
            for &tok in seq {
                let r = zt.row(row);
                let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                s += lse - r[tok];
                row += 1;
            }
            oracle += s / seq.len() as f64;
        }
        let z = g.input(zt);
        let l = caption_loss(&mut g, z, &targets).unwrap();
        assert!((value(&g, l) - oracle).abs() < 1e-6);

        let perfect = g.input(logits(2, 4, |r, c| if c == [1, 2][r] { 1e3 } else { 0.0 }));
        let l = caption_loss(&mut g, perfect, &[vec![1, 2]]).unwrap();
        assert!(value(&g, l) < 1e-12);
    }

    #[test]
    fn total_loss_combines_weighted_terms() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::scalar(1.0));
        let b = g.input(Tensor::scalar(2.0));
        let c = g.input(Tensor::scalar(3.0));
        let t = total_loss(&mut g, Some(a), Some(b), Some(c), &LossWeights::default()).unwrap();
        assert_eq!(value(&g, t), 6.0);
        let w = LossWeights {
            verb: 0.0,
            role: 0.0,
            caption: 1.0,
        };
        let t = total_loss(&mut g, Some(a), Some(b), Some(c), &w).unwrap();
        assert_eq!(value(&g, t), 3.0);
        assert_eq!(LossComponents::weighted(1.0, 2.0, 3.0, &w).total, 3.0);
    }

    #[test]
    fn balanced_weights_match_count_oracle() {
        let videos: Vec<Vec<usize>> = vec![
            vec![0, 0, 1],
            vec![1, 2],
            vec![0],
            vec![3, 0, 0, 1],
            vec![2, 2],
            vec![4],
            vec![0, 1],
            vec![1, 1, 1],
            vec![2, 0],
            vec![0, 0],
        ];
        // counts: 0 -> 9, 1 -> 7, 2 -> 4, 3 -> 1, 4 -> 1
        let inv = |v: usize| 1.0 / [9.0, 7.0, 4.0, 1.0, 1.0][v];
        let raw: Vec<f64> = videos
            .iter()
            .map(|vs| vs.iter().map(|&v| inv(v)).sum::<f64>() / vs.len() as f64)
            .collect();
        let z: f64 = raw.iter().sum();
        let w = balanced_sample_weights(&videos);
        for (a, b) in w.iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-9);
        }
        // the video holding the unique rarest verb outweighs the rest
        let top = w.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(top, w[5]);
        let uniform = balanced_sample_weights(&[vec![0], vec![1], vec![2]]);
        assert!(uniform.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn registry_resolves_names() {
        let reg = VerbLossRegistry::default();
        let ctx = VerbLossContext {
            n_verbs: 3,
            video_verbs: vec![vec![0, 1], vec![2]],
            focal_gamma: 2.0,
        };
        for n in ["plain", "reweighted", "focal", "balanced-sampling"] {
            assert_eq!(reg.create(n, &ctx).unwrap().name(), n);
        }
        let err = reg.create("zipf", &ctx).unwrap_err().to_string();
        assert!(err.contains("balanced-sampling"));
        assert!(reg.create("balanced-sampling", &ctx).unwrap().sampling_weights().is_some());
    }

    proptest! {
        #[test]
        fn focal_with_zero_gamma_is_plain(vals in proptest::collection::vec(-6.0f64..6.0, 15), gt in proptest::collection::vec(0usize..5, 3)) {
            let zt = Tensor::new(vec![3, 5], vals).unwrap();
            let mut g = Graph::<f64>::new();
            let z = g.input(zt);
            let a = verb_loss(&mut g, z, &gt, &PlainCe).unwrap();
            let b = verb_loss(&mut g, z, &gt, &FocalCe { gamma: 0.0 }).unwrap();
            prop_assert!((value(&g, a) - value(&g, b)).abs() < 1e-12);
        }

        #[test]
        fn reweighting_is_neutral_under_uniform_counts(vals in proptest::collection::vec(-6.0f64..6.0, 20), per in 1usize..5) {
            let rw = ReweightedCe::from_counts(&[per; 4]);
            let zt = Tensor::new(vec![5, 4], vals).unwrap();
            let gt = [0, 1, 2, 3, 1];
            let mut g = Graph::<f64>::new();
            let z = g.input(zt);
            let a = verb_loss(&mut g, z, &gt, &PlainCe).unwrap();
            let b = verb_loss(&mut g, z, &gt, &rw).unwrap();
            prop_assert!((value(&g, a) - value(&g, b)).abs() < 1e-12);
        }
    }
}
