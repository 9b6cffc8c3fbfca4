//! End-to-end optimisation of all three stages.

mod adam;
mod loss;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{
    balanced_sample_weights, caption_loss, role_loss, total_loss, verb_loss, BalancedSampling, FocalCe, LossComponents,
    LossWeights, PlainCe, ReweightedCe, VerbLoss, VerbLossContext, VerbLossRegistry,
};

use crate::config::RunConfig;
use crate::data::{Dataset, Role, Split, VerbId, VideoSample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{
    build_role_queries, CaptionBatch, Model, ModelConfig, Network, ObjectChannel, QuerySource, RoleQuery,
    SampleInputs, TrainedModel,
};
use crate::nn::{read_checkpoint, write_checkpoint, ParamSet};
use crate::predict::{GtRoles, Predictor};
use crate::tensor::{Graph, Real, Tensor, Var};

/// One video prepared for teacher-forced training.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub inputs: SampleInputs,
    /// Primary verb per event.
    pub verbs: Vec<VerbId>,
    /// `events x 11` role membership, row-major.
    pub role_targets: Vec<f32>,
    pub queries: Vec<RoleQuery>,
    /// One reference per query, in query order.
    pub captions: CaptionBatch,
}

impl TrainExample {
    pub fn new(sample: &VideoSample, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let ann = &sample.annotation;
        if ann.events.len() != sample.num_events() {
            return Err(Error::Invalid(format!(
                "video {}: {} annotated events for {} events",
                sample.id,
                ann.events.len(),
                sample.num_events()
            )));
        }
        let verbs = ann
            .events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.primary_verb()
                    .ok_or_else(|| Error::Invalid(format!("video {} event {i} has no verb", sample.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let sets: Vec<BTreeSet<Role>> = ann.events.iter().map(|e| e.role_set()).collect();
        let mut role_targets = vec![0.0f32; sets.len() * Role::COUNT];
        for (i, s) in sets.iter().enumerate() {
            for r in s {
                role_targets[i * Role::COUNT + r.id()] = 1.0;
            }
        }
        let queries = build_role_queries(&sets);
        let refs: Vec<Vec<u32>> = queries
            .iter()
            .map(|q| {
                let texts = &ann.events[q.event].roles[&q.role];
                texts
                    .first()
                    .map(|t| vocab.encode(t))
                    .ok_or_else(|| Error::Invalid(format!("video {} event {} role {} has no caption", sample.id, q.event, q.role.name())))
            })
            .collect::<Result<_>>()?;
        let captions = CaptionBatch::new(&refs, max_len);
        if captions.truncated > 0 {
            log::warn!("video {}: {} captions truncated to {max_len} tokens", sample.id, captions.truncated);
        }
        Ok(Self {
            id: sample.id.clone(),
            inputs: SampleInputs::from_sample(sample)?,
            verbs,
            role_targets,
            queries,
            captions,
        })
    }
}

/// Total loss of one video on the tape, plus its component values.
/// Stages 2 and 3 are skipped when the caption weight is zero.
pub fn sample_loss<'p, T: Real>(
    g: &mut Graph<'p, T>,
    net: &Network,
    ps: &'p ParamSet<T>,
    ex: &TrainExample,
    strategy: &dyn VerbLoss,
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let s1 = net.encoder.forward(g, ps, &ex.inputs)?;
    let lv = verb_loss(g, s1.verb_logits, &ex.verbs, strategy)?;
    let targets: Vec<T> = ex.role_targets.iter().map(|&t| T::from_f64_lossy(t as f64)).collect();
    let lr = role_loss(g, s1.role_logits, &targets)?;
    let lc = if w.caption != 0.0 && !ex.queries.is_empty() {
        let s2 = net.roles.forward(g, ps, &ex.inputs, &s1, &ex.queries, Some(&ex.verbs))?;
        let logits = net.captions.forward(g, ps, s2.z, &ex.captions.inputs)?;
        Some(caption_loss(g, logits, &ex.captions.targets)?)
    } else {
        None
    };
    let scalar = |g: &Graph<'p, T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN));
    let comps = LossComponents::weighted(scalar(g, Some(lv)), scalar(g, Some(lr)), scalar(g, lc), w);
    let total = total_loss(g, Some(lv), Some(lr), lc, w)?;
    Ok((total, comps))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Where checkpoints and the epoch log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Epochs between validation passes; 0 disables them.
    pub eval_every: usize,
    pub clip_norm: Option<f64>,
    pub object_channel: ObjectChannel,
    pub query_source: QuerySource,
    pub share_event_pe: bool,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            checkpoint_every: 0,
            eval_every: 0,
            clip_norm: None,
            object_channel: ObjectChannel::Objects,
            query_source: QuerySource::Event,
            share_event_pe: true,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
    pub optimizer: Adam,
    /// Sum of per-step mean components over the current run.
    pub running: LossComponents,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: usize,
    adam_t: u64,
    adam: AdamConfig,
    running: LossComponents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub acc_at_1: f64,
    pub cider: f64,
    pub rouge_l: f64,
    pub exact_match: f64,
    pub role_macro_f1: f64,
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub loss: LossComponents,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<ValSummary>,
}

pub struct TrainOutcome {
    pub bundle: TrainedModel,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Checkpoint of a bundle plus optimiser moments and counters.
pub fn save_state(path: &Path, bundle: &TrainedModel, state: &TrainState) -> Result<()> {
    let opt = &state.optimizer;
    let mut extra = Vec::new();
    for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
        for ((name, _), t) in bundle.model.params.iter().zip(moments) {
            extra.push((format!("{prefix}{name}"), t.clone()));
        }
    }
    let meta = StateMeta {
        epoch: state.epoch,
        step: state.step,
        adam_t: opt.t,
        adam: opt.cfg,
        running: state.running,
    };
    let meta = serde_json::json!({ "train_state": meta });
    write_checkpoint(path, &bundle.to_checkpoint(extra, meta))
}

pub fn load_state(path: &Path) -> Result<(TrainedModel, TrainState)> {
    let ckpt = read_checkpoint(path)?;
    let bundle = TrainedModel::from_checkpoint(&ckpt)?;
    let meta: StateMeta = ckpt
        .meta
        .get("train_state")
        .cloned()
        .ok_or_else(|| Error::Format(format!("{}: no training state", path.display())))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(format!("training state: {e}"))))?;
    let moment = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
        bundle
            .model
            .params
            .iter()
            .map(|(name, _)| {
                let key = format!("{prefix}{name}");
                ckpt.tensors
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
            })
            .collect()
    };
    let optimizer = Adam {
        cfg: meta.adam,
        t: meta.adam_t,
        m: moment("adam.m.")?,
        v: moment("adam.v.")?,
    };
    Ok((
        bundle,
        TrainState {
            epoch: meta.epoch,
            step: meta.step,
            optimizer,
            running: meta.running,
        },
    ))
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Video order for one epoch: a seeded shuffle, or weighted draws with replacement.
fn epoch_order(n: usize, seed: u64, epoch: usize, weights: Option<&[f64]>) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, epoch as u64, 1]));
    match weights {
        Some(w) => {
            let dist = WeightedIndex::new(w).map_err(|e| Error::Invalid(format!("sampling weights: {e}")))?;
            Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
        }
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            Ok(idx)
        }
    }
}

fn write_json_line<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).map_err(|e| Error::json(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn validate(bundle: &TrainedModel, val: &[&VideoSample]) -> Result<ValSummary> {
    let preds = Predictor::new(bundle).predict_all(val, &GtRoles)?;
    let r = evaluate(&preds, val, &EvalOptions::default())?;
    Ok(ValSummary {
        acc_at_1: r.verb.acc_at_1,
        cider: r.srl.cider,
        rouge_l: r.srl.rouge_l,
        exact_match: r.srl.exact_match,
        role_macro_f1: r.roles.macro_f1,
    })
}

struct Trainer<'a> {
    examples: Vec<TrainExample>,
    strategy: Box<dyn VerbLoss>,
    weights: LossWeights,
    run: &'a RunConfig,
}

impl Trainer<'_> {
    /// Mean loss over `batch` and its summed per-sample gradients, in batch order.
    fn batch_gradients(&self, model: &Model, batch: &[usize], epoch: usize, step: usize) -> Result<(Vec<Tensor<f32>>, LossComponents)> {
        let inv = 1.0 / batch.len() as f64;
        let per: Vec<Result<(Option<Vec<Tensor<f32>>>, LossComponents)>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let rng = ChaCha8Rng::seed_from_u64(mix(&[self.run.seed, epoch as u64, step as u64, k as u64, 2]));
                let mut g = Graph::training(rng);
                let (loss, comps) =
                    sample_loss(&mut g, &model.net, &model.params, &self.examples[i], self.strategy.as_ref(), &self.weights)?;
                if !comps.is_finite() {
                    return Ok((None, comps));
                }
                let scaled = g.scale(loss, inv as f32);
                let mut grads = model.params.zeros_like();
                g.backward(scaled).accumulate_into(&mut grads);
                Ok((Some(grads), comps))
            })
            .collect();
        let mut acc = model.params.zeros_like();
        let mut mean = LossComponents::default();
        for (k, r) in per.into_iter().enumerate() {
            let (grads, comps) = r?;
            let Some(grads) = grads else {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("video {}: {comps:?}", self.examples[batch[k]].id),
                });
            };
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            mean.add(&comps);
        }
        mean.scale(inv);
        Ok((acc, mean))
    }
}

fn dump_nonfinite(dir: Option<&Path>, err: &Error, params: &ParamSet<f32>) {
    let Some(dir) = dir else { return };
    let bad: Vec<&str> = params
        .iter()
        .filter(|(_, t)| t.data().iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n)
        .collect();
    let diag = serde_json::json!({ "error": err.to_string(), "non_finite_params": bad });
    let path = dir.join("nonfinite.json");
    if let Err(e) = fs::write(&path, diag.to_string()) {
        log::error!("cannot write {}: {e}", path.display());
    }
}

/// Trains on the dataset's training split for `run.epochs` epochs.
pub fn train(dataset: &Dataset, run: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    run.check()?;
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Invalid("dataset has no training videos".into()));
    }
    let val_set = dataset.split(Split::Val);
    for s in &dataset.samples {
        if s.slots_per_frame != run.m {
            return Err(Error::Config {
                key: "M".into(),
                msg: format!("video {} has {} proposals per frame, config says {}", s.id, s.slots_per_frame, run.m),
            });
        }
        if (s.schedule.fps - run.fps).abs() > 1e-9 {
            return Err(Error::Config {
                key: "fps".into(),
                msg: format!("video {} is sampled at {} fps, config says {}", s.id, s.schedule.fps, run.fps),
            });
        }
    }

    let (mut bundle, mut state) = match &opts.resume {
        Some(path) => {
            let (mut b, s) = load_state(path)?;
            b.run = run.clone();
            (b, s)
        }
        None => {
            let vocab = Vocabulary::build(&dataset.train_captions(), 1)?;
            let first = train_set[0];
            let mut cfg = ModelConfig::from_run(run, dataset.lexicon.len(), vocab.len(), first.d_vid(), first.d_obj());
            cfg.object_channel = opts.object_channel;
            cfg.query_source = opts.query_source;
            cfg.share_event_pe = opts.share_event_pe;
            let model = Model::new(cfg, run.seed)?;
            let mut acfg = AdamConfig::with_lr(run.lr);
            acfg.clip_norm = opts.clip_norm;
            let optimizer = Adam::new(acfg, &model.params);
            (
                TrainedModel {
                    model,
                    vocab,
                    lexicon: dataset.lexicon.clone(),
                    run: run.clone(),
                },
                TrainState {
                    epoch: 0,
                    step: 0,
                    optimizer,
                    running: LossComponents::default(),
                },
            )
        }
    };
    let max_len = bundle.model.cfg().max_caption_len;
    let examples = train_set
        .iter()
        .map(|s| TrainExample::new(s, &bundle.vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let ctx = VerbLossContext {
        n_verbs: dataset.lexicon.len(),
        video_verbs: examples.iter().map(|e| e.verbs.clone()).collect(),
        focal_gamma: run.focal_gamma,
    };
    let trainer = Trainer {
        strategy: VerbLossRegistry::default().create(&run.verb_loss_mode, &ctx)?,
        examples,
        weights: LossWeights {
            verb: run.loss_w_verb,
            role: run.loss_w_role,
            caption: run.loss_w_caption,
        },
        run,
    };

    let out_dir = opts.out_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_path = out_dir.map(|d| d.join("epochs.jsonl"));
    let mut log = Vec::new();
    let mut best_verb = f64::NEG_INFINITY;
    let mut best_cider = f64::NEG_INFINITY;

    while state.epoch < run.epochs {
        let epoch = state.epoch;
        let order = epoch_order(trainer.examples.len(), run.seed, epoch, trainer.strategy.sampling_weights())?;
        let mut epoch_loss = LossComponents::default();
        let mut steps = 0;
        for batch in order.chunks(run.batch_size) {
            let (grads, comps) = match trainer.batch_gradients(&bundle.model, batch, epoch, state.step) {
                Ok(r) => r,
                Err(e) => {
                    dump_nonfinite(out_dir, &e, &bundle.model.params);
                    return Err(e);
                }
            };
            state.optimizer.step(&mut bundle.model.params, &grads)?;
            state.step += 1;
            state.running.add(&comps);
            epoch_loss.add(&comps);
            steps += 1;
        }
        epoch_loss.scale(1.0 / steps as f64);
        state.epoch += 1;
        let done = state.epoch;

        let val = if opts.eval_every > 0 && done % opts.eval_every == 0 && !val_set.is_empty() {
            Some(validate(&bundle, &val_set)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: done,
            steps,
            loss: epoch_loss,
            val,
        };
        log::info!("epoch {done}: loss {:.4} (verb {:.4} role {:.4} caption {:.4})", epoch_loss.total, epoch_loss.verb, epoch_loss.role, epoch_loss.caption);
        if let Some(dir) = out_dir {
            write_json_line(log_path.as_deref().unwrap(), &entry)?;
            if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 {
                save_state(&dir.join(format!("epoch-{done:04}.ckpt")), &bundle, &state)?;
            }
            if let Some(v) = &entry.val {
                if v.acc_at_1 > best_verb {
                    best_verb = v.acc_at_1;
                    save_state(&dir.join("best-verb.ckpt"), &bundle, &state)?;
                }
                if v.cider > best_cider {
                    best_cider = v.cider;
                    save_state(&dir.join("best-cider.ckpt"), &bundle, &state)?;
                }
            }
        }
        log.push(entry);
    }
    if let Some(dir) = out_dir {
        save_state(&dir.join("last.ckpt"), &bundle, &state)?;
    }
    Ok(TrainOutcome { bundle, state, log })
}
