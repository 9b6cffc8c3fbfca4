#![allow(dead_code)]

use std::collections::BTreeSet;
use std::io::Write;

use gvsr::data::{Role, VideoSample};
use gvsr::model::{build_role_queries, AlphaReduction, CaptionBatch, ModelConfig, ObjectChannel, QuerySource, SampleInputs};
use gvsr::synth::{generate, SynthConfig};
use gvsr::train::TrainExample;

/// Writes past the test harness's capture so result lines always show.
pub fn report(line: &str) {
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn verdict(ok: bool, name: &str, detail: &str) {
    report(&format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
}

/// `d = 8`, 2 heads, one layer per stage, vocabulary of 12.
pub fn micro_config(d_vid: usize, d_obj: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 32,
        dropout: 0.0,
        verb_hidden: 16,
        role_hidden: 16,
        n_verbs: 6,
        vocab_size: 12,
        d_vid,
        d_obj,
        max_events: 5,
        max_caption_len: 6,
        share_event_pe: true,
        object_channel: ObjectChannel::Objects,
        query_source: QuerySource::Event,
        alpha_reduction: AlphaReduction::Mean,
    }
}

/// Small synthetic videos with narrow features.
pub fn tiny_videos(n: usize, seed: u64, border: bool) -> Vec<VideoSample> {
    generate(&SynthConfig {
        n_videos: n,
        n_val: 0,
        n_verbs: 6,
        d_vid: 7,
        d_obj: 6,
        m: 4,
        seed,
        border_plants: border,
        ..SynthConfig::default()
    })
    .unwrap()
    .samples
}

/// Hand-built training example whose tokens fit a 12-word vocabulary.
pub fn micro_example(sample: &VideoSample) -> TrainExample {
    let sets: Vec<BTreeSet<Role>> = vec![
        [Role::Arg0, Role::Arg1].into_iter().collect(),
        [Role::Arg0].into_iter().collect(),
        [Role::ALoc, Role::Arg2].into_iter().collect(),
        BTreeSet::new(),
        [Role::AMnr].into_iter().collect(),
    ];
    let mut role_targets = vec![0.0; 5 * Role::COUNT];
    for (i, s) in sets.iter().enumerate() {
        for r in s {
            role_targets[i * Role::COUNT + r.id()] = 1.0;
        }
    }
    let queries = build_role_queries(&sets);
    let refs: Vec<Vec<u32>> = (0..queries.len())
        .map(|q| (0..1 + q % 3).map(|j| 4 + ((q * 3 + j) % 8) as u32).collect())
        .collect();
    TrainExample {
        id: sample.id.clone(),
        inputs: SampleInputs::from_sample(sample).unwrap(),
        verbs: vec![0, 3, 5, 1, 2],
        role_targets,
        queries,
        captions: CaptionBatch::new(&refs, 6),
    }
}
