use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use gvsr::config::{describe_keys, RunConfig};
use gvsr::data::{
    load_dataset_unchecked, read_lexicon, validate_dataset, Dataset, Split, ValidationOptions, VideoSample, LEXICON,
    MANIFEST,
};
use gvsr::metrics::{evaluate, EvalOptions, GroundingOptions, IdfScope};
use gvsr::model::{ObjectChannel, QuerySource, TrainedModel};
use gvsr::predict::{read_predictions, write_predictions, Predictor, RegimeRegistry};
use gvsr::synth::{generate, write_synth, SynthConfig};
use gvsr::train::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "gvsr", version, about = "Grounded video situation recognition pipeline")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus an epoch log.
    Train(TrainArgs),
    /// Run a checkpoint over a dataset split and write prediction JSONL.
    Predict(PredictArgs),
    /// Score a prediction file against a dataset.
    Eval(EvalArgs),
    /// Write the per-role grounding of a checkpoint as CSV.
    Ground(PredictArgs),
    /// Check a dataset directory and report every problem found.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small synthetic-overfit preset instead of the defaults.
    #[arg(long)]
    overfit_preset: bool,
    /// `key=value` overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> gvsr::Result<RunConfig> {
        let mut cfg = match (&self.config, self.overfit_preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, true) => RunConfig::synthetic_overfit(),
            (None, false) => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training videos.
    #[arg(long, default_value_t = 50)]
    n_videos: usize,
    /// Validation videos (these carry box annotations).
    #[arg(long, default_value_t = 20)]
    n_val: usize,
    #[arg(long, default_value_t = 20)]
    n_verbs: usize,
    #[arg(long, default_value_t = 50)]
    n_words: usize,
    #[arg(long, default_value_t = 64)]
    d_vid: usize,
    #[arg(long, default_value_t = 64)]
    d_obj: usize,
    #[arg(long, default_value_t = 11)]
    frames: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Allow planted entities on event border frames.
    #[arg(long)]
    border_plants: bool,
    /// Zipf-distributed verb frequencies.
    #[arg(long)]
    zipf: bool,
    /// `fps` and `M` are taken from the config.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Objects,
    EventCopies,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryArg {
    Event,
    GtVerb,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Epochs between periodic checkpoints (0: final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Epochs between validation passes (0: never).
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// What the encoder sees as object tokens.
    #[arg(long, value_enum, default_value_t = ChannelArg::Objects)]
    object_channel: ChannelArg,
    /// What is added to role queries besides the role embedding.
    #[arg(long, value_enum, default_value_t = QueryArg::Event)]
    query_source: QueryArg,
    /// Give the role decoder its own event position table.
    #[arg(long)]
    separate_event_pe: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// gt-roles, pred-gt-map (alias pred-verb-gt-map) or pred-pred.
    #[arg(long, default_value = "pred-pred")]
    regime: String,
    /// Include the dense attention map of every role.
    #[arg(long)]
    dump_alpha: bool,
    /// Role threshold; defaults to the checkpoint's `theta_role`.
    #[arg(long)]
    theta_role: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Report JSON path; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// IoU thresholds.
    #[arg(long = "theta", default_values_t = [0.3, 0.5])]
    thetas: Vec<f64>,
    /// Score verbs against the primary annotation only.
    #[arg(long)]
    primary_verb_only: bool,
    /// Compute CIDEr-Vb/Arg with per-group IDF.
    #[arg(long)]
    per_group_idf: bool,
    /// Normalise grounding by every visual GT role, annotated or not.
    #[arg(long)]
    strict_grounding: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Expected events per video.
    #[arg(long, default_value_t = 5)]
    events: usize,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err: anyhow::Error = e.into();
        let code = match err.downcast_ref::<gvsr::Error>() {
            Some(gvsr::Error::Config { .. }) => 2,
            _ => 1,
        };
        Self { code, err }
    }
}

fn usage(err: gvsr::Error) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn select(ds: &Dataset, split: SplitArg) -> Vec<&VideoSample> {
    match split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Val => ds.split(Split::Val),
        SplitArg::All => ds.samples.iter().collect(),
    }
}

fn load(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn run_synth(a: &SynthArgs) -> Result<(), Failure> {
    let run = a.config.resolve().map_err(usage)?;
    let cfg = SynthConfig {
        n_videos: a.n_videos,
        n_val: a.n_val,
        n_verbs: a.n_verbs,
        n_words: a.n_words,
        d_vid: a.d_vid,
        d_obj: a.d_obj,
        m: run.m,
        frames: a.frames,
        fps: run.fps,
        sigma: a.sigma,
        seed: a.seed,
        border_plants: a.border_plants,
        zipf: a.zipf,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    write_synth(&a.out, &data)?;
    println!("wrote {} videos to {}", data.samples.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<(), Failure> {
    let run = a.config.resolve().map_err(usage)?;
    let ds = load(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("run.cfg"), run.to_text())?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        eval_every: a.eval_every,
        clip_norm: a.clip_norm,
        object_channel: match a.object_channel {
            ChannelArg::Objects => ObjectChannel::Objects,
            ChannelArg::EventCopies => ObjectChannel::EventCopies,
        },
        query_source: match a.query_source {
            QueryArg::Event => QuerySource::Event,
            QueryArg::GtVerb => QuerySource::GtVerb,
        },
        share_event_pe: !a.separate_event_pe,
        resume: a.resume.clone(),
    };
    let out = train(&ds, &run, &opts)?;
    if let Some(last) = out.log.last() {
        println!("epoch {} loss {:.5}", last.epoch, last.loss.total);
    }
    println!("checkpoint {}", a.out.join("last.ckpt").display());
    Ok(())
}

fn predictions(a: &PredictArgs) -> Result<(Vec<gvsr::predict::VideoPrediction>, TrainedModel), Failure> {
    let bundle = TrainedModel::load(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let selector = RegimeRegistry::default().get(&a.regime).map_err(usage)?;
    let mut p = Predictor::new(&bundle);
    p.dump_alpha = a.dump_alpha;
    if let Some(t) = a.theta_role {
        p.theta_role = t;
    }
    let samples = select(&ds, a.split);
    let preds = p.predict_all(&samples, selector.as_ref())?;
    Ok((preds, bundle))
}

fn run_predict(a: &PredictArgs) -> Result<(), Failure> {
    let (preds, _) = predictions(a)?;
    write_predictions(&a.out, &preds)?;
    println!("wrote {} video predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn run_ground(a: &PredictArgs) -> Result<(), Failure> {
    let (preds, _) = predictions(a)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(["video", "event", "role", "frame", "box", "score"])?;
    for v in &preds {
        for e in &v.events {
            for r in &e.roles {
                let Some(g) = &r.grounding else { continue };
                let b = g.bbox;
                w.write_record([
                    v.video.clone(),
                    e.event.to_string(),
                    r.role.name().to_string(),
                    g.frame.to_string(),
                    format!("{} {} {} {}", b.x1, b.y1, b.x2, b.y2),
                    format!("{:.6}", g.score),
                ])?;
            }
        }
    }
    w.flush()?;
    println!("wrote grounding for {} videos to {}", preds.len(), a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), Failure> {
    let ds = load(&a.data)?;
    let preds = read_predictions(&a.predictions)?;
    let samples: Vec<&VideoSample> = ds.samples.iter().collect();
    let opts = EvalOptions {
        thetas: a.thetas.clone(),
        primary_verb_only: a.primary_verb_only,
        idf_scope: if a.per_group_idf { IdfScope::PerGroup } else { IdfScope::Global },
        grounding: GroundingOptions {
            strict: a.strict_grounding,
            ..GroundingOptions::default()
        },
    };
    let report = evaluate(&preds, &samples, &opts)?;
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn run_validate(a: &ValidateArgs) -> Result<(), Failure> {
    let lexicon = read_lexicon(&a.data.join(LEXICON))?;
    let mut outcome = load_dataset_unchecked(&a.data.join(MANIFEST))?;
    let opts = ValidationOptions {
        expected_events: Some(a.events),
        ..ValidationOptions::default()
    };
    outcome.issues.extend(validate_dataset(&outcome.samples, &lexicon, &opts));
    for issue in &outcome.issues {
        println!("{issue}");
    }
    println!("{} videos read, {} issues", outcome.samples.len(), outcome.issues.len());
    if outcome.issues.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("dataset {} failed validation", a.data.display()).into())
    }
}

fn main() -> ExitCode {
    let keys = describe_keys();
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommand("train", |c| c.after_help(keys.clone()))
        .mut_subcommand("synth", |c| c.after_help(keys.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Ground(a) => run_ground(a),
        Command::Validate(a) => run_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
