//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.jsonl          one JSON object per video
//! <dir>/lexicon.json            verb table and verb -> roles mapping
//! <dir>/features/<id>.events.f32   container, shape [events, D_vid]
//! <dir>/features/<id>.objects.f32  container, shape [T*M, D_obj]
//! <dir>/features/<id>.boxes.json   proposal boxes, row-aligned with objects
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_frame_schedule, validate_dataset, BoundingBox, Event, ObjectProposal, SituationAnnotation, Split,
    ValidationIssue, ValidationOptions, VerbLexicon, VideoSample,
};
use crate::error::{Error, Result};
use crate::nn::blob;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
pub const LEXICON: &str = "lexicon.json";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    duration: f64,
    fps: f64,
    frame_size: [f64; 2],
    slots_per_frame: usize,
    events: Vec<[f64; 2]>,
    annotation: SituationAnnotation,
    event_features: String,
    object_features: String,
    boxes: String,
}

/// Header of a feature container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
}

impl FeatureHeader {
    fn f32_row_major(shape: &[usize]) -> Self {
        Self {
            dtype: "f32le".into(),
            shape: shape.to_vec(),
            order: "row-major".into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BoxEntry {
    frame: usize,
    slot: usize,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    frame_size: [f64; 2],
    proposals: Vec<BoxEntry>,
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<VideoSample>,
    pub lexicon: VerbLexicon,
}

impl Dataset {
    /// Loads and validates `<dir>/manifest.jsonl` against `<dir>/lexicon.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let lexicon = read_lexicon(&dir.join(LEXICON))?;
        let samples = load_dataset(&dir.join(MANIFEST), &lexicon)?;
        Ok(Self { samples, lexicon })
    }

    pub fn split(&self, split: Split) -> Vec<&VideoSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Every reference caption in the training split, for vocabulary building.
    pub fn train_captions(&self) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .flat_map(|s| s.annotation.events.iter())
            .flat_map(|e| e.roles.values().flatten().cloned())
            .collect()
    }
}

pub fn read_lexicon(path: &Path) -> Result<VerbLexicon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lex: VerbLexicon = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    VerbLexicon::new(lex.verbs)
}

/// Samples that parsed plus per-video problems found while reading.
pub struct LoadOutcome {
    pub samples: Vec<VideoSample>,
    pub issues: Vec<ValidationIssue>,
}

/// Reads every manifest line; unreadable videos become issues, not errors.
pub fn load_dataset_unchecked(manifest_path: &Path) -> Result<LoadOutcome> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let results: Vec<std::result::Result<VideoSample, ValidationIssue>> = lines
        .par_iter()
        .map(|&(lineno, line)| {
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| ValidationIssue {
                video: format!("line {}", lineno + 1),
                message: format!("malformed manifest entry: {e}"),
            })?;
            let id = entry.id.clone();
            load_entry(&root, entry).map_err(|e| ValidationIssue {
                video: id,
                message: e.to_string(),
            })
        })
        .collect();
    let mut samples = Vec::new();
    let mut issues = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(i) => issues.push(i),
        }
    }
    Ok(LoadOutcome { samples, issues })
}

/// Loads a manifest and checks every sample; any problem fails the load with
/// the full itemised list.
pub fn load_dataset(manifest_path: &Path, lexicon: &VerbLexicon) -> Result<Vec<VideoSample>> {
    let mut outcome = load_dataset_unchecked(manifest_path)?;
    outcome
        .issues
        .extend(validate_dataset(&outcome.samples, lexicon, &ValidationOptions::default()));
    if outcome.issues.is_empty() {
        Ok(outcome.samples)
    } else {
        Err(Error::Validation(
            outcome.issues.iter().map(ToString::to_string).collect(),
        ))
    }
}

fn read_features(path: &Path, what: &str) -> Result<Tensor<f32>> {
    let (header, payload): (FeatureHeader, Vec<f32>) = blob::read(path)?;
    if header.dtype != "f32le" || header.order != "row-major" {
        return Err(Error::Format(format!(
            "{what} file has dtype {} / order {}, expected f32le / row-major",
            header.dtype, header.order
        )));
    }
    let expected: usize = header.shape.iter().product();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{what} payload holds {} floats but header shape {:?} declares {expected}",
            payload.len(),
            header.shape
        )));
    }
    if header.shape.len() != 2 {
        return Err(Error::Format(format!("{what} must be 2-D, got {:?}", header.shape)));
    }
    Tensor::new(header.shape, payload)
}

fn load_entry(root: &Path, e: ManifestEntry) -> Result<VideoSample> {
    let events: Vec<Event> = e
        .events
        .iter()
        .enumerate()
        .map(|(i, &[s, t])| Event {
            index: i,
            start_s: s,
            end_s: t,
        })
        .collect();
    let schedule = build_frame_schedule(e.duration, &events, e.fps)?;
    let event_features = read_features(&root.join(&e.event_features), "event feature")?;
    let object_features = read_features(&root.join(&e.object_features), "object feature")?;
    let box_path = root.join(&e.boxes);
    let box_text = fs::read_to_string(&box_path).map_err(|err| Error::io(&box_path, err))?;
    let boxes: BoxFile = serde_json::from_str(&box_text).map_err(|err| Error::json(&box_path, err))?;
    if boxes.frame_size != e.frame_size {
        return Err(Error::Format(format!(
            "box file frame size {:?} differs from manifest {:?}",
            boxes.frame_size, e.frame_size
        )));
    }
    let proposals = boxes
        .proposals
        .into_iter()
        .map(|b| ObjectProposal {
            frame: b.frame,
            slot: b.slot,
            bbox: b.bbox,
        })
        .collect();
    Ok(VideoSample {
        id: e.id,
        split: e.split,
        duration_s: e.duration,
        events,
        schedule,
        frame_width: e.frame_size[0],
        frame_height: e.frame_size[1],
        slots_per_frame: e.slots_per_frame,
        event_features,
        proposals,
        object_features,
        annotation: e.annotation,
    })
}

fn feature_paths(id: &str) -> (String, String, String) {
    (
        format!("features/{id}.events.f32"),
        format!("features/{id}.objects.f32"),
        format!("features/{id}.boxes.json"),
    )
}

/// Writes the directory layout described at the top of this module.
pub fn write_dataset(dir: &Path, samples: &[VideoSample], lexicon: &VerbLexicon) -> Result<()> {
    fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
    let lex_path = dir.join(LEXICON);
    let lex = serde_json::to_string_pretty(lexicon).map_err(|e| Error::json(&lex_path, e))?;
    fs::write(&lex_path, lex + "\n").map_err(|e| Error::io(&lex_path, e))?;

    let mut manifest = String::new();
    for s in samples {
        let (ev_rel, obj_rel, box_rel) = feature_paths(&s.id);
        blob::write(
            &dir.join(&ev_rel),
            &FeatureHeader::f32_row_major(s.event_features.shape()),
            s.event_features.data(),
        )?;
        blob::write(
            &dir.join(&obj_rel),
            &FeatureHeader::f32_row_major(s.object_features.shape()),
            s.object_features.data(),
        )?;
        let box_file = BoxFile {
            frame_size: [s.frame_width, s.frame_height],
            proposals: s
                .proposals
                .iter()
                .map(|p| BoxEntry {
                    frame: p.frame,
                    slot: p.slot,
                    bbox: p.bbox,
                })
                .collect(),
        };
        let box_path: PathBuf = dir.join(&box_rel);
        let text = serde_json::to_string(&box_file).map_err(|e| Error::json(&box_path, e))?;
        fs::write(&box_path, text).map_err(|e| Error::io(&box_path, e))?;

        let entry = ManifestEntry {
            id: s.id.clone(),
            split: s.split,
            duration: s.duration_s,
            fps: s.schedule.fps,
            frame_size: [s.frame_width, s.frame_height],
            slots_per_frame: s.slots_per_frame,
            events: s.events.iter().map(|e| [e.start_s, e.end_s]).collect(),
            annotation: s.annotation.clone(),
            event_features: ev_rel,
            object_features: obj_rel,
            boxes: box_rel,
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::json(dir.join(MANIFEST), e))?;
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}
