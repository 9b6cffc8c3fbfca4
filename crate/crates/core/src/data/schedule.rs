use serde::{Deserialize, Serialize};

use super::{Event, ObjectProposal};
use crate::error::{Error, Result};

const TIME_EPS: f64 = 1e-9;

/// Sampled frame timestamps and the frames each event covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSchedule {
    pub fps: f64,
    /// Timestamp in seconds of every sampled frame.
    pub frame_times: Vec<f64>,
    /// For each event, the ordered frame indices with `start <= t <= end`.
    pub per_event_frames: Vec<Vec<usize>>,
}

impl FrameSchedule {
    pub fn num_frames(&self) -> usize {
        self.frame_times.len()
    }

    pub fn num_events(&self) -> usize {
        self.per_event_frames.len()
    }

    pub fn contains(&self, event: usize, frame: usize) -> bool {
        self.per_event_frames[event].binary_search(&frame).is_ok()
    }

    /// Earliest event whose frame set contains `frame`.
    pub fn first_event_of(&self, frame: usize) -> Option<usize> {
        (0..self.num_events()).find(|&e| self.contains(e, frame))
    }

    /// Events whose frame sets contain `frame`.
    pub fn events_of(&self, frame: usize) -> Vec<usize> {
        (0..self.num_events()).filter(|&e| self.contains(e, frame)).collect()
    }
}

/// Checks that events are ordered, non-degenerate, and tile `[0, duration]`.
pub fn check_tiling(duration_s: f64, events: &[Event]) -> Result<()> {
    if events.is_empty() {
        return Err(Error::Invalid("video has no events".into()));
    }
    let mut cursor = 0.0;
    for (i, e) in events.iter().enumerate() {
        if e.index != i {
            return Err(Error::Invalid(format!("event {i} carries index {}", e.index)));
        }
        if e.end_s <= e.start_s {
            return Err(Error::Invalid(format!(
                "event {i} ends at {} before it starts at {}",
                e.end_s, e.start_s
            )));
        }
        if e.start_s < cursor - TIME_EPS {
            return Err(Error::Invalid(format!(
                "event {i} starts at {} and overlaps the previous event ending at {cursor}",
                e.start_s
            )));
        }
        if e.start_s > cursor + TIME_EPS {
            return Err(Error::Invalid(format!(
                "gap between {cursor} and event {i} starting at {}",
                e.start_s
            )));
        }
        cursor = e.end_s;
    }
    if (cursor - duration_s).abs() > TIME_EPS {
        return Err(Error::Invalid(format!(
            "events end at {cursor} but the video lasts {duration_s}"
        )));
    }
    Ok(())
}

/// Samples frames at `fps` over `[0, duration]` and assigns each event the
/// frames falling inside its closed interval. Adjacent events share their
/// border frame.
pub fn build_frame_schedule(duration_s: f64, events: &[Event], fps: f64) -> Result<FrameSchedule> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
    }
    check_tiling(duration_s, events)?;
    let count = (duration_s * fps + TIME_EPS).floor() as usize + 1;
    let frame_times: Vec<f64> = (0..count).map(|k| k as f64 / fps).collect();
    let mut per_event_frames = Vec::with_capacity(events.len());
    for e in events {
        let frames: Vec<usize> = frame_times
            .iter()
            .enumerate()
            .filter(|(_, &t)| e.start_s - TIME_EPS <= t && t <= e.end_s + TIME_EPS)
            .map(|(k, _)| k)
            .collect();
        if frames.is_empty() {
            return Err(Error::Invalid(format!(
                "event {} [{}, {}] contains no sampled frame at {fps} fps",
                e.index, e.start_s, e.end_s
            )));
        }
        per_event_frames.push(frames);
    }
    Ok(FrameSchedule {
        fps,
        frame_times,
        per_event_frames,
    })
}

/// Indices of the proposals belonging to each event, by frame membership.
pub fn associate_proposals(
    schedule: &FrameSchedule,
    proposals: &[ObjectProposal],
) -> Result<Vec<Vec<usize>>> {
    let mut sets = vec![Vec::new(); schedule.num_events()];
    for (p, prop) in proposals.iter().enumerate() {
        if prop.frame >= schedule.num_frames() {
            return Err(Error::Invalid(format!(
                "proposal {p} sits on frame {} outside the {}-frame schedule",
                prop.frame,
                schedule.num_frames()
            )));
        }
        for (e, set) in sets.iter_mut().enumerate() {
            if schedule.contains(e, prop.frame) {
                set.push(p);
            }
        }
    }
    Ok(sets)
}

/// `n` consecutive equal-length events covering `duration_s`.
pub fn uniform_events(duration_s: f64, n: usize) -> Vec<Event> {
    let step = duration_s / n as f64;
    (0..n)
        .map(|i| Event {
            index: i,
            start_s: i as f64 * step,
            end_s: if i + 1 == n { duration_s } else { (i + 1) as f64 * step },
        })
        .collect()
}
