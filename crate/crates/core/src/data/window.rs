use std::collections::BTreeMap;

use super::{LabelSet, Split, StorySample};
use crate::error::{invalid, Result};
use crate::frame::Frame;

/// A whole annotated video before it is cut into fixed-length samples.
#[derive(Debug, Clone)]
pub struct AnnotatedVideo {
    pub id: String,
    pub split: Split,
    pub captions: Vec<String>,
    pub frames: Vec<Frame>,
    pub char_labels: Vec<LabelSet>,
}

/// Cuts `video` into stride-1 windows of `window` frames. Sample ids have the
/// form `"<video>/<start>"`, so every sample inherits the video's split.
/// A video shorter than `window` yields no samples.
pub fn sliding_window_split(video: &AnnotatedVideo, window: usize) -> Vec<StorySample> {
    let n = video.frames.len().min(video.captions.len()).min(video.char_labels.len());
    if window == 0 || n < window {
        return Vec::new();
    }
    (0..=n - window)
        .map(|start| StorySample {
            id: format!("{}/{start}", video.id),
            split: video.split,
            captions: video.captions[start..start + window].to_vec(),
            frames: video.frames[start..start + window].to_vec(),
            char_labels: video.char_labels[start..start + window].to_vec(),
        })
        .collect()
}

/// Source-video id of a windowed sample id (everything before the last `/`).
pub fn video_of(sample_id: &str) -> &str {
    sample_id.rsplit_once('/').map_or(sample_id, |(v, _)| v)
}

/// Returns every video id that occurs in more than one split, with the splits
/// it occurs in.
pub fn check_split_leakage<'a>(samples: impl IntoIterator<Item = &'a StorySample>) -> Vec<(String, Vec<Split>)> {
    let mut seen: BTreeMap<&str, Vec<Split>> = BTreeMap::new();
    for s in samples {
        let splits = seen.entry(video_of(&s.id)).or_default();
        if !splits.contains(&s.split) {
            splits.push(s.split);
        }
    }
    seen.into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(v, mut s)| {
            s.sort();
            (v.to_string(), s)
        })
        .collect()
}

/// Log-likelihood of a caption given a frame.
pub trait FrameScorer {
    fn score(&self, frame: &Frame, caption: &str) -> f64;
}

impl<F: Fn(&Frame, &str) -> f64> FrameScorer for F {
    fn score(&self, frame: &Frame, caption: &str) -> f64 {
        self(frame, caption)
    }
}

/// Index of the highest-scoring candidate; the earliest wins ties. NaN scores
/// never win.
pub fn select_frame(candidates: &[Frame], caption: &str, scorer: &dyn FrameScorer) -> Result<usize> {
    if candidates.is_empty() {
        return invalid("select_frame needs at least one candidate");
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, f) in candidates.iter().enumerate() {
        let s = scorer.score(f, caption);
        if s > best_score || (i == 0 && !s.is_nan()) {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}
