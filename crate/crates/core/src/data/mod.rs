//! Story samples, caption vocabulary, dataset I/O, and dataset construction
//! helpers.

pub mod store;
pub mod synthetic;
pub mod window;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frame::Frame;
use crate::tokenizer::ImageTokenGrid;

pub use store::{load_dataset, read_manifest, write_dataset, DatasetFormat, Manifest, StoryRecord};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
pub use window::{AnnotatedVideo, check_split_leakage, select_frame, sliding_window_split, video_of, FrameScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => invalid(format!("unknown split {other:?}")),
        }
    }
}

pub type LabelSet = BTreeSet<u32>;

/// One story: T captions and frames; frame 0 is the source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StorySample {
    pub id: String,
    pub split: Split,
    pub captions: Vec<String>,
    pub frames: Vec<Frame>,
    pub char_labels: Vec<LabelSet>,
}

impl StorySample {
    pub fn new(
        id: impl Into<String>,
        split: Split,
        captions: Vec<String>,
        frames: Vec<Frame>,
        char_labels: Vec<LabelSet>,
    ) -> Result<Self> {
        let s = Self { id: id.into(), split, captions, frames, char_labels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.captions.len();
        if t < 2 {
            return invalid(format!("story {} has {t} captions; at least 2 required", self.id));
        }
        if self.frames.len() != t || self.char_labels.len() != t {
            return invalid(format!(
                "story {}: {} captions, {} frames, {} label sets",
                self.id,
                t,
                self.frames.len(),
                self.char_labels.len()
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn source(&self) -> &Frame {
        &self.frames[0]
    }

    /// Indices of the frames a model generates and is evaluated on.
    pub fn target_indices(&self) -> std::ops::Range<usize> {
        1..self.len()
    }
}

/// Generated continuation of one story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerMeta {
    pub seed: u64,
    pub temperature: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedStory {
    pub sample_id: String,
    /// Frames for timesteps 2..T.
    pub frames: Vec<Frame>,
    pub sampler: SamplerMeta,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// Display names of character label ids.
    pub label_names: Vec<String>,
    #[serde(skip)]
    pub samples: Vec<StorySample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &StorySample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&StorySample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn has_labels(&self) -> bool {
        self.samples.iter().any(|s| s.char_labels.iter().any(|l| !l.is_empty()))
    }
}

/// Word-level caption vocabulary with reserved ids for padding, unknown
/// words, the caption marker, and the caption separator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const MARK: u32 = 2;
    pub const SEP: u32 = 3;
    const SPECIALS: [&'static str; 4] = ["<pad>", "<unk>", "<mark>", "<sep>"];

    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for c in captions {
            words.extend(Self::split_words(c));
        }
        let all = Self::SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_words(all)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    pub fn split_words(caption: &str) -> impl Iterator<Item = String> + '_ {
        caption
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    /// Token ids of `caption`, truncated or padded to `len`.
    pub fn encode(&self, caption: &str, len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = Self::split_words(caption).map(|w| self.id(&w)).take(len).collect();
        ids.resize(len, Self::PAD);
        ids
    }
}

/// Story with captions as token ids and frames as token grids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedStory {
    pub id: String,
    pub captions: Vec<Vec<u32>>,
    pub frames: Vec<ImageTokenGrid>,
    pub char_labels: Vec<LabelSet>,
}

impl TokenizedStory {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}
