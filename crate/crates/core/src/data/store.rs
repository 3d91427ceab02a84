//! On-disk dataset layout:
//!
//! ```text
//! root/
//!   stories.jsonl    one {id, split, captions[], frame_paths[], char_labels[][]} per line
//!   images/*.png     frames, referenced relative to root
//!   manifest.json    optional {name, format, splits{train,val,test}, label_names[]}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, Split, StorySample};
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub id: String,
    pub split: Split,
    pub captions: Vec<String>,
    pub frame_paths: Vec<String>,
    pub char_labels: Vec<Vec<u32>>,
}

/// Dataset family; fixes the expected story length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Generic,
    Pororo,
    Flintstones,
    Didemo,
}

impl DatasetFormat {
    pub fn story_len(self) -> Option<usize> {
        match self {
            DatasetFormat::Generic => None,
            DatasetFormat::Pororo | DatasetFormat::Flintstones => Some(5),
            DatasetFormat::Didemo => Some(3),
        }
    }

    /// Published (train, val, test) sample counts.
    pub fn reference_counts(self) -> Option<(usize, usize, usize)> {
        match self {
            DatasetFormat::Generic => None,
            DatasetFormat::Pororo => Some((10191, 2334, 2208)),
            DatasetFormat::Flintstones => Some((20132, 2071, 2309)),
            DatasetFormat::Didemo => Some((11550, 2707, 3378)),
        }
    }

    /// Whether the family annotates recurring characters.
    pub fn has_characters(self) -> bool {
        !matches!(self, DatasetFormat::Didemo)
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "generic" | "synthetic" => Ok(Self::Generic),
            "pororo" | "pororosv" => Ok(Self::Pororo),
            "flintstones" | "flintstonessv" => Ok(Self::Flintstones),
            "didemo" | "didemosv" => Ok(Self::Didemo),
            other => Err(Error::Invalid(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Expected sample count per split.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<Split, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_names: Vec<String>,
}

/// Writes `dataset` under `root`, one PNG per frame.
pub fn write_dataset(root: &Path, dataset: &Dataset, format: DatasetFormat) -> Result<()> {
    let images = root.join("images");
    std::fs::create_dir_all(&images)?;
    let mut out = BufWriter::new(std::fs::File::create(root.join("stories.jsonl"))?);
    let mut splits = BTreeMap::new();
    for s in &dataset.samples {
        let mut frame_paths = Vec::with_capacity(s.frames.len());
        for (t, f) in s.frames.iter().enumerate() {
            let rel = format!("images/{}_{t}.png", s.id);
            f.save_png(&root.join(&rel))?;
            frame_paths.push(rel);
        }
        let rec = StoryRecord {
            id: s.id.clone(),
            split: s.split,
            captions: s.captions.clone(),
            frame_paths,
            char_labels: s.char_labels.iter().map(|l| l.iter().copied().collect()).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        *splits.entry(s.split).or_insert(0) += 1;
    }
    out.flush()?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        format,
        splits,
        label_names: dataset.label_names.clone(),
    };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

/// Loads and validates a dataset root. Every problem found is reported in a
/// single [`Error::Validation`]; nothing is returned unless all samples pass.
pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let file = std::fs::File::open(root.join("stories.jsonl"))
        .map_err(|e| Error::Validation(vec![format!("{}: {e}", root.join("stories.jsonl").display())]))?;
    let n_labels = manifest.as_ref().map(|m| m.label_names.len()).filter(|&n| n > 0);
    let expected_len = format.story_len();
    let mut problems = Vec::new();
    let mut samples = Vec::new();
    let mut cache: HashMap<PathBuf, Frame> = HashMap::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoryRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {}: malformed record: {e}", lineno + 1));
                continue;
            }
        };
        let before = problems.len();
        let t = rec.captions.len();
        if rec.frame_paths.len() != t || rec.char_labels.len() != t {
            problems.push(format!(
                "{}: {} captions, {} frames, {} label sets",
                rec.id,
                t,
                rec.frame_paths.len(),
                rec.char_labels.len()
            ));
        }
        if t < 2 {
            problems.push(format!("{}: story has {t} frames; at least 2 required", rec.id));
        }
        if let Some(want) = expected_len {
            if t != want {
                problems.push(format!("{}: {format:?} stories have {want} frames, found {t}", rec.id));
            }
        }
        if let Some(n) = n_labels {
            for labels in &rec.char_labels {
                if let Some(bad) = labels.iter().find(|&&l| l as usize >= n) {
                    problems.push(format!("{}: label id {bad} outside {n} declared labels", rec.id));
                }
            }
        }
        let mut frames = Vec::with_capacity(rec.frame_paths.len());
        for p in &rec.frame_paths {
            let path = root.join(p);
            if let Some(f) = cache.get(&path) {
                frames.push(f.clone());
                continue;
            }
            match Frame::load_png(&path) {
                Ok(f) => {
                    cache.insert(path, f.clone());
                    frames.push(f);
                }
                Err(e) => problems.push(format!("{}: cannot read frame {p}: {e}", rec.id)),
            }
        }
        if problems.len() == before {
            samples.push(StorySample {
                id: rec.id,
                split: rec.split,
                captions: rec.captions,
                frames,
                char_labels: rec.char_labels.into_iter().map(|l| l.into_iter().collect::<LabelSet>()).collect(),
            });
        }
    }

    if let Some(m) = &manifest {
        for (split, &want) in &m.splits {
            let got = samples.iter().filter(|s| s.split == *split).count();
            if got != want && problems.is_empty() {
                problems.push(format!("split {split}: manifest declares {want} samples, found {got}"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let name = manifest
        .as_ref()
        .map(|m| m.name.clone())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    Ok(Dataset {
        name,
        label_names: manifest.map(|m| m.label_names).unwrap_or_default(),
        samples,
    })
}
