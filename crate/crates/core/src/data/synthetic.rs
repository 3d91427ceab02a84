//! Procedural story dataset: flat-shaded shapes on a plain background.
//!
//! Each story picks a few characters (a shape with a story-wide color) and a
//! background color. Each character stands in one of four side slots (left,
//! right, top, bottom) of a square cell grid. Captions name shapes and sides
//! but never colors, so appearance can only be recovered from the source
//! frame.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, Split, StorySample};
use crate::error::{invalid, Result};
use crate::frame::Frame;

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

const PALETTE: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.65, 0.15]),
    ("blue", [0.10, 0.20, 0.85]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.80, 0.10, 0.75]),
    ("cyan", [0.10, 0.75, 0.80]),
    ("orange", [0.95, 0.50, 0.05]),
    ("purple", [0.45, 0.15, 0.60]),
    ("brown", [0.50, 0.30, 0.10]),
    ("black", [0.05, 0.05, 0.05]),
];

const BACKGROUNDS: [[f32; 3]; 5] = [
    [0.92, 0.92, 0.92],
    [0.96, 0.90, 0.78],
    [0.78, 0.88, 0.97],
    [0.80, 0.95, 0.80],
    [0.97, 0.82, 0.86],
];

/// Named character positions.
const SIDES: [&str; 4] = ["left", "right", "top", "bottom"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of distinct character shapes.
    pub n_chars: usize,
    /// Colors available to training stories.
    pub n_colors: usize,
    /// Extra colors reserved for test stories.
    pub n_unseen_colors: usize,
    pub n_backgrounds: usize,
    pub frames_per_story: usize,
    pub chars_per_story: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of test stories with one character in an unseen color.
    pub unseen_fraction: f64,
    pub image_size: usize,
    /// Side length, in cells, of the layout grid characters are placed on;
    /// each character fills one `image_size / layout_grid` square cell.
    pub layout_grid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_chars: 4,
            n_colors: 6,
            n_unseen_colors: 2,
            n_backgrounds: 4,
            frames_per_story: 4,
            chars_per_story: 2,
            train: 1200,
            val: 100,
            test: 100,
            unseen_fraction: 0.5,
            image_size: 64,
            layout_grid: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn total_colors(&self) -> usize {
        self.n_colors + self.n_unseen_colors
    }

    pub fn n_labels(&self) -> usize {
        self.n_chars * self.total_colors()
    }

    pub fn label_id(&self, shape: usize, color: usize) -> u32 {
        (shape * self.total_colors() + color) as u32
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.n_chars)
            .flat_map(|s| (0..self.total_colors()).map(move |c| format!("{} {}", PALETTE[c].0, SHAPES[s])))
            .collect()
    }

    /// Color ids that may appear in training stories.
    pub fn seen_colors(&self) -> std::ops::Range<usize> {
        0..self.n_colors
    }

    fn cell(&self) -> usize {
        self.image_size / self.layout_grid
    }

    /// Layout cell (row, col) of a named position; with `q = layout_grid / 4`
    /// the four positions sit midway along each edge.
    fn side_cell(&self, slot: usize) -> (usize, usize) {
        let q = self.layout_grid / 4;
        match slot {
            0 => (2 * q - 1, q - 1),
            1 => (2 * q - 1, 3 * q - 1),
            2 => (q - 1, 2 * q - 1),
            _ => (3 * q - 1, 2 * q - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chars < 2 || self.n_chars > SHAPES.len() {
            return invalid(format!("n_chars must be in [2, {}]", SHAPES.len()));
        }
        if self.total_colors() > PALETTE.len() || self.n_colors == 0 {
            return invalid(format!("at most {} colors in total, at least one seen", PALETTE.len()));
        }
        if self.n_backgrounds == 0 || self.n_backgrounds > BACKGROUNDS.len() {
            return invalid(format!("n_backgrounds must be in [1, {}]", BACKGROUNDS.len()));
        }
        if self.frames_per_story < 2 {
            return invalid("frames_per_story must be >= 2");
        }
        if self.chars_per_story == 0 || self.chars_per_story > self.n_chars.min(self.n_colors).min(SIDES.len()) {
            return invalid("chars_per_story must fit the shape, color and position pools");
        }
        if self.image_size % 8 != 0 || self.image_size < 16 {
            return invalid("image_size must be a multiple of 8 and >= 16");
        }
        if self.layout_grid < 4 || self.layout_grid % 4 != 0 || self.image_size % self.layout_grid != 0 {
            return invalid("layout_grid must be a multiple of 4 that divides image_size");
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return invalid("unseen_fraction must be in [0, 1]");
        }
        if self.unseen_fraction > 0.0 && self.n_unseen_colors == 0 {
            return invalid("unseen_fraction > 0 needs n_unseen_colors > 0");
        }
        Ok(())
    }
}

/// A placed character: shape, color, and slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub shape: usize,
    pub color: usize,
    pub slot: usize,
}

fn inside(shape: usize, u: f32, v: f32) -> bool {
    // u, v in [-1, 1] relative to the cell centre.
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 0.80,
        1 => u.abs() <= 0.72 && v.abs() <= 0.72,
        2 => v >= -0.8 && v <= 0.8 && u.abs() <= (v + 0.8) * 0.55,
        3 => u.abs() + v.abs() <= 0.95,
        4 => (u.abs() <= 0.28 && v.abs() <= 0.9) || (v.abs() <= 0.28 && u.abs() <= 0.9),
        _ => (0.30..=0.85).contains(&r2),
    }
}

/// Renders one frame from a background and placements.
pub fn render(spec: &SyntheticSpec, background: usize, placements: &[Placement]) -> Frame {
    let size = spec.image_size;
    let cell = spec.cell();
    let mut frame = Frame::filled(size, size, BACKGROUNDS[background]);
    for p in placements {
        let (row, col) = spec.side_cell(p.slot);
        let color = PALETTE[p.color].1;
        for dy in 0..cell {
            for dx in 0..cell {
                let u = (dx as f32 + 0.5) / cell as f32 * 2.0 - 1.0;
                let v = (dy as f32 + 0.5) / cell as f32 * 2.0 - 1.0;
                if inside(p.shape, u, v) {
                    frame.set_pixel(row * cell + dy, col * cell + dx, color);
                }
            }
        }
    }
    frame
}

pub fn caption_for(placements: &[Placement]) -> String {
    placements
        .iter()
        .map(|p| format!("{} walks to the {}", SHAPES[p.shape], SIDES[p.slot]))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn make_story(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    id: String,
    split: Split,
    with_unseen: bool,
) -> Result<StorySample> {
    let mut shapes: Vec<usize> = (0..spec.n_chars).collect();
    shapes.shuffle(rng);
    shapes.truncate(spec.chars_per_story);
    let mut colors: Vec<usize> = spec.seen_colors().collect();
    colors.shuffle(rng);
    colors.truncate(spec.chars_per_story);
    if with_unseen {
        let unseen = rng.random_range(spec.n_colors..spec.total_colors());
        let which = rng.random_range(0..colors.len());
        colors[which] = unseen;
    }
    let background = rng.random_range(0..spec.n_backgrounds);
    let slots: Vec<usize> = (0..SIDES.len()).collect();

    let mut captions = Vec::with_capacity(spec.frames_per_story);
    let mut frames = Vec::with_capacity(spec.frames_per_story);
    let mut labels = Vec::with_capacity(spec.frames_per_story);
    for t in 0..spec.frames_per_story {
        // The source frame shows the whole cast.
        let present: Vec<usize> = if t == 0 {
            (0..shapes.len()).collect()
        } else {
            let k = rng.random_range(1..=shapes.len());
            let mut idx: Vec<usize> = (0..shapes.len()).collect();
            idx.shuffle(rng);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        };
        let chosen: Vec<usize> = slots.choose_multiple(rng, present.len()).copied().collect();
        let placements: Vec<Placement> = present
            .iter()
            .zip(chosen)
            .map(|(&i, slot)| Placement { shape: shapes[i], color: colors[i], slot })
            .collect();
        captions.push(caption_for(&placements));
        frames.push(render(spec, background, &placements));
        labels.push(placements.iter().map(|p| spec.label_id(p.shape, p.color)).collect::<LabelSet>());
    }
    StorySample::new(id, split, captions, frames, labels)
}

/// Deterministic synthetic dataset for a spec.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.train + spec.val + spec.test);
    let n_unseen = (spec.unseen_fraction * spec.test as f64).round() as usize;
    for (split, count) in [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)] {
        for i in 0..count {
            let unseen = split == Split::Test && i < n_unseen;
            samples.push(make_story(spec, &mut rng, format!("{split}-{i:05}"), split, unseen)?);
        }
    }
    Ok(Dataset { name: "synthetic".into(), label_names: spec.label_names(), samples })
}

/// Random single frames over the full palette, for tokenizer and classifier
/// training. Returns frames with their exact label sets.
pub fn random_frames(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Vec<(Frame, LabelSet)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<usize> = (0..SIDES.len()).collect();
    Ok((0..count)
        .map(|_| {
            let k = rng.random_range(0..=spec.chars_per_story.max(1) + 1).min(SIDES.len());
            let chosen: Vec<usize> = slots.choose_multiple(&mut rng, k).copied().collect();
            let mut shapes: Vec<usize> = (0..spec.n_chars).collect();
            shapes.shuffle(&mut rng);
            let placements: Vec<Placement> = chosen
                .into_iter()
                .enumerate()
                .map(|(i, slot)| Placement {
                    shape: shapes[i % shapes.len()],
                    color: rng.random_range(0..spec.total_colors()),
                    slot,
                })
                .collect();
            let bg = rng.random_range(0..spec.n_backgrounds);
            let labels = placements.iter().map(|p| spec.label_id(p.shape, p.color)).collect();
            (render(spec, bg, &placements), labels)
        })
        .collect())
}

/// Whether a label refers to a color that never appears in training.
pub fn is_unseen_label(spec: &SyntheticSpec, label: u32) -> bool {
    (label as usize % spec.total_colors()) >= spec.n_colors
}
