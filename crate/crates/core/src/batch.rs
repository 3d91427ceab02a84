//! Conversion of stories into token form and into batched model inputs.

use candle_core::{Device, Tensor};

use crate::data::{StorySample, TokenizedStory, Vocab};
use crate::error::{invalid, Result};
use crate::tokenizer::VqVae;
use crate::transformer::ModelInput;

/// Tokenizes captions with `vocab` (padded to `n_text`) and frames with `vq`.
pub fn tokenize_stories(vq: &VqVae, vocab: &Vocab, samples: &[&StorySample], n_text: usize) -> Result<Vec<TokenizedStory>> {
    let frames: Vec<_> = samples.iter().flat_map(|s| s.frames.iter()).collect();
    let mut grids = vq.tokenize_batch(&frames)?.into_iter();
    Ok(samples
        .iter()
        .map(|s| TokenizedStory {
            id: s.id.clone(),
            captions: s.captions.iter().map(|c| vocab.encode(c, n_text)).collect(),
            frames: grids.by_ref().take(s.len()).collect(),
            char_labels: s.char_labels.clone(),
        })
        .collect())
}

/// One training or generation example: a story and the timestep to predict.
pub type Example<'a> = (&'a TokenizedStory, usize);

/// Every (story, t) pair with `t` a target timestep.
pub fn examples(stories: &[TokenizedStory]) -> Vec<Example<'_>> {
    stories.iter().flat_map(|s| (1..s.len()).map(move |t| (s, t))).collect()
}

/// Stacks examples into a [`ModelInput`]. Stories shorter than the longest in
/// the batch get all-padding captions appended. With `with_image`, the full
/// target frame is included as the image segment.
pub fn build_input(batch: &[Example<'_>], with_image: bool, device: &Device) -> Result<ModelInput> {
    let Some((first, _)) = batch.first() else {
        return invalid("empty batch");
    };
    let n_text = first.captions[0].len();
    let n_img = first.frames[0].indices().len();
    let t_max = batch.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let b = batch.len();
    let mut caption = Vec::with_capacity(b * n_text);
    let mut story = Vec::with_capacity(b * t_max * n_text);
    let mut index = Vec::with_capacity(b);
    let mut image = Vec::with_capacity(b * n_img);
    let mut source = Vec::with_capacity(b * n_img);
    for &(s, t) in batch {
        if t == 0 || t >= s.len() {
            return invalid(format!("story {}: timestep {t} is not a target (T = {})", s.id, s.len()));
        }
        if s.captions.iter().any(|c| c.len() != n_text) || s.frames.iter().any(|f| f.indices().len() != n_img) {
            return invalid(format!("story {} has inconsistent caption or grid sizes", s.id));
        }
        caption.extend_from_slice(&s.captions[t]);
        for c in &s.captions {
            story.extend_from_slice(c);
        }
        story.resize(story.len() + (t_max - s.len()) * n_text, Vocab::PAD);
        index.push(t as u32);
        source.extend_from_slice(s.frames[0].indices());
        if with_image {
            image.extend_from_slice(s.frames[t].indices());
        }
    }
    Ok(ModelInput {
        caption: Tensor::from_vec(caption, (b, n_text), device)?,
        story_captions: Tensor::from_vec(story, (b, t_max, n_text), device)?,
        frame_index: Tensor::from_vec(index, (b,), device)?,
        image: if with_image { Some(Tensor::from_vec(image, (b, n_img), device)?) } else { None },
        source: Tensor::from_vec(source, (b, n_img), device)?,
    })
}
