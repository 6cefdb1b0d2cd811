//! End-to-end edit pipeline: parse, preprocess, manipulate the canvas with
//! the generator, apply the keyword action to the seg map, map the result
//! back to the source frame and recombine.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segedit_core::backend::Backends;
use segedit_core::combiner::{absorb_color_seam, combine_final, inpaint_reference, BackgroundAsset, DEFAULT_SEAM_BAND};
use segedit_core::embedding::EmbeddingTable;
use segedit_core::error::{Stage, StageExt};
use segedit_core::image::{scale_mask_about_centroid, ImageBuffer, MaskMap, SegMap};
use segedit_core::instruction::{parse_instruction, Action, ParsedInstruction};
use segedit_core::preproc::{run_preprocessing_with_seg, CanvasPatch, PreprocResult};
use segedit_core::{Error, Result};
use serde::Serialize;

use crate::actions::apply_action_to_region;
use crate::checkpoint::load_checkpoint;
use crate::model::{canvas_segmap, encode_text, main_module_forward, trdcm_forward, GeneratorWeights};

/// Generator, backends and word table shared by every edit.
#[derive(Debug, Clone)]
pub struct EditEngine {
    pub generator: GeneratorWeights,
    pub backends: Backends,
    pub table: EmbeddingTable,
    pub seam_band: usize,
    /// Seeds the generator noise, so an edit is a pure function of its
    /// inputs.
    pub noise_seed: u64,
}

/// Everything an edit produced.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub instruction: ParsedInstruction,
    pub preproc: PreprocResult,
    pub seg_out: SegMap,
    pub output: ImageBuffer,
    /// Whether the generator ran; it is skipped when nothing but the target
    /// name and function words remains after removing the keywords.
    pub generator_used: bool,
}

/// The machine-readable summary written next to CLI results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditReport {
    pub instruction: String,
    pub action: Action,
    pub target: String,
    pub target_class: u32,
    pub generator_used: bool,
    pub scores: EditScores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditScores {
    pub target_pixels_in: usize,
    pub target_pixels_out: usize,
    pub changed_pixels: usize,
    /// Mean absolute per-channel difference between output and input.
    pub mean_abs_change: f64,
    /// Mean color of the output inside the output target region, if any.
    pub target_mean_rgb: Option<Vec<f64>>,
}

impl EditOutcome {
    pub fn seg_in(&self) -> &SegMap {
        &self.preproc.seg
    }

    pub fn report(&self, input: &ImageBuffer) -> EditReport {
        let class = self.preproc.target_class;
        let changed = (0..input.height() * input.width())
            .filter(|&i| {
                let c = input.channels();
                input.data()[i * c..(i + 1) * c] != self.output.data()[i * c..(i + 1) * c]
            })
            .count();
        let diff: f64 = input.data().iter().zip(self.output.data()).map(|(a, b)| (a - b).abs()).sum();
        EditReport {
            instruction: self.instruction.raw.clone(),
            action: self.instruction.action.clone(),
            target: self.preproc.target.clone(),
            target_class: class,
            generator_used: self.generator_used,
            scores: EditScores {
                target_pixels_in: self.preproc.seg.count_of(class),
                target_pixels_out: self.seg_out.count_of(class),
                changed_pixels: changed,
                mean_abs_change: diff / input.data().len() as f64,
                target_mean_rgb: mean_color(&self.output, &self.seg_out.mask_of(class)),
            },
        }
    }
}

const FUNCTION_WORDS: [&str; 8] = ["the", "a", "an", "is", "are", "of", "make", "it"];

/// Whether the descriptive text says anything about the target beyond
/// naming it.
pub fn has_attribute_words(instruction: &ParsedInstruction, target: &str) -> bool {
    instruction
        .descriptive_tokens()
        .iter()
        .any(|t| t.as_str() != target && !FUNCTION_WORDS.contains(&t.as_str()))
}

/// Per-channel mean of `image` under `mask`.
pub fn mean_color(image: &ImageBuffer, mask: &MaskMap) -> Option<Vec<f64>> {
    let n = mask.count();
    if n == 0 || mask.dims() != image.dims() {
        return None;
    }
    let c = image.channels();
    let mut sum = vec![0.0; c];
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                for (s, v) in sum.iter_mut().zip(image.pixel(y, x)) {
                    *s += v;
                }
            }
        }
    }
    Some(sum.into_iter().map(|s| s / n as f64).collect())
}

impl EditEngine {
    pub fn new(generator: GeneratorWeights, backends: Backends) -> Self {
        Self {
            generator,
            backends,
            table: EmbeddingTable::reference(),
            seam_band: DEFAULT_SEAM_BAND,
            noise_seed: 0,
        }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>, backends: Backends) -> Result<Self> {
        Ok(Self::new(load_checkpoint(path)?.generator, backends))
    }

    pub fn working_size(&self) -> usize {
        self.generator.config.working_size
    }

    pub fn edit(&self, image: &ImageBuffer, text: &str, user_seg: Option<&SegMap>, background: Option<&BackgroundAsset>) -> Result<EditOutcome> {
        let instruction = parse_instruction(text).at(Stage::Parse)?;
        self.edit_parsed(image, instruction, user_seg, background)
    }

    pub fn edit_parsed(
        &self,
        image: &ImageBuffer,
        instruction: ParsedInstruction,
        user_seg: Option<&SegMap>,
        background: Option<&BackgroundAsset>,
    ) -> Result<EditOutcome> {
        if matches!(instruction.action, Action::BackgroundSwap) && background.is_none() {
            return Err(Error::Parameter("background swap needs a reference background".into()).at(Stage::Background));
        }
        let pre = run_preprocessing_with_seg(image, &instruction, user_seg, &self.backends, &self.table, self.working_size())?;
        let generator_used = has_attribute_words(&instruction, &pre.target);
        let edited_canvas = if generator_used {
            self.manipulate(&instruction, &pre.canvas, &pre.seg, pre.target_class).at(Stage::Manipulation)?
        } else {
            pre.canvas.image.clone()
        };
        let class = pre.target_class;
        let seg_out = apply_action_to_region(&pre.seg, class, &pre.split.mask, &instruction.action).at(Stage::Manipulation)?;
        let edited = map_to_source(&pre, &edited_canvas, image, &instruction.action).at(Stage::Manipulation)?;
        let inpaint = self.backends.inpainting.as_ref();
        let combined = combine_final(&edited, &pre.split, &seg_out, class, &instruction.action, background, inpaint).at(Stage::Combination)?;
        let output = match instruction.action {
            Action::Remove => combined,
            _ => absorb_color_seam(&combined, &seg_out, class, self.seam_band, inpaint).at(Stage::Combination)?,
        };
        Ok(EditOutcome {
            instruction,
            preproc: pre,
            seg_out,
            output,
            generator_used,
        })
    }

    /// Runs the main module and the TRDCM on the canvas.
    pub fn manipulate(&self, instruction: &ParsedInstruction, canvas: &CanvasPatch, seg: &SegMap, class: u32) -> Result<ImageBuffer> {
        let weights = &self.generator;
        let text = encode_text(instruction, weights)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let noise: Vec<f64> = (0..weights.config.noise_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let main = main_module_forward(canvas, &text, &noise, weights)?;
        let canvas_seg = canvas_segmap(canvas, class, seg.palette())?;
        trdcm_forward(&main.h_last, &text, canvas, &canvas_seg, class, weights)
    }
}

/// Source-frame image whose text-relevant pixels carry the edited content.
/// For a resize, pixels of the scaled region sample the canvas at their
/// preimage under the scaling about the region centroid.
fn map_to_source(pre: &PreprocResult, edited_canvas: &ImageBuffer, image: &ImageBuffer, action: &Action) -> Result<ImageBuffer> {
    let canvas = &pre.canvas;
    // Extend the edit past the object outline so bilinear samples near the
    // edge do not pick up neighboring content.
    let extended = inpaint_reference(edited_canvas, &canvas.mask.complement(), 0)?;
    let region = &pre.split.mask;
    match action {
        Action::Resize { factor } => {
            let scaled = scale_mask_about_centroid(region, *factor)?;
            let (cy, cx) = region.centroid().expect("nonempty after scaling");
            let (h, w) = image.dims();
            let mut out = image.clone();
            for y in 0..h {
                for x in 0..w {
                    if !scaled.get(y, x) {
                        continue;
                    }
                    let sy = (y as f64 - cy) / factor + cy;
                    let sx = (x as f64 - cx) / factor + cx;
                    let px = canvas.sample(&extended, sy, sx).unwrap_or_else(|| {
                        let ny = sy.round().clamp(0.0, (h - 1) as f64) as usize;
                        let nx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
                        image.pixel(ny, nx).to_vec()
                    });
                    out.set_pixel(y, x, &px);
                }
            }
            Ok(out)
        }
        _ => canvas.restore_into(&extended, image, region),
    }
}
