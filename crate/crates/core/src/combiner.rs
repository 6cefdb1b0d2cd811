//! Recombination: hole inpainting, reference-background preparation,
//! compositing of the edited content, and seam absorption.

use serde::{Deserialize, Serialize};

use crate::backend::{checked_inpaint, Backends, InpaintBackend};
use crate::error::{Error, Result};
use crate::image::{composite, extract_outline, ImageBuffer, MaskMap, RegionSplit, SegMap};
use crate::instruction::Action;

pub const DEFAULT_SEAM_BAND: usize = 2;

/// Mean anchored on the first value, so a run of equal values yields that
/// value exactly.
fn anchored_mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

fn neighbors8(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((i / w) as i64, (i % w) as i64);
    (-1i64..=1)
        .flat_map(move |dy| (-1i64..=1).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy != 0 || dx != 0)
        .filter_map(move |(dy, dx)| {
            let (yy, xx) = (y + dy, x + dx);
            (yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64).then(|| yy as usize * w + xx as usize)
        })
}

fn neighbor_mean(data: &[f64], c: usize, i: usize, h: usize, w: usize, use_px: impl Fn(usize) -> bool) -> Option<Vec<f64>> {
    let ns: Vec<usize> = neighbors8(i, h, w).filter(|j| use_px(*j)).collect();
    if ns.is_empty() {
        return None;
    }
    Some(
        (0..c)
            .map(|ch| anchored_mean(&ns.iter().map(|j| data[j * c + ch]).collect::<Vec<_>>()))
            .collect(),
    )
}

/// Diffusion inpainting. Hole pixels are filled ring by ring from the hole
/// boundary inward, each with the mean of its already-known 8-neighbors, then
/// `iterations` Jacobi smoothing passes average every hole pixel over all of
/// its neighbors. Only hole pixels change. A hole covering the whole image is
/// filled with the per-channel image mean.
pub fn inpaint_reference(image: &ImageBuffer, hole: &MaskMap, iterations: usize) -> Result<ImageBuffer> {
    if hole.dims() != image.dims() {
        return Err(Error::Shape(format!("hole {:?} vs image {:?}", hole.dims(), image.dims())));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let holes: Vec<usize> = (0..h * w).filter(|i| hole.data()[*i]).collect();
    if holes.is_empty() {
        return Ok(image.clone());
    }
    let mut data = image.data().to_vec();
    if holes.len() == h * w {
        for ch in 0..c {
            let vals: Vec<f64> = (0..h * w).map(|i| image.data()[i * c + ch]).collect();
            let m = anchored_mean(&vals);
            (0..h * w).for_each(|i| data[i * c + ch] = m);
        }
        return ImageBuffer::from_clamped(h, w, c, data);
    }
    let mut known: Vec<bool> = hole.data().iter().map(|m| !m).collect();
    let mut remaining = holes.clone();
    while !remaining.is_empty() {
        let ring: Vec<(usize, Vec<f64>)> = remaining
            .iter()
            .filter_map(|&i| neighbor_mean(&data, c, i, h, w, |j| known[j]).map(|v| (i, v)))
            .collect();
        for (i, v) in &ring {
            data[i * c..(i + 1) * c].copy_from_slice(v);
            known[*i] = true;
        }
        remaining.retain(|i| !known[*i]);
    }
    for _ in 0..iterations {
        let next: Vec<(usize, Vec<f64>)> = holes
            .iter()
            .map(|&i| (i, neighbor_mean(&data, c, i, h, w, |_| true).expect("frame has > 1 pixel")))
            .collect();
        for (i, v) in next {
            data[i * c..(i + 1) * c].copy_from_slice(&v);
        }
    }
    ImageBuffer::from_clamped(h, w, c, data)
}

/// A reference background prepared for a background swap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundAsset {
    pub original: ImageBuffer,
    pub seg: SegMap,
    /// `original` with every object pixel zeroed.
    pub pure: ImageBuffer,
    /// `original` with object pixels inpainted away.
    pub inpainted: ImageBuffer,
}

pub fn prepare_background(image: &ImageBuffer, backends: &Backends) -> Result<BackgroundAsset> {
    let seg = backends.segment(image)?;
    let objects = MaskMap::new(
        image.height(),
        image.width(),
        seg.data().iter().map(|id| *id != 0).collect(),
    )?;
    let pure = crate::image::split_by_mask(image, &objects)?.irrelevant;
    let inpainted = backends.inpaint(&pure, &objects)?;
    Ok(BackgroundAsset {
        original: image.clone(),
        seg,
        pure,
        inpainted,
    })
}

/// Builds the base layer for the action and composites `edited` over it
/// inside `seg_out`'s `target_class` region. `edited` is the manipulated
/// content in the source frame.
///
/// Base: the irrelevant image with the original target hole inpainted for
/// resize and remove, the irrelevant image as is for attribute edits, and
/// the inpainted reference background for a background swap. Remove returns
/// the base alone.
pub fn combine_final(
    edited: &ImageBuffer,
    split: &RegionSplit,
    seg_out: &SegMap,
    target_class: u32,
    action: &Action,
    background: Option<&BackgroundAsset>,
    inpaint: &dyn InpaintBackend,
) -> Result<ImageBuffer> {
    if edited.dims() != split.irrelevant.dims() || seg_out.dims() != edited.dims() {
        return Err(Error::Shape("edited image, split and seg map must share dimensions".into()));
    }
    let base = match action {
        Action::Resize { .. } | Action::Remove => checked_inpaint(inpaint, &split.irrelevant, &split.mask)?,
        Action::Attribute => split.irrelevant.clone(),
        Action::BackgroundSwap => {
            let bg = background.ok_or_else(|| Error::Parameter("background swap needs a reference background".into()))?;
            if bg.inpainted.dims() != edited.dims() {
                return Err(Error::Shape(format!(
                    "background {:?} vs image {:?}",
                    bg.inpainted.dims(),
                    edited.dims()
                )));
            }
            bg.inpainted.clone()
        }
    };
    if matches!(action, Action::Remove) {
        return Ok(base);
    }
    composite(edited, &base, &seg_out.mask_of(target_class))
}

/// Inpaints a band of `band_width` pixels around the target region's outline
/// to hide color steps at the paste boundary. Nothing outside the band moves.
pub fn absorb_color_seam(
    combined: &ImageBuffer,
    seg_out: &SegMap,
    target_class: u32,
    band_width: usize,
    inpaint: &dyn InpaintBackend,
) -> Result<ImageBuffer> {
    if band_width == 0 {
        return Err(Error::Parameter("seam band width must be at least 1".into()));
    }
    let mask = seg_out.mask_of(target_class);
    if mask.is_empty() {
        return Ok(combined.clone());
    }
    checked_inpaint(inpaint, combined, &extract_outline(&mask, band_width)?)
}
