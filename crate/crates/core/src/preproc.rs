//! Pre-processing: segmentation, detection and target selection, the
//! text-relevant mask, the region split, and the super-resolved canvas.

use serde::{Deserialize, Serialize};

use crate::backend::{Backends, DetectedObject};
use crate::embedding::{select_target_class, EmbeddingTable, TargetSelection, DEFAULT_THRESHOLD};
use crate::error::{Error, Result, Stage, StageExt};
use crate::image::{bilerp, crop, BoundingBox, ImageBuffer, MaskMap, RegionSplit, SegMap};
use crate::instruction::ParsedInstruction;

pub const CANVAS_MARGIN: usize = 8;
pub const DEFAULT_WORKING_SIZE: usize = 128;
pub const SR_SCALES: [usize; 4] = [8, 4, 2, 1];

/// Pixels of the target label's classes inside the matching detection boxes.
pub fn build_text_relevant_mask(seg: &SegMap, detections: &[DetectedObject], target_label: &str) -> Result<MaskMap> {
    let matching: Vec<&DetectedObject> = detections.iter().filter(|d| d.label == target_label).collect();
    if matching.is_empty() {
        return Err(Error::NoTarget(format!("no detection labeled `{target_label}`")));
    }
    let (h, w) = seg.dims();
    let mask = MaskMap::from_fn(h, w, |y, x| {
        let id = seg.get(y, x);
        matching.iter().any(|d| d.class_id == id && d.bbox.contains(y, x))
    });
    if mask.is_empty() {
        return Err(Error::EmptyRegion(format!("`{target_label}` covers no pixels")));
    }
    Ok(mask)
}

/// One detection per class present in a (possibly hand-edited) seg map, boxed
/// around all of that class's pixels.
pub fn detections_from_seg(seg: &SegMap) -> Vec<DetectedObject> {
    seg.present_ids()
        .into_iter()
        .filter(|id| *id != 0)
        .filter_map(|id| {
            let bbox = seg.mask_of(id).bbox()?;
            Some(DetectedObject {
                label: seg.label(id)?.to_string(),
                confidence: 1.0,
                bbox,
                class_id: id,
            })
        })
        .collect()
}

/// Largest allowed integer SR scale with `longer_side * s <= working_size`.
pub fn select_sr_scale(longer_side: usize, working_size: usize) -> Option<usize> {
    SR_SCALES.into_iter().find(|s| longer_side * s <= working_size)
}

/// The target object cropped, scaled and centered on a square canvas.
///
/// Source pixel `(y, x)` of the crop lands at canvas position
/// `offset + (y - source_box.y0, x - source_box.x0) * canvas_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasPatch {
    pub image: ImageBuffer,
    pub mask: MaskMap,
    /// Crop region in the source frame.
    pub source_box: BoundingBox,
    /// Tight object box in the source frame.
    pub object_box: BoundingBox,
    pub canvas_scale: f64,
    pub offset: (f64, f64),
}

impl CanvasPatch {
    pub fn working_size(&self) -> usize {
        self.image.height()
    }

    pub fn to_canvas(&self, y: f64, x: f64) -> (f64, f64) {
        (
            self.offset.0 + (y - self.source_box.y0 as f64) * self.canvas_scale,
            self.offset.1 + (x - self.source_box.x0 as f64) * self.canvas_scale,
        )
    }

    pub fn from_canvas(&self, cy: f64, cx: f64) -> (f64, f64) {
        (
            (cy - self.offset.0) / self.canvas_scale + self.source_box.y0 as f64,
            (cx - self.offset.1) / self.canvas_scale + self.source_box.x0 as f64,
        )
    }

    /// Bilinear sample of a canvas-sized image at a source-frame position;
    /// `None` when the position falls off the canvas.
    pub fn sample(&self, canvas_image: &ImageBuffer, y: f64, x: f64) -> Option<Vec<f64>> {
        let (cy, cx) = self.to_canvas(y, x);
        sample_bilinear(canvas_image, cy, cx)
    }

    /// Maps a canvas-sized image back onto the crop region. Returns the
    /// crop-sized image and which of its pixels came from the canvas.
    pub fn restore(&self, canvas_image: &ImageBuffer) -> Result<(ImageBuffer, MaskMap)> {
        if canvas_image.dims() != self.image.dims() {
            return Err(Error::Shape(format!(
                "canvas image {:?} vs canvas {:?}",
                canvas_image.dims(),
                self.image.dims()
            )));
        }
        let b = self.source_box;
        let c = canvas_image.channels();
        let mut out = ImageBuffer::zeros(b.height(), b.width(), c);
        let mut valid = MaskMap::empty(b.height(), b.width());
        for y in 0..b.height() {
            for x in 0..b.width() {
                if let Some(px) = self.sample(canvas_image, (b.y0 + y) as f64, (b.x0 + x) as f64) {
                    out.set_pixel(y, x, &px);
                    valid.set(y, x, true);
                }
            }
        }
        Ok((out, valid))
    }

    /// `target` with the pixels under `region` replaced by the restored
    /// canvas content where available.
    pub fn restore_into(&self, canvas_image: &ImageBuffer, target: &ImageBuffer, region: &MaskMap) -> Result<ImageBuffer> {
        let (patch, valid) = self.restore(canvas_image)?;
        let b = self.source_box;
        let mut out = target.clone();
        for y in 0..b.height() {
            for x in 0..b.width() {
                if valid.get(y, x) && region.get(b.y0 + y, b.x0 + x) {
                    out.set_pixel(b.y0 + y, b.x0 + x, patch.pixel(y, x));
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear sample at a fractional position inside the image, `None` outside.
pub fn sample_bilinear(image: &ImageBuffer, y: f64, x: f64) -> Option<Vec<f64>> {
    const EPS: f64 = 1e-9;
    let (h, w) = image.dims();
    if !(y >= -EPS && x >= -EPS && y <= (h - 1) as f64 + EPS && x <= (w - 1) as f64 + EPS) {
        return None;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    Some(
        (0..image.channels())
            .map(|c| {
                bilerp(
                    image.get(y0, x0, c),
                    image.get(y0, x1, c),
                    image.get(y1, x0, c),
                    image.get(y1, x1, c),
                    ty,
                    tx,
                )
            })
            .collect(),
    )
}

/// Corner-aligned downscale by `factor < 1`: output pixel `k` samples source
/// position `k / factor`.
fn downscale_corner(image: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    let nh = ((image.height() - 1) as f64 * factor).floor() as usize + 1;
    let nw = ((image.width() - 1) as f64 * factor).floor() as usize + 1;
    let c = image.channels();
    let mut data = Vec::with_capacity(nh * nw * c);
    for y in 0..nh {
        for x in 0..nw {
            data.extend(sample_bilinear(image, y as f64 / factor, x as f64 / factor).expect("inside source"));
        }
    }
    ImageBuffer::from_clamped(nh, nw, c, data)
}

/// Crops the object with an 8-px margin, scales it by the largest SR factor
/// in {8, 4, 2, 1} that keeps its longer side within `working_size` (or
/// shrinks it to fit when even 1 is too large), and centers it on a
/// `working_size`² canvas. Canvas pixels beyond the scaled crop repeat its
/// edge; the canvas mask is the object mask under the same mapping.
pub fn prepare_canvas(image: &ImageBuffer, mask: &MaskMap, backends: &Backends, working_size: usize) -> Result<CanvasPatch> {
    if working_size == 0 {
        return Err(Error::Parameter("working size must be positive".into()));
    }
    if mask.dims() != image.dims() {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.dims(), image.dims())));
    }
    let object_box = mask
        .bbox()
        .ok_or_else(|| Error::EmptyRegion("cannot build a canvas for an empty mask".into()))?;
    let source_box = object_box.expand(CANVAS_MARGIN, image.height(), image.width());
    let cropped = crop(image, &source_box)?;
    let longer = object_box.height().max(object_box.width());
    let (scaled, scale) = match select_sr_scale(longer, working_size) {
        Some(s) => (backends.upscale(&cropped, s)?, s as f64),
        None => {
            let f = (working_size - 1).max(1) as f64 / (longer - 1).max(1) as f64;
            (downscale_corner(&cropped, f)?, f)
        }
    };
    let center = |lo: usize, hi: usize, origin: usize| ((lo + hi - 1) as f64 / 2.0 - origin as f64) * scale;
    let mid = (working_size - 1) as f64 / 2.0;
    let offset = (
        (mid - center(object_box.y0, object_box.y1, source_box.y0)).round(),
        (mid - center(object_box.x0, object_box.x1, source_box.x0)).round(),
    );
    let (sh, sw) = scaled.dims();
    let c = scaled.channels();
    let mut canvas = ImageBuffer::zeros(working_size, working_size, c);
    let mut canvas_mask = MaskMap::empty(working_size, working_size);
    for cy in 0..working_size {
        let ly = cy as f64 - offset.0;
        let py = ly.clamp(0.0, (sh - 1) as f64) as usize;
        for cx in 0..working_size {
            let lx = cx as f64 - offset.1;
            let px = lx.clamp(0.0, (sw - 1) as f64) as usize;
            canvas.set_pixel(cy, cx, scaled.pixel(py, px));
            if ly >= 0.0 && lx >= 0.0 && ly < sh as f64 && lx < sw as f64 {
                let sy = ((ly / scale + 0.5).floor() as usize).min(source_box.height() - 1);
                let sx = ((lx / scale + 0.5).floor() as usize).min(source_box.width() - 1);
                canvas_mask.set(cy, cx, mask.get(source_box.y0 + sy, source_box.x0 + sx));
            }
        }
    }
    Ok(CanvasPatch {
        image: canvas,
        mask: canvas_mask,
        source_box,
        object_box,
        canvas_scale: scale,
        offset,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocResult {
    pub split: RegionSplit,
    pub canvas: CanvasPatch,
    pub seg: SegMap,
    pub detections: Vec<DetectedObject>,
    pub target: String,
    pub target_class: u32,
    pub selection: TargetSelection,
}

/// segment → detect → select target → text-relevant mask → split → canvas.
pub fn run_preprocessing(
    image: &ImageBuffer,
    instruction: &ParsedInstruction,
    backends: &Backends,
    table: &EmbeddingTable,
    working_size: usize,
) -> Result<PreprocResult> {
    run_preprocessing_with_seg(image, instruction, None, backends, table, working_size)
}

/// As [`run_preprocessing`], but a supplied seg map replaces the
/// segmentation backend and its classes stand in for the detections.
pub fn run_preprocessing_with_seg(
    image: &ImageBuffer,
    instruction: &ParsedInstruction,
    user_seg: Option<&SegMap>,
    backends: &Backends,
    table: &EmbeddingTable,
    working_size: usize,
) -> Result<PreprocResult> {
    let (seg, detections) = match user_seg {
        Some(seg) => {
            if seg.dims() != image.dims() {
                return Err(Error::Shape(format!("seg {:?} vs image {:?}", seg.dims(), image.dims())).at(Stage::Segmentation));
            }
            (seg.clone(), detections_from_seg(seg))
        }
        None => {
            let seg = backends.segment(image).at(Stage::Segmentation)?;
            (seg, backends.detect(image).at(Stage::Detection)?)
        }
    };
    if detections.is_empty() {
        return Err(Error::NoTarget("no objects detected".into()).at(Stage::Detection));
    }
    let mut candidates: Vec<String> = Vec::new();
    for d in &detections {
        if !candidates.contains(&d.label) {
            candidates.push(d.label.clone());
        }
    }
    let selection = select_target_class(&candidates, instruction, table, DEFAULT_THRESHOLD).at(Stage::Selection)?;
    let target_class = detections
        .iter()
        .find(|d| d.label == selection.label)
        .map(|d| d.class_id)
        .expect("selected label comes from a detection");
    let mask = build_text_relevant_mask(&seg, &detections, &selection.label).at(Stage::Mask)?;
    let split = crate::image::split_by_mask(image, &mask).at(Stage::Mask)?;
    let canvas = prepare_canvas(image, &mask, backends, working_size).at(Stage::Canvas)?;
    Ok(PreprocResult {
        split,
        canvas,
        seg,
        detections,
        target: selection.label.clone(),
        target_class,
        selection,
    })
}
