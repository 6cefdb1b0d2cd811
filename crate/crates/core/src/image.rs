//! Image, mask and segmentation-map value types plus the mask algebra used by
//! every later stage: region split and composite, bounding-box crop/paste,
//! centroid scaling, outline bands and resampling.
//!
//! All operations are pure functions of their inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W×C image with channel values in `[0, 1]`, stored row-major `(y, x, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::param(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image");
        assert!((0.0..=1.0).contains(&value), "fill value outside [0,1]");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// RGB image built from a per-pixel closure.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::zeros(height, width, 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.iter().enumerate() {
                    img.data[(y * width + x) * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Builds an image from values that may stray slightly outside `[0,1]`,
    /// clamping them into range.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    component: "image".into(),
                    detail: "non-finite pixel".into(),
                });
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sets one channel value, clamping into `[0,1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies a pixel from `src` at the same position. Caller guarantees
    /// matching channel count.
    #[inline]
    pub fn copy_pixel_from(&mut self, src: &ImageBuffer, y: usize, x: usize) {
        let i = (y * self.width + x) * self.channels;
        let j = (y * src.width + x) * src.channels;
        self.data[i..i + self.channels].copy_from_slice(&src.data[j..j + src.channels]);
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, px: &[f64]) {
        let i = (y * self.width + x) * self.channels;
        for (dst, v) in self.data[i..i + self.channels].iter_mut().zip(px) {
            *dst = v.clamp(0.0, 1.0);
        }
    }

    /// Mean of each channel over the pixels where `mask` is set.
    pub fn masked_channel_means(&self, mask: &MaskMap) -> Option<Vec<f64>> {
        let mut sums = vec![0.0; self.channels];
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(y, x) {
                    n += 1;
                    for (s, v) in sums.iter_mut().zip(self.pixel(y, x)) {
                        *s += v;
                    }
                }
            }
        }
        (n > 0).then(|| sums.into_iter().map(|s| s / n as f64).collect())
    }

    fn check_same_dims(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }
}

/// Binary mask aligned with an image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn union(&self, other: &MaskMap) -> Result<MaskMap> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &MaskMap) -> Result<MaskMap> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn complement(&self) -> MaskMap {
        MaskMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    fn zip_with(&self, other: &MaskMap, f: impl Fn(bool, bool) -> bool) -> Result<MaskMap> {
        if self.dims() != other.dims() {
            return Err(Error::shape("mask dimensions differ"));
        }
        Ok(MaskMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then_some(BoundingBox { y0, x0, y1, x1 })
    }

    /// Centroid `(y, x)` of the set pixels, using pixel-center coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    fn check_image(&self, image: &ImageBuffer) -> Result<()> {
        if self.dims() != image.dims() {
            return Err(Error::shape(format!(
                "mask {}x{} vs image {}x{}",
                self.height,
                self.width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// Per-pixel class ids (0 = background) with a label palette.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
    palette: BTreeMap<u32, String>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>, palette: BTreeMap<u32, String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("segmap dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "segmap data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(id) = data.iter().find(|id| **id != 0 && !palette.contains_key(id)) {
            return Err(Error::Palette(format!("class id {id} missing from palette")));
        }
        Ok(Self {
            height,
            width,
            data,
            palette,
        })
    }

    /// All-background map with the given palette.
    pub fn background(height: usize, width: usize, palette: BTreeMap<u32, String>) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
            palette,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn palette(&self) -> &BTreeMap<u32, String> {
        &self.palette
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    /// Sets a class id. Panics if the id is not in the palette.
    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        assert!(id == 0 || self.palette.contains_key(&id), "class id {id} not in palette");
        self.data[y * self.width + x] = id;
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.palette.get(&id).map(String::as_str)
    }

    /// Smallest class id carrying `label`.
    pub fn class_id_of(&self, label: &str) -> Option<u32> {
        self.palette.iter().find(|(_, l)| l.as_str() == label).map(|(id, _)| *id)
    }

    pub fn mask_of(&self, id: u32) -> MaskMap {
        MaskMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| *v == id).collect(),
        }
    }

    pub fn count_of(&self, id: u32) -> usize {
        self.data.iter().filter(|v| **v == id).count()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.data.contains(&id)
    }

    /// Class ids present in the map (excluding background), ascending.
    pub fn present_ids(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|v| *v != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Result<Self> {
        if y0 >= y1 || x0 >= x1 {
            return Err(Error::param(format!("degenerate box ({y0},{x0},{y1},{x1})")));
        }
        Ok(Self { y0, x0, y1, x1 })
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.y0 < self.y1 && self.x0 < self.x1 && self.y1 <= height && self.x1 <= width
    }

    /// Grows the box by `margin` on every side, clamped to `height × width`.
    pub fn expand(&self, margin: usize, height: usize, width: usize) -> BoundingBox {
        BoundingBox {
            y0: self.y0.saturating_sub(margin),
            x0: self.x0.saturating_sub(margin),
            y1: (self.y1 + margin).min(height),
            x1: (self.x1 + margin).min(width),
        }
    }
}

/// The text-relevant / text-irrelevant pair produced by masking an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSplit {
    pub relevant: ImageBuffer,
    pub irrelevant: ImageBuffer,
    pub mask: MaskMap,
}

pub fn split_by_mask(image: &ImageBuffer, mask: &MaskMap) -> Result<RegionSplit> {
    mask.check_image(image)?;
    let c = image.channels();
    let mut relevant = image.data().to_vec();
    let mut irrelevant = image.data().to_vec();
    for (i, &m) in mask.data().iter().enumerate() {
        let px = i * c..(i + 1) * c;
        if m {
            irrelevant[px].fill(0.0);
        } else {
            relevant[px].fill(0.0);
        }
    }
    Ok(RegionSplit {
        relevant: ImageBuffer::new(image.height(), image.width(), c, relevant)?,
        irrelevant: ImageBuffer::new(image.height(), image.width(), c, irrelevant)?,
        mask: mask.clone(),
    })
}

/// `relevant` where the mask is set, `irrelevant` elsewhere.
pub fn composite(relevant: &ImageBuffer, irrelevant: &ImageBuffer, mask: &MaskMap) -> Result<ImageBuffer> {
    relevant.check_same_dims(irrelevant, "composite")?;
    mask.check_image(relevant)?;
    let mut out = irrelevant.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                out.copy_pixel_from(relevant, y, x);
            }
        }
    }
    Ok(out)
}

pub fn crop(image: &ImageBuffer, bbox: &BoundingBox) -> Result<ImageBuffer> {
    if !bbox.fits_within(image.height(), image.width()) {
        return Err(Error::shape(format!("box {bbox:?} outside image")));
    }
    let c = image.channels();
    let mut data = Vec::with_capacity(bbox.height() * bbox.width() * c);
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            data.extend_from_slice(image.pixel(y, x));
        }
    }
    ImageBuffer::new(bbox.height(), bbox.width(), c, data)
}

pub fn crop_mask(mask: &MaskMap, bbox: &BoundingBox) -> Result<MaskMap> {
    if !bbox.fits_within(mask.height(), mask.width()) {
        return Err(Error::shape(format!("box {bbox:?} outside mask")));
    }
    Ok(MaskMap::from_fn(bbox.height(), bbox.width(), |y, x| {
        mask.get(y + bbox.y0, x + bbox.x0)
    }))
}

/// Crops the image to the mask's tight bounding box grown by `margin`.
pub fn crop_to_mask_bbox(image: &ImageBuffer, mask: &MaskMap, margin: usize) -> Result<(ImageBuffer, BoundingBox)> {
    mask.check_image(image)?;
    let tight = mask
        .bbox()
        .ok_or_else(|| Error::EmptyRegion("cannot crop to an empty mask".into()))?;
    let bbox = tight.expand(margin, image.height(), image.width());
    Ok((crop(image, &bbox)?, bbox))
}

pub fn paste_patch(target: &ImageBuffer, patch: &ImageBuffer, bbox: &BoundingBox) -> Result<ImageBuffer> {
    if !bbox.fits_within(target.height(), target.width()) {
        return Err(Error::shape(format!("box {bbox:?} outside target")));
    }
    if patch.dims() != (bbox.height(), bbox.width()) || patch.channels() != target.channels() {
        return Err(Error::shape(format!(
            "patch {}x{}x{} does not fit box {bbox:?}",
            patch.height(),
            patch.width(),
            patch.channels()
        )));
    }
    let mut out = target.clone();
    for y in 0..bbox.height() {
        for x in 0..bbox.width() {
            out.set_pixel(y + bbox.y0, x + bbox.x0, patch.pixel(y, x));
        }
    }
    Ok(out)
}

/// Scales the mask's foreground about its centroid by `factor` (linear size).
///
/// Each output pixel center is mapped back through the inverse scaling and
/// takes the value of the nearest source pixel; exact ties go to the source
/// pixel closer to the centroid, which keeps the result symmetric about it.
/// Inverse mapping fills the enlarged region without holes. Pixels that map
/// from outside the frame stay unset, so content scaled past the edge is
/// clipped.
pub fn scale_mask_about_centroid(mask: &MaskMap, factor: f64) -> Result<MaskMap> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::param(format!("scale factor must be positive, got {factor}")));
    }
    let (cy, cx) = mask
        .centroid()
        .ok_or_else(|| Error::EmptyRegion("cannot scale an empty mask".into()))?;
    let (h, w) = mask.dims();
    let src_y: Vec<Option<usize>> = (0..h).map(|y| inverse_index(y, cy, factor, h)).collect();
    let src_x: Vec<Option<usize>> = (0..w).map(|x| inverse_index(x, cx, factor, w)).collect();
    Ok(MaskMap::from_fn(h, w, |y, x| match (src_y[y], src_x[x]) {
        (Some(sy), Some(sx)) => mask.get(sy, sx),
        _ => false,
    }))
}

fn inverse_index(k: usize, center: f64, factor: f64, len: usize) -> Option<usize> {
    let q = (k as f64 - center) / factor + center;
    let s = round_toward(q, center);
    (s >= 0.0 && s < len as f64).then_some(s as usize)
}

/// Nearest integer, with exact halves resolved toward `center`.
pub(crate) fn round_toward(q: f64, center: f64) -> f64 {
    const TIE_EPS: f64 = 1e-9;
    let lo = q.floor();
    let frac = q - lo;
    if (frac - 0.5).abs() < TIE_EPS {
        if (lo - center).abs() <= (lo + 1.0 - center).abs() {
            lo
        } else {
            lo + 1.0
        }
    } else if frac < 0.5 {
        lo
    } else {
        lo + 1.0
    }
}

/// Boundary pixels of a mask under 4-connectivity: a pixel whose value
/// differs from at least one in-frame 4-neighbor.
pub fn boundary(mask: &MaskMap) -> MaskMap {
    let (h, w) = mask.dims();
    MaskMap::from_fn(h, w, |y, x| {
        let v = mask.get(y, x);
        (y > 0 && mask.get(y - 1, x) != v)
            || (y + 1 < h && mask.get(y + 1, x) != v)
            || (x > 0 && mask.get(y, x - 1) != v)
            || (x + 1 < w && mask.get(y, x + 1) != v)
    })
}

/// Band of pixels whose Chebyshev distance to the mask boundary is below
/// `band_width`. A band of 1 is the boundary itself.
pub fn extract_outline(mask: &MaskMap, band_width: usize) -> Result<MaskMap> {
    if band_width == 0 {
        return Err(Error::param("band width must be at least 1"));
    }
    Ok(dilate(&boundary(mask), band_width - 1))
}

/// Square (Chebyshev) dilation by `radius`.
pub fn dilate(mask: &MaskMap, radius: usize) -> MaskMap {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    // separable: rows then columns
    let mut rows = MaskMap::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows.set(y, x, (lo..=hi).any(|xx| mask.get(y, xx)));
        }
    }
    let mut out = MaskMap::empty(h, w);
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out.set(y, x, (lo..=hi).any(|yy| rows.get(yy, x)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    Nearest,
    Bilinear,
}

pub fn resize_image(image: &ImageBuffer, new_h: usize, new_w: usize, method: ResizeMethod) -> Result<ImageBuffer> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::param(format!("resize target must be positive, got {new_h}x{new_w}")));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let mut data = vec![0.0; new_h * new_w * c];
    match method {
        ResizeMethod::Nearest => {
            for y in 0..new_h {
                let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                for x in 0..new_w {
                    let xx = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                    let o = (y * new_w + x) * c;
                    data[o..o + c].copy_from_slice(image.pixel(yy, xx));
                }
            }
        }
        ResizeMethod::Bilinear => {
            for y in 0..new_h {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ty = fy - y0 as f64;
                for x in 0..new_w {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let tx = fx - x0 as f64;
                    let o = (y * new_w + x) * c;
                    for ch in 0..c {
                        data[o + ch] = bilerp(
                            image.get(y0, x0, ch),
                            image.get(y0, x1, ch),
                            image.get(y1, x0, ch),
                            image.get(y1, x1, ch),
                            ty,
                            tx,
                        );
                    }
                }
            }
        }
    }
    ImageBuffer::from_clamped(new_h, new_w, c, data)
}

/// Bilinear blend that returns the corner value exactly when both weights are 0.
#[inline]
pub(crate) fn bilerp(a: f64, b: f64, c: f64, d: f64, ty: f64, tx: f64) -> f64 {
    let top = if tx == 0.0 { a } else { a + (b - a) * tx };
    let bot = if tx == 0.0 { c } else { c + (d - c) * tx };
    if ty == 0.0 {
        top
    } else {
        top + (bot - top) * ty
    }
}

/// Nearest-neighbour mask resize with the same sampling rule as
/// [`ResizeMethod::Nearest`].
pub fn resize_mask(mask: &MaskMap, new_h: usize, new_w: usize) -> Result<MaskMap> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::param("resize target must be positive"));
    }
    let (h, w) = mask.dims();
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    Ok(MaskMap::from_fn(new_h, new_w, |y, x| {
        let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let xx = (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        mask.get(yy, xx)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
        let data = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
        ImageBuffer::new(h, w, 3, data).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskMap {
        MaskMap::from_fn(h, w, |_, _| rng.gen_bool(0.4))
    }

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> MaskMap {
        MaskMap::from_fn(n, n, |y, x| y >= y0 && y < y0 + side && x >= x0 && x < x0 + side)
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImageBuffer::new(1, 1, 3, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 1, 3, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 2, 3, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(0, 2, 3, vec![]).is_err());
    }

    #[test]
    fn segmap_requires_palette_entries() {
        let err = SegMap::new(1, 2, vec![0, 3], BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::Palette(_)));
    }

    #[test]
    fn split_full_and_empty_masks() {
        let img = ImageBuffer::filled(2, 2, 3, 1.0);
        let s = split_by_mask(&img, &MaskMap::full(2, 2)).unwrap();
        assert_eq!(s.relevant, img);
        assert_eq!(s.irrelevant, ImageBuffer::zeros(2, 2, 3));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 5, 4);
        let s = split_by_mask(&img, &MaskMap::empty(5, 4)).unwrap();
        assert_eq!(s.relevant, ImageBuffer::zeros(5, 4, 3));
        assert_eq!(s.irrelevant, img);
    }

    #[test]
    fn split_sums_back_to_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 16, 16);
        let mask = random_mask(&mut rng, 16, 16);
        let s = split_by_mask(&img, &mask).unwrap();
        for i in 0..img.data().len() {
            assert_eq!(s.relevant.data()[i] + s.irrelevant.data()[i], img.data()[i]);
        }
    }

    #[test]
    fn split_dimension_mismatch() {
        let img = ImageBuffer::zeros(4, 4, 3);
        assert!(matches!(split_by_mask(&img, &MaskMap::full(4, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn composite_checkerboard() {
        let red = ImageBuffer::from_fn(6, 6, |_, _| [1.0, 0.0, 0.0]);
        let blue = ImageBuffer::from_fn(6, 6, |_, _| [0.0, 0.0, 1.0]);
        let mask = MaskMap::from_fn(6, 6, |y, x| (y + x) % 2 == 0);
        let out = composite(&red, &blue, &mask).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let want: &[f64] = if (y + x) % 2 == 0 { &[1.0, 0.0, 0.0] } else { &[0.0, 0.0, 1.0] };
                assert_eq!(out.pixel(y, x), want);
            }
        }
        let none = composite(&red, &blue, &MaskMap::empty(6, 6)).unwrap();
        assert_eq!(none, blue);
    }

    #[test]
    fn crop_point_and_full() {
        let img = ImageBuffer::zeros(8, 8, 3);
        let mut m = MaskMap::empty(8, 8);
        m.set(3, 4, true);
        let (patch, b) = crop_to_mask_bbox(&img, &m, 0).unwrap();
        assert_eq!(b, BoundingBox { y0: 3, x0: 4, y1: 4, x1: 5 });
        assert_eq!(patch.dims(), (1, 1));

        let (_, b) = crop_to_mask_bbox(&img, &MaskMap::full(8, 8), 0).unwrap();
        assert_eq!(b, BoundingBox { y0: 0, x0: 0, y1: 8, x1: 8 });
        assert!(matches!(
            crop_to_mask_bbox(&img, &MaskMap::empty(8, 8), 2),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn crop_l_shape_matches_brute_force() {
        let mut m = MaskMap::empty(8, 8);
        for y in 2..7 {
            m.set(y, 2, true);
        }
        for x in 2..6 {
            m.set(6, x, true);
        }
        let (mut y0, mut x0, mut y1, mut x1) = (99usize, 99usize, 0usize, 0usize);
        for y in 0..8 {
            for x in 0..8 {
                if m.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        let want = BoundingBox {
            y0: y0.saturating_sub(1),
            x0: x0.saturating_sub(1),
            y1: (y1 + 2).min(8),
            x1: (x1 + 2).min(8),
        };
        let (_, b) = crop_to_mask_bbox(&ImageBuffer::zeros(8, 8, 3), &m, 1).unwrap();
        assert_eq!(b, want);
        assert_eq!(b, BoundingBox { y0: 1, x0: 1, y1: 8, x1: 7 });
    }

    #[test]
    fn paste_round_trip_and_zero_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 10, 12);
        let mask = square(10, 2, 3, 4).intersect(&MaskMap::full(10, 10)).unwrap();
        let img10 = crop(&img, &BoundingBox::new(0, 0, 10, 10).unwrap()).unwrap();
        let (patch, b) = crop_to_mask_bbox(&img10, &mask, 0).unwrap();
        assert_eq!(paste_patch(&img10, &patch, &b).unwrap(), img10);

        let zero = ImageBuffer::zeros(b.height(), b.width(), 3);
        let out = paste_patch(&img10, &zero, &b).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                if b.contains(y, x) {
                    assert_eq!(out.pixel(y, x), &[0.0; 3]);
                } else {
                    assert_eq!(out.pixel(y, x), img10.pixel(y, x));
                }
            }
        }
        let bad = BoundingBox { y0: 8, x0: 8, y1: 12, x1: 12 };
        assert!(paste_patch(&img10, &ImageBuffer::zeros(4, 4, 3), &bad).is_err());
    }

    #[test]
    fn paste_random_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let target = random_image(&mut rng, 9, 11);
            let y0 = rng.gen_range(0..8);
            let x0 = rng.gen_range(0..10);
            let y1 = rng.gen_range(y0 + 1..=9);
            let x1 = rng.gen_range(x0 + 1..=11);
            let b = BoundingBox::new(y0, x0, y1, x1).unwrap();
            let patch = random_image(&mut rng, b.height(), b.width());
            let out = paste_patch(&target, &patch, &b).unwrap();
            for y in 0..9 {
                for x in 0..11 {
                    let want = if b.contains(y, x) {
                        patch.pixel(y - y0, x - x0)
                    } else {
                        target.pixel(y, x)
                    };
                    assert_eq!(out.pixel(y, x), want);
                }
            }
        }
    }

    /// Independent rasterization oracle: for every output pixel, enumerate
    /// the source pixels within half a pixel of the inverse-mapped point on
    /// each axis and keep the one nearest the centroid when two tie.
    fn scale_oracle(mask: &MaskMap, f: f64) -> MaskMap {
        let (cy, cx) = mask.centroid().unwrap();
        let pick = |k: usize, c: f64, len: usize| -> Option<usize> {
            let q = (k as f64 - c) / f + c;
            (0..len)
                .filter(|s| (q - *s as f64).abs() <= 0.5 + 1e-9)
                .min_by(|a, b| {
                    let da = (q - *a as f64).abs();
                    let db = (q - *b as f64).abs();
                    if (da - db).abs() < 1e-9 {
                        (*a as f64 - c).abs().total_cmp(&(*b as f64 - c).abs())
                    } else {
                        da.total_cmp(&db)
                    }
                })
        };
        MaskMap::from_fn(mask.height(), mask.width(), |y, x| {
            match (pick(y, cy, mask.height()), pick(x, cx, mask.width())) {
                (Some(sy), Some(sx)) => mask.get(sy, sx),
                _ => false,
            }
        })
    }

    #[test]
    fn scale_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mask(&mut rng, 12, 12);
        assert_eq!(scale_mask_about_centroid(&m, 1.0).unwrap(), m);
    }

    #[test]
    fn scale_square_up_and_down() {
        let small = square(16, 7, 7, 2);
        let up = scale_mask_about_centroid(&small, 2.0).unwrap();
        assert_eq!(up, square(16, 6, 6, 4));
        assert_eq!(up, scale_oracle(&small, 2.0));

        let big = square(16, 4, 4, 8);
        let down = scale_mask_about_centroid(&big, 0.5).unwrap();
        assert_eq!(down, square(16, 6, 6, 4));
        assert_eq!(down, scale_oracle(&big, 0.5));
    }

    #[test]
    fn scale_matches_oracle_on_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let m = MaskMap::from_fn(20, 20, |y, x| {
                let dy = y as f64 - 9.3;
                let dx = x as f64 - 10.1;
                dy * dy / 16.0 + dx * dx / 9.0 <= 1.0 || (y == 12 && x > 9 && x < 14)
            });
            let f = [0.5, 1.5, 2.0, 3.0, 0.25][rng.gen_range(0..5)];
            assert_eq!(scale_mask_about_centroid(&m, f).unwrap(), scale_oracle(&m, f));
        }
    }

    #[test]
    fn scale_errors() {
        let m = square(8, 2, 2, 3);
        assert!(matches!(scale_mask_about_centroid(&m, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(scale_mask_about_centroid(&m, -2.0), Err(Error::Parameter(_))));
        assert!(matches!(
            scale_mask_about_centroid(&MaskMap::empty(8, 8), 2.0),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn scale_clips_at_frame() {
        let m = square(10, 0, 0, 4);
        let up = scale_mask_about_centroid(&m, 4.0).unwrap();
        assert!(up.count() < 16 * 16);
        assert!(up.get(0, 0));
    }

    /// Brute-force outline: distance from each pixel to every boundary pixel.
    fn outline_oracle(mask: &MaskMap, band: usize) -> MaskMap {
        let (h, w) = mask.dims();
        let mut b = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = mask.get(y, x);
                let nbrs = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
                let is_b = nbrs.iter().any(|(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 && mask.get(ny as usize, nx as usize) != v
                });
                if is_b {
                    b.push((y as i64, x as i64));
                }
            }
        }
        MaskMap::from_fn(h, w, |y, x| {
            b.iter()
                .any(|(by, bx)| (by - y as i64).abs().max((bx - x as i64).abs()) < band as i64)
        })
    }

    #[test]
    fn outline_cases() {
        assert_eq!(extract_outline(&MaskMap::empty(7, 7), 1).unwrap(), MaskMap::empty(7, 7));
        let sq = square(10, 3, 3, 4);
        let ring = extract_outline(&sq, 1).unwrap();
        assert_eq!(ring, outline_oracle(&sq, 1));
        // inner ring of 12 plus the 16 outer 4-adjacent pixels
        assert_eq!(ring.count(), 12 + 16);
        for band in 2..4 {
            assert_eq!(extract_outline(&sq, band).unwrap(), outline_oracle(&sq, band));
        }
        assert!(extract_outline(&sq, 0).is_err());
    }

    #[test]
    fn resize_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 5, 7);
        for m in [ResizeMethod::Nearest, ResizeMethod::Bilinear] {
            assert_eq!(resize_image(&img, 5, 7, m).unwrap(), img);
        }
        let one = ImageBuffer::from_fn(1, 1, |_, _| [0.2, 0.4, 0.6]);
        for m in [ResizeMethod::Nearest, ResizeMethod::Bilinear] {
            let r = resize_image(&one, 4, 4, m).unwrap();
            assert!(r.data().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
        }
        let two = random_image(&mut rng, 2, 2);
        let r = resize_image(&two, 4, 4, ResizeMethod::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r.pixel(y, x), two.pixel(y / 2, x / 2));
            }
        }
        assert!(resize_image(&img, 0, 3, ResizeMethod::Nearest).is_err());
    }

    fn arb_image_mask() -> impl Strategy<Value = (ImageBuffer, MaskMap)> {
        (1usize..12, 1usize..12, any::<u64>()).prop_map(|(h, w, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (random_image(&mut rng, h, w), random_mask(&mut rng, h, w))
        })
    }

    proptest! {
        #[test]
        fn prop_split_composite_round_trip((img, mask) in arb_image_mask()) {
            let s = split_by_mask(&img, &mask).unwrap();
            prop_assert_eq!(composite(&s.relevant, &s.irrelevant, &mask).unwrap(), img);
            for (a, b) in s.relevant.data().iter().zip(s.irrelevant.data()) {
                prop_assert_eq!(a * b, 0.0);
            }
        }

        #[test]
        fn prop_outline_complement_symmetric(seed in any::<u64>(), band in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, 9, 13);
            prop_assert_eq!(extract_outline(&m, band).unwrap(), extract_outline(&m.complement(), band).unwrap());
        }

        #[test]
        fn prop_scale_round_trip(y0 in 4usize..12, x0 in 4usize..12, hh in 8usize..14, ww in 8usize..14, f in prop::sample::select(vec![2.0f64, 4.0, 1.5, 3.0])) {
            let n = 64;
            let m = MaskMap::from_fn(n, n, |y, x| {
                let (yy, xx) = (y as f64 - (24 + y0) as f64, x as f64 - (24 + x0) as f64);
                // rounded rectangle blob
                yy.abs() < hh as f64 / 2.0 && xx.abs() < ww as f64 / 2.0 && !(yy.abs() > hh as f64 / 2.0 - 2.0 && xx.abs() > ww as f64 / 2.0 - 2.0)
            });
            let back = scale_mask_about_centroid(&scale_mask_about_centroid(&m, f).unwrap(), 1.0 / f).unwrap();
            let diff = m.data().iter().zip(back.data()).filter(|(a, b)| a != b).count();
            prop_assert!(diff as f64 <= 0.05 * m.count() as f64, "diff {} of {}", diff, m.count());
        }

        #[test]
        fn prop_scale_keeps_centroid(y0 in 10usize..20, x0 in 10usize..20, side in 3usize..9, f in 0.3f64..3.0) {
            let m = square(48, y0, x0, side);
            let s = scale_mask_about_centroid(&m, f).unwrap();
            let (ay, ax) = m.centroid().unwrap();
            let (by, bx) = s.centroid().unwrap();
            prop_assert!((ay - by).abs() <= 1.0 && (ax - bx).abs() <= 1.0);
        }
    }
}
