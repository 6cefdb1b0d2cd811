//! PNG codecs for images, masks and segmentation maps.
//!
//! Images are 8-bit RGB: `v = byte / 255` on read and `byte = round(v * 255)`
//! on write. Segmentation maps are single-channel 8-bit PNGs of class ids with
//! a sidecar JSON palette `{"<id>": "<label>"}` next to them (`seg.png` pairs
//! with `seg.json`).

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, MaskMap, SegMap};

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Snaps every value to the 8-bit grid, i.e. what a PNG round trip yields.
pub fn quantize(image: &ImageBuffer) -> ImageBuffer {
    let data = image.data().iter().map(|v| from_byte(to_byte(*v))).collect();
    ImageBuffer::new(image.height(), image.width(), image.channels(), data).expect("quantized values stay in range")
}

fn to_rgb8(image: &ImageBuffer) -> Result<RgbImage> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {}", image.channels())));
    }
    let bytes: Vec<u8> = image.data().iter().map(|v| to_byte(*v)).collect();
    RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))
}

fn from_dynamic(img: DynamicImage) -> Result<ImageBuffer> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(from_byte).collect();
    ImageBuffer::new(h as usize, w as usize, 3, data)
}

pub fn encode_png(image: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(image)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    from_dynamic(image::load_from_memory_with_format(bytes, ImageFormat::Png)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    from_dynamic(image::open(path)?)
}

pub fn write_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

fn gray_png(h: usize, w: usize, bytes: Vec<u8>) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::Shape("gray buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

/// Mask as an 8-bit gray PNG (0 / 255).
pub fn encode_mask_png(mask: &MaskMap) -> Result<Vec<u8>> {
    gray_png(
        mask.height(),
        mask.width(),
        mask.data().iter().map(|v| if *v { 255 } else { 0 }).collect(),
    )
}

/// Any nonzero gray value counts as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<MaskMap> {
    let (h, w, data) = decode_gray(bytes)?;
    MaskMap::new(h, w, data.into_iter().map(|b| b != 0).collect())
}

pub fn encode_segmap_png(seg: &SegMap) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(seg.data().len());
    for id in seg.data() {
        let b = u8::try_from(*id).map_err(|_| Error::Palette(format!("class id {id} does not fit in 8 bits")))?;
        bytes.push(b);
    }
    gray_png(seg.height(), seg.width(), bytes)
}

pub fn decode_segmap_png(bytes: &[u8], palette: BTreeMap<u32, String>) -> Result<SegMap> {
    let (h, w, data) = decode_gray(bytes)?;
    SegMap::new(h, w, data.into_iter().map(u32::from).collect(), palette)
}

pub fn palette_to_json(palette: &BTreeMap<u32, String>) -> serde_json::Value {
    serde_json::Value::Object(
        palette
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
            .collect(),
    )
}

pub fn palette_from_json(value: &serde_json::Value) -> Result<BTreeMap<u32, String>> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Palette("palette must be a JSON object".into()))?;
    let mut palette = BTreeMap::new();
    for (k, v) in obj {
        let id: u32 = k.parse().map_err(|_| Error::Palette(format!("bad class id `{k}`")))?;
        let label = v
            .as_str()
            .ok_or_else(|| Error::Palette(format!("label for {id} must be a string")))?;
        palette.insert(id, label.to_string());
    }
    Ok(palette)
}

pub fn palette_sidecar(png_path: &Path) -> PathBuf {
    png_path.with_extension("json")
}

pub fn write_segmap(seg: &SegMap, png_path: impl AsRef<Path>) -> Result<()> {
    let png_path = png_path.as_ref();
    std::fs::write(png_path, encode_segmap_png(seg)?)?;
    std::fs::write(
        palette_sidecar(png_path),
        serde_json::to_vec_pretty(&palette_to_json(seg.palette()))?,
    )?;
    Ok(())
}

pub fn read_segmap(png_path: impl AsRef<Path>) -> Result<SegMap> {
    let png_path = png_path.as_ref();
    let palette: serde_json::Value = serde_json::from_slice(&std::fs::read(palette_sidecar(png_path))?)?;
    decode_segmap_png(&std::fs::read(png_path)?, palette_from_json(&palette)?)
}
