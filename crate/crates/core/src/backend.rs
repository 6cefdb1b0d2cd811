//! Pluggable segmentation, detection, super-resolution and inpainting
//! backends, the in-repo toy references, and a subprocess adapter.
//!
//! External backends speak a framed protocol on stdin/stdout: one line of
//! JSON (the header, carrying a `lengths` array) followed by the raw payloads
//! back to back. See [`encode_message`] and the README for the operations.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::combiner::inpaint_reference;
use crate::error::{Error, Result};
use crate::image::{BoundingBox, ImageBuffer, MaskMap, SegMap};
use crate::io;
use crate::synth::{shape_palette, ShapeKind, COLORS};

/// One detected object instance, linked to a seg-map class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
}

pub trait SegmentationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn segment(&self, image: &ImageBuffer) -> Result<SegMap>;
}

pub trait DetectionBackend: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, image: &ImageBuffer) -> Result<Vec<DetectedObject>>;
}

pub trait SrBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Output dimensions are the input dimensions times `scale`.
    fn upscale(&self, image: &ImageBuffer, scale: usize) -> Result<ImageBuffer>;
}

pub trait InpaintBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Fills `hole`; pixels outside it must come back unchanged.
    fn inpaint(&self, image: &ImageBuffer, hole: &MaskMap) -> Result<ImageBuffer>;
}

fn backend_err(backend: &str, detail: impl Into<String>) -> Error {
    Error::Backend {
        backend: backend.to_string(),
        detail: detail.into(),
    }
}

/// Max per-channel distance for a pixel to count as a palette color.
const COLOR_TOLERANCE: f64 = 0.05;
const MIN_COMPONENT_AREA: usize = 4;

/// A connected same-color region recognized as one of the synthetic shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeComponent {
    pub shape: ShapeKind,
    pub color: usize,
    pub bbox: BoundingBox,
    pub area: usize,
    /// Area over bounding-box area.
    pub fill: f64,
    /// Row-major pixel indices.
    pub pixels: Vec<usize>,
}

fn palette_color_of(px: &[f64]) -> Option<usize> {
    COLORS.iter().position(|c| {
        c.rgb
            .iter()
            .zip(px)
            .all(|(a, b)| (a - b).abs() <= COLOR_TOLERANCE)
    })
}

fn classify_fill(fill: f64) -> ShapeKind {
    if fill > 0.9 {
        ShapeKind::Square
    } else if fill >= 0.64 {
        ShapeKind::Circle
    } else {
        ShapeKind::Triangle
    }
}

/// Finds 4-connected palette-colored components and classifies each shape by
/// how much of its bounding box it fills. Components are returned in raster
/// order of their first pixel.
pub fn analyze_shapes(image: &ImageBuffer) -> Result<Vec<ShapeComponent>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("toy analysis needs RGB, got {} channels", image.channels())));
    }
    let (h, w) = image.dims();
    let colors: Vec<Option<usize>> = (0..h * w).map(|i| palette_color_of(image.pixel(i / w, i % w))).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let Some(color) = colors[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && colors[j] == Some(color) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if pixels.len() < MIN_COMPONENT_AREA {
            continue;
        }
        pixels.sort_unstable();
        let ys = pixels.iter().map(|i| i / w);
        let xs = pixels.iter().map(|i| i % w);
        let bbox = BoundingBox {
            y0: ys.clone().min().unwrap(),
            y1: ys.max().unwrap() + 1,
            x0: xs.clone().min().unwrap(),
            x1: xs.max().unwrap() + 1,
        };
        let fill = pixels.len() as f64 / (bbox.height() * bbox.width()) as f64;
        out.push(ShapeComponent {
            shape: classify_fill(fill),
            color,
            bbox,
            area: pixels.len(),
            fill,
            pixels,
        });
    }
    Ok(out)
}

/// Analytic segmenter for synthetic scenes: palette-colored components are
/// labeled with their shape class.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToySegmenter;

impl SegmentationBackend for ToySegmenter {
    fn name(&self) -> &str {
        "toy"
    }

    fn segment(&self, image: &ImageBuffer) -> Result<SegMap> {
        let (h, w) = image.dims();
        let mut seg = SegMap::background(h, w, shape_palette());
        for comp in analyze_shapes(image)? {
            for &i in &comp.pixels {
                seg.set(i / w, i % w, comp.shape.class_id());
            }
        }
        Ok(seg)
    }
}

/// One detection per recognized component; confidence reflects how close the
/// fill ratio is to the ideal one for the shape.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDetector;

impl DetectionBackend for ToyDetector {
    fn name(&self) -> &str {
        "toy"
    }

    fn detect(&self, image: &ImageBuffer) -> Result<Vec<DetectedObject>> {
        Ok(analyze_shapes(image)?
            .into_iter()
            .map(|c| {
                let ideal = c.shape.ideal_fill();
                DetectedObject {
                    label: c.shape.label().to_string(),
                    confidence: (1.0 - (c.fill - ideal).abs() / ideal).clamp(0.0, 1.0),
                    bbox: c.bbox,
                    class_id: c.shape.class_id(),
                }
            })
            .collect())
    }
}

/// Corner-aligned bilinear upscaling: source pixel `i` lands exactly on
/// output pixel `i * scale`, so sampling the output at those positions gives
/// the source back bit for bit.
#[derive(Debug, Clone, Copy, Default)]
pub struct BilinearSr;

pub fn upscale_bilinear(image: &ImageBuffer, scale: usize) -> Result<ImageBuffer> {
    if scale == 0 {
        return Err(Error::Parameter("SR scale must be positive".into()));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (nh, nw) = (h * scale, w * scale);
    let s = scale as f64;
    let mut data = vec![0.0; nh * nw * c];
    for y in 0..nh {
        let fy = (y as f64 / s).min((h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = (x as f64 / s).min((w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let o = (y * nw + x) * c;
            for ch in 0..c {
                data[o + ch] = crate::image::bilerp(
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
    ImageBuffer::from_clamped(nh, nw, c, data)
}

impl SrBackend for BilinearSr {
    fn name(&self) -> &str {
        "toy"
    }

    fn upscale(&self, image: &ImageBuffer, scale: usize) -> Result<ImageBuffer> {
        upscale_bilinear(image, scale)
    }
}

/// Reference diffusion inpainter.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionInpainter {
    pub iterations: usize,
}

impl Default for DiffusionInpainter {
    fn default() -> Self {
        Self { iterations: 8 }
    }
}

impl InpaintBackend for DiffusionInpainter {
    fn name(&self) -> &str {
        "toy"
    }

    fn inpaint(&self, image: &ImageBuffer, hole: &MaskMap) -> Result<ImageBuffer> {
        inpaint_reference(image, hole, self.iterations)
    }
}

/// Serializes a header plus payloads; the header gains a `lengths` field.
pub fn encode_message(header: &Value, payloads: &[Vec<u8>]) -> Result<Vec<u8>> {
    let mut header = header.clone();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::Parameter("protocol header must be a JSON object".into()))?;
    obj.insert("lengths".into(), json!(payloads.iter().map(Vec::len).collect::<Vec<_>>()));
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for p in payloads {
        out.extend_from_slice(p);
    }
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<(Value, Vec<Vec<u8>>)> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Parameter("protocol message has no header line".into()))?;
    let header: Value = serde_json::from_slice(&bytes[..nl])?;
    let lengths: Vec<usize> = match header.get("lengths") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Vec::new(),
    };
    let mut payloads = Vec::with_capacity(lengths.len());
    let mut at = nl + 1;
    for len in lengths {
        let end = at
            .checked_add(len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Parameter("protocol payload truncated".into()))?;
        payloads.push(bytes[at..end].to_vec());
        at = end;
    }
    Ok((header, payloads))
}

/// A backend implemented by a subprocess, spawned once per call. Calls on one
/// instance are serialized.
#[derive(Debug)]
pub struct ExternalBackend {
    name: String,
    program: String,
    args: Vec<String>,
    lock: Mutex<()>,
}

impl ExternalBackend {
    /// `command` is split on whitespace into program and arguments.
    pub fn new(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Parameter("empty external backend command".into()))?;
        Ok(Self {
            name: format!("external:{command}"),
            program,
            args: parts.collect(),
            lock: Mutex::new(()),
        })
    }

    pub fn call(&self, header: Value, payloads: &[Vec<u8>]) -> Result<(Value, Vec<Vec<u8>>)> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let request = encode_message(&header, payloads)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| backend_err(&self.name, format!("spawn failed: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&request));
        let mut stdout = Vec::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_end(&mut stdout)
            .map_err(|e| backend_err(&self.name, e.to_string()))?;
        let mut stderr = String::new();
        if let Some(mut s) = child.stderr.take() {
            let _ = s.read_to_string(&mut stderr);
        }
        let status = child.wait().map_err(|e| backend_err(&self.name, e.to_string()))?;
        let _ = writer.join();
        if !status.success() {
            return Err(backend_err(&self.name, format!("exited with {status}: {}", stderr.trim())));
        }
        let (header, payloads) =
            decode_message(&stdout).map_err(|e| backend_err(&self.name, format!("bad response: {e}")))?;
        if header.get("ok").and_then(Value::as_bool) != Some(true) {
            let detail = header.get("error").and_then(Value::as_str).unwrap_or("backend reported failure");
            return Err(backend_err(&self.name, detail));
        }
        Ok((header, payloads))
    }

    fn single_payload(&self, payloads: Vec<Vec<u8>>) -> Result<Vec<u8>> {
        payloads
            .into_iter()
            .next()
            .ok_or_else(|| backend_err(&self.name, "response has no payload"))
    }
}

impl SegmentationBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn segment(&self, image: &ImageBuffer) -> Result<SegMap> {
        let (header, payloads) = self.call(json!({"op": "segment"}), &[io::encode_png(image)?])?;
        let palette: BTreeMap<u32, String> = match header.get("palette") {
            Some(p) => io::palette_from_json(p)?,
            None => BTreeMap::new(),
        };
        io::decode_segmap_png(&self.single_payload(payloads)?, palette)
    }
}

impl DetectionBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, image: &ImageBuffer) -> Result<Vec<DetectedObject>> {
        let (header, _) = self.call(json!({"op": "detect"}), &[io::encode_png(image)?])?;
        let dets = header.get("detections").cloned().unwrap_or(Value::Array(Vec::new()));
        serde_json::from_value(dets).map_err(|e| backend_err(&self.name, format!("bad detections: {e}")))
    }
}

impl SrBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn upscale(&self, image: &ImageBuffer, scale: usize) -> Result<ImageBuffer> {
        let (_, payloads) = self.call(json!({"op": "upscale", "scale": scale}), &[io::encode_png(image)?])?;
        io::decode_png(&self.single_payload(payloads)?)
    }
}

impl InpaintBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn inpaint(&self, image: &ImageBuffer, hole: &MaskMap) -> Result<ImageBuffer> {
        let (_, payloads) = self.call(
            json!({"op": "inpaint"}),
            &[io::encode_png(image)?, io::encode_mask_png(hole)?],
        )?;
        io::decode_png(&self.single_payload(payloads)?)
    }
}

/// Serves one protocol request with the toy backends. Used by the
/// `segedit-toy-backend` binary and by tests.
pub fn serve_toy_request(request: &[u8]) -> Vec<u8> {
    let reply = (|| -> Result<(Value, Vec<Vec<u8>>)> {
        let (header, payloads) = decode_message(request)?;
        let op = header.get("op").and_then(Value::as_str).unwrap_or_default().to_string();
        let image = || -> Result<ImageBuffer> {
            io::decode_png(payloads.first().ok_or_else(|| Error::Parameter("missing image payload".into()))?)
        };
        match op.as_str() {
            "segment" => {
                let seg = ToySegmenter.segment(&image()?)?;
                Ok((
                    json!({"ok": true, "palette": io::palette_to_json(seg.palette())}),
                    vec![io::encode_segmap_png(&seg)?],
                ))
            }
            "detect" => Ok((json!({"ok": true, "detections": ToyDetector.detect(&image()?)?}), vec![])),
            "upscale" => {
                let scale = header.get("scale").and_then(Value::as_u64).unwrap_or(1) as usize;
                Ok((json!({"ok": true}), vec![io::encode_png(&upscale_bilinear(&image()?, scale)?)?]))
            }
            "inpaint" => {
                let hole = io::decode_mask_png(
                    payloads.get(1).ok_or_else(|| Error::Parameter("missing mask payload".into()))?,
                )?;
                let out = DiffusionInpainter::default().inpaint(&image()?, &hole)?;
                Ok((json!({"ok": true}), vec![io::encode_png(&out)?]))
            }
            other => Err(Error::Parameter(format!("unknown op `{other}`"))),
        }
    })();
    let (header, payloads) = reply.unwrap_or_else(|e| (json!({"ok": false, "error": e.to_string()}), vec![]));
    encode_message(&header, &payloads).expect("object header")
}

/// Backend selection by name: `"toy"` or `"external:<command>"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub segmentation: String,
    pub detection: String,
    pub super_resolution: String,
    pub inpainting: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            segmentation: "toy".into(),
            detection: "toy".into(),
            super_resolution: "toy".into(),
            inpainting: "toy".into(),
        }
    }
}

enum Spec {
    Toy,
    External(String),
}

fn parse_spec(kind: &str, value: &str) -> Result<Spec> {
    if value == "toy" {
        Ok(Spec::Toy)
    } else if let Some(cmd) = value.strip_prefix("external:") {
        Ok(Spec::External(cmd.to_string()))
    } else {
        Err(Error::Parameter(format!("unknown {kind} backend `{value}`")))
    }
}

/// The service-wide backend set. Every call goes through a contract check.
#[derive(Clone)]
pub struct Backends {
    pub segmentation: Arc<dyn SegmentationBackend>,
    pub detection: Arc<dyn DetectionBackend>,
    pub sr: Arc<dyn SrBackend>,
    pub inpainting: Arc<dyn InpaintBackend>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("segmentation", &self.segmentation.name())
            .field("detection", &self.detection.name())
            .field("sr", &self.sr.name())
            .field("inpainting", &self.inpainting.name())
            .finish()
    }
}

impl Default for Backends {
    fn default() -> Self {
        Self::toy()
    }
}

impl Backends {
    pub fn toy() -> Self {
        Self {
            segmentation: Arc::new(ToySegmenter),
            detection: Arc::new(ToyDetector),
            sr: Arc::new(BilinearSr),
            inpainting: Arc::new(DiffusionInpainter::default()),
        }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self> {
        Ok(Self {
            segmentation: match parse_spec("segmentation", &config.segmentation)? {
                Spec::Toy => Arc::new(ToySegmenter),
                Spec::External(c) => Arc::new(ExternalBackend::new(&c)?),
            },
            detection: match parse_spec("detection", &config.detection)? {
                Spec::Toy => Arc::new(ToyDetector),
                Spec::External(c) => Arc::new(ExternalBackend::new(&c)?),
            },
            sr: match parse_spec("super_resolution", &config.super_resolution)? {
                Spec::Toy => Arc::new(BilinearSr),
                Spec::External(c) => Arc::new(ExternalBackend::new(&c)?),
            },
            inpainting: match parse_spec("inpainting", &config.inpainting)? {
                Spec::Toy => Arc::new(DiffusionInpainter::default()),
                Spec::External(c) => Arc::new(ExternalBackend::new(&c)?),
            },
        })
    }

    pub fn segment(&self, image: &ImageBuffer) -> Result<SegMap> {
        let seg = self.segmentation.segment(image)?;
        if seg.dims() != image.dims() {
            return Err(backend_err(
                self.segmentation.name(),
                format!("seg map {:?} does not match image {:?}", seg.dims(), image.dims()),
            ));
        }
        Ok(seg)
    }

    pub fn detect(&self, image: &ImageBuffer) -> Result<Vec<DetectedObject>> {
        let dets = self.detection.detect(image)?;
        let (h, w) = image.dims();
        for d in &dets {
            if !d.bbox.fits_within(h, w) || !(0.0..=1.0).contains(&d.confidence) {
                return Err(backend_err(self.detection.name(), format!("invalid detection {d:?}")));
            }
        }
        Ok(dets)
    }

    pub fn upscale(&self, image: &ImageBuffer, scale: usize) -> Result<ImageBuffer> {
        let out = self.sr.upscale(image, scale)?;
        if out.dims() != (image.height() * scale, image.width() * scale) || out.channels() != image.channels() {
            return Err(backend_err(self.sr.name(), format!("upscale x{scale} returned {:?}", out.dims())));
        }
        Ok(out)
    }

    pub fn inpaint(&self, image: &ImageBuffer, hole: &MaskMap) -> Result<ImageBuffer> {
        checked_inpaint(self.inpainting.as_ref(), image, hole)
    }
}

/// Runs an inpainter and rejects results that touch non-hole pixels.
pub fn checked_inpaint(backend: &dyn InpaintBackend, image: &ImageBuffer, hole: &MaskMap) -> Result<ImageBuffer> {
    if hole.dims() != image.dims() {
        return Err(Error::Shape(format!("hole {:?} vs image {:?}", hole.dims(), image.dims())));
    }
    let out = backend.inpaint(image, hole)?;
    if out.dims() != image.dims() || out.channels() != image.channels() {
        return Err(backend_err(backend.name(), "inpainted image changed shape"));
    }
    let c = image.channels();
    for (i, &m) in hole.data().iter().enumerate() {
        if !m && out.data()[i * c..(i + 1) * c] != image.data()[i * c..(i + 1) * c] {
            return Err(backend_err(
                backend.name(),
                format!("modified non-hole pixel ({}, {})", i / image.width(), i % image.width()),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_synthetic_dataset;

    #[test]
    fn toy_segmenter_recovers_ground_truth() {
        for size in [48, 64] {
            for s in make_synthetic_dataset(60, 11, size) {
                assert_eq!(ToySegmenter.segment(&s.image).unwrap(), s.seg, "size {size}");
            }
        }
    }

    #[test]
    fn toy_segmenter_survives_png_round_trip() {
        for s in make_synthetic_dataset(10, 4, 64) {
            let back = io::decode_png(&io::encode_png(&s.image).unwrap()).unwrap();
            assert_eq!(ToySegmenter.segment(&back).unwrap(), s.seg);
        }
    }

    #[test]
    fn toy_detector_boxes_match_objects() {
        for s in make_synthetic_dataset(20, 8, 64) {
            let dets = ToyDetector.detect(&s.image).unwrap();
            assert_eq!(dets.len(), s.scene.objects.len());
            for (i, obj) in s.scene.objects.iter().enumerate() {
                let bbox = s.scene.object_mask(i).bbox().unwrap();
                let d = dets.iter().find(|d| d.bbox == bbox).expect("object detected");
                assert_eq!(d.label, obj.shape.label());
                assert!(d.confidence > 0.5);
            }
        }
    }

    #[test]
    fn bilinear_sr_hits_source_pixels_exactly() {
        let img = ImageBuffer::from_fn(5, 7, |y, x| [y as f64 / 5.0, x as f64 / 7.0, 0.3]);
        for s in [1, 2, 4, 8] {
            let up = upscale_bilinear(&img, s).unwrap();
            assert_eq!(up.dims(), (5 * s, 7 * s));
            for y in 0..5 {
                for x in 0..7 {
                    assert_eq!(up.pixel(y * s, x * s), img.pixel(y, x));
                }
            }
        }
        assert_eq!(upscale_bilinear(&img, 1).unwrap(), img);
    }

    #[test]
    fn protocol_round_trip() {
        let msg = encode_message(&json!({"op": "x"}), &[vec![1, 2, 3], vec![], vec![9]]).unwrap();
        let (h, p) = decode_message(&msg).unwrap();
        assert_eq!(h["op"], "x");
        assert_eq!(p, vec![vec![1, 2, 3], vec![], vec![9]]);
        assert!(decode_message(b"{\"lengths\":[5]}\nabc").is_err());
    }

    #[test]
    fn toy_request_server_matches_in_process_backends() {
        let s = &make_synthetic_dataset(1, 3, 48)[0];
        let req = encode_message(&json!({"op": "segment"}), &[io::encode_png(&s.image).unwrap()]).unwrap();
        let (h, p) = decode_message(&serve_toy_request(&req)).unwrap();
        let seg = io::decode_segmap_png(&p[0], io::palette_from_json(&h["palette"]).unwrap()).unwrap();
        assert_eq!(seg, s.seg);
        let bad = encode_message(&json!({"op": "nope"}), &[]).unwrap();
        let (h, _) = decode_message(&serve_toy_request(&bad)).unwrap();
        assert_eq!(h["ok"], false);
    }

    struct Leaky;
    impl InpaintBackend for Leaky {
        fn name(&self) -> &str {
            "leaky"
        }
        fn inpaint(&self, image: &ImageBuffer, _hole: &MaskMap) -> Result<ImageBuffer> {
            Ok(ImageBuffer::filled(image.height(), image.width(), image.channels(), 0.5))
        }
    }

    #[test]
    fn inpaint_contract_is_enforced() {
        let img = ImageBuffer::filled(4, 4, 3, 0.1);
        let hole = MaskMap::from_fn(4, 4, |y, x| y == 1 && x == 1);
        let err = checked_inpaint(&Leaky, &img, &hole).unwrap_err();
        assert!(err.is_backend());
        assert!(checked_inpaint(&DiffusionInpainter::default(), &img, &hole).is_ok());
    }

    #[test]
    fn registry_parses_names() {
        let mut cfg = BackendConfig::default();
        assert!(Backends::from_config(&cfg).is_ok());
        cfg.inpainting = "external:/bin/true".into();
        let b = Backends::from_config(&cfg).unwrap();
        assert_eq!(b.inpainting.name(), "external:/bin/true");
        cfg.segmentation = "deeplab".into();
        assert!(Backends::from_config(&cfg).is_err());
    }

    #[test]
    fn external_failure_is_a_backend_error() {
        let ext = ExternalBackend::new("/nonexistent/segedit-backend").unwrap();
        let img = ImageBuffer::filled(2, 2, 3, 0.0);
        assert!(ext.segment(&img).unwrap_err().is_backend());
        let silent = ExternalBackend::new("true").unwrap();
        assert!(silent.segment(&img).unwrap_err().is_backend());
    }
}
