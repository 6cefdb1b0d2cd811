//! Synthetic shapes-with-captions scenes with exact ground-truth maps.
//!
//! Each scene holds 1–3 non-overlapping flat-colored shapes (circle, square,
//! triangle) in one of eight saturated colors over a low-saturation textured
//! background. Because shape colors never occur in the backgrounds, the toy
//! backends can recover the exact rasters from pixels alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageBuffer, MaskMap, SegMap};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn label(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn class_id(self) -> u32 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn from_label(label: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.into_iter().find(|s| s.label() == label)
    }

    /// Area of the shape relative to its bounding square.
    pub fn ideal_fill(self) -> f64 {
        match self {
            ShapeKind::Circle => std::f64::consts::FRAC_PI_4,
            ShapeKind::Square => 1.0,
            ShapeKind::Triangle => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const COLORS: [NamedColor; 8] = [
    NamedColor { name: "red", rgb: [0.90, 0.12, 0.12] },
    NamedColor { name: "green", rgb: [0.12, 0.80, 0.20] },
    NamedColor { name: "blue", rgb: [0.15, 0.25, 0.90] },
    NamedColor { name: "yellow", rgb: [0.95, 0.90, 0.15] },
    NamedColor { name: "cyan", rgb: [0.10, 0.85, 0.90] },
    NamedColor { name: "magenta", rgb: [0.90, 0.15, 0.85] },
    NamedColor { name: "orange", rgb: [0.95, 0.55, 0.10] },
    NamedColor { name: "purple", rgb: [0.55, 0.20, 0.85] },
];

pub fn color_index(name: &str) -> Option<usize> {
    COLORS.iter().position(|c| c.name == name)
}

/// Class palette shared by every synthetic seg map.
pub fn shape_palette() -> BTreeMap<u32, String> {
    ShapeKind::ALL.iter().map(|s| (s.class_id(), s.label().to_string())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Stripes,
    Checker,
    Noise,
    Gradient,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] = [
        BackgroundKind::Stripes,
        BackgroundKind::Checker,
        BackgroundKind::Noise,
        BackgroundKind::Gradient,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: usize,
    pub cy: f64,
    pub cx: f64,
    /// Side length of the bounding square.
    pub size: f64,
}

impl SceneObject {
    /// Whether the pixel center `(y, x)` lies inside the shape.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let e = self.size / 2.0;
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        match self.shape {
            ShapeKind::Circle => dy * dy + dx * dx <= e * e,
            ShapeKind::Square => dy.abs() < e && dx.abs() < e,
            // apex up, base down
            ShapeKind::Triangle => dy > -e && dy < e && dx.abs() <= (dy + e) / 2.0,
        }
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        let e = self.size / 2.0;
        (self.cy - e, self.cx - e, self.cy + e, self.cx + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: BackgroundKind,
    pub base_gray: f64,
    pub tint: [f64; 3],
    pub texture_seed: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    fn background_value(&self, y: usize, x: usize, c: usize, noise: &[f64]) -> f64 {
        let n = self.size as f64;
        let t = match self.background {
            BackgroundKind::Stripes => {
                let period = 6.0 + (self.texture_seed % 5) as f64;
                if ((x + y) as f64 / period).floor() as i64 % 2 == 0 {
                    0.07
                } else {
                    -0.07
                }
            }
            BackgroundKind::Checker => {
                let cell = 4 + (self.texture_seed % 6) as usize;
                if (y / cell + x / cell) % 2 == 0 {
                    0.06
                } else {
                    -0.06
                }
            }
            BackgroundKind::Noise => noise[y * self.size + x],
            BackgroundKind::Gradient => 0.16 * (y as f64 / n - 0.5) + 0.06 * (x as f64 / n - 0.5),
        };
        (self.base_gray + self.tint[c] + t).clamp(0.0, 1.0)
    }

    pub fn render_background(&self) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let noise: Vec<f64> = (0..self.size * self.size).map(|_| rng.gen_range(-0.08..0.08)).collect();
        let mut img = ImageBuffer::zeros(self.size, self.size, 3);
        for y in 0..self.size {
            for x in 0..self.size {
                for c in 0..3 {
                    img.set(y, x, c, self.background_value(y, x, c, &noise));
                }
            }
        }
        img
    }

    pub fn object_mask(&self, index: usize) -> MaskMap {
        let obj = &self.objects[index];
        MaskMap::from_fn(self.size, self.size, |y, x| obj.covers(y, x))
    }

    /// Renders the image and its exact segmentation map.
    pub fn render(&self) -> (ImageBuffer, SegMap) {
        let mut img = self.render_background();
        let mut seg = SegMap::background(self.size, self.size, shape_palette());
        for obj in &self.objects {
            let rgb = COLORS[obj.color].rgb;
            for y in 0..self.size {
                for x in 0..self.size {
                    if obj.covers(y, x) {
                        img.set_pixel(y, x, &rgb);
                        seg.set(y, x, obj.shape.class_id());
                    }
                }
            }
        }
        (img, seg)
    }

    pub fn with_color(&self, index: usize, color: usize) -> Scene {
        let mut s = self.clone();
        s.objects[index].color = color;
        s
    }

    pub fn without_object(&self, index: usize) -> Scene {
        let mut s = self.clone();
        s.objects.remove(index);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: ImageBuffer,
    pub seg: SegMap,
    pub caption: String,
    pub target_label: String,
    pub scene: Scene,
    /// Index of the captioned object in `scene.objects`.
    pub target_index: usize,
}

impl SynthSample {
    pub fn target(&self) -> &SceneObject {
        &self.scene.objects[self.target_index]
    }

    pub fn target_mask(&self) -> MaskMap {
        self.scene.object_mask(self.target_index)
    }
}

pub fn caption_for(shape: ShapeKind, color: usize) -> String {
    format!("the {} is {}", shape.label(), COLORS[color].name)
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), gap: f64) -> bool {
    a.0 - gap < b.2 && b.0 - gap < a.2 && a.1 - gap < b.3 && b.1 - gap < a.3
}

/// Draws a random scene. `size` is the square image side in pixels.
pub fn random_scene(rng: &mut impl Rng, size: usize) -> Scene {
    let n = size as f64;
    let count = rng.gen_range(1..=3);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let side = rng.gen_range(n / 5.0..n / 3.0).round();
        let e = side / 2.0;
        let cy = rng.gen_range(e + 1.0..n - e - 1.0).round() + if side as i64 % 2 == 0 { 0.5 } else { 0.0 };
        let cx = rng.gen_range(e + 1.0..n - e - 1.0).round() + if side as i64 % 2 == 0 { 0.5 } else { 0.0 };
        let obj = SceneObject {
            shape: ShapeKind::ALL[rng.gen_range(0..3)],
            color: rng.gen_range(0..COLORS.len()),
            cy,
            cx,
            size: side,
        };
        if objects.iter().all(|o| !boxes_overlap(o.extent(), obj.extent(), 3.0)) {
            objects.push(obj);
        }
    }
    if objects.is_empty() {
        let side = (n / 4.0).round().max(3.0);
        objects.push(SceneObject {
            shape: ShapeKind::Square,
            color: 0,
            cy: n / 2.0,
            cx: n / 2.0,
            size: side,
        });
    }
    Scene {
        size,
        background: BackgroundKind::ALL[rng.gen_range(0..4)],
        base_gray: rng.gen_range(0.38..0.62),
        tint: [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)],
        texture_seed: rng.gen(),
        objects,
    }
}

/// Renders one sample; the captioned object is always the first one.
pub fn sample_from_scene(scene: Scene) -> SynthSample {
    let (image, seg) = scene.render();
    let target = scene.objects[0];
    SynthSample {
        image,
        seg,
        caption: caption_for(target.shape, target.color),
        target_label: target.shape.label().to_string(),
        scene,
        target_index: 0,
    }
}

/// `n` samples, deterministic per `seed`. Sample `i` depends only on
/// `(seed, i)`, so rendering order does not matter.
pub fn make_synthetic_dataset(n: usize, seed: u64, size: usize) -> Vec<SynthSample> {
    par::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        sample_from_scene(random_scene(&mut rng, size))
    })
}
