//! A fixed, training-free shape×color classifier over synthetic scenes,
//! used as the feature backend for IS and FID at desk scale.
//!
//! Pixels close to a palette color count as foreground and vote for that
//! color; the dominant color picks the object whose bounding-box fill ratio
//! scores the shape.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::FeatureBackend;
use crate::synth::{ShapeKind, COLORS};

pub const NUM_CLASSES: usize = ShapeKind::ALL.len() * COLORS.len();
pub const FEATURE_DIM: usize = 32;

/// Foreground weight is 1 within `FG_NEAR` of a palette color and falls to 0
/// at `FG_FAR`.
const FG_NEAR: f64 = 0.15;
const FG_FAR: f64 = 0.3;
const COLOR_TEMPERATURE: f64 = 0.05;
const FILL_WIDTH: f64 = 0.08;
const SMOOTHING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default)]
pub struct SynthClassifier;

#[derive(Debug, Clone, PartialEq)]
struct Analysis {
    color_hist: [f64; COLORS.len()],
    shape_probs: [f64; 3],
    fg_mean: [f64; 3],
    fg_fraction: f64,
    fill: f64,
    grid: [f64; 16],
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn image_mean(image: &ImageBuffer) -> [f64; 3] {
    let n = (image.height() * image.width()) as f64;
    let mut m = [0.0; 3];
    for px in image.data().chunks_exact(3) {
        for c in 0..3 {
            m[c] += px[c] / n;
        }
    }
    m
}

fn analyze(image: &ImageBuffer) -> Result<Analysis> {
    if image.channels() != 3 || image.height() < 4 || image.width() < 4 {
        return Err(Error::Shape(format!(
            "classifier needs an RGB image of side 4 or more, got {:?}x{}",
            image.dims(),
            image.channels()
        )));
    }
    let (h, w) = image.dims();

    let mut color_hist = [0.0; COLORS.len()];
    let mut fg_sum = [0.0; 3];
    let mut fg_total = 0.0;
    let mut nearest = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            let k = (0..COLORS.len())
                .min_by(|&a, &b| dist(px, &COLORS[a].rgb).total_cmp(&dist(px, &COLORS[b].rgb)))
                .expect("palette is nonempty");
            let wgt = ((FG_FAR - dist(px, &COLORS[k].rgb)) / (FG_FAR - FG_NEAR)).clamp(0.0, 1.0);
            if wgt == 0.0 {
                continue;
            }
            nearest[y * w + x] = k;
            color_hist[k] += wgt;
            for c in 0..3 {
                fg_sum[c] += wgt * px[c];
            }
            fg_total += wgt;
        }
    }
    let fg_mean = if fg_total > 0.0 { fg_sum.map(|s| s / fg_total) } else { image_mean(image) };
    if fg_total > 0.0 {
        color_hist.iter_mut().for_each(|v| *v /= fg_total);
    }

    let dominant = (0..COLORS.len()).max_by(|&a, &b| color_hist[a].total_cmp(&color_hist[b])).expect("nonempty");
    let (mut y0, mut x0, mut y1, mut x1, mut area) = (h, w, 0, 0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if nearest[y * w + x] == dominant {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
                area += 1;
            }
        }
    }
    let fill = if area > 0 { area as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64 } else { 0.0 };
    let shape_logits: Vec<f64> = ShapeKind::ALL
        .iter()
        .map(|s| -((fill - s.ideal_fill()) / FILL_WIDTH).powi(2))
        .collect();
    let sp = softmax(&shape_logits);

    let mut grid = [0.0; 16];
    let mut counts = [0usize; 16];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * 4 / h) * 4 + x * 4 / w;
            grid[cell] += image.pixel(y, x).iter().sum::<f64>() / 3.0;
            counts[cell] += 1;
        }
    }
    for (g, n) in grid.iter_mut().zip(counts) {
        *g /= n as f64;
    }
    Ok(Analysis {
        color_hist,
        shape_probs: [sp[0], sp[1], sp[2]],
        fg_mean,
        fg_fraction: fg_total / (h * w) as f64,
        fill,
        grid,
    })
}

impl SynthClassifier {
    /// Index of class `(shape, color)` in the probability vector.
    pub fn class_index(shape: ShapeKind, color: usize) -> usize {
        let s = ShapeKind::ALL.iter().position(|k| *k == shape).expect("known shape");
        s * COLORS.len() + color
    }
}

impl FeatureBackend for SynthClassifier {
    fn name(&self) -> &str {
        "synth-classifier"
    }

    fn features(&self, image: &ImageBuffer) -> Result<Vec<f64>> {
        let a = analyze(image)?;
        let mut f = Vec::with_capacity(FEATURE_DIM);
        f.extend_from_slice(&a.color_hist);
        f.extend_from_slice(&a.shape_probs);
        f.extend_from_slice(&a.fg_mean);
        f.push(a.fg_fraction);
        f.push(a.fill);
        f.extend_from_slice(&a.grid);
        debug_assert_eq!(f.len(), FEATURE_DIM);
        Ok(f)
    }

    fn class_probabilities(&self, image: &ImageBuffer) -> Result<Vec<f64>> {
        let a = analyze(image)?;
        let color_logits: Vec<f64> = COLORS.iter().map(|c| -dist(&a.fg_mean, &c.rgb).powi(2) / COLOR_TEMPERATURE).collect();
        let cp = softmax(&color_logits);
        let mut p: Vec<f64> = ShapeKind::ALL
            .iter()
            .enumerate()
            .flat_map(|(s, _)| cp.iter().map(move |c| a.shape_probs[s] * c))
            .map(|v| v + SMOOTHING)
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Ok(p)
    }
}
