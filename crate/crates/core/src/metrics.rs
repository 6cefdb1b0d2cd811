//! Inception Score and Fréchet distance over a pluggable feature backend.
//!
//! Absolute values depend entirely on the backend. With the toy classifier
//! they are not comparable to numbers obtained with Inception features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::par;

pub const PROBABILITY_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_COVARIANCE_EPS: f64 = 1e-6;

/// `n × d` matrix of per-sample features or class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(Error::Shape(format!("feature set {n}x{d} with {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite feature {v}")));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d)
    }

    /// Rejects rows that are not probability distributions.
    pub fn check_probabilities(&self) -> Result<()> {
        for (i, r) in self.rows().enumerate() {
            let sum: f64 = r.iter().sum();
            if r.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
                return Err(Error::Parameter(format!("row {i} is not a probability distribution (sum {sum})")));
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.d);
        for r in self.rows() {
            mu += DVector::from_column_slice(r);
        }
        mu / self.n as f64
    }

    /// Unbiased sample covariance (zero for a single sample).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut cov = DMatrix::zeros(self.d, self.d);
        for r in self.rows() {
            let c = DVector::from_column_slice(r) - &mu;
            cov += &c * c.transpose();
        }
        if self.n > 1 {
            cov / (self.n - 1) as f64
        } else {
            cov
        }
    }
}

/// `exp(mean_i KL(p_i ‖ p̄))`. Results within 1e-12 (relative) of the bounds
/// 1 and k are snapped onto them.
pub fn inception_score(probs: &FeatureSet) -> Result<f64> {
    probs.check_probabilities()?;
    let marginal = probs.mean();
    let mut total = 0.0;
    for r in probs.rows() {
        for (p, m) in r.iter().zip(marginal.iter()) {
            if *p > 0.0 {
                total += p * (p / m).ln();
            }
        }
    }
    let score = (total / probs.n() as f64).exp();
    let k = probs.d() as f64;
    Ok(if score >= k * (1.0 - 1e-12) {
        k
    } else if score <= 1.0 + 1e-12 {
        1.0
    } else {
        score
    })
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((Σ₁Σ₂)^{1/2})` as the trace of the square root of the symmetric
/// matrix `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which has the same eigenvalues. Negative
/// eigenvalues from round-off are clamped to zero.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let r1 = symmetric_sqrt(s1);
    let m = &r1 * s2 * &r1;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, clamped at 0.
pub fn frechet_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions differ".into()));
    }
    let diff = (mu1 - mu2).norm_squared();
    let value = diff + s1.trace() + s2.trace() - 2.0 * trace_sqrt_product(s1, s2);
    if !value.is_finite() {
        return Err(Error::Numeric {
            component: "frechet_distance".into(),
            detail: "non-finite result".into(),
        });
    }
    Ok(value.max(0.0))
}

/// Fréchet distance with `eps·I` added to both covariances.
pub fn frechet_distance_regularized(a: &FeatureSet, b: &FeatureSet, eps: f64) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.d(), b.d())));
    }
    let reg = DMatrix::identity(a.d(), a.d()) * eps;
    frechet_from_moments(&a.mean(), &(a.covariance() + &reg), &b.mean(), &(b.covariance() + &reg))
}

/// Fréchet distance; covariances are regularized with `1e-6·I` only when a
/// set has too few samples for a nonsingular estimate (`n ≤ d`).
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    let eps = if a.n() <= a.d() || b.n() <= b.d() {
        DEFAULT_COVARIANCE_EPS
    } else {
        0.0
    };
    frechet_distance_regularized(a, b, eps)
}

/// Maps images to feature vectors and class probabilities.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, image: &ImageBuffer) -> Result<Vec<f64>>;
    fn class_probabilities(&self, image: &ImageBuffer) -> Result<Vec<f64>>;
}

fn check_uniform(images: &[ImageBuffer]) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::Parameter("no images".into()))?;
    if images.iter().any(|i| i.dims() != first.dims() || i.channels() != first.channels()) {
        return Err(Error::Shape("images differ in size".into()));
    }
    Ok(())
}

fn batch(images: &[ImageBuffer], f: impl Fn(&ImageBuffer) -> Result<Vec<f64>> + Sync + Send) -> Result<FeatureSet> {
    check_uniform(images)?;
    let rows: Vec<Vec<f64>> = par::map_slice(images, |img| f(img)).into_iter().collect::<Result<_>>()?;
    FeatureSet::from_rows(&rows)
}

pub fn extract_features(images: &[ImageBuffer], backend: &dyn FeatureBackend) -> Result<FeatureSet> {
    batch(images, |img| backend.features(img))
}

pub fn extract_probabilities(images: &[ImageBuffer], backend: &dyn FeatureBackend) -> Result<FeatureSet> {
    batch(images, |img| backend.class_probabilities(img))
}

/// One metric value in the CLI-facing JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub backend: String,
    pub seed: u64,
}
