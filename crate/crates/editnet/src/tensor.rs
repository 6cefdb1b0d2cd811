//! Dense `f64` tensors and a tape-based reverse-mode autograd graph.
//!
//! Feature maps are stored `(y, x, c)` row-major with shape `[H, W, C]`, the
//! same layout as [`segedit_core::image::ImageBuffer`], so a feature map is
//! also an `[H·W, C]` matrix without copying. Convolution weights are laid
//! out `[K, K, C_in, C_out]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use segedit_core::par;
use segedit_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Last dimension (channels / columns).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim().max(1)
    }
}

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Upsample2x(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    BroadcastRows(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    ScaleRows(Var, Var),
    RowSum(Var),
    MeanRows(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    Select { mask: Arc<Vec<bool>>, a: Var, b: Var },
    BoundedResidual { t: Var, base: Var },
    Gather { table: Var, idx: Vec<usize> },
    L2NormalizeRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Values are computed eagerly as ops are recorded;
/// [`Graph::backward`] walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

const NORM_EPS: f64 = 1e-12;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hwc(t: &Tensor) -> (usize, usize, usize) {
    match t.shape.as_slice() {
        [h, w, c] => (*h, *w, *c),
        s => panic!("expected [H, W, C], got {s:?}"),
    }
}

fn mat(t: &Tensor) -> (usize, usize) {
    match t.shape.as_slice() {
        [m, n] => (*m, *n),
        s => panic!("expected a matrix, got {s:?}"),
    }
}

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, wd, ci) = hwc(x);
    let k = w.shape[0];
    let co = w.shape[3];
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wd, k, stride, pad);
    let mut out = vec![0.0; ho * wo * co];
    par::for_each_chunk_mut(&mut out, wo * co, |oy, row| {
        for ox in 0..wo {
            let o = &mut row[ox * co..(ox + 1) * co];
            o.copy_from_slice(&b.data);
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xin = &x.data[(iy as usize * wd + ix as usize) * ci..][..ci];
                    let wbase = (ky * k + kx) * ci * co;
                    for (c, &xv) in xin.iter().enumerate() {
                        let wrow = &w.data[wbase + c * co..][..co];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    });
    Tensor {
        shape: vec![ho, wo, co],
        data: out,
    }
}

/// Returns (dx, dw, db).
fn conv2d_backward(x: &Tensor, w: &Tensor, g: &[f64], stride: usize, pad: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, wd, ci) = hwc(x);
    let k = w.shape[0];
    let co = w.shape[3];
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wd, k, stride, pad);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &g[(oy * wo + ox) * co..][..co];
            for (d, gv) in db.iter_mut().zip(go) {
                *d += gv;
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xo = (iy as usize * wd + ix as usize) * ci;
                    let wbase = (ky * k + kx) * ci * co;
                    for c in 0..ci {
                        let xv = x.data[xo + c];
                        let wrow = &w.data[wbase + c * co..][..co];
                        let dwrow = &mut dw[wbase + c * co..][..co];
                        let mut acc = 0.0;
                        for j in 0..co {
                            acc += wrow[j] * go[j];
                            dwrow[j] += xv * go[j];
                        }
                        dx[xo + c] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (ov, bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = &self.nodes[a.0].value;
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter; trainable ones are reported by
    /// [`Grads::params`].
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.push(t, Op::Leaf, trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        v
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Nearest-neighbour 2× upsampling of an `[H, W, C]` map.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (h, w, c) = hwc(v);
        let mut data = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let src = ((y / 2) * w + x / 2) * c;
                data[(y * 2 * w + x) * c..][..c].copy_from_slice(&v.data[src..src + c]);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![2 * h, 2 * w, c], data }, Op::Upsample2x(a), rg)
    }

    /// 2×2 average pooling of an `[H, W, C]` map with even H and W.
    pub fn avgpool2(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (h, w, c) = hwc(v);
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
        let (hh, hw) = (h / 2, w / 2);
        let mut data = vec![0.0; hh * hw * c];
        for y in 0..hh {
            for x in 0..hw {
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| v.data[(yy * w + xx) * c + ch];
                    data[(y * hw + x) * c + ch] =
                        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![hh, hw, c], data }, Op::AvgPool2(a), rg)
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lead = {
            let s = &self.value(parts[0]).shape;
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = &self.value(*p).shape;
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, wd) in parts.iter().zip(&widths) {
            let src = &self.value(*p).data;
            for r in 0..rows {
                data[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg)
    }

    /// Repeats a vector `[C]` (or `[1, C]`) into `shape`, whose last dim is C.
    pub fn broadcast_rows(&mut self, v: Var, shape: &[usize]) -> Var {
        let src = self.value(v);
        let c = src.len();
        assert_eq!(*shape.last().unwrap(), c, "broadcast width mismatch");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&src.data);
        }
        let rg = self.rg(v);
        self.push(Tensor { shape: shape.to_vec(), data }, Op::BroadcastRows(v), rg)
    }

    /// Adds a `[N]` bias to every row of an `[..., N]` tensor.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = va.last_dim();
        assert_eq!(vb.len(), n, "bias width mismatch");
        let data = va.data.iter().enumerate().map(|(i, x)| x + vb.data[i % n]).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(bias);
        self.push(Tensor { shape, data }, Op::AddRowBias(a, bias), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = mat(self.value(a));
        let (k2, n) = mat(self.value(b));
        assert_eq!(k, k2, "matmul inner dims");
        let data = matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = mat(self.value(a));
        let data = transpose(&self.value(a).data, m, n);
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![n, m], data }, Op::Transpose(a), rg)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let mut data = v.data.clone();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let shape = v.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::SoftmaxRows(a), rg)
    }

    /// Row `i` of an `[M, N]` matrix scaled by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = mat(self.value(a));
        assert_eq!(self.value(s).len(), m, "scale_rows length");
        let sv = &self.value(s).data;
        let data = self.value(a).data.iter().enumerate().map(|(i, x)| x * sv[i / n]).collect();
        let rg = self.rg(a) || self.rg(s);
        self.push(Tensor { shape: vec![m, n], data }, Op::ScaleRows(a, s), rg)
    }

    /// `[..., N]` → `[rows]` sums over the last axis.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let data: Vec<f64> = v.data.chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![data.len()], data }, Op::RowSum(a), rg)
    }

    /// `[..., N]` → `[N]` means over all rows (global average pooling for
    /// feature maps).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let rows = v.rows() as f64;
        let mut data = vec![0.0; n];
        for r in v.data.chunks(n) {
            data.iter_mut().zip(r).for_each(|(d, x)| *d += x);
        }
        data.iter_mut().for_each(|d| *d /= rows);
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![n], data }, Op::MeanRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(shape.iter().product::<usize>(), v.len(), "reshape size");
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Per pixel: `a` where `mask` is set, `b` elsewhere. The mask has one
    /// entry per row of the last axis.
    pub fn select(&mut self, mask: Arc<Vec<bool>>, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "select shape mismatch");
        let c = va.last_dim();
        assert_eq!(mask.len() * c, va.len(), "select mask size");
        let data = (0..va.len()).map(|i| if mask[i / c] { va.data[i] } else { vb.data[i] }).collect();
        let shape = va.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Select { mask, a, b }, rg)
    }

    /// Moves `base ∈ [0,1]` toward 1 by the fraction `t` when `t ≥ 0` and
    /// toward 0 by `|t|` otherwise, so `t ∈ (-1, 1)` keeps the result in
    /// `[0, 1]` and `t = 0` returns `base` exactly.
    pub fn bounded_residual(&mut self, t: Var, base: Var) -> Var {
        let data = {
            let (vt, vb) = (self.value(t), self.value(base));
            assert_eq!(vt.shape, vb.shape, "bounded_residual shape mismatch");
            vt.data
                .iter()
                .zip(&vb.data)
                .map(|(t, b)| if *t >= 0.0 { b + t * (1.0 - b) } else { b + t * b })
                .collect()
        };
        let shape = self.value(t).shape.clone();
        let rg = self.rg(t) || self.rg(base);
        self.push(Tensor { shape, data }, Op::BoundedResidual { t, base }, rg)
    }

    /// Rows of an `[V, D]` table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let (_, d) = mat(self.value(table));
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor {
                shape: vec![idx.len(), d],
                data,
            },
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.last_dim();
        let mut data = v.data.clone();
        for row in data.chunks_mut(n) {
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let shape = v.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::L2NormalizeRows(a), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), g, *stride, *pad);
                acc(*x, &|s| add_into(s, &dx));
                acc(*w, &|s| add_into(s, &dw));
                acc(*b, &|s| add_into(s, &db));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| zip3(s, g, &vb.data, |gv, y| gv * y));
                acc(*b, &|s| zip3(s, g, &va.data, |gv, x| gv * x));
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * k)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, &|s| zip3(s, g, &x.data, |gv, xv| if xv > 0.0 { gv } else { gv * slope }));
            }
            Op::Tanh(a) => acc(*a, &|s| zip3(s, g, &out.data, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, &|s| zip3(s, g, &out.data, |gv, y| gv * y * (1.0 - y))),
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &|s| zip3(s, g, &x.data, |gv, xv| gv * sigmoid(xv)));
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &|s| zip3(s, g, &x.data, |gv, xv| gv * xv.signum() * f64::from(u8::from(xv != 0.0))));
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &|s| zip3(s, g, &x.data, |gv, xv| 2.0 * gv * xv));
            }
            Op::Upsample2x(a) => {
                let (h, w, c) = hwc(val(*a));
                acc(*a, &|s| {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let dst = ((y / 2) * w + x / 2) * c;
                            let src = (y * 2 * w + x) * c;
                            for ch in 0..c {
                                s[dst + ch] += g[src + ch];
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let (h, w, c) = hwc(val(*a));
                let hw = w / 2;
                acc(*a, &|s| {
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((y / 2) * hw + x / 2) * c;
                            for ch in 0..c {
                                s[(y * w + x) * c + ch] += 0.25 * g[src + ch];
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut off = 0;
                for p in parts {
                    let wd = val(*p).last_dim();
                    acc(*p, &|s| {
                        for r in 0..rows {
                            for j in 0..wd {
                                s[r * wd + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += wd;
                }
            }
            Op::BroadcastRows(v) => {
                let c = val(*v).len();
                acc(*v, &|s| {
                    for r in g.chunks(c) {
                        add_into(s, r);
                    }
                });
            }
            Op::AddRowBias(a, b) => {
                acc(*a, &|s| add_into(s, g));
                let n = val(*b).len();
                acc(*b, &|s| {
                    for r in g.chunks(n) {
                        add_into(s, r);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = mat(val(*a));
                let (_, n) = mat(val(*b));
                let (va, vb) = (val(*a), val(*b));
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &|s| add_into(s, &matmul(g, &transpose(&vb.data, k, n), m, n, k)));
                acc(*b, &|s| add_into(s, &matmul(&transpose(&va.data, m, k), g, k, m, n)));
            }
            Op::Transpose(a) => {
                let (m, n) = mat(val(*a));
                acc(*a, &|s| add_into(s, &transpose(g, n, m)));
            }
            Op::SoftmaxRows(a) => {
                let n = out.last_dim();
                acc(*a, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(gv, y)| gv * y).sum();
                        for j in 0..n {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ScaleRows(a, sv) => {
                let (m, n) = mat(val(*a));
                let (va, vs) = (val(*a), val(*sv));
                acc(*a, &|s| {
                    for i in 0..m * n {
                        s[i] += g[i] * vs.data[i / n];
                    }
                });
                acc(*sv, &|s| {
                    for i in 0..m * n {
                        s[i / n] += g[i] * va.data[i];
                    }
                });
            }
            Op::RowSum(a) => {
                let n = val(*a).last_dim();
                acc(*a, &|s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        *d += g[i / n];
                    }
                });
            }
            Op::MeanRows(a) => {
                let v = val(*a);
                let n = v.last_dim();
                let rows = v.rows() as f64;
                acc(*a, &|s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        *d += g[i % n] / rows;
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &|s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Select { mask, a, b } => {
                let c = out.last_dim();
                acc(*a, &|s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        if mask[i / c] {
                            *d += g[i];
                        }
                    }
                });
                acc(*b, &|s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        if !mask[i / c] {
                            *d += g[i];
                        }
                    }
                });
            }
            Op::BoundedResidual { t, base } => {
                let (vt, vb) = (val(*t), val(*base));
                acc(*t, &|s| {
                    for i in 0..s.len() {
                        let b = vb.data[i];
                        s[i] += g[i] * if vt.data[i] >= 0.0 { 1.0 - b } else { b };
                    }
                });
                acc(*base, &|s| {
                    for i in 0..s.len() {
                        let tv = vt.data[i];
                        s[i] += g[i] * if tv >= 0.0 { 1.0 - tv } else { 1.0 + tv };
                    }
                });
            }
            Op::Gather { table, idx } => {
                let (_, d) = mat(val(*table));
                acc(*table, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            s[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let n = x.last_dim();
                acc(*a, &|s| {
                    for ((sr, gr), (xr, yr)) in s.chunks_mut(n).zip(g.chunks(n)).zip(x.data.chunks(n).zip(out.data.chunks(n))) {
                        let norm = (xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            sr[j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(dst: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, gv), xv) in dst.iter_mut().zip(g).zip(x) {
        *d += f(*gv, *xv);
    }
}

/// Gradients from one reverse pass.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the graph's trainable parameters by name. A parameter
    /// loaded more than once has its gradients summed.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, v) in &graph.params {
            let Some(g) = self.get(*v) else { continue };
            match out.get_mut(name) {
                Some(acc) => add_into(acc, g),
                None => {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        out
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution used as the forward oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2]);
        let (k, co) = (w.shape[0], w.shape[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[ho, wo, co]);
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut s = b.data[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            for c in 0..ci {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data[(iy as usize * wd + ix as usize) * ci + c]
                                        * w.data[((ky * k + kx) * ci + c) * co + o];
                                }
                            }
                        }
                    }
                    out.data[(oy * wo + ox) * co + o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w, ci, co, k, stride, pad) in [(5, 6, 2, 3, 3, 1, 1), (8, 8, 3, 4, 3, 2, 1), (4, 4, 1, 2, 1, 1, 0)] {
            let x = rand_tensor(&mut rng, &[h, w, ci]);
            let wt = rand_tensor(&mut rng, &[k, k, ci, co]);
            let b = rand_tensor(&mut rng, &[co]);
            let got = conv2d_forward(&x, &wt, &b, stride, pad);
            let want = conv_oracle(&x, &wt, &b, stride, pad);
            assert_eq!(got.shape, want.shape);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Central differences of `f` against the analytic gradient of every
    /// input leaf.
    fn check_grads(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        let eps = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data[i] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = ins.into_iter().map(|t| g2.input(t)).collect();
                    let l = f(&mut g2, &vs);
                    g2.scalar(l)
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {num}");
            }
        }
    }

    fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rand_tensor(&mut rng, &shape);
        let rv = g.constant(r);
        let m = g.mul(v, rv);
        g.sum_all(m)
    }

    #[test]
    fn grad_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            rand_tensor(&mut rng, &[6, 6, 2]),
            rand_tensor(&mut rng, &[3, 3, 2, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(ins.clone(), |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1);
            probe(g, y, 9)
        });
        check_grads(ins, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1);
            probe(g, y, 9)
        });
    }

    #[test]
    fn grad_elementwise_and_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[4, 4, 3]);
        let b = rand_tensor(&mut rng, &[4, 4, 3]);
        check_grads(vec![a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let t = g.tanh(s);
            let l = g.leaky_relu(t, 0.2);
            let sg = g.sigmoid(l);
            let sp = g.softplus(v[0]);
            let sq = g.square(sp);
            let ab = g.abs(v[1]);
            let x = g.add(sg, sq);
            let x = g.add(x, ab);
            let x = g.scale(x, 0.7);
            let x = g.add_scalar(x, 0.3);
            probe(g, x, 4)
        });
        check_grads(vec![a.clone()], |g, v| {
            let p = g.avgpool2(v[0]);
            let u = g.upsample2x(p);
            let u2 = g.upsample2x(v[0]);
            let pu = g.avgpool2(u2);
            let x = g.add(u, pu);
            probe(g, x, 5)
        });
        check_grads(vec![a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let mask = Arc::new((0..16).map(|i| i % 3 == 0).collect::<Vec<_>>());
            let half = g.scale(c, 0.5);
            let s = g.select(mask, c, half);
            let m = g.mean_rows(s);
            let bc = g.broadcast_rows(m, &[4, 4, 6]);
            let x = g.add(s, bc);
            probe(g, x, 6)
        });
    }

    #[test]
    fn grad_matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let s = rand_tensor(&mut rng, &[3]);
        let bias = rand_tensor(&mut rng, &[2]);
        check_grads(vec![a, b, s, bias], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row_bias(m, v[3]);
            let sm = g.softmax_rows(m);
            let sc = g.scale_rows(sm, v[2]);
            let t = g.transpose(sc);
            let n = g.l2_normalize_rows(t);
            let rs = g.row_sum(n);
            let r = g.reshape(rs, &[1, 2]);
            let x = probe(g, r, 7);
            let mean = g.mean_all(v[0]);
            g.add(x, mean)
        });
        let table = rand_tensor(&mut rng, &[5, 3]);
        check_grads(vec![table], |g, v| {
            let rows = g.gather(v[0], &[4, 1, 4]);
            probe(g, rows, 8)
        });
    }

    #[test]
    fn grad_bounded_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, &[3, 3, 3]);
        let base = Tensor::new(vec![3, 3, 3], (0..27).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap();
        check_grads(vec![t, base], |g, v| {
            let th = g.tanh(v[0]);
            let y = g.bounded_residual(th, v[1]);
            probe(g, y, 10)
        });
    }

    #[test]
    fn bounded_residual_stays_in_range_and_zero_is_identity() {
        let mut g = Graph::new();
        let base = Tensor::new(vec![5], vec![0.0, 0.2, 0.5, 0.9, 1.0]).unwrap();
        let b = g.constant(base.clone());
        for tv in [-0.999, -0.3, 0.0, 0.4, 0.999] {
            let t = g.constant(Tensor::filled(&[5], tv));
            let y = g.bounded_residual(t, b);
            assert!(g.value(y).data.iter().all(|v| (0.0..=1.0).contains(v)));
            if tv == 0.0 {
                assert_eq!(g.value(y).data, base.data);
            }
        }
    }

    #[test]
    fn softmax_single_column_is_exactly_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1], vec![-4.0, 0.0, 17.0]).unwrap());
        let s = g.softmax_rows(x);
        assert_eq!(g.value(s).data, vec![1.0; 3]);
    }

    #[test]
    fn param_grads_are_summed_by_name() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, "w", true);
        let b = g.param(&store, "w", true);
        let m = g.mul(a, b);
        let l = g.sum_all(m);
        let grads = g.backward(l).params(&g);
        assert_eq!(grads["w"], vec![2.0, 4.0]);
        let mut g = Graph::new();
        let a = g.param(&store, "w", false);
        let l = g.sum_all(a);
        assert!(g.backward(l).params(&g).is_empty());
    }

    #[test]
    fn parallel_and_sequential_conv_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[16, 16, 4]);
        let w = rand_tensor(&mut rng, &[3, 3, 4, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        let seq = par::with_exec(par::Exec::Sequential, || conv2d_forward(&x, &w, &b, 1, 1));
        let def = conv2d_forward(&x, &w, &b, 1, 1);
        assert_eq!(seq, def);
    }
}
