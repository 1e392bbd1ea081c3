//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because inputs always precede
//! their consumers.

use super::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var },
    BoxBlur { x: Var, h: usize, w: usize, k: usize },
    Upsample { x: Var, factor: usize },
    InstanceNorm { x: Var, eps: f64 },
    LayerNorm { x: Var, eps: f64 },
    NormalizeRows { x: Var, eps: f64 },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows(Vec<(Var, usize)>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one training step.
///
/// Gradients accumulate across [`backward`](Tape::backward) calls; build a
/// fresh tape per step to reset them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it participates in gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of the last loss(es) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::from_vec(&n.shape, n.value.clone()).expect("tape shapes are valid");
        t.requires_grad = n.requires_grad;
        t.grad = self.grads[v.0].clone();
        t
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "hadamard", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    fn map(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    // ---------------------------------------------------------------- broadcasts

    fn channel_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(x).len() < 2 || self.value(v).len() != c {
            return Err(shape_err(format!(
                "per-channel broadcast of {:?} onto {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        let inner = self.value(x).len() / c;
        let xv = self.value(x);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(xv.len());
        for ch in 0..c {
            let s = vv[ch];
            let row = &xv[ch * inner..(ch + 1) * inner];
            if mul {
                out.extend(row.iter().map(|a| a * s));
            } else {
                out.extend(row.iter().map(|a| a + s));
            }
        }
        let rg = self.rg(x) || self.rg(v);
        let op = if mul { Op::MulChannel(x, v) } else { Op::AddChannel(x, v) };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// `x[c, ..] + v[c]` for a leading channel axis.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, false)
    }

    /// `x[c, ..] * v[c]` for a leading channel axis.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, true)
    }

    fn row_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.dims2(x, "row broadcast")?;
        if self.value(v).len() != c {
            return Err(shape_err(format!(
                "row broadcast of {:?} onto {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            if mul {
                out.extend(row.iter().zip(vv).map(|(a, b)| a * b));
            } else {
                out.extend(row.iter().zip(vv).map(|(a, b)| a + b));
            }
        }
        let rg = self.rg(x) || self.rg(v);
        let op = if mul { Op::MulRow(x, v) } else { Op::AddRow(x, v) };
        Ok(self.push(vec![r, c], out, op, rg))
    }

    /// `x[r, c] + v[c]`, the bias add of a linear layer.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, false)
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, true)
    }

    // ---------------------------------------------------------------- reductions

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len).map(|a| xv[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (xv[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    // ---------------------------------------------------------------- spatial

    /// Same-padded 2-D cross-correlation: `x[ci, h, w]`, `w[co, ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (cin, h, wd) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(shape_err(format!("conv2d input must be C x H x W, got {s:?}"))),
        };
        let (cout, k) = match self.shape(w) {
            &[co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            s => {
                return Err(shape_err(format!(
                    "conv2d weight {s:?} incompatible with input {:?}",
                    self.shape(x)
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {k}")));
        }
        let pad = (k / 2) as isize;
        let xv = self.value(x);
        let wv = self.value(w);
        let plane = h * wd;
        let mut out = vec![0.0; cout * plane];
        for co in 0..cout {
            let oplane = &mut out[co * plane..(co + 1) * plane];
            for ci in 0..cin {
                let iplane = &xv[ci * plane..(ci + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..k {
                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(dx, wd);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut oplane[y * wd..(y + 1) * wd];
                            let irow = &iplane[sy * wd..(sy + 1) * wd];
                            for xx in x0..x1 {
                                orow[xx] += wt * irow[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![cout, h, wd], out, Op::Conv2d { x, w }, rg))
    }

    /// Uniform `k x k` box filter with replicate padding, applied to each row
    /// of `x[n, h*w]` viewed as an `h x w` grid.
    pub fn box_blur(&mut self, x: Var, h: usize, w: usize, k: usize) -> Result<Var> {
        let (n, hw) = self.dims2(x, "box_blur")?;
        if hw != h * w {
            return Err(shape_err(format!("box_blur grid {h}x{w} does not match row length {hw}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("blur kernel size must be odd, got {k}")));
        }
        let r = (k / 2) as isize;
        let norm = 1.0 / (k * k) as f64;
        let xv = self.value(x);
        let mut out = vec![0.0; n * hw];
        for m in 0..n {
            let src = &xv[m * hw..(m + 1) * hw];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        let sy = clamp_idx(y as isize + dy, h);
                        for dx in -r..=r {
                            acc += src[sy * w + clamp_idx(xx as isize + dx, w)];
                        }
                    }
                    out[m * hw + y * w + xx] = acc * norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, hw], out, Op::BoxBlur { x, h, w, k }, rg))
    }

    /// Nearest-neighbour upsampling of `x[c, h, w]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(shape_err(format!("upsample expects C x H x W, got {s:?}"))),
        };
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xv[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample { x, factor }, rg))
    }

    // ---------------------------------------------------------------- normalization

    /// Per-channel standardization `(x - mu) / (sigma + eps)` over all
    /// non-leading axes, with population variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("instance_norm needs C x ..., got {shape:?}")));
        }
        let c = shape[0];
        let n = numel(&shape) / c;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for ch in 0..c {
            let row = &xv[ch * n..(ch + 1) * n];
            let (mu, sigma) = mean_std(row);
            let d = sigma + eps;
            out.extend(row.iter().map(|v| (v - mu) / d));
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::InstanceNorm { x, eps }, rg))
    }

    /// Row-wise `(x - mu) / sqrt(var + eps)` over the last axis of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mu, sigma) = mean_std(row);
            let s = (sigma * sigma + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mu) / s));
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::LayerNorm { x, eps }, rg))
    }

    /// Divides each row of a 2-D tensor by `(||row||_2 + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "normalize_rows")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let d = l2(row) + eps;
            out.extend(row.iter().map(|v| v / d));
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::NormalizeRows { x, eps }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols of nothing"));
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err(format!(
                    "concat_cols row mismatch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Builds a 2-D tensor whose row `i` is row `sources[i].1` of `sources[i].0`.
    ///
    /// Covers gather, row concatenation and mask-token insertion.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Result<Var> {
        let Some(&(first, _)) = sources.first() else {
            return Err(shape_err("gather_rows of nothing"));
        };
        let (_, c) = self.dims2(first, "gather_rows")?;
        let mut out = Vec::with_capacity(sources.len() * c);
        for &(v, row) in sources {
            let (r, vc) = self.dims2(v, "gather_rows")?;
            if vc != c || row >= r {
                return Err(shape_err(format!(
                    "gather_rows: row {row} of {:?} incompatible with width {c}",
                    self.shape(v)
                )));
            }
            out.extend_from_slice(&self.value(v)[row * c..(row + 1) * c]);
        }
        let rg = sources.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(vec![sources.len(), c], out, Op::GatherRows(sources.to_vec()), rg))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = pass[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut pass);
            match &mut self.grads[idx] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = pass[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a);
                let bv = self.value(b);
                acc(a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, gg) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += s * gg;
                            }
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                acc(x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)),
            &Op::AddChannel(x, v) | &Op::MulChannel(x, v) => {
                let is_mul = matches!(node.op, Op::MulChannel(..));
                let c = self.shape(x)[0];
                let inner = g.len() / c;
                let (xv, vv) = (self.value(x), self.value(v));
                acc(x, &mut |d| {
                    for ch in 0..c {
                        let s = if is_mul { vv[ch] } else { 1.0 };
                        for i in ch * inner..(ch + 1) * inner {
                            d[i] += s * g[i];
                        }
                    }
                });
                acc(v, &mut |d| {
                    for ch in 0..c {
                        let span = ch * inner..(ch + 1) * inner;
                        d[ch] += if is_mul {
                            g[span.clone()].iter().zip(&xv[span]).map(|(a, b)| a * b).sum::<f64>()
                        } else {
                            g[span].iter().sum::<f64>()
                        };
                    }
                });
            }
            &Op::AddRow(x, v) | &Op::MulRow(x, v) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let c = self.shape(x)[1];
                let r = g.len() / c;
                let (xv, vv) = (self.value(x), self.value(v));
                acc(x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += if is_mul { vv[j] * g[i * c + j] } else { g[i * c + j] };
                        }
                    }
                });
                acc(v, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += if is_mul { xv[i * c + j] * g[i * c + j] } else { g[i * c + j] };
                        }
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = &node.value;
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_extents(&node.shape, axis);
                acc(x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| o * len * inner + a * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                d[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let s = g[0] / self.value(x).len() as f64;
                acc(x, &mut |d| d.iter_mut().for_each(|v| *v += s));
            }
            &Op::Conv2d { x, w } => self.conv2d_backward(x, w, g, &mut acc),
            &Op::BoxBlur { x, h, w, k } => {
                let n = self.shape(x)[0];
                let hw = h * w;
                let r = (k / 2) as isize;
                let norm = 1.0 / (k * k) as f64;
                acc(x, &mut |d| {
                    for m in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = g[m * hw + y * w + xx] * norm;
                                for dy in -r..=r {
                                    let sy = clamp_idx(y as isize + dy, h);
                                    for dx in -r..=r {
                                        d[m * hw + sy * w + clamp_idx(xx as isize + dx, w)] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::Upsample { x, factor } => {
                let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (oh, ow) = (h * factor, w * factor);
                acc(x, &mut |d| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[(ch * h + y / factor) * w + xx / factor] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            &Op::InstanceNorm { x, eps } => {
                let c = self.shape(x)[0];
                let n = g.len() / c;
                let xv = self.value(x);
                acc(x, &mut |d| {
                    for ch in 0..c {
                        let span = ch * n..(ch + 1) * n;
                        let row = &xv[span.clone()];
                        let gr = &g[span.clone()];
                        let (mu, sigma) = mean_std(row);
                        let den = sigma + eps;
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gd: f64 = gr.iter().zip(row).map(|(a, b)| a * (b - mu)).sum();
                        let coef = if sigma > 0.0 { gd / (den * den * n as f64 * sigma) } else { 0.0 };
                        for (j, dj) in d[span].iter_mut().enumerate() {
                            *dj += (gr[j] - gmean) / den - coef * (row[j] - mu);
                        }
                    }
                });
            }
            &Op::LayerNorm { x, eps } => {
                let c = self.shape(x)[1];
                let r = g.len() / c;
                let y = &node.value;
                let xv = self.value(x);
                acc(x, &mut |d| {
                    for i in 0..r {
                        let span = i * c..(i + 1) * c;
                        let (_, sigma) = mean_std(&xv[span.clone()]);
                        let s = (sigma * sigma + eps).sqrt();
                        let gr = &g[span.clone()];
                        let yr = &y[span.clone()];
                        let gmean = gr.iter().sum::<f64>() / c as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, dj) in d[span].iter_mut().enumerate() {
                            *dj += (gr[j] - gmean - yr[j] * gy) / s;
                        }
                    }
                });
            }
            &Op::NormalizeRows { x, eps } => {
                let c = self.shape(x)[1];
                let r = g.len() / c;
                let xv = self.value(x);
                acc(x, &mut |d| {
                    for i in 0..r {
                        let span = i * c..(i + 1) * c;
                        let row = &xv[span.clone()];
                        let gr = &g[span.clone()];
                        let norm = l2(row);
                        let den = norm + eps;
                        let gx: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                        let coef = if norm > 0.0 { gx / (norm * den * den) } else { 0.0 };
                        for (j, dj) in d[span].iter_mut().enumerate() {
                            *dj += gr[j] / den - coef * row[j];
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            &Op::SliceCols { x, start } => {
                let c = self.shape(x)[1];
                let len = node.shape[1];
                let r = node.shape[0];
                acc(x, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(sources) => {
                let c = node.shape[1];
                for (i, &(v, row)) in sources.iter().enumerate() {
                    acc(v, &mut |d| add_into(&mut d[row * c..(row + 1) * c], &g[i * c..(i + 1) * c]));
                }
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, g: &[f64], acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64]))) {
        let (cin, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (cout, k) = (self.shape(w)[0], self.shape(w)[2]);
        let pad = (k / 2) as isize;
        let plane = h * wd;
        let xv = self.value(x);
        let wv = self.value(w);
        acc(x, &mut |dx| {
            for co in 0..cout {
                let gplane = &g[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    let dplane = &mut dx[ci * plane..(ci + 1) * plane];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(dy, h);
                        for kx in 0..k {
                            let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                            if wt == 0.0 {
                                continue;
                            }
                            let dxo = kx as isize - pad;
                            let (x0, x1) = valid_range(dxo, wd);
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                for xx in x0..x1 {
                                    dplane[sy * wd + (xx as isize + dxo) as usize] += wt * gplane[y * wd + xx];
                                }
                            }
                        }
                    }
                }
            }
        });
        acc(w, &mut |dw| {
            for co in 0..cout {
                let gplane = &g[co * plane..(co + 1) * plane];
                for ci in 0..cin {
                    let iplane = &xv[ci * plane..(ci + 1) * plane];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (y0, y1) = valid_range(dy, h);
                        for kx in 0..k {
                            let dxo = kx as isize - pad;
                            let (x0, x1) = valid_range(dxo, wd);
                            let mut s = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gplane[y * wd..(y + 1) * wd];
                                let irow = &iplane[sy * wd..(sy + 1) * wd];
                                for xx in x0..x1 {
                                    s += grow[xx] * irow[(xx as isize + dxo) as usize];
                                }
                            }
                            dw[((co * cin + ci) * k + ky) * k + kx] += s;
                        }
                    }
                }
            }
        });
    }
}

/// Output positions `o` for which `o + offset` lies in `[0, n)`.
fn valid_range(offset: isize, n: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}
