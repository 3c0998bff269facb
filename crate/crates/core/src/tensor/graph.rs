//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in construction order, which is already a topological
//! order, so backward is a single reverse sweep. Op constructors validate
//! shapes eagerly and compute values immediately; auxiliary data needed for
//! the backward pass (argmax positions, cached softmax) is stored on the node.

use crate::error::{Error, Result};
use crate::geometry::Box2D;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Tolerance for distribution inputs of `kl_div`.
const NORMALIZATION_TOL: f64 = 1e-6;
/// Floor applied to the student distribution inside `kl_div`.
const KL_FLOOR: f64 = 1e-12;

enum Op {
    Leaf { trainable: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, b: usize, stride: usize, pad: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    Softmax { x: usize, axis: usize },
    Reshape { x: usize },
    Stack { xs: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    GatherElems { x: usize, idx: Vec<usize> },
    RoiPoolMax { x: usize, argmax: Vec<usize> },
    KlDiv { q: usize, p: Tensor },
    L2Residual { x: usize, target: Tensor, row_norms: Vec<f64> },
    SmoothL1Sum { x: usize, target: Tensor },
    CrossEntropySum { x: usize, classes: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; zeros if the node received no gradient flow.
    pub fn get(&self, id: NodeId, graph: &Graph) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Trainable leaf (weights, inputs under test).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { trainable: true },
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Detached leaf: backward never propagates into it and its gradient
    /// reads back as zeros.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { trainable: false },
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Scale(a.0, c), "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, Op::Relu(a.0), "relu")
    }

    /// `x @ w + b` with `x: [n, i]` (or `[i]`), `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (rows, in_dim, vec_input) = match xs.len() {
            1 => (1, xs[0], true),
            2 => (xs[0], xs[1], false),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    detail: format!("x must be 1-D or 2-D, got {xs:?}"),
                })
            }
        };
        if ws.len() != 2 || ws[0] != in_dim || bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("x {xs:?} w {ws:?} b {bs:?}"),
            });
        }
        let out_dim = ws[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            for a in 0..in_dim {
                let xa = xv[r * in_dim + a];
                if xa == 0.0 {
                    continue;
                }
                let wrow = &wv[a * out_dim..(a + 1) * out_dim];
                let orow = &mut out[r * out_dim..(r + 1) * out_dim];
                for (o, wv_) in orow.iter_mut().zip(wrow) {
                    *o += xa * wv_;
                }
            }
            for (o, bv_) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(bv) {
                *o += bv_;
            }
        }
        let shape = if vec_input {
            vec![out_dim]
        } else {
            vec![rows, out_dim]
        };
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Linear { x: x.0, w: w.0, b: b.0 }, "linear")
    }

    /// 2-D convolution on `[H, W, Cin]` with kernel `[kh, kw, Cin, Cout]`,
    /// bias `[Cout]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 || xs[2] != ks[2] || bs[0] != ks[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {xs:?} k {ks:?} b {bs:?}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                out[obase..obase + cout].copy_from_slice(bv);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = (iy as usize * w + ix as usize) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xa = xv[ibase + ci];
                            if xa == 0.0 {
                                continue;
                            }
                            let krow = &kv[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let orow = &mut out[obase..obase + cout];
                            for (o, kv_) in orow.iter_mut().zip(krow) {
                                *o += xa * kv_;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, cout], out)?;
        self.push(
            t,
            Op::Conv2d { x: x.0, k: k.0, b: b.0, stride, pad },
            "conv2d",
        )
    }

    /// Non-overlapping max pooling with window `k` on `[H, W, C]`; H and W
    /// must be divisible by `k`.
    pub fn max_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || k == 0 || xs[0] % k != 0 || xs[1] % k != 0 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2d",
                detail: format!("x {xs:?} window {k}"),
            });
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = ((oy * k + dy) * w + ox * k + dx) * c + ci;
                            if xv[i] > best {
                                best = xv[i];
                                best_at = i;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ci;
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, c], out)?;
        self.push(t, Op::MaxPool2d { x: x.0, argmax }, "max_pool2d")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} out of range for {xs:?}"),
            });
        }
        let axis_len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    mx = mx.max(xv[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..axis_len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push(t, Op::Softmax { x: x.0, axis }, "softmax")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).reshaped(shape)?;
        self.push(t, Op::Reshape { x: x.0 }, "reshape")
    }

    /// Stack equal-shaped nodes into a new leading axis.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("stack of zero nodes".into()));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        for &x in xs {
            if self.value(x).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", self.value(x).shape(), shape),
                });
            }
        }
        let mut data = Vec::with_capacity(xs.len() * self.value(xs[0]).len());
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend_from_slice(&shape);
        let t = Tensor::new(out_shape, data)?;
        self.push(
            t,
            Op::Stack {
                xs: xs.iter().map(|n| n.0).collect(),
            },
            "stack",
        )
    }

    /// Select rows (leading-axis slices) by index, with repetition allowed.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: "scalar input".into(),
            });
        }
        let rows = xs[0];
        let row_len: usize = xs[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of {rows}"
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            data.extend_from_slice(&xv[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&xs[1..]);
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Select arbitrary flat elements into a vector.
    pub fn gather_elems(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather_elems index {bad} out of {n}"
            )));
        }
        let xv = self.value(x).data();
        let data: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        self.push(
            t,
            Op::GatherElems {
                x: x.0,
                idx: idx.to_vec(),
            },
            "gather_elems",
        )
    }

    /// Max-pool a proposal box over a uniform `out_size x out_size` bin grid
    /// of the feature map. `stride` converts image coordinates to feature
    /// cells. Errors when the proposal misses the feature extent entirely.
    pub fn roi_pool(
        &mut self,
        features: NodeId,
        proposal: &Box2D,
        out_size: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let fs = self.value(features).shape().to_vec();
        if fs.len() != 3 || out_size == 0 || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "roi_pool",
                detail: format!("features {fs:?} out_size {out_size} stride {stride}"),
            });
        }
        let (fh, fw, c) = (fs[0], fs[1], fs[2]);
        let sx1 = proposal.x1 / stride as f64;
        let sy1 = proposal.y1 / stride as f64;
        let sx2 = proposal.x2 / stride as f64;
        let sy2 = proposal.y2 / stride as f64;
        let bx1 = sx1.clamp(0.0, fw as f64);
        let by1 = sy1.clamp(0.0, fh as f64);
        let bx2 = sx2.clamp(0.0, fw as f64);
        let by2 = sy2.clamp(0.0, fh as f64);
        if bx2 <= bx1 || by2 <= by1 {
            return Err(Error::InvalidArgument(format!(
                "roi_pool proposal ({}, {}, {}, {}) has no overlap with features",
                proposal.x1, proposal.y1, proposal.x2, proposal.y2
            )));
        }
        let xv = self.value(features).data();
        let mut out = vec![0.0; out_size * out_size * c];
        let mut argmax = vec![0usize; out_size * out_size * c];
        for by in 0..out_size {
            let y_lo = by1 + (by as f64 / out_size as f64) * (by2 - by1);
            let y_hi = by1 + ((by + 1) as f64 / out_size as f64) * (by2 - by1);
            let mut y0 = y_lo.floor() as usize;
            let mut y1 = y_hi.ceil() as usize;
            y0 = y0.min(fh - 1);
            y1 = y1.clamp(y0 + 1, fh);
            for bx in 0..out_size {
                let x_lo = bx1 + (bx as f64 / out_size as f64) * (bx2 - bx1);
                let x_hi = bx1 + ((bx + 1) as f64 / out_size as f64) * (bx2 - bx1);
                let mut x0 = x_lo.floor() as usize;
                let mut x1 = x_hi.ceil() as usize;
                x0 = x0.min(fw - 1);
                x1 = x1.clamp(x0 + 1, fw);
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let i = (yy * fw + xx) * c + ci;
                            if xv[i] > best {
                                best = xv[i];
                                best_at = i;
                            }
                        }
                    }
                    let o = (by * out_size + bx) * c + ci;
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        let t = Tensor::new(vec![out_size, out_size, c], out)?;
        self.push(t, Op::RoiPoolMax { x: features.0, argmax }, "roi_pool")
    }

    /// KL divergence `sum_rows KL(p || q)` with rows along the last axis.
    /// `p` is a detached target distribution; gradient flows to `q` only.
    /// `q` is floored at 1e-12; `0 * ln 0` is taken as 0.
    pub fn kl_div(&mut self, p: &Tensor, q: NodeId) -> Result<NodeId> {
        let qs = self.value(q).shape().to_vec();
        if p.shape() != qs.as_slice() || qs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                detail: format!("p {:?} vs q {:?}", p.shape(), qs),
            });
        }
        let k = *qs.last().unwrap();
        let rows = p.len() / k;
        let qv = self.value(q).data();
        for r in 0..rows {
            let ps: f64 = p.data()[r * k..(r + 1) * k].iter().sum();
            let qs_: f64 = qv[r * k..(r + 1) * k].iter().sum();
            for (name, s) in [("p", ps), ("q", qs_)] {
                if (s - 1.0).abs() > NORMALIZATION_TOL {
                    let _ = name;
                    return Err(Error::NotNormalized {
                        sum: s,
                        tol: NORMALIZATION_TOL,
                    });
                }
            }
        }
        let mut total = 0.0;
        for (pi, qi) in p.data().iter().zip(qv) {
            if *pi > 0.0 {
                total += pi * (pi.ln() - qi.max(KL_FLOOR).ln());
            }
        }
        self.push(Tensor::scalar(total), Op::KlDiv { q: q.0, p: p.clone() }, "kl_div")
    }

    /// Sum over rows (leading axes) of the Euclidean norm of `x - target`
    /// along the last axis; for vectors this is the plain norm. Gradient
    /// flows to `x` only.
    pub fn l2_residual_norm(&mut self, target: &Tensor, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if target.shape() != xs.as_slice() || xs.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "l2_residual_norm",
                detail: format!("target {:?} vs x {:?}", target.shape(), xs),
            });
        }
        let k = *xs.last().unwrap();
        let rows = target.len() / k;
        let xv = self.value(x).data();
        let mut row_norms = Vec::with_capacity(rows);
        let mut total = 0.0;
        for r in 0..rows {
            let mut ss = 0.0;
            for i in r * k..(r + 1) * k {
                let d = xv[i] - target.data()[i];
                ss += d * d;
            }
            let norm = ss.sqrt();
            row_norms.push(norm);
            total += norm;
        }
        self.push(
            Tensor::scalar(total),
            Op::L2Residual {
                x: x.0,
                target: target.clone(),
                row_norms,
            },
            "l2_residual_norm",
        )
    }

    /// Elementwise smooth-L1 (Huber, transition at 1) against a detached
    /// target, summed over all elements.
    pub fn smooth_l1_sum(&mut self, target: &Tensor, x: NodeId) -> Result<NodeId> {
        if target.shape() != self.value(x).shape() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1_sum",
                detail: format!(
                    "target {:?} vs x {:?}",
                    target.shape(),
                    self.value(x).shape()
                ),
            });
        }
        let mut total = 0.0;
        for (xi, ti) in self.value(x).data().iter().zip(target.data()) {
            let d = xi - ti;
            total += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1Sum {
                x: x.0,
                target: target.clone(),
            },
            "smooth_l1_sum",
        )
    }

    /// Sum over rows of `-log softmax(logits)[class]`, computed via
    /// log-sum-exp. `logits: [n, k]`, one class per row.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let xs = self.value(logits).shape().to_vec();
        if xs.len() != 2 || xs[0] != classes.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_sum",
                detail: format!("logits {:?} with {} classes", xs, classes.len()),
            });
        }
        let (n, k) = (xs[0], xs[1]);
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of {k} in cross_entropy_sum"
            )));
        }
        let xv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let row = &xv[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[r * k + j] /= z;
            }
            total += mx + z.ln() - row[classes[r]];
        }
        let probs = Tensor::new(vec![n, k], probs)?;
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                x: logits.0,
                classes: classes.to_vec(),
                probs,
            },
            "cross_entropy_sum",
        )
    }

    /// Reverse accumulation from a scalar loss. Deterministic: identical
    /// graphs produce bit-identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss has shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    self.accum(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    self.accum(&mut grads, *a, &ga);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.nodes[*a].value.len()];
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let av = self.nodes[*a].value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(av)
                        .map(|(gi, ai)| if *ai > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accum(&mut grads, *a, &ga);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.nodes[*x].value.shape();
                    let (rows, in_dim) = if xs.len() == 1 {
                        (1, xs[0])
                    } else {
                        (xs[0], xs[1])
                    };
                    let out_dim = self.nodes[*w].value.shape()[1];
                    let xv = self.nodes[*x].value.data();
                    let wv = self.nodes[*w].value.data();
                    let mut gx = vec![0.0; rows * in_dim];
                    let mut gw = vec![0.0; in_dim * out_dim];
                    let mut gb = vec![0.0; out_dim];
                    for r in 0..rows {
                        let grow = &g[r * out_dim..(r + 1) * out_dim];
                        for a in 0..in_dim {
                            let wrow = &wv[a * out_dim..(a + 1) * out_dim];
                            let mut acc = 0.0;
                            for c in 0..out_dim {
                                acc += grow[c] * wrow[c];
                            }
                            gx[r * in_dim + a] = acc;
                            let xa = xv[r * in_dim + a];
                            if xa != 0.0 {
                                let gwrow = &mut gw[a * out_dim..(a + 1) * out_dim];
                                for (gw_, g_) in gwrow.iter_mut().zip(grow) {
                                    *gw_ += xa * g_;
                                }
                            }
                        }
                        for (gb_, g_) in gb.iter_mut().zip(grow) {
                            *gb_ += g_;
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                    self.accum(&mut grads, *w, &gw);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::Conv2d { x, k, b, stride, pad } => {
                    let xs = self.nodes[*x].value.shape();
                    let ks = self.nodes[*k].value.shape();
                    let (h, w, cin) = (xs[0], xs[1], xs[2]);
                    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
                    let oh = (h + 2 * pad - kh) / stride + 1;
                    let ow = (w + 2 * pad - kw) / stride + 1;
                    let xv = self.nodes[*x].value.data();
                    let kv = self.nodes[*k].value.data();
                    let mut gx = vec![0.0; xv.len()];
                    let mut gk = vec![0.0; kv.len()];
                    let mut gb = vec![0.0; cout];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                            for (gb_, g_) in gb.iter_mut().zip(grow) {
                                *gb_ += g_;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let ibase = (iy as usize * w + ix as usize) * cin;
                                    let kbase = (ky * kw + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xa = xv[ibase + ci];
                                        let krow = &kv[kbase + ci * cout..kbase + (ci + 1) * cout];
                                        let gkrow =
                                            &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                        let mut acc = 0.0;
                                        for c in 0..cout {
                                            acc += grow[c] * krow[c];
                                            gkrow[c] += xa * grow[c];
                                        }
                                        gx[ibase + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                    self.accum(&mut grads, *k, &gk);
                    self.accum(&mut grads, *b, &gb);
                }
                Op::MaxPool2d { x, argmax } | Op::RoiPoolMax { x, argmax } => {
                    let mut gx = vec![0.0; self.nodes[*x].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::Softmax { x, axis } => {
                    let y = self.nodes[id].value.data();
                    let shape = self.nodes[id].value.shape();
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * axis_len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..axis_len {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::Reshape { x } => {
                    self.accum(&mut grads, *x, &g);
                }
                Op::Stack { xs } => {
                    let part = self.nodes[xs[0]].value.len();
                    for (i, &x) in xs.iter().enumerate() {
                        self.accum(&mut grads, x, &g[i * part..(i + 1) * part]);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let mut gx = vec![0.0; self.nodes[*x].value.len()];
                    let row_len = if idx.is_empty() {
                        0
                    } else {
                        g.len() / idx.len()
                    };
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..row_len {
                            gx[i * row_len + j] += g[r * row_len + j];
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::GatherElems { x, idx } => {
                    let mut gx = vec![0.0; self.nodes[*x].value.len()];
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] += g[o];
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::KlDiv { q, p } => {
                    let qv = self.nodes[*q].value.data();
                    let mut gq = vec![0.0; qv.len()];
                    for i in 0..qv.len() {
                        if qv[i] >= KL_FLOOR {
                            gq[i] = -g[0] * p.data()[i] / qv[i];
                        }
                    }
                    self.accum(&mut grads, *q, &gq);
                }
                Op::L2Residual { x, target, row_norms } => {
                    let xv = self.nodes[*x].value.data();
                    let k = *self.nodes[*x].value.shape().last().unwrap();
                    let mut gx = vec![0.0; xv.len()];
                    for (r, &norm) in row_norms.iter().enumerate() {
                        if norm > 0.0 {
                            for i in r * k..(r + 1) * k {
                                gx[i] = g[0] * (xv[i] - target.data()[i]) / norm;
                            }
                        }
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::SmoothL1Sum { x, target } => {
                    let xv = self.nodes[*x].value.data();
                    let mut gx = vec![0.0; xv.len()];
                    for i in 0..xv.len() {
                        let d = xv[i] - target.data()[i];
                        gx[i] = g[0] * if d.abs() < 1.0 { d } else { d.signum() };
                    }
                    self.accum(&mut grads, *x, &gx);
                }
                Op::CrossEntropySum { x, classes, probs } => {
                    let k = probs.shape()[1];
                    let mut gx = probs.data().to_vec();
                    for (r, &c) in classes.iter().enumerate() {
                        gx[r * k + c] -= 1.0;
                    }
                    for v in gx.iter_mut() {
                        *v *= g[0];
                    }
                    self.accum(&mut grads, *x, &gx);
                }
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                // constants read back as zero gradient
                (Op::Leaf { trainable: false }, _) => None,
                (_, Some(v)) => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), v).expect("finite grad"))
                }
                (_, None) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], target: usize, contribution: &[f64]) {
        // constants terminate gradient flow
        if let Op::Leaf { trainable: false } = self.nodes[target].op {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => grads[target] = Some(contribution.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x, &g).data()[0], 6.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_do_not_receive_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x, &g).data()[0], 5.0);
        assert_eq!(grads.get(c, &g).data()[0], 0.0);
        assert!(grads.get_ref(c).is_none());
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], vec![0.7; 4]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let a = g.param(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![3], vec![0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]).unwrap());
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        let diff = g.value(sa).max_abs_diff(g.value(sb)).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn softmax_known_value() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn kl_div_known_values() {
        let mut g = Graph::new();
        let q = g.param(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let p = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let kl = g.kl_div(&p, q).unwrap();
        assert!((g.value(kl).scalar_value().unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let p2 = Tensor::new(vec![2], vec![0.3, 0.7]).unwrap();
        let q2 = g.param(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let kl2 = g.kl_div(&p2, q2).unwrap();
        assert_eq!(g.value(kl2).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn kl_div_rejects_unnormalized() {
        let mut g = Graph::new();
        let q = g.param(Tensor::new(vec![2], vec![0.9, 0.5]).unwrap());
        let p = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            g.kl_div(&p, q),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn l2_residual_pythagorean() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let t = Tensor::zeros(vec![2]);
        let n = g.l2_residual_norm(&t, x).unwrap();
        assert_eq!(g.value(n).scalar_value().unwrap(), 5.0);

        // equal tensors -> exactly zero
        let x2 = g.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let t2 = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let n2 = g.l2_residual_norm(&t2, x2).unwrap();
        assert_eq!(g.value(n2).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn l2_residual_rowwise() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap());
        let t = Tensor::zeros(vec![2, 2]);
        let n = g.l2_residual_norm(&t, x).unwrap();
        assert!((g.value(n).scalar_value().unwrap() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.param(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.param(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 4]));
        let ce = g.cross_entropy_sum(x, &[1, 3]).unwrap();
        let expect = 2.0 * 4.0f64.ln();
        assert!((g.value(ce).scalar_value().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(Tensor::new(vec![3], vec![0.7, -0.2, 1.1]).unwrap());
            let s = g.softmax(x, 0).unwrap();
            let p = Tensor::new(vec![3], vec![0.2, 0.3, 0.5]).unwrap();
            let kl = g.kl_div(&p, s).unwrap();
            let grads = g.backward(kl).unwrap();
            grads.get(x, &g).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn max_pool_forward_and_grad_routing() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2, 1], vec![1.0, 5.0, 2.0, 3.0]).unwrap());
        let y = g.max_pool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x, &g).data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
