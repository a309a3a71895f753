use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Region of interest in image pixel coordinates, tagged with the batch
/// index of the feature map it is pooled from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Square(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    BroadcastRows(Var),
    LogSoftmax(Var),
    Softmax(Var),
    PickCols(Var, Vec<usize>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNormCols {
        x: Var,
        inv_std: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogits(Var, Vec<f64>),
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        beta: f64,
    },
    GradReverse(Var, f64),
    GlobalAvgPool(Var),
    RoiAlign {
        fmap: Var,
        batch_of: Vec<usize>,
        taps: Vec<(u32, f64)>,
        taps_per_bin: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass. Build it, call [`Graph::backward`] on a scalar
/// output, then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient reaching `var`; `None` when no gradient path exists.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter that took part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Parameters that were used in the forward pass, with their gradient
    /// (absent when no gradient path reached them).
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        let mut ids: Vec<_> = self.params.iter().map(|(id, v)| (*id, *v)).collect();
        ids.sort();
        ids.into_iter().map(|(id, v)| (id, self.get(v)))
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: (&mut [f64], usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.0.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access
    // implied by (m, k, n) and the given row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (for tests and input sensitivities).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding the current value of a parameter. Repeated calls within
    /// one graph return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` detached from the graph: same value, no gradient path.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Identity forward; the backward pass multiplies the incoming gradient
    /// by `-alpha`.
    pub fn grad_reverse(&mut self, x: Var, alpha: f64) -> Var {
        let t = self.value(x).clone();
        let ng = self.ng(&[x]);
        self.push(t, Op::GradReverse(x, alpha), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise op on mismatched shapes"
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Sum of several tensors of identical shape.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(t, Op::Square(a), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(tb.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        assert_eq!(tb.shape()[0], k, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (ta.data(), k, 1),
            (tb.data(), n, 1),
            (&mut out, n, 1),
            0.0,
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// `x [n, in]`, `w [out, in]`, `b [out]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape().len(), 2, "linear input must be 2-D");
        let (n, din) = (tx.shape()[0], tx.shape()[1]);
        let dout = tw.shape()[0];
        assert_eq!(tw.shape(), &[dout, din], "linear weight shape");
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.numel(), dout, "linear bias shape");
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(tb.data());
            }
        }
        let tx = self.value(x);
        let tw = self.value(w);
        gemm(
            n,
            din,
            dout,
            (tx.data(), din, 1),
            (tw.data(), 1, din),
            (&mut out, dout, 1),
            1.0,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, ng)
    }

    /// 2-D convolution, `x [N, C, H, W]`, `w [O, C, k, k]`, square kernel,
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape().len(), 4, "conv2d input must be NCHW");
        let (n, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, k) = (tw.shape()[0], tw.shape()[2]);
        assert_eq!(tw.shape(), &[o, c, k, k], "conv2d weight shape");
        assert!(stride > 0);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let ckk = c * k * k;
        let ohw = oh * ow;
        let mut cols = vec![0.0; n * ckk * ohw];
        for img in 0..n {
            im2col(
                &tx.data()[img * c * h * wd..(img + 1) * c * h * wd],
                &geom,
                &mut cols[img * ckk * ohw..(img + 1) * ckk * ohw],
            );
        }
        let mut out = vec![0.0; n * o * ohw];
        if let Some(b) = b {
            let tb = self.value(b);
            for img in 0..n {
                for oc in 0..o {
                    let base = (img * o + oc) * ohw;
                    out[base..base + ohw].fill(tb.data()[oc]);
                }
            }
        }
        let tw = self.value(w);
        for img in 0..n {
            gemm(
                o,
                ckk,
                ohw,
                (tw.data(), ckk, 1),
                (&cols[img * ckk * ohw..(img + 1) * ckk * ohw], ohw, 1),
                (&mut out[img * o * ohw..(img + 1) * o * ohw], ohw, 1),
                1.0,
            );
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.ng(&inputs);
        self.push(
            Tensor::from_vec(&[n, o, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(t, Op::Sum(a), ng)
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.numel();
        let m = if n == 0 { 0.0 } else { ta.sum() / n as f64 };
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = *ta.shape().last().expect("sum_last on scalar");
        let out: Vec<f64> = if d == 0 {
            vec![0.0; ta.numel()]
        } else {
            ta.data().chunks(d).map(|r| r.iter().sum()).collect()
        };
        let shape = &ta.shape()[..ta.shape().len() - 1];
        let t = Tensor::from_vec(shape, out);
        let ng = self.ng(&[a]);
        self.push(t, Op::SumLast(a), ng)
    }

    /// Select leading-axis slices by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        let d = ta.row_len();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(ta.row(i));
        }
        let mut shape = ta.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        let ng = self.ng(&[a]);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::GatherRows(a, idx.to_vec()),
            ng,
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        let tail = self.value(vars[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in vars {
            let t = self.value(v);
            assert_eq!(&t.shape()[1..], &tail[..], "concat_rows trailing shapes differ");
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(vars);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::ConcatRows(vars.to_vec()),
            ng,
        )
    }

    /// Repeat a `[1, d]` tensor into `[n, d]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows(), 1, "broadcast_rows expects a single row");
        let d = ta.row_len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(ta.data());
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_vec(&[n, d], out), Op::BroadcastRows(a), ng)
    }

    /// Row-wise log-softmax of a `[n, k]` tensor.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "log_softmax expects [n, k]");
        let k = ta.shape()[1];
        let mut out = Vec::with_capacity(ta.numel());
        for r in ta.data().chunks(k.max(1)) {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(r.iter().map(|v| v - lse));
        }
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Row-wise softmax of a `[n, k]` tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "softmax expects [n, k]");
        let k = ta.shape()[1];
        let mut out = Vec::with_capacity(ta.numel());
        for r in ta.data().chunks(k.max(1)) {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::Softmax(a), ng)
    }

    /// `out[i] = a[i, idx[i]]` for a `[n, k]` tensor.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "pick_cols expects [n, k]");
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        assert_eq!(idx.len(), n, "pick_cols needs one index per row");
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < k, "pick_cols index {j} out of range {k}");
                ta.data()[i * k + j]
            })
            .collect();
        let ng = self.ng(&[a]);
        self.push(
            Tensor::from_vec(&[n], out),
            Op::PickCols(a, idx.to_vec()),
            ng,
        )
    }

    /// Divide each row of `[n, d]` by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "l2_normalize_rows expects [n, d]");
        let d = ta.shape()[1];
        let mut norms = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.numel());
        for r in ta.data().chunks(d.max(1)) {
            let nrm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nrm);
            out.extend(r.iter().map(|v| v / nrm));
        }
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::L2NormalizeRows { x: a, norms }, ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "layer_norm_rows expects [n, d]");
        let d = ta.shape()[1];
        let mut inv_std = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.numel());
        for r in ta.data().chunks(d.max(1)) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(r.iter().map(|v| (v - mean) * is));
        }
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    /// Standardize each column of `[n, d]` with its mean and (biased)
    /// variance over the rows.
    pub fn batch_norm_cols(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 2, "batch_norm_cols expects [n, d]");
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let x = ta.data();
        let mut inv_std = Vec::with_capacity(d);
        let mut out = vec![0.0; x.len()];
        for c in 0..d {
            let mean = (0..n).map(|r| x[r * d + c]).sum::<f64>() / n.max(1) as f64;
            let var = (0..n).map(|r| (x[r * d + c] - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for r in 0..n {
                out[r * d + c] = (x[r * d + c] - mean) * is;
            }
        }
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::BatchNormCols { x: a, inv_std }, ng)
    }

    /// Group normalization of `[n, c, h, w]` followed by a per-channel
    /// affine map with weight `w` and bias `b` (both `[c]`).
    pub fn group_norm(&mut self, x: Var, w: Var, b: Var, groups: usize, eps: f64) -> Var {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        assert_eq!(shape.len(), 4, "group_norm expects [n, c, h, w]");
        let (n, c) = (shape[0], shape[1]);
        assert!(groups > 0 && c % groups == 0, "channels must divide into groups");
        let hw = shape[2] * shape[3];
        let len = c / groups * hw;
        let (tw, tb) = (self.value(w).data(), self.value(b).data());
        assert_eq!((tw.len(), tb.len()), (c, c), "group_norm affine length");
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for (chunk, out) in tx.data().chunks(len).zip(xhat.chunks_mut(len)) {
            let mean = chunk.iter().sum::<f64>() / len as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in out.iter_mut().zip(chunk) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            plane.iter_mut().for_each(|v| *v = *v * tw[ch] + tb[ch]);
        }
        let t = Tensor::from_vec(&shape, out);
        let ng = self.ng(&[x, w, b]);
        self.push(
            t,
            Op::GroupNorm {
                x,
                w,
                b,
                groups,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Elementwise binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&mut self, a: Var, targets: &[f64]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.numel(), targets.len(), "bce target length");
        let out = ta
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::BceWithLogits(a, targets.to_vec()), ng)
    }

    /// Elementwise smooth-L1 distance to constant targets.
    pub fn smooth_l1(&mut self, a: Var, targets: &[f64], beta: f64) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.numel(), targets.len(), "smooth_l1 target length");
        let out = ta
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let d = (x - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let t = Tensor::from_vec(ta.shape(), out);
        let ng = self.ng(&[a]);
        self.push(
            t,
            Op::SmoothL1 {
                x: a,
                target: targets.to_vec(),
                beta,
            },
            ng,
        )
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape().len(), 4, "global_avg_pool expects NCHW");
        let (n, c, hw) = (ta.shape()[0], ta.shape()[1], ta.shape()[2] * ta.shape()[3]);
        let out = ta
            .data()
            .chunks(hw)
            .map(|r| r.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool(a), ng)
    }

    /// Mean over groups of leading-axis rows: `out[s] = mean(a[segments[s]])`.
    /// Empty segments produce zero rows. Implemented as a product with a
    /// constant averaging matrix.
    pub fn segment_mean(&mut self, a: Var, segments: &[Vec<usize>]) -> Var {
        let n = self.value(a).rows();
        let mut avg = vec![0.0; segments.len() * n];
        for (s, seg) in segments.iter().enumerate() {
            for &i in seg {
                avg[s * n + i] += 1.0 / seg.len() as f64;
            }
        }
        let m = self.constant(Tensor::from_vec(&[segments.len(), n], avg));
        let shape = self.value(a).shape().to_vec();
        let flat = self.reshape(a, &[n, shape[1..].iter().product()]);
        let out = self.matmul(m, flat);
        let mut out_shape = shape;
        out_shape[0] = segments.len();
        self.reshape(out, &out_shape)
    }

    /// Bilinear ROI pooling (half-pixel aligned) of `fmap [N, C, H, W]` into
    /// `[R, C, out, out]`. Box coordinates are in input-image pixels;
    /// `scale` maps them onto the feature grid.
    pub fn roi_align(
        &mut self,
        fmap: Var,
        rois: &[RoiBox],
        out: usize,
        scale: f64,
        sampling: usize,
    ) -> Var {
        let tf = self.value(fmap);
        assert_eq!(tf.shape().len(), 4, "roi_align expects NCHW");
        let (n, c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2], tf.shape()[3]);
        let sampling = sampling.max(1);
        let taps_per_bin = 4 * sampling * sampling;
        let bins = out * out;
        let mut taps = Vec::with_capacity(rois.len() * bins * taps_per_bin);
        for roi in rois {
            assert!(roi.batch < n, "roi batch index out of range");
            let x0 = roi.x0 * scale - 0.5;
            let y0 = roi.y0 * scale - 0.5;
            let bin_w = (roi.x1 * scale - 0.5 - x0) / out as f64;
            let bin_h = (roi.y1 * scale - 0.5 - y0) / out as f64;
            let count = (sampling * sampling) as f64;
            for ph in 0..out {
                for pw in 0..out {
                    for iy in 0..sampling {
                        let y = y0 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                        for ix in 0..sampling {
                            let x = x0
                                + pw as f64 * bin_w
                                + (ix as f64 + 0.5) * bin_w / sampling as f64;
                            push_bilinear_taps(&mut taps, y, x, h, w, count);
                        }
                    }
                }
            }
        }
        let hw = h * w;
        let mut data = vec![0.0; rois.len() * c * bins];
        for (r, roi) in rois.iter().enumerate() {
            for ch in 0..c {
                let plane = &tf.data()[(roi.batch * c + ch) * hw..(roi.batch * c + ch + 1) * hw];
                for b in 0..bins {
                    let t = &taps[(r * bins + b) * taps_per_bin..(r * bins + b + 1) * taps_per_bin];
                    data[(r * c + ch) * bins + b] =
                        t.iter().map(|&(i, wt)| wt * plane[i as usize]).sum();
                }
            }
        }
        let ng = self.ng(&[fmap]);
        self.push(
            Tensor::from_vec(&[rois.len(), c, out, out], data),
            Op::RoiAlign {
                fmap,
                batch_of: rois.iter().map(|r| r.batch).collect(),
                taps,
                taps_per_bin,
            },
            ng,
        )
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward needs a single-element output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("slot filled").data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = zip_map(gd, tb.data(), |x, y| x * y);
                let gb = zip_map(gd, ta.data(), |x, y| x * y);
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), ga));
                self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), gb));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::GradReverse(a, alpha) => self.accumulate(grads, *a, g.map(|v| -alpha * v)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = zip_map(gd, ta.data(), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), d));
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                let d = zip_map(gd, ta.data(), |gv, x| 2.0 * x * gv);
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), d));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, (gd, n, 1), (tb.data(), 1, n), (&mut da, k, 1), 0.0);
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, (ta.data(), 1, k), (gd, n, 1), (&mut db, n, 1), 0.0);
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = (tx.shape()[0], tx.shape()[1]);
                let dout = tw.shape()[0];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, (gd, dout, 1), (tw.data(), din, 1), (&mut dx, din, 1), 0.0);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, din], dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, (gd, 1, dout), (tx.data(), din, 1), (&mut dw, din, 1), 0.0);
                    self.accumulate(grads, *w, Tensor::from_vec(&[dout, din], dw));
                }
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for row in gd.chunks(dout.max(1)) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let ConvGeom { n, c, h, w: wd, o, k, oh, ow, .. } = *geom;
                let ckk = c * k * k;
                let ohw = oh * ow;
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; o * ckk];
                    for img in 0..n {
                        gemm(
                            o,
                            ohw,
                            ckk,
                            (&gd[img * o * ohw..(img + 1) * o * ohw], ohw, 1),
                            (&cols[img * ckk * ohw..(img + 1) * ckk * ohw], 1, ohw),
                            (&mut dw, ckk, 1),
                            1.0,
                        );
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, c, k, k], dw));
                }
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for img in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let base = (img * o + oc) * ohw;
                                *d += gd[base..base + ohw].iter().sum::<f64>();
                            }
                        }
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let tw = self.value(*w);
                    let mut dcols = vec![0.0; ckk * ohw];
                    let mut dx = vec![0.0; n * c * h * wd];
                    for img in 0..n {
                        gemm(
                            ckk,
                            o,
                            ohw,
                            (tw.data(), 1, ckk),
                            (&gd[img * o * ohw..(img + 1) * o * ohw], ohw, 1),
                            (&mut dcols, ohw, 1),
                            0.0,
                        );
                        col2im(
                            &dcols,
                            geom,
                            &mut dx[img * c * h * wd..(img + 1) * c * h * wd],
                        );
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, wd], dx));
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::from_vec(shape, gd.to_vec()));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(shape, gd[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let n = ta.numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(ta.shape(), gd[0] / n));
            }
            Op::SumLast(a) => {
                let ta = self.value(*a);
                let d = *ta.shape().last().expect("shape");
                let mut out = Vec::with_capacity(ta.numel());
                for &v in gd {
                    out.extend(std::iter::repeat_n(v, d));
                }
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), out));
            }
            Op::GatherRows(a, idx) => {
                let d = self.value(*a).row_len();
                self.accumulate_with(grads, *a, |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            da[src * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(vars) => {
                let mut offset = 0;
                for v in vars {
                    let t = self.value(*v);
                    let len = t.numel();
                    self.accumulate(
                        grads,
                        *v,
                        Tensor::from_vec(t.shape(), gd[offset..offset + len].to_vec()),
                    );
                    offset += len;
                }
            }
            Op::BroadcastRows(a) => {
                let d = self.value(*a).numel();
                self.accumulate_with(grads, *a, |da| {
                    for row in gd.chunks(d.max(1)) {
                        for (x, v) in da.iter_mut().zip(row) {
                            *x += v;
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let k = node.value.shape()[1].max(1);
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in gd.chunks(k).zip(y.chunks(k)) {
                    let s: f64 = gr.iter().sum();
                    out.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
                }
                self.accumulate(grads, *a, Tensor::from_vec(node.value.shape(), out));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = node.value.shape()[1].max(1);
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in gd.chunks(k).zip(y.chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::from_vec(node.value.shape(), out));
            }
            Op::PickCols(a, idx) => {
                let k = self.value(*a).shape()[1];
                self.accumulate_with(grads, *a, |da| {
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * k + j] += gd[i];
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = node.value.shape()[1].max(1);
                let mut out = Vec::with_capacity(y.len());
                for ((gr, yr), nrm) in gd.chunks(d).zip(y.chunks(d)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / nrm));
                }
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), out));
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = node.value.data();
                let d = node.value.shape()[1].max(1);
                let mut out = Vec::with_capacity(y.len());
                for ((gr, yr), is) in gd.chunks(d).zip(y.chunks(d)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    out.extend(gr.iter().zip(yr).map(|(gv, yv)| is * (gv - mg - yv * mgy)));
                }
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), out));
            }
            Op::GroupNorm {
                x,
                w,
                b,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = node.value.shape();
                let c = shape[1];
                let hw = shape[2] * shape[3];
                let len = c / groups * hw;
                let tw = self.value(*w).data();
                let mut dw = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dxhat = vec![0.0; gd.len()];
                for (i, ((gp, xp), dp)) in gd.chunks(hw).zip(xhat.chunks(hw)).zip(dxhat.chunks_mut(hw)).enumerate() {
                    let ch = i % c;
                    for ((gv, xv), dv) in gp.iter().zip(xp).zip(dp.iter_mut()) {
                        dw[ch] += gv * xv;
                        db[ch] += gv;
                        *dv = gv * tw[ch];
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; gd.len()];
                    for (((dh, xh), out), is) in dxhat.chunks(len).zip(xhat.chunks(len)).zip(dx.chunks_mut(len)).zip(inv_std) {
                        let m = dh.iter().sum::<f64>() / len as f64;
                        let mx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                        for ((o, d), xv) in out.iter_mut().zip(dh).zip(xh) {
                            *o = is * (d - m - xv * mx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(shape, dx));
                }
                self.accumulate(grads, *w, Tensor::from_vec(&[c], dw));
                self.accumulate(grads, *b, Tensor::from_vec(&[c], db));
            }
            Op::BatchNormCols { x, inv_std } => {
                let y = node.value.data();
                let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                let mut out = vec![0.0; y.len()];
                for (c, is) in inv_std.iter().enumerate() {
                    let mg = (0..n).map(|r| gd[r * d + c]).sum::<f64>() / n as f64;
                    let mgy = (0..n).map(|r| gd[r * d + c] * y[r * d + c]).sum::<f64>() / n as f64;
                    for r in 0..n {
                        let i = r * d + c;
                        out[i] = is * (gd[i] - mg - y[i] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), out));
            }
            Op::BceWithLogits(a, t) => {
                let ta = self.value(*a);
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(t)
                    .zip(gd)
                    .map(|((&x, &tv), &gv)| gv * (sigmoid(x) - tv))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), d));
            }
            Op::SmoothL1 { x, target, beta } => {
                let tx = self.value(*x);
                let d: Vec<f64> = tx
                    .data()
                    .iter()
                    .zip(target)
                    .zip(gd)
                    .map(|((&xv, &tv), &gv)| {
                        let diff = xv - tv;
                        if diff.abs() < *beta {
                            gv * diff / beta
                        } else {
                            gv * diff.signum()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(tx.shape(), d));
            }
            Op::GlobalAvgPool(a) => {
                let ta = self.value(*a);
                let hw = ta.shape()[2] * ta.shape()[3];
                let mut out = Vec::with_capacity(ta.numel());
                for &v in gd {
                    out.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), out));
            }
            Op::RoiAlign {
                fmap,
                batch_of,
                taps,
                taps_per_bin,
            } => {
                let tf = self.value(*fmap);
                let (c, hw) = (tf.shape()[1], tf.shape()[2] * tf.shape()[3]);
                let bins = node.value.shape()[2] * node.value.shape()[3];
                self.accumulate_with(grads, *fmap, |df| {
                    for (r, &batch) in batch_of.iter().enumerate() {
                        for ch in 0..c {
                            let plane = &mut df[(batch * c + ch) * hw..(batch * c + ch + 1) * hw];
                            for b in 0..bins {
                                let gv = gd[(r * c + ch) * bins + b];
                                if gv == 0.0 {
                                    continue;
                                }
                                let t = &taps[(r * bins + b) * taps_per_bin
                                    ..(r * bins + b + 1) * taps_per_bin];
                                for &(idx, wt) in t {
                                    plane[idx as usize] += wt * gv;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn push_bilinear_taps(taps: &mut Vec<(u32, f64)>, y: f64, x: f64, h: usize, w: usize, count: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        taps.extend([(0, 0.0); 4]);
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (yl, yh, y) = if y.floor() as usize >= h - 1 {
        (h - 1, h - 1, (h - 1) as f64)
    } else {
        (y.floor() as usize, y.floor() as usize + 1, y)
    };
    let (xl, xh, x) = if x.floor() as usize >= w - 1 {
        (w - 1, w - 1, (w - 1) as f64)
    } else {
        (x.floor() as usize, x.floor() as usize + 1, x)
    };
    let ly = y - yl as f64;
    let lx = x - xl as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push(((yl * w + xl) as u32, hy * hx / count));
    taps.push(((yl * w + xh) as u32, hy * lx / count));
    taps.push(((yh * w + xl) as u32, ly * hx / count));
    taps.push(((yh * w + xh) as u32, ly * lx / count));
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst[oy * g.ow..(oy + 1) * g.ow].fill(0.0);
                        continue;
                    }
                    let src = &img[(ch * g.h + iy as usize) * g.w..(ch * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
