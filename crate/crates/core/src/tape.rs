//! Reverse-mode autodiff over a Wengert tape.
//!
//! Every differentiable forward op appends one node holding its output and
//! enough metadata to compute vector-Jacobian products. `backward` replays
//! nodes in exact reverse execution order; inputs always precede outputs,
//! so a single reverse sweep suffices. All loops run in a fixed order,
//! which makes forward and backward bit-reproducible for fixed inputs.
//!
//! Outputs are checked for finiteness after every op; NaN/Inf is an error,
//! never a silent state.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a value produced on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    /// (m,n) x (n) -> (m)
    MatVec {
        w: Val,
        x: Val,
    },
    /// (m,k) x (k,n) -> (m,n)
    MatMul {
        a: Val,
        b: Val,
    },
    /// (m,k) x (n,k) -> (m,n), i.e. a * b^T
    MatMulNT {
        a: Val,
        b: Val,
    },
    Add {
        a: Val,
        b: Val,
    },
    Sub {
        a: Val,
        b: Val,
    },
    MulElem {
        a: Val,
        b: Val,
    },
    /// (r,c) + (c) broadcast over rows
    AddRowBcast {
        x: Val,
        bias: Val,
    },
    /// mul * x + add, elementwise; only the slope matters for backward
    Affine {
        x: Val,
        mul: f64,
    },
    Relu {
        x: Val,
    },
    Sigmoid {
        x: Val,
    },
    Ln {
        x: Val,
    },
    Clamp {
        x: Val,
        lo: f64,
        hi: f64,
    },
    /// Row-wise softmax; rank-1 input is one row.
    SoftmaxRows {
        x: Val,
    },
    /// Row-wise layer norm with learned gain/bias.
    LayerNormRows {
        x: Val,
        gamma: Val,
        beta: Val,
    },
    /// x (cin,h,w), w (cout,cin), b (cout): per-pixel channel mixing.
    Conv1x1 {
        x: Val,
        w: Val,
        b: Val,
    },
    /// x (cin,h,w), w (cout,cin,3,3), b (cout); padding 1.
    Conv3x3 {
        x: Val,
        w: Val,
        b: Val,
        stride: usize,
    },
    /// (c,h,w) -> (c), mean over spatial positions.
    Gap {
        x: Val,
    },
    /// (m,h,w) -> (1,h,w), max over channels; ties go to the lowest index.
    ChannelMax {
        x: Val,
        argmax: Vec<usize>,
    },
    /// (c,h,w) * (1,h,w), map broadcast over channels.
    MulChannelBcast {
        fm: Val,
        map: Val,
    },
    /// (r,c) -> (c)
    Row {
        x: Val,
        idx: usize,
    },
    /// (r,c) -> (r,len), columns [start, start+len)
    ColSlice {
        x: Val,
        start: usize,
        len: usize,
    },
    /// n vectors of len c -> (n,c)
    StackRows {
        parts: Vec<Val>,
    },
    /// (r,c_i) blocks -> (r, sum c_i)
    ConcatCols {
        parts: Vec<Val>,
    },
    /// vectors -> one vector
    ConcatVec {
        parts: Vec<Val>,
    },
    /// same numel, new shape; payload unchanged
    Reshape {
        x: Val,
    },
    /// vector gather by fixed indices
    Gather {
        x: Val,
        idx: Vec<usize>,
    },
    /// sum_i weights[i] * x[i] -> scalar
    DotConst {
        x: Val,
        weights: Vec<T>,
    },
    /// ln(1 + sum_i exp(x_i)) -> scalar, overflow-safe
    Log1pSumExp {
        x: Val,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Val) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Record a constant input (no gradient tracking beyond the tape).
    pub fn constant(&mut self, value: Tensor<T>) -> Val {
        self.push_unchecked(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: T) -> Val {
        self.constant(Tensor::scalar(v))
    }

    /// Pull a parameter value onto the tape; its gradient flows back to the
    /// store via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Val {
        self.push_unchecked(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>) -> Val {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Val(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Val> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name.into() });
        }
        Ok(self.push_unchecked(Tensor::from_parts(shape, data), op))
    }

    fn shape(&self, v: Val) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Val) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- forward primitives -------------------------------------------------

    /// y = W x, with W (m,n) and x (n).
    pub fn mat_vec(&mut self, w: Val, x: Val) -> Result<Val> {
        let (ws, xs) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(shape_err("mat_vec", &ws, &xs));
        }
        let (m, n) = (ws[0], ws[1]);
        let (wd, xd) = (self.data(w), self.data(x));
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + wd[i * n + j] * xd[j];
            }
            out[i] = acc;
        }
        self.push("mat_vec", vec![m], out, Op::MatVec { w, x })
    }

    /// y = W x + b.
    pub fn linear(&mut self, w: Val, x: Val, b: Val) -> Result<Val> {
        let wx = self.mat_vec(w, x)?;
        self.add(wx, b)
    }

    pub fn mat_mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("mat_mul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + av * bd[p * n + j];
                }
            }
        }
        self.push("mat_mul", vec![m, n], out, Op::MatMul { a, b })
    }

    /// y = a b^T with a (m,k), b (n,k).
    pub fn mat_mul_nt(&mut self, a: Val, b: Val) -> Result<Val> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(shape_err("mat_mul_nt", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + ad[i * k + p] * bd[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        self.push("mat_mul_nt", vec![m, n], out, Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_ != bs {
            return Err(shape_err("add", &as_, &bs));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        self.push("add", as_, out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_ != bs {
            return Err(shape_err("sub", &as_, &bs));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x - *y).collect();
        self.push("sub", as_, out, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: Val, b: Val) -> Result<Val> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_ != bs {
            return Err(shape_err("mul_elem", &as_, &bs));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        self.push("mul_elem", as_, out, Op::MulElem { a, b })
    }

    pub fn add_row_bcast(&mut self, x: Val, bias: Val) -> Result<Val> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(shape_err("add_row_bcast", &xs, &bs));
        }
        let (r, c) = (xs[0], xs[1]);
        let (xd, bd) = (self.data(x), self.data(bias));
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        self.push("add_row_bcast", xs, out, Op::AddRowBcast { x, bias })
    }

    /// y = mul * x + add, elementwise with scalar constants.
    pub fn affine(&mut self, x: Val, mul: f64, add: f64) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let (m, a) = (T::of_f64(mul), T::of_f64(add));
        let out: Vec<T> = self.data(x).iter().map(|v| m * *v + a).collect();
        self.push("affine", xs, out, Op::Affine { x, mul })
    }

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let out: Vec<T> = self.data(x).iter().map(|v| v.max(T::zero())).collect();
        self.push("relu", xs, out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let out: Vec<T> = self.data(x).iter().map(|v| sigmoid_scalar(*v)).collect();
        self.push("sigmoid", xs, out, Op::Sigmoid { x })
    }

    pub fn ln(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let out: Vec<T> = self.data(x).iter().map(|v| v.ln()).collect();
        self.push("ln", xs, out, Op::Ln { x })
    }

    pub fn clamp(&mut self, x: Val, lo: f64, hi: f64) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let (l, h) = (T::of_f64(lo), T::of_f64(hi));
        let out: Vec<T> = self.data(x).iter().map(|v| v.max(l).min(h)).collect();
        self.push("clamp", xs, out, Op::Clamp { x, lo, hi })
    }

    pub fn softmax_rows(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let (r, c) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => return Err(shape_err("softmax_rows", &xs, &[])),
        };
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(row[0], T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        self.push("softmax_rows", xs, out, Op::SoftmaxRows { x })
    }

    /// Row-wise layer norm; gamma/beta are per-column gain and bias.
    pub fn layer_norm_rows(&mut self, x: Val, gamma: Val, beta: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let (r, c) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => return Err(shape_err("layer_norm_rows", &xs, &[])),
        };
        let gs = self.shape(gamma).to_vec();
        if gs != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm_rows", &xs, &gs));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let eps = T::of_f64(LAYER_NORM_EPS);
        let inv_c = T::of_f64(1.0 / c as f64);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_c;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                out[i * c + j] = gd[j] * xhat + bd[j];
            }
        }
        self.push("layer_norm_rows", xs, out, Op::LayerNormRows { x, gamma, beta })
    }

    /// Per-pixel channel mixing: x (cin,h,w), w (cout,cin), b (cout).
    pub fn conv1x1(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("conv1x1", &ws, &xs));
        }
        let (cin, h, wd_) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        if self.shape(b) != [cout] {
            return Err(shape_err("conv1x1", &ws, self.shape(b)));
        }
        let hw = h * wd_;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); cout * hw];
        for oc in 0..cout {
            for p in 0..hw {
                out[oc * hw + p] = bd[oc];
            }
            for ic in 0..cin {
                let wv = wd[oc * cin + ic];
                for p in 0..hw {
                    out[oc * hw + p] = out[oc * hw + p] + wv * xd[ic * hw + p];
                }
            }
        }
        self.push("conv1x1", vec![cout, h, wd_], out, Op::Conv1x1 { x, w, b })
    }

    /// 3x3 convolution with padding 1: x (cin,h,w), w (cout,cin,3,3), b (cout).
    pub fn conv3x3(&mut self, x: Val, w: Val, b: Val, stride: usize) -> Result<Val> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv3x3", &ws, &xs));
        }
        if stride == 0 {
            return Err(Error::Config("conv3x3 stride must be >= 1".into()));
        }
        let (cin, h, win) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        if self.shape(b) != [cout] {
            return Err(shape_err("conv3x3", &ws, self.shape(b)));
        }
        let ho = (h - 1) / stride + 1;
        let wo = (win - 1) / stride + 1;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); cout * ho * wo];
        for oc in 0..cout {
            for oy in 0..ho {
                let orow = &mut out[(oc * ho + oy) * wo..(oc * ho + oy) * wo + wo];
                orow.iter_mut().for_each(|v| *v = bd[oc]);
                for ic in 0..cin {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[(ic * h + iy as usize) * win..(ic * h + iy as usize + 1) * win];
                        let wbase = ((oc * cin + ic) * 3 + ky) * 3;
                        let (w0, w1, w2) = (wd[wbase], wd[wbase + 1], wd[wbase + 2]);
                        // left edge (kx = 0 falls outside)
                        orow[0] = orow[0] + w1 * xrow[0];
                        if win > 1 {
                            orow[0] = orow[0] + w2 * xrow[1];
                        }
                        // interior: all three taps in bounds
                        for ox in 1..wo {
                            let ix = ox * stride - 1;
                            let acc = if ix + 2 < win {
                                w0 * xrow[ix] + w1 * xrow[ix + 1] + w2 * xrow[ix + 2]
                            } else if ix + 1 < win {
                                w0 * xrow[ix] + w1 * xrow[ix + 1]
                            } else {
                                w0 * xrow[ix]
                            };
                            orow[ox] = orow[ox] + acc;
                        }
                    }
                }
            }
        }
        self.push("conv3x3", vec![cout, ho, wo], out, Op::Conv3x3 { x, w, b, stride })
    }

    /// Global average pool over spatial dims: (c,h,w) -> (c).
    pub fn gap(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("gap", &xs, &[]));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xd = self.data(x);
        let inv = T::of_f64(1.0 / hw as f64);
        let mut out = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for p in 0..hw {
                acc = acc + xd[ch * hw + p];
            }
            out[ch] = acc * inv;
        }
        self.push("gap", vec![c], out, Op::Gap { x })
    }

    /// Max over the channel axis: (m,h,w) -> (1,h,w). The subgradient goes
    /// to the argmax channel only; ties resolve to the lowest index.
    pub fn channel_max(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("channel_max", &xs, &[]));
        }
        let (m, hw) = (xs[0], xs[1] * xs[2]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); hw];
        let mut argmax = vec![0usize; hw];
        for p in 0..hw {
            let mut best = xd[p];
            let mut best_i = 0;
            for ch in 1..m {
                let v = xd[ch * hw + p];
                if v > best {
                    best = v;
                    best_i = ch;
                }
            }
            out[p] = best;
            argmax[p] = best_i;
        }
        self.push("channel_max", vec![1, xs[1], xs[2]], out, Op::ChannelMax { x, argmax })
    }

    /// (c,h,w) * (1,h,w), the map broadcast over channels.
    pub fn mul_channel_bcast(&mut self, fm: Val, map: Val) -> Result<Val> {
        let (fs, ms) = (self.shape(fm).to_vec(), self.shape(map).to_vec());
        if fs.len() != 3 || ms.len() != 3 || ms[0] != 1 || fs[1] != ms[1] || fs[2] != ms[2] {
            return Err(shape_err("mul_channel_bcast", &fs, &ms));
        }
        let (c, hw) = (fs[0], fs[1] * fs[2]);
        let (fd, md) = (self.data(fm), self.data(map));
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] = fd[ch * hw + p] * md[p];
            }
        }
        self.push("mul_channel_bcast", fs, out, Op::MulChannelBcast { fm, map })
    }

    pub fn row(&mut self, x: Val, idx: usize) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx >= xs[0] {
            return Err(shape_err("row", &xs, &[idx]));
        }
        let c = xs[1];
        let out = self.data(x)[idx * c..(idx + 1) * c].to_vec();
        self.push("row", vec![c], out, Op::Row { x, idx })
    }

    pub fn col_slice(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(shape_err("col_slice", &xs, &[start, len]));
        }
        let (r, c) = (xs[0], xs[1]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push("col_slice", vec![r, len], out, Op::ColSlice { x, start, len })
    }

    pub fn stack_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Tape("stack_rows of zero parts".into()));
        }
        let c = self.shape(parts[0]).to_vec();
        if c.len() != 1 {
            return Err(shape_err("stack_rows", &c, &[]));
        }
        let c = c[0];
        let mut out = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            let ps = self.shape(p);
            if ps != [c] {
                return Err(shape_err("stack_rows", &[c], ps));
            }
            out.extend_from_slice(self.data(p));
        }
        self.push(
            "stack_rows",
            vec![parts.len(), c],
            out,
            Op::StackRows { parts: parts.to_vec() },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Tape("concat_cols of zero parts".into()));
        }
        let r = {
            let s = self.shape(parts[0]);
            if s.len() != 2 {
                return Err(shape_err("concat_cols", s, &[]));
            }
            s[0]
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(shape_err("concat_cols", &[r], s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); r * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let c = widths[pi];
            let pd = self.data(p);
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.push(
            "concat_cols",
            vec![r, total],
            out,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    pub fn concat_vec(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Tape("concat_vec of zero parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(shape_err("concat_vec", self.shape(p), &[]));
            }
            out.extend_from_slice(self.data(p));
        }
        let n = out.len();
        self.push(
            "concat_vec",
            vec![n],
            out,
            Op::ConcatVec { parts: parts.to_vec() },
        )
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != self.data(x).len() {
            return Err(shape_err("reshape", &xs, &shape));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape { x })
    }

    pub fn gather(&mut self, x: Val, idx: &[usize]) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || idx.is_empty() || idx.iter().any(|&i| i >= xs[0]) {
            return Err(shape_err("gather", &xs, idx));
        }
        let xd = self.data(x);
        let out: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        self.push(
            "gather",
            vec![idx.len()],
            out,
            Op::Gather { x, idx: idx.to_vec() },
        )
    }

    /// Weighted sum against fixed coefficients; the masked-mean workhorse.
    pub fn dot_const(&mut self, x: Val, weights: &[T]) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || xs[0] != weights.len() {
            return Err(shape_err("dot_const", &xs, &[weights.len()]));
        }
        let acc = self
            .data(x)
            .iter()
            .zip(weights)
            .map(|(v, w)| *v * *w)
            .sum::<T>();
        self.push(
            "dot_const",
            vec![1],
            vec![acc],
            Op::DotConst { x, weights: weights.to_vec() },
        )
    }

    /// ln(1 + sum_i exp(x_i)), computed via a shifted log-sum-exp so large
    /// positive scores cannot overflow.
    pub fn log1p_sum_exp(&mut self, x: Val) -> Result<Val> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 {
            return Err(shape_err("log1p_sum_exp", &xs, &[]));
        }
        let xd = self.data(x);
        let m = xd.iter().copied().fold(T::zero(), T::max);
        let mut sum = (-m).exp();
        for v in xd {
            sum = sum + (*v - m).exp();
        }
        let out = sum.ln() + m;
        self.push("log1p_sum_exp", vec![1], vec![out], Op::Log1pSumExp { x })
    }

    /// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
    /// q (s,d), k (s,d), v (s,d).
    pub fn sdpa(&mut self, q: Val, k: Val, v: Val) -> Result<Val> {
        let d = {
            let qs = self.shape(q);
            if qs.len() != 2 {
                return Err(shape_err("sdpa", qs, &[]));
            }
            qs[1]
        };
        let scores = self.mat_mul_nt(q, k)?;
        let scaled = self.affine(scores, 1.0 / (d as f64).sqrt(), 0.0)?;
        let attn = self.softmax_rows(scaled)?;
        self.mat_mul(attn, v)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Fills gradient slots for every
    /// node the loss depends on; untouched nodes keep `None`.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "backward target {} was not produced under this tape (len {})",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let (inputs, node) = self.nodes.split_at_mut(i);
            let node = &node[0];
            let Some(g) = node.grad.as_ref() else { continue };
            backward_op(node, g, inputs);
        }

        // Gradients must stay finite; a blowup here is a numeric failure.
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "backward".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Add `scale` times each parameter-leaf gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>, scale: T) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &node.grad {
                    store.accumulate_grad(id, g, scale);
                }
            }
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn grad_buf<T: Real>(node: &mut Node<T>) -> &mut Vec<T> {
    let n = node.value.numel();
    node.grad.get_or_insert_with(|| vec![T::zero(); n])
}

/// Vector-Jacobian product for one node; accumulates into input grads.
/// `inputs` is the tape prefix strictly before the node, so indexing by the
/// op's stored `Val`s is always in range.
fn backward_op<T: Real>(node: &Node<T>, g: &[T], inputs: &mut [Node<T>]) {
    match &node.op {
        Op::Leaf { .. } => {}

        Op::MatVec { w, x } => {
            let (m, n) = (inputs[w.0].value.shape()[0], inputs[w.0].value.shape()[1]);
            let xd = inputs[x.0].value.data().to_vec();
            {
                let gw = grad_buf(&mut inputs[w.0]);
                for i in 0..m {
                    for j in 0..n {
                        gw[i * n + j] = gw[i * n + j] + g[i] * xd[j];
                    }
                }
            }
            let wd = inputs[w.0].value.data().to_vec();
            let gx = grad_buf(&mut inputs[x.0]);
            for j in 0..n {
                let mut acc = T::zero();
                for i in 0..m {
                    acc = acc + g[i] * wd[i * n + j];
                }
                gx[j] = gx[j] + acc;
            }
        }

        Op::MatMul { a, b } => {
            let (m, k) = (inputs[a.0].value.shape()[0], inputs[a.0].value.shape()[1]);
            let n = inputs[b.0].value.shape()[1];
            let bd = inputs[b.0].value.data().to_vec();
            {
                let ga = grad_buf(&mut inputs[a.0]);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = ga[i * k + p] + acc;
                    }
                }
            }
            let ad = inputs[a.0].value.data().to_vec();
            let gb = grad_buf(&mut inputs[b.0]);
            for p in 0..k {
                for j in 0..n {
                    let mut acc = T::zero();
                    for i in 0..m {
                        acc = acc + ad[i * k + p] * g[i * n + j];
                    }
                    gb[p * n + j] = gb[p * n + j] + acc;
                }
            }
        }

        Op::MatMulNT { a, b } => {
            // out = a b^T: (m,k) (n,k) -> (m,n)
            let (m, k) = (inputs[a.0].value.shape()[0], inputs[a.0].value.shape()[1]);
            let n = inputs[b.0].value.shape()[0];
            let bd = inputs[b.0].value.data().to_vec();
            {
                let ga = grad_buf(&mut inputs[a.0]);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + g[i * n + j] * bd[j * k + p];
                        }
                        ga[i * k + p] = ga[i * k + p] + acc;
                    }
                }
            }
            let ad = inputs[a.0].value.data().to_vec();
            let gb = grad_buf(&mut inputs[b.0]);
            for j in 0..n {
                for p in 0..k {
                    let mut acc = T::zero();
                    for i in 0..m {
                        acc = acc + g[i * n + j] * ad[i * k + p];
                    }
                    gb[j * k + p] = gb[j * k + p] + acc;
                }
            }
        }

        Op::Add { a, b } => {
            for (gi, gv) in grad_buf(&mut inputs[a.0]).iter_mut().zip(g) {
                *gi = *gi + *gv;
            }
            for (gi, gv) in grad_buf(&mut inputs[b.0]).iter_mut().zip(g) {
                *gi = *gi + *gv;
            }
        }

        Op::Sub { a, b } => {
            for (gi, gv) in grad_buf(&mut inputs[a.0]).iter_mut().zip(g) {
                *gi = *gi + *gv;
            }
            for (gi, gv) in grad_buf(&mut inputs[b.0]).iter_mut().zip(g) {
                *gi = *gi - *gv;
            }
        }

        Op::MulElem { a, b } => {
            let bd = inputs[b.0].value.data().to_vec();
            for ((gi, gv), bv) in grad_buf(&mut inputs[a.0]).iter_mut().zip(g).zip(&bd) {
                *gi = *gi + *gv * *bv;
            }
            let ad = inputs[a.0].value.data().to_vec();
            for ((gi, gv), av) in grad_buf(&mut inputs[b.0]).iter_mut().zip(g).zip(&ad) {
                *gi = *gi + *gv * *av;
            }
        }

        Op::AddRowBcast { x, bias } => {
            let c = inputs[bias.0].value.numel();
            let r = node.value.numel() / c;
            for (gi, gv) in grad_buf(&mut inputs[x.0]).iter_mut().zip(g) {
                *gi = *gi + *gv;
            }
            let gb = grad_buf(&mut inputs[bias.0]);
            for i in 0..r {
                for j in 0..c {
                    gb[j] = gb[j] + g[i * c + j];
                }
            }
        }

        Op::Affine { x, mul } => {
            let m = T::of_f64(*mul);
            for (gi, gv) in grad_buf(&mut inputs[x.0]).iter_mut().zip(g) {
                *gi = *gi + *gv * m;
            }
        }

        Op::Relu { x } => {
            let xd = inputs[x.0].value.data().to_vec();
            for ((gi, gv), xv) in grad_buf(&mut inputs[x.0]).iter_mut().zip(g).zip(&xd) {
                if *xv > T::zero() {
                    *gi = *gi + *gv;
                }
            }
        }

        Op::Sigmoid { x } => {
            let yd = node.value.data();
            let gx = grad_buf(&mut inputs[x.0]);
            for i in 0..yd.len() {
                gx[i] = gx[i] + g[i] * yd[i] * (T::one() - yd[i]);
            }
        }

        Op::Ln { x } => {
            let xd = inputs[x.0].value.data().to_vec();
            let gx = grad_buf(&mut inputs[x.0]);
            for i in 0..xd.len() {
                gx[i] = gx[i] + g[i] / xd[i];
            }
        }

        Op::Clamp { x, lo, hi } => {
            let (l, h) = (T::of_f64(*lo), T::of_f64(*hi));
            let xd = inputs[x.0].value.data().to_vec();
            let gx = grad_buf(&mut inputs[x.0]);
            for i in 0..xd.len() {
                if xd[i] > l && xd[i] < h {
                    gx[i] = gx[i] + g[i];
                }
            }
        }

        Op::SoftmaxRows { x } => {
            let yd = node.value.data();
            let shape = node.value.shape();
            let (r, c) = if shape.len() == 1 {
                (1, shape[0])
            } else {
                (shape[0], shape[1])
            };
            let gx = grad_buf(&mut inputs[x.0]);
            for i in 0..r {
                let y = &yd[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot = y.iter().zip(gr).map(|(yv, gv)| *yv * *gv).sum::<T>();
                for j in 0..c {
                    gx[i * c + j] = gx[i * c + j] + y[j] * (gr[j] - dot);
                }
            }
        }

        Op::LayerNormRows { x, gamma, beta } => {
            let shape = node.value.shape();
            let (r, c) = if shape.len() == 1 {
                (1, shape[0])
            } else {
                (shape[0], shape[1])
            };
            let xd = inputs[x.0].value.data().to_vec();
            let gd = inputs[gamma.0].value.data().to_vec();
            let eps = T::of_f64(LAYER_NORM_EPS);
            let inv_c = T::of_f64(1.0 / c as f64);

            // Recompute per-row stats; cheaper than caching at this scale.
            let mut gx_acc = vec![T::zero(); r * c];
            let mut gg_acc = vec![T::zero(); c];
            let mut gb_acc = vec![T::zero(); c];
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_c;
                let inv_std = T::one() / (var + eps).sqrt();
                let mut mean_gy = T::zero();
                let mut mean_gy_xhat = T::zero();
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv_std;
                    let gy = gr[j] * gd[j];
                    mean_gy = mean_gy + gy;
                    mean_gy_xhat = mean_gy_xhat + gy * xhat;
                    gg_acc[j] = gg_acc[j] + gr[j] * xhat;
                    gb_acc[j] = gb_acc[j] + gr[j];
                }
                mean_gy = mean_gy * inv_c;
                mean_gy_xhat = mean_gy_xhat * inv_c;
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv_std;
                    let gy = gr[j] * gd[j];
                    gx_acc[i * c + j] = (gy - mean_gy - xhat * mean_gy_xhat) * inv_std;
                }
            }
            for (gi, gv) in grad_buf(&mut inputs[x.0]).iter_mut().zip(&gx_acc) {
                *gi = *gi + *gv;
            }
            for (gi, gv) in grad_buf(&mut inputs[gamma.0]).iter_mut().zip(&gg_acc) {
                *gi = *gi + *gv;
            }
            for (gi, gv) in grad_buf(&mut inputs[beta.0]).iter_mut().zip(&gb_acc) {
                *gi = *gi + *gv;
            }
        }

        Op::Conv1x1 { x, w, b } => {
            let xs = inputs[x.0].value.shape().to_vec();
            let (cin, hw) = (xs[0], xs[1] * xs[2]);
            let cout = inputs[w.0].value.shape()[0];
            let xd = inputs[x.0].value.data().to_vec();
            let wd = inputs[w.0].value.data().to_vec();
            {
                let gw = grad_buf(&mut inputs[w.0]);
                for oc in 0..cout {
                    for ic in 0..cin {
                        let mut acc = T::zero();
                        for p in 0..hw {
                            acc = acc + g[oc * hw + p] * xd[ic * hw + p];
                        }
                        gw[oc * cin + ic] = gw[oc * cin + ic] + acc;
                    }
                }
            }
            {
                let gx = grad_buf(&mut inputs[x.0]);
                for ic in 0..cin {
                    for p in 0..hw {
                        let mut acc = T::zero();
                        for oc in 0..cout {
                            acc = acc + g[oc * hw + p] * wd[oc * cin + ic];
                        }
                        gx[ic * hw + p] = gx[ic * hw + p] + acc;
                    }
                }
            }
            let gb = grad_buf(&mut inputs[b.0]);
            for oc in 0..cout {
                let mut acc = T::zero();
                for p in 0..hw {
                    acc = acc + g[oc * hw + p];
                }
                gb[oc] = gb[oc] + acc;
            }
        }

        Op::Conv3x3 { x, w, b, stride } => {
            let xs = inputs[x.0].value.shape().to_vec();
            let (cin, h, win) = (xs[0], xs[1], xs[2]);
            let os = node.value.shape();
            let (cout, ho, wo) = (os[0], os[1], os[2]);
            let s = *stride;
            let xd = inputs[x.0].value.data().to_vec();
            let wd = inputs[w.0].value.data().to_vec();

            let mut gx_acc = vec![T::zero(); cin * h * win];
            let mut gw_acc = vec![T::zero(); cout * cin * 9];
            let mut gb_acc = vec![T::zero(); cout];
            for oc in 0..cout {
                for oy in 0..ho {
                    let grow = &g[(oc * ho + oy) * wo..(oc * ho + oy) * wo + wo];
                    gb_acc[oc] = gb_acc[oc] + grow.iter().copied().sum::<T>();
                    for ic in 0..cin {
                        for ky in 0..3 {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_off = (ic * h + iy as usize) * win;
                            let xrow = &xd[row_off..row_off + win];
                            let gxrow = &mut gx_acc[row_off..row_off + win];
                            let wbase = ((oc * cin + ic) * 3 + ky) * 3;
                            for kx in 0..3 {
                                let wv = wd[wbase + kx];
                                let mut gw_sum = T::zero();
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let ix = (ox * s + kx) as isize - 1;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    let ix = ix as usize;
                                    gxrow[ix] = gxrow[ix] + gv * wv;
                                    gw_sum = gw_sum + gv * xrow[ix];
                                }
                                gw_acc[wbase + kx] = gw_acc[wbase + kx] + gw_sum;
                            }
                        }
                    }
                }
            }
            for (gi, gv) in grad_buf(&mut inputs[x.0]).iter_mut().zip(&gx_acc) {
                *gi = *gi + *gv;
            }
            for (gi, gv) in grad_buf(&mut inputs[w.0]).iter_mut().zip(&gw_acc) {
                *gi = *gi + *gv;
            }
            for (gi, gv) in grad_buf(&mut inputs[b.0]).iter_mut().zip(&gb_acc) {
                *gi = *gi + *gv;
            }
        }

        Op::Gap { x } => {
            let xs = inputs[x.0].value.shape().to_vec();
            let (c, hw) = (xs[0], xs[1] * xs[2]);
            let inv = T::of_f64(1.0 / hw as f64);
            let gx = grad_buf(&mut inputs[x.0]);
            for ch in 0..c {
                let gv = g[ch] * inv;
                for p in 0..hw {
                    gx[ch * hw + p] = gx[ch * hw + p] + gv;
                }
            }
        }

        Op::ChannelMax { x, argmax } => {
            let xs = inputs[x.0].value.shape().to_vec();
            let hw = xs[1] * xs[2];
            let gx = grad_buf(&mut inputs[x.0]);
            for p in 0..hw {
                gx[argmax[p] * hw + p] = gx[argmax[p] * hw + p] + g[p];
            }
        }

        Op::MulChannelBcast { fm, map } => {
            let fs = inputs[fm.0].value.shape().to_vec();
            let (c, hw) = (fs[0], fs[1] * fs[2]);
            let md = inputs[map.0].value.data().to_vec();
            {
                let gf = grad_buf(&mut inputs[fm.0]);
                for ch in 0..c {
                    for p in 0..hw {
                        gf[ch * hw + p] = gf[ch * hw + p] + g[ch * hw + p] * md[p];
                    }
                }
            }
            let fd = inputs[fm.0].value.data().to_vec();
            let gm = grad_buf(&mut inputs[map.0]);
            for p in 0..hw {
                let mut acc = T::zero();
                for ch in 0..c {
                    acc = acc + g[ch * hw + p] * fd[ch * hw + p];
                }
                gm[p] = gm[p] + acc;
            }
        }

        Op::Row { x, idx } => {
            let c = node.value.numel();
            let gx = grad_buf(&mut inputs[x.0]);
            for j in 0..c {
                gx[idx * c + j] = gx[idx * c + j] + g[j];
            }
        }

        Op::ColSlice { x, start, len } => {
            let c = inputs[x.0].value.shape()[1];
            let r = inputs[x.0].value.shape()[0];
            let gx = grad_buf(&mut inputs[x.0]);
            for i in 0..r {
                for j in 0..*len {
                    gx[i * c + start + j] = gx[i * c + start + j] + g[i * len + j];
                }
            }
        }

        Op::StackRows { parts } => {
            let c = node.value.shape()[1];
            for (i, &p) in parts.iter().enumerate() {
                let gp = grad_buf(&mut inputs[p.0]);
                for j in 0..c {
                    gp[j] = gp[j] + g[i * c + j];
                }
            }
        }

        Op::ConcatCols { parts } => {
            let total = node.value.shape()[1];
            let r = node.value.shape()[0];
            let mut off = 0;
            for &p in parts {
                let c = inputs[p.0].value.shape()[1];
                let gp = grad_buf(&mut inputs[p.0]);
                for i in 0..r {
                    for j in 0..c {
                        gp[i * c + j] = gp[i * c + j] + g[i * total + off + j];
                    }
                }
                off += c;
            }
        }

        Op::ConcatVec { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = inputs[p.0].value.numel();
                let gp = grad_buf(&mut inputs[p.0]);
                for j in 0..n {
                    gp[j] = gp[j] + g[off + j];
                }
                off += n;
            }
        }

        Op::Reshape { x } => {
            for (gi, gv) in grad_buf(&mut inputs[x.0]).iter_mut().zip(g) {
                *gi = *gi + *gv;
            }
        }

        Op::Gather { x, idx } => {
            let gx = grad_buf(&mut inputs[x.0]);
            for (j, &i) in idx.iter().enumerate() {
                gx[i] = gx[i] + g[j];
            }
        }

        Op::DotConst { x, weights } => {
            let gx = grad_buf(&mut inputs[x.0]);
            for (gi, wv) in gx.iter_mut().zip(weights) {
                *gi = *gi + g[0] * *wv;
            }
        }

        Op::Log1pSumExp { x } => {
            // d/dx_i = exp(x_i) / (1 + sum_j exp(x_j)), shifted for safety.
            let xd = inputs[x.0].value.data().to_vec();
            let m = xd.iter().copied().fold(T::zero(), T::max);
            let denom = (-m).exp() + xd.iter().map(|v| (*v - m).exp()).sum::<T>();
            let gx = grad_buf(&mut inputs[x.0]);
            for i in 0..xd.len() {
                gx[i] = gx[i] + g[0] * (xd[i] - m).exp() / denom;
            }
        }
    }
}
