//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every parameter and every
//! input that was registered with [`Graph::input_with_grad`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{gemm_into, MatView, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Spatial padding policy for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zero padding split top/left-first-smaller.
    Same,
    /// No padding, output extent `(n - k) / stride + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
    cout: usize,
}

impl ConvGeom {
    fn new(x: &[usize], wshape: &[usize], spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || wshape.len() != 4 {
            return Err(Error::shape("conv2d", x, wshape));
        }
        let (frames, h, w, c) = (x[0], x[1], x[2], x[3]);
        let k = spec.kernel;
        if wshape[0] != k || wshape[1] != k || wshape[2] != c || spec.stride == 0 {
            return Err(Error::shape("conv2d", x, wshape));
        }
        let s = spec.stride;
        let (ho, wo, pad_top, pad_left) = match spec.padding {
            Padding::Same => {
                let ho = h.div_ceil(s);
                let wo = w.div_ceil(s);
                let pad_h = ((ho - 1) * s + k).saturating_sub(h);
                let pad_w = ((wo - 1) * s + k).saturating_sub(w);
                (ho, wo, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::shape("conv2d", x, wshape));
                }
                ((h - k) / s + 1, (w - k) / s + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            frames,
            h,
            w,
            c,
            k,
            stride: s,
            pad_top,
            pad_left,
            ho,
            wo,
            cout: wshape[3],
        })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    fn out_rows(&self) -> usize {
        self.frames * self.ho * self.wo
    }

    /// Visits every in-bounds run of taps as `(column offset, input offset,
    /// length)`; a run covers consecutive `kx` for one output pixel and `ky`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        let (k, c) = (self.k, self.c);
        for m in 0..self.frames {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (m * self.ho + oy) * self.wo + ox;
                    let x0 = (ox * self.stride) as isize - self.pad_left as isize;
                    let kx0 = (-x0).max(0) as usize;
                    let kx1 = ((self.w as isize - x0).min(k as isize)).max(0) as usize;
                    if kx0 >= kx1 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let col = row * patch + (ky * k + kx0) * c;
                        let ix = (x0 + kx0 as isize) as usize;
                        let src = ((m * self.h + iy as usize) * self.w + ix) * c;
                        f(col, src, (kx1 - kx0) * c);
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, b: usize },
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: usize, mask: Vec<T> },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<T> },
    Reshape(usize),
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(usize, usize),
    Nll { logp: usize, targets: Vec<Option<usize>>, count: usize },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph<'s, T: Real = f32> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    rng: Option<Rng>,
    first_nonfinite: Option<&'static str>,
}

impl<'s, T: Real> Graph<'s, T> {
    /// Evaluation mode: dropout is the identity.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: None,
            first_nonfinite: None,
        }
    }

    /// Training mode: dropout masks are drawn from `rng`.
    pub fn train(store: &'s ParamStore<T>, rng: Rng) -> Self {
        Graph {
            rng: Some(rng),
            ..Graph::eval(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forgets every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    /// Name of the first operation whose output contained NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        self.first_nonfinite
    }

    /// Fails with [`Error::NonFinite`] if any recorded value is not finite.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Var {
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, "input")
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Leaf for a stored parameter. Repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param(id), true, "param");
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let am = MatView::row_major(av.data(), av.shape()[0], av.shape()[1]).t_if(ta);
        let bm = MatView::row_major(bv.data(), bv.shape()[0], bv.shape()[1]).t_if(tb);
        if am.cols != bm.rows {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); am.rows * bm.cols];
        gemm_into(&mut out, am, bm, T::zero());
        let value = Tensor::new(vec![am.rows, bm.cols], out)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, ta, tb }, ng, "matmul"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), ng, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub(a.0, b.0), ng, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), ng, "mul"))
    }

    /// Adds the vector `b` to every row of `x` (broadcast over leading axes).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let w = xv.last_dim();
        if bv.len() != w {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let bias = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % w])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.needs(&[x.0, b.0]);
        Ok(self.push(value, Op::AddRow { x: x.0, b: b.0 }, ng, "add_row"))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.map(x, |v| v * c);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Scale(x.0, c), ng, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Relu(x.0), ng, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Sigmoid(x.0), ng, "sigmoid")
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.map(x, T::ln);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Log(x.0), ng, "log")
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v * v);
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Square(x.0), ng, "square")
    }

    /// Row-wise softmax over the last axis. `allowed`, when given, has one flag
    /// per element; disallowed entries receive exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if let Some(mask) = allowed {
            if mask.len() != xv.len() {
                return Err(Error::shape("softmax_rows", xv.shape(), &[mask.len()]));
            }
        }
        let mut out = vec![T::zero(); xv.len()];
        for (r, (src, dst)) in xv.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let ok = |j: usize| allowed.is_none_or(|m| m[r * w + j]);
            let max = (0..w)
                .filter(|&j| ok(j))
                .map(|j| src[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!(
                    "softmax row {r} is entirely masked"
                )));
            }
            let mut total = T::zero();
            for j in (0..w).filter(|&j| ok(j)) {
                let e = (src[j] - max).exp();
                dst[j] = e;
                total += e;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(value, Op::Softmax(x.0), ng, "softmax"))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(&[x.0]);
        self.push(value, Op::LogSoftmax(x.0), ng, "log_softmax")
    }

    /// Normalises each row over the last axis, then applies a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.last_dim();
        if self.value(gain).len() != w || self.value(bias).len() != w {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::lit(eps);
        let n = T::lit(w as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let src = xv.row(r);
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (src[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, ng, "layer_norm"))
    }

    /// Inverted dropout: in training, zeroes each element with probability `p`
    /// and scales survivors by `1/(1-p)`. The identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.uniform(0.0, 1.0) < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Dropout { x: x.0, mask }, ng, "dropout")
    }

    /// 2-D convolution of `x: [frames, H, W, C]` with `w: [k, k, C, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let patch = geom.patch();
        let xd = self.value(x).data();
        let mut cols = vec![T::zero(); geom.out_rows() * patch];
        geom.for_each_tap(|col, src, n| cols[col..col + n].copy_from_slice(&xd[src..src + n]));
        let mut out = vec![T::zero(); geom.out_rows() * geom.cout];
        gemm_into(
            &mut out,
            MatView::row_major(&cols, geom.out_rows(), patch),
            MatView::row_major(self.value(w).data(), patch, geom.cout),
            T::zero(),
        );
        let value = Tensor::new(vec![geom.frames, geom.ho, geom.wo, geom.cout], out)?;
        let ng = self.needs(&[x.0, w.0]);
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            geom,
            cols,
        };
        Ok(self.push(value, op, ng, "conv2d"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), ng, "reshape"))
    }

    /// Selects rows `ids` of a `[vocab, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", tv.shape(), &[ids.len()]));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.needs(&[table.0]);
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, ng, "gather_rows"))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + width > xv.shape()[1] {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, width]));
        }
        let c = xv.shape()[1];
        let mut out = Vec::with_capacity(xv.shape()[0] * width);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let value = Tensor::new(vec![xv.shape()[0], width], out)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(value, Op::SliceCols { x: x.0, start }, ng, "slice_cols"))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let (ca, cb) = (av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.shape()[0] {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![av.shape()[0], ca + cb], out)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::ConcatCols(a.0, b.0), ng, "concat_cols"))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log-probabilities.
    /// `None` targets are ignored.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logp);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::shape("nll", lv.shape(), &[targets.len()]));
        }
        let v = lv.shape()[1];
        let mut total = T::zero();
        let mut count = 0;
        for (t, target) in targets.iter().enumerate() {
            if let Some(y) = *target {
                if y >= v {
                    return Err(Error::Input(format!("target {y} outside vocabulary of {v}")));
                }
                total -= lv.data()[t * v + y];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Contract("every target position is padding".into()));
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let ng = self.needs(&[logp.0]);
        let op = Op::Nll {
            logp: logp.0,
            targets: targets.to_vec(),
            count,
        };
        Ok(self.push(value, op, ng, "nll"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let ng = self.needs(&[x.0]);
        self.push(Tensor::scalar(total), Op::Sum(x.0), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let total: T = xv.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::lit(xv.len().max(1) as f64));
        let ng = self.needs(&[x.0]);
        self.push(value, Op::Mean(x.0), ng, "mean")
    }

    /// Gradient of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => params.push((*id, g)),
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Accumulation buffer for input `i`, or None when it needs no gradient.
        macro_rules! buf {
            ($i:expr) => {{
                let i = $i;
                if self.nodes[i].needs_grad {
                    let n = self.nodes[i].value.len();
                    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        let val = |i: usize| self.nodes[i].value.data();

        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let am = MatView::row_major(av.data(), av.shape()[0], av.shape()[1]).t_if(*ta);
                let bm = MatView::row_major(bv.data(), bv.shape()[0], bv.shape()[1]).t_if(*tb);
                let gm = MatView::row_major(g, am.rows, bm.cols);
                if let Some(da) = buf!(*a) {
                    if *ta {
                        gemm_into(da, bm, gm.t(), T::one());
                    } else {
                        gemm_into(da, gm, bm.t(), T::one());
                    }
                }
                if let Some(db) = buf!(*b) {
                    if *tb {
                        gemm_into(db, gm.t(), am, T::one());
                    } else {
                        gemm_into(db, am.t(), gm, T::one());
                    }
                }
            }
            Op::Add(a, b) => {
                for (i, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(d) = buf!(i) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (i, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(d) = buf!(i) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = buf!(*a) {
                    let other = val(*b);
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
                        *d += g * o;
                    }
                }
                if let Some(d) = buf!(*b) {
                    let other = val(*a);
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
                        *d += g * o;
                    }
                }
            }
            Op::AddRow { x, b } => {
                if let Some(d) = buf!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = buf!(*b) {
                    let w = d.len();
                    for row in g.chunks(w) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = buf!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Relu(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            Op::Log(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(val(*x)) {
                        *d += g / v;
                    }
                }
            }
            Op::Square(x) => {
                if let Some(d) = buf!(*x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(val(*x)) {
                        *d += T::lit(2.0) * g * v;
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(d) = buf!(*x) {
                    let w = out.last_dim();
                    for ((d, g), y) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.data().chunks(w)) {
                        let s: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for j in 0..w {
                            d[j] += y[j] * (g[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(d) = buf!(*x) {
                    let w = out.last_dim();
                    for ((d, g), y) in d.chunks_mut(w).zip(g.chunks(w)).zip(out.data().chunks(w)) {
                        let s: T = g.iter().copied().sum();
                        for j in 0..w {
                            d[j] += g[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = out.last_dim();
                let gv = val(*gain);
                if let Some(d) = buf!(*gain) {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(d) = buf!(*bias) {
                    for gr in g.chunks(w) {
                        d.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(d) = buf!(*x) {
                    let n = T::lit(w as f64);
                    let mut dh = vec![T::zero(); w];
                    for (r, (dr, (gr, hr))) in d
                        .chunks_mut(w)
                        .zip(g.chunks(w).zip(xhat.chunks(w)))
                        .enumerate()
                    {
                        for j in 0..w {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..w {
                            dr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = buf!(*x) {
                    for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let patch = geom.patch();
                let gm = MatView::row_major(g, geom.out_rows(), geom.cout);
                if let Some(dw) = buf!(*w) {
                    gemm_into(
                        dw,
                        MatView::row_major(cols, geom.out_rows(), patch).t(),
                        gm,
                        T::one(),
                    );
                }
                if self.nodes[*x].needs_grad {
                    let mut dcols = vec![T::zero(); geom.out_rows() * patch];
                    gemm_into(
                        &mut dcols,
                        gm,
                        MatView::row_major(val(*w), patch, geom.cout).t(),
                        T::zero(),
                    );
                    let dx = buf!(*x).expect("checked");
                    geom.for_each_tap(|col, src, n| {
                        for (d, g) in dx[src..src + n].iter_mut().zip(&dcols[col..col + n]) {
                            *d += *g;
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = buf!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Gather { table, ids } => {
                if let Some(d) = buf!(*table) {
                    let w = out.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            d[id * w + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(d) = buf!(*x) {
                    let w = out.last_dim();
                    let c = self.nodes[*x].value.last_dim();
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            d[r * c + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.last_dim();
                let cb = self.nodes[*b].value.last_dim();
                let w = ca + cb;
                if let Some(d) = buf!(*a) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..ca {
                            d[r * ca + j] += gr[j];
                        }
                    }
                }
                if let Some(d) = buf!(*b) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..cb {
                            d[r * cb + j] += gr[ca + j];
                        }
                    }
                }
            }
            Op::Nll {
                logp,
                targets,
                count,
            } => {
                if let Some(d) = buf!(*logp) {
                    let v = self.nodes[*logp].value.last_dim();
                    let scale = g[0] / T::lit(*count as f64);
                    for (t, target) in targets.iter().enumerate() {
                        if let Some(y) = *target {
                            d[t * v + y] -= scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = buf!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = buf!(*x) {
                    let s = g[0] / T::lit(d.len().max(1) as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for an input registered with [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Adds `scale ×` every parameter gradient into `into`.
    pub fn accumulate_into(&self, into: &mut Grads<T>, scale: T) {
        let mut sorted: Vec<_> = self.params.iter().collect();
        sorted.sort_by_key(|(id, _)| *id);
        for (id, g) in sorted {
            into.accumulate(*id, g, scale);
        }
    }

    pub fn into_grads(self, store: &ParamStore<T>) -> Grads<T> {
        let mut grads = Grads::zeros_like(store);
        self.accumulate_into(&mut grads, T::one());
        grads
    }
}
