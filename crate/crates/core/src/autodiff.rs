//! Reverse-mode differentiation over complex tensors.
//!
//! Gradients use the conjugate-cogradient convention: for a real scalar loss
//! `L`, the gradient stored for a node `z` is `dL/d(conj z)`, i.e.
//! `(dL/dRe z + i dL/dIm z) / 2`. A steepest-descent step is then
//! `z <- z - lr * grad` with no extra conjugation.
//!
//! Nodes flagged `real` carry values with zero imaginary part; only the real
//! part of the gradient reaching them is meaningful.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in execution order,
//! so [`Tape::backward`] walks the node list once, back to front.

use crate::error::{Error, Result};
use crate::tensor::{strides, CTensor, C64, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Conj(Var),
    Scale(Var, f64),
    AddConst(Var),
    /// Multiplies by a real mask over the leading elements; each mask entry
    /// covers `inner` consecutive values.
    Mask(Var, Vec<f64>, usize),
    SumAxes(Var),
    Expand(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    /// `y[r, f] = sum_g w[f, g] x[r, g]`.
    FeatureMap(Var, Var),
    /// `y[..] = sum_j conj(a[.., j]) b[.., j]`.
    Inner(Var, Var),
    Abs2(Var),
    Log1p(Var),
    DivReal(Var, Var),
    RsqrtOrZero(Var),
    LeakyRelu(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: CTensor,
    op: Op,
    real: bool,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<CTensor>>,
}

impl Gradients {
    /// `dL/d(conj v)`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&CTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<CTensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn is_real(t: &CTensor) -> bool {
    t.data().iter().all(|z| z.im == 0.0)
}

/// Maps each flat index of `from` onto the flat index of `to`, where `to` has
/// the same rank and every axis either matches or has size 1.
fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    assert_eq!(from.len(), to.len(), "rank mismatch");
    let to_strides = strides(to);
    let len: usize = from.iter().product();
    let mut map = Vec::with_capacity(len);
    let mut idx = vec![0usize; from.len()];
    for _ in 0..len {
        let off: usize = idx
            .iter()
            .zip(to)
            .zip(&to_strides)
            .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
            .sum();
        map.push(off);
        for axis in (0..from.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < from[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}

fn reduce_by_map(values: &[C64], map: &[usize], shape: &[usize]) -> CTensor {
    let mut out = CTensor::zeros(shape);
    let data = out.data_mut();
    for (&v, &j) in values.iter().zip(map) {
        data[j] += v;
    }
    out
}

fn gather_by_map(values: &[C64], map: &[usize], shape: &[usize]) -> CTensor {
    CTensor::from_vec(shape, map.iter().map(|&j| values[j]).collect())
}

fn matmul_raw(a: &[C64], b: &[C64], n: usize, k: usize, p: usize) -> Vec<C64> {
    let mut out = vec![ZERO; n * p];
    for i in 0..n {
        for l in 0..k {
            let x = a[i * k + l];
            if x == ZERO {
                continue;
            }
            let row = &b[l * p..(l + 1) * p];
            for (o, &y) in out[i * p..(i + 1) * p].iter_mut().zip(row) {
                *o += x * y;
            }
        }
    }
    out
}

fn conj_transpose(a: &[C64], rows: usize, cols: usize) -> Vec<C64> {
    let mut out = vec![ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j].conj();
        }
    }
    out
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_slope(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
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

    fn push(&mut self, value: CTensor, op: Op, real: bool, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            real,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn real(&self, v: Var) -> bool {
        self.nodes[v.0].real
    }

    pub fn value(&self, v: Var) -> &CTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_real(&self, v: Var) -> bool {
        self.real(v)
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: CTensor) -> Var {
        let real = is_real(&value);
        self.push(value, Op::Leaf, real, true)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: CTensor) -> Var {
        let real = is_real(&value);
        self.push(value, Op::Leaf, real, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let (real, rg) = (self.real(a) && self.real(b), self.tracked(&[a, b]));
        self.push(value, Op::Add(a, b), real, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let (real, rg) = (self.real(a) && self.real(b), self.tracked(&[a, b]));
        self.push(value, Op::Sub(a, b), real, rg)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_all of nothing");
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let (real, rg) = (self.real(a) && self.real(b), self.tracked(&[a, b]));
        self.push(value, Op::Mul(a, b), real, rg)
    }

    pub fn conj(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|z| z.conj());
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::Conj(a), real, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::Scale(a, s), real, rg)
    }

    /// Adds a real constant to every element.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|z| z + c);
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::AddConst(a), real, rg)
    }

    /// Multiplies each block of trailing elements by a real mask entry. The
    /// mask covers the leading axes; e.g. a `K x M` association mask applied to
    /// a `[K, M, N, F]` state.
    pub fn mask(&mut self, a: Var, mask: &[f64]) -> Var {
        let len = self.value(a).len();
        assert!(
            !mask.is_empty() && len.is_multiple_of(mask.len()),
            "mask of length {} does not tile tensor of length {len}",
            mask.len()
        );
        let inner = len / mask.len();
        let mut value = self.value(a).clone();
        for (chunk, &w) in value.data_mut().chunks_mut(inner).zip(mask) {
            for z in chunk {
                *z *= w;
            }
        }
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::Mask(a, mask.to_vec(), inner), real, rg)
    }

    /// Sums over `axes`, keeping them with size 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let from = self.shape(a).to_vec();
        let mut to = from.clone();
        for &ax in axes {
            assert!(ax < to.len(), "sum_axes: axis {ax} out of range");
            to[ax] = 1;
        }
        let map = broadcast_map(&from, &to);
        let value = reduce_by_map(self.value(a).data(), &map, &to);
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::SumAxes(a), real, rg)
    }

    /// Sums every element into a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum_axes(a, &axes);
        self.reshape(s, &[1])
    }

    /// Repeats size-1 axes up to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.shape(a).to_vec();
        assert_eq!(from.len(), shape.len(), "expand: rank mismatch");
        for (&f, &t) in from.iter().zip(shape) {
            assert!(
                f == t || f == 1,
                "expand: cannot broadcast {from:?} to {shape:?}"
            );
        }
        let map = broadcast_map(shape, &from);
        let value = gather_by_map(self.value(a).data(), &map, shape);
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::Expand(a), real, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::Reshape(a), real, rg)
    }

    /// Plain (non-conjugating) transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = CTensor::from_vec(&[c, r], out);
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::Transpose(a), real, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (n, k, p) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, p);
        let value = CTensor::from_vec(&[n, p], out);
        let (real, rg) = (self.real(a) && self.real(b), self.tracked(&[a, b]));
        self.push(value, Op::MatMul(a, b), real, rg)
    }

    /// Applies an `F_out x F_in` matrix along the last axis of `x`.
    pub fn feature_map(&mut self, x: Var, w: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let f_in = *sx.last().expect("feature_map on a scalar");
        assert!(
            sw.len() == 2 && sw[1] == f_in,
            "feature_map: weight {sw:?} does not act on width {f_in}"
        );
        let f_out = sw[0];
        let rows = self.value(x).len() / f_in;
        let wt = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![ZERO; rows * f_out];
        for r in 0..rows {
            let xr = &xd[r * f_in..(r + 1) * f_in];
            for f in 0..f_out {
                let wr = &wt[f * f_in..(f + 1) * f_in];
                out[r * f_out + f] = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = f_out;
        let value = CTensor::from_vec(&shape, out);
        let (real, rg) = (self.real(x) && self.real(w), self.tracked(&[x, w]));
        self.push(value, Op::FeatureMap(x, w), real, rg)
    }

    /// `a^H b` along the last axis; the axis is kept with size 1.
    pub fn inner(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "inner");
        let shape = self.shape(a).to_vec();
        let last = *shape.last().expect("inner on a scalar");
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<C64> = ad
            .chunks(last)
            .zip(bd.chunks(last))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.conj() * q).sum())
            .collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = 1;
        let value = CTensor::from_vec(&oshape, out);
        let (real, rg) = (false, self.tracked(&[a, b]));
        self.push(value, Op::Inner(a, b), real, rg)
    }

    /// `|z|^2`, real valued.
    pub fn abs2(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|z| C64::new(z.norm_sqr(), 0.0));
        let rg = self.tracked(&[a]);
        self.push(value, Op::Abs2(a), true, rg)
    }

    /// `ln(1 + x)` of a real node.
    pub fn log1p(&mut self, a: Var) -> Var {
        assert!(self.real(a), "log1p expects a real node");
        let value = self.value(a).map(|z| C64::new(z.re.ln_1p(), 0.0));
        let rg = self.tracked(&[a]);
        self.push(value, Op::Log1p(a), true, rg)
    }

    /// `a / b` of real nodes.
    pub fn div_real(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div_real");
        assert!(self.real(a) && self.real(b), "div_real expects real nodes");
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| C64::new(x.re / y.re, 0.0));
        let rg = self.tracked(&[a, b]);
        self.push(value, Op::DivReal(a, b), true, rg)
    }

    /// `1 / sqrt(x)` of a real node, with `0 -> 0`.
    pub fn rsqrt_or_zero(&mut self, a: Var) -> Var {
        assert!(self.real(a), "rsqrt_or_zero expects a real node");
        let value = self
            .value(a)
            .map(|z| C64::new(if z.re > 0.0 { z.re.sqrt().recip() } else { 0.0 }, 0.0));
        let rg = self.tracked(&[a]);
        self.push(value, Op::RsqrtOrZero(a), true, rg)
    }

    /// Leaky rectifier applied separately to real and imaginary parts.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .map(|z| C64::new(leaky(z.re, slope), leaky(z.im, slope)));
        let (real, rg) = (self.real(a), self.tracked(&[a]));
        self.push(value, Op::LeakyRelu(a, slope), real, rg)
    }

    /// Back-propagates from a real scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.real {
            return Err(Error::InvalidArgument("loss must be real valued".into()));
        }
        let mut grads: Vec<Option<CTensor>> = vec![None; self.nodes.len()];
        // dL/d(conj L) for real L.
        grads[loss.0] = Some(CTensor::from_vec(
            node.value.shape(),
            vec![C64::new(0.5, 0.0)],
        ));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<CTensor>], v: Var, delta: CTensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &CTensor, grads: &mut [Option<CTensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(val(*b), |gy, y| gy * y.conj()));
                self.accumulate(grads, *b, g.zip_map(val(*a), |gy, x| gy * x.conj()));
            }
            Op::Conj(a) => self.accumulate(grads, *a, g.map(|z| z.conj())),
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Mask(a, mask, inner) => {
                let mut d = g.clone();
                for (chunk, &w) in d.data_mut().chunks_mut(*inner).zip(mask) {
                    for z in chunk {
                        *z *= w;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAxes(a) => {
                let from = val(*a).shape();
                let map = broadcast_map(from, g.shape());
                self.accumulate(grads, *a, gather_by_map(g.data(), &map, from));
            }
            Op::Expand(a) => {
                let to = val(*a).shape();
                let map = broadcast_map(g.shape(), to);
                self.accumulate(grads, *a, reduce_by_map(g.data(), &map, to));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshape(val(*a).shape()));
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let (r, c) = (s[0], s[1]);
                let mut out = vec![ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, CTensor::from_vec(&[c, r], out));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, k, p) = (sa[0], sa[1], sb[1]);
                // dA = G B^H, dB = A^H G
                let bh = conj_transpose(val(*b).data(), k, p);
                let da = matmul_raw(g.data(), &bh, n, p, k);
                let ah = conj_transpose(val(*a).data(), n, k);
                let db = matmul_raw(&ah, g.data(), k, n, p);
                self.accumulate(grads, *a, CTensor::from_vec(&[n, k], da));
                self.accumulate(grads, *b, CTensor::from_vec(&[k, p], db));
            }
            Op::FeatureMap(x, w) => {
                let sw = val(*w).shape();
                let (f_out, f_in) = (sw[0], sw[1]);
                let rows = g.len() / f_out;
                let (xd, wd, gd) = (val(*x).data(), val(*w).data(), g.data());
                let mut dx = vec![ZERO; rows * f_in];
                let mut dw = vec![ZERO; f_out * f_in];
                for r in 0..rows {
                    let gr = &gd[r * f_out..(r + 1) * f_out];
                    let xr = &xd[r * f_in..(r + 1) * f_in];
                    let dxr = &mut dx[r * f_in..(r + 1) * f_in];
                    for (f, &gf) in gr.iter().enumerate() {
                        if gf == ZERO {
                            continue;
                        }
                        let wr = &wd[f * f_in..(f + 1) * f_in];
                        let dwr = &mut dw[f * f_in..(f + 1) * f_in];
                        for c in 0..f_in {
                            dxr[c] += gf * wr[c].conj();
                            dwr[c] += gf * xr[c].conj();
                        }
                    }
                }
                self.accumulate(grads, *x, CTensor::from_vec(val(*x).shape(), dx));
                self.accumulate(grads, *w, CTensor::from_vec(sw, dw));
            }
            Op::Inner(a, b) => {
                let shape = val(*a).shape();
                let last = *shape.last().unwrap();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let mut da = vec![ZERO; ad.len()];
                let mut db = vec![ZERO; bd.len()];
                for (j, &gy) in g.data().iter().enumerate() {
                    for c in j * last..(j + 1) * last {
                        da[c] = gy.conj() * bd[c];
                        db[c] = gy * ad[c];
                    }
                }
                self.accumulate(grads, *a, CTensor::from_vec(shape, da));
                self.accumulate(grads, *b, CTensor::from_vec(shape, db));
            }
            Op::Abs2(a) => {
                self.accumulate(grads, *a, g.zip_map(val(*a), |gy, z| z * (2.0 * gy.re)));
            }
            Op::Log1p(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), |gy, x| C64::new(gy.re / (1.0 + x.re), 0.0)),
                );
            }
            Op::DivReal(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(bv, |gy, y| C64::new(gy.re / y.re, 0.0)),
                );
                let db = CTensor::from_vec(
                    bv.shape(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((gy, x), y)| C64::new(-gy.re * x.re / (y.re * y.re), 0.0))
                        .collect(),
                );
                self.accumulate(grads, *b, db);
            }
            Op::RsqrtOrZero(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), |gy, x| {
                        if x.re > 0.0 {
                            C64::new(-0.5 * gy.re * x.re.powf(-1.5), 0.0)
                        } else {
                            ZERO
                        }
                    }),
                );
            }
            Op::LeakyRelu(a, slope) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), |gy, z| {
                        C64::new(
                            gy.re * leaky_slope(z.re, *slope),
                            gy.im * leaky_slope(z.im, *slope),
                        )
                    }),
                );
            }
        }
    }
}

/// Analytic-vs-central-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max_i |numeric_i|` over every real
    /// coordinate of every parameter.
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks `dL/dRe p` and `dL/dIm p` (recovered as `2 Re g`, `2 Im g` from the
/// conjugate cogradient `g`) against central differences with step `eps`.
/// `f` builds the loss on a fresh tape from the parameter leaves.
pub fn grad_check<F>(f: F, params: &[CTensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &leaves);
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (leaf, p) in leaves.iter().zip(params) {
        match grads.get(*leaf) {
            Some(g) => {
                for z in g.data() {
                    analytic.push(2.0 * z.re);
                    analytic.push(2.0 * z.im);
                }
            }
            None => analytic.extend(std::iter::repeat_n(0.0, 2 * p.len())),
        }
    }

    let eval = |ps: &[CTensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vars);
        t.value(l).data()[0].re
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<CTensor> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            for dir in [C64::new(eps, 0.0), C64::new(0.0, eps)] {
                let orig = work[pi].data()[ei];
                work[pi].data_mut()[ei] = orig + dir;
                let plus = eval(&work);
                work[pi].data_mut()[ei] = orig - dir;
                let minus = eval(&work);
                work[pi].data_mut()[ei] = orig;
                numeric.push((plus - minus) / (2.0 * eps));
            }
        }
    }
    let scale = numeric.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let max_rel_error = if scale > 0.0 { worst / scale } else { worst };
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::sample_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> CTensor {
        let mut rng = sample_rng(seed, 99);
        CTensor::from_fn(shape, |_| {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn rand_positive(shape: &[usize], seed: u64) -> CTensor {
        let mut rng = sample_rng(seed, 98);
        CTensor::from_fn(shape, |_| C64::new(rng.gen_range(0.5..2.0), 0.0))
    }

    #[test]
    fn abs2_gradient_is_the_value() {
        let mut t = Tape::new();
        let z = t.leaf(CTensor::scalar(C64::new(3.0, 4.0)));
        let y = t.abs2(z);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(z).unwrap().data()[0], C64::new(3.0, 4.0));
    }

    #[test]
    fn sum_of_abs2_gives_leaf_value() {
        let x = rand_tensor(&[2, 3], 1);
        let mut t = Tape::new();
        let z = t.leaf(x.clone());
        let a = t.abs2(z);
        let l = t.sum_all(a);
        let g = t.backward(l).unwrap();
        assert!(g.get(z).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn losses_accumulate_linearly() {
        let x = rand_tensor(&[4], 2);
        let mut t = Tape::new();
        let z = t.leaf(x.clone());
        let a = t.abs2(z);
        let l1 = t.sum_all(a);
        let s = t.scale(z, 2.0);
        let b = t.abs2(s);
        let l2 = t.sum_all(b);
        let l = t.add(l1, l2);
        let g = t.backward(l).unwrap();
        // |z|^2 + |2z|^2 = 5 |z|^2
        assert!(g.get(z).unwrap().max_abs_diff(&x.scale(5.0)) < 1e-14);
    }

    #[test]
    fn rejects_non_scalar_and_complex_losses() {
        let mut t = Tape::new();
        let z = t.leaf(rand_tensor(&[3], 3));
        assert!(t.backward(z).is_err());
        let s = t.sum_all(z);
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn real_inner_product_matches_differences() {
        let a = rand_tensor(&[5], 4);
        let b = rand_tensor(&[5], 5);
        // L = Re(a^H b) written as (|a+b|^2 - |a|^2 - |b|^2) / 2
        let check = grad_check(
            |t, p| {
                let s = t.add(p[0], p[1]);
                let sa = t.abs2(s);
                let aa = t.abs2(p[0]);
                let bb = t.abs2(p[1]);
                let x = t.sub(sa, aa);
                let y = t.sub(x, bb);
                let z = t.scale(y, 0.5);
                t.sum_all(z)
            },
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{}", check.max_rel_error);
        // dL/d(conj b) = a / 2, so (dL/dRe b, dL/dIm b) = (Re a, Im a)
        let db = &check.analytic[10..];
        for (i, z) in a.data().iter().enumerate() {
            assert_relative_eq!(db[2 * i], z.re, epsilon = 1e-14);
            assert_relative_eq!(db[2 * i + 1], z.im, epsilon = 1e-14);
        }
    }

    #[test]
    fn matmul_chain_matches_differences() {
        let a = rand_tensor(&[3, 3], 6);
        let b = rand_tensor(&[3, 3], 7);
        let check = grad_check(
            |t, p| {
                let c = t.matmul(p[0], p[1]);
                let tr = t.transpose(c);
                let d = t.matmul(tr, p[0]);
                let e = t.abs2(d);
                t.sum_all(e)
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{}", check.max_rel_error);
    }

    #[test]
    fn every_primitive_matches_differences() {
        let x = rand_tensor(&[2, 3, 4], 8);
        let y = rand_tensor(&[2, 3, 4], 9);
        let w = rand_tensor(&[5, 4], 10);
        let pos = rand_positive(&[2, 3, 1], 11);
        let check = grad_check(
            |t, p| {
                let m = t.mul(p[0], p[1]);
                let c = t.conj(m);
                let masked = t.mask(c, &[1.0, 0.0, 0.5, 1.0, 2.0, 0.0]);
                let s = t.sum_axes(masked, &[1]);
                let e = t.expand(s, &[2, 3, 4]);
                let r = t.leaky_relu(e, 0.1);
                let f = t.feature_map(r, p[2]);
                let ip = t.inner(f, f);
                let a = t.abs2(p[0]);
                let sa = t.sum_axes(a, &[2]);
                let pc = t.constant(pos.clone());
                let sp = t.mul(sa, pc);
                let q = t.add_const(sp, 0.3);
                let rs = t.rsqrt_or_zero(q);
                let ipr = t.abs2(ip);
                let ratio = t.div_real(ipr, q);
                let lg = t.log1p(ratio);
                let mix = t.mul(lg, rs);
                let sum = t.sum_all(mix);
                let neg = t.scale(sum, -0.7);
                let fl = t.reshape(f, &[6, 5]);
                let mm = t.matmul(fl, p[2]);
                let mm2 = t.abs2(mm);
                let extra = t.sum_all(mm2);
                let extra = t.scale(extra, 1e-2);
                t.add(neg, extra)
            },
            &[x, y, w],
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-5, "{}", check.max_rel_error);
    }

    #[test]
    fn quadratic_and_constant_losses() {
        let x = rand_tensor(&[3], 12);
        let check = grad_check(
            |t, p| {
                let a = t.abs2(p[0]);
                t.sum_all(a)
            },
            &[x.clone()],
            1e-4,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-9);
        let check = grad_check(
            |t, _| t.constant(CTensor::scalar(C64::new(2.0, 0.0))),
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(check.analytic.iter().all(|&g| g == 0.0));
        assert!(check.numeric.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn phase_rotation_rotates_gradient() {
        let x = rand_tensor(&[4], 13);
        let w = rand_tensor(&[4], 14);
        let loss = |t: &mut Tape, z: Var, w: Var| {
            let ip = t.inner(w, z);
            let a = t.abs2(ip);
            let l = t.log1p(a);
            t.sum_all(l)
        };
        let grad_at = |x: &CTensor| {
            let mut t = Tape::new();
            let z = t.leaf(x.clone());
            let wc = t.constant(w.clone());
            let l = loss(&mut t, z, wc);
            t.backward(l).unwrap().get(z).unwrap().clone()
        };
        let phase = C64::from_polar(1.0, 0.83);
        let g0 = grad_at(&x);
        let g1 = grad_at(&x.map(|z| z * phase));
        assert!(g1.max_abs_diff(&g0.map(|z| z * phase)) < 1e-14);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(rand_tensor(&[2], 15));
        let z = t.leaf(rand_tensor(&[2], 16));
        let m = t.mul(c, z);
        let a = t.abs2(m);
        let l = t.sum_all(a);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(z).is_some());
    }

    #[test]
    fn backward_is_reproducible() {
        let run = || {
            let mut t = Tape::new();
            let z = t.leaf(rand_tensor(&[3, 3], 17));
            let m = t.matmul(z, z);
            let a = t.abs2(m);
            let l = t.sum_all(a);
            t.backward(l).unwrap().get(z).unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn expand_and_sum_are_adjoint() {
        let mut t = Tape::new();
        let x = t.leaf(rand_tensor(&[2, 1, 3], 18));
        let e = t.expand(x, &[2, 4, 3]);
        assert_eq!(t.shape(e), &[2, 4, 3]);
        let s = t.sum_axes(e, &[1]);
        assert!(t.value(s).max_abs_diff(&t.value(x).scale(4.0)) < 1e-14);
        assert_relative_eq!(t.value(e).get(&[1, 3, 2]).re, t.value(x).get(&[1, 0, 2]).re);
    }
}
