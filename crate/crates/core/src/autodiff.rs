//! A small reverse-mode tape over dense `ndarray` tensors.
//!
//! Every operation records its inputs and any saved intermediates; values are
//! kept in standard (row-major) layout. Binary elementwise ops broadcast with
//! numpy rules and reduce gradients back to the operand shapes.

use std::collections::{HashMap, HashSet};

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice, Zip};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Silu(Var),
    Clamp(Var, F, F),
    SumAll(Var),
    SumAxis(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var, usize),
    Conv2d { x: Var, w: Var, pad: usize, cols: Array2<F> },
    AvgPool2(Var),
    Upsample2(Var),
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
}

/// Gradients of a scalar with respect to the parameters it touched.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    params: HashMap<ParamId, ArrayD<F>>,
    vars: HashMap<Var, ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&ArrayD<F>> {
        self.vars.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<F>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_to<F: Scalar>(g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    let mut r = g;
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn binary<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> Result<ArrayD<F>> {
    if a.shape() == b.shape() {
        return Ok(Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a.broadcast(IxDyn(&shape)).expect("broadcastable");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcastable");
    Ok(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-D operand")
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn im2col<F: Scalar>(x: &ArrayD<F>, k: usize, pad: usize) -> (Array2<F>, usize, usize) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let xs = x.as_slice().expect("standard layout");
    let ncols = n * ho * wo;
    let mut cols = vec![F::zero(); c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec((c * k * k, ncols), cols).expect("im2col shape"),
        ho,
        wo,
    )
}

fn col2im<F: Scalar>(cols: &Array2<F>, shape: &[usize], k: usize, pad: usize) -> ArrayD<F> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let ncols = n * ho * wo;
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); n * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let dst = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).expect("col2im shape")
}

fn softmax_axis<F: Scalar>(x: &ArrayD<F>, axis: usize) -> ArrayD<F> {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let m = lane.iter().copied().fold(F::neg_infinity(), F::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    y
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> F {
        *self.value(v).iter().next().expect("nonempty")
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::of_usize(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, F::one() / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(v, Op::SumAxis(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = F::of_usize(self.shape(a)[axis]);
        let s = self.sum_axis(a, axis);
        self.scale(s, F::one() / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let v = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("reshape {:?} to {shape:?}", src.shape())));
        }
        let v = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        if perm.len() != self.shape(a).len() {
            return Err(Error::Shape(format!(
                "permutation {perm:?} for rank {}",
                self.shape(a).len()
            )));
        }
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        Ok(self.push(v, Op::Permute(a, perm.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(axis), &views)
            .map_err(|e| Error::Shape(format!("concat: {e}")))?
            .as_standard_layout()
            .into_owned();
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    /// Rows of a 2-D node selected by index (with repetition).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.ndim() != 2 {
            return Err(Error::Shape(format!("gather_rows on {:?}", src.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.shape()[0]) {
            return Err(Error::Shape(format!("row {bad} of {:?}", src.shape())));
        }
        let v = as2(src).select(Axis(0), idx).into_dyn();
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let v = softmax_axis(self.value(a), axis);
        self.push(v, Op::Softmax(a, axis))
    }

    /// Stride-1 convolution, `x: [N,C,H,W]`, `w: [O,C,k,k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let (o, k) = (ws[0], ws[2]);
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::Shape(format!("kernel {k} larger than padded input {xs:?}")));
        }
        let (cols, ho, wo) = im2col(self.value(x), k, pad);
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((o, ws[1] * k * k))
            .expect("weight layout");
        let out = w2.dot(&cols);
        let v = out
            .into_shape_with_order((o, xs[0], ho, wo))
            .expect("conv output")
            .permuted_axes((1, 0, 2, 3))
            .as_standard_layout()
            .into_owned()
            .into_dyn();
        Ok(self.push(v, Op::Conv2d { x, w, pad, cols }))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 on {s:?}")));
        }
        let src = self.value(a);
        let quarter = F::of(0.25);
        let v = ArrayD::from_shape_fn(IxDyn(&[s[0], s[1], s[2] / 2, s[3] / 2]), |i| {
            let (n, c, y, x) = (i[0], i[1], 2 * i[2], 2 * i[3]);
            (src[[n, c, y, x]] + src[[n, c, y, x + 1]] + src[[n, c, y + 1, x]]
                + src[[n, c, y + 1, x + 1]])
                * quarter
        });
        Ok(self.push(v, Op::AvgPool2(a)))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2 on {s:?}")));
        }
        let src = self.value(a);
        let v = ArrayD::from_shape_fn(IxDyn(&[s[0], s[1], s[2] * 2, s[3] * 2]), |i| {
            src[[i[0], i[1], i[2] / 2, i[3] / 2]]
        });
        Ok(self.push(v, Op::Upsample2(a)))
    }

    pub fn backward(&self, loss: Var) -> Gradients<F> {
        self.backward_with(loss, &[])
    }

    /// Like [`backward`](Self::backward), additionally retaining the gradient
    /// of each node in `keep`.
    pub fn backward_with(&self, loss: Var, keep: &[Var]) -> Gradients<F> {
        let keep: HashSet<Var> = keep.iter().copied().collect();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), F::one()));
        let mut out = Gradients::default();

        fn acc<F: Scalar>(grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if keep.contains(&Var(i)) {
                out.vars.insert(Var(i), g.clone());
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Add(a, b) => {
                    let ga = reduce_to(g.clone(), self.shape(*a));
                    let gb = reduce_to(g, self.shape(*b));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(g.clone(), self.shape(*a));
                    let gb = reduce_to(g.mapv(|v| -v), self.shape(*b));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = binary(&g, self.value(*b), |x, y| x * y).expect("forward shapes");
                    let gb = binary(&g, self.value(*a), |x, y| x * y).expect("forward shapes");
                    acc(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    acc(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                }
                Op::Div(a, b) => {
                    let ga = binary(&g, self.value(*b), |x, y| x / y).expect("forward shapes");
                    // d(a/b)/db = -(a/b)/b
                    let q = binary(&node.value, self.value(*b), |x, y| -x / y)
                        .expect("forward shapes");
                    let gb = binary(&g, &q, |x, y| x * y).expect("forward shapes");
                    acc(&mut grads, *a, reduce_to(ga, self.shape(*a)));
                    acc(&mut grads, *b, reduce_to(gb, self.shape(*b)));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::Exp(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g / x);
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let half = F::of(0.5);
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * half / y);
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = F::of(2.0);
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * two * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * s * (F::one() + x * (F::one() - s))
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            F::zero()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let s = *g.iter().next().expect("scalar grad");
                    acc(&mut grads, *a, ArrayD::from_elem(self.value(*a).raw_dim(), s));
                }
                Op::SumAxis(a) => {
                    let ga = g
                        .broadcast(self.value(*a).raw_dim())
                        .expect("kept axis")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    let ga = g2.dot(&as2(self.value(*b)).t()).into_dyn();
                    let gb = as2(self.value(*a)).t().dot(&g2).into_dyn();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .into_shape_with_order(self.value(*a).raw_dim())
                        .expect("same element count");
                    acc(&mut grads, *a, ga);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let ga = g
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .as_standard_layout()
                            .into_owned();
                        acc(&mut grads, p, piece);
                        start += len;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = ArrayD::zeros(self.value(*a).raw_dim());
                    {
                        let g2 = as2(&g);
                        let mut ga2 = ga
                            .view_mut()
                            .into_dimensionality::<Ix2>()
                            .expect("2-D source");
                        for (r, &src) in idx.iter().enumerate() {
                            let mut row = ga2.row_mut(src);
                            row += &g2.row(r);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a, axis) => {
                    let gy = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y);
                    let s = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    let s = s.broadcast(g.raw_dim()).expect("kept axis");
                    let ga = Zip::from(&gy)
                        .and(&node.value)
                        .and(&s)
                        .map_collect(|&gy, &y, &s| gy - y * s);
                    acc(&mut grads, *a, ga);
                }
                Op::Conv2d { x, w, pad, cols } => {
                    let ws = self.shape(*w).to_vec();
                    let (o, k) = (ws[0], ws[2]);
                    let gs = g.shape().to_vec();
                    let g2 = g
                        .view()
                        .permuted_axes(IxDyn(&[1, 0, 2, 3]))
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((o, gs[0] * gs[2] * gs[3]))
                        .expect("grad layout");
                    let gw = g2
                        .dot(&cols.t())
                        .into_shape_with_order(IxDyn(&ws))
                        .expect("weight grad");
                    let w2 = self
                        .value(*w)
                        .view()
                        .into_shape_with_order((o, ws[1] * k * k))
                        .expect("weight layout");
                    let gcols = w2.t().dot(&g2);
                    let gx = col2im(&gcols, self.shape(*x), k, *pad);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *x, gx);
                }
                Op::AvgPool2(a) => {
                    let quarter = F::of(0.25);
                    let ga = ArrayD::from_shape_fn(self.value(*a).raw_dim(), |i| {
                        g[[i[0], i[1], i[2] / 2, i[3] / 2]] * quarter
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Upsample2(a) => {
                    let s = self.shape(*a);
                    let ga = ArrayD::from_shape_fn(IxDyn(s), |i| {
                        let (n, c, y, x) = (i[0], i[1], 2 * i[2], 2 * i[3]);
                        g[[n, c, y, x]] + g[[n, c, y, x + 1]] + g[[n, c, y + 1, x]]
                            + g[[n, c, y + 1, x + 1]]
                    });
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}
