//! Reverse-mode computation record.
//!
//! Nodes are appended in evaluation order, so the node index is a
//! topological order and the backward sweep walks it in reverse. The tape is
//! generic over the scalar: over [`Dual`](super::Dual) the sweep computes
//! gradients together with their derivative with respect to the meta scalar.

use std::collections::HashMap;

use super::dual::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var },
    BiasAdd(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Gather(Var, Vec<usize>),
    StopGradient,
    Reshape(Var),
    SliceRows(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd(..) => "bias_add",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Gather(..) => "gather",
            Op::StopGradient => "stop_gradient",
            Op::Reshape(_) => "reshape",
            Op::SliceRows(..) => "slice_rows",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    /// Whether a parameter is reachable upstream of this node.
    tracked: bool,
}

/// Per-parameter gradients returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a parameter leaf; `None` if `var` is not a parameter.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }
}

/// Records primitive applications so their adjoints can be replayed.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    // returns (softmax, log_softmax) over the last axis of a matrix
    let (rows, cols) = x.as_matrix()?;
    let mut p = Vec::with_capacity(rows * cols);
    let mut lp = Vec::with_capacity(rows * cols);
    for r in x.data().chunks(cols) {
        let m = r.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
        let m = T::from_f64(m);
        let shifted: Vec<T> = r.iter().map(|&v| v - m).collect();
        let z = shifted.iter().fold(T::zero(), |acc, &s| acc + s.exp());
        let lz = z.ln();
        for &s in &shifted {
            let l = s - lz;
            lp.push(l);
            p.push(l.exp());
        }
    }
    Ok((
        Tensor::new(vec![rows, cols], p)?,
        Tensor::new(vec![rows, cols], lp)?,
    ))
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    o: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize]) -> Result<Self> {
        match (input, kernel) {
            ([n, h, w, c], [kh, kw, kc, o]) if c == kc && kh % 2 == 1 && kw % 2 == 1 => {
                Ok(ConvGeom {
                    n: *n,
                    h: *h,
                    w: *w,
                    c: *c,
                    kh: *kh,
                    kw: *kw,
                    o: *o,
                })
            }
            _ => Err(Error::Shape(format!(
                "conv2d expects input [N,H,W,C] and odd kernel [kh,kw,C,O], got {input:?} and {kernel:?}"
            ))),
        }
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn positions(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Visits (column row, patch offset, input offset) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for n in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    let row = (n * self.h + y) * self.w + x;
                    for dy in 0..self.kh {
                        let iy = y as isize + dy as isize - ph;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.kw {
                            let ix = x as isize + dx as isize - pw;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((n * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let dst = (dy * self.kw + dx) * self.c;
                            f(row, dst, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.positions() * patch];
        let c = self.c;
        self.for_each_tap(|row, dst, src| {
            cols[row * patch + dst..row * patch + dst + c].copy_from_slice(&input[src..src + c]);
        });
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut out = vec![T::zero(); self.n * self.h * self.w * self.c];
        let c = self.c;
        self.for_each_tap(|row, dst, src| {
            for i in 0..c {
                out[src + i] += cols[row * patch + dst + i];
            }
        });
        out
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {}",
                op.name()
            )));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Param, true)
    }

    /// Leaf that receives no adjoint. Its tangent, if any, still propagates.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// 2-D convolution, NHWC input, `[kh, kw, C, O]` kernel, stride 1, "same"
    /// zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let g = ConvGeom::new(self.value(input).shape(), self.value(kernel).shape())?;
        let cols = g.im2col(self.value(input).data());
        let k = self.value(kernel).data();
        let patch = g.patch() as isize;
        let out = T::gemm(
            g.positions(),
            g.patch(),
            g.o,
            &cols,
            (patch, 1),
            k,
            (g.o as isize, 1),
        );
        let v = Tensor::new(vec![g.n, g.h, g.w, g.o], out)?;
        let t = self.tracked(input) || self.tracked(kernel);
        self.push(v, Op::Conv2d { input, kernel }, t)
    }

    /// Adds `bias` (rank 1) along the last axis of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let m = *xv.shape().last().unwrap_or(&1);
        if bv.shape() != [m] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(bv.data()).for_each(|(a, &b)| *a += b);
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let t = self.tracked(x) || self.tracked(bias);
        self.push(v, Op::BiasAdd(x, bias), t)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self
            .value(x)
            .map(|a| if a.value() > 0.0 { a } else { T::zero() });
        let t = self.tracked(x);
        self.push(v, Op::Relu(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        let t = self.tracked(x);
        self.push(v, Op::Sigmoid(x), t)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (p, _) = softmax_rows(self.value(x))?;
        let t = self.tracked(x);
        self.push(p, Op::Softmax(x), t)
    }

    /// Log-softmax over the last axis of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, lp) = softmax_rows(self.value(x))?;
        let t = self.tracked(x);
        self.push(lp, Op::LogSoftmax(x), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a.scale(c));
        let t = self.tracked(x);
        self.push(v, Op::Scale(x, c), t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let t = self.tracked(x);
        self.push(v, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum().scale(1.0 / xv.len() as f64));
        let t = self.tracked(x);
        self.push(v, Op::Mean(x), t)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        let t = self.tracked(x);
        self.push(v, Op::Square(x), t)
    }

    /// Picks `x[i, index[i]]` from a matrix.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.as_matrix()?;
        if index.len() != rows {
            return Err(Error::Shape(format!(
                "gather: {} indices for {rows} rows",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::Shape(format!("gather index {bad} >= {cols}")));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| xv.data()[r * cols + i])
            .collect();
        let v = Tensor::vector(data);
        let t = self.tracked(x);
        self.push(v, Op::Gather(x, index.to_vec()), t)
    }

    /// Identity on values; blocks adjoints and tangents.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).detach();
        self.push(v, Op::StopGradient, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let t = self.tracked(x);
        self.push(v, Op::Reshape(x), t)
    }

    /// Rows `start..start+count` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        let lead = *xv.shape().first().unwrap_or(&0);
        if count == 0 || start + count > lead {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of leading extent {lead}",
                start + count
            )));
        }
        let stride = xv.len() / lead;
        let mut shape = xv.shape().to_vec();
        shape[0] = count;
        let data = xv.data()[start * stride..(start + count) * stride].to_vec();
        let v = Tensor::new(shape, data)?;
        let t = self.tracked(x);
        self.push(v, Op::SliceRows(x, start), t)
    }

    /// Replays adjoints from the scalar `loss` back to every parameter leaf.
    /// Parameters with no path to `loss` receive exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State(
                "computation record already consumed by a backward pass".into(),
            ));
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut grads = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Param => {
                    grads.insert(Var(i), g);
                }
                Op::Constant | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.as_matrix()?;
                    let n = bv.as_matrix()?.1;
                    if self.tracked(*a) {
                        let d = T::gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize));
                        accumulate(&mut adj, *a, Tensor::new(vec![m, k], d)?)?;
                    }
                    if self.tracked(*b) {
                        let d = T::gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1));
                        accumulate(&mut adj, *b, Tensor::new(vec![k, n], d)?)?;
                    }
                }
                Op::Conv2d { input, kernel } => {
                    let xv = self.value(*input);
                    let kv = self.value(*kernel);
                    let geo = ConvGeom::new(xv.shape(), kv.shape())?;
                    let (p, o, np) = (geo.patch(), geo.o, geo.positions());
                    if self.tracked(*kernel) {
                        let cols = geo.im2col(xv.data());
                        let d = T::gemm(p, np, o, &cols, (1, p as isize), g.data(), (o as isize, 1));
                        accumulate(&mut adj, *kernel, Tensor::new(kv.shape().to_vec(), d)?)?;
                    }
                    if self.tracked(*input) {
                        let dcols =
                            T::gemm(np, o, p, g.data(), (o as isize, 1), kv.data(), (1, o as isize));
                        let d = geo.col2im(&dcols);
                        accumulate(&mut adj, *input, Tensor::new(xv.shape().to_vec(), d)?)?;
                    }
                }
                Op::BiasAdd(x, b) => {
                    if self.tracked(*b) {
                        let m = self.value(*b).len();
                        let mut db = vec![T::zero(); m];
                        for row in g.data().chunks(m) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                        accumulate(&mut adj, *b, Tensor::vector(db))?;
                    }
                    if self.tracked(*x) {
                        accumulate(&mut adj, *x, g)?;
                    }
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| {
                        if xi.value() > 0.0 {
                            gi
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut adj, *x, d)?;
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * y * (T::one() - y))?;
                    accumulate(&mut adj, *x, d)?;
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let cols = p.as_matrix()?.1;
                    let mut d = Vec::with_capacity(p.len());
                    for (pr, gr) in p.data().chunks(cols).zip(g.data().chunks(cols)) {
                        let s = pr.iter().zip(gr).fold(T::zero(), |acc, (&pi, &gi)| acc + pi * gi);
                        d.extend(pr.iter().zip(gr).map(|(&pi, &gi)| pi * (gi - s)));
                    }
                    accumulate(&mut adj, *x, Tensor::new(p.shape().to_vec(), d)?)?;
                }
                Op::LogSoftmax(x) => {
                    let lp = &node.value;
                    let cols = lp.as_matrix()?.1;
                    let mut d = Vec::with_capacity(lp.len());
                    for (lr, gr) in lp.data().chunks(cols).zip(g.data().chunks(cols)) {
                        let s = gr.iter().fold(T::zero(), |acc, &gi| acc + gi);
                        d.extend(lr.iter().zip(gr).map(|(&li, &gi)| gi - li.exp() * s));
                    }
                    accumulate(&mut adj, *x, Tensor::new(lp.shape().to_vec(), d)?)?;
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g.map(|x| -x))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        let d = g.zip_map(self.value(*b), |gi, bi| gi * bi)?;
                        accumulate(&mut adj, *a, d)?;
                    }
                    if self.tracked(*b) {
                        let d = g.zip_map(self.value(*a), |gi, ai| gi * ai)?;
                        accumulate(&mut adj, *b, d)?;
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut adj, *x, g.map(|gi| gi.scale(c)))?;
                }
                Op::Sum(x) => {
                    let gv = g.item()?;
                    accumulate(&mut adj, *x, Tensor::full(self.value(*x).shape(), gv))?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gv = g.item()?.scale(1.0 / xv.len() as f64);
                    accumulate(&mut adj, *x, Tensor::full(xv.shape(), gv))?;
                }
                Op::Square(x) => {
                    let d = g.zip_map(self.value(*x), |gi, xi| (gi * xi).scale(2.0))?;
                    accumulate(&mut adj, *x, d)?;
                }
                Op::Gather(x, index) => {
                    let xv = self.value(*x);
                    let cols = xv.as_matrix()?.1;
                    let mut d = Tensor::zeros(xv.shape());
                    for (r, (&i, &gi)) in index.iter().zip(g.data()).enumerate() {
                        d.data_mut()[r * cols + i] += gi;
                    }
                    accumulate(&mut adj, *x, d)?;
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut adj, *x, g.reshape(&shape)?)?;
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let stride = xv.len() / xv.shape()[0];
                    let mut d = Tensor::zeros(xv.shape());
                    d.data_mut()[start * stride..start * stride + g.len()]
                        .copy_from_slice(g.data());
                    accumulate(&mut adj, *x, d)?;
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        for (v, g) in &grads {
            if !g.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for node {}",
                    v.0
                )));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Logistic function, evaluated stably on either side of zero.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x.value() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
