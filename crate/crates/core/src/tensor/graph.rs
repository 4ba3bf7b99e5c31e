//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and the backward sweep is a single reverse pass. The
//! sweep visits nodes in a fixed order and every accumulation happens in that
//! order, which makes gradients bitwise reproducible for identical inputs.

use super::conv::{conv_forward, conv_input_adjoint, conv_kernel_grad, ConvGeometry, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Floor applied to `log` arguments.
const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, geom: ConvGeometry },
    ConvTranspose2d { input: usize, kernel: usize, geom: ConvGeometry },
    MatMul { a: usize, b: usize, vector_input: bool },
    BiasAdd { x: usize, bias: usize },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Upsample2x(usize),
    Reshape(usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Square(usize),
    Sum(usize),
    GatherRows { x: usize, rows: Vec<usize> },
    L2NormalizeRows(usize),
    GmmKl { mu: usize, logvar: usize, prior_mu: usize, prior_log_sigma: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// A recording of primitive operations and the values they produced.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&last, lead)) => (lead.iter().product(), last),
        None => (1, 1),
    }
}

fn check_finite<T: Real>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `v` into a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::conv(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let data = conv_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(&geom.output_shape(), data)?;
        Ok(self.binary(
            input,
            kernel,
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
        ))
    }

    /// Transposed convolution with kernel `[kh, kw, c_out, c_in]`: the
    /// input-adjoint of `conv2d` with the same kernel.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::transpose(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let data = conv_input_adjoint(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(&geom.input_shape(), data)?;
        Ok(self.binary(
            input,
            kernel,
            value,
            Op::ConvTranspose2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
        ))
    }

    /// `[N, n] x [n, m] -> [N, m]`; a rank-1 `[n]` input yields `[m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        let (rows, inner, vector_input) = match *ash {
            [n] => (1, n, true),
            [r, n] => (r, n, false),
            _ => return Err(Error::dim("matmul", format!("lhs must be rank 1 or 2, got {ash:?}"))),
        };
        let cols = match *bsh {
            [k, m] if k == inner => m,
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!("inner dimensions disagree: {ash:?} x {bsh:?}"),
                ))
            }
        };
        let mut out = vec![T::zero(); rows * cols];
        T::gemm(
            rows,
            inner,
            cols,
            T::one(),
            self.value(a).data(),
            (inner as isize, 1),
            self.value(b).data(),
            (cols as isize, 1),
            T::zero(),
            &mut out,
            (cols as isize, 1),
        );
        let shape: Vec<usize> = if vector_input { vec![cols] } else { vec![rows, cols] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.binary(a, b, value, Op::MatMul { a: a.0, b: b.0, vector_input }))
    }

    /// Adds `bias` (length = last extent of `x`) to every row of `x`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.value(x).shape());
        if self.value(bias).shape() != [c] {
            return Err(Error::dim(
                "bias_add",
                format!(
                    "bias {:?} does not match last extent of {:?}",
                    self.value(bias).shape(),
                    self.value(x).shape()
                ),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        Ok(self.binary(x, bias, value, Op::BiasAdd { x: x.0, bias: bias.0 }))
    }

    /// Affine layer `x W + b`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.bias_add(y, bias)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.unary(x, value, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(x, value, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.unary(x, value, Op::Exp(x.0))
    }

    /// Natural log with the argument clamped below at `1e-12`.
    pub fn log(&mut self, x: Var) -> Var {
        let floor = T::from_f64(LOG_FLOOR);
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.unary(x, value, Op::Log(x.0))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        check_finite("softmax", self.value(x))?;
        let mut value = self.value(x).clone();
        let (_, c) = rows_cols(value.shape());
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.unary(x, value, Op::Softmax(x.0)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        if value.data().iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::Numeric("log_softmax: non-finite input".into()));
        }
        let (_, c) = rows_cols(value.shape());
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.unary(x, value, Op::LogSoftmax(x.0)))
    }

    /// Nearest-neighbour 2x upsampling of an NHWC batch.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (n, h, w, c) = match *src.shape() {
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(Error::dim(
                    "upsample2x",
                    format!("expected [N,H,W,C], got {:?}", src.shape()),
                ))
            }
        };
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        let s = src.data();
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((b * h + y / 2) * w + xx / 2) * c;
                    let di = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&s[si..si + c]);
                }
            }
        }
        let value = Tensor::new(&[n, 2 * h, 2 * w, c], out)?;
        Ok(self.unary(x, value, Op::Upsample2x(x.0)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x.0)))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = match *src.shape() {
            [r, c] => (r, c),
            _ => return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", src.shape()))),
        };
        let s = src.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = s[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.unary(x, value, Op::Transpose(x.0)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.unary(x, value, Op::Scale(x.0, factor))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x.0))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x.0))
    }

    /// Sum of squares of all elements.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.sum(sq)
    }

    /// Rows of `x` (leading axis) in the order given; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.value(x).shape().first().copied().unwrap_or(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let value = self.value(x).select_rows(rows);
        Ok(self.unary(
            x,
            value,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let (_, c) = rows_cols(value.shape());
        for row in value.data_mut().chunks_mut(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() || !norm.is_finite() {
                return Err(Error::Domain("cannot normalize a zero-norm row".into()));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(self.unary(x, value, Op::L2NormalizeRows(x.0)))
    }

    /// Closed-form `KL(N(mu_n, diag exp(logvar_n)) || N(m_s, diag exp(2 l_s)))`
    /// for every pair of posterior row `n` and prior component `s`.
    ///
    /// Inputs are `mu, logvar: [N, dz]` and `prior_mu, prior_log_sigma:
    /// [S, dz]`; the result is `[N, S]`.
    pub fn gmm_gaussian_kl(
        &mut self,
        mu: Var,
        logvar: Var,
        prior_mu: Var,
        prior_log_sigma: Var,
    ) -> Result<Var> {
        let (n, dz) = match *self.value(mu).shape() {
            [n, d] => (n, d),
            ref s => return Err(Error::dim("gmm_gaussian_kl", format!("mu must be [N,dz], got {s:?}"))),
        };
        let s_count = match *self.value(prior_mu).shape() {
            [s, d] if d == dz => s,
            ref s => return Err(Error::dim("gmm_gaussian_kl", format!("prior means {s:?} vs dz {dz}"))),
        };
        if self.value(logvar).shape() != [n, dz] || self.value(prior_log_sigma).shape() != [s_count, dz] {
            return Err(Error::dim("gmm_gaussian_kl", "scale shapes disagree with means"));
        }
        let half = T::from_f64(0.5);
        let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
        let (pm, pls) = (self.value(prior_mu).data(), self.value(prior_log_sigma).data());
        let mut out = vec![T::zero(); n * s_count];
        for i in 0..n {
            for s in 0..s_count {
                let mut acc = T::zero();
                for d in 0..dz {
                    let var = lv[i * dz + d].exp();
                    let ls = pls[s * dz + d];
                    let pvar = (ls + ls).exp();
                    let diff = m[i * dz + d] - pm[s * dz + d];
                    acc += ls - half * lv[i * dz + d] + (var + diff * diff) / (pvar + pvar) - half;
                }
                out[i * s_count + s] = acc;
            }
        }
        let value = Tensor::new(&[n, s_count], out)?;
        let rg = [mu, logvar, prior_mu, prior_log_sigma]
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            Op::GmmKl {
                mu: mu.0,
                logvar: logvar.0,
                prior_mu: prior_mu.0,
                prior_log_sigma: prior_log_sigma.0,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    ///
    /// Every trainable leaf receives a gradient (zeros when unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }

        let leaf_grads = nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    let shape = node.value.shape();
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                    Some(Tensor::new(shape, data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], idx: usize, delta: Vec<T>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    idx: usize,
    f: impl FnOnce() -> Vec<T>,
) {
    if nodes[idx].requires_grad {
        let delta = f();
        accumulate(grads, nodes, idx, delta);
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[i].value;
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d { input, kernel, geom } => {
            let (input, kernel) = (*input, *kernel);
            accumulate_with(grads, nodes, input, || conv_input_adjoint(g, val(kernel).data(), geom));
            accumulate_with(grads, nodes, kernel, || conv_kernel_grad(val(input).data(), g, geom));
        }
        Op::ConvTranspose2d { input, kernel, geom } => {
            let (input, kernel) = (*input, *kernel);
            accumulate_with(grads, nodes, input, || conv_forward(g, val(kernel).data(), geom));
            accumulate_with(grads, nodes, kernel, || conv_kernel_grad(g, val(input).data(), geom));
        }
        Op::MatMul { a, b, vector_input } => {
            let (a, b) = (*a, *b);
            let bshape = val(b).shape();
            let (inner, cols) = (bshape[0], bshape[1]);
            let rows = if *vector_input { 1 } else { val(a).shape()[0] };
            accumulate_with(grads, nodes, a, || {
                let mut da = vec![T::zero(); rows * inner];
                T::gemm(
                    rows,
                    cols,
                    inner,
                    T::one(),
                    g,
                    (cols as isize, 1),
                    val(b).data(),
                    (1, cols as isize),
                    T::zero(),
                    &mut da,
                    (inner as isize, 1),
                );
                da
            });
            accumulate_with(grads, nodes, b, || {
                let mut db = vec![T::zero(); inner * cols];
                T::gemm(
                    inner,
                    rows,
                    cols,
                    T::one(),
                    val(a).data(),
                    (1, inner as isize),
                    g,
                    (cols as isize, 1),
                    T::zero(),
                    &mut db,
                    (cols as isize, 1),
                );
                db
            });
        }
        Op::BiasAdd { x, bias } => {
            let (x, bias) = (*x, *bias);
            accumulate_with(grads, nodes, x, || g.to_vec());
            accumulate_with(grads, nodes, bias, || {
                let c = val(bias).len();
                let mut db = vec![T::zero(); c];
                for row in g.chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                db
            });
        }
        Op::Relu(x) => accumulate_with(grads, nodes, *x, || {
            g.iter()
                .zip(out.data())
                .map(|(&gg, &y)| if y > T::zero() { gg } else { T::zero() })
                .collect()
        }),
        Op::Sigmoid(x) => accumulate_with(grads, nodes, *x, || {
            g.iter()
                .zip(out.data())
                .map(|(&gg, &y)| gg * y * (T::one() - y))
                .collect()
        }),
        Op::Exp(x) => accumulate_with(grads, nodes, *x, || {
            g.iter().zip(out.data()).map(|(&gg, &y)| gg * y).collect()
        }),
        Op::Log(x) => {
            let x = *x;
            let floor = T::from_f64(LOG_FLOOR);
            accumulate_with(grads, nodes, x, || {
                g.iter()
                    .zip(val(x).data())
                    .map(|(&gg, &v)| if v > floor { gg / v } else { T::zero() })
                    .collect()
            })
        }
        Op::Softmax(x) => accumulate_with(grads, nodes, *x, || {
            let (_, c) = rows_cols(out.shape());
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks(c).zip(out.data().chunks(c)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                dx.extend(grow.iter().zip(yrow).map(|(&gg, &y)| y * (gg - dot)));
            }
            dx
        }),
        Op::LogSoftmax(x) => accumulate_with(grads, nodes, *x, || {
            let (_, c) = rows_cols(out.shape());
            let mut dx = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks(c).zip(out.data().chunks(c)) {
                let total: T = grow.iter().copied().sum();
                dx.extend(grow.iter().zip(yrow).map(|(&gg, &ly)| gg - ly.exp() * total));
            }
            dx
        }),
        Op::Upsample2x(x) => {
            let x = *x;
            accumulate_with(grads, nodes, x, || {
                let [n, h, w, c] = <[usize; 4]>::try_from(val(x).shape()).expect("rank 4");
                let mut dx = vec![T::zero(); n * h * w * c];
                for b in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let si = ((b * 2 * h + y) * 2 * w + xx) * c;
                            let di = ((b * h + y / 2) * w + xx / 2) * c;
                            for k in 0..c {
                                dx[di + k] += g[si + k];
                            }
                        }
                    }
                }
                dx
            })
        }
        Op::Reshape(x) => accumulate_with(grads, nodes, *x, || g.to_vec()),
        Op::Transpose(x) => accumulate_with(grads, nodes, *x, || {
            // out is [c, r]; the gradient goes back to [r, c].
            let (c, r) = (out.shape()[0], out.shape()[1]);
            let mut dx = vec![T::zero(); r * c];
            for j in 0..c {
                for i in 0..r {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            dx
        }),
        Op::Add(a, b) => {
            accumulate_with(grads, nodes, *a, || g.to_vec());
            accumulate_with(grads, nodes, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate_with(grads, nodes, *a, || g.to_vec());
            accumulate_with(grads, nodes, *b, || g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate_with(grads, nodes, a, || {
                g.iter().zip(val(b).data()).map(|(&gg, &v)| gg * v).collect()
            });
            accumulate_with(grads, nodes, b, || {
                g.iter().zip(val(a).data()).map(|(&gg, &v)| gg * v).collect()
            });
        }
        Op::Scale(x, factor) => {
            let f = T::from_f64(*factor);
            accumulate_with(grads, nodes, *x, || g.iter().map(|&v| v * f).collect())
        }
        Op::Square(x) => {
            let x = *x;
            let two = T::from_f64(2.0);
            accumulate_with(grads, nodes, x, || {
                g.iter().zip(val(x).data()).map(|(&gg, &v)| two * v * gg).collect()
            })
        }
        Op::Sum(x) => {
            let x = *x;
            accumulate_with(grads, nodes, x, || vec![g[0]; val(x).len()])
        }
        Op::GatherRows { x, rows } => {
            let x = *x;
            accumulate_with(grads, nodes, x, || {
                let src = val(x);
                let row_len: usize = src.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); src.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..row_len {
                        dx[r * row_len + j] += g[k * row_len + j];
                    }
                }
                dx
            })
        }
        Op::L2NormalizeRows(x) => {
            let x = *x;
            accumulate_with(grads, nodes, x, || {
                let (_, c) = rows_cols(out.shape());
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), xrow) in g.chunks(c).zip(out.data().chunks(c)).zip(val(x).data().chunks(c)) {
                    let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gg, &y)| (gg - y * dot) / norm));
                }
                dx
            })
        }
        Op::GmmKl { mu, logvar, prior_mu, prior_log_sigma } => {
            let (mu, logvar, pmu, pls) = (*mu, *logvar, *prior_mu, *prior_log_sigma);
            let dz = val(mu).shape()[1];
            let n = val(mu).shape()[0];
            let s_count = val(pmu).shape()[0];
            let (m, lv, pm, ps) = (val(mu).data(), val(logvar).data(), val(pmu).data(), val(pls).data());
            let half = T::from_f64(0.5);
            let mut dmu = vec![T::zero(); n * dz];
            let mut dlv = vec![T::zero(); n * dz];
            let mut dpm = vec![T::zero(); s_count * dz];
            let mut dps = vec![T::zero(); s_count * dz];
            for i in 0..n {
                for s in 0..s_count {
                    let gs = g[i * s_count + s];
                    for d in 0..dz {
                        let var = lv[i * dz + d].exp();
                        let ls = ps[s * dz + d];
                        let inv_pvar = (-(ls + ls)).exp();
                        let diff = m[i * dz + d] - pm[s * dz + d];
                        let dm = gs * diff * inv_pvar;
                        dmu[i * dz + d] += dm;
                        dpm[s * dz + d] -= dm;
                        dlv[i * dz + d] += gs * half * (var * inv_pvar - T::one());
                        dps[s * dz + d] += gs * (T::one() - (var + diff * diff) * inv_pvar);
                    }
                }
            }
            accumulate(grads, nodes, mu, dmu);
            accumulate(grads, nodes, logvar, dlv);
            accumulate(grads, nodes, pmu, dpm);
            accumulate(grads, nodes, pls, dps);
        }
    }
}

/// Gradients of trainable leaves, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves a gradient out; panics if `v` was not a trainable leaf.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .expect("gradient requested for a non-trainable node")
    }
}
