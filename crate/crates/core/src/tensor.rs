//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation as it is applied; node ids are issued
//! in creation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep over it. Graphs are cheap to
//! build and are rebuilt on every training step.
//!
//! Only bias-add broadcasts. Everything else requires exactly matching shapes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::Range;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;

/// Floating-point element type usable by the graph (f32 for training, f64 for
/// gradient checks).
pub trait Element: Float + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    /// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows × cols) view; stored transposed when `trans`
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserted lengths cover every index reachable
                // through the given dimensions and strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a 2-D tensor; 1-D tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.dims2().expect("row() on a matrix");
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Silu(Var),
    Relu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    Sum(Var),
    Mse(Var, Var),
    Gate {
        x: Var,
        keep: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Each op validates shapes and returns a [`Var`] handle.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (br, bc) = self.dims2(b)?;
        let (kb, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_trans,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                b_trans,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`. This is how linear layers with
    /// `[out, in]` weights are applied.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct: T = t(c);
        let value = self.map(a, |x| x * ct);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `x[i, :] + bias` for every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(bias).numel() != c {
            return Err(Error::shape(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let xs = self.value(x).data();
        let bs = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(xs[i * c..(i + 1) * c].iter().zip(bs).map(|(&a, &b)| a + b));
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Row-wise `x / rms(x) * gain` with epsilon [`RMS_EPS`].
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(gain).numel() != c {
            return Err(Error::shape(
                "rms_norm",
                self.value(x).shape(),
                self.value(gain).shape(),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = Vec::with_capacity(r * c);
        let mut inv_rms = Vec::with_capacity(r);
        for row in xs.chunks(c.max(1)).take(r) {
            let ms: f64 = row.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            let inv_t: T = t(inv);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| v * inv_t * gv));
            inv_rms.push(inv);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Mean token cross-entropy of `logits: m×V` against `targets` (length m).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims2(logits)?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                self.value(logits).shape(),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&tg| tg >= v) {
            return Err(Error::contract(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &tg) in data.chunks(v).zip(targets) {
            total -= log_softmax_at(row, tg);
        }
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        let value = Tensor::scalar(t(loss));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Gather rows of `table: V×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::shape(
                "slice",
                self.value(x).shape(),
                &[rows.start, rows.end, cols.start, cols.end],
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        let value = Tensor::new(vec![rows.len(), cols.len()], out)?;
        Ok(self.push(value, Op::Slice { x, rows, cols }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (_, c) = self.dims2(first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sets entries above the diagonal of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if r != c {
            return Err(Error::shape("causal_mask", &[r, c], &[c, c]));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = T::neg_infinity();
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::CausalMask(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let n = self.value(pred).numel().max(1);
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &q)| (p - q).to_f64().unwrap().powi(2))
            .sum();
        let value = Tensor::scalar(t(s / n as f64));
        Ok(self.push(value, Op::Mse(pred, target), &[pred, target]))
    }

    /// Passes through entries where `keep` is set and zeroes the rest; the
    /// mask is treated as a constant by the backward pass.
    pub fn gate(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("gate", self.value(x).shape(), &[keep.len()]));
        }
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src
                .data
                .iter()
                .zip(&keep)
                .map(|(&v, &k)| if k { v } else { T::zero() })
                .collect(),
        };
        Ok(self.push(value, Op::Gate { x, keep }, &[x]))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                b_trans,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    // dA = dC · op(B)ᵀ
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        T::gemm(m, n, k, gout, false, bv, !b_trans, ga, true)
                    });
                }
                if self.wants(b) {
                    if b_trans {
                        // B is n×k: dB = dCᵀ · A
                        accumulate(&mut grads[b.0], n * k, |gb| {
                            T::gemm(n, m, k, gout, true, av, false, gb, true)
                        });
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        accumulate(&mut grads[b.0], k * n, |gb| {
                            T::gemm(k, m, n, av, true, gout, false, gb, true)
                        });
                    }
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (r, c) = self.dims2(*x).unwrap();
                    accumulate(&mut grads[x.0], r * c, |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] = gx[i * c + j] + gout[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], gout.len(), |g| add_into(g, gout));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gout.len(), |g| add_into(g, gout));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gout.len(), |g| {
                        g.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g - d)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], gout.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + gout[i] * bv[i];
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], gout.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + gout[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let ct: T = t(*c);
                    accumulate(&mut grads[x.0], gout.len(), |g| {
                        g.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d * ct)
                    });
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], gout.len(), |g| add_into(g, gout));
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    accumulate(&mut grads[bias.0], c, |g| {
                        for row in gout.chunks(c) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[x.0], gout.len(), |g| {
                        for i in 0..g.len() {
                            let s = sigmoid(xv[i]);
                            let d = s * (T::one() + xv[i] * (T::one() - s));
                            g[i] = g[i] + gout[i] * d;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[x.0], gout.len(), |g| {
                        for i in 0..g.len() {
                            if xv[i] > T::zero() {
                                g[i] = g[i] + gout[i];
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (_, c) = node.value.dims2().unwrap();
                    accumulate(&mut grads[x.0], gout.len(), |g| {
                        for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                            let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                            for j in 0..c {
                                gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let c = gv.len();
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], c, |gg| {
                        for ((xr, dr), &inv) in xv.chunks(c).zip(gout.chunks(c)).zip(inv_rms) {
                            let inv: T = t(inv);
                            for j in 0..c {
                                gg[j] = gg[j] + dr[j] * xr[j] * inv;
                            }
                        }
                    });
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xv.len(), |gx| {
                        for (((gr, xr), dr), &inv) in gx
                            .chunks_mut(c)
                            .zip(xv.chunks(c))
                            .zip(gout.chunks(c))
                            .zip(inv_rms)
                        {
                            let inv: T = t(inv);
                            let n: T = t(c as f64);
                            let dot: T = (0..c).map(|j| dr[j] * gv[j] * xr[j] * inv).sum();
                            for j in 0..c {
                                let xh = xr[j] * inv;
                                gr[j] = gr[j] + inv * (dr[j] * gv[j] - xh * dot / n);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits).data();
                    let (m, v) = self.dims2(*logits).unwrap();
                    let scale = gout[0] / t(m.max(1) as f64);
                    accumulate(&mut grads[logits.0], m * v, |g| {
                        let mut probs = vec![T::zero(); v];
                        for ((gr, lr), &tg) in g.chunks_mut(v).zip(lv.chunks(v)).zip(targets) {
                            probs.copy_from_slice(lr);
                            softmax_in_place(&mut probs);
                            for j in 0..v {
                                let onehot = if j == tg { T::one() } else { T::zero() };
                                gr[j] = gr[j] + (probs[j] - onehot) * scale;
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let (v, d) = self.dims2(*table).unwrap();
                    accumulate(&mut grads[table.0], v * d, |g| {
                        for (row, &i) in gout.chunks(d).zip(ids) {
                            add_into(&mut g[i * d..(i + 1) * d], row);
                        }
                    });
                }
            }
            Op::Slice { x, rows, cols } => {
                if self.wants(*x) {
                    let (r, c) = self.dims2(*x).unwrap();
                    let w = cols.len();
                    accumulate(&mut grads[x.0], r * c, |g| {
                        for (k, i) in rows.clone().enumerate() {
                            add_into(
                                &mut g[i * c + cols.start..i * c + cols.end],
                                &gout[k * w..(k + 1) * w],
                            );
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], n, |g| {
                            add_into(g, &gout[offset..offset + n])
                        });
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.dims2(p).unwrap();
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], r * w, |g| {
                            for i in 0..r {
                                add_into(
                                    &mut g[i * w..(i + 1) * w],
                                    &gout[i * total + col..i * total + col + w],
                                );
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::CausalMask(x) => {
                if self.wants(*x) {
                    let (r, c) = self.dims2(*x).unwrap();
                    accumulate(&mut grads[x.0], r * c, |g| {
                        for i in 0..r {
                            add_into(&mut g[i * c..i * c + i + 1], &gout[i * c..i * c + i + 1]);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads[x.0], n, |g| {
                        g.iter_mut().for_each(|g| *g = *g + gout[0])
                    });
                }
            }
            Op::Mse(p, q) => {
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                let scale = gout[0] * t(2.0 / pv.len().max(1) as f64);
                if self.wants(*p) {
                    accumulate(&mut grads[p.0], pv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + (pv[i] - qv[i]) * scale;
                        }
                    });
                }
                if self.wants(*q) {
                    accumulate(&mut grads[q.0], qv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] - (pv[i] - qv[i]) * scale;
                        }
                    });
                }
            }
            Op::Gate { x, keep } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], gout.len(), |g| {
                        for i in 0..g.len() {
                            if keep[i] {
                                g[i] = g[i] + gout[i];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Numerically stable softmax of one row. Rows of all `-inf` become zeros.
pub fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

/// `log softmax(row)[idx]`, accumulated in f64.
pub fn log_softmax_at<T: Element>(row: &[T], idx: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.to_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.to_f64().unwrap() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row[idx].to_f64().unwrap() - lse
}
