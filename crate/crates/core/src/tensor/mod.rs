//! Minimal reverse-mode automatic differentiation over dense row-major
//! arrays.
//!
//! A [`Tensor`] is a node in an acyclic compute graph. Forward values are
//! immutable once created; gradients live in a lazily allocated slot per
//! node and accumulate additively across calls to [`Tensor::backward`].
//! Graphs are thread-confined (`Rc` nodes); independent graphs on different
//! threads do not interact.

pub mod elem;
pub mod kernels;

pub use elem::Elem;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn contract(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Contract { op, msg: msg.into() }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward recipe: receives the gradient flowing into this node and writes
/// local gradients into per-parent buffers (pre-zeroed, parent-sized).
type BackwardFn<E> = Box<dyn Fn(&[E], &mut [Vec<E>])>;

struct Node<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

pub struct Tensor<E: Elem> {
    node: Rc<Node<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize], data_len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return Err(contract(op, format!("zero-sized shape {shape:?} not supported")));
    }
    if numel != data_len {
        return Err(contract(
            op,
            format!("shape {shape:?} implies {numel} elements, got {data_len}"),
        ));
    }
    Ok(())
}

impl<E: Elem> Tensor<E> {
    /// Graph leaf. `requires_grad = true` marks it as a differentiation
    /// target.
    pub fn leaf(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        check_shape("leaf", &shape, data.len())?;
        Ok(Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Constant leaf (never receives gradient).
    pub fn constant(data: Vec<E>, shape: Vec<usize>) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(vec![v], vec![1]).expect("scalar leaf")
    }

    fn op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.node.shape.len() != 2 {
            return Err(contract(op, format!("expected 2-d tensor, got {:?}", self.node.shape)));
        }
        Ok((self.node.shape[0], self.node.shape[1]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.node.shape != other.node.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, pg| {
                kernels::axpy(E::ONE, g, &mut pg[0]);
                kernels::axpy(E::ONE, g, &mut pg[1]);
            }),
        ))
    }

    /// Adds a vector `bias` of length `n` to every row of a `[..., n]`
    /// tensor.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let n = *self.node.shape.last().unwrap_or(&0);
        if bias.node.shape.len() != 1 || bias.node.shape[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.node.shape.clone(),
                rhs: bias.node.shape.clone(),
            });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, pg| {
                kernels::axpy(E::ONE, g, &mut pg[0]);
                for row in g.chunks(n) {
                    kernels::axpy(E::ONE, row, &mut pg[1]);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.node.shape != other.node.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, pg| {
                kernels::axpy(E::ONE, g, &mut pg[0]);
                kernels::axpy(-E::ONE, g, &mut pg[1]);
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&a| -a).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|g, pg| kernels::axpy(-E::ONE, g, &mut pg[0])),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.node.shape != other.node.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, pg| {
                for ((o, &gv), &bv) in pg[0].iter_mut().zip(g).zip(b.data()) {
                    *o += gv * bv;
                }
                for ((o, &gv), &av) in pg[1].iter_mut().zip(g).zip(a.data()) {
                    *o += gv * av;
                }
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let data = self.data().iter().map(|&a| a * ce).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| kernels::axpy(ce, g, &mut pg[0])),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let data = self.data().iter().map(|&a| a + ce).collect();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|g, pg| kernels::axpy(E::ONE, g, &mut pg[0])),
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| a.exp()).collect();
        let out = data.clone();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for ((o, &gv), &ov) in pg[0].iter_mut().zip(g).zip(out.iter()) {
                    *o += gv * ov;
                }
            }),
        )
    }

    pub fn log(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.ln()).collect();
        let x = self.clone();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for ((o, &gv), &xv) in pg[0].iter_mut().zip(g).zip(x.data()) {
                    *o += gv / xv;
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&a| a.fmax(E::ZERO)).collect();
        let x = self.clone();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for ((o, &gv), &xv) in pg[0].iter_mut().zip(g).zip(x.data()) {
                    if xv > E::ZERO {
                        *o += gv;
                    }
                }
            }),
        )
    }

    /// Elementwise minimum. A tied element routes half the gradient to each
    /// input.
    pub fn minimum(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.node.shape != other.node.shape {
            return Err(TensorError::ShapeMismatch {
                op: "minimum",
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a.fmin(b))
            .collect();
        let a = self.clone();
        let b = other.clone();
        let half = E::from_f64(0.5);
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, pg| {
                for i in 0..g.len() {
                    let (av, bv) = (a.data()[i], b.data()[i]);
                    if av < bv {
                        pg[0][i] += g[i];
                    } else if bv < av {
                        pg[1][i] += g[i];
                    } else {
                        pg[0][i] += g[i] * half;
                        pg[1][i] += g[i] * half;
                    }
                }
            }),
        ))
    }

    /// Clamps values into `[lo, hi]`; gradient passes inside the interval
    /// (inclusive) and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<E>> {
        if !(lo <= hi) {
            return Err(contract("clamp", format!("invalid interval [{lo}, {hi}]")));
        }
        let (le, he) = (E::from_f64(lo), E::from_f64(hi));
        let data = self.data().iter().map(|&a| a.fmax(le).fmin(he)).collect();
        let x = self.clone();
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for ((o, &gv), &xv) in pg[0].iter_mut().zip(g).zip(x.data()) {
                    if xv >= le && xv <= he {
                        *o += gv;
                    }
                }
            }),
        ))
    }

    /// Detached constant view: same values, no gradient path to the source.
    pub fn stop_grad(&self) -> Tensor<E> {
        Tensor::constant(self.data().to_vec(), self.node.shape.clone())
            .expect("stop_grad preserves a valid shape")
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        let mut data = vec![E::ZERO; m * n];
        kernels::matmul(self.data(), other.data(), m, k, n, &mut data);
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, pg| {
                // dA = g @ B^T, dB = A^T @ g
                let mut da = vec![E::ZERO; m * k];
                kernels::matmul_nt(g, b.data(), m, n, k, &mut da);
                kernels::axpy(E::ONE, &da, &mut pg[0]);
                let mut db = vec![E::ZERO; k * n];
                kernels::matmul_tn(a.data(), g, m, k, n, &mut db);
                kernels::axpy(E::ONE, &db, &mut pg[1]);
            }),
        ))
    }

    /// `self @ other^T` for `self: [m,p]`, `other: [q,p]`.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, p) = self.rows_cols("matmul_nt")?;
        let (q, p2) = other.rows_cols("matmul_nt")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        let mut data = vec![E::ZERO; m * q];
        kernels::matmul_nt(self.data(), other.data(), m, p, q, &mut data);
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::op(
            vec![m, q],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, pg| {
                // out = A B^T: dA = g @ B, dB = g^T @ A
                let mut da = vec![E::ZERO; m * p];
                kernels::matmul(g, b.data(), m, q, p, &mut da);
                kernels::axpy(E::ONE, &da, &mut pg[0]);
                let mut db = vec![E::ZERO; q * p];
                kernels::matmul_tn(g, a.data(), m, q, p, &mut db);
                kernels::axpy(E::ONE, &db, &mut pg[1]);
            }),
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(|g, pg| {
                let gv = g[0];
                for o in pg[0].iter_mut() {
                    *o += gv;
                }
            }),
        )
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        let inv = E::ONE / E::from_f64(n as f64);
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::op(
            vec![1],
            vec![acc * inv],
            vec![self.clone()],
            Box::new(move |g, pg| {
                let gv = g[0] * inv;
                for o in pg[0].iter_mut() {
                    *o += gv;
                }
            }),
        )
    }

    // ---- softmax family ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<E> {
        let n = *self.node.shape.last().expect("softmax_last: scalar input");
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_row(row);
        }
        let out = data.clone();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for (r, (g_row, s_row)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                    let mut inner = E::ZERO;
                    for (&gv, &sv) in g_row.iter().zip(s_row) {
                        inner += gv * sv;
                    }
                    let p_row = &mut pg[0][r * n..(r + 1) * n];
                    for ((o, &gv), &sv) in p_row.iter_mut().zip(g_row).zip(s_row) {
                        *o += sv * (gv - inner);
                    }
                }
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(&self) -> Tensor<E> {
        let n = *self.node.shape.last().expect("log_softmax_last: scalar input");
        let mut data = vec![E::ZERO; self.numel()];
        for (row, out) in self.data().chunks(n).zip(data.chunks_mut(n)) {
            kernels::log_softmax_row(row, out);
        }
        let out = data.clone();
        Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for (r, (g_row, o_row)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                    let mut g_sum = E::ZERO;
                    for &gv in g_row {
                        g_sum += gv;
                    }
                    let p_row = &mut pg[0][r * n..(r + 1) * n];
                    for ((o, &gv), &ov) in p_row.iter_mut().zip(g_row).zip(o_row) {
                        *o += gv - ov.exp() * g_sum;
                    }
                }
            }),
        )
    }

    /// Row-wise causal softmax of a square `[t, t]` score matrix: row `i` is
    /// softmaxed over columns `0..=i`, remaining columns are zero.
    pub fn causal_softmax(&self) -> Result<Tensor<E>> {
        let (t, s) = self.rows_cols("causal_softmax")?;
        if t != s {
            return Err(contract(
                "causal_softmax",
                format!("expected square scores, got {:?}", self.node.shape),
            ));
        }
        let mut data = self.data().to_vec();
        for (i, row) in data.chunks_mut(s).enumerate() {
            kernels::softmax_prefix(row, i + 1);
        }
        let out = data.clone();
        Ok(Tensor::op(
            vec![t, s],
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for i in 0..t {
                    let valid = i + 1;
                    let g_row = &g[i * s..i * s + valid];
                    let s_row = &out[i * s..i * s + valid];
                    let mut inner = E::ZERO;
                    for (&gv, &sv) in g_row.iter().zip(s_row) {
                        inner += gv * sv;
                    }
                    let p_row = &mut pg[0][i * s..i * s + valid];
                    for ((o, &gv), &sv) in p_row.iter_mut().zip(g_row).zip(s_row) {
                        *o += sv * (gv - inner);
                    }
                }
            }),
        ))
    }

    // ---- indexing / reshaping ---------------------------------------------

    /// Picks `out[r] = self[r, ids[r]]` from a `[rows, n]` tensor.
    pub fn gather_last(&self, ids: &[usize]) -> Result<Tensor<E>> {
        let (rows, n) = self.rows_cols("gather_last")?;
        if ids.len() != rows {
            return Err(contract(
                "gather_last",
                format!("{rows} rows but {} indices", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(contract("gather_last", format!("index {bad} out of range 0..{n}")));
        }
        let data = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| self.data()[r * n + i])
            .collect();
        let ids = ids.to_vec();
        Ok(Tensor::op(
            vec![rows],
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for (r, &i) in ids.iter().enumerate() {
                    pg[0][r * n + i] += g[r];
                }
            }),
        ))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<E>> {
        let rows = self.node.shape.first().copied().unwrap_or(0);
        if start >= end || end > rows {
            return Err(contract(
                "slice_rows",
                format!("range {start}..{end} invalid for {rows} rows"),
            ));
        }
        let row_size = self.numel() / rows;
        let mut shape = self.node.shape.clone();
        shape[0] = end - start;
        let data = self.data()[start * row_size..end * row_size].to_vec();
        Ok(Tensor::op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                kernels::axpy(E::ONE, g, &mut pg[0][start * row_size..end * row_size]);
            }),
        ))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<E>> {
        let (rows, cols) = self.rows_cols("slice_cols")?;
        if start >= end || end > cols {
            return Err(contract(
                "slice_cols",
                format!("range {start}..{end} invalid for {cols} cols"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * cols + start..r * cols + end]);
        }
        Ok(Tensor::op(
            vec![rows, w],
            data,
            vec![self.clone()],
            Box::new(move |g, pg| {
                for r in 0..rows {
                    kernels::axpy(
                        E::ONE,
                        &g[r * w..(r + 1) * w],
                        &mut pg[0][r * cols + start..r * cols + end],
                    );
                }
            }),
        ))
    }

    /// Concatenates along axis 0. All parts must share trailing dimensions.
    pub fn concat_rows(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(contract("concat_rows", "no parts"));
        }
        let tail = &parts[0].node.shape[1..];
        let mut total_rows = 0;
        for p in parts {
            if p.node.shape.is_empty() || &p.node.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].node.shape.clone(),
                    rhs: p.node.shape.clone(),
                });
            }
            total_rows += p.node.shape[0];
        }
        let row_size: usize = tail.iter().product::<usize>().max(1);
        let mut shape = parts[0].node.shape.clone();
        shape[0] = total_rows;
        let mut data = Vec::with_capacity(total_rows * row_size);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::op(
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, pg| {
                let mut off = 0;
                for (buf, &sz) in pg.iter_mut().zip(&sizes) {
                    kernels::axpy(E::ONE, &g[off..off + sz], buf);
                    off += sz;
                }
            }),
        ))
    }

    /// Concatenates 2-d tensors along axis 1. All parts must share the row
    /// count.
    pub fn concat_cols(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(contract("concat_cols", "no parts"));
        }
        let rows = parts[0].rows_cols("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].node.shape.clone(),
                    rhs: p.node.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let widths_b = widths.clone();
        Ok(Tensor::op(
            vec![rows, total],
            data,
            parts.to_vec(),
            Box::new(move |g, pg| {
                for r in 0..rows {
                    let mut off = r * total;
                    for (buf, &w) in pg.iter_mut().zip(&widths_b) {
                        kernels::axpy(E::ONE, &g[off..off + w], &mut buf[r * w..(r + 1) * w]);
                        off += w;
                    }
                }
            }),
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(table: &Tensor<E>, ids: &[usize]) -> Result<Tensor<E>> {
        let (v, h) = table.rows_cols("embedding")?;
        if ids.is_empty() {
            return Err(contract("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(contract("embedding", format!("id {bad} out of range 0..{v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * h..(i + 1) * h]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::op(
            vec![ids.len(), h],
            data,
            vec![table.clone()],
            Box::new(move |g, pg| {
                for (r, &i) in ids.iter().enumerate() {
                    kernels::axpy(E::ONE, &g[r * h..(r + 1) * h], &mut pg[0][i * h..(i + 1) * h]);
                }
            }),
        ))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let n = *self.node.shape.last().expect("layer_norm: scalar input");
        if gamma.node.shape != [n] || beta.node.shape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.node.shape.clone(),
                rhs: gamma.node.shape.clone(),
            });
        }
        let eps_e = E::from_f64(eps);
        let mut data = vec![E::ZERO; self.numel()];
        for (row, out) in self.data().chunks(n).zip(data.chunks_mut(n)) {
            kernels::layer_norm_row(row, gamma.data(), beta.data(), eps_e, out);
        }
        let x = self.clone();
        let gamma_c = gamma.clone();
        Ok(Tensor::op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, pg| {
                let inv_n = E::ONE / E::from_f64(n as f64);
                for (r, (x_row, g_row)) in x.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let mut mean = E::ZERO;
                    for &v in x_row {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = E::ZERO;
                    for &v in x_row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let inv_std = E::ONE / (var + eps_e).sqrt();
                    // x_hat, gy = g * gamma, and their row means
                    let mut gy_mean = E::ZERO;
                    let mut gyxh_mean = E::ZERO;
                    let mut x_hat = vec![E::ZERO; n];
                    let mut gy = vec![E::ZERO; n];
                    for i in 0..n {
                        x_hat[i] = (x_row[i] - mean) * inv_std;
                        gy[i] = g_row[i] * gamma_c.data()[i];
                        gy_mean += gy[i];
                        gyxh_mean += gy[i] * x_hat[i];
                    }
                    gy_mean *= inv_n;
                    gyxh_mean *= inv_n;
                    let dx = &mut pg[0][r * n..(r + 1) * n];
                    for i in 0..n {
                        dx[i] += inv_std * (gy[i] - gy_mean - x_hat[i] * gyxh_mean);
                    }
                    for i in 0..n {
                        pg[1][i] += g_row[i] * x_hat[i];
                        pg[2][i] += g_row[i];
                    }
                }
            }),
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode pass from a scalar root. Every reachable tensor with
    /// `requires_grad` receives (additively) its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.node.shape),
            ));
        }
        if !self.node.requires_grad {
            // Nothing differentiable is reachable; grads of constants stay
            // unset.
            return Ok(());
        }
        let order = topo_order(self);
        let mut flow: HashMap<u64, Vec<E>> = HashMap::new();
        flow.insert(self.node.id, vec![E::ONE]);
        for t in order.iter().rev() {
            let Some(g) = flow.remove(&t.node.id) else {
                continue;
            };
            if t.node.requires_grad {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => kernels::axpy(E::ONE, &g, acc),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(back) = &t.node.backward {
                let mut pgrads: Vec<Vec<E>> = t
                    .node
                    .parents
                    .iter()
                    .map(|p| vec![E::ZERO; p.numel()])
                    .collect();
                back(&g, &mut pgrads);
                for (p, pg) in t.node.parents.iter().zip(pgrads) {
                    if p.node.requires_grad {
                        flow.entry(p.node.id)
                            .and_modify(|acc| kernels::axpy(E::ONE, &pg, acc))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the parent DAG: every node appears after all of its
/// parents, so iterating in reverse visits consumers before producers.
fn topo_order<E: Elem>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(root.clone(), 0)];
    while let Some((t, idx)) = stack.pop() {
        if idx == 0 && !visited.insert(t.node.id) {
            continue;
        }
        if idx < t.node.parents.len() {
            let parent = t.node.parents[idx].clone();
            stack.push((t, idx + 1));
            if !visited.contains(&parent.node.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

#[cfg(test)]
mod tests;
