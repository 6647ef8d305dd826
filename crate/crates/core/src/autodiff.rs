//! Dense 2-D real tensors and a tape-based reverse-mode differentiator.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a 1×1 result walks the tape once in reverse and
//! returns the gradient of that scalar with respect to every recorded node.
//! Only the primitives the graph network and its sum-rate loss need are
//! provided; broadcasting is limited to row vectors ([`Tape::add_row`]) and
//! column vectors ([`Tape::mul_col`]).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("{} elements for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0×`cols` matrix.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: format!("row {i} has {} columns, expected {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row subset, in the order given.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        Ok(matmul_nn(self, other))
    }

    /// Vertical concatenation of tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor], cols: usize) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    detail: format!("{}x{} part, expected {cols} columns", p.rows, p.cols),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor { rows, cols, data })
    }
}

/// `a (m×k) · b (k×n)`.
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { matmul_nn_avx2(a, b) };
    }
    matmul_nn_body(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_nn_avx2(a: &Tensor, b: &Tensor) -> Tensor {
    matmul_nn_body(a, b)
}

#[inline(always)]
fn matmul_nn_body(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a (m×k) · bᵀ` where `b` is n×k.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `aᵀ · b` where `a` is k×m and `b` is k×n.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Concat(Vec<Var>),
    Relu(Var),
    Log1p(Var),
    Ln(Var),
    Square(Var),
    Recip(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    RowNorm(Var),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        offsets: Arc<[usize]>,
    },
    Gather {
        x: Var,
        idx: Arc<[usize]>,
    },
    ScatterAdd {
        x: Var,
        idx: Arc<[usize]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of evaluated operations. Single-threaded; use one tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape it came from.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for parameter slot `id`, summed over every registration of
    /// that slot on the tape. `None` if the slot never reached the output.
    pub fn param(&self, id: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(pid, v) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[v.0] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn binary_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = matmul_nn(av, bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        binary_shapes("add", av, bv)?;
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        binary_shapes("sub", av, bv)?;
        let mut out = av.clone();
        for (o, y) in out.data.iter_mut().zip(&bv.data) {
            *o -= y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        binary_shapes("mul", av, bv)?;
        let mut out = av.clone();
        for (o, y) in out.data.iter_mut().zip(&bv.data) {
            *o *= y;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows != 1 || bv.cols != av.cols {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in out.data.chunks_exact_mut(av.cols.max(1)) {
            for (o, y) in r.iter_mut().zip(&bv.data) {
                *o += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// Multiplies row `i` of `a` by `c[i]`, where `c` is m×1.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols != 1 || cv.rows != av.rows {
            return Err(shape_err(
                "mul_col",
                format!("{:?} * column {:?}", av.shape(), cv.shape()),
            ));
        }
        let mut out = av.clone();
        if av.cols > 0 {
            for (r, &s) in out.data.chunks_exact_mut(av.cols).zip(&cv.data) {
                r.iter_mut().for_each(|o| *o *= s);
            }
        }
        let ng = self.ng(a) || self.ng(c);
        Ok(self.push(out, Op::MulCol(a, c), ng))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let rows = self.value(first).rows;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows != rows {
                return Err(shape_err(
                    "concat",
                    format!("row counts {} vs {}", rows, v.rows),
                ));
            }
            cols += v.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor { rows, cols, data },
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln_1p);
        let ng = self.ng(a);
        self.push(out, Op::Log1p(a), ng)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / v);
        let ng = self.ng(a);
        self.push(out, Op::Recip(a), ng)
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, floor), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.data.len().max(1) as f64;
        let out = Tensor::scalar(v.data.iter().sum::<f64>() / n);
        let ng = self.ng(a);
        self.push(out, Op::MeanAll(a), ng)
    }

    /// Sum along each row, giving an m×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows).map(|i| v.row(i).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::column(data), Op::SumRows(a), ng)
    }

    /// Sum down each column, giving a 1×n row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(1, v.cols);
        for i in 0..v.rows {
            for (o, x) in out.data.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Euclidean norm of each row, as an m×1 column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows)
            .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::column(data), Op::RowNorm(a), ng)
    }

    /// Column-wise maximum over consecutive row segments
    /// `offsets[s]..offsets[s + 1]`. Empty segments produce zeros. The
    /// gradient of each output element flows to the row that attained the
    /// maximum; ties go to the lowest row index.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let v = self.value(a);
        check_offsets("segment_max", offsets, v.rows)?;
        let segs = offsets.len() - 1;
        let cols = v.cols;
        let mut out = Tensor::zeros(segs, cols);
        let mut argmax = vec![usize::MAX; segs * cols];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            let orow = &mut out.data[s * cols..(s + 1) * cols];
            let arow = &mut argmax[s * cols..(s + 1) * cols];
            orow.copy_from_slice(v.row(lo));
            arow.iter_mut().for_each(|x| *x = lo);
            for r in lo + 1..hi {
                for (c, &x) in v.row(r).iter().enumerate() {
                    if x > orow[c] {
                        orow[c] = x;
                        arow[c] = r;
                    }
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentMax { x: a, argmax }, ng))
    }

    /// Column-wise maximum over all rows (a single segment).
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows;
        self.segment_max(a, &[0, rows])
    }

    /// Sum over consecutive row segments; empty segments give zeros.
    pub fn segment_sum(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        check_offsets("segment_sum", &offsets, v.rows)?;
        let segs = offsets.len() - 1;
        let mut out = Tensor::zeros(segs, v.cols);
        for s in 0..segs {
            for r in offsets[s]..offsets[s + 1] {
                for (o, x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SegmentSum { x: a, offsets }, ng))
    }

    /// Row `r` of the result is row `idx[r]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows) {
            return Err(shape_err(
                "gather",
                format!("index {bad} out of range for {:?}", v.shape()),
            ));
        }
        let out = v.select_rows(&idx);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gather { x: a, idx }, ng))
    }

    /// Adds row `r` of `a` into row `idx[r]` of an `n`-row zero matrix.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, n: usize) -> Result<Var> {
        let v = self.value(a);
        if idx.len() != v.rows {
            return Err(shape_err(
                "scatter_add",
                format!("{} indices for {:?}", idx.len(), v.shape()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err(
                "scatter_add",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let mut out = Tensor::zeros(n, v.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(i).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::ScatterAdd { x: a, idx }, ng))
    }

    /// Reverse pass from the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("root must be 1x1, got {:?}", rv.shape()),
            ));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(n)
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    if g.cols > 0 {
                        for (r, &s) in ga.data.chunks_exact_mut(g.cols).zip(&cv.data) {
                            r.iter_mut().for_each(|o| *o *= s);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.ng(*c) {
                    let data = (0..g.rows)
                        .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *c, Tensor::column(data));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(g.rows, w);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[start..start + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::Relu(a) => {
                accumulate(
                    grads,
                    *a,
                    zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Log1p(a) => {
                accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| gv / (1.0 + x)));
            }
            Op::Ln(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| gv / x)),
            Op::Square(a) => {
                accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| 2.0 * x * gv));
            }
            Op::Recip(a) => accumulate(grads, *a, zip_map(g, out, |gv, y| -gv * y * y)),
            Op::ClampMin(a, floor) => {
                let f = *floor;
                accumulate(
                    grads,
                    *a,
                    zip_map(g, self.value(*a), |gv, x| if x > f { gv } else { 0.0 }),
                );
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Tensor::full(av.rows, av.cols, g.item()));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let n = av.data.len().max(1) as f64;
                accumulate(grads, *a, Tensor::full(av.rows, av.cols, g.item() / n));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    let gi = g.data[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    ga.row_mut(i).copy_from_slice(&g.data);
                }
                accumulate(grads, *a, ga);
            }
            Op::RowNorm(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for i in 0..av.rows {
                    let norm = out.data[i];
                    if norm > 0.0 {
                        let s = g.data[i] / norm;
                        for (o, x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = s * x;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                let cols = xv.cols;
                for (k, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        gx.data[r * cols + k % cols] += g.data[k];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentSum { x, offsets } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for s in 0..offsets.len() - 1 {
                    for r in offsets[s]..offsets[s + 1] {
                        gx.row_mut(r).copy_from_slice(g.row(s));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ScatterAdd { x, idx } => accumulate(grads, *x, g.select_rows(idx)),
        }
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    let ok = !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if !ok {
        return Err(shape_err(
            op,
            format!("invalid segment offsets for {rows} rows"),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Central-difference estimate of the gradient of `f` at `params`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = theta[i];
            theta[i] = orig + eps;
            let plus = f(&theta);
            theta[i] = orig - eps;
            let minus = f(&theta);
            theta[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn relu_backward_passes_positive_only() {
        let mut tape = Tape::new();
        let x = tape.param(0, &t(1, 2, &[2.0, -3.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_reduce_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(0, &t(2, 2, &[1.0, 5.0, 3.0, 2.0]));
        let m = tape.max_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        // weight output[0] by 1 and output[1] by 10 to tell the routes apart
        let w = tape.constant(t(1, 2, &[1.0, 10.0]));
        let p = tape.mul(m, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 10.0, 1.0, 0.0]);
    }

    #[test]
    fn max_tie_goes_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.param(0, &t(3, 1, &[4.0, 4.0, 4.0]));
        let m = tape.max_rows(x).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(0, &t(2, 1, &[-4.0, -2.0]));
        let m = tape.segment_max(x, &[0, 0, 2]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, -2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let theta = t(1, 3, &[0.5, -1.5, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(7, &theta);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(7).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn concat_gradient_splits_by_segment() {
        let mut tape = Tape::new();
        let a = tape.param(0, &t(2, 1, &[1.0, 2.0]));
        let b = tape.param(1, &t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b]).unwrap();
        let w = tape.constant(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.param(1).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn reused_tensor_sums_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(0, &Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 7.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("(2, 3)"));
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(0, &Tensor::zeros(2, 1));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn finite_diff_exact_for_linear() {
        let g = finite_diff_grad(|p| 3.0 * p[0] - 2.0 * p[1], &[1.0, 4.0], 0.5);
        assert_eq!(g, vec![3.0, -2.0]);
        let g = finite_diff_grad(|p| p[0] * p[0], &[1.5], 1e-3);
        assert!((g[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn inputs_not_mutated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random(&mut rng, 3, 4);
        let b0 = random(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let a = tape.param(0, &a0);
        let b = tape.param(1, &b0);
        let c = tape.matmul(a, b).unwrap();
        let r = tape.relu(c);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(a), &a0);
        assert_eq!(tape.value(b), &b0);
    }

    /// Composite scalar exercising one primitive; the closure builds it on a
    /// fresh tape from the flattened parameter vector.
    type Builder = fn(&mut Tape, Var, &mut ChaCha8Rng, (usize, usize)) -> Var;

    fn check_primitive(name: &str, build: Builder, positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for trial in 0..100 {
            let rows = rng.random_range(1..5);
            let cols = rng.random_range(1..5);
            let mut x0 = random(&mut rng, rows, cols);
            if positive {
                x0 = x0.map(|v| v.abs() + 0.5);
            }
            let aux_seed: u64 = rng.random();
            let eval = |data: &[f64]| -> (f64, Option<Tensor>) {
                let mut tape = Tape::new();
                let x = tape.param(0, &Tensor::from_vec(rows, cols, data.to_vec()).unwrap());
                let mut aux = ChaCha8Rng::seed_from_u64(aux_seed);
                let y = build(&mut tape, x, &mut aux, (rows, cols));
                let v = tape.value(y).item();
                let g = tape.backward(y).unwrap().param(0);
                (v, g)
            };
            let (_, g) = eval(x0.data());
            let g = g.unwrap_or_else(|| Tensor::zeros(rows, cols));
            let fd = finite_diff_grad(|p| eval(p).0, x0.data(), 1e-6);
            for (a, b) in g.data().iter().zip(&fd) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
                assert!(rel <= 1e-4, "{name} trial {trial}: ad {a} vs fd {b}");
            }
        }
    }

    fn weighted_sum(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Var {
        let (r, c) = tape.value(y).shape();
        let w = tape.constant(random(rng, r, c));
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn primitives_match_finite_differences() {
        check_primitive(
            "matmul",
            |t, x, rng, (_, c)| {
                let w = t.param(1, &random(rng, c, 3));
                let y = t.matmul(x, w).unwrap();
                weighted_sum(t, y, rng)
            },
            false,
        );
        check_primitive(
            "matmul_rhs",
            |t, x, rng, (r, _)| {
                let a = t.constant(random(rng, 2, r));
                let y = t.matmul(a, x).unwrap();
                weighted_sum(t, y, rng)
            },
            false,
        );
        check_primitive(
            "add_sub_mul",
            |t, x, rng, (r, c)| {
                let b = t.constant(random(rng, r, c));
                let s = t.add(x, b).unwrap();
                let d = t.sub(s, x).unwrap();
                let m = t.mul(x, s).unwrap();
                let y = t.add(m, d).unwrap();
                let y = t.scale(y, -1.7);
                weighted_sum(t, y, rng)
            },
            false,
        );
        check_primitive(
            "broadcast",
            |t, x, rng, (r, c)| {
                let b = t.constant(random(rng, 1, c));
                let y = t.add_row(x, b).unwrap();
                let col = t.sum_rows(x);
                let y = t.mul_col(y, col).unwrap();
                let z = t.sum_cols(y);
                let _ = r;
                weighted_sum(t, z, rng)
            },
            false,
        );
        check_primitive(
            "relu_concat",
            |t, x, rng, _| {
                let sq = t.square(x);
                let c = t.concat(&[x, sq, x]).unwrap();
                let y = t.relu(c);
                weighted_sum(t, y, rng)
            },
            false,
        );
        check_primitive(
            "log_recip",
            |t, x, rng, _| {
                let a = t.log1p(x);
                let b = t.ln(x);
                let c = t.recip(x);
                let s = t.add(a, b).unwrap();
                let y = t.add(s, c).unwrap();
                weighted_sum(t, y, rng)
            },
            true,
        );
        check_primitive(
            "norm_clamp",
            |t, x, rng, _| {
                let n = t.row_norm(x);
                let c = t.clamp_min(n, 0.8);
                let r = t.recip(c);
                let y = t.mul_col(x, r).unwrap();
                let m = t.mean(y);
                let w = weighted_sum(t, y, rng);
                t.add(w, m).unwrap()
            },
            false,
        );
        check_primitive(
            "log1p_square_norm",
            |t, x, _, _| {
                let sq = t.square(x);
                let s = t.sum(sq);
                t.log1p(s)
            },
            false,
        );
        check_primitive(
            "segments",
            |t, x, rng, (r, _)| {
                let mid = r / 2;
                let m = t.segment_max(x, &[0, mid, r]).unwrap();
                let s = t.segment_sum(m, Arc::from(vec![0, 1, 2])).unwrap();
                weighted_sum(t, s, rng)
            },
            false,
        );
        check_primitive(
            "gather_scatter",
            |t, x, rng, (r, _)| {
                let idx: Vec<usize> = (0..2 * r).map(|_| rng.random_range(0..r)).collect();
                let g = t.gather(x, Arc::from(idx)).unwrap();
                let back: Vec<usize> = (0..2 * r).map(|i| i % 3).collect();
                let s = t.scatter_add(g, Arc::from(back), 3).unwrap();
                weighted_sum(t, s, rng)
            },
            false,
        );
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut tape = Tape::new();
            let x = tape.param(0, &random(&mut rng, 5, 4));
            let w = tape.param(1, &random(&mut rng, 4, 4));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.relu(h);
            let m = tape.segment_max(h, &[0, 2, 5]).unwrap();
            let s = tape.sum(m);
            let g = tape.backward(s).unwrap();
            (g.param(0).unwrap(), g.param(1).unwrap())
        };
        let (a0, a1) = build();
        let (b0, b1) = build();
        assert_eq!(a0.data(), b0.data());
        assert_eq!(a1.data(), b1.data());
    }
}
