//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A `Tape` is an append-only graph of matrix ops. Forward values are
//! computed eagerly when an op is recorded; `backward` walks the tape in
//! reverse and accumulates vector-Jacobian products into every leaf that
//! was created with `requires_grad`.

use super::matrix::{Mat, Scalar};
use super::DiffError;

/// Handle to a tape node. Carries the shape so builders can check
/// compatibility without borrowing the tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    DivElem(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Sqrt(usize),
    Abs(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    AddRowBroadcast(usize, usize),
    MulRowBroadcast(usize, usize),
    MulColBroadcast(usize, usize),
    L2NormRows(usize),
    RowStandardize(usize, T),
    ColStandardize(usize, T),
    CumsumCols(usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    SelectPerRow(usize, Vec<usize>),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.id].value.len(), 1);
        self.nodes[v.id].value.data()[0]
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs: bool) -> Var {
        let var = Var {
            id: self.nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        self.nodes.push(Node { value, op, needs });
        var
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs
    }

    /// Differentiable input (parameters, or data that gradients flow into).
    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks, baselines).
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(Mat::scalar(v))
    }

    fn same_shape(a: Var, b: Var, what: &str) -> Result<(), DiffError> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(DiffError::Shape(format!(
                "{}: {}x{} vs {}x{}",
                what, a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        Self::same_shape(a, b, "add")?;
        let v = zip(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x + y);
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Add(a.id, b.id), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        Self::same_shape(a, b, "sub")?;
        let v = zip(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x - y);
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Sub(a.id, b.id), needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        Self::same_shape(a, b, "mul_elem")?;
        let v = zip(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x * y);
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::MulElem(a.id, b.id), needs))
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        Self::same_shape(a, b, "div_elem")?;
        let v = zip(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x / y);
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::DivElem(a.id, b.id), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.id].value.map(|x| x * c);
        let needs = self.needs(a.id);
        self.push(v, Op::Scale(a.id, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.id].value.map(|x| x + c);
        let needs = self.needs(a.id);
        self.push(v, Op::AddScalar(a.id, c), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.nodes[a.id].value.matmul(&self.nodes[b.id].value)?;
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::Matmul(a.id, b.id), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.transpose();
        let needs = self.needs(a.id);
        self.push(v, Op::Transpose(a.id), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a.id);
        self.push(v, Op::Relu(a.id), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.map(stable_sigmoid);
        let needs = self.needs(a.id);
        self.push(v, Op::Sigmoid(a.id), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.map(|x| x.exp());
        let needs = self.needs(a.id);
        self.push(v, Op::Exp(a.id), needs)
    }

    /// Element-wise square root. Callers must keep inputs strictly positive
    /// (add a small epsilon) or the backward pass divides by zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.map(|x| x.sqrt());
        let needs = self.needs(a.id);
        self.push(v, Op::Sqrt(a.id), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.map(|x| x.abs());
        let needs = self.needs(a.id);
        self.push(v, Op::Abs(a.id), needs)
    }

    /// Row-wise softmax, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let mut v = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let out = &mut v.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            for (o, &r) in out.iter_mut().zip(row) {
                *o = (r - m).exp();
                sum = sum + *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        let needs = self.needs(a.id);
        self.push(v, Op::SoftmaxRows(a.id), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let s: f64 = x.data().iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(a.id);
        self.push(Mat::scalar(T::from_f64(s)), Op::SumAll(a.id), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.id].value.len();
        let s = self.sum_all(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Sum over rows: [m x n] -> [1 x n].
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let mut acc = vec![0.0f64; x.cols()];
        for i in 0..x.rows() {
            for (a, &v) in acc.iter_mut().zip(x.row(i)) {
                *a += v.to_f64();
            }
        }
        let v = Mat::row_vec(acc.into_iter().map(T::from_f64).collect());
        let needs = self.needs(a.id);
        self.push(v, Op::SumRows(a.id), needs)
    }

    /// Sum over columns: [m x n] -> [m x 1].
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let mut data = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let s: f64 = x.row(i).iter().map(|v| v.to_f64()).sum();
            data.push(T::from_f64(s));
        }
        let v = Mat::from_vec(x.rows(), 1, data).expect("shape");
        let needs = self.needs(a.id);
        self.push(v, Op::SumCols(a.id), needs)
    }

    /// [m x n] + [1 x n], broadcast over rows.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if b.rows != 1 || b.cols != a.cols {
            return Err(DiffError::Shape(format!(
                "add_row_broadcast: {}x{} + {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let x = &self.nodes[a.id].value;
        let r = &self.nodes[b.id].value;
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = &mut v.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            for (o, &b) in row.iter_mut().zip(r.data()) {
                *o = *o + b;
            }
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::AddRowBroadcast(a.id, b.id), needs))
    }

    /// [m x n] * [1 x n], broadcast over rows.
    pub fn mul_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if b.rows != 1 || b.cols != a.cols {
            return Err(DiffError::Shape(format!(
                "mul_row_broadcast: {}x{} * {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let x = &self.nodes[a.id].value;
        let r = &self.nodes[b.id].value;
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = &mut v.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            for (o, &b) in row.iter_mut().zip(r.data()) {
                *o = *o * b;
            }
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::MulRowBroadcast(a.id, b.id), needs))
    }

    /// [m x n] * [m x 1], broadcast over columns.
    pub fn mul_col_broadcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if b.cols != 1 || b.rows != a.rows {
            return Err(DiffError::Shape(format!(
                "mul_col_broadcast: {}x{} * {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let x = &self.nodes[a.id].value;
        let c = &self.nodes[b.id].value;
        let mut v = x.clone();
        for i in 0..x.rows() {
            let s = c.data()[i];
            let row = &mut v.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            for o in row.iter_mut() {
                *o = *o * s;
            }
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(v, Op::MulColBroadcast(a.id, b.id), needs))
    }

    /// Normalize each row to unit Euclidean norm. Rows with norm below 1e-12
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = &self.nodes[a.id].value;
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = &mut v.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            let norm: f64 = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(DiffError::ZeroNorm { row: i });
            }
            let inv = T::from_f64(1.0 / norm);
            for o in row.iter_mut() {
                *o = *o * inv;
            }
        }
        let needs = self.needs(a.id);
        Ok(self.push(v, Op::L2NormRows(a.id), needs))
    }

    /// Per-row standardization: zero mean, unit variance (biased), with eps.
    /// The layer-norm core; scale and shift are applied by the caller.
    pub fn row_standardize(&mut self, a: Var, eps: T) -> Var {
        let x = &self.nodes[a.id].value;
        let n = x.cols();
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = &mut v.data_mut()[i * n..(i + 1) * n];
            let (mu, s) = moments(row, eps);
            let inv = T::one() / s;
            for o in row.iter_mut() {
                *o = (*o - mu) * inv;
            }
        }
        let needs = self.needs(a.id);
        self.push(v, Op::RowStandardize(a.id, eps), needs)
    }

    /// Per-column standardization over the batch (rows). The batch-norm core.
    pub fn col_standardize(&mut self, a: Var, eps: T) -> Var {
        let x = &self.nodes[a.id].value;
        let (stats, v) = col_standardize_forward(x, eps);
        let _ = stats;
        let needs = self.needs(a.id);
        self.push(v, Op::ColStandardize(a.id, eps), needs)
    }

    /// Prefix sums along each row (over the column index).
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let mut v = x.clone();
        for i in 0..x.rows() {
            let row = &mut v.data_mut()[i * x.cols()..(i + 1) * x.cols()];
            let mut acc = T::zero();
            for o in row.iter_mut() {
                acc = acc + *o;
                *o = acc;
            }
        }
        let needs = self.needs(a.id);
        self.push(v, Op::CumsumCols(a.id), needs)
    }

    /// Select rows by index (may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, DiffError> {
        let x = &self.nodes[a.id].value;
        let mut v = Mat::zeros(idx.len(), x.cols());
        for (k, &i) in idx.iter().enumerate() {
            if i >= x.rows() {
                return Err(DiffError::Shape(format!(
                    "gather_rows index {} out of {} rows",
                    i,
                    x.rows()
                )));
            }
            v.data_mut()[k * x.cols()..(k + 1) * x.cols()].copy_from_slice(x.row(i));
        }
        let needs = self.needs(a.id);
        Ok(self.push(v, Op::GatherRows(a.id, idx), needs))
    }

    /// Horizontal concatenation: all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Shape("concat_cols of zero parts".into()));
        }
        let rows = parts[0].rows;
        let total: usize = parts.iter().map(|p| p.cols).sum();
        if parts.iter().any(|p| p.rows != rows) {
            return Err(DiffError::Shape("concat_cols row mismatch".into()));
        }
        let mut v = Mat::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let x = &self.nodes[p.id].value;
            for i in 0..rows {
                v.data_mut()[i * total + offset..i * total + offset + p.cols]
                    .copy_from_slice(x.row(i));
            }
            offset += p.cols;
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(v, Op::ConcatCols(ids), needs))
    }

    /// out[i, 0] = in[i, idx[i]] — one element picked per row.
    pub fn select_per_row(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, DiffError> {
        let x = &self.nodes[a.id].value;
        if idx.len() != x.rows() {
            return Err(DiffError::Shape("select_per_row needs one index per row".into()));
        }
        let mut data = Vec::with_capacity(x.rows());
        for (i, &j) in idx.iter().enumerate() {
            if j >= x.cols() {
                return Err(DiffError::Shape(format!(
                    "select_per_row index {} out of {} cols",
                    j,
                    x.cols()
                )));
            }
            data.push(x.get(i, j));
        }
        let v = Mat::from_vec(x.rows(), 1, data).expect("shape");
        let needs = self.needs(a.id);
        Ok(self.push(v, Op::SelectPerRow(a.id, idx), needs))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients
    /// (None for nodes the loss does not depend on, or that need no grad).
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, DiffError> {
        let lnode = &self.nodes[loss.id];
        if lnode.value.len() != 1 {
            return Err(DiffError::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                lnode.value.rows(),
                lnode.value.cols()
            )));
        }
        if !lnode.value.data()[0].is_finite() {
            return Err(DiffError::NonFiniteLoss);
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Mat::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !self.nodes[id].needs {
                continue;
            }
            let g = grads[id].take().expect("checked");
            self.accumulate(id, &g, &mut grads);
            // Only leaves keep their gradient; interior grads are freed.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Mat<T>>], id: usize, delta: Mat<T>) {
        if !self.nodes[id].needs {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|x| -x));
            }
            Op::MulElem(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                self.add_grad(grads, *a, zip(g, vb, |x, y| x * y));
                self.add_grad(grads, *b, zip(g, va, |x, y| x * y));
            }
            Op::DivElem(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                self.add_grad(grads, *a, zip(g, vb, |x, y| x / y));
                let mut gb = Mat::zeros(g.rows(), g.cols());
                for ((o, &gv), (&av, &bv)) in gb
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(va.data().iter().zip(vb.data()))
                {
                    *o = -gv * av / (bv * bv);
                }
                self.add_grad(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a, _) => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::Matmul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                if self.nodes[*a].needs {
                    let ga = g.matmul(&vb.transpose()).expect("shape");
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[*b].needs {
                    let gb = va.transpose().matmul(g).expect("shape");
                    self.add_grad(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.transpose());
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                self.add_grad(
                    grads,
                    *a,
                    zip(g, va, |gv, x| if x > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                self.add_grad(grads, *a, zip(g, y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                self.add_grad(grads, *a, zip(g, y, |gv, yv| gv * yv));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let two = T::from_f64(2.0);
                self.add_grad(grads, *a, zip(g, y, |gv, yv| gv / (two * yv)));
            }
            Op::Abs(a) => {
                let va = &self.nodes[*a].value;
                self.add_grad(
                    grads,
                    *a,
                    zip(g, va, |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv.to_f64() * gv.to_f64())
                        .sum();
                    let dot = T::from_f64(dot);
                    let out = &mut ga.data_mut()[i * y.cols()..(i + 1) * y.cols()];
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let va = &self.nodes[*a].value;
                let gv = g.data()[0];
                self.add_grad(grads, *a, Mat::filled(va.rows(), va.cols(), gv));
            }
            Op::SumRows(a) => {
                let va = &self.nodes[*a].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    ga.data_mut()[i * va.cols()..(i + 1) * va.cols()].copy_from_slice(g.row(0));
                }
                self.add_grad(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let va = &self.nodes[*a].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gv = g.data()[i];
                    for o in &mut ga.data_mut()[i * va.cols()..(i + 1) * va.cols()] {
                        *o = gv;
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::AddRowBroadcast(a, b) => {
                self.add_grad(grads, *a, g.clone());
                if self.nodes[*b].needs {
                    let mut gb = vec![T::zero(); g.cols()];
                    for i in 0..g.rows() {
                        for (o, &gv) in gb.iter_mut().zip(g.row(i)) {
                            *o = *o + gv;
                        }
                    }
                    self.add_grad(grads, *b, Mat::row_vec(gb));
                }
            }
            Op::MulRowBroadcast(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                if self.nodes[*a].needs {
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        let out = &mut ga.data_mut()[i * va.cols()..(i + 1) * va.cols()];
                        for ((o, &gv), &bv) in out.iter_mut().zip(g.row(i)).zip(vb.data()) {
                            *o = gv * bv;
                        }
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[*b].needs {
                    let mut gb = vec![T::zero(); va.cols()];
                    for i in 0..va.rows() {
                        for ((o, &gv), &av) in gb.iter_mut().zip(g.row(i)).zip(va.row(i)) {
                            *o = *o + gv * av;
                        }
                    }
                    self.add_grad(grads, *b, Mat::row_vec(gb));
                }
            }
            Op::MulColBroadcast(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                if self.nodes[*a].needs {
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        let s = vb.data()[i];
                        let out = &mut ga.data_mut()[i * va.cols()..(i + 1) * va.cols()];
                        for (o, &gv) in out.iter_mut().zip(g.row(i)) {
                            *o = gv * s;
                        }
                    }
                    self.add_grad(grads, *a, ga);
                }
                if self.nodes[*b].needs {
                    let mut gb = Vec::with_capacity(va.rows());
                    for i in 0..va.rows() {
                        let s: f64 = g
                            .row(i)
                            .iter()
                            .zip(va.row(i))
                            .map(|(&gv, &av)| gv.to_f64() * av.to_f64())
                            .sum();
                        gb.push(T::from_f64(s));
                    }
                    self.add_grad(grads, *b, Mat::from_vec(va.rows(), 1, gb).expect("shape"));
                }
            }
            Op::L2NormRows(a) => {
                let va = &self.nodes[*a].value;
                let y = &self.nodes[id].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let norm: f64 = va
                        .row(i)
                        .iter()
                        .map(|v| v.to_f64() * v.to_f64())
                        .sum::<f64>()
                        .sqrt();
                    let inv = T::from_f64(1.0 / norm);
                    let dot: f64 = y
                        .row(i)
                        .iter()
                        .zip(g.row(i))
                        .map(|(&yv, &gv)| yv.to_f64() * gv.to_f64())
                        .sum();
                    let dot = T::from_f64(dot);
                    let out = &mut ga.data_mut()[i * va.cols()..(i + 1) * va.cols()];
                    for ((o, &gv), &yv) in out.iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gv - yv * dot) * inv;
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::RowStandardize(a, eps) => {
                let va = &self.nodes[*a].value;
                let y = &self.nodes[id].value;
                let n = va.cols();
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let (_, s) = moments(va.row(i), *eps);
                    let inv = T::one() / s;
                    let gmean = mean_of(g.row(i));
                    let gydot = T::from_f64(
                        g.row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(&gv, &yv)| gv.to_f64() * yv.to_f64())
                            .sum::<f64>()
                            / n as f64,
                    );
                    let out = &mut ga.data_mut()[i * n..(i + 1) * n];
                    for ((o, &gv), &yv) in out.iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gv - gmean - yv * gydot) * inv;
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::ColStandardize(a, eps) => {
                let va = &self.nodes[*a].value;
                let y = &self.nodes[id].value;
                let m = va.rows();
                let n = va.cols();
                let (stats, _) = col_standardize_forward(va, *eps);
                let mut gmean = vec![0.0f64; n];
                let mut gydot = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        gmean[j] += g.get(i, j).to_f64();
                        gydot[j] += g.get(i, j).to_f64() * y.get(i, j).to_f64();
                    }
                }
                for j in 0..n {
                    gmean[j] /= m as f64;
                    gydot[j] /= m as f64;
                }
                let mut ga = Mat::zeros(m, n);
                for i in 0..m {
                    for j in 0..n {
                        let v = (g.get(i, j).to_f64() - gmean[j]
                            - y.get(i, j).to_f64() * gydot[j])
                            / stats[j].1.to_f64();
                        ga.set(i, j, T::from_f64(v));
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::CumsumCols(a) => {
                let va = &self.nodes[*a].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let gr = g.row(i);
                    let out = &mut ga.data_mut()[i * va.cols()..(i + 1) * va.cols()];
                    let mut acc = T::zero();
                    for j in (0..va.cols()).rev() {
                        acc = acc + gr[j];
                        out[j] = acc;
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let va = &self.nodes[*a].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for (k, &i) in idx.iter().enumerate() {
                    let out = &mut ga.data_mut()[i * va.cols()..(i + 1) * va.cols()];
                    for (o, &gv) in out.iter_mut().zip(g.row(k)) {
                        *o = *o + gv;
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for &pid in ids {
                    let w = self.nodes[pid].value.cols();
                    if self.nodes[pid].needs {
                        let rows = self.nodes[pid].value.rows();
                        let mut gp = Mat::zeros(rows, w);
                        for i in 0..rows {
                            gp.data_mut()[i * w..(i + 1) * w]
                                .copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.add_grad(grads, pid, gp);
                    }
                    offset += w;
                }
            }
            Op::SelectPerRow(a, idx) => {
                let va = &self.nodes[*a].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for (i, &j) in idx.iter().enumerate() {
                    let cur = ga.get(i, j);
                    ga.set(i, j, cur + g.data()[i]);
                }
                self.add_grad(grads, *a, ga);
            }
        }
    }
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for a var; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Mat<T> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Mat::zeros(v.rows, v.cols),
        }
    }
}

fn zip<T: Scalar>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(a.cols(), b.cols());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Mat::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean and sqrt(biased variance + eps) of a slice.
fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = row.len() as f64;
    let mu: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var: f64 = row.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() / n;
    (T::from_f64(mu), T::from_f64((var + eps.to_f64()).sqrt()))
}

/// Column means and sqrt(var + eps), plus the standardized matrix.
pub(crate) fn col_standardize_forward<T: Scalar>(x: &Mat<T>, eps: T) -> (Vec<(T, T)>, Mat<T>) {
    let m = x.rows();
    let n = x.cols();
    let mut mu = vec![0.0f64; n];
    for i in 0..m {
        for (j, &v) in x.row(i).iter().enumerate() {
            mu[j] += v.to_f64();
        }
    }
    for v in &mut mu {
        *v /= m as f64;
    }
    let mut var = vec![0.0f64; n];
    for i in 0..m {
        for (j, &v) in x.row(i).iter().enumerate() {
            var[j] += (v.to_f64() - mu[j]).powi(2);
        }
    }
    for v in &mut var {
        *v /= m as f64;
    }
    let stats: Vec<(T, T)> = mu
        .iter()
        .zip(&var)
        .map(|(&m, &v)| (T::from_f64(m), T::from_f64((v + eps.to_f64()).sqrt())))
        .collect();
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let v = (x.get(i, j).to_f64() - stats[j].0.to_f64()) / stats[j].1.to_f64();
            out.set(i, j, T::from_f64(v));
        }
    }
    (stats, out)
}

/// Build a tape with the given parameters as differentiable leaves, run a
/// scalar-valued graph builder, and return the loss with per-parameter
/// gradients (zeros for parameters the loss ignores).
pub fn grad_of<T: Scalar>(
    params: &[Mat<T>],
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var, DiffError>,
) -> Result<(T, Vec<Mat<T>>), DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(DiffError::Shape("loss must be scalar".into()));
    }
    if !tape.scalar_value(loss).is_finite() {
        return Err(DiffError::NonFiniteLoss);
    }
    let grads = tape.backward(loss)?;
    let out = vars.iter().map(|&v| grads.get(v)).collect();
    Ok((tape.scalar_value(loss), out))
}
