//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive application in creation order; since
//! each node only refers to earlier nodes, walking the record backwards is a
//! reverse topological traversal that visits every node exactly once.
//! Gradients of shared subexpressions accumulate by summation.

use std::rc::Rc;

use crate::autodiff::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Running statistics owned by one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(dim: usize) -> BnStats {
        BnStats {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Matmul(Value, Value),
    Add(Value, Value),
    /// [n,m] + [1,m], gradient of the row vector sums over rows.
    AddRow(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Scale(Value, f64),
    AddScalar(Value),
    ConcatCols(Vec<Value>),
    ConcatRows(Vec<Value>),
    SliceCols(Value, usize, usize),
    /// Same data, new shape.
    Reshape(Value),
    GatherRows(Value, Rc<Vec<usize>>),
    /// Mean of the rows assigned to each group; all groups must be non-empty.
    GroupMeanRows {
        input: Value,
        groups: Rc<Vec<usize>>,
        counts: Rc<Vec<usize>>,
    },
    /// Tile a [1,m] row n times.
    BroadcastRows(Value),
    /// Column means over all rows -> [1,m].
    MeanRows(Value),
    /// Mean over every entry -> [1,1].
    MeanAll(Value),
    Elu(Value),
    Softplus(Value),
    Sigmoid(Value),
    Tanh(Value),
    Exp(Value),
    Ln(Value),
    Mse(Value, Value),
    /// Inverted-dropout; `keep` entries are 0 or 1/(1-p).
    Dropout(Value, Rc<Tensor>),
    BatchNormTrain {
        x: Value,
        gamma: Value,
        beta: Value,
        inv_std: Rc<Vec<f64>>,
        x_hat: Rc<Tensor>,
    },
    BatchNormEval {
        x: Value,
        gamma: Value,
        beta: Value,
        inv_std: Rc<Vec<f64>>,
        x_hat: Rc<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    fn shape_err(&self, op: &str, a: Value, b: Value) -> Error {
        Error::Shape(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        ))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).cols() != self.value(b).rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let v = matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// a: [n,m], row: [1,m]; adds the row to every row of a.
    pub fn add_row(&mut self, a: Value, row: Value) -> Result<Value> {
        let (n, m) = self.value(a).shape();
        if self.value(row).shape() != (1, m) {
            return Err(self.shape_err("add_row", a, row));
        }
        let r = self.value(row).clone();
        let mut v = self.value(a).clone();
        for i in 0..n {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let mut v = self.value(a).clone();
        v.scaled_add_assign(-1.0, self.value(b));
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let bt = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(bt.data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("div", a, b));
        }
        let bt = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(bt.data()) {
            *x /= y;
        }
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Value, k: f64) -> Value {
        let mut v = self.value(a).clone();
        v.scale_in_place(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Value, k: f64) -> Value {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let n = self.value(parts[0]).rows();
        let mut m = 0;
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({n} vs {})",
                    self.value(p).rows()
                )));
            }
            m += self.value(p).cols();
        }
        let mut v = Tensor::zeros(n, m);
        for i in 0..n {
            let row = v.row_mut(i);
            let mut off = 0;
            for &p in parts {
                // Borrow is re-taken per part; values are immutable once pushed.
                let src = &self.nodes[p.0].value;
                let w = src.cols();
                row[off..off + w].copy_from_slice(src.row(i));
                off += w;
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != m {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts differ ({m} vs {})",
                    t.cols()
                )));
            }
            data.extend_from_slice(t.data());
            n += t.rows();
        }
        let v = Tensor::from_vec(n, m, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Value, rows: usize, cols: usize) -> Result<Value> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(Error::Shape(format!(
                "reshape: {:?} cannot become ({rows}, {cols})",
                t.shape()
            )));
        }
        let v = Tensor::from_vec(rows, cols, t.data().to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let (n, m) = self.value(a).shape();
        if start >= end || end > m {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{end} out of 0..{m}"
            )));
        }
        let src = self.value(a);
        let mut v = Tensor::zeros(n, end - start);
        for i in 0..n {
            v.row_mut(i).copy_from_slice(&src.row(i)[start..end]);
        }
        Ok(self.push(v, Op::SliceCols(a, start, end)))
    }

    pub fn gather_rows(&mut self, a: Value, idx: Rc<Vec<usize>>) -> Result<Value> {
        let (n, m) = self.value(a).shape();
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather_rows: index out of range for {n} rows"
            )));
        }
        let src = self.value(a);
        let mut v = Tensor::zeros(idx.len(), m);
        for (out_i, &src_i) in idx.iter().enumerate() {
            v.row_mut(out_i).copy_from_slice(src.row(src_i));
        }
        Ok(self.push(v, Op::GatherRows(a, idx)))
    }

    /// Mean of rows per group; `groups[i]` assigns row i to a group in
    /// `0..n_groups`. Accumulation runs in row order, so results are
    /// deterministic for a fixed row ordering.
    pub fn group_mean_rows(
        &mut self,
        a: Value,
        groups: Rc<Vec<usize>>,
        n_groups: usize,
    ) -> Result<Value> {
        let (n, m) = self.value(a).shape();
        if groups.len() != n {
            return Err(Error::Shape(format!(
                "group_mean_rows: {} group labels for {n} rows",
                groups.len()
            )));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in groups.iter() {
            if g >= n_groups {
                return Err(Error::Shape(format!(
                    "group_mean_rows: group {g} out of 0..{n_groups}"
                )));
            }
            counts[g] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Shape("group_mean_rows: empty group".into()));
        }
        let src = self.value(a);
        let mut v = Tensor::zeros(n_groups, m);
        for (i, &g) in groups.iter().enumerate() {
            let row = src.row(i).to_vec();
            let dst = v.row_mut(g);
            for (d, s) in dst.iter_mut().zip(&row) {
                *d += s;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            let inv = 1.0 / c as f64;
            for x in v.row_mut(g) {
                *x *= inv;
            }
        }
        Ok(self.push(
            v,
            Op::GroupMeanRows {
                input: a,
                groups,
                counts: Rc::new(counts),
            },
        ))
    }

    pub fn broadcast_rows(&mut self, a: Value, n: usize) -> Result<Value> {
        let (r, m) = self.value(a).shape();
        if r != 1 {
            return Err(Error::Shape(format!(
                "broadcast_rows: expected one row, got {r}"
            )));
        }
        let src = self.value(a).row(0).to_vec();
        let mut v = Tensor::zeros(n, m);
        for i in 0..n {
            v.row_mut(i).copy_from_slice(&src);
        }
        Ok(self.push(v, Op::BroadcastRows(a)))
    }

    pub fn mean_rows(&mut self, a: Value) -> Value {
        let (n, m) = self.value(a).shape();
        let src = self.value(a);
        let mut v = Tensor::zeros(1, m);
        for i in 0..n {
            for (d, s) in v.row_mut(0).iter_mut().zip(src.row(i)) {
                *d += s;
            }
        }
        v.scale_in_place(1.0 / n as f64);
        self.push(v, Op::MeanRows(a))
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let t = self.value(a);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(mean), Op::MeanAll(a))
    }

    pub fn elu(&mut self, a: Value) -> Value {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(v, Op::Elu(a))
    }

    pub fn softplus(&mut self, a: Value) -> Value {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// Mean squared difference over every entry -> [1,1].
    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mse", a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(sum / ta.len() as f64);
        Ok(self.push(v, Op::Mse(a, b)))
    }

    /// Inverted dropout. With `p = 0` this is the identity; the mask is
    /// drawn by the caller so the tape stays free of RNG state.
    pub fn dropout(&mut self, a: Value, p: f64, mask: Option<&[bool]>) -> Result<Value> {
        let t = self.value(a);
        let keep = if p == 0.0 {
            Tensor::from_vec(t.rows(), t.cols(), vec![1.0; t.len()])?
        } else {
            let mask = mask.ok_or_else(|| Error::Model("dropout with p > 0 needs a mask".into()))?;
            if mask.len() != t.len() {
                return Err(Error::Shape(format!(
                    "dropout mask length {} for tensor of {}",
                    mask.len(),
                    t.len()
                )));
            }
            let scale = 1.0 / (1.0 - p);
            Tensor::from_vec(
                t.rows(),
                t.cols(),
                mask.iter().map(|&k| if k { scale } else { 0.0 }).collect(),
            )?
        };
        let mut v = t.clone();
        for (x, k) in v.data_mut().iter_mut().zip(keep.data()) {
            *x *= k;
        }
        Ok(self.push(v, Op::Dropout(a, Rc::new(keep))))
    }

    /// Batch normalization with batch statistics; updates `stats` running
    /// averages as a side effect. Requires at least two rows.
    pub fn batchnorm_train(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        stats: &mut BnStats,
    ) -> Result<Value> {
        let (n, m) = self.value(x).shape();
        if n < 2 {
            return Err(Error::Model(
                "batchnorm in train mode requires batch size >= 2".into(),
            ));
        }
        self.check_bn_shapes(x, gamma, beta, stats)?;
        let xt = self.value(x);
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (mj, s) in mean.iter_mut().zip(xt.row(i)) {
                *mj += s;
            }
        }
        for mj in &mut mean {
            *mj /= n as f64;
        }
        let mut var = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let d = xt.get(i, j) - mean[j];
                var[j] += d * d;
            }
        }
        for vj in &mut var {
            *vj /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                x_hat.set(i, j, (xt.get(i, j) - mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out.set(i, j, g[j] * x_hat.get(i, j) + b[j]);
            }
        }
        // Unbiased variance feeds the running estimate.
        let bessel = n as f64 / (n as f64 - 1.0);
        for j in 0..m {
            stats.running_mean[j] = (1.0 - BN_MOMENTUM) * stats.running_mean[j] + BN_MOMENTUM * mean[j];
            stats.running_var[j] =
                (1.0 - BN_MOMENTUM) * stats.running_var[j] + BN_MOMENTUM * var[j] * bessel;
        }
        Ok(self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                inv_std: Rc::new(inv_std),
                x_hat: Rc::new(x_hat),
            },
        ))
    }

    /// Batch normalization over the rows of `x` with no side effects:
    /// instance statistics for inputs that carry their own population (one
    /// graph's edges or nodes). Identical in train and eval, so inference
    /// stays a pure function of the input.
    pub fn batchnorm_instance(&mut self, x: Value, gamma: Value, beta: Value) -> Result<Value> {
        let (n, _m) = self.value(x).shape();
        if n < 2 {
            return Err(Error::Model(
                "instance batchnorm requires at least two rows".into(),
            ));
        }
        let mut scratch = BnStats::new(self.value(x).cols());
        let gamma_t = gamma;
        let out = self.batchnorm_train(x, gamma_t, beta, &mut scratch)?;
        Ok(out)
    }

    /// Batch normalization with frozen running statistics: a deterministic
    /// affine map per column.
    pub fn batchnorm_eval(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        stats: &BnStats,
    ) -> Result<Value> {
        self.check_bn_shapes(x, gamma, beta, stats)?;
        let (n, m) = self.value(x).shape();
        let inv_std: Vec<f64> = stats
            .running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let xt = self.value(x);
        let mut x_hat = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                x_hat.set(i, j, (xt.get(i, j) - stats.running_mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out.set(i, j, g[j] * x_hat.get(i, j) + b[j]);
            }
        }
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std: Rc::new(inv_std),
                x_hat: Rc::new(x_hat),
            },
        ))
    }

    fn check_bn_shapes(&self, x: Value, gamma: Value, beta: Value, stats: &BnStats) -> Result<()> {
        let m = self.value(x).cols();
        if self.value(gamma).shape() != (1, m) || self.value(beta).shape() != (1, m) {
            return Err(Error::Shape(format!(
                "batchnorm: gamma {:?} / beta {:?} for {m} columns",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if stats.running_mean.len() != m || stats.running_var.len() != m {
            return Err(Error::Shape(format!(
                "batchnorm: running stats dim {} for {m} columns",
                stats.running_mean.len()
            )));
        }
        Ok(())
    }

    /// Backpropagates from a scalar loss. Visits nodes in reverse creation
    /// order (reverse topological order) exactly once.
    pub fn backward(&self, loss: Value) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward: loss must be 1x1, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Value, delta: Tensor) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                Self::accumulate(grads, *a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, s) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                Self::accumulate(grads, *row, dr);
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                let mut db = g.clone();
                db.scale_in_place(-1.0);
                Self::accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                for (x, y) in da.data_mut().iter_mut().zip(tb.data()) {
                    *x *= y;
                }
                let mut db = g.clone();
                for (x, y) in db.data_mut().iter_mut().zip(ta.data()) {
                    *x *= y;
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                for (x, y) in da.data_mut().iter_mut().zip(tb.data()) {
                    *x /= y;
                }
                let mut db = g.clone();
                for ((x, num), den) in db.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                    *x *= -num / (den * den);
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Scale(a, k) => {
                let mut da = g.clone();
                da.scale_in_place(*k);
                Self::accumulate(grads, *a, da);
            }
            Op::AddScalar(a) => {
                Self::accumulate(grads, *a, g.clone());
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    Self::accumulate(grads, p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let m = g.cols();
                    let mut dp = Tensor::zeros(rows, m);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(g.row(off + r));
                    }
                    off += rows;
                    Self::accumulate(grads, p, dp);
                }
            }
            Op::Reshape(a) => {
                let (n, m) = self.value(*a).shape();
                let da = Tensor::from_vec(n, m, g.data().to_vec()).expect("same length");
                Self::accumulate(grads, *a, da);
            }
            Op::SliceCols(a, start, _end) => {
                let (n, m) = self.value(*a).shape();
                let mut da = Tensor::zeros(n, m);
                for r in 0..n {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                Self::accumulate(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let (n, m) = self.value(*a).shape();
                let mut da = Tensor::zeros(n, m);
                for (out_i, &src_i) in idx.iter().enumerate() {
                    let src = g.row(out_i).to_vec();
                    for (d, s) in da.row_mut(src_i).iter_mut().zip(&src) {
                        *d += s;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::GroupMeanRows {
                input,
                groups,
                counts,
            } => {
                let (n, m) = self.value(*input).shape();
                let mut da = Tensor::zeros(n, m);
                for (i, &grp) in groups.iter().enumerate() {
                    let inv = 1.0 / counts[grp] as f64;
                    let src = g.row(grp).to_vec();
                    for (d, s) in da.row_mut(i).iter_mut().zip(&src) {
                        *d += inv * s;
                    }
                }
                Self::accumulate(grads, *input, da);
            }
            Op::BroadcastRows(a) => {
                let mut da = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, s) in da.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::MeanRows(a) => {
                let (n, m) = self.value(*a).shape();
                let inv = 1.0 / n as f64;
                let mut da = Tensor::zeros(n, m);
                for r in 0..n {
                    for (d, s) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = inv * s;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let k = g.item() / t.len() as f64;
                let da = Tensor::from_vec(t.rows(), t.cols(), vec![k; t.len()])
                    .expect("shape verified");
                Self::accumulate(grads, *a, da);
            }
            Op::Elu(a) => {
                let y = &self.nodes[i].value;
                let mut da = g.clone();
                for (x, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                    *x *= if yv > 0.0 { 1.0 } else { yv + 1.0 };
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let t = self.value(*a);
                let mut da = g.clone();
                for (x, &xin) in da.data_mut().iter_mut().zip(t.data()) {
                    *x *= sigmoid(xin);
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let mut da = g.clone();
                for (x, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                    *x *= yv * (1.0 - yv);
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let mut da = g.clone();
                for (x, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                    *x *= 1.0 - yv * yv;
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let mut da = g.clone();
                for (x, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                    *x *= yv;
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let t = self.value(*a);
                let mut da = g.clone();
                for (x, &xin) in da.data_mut().iter_mut().zip(t.data()) {
                    *x /= xin;
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / ta.len() as f64;
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                for ((d, x), y) in da.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                    *d = k * (x - y);
                }
                let mut db = da.clone();
                db.scale_in_place(-1.0);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Dropout(a, keep) => {
                let mut da = g.clone();
                for (x, k) in da.data_mut().iter_mut().zip(keep.data()) {
                    *x *= k;
                }
                Self::accumulate(grads, *a, da);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                inv_std,
                x_hat,
            } => {
                let (n, m) = x_hat.shape();
                let gam = self.value(*gamma).row(0).to_vec();
                let mut dgamma = Tensor::zeros(1, m);
                let mut dbeta = Tensor::zeros(1, m);
                let mut sum_g = vec![0.0; m];
                let mut sum_gx = vec![0.0; m];
                for r in 0..n {
                    for j in 0..m {
                        let gij = g.get(r, j);
                        sum_g[j] += gij;
                        sum_gx[j] += gij * x_hat.get(r, j);
                    }
                }
                for j in 0..m {
                    dgamma.set(0, j, sum_gx[j]);
                    dbeta.set(0, j, sum_g[j]);
                }
                let nf = n as f64;
                let mut dx = Tensor::zeros(n, m);
                for r in 0..n {
                    for j in 0..m {
                        let term = nf * g.get(r, j) - sum_g[j] - x_hat.get(r, j) * sum_gx[j];
                        dx.set(r, j, gam[j] * inv_std[j] / nf * term);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                x_hat,
            } => {
                let (n, m) = x_hat.shape();
                let gam = self.value(*gamma).row(0).to_vec();
                let mut dx = Tensor::zeros(n, m);
                let mut dgamma = Tensor::zeros(1, m);
                let mut dbeta = Tensor::zeros(1, m);
                for r in 0..n {
                    for j in 0..m {
                        let gij = g.get(r, j);
                        dx.set(r, j, gij * gam[j] * inv_std[j]);
                        dgamma.set(0, j, dgamma.get(0, j) + gij * x_hat.get(r, j));
                        dbeta.set(0, j, dbeta.get(0, j) + gij);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_softplus_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![0.0, 1.0, -10.0]));
        let y = tape.elu(x);
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - (-0.9999546000702375)).abs() < 1e-9);

        let s = tape.softplus(x);
        assert!((tape.value(s).get(0, 0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn diamond_graph_accumulates() {
        // f = (x + y) * (x + y), df/dx = 2(x + y)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = tape.leaf(Tensor::scalar(0.5));
        let s = tape.add(x, y).unwrap();
        let f = tape.mul(s, s).unwrap();
        let grads = tape.backward(f).unwrap();
        assert!((grads.get(x).unwrap().item() - 4.0).abs() < 1e-12);
        assert!((grads.get(y).unwrap().item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 2));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)") && err.contains("(2, 2)"), "{err}");
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 4));
        let gamma = tape.leaf(Tensor::row_vector(vec![1.0; 4]));
        let beta = tape.leaf(Tensor::row_vector(vec![0.0; 4]));
        let mut stats = BnStats::new(4);
        assert!(tape.batchnorm_train(x, gamma, beta, &mut stats).is_err());
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
        let gamma = tape.leaf(Tensor::row_vector(vec![2.0, 0.5]));
        let beta = tape.leaf(Tensor::row_vector(vec![1.0, -1.0]));
        let stats = BnStats {
            running_mean: vec![0.5, 1.5],
            running_var: vec![4.0, 1.0],
        };
        let y = tape.batchnorm_eval(x, gamma, beta, &stats).unwrap();
        let expect = |xv: f64, m: f64, v: f64, g: f64, b: f64| g * (xv - m) / (v + BN_EPS).sqrt() + b;
        for i in 0..3 {
            assert!(
                (tape.value(y).get(i, 0) - expect((i) as f64, 0.5, 4.0, 2.0, 1.0)).abs() < 1e-12
            );
            assert!(
                (tape.value(y).get(i, 1) - expect((i + 1) as f64, 1.5, 1.0, 0.5, -1.0)).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn group_mean_matches_brute_force() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(6, 3, |i, j| (i * 3 + j) as f64 * 0.7));
        let groups = Rc::new(vec![0, 1, 0, 1, 0, 1]);
        let y = tape.group_mean_rows(x, groups.clone(), 2).unwrap();
        for g in 0..2 {
            for j in 0..3 {
                let member_rows: Vec<usize> =
                    (0..6).filter(|&i| groups[i] == g).collect();
                let mean: f64 = member_rows
                    .iter()
                    .map(|&i| tape.value(x).get(i, j))
                    .sum::<f64>()
                    / member_rows.len() as f64;
                assert!((tape.value(y).get(g, j) - mean).abs() < 1e-12);
            }
        }
    }
}
