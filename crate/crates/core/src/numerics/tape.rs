//! Reverse-mode gradient tape over 2-D `f64` matrices.
//!
//! Every value on the tape is a matrix; vectors are `1 x n` rows and scalars
//! are `1 x 1`. Parameters are borrowed from a [`ParamStore`] rather than
//! copied, so a tape lives no longer than the store it reads.

use std::collections::HashMap;

use super::{Gradients, NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Embedding(Var, Vec<usize>),
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedFill(Var, Vec<bool>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Probabilities fed to `log` are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
const PROB_FLOOR: f64 = 1e-15;

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<'p> Tape<'p> {
    /// A tape whose parameter leaves receive gradients.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape for forward-only evaluation; `backward` yields no gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.value(*id).data(),
        }
    }

    /// Copies a node's value out as a `rows x cols` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node value matches its shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, NumericsError> {
        if rows * cols != data.len() {
            return Err(NumericsError::DataLength {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = self.store.value(id);
        self.nodes.push(Node {
            rows: t.rows(),
            cols: t.cols(),
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var, NumericsError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        Ok(self.param(id))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        NumericsError::ShapeMismatch {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), ng))
    }

    /// `a (n x k) * b^T` where `b` is `m x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(n, m, out, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(self.shape(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(self.mismatch("add_row", a, row));
        }
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(m.max(1)) {
            chunk.iter_mut().zip(rv).for_each(|(x, b)| *x += b);
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(n, m, out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Scale(a, factor), ng)
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput("concat_rows"))?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += self.shape(p).0;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Places matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::EmptyInput("concat_cols"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
            cols += self.shape(p).1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(NumericsError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(NumericsError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (vocab, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::OutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(ids.len(), d, out, Op::Embedding(table, ids.to_vec()), ng))
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability exactly zero;
    /// a row with no finite entry is rejected.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            let max = row.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::FullyMasked { row: i });
            }
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let ng = self.needs(a);
        Ok(self.push(r, c, out, Op::Softmax(a), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != (1, d) {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            n,
            d,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_fill",
                left: vec![r, c],
                right: vec![mask.len()],
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let ng = self.needs(a);
        Ok(self.push(r, c, out, Op::MaskedFill(a, mask.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (n, v) = self.shape(logits);
        if targets.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![n, v],
                right: vec![targets.len()],
            });
        }
        if n == 0 {
            return Err(NumericsError::EmptyInput("cross_entropy"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let t = targets[i];
            if t >= v {
                return Err(NumericsError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[t];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![loss / n as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `-sum(t * ln p + (1 - t) * ln(1 - p))` over all entries.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        let (r, c) = self.shape(probs);
        if targets.len() != r * c {
            return Err(NumericsError::ShapeMismatch {
                op: "binary_cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        let loss = self
            .value(probs)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let ng = self.needs(probs);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NumericsError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Vec<f64>> = (0..=loss.0).map(|_| Vec::new()).collect();
        grads[loss.0] = vec![1.0];
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = cols;
                    if self.needs(*a) {
                        let ga = grad_buf(&mut grads, *a, n * k);
                        gemm(n, m, k, &g, false, self.value(*b), true, ga, 1.0);
                    }
                    if self.needs(*b) {
                        let gb = grad_buf(&mut grads, *b, k * m);
                        gemm_at(k, n, m, self.value(*a), &g, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = cols;
                    if self.needs(*a) {
                        let ga = grad_buf(&mut grads, *a, n * k);
                        gemm(n, m, k, &g, false, self.value(*b), false, ga, 1.0);
                    }
                    if self.needs(*b) {
                        let gb = grad_buf(&mut grads, *b, m * k);
                        gemm_at(m, n, k, &g, self.value(*a), gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            add_into(grad_buf(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        add_into(grad_buf(&mut grads, *a, g.len()), &g);
                    }
                    if self.needs(*b) {
                        let gb = grad_buf(&mut grads, *b, g.len());
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b);
                        let ga = grad_buf(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let gb = grad_buf(&mut grads, *b, g.len());
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*a) {
                        add_into(grad_buf(&mut grads, *a, g.len()), &g);
                    }
                    if self.needs(*row) {
                        let gr = grad_buf(&mut grads, *row, cols);
                        for chunk in g.chunks(cols.max(1)) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = grad_buf(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += f * y);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.shape(p).0 * cols;
                        if self.needs(p) {
                            add_into(grad_buf(&mut grads, p, len), &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col0 = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        if self.needs(p) {
                            let gp = grad_buf(&mut grads, p, rows * pc);
                            for r in 0..rows {
                                add_into(&mut gp[r * pc..(r + 1) * pc], &g[r * cols + col0..r * cols + col0 + pc]);
                            }
                        }
                        col0 += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let total = self.shape(*a).0 * cols;
                    let ga = grad_buf(&mut grads, *a, total);
                    add_into(&mut ga[start * cols..(start + rows) * cols], &g);
                }
                Op::SliceCols(a, start) => {
                    let ac = self.shape(*a).1;
                    let ga = grad_buf(&mut grads, *a, rows * ac);
                    for r in 0..rows {
                        add_into(&mut ga[r * ac + start..r * ac + start + cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Transpose(a) => {
                    let ga = grad_buf(&mut grads, *a, rows * cols);
                    // node is rows x cols, input is cols x rows
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] += g[r * cols + c];
                        }
                    }
                }
                Op::Embedding(table, ids) => {
                    let total = self.shape(*table).0 * cols;
                    let gt = grad_buf(&mut grads, *table, total);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value(Var(i));
                    let ga = grad_buf(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i));
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = cols;
                    let gv = self.value(*gain);
                    if self.needs(*gain) {
                        let gg = grad_buf(&mut grads, *gain, d);
                        for r in 0..rows {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let gb = grad_buf(&mut grads, *bias, d);
                        for chunk in g.chunks(d.max(1)) {
                            add_into(gb, chunk);
                        }
                    }
                    if self.needs(*x) {
                        let gx = grad_buf(&mut grads, *x, rows * d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for c in 0..d {
                                dxhat[c] = g[r * d + c] * gv[c];
                                sum_d += dxhat[c];
                                sum_dx += dxhat[c] * xhat[r * d + c];
                            }
                            let scale = inv_std[r] / d as f64;
                            for c in 0..d {
                                gx[r * d + c] +=
                                    scale * (d as f64 * dxhat[c] - sum_d - xhat[r * d + c] * sum_dx);
                            }
                        }
                    }
                }
                Op::MaskedFill(a, mask) => {
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for j in 0..g.len() {
                        if !mask[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = grad_buf(&mut grads, *a, r * c);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let n = (r * c).max(1) as f64;
                    let ga = grad_buf(&mut grads, *a, r * c);
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let (n, v) = self.shape(*logits);
                    let gl = grad_buf(&mut grads, *logits, n * v);
                    let w = g[0] / n as f64;
                    for r in 0..n {
                        for c in 0..v {
                            let onehot = if targets[r] == c { 1.0 } else { 0.0 };
                            gl[r * v + c] += w * (probs[r * v + c] - onehot);
                        }
                    }
                }
                Op::Bce { probs, targets } => {
                    let pv = self.value(*probs);
                    let gp = grad_buf(&mut grads, *probs, pv.len());
                    for j in 0..pv.len() {
                        let p = pv[j].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        let t = targets[j];
                        gp[j] += g[0] * (-t / p + (1.0 - t) / (1.0 - p));
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn grad_buf(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let buf = &mut grads[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; len];
    }
    buf
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `n x k` and `op(b)` of
/// shape `k x m`; `a` is stored row-major as `n x k`, `b` as `k x m` or, when
/// `b_t`, as `m x k`.
#[allow(clippy::too_many_arguments)]
fn gemm(n: usize, k: usize, m: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if n == 0 || m == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (m as isize, 1) };
    // SAFETY: slice lengths cover n*k, k*m and n*m elements under the strides above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c += a^T * b` where `a` is `k x n` and `b` is `k x m`, giving `n x m`.
/// Arguments follow the output shape: `(n, k, m)`.
fn gemm_at(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(n, k, m, a, true, b, false, c, 1.0);
}
