use super::{masked_softmax_into, sigmoid, softplus, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `m x n` plus a `1 x n` row added to every row.
    AddRow(Var, Var),
    /// `m x n` with row `i` scaled by entry `i` of an `m x 1` column.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Column(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad`; `None` otherwise.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
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

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `tensor` as a leaf; it receives a gradient iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        let (r, c) = tensor.dims2()?;
        Ok(self.push(r, c, tensor.data().to_vec(), Op::Leaf, tensor.requires_grad()))
    }

    /// A leaf that requires a gradient.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.new_leaf(rows, cols, data, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.new_leaf(rows, cols, data, false)
    }

    fn new_leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(TensorError::Invalid(format!(
                "{rows}x{cols} leaf given {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.data.clone()).expect("node shape is consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), g))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", (m, k), (n, k2)));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    out[i * n + j] = dot(arow, brow);
                }
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let g = self.grad_of(&[a]);
        self.push(n, m, out, Op::Transpose(a), g)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(shape_err(name, da, db));
        }
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(da.0, da.1, out, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let db = self.dims(b);
        if db != (1, n) {
            return Err(shape_err("add_row", (m, n), db));
        }
        let bd = &self.node(b).data;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .map(|(idx, x)| x + bd[idx % n])
            .collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::AddRow(a, b), g))
    }

    /// Scales row `i` of `a` by entry `i` of the `m x 1` column `b`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let db = self.dims(b);
        if db != (m, 1) {
            return Err(shape_err("mul_col", (m, n), db));
        }
        let bd = &self.node(b).data;
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .enumerate()
            .map(|(idx, x)| x * bd[idx / n])
            .collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(m, n, out, Op::MulCol(a, b), g))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.node(a).data.iter().map(|x| f(*x)).collect();
        let g = self.grad_of(&[a]);
        self.push(m, n, out, op, g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_op(a, softplus, Op::Softplus(a))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.node(a).data.iter().any(|x| *x <= 0.0 || !x.is_finite()) {
            return Err(TensorError::NonFinite("log of non-positive value".into()));
        }
        Ok(self.map_op(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x * x, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid("concat_cols of nothing".into()));
        };
        let m = self.dims(first).0;
        let mut n = 0;
        for &p in parts {
            let dp = self.dims(p);
            if dp.0 != m {
                return Err(shape_err("concat_cols", self.dims(first), dp));
            }
            n += dp.1;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let node = self.node(p);
                out.extend_from_slice(&node.data[i * node.cols..(i + 1) * node.cols]);
            }
        }
        let g = self.grad_of(parts);
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut m = 0;
        for &p in parts {
            let dp = self.dims(p);
            if dp.1 != n {
                return Err(shape_err("concat_rows", self.dims(first), dp));
            }
            m += dp.0;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(&self.node(p).data);
        }
        let g = self.grad_of(parts);
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Output row `t` is row `idx[t]` of `a`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", (m, n), (bad, n)));
        }
        let ad = &self.node(a).data;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&ad[i * n..(i + 1) * n]);
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(idx.len(), n, out, Op::GatherRows(a, idx.to_vec()), g))
    }

    /// Places flat entry `t` of `a` at flat position `positions[t]` of a
    /// zero `rows x cols` output. Positions must be distinct.
    pub fn scatter(&mut self, a: Var, positions: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let src = &self.node(a).data;
        if src.len() != positions.len() {
            return Err(shape_err("scatter", self.dims(a), (positions.len(), 1)));
        }
        let mut out = vec![0.0; rows * cols];
        for (&p, &v) in positions.iter().zip(src) {
            if p >= out.len() {
                return Err(shape_err("scatter", (rows, cols), (p, 1)));
            }
            out[p] = v;
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(rows, cols, out, Op::Scatter(a, positions.to_vec()), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.node(a).data.iter().fold(0.0, |acc, x| acc + x);
        let g = self.grad_of(&[a]);
        self.push(1, 1, vec![total], Op::Sum(a), g)
    }

    /// Column-wise mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&ad[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        let g = self.grad_of(&[a]);
        self.push(1, n, out, Op::MeanRows(a), g)
    }

    /// Row-wise softmax. `mask`, when given, has one entry per column and
    /// applies to every row; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        let full;
        let mask = match mask {
            Some(mk) => {
                if mk.len() != n {
                    return Err(shape_err("softmax_rows", (m, n), (1, mk.len())));
                }
                mk
            }
            None => {
                full = vec![true; n];
                &full
            }
        };
        let mut out = vec![0.0; m * n];
        let ad = &self.node(a).data;
        for i in 0..m {
            masked_softmax_into(&ad[i * n..(i + 1) * n], mask, &mut out[i * n..(i + 1) * n])?;
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(m, n, out, Op::SoftmaxRows(a), g))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().fold(0.0, |acc, x| acc + (x - max).exp()).ln();
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::LogSoftmaxRows(a), g)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without an
    /// affine transform.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.dims(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mean = row.iter().fold(0.0, |acc, x| acc + x) / n as f64;
            let var = row.iter().fold(0.0, |acc, x| acc + (x - mean) * (x - mean)) / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let g = self.grad_of(&[a]);
        self.push(m, n, out, Op::LayerNormRows(a, inv_std), g)
    }

    /// Column `j` as an `m x 1` tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if j >= n {
            return Err(shape_err("column", (m, n), (m, j)));
        }
        let ad = &self.node(a).data;
        let out: Vec<f64> = (0..m).map(|i| ad[i * n + j]).collect();
        let g = self.grad_of(&[a]);
        Ok(self.push(m, 1, out, Op::Column(a, j), g))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.rows * ln.cols != 1 {
            return Err(TensorError::NotScalar(vec![ln.rows, ln.cols]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let ad = self.value(*a);
                let bd = self.value(*b);
                if self.node(*a).needs_grad {
                    let da = slot(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let ad = self.value(*a);
                let bd = self.value(*b);
                if self.node(*a).needs_grad {
                    let da = slot(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for (d, bv) in da[i * k..(i + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *d += gv * bv;
                            }
                        }
                    }
                }
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                *d += gv * av;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                if self.node(*a).needs_grad {
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |t| g[t]);
                self.accumulate(grads, *b, |t| g[t]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |t| g[t]);
                self.accumulate(grads, *b, |t| -g[t]);
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b);
                let ad = self.value(*a);
                self.accumulate(grads, *a, |t| g[t] * bd[t]);
                self.accumulate(grads, *b, |t| g[t] * ad[t]);
            }
            Op::Div(a, b) => {
                let bd = self.value(*b);
                self.accumulate(grads, *a, |t| g[t] / bd[t]);
                self.accumulate(grads, *b, |t| -g[t] * out[t] / bd[t]);
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |t| g[t]);
                let n = node.cols;
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, n);
                    for (t, gv) in g.iter().enumerate() {
                        db[t % n] += gv;
                    }
                }
            }
            Op::MulCol(a, b) => {
                let n = node.cols;
                let bd = self.value(*b);
                let ad = self.value(*a);
                self.accumulate(grads, *a, |t| g[t] * bd[t / n]);
                if self.node(*b).needs_grad {
                    let db = slot(grads, *b, node.rows);
                    for (t, gv) in g.iter().enumerate() {
                        db[t / n] += gv * ad[t];
                    }
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |t| g[t] * s),
            Op::AddScalar(a) => self.accumulate(grads, *a, |t| g[t]),
            Op::Tanh(a) => self.accumulate(grads, *a, |t| g[t] * (1.0 - out[t] * out[t])),
            Op::Softplus(a) => {
                let ad = self.value(*a);
                self.accumulate(grads, *a, |t| g[t] * sigmoid(ad[t]));
            }
            Op::Log(a) => {
                let ad = self.value(*a);
                self.accumulate(grads, *a, |t| g[t] / ad[t]);
            }
            Op::Square(a) => {
                let ad = self.value(*a);
                self.accumulate(grads, *a, |t| 2.0 * g[t] * ad[t]);
            }
            Op::ConcatCols(parts) => {
                let m = node.rows;
                let n = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.node(p).cols;
                    if self.node(p).needs_grad {
                        let dp = slot(grads, p, m * pc);
                        for i in 0..m {
                            for (d, gv) in dp[i * pc..(i + 1) * pc]
                                .iter_mut()
                                .zip(&g[i * n + offset..i * n + offset + pc])
                            {
                                *d += gv;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).data.len();
                    if self.node(p).needs_grad {
                        let dp = slot(grads, p, len);
                        for (d, gv) in dp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.node(*a).needs_grad {
                    let (m, n) = self.dims(*a);
                    let da = slot(grads, *a, m * n);
                    for (t, &i) in idx.iter().enumerate() {
                        for (d, gv) in da[i * n..(i + 1) * n].iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scatter(a, positions) => {
                self.accumulate(grads, *a, |t| g[positions[t]]);
            }
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                let inv = 1.0 / m as f64;
                self.accumulate(grads, *a, |t| g[t % n] * inv);
            }
            Op::SoftmaxRows(a) => {
                if self.node(*a).needs_grad {
                    let (m, n) = (node.rows, node.cols);
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let inner = dot(y, gr);
                        for ((d, yv), gv) in da[i * n..(i + 1) * n].iter_mut().zip(y).zip(gr) {
                            *d += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.node(*a).needs_grad {
                    let (m, n) = (node.rows, node.cols);
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let total = gr.iter().fold(0.0, |acc, x| acc + x);
                        for ((d, yv), gv) in da[i * n..(i + 1) * n].iter_mut().zip(y).zip(gr) {
                            *d += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNormRows(a, inv_std) => {
                if self.node(*a).needs_grad {
                    let (m, n) = (node.rows, node.cols);
                    let nf = n as f64;
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        let y = &out[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean_g = gr.iter().fold(0.0, |acc, x| acc + x) / nf;
                        let mean_gy = dot(gr, y) / nf;
                        for ((d, yv), gv) in da[i * n..(i + 1) * n].iter_mut().zip(y).zip(gr) {
                            *d += inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Column(a, j) => {
                if self.node(*a).needs_grad {
                    let (m, n) = self.dims(*a);
                    let da = slot(grads, *a, m * n);
                    for i in 0..m {
                        da[i * n + j] += g[i];
                    }
                }
            }
        }
    }

    /// `grad[a][t] += f(t)` over every entry of `a`.
    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], a: Var, f: impl Fn(usize) -> f64) {
        let node = self.node(a);
        if !node.needs_grad {
            return;
        }
        let len = node.data.len();
        let da = slot(grads, a, len);
        for (t, d) in da.iter_mut().enumerate() {
            *d += f(t);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn mat(tape: &mut Tape, r: usize, c: usize, data: &[f64]) -> Var {
        tape.param(r, c, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let a = t.constant(1, 1, vec![2.0]).unwrap();
        let b = t.constant(1, 1, vec![3.0]).unwrap();
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 5 % 9) as f64 - 4.0) / 2.0).collect();
        let mut reference = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                reference[i * 2 + j] = s;
            }
        }
        let mut t = Tape::new();
        let va = t.constant(3, 4, a).unwrap();
        let vb = t.constant(4, 2, b).unwrap();
        let p = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(p).iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_reference_values() {
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![0.0, 0.0, 50.0]).unwrap();
        let th = t.tanh(x);
        assert_eq!(t.value(th)[0], 0.0);
        let sp = t.softplus(x);
        assert!((t.value(sp)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.value(sp)[2] - 50.0).abs() < 1e-12);
        let y = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(t.add(x, y).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = mat(&mut t, 2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 1, &[3.0]);
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 2, &[1.0, 2.0]);
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap_err(), TensorError::NotScalar(vec![1, 2]));
    }

    #[test]
    fn fan_out_accumulates() {
        let single = {
            let mut t = Tape::new();
            let x = mat(&mut t, 1, 2, &[0.3, -0.7]);
            let y = t.tanh(x);
            let s = t.sum(y);
            t.backward(s).unwrap().get(x).unwrap().to_vec()
        };
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 2, &[0.3, -0.7]);
        let uses: Vec<Var> = (0..4).map(|_| t.tanh(x)).collect();
        let mut acc = uses[0];
        for &u in &uses[1..] {
            acc = t.add(acc, u).unwrap();
        }
        let s = t.sum(acc);
        let g = t.backward(s).unwrap();
        for (a, b) in g.get(x).unwrap().iter().zip(&single) {
            assert!((a - 4.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 2, &[1.0, 2.0]);
        let unused = mat(&mut t, 2, 2, &[1.0; 4]);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_rows_standardizes() {
        let mut t = Tape::new();
        let x = t.constant(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap();
        let y = t.layer_norm_rows(x, 0.0);
        for row in t.value(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scatter_and_gather_roundtrip_values() {
        let mut t = Tape::new();
        let x = t.constant(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.scatter(x, &[1, 2, 5], 2, 3).unwrap();
        assert_eq!(t.value(s), &[0.0, 1.0, 2.0, 0.0, 0.0, 3.0]);
        let m = t.constant(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(m, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(t.gather_rows(m, &[3]).is_err());
    }

    /// Every op, composed into a scalar, against central differences at
    /// ten pseudo-random points.
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = fn(&mut Tape, Var) -> Result<Var>;
        let cases: Vec<(&str, usize, usize, Build)> = vec![
            ("matmul", 3, 4, |t, x| {
                let w = t.constant(4, 2, (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect())?;
                let y = t.matmul(x, w)?;
                let w2 = t.constant(2, 3, (0..6).map(|i| (i as f64 - 2.0) / 3.0).collect())?;
                let z = t.matmul(w2, x)?;
                let a = t.square(y);
                let b = t.square(z);
                let sa = t.sum(a);
                let sb = t.sum(b);
                t.add(sa, sb)
            }),
            ("matmul_nt", 3, 4, |t, x| {
                let w = t.constant(2, 4, (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect())?;
                let y = t.matmul_nt(x, w)?;
                let self_prod = t.matmul_nt(x, x)?;
                let a = t.tanh(y);
                let sa = t.sum(a);
                let sb = t.sum(self_prod);
                t.add(sa, sb)
            }),
            ("transpose", 2, 3, |t, x| {
                let xt = t.transpose(x);
                let w = t.constant(3, 2, vec![1.0, -2.0, 0.5, 0.3, 2.0, -1.0])?;
                let y = t.mul(xt, w)?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("add_sub_mul_div", 2, 3, |t, x| {
                let c = t.constant(2, 3, vec![1.5, 2.0, 3.0, 1.2, 2.2, 4.0])?;
                let a = t.add(x, c)?;
                let b = t.sub(a, x)?;
                let p = t.mul(x, a)?;
                let q = t.div(p, c)?;
                let r = t.div(c, a)?;
                let s = t.add(q, b)?;
                let s = t.add(s, r)?;
                Ok(t.sum(s))
            }),
            ("add_row_mul_col", 3, 2, |t, x| {
                let row = t.mean_rows(x);
                let y = t.add_row(x, row)?;
                let col = t.column(x, 1)?;
                let z = t.mul_col(y, col)?;
                let z = t.scale(z, 0.7);
                let z = t.add_scalar(z, 0.3);
                let z = t.square(z);
                Ok(t.sum(z))
            }),
            ("tanh_softplus_log", 2, 2, |t, x| {
                let a = t.tanh(x);
                let b = t.softplus(x);
                let c = t.log(b)?;
                let s = t.add(a, c)?;
                Ok(t.sum(s))
            }),
            ("concat_gather_scatter", 3, 2, |t, x| {
                let sq = t.square(x);
                let c = t.concat_cols(&[x, sq])?;
                let r = t.concat_rows(&[c, c])?;
                let g = t.gather_rows(r, &[0, 5, 5, 2])?;
                let col = t.column(g, 3)?;
                let s = t.scatter(col, &[0, 3, 4, 7], 2, 4)?;
                let s = t.tanh(s);
                let s2 = t.tanh(g);
                let a = t.sum(s);
                let b = t.sum(s2);
                t.add(a, b)
            }),
            ("softmax", 2, 4, |t, x| {
                let p = t.softmax_rows(x, Some(&[true, false, true, true]))?;
                let w = t.constant(2, 4, vec![0.1, 2.0, -1.0, 0.5, 1.5, -0.3, 0.2, 0.9])?;
                let y = t.mul(p, w)?;
                let l = t.log_softmax_rows(x);
                let z = t.mul(l, w)?;
                let a = t.sum(y);
                let b = t.sum(z);
                t.add(a, b)
            }),
            ("layer_norm", 2, 5, |t, x| {
                let y = t.layer_norm_rows(x, 1e-5);
                let w = t.constant(2, 5, (0..10).map(|i| (i as f64 * 0.37).sin()).collect())?;
                let z = t.mul(y, w)?;
                let z = t.tanh(z);
                Ok(t.sum(z))
            }),
        ];
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for (name, r, c, f) in cases {
            for _ in 0..10 {
                let data: Vec<f64> = (0..r * c).map(|_| next()).collect();
                let point = Tensor::matrix(r, c, data).unwrap();
                let err = grad_check(f, &point, 1e-5).unwrap();
                assert!(err < 1e-4, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(3, 3, (0..9).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
            let y = t.matmul_nt(x, x).unwrap();
            let p = t.softmax_rows(y, None).unwrap();
            let n = t.layer_norm_rows(p, 1e-6);
            t.value(n).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
