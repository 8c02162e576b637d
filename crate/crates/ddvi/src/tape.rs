//! Reverse-mode automatic differentiation over a flat tape of f64 tensors.
//!
//! A `Graph` is rebuilt from scratch for every objective evaluation: leaves
//! are registered, operations append nodes holding their output values, and
//! `backward` replays the tape in reverse. Node ids grow monotonically, so a
//! single reverse sweep visits every node exactly once and each input always
//! has a smaller id than its consumer.
//!
//! Tensors are row-major with rank 0 (scalar), 1 (vector) or 2 (matrix).
//! Elementwise binaries accept equal shapes or one scalar operand, which is
//! broadcast. All iteration orders are fixed, so identical graphs produce
//! bit-identical values and gradients.

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sqrt(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Reshape(Var),
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    BcastRow { v: Var, rows: usize },
    BcastCol { v: Var, cols: usize },
    AddDiag(Var),
    Matmul(Var, Var),
    Cholesky(Var),
    TriSolve { l: Var, b: Var, transpose: bool },
    DiagPart(Var),
    RowLogsumexp(Var),
    SelectCols { m: Var, idx: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- leaves -----------------------------------------------------------

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Var {
        assert_eq!(numel(shape), values.len(), "param data does not fill shape");
        self.push(shape.to_vec(), values, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Var {
        assert_eq!(numel(shape), values.len(), "constant data does not fill shape");
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&[], vec![v])
    }

    // ---- accessors --------------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(numel(&self.nodes[v.0].shape), 1, "not a scalar node");
        self.nodes[v.0].values[0]
    }

    /// Gradient of the last `backward` root with respect to `v`. Zero vector
    /// if the node did not participate.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].values.len()],
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        let shapes: Vec<String> = vars.iter().map(|v| format!("{:?}", self.shape(*v))).collect();
        Error::ShapeMismatch {
            op,
            details: shapes.join(" vs "),
        }
    }

    // ---- elementwise binaries --------------------------------------------

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 && numel(sb) == 1 {
            // Single-element operands of different ranks: keep the higher
            // rank so a [1,1] gram times a scalar stays a matrix.
            Ok(if sa.len() >= sb.len() { sa.to_vec() } else { sb.to_vec() })
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(self.shape_err(op, &[a, b]))
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.values(a), self.values(b));
        match (va.len(), vb.len()) {
            (1, n) if n != 1 => vb.iter().map(|y| f(va[0], *y)).collect(),
            (_, 1) if va.len() != 1 => va.iter().map(|x| f(*x, vb[0])).collect(),
            _ => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let vals = self.zip(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, vals, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let vals = self.zip(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, vals, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let vals = self.zip(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, vals, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("div", a, b)?;
        let vals = self.zip(a, b, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, vals, Op::Div(a, b), ng))
    }

    // ---- unaries ----------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let vals = self.values(x).iter().map(|v| f(*v)).collect();
        let ng = self.needs(x);
        self.push(shape, vals, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| if v > c { v } else { c }, Op::ClampMin(x, c))
    }

    // ---- reductions and layout -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.values(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![], vec![total], Op::Sum(x), ng)
    }

    /// Column sums of an r x c matrix: out[j] = sum_i m[i,j].
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix_dims("sum_rows", x)?;
        let v = self.values(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![c], out, Op::SumRows(x), ng))
    }

    /// Row sums of an r x c matrix: out[i] = sum_j m[i,j].
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix_dims("sum_cols", x)?;
        let v = self.values(x);
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = v[i * c..(i + 1) * c].iter().sum();
        }
        let ng = self.needs(x);
        Ok(self.push(vec![r], out, Op::SumCols(x), ng))
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<[usize; 2]> {
        match self.shape(x) {
            [r, c] => Ok([*r, *c]),
            _ => Err(self.shape_err(op, &[x])),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix_dims("transpose", x)?;
        let vals = linalg::transpose(self.values(x), r, c);
        let ng = self.needs(x);
        Ok(self.push(vec![c, r], vals, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.values(x).len() {
            return Err(self.shape_err("reshape", &[x]));
        }
        let vals = self.values(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape.to_vec(), vals, Op::Reshape(x), ng))
    }

    /// Contiguous range of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = match self.shape(x) {
            [n] => *n,
            _ => return Err(self.shape_err("slice", &[x])),
        };
        if start + len > n {
            return Err(Error::Invalid(format!(
                "slice {start}..{} out of bounds for vector of length {n}",
                start + len
            )));
        }
        let vals = self.values(x)[start..start + len].to_vec();
        let ng = self.needs(x);
        Ok(self.push(vec![len], vals, Op::Slice { x, start }, ng))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let mut vals = Vec::new();
        let mut ng = false;
        for &x in xs {
            if self.shape(x).len() > 1 {
                return Err(self.shape_err("concat", &[x]));
            }
            vals.extend_from_slice(self.values(x));
            ng |= self.needs(x);
        }
        let n = vals.len();
        Ok(self.push(vec![n], vals, Op::Concat(xs.to_vec()), ng))
    }

    /// Repeats a length-c vector as every row of a rows x c matrix.
    pub fn bcast_row(&mut self, v: Var, rows: usize) -> Result<Var> {
        let c = match self.shape(v) {
            [c] => *c,
            _ => return Err(self.shape_err("bcast_row", &[v])),
        };
        let src = self.values(v);
        let mut vals = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            vals.extend_from_slice(src);
        }
        let ng = self.needs(v);
        Ok(self.push(vec![rows, c], vals, Op::BcastRow { v, rows }, ng))
    }

    /// Repeats a length-r vector as every column of an r x cols matrix.
    pub fn bcast_col(&mut self, v: Var, cols: usize) -> Result<Var> {
        let r = match self.shape(v) {
            [r] => *r,
            _ => return Err(self.shape_err("bcast_col", &[v])),
        };
        let src = self.values(v);
        let mut vals = Vec::with_capacity(r * cols);
        for x in src {
            for _ in 0..cols {
                vals.push(*x);
            }
        }
        let ng = self.needs(v);
        Ok(self.push(vec![r, cols], vals, Op::BcastCol { v, cols }, ng))
    }

    /// Adds c to the diagonal of a square matrix.
    pub fn add_diag(&mut self, x: Var, c: f64) -> Result<Var> {
        let [r, cdim] = self.matrix_dims("add_diag", x)?;
        if r != cdim {
            return Err(self.shape_err("add_diag", &[x]));
        }
        let mut vals = self.values(x).to_vec();
        for i in 0..r {
            vals[i * r + i] += c;
        }
        let ng = self.needs(x);
        Ok(self.push(vec![r, r], vals, Op::AddDiag(x), ng))
    }

    pub fn diag_part(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix_dims("diag_part", x)?;
        if r != c {
            return Err(self.shape_err("diag_part", &[x]));
        }
        let v = self.values(x);
        let vals: Vec<f64> = (0..r).map(|i| v[i * r + i]).collect();
        let ng = self.needs(x);
        Ok(self.push(vec![r], vals, Op::DiagPart(x), ng))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, ka] = self.matrix_dims("matmul", a)?;
        let [kb, n] = self.matrix_dims("matmul", b)?;
        if ka != kb {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let vals = linalg::matmul(self.values(a), self.values(b), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], vals, Op::Matmul(a, b), ng))
    }

    /// Lower Cholesky factor of the symmetric part of a square matrix.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.matrix_dims("cholesky", a)?;
        if r != c {
            return Err(self.shape_err("cholesky", &[a]));
        }
        let l = linalg::cholesky_lower(self.values(a), r).ok_or_else(|| Error::CholeskyFailed {
            jitter: 0.0,
            details: format!("{r}x{r} matrix is not positive definite"),
        })?;
        let ng = self.needs(a);
        Ok(self.push(vec![r, r], l, Op::Cholesky(a), ng))
    }

    /// Solves L x = b (or L^T x = b when `transpose`) for lower-triangular L.
    /// b may be a vector or a matrix of right-hand sides.
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Result<Var> {
        let [n, nc] = self.matrix_dims("tri_solve", l)?;
        if n != nc {
            return Err(self.shape_err("tri_solve", &[l]));
        }
        let (rows, k) = match self.shape(b) {
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            _ => return Err(self.shape_err("tri_solve", &[b])),
        };
        if rows != n {
            return Err(self.shape_err("tri_solve", &[l, b]));
        }
        let mut x = self.values(b).to_vec();
        if transpose {
            linalg::tri_solve_lower_t(self.values(l), &mut x, n, k);
        } else {
            linalg::tri_solve_lower(self.values(l), &mut x, n, k);
        }
        let shape = self.shape(b).to_vec();
        let ng = self.needs(l) || self.needs(b);
        Ok(self.push(shape, x, Op::TriSolve { l, b, transpose }, ng))
    }

    /// Row-wise log(sum(exp(row))) of an r x c matrix, max-shifted for
    /// stability.
    pub fn row_logsumexp(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix_dims("row_logsumexp", x)?;
        let v = self.values(x);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            out[i] = m + s.ln();
        }
        let ng = self.needs(x);
        Ok(self.push(vec![r], out, Op::RowLogsumexp(x), ng))
    }

    /// out[i] = m[i, idx[i]].
    pub fn select_cols(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let [r, c] = self.matrix_dims("select_cols", m)?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Invalid(format!(
                "select_cols index list of length {} invalid for {r}x{c} matrix",
                idx.len()
            )));
        }
        let v = self.values(m);
        let vals: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let ng = self.needs(m);
        Ok(self.push(vec![r], vals, Op::SelectCols { m, idx: idx.to_vec() }, ng))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d root / d node into every node reachable from `root`.
    /// Gradients from any previous call are cleared first, so repeated calls
    /// are idempotent. The root must be scalar.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if numel(self.shape(root)) != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            self.backward_op(Var(id), &op, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].values.len();
        let slot = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        debug_assert_eq!(slot.len(), contrib.len());
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    /// Adds `contrib` to v's gradient, summing it down to one element first
    /// when v is scalar but the contribution is not (broadcast adjoint).
    fn add_grad_bcast(&mut self, v: Var, contrib: &[f64]) {
        if self.nodes[v.0].values.len() == 1 && contrib.len() != 1 {
            let s: f64 = contrib.iter().sum();
            self.add_grad(v, &[s]);
        } else {
            self.add_grad(v, contrib);
        }
    }

    fn backward_op(&mut self, out: Var, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad_bcast(a, g);
                self.add_grad_bcast(b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad_bcast(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_grad_bcast(b, &neg);
            }
            Op::Mul(a, b) => {
                let da = self.zip_with_grad(b, g);
                self.add_grad_bcast(a, &da);
                let db = self.zip_with_grad(a, g);
                self.add_grad_bcast(b, &db);
            }
            Op::Div(a, b) => {
                let vb = self.values(b);
                let da: Vec<f64> = if vb.len() == 1 {
                    g.iter().map(|gi| gi / vb[0]).collect()
                } else if g.len() == vb.len() {
                    g.iter().zip(vb).map(|(gi, bi)| gi / bi).collect()
                } else {
                    // a scalar, b full: out_i = a / b_i
                    g.iter().zip(vb).map(|(gi, bi)| gi / bi).collect()
                };
                self.add_grad_bcast(a, &da);
                let vout = self.values(out);
                let vb = self.values(b);
                let db: Vec<f64> = if vb.len() == 1 {
                    vec![-g
                        .iter()
                        .zip(vout)
                        .map(|(gi, oi)| gi * oi)
                        .sum::<f64>()
                        / vb[0]]
                } else {
                    g.iter()
                        .zip(vout)
                        .zip(vb)
                        .map(|((gi, oi), bi)| -gi * oi / bi)
                        .collect()
                };
                self.add_grad(b, &db);
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.add_grad(x, &d);
            }
            Op::AddScalar(x) => self.add_grad(x, g),
            Op::Neg(x) => {
                let d: Vec<f64> = g.iter().map(|gi| -gi).collect();
                self.add_grad(x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(self.values(out)).map(|(gi, oi)| gi * oi).collect();
                self.add_grad(x, &d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = g.iter().zip(self.values(x)).map(|(gi, xi)| gi / xi).collect();
                self.add_grad(x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.values(out))
                    .map(|(gi, oi)| gi * (1.0 - oi * oi))
                    .collect();
                self.add_grad(x, &d);
            }
            Op::Sqrt(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.values(out))
                    .map(|(gi, oi)| gi / (2.0 * oi))
                    .collect();
                self.add_grad(x, &d);
            }
            Op::Softplus(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.values(x))
                    .map(|(gi, xi)| gi * sigmoid(*xi))
                    .collect();
                self.add_grad(x, &d);
            }
            Op::ClampMin(x, c) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.values(x))
                    .map(|(gi, xi)| if *xi > c { *gi } else { 0.0 })
                    .collect();
                self.add_grad(x, &d);
            }
            Op::Sum(x) => {
                let n = self.values(x).len();
                let d = vec![g[0]; n];
                self.add_grad(x, &d);
            }
            Op::SumRows(x) => {
                let [r, c] = [self.shape(x)[0], self.shape(x)[1]];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c..(i + 1) * c].copy_from_slice(g);
                }
                self.add_grad(x, &d);
            }
            Op::SumCols(x) => {
                let [r, c] = [self.shape(x)[0], self.shape(x)[1]];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[i];
                    }
                }
                self.add_grad(x, &d);
            }
            Op::Transpose(x) => {
                let [c, r] = [self.shape(out)[0], self.shape(out)[1]];
                let d = linalg::transpose(g, c, r);
                self.add_grad(x, &d);
            }
            Op::Reshape(x) => self.add_grad(x, g),
            Op::Slice { x, start } => {
                let mut d = vec![0.0; self.values(x).len()];
                d[start..start + g.len()].copy_from_slice(g);
                self.add_grad(x, &d);
            }
            Op::Concat(ref xs) => {
                let xs = xs.clone();
                let mut off = 0;
                for x in xs {
                    let n = self.values(x).len();
                    let piece = g[off..off + n].to_vec();
                    self.add_grad(x, &piece);
                    off += n;
                }
            }
            Op::BcastRow { v, rows } => {
                let c = self.values(v).len();
                let mut d = vec![0.0; c];
                for i in 0..rows {
                    for j in 0..c {
                        d[j] += g[i * c + j];
                    }
                }
                self.add_grad(v, &d);
            }
            Op::BcastCol { v, cols } => {
                let r = self.values(v).len();
                let mut d = vec![0.0; r];
                for i in 0..r {
                    d[i] = g[i * cols..(i + 1) * cols].iter().sum();
                }
                self.add_grad(v, &d);
            }
            Op::AddDiag(x) => self.add_grad(x, g),
            Op::DiagPart(x) => {
                let n = self.shape(x)[0];
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = g[i];
                }
                self.add_grad(x, &d);
            }
            Op::Matmul(a, b) => {
                let [m, k] = [self.shape(a)[0], self.shape(a)[1]];
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let bt = linalg::transpose(self.values(b), k, n);
                    let da = linalg::matmul(g, &bt, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let at = linalg::transpose(self.values(a), m, k);
                    let db = linalg::matmul(&at, g, k, m, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Cholesky(a) => {
                let n = self.shape(out)[0];
                let l = self.values(out);
                // P = Phi(L^T G): lower triangle of L^T G with halved diagonal.
                let lt = linalg::transpose(l, n, n);
                let mut p = linalg::matmul(&lt, g, n, n, n);
                for i in 0..n {
                    for j in 0..n {
                        match i.cmp(&j) {
                            std::cmp::Ordering::Less => p[i * n + j] = 0.0,
                            std::cmp::Ordering::Equal => p[i * n + j] *= 0.5,
                            std::cmp::Ordering::Greater => {}
                        }
                    }
                }
                // M = L^-T P L^-1 via two triangular solves.
                linalg::tri_solve_lower_t(l, &mut p, n, n);
                let mut pt = linalg::transpose(&p, n, n);
                linalg::tri_solve_lower_t(l, &mut pt, n, n);
                // pt now holds M^T; the symmetrized gradient matches the
                // forward convention of factoring the symmetric part.
                let m = linalg::transpose(&pt, n, n);
                let d: Vec<f64> = m
                    .iter()
                    .zip(&pt)
                    .map(|(mij, mtij)| 0.5 * (mij + mtij))
                    .collect();
                self.add_grad(a, &d);
            }
            Op::TriSolve { l, b, transpose } => {
                let n = self.shape(l)[0];
                let k = self.values(b).len() / n;
                let lv = self.values(l).to_vec();
                let x = self.values(out).to_vec();
                let mut c = g.to_vec();
                if transpose {
                    // x = L^-T b: db = L^-1 g, dL = -x (db)^T restricted lower.
                    linalg::tri_solve_lower(&lv, &mut c, n, k);
                    self.add_grad(b, &c);
                    if self.needs(l) {
                        let mut d = vec![0.0; n * n];
                        for i in 0..n {
                            for j in 0..=i {
                                let mut s = 0.0;
                                for t in 0..k {
                                    s -= x[i * k + t] * c[j * k + t];
                                }
                                d[i * n + j] = s;
                            }
                        }
                        self.add_grad(l, &d);
                    }
                } else {
                    // x = L^-1 b: db = L^-T g, dL = -(db) x^T restricted lower.
                    linalg::tri_solve_lower_t(&lv, &mut c, n, k);
                    self.add_grad(b, &c);
                    if self.needs(l) {
                        let mut d = vec![0.0; n * n];
                        for i in 0..n {
                            for j in 0..=i {
                                let mut s = 0.0;
                                for t in 0..k {
                                    s -= c[i * k + t] * x[j * k + t];
                                }
                                d[i * n + j] = s;
                            }
                        }
                        self.add_grad(l, &d);
                    }
                }
            }
            Op::RowLogsumexp(x) => {
                let [r, c] = [self.shape(x)[0], self.shape(x)[1]];
                let xv = self.values(x);
                let lse = self.values(out);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[i] * (xv[i * c + j] - lse[i]).exp();
                    }
                }
                self.add_grad(x, &d);
            }
            Op::SelectCols { m, ref idx } => {
                let c = self.shape(m)[1];
                let idx = idx.clone();
                let mut d = vec![0.0; self.values(m).len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                self.add_grad(m, &d);
            }
        }
    }

    /// Elementwise g * values(v), broadcasting a scalar v across g.
    fn zip_with_grad(&self, v: Var, g: &[f64]) -> Vec<f64> {
        let vv = self.values(v);
        if vv.len() == 1 && g.len() != 1 {
            g.iter().map(|gi| gi * vv[0]).collect()
        } else if vv.len() != 1 && g.len() == 1 {
            // out was scalar because the *other* operand was scalar too;
            // cannot happen with mismatched lengths.
            unreachable!("scalar output from non-scalar operand")
        } else {
            g.iter().zip(vv).map(|(gi, vi)| gi * vi).collect()
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compares the tape gradient of a scalar objective against central finite
/// differences, coordinate by coordinate. `build` must be a deterministic
/// function of the parameter leaf it is handed. Returns the worst value of
/// |autodiff - central| / (|central| + 1e-8).
pub fn grad_check<F>(mut build: F, theta0: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let eval = |build: &mut F, theta: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let th = g.param(&[theta.len()], theta.to_vec());
        let root = build(&mut g, th)?;
        let f = g.scalar_value(root);
        if !f.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(f)
    };

    let mut g = Graph::new();
    let th = g.param(&[theta0.len()], theta0.to_vec());
    let root = build(&mut g, th)?;
    if !g.scalar_value(root).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(root)?;
    let auto = g.grad(th);

    let mut worst = 0.0f64;
    let mut theta = theta0.to_vec();
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let fp = eval(&mut build, &theta)?;
        theta[i] = orig - eps;
        let fm = eval(&mut build, &theta)?;
        theta[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let err = (auto[i] - central).abs() / (central.abs() + 1e-8);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randv(seed: u64, n: usize) -> Vec<f64> {
        rng::normal_vec(&mut rng::rng_for(seed, &[99]), n)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let a = g.param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = g.constant(&[3, 3], linalg::identity(3));
        let out = g.matmul(a, i3).unwrap();
        assert_eq!(g.values(out), g.values(a));
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.param(&[2, 3], vec![0.0; 6]);
        let b = g.param(&[2, 3], vec![0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn cholesky_known_factor() {
        let mut g = Graph::new();
        let a = g.param(&[2, 2], vec![4.0, 2.0, 2.0, 3.0]);
        let l = g.cholesky(a).unwrap();
        let want = [2.0, 0.0, 1.0, 2.0f64.sqrt()];
        for (got, want) in g.values(l).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut g = Graph::new();
        let a = g.param(&[2, 2], vec![1.0, 2.0, 2.0, 1.0]);
        assert!(g.cholesky(a).is_err());
    }

    #[test]
    fn logdet_gradient_is_symmetrized_inverse() {
        // logdet A = 2 sum log diag chol(A); d/dA = A^-1 for symmetric A.
        let mut g = Graph::new();
        let a = g.param(&[2, 2], vec![4.0, 2.0, 2.0, 3.0]);
        let l = g.cholesky(a).unwrap();
        let d = g.diag_part(l).unwrap();
        let ld = g.log(d);
        let s = g.sum(ld);
        let root = g.scale(s, 2.0);
        g.backward(root).unwrap();
        let grad = g.grad(a);
        let want = [0.375, -0.25, -0.25, 0.5];
        for (got, want) in grad.iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(&[3], vec![1.0, -2.0, 0.5]);
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(&[2], vec![1.0, 2.0]);
        let c = g.constant(&[2], vec![3.0, 4.0]);
        let p = g.mul(x, c).unwrap();
        let root = g.sum(p);
        g.backward(root).unwrap();
        assert_eq!(g.grad(c), vec![0.0, 0.0]);
        assert_eq!(g.grad(x), vec![3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(&[2], vec![1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_is_idempotent() {
        let mut g = Graph::new();
        let x = g.param(&[2], vec![1.5, -0.5]);
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        let first = g.grad(x);
        g.backward(root).unwrap();
        assert_eq!(first, g.grad(x));
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let build = |seed: u64| {
            let mut g = Graph::new();
            let x = g.param(&[6], randv(seed, 6));
            let m = g.reshape(x, &[2, 3]).unwrap();
            let mt = g.transpose(m).unwrap();
            let p = g.matmul(m, mt).unwrap();
            let e = g.exp(p);
            let root = g.sum(e);
            g.backward(root).unwrap();
            (g.values(root).to_vec(), g.grad(x))
        };
        assert_eq!(build(3), build(3));
    }

    // Finite-difference checks, one per op family, on small random inputs.

    #[test]
    fn grad_check_quadratic_is_tight() {
        let theta = randv(1, 4);
        let err = grad_check(
            |g, th| {
                let sq = g.mul(th, th)?;
                Ok(g.sum(sq))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_elementwise_chain() {
        let theta: Vec<f64> = randv(2, 5).iter().map(|x| x.abs() + 0.5).collect();
        let err = grad_check(
            |g, th| {
                let l = g.log(th);
                let t = g.tanh(l);
                let e = g.exp(t);
                let s = g.sqrt(th);
                let p = g.mul(e, s)?;
                let sp = g.softplus(p);
                Ok(g.sum(sp))
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_binary_broadcast() {
        let theta = randv(3, 5);
        let err = grad_check(
            |g, th| {
                let s = g.slice(th, 0, 1)?;
                let s = g.reshape(s, &[])?;
                let v = g.slice(th, 1, 4)?;
                let shifted = g.add(v, s)?;
                let scaled = g.mul(shifted, s)?;
                let offset = g.add_scalar(scaled, 3.0);
                let d = g.div(offset, s)?;
                Ok(g.sum(d))
            },
            &theta.iter().map(|x| x + 3.0).collect::<Vec<_>>(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_matmul_transpose_reductions() {
        let theta = randv(4, 12);
        let err = grad_check(
            |g, th| {
                let a = g.slice(th, 0, 6)?;
                let a = g.reshape(a, &[2, 3])?;
                let b = g.slice(th, 6, 6)?;
                let b = g.reshape(b, &[3, 2])?;
                let p = g.matmul(a, b)?;
                let pt = g.transpose(p)?;
                let q = g.matmul(p, pt)?;
                let rs = g.sum_rows(q)?;
                let cs = g.sum_cols(q)?;
                let joined = g.concat(&[rs, cs])?;
                let sq = g.mul(joined, joined)?;
                Ok(g.sum(sq))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn grad_check_cholesky_solve_pipeline() {
        // theta parameterizes an SPD matrix A = B B^T + I and a rhs; the
        // objective runs chol, both solves, diag extraction and a logdet.
        let theta = randv(5, 12);
        let err = grad_check(
            |g, th| {
                let b = g.slice(th, 0, 9)?;
                let b = g.reshape(b, &[3, 3])?;
                let bt = g.transpose(b)?;
                let bbt = g.matmul(b, bt)?;
                let a = g.add_diag(bbt, 1.0)?;
                let l = g.cholesky(a)?;
                let rhs = g.slice(th, 9, 3)?;
                let w = g.tri_solve(l, rhs, false)?;
                let z = g.tri_solve(l, w, true)?;
                let quad = g.mul(z, rhs)?;
                let quad = g.sum(quad);
                let d = g.diag_part(l)?;
                let ld = g.log(d);
                let ld = g.sum(ld);
                g.add(quad, ld)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn grad_check_broadcast_rows_cols() {
        let theta = randv(6, 5);
        let err = grad_check(
            |g, th| {
                let r = g.slice(th, 0, 3)?;
                let c = g.slice(th, 3, 2)?;
                let rm = g.bcast_row(r, 2)?;
                let cm = g.bcast_col(c, 3)?;
                let s = g.add(rm, cm)?;
                let e = g.exp(s);
                Ok(g.sum(e))
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_logsumexp_select() {
        let theta = randv(7, 6);
        let idx = vec![2, 0];
        let err = grad_check(
            |g, th| {
                let m = g.reshape(th, &[2, 3])?;
                let lse = g.row_logsumexp(m)?;
                let picked = g.select_cols(m, &idx)?;
                let ll = g.sub(picked, lse)?;
                Ok(g.sum(ll))
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_clamp_inactive_region() {
        let theta: Vec<f64> = randv(8, 4).iter().map(|x| x.abs() + 1.0).collect();
        let err = grad_check(
            |g, th| {
                let c = g.clamp_min(th, 1e-12);
                let s = g.sqrt(c);
                Ok(g.sum(s))
            },
            &theta,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn clamp_active_region_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(&[2], vec![-1.0, 2.0]);
        let c = g.clamp_min(x, 0.0);
        let root = g.sum(c);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x), vec![0.0, 1.0]);
    }

    #[test]
    fn grad_check_rejects_non_finite_objective() {
        let err = grad_check(
            |g, th| {
                let l = g.log(th);
                Ok(g.sum(l))
            },
            &[-1.0],
            1e-6,
        );
        assert!(err.is_err());
    }

    #[test]
    fn row_logsumexp_handles_large_logits() {
        let mut g = Graph::new();
        let m = g.param(&[1, 3], vec![1000.0, 999.0, 998.0]);
        let lse = g.row_logsumexp(m).unwrap();
        let v = g.scalar_value(lse);
        let want = 1000.0 + (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn slice_out_of_bounds_is_error() {
        let mut g = Graph::new();
        let x = g.param(&[3], vec![0.0; 3]);
        assert!(g.slice(x, 2, 2).is_err());
    }
}
