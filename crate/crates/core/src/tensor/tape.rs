use super::{matmul_into, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `[n, m] + [1, m]`
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[n, m] * [n, 1]`
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    /// Mean over consecutive blocks of `k` rows of a column.
    SegmentMean(Var, usize),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner computation record. Rebuilt for every forward pass and
/// consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Same values, cut from the graph: nothing flows back through the result.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        if !self.rg(v) && matches!(self.nodes[v.0].op, Op::Leaf) {
            return v;
        }
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        if vb.rows() != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(va.data(), vb.data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), rg))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let m = va.cols();
        if vb.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (x, &b) in chunk.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    /// Scales each row of `a` by the matching entry of the column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let m = va.cols();
        assert_eq!(vc.len(), va.rows(), "mul_col: column length");
        let mut data = va.data().to_vec();
        for (chunk, &c) in data.chunks_mut(m).zip(vc.data()) {
            for x in chunk {
                *x *= c;
            }
        }
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), silu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[n, m] -> [n, 1]`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.cols();
        let sums = v.data().chunks(m).map(|c| c.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(sums), Op::RowSum(a), rg)
    }

    /// Column `[n*k, 1]` to `[n, 1]`, averaging each block of `k` rows.
    pub fn segment_mean(&mut self, a: Var, k: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(k > 0 && v.len().is_multiple_of(k), "segment_mean: {} rows, block {k}", v.len());
        let means = v
            .data()
            .chunks(k)
            .map(|c| c.iter().sum::<f64>() / k as f64)
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::column(means), Op::SegmentMean(a, k), rg)
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            match node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                    if self.rg(a) {
                        // dA = G * B^T
                        let mut da = vec![0.0; n * k];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &vb.data()[p * m..(p + 1) * m];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut adj, a, da);
                    }
                    if self.rg(b) {
                        // dB = A^T * G
                        let mut db = vec![0.0; k * m];
                        for i in 0..n {
                            let arow = &va.data()[i * k..(i + 1) * k];
                            let grow = &g[i * m..(i + 1) * m];
                            for (p, &av) in arow.iter().enumerate() {
                                let drow = &mut db[p * m..(p + 1) * m];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                        accumulate(&mut adj, b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(row) {
                        let m = out.cols();
                        let mut db = vec![0.0; m];
                        for chunk in g.chunks(m) {
                            for (d, &x) in db.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        accumulate(&mut adj, row, db);
                    }
                    if self.rg(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut adj, b, g.clone());
                    }
                    if self.rg(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(b) {
                        accumulate(&mut adj, b, g.iter().map(|x| -x).collect());
                    }
                    if self.rg(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    if self.rg(a) {
                        accumulate(&mut adj, a, zip_map(&g, vb, |g, y| g * y));
                    }
                    if self.rg(b) {
                        accumulate(&mut adj, b, zip_map(&g, va, |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    if self.rg(a) {
                        accumulate(&mut adj, a, zip_map(&g, vb, |g, y| g / y));
                    }
                    if self.rg(b) {
                        let db = g
                            .iter()
                            .zip(va)
                            .zip(vb)
                            .map(|((g, x), y)| -g * x / (y * y))
                            .collect();
                        accumulate(&mut adj, b, db);
                    }
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (self.value(a), self.value(col));
                    let m = va.cols();
                    if self.rg(a) {
                        let mut da = g.clone();
                        for (chunk, &c) in da.chunks_mut(m).zip(vc.data()) {
                            for x in chunk {
                                *x *= c;
                            }
                        }
                        accumulate(&mut adj, a, da);
                    }
                    if self.rg(col) {
                        let dc = g
                            .chunks(m)
                            .zip(va.data().chunks(m))
                            .map(|(gc, ac)| gc.iter().zip(ac).map(|(x, y)| x * y).sum())
                            .collect();
                        accumulate(&mut adj, col, dc);
                    }
                }
                Op::Scale(a, k) => accumulate(&mut adj, a, g.iter().map(|x| x * k).collect()),
                Op::AddScalar(a) => accumulate(&mut adj, a, g),
                Op::Tanh(a) => {
                    accumulate(&mut adj, a, zip_map(&g, out.data(), |g, y| g * (1.0 - y * y)))
                }
                Op::Silu(a) => {
                    let da = zip_map(&g, self.value(a).data(), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut adj, a, da)
                }
                Op::Exp(a) => accumulate(&mut adj, a, zip_map(&g, out.data(), |g, y| g * y)),
                Op::Square(a) => {
                    accumulate(&mut adj, a, zip_map(&g, self.value(a).data(), |g, x| 2.0 * g * x))
                }
                Op::Abs(a) => {
                    let da = zip_map(&g, self.value(a).data(), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, a, da)
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut adj, a, vec![g[0]; n])
                }
                Op::Mean(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut adj, a, vec![g[0] / n as f64; n])
                }
                Op::RowSum(a) => {
                    let m = self.value(a).cols();
                    let da = g.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect();
                    accumulate(&mut adj, a, da)
                }
                Op::SegmentMean(a, k) => {
                    let da = g
                        .iter()
                        .flat_map(|&x| std::iter::repeat_n(x / k as f64, k))
                        .collect();
                    accumulate(&mut adj, a, da)
                }
                Op::Clamp(a, lo, hi) => {
                    let da = zip_map(&g, self.value(a).data(), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, a, da)
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(a).data(), self.value(b).data());
                    // ties go to the first argument
                    if self.rg(a) {
                        let da = g
                            .iter()
                            .zip(va.iter().zip(vb))
                            .map(|(&g, (&x, &y))| if x <= y { g } else { 0.0 })
                            .collect();
                        accumulate(&mut adj, a, da);
                    }
                    if self.rg(b) {
                        let db = g
                            .iter()
                            .zip(va.iter().zip(vb))
                            .map(|(&g, (&x, &y))| if x <= y { 0.0 } else { g })
                            .collect();
                        accumulate(&mut adj, b, db);
                    }
                }
            }
        }

        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(data), Op::Leaf) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let sq = tape.mul(w, w);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mse_at_zero_weight() {
        // loss = mean((w.x - y)^2) over d coordinates of a [1,d] weight row
        let x = [0.5, -1.5, 2.0];
        let y = 0.7;
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(3, 1, vec![0.0; 3]));
        let xv = tape.constant(Tensor::matrix(1, 3, x.to_vec()));
        let pred = tape.matmul(xv, w).unwrap();
        let r = tape.add_scalar(pred, -y);
        let sq = tape.square(r);
        let loss = tape.mean(sq);
        let g = tape.backward(loss).unwrap();
        // single residual: d/dw (w.x - y)^2 = -2 x y at w = 0
        for (gi, xi) in g.get(w).unwrap().data().iter().zip(x) {
            assert!((gi - (-2.0 * xi * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_cuts_one_branch() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.value(sx).data()[0].to_bits(), 3.0f64.to_bits());
        let y = tape.mul(x, sx);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn stop_gradient_is_idempotent() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let once = tape.stop_gradient(x);
        let twice = tape.stop_gradient(once);
        assert_eq!(once, twice);
        assert!(!tape.requires_grad(twice));
        assert_eq!(tape.value(once), tape.value(twice));
    }

    #[test]
    fn unary_derivatives() {
        for &x0 in &[-1.7, -0.3, 0.4, 1.9] {
            for (name, fwd) in [
                ("tanh", f64::tanh as fn(f64) -> f64),
                ("silu", silu),
                ("exp", f64::exp),
            ] {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::scalar(x0));
                let y = match name {
                    "tanh" => tape.tanh(x),
                    "silu" => tape.silu(x),
                    _ => tape.exp(x),
                };
                let g = tape.backward(y).unwrap().get(x).unwrap().item();
                assert!((g - fd(fwd, x0)).abs() < 1e-7, "{name} at {x0}");
            }
        }
    }

    #[test]
    fn clamp_and_minimum_route_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(1, 3, vec![1.5, 1.5, 2.5]));
        let c = tape.clamp(a, 1.0, 2.0);
        let b = tape.constant(Tensor::matrix(1, 3, vec![2.0, 1.0, 3.0]));
        let m = tape.minimum(c, b);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        // min picks a, b, then a clamped at its upper bound
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_mean_backward() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::column(vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.segment_mean(a, 2);
        assert_eq!(tape.value(s).data(), &[1.5, 3.5]);
        let w = tape.constant(Tensor::column(vec![1.0, 10.0]));
        let ws = tape.mul(s, w);
        let l = tape.sum(ws);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.5, 0.5, 5.0, 5.0]);
    }
}
