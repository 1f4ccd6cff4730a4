use super::{Real, Tensor};
use crate::error::{PsptError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    LogSoftmaxRows(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    PickCols {
        x: Var,
        cols: Vec<usize>,
    },
    Sum(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Tape of operations in topological (creation) order. Backward walks the
/// tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
/// Leaves created with [`Graph::constant`] never receive an entry.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of tensors holding a gradient buffer.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> PsptError {
    PsptError::Dimension(format!("{what}: shapes {a:?} and {b:?}"))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            is_param: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf (`requires_grad = true`).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(PsptError::Dimension(format!(
                "{what}: expected a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err(
                "matmul inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, used for the weight-tied output head.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_transpose_b")?;
        let (n, k2) = self.matrix_dims(b, "matmul_transpose_b")?;
        if k != k2 {
            return Err(dim_err(
                "matmul_transpose_b inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulTransB(a, b), &[a, b]))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(what, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.numel() != d || tb.shape().len() != 1 {
            return Err(dim_err("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(0.044_715);
        let half = T::from_f64_lossy(0.5);
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Normalizes each row of `x[..×d]` to zero mean and unit variance, then
    /// applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(PsptError::Contract("layer_norm eps must be positive".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if d == 0 || tx.shape().is_empty() {
            return Err(PsptError::Dimension(format!(
                "layer_norm over an empty last axis (shape {:?})",
                tx.shape()
            )));
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(dim_err("layer_norm affine", tg.shape(), tb.shape()));
        }
        let n = tx.numel() / d;
        let df = T::from_usize(d).unwrap();
        let mut normed = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                normed[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let v = tx.cols();
        if v == 0 {
            return Err(PsptError::Dimension("log_softmax over zero columns".into()));
        }
        if !tx.is_finite() {
            return Err(PsptError::Numeric(
                "log_softmax input contains NaN or infinity".into(),
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(v) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Rows of `table` selected by `ids` (embedding lookup, row selection).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = (tt.rows(), tt.cols());
        if tt.shape().len() != 2 {
            return Err(PsptError::Dimension(format!(
                "gather_rows needs a matrix, got {:?}",
                tt.shape()
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(PsptError::Dimension(format!(
                    "row index {i} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(PsptError::Contract("concat_rows of nothing".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != d {
                return Err(dim_err("concat_rows", &[rows, d], tp.shape()));
            }
            rows += tp.rows();
            out.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.rows() != cols.len() {
            return Err(dim_err("pick_cols", tx.shape(), &[cols.len()]));
        }
        let c = tx.cols();
        let mut out = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(PsptError::Dimension(format!(
                    "column {j} out of range for {c} columns"
                )));
            }
            out.push(tx.data()[i * c + j]);
        }
        let value = Tensor::new(vec![cols.len()], out)?;
        Ok(self.push(
            value,
            Op::PickCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Multi-head scaled dot-product attention over `q, k, v [L×d]` where
    /// position `i` attends only to positions `j <= i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.matrix_dims(q, "causal_attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [l, d] {
                return Err(dim_err(
                    "causal_attention",
                    &[l, d],
                    self.value(other).shape(),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(PsptError::Dimension(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    p[j] /= z;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![l, d], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns gradient buffers for
    /// trainable leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(PsptError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(g) if node.is_param => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ if node.is_param => Some(Tensor::zeros(node.value.shape())),
                    _ => None,
                }
            })
            .chain(
                self.nodes[loss.0 + 1..]
                    .iter()
                    .map(|n| n.is_param.then(|| Tensor::zeros(n.value.shape()))),
            )
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    // dA = dC · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout,
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if needs(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    // dB = Aᵀ · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        ta.data(),
                        1,
                        k as isize,
                        gout,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::MatMulTransB(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    // dA = dC · B
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout,
                        n as isize,
                        1,
                        tb.data(),
                        k as isize,
                        1,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if needs(*b) {
                    let gb = grad_buf(grads, *b, n * k);
                    // dB = dCᵀ · A
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        gout,
                        1,
                        n as isize,
                        ta.data(),
                        k as isize,
                        1,
                        T::one(),
                        gb,
                        k as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if needs(v) {
                        axpy(grad_buf(grads, v, gout.len()), gout, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if needs(v) {
                        axpy(grad_buf(grads, v, gout.len()), gout, sign);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if needs(*x) {
                    axpy(grad_buf(grads, *x, gout.len()), gout, T::one());
                }
                if needs(*bias) {
                    let d = self.value(*bias).numel();
                    let gb = grad_buf(grads, *bias, d);
                    for row in gout.chunks(d.max(1)) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Scale(x, factor) => {
                axpy(grad_buf(grads, *x, gout.len()), gout, *factor);
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(0.044_715);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let xs = self.value(*x).data();
                let gx = grad_buf(grads, *x, xs.len());
                for ((g, &v), &go) in gx.iter_mut().zip(xs).zip(gout) {
                    let t = (c * (v + k * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                    *g += go * (half * (T::one() + t) + half * v * dt);
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let gx = grad_buf(grads, *x, xs.len());
                for ((g, &v), &go) in gx.iter_mut().zip(xs).zip(gout) {
                    if v > T::zero() {
                        *g += go;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let n = rstd.len();
                if needs(*gamma) {
                    let gg = grad_buf(grads, *gamma, d);
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += gout[r * d + c] * normed[r * d + c];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = grad_buf(grads, *beta, d);
                    for row in gout.chunks(d) {
                        axpy(gb, row, T::one());
                    }
                }
                if needs(*x) {
                    let gam = self.value(*gamma).data();
                    let df = T::from_usize(d).unwrap();
                    let gx = grad_buf(grads, *x, n * d);
                    for r in 0..n {
                        let go = &gout[r * d..(r + 1) * d];
                        let h = &normed[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..d {
                            let dh = go[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * h[c];
                        }
                        mean_dh /= df;
                        mean_dh_h /= df;
                        for c in 0..d {
                            let dh = go[c] * gam[c];
                            gx[r * d + c] += rstd[r] * (dh - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let v = node.value.cols();
                let gx = grad_buf(grads, *x, y.len());
                for ((gr, yr), gor) in gx.chunks_mut(v).zip(y.chunks(v)).zip(gout.chunks(v)) {
                    let total = gor.iter().copied().sum::<T>();
                    for c in 0..v {
                        gr[c] += gor[c] - yr[c].exp() * total;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let gt = grad_buf(grads, *table, tt.numel());
                for (r, &i) in ids.iter().enumerate() {
                    axpy(&mut gt[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d], T::one());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if needs(p) {
                        axpy(
                            grad_buf(grads, p, len),
                            &gout[offset..offset + len],
                            T::one(),
                        );
                    }
                    offset += len;
                }
            }
            Op::PickCols { x, cols } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let gx = grad_buf(grads, *x, tx.numel());
                for (i, &j) in cols.iter().enumerate() {
                    gx[i * c + j] += gout[i];
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = grad_buf(grads, *x, n);
                for g in gx.iter_mut() {
                    *g += gout[0];
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gout, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (l, d) = (self.value(q).rows(), self.value(q).cols());
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![T::zero(); l * d];
        let mut gk = vec![T::zero(); l * d];
        let mut gv = vec![T::zero(); l * d];
        let mut dp = vec![T::zero(); l];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
                let go = &gout[i * d + off..i * d + off + dh];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += dp[j] * p[j];
                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                    for (g, &o) in gvj.iter_mut().zip(go) {
                        *g += p[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        gq[i * d + off + c] += ds * kd[j * d + off + c];
                        gk[j * d + off + c] += ds * qd[i * d + off + c];
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                axpy(grad_buf(grads, var, l * d), &g, T::one());
            }
        }
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error, SeededRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0, 0.5, 7.0]);
    }

    #[test]
    fn zero_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.constant(t(&[2, 1], &[0.0, 0.0]));
        let y = g.matmul(a, z).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(11);
        let a0: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let b0: Tensor<f64> = rng.normal_tensor(&[4, 2], 1.0);
        let mut g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let numeric = finite_diff_grad(
            |p: &[f64]| {
                let a = Tensor::new(vec![3, 4], p.to_vec()).unwrap();
                Ok(a.matmul(&b0)?.data().iter().sum())
            },
            a0.data(),
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(grads.get(a).unwrap().data(), &numeric, 1e-8);
        assert!(err < 1e-6, "relative error {err}");
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::filled(&[1, 4], 2.5));
        let y = g.log_softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - (-1.386_294_4)).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0e4, -1.0e4]).unwrap());
        let y = g.log_softmax_rows(x).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] + 2.0e4).abs() < 1.0);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = SeededRng::new(5);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng.normal_tensor(&[2, 8], 3.0));
        let y = g.log_softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(
            g.log_softmax_rows(x),
            Err(PsptError::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_constant_input_gives_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::filled(&[1, 6], 3.0));
        let gamma = g.constant(Tensor::filled(&[6], 1.0));
        let beta = g.constant(Tensor::zeros(&[6]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_of_normalized_vector() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let gamma = g.constant(Tensor::filled(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = SeededRng::new(9);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rng.normal_tensor(&[5, 16], 4.0));
        let gamma = g.constant(Tensor::filled(&[16], 1.0));
        let beta = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        let gamma = g.constant(Tensor::zeros(&[0]));
        let beta = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(
            g.layer_norm(x, gamma, beta, 1e-5),
            Err(PsptError::Dimension(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::filled(&[2, 3], 0.7));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn detached_param_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::filled(&[3], 1.0));
        let y = g.constant(Tensor::filled(&[3], 2.0));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::filled(&[3], 1.0));
        assert!(matches!(g.backward(x), Err(PsptError::Contract(_))));
    }

    /// Builds a composite expression touching every op and checks it against
    /// central differences over all inputs.
    fn composite(g: &mut Graph<f64>, x: Var, w: Var, gamma: Var, beta: Var) -> Result<Var> {
        let h = g.matmul(x, w)?; // 4×6
        let n = g.layer_norm(h, gamma, beta, 1e-5)?;
        let a = g.gelu(n);
        let att = g.causal_attention(a, n, h, 2)?;
        let sel = g.gather_rows(att, &[3, 1, 1])?;
        let top = g.gather_rows(h, &[0])?;
        let cat = g.concat_rows(&[sel, top])?;
        let logits = g.matmul_transpose_b(cat, a)?; // 4×4
        let lp = g.log_softmax_rows(logits)?;
        let picked = g.pick_cols(lp, &[0, 2, 3, 1])?;
        let s = g.sum(picked);
        let r = g.sub(s, s)?;
        let r = g.relu(r);
        let bias = g.gather_rows(w, &[2])?;
        let shifted = g.add_row(att, gamma)?;
        let shifted = g.add(shifted, h)?;
        let extra = g.sum(shifted);
        let extra = g.scale(extra, 0.1);
        let b = g.sum(bias);
        let total = g.add(s, extra)?;
        let total = g.add(total, r)?;
        g.sub(total, b)
    }

    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(21);
        let x0: Tensor<f64> = rng.normal_tensor(&[4, 3], 1.0);
        let w0: Tensor<f64> = rng.normal_tensor(&[3, 6], 1.0);
        let g0: Tensor<f64> = rng.normal_tensor(&[6], 1.0);
        let b0: Tensor<f64> = rng.normal_tensor(&[6], 1.0);

        let eval = |xs: &Tensor<f64>, ws: &Tensor<f64>, gs: &Tensor<f64>, bs: &Tensor<f64>| {
            let mut g = Graph::new();
            let (x, w, gm, bt) = (
                g.param(xs.clone()),
                g.param(ws.clone()),
                g.param(gs.clone()),
                g.param(bs.clone()),
            );
            let out = composite(&mut g, x, w, gm, bt).unwrap();
            (g, out, [x, w, gm, bt])
        };

        let (g, out, vars) = eval(&x0, &w0, &g0, &b0);
        let grads = g.backward(out).unwrap();
        let originals = [&x0, &w0, &g0, &b0];
        for (slot, var) in vars.iter().enumerate() {
            let numeric = finite_diff_grad(
                |p: &[f64]| {
                    let mut inputs: Vec<Tensor<f64>> =
                        originals.iter().map(|t| (*t).clone()).collect();
                    inputs[slot] = Tensor::new(originals[slot].shape().to_vec(), p.to_vec())?;
                    let (g, out, _) = eval(&inputs[0], &inputs[1], &inputs[2], &inputs[3]);
                    Ok(g.value(out).item())
                },
                originals[slot].data(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(grads.get(*var).unwrap().data(), &numeric, 1e-7);
            assert!(err < 1e-4, "input {slot}: relative error {err}");
        }
    }

    #[test]
    fn causal_attention_first_row_copies_value() {
        let mut rng = SeededRng::new(2);
        let mut g = Graph::<f64>::new();
        let q = g.constant(rng.normal_tensor(&[3, 4], 1.0));
        let k = g.constant(rng.normal_tensor(&[3, 4], 1.0));
        let v = g.constant(rng.normal_tensor(&[3, 4], 1.0));
        let o = g.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(o).row(0), g.value(v).row(0));
    }
}
