//! Reverse-mode tape. Every operation appends one node whose inputs were
//! recorded earlier, so the node list is already in topological order and
//! backward is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    Cumsum(Var),
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    BceWithLogits {
        x: Var,
        target: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
    grad: Option<Vec<S>>,
}

/// Records operations for one forward pass. A tape is single-threaded;
/// concurrent workers each own their own tape.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor<S>) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor<S>) -> Result<Var> {
        self.leaf(value.clone(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(
        &mut self,
        shape: &[usize],
        data: Vec<S>,
        op: Op<S>,
        inputs: &[Var],
        name: &'static str,
    ) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.push(value, op, rg, name)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, data, op, &[a, b], name)
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, op, &[x], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[d]` vector to every trailing-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -S::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.derived(&[m, n], data, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Batched product `[b×m×k] · [b×k×n] → [b×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bt, m, k, n) = match (sa, sb) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("bmm", sa, sb)),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); bt * m * n];
        for i in 0..bt {
            kernels::matmul_acc(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.derived(&[bt, m, n], out, Op::Bmm(a, b), &[a, b], "bmm")
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (bt, r, c) = last2(&shape, "transpose")?;
        let data = kernels::transpose_last2(self.value(x).data(), bt, r, c);
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 1, n - 2);
        self.derived(&out_shape, data, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        self.derived(shape, data, Op::Reshape(x), &[x], "reshape")
    }

    /// `out[i] = x.flat[index[i]]`; indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let src = self.value(x).data();
        if numel != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        self.derived(shape, data, Op::Gather(x, index), &[x], "gather")
    }

    /// Row lookup: `table[V×d]`, ids → `[len×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::shape("embedding", s, &[ids.len()])),
        };
        if ids.is_empty() {
            return Err(Error::Contract(
                "embedding lookup needs at least one id".into(),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let index = ids
            .iter()
            .flat_map(|&id| (0..d).map(move |j| id * d + j))
            .collect();
        self.gather(table, index, &[ids.len(), d])
    }

    /// Concatenates along the trailing axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.derived(&shape, data, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// GELU, tanh approximation; the gradient is that of the approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu_fwd, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", |v| v.ln(), Op::Log(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Softmax(x), &[x], "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    /// Log-sum-exp over the trailing axis; a rank-1 input yields shape `[1]`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let data: Vec<S> = self.value(x).data().chunks(d).map(logsumexp).collect();
        let shape = lead_shape(self.shape(x));
        self.derived(&shape, data, Op::LogSumExp(x), &[x], "logsumexp")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= S::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let dn = S::from_usize_lossy(d);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.derived(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.derived(&[1], vec![s], Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::from_usize_lossy(self.value(x).numel());
        let s = self.value(x).data().iter().copied().sum::<S>() / n;
        self.derived(&[1], vec![s], Op::Mean(x), &[x], "mean")
    }

    /// Mean over the leading axis of a matrix: `[n×d] → [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("mean_rows", s, &[])),
        };
        let mut acc = vec![S::zero(); d];
        for row in self.value(x).data().chunks(d) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        let nn = S::from_usize_lossy(n);
        acc.iter_mut().for_each(|a| *a /= nn);
        self.derived(&[d], acc, Op::MeanRows(x), &[x], "mean_rows")
    }

    /// Sum over the trailing axis; a rank-1 input yields shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().copied().sum())
            .collect();
        let shape = lead_shape(self.shape(x));
        self.derived(&shape, data, Op::SumLast(x), &[x], "sum_last")
    }

    /// Inclusive cumulative sum along the trailing axis.
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            for j in 1..d {
                row[j] += row[j - 1];
            }
        }
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Cumsum(x), &[x], "cumsum")
    }

    /// Scales each trailing-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let tiny = S::lit(1e-12);
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(tiny);
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let shape = self.shape(x).to_vec();
        self.derived(
            &shape,
            data,
            Op::L2Normalize { x, norms },
            &[x],
            "l2_normalize",
        )
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against constant targets,
    /// computed in the overflow-free `max(x,0) − x·t + log(1 + e^{−|x|})` form.
    pub fn bce_with_logits(&mut self, x: Var, target: &[S]) -> Result<Var> {
        if target.len() != self.value(x).numel() {
            return Err(Error::shape(
                "bce_with_logits",
                self.shape(x),
                &[target.len()],
            ));
        }
        let xs = self.value(x).data();
        let n = S::from_usize_lossy(xs.len());
        let total: S = xs
            .iter()
            .zip(target)
            .map(|(&v, &t)| v.max(S::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        self.derived(
            &[1],
            vec![total / n],
            Op::BceWithLogits {
                x,
                target: target.to_vec(),
            },
            &[x],
            "bce_with_logits",
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*bias).numel();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c)
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.acc(grads, *x, |gx| add_into(gx, g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| kernels::matmul_nt_acc(g, bv, ga, m, n, k));
                self.acc(grads, *b, |gb| kernels::matmul_tn_acc(av, g, gb, m, k, n));
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for t in 0..bt {
                        kernels::matmul_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for t in 0..bt {
                        kernels::matmul_tn_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let (bt, r, c) = last2(self.shape(*x), "transpose").expect("recorded shape");
                // g has shape [.., c, r]
                let back = kernels::transpose_last2(g, bt, c, r);
                self.acc(grads, *x, |gx| add_into(gx, &back));
            }
            Op::Gather(x, index) => {
                self.acc(grads, *x, |gx| {
                    for (k, &src) in index.iter().enumerate() {
                        gx[src] += g[k];
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu_grad(xv[k]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (S::one() - y[k]);
                    }
                });
            }
            Op::Exp(x) => {
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                });
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dotp: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let gs: S = gr.iter().copied().sum();
                        for j in 0..d {
                            gxr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x).data();
                let d = self.value(*x).last_dim();
                self.acc(grads, *x, |gx| {
                    for (r, (xr, gxr)) in xv.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            gxr[j] += g[r] * (xr[j] - y[r]).exp();
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                let dn = S::from_usize_lossy(d);
                self.acc(grads, *x, |gx| {
                    for (r, ((gr, hr), gxr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            s1 += gh;
                            s2 += gh * hr[j];
                        }
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            gxr[j] += scale * (dn * gh - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = S::from_usize_lossy(self.value(*x).numel());
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanRows(x) => {
                let (n, d) = dims2(self.shape(*x));
                let nn = S::from_usize_lossy(n);
                self.acc(grads, *x, |gx| {
                    for row in gx.chunks_mut(d) {
                        row.iter_mut().zip(g).for_each(|(a, &v)| *a += v / nn);
                    }
                });
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim();
                self.acc(grads, *x, |gx| {
                    for (r, row) in gx.chunks_mut(d).enumerate() {
                        row.iter_mut().for_each(|a| *a += g[r]);
                    }
                });
            }
            Op::Cumsum(x) => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    for (gr, gxr) in g.chunks(d).zip(gx.chunks_mut(d)) {
                        let mut run = S::zero();
                        for j in (0..d).rev() {
                            run += gr[j];
                            gxr[j] += run;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                self.acc(grads, *x, |gx| {
                    for (r, ((gr, yr), gxr)) in g
                        .chunks(d)
                        .zip(y.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dotp: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gxr[j] += (gr[j] - yr[j] * dotp) / norms[r];
                        }
                    }
                });
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                let n = S::from_usize_lossy(xv.len());
                self.acc(grads, *x, |gx| {
                    for k in 0..xv.len() {
                        gx[k] += g[0] * (sigmoid(xv[k]) - target[k]) / n;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn last2(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [r, c] => Ok((1, *r, *c)),
        [b, r, c] => Ok((*b, *r, *c)),
        s => Err(Error::shape(op, s, &[])),
    }
}

fn lead_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn gelu_fwd<S: Scalar>(v: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * v * (S::one() + (c * (v + a * v * v * v)).tanh())
}

fn gelu_grad<S: Scalar>(v: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let t = (c * (v + a * v * v * v)).tanh();
    half * (S::one() + t) + half * v * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * v * v)
}

pub(crate) fn logsumexp<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
