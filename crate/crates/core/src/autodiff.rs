//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its backward rule. Nodes are appended after their operands,
//! so walking the tape in reverse is a valid topological order.
//!
//! Probability-consuming operations ([`Tape::entropy`], [`Tape::cross_entropy`],
//! [`Tape::kl_div`]) clamp inputs to [`PROB_FLOOR`] before taking logarithms.
//! Logarithms are natural.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Allowed deviation of a probability row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-8;

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`]. Invalidated by [`Tape::clear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: u32,
    generation: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask(Var, Tensor),
    Softmax(Var),
    Entropy(Var),
    CrossEntropy(Var, Var),
    KlDiv {
        p_prime: Var,
        p: Var,
        detach_p: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    generation: u32,
}

fn ln(x: f64) -> f64 {
    libm::log(x)
}

fn floored(p: f64) -> f64 {
    if p > PROB_FLOOR {
        p
    } else {
        PROB_FLOOR
    }
}

/// d/dp of `p · ln(max(p, floor))`.
fn d_plogp(p: f64) -> f64 {
    if p > PROB_FLOOR {
        ln(p) + 1.0
    } else {
        ln(PROB_FLOOR)
    }
}

fn check_distribution(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = t.dims2(op)?;
    for i in 0..n {
        let row = t.row(i);
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain(
                op,
                format!("row {i} has a negative or non-finite entry"),
            ));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::domain(op, format!("row {i} sums to {s}")));
        }
    }
    Ok((n, c))
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

    /// Drops every node. All previously issued [`Var`]s become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    pub fn is_valid(&self, var: Var) -> bool {
        var.generation == self.generation && (var.index as usize) < self.nodes.len()
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if !self.is_valid(var) {
            return Err(Error::StaleHandle {
                index: var.index as usize,
                generation: var.generation,
                current: self.generation,
            });
        }
        Ok(&self.nodes[var.index as usize])
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var {
            index,
            generation: self.generation,
        }
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter()
            .any(|v| self.nodes[v.index as usize].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.node(var)?.value)
    }

    /// Accumulated gradient of a node, populated by [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Result<Option<&Tensor>> {
        self.node(var)?;
        Ok(self.grads[var.index as usize].as_ref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let value = crate::tensor::matmul(av, bv)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::dims(op_name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`d` bias row to every row of an `n × d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(bias)?.value);
        let (n, d) = xv.dims2("add_bias")?;
        if bv.len() != d {
            return Err(Error::dims("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for (o, &b) in data[i * d..(i + 1) * d].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| if v <= 0.0 { 0.0 } else { v });
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, rg, Op::Relu(x)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v * factor);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, rg, Op::Scale(x, factor)))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v * v);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, rg, Op::Square(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.node(x)?.value.sum());
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, rg, Op::Mean(x)))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        let xv = &self.node(x)?.value;
        let (gv, bv) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let (n, d) = xv.dims2("layer_norm")?;
        if d == 0 {
            return Err(Error::param("d", "layer_norm needs at least one column"));
        }
        if gv.len() != d || bv.len() != d {
            return Err(Error::dims("layer_norm", xv.shape(), gv.shape()));
        }
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mu) * inv;
                normalized[i * d + j] = xh;
                out[i * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Multiplies `x` elementwise by a fixed mask. Gradients flow through the same mask.
    pub fn apply_mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.shape() != mask.shape() {
            return Err(Error::dims("apply_mask", xv.shape(), mask.shape()));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, rg, Op::Mask(x, mask)))
    }

    /// Inverted dropout. Inactive dropout, or `rate == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        active: bool,
    ) -> Result<Var> {
        let shape = self.node(x)?.value.shape().to_vec();
        match dropout_mask(&shape, rate, rng, active)? {
            Some(mask) => self.apply_mask(x, mask),
            None => Ok(x),
        }
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let (n, c) = lv.dims2("softmax")?;
        if c < 2 {
            return Err(Error::param(
                "classes",
                "softmax needs at least two columns",
            ));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = libm::exp(v - max);
                z += *o;
            }
            for o in dst.iter_mut() {
                *o /= z;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(value, rg, Op::Softmax(logits)))
    }

    /// Per-row Shannon entropy of an `n × C` probability matrix.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let pv = &self.node(p)?.value;
        let (n, _) = check_distribution("entropy", pv)?;
        let data = (0..n)
            .map(|i| -pv.row(i).iter().map(|&q| q * ln(floored(q))).sum::<f64>())
            .collect();
        let rg = self.needs_grad(&[p]);
        Ok(self.push(Tensor::vector(data), rg, Op::Entropy(p)))
    }

    /// Per-row cross entropy `H(p′, p) = −Σ p′ ln p`.
    pub fn cross_entropy(&mut self, p_prime: Var, p: Var) -> Result<Var> {
        let (qv, pv) = (&self.node(p_prime)?.value, &self.node(p)?.value);
        if qv.shape() != pv.shape() {
            return Err(Error::dims("cross_entropy", qv.shape(), pv.shape()));
        }
        let (n, _) = check_distribution("cross_entropy", qv)?;
        check_distribution("cross_entropy", pv)?;
        let data = (0..n)
            .map(|i| {
                -qv.row(i)
                    .iter()
                    .zip(pv.row(i))
                    .map(|(&q, &r)| q * ln(floored(r)))
                    .sum::<f64>()
            })
            .collect();
        let rg = self.needs_grad(&[p_prime, p]);
        Ok(self.push(Tensor::vector(data), rg, Op::CrossEntropy(p_prime, p)))
    }

    /// Per-row `KL(p′ ‖ p)`, with gradients into both arguments.
    pub fn kl_div(&mut self, p_prime: Var, p: Var) -> Result<Var> {
        self.kl_div_with(p_prime, p, false)
    }

    /// `KL(p′ ‖ p)`; with `detach_p` the second argument is treated as a constant.
    pub fn kl_div_with(&mut self, p_prime: Var, p: Var, detach_p: bool) -> Result<Var> {
        let (qv, pv) = (&self.node(p_prime)?.value, &self.node(p)?.value);
        if qv.shape() != pv.shape() {
            return Err(Error::dims("kl_div", qv.shape(), pv.shape()));
        }
        let (n, _) = check_distribution("kl_div", qv)?;
        check_distribution("kl_div", pv)?;
        let data: Vec<f64> = (0..n)
            .map(|i| {
                qv.row(i)
                    .iter()
                    .zip(pv.row(i))
                    .map(|(&q, &r)| q * (ln(floored(q)) - ln(floored(r))))
                    .sum::<f64>()
            })
            // flooring both sides can leave rounding-sized negatives
            .map(|v| if v < 0.0 { 0.0 } else { v })
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(
                "kl_div",
                "non-finite divergence after flooring",
            ));
        }
        let rg = if detach_p {
            self.needs_grad(&[p_prime])
        } else {
            self.needs_grad(&[p_prime, p])
        };
        Ok(self.push(
            Tensor::vector(data),
            rg,
            Op::KlDiv {
                p_prime,
                p,
                detach_p,
            },
        ))
    }

    /// Mean supervised cross-entropy of `n × C` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let (n, c) = lv.dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dims("softmax_cross_entropy", &[n], &[labels.len()]));
        }
        if n == 0 {
            return Err(Error::Empty("softmax_cross_entropy"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::param(
                "labels",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
            let lse = max + ln(z);
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = libm::exp(row[j] - lse);
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Populates gradients of `loss` for every node that requires them.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.node(loss)?.value;
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let end = loss.index as usize + 1;
        let mut local: Vec<Option<Vec<f64>>> = vec![None; end];
        local[end - 1] = Some(vec![1.0]);

        for idx in (0..end).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut local)?;
            let slot = &mut self.grads[idx];
            match slot {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => *slot = Some(Tensor::new(self.nodes[idx].value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.index as usize].value;
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !nodes[v.index as usize].requires_grad {
                return;
            }
            match &mut local[v.index as usize] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let (_, n) = val(*b).dims2("matmul")?;
                let bt = crate::tensor::transpose(val(*b))?;
                let at = crate::tensor::transpose(val(*a))?;
                send(*a, matmul_raw(g, bt.data(), m, n, k));
                send(*b, matmul_raw(at.data(), g, k, m, n));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, bias) => {
                let d = val(*bias).len();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                send(*x, g.to_vec());
                send(*bias, gb);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::Square(x) => {
                let xv = val(*x).data();
                send(*x, g.iter().zip(xv).map(|(g, v)| 2.0 * v * g).collect());
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let gv = val(*gamma).data();
                let n = inv_std.len();
                let mut g_gamma = vec![0.0; d];
                let mut g_beta = vec![0.0; d];
                let mut g_x = vec![0.0; n * d];
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let xh = &normalized[i * d..(i + 1) * d];
                    let mut sum_gxh = 0.0;
                    let mut sum_gxh_xh = 0.0;
                    for j in 0..d {
                        g_gamma[j] += gr[j] * xh[j];
                        g_beta[j] += gr[j];
                        let gxh = gr[j] * gv[j];
                        sum_gxh += gxh;
                        sum_gxh_xh += gxh * xh[j];
                    }
                    let scale = inv_std[i] / d as f64;
                    for j in 0..d {
                        let gxh = gr[j] * gv[j];
                        g_x[i * d + j] = scale * (d as f64 * gxh - sum_gxh - xh[j] * sum_gxh_xh);
                    }
                }
                send(*x, g_x);
                send(*gamma, g_gamma);
                send(*beta, g_beta);
            }
            Op::Mask(x, mask) => {
                send(*x, g.iter().zip(mask.data()).map(|(g, m)| g * m).collect());
            }
            Op::Softmax(logits) => {
                let y = &nodes[idx].value;
                let (n, c) = y.dims2("softmax")?;
                let mut gx = vec![0.0; n * c];
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*logits, gx);
            }
            Op::Entropy(p) => {
                let pv = val(*p);
                let (n, c) = pv.dims2("entropy")?;
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    for (j, &q) in pv.row(i).iter().enumerate() {
                        gp[i * c + j] = -g[i] * d_plogp(q);
                    }
                }
                send(*p, gp);
            }
            Op::CrossEntropy(q, p) => {
                let (qv, pv) = (val(*q), val(*p));
                let (n, c) = qv.dims2("cross_entropy")?;
                let mut gq = vec![0.0; n * c];
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let (qj, pj) = (qv.row(i)[j], pv.row(i)[j]);
                        gq[i * c + j] = -g[i] * ln(floored(pj));
                        if pj > PROB_FLOOR {
                            gp[i * c + j] = -g[i] * qj / pj;
                        }
                    }
                }
                send(*q, gq);
                send(*p, gp);
            }
            Op::KlDiv {
                p_prime,
                p,
                detach_p,
            } => {
                let (qv, pv) = (val(*p_prime), val(*p));
                let (n, c) = qv.dims2("kl_div")?;
                let mut gq = vec![0.0; n * c];
                let mut gp = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let (qj, pj) = (qv.row(i)[j], pv.row(i)[j]);
                        gq[i * c + j] = g[i] * (d_plogp(qj) - ln(floored(pj)));
                        if pj > PROB_FLOOR {
                            gp[i * c + j] = -g[i] * qj / pj;
                        }
                    }
                }
                send(*p_prime, gq);
                if !detach_p {
                    send(*p, gp);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0] / n as f64).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * c + y] -= g[0] / n as f64;
                }
                send(*logits, gx);
            }
        }
        Ok(())
    }
}

/// Samples an inverted-dropout mask (entries `0` or `1/(1−rate)`).
///
/// Returns `None` when the layer is the identity: inactive or `rate == 0`.
pub fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    rng: &mut R,
    active: bool,
) -> Result<Option<Tensor>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(
            "rate",
            format!("dropout rate {rate} outside [0, 1)"),
        ));
    }
    if !active || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Ok(Some(Tensor::new(shape.to_vec(), data)?))
}

/// I.i.d. standard-normal tensor.
pub fn gaussian_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches sample count")
}
