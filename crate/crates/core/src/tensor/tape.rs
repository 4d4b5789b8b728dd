use super::ops::{self, split_axis};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: F,
    },
    AddScalar {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Expand {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
        tau: F,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
        tau: F,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        a: usize,
    },
    L2Normalize {
        a: usize,
        axis: usize,
        eps: F,
        norms: Vec<F>,
    },
    Exp {
        a: usize,
    },
    Log {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    GatherRows {
        a: usize,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Records primitive operations in execution order; [`Tape::backward`]
/// replays them in exact reverse order, summing gradient contributions.
#[derive(Debug, Default)]
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present after [`Tape::backward`] for every
    /// reachable node that requires a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn push(&mut self, value: Tensor<F>, inputs: &[usize], op: Op<F>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        let r = self.val(v).rank();
        if axis >= r {
            return Err(Error::Shape(format!("axis {axis} out of range for rank {r}")));
        }
        Ok(())
    }

    // ---- structural ops -------------------------------------------------

    /// `[..., m, k] · [k, n]` (shared right operand) or
    /// `[..., m, k] · [..., k, n]` (matching leading axes).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank ≥ 2, got {sa:?} · {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if k != kb || (!shared_b && lead_a != lead_b) {
            return Err(Error::Shape(format!("matmul shape mismatch {sa:?} · {sb:?}")));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (ad, bd) = (self.val(a).data(), self.val(b).data());
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                ops::gemm_acc(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            &[a.0, b.0],
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::Shape(format!("{what}: {sb:?} does not expand to {sa:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F) -> Result<Vec<F>> {
        self.check_suffix(a, b, what)?;
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let nb = bd.len();
        Ok(ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect())
    }

    /// Elementwise sum; `b` may be a trailing-shape suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let t = Tensor::new(self.val(a).shape().to_vec(), out)?;
        Ok(self.push(t, &[a.0, b.0], Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let t = Tensor::new(self.val(a).shape().to_vec(), out)?;
        Ok(self.push(t, &[a.0, b.0], Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let t = Tensor::new(self.val(a).shape().to_vec(), out)?;
        Ok(self.push(t, &[a.0, b.0], Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, &[a.0], Op::Scale { a: a.0, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, &[a.0], Op::AddScalar { a: a.0 })
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.val(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.val(a);
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank()
            || perm
                .iter()
                .any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "invalid permutation {perm:?} for {:?}",
                v.shape()
            )));
        }
        let (shape, data) = ops::permute(v.data(), v.shape(), perm);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            &[a.0],
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.val(a).rank();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank ≥ 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, &[a.0], Op::Reshape { a: a.0 }))
    }

    /// Repeats `a` along new leading axes `lead`.
    pub fn expand(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let v = self.val(a);
        let reps: usize = lead.iter().product();
        let mut data = Vec::with_capacity(reps * v.numel());
        for _ in 0..reps {
            data.extend_from_slice(v.data());
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(v.shape());
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, &[a.0], Op::Expand { a: a.0 }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis(*first, axis)?;
        let base = self.val(*first).shape().to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.val(*p).shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::Shape(format!(
                    "concat mismatch {s:?} vs {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.val(*p);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            t,
            &ids,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let v = self.val(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        if start + len > n {
            return Err(Error::Shape(format!("narrow {start}+{len} exceeds extent {n}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * n * inner + start * inner;
            data.extend_from_slice(&v.data()[off..off + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, &[a.0], Op::Narrow { a: a.0, axis, start }))
    }

    /// Selects rows of a rank-2 tensor (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.val(a);
        if v.rank() != 2 {
            return Err(Error::Shape("gather_rows needs a rank-2 tensor".into()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Shape(format!("row {i} out of range {r}")));
            }
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            t,
            &[a.0],
            Op::GatherRows {
                a: a.0,
                rows: rows.to_vec(),
            },
        ))
    }

    // ---- numeric ops ----------------------------------------------------

    /// `softmax(x / tau)` along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize, tau: F) -> Result<Var> {
        let out = self.softmax_data(a, axis, tau, false)?;
        Ok(self.push(out, &[a.0], Op::Softmax { a: a.0, axis, tau }))
    }

    /// `log_softmax(x / tau)` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize, tau: F) -> Result<Var> {
        let out = self.softmax_data(a, axis, tau, true)?;
        Ok(self.push(out, &[a.0], Op::LogSoftmax { a: a.0, axis, tau }))
    }

    fn softmax_data(&self, a: Var, axis: usize, tau: F, log: bool) -> Result<Tensor<F>> {
        if !(tau > F::zero()) {
            return Err(Error::Param(format!("softmax temperature must be positive, got {tau}")));
        }
        self.check_axis(a, axis)?;
        let v = self.val(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let mut mx = F::neg_infinity();
                for i in 0..n {
                    mx = mx.max(x[at(i)]);
                }
                let mut s = F::zero();
                for i in 0..n {
                    let e = ((x[at(i)] - mx) / tau).exp();
                    out[at(i)] = e;
                    s += e;
                }
                if log {
                    let ls = s.ln();
                    for i in 0..n {
                        out[at(i)] = (x[at(i)] - mx) / tau - ls;
                    }
                } else {
                    for i in 0..n {
                        out[at(i)] = out[at(i)] / s;
                    }
                }
            }
        }
        Tensor::new(v.shape().to_vec(), out)
    }

    /// Normalizes the last axis to zero mean and unit (population) variance,
    /// then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let v = self.val(x);
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layernorm of a scalar".into()))?;
        if self.val(gain).shape() != [d] || self.val(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "layernorm gain/bias must be [{d}], got {:?}/{:?}",
                self.val(gain).shape(),
                self.val(bias).shape()
            )));
        }
        let rows = v.numel() / d.max(1);
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let mut xhat = vec![F::zero(); v.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); v.numel()];
        let dn = F::c(d as f64);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&y| (y - mean) * (y - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            &[x.0, gain.0, bias.0],
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, ops::gelu);
        self.push(t, &[a.0], Op::Gelu { a: a.0 })
    }

    /// Divides each slice along `axis` by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: F) -> Result<Var> {
        self.check_axis(a, axis)?;
        let v = self.val(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![F::zero(); x.len()];
        let mut norms = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let mut s = F::zero();
                for i in 0..n {
                    s += x[at(i)] * x[at(i)];
                }
                let nrm = s.sqrt().max(eps);
                norms[o * inner + j] = nrm;
                for i in 0..n {
                    out[at(i)] = x[at(i)] / nrm;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            &[a.0],
            Op::L2Normalize {
                a: a.0,
                axis,
                eps,
                norms,
            },
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.exp());
        self.push(t, &[a.0], Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.ln());
        self.push(t, &[a.0], Op::Log { a: a.0 })
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.sqrt());
        self.push(t, &[a.0], Op::Sqrt { a: a.0 })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[a.0], Op::SumAll { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.val(a);
        let s = v.data().iter().copied().sum::<F>() / F::c(v.numel() as f64);
        self.push(Tensor::scalar(s), &[a.0], Op::MeanAll { a: a.0 })
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let v = self.val(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &v.data()[o * n * inner + i * inner..o * n * inner + (i + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, &[a.0], Op::SumAxis { a: a.0, axis }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let n = self.val(a).shape()[axis];
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, F::one() / F::c(n as f64)))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a one-element `loss`, visiting recorded operations
    /// in reverse order. Gradients from shared subexpressions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (target, cg) in contribs {
                let node = &mut self.nodes[target];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (x, y) in acc.iter_mut().zip(cg) {
                            *x += y;
                        }
                    }
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[F]) -> Vec<(usize, Vec<F>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if self.needs(a) {
                    let mut ga = vec![F::zero(); ad.len()];
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        ops::gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((a, ga));
                }
                if self.needs(b) {
                    let mut gb = vec![F::zero(); bd.len()];
                    for bi in 0..batch {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        ops::gemm_tn_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((b, gb));
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    let mut gb = reduce_leading(g, self.nodes[b].value.numel());
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    out.push((b, gb));
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let nb = bd.len();
                if self.needs(a) {
                    out.push((a, g.iter().enumerate().map(|(j, &gv)| gv * bd[j % nb]).collect()));
                }
                if self.needs(b) {
                    let prod: Vec<F> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    out.push((b, reduce_leading(&prod, nb)));
                }
            }
            &Op::Scale { a, s } => out.push((a, g.iter().map(|&v| v * s).collect())),
            &Op::AddScalar { a } | &Op::Reshape { a } => out.push((a, g.to_vec())),
            Op::Permute { a, perm } => {
                let inv = ops::inverse_perm(perm);
                let (_, ga) = ops::permute(g, node.value.shape(), &inv);
                out.push((*a, ga));
            }
            &Op::Expand { a } => out.push((a, reduce_leading(g, self.nodes[a].value.numel()))),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut grads: Vec<Vec<F>> = parts
                    .iter()
                    .map(|&p| Vec::with_capacity(self.nodes[p].value.numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = self.nodes[p].value.shape()[*axis] * inner;
                        grads[pi].extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                for (p, gp) in parts.iter().zip(grads) {
                    if self.needs(*p) {
                        out.push((*p, gp));
                    }
                }
            }
            &Op::Narrow { a, axis, start } => {
                let src = &self.nodes[a].value;
                let (outer, n, inner) = split_axis(src.shape(), axis);
                let len = node.value.shape()[axis];
                let mut ga = vec![F::zero(); src.numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((a, ga));
            }
            &Op::GatherRows { a, ref rows } => {
                let src = &self.nodes[a].value;
                let c = src.shape()[1];
                let mut ga = vec![F::zero(); src.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g[k * c + j];
                    }
                }
                out.push((a, ga));
            }
            &Op::Softmax { a, axis, tau } => {
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                let mut ga = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + j;
                        let dot: F = (0..n).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..n {
                            ga[at(t)] = y[at(t)] * (g[at(t)] - dot) / tau;
                        }
                    }
                }
                out.push((a, ga));
            }
            &Op::LogSoftmax { a, axis, tau } => {
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                let mut ga = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + j;
                        let gs: F = (0..n).map(|t| g[at(t)]).sum();
                        for t in 0..n {
                            ga[at(t)] = (g[at(t)] - y[at(t)].exp() * gs) / tau;
                        }
                    }
                }
                out.push((a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[*gain].value.numel();
                let gv = self.nodes[*gain].value.data();
                let rows = rstd.len();
                if self.needs(*x) {
                    let mut gx = vec![F::zero(); xhat.len()];
                    let dn = F::c(d as f64);
                    for r in 0..rows {
                        let (mut m1, mut m2) = (F::zero(), F::zero());
                        for t in 0..d {
                            let dxh = g[r * d + t] * gv[t];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + t];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for t in 0..d {
                            let dxh = g[r * d + t] * gv[t];
                            gx[r * d + t] = rstd[r] * (dxh - m1 - xhat[r * d + t] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gain) {
                    let mut gg = vec![F::zero(); d];
                    for r in 0..rows {
                        for t in 0..d {
                            gg[t] += g[r * d + t] * xhat[r * d + t];
                        }
                    }
                    out.push((*gain, gg));
                }
                if self.needs(*bias) {
                    out.push((*bias, reduce_leading(g, d)));
                }
            }
            &Op::Gelu { a } => {
                let x = self.nodes[a].value.data();
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv * ops::gelu_grad(xv)).collect()));
            }
            &Op::L2Normalize {
                a,
                axis,
                eps,
                ref norms,
            } => {
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                let mut ga = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| o * n * inner + t * inner + j;
                        let nrm = norms[o * inner + j];
                        // below eps the norm is a constant, so the map is linear
                        let clamped = nrm <= eps;
                        let dot: F = if clamped {
                            F::zero()
                        } else {
                            (0..n).map(|t| g[at(t)] * y[at(t)]).sum()
                        };
                        for t in 0..n {
                            ga[at(t)] = (g[at(t)] - y[at(t)] * dot) / nrm;
                        }
                    }
                }
                out.push((a, ga));
            }
            &Op::Exp { a } => out.push((a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect())),
            &Op::Log { a } => {
                let x = self.nodes[a].value.data();
                out.push((a, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect()));
            }
            &Op::Sqrt { a } => out.push((
                a,
                g.iter()
                    .zip(y)
                    .map(|(&gv, &yv)| {
                        if yv > F::zero() {
                            gv / (F::c(2.0) * yv)
                        } else {
                            F::zero()
                        }
                    })
                    .collect(),
            )),
            &Op::SumAll { a } => out.push((a, vec![g[0]; self.nodes[a].value.numel()])),
            &Op::MeanAll { a } => {
                let n = self.nodes[a].value.numel();
                out.push((a, vec![g[0] / F::c(n as f64); n]));
            }
            &Op::SumAxis { a, axis } => {
                let src = &self.nodes[a].value;
                let (outer, n, inner) = split_axis(src.shape(), axis);
                let mut ga = Vec::with_capacity(src.numel());
                for o in 0..outer {
                    for _ in 0..n {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((a, ga));
            }
        }
        out
    }
}

/// Sums a gradient laid out as `[reps, n]` down to `[n]`.
fn reduce_leading<F: Scalar>(g: &[F], n: usize) -> Vec<F> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![F::zero(); n];
    for chunk in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[0., 2f64.ln()]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(tape.softmax(x, 0, 0.0), Err(Error::Param(_))));
        assert!(matches!(tape.softmax(x, 0, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0., 1., 2f64.ln(), 1.]));
        let s = tape.softmax(x, 0, 1.0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12 && (d[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
        let g = tape.constant(t(&[3], &[1., 1., 1.]));
        let b = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.layernorm(x, g, b, 0.0).unwrap();
        let d = tape.value(y).data();
        let e = (1.5f64).sqrt();
        assert!((d[0] + e).abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] - e).abs() < 1e-12);
        assert!((d[0] + 1.2247).abs() < 1e-4);

        let c = tape.constant(t(&[1, 3], &[4., 4., 4.]));
        let y = tape.layernorm(c, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(t(&[2], &[1., 1.]));
        assert!(tape.layernorm(x, bad, b, 1e-6).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1], &[0.]));
        let gz = tape.gelu(z);
        assert_eq!(tape.value(gz).data(), &[0.0]);
        let v = tape.constant(t(&[1, 2], &[3., 4.]));
        let n = tape.l2_normalize(v, 1, 1e-6).unwrap();
        let d = tape.value(n).data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x·x + 3x  → f'(x) = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[1.5]));
        let xx = tape.mul(x, x).unwrap();
        let x3 = tape.scale(x, 3.0);
        let f = tape.add(xx, x3).unwrap();
        let s = tape.sum(f);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        let c = tape.constant(t(&[2], &[3., 4.]));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.add(a, b).is_err());
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, b).is_ok());
    }
}
