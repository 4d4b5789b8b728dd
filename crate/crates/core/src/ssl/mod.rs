//! Self-distillation objective: projection head, teacher centering,
//! cross-view distillation loss and the optional KoLeo spreading term.

mod centering;

use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::vit::{linear, VitEncoder};

pub use centering::{
    marginals, mean_assignment_entropy, teacher_targets_ema, teacher_targets_plain, teacher_targets_sinkhorn,
    CenteringMode, CenteringState,
};

/// Stabilizer for the bottleneck l2 normalization in the head.
pub const HEAD_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub prototypes: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub centering: CenteringMode,
    pub center_momentum: f64,
    pub sinkhorn_iters: usize,
    pub koleo_enabled: bool,
    pub koleo_weight: f64,
    pub koleo_eps: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            prototypes: 256,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
            centering: CenteringMode::Sinkhorn,
            center_momentum: 0.9,
            sinkhorn_iters: 3,
            koleo_enabled: false,
            koleo_weight: 0.1,
            koleo_eps: 1e-8,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(m.to_string()));
        if self.prototypes == 0 || self.head_hidden_dim == 0 || self.head_bottleneck_dim == 0 {
            return bad("head dimensions and prototype count must be positive");
        }
        if !(self.student_temp > 0.0) || !(self.teacher_temp > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad("center_momentum must lie in [0, 1)");
        }
        if self.sinkhorn_iters == 0 {
            return bad("sinkhorn_iters must be at least 1");
        }
        if !(self.koleo_weight >= 0.0) || !(self.koleo_eps >= 0.0) {
            return bad("koleo weight and eps must be non-negative");
        }
        Ok(())
    }
}

/// Three-layer MLP with GELU, l2-normalized bottleneck, then a bias-free
/// projection onto unit-norm prototype rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoHead<F: Scalar = f32> {
    pub params: ParamSet<F>,
}

pub struct HeadOutput {
    /// `[B, bottleneck]`, unit rows.
    pub bottleneck: Var,
    /// `[B, K]` prototype logits.
    pub logits: Var,
}

impl<F: Scalar> DinoHead<F> {
    pub fn init(in_dim: usize, cfg: &SslConfig, rng: &mut Rng) -> Self {
        let (h, b, k) = (cfg.head_hidden_dim, cfg.head_bottleneck_dim, cfg.prototypes);
        let mut p = ParamSet::new();
        p.insert("mlp.0.weight", trunc_normal(&[in_dim, h], crate::vit::INIT_STD, rng));
        p.insert("mlp.0.bias", Tensor::zeros(vec![h]));
        p.insert("mlp.1.weight", trunc_normal(&[h, h], crate::vit::INIT_STD, rng));
        p.insert("mlp.1.bias", Tensor::zeros(vec![h]));
        p.insert("mlp.2.weight", trunc_normal(&[h, b], crate::vit::INIT_STD, rng));
        p.insert("mlp.2.bias", Tensor::zeros(vec![b]));
        p.insert("prototypes", crate::params::normal(&[k, b], 1.0, rng));
        let mut head = Self { params: p };
        head.renormalize_prototypes();
        head
    }

    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound<'_, F>, x: Var) -> Result<HeadOutput> {
        let h = linear(tape, x, bound.var("mlp.0.weight")?, Some(bound.var("mlp.0.bias")?))?;
        let h = tape.gelu(h);
        let h = linear(tape, h, bound.var("mlp.1.weight")?, Some(bound.var("mlp.1.bias")?))?;
        let h = tape.gelu(h);
        let h = linear(tape, h, bound.var("mlp.2.weight")?, Some(bound.var("mlp.2.bias")?))?;
        let axis = tape.shape(h).len() - 1;
        let z = tape.l2_normalize(h, axis, F::c(HEAD_NORM_EPS))?;
        let protos = tape.transpose(bound.var("prototypes")?)?;
        let logits = tape.matmul(z, protos)?;
        tape.check_finite(logits, "projection head")?;
        Ok(HeadOutput { bottleneck: z, logits })
    }

    /// Rescales every prototype row to unit l2 norm.
    pub fn renormalize_prototypes(&mut self) {
        let w = self.params.get_mut("prototypes").expect("prototypes");
        let b = w.shape()[1];
        for row in w.data_mut().chunks_exact_mut(b) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if n > F::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            }
        }
    }
}

/// Cross-entropy self-distillation loss averaged over ordered view pairs.
///
/// `teacher_probs[t]` is the target for view `t`; student view `s` is matched
/// against every teacher view `t ≠ s`. Teacher views must be the leading
/// student views (global crops first).
pub fn dino_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student_logits: &[Var],
    teacher_probs: &[Tensor<F>],
    student_temp: f64,
) -> Result<Var> {
    if teacher_probs.len() < 2 {
        return Err(Error::Protocol(format!(
            "distillation needs at least 2 teacher views, got {}",
            teacher_probs.len()
        )));
    }
    if student_logits.len() < teacher_probs.len() {
        return Err(Error::Protocol("student views must include every teacher view".into()));
    }
    let mut terms = Vec::new();
    for (t, probs) in teacher_probs.iter().enumerate() {
        for (s, &logits) in student_logits.iter().enumerate() {
            if s == t {
                continue;
            }
            if tape.shape(logits) != probs.shape() {
                return Err(Error::Shape(format!(
                    "student view {s} logits {:?} vs teacher view {t} targets {:?}",
                    tape.shape(logits),
                    probs.shape()
                )));
            }
            let axis = probs.rank() - 1;
            let logp = tape.log_softmax(logits, axis, F::c(student_temp))?;
            let target = tape.constant(probs.clone());
            let prod = tape.mul(logp, target)?;
            let rows = tape.sum_axis(prod, axis)?;
            let ce = tape.mean(rows);
            terms.push(tape.scale(ce, -F::one()));
        }
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, F::one() / F::c(n as f64)))
}

/// KoLeo spreading term: `−mean_i log(min_{j≠i} ‖ẑ_i − ẑ_j‖ + eps)` over
/// l2-normalized rows `ẑ`.
pub fn koleo<F: Scalar>(tape: &mut Tape<F>, z: Var, eps: f64) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("koleo expects [B, d], got {s:?}")));
    }
    let b = s[0];
    if b < 2 {
        return Err(Error::Protocol(format!("koleo needs at least 2 rows, got {b}")));
    }
    let zn = tape.l2_normalize(z, 1, F::c(crate::tensor::NORM_EPS))?;
    let nn = nearest_neighbours(tape.value(zn));
    let other = tape.gather_rows(zn, &nn)?;
    let diff = tape.sub(zn, other)?;
    let sq = tape.mul(diff, diff)?;
    let d2 = tape.sum_axis(sq, 1)?;
    let d = tape.sqrt(d2);
    let d = tape.add_scalar(d, F::c(eps));
    let l = tape.log(d);
    let m = tape.mean(l);
    Ok(tape.scale(m, -F::one()))
}

/// Index of the nearest other row (Euclidean); ties go to the lower index.
fn nearest_neighbours<F: Scalar>(z: &Tensor<F>) -> Vec<usize> {
    let b = z.shape()[0];
    (0..b)
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d: f64 = z
                    .row(i)
                    .iter()
                    .zip(z.row(j))
                    .map(|(a, c)| (a.f64() - c.f64()).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Teacher targets for a set of global views, centered per `cfg.centering`.
pub struct TeacherTargets<F: Scalar> {
    pub probs: Vec<Tensor<F>>,
    pub state: CenteringState<F>,
    /// Entropy of the batch-mean teacher assignment (over all views).
    pub mean_entropy: f64,
    /// Largest `|marginal_k − 1/K|` over prototypes.
    pub marginal_deviation: f64,
}

/// Centers a list of per-view `[B, K]` teacher logits jointly.
pub fn center_teacher<F: Scalar>(
    logits: &[Tensor<F>],
    state: &CenteringState<F>,
    cfg: &SslConfig,
) -> Result<TeacherTargets<F>> {
    let first = logits
        .first()
        .ok_or_else(|| Error::Protocol("no teacher views".into()))?;
    let (b, k) = (first.shape()[0], first.shape()[1]);
    let mut all = Vec::with_capacity(logits.len() * b * k);
    for l in logits {
        if l.shape() != first.shape() {
            return Err(Error::Shape("teacher views disagree in shape".into()));
        }
        all.extend_from_slice(l.data());
    }
    let joint = Tensor::new(vec![logits.len() * b, k], all)?;
    let (probs, state) = match cfg.centering {
        CenteringMode::Ema => teacher_targets_ema(&joint, state, cfg.teacher_temp, cfg.center_momentum)?,
        CenteringMode::Sinkhorn => (
            teacher_targets_sinkhorn(&joint, cfg.teacher_temp, cfg.sinkhorn_iters)?,
            state.clone(),
        ),
        CenteringMode::None => (teacher_targets_plain(&joint, cfg.teacher_temp)?, state.clone()),
    };
    let mean_entropy = mean_assignment_entropy(&probs);
    let marginal_deviation = marginals(&probs)
        .iter()
        .map(|m| (m - 1.0 / k as f64).abs())
        .fold(0.0, f64::max);
    let probs = probs
        .data()
        .chunks_exact(b * k)
        .map(|c| Tensor::new(vec![b, k], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherTargets {
        probs,
        state,
        mean_entropy,
        marginal_deviation,
    })
}

/// Teacher forward (no gradients) on the global views, then centering.
pub fn teacher_targets<F: Scalar>(
    encoder: &VitEncoder<F>,
    head: &DinoHead<F>,
    global_views: &[Tensor<F>],
    state: &CenteringState<F>,
    cfg: &SslConfig,
) -> Result<TeacherTargets<F>> {
    let mut logits = Vec::with_capacity(global_views.len());
    for v in global_views {
        let mut tape = Tape::new();
        let eb = encoder.params.bind(&mut tape, false);
        let hb = head.params.bind(&mut tape, false);
        let out = encoder.forward(&mut tape, &eb, v)?;
        let h = head.forward(&mut tape, &hb, out.cls)?;
        logits.push(tape.value(h.logits).clone());
    }
    center_teacher(&logits, state, cfg)
}

pub struct LossTerms {
    pub total: Var,
    pub dino: Var,
    pub koleo: Option<Var>,
}

/// Student forward on every view plus the combined objective. The teacher
/// enters only through the constant `teacher_probs`, so gradients reach
/// student parameters alone.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    encoder: &VitEncoder<F>,
    encoder_vars: &Bound<'_, F>,
    head: &DinoHead<F>,
    head_vars: &Bound<'_, F>,
    views: &[Tensor<F>],
    teacher_probs: &[Tensor<F>],
    cfg: &SslConfig,
) -> Result<LossTerms> {
    let mut logits = Vec::with_capacity(views.len());
    let mut bottlenecks = Vec::with_capacity(views.len());
    for v in views {
        let out = encoder.forward(tape, encoder_vars, v)?;
        let h = head.forward(tape, head_vars, out.cls)?;
        logits.push(h.logits);
        bottlenecks.push(h.bottleneck);
    }
    let dino = dino_loss(tape, &logits, teacher_probs, cfg.student_temp)?;
    let mut total = dino;
    let mut koleo_term = None;
    if cfg.koleo_enabled {
        let mut acc: Option<Var> = None;
        for &z in &bottlenecks[..teacher_probs.len()] {
            let kv = koleo(tape, z, cfg.koleo_eps)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, kv)?,
                None => kv,
            });
        }
        let kv = tape.scale(
            acc.expect("≥2 global views"),
            F::one() / F::c(teacher_probs.len() as f64),
        );
        let weighted = tape.scale(kv, F::c(cfg.koleo_weight));
        total = tape.add(total, weighted)?;
        koleo_term = Some(kv);
    }
    tape.check_finite(total, "total loss")?;
    Ok(LossTerms {
        total,
        dino,
        koleo: koleo_term,
    })
}
