use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenteringMode {
    /// Subtract a running mean of teacher logits.
    Ema,
    /// Balance teacher assignments across prototypes with Sinkhorn-Knopp.
    Sinkhorn,
    /// Plain sharpened softmax.
    None,
}

impl CenteringMode {
    pub fn name(self) -> &'static str {
        match self {
            CenteringMode::Ema => "ema",
            CenteringMode::Sinkhorn => "sinkhorn",
            CenteringMode::None => "none",
        }
    }
}

impl std::str::FromStr for CenteringMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ema" => Ok(Self::Ema),
            "sinkhorn" => Ok(Self::Sinkhorn),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown centering mode `{s}` (ema|sinkhorn|none)")),
        }
    }
}

/// Teacher-side running center; only meaningful in EMA mode.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteringState<F: Scalar = f32> {
    pub center: Option<Tensor<F>>,
}

impl<F: Scalar> CenteringState<F> {
    pub fn new(mode: CenteringMode, prototypes: usize) -> Self {
        Self {
            center: (mode == CenteringMode::Ema).then(|| Tensor::zeros(vec![prototypes])),
        }
    }
}

fn check_logits<F: Scalar>(logits: &Tensor<F>) -> Result<(usize, usize)> {
    if logits.rank() != 2 || logits.shape()[0] == 0 || logits.shape()[1] == 0 {
        return Err(Error::Shape(format!(
            "teacher logits must be a non-empty [B, K] matrix, got {:?}",
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("teacher temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Row softmax of `(logits − center) / tau`, then
/// `center ← m·center + (1−m)·mean_rows(logits)`.
pub fn teacher_targets_ema<F: Scalar>(
    logits: &Tensor<F>,
    state: &CenteringState<F>,
    tau: f64,
    momentum: f64,
) -> Result<(Tensor<F>, CenteringState<F>)> {
    let (b, k) = check_logits(logits)?;
    check_tau(tau)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Param(format!(
            "center momentum must lie in [0, 1), got {momentum}"
        )));
    }
    let center: Vec<f64> = match &state.center {
        Some(c) if c.numel() == k => c.data().iter().map(|v| v.f64()).collect(),
        Some(c) => {
            return Err(Error::Shape(format!(
                "center has {} entries but logits have {k} prototypes",
                c.numel()
            )))
        }
        None => vec![0.0; k],
    };
    let x = logits.data();
    let mut out = Vec::with_capacity(b * k);
    for r in 0..b {
        let z: Vec<f64> = (0..k).map(|j| (x[r * k + j].f64() - center[j]) / tau).collect();
        out.extend(softmax_f64(&z).into_iter().map(F::c));
    }
    let mut new_center = Vec::with_capacity(k);
    for j in 0..k {
        let mean = (0..b).map(|r| x[r * k + j].f64()).sum::<f64>() / b as f64;
        new_center.push(F::c(momentum * center[j] + (1.0 - momentum) * mean));
    }
    Ok((
        Tensor::new(vec![b, k], out)?,
        CenteringState {
            center: Some(Tensor::new(vec![k], new_center)?),
        },
    ))
}

/// Row softmax of `logits / tau` with no centering.
pub fn teacher_targets_plain<F: Scalar>(logits: &Tensor<F>, tau: f64) -> Result<Tensor<F>> {
    let (b, k) = check_logits(logits)?;
    check_tau(tau)?;
    let x = logits.data();
    let mut out = Vec::with_capacity(b * k);
    for r in 0..b {
        let z: Vec<f64> = (0..k).map(|j| x[r * k + j].f64() / tau).collect();
        out.extend(softmax_f64(&z).into_iter().map(F::c));
    }
    Tensor::new(vec![b, k], out)
}

/// Sinkhorn-Knopp teacher targets.
///
/// Starts from `Q = exp(logits/tau)` (after subtracting the global max, which
/// cancels in the normalizations) and alternates for `iters` rounds: scale
/// columns to sum to `B/K`, then scale rows to sum to 1. Ending on the row
/// step makes every row a valid distribution regardless of `iters`.
pub fn teacher_targets_sinkhorn<F: Scalar>(logits: &Tensor<F>, tau: f64, iters: usize) -> Result<Tensor<F>> {
    let (b, k) = check_logits(logits)?;
    check_tau(tau)?;
    if iters == 0 {
        return Err(Error::Param("sinkhorn_iters must be at least 1".into()));
    }
    let x = logits.data();
    let mx = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let mut q: Vec<f64> = x.iter().map(|v| ((v.f64() - mx) / tau).exp()).collect();
    let col_target = b as f64 / k as f64;
    for _ in 0..iters {
        for j in 0..k {
            let s: f64 = (0..b).map(|r| q[r * k + j]).sum();
            // an all-zero column stays zero; the row step repairs the rows
            if s > 0.0 {
                let f = col_target / s;
                for r in 0..b {
                    q[r * k + j] *= f;
                }
            }
        }
        for row in q.chunks_exact_mut(k) {
            // dividing by the row max first makes a constant row exactly 1/K
            let mx = row.iter().fold(0.0f64, |m, &v| m.max(v));
            if mx > 0.0 {
                row.iter_mut().for_each(|v| *v /= mx);
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn targets".into()));
    }
    Tensor::new(vec![b, k], q.into_iter().map(F::c).collect())
}

pub(crate) fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Entropy of the batch-mean assignment of a `[B, K]` probability matrix.
/// Near zero when every row picks the same prototype.
pub fn mean_assignment_entropy<F: Scalar>(probs: &Tensor<F>) -> f64 {
    marginals(probs)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Column means of a `[B, K]` probability matrix.
pub fn marginals<F: Scalar>(probs: &Tensor<F>) -> Vec<f64> {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let mut m = vec![0.0; k];
    for row in probs.data().chunks_exact(k) {
        for (acc, v) in m.iter_mut().zip(row) {
            *acc += v.f64();
        }
    }
    m.iter_mut().for_each(|v| *v /= b as f64);
    m
}
