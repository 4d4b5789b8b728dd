//! Multinomial logistic regression on standardized features, fit by
//! full-batch gradient descent with backtracking line search. Weight
//! gradients are scaled by `1/(1 + λ)` so that large penalties do not force
//! tiny steps on the biases.

use super::embeddings::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// L2 penalty `λ/2·‖W‖²` on weights (not biases).
    pub lambda: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            max_epochs: 1000,
            tol: 1e-6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Param("lambda and tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// A fitted probe.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[classes, d]` on standardized features.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub epochs: usize,
    pub grad_norm: f64,
}

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [usize],
    n: usize,
    d: usize,
    k: usize,
    lambda: f64,
}

impl Problem<'_> {
    /// Objective and gradient at `theta = [W (k·d), b (k)]`.
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (n, d, k) = (self.n, self.d, self.k);
        let (w, b) = theta.split_at(k * d);
        let mut loss = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.fill(0.0);
        }
        let mut z = vec![0.0; k];
        for i in 0..n {
            let xi = &self.x[i * d..(i + 1) * d];
            for c in 0..k {
                z[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, x)| a * x).sum::<f64>();
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[self.y[i]];
            if let Some(g) = g.as_deref_mut() {
                let (gw, gb) = g.split_at_mut(k * d);
                for c in 0..k {
                    let p = (z[c] - lse).exp() - if c == self.y[i] { 1.0 } else { 0.0 };
                    gb[c] += p;
                    for (gv, x) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                        *gv += p * x;
                    }
                }
            }
        }
        let inv = 1.0 / n as f64;
        let reg = 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = g {
            g.iter_mut().for_each(|v| *v *= inv);
            for (gv, wv) in g[..k * d].iter_mut().zip(w) {
                *gv += self.lambda * wv;
            }
        }
        loss * inv + reg
    }
}

impl LinearProbe {
    pub fn fit(train: &EmbeddingSet, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        train.require_labels()?;
        let classes = train.classes();
        if classes.len() < 2 {
            return Err(Error::Protocol(format!(
                "linear probe needs at least 2 classes in the train set, found {}",
                classes.len()
            )));
        }
        let (n, d, k) = (train.len(), train.dim(), classes.len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(train.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut std = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                std[j] += (train.row(i)[j] as f64 - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n as f64).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        let x = standardize(train, &mean, &std);
        let y: Vec<usize> = train
            .labels()
            .map(|l| classes.binary_search_by(|c| c.as_str().cmp(l)).expect("class"))
            .collect();
        let prob = Problem {
            x: &x,
            y: &y,
            n,
            d,
            k,
            lambda: cfg.lambda,
        };

        let mut theta = vec![0.0; k * d + k];
        let mut grad = vec![0.0; theta.len()];
        let mut f = prob.eval(&theta, Some(&mut grad));
        let mut step = 1.0;
        let mut epochs = 0;
        let mut gnorm = norm(&grad);
        let mut trial = vec![0.0; theta.len()];
        let pre: Vec<f64> = (0..theta.len())
            .map(|i| if i < k * d { 1.0 / (1.0 + cfg.lambda) } else { 1.0 })
            .collect();
        while epochs < cfg.max_epochs && gnorm >= cfg.tol {
            epochs += 1;
            let g2: f64 = grad.iter().zip(&pre).map(|(g, p)| g * g * p).sum();
            // Armijo backtracking; grow the step again after each success
            let mut accepted = false;
            for _ in 0..60 {
                for (i, t) in trial.iter_mut().enumerate() {
                    *t = theta[i] - step * pre[i] * grad[i];
                }
                let ft = prob.eval(&trial, None);
                if ft <= f - 0.5 * step * g2 {
                    std::mem::swap(&mut theta, &mut trial);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            f = prob.eval(&theta, Some(&mut grad));
            gnorm = norm(&grad);
            step *= 2.0;
        }
        let bias = theta.split_off(k * d);
        Ok(Self {
            classes,
            mean,
            std,
            weights: theta,
            bias,
            epochs,
            grad_norm: gnorm,
        })
    }

    /// Arg-max class per row (first class on exact ties).
    pub fn predict(&self, set: &EmbeddingSet) -> Result<Vec<String>> {
        let d = self.mean.len();
        if !set.is_empty() && set.dim() != d {
            return Err(Error::Shape(format!("probe expects dimension {d}, got {}", set.dim())));
        }
        let x = standardize(set, &self.mean, &self.std);
        let k = self.classes.len();
        Ok((0..set.len())
            .map(|i| {
                let xi = &x[i * d..(i + 1) * d];
                let mut best = (f64::NEG_INFINITY, 0);
                for c in 0..k {
                    let z = self.bias[c]
                        + self.weights[c * d..(c + 1) * d]
                            .iter()
                            .zip(xi)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    if z > best.0 {
                        best = (z, c);
                    }
                }
                self.classes[best.1].clone()
            })
            .collect())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn standardize(set: &EmbeddingSet, mean: &[f64], std: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(set.data().len());
    for i in 0..set.len() {
        for (j, &v) in set.row(i).iter().enumerate() {
            out.push((v as f64 - mean[j]) / std[j]);
        }
    }
    out
}

/// Fits on `train` and predicts `test`.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &ProbeConfig) -> Result<Vec<String>> {
    LinearProbe::fit(train, cfg)?.predict(test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::RowMeta;

    fn set(d: usize, data: Vec<f32>, labels: &[&str]) -> EmbeddingSet {
        let meta = labels
            .iter()
            .enumerate()
            .map(|(i, l)| RowMeta {
                id: i.to_string(),
                label: l.to_string(),
                source_id: "s".into(),
            })
            .collect();
        EmbeddingSet::new(d, data, meta).unwrap()
    }

    #[test]
    fn separable_toy_set() {
        let train = set(
            2,
            vec![0.0, 0.0, 0.2, 0.1, 0.1, 0.3, 2.0, 2.0, 2.2, 1.9, 1.8, 2.1],
            &["a", "a", "a", "b", "b", "b"],
        );
        let pred = linear_probe(&train, &train, &ProbeConfig::default()).unwrap();
        assert_eq!(pred, ["a", "a", "a", "b", "b", "b"]);
    }

    #[test]
    fn huge_lambda_predicts_prior_argmax() {
        let train = set(1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &["x", "y", "y", "y", "z", "z"]);
        let cfg = ProbeConfig {
            lambda: 1e9,
            ..ProbeConfig::default()
        };
        let probe = LinearProbe::fit(&train, &cfg).unwrap();
        assert!(probe.weights.iter().all(|w| w.abs() < 1e-8));
        assert!(probe.predict(&train).unwrap().iter().all(|p| p == "y"));
    }

    #[test]
    fn single_class_is_protocol_error() {
        let train = set(1, vec![0.0, 1.0], &["a", "a"]);
        assert!(matches!(
            LinearProbe::fit(&train, &ProbeConfig::default()),
            Err(Error::Protocol(_))
        ));
    }
}
