//! Independent reference implementations used as test oracles.

// naive reference implementations index on purpose
#![allow(clippy::needless_range_loop)]

use dino_rbc::eval::{EmbeddingSet, RowMeta};
use dino_rbc::rng::Rng;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Acc, bAcc and wF1 from an explicit confusion matrix; F1 written as
/// `2TP / (2TP + FP + FN)`.
pub fn confusion_metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> (f64, f64, f64) {
    let mut cm = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm[t][p] += 1;
    }
    let n = y_true.len() as f64;
    let trace: u64 = (0..n_classes).map(|c| cm[c][c]).sum();
    let (mut recall_sum, mut present, mut wf1) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let row: u64 = cm[c].iter().sum();
        if row == 0 {
            continue;
        }
        let col: u64 = (0..n_classes).map(|r| cm[r][c]).sum();
        let tp = cm[c][c];
        let (fn_, fp) = (row - tp, col - tp);
        present += 1.0;
        recall_sum += tp as f64 / row as f64;
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        wf1 += row as f64 / n * f1;
    }
    (trace as f64 / n, recall_sum / present, wf1)
}

/// Double-loop k-NN: no sorting, neighbors picked by repeated arg-min over
/// (distance, index); vote by count, then summed distance, then label.
pub fn naive_knn(train: &EmbeddingSet, test: &EmbeddingSet, k: usize, cosine: bool) -> Vec<String> {
    let row = |s: &EmbeddingSet, i: usize| -> Vec<f64> { s.row(i).iter().map(|&v| v as f64).collect() };
    let labels: Vec<String> = train.labels().map(String::from).collect();
    let mut out = Vec::new();
    for i in 0..test.len() {
        let q = row(test, i);
        let mut d = Vec::new();
        for j in 0..train.len() {
            let r = row(train, j);
            let v = if cosine {
                let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = q.iter().zip(&r).map(|(a, b)| (a / nq) * (b / nr)).sum();
                1.0 - dot
            } else {
                q.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            };
            d.push(v);
        }
        let mut taken = vec![false; train.len()];
        let mut votes: Vec<(String, usize, f64)> = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..train.len() {
                if !taken[j] && best.is_none_or(|b| d[j] < d[b]) {
                    best = Some(j);
                }
            }
            let j = best.unwrap();
            taken[j] = true;
            match votes.iter_mut().find(|v| v.0 == labels[j]) {
                Some(v) => {
                    v.1 += 1;
                    v.2 += d[j];
                }
                None => votes.push((labels[j].clone(), 1, d[j])),
            }
        }
        let mut winner = votes[0].clone();
        for v in &votes[1..] {
            let better = v.1 > winner.1 || (v.1 == winner.1 && (v.2 < winner.2 || (v.2 == winner.2 && v.0 < winner.0)));
            if better {
                winner = v.clone();
            }
        }
        out.push(winner.0);
    }
    out
}

pub fn gaussian_set(rng: &mut Rng, n: usize, dim: usize, classes: usize, sources: usize) -> EmbeddingSet {
    let mut data = Vec::with_capacity(n * dim);
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        for _ in 0..dim {
            data.push(rng.sample::<f64, _>(StandardNormal) as f32);
        }
        meta.push(RowMeta {
            id: format!("r{i}"),
            label: format!("c{}", rng.random_range(0..classes)),
            source_id: format!("s{}", i % sources),
        });
    }
    EmbeddingSet::new(dim, data, meta).unwrap()
}

/// Clustered set: class `c` centered at `3·e_c` plus unit noise, and a
/// per-source offset along the last axis.
pub fn clustered_set(rng: &mut Rng, n: usize, dim: usize, classes: usize, sources: usize) -> EmbeddingSet {
    let mut data = Vec::with_capacity(n * dim);
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let s = (i / classes) % sources;
        for j in 0..dim {
            let center = if j == c { 3.0 } else { 0.0 } + if j == dim - 1 { 0.5 * s as f64 } else { 0.0 };
            data.push((center + 0.7 * rng.sample::<f64, _>(StandardNormal)) as f32);
        }
        meta.push(RowMeta {
            id: format!("r{i}"),
            label: format!("c{c}"),
            source_id: format!("s{s}"),
        });
    }
    EmbeddingSet::new(dim, data, meta).unwrap()
}

/// Top-`n` eigenpairs of the sample covariance by a dense symmetric
/// eigensolver, with the same sign convention (largest-magnitude entry
/// positive). Returns (components, variances, projections).
pub fn dense_pca(rows: &[Vec<f64>], n: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let (m, d) = (rows.len(), rows[0].len());
    let x = nalgebra::DMatrix::from_fn(m, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = nalgebra::DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Vec::new();
    let mut vars = Vec::new();
    for &c in order.iter().take(n) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
        vars.push(eig.eigenvalues[c]);
    }
    let proj = (0..m)
        .map(|i| {
            comps
                .iter()
                .map(|v| (0..d).map(|j| centered[(i, j)] * v[j]).sum())
                .collect()
        })
        .collect();
    (comps, vars, proj)
}
