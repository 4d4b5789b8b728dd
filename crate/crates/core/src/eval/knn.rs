use std::cmp::Ordering;

use super::embeddings::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Distance {
    /// `1 − cos` between l2-normalized rows.
    #[default]
    Cosine,
    Euclidean,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::Cosine => "cosine",
            Distance::Euclidean => "euclidean",
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(format!("unknown distance `{s}` (cosine|euclidean)")),
        }
    }
}

fn normalized(set: &EmbeddingSet) -> Vec<Vec<f64>> {
    (0..set.len())
        .map(|i| {
            let r: Vec<f64> = set.row(i).iter().map(|&v| v as f64).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r
            }
        })
        .collect()
}

fn raw(set: &EmbeddingSet) -> Vec<Vec<f64>> {
    (0..set.len())
        .map(|i| set.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Brute-force k-NN labels for every test row. Neighbors are ordered by
/// distance, then train row index. The majority label wins; ties go to the
/// smaller summed neighbor distance, then the lexicographically smaller label.
pub fn knn(train: &EmbeddingSet, test: &EmbeddingSet, k: usize, distance: Distance) -> Result<Vec<String>> {
    if train.is_empty() {
        return Err(Error::Protocol("k-NN needs a non-empty train set".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Param(format!("k must lie in 1..={}, got {k}", train.len())));
    }
    if !test.is_empty() && train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train dimension {} differs from test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    let (tr, te) = match distance {
        Distance::Cosine => (normalized(train), normalized(test)),
        Distance::Euclidean => (raw(train), raw(test)),
    };
    let labels: Vec<&str> = train.labels().collect();
    let mut out = Vec::with_capacity(test.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for q in &te {
        dists.clear();
        for (j, r) in tr.iter().enumerate() {
            let d = match distance {
                Distance::Cosine => 1.0 - q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>(),
                Distance::Euclidean => q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            };
            dists.push((d, j));
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // (label, votes, summed distance)
        let mut tally: Vec<(&str, usize, f64)> = Vec::new();
        for &(d, j) in &dists[..k] {
            match tally.iter_mut().find(|t| t.0 == labels[j]) {
                Some(t) => {
                    t.1 += 1;
                    t.2 += d;
                }
                None => tally.push((labels[j], 1, d)),
            }
        }
        let best = tally
            .iter()
            .min_by(|a, b| {
                b.1.cmp(&a.1)
                    .then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal))
                    .then(a.0.cmp(b.0))
            })
            .expect("k ≥ 1");
        out.push(best.0.to_string());
    }
    Ok(out)
}
