//! Split protocols and reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use super::embeddings::EmbeddingSet;
use super::knn::{knn, Distance};
use super::metrics::{metrics, Metrics};
use super::probe::{linear_probe, ProbeConfig};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub enum ClassifierSpec {
    Linear(ProbeConfig),
    Knn { k: usize, distance: Distance },
}

impl ClassifierSpec {
    pub fn name(&self) -> String {
        match self {
            ClassifierSpec::Linear(_) => "linear".into(),
            ClassifierSpec::Knn { k, distance } => format!("{k}-nn-{}", distance.name()),
        }
    }

    pub fn predict(&self, train: &EmbeddingSet, test: &EmbeddingSet) -> Result<Vec<String>> {
        match self {
            ClassifierSpec::Linear(cfg) => linear_probe(train, test, cfg),
            ClassifierSpec::Knn { k, distance } => knn(train, test, *k, *distance),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub predicted: Vec<String>,
    pub metrics: Metrics,
    /// Test labels never seen in training (always scored wrong).
    pub unseen_classes: Vec<String>,
}

/// Trains on `train`, predicts `test` and scores it. Metrics are computed over
/// the union of train and test labels.
pub fn evaluate_split(spec: &ClassifierSpec, train: &EmbeddingSet, test: &EmbeddingSet) -> Result<Prediction> {
    train.require_labels()?;
    test.require_labels()?;
    if test.is_empty() {
        return Err(Error::Protocol("test split is empty".into()));
    }
    let predicted = spec.predict(train, test)?;
    let train_classes = train.classes();
    let mut classes = train_classes.clone();
    classes.extend(test.classes());
    classes.sort();
    classes.dedup();
    let unseen: Vec<String> = test
        .classes()
        .into_iter()
        .filter(|c| train_classes.binary_search(c).is_err())
        .collect();
    if !unseen.is_empty() {
        log::warn!(
            "test classes absent from training are scored as errors: {}",
            unseen.join(", ")
        );
    }
    let idx = |l: &str| classes.binary_search_by(|c| c.as_str().cmp(l)).expect("class");
    let y_true: Vec<usize> = test.labels().map(idx).collect();
    let y_pred: Vec<usize> = predicted.iter().map(|l| idx(l)).collect();
    Ok(Prediction {
        metrics: metrics(&y_true, &y_pred, classes.len())?,
        predicted,
        unseen_classes: unseen,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitRecord {
    pub name: String,
    pub train_sources: Vec<String>,
    pub test_sources: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
}

/// Mean and sample standard deviation (`None` for a single split).
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub label: String,
    pub count: usize,
    pub mean: Metrics,
    pub std: Option<Metrics>,
}

impl Aggregate {
    pub fn of(label: impl Into<String>, ms: &[Metrics]) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::Protocol("cannot aggregate zero splits".into()));
        }
        let n = ms.len() as f64;
        let pick = |f: fn(&Metrics) -> f64| -> (f64, Option<f64>) {
            let mean = ms.iter().map(f).sum::<f64>() / n;
            let std =
                (ms.len() >= 2).then(|| (ms.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            (mean, std)
        };
        let (acc, bacc, wf1) = (pick(|m| m.acc), pick(|m| m.bacc), pick(|m| m.wf1));
        Ok(Self {
            label: label.into(),
            count: ms.len(),
            mean: Metrics {
                acc: acc.0,
                bacc: bacc.0,
                wf1: wf1.0,
            },
            std: acc.1.map(|_| Metrics {
                acc: acc.1.unwrap_or(0.0),
                bacc: bacc.1.unwrap_or(0.0),
                wf1: wf1.1.unwrap_or(0.0),
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub classifier: String,
    pub splits: Vec<SplitRecord>,
    /// First entry aggregates all splits; protocols may add coarser ones.
    pub aggregates: Vec<Aggregate>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    /// Per-split rows followed by `AGGREGATE` rows (`mean` and `std`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,classifier,split,train_sources,test_sources,n_train,n_test,acc,bacc,wf1\n");
        for r in &self.splits {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                self.protocol,
                self.classifier,
                r.name,
                r.train_sources.join(";"),
                r.test_sources.join(";"),
                r.n_train,
                r.n_test,
                r.metrics.acc,
                r.metrics.bacc,
                r.metrics.wf1
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{},{},AGGREGATE,{},mean,{},,{},{},{}",
                self.protocol, self.classifier, a.label, a.count, a.mean.acc, a.mean.bacc, a.mean.wf1
            );
            let sd = a.std.as_ref();
            let _ = writeln!(
                s,
                "{},{},AGGREGATE,{},std,{},,{},{},{}",
                self.protocol,
                self.classifier,
                a.label,
                a.count,
                fmt_opt(sd.map(|m| m.acc)),
                fmt_opt(sd.map(|m| m.bacc)),
                fmt_opt(sd.map(|m| m.wf1))
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} ({})\n", self.protocol, self.classifier);
        for r in &self.splits {
            let _ = writeln!(
                s,
                "  {:<12} train={:<16} test={:<16} n={}/{}  Acc {:.4}  bAcc {:.4}  wF1 {:.4}",
                r.name,
                r.train_sources.join(";"),
                r.test_sources.join(";"),
                r.n_train,
                r.n_test,
                r.metrics.acc,
                r.metrics.bacc,
                r.metrics.wf1
            );
        }
        for a in &self.aggregates {
            let pm = |m: f64, sd: Option<f64>| match sd {
                Some(sd) => format!("{m:.4} ± {sd:.4}"),
                None => format!("{m:.4}"),
            };
            let sd = a.std.as_ref();
            let _ = writeln!(
                s,
                "  {} over {}: Acc {}  bAcc {}  wF1 {}",
                a.label,
                a.count,
                pm(a.mean.acc, sd.map(|m| m.acc)),
                pm(a.mean.bacc, sd.map(|m| m.bacc)),
                pm(a.mean.wf1, sd.map(|m| m.wf1))
            );
        }
        s
    }

    /// Writes `<path>` (CSV) and `<path>.txt` (summary).
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let txt = path.with_extension("txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

/// Train on each source, test on every other source separately: one record
/// per ordered pair. Aggregates: all pairs, and the per-train-source means.
pub fn leave_one_source_out(set: &EmbeddingSet, spec: &ClassifierSpec) -> Result<EvalReport> {
    set.require_labels()?;
    let sources = set.sources();
    if sources.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-source-out needs at least 2 sources, found {}",
            sources.len()
        )));
    }
    let mut splits = Vec::new();
    let mut by_source = Vec::new();
    for s in &sources {
        let train = set.filter(|m| &m.source_id == s);
        let mut own = Vec::new();
        for t in sources.iter().filter(|t| *t != s) {
            let test = set.filter(|m| &m.source_id == t);
            let p = evaluate_split(spec, &train, &test)?;
            own.push(p.metrics);
            splits.push(SplitRecord {
                name: format!("{s}->{t}"),
                train_sources: vec![s.clone()],
                test_sources: vec![t.clone()],
                n_train: train.len(),
                n_test: test.len(),
                metrics: p.metrics,
            });
        }
        by_source.push(Aggregate::of(s.clone(), &own)?.mean);
    }
    let all: Vec<Metrics> = splits.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        protocol: "loso".into(),
        classifier: spec.name(),
        aggregates: vec![
            Aggregate::of("pairs", &all)?,
            Aggregate::of("train_sources", &by_source)?,
        ],
        splits,
    })
}

/// Fold index per row. Rows are shuffled by `seed`; when every class has at
/// least `k` members, each class is dealt round-robin across folds
/// (stratified), otherwise the shuffled rows are dealt directly.
pub fn fold_assignment(labels: &[&str], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Param(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Protocol(format!("{} rows cannot form {k} folds", labels.len())));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut stream(seed, &[0xF01D]));
    let mut classes: Vec<&str> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let stratify = classes.iter().all(|c| labels.iter().filter(|l| *l == c).count() >= k);
    if !stratify {
        log::warn!("some class has fewer than {k} rows; folds are not stratified");
    }
    let mut fold = vec![0; labels.len()];
    if stratify {
        // continue the round-robin across classes so fold sizes stay balanced
        let mut next = 0;
        for c in &classes {
            for &i in order.iter().filter(|&&i| labels[i] == *c) {
                fold[i] = next % k;
                next += 1;
            }
        }
    } else {
        for (pos, &i) in order.iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    Ok(fold)
}

pub fn kfold(set: &EmbeddingSet, k: usize, seed: u64, spec: &ClassifierSpec) -> Result<EvalReport> {
    set.require_labels()?;
    let labels: Vec<&str> = set.labels().collect();
    let fold = fold_assignment(&labels, k, seed)?;
    let sources = set.sources();
    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let train_rows: Vec<usize> = (0..set.len()).filter(|&i| fold[i] != f).collect();
        let test_rows: Vec<usize> = (0..set.len()).filter(|&i| fold[i] == f).collect();
        let (train, test) = (set.select(&train_rows), set.select(&test_rows));
        let p = evaluate_split(spec, &train, &test)?;
        splits.push(SplitRecord {
            name: format!("fold{f}"),
            train_sources: sources.clone(),
            test_sources: sources.clone(),
            n_train: train.len(),
            n_test: test.len(),
            metrics: p.metrics,
        });
    }
    let all: Vec<Metrics> = splits.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        protocol: format!("kfold{k}"),
        classifier: spec.name(),
        aggregates: vec![Aggregate::of("folds", &all)?],
        splits,
    })
}
