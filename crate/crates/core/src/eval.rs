//! Accuracy tables, top-K curves and prediction-confidence summaries.
//!
//! Confidence is the probability the model assigns to its predicted class.
//! Adversarial sets are always produced by attacking the evaluated model
//! with its own gradients.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{attack_dataset, AttackConfig};
use crate::autodiff::Tensor;
use crate::data::{stack_points, PointCloud};
use crate::error::{Error, Result};
use crate::fmt::fmt17;
use crate::model::{check_k, top_k, ModelBundle};

/// Clouds per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

/// Largest K reported in top-K curves.
pub const MAX_TOP_K: usize = 5;

/// Class probabilities `[n, C]` for every cloud, computed in chunks of
/// equally sized clouds. Chunks run on the current rayon pool; each cloud's
/// result does not depend on how the work is split.
pub fn predict_probs(bundle: &ModelBundle, clouds: &[PointCloud]) -> Result<Tensor> {
    if clouds.is_empty() {
        return Err(Error::EmptyPopulation("clouds to evaluate"));
    }
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < clouds.len() {
        let n = clouds[start].len();
        let mut end = start + 1;
        while end < clouds.len() && end - start < EVAL_CHUNK && clouds[end].len() == n {
            end += 1;
        }
        ranges.push(start..end);
        start = end;
    }
    let parts = ranges
        .into_par_iter()
        .map(|r| {
            let members: Vec<&PointCloud> = clouds[r].iter().collect();
            let lp = bundle.log_probs(&stack_points(&members)?)?;
            Ok(lp.data().iter().map(|v| v.exp()).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = parts.into_iter().flatten().collect();
    Tensor::new([clouds.len(), bundle.class_count()], data)
}

fn rows(probs: &Tensor) -> std::slice::Chunks<'_, f64> {
    probs.data().chunks(probs.shape()[1])
}

/// Fraction of rows whose label is among the `k` highest scores.
pub fn top_k_from_probs(probs: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    check_k(k, c)?;
    if n == 0 || n != labels.len() {
        return Err(Error::Shape {
            op: "top_k_accuracy",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = rows(probs)
        .zip(labels)
        .filter(|(row, y)| top_k(row, k).contains(y))
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn top_k_accuracy(bundle: &ModelBundle, clouds: &[PointCloud], k: usize) -> Result<f64> {
    check_k(k, bundle.class_count())?;
    let probs = predict_probs(bundle, clouds)?;
    let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
    top_k_from_probs(&probs, &labels, k)
}

/// Minimum, quartiles and maximum of a population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn values(&self) -> [f64; 5] {
        [self.min, self.q1, self.median, self.q3, self.max]
    }
}

/// Quantile `q` of sorted data by linear interpolation between closest
/// ranks, position `q * (n - 1)`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn five_number(values: &[f64], what: &'static str) -> Result<FiveNumber> {
    if values.is_empty() {
        return Err(Error::EmptyPopulation(what));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN in {what}")));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(FiveNumber {
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Predicted-class probability per row, paired with whether it was right.
pub fn confidences(probs: &Tensor, labels: &[usize]) -> Vec<(f64, bool)> {
    rows(probs)
        .zip(labels)
        .map(|(row, &y)| {
            let pred = top_k(row, 1)[0];
            (row[pred], pred == y)
        })
        .collect()
}

pub fn confidence_stats(
    bundle: &ModelBundle,
    clouds: &[PointCloud],
    correct_only: bool,
) -> Result<FiveNumber> {
    let probs = predict_probs(bundle, clouds)?;
    let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
    let conf = confidences(&probs, &labels);
    let pop: Vec<f64> = conf
        .iter()
        .filter(|(_, ok)| !correct_only || *ok)
        .map(|(p, _)| *p)
        .collect();
    five_number(&pop, if correct_only { "correct predictions" } else { "predictions" })
}

/// Metrics of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetEval {
    pub accuracy: f64,
    /// Entry `k - 1` holds top-`k` accuracy.
    pub top_k: Vec<f64>,
    /// `None` for classes absent from the set.
    pub per_class: Vec<Option<f64>>,
    pub confidence_all: FiveNumber,
    /// `None` when no prediction was correct.
    pub confidence_correct: Option<FiveNumber>,
}

pub fn evaluate_probs(probs: &Tensor, labels: &[usize]) -> Result<SetEval> {
    let c = probs.shape()[1];
    let top: Vec<f64> = (1..=c.min(MAX_TOP_K))
        .map(|k| top_k_from_probs(probs, labels, k))
        .collect::<Result<_>>()?;
    let conf = confidences(probs, labels);
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for ((_, ok), &y) in conf.iter().zip(labels) {
        totals[y] += 1;
        hits[y] += usize::from(*ok);
    }
    let all: Vec<f64> = conf.iter().map(|(p, _)| *p).collect();
    let correct: Vec<f64> = conf.iter().filter(|(_, ok)| *ok).map(|(p, _)| *p).collect();
    Ok(SetEval {
        accuracy: top[0],
        top_k: top,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        confidence_all: five_number(&all, "predictions")?,
        confidence_correct: five_number(&correct, "correct predictions").ok(),
    })
}

pub fn evaluate_set(bundle: &ModelBundle, clouds: &[PointCloud]) -> Result<SetEval> {
    let probs = predict_probs(bundle, clouds)?;
    let labels: Vec<usize> = clouds.iter().map(|c| c.label).collect();
    evaluate_probs(&probs, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeEval {
    pub name: String,
    pub real: SetEval,
    pub adversarial: SetEval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub attack: AttackConfig,
    pub class_count: usize,
    pub rows: Vec<RegimeEval>,
}

/// Evaluates one model on `test` and on its own white-box adversarial copy,
/// returning the attacked clouds alongside the metrics.
pub fn evaluate_model(
    name: &str,
    bundle: &ModelBundle,
    test: &[PointCloud],
    attack: &AttackConfig,
) -> Result<(RegimeEval, Vec<PointCloud>)> {
    let adversarial = attack_dataset(bundle, test, attack, EVAL_CHUNK)?;
    let row = RegimeEval {
        name: name.to_string(),
        real: evaluate_set(bundle, test)?,
        adversarial: evaluate_set(bundle, &adversarial)?,
    };
    Ok((row, adversarial))
}

pub fn evaluate_table(
    bundles: &[(&str, &ModelBundle)],
    test: &[PointCloud],
    attack: &AttackConfig,
) -> Result<EvalReport> {
    let class_count = match bundles.first() {
        Some((_, b)) => b.class_count(),
        None => return Err(Error::EmptyPopulation("models to evaluate")),
    };
    if let Some((name, b)) = bundles.iter().find(|(_, b)| b.class_count() != class_count) {
        return Err(Error::Contract(format!(
            "model {name} has {} classes, expected {class_count}",
            b.class_count()
        )));
    }
    check_labels(test, class_count)?;
    let rows = bundles
        .iter()
        .map(|(name, b)| evaluate_model(name, b, test, attack).map(|(r, _)| r))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        attack: *attack,
        class_count,
        rows,
    })
}

/// Fails when a cloud's label does not fit a `classes`-way model.
pub fn check_labels(clouds: &[PointCloud], classes: usize) -> Result<()> {
    match clouds.iter().find(|c| c.label >= classes) {
        Some(c) => Err(Error::Contract(format!(
            "cloud {} has label {}, model has {classes} classes",
            c.source_id, c.label
        ))),
        None => Ok(()),
    }
}

const SETS: [&str; 2] = ["real", "adversarial"];

impl RegimeEval {
    fn sets(&self) -> [(&'static str, &SetEval); 2] {
        [(SETS[0], &self.real), (SETS[1], &self.adversarial)]
    }
}

impl EvalReport {
    /// One row per (model, set, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,set,metric,value\n");
        for row in &self.rows {
            for (set, e) in row.sets() {
                let mut put = |metric: &str, v: f64| {
                    let _ = writeln!(out, "{},{set},{metric},{}", row.name, fmt17(v));
                };
                put("accuracy", e.accuracy);
                for (k, v) in e.top_k.iter().enumerate() {
                    put(&format!("top{}", k + 1), *v);
                }
                for (c, v) in e.per_class.iter().enumerate() {
                    if let Some(v) = v {
                        put(&format!("class{c}_accuracy"), *v);
                    }
                }
                let names = ["min", "q1", "median", "q3", "max"];
                for (n, v) in names.iter().zip(e.confidence_all.values()) {
                    put(&format!("confidence_all_{n}"), v);
                }
                if let Some(cc) = &e.confidence_correct {
                    for (n, v) in names.iter().zip(cc.values()) {
                        put(&format!("confidence_correct_{n}"), v);
                    }
                }
            }
        }
        out
    }

    /// `regime,set,k,accuracy` for K = 1..=min(5, C).
    pub fn top_k_csv(&self) -> String {
        let mut out = String::from("regime,set,k,accuracy\n");
        for row in &self.rows {
            for (set, e) in row.sets() {
                for (k, v) in e.top_k.iter().enumerate() {
                    let _ = writeln!(out, "{},{set},{},{}", row.name, k + 1, fmt17(*v));
                }
            }
        }
        out
    }

    /// Five-number confidence summaries for every model, set and population.
    pub fn confidence_csv(&self) -> String {
        let mut out = String::from("regime,set,population,min,q1,median,q3,max\n");
        for row in &self.rows {
            for (set, e) in row.sets() {
                let pops = [("all", Some(&e.confidence_all)), ("correct", e.confidence_correct.as_ref())];
                for (pop, f) in pops {
                    if let Some(f) = f {
                        let v = f.values().map(fmt17);
                        let _ = writeln!(out, "{},{set},{pop},{}", row.name, v.join(","));
                    }
                }
            }
        }
        out
    }

    /// Fixed-width table of real and adversarial accuracy per model.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Accuracy on test set (FGSM {} eps={})",
            self.attack.mode, self.attack.epsilon
        );
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>11}", "Approach", "Real (%)", "Adv. (%)");
        let _ = writeln!(out, "{}", "-".repeat(width + 24));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.2}  {:>11.2}",
                r.name,
                100.0 * r.real.accuracy,
                100.0 * r.adversarial.accuracy
            );
        }
        out
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Central interval `[lo, hi]` of success counts for `Binomial(n, p)` with
/// at most `(1 - level) / 2` probability in each tail.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let tail = (1.0 - level) / 2.0;
    let pmf: Vec<f64> = (0..=n)
        .map(|k| {
            let lp = ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln();
            lp.exp()
        })
        .collect();
    let mut lo = 0;
    let mut acc = 0.0;
    for (k, &q) in pmf.iter().enumerate() {
        if acc + q > tail {
            lo = k as u64;
            break;
        }
        acc += q;
    }
    let mut hi = n;
    acc = 0.0;
    for (k, &q) in pmf.iter().enumerate().rev() {
        if acc + q > tail {
            hi = k as u64;
            break;
        }
        acc += q;
    }
    (lo, hi)
}
