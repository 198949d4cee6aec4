//! Zero-shot and few-shot evaluation, retrieval metrics, report export and
//! across-seed statistics.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::contrastive::cosine_matrix;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::synthdata::{fewshot_subset, Dataset, Example, PairedBatch, Split};
use crate::trainer::{finetune, TrainConfig};

/// Fraction of labelled examples the classifier gets right. An empty set
/// scores 0.
pub fn accuracy(model: &Model, params: &ParamSet, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let cfg = model.config();
    let batch = PairedBatch::from_examples("", cfg.image_dim, cfg.text_dim, examples);
    let labels = batch.labels()?;
    let predicted = model.predict(params, &batch.images, &batch.texts)?.argmax_rows();
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub metric: String,
    pub shot: usize,
    pub seed: u64,
    /// Hash of the evaluated parameters.
    pub checkpoint: String,
    pub per_language: BTreeMap<String, f64>,
    pub mean: f64,
}

impl EvalReport {
    pub fn new(
        stage: &str,
        metric: &str,
        shot: usize,
        seed: u64,
        checkpoint: String,
        per_language: BTreeMap<String, f64>,
    ) -> Self {
        let mean = mean(&per_language.values().copied().collect::<Vec<_>>());
        Self {
            stage: stage.to_string(),
            metric: metric.to_string(),
            shot,
            seed,
            checkpoint,
            per_language,
            mean,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = MetricRecord> + '_ {
        self.per_language.iter().map(|(lang, &value)| MetricRecord {
            stage: self.stage.clone(),
            language: lang.clone(),
            shot: self.shot,
            metric: self.metric.clone(),
            value,
            seed: self.seed,
        })
    }
}

/// One row of tabular output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub language: String,
    pub shot: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn write_jsonl<T: Serialize>(rows: &[T], out: &mut dyn Write) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Comma-separated export with a header row taken from the field names.
pub fn write_csv<T: Serialize>(rows: &[T], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Accuracy on each target's test split with no parameter updates.
pub fn eval_zero_shot(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    targets: &[String],
    stage: &str,
    seed: u64,
) -> Result<EvalReport> {
    let scores = targets
        .par_iter()
        .map(|t| {
            let test = dataset.split(t, Split::Test)?;
            Ok((t.clone(), accuracy(model, params, test)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport::new(stage, "accuracy", 0, seed, params.hash_hex(), scores))
}

/// For each `k`, fine-tunes a private copy of `params` on the `k`-shot
/// subset of `lang` and scores the test split. `k = 0` is the zero-shot
/// report.
pub fn eval_few_shot(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    lang: &str,
    shots: &[usize],
    config: &TrainConfig,
    stage: &str,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let lang = lang.to_string();
    shots
        .iter()
        .map(|&k| {
            if k == 0 {
                return eval_zero_shot(model, params, dataset, std::slice::from_ref(&lang), stage, seed);
            }
            let subset = fewshot_subset(dataset, &lang, k, seed)?;
            let cfg = TrainConfig {
                batch_size: config.batch_size.min(k),
                ..config.clone()
            };
            let tuned = finetune(model, params, &subset, None, &cfg)?;
            let acc = accuracy(model, &tuned.params, dataset.split(&lang, Split::Test)?)?;
            Ok(EvalReport::new(
                stage,
                "accuracy",
                k,
                seed,
                tuned.params.hash_hex(),
                BTreeMap::from([(lang.clone(), acc)]),
            ))
        })
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `(IR, TR)` Recall@1 over one batch of aligned pairs. IR queries each
/// text against all images; TR queries each image against all texts.
pub fn recall_at_1(model: &Model, params: &ParamSet, batch: &PairedBatch) -> Result<(f64, f64)> {
    let (u, v) = model.embed(params, &batch.images, &batch.texts)?;
    recall_from_embeddings(&u, &v)
}

/// Recall@1 of already projected image rows `u` and text rows `v`.
pub fn recall_from_embeddings(
    u: &crate::tensor::Tensor,
    v: &crate::tensor::Tensor,
) -> Result<(f64, f64)> {
    let n = u.rows();
    if n < 2 {
        return Err(Error::shape("retrieval batch", "at least 2 pairs", n));
    }
    let s = cosine_matrix(u, v)?;
    let ir = (0..n)
        .filter(|&t| argmax((0..n).map(|i| s.get(i, t))) == t)
        .count();
    let tr = (0..n)
        .filter(|&i| argmax((0..n).map(|t| s.get(i, t))) == i)
        .count();
    Ok((ir as f64 / n as f64, tr as f64 / n as f64))
}

/// Splits `examples` into seeded, shuffled pools of `pool_size` pairs. A
/// trailing remainder smaller than the pool size is dropped.
pub fn retrieval_pools(
    examples: &[Example],
    pool_size: usize,
    image_dim: usize,
    text_dim: usize,
    seed: u64,
) -> Vec<PairedBatch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks_exact(pool_size.max(1))
        .map(|c| {
            let lang = examples[c[0]].lang.as_str();
            PairedBatch::from_examples(lang, image_dim, text_dim, c.iter().map(|&i| &examples[i]))
                .without_labels()
        })
        .collect()
}

/// Mean `(IR, TR)` over pools of 100 drawn from a test split.
pub fn eval_retrieval(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    lang: &str,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = model.config();
    let pools = retrieval_pools(
        dataset.split(lang, Split::Test)?,
        100,
        cfg.image_dim,
        cfg.text_dim,
        seed,
    );
    if pools.is_empty() {
        return Err(Error::InsufficientData {
            language: lang.to_string(),
            needed: 100,
            available: dataset.split(lang, Split::Test)?.len(),
        });
    }
    let scores = pools
        .iter()
        .map(|p| recall_at_1(model, params, p))
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean, with the `n − 1` sample variance.
pub fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// One-sided paired t-test of `H1: mean(ours − baseline) > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_delta: f64,
    pub stderr: f64,
    pub t: f64,
    pub p_value: f64,
}

impl PairedTest {
    pub fn significant(&self, level: f64) -> bool {
        self.p_value < level
    }
}

pub fn paired_t_test(ours: &[f64], baseline: &[f64]) -> Result<PairedTest> {
    if ours.len() != baseline.len() {
        return Err(Error::shape("paired samples", ours.len(), baseline.len()));
    }
    let n = ours.len();
    if n < 2 {
        return Err(Error::shape("paired samples", "at least 2", n));
    }
    let deltas: Vec<f64> = ours.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let m = mean(&deltas);
    let se = stderr(&deltas);
    let (t, p) = if se == 0.0 {
        // Identical deltas: certain in their direction.
        let p = if m > 0.0 { 0.0 } else { 1.0 };
        (m.signum() * f64::INFINITY, p)
    } else {
        let t = m / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df ≥ 1");
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest {
        n,
        mean_delta: m,
        stderr: se,
        t,
        p_value: p,
    })
}
