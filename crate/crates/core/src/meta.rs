//! Cross-lingual vision-language MAML.
//!
//! Per episode, a support batch `B_s` and query batch `B_q` come from the
//! auxiliary language.
//!
//! - Unsupervised: `θ ← θ − β ∇_θ L_CL(θ − α ∇_θ L_CL(θ)_{B_s})_{B_q}`.
//! - Supervised: two adaptations branch from the same `θ`, `θ″` on the task
//!   loss and `θ′` on the contrastive loss, and
//!   `θ ← θ − β (∇_θ L(θ″)_{B_q} + λ ∇_θ L_CL(θ′)_{B_q})`.
//! - Task-only: the supervised update without the contrastive branch.
//!
//! The inner step is stateless plain descent. The outer step is plain
//! descent by default, AdamW optionally.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_of, grad_through_steps, Bound, GradOrder, Graph, StepGradient, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamSet;
use crate::synthdata::{Dataset, PairedBatch, Split};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaMode {
    /// Contrastive loss in both loops; never reads task labels.
    Unsupervised,
    /// Task branch plus λ-scaled contrastive branch.
    #[default]
    Supervised,
    /// Task branch only.
    TaskOnly,
    /// Supervised objective with first-order meta-gradients.
    FirstOrder,
}

impl MetaMode {
    pub fn uses_labels(self) -> bool {
        self != MetaMode::Unsupervised
    }
}

impl std::str::FromStr for MetaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "unsupervised" => Ok(MetaMode::Unsupervised),
            "supervised" => Ok(MetaMode::Supervised),
            "task-only" => Ok(MetaMode::TaskOnly),
            "first-order" => Ok(MetaMode::FirstOrder),
            _ => Err(format!("unknown meta mode `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// α
    pub inner_lr: f64,
    /// β
    pub meta_lr: f64,
    /// λ
    pub contrastive_scale: f64,
    pub support_size: usize,
    pub query_size: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    pub mode: MetaMode,
    /// Forces first-order meta-gradients in any mode.
    pub first_order: bool,
    /// Unrolled inner steps.
    pub inner_steps: usize,
    pub outer_optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 5e-4,
            meta_lr: 5e-6,
            contrastive_scale: 1e-3,
            support_size: 64,
            query_size: 64,
            iterations: 400,
            eval_interval: 25,
            mode: MetaMode::Supervised,
            first_order: false,
            inner_steps: 1,
            outer_optimizer: OptimizerKind::PlainDescent,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("meta: {m}")));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return bad("inner_lr must be positive");
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return bad("meta_lr must be positive");
        }
        if !(self.contrastive_scale >= 0.0 && self.contrastive_scale.is_finite()) {
            return bad("contrastive_scale must be non-negative");
        }
        if self.support_size == 0 || self.query_size == 0 {
            return bad("support_size and query_size must be at least 1");
        }
        if self.iterations == 0 || self.eval_interval == 0 || self.inner_steps == 0 {
            return bad("iterations, eval_interval and inner_steps must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn order(&self) -> GradOrder {
        if self.first_order || self.mode == MetaMode::FirstOrder {
            GradOrder::FirstOrder
        } else {
            GradOrder::Exact
        }
    }

    /// Number of hook evaluations `meta_train` performs.
    pub fn eval_points(&self) -> usize {
        let regular = self.iterations / self.eval_interval;
        regular + usize::from(self.iterations % self.eval_interval != 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    Task,
}

/// Loss of `kind` on `batch` at the bound parameters.
pub fn batch_loss<'g>(
    model: &Model,
    graph: &'g Graph,
    params: &Bound<'g>,
    kind: LossKind,
    batch: &PairedBatch,
) -> Result<Var<'g>> {
    let images = graph.leaf(batch.images.clone());
    let texts = graph.leaf(batch.texts.clone());
    match kind {
        LossKind::Contrastive => model.contrastive_loss(params, images, texts),
        LossKind::Task => model.task_loss(params, images, texts, batch.labels()?),
    }
}

/// `θ − α ∇loss(θ; batch)` inside a graph; the result stays differentiable
/// with respect to `params`.
pub fn inner_step_bound<'g>(
    model: &Model,
    graph: &'g Graph,
    params: &Bound<'g>,
    kind: LossKind,
    batch: &PairedBatch,
    step_size: f64,
) -> Result<Bound<'g>> {
    if step_size < 0.0 {
        return Err(Error::NegativeStep(step_size));
    }
    let loss = batch_loss(model, graph, params, kind, batch)?;
    let grads = graph.grad_params(loss, params)?;
    if !grads.values().is_finite() {
        return Err(Error::NonFinite {
            op: "inner gradient".into(),
        });
    }
    Ok(params.zip_with(&grads, |p, g| p - g * step_size))
}

/// One explicit descent step, returned as concrete parameters.
pub fn inner_step(
    model: &Model,
    params: &ParamSet,
    kind: LossKind,
    batch: &PairedBatch,
    step_size: f64,
) -> Result<ParamSet> {
    let graph = Graph::new();
    let bound = graph.bind(params);
    Ok(inner_step_bound(model, &graph, &bound, kind, batch, step_size)?.values())
}

/// Support and query batches from one language.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: PairedBatch,
    pub query: PairedBatch,
    pub language: String,
}

/// Draws disjoint support and query batches uniformly without replacement
/// from the training split of `lang`. Labels are stripped in unsupervised
/// mode.
pub fn sample_episode(
    dataset: &Dataset,
    lang: &str,
    config: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let pool = dataset.split(lang, Split::Train)?;
    let needed = config.support_size + config.query_size;
    if pool.len() < needed {
        return Err(Error::InsufficientData {
            language: lang.to_string(),
            needed,
            available: pool.len(),
        });
    }
    let idx = rand::seq::index::sample(rng, pool.len(), needed).into_vec();
    let (s, q) = idx.split_at(config.support_size);
    let cfg = dataset.config();
    let batch = |ids: &[usize]| {
        let b = PairedBatch::from_examples(
            lang,
            cfg.image_dim,
            cfg.text_dim,
            ids.iter().map(|&i| &pool[i]),
        );
        if config.mode.uses_labels() {
            b
        } else {
            b.without_labels()
        }
    };
    Ok(Episode {
        support: batch(s),
        query: batch(q),
        language: lang.to_string(),
    })
}

/// Meta-gradient of one branch: `∇_θ L_kind(adapt_kind(θ; B_s); B_q)`.
pub fn branch_meta_gradient(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    kind: LossKind,
    config: &MetaConfig,
) -> Result<StepGradient> {
    grad_through_steps(
        params,
        config.inner_lr,
        config.inner_steps,
        config.order(),
        |g, p| batch_loss(model, g, p, kind, &episode.support),
        |g, p| batch_loss(model, g, p, kind, &episode.query),
    )
}

/// Meta-gradient and losses for one episode.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: ParamSet,
    /// Support-set objective before adaptation.
    pub inner_loss: f64,
    /// Query-set objective after adaptation.
    pub query_loss: f64,
    pub task: Option<StepGradient>,
    pub contrastive: Option<StepGradient>,
}

/// Combined meta-gradient for the configured mode.
pub fn meta_gradient(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<MetaGradient> {
    let lambda = config.contrastive_scale;
    match config.mode {
        MetaMode::Unsupervised => {
            let cl = branch_meta_gradient(model, params, episode, LossKind::Contrastive, config)?;
            Ok(MetaGradient {
                grad: cl.grad.clone(),
                inner_loss: cl.inner_loss,
                query_loss: cl.outer_loss,
                task: None,
                contrastive: Some(cl),
            })
        }
        MetaMode::TaskOnly => {
            let task = branch_meta_gradient(model, params, episode, LossKind::Task, config)?;
            Ok(MetaGradient {
                grad: task.grad.clone(),
                inner_loss: task.inner_loss,
                query_loss: task.outer_loss,
                task: Some(task),
                contrastive: None,
            })
        }
        MetaMode::Supervised | MetaMode::FirstOrder => {
            let task = branch_meta_gradient(model, params, episode, LossKind::Task, config)?;
            let cl = branch_meta_gradient(model, params, episode, LossKind::Contrastive, config)?;
            // λ = 0 must reproduce the task-only update bit for bit, so the
            // contrastive term is only added when it can contribute.
            let (grad, inner_loss, query_loss) = if lambda == 0.0 {
                (task.grad.clone(), task.inner_loss, task.outer_loss)
            } else {
                (
                    task.grad.add_scaled(&cl.grad, lambda)?,
                    task.inner_loss + lambda * cl.inner_loss,
                    task.outer_loss + lambda * cl.outer_loss,
                )
            };
            Ok(MetaGradient {
                grad,
                inner_loss,
                query_loss,
                task: Some(task),
                contrastive: Some(cl),
            })
        }
    }
}

/// Stateful outer loop: holds the outer optimizer across episodes.
#[derive(Clone, Debug)]
pub struct MetaLearner<'m> {
    model: &'m Model,
    config: MetaConfig,
    optimizer: Optimizer,
}

impl<'m> MetaLearner<'m> {
    pub fn new(model: &'m Model, config: MetaConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.outer_optimizer, config.meta_lr, config.weight_decay);
        Ok(Self {
            model,
            config,
            optimizer,
        })
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    /// One meta-update on `episode`.
    pub fn step(&mut self, params: &ParamSet, episode: &Episode) -> Result<(ParamSet, MetaGradient)> {
        let mg = meta_gradient(self.model, params, episode, &self.config)?;
        let next = self.optimizer.step(params, &mg.grad)?;
        Ok((next, mg))
    }
}

/// Unsupervised meta-step with plain descent: returns the new `θ` and the
/// query contrastive loss.
pub fn meta_step_unsupervised(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<(ParamSet, f64)> {
    let config = MetaConfig {
        mode: MetaMode::Unsupervised,
        ..config.clone()
    };
    let mg = meta_gradient(model, params, episode, &config)?;
    Ok((params.add_scaled(&mg.grad, -config.meta_lr)?, mg.query_loss))
}

/// Supervised meta-step with plain descent. Requires labelled batches.
pub fn meta_step_supervised(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<(ParamSet, f64)> {
    episode.support.labels()?;
    episode.query.labels()?;
    let config = MetaConfig {
        mode: match config.mode {
            MetaMode::FirstOrder => MetaMode::FirstOrder,
            _ => MetaMode::Supervised,
        },
        ..config.clone()
    };
    let mg = meta_gradient(model, params, episode, &config)?;
    Ok((params.add_scaled(&mg.grad, -config.meta_lr)?, mg.query_loss))
}

/// One line of the meta-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub inner_loss: f64,
    pub query_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hook_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: usize,
    pub score: f64,
    pub params: ParamSet,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    /// Highest-scoring evaluated checkpoint; the earliest wins ties.
    pub best: Checkpoint,
    pub last: ParamSet,
    pub history: Vec<LogRecord>,
}

impl MetaOutcome {
    pub fn scores(&self) -> Vec<(usize, f64)> {
        self.history
            .iter()
            .filter_map(|r| r.hook_score.map(|s| (r.iteration, s)))
            .collect()
    }
}

/// Runs `config.iterations` meta-steps on episodes from `aux_lang`, calling
/// `eval_hook` every `eval_interval` iterations and after the last one.
pub fn meta_train(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    aux_lang: &str,
    config: &MetaConfig,
    eval_hook: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    mut log: Option<&mut dyn Write>,
) -> Result<MetaOutcome> {
    let mut learner = MetaLearner::new(model, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = params.clone();
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        let episode = sample_episode(dataset, aux_lang, config, &mut rng)?;
        let (next, mg) = learner.step(&theta, &episode)?;
        theta = next;
        let hook_score = if it % config.eval_interval == 0 || it == config.iterations {
            let score = eval_hook(&theta)?;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(Checkpoint {
                    iteration: it,
                    score,
                    params: theta.clone(),
                });
            }
            Some(score)
        } else {
            None
        };
        let record = LogRecord {
            iteration: it,
            inner_loss: mg.inner_loss,
            query_loss: mg.query_loss,
            hook_score,
        };
        tracing::debug!(?record, "meta step");
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<meta log>", e))?;
        }
        history.push(record);
    }

    Ok(MetaOutcome {
        best: best.expect("at least one evaluation"),
        last: theta,
        history,
    })
}

/// Plain gradient of a batch loss; used by training loops and checks.
pub fn loss_gradient(
    model: &Model,
    params: &ParamSet,
    kind: LossKind,
    batch: &PairedBatch,
) -> Result<(f64, ParamSet)> {
    grad_of(params, |g, p| batch_loss(model, g, p, kind, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_through_step, objective};
    use crate::model::{Activation, ModelConfig};
    use crate::synthdata::{generate, BenchmarkConfig};
    use crate::tensor::Tensor;

    fn tiny() -> (Model, Dataset) {
        let cfg = BenchmarkConfig {
            latent_dim: 4,
            image_dim: 5,
            text_dim: 6,
            train_per_language: 24,
            dev_per_language: 8,
            test_per_language: 8,
            ..BenchmarkConfig::default()
        };
        let model = Model::new(ModelConfig {
            image_dim: 5,
            text_dim: 6,
            hidden_dim: 4,
            embed_dim: 3,
            proj_dim: None,
            num_classes: 3,
            activation: Activation::Tanh,
        })
        .unwrap();
        (model, generate(&cfg).unwrap())
    }

    fn small_meta(mode: MetaMode) -> MetaConfig {
        MetaConfig {
            inner_lr: 0.05,
            meta_lr: 0.01,
            contrastive_scale: 0.2,
            support_size: 6,
            query_size: 6,
            iterations: 5,
            eval_interval: 2,
            mode,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = MetaConfig::default();
        assert_eq!((c.support_size, c.query_size), (64, 64));
        assert_eq!(c.inner_lr, 5e-4);
        assert_eq!(c.meta_lr, 5e-6);
        assert_eq!(c.iterations, 400);
        assert_eq!(c.eval_interval, 25);
        assert_eq!(c.contrastive_scale, 1e-3);
        assert_eq!(c.eval_points(), 16);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        for bad in [
            MetaConfig { inner_lr: 0.0, ..MetaConfig::default() },
            MetaConfig { meta_lr: -1.0, ..MetaConfig::default() },
            MetaConfig { contrastive_scale: -0.1, ..MetaConfig::default() },
            MetaConfig { support_size: 0, ..MetaConfig::default() },
            MetaConfig { iterations: 0, ..MetaConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn inner_step_on_quadratic() {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(1.0)).unwrap();
        let g = Graph::new();
        let b = g.bind(&p);
        let loss = b.get("theta").unwrap().square().scale(0.5);
        let grads = g.grad_params(loss, &b).unwrap();
        let adapted = b.zip_with(&grads, |p, g| p - g * 0.1).values();
        assert!((adapted.get("theta").unwrap().item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_step_inner_step_is_identity() {
        let (model, data) = tiny();
        let p = model.init(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&data, "aux1", &small_meta(MetaMode::Supervised), &mut rng).unwrap();
        let q = inner_step(&model, &p, LossKind::Contrastive, &ep.support, 0.0).unwrap();
        assert_eq!(p, q);
        assert!(inner_step(&model, &p, LossKind::Task, &ep.support, -1.0).is_err());
    }

    #[test]
    fn quadratic_surrogate_meta_update() {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(1.0)).unwrap();
        let loss = objective(|_, b| Ok(b.get("theta")?.square().scale(1.0)));
        let step = grad_through_step(&p, 0.1, GradOrder::Exact, loss, loss).unwrap();
        let next = p.add_scaled(&step.grad, -1.0).unwrap();
        assert!((next.get("theta").unwrap().item() + 0.28).abs() < 1e-12);
    }

    #[test]
    fn episodes_are_disjoint_and_deterministic() {
        let (_, data) = tiny();
        let cfg = MetaConfig {
            support_size: 12,
            query_size: 12,
            ..small_meta(MetaMode::Supervised)
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = sample_episode(&data, "aux1", &cfg, &mut r1).unwrap();
        let b = sample_episode(&data, "aux1", &cfg, &mut r2).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.query, b.query);
        // 24 examples split 12/12: together they are the whole split.
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for batch in [&a.support, &a.query] {
            for r in 0..batch.len() {
                rows.push(batch.images.row(r).iter().map(|v| v.to_bits()).collect());
            }
        }
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 24);

        let too_big = MetaConfig { support_size: 13, ..cfg };
        assert!(matches!(
            sample_episode(&data, "aux1", &too_big, &mut r1),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn unsupervised_episodes_carry_no_labels() {
        let (model, data) = tiny();
        let cfg = small_meta(MetaMode::Unsupervised);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&data, "aux1", &cfg, &mut rng).unwrap();
        assert!(!ep.support.has_labels() && !ep.query.has_labels());
        let p = model.init(0);
        assert!(meta_step_unsupervised(&model, &p, &ep, &cfg).is_ok());
        assert!(matches!(
            meta_step_supervised(&model, &p, &ep, &cfg),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn supervised_gradient_is_sum_of_branches() {
        let (model, data) = tiny();
        let cfg = small_meta(MetaMode::Supervised);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&data, "aux1", &cfg, &mut rng).unwrap();
        let p = model.init(2);
        let combined = meta_gradient(&model, &p, &ep, &cfg).unwrap();
        let task = branch_meta_gradient(&model, &p, &ep, LossKind::Task, &cfg).unwrap();
        let cl = branch_meta_gradient(&model, &p, &ep, LossKind::Contrastive, &cfg).unwrap();
        let expected = task.grad.add_scaled(&cl.grad, cfg.contrastive_scale).unwrap();
        let diff = combined.grad.add_scaled(&expected, -1.0).unwrap();
        assert!(diff.max_abs() <= 1e-12 * expected.max_abs().max(1.0));
    }

    #[test]
    fn meta_train_evaluates_on_schedule_and_keeps_best() {
        let (model, data) = tiny();
        let cfg = small_meta(MetaMode::Supervised);
        let p = model.init(0);
        let mut calls = 0;
        let mut hook = |_: &ParamSet| {
            calls += 1;
            Ok([0.3, 0.9, 0.5][calls - 1])
        };
        let mut log = Vec::new();
        let out = meta_train(&model, &p, &data, "aux1", &cfg, &mut hook, Some(&mut log)).unwrap();
        assert_eq!(out.scores(), vec![(2, 0.3), (4, 0.9), (5, 0.5)]);
        assert_eq!(out.best.iteration, 4);
        let lines: Vec<LogRecord> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.history);
    }

    #[test]
    fn single_iteration_runs_one_step_and_one_evaluation() {
        let (model, data) = tiny();
        let cfg = MetaConfig {
            iterations: 1,
            ..small_meta(MetaMode::TaskOnly)
        };
        let mut calls = 0;
        let mut hook = |_: &ParamSet| {
            calls += 1;
            Ok(0.0)
        };
        let out = meta_train(&model, &model.init(0), &data, "aux1", &cfg, &mut hook, None).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(calls, 1);
        assert_eq!(out.last.version(), 1);
    }
}
