use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xvl_core::gradcheck::{finite_difference, max_rel_error, value_of};
use xvl_core::meta::{
    batch_loss, inner_step, meta_step_supervised, meta_step_unsupervised, meta_train, sample_episode,
    Episode, LossKind, MetaConfig, MetaMode,
};
use xvl_core::model::{Activation, Model, ModelConfig};
use xvl_core::optim::OptimizerKind;
use xvl_core::params::ParamSet;
use xvl_core::synthdata::{generate, BenchmarkConfig, Dataset, Example, PairedBatch, Split};
use xvl_core::Error;

fn setup() -> (Model, Dataset) {
    let bench = BenchmarkConfig {
        latent_dim: 6,
        image_dim: 5,
        text_dim: 4,
        train_per_language: 40,
        dev_per_language: 10,
        test_per_language: 10,
        ..BenchmarkConfig::default()
    };
    let model = Model::new(ModelConfig {
        image_dim: 5,
        text_dim: 4,
        hidden_dim: 4,
        embed_dim: 3,
        proj_dim: None,
        num_classes: 3,
        activation: Activation::Tanh,
    })
    .unwrap();
    (model, generate(&bench).unwrap())
}

fn config(mode: MetaMode) -> MetaConfig {
    MetaConfig {
        inner_lr: 0.1,
        meta_lr: 0.05,
        contrastive_scale: 0.2,
        support_size: 6,
        query_size: 6,
        iterations: 12,
        eval_interval: 1,
        mode,
        ..MetaConfig::default()
    }
}

/// Parameter hashes after every iteration, plus the final bytes.
fn trajectory(model: &Model, data: &Dataset, cfg: &MetaConfig) -> (Vec<String>, Vec<u8>) {
    let mut hashes = Vec::new();
    let mut hook = |p: &ParamSet| {
        hashes.push(p.hash_hex());
        Ok(0.0)
    };
    let out = meta_train(model, &model.init(1), data, "aux1", cfg, &mut hook, None).unwrap();
    (hashes, out.last.to_bytes())
}

#[test]
fn zero_lambda_supervised_matches_task_only_bit_for_bit() {
    let (model, data) = setup();
    for outer in [OptimizerKind::PlainDescent, OptimizerKind::AdamW] {
        let sup = MetaConfig {
            contrastive_scale: 0.0,
            outer_optimizer: outer,
            ..config(MetaMode::Supervised)
        };
        let task = MetaConfig {
            mode: MetaMode::TaskOnly,
            ..sup.clone()
        };
        let a = trajectory(&model, &data, &sup);
        let b = trajectory(&model, &data, &task);
        assert_eq!(a.0.len(), 12);
        assert_eq!(a, b);
        // A non-zero scale does change the trajectory.
        let c = trajectory(&model, &data, &MetaConfig { contrastive_scale: 0.2, ..sup });
        assert_ne!(a.1, c.1);
    }
}

#[test]
fn meta_training_is_deterministic() {
    let (model, data) = setup();
    for mode in [MetaMode::Unsupervised, MetaMode::Supervised, MetaMode::FirstOrder] {
        let cfg = config(mode);
        assert_eq!(trajectory(&model, &data, &cfg), trajectory(&model, &data, &cfg));
    }
}

fn episode(model: &Model, data: &Dataset, mode: MetaMode) -> (ParamSet, Episode) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ep = sample_episode(data, "aux1", &config(mode), &mut rng).unwrap();
    (model.init(5), ep)
}

/// `L_outer(θ − α ∇L_inner(θ))` computed only from forward values.
fn composed(model: &Model, p: &ParamSet, ep: &Episode, kind: LossKind, alpha: f64) -> f64 {
    let adapted = inner_step(model, p, kind, &ep.support, alpha).unwrap();
    value_of(&adapted, |g, b| batch_loss(model, g, b, kind, &ep.query)).unwrap()
}

#[test]
fn unsupervised_step_matches_finite_differences() {
    let (model, data) = setup();
    let cfg = config(MetaMode::Unsupervised);
    let (p, ep) = episode(&model, &data, MetaMode::Unsupervised);
    let (next, query_loss) = meta_step_unsupervised(&model, &p, &ep, &cfg).unwrap();
    let grad = p.add_scaled(&next, -1.0).unwrap().scale(1.0 / cfg.meta_lr);
    let numeric = finite_difference(&p, 1e-5, |q| {
        Ok(composed(&model, q, &ep, LossKind::Contrastive, cfg.inner_lr))
    })
    .unwrap();
    assert!(max_rel_error(&grad.flatten(), &numeric.flatten()) <= 1e-3);
    let expected = composed(&model, &p, &ep, LossKind::Contrastive, cfg.inner_lr);
    assert!((query_loss - expected).abs() <= 1e-12 * expected);
}

#[test]
fn supervised_step_matches_finite_differences() {
    let (model, data) = setup();
    let cfg = config(MetaMode::Supervised);
    let (p, ep) = episode(&model, &data, MetaMode::Supervised);
    let (next, _) = meta_step_supervised(&model, &p, &ep, &cfg).unwrap();
    let grad = p.add_scaled(&next, -1.0).unwrap().scale(1.0 / cfg.meta_lr);
    let numeric = finite_difference(&p, 1e-5, |q| {
        Ok(composed(&model, q, &ep, LossKind::Task, cfg.inner_lr)
            + cfg.contrastive_scale * composed(&model, q, &ep, LossKind::Contrastive, cfg.inner_lr))
    })
    .unwrap();
    assert!(max_rel_error(&grad.flatten(), &numeric.flatten()) <= 1e-3);
}

#[test]
fn first_order_step_differs_from_exact() {
    let (model, data) = setup();
    let (p, ep) = episode(&model, &data, MetaMode::Supervised);
    let exact = meta_step_supervised(&model, &p, &ep, &config(MetaMode::Supervised)).unwrap().0;
    let first = meta_step_supervised(&model, &p, &ep, &config(MetaMode::FirstOrder)).unwrap().0;
    let gap = exact.add_scaled(&first, -1.0).unwrap().max_abs();
    assert!(gap > 1e-8, "gap {gap}");
}

fn strip_labels(data: &Dataset, lang: &str) -> Dataset {
    let examples: Vec<Example> = data
        .splits()
        .flat_map(|(l, _, ex)| {
            ex.iter().map(move |e| Example {
                label: if l == lang { None } else { e.label },
                ..e.clone()
            })
        })
        .collect();
    Dataset::from_examples(data.config().clone(), examples).unwrap()
}

#[test]
fn unsupervised_training_needs_no_auxiliary_labels() {
    let (model, data) = setup();
    let unlabeled = strip_labels(&data, "aux1");
    let cfg = config(MetaMode::Unsupervised);
    let mut hook = |_: &ParamSet| Ok(0.0);
    let a = meta_train(&model, &model.init(1), &unlabeled, "aux1", &cfg, &mut hook, None).unwrap();
    let b = meta_train(&model, &model.init(1), &data, "aux1", &cfg, &mut hook, None).unwrap();
    assert_eq!(a.last, b.last);

    for mode in [MetaMode::Supervised, MetaMode::TaskOnly, MetaMode::FirstOrder] {
        let res = meta_train(&model, &model.init(1), &unlabeled, "aux1", &config(mode), &mut hook, None);
        assert!(matches!(res, Err(Error::MissingLabels)), "{mode:?}");
    }
}

#[test]
fn supervised_step_rejects_unlabeled_batches() {
    let (model, data) = setup();
    let (p, ep) = episode(&model, &data, MetaMode::Unsupervised);
    assert!(matches!(
        meta_step_supervised(&model, &p, &ep, &config(MetaMode::Supervised)),
        Err(Error::MissingLabels)
    ));
}

#[test]
fn episode_inclusion_is_uniform() {
    let (_, data) = setup();
    let n = data.split("aux1", Split::Train).unwrap().len();
    let cfg = MetaConfig {
        support_size: 7,
        query_size: 5,
        ..config(MetaMode::Supervised)
    };
    let id_of = |b: &PairedBatch, r: usize| {
        data.split("aux1", Split::Train)
            .unwrap()
            .iter()
            .position(|e| e.img.as_slice() == b.images.row(r))
            .unwrap()
    };
    let draws = 10_000;
    let mut counts = vec![0usize; n];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..draws {
        let ep = sample_episode(&data, "aux1", &cfg, &mut rng).unwrap();
        let mut ids: Vec<usize> = (0..7).map(|r| id_of(&ep.support, r)).collect();
        ids.extend((0..5).map(|r| id_of(&ep.query, r)));
        let mut uniq = ids.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 12, "support and query overlap");
        for i in ids {
            counts[i] += 1;
        }
    }
    let p = 12.0 / n as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "example {i}: {c} vs {mean:.1} ± {sigma:.1}");
    }
}

#[test]
fn episode_needs_enough_examples() {
    let (_, data) = setup();
    let cfg = MetaConfig {
        support_size: 30,
        query_size: 11,
        ..config(MetaMode::Supervised)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sample_episode(&data, "aux1", &cfg, &mut rng),
        Err(Error::InsufficientData { needed: 41, available: 40, .. })
    ));
}

#[test]
fn default_schedule_evaluates_sixteen_times_and_keeps_the_best() {
    let (model, data) = setup();
    let cfg = MetaConfig {
        support_size: 2,
        query_size: 2,
        mode: MetaMode::TaskOnly,
        ..MetaConfig::default()
    };
    assert_eq!(cfg.iterations, 400);
    assert_eq!(cfg.eval_interval, 25);
    let mut calls = 0usize;
    let mut hook = |_: &ParamSet| {
        calls += 1;
        Ok(((calls * 7) % 11) as f64)
    };
    let out = meta_train(&model, &model.init(0), &data, "aux1", &cfg, &mut hook, None).unwrap();
    let scores = out.scores();
    assert_eq!(scores.len(), 16);
    assert_eq!(scores.iter().map(|s| s.0).collect::<Vec<_>>(), (1..=16).map(|k| 25 * k).collect::<Vec<_>>());
    assert!(scores.iter().all(|&(_, s)| s <= out.best.score));
    let first_best = scores.iter().find(|&&(_, s)| s == out.best.score).unwrap().0;
    assert_eq!(out.best.iteration, first_best);
}
