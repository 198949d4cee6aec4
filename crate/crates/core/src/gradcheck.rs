//! Finite-difference gradient checks for every primitive op, the losses,
//! the inner step and both meta-gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_of, grad_through_step, objective, Bound, GradOrder, Graph, Var};
use crate::error::Result;
use crate::meta::{batch_loss, inner_step, meta_gradient, Episode, LossKind, MetaConfig, MetaMode};
use crate::model::{Activation, Model, ModelConfig};
use crate::params::ParamSet;
use crate::synthdata::PairedBatch;
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_FLOOR)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` over every scalar of `params`.
pub fn finite_difference(
    params: &ParamSet,
    eps: f64,
    f: impl Fn(&ParamSet) -> Result<f64>,
) -> Result<ParamSet> {
    let base = params.flatten();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + eps;
        let plus = f(&params.unflatten(&x)?)?;
        x[i] = base[i] - eps;
        let minus = f(&params.unflatten(&x)?)?;
        x[i] = base[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    params.unflatten(&out)
}

/// Value of a graph objective without gradients.
pub fn value_of<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let b = g.bind(params);
    Ok(f(&g, &b)?.item())
}

fn check_objective<F>(name: &str, params: &ParamSet, tol: f64, f: F) -> Result<CheckResult>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    let (_, analytic) = grad_of(params, &f)?;
    let numeric = finite_difference(params, 1e-6, |p| value_of(p, &f))?;
    Ok(CheckResult::new(
        name,
        max_rel_error(&analytic.flatten(), &numeric.flatten()),
        tol,
    ))
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Inputs for the op-level checks. `x` and `w` are 3×4 and positive,
/// `m` is 4×2, `r` is 1×4 and `c` is 3×1.
fn op_inputs(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in [
        ("x", random(rng, 3, 4, 0.3, 1.5)),
        ("w", random(rng, 3, 4, 0.3, 1.5)),
        ("s", random(rng, 3, 4, -1.5, 1.5)),
        ("m", random(rng, 4, 2, -1.0, 1.0)),
        ("r", random(rng, 1, 4, -1.0, 1.0)),
        ("c", random(rng, 3, 1, -1.0, 1.0)),
        ("k", random(rng, 1, 1, -1.0, 1.0)),
    ] {
        p.insert(name, t).expect("distinct names");
    }
    // Keep relu inputs away from the kink.
    let s = p.get("s").expect("present").map(|v| if v.abs() < 0.2 { v + 0.4 } else { v });
    p.set("s", s).expect("same shape");
    p
}

fn op_check(name: &str, params: &ParamSet) -> Result<CheckResult> {
    let tol = 1e-4;
    let f = objective(move |graph: &Graph, p: &Bound| {
        let (x, w, s) = (p.get("x")?, p.get("w")?, p.get("s")?);
        Ok(match name {
            "add" => (x + w).sum(),
            "sub" => (x - w).sum(),
            "mul" => (x * w).sum(),
            "div" => (x / w).sum(),
            "scale" => x.scale(-1.7).sum(),
            "shift" => x.shift(0.3).sum(),
            "matmul" => x.matmul(p.get("m")?).sum(),
            "transpose" => x.t().sum(),
            "tanh" => s.tanh().sum(),
            "relu" => s.relu().sum(),
            "exp" => s.exp().sum(),
            "log" => x.ln().sum(),
            "sqrt" => x.sqrt().sum(),
            "sum" => x.sum(),
            "sum_rows" => x.sum_rows().sum(),
            "sum_cols" => x.sum_cols().sum(),
            "expand" => p.get("k")?.expand(3, 4).sum(),
            "broadcast_rows" => p.get("r")?.broadcast_rows(3).sum(),
            "broadcast_cols" => p.get("c")?.broadcast_cols(4).sum(),
            "pick" => x.pick(&[3, 0, 2]).sum(),
            // Only reachable through the adjoint of `pick`, so check it by
            // differentiating a gradient.
            "scatter" => {
                let g = graph.grad(s.tanh().pick(&[1, 3, 0]).sum(), &[s])?[0];
                g.sum()
            }
            other => unreachable!("no check for op `{other}`"),
        })
    });
    check_objective(&format!("op:{name}"), params, tol, f)
}

/// A small tanh model and a labelled batch for the composite checks.
pub fn fixture(seed: u64) -> (Model, ParamSet, Episode) {
    let model = Model::new(ModelConfig {
        image_dim: 4,
        text_dim: 5,
        hidden_dim: 3,
        embed_dim: 3,
        proj_dim: Some(3),
        num_classes: 3,
        activation: Activation::Tanh,
    })
    .expect("valid config");
    let params = model.init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut batch = |n: usize| {
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        PairedBatch::new(
            random(&mut rng, n, 4, -1.0, 1.0),
            random(&mut rng, n, 5, -1.0, 1.0),
            Some(labels),
            "aux",
        )
        .expect("consistent batch")
    };
    let episode = Episode {
        support: batch(5),
        query: batch(5),
        language: "aux".into(),
    };
    (model, params, episode)
}

/// `L_outer(θ − α ∇L_inner(θ))` evaluated numerically.
fn composed(
    model: &Model,
    params: &ParamSet,
    episode: &Episode,
    kind: LossKind,
    alpha: f64,
) -> Result<f64> {
    let adapted = inner_step(model, params, kind, &episode.support, alpha)?;
    value_of(&adapted, |g, p| batch_loss(model, g, p, kind, &episode.query))
}

/// Runs the whole suite. Tolerances: 1e-4 for first-order quantities,
/// 1e-3 for meta-gradients, 1e-10 for the closed forms and 1e-12 for the
/// `α = 0` identity.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = op_inputs(&mut rng);
    for name in crate::autodiff::OP_NAMES {
        checks.push(op_check(name, &inputs)?);
    }

    // Contrastive loss with respect to the projected rows themselves.
    let mut uv = ParamSet::new();
    uv.insert("u", random(&mut rng, 5, 3, -1.0, 1.0))?;
    uv.insert("v", random(&mut rng, 5, 3, -1.0, 1.0))?;
    checks.push(check_objective("contrastive:loss", &uv, 1e-4, |_, p| {
        crate::contrastive::contrastive_loss(p.get("u")?, p.get("v")?)
    })?);

    let (model, params, ep) = fixture(seed);
    let m = &model;
    checks.push(check_objective("model:contrastive", &params, 1e-4, |g, p| {
        batch_loss(m, g, p, LossKind::Contrastive, &ep.support)
    })?);
    checks.push(check_objective("model:task", &params, 1e-4, |g, p| {
        batch_loss(m, g, p, LossKind::Task, &ep.support)
    })?);

    // θ′ = θ − α ∇L_CL against a numerical gradient.
    let alpha = 0.1;
    let adapted = inner_step(m, &params, LossKind::Contrastive, &ep.support, alpha)?;
    let numeric = finite_difference(&params, 1e-6, |p| {
        value_of(p, |g, b| batch_loss(m, g, b, LossKind::Contrastive, &ep.support))
    })?;
    let step = params.add_scaled(&adapted, -1.0)?.scale(1.0 / alpha);
    checks.push(CheckResult::new(
        "inner-step",
        max_rel_error(&step.flatten(), &numeric.flatten()),
        1e-4,
    ));

    let meta = |mode| MetaConfig {
        inner_lr: alpha,
        contrastive_scale: 0.2,
        mode,
        ..MetaConfig::default()
    };

    let un = meta_gradient(m, &params, &ep, &meta(MetaMode::Unsupervised))?;
    let numeric = finite_difference(&params, 1e-5, |p| {
        composed(m, p, &ep, LossKind::Contrastive, alpha)
    })?;
    checks.push(CheckResult::new(
        "meta:unsupervised",
        max_rel_error(&un.grad.flatten(), &numeric.flatten()),
        1e-3,
    ));

    let sup_cfg = meta(MetaMode::Supervised);
    let sup = meta_gradient(m, &params, &ep, &sup_cfg)?;
    let numeric = finite_difference(&params, 1e-5, |p| {
        Ok(composed(m, p, &ep, LossKind::Task, alpha)?
            + sup_cfg.contrastive_scale * composed(m, p, &ep, LossKind::Contrastive, alpha)?)
    })?;
    checks.push(CheckResult::new(
        "meta:supervised",
        max_rel_error(&sup.grad.flatten(), &numeric.flatten()),
        1e-3,
    ));

    // ½cθ² with c = 2, α = 0.1, θ = 1: exact (1 − αc)²cθ = 1.28, first-order
    // (1 − αc)cθ = 1.6.
    let mut q = ParamSet::new();
    q.insert("theta", Tensor::scalar(1.0))?;
    let quad = objective(|_, p| Ok(p.get("theta")?.square()));
    let exact = grad_through_step(&q, 0.1, GradOrder::Exact, quad, quad)?;
    let first = grad_through_step(&q, 0.1, GradOrder::FirstOrder, quad, quad)?;
    let (e, f) = (
        exact.grad.get("theta")?.item(),
        first.grad.get("theta")?.item(),
    );
    checks.push(CheckResult::new("closed-form:second-order", (e - 1.28).abs(), 1e-10));
    checks.push(CheckResult::new("closed-form:first-order", (f - 1.6).abs(), 1e-10));
    checks.push(CheckResult::new(
        "closed-form:orders-differ",
        if e != f { 0.0 } else { 1.0 },
        0.0,
    ));

    // α = 0 collapses the meta-gradient to the plain query gradient.
    let z = grad_through_step(
        &params,
        0.0,
        GradOrder::Exact,
        |g, p| batch_loss(m, g, p, LossKind::Contrastive, &ep.support),
        |g, p| batch_loss(m, g, p, LossKind::Contrastive, &ep.query),
    )?;
    let (_, plain) = grad_of(&params, |g, p| {
        batch_loss(m, g, p, LossKind::Contrastive, &ep.query)
    })?;
    checks.push(CheckResult::new(
        "meta:alpha-zero",
        z.grad.add_scaled(&plain, -1.0)?.max_abs(),
        1e-12,
    ));

    Ok(GradcheckReport { checks })
}

/// [`run_suite`] with the backward rule of `op` deliberately broken.
pub fn run_suite_corrupted(seed: u64, op: &str) -> Result<GradcheckReport> {
    crate::autodiff::with_corrupted_backward(op, || run_suite(seed))?
}
