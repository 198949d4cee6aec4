//! Dual-encoder vision-language model over precomputed feature vectors.
//!
//! Both encoders are two-layer perceptrons. `proj.image` and `proj.text`
//! map encoder embeddings into the shared contrastive space
//! (`U = I·W₁ᵀ`, `V = T·W₂ᵀ`). The classification head reads the
//! concatenation `[I, T]`; its weight matrix is stored as the two row blocks
//! `head.image` and `head.text`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Var};
use crate::contrastive;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Contrastive projection width; defaults to `embed_dim`.
    pub proj_dim: Option<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_dim: 32,
            text_dim: 32,
            hidden_dim: 32,
            embed_dim: 16,
            proj_dim: None,
            num_classes: 3,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn proj_dim(&self) -> usize {
        self.proj_dim.unwrap_or(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim()),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("model {name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "model num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(&self, seed: u64) -> ParamSet {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Tensor::from_vec(rows, cols, data)
        };
        let entries = [
            ("image.w1", glorot(c.image_dim, c.hidden_dim)),
            ("image.b1", Tensor::zeros(1, c.hidden_dim)),
            ("image.w2", glorot(c.hidden_dim, c.embed_dim)),
            ("image.b2", Tensor::zeros(1, c.embed_dim)),
            ("text.w1", glorot(c.text_dim, c.hidden_dim)),
            ("text.b1", Tensor::zeros(1, c.hidden_dim)),
            ("text.w2", glorot(c.hidden_dim, c.embed_dim)),
            ("text.b2", Tensor::zeros(1, c.embed_dim)),
            ("proj.image", glorot(c.proj_dim(), c.embed_dim)),
            ("proj.text", glorot(c.proj_dim(), c.embed_dim)),
            ("head.image", glorot(c.embed_dim, c.num_classes)),
            ("head.text", glorot(c.embed_dim, c.num_classes)),
            ("head.bias", Tensor::zeros(1, c.num_classes)),
        ];
        let mut params = ParamSet::new();
        for (name, t) in entries {
            params.insert(name, t).expect("static names are unique");
        }
        params
    }

    fn encode<'g>(&self, p: &Bound<'g>, prefix: &str, width: usize, x: Var<'g>) -> Result<Var<'g>> {
        let [n, d] = x.shape();
        if d != width {
            return Err(Error::shape(format!("{prefix} encoder input width"), width, d));
        }
        let w1 = p.get(&format!("{prefix}.w1"))?;
        let b1 = p.get(&format!("{prefix}.b1"))?;
        let w2 = p.get(&format!("{prefix}.w2"))?;
        let b2 = p.get(&format!("{prefix}.b2"))?;
        let pre = x.matmul(w1) + b1.broadcast_rows(n);
        let hidden = match self.config.activation {
            Activation::Tanh => pre.tanh(),
            Activation::Relu => pre.relu(),
        };
        Ok(hidden.matmul(w2) + b2.broadcast_rows(n))
    }

    /// `N×image_dim` features to `N×embed_dim` embeddings `I`.
    pub fn encode_image<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.encode(p, "image", self.config.image_dim, x)
    }

    /// `N×text_dim` features to `N×embed_dim` embeddings `T`.
    pub fn encode_text<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.encode(p, "text", self.config.text_dim, x)
    }

    /// `(U, V) = (I·W₁ᵀ, T·W₂ᵀ)`.
    pub fn project<'g>(&self, p: &Bound<'g>, i: Var<'g>, t: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let e = self.config.embed_dim;
        for (side, v) in [("image", i), ("text", t)] {
            let [_, d] = v.shape();
            if d != e {
                return Err(Error::shape(format!("{side} projection input width"), e, d));
            }
        }
        let u = i.matmul(p.get("proj.image")?.t());
        let v = t.matmul(p.get("proj.text")?.t());
        Ok((u, v))
    }

    /// Class logits from embeddings: `[I, T]·H + b`.
    pub fn head<'g>(&self, p: &Bound<'g>, i: Var<'g>, t: Var<'g>) -> Result<Var<'g>> {
        let (ni, nt) = (i.shape()[0], t.shape()[0]);
        if ni != nt {
            return Err(Error::shape("paired batch size", ni, nt));
        }
        let logits = i.matmul(p.get("head.image")?) + t.matmul(p.get("head.text")?);
        Ok(logits + p.get("head.bias")?.broadcast_rows(ni))
    }

    /// `N×C` logits for paired image/text features; softmax gives `P(Y | image, text)`.
    pub fn classify<'g>(&self, p: &Bound<'g>, images: Var<'g>, texts: Var<'g>) -> Result<Var<'g>> {
        let (ni, nt) = (images.shape()[0], texts.shape()[0]);
        if ni != nt {
            return Err(Error::shape("paired batch size", ni, nt));
        }
        let i = self.encode_image(p, images)?;
        let t = self.encode_text(p, texts)?;
        self.head(p, i, t)
    }

    /// Mean cross-entropy of `classify` against `labels`.
    pub fn task_loss<'g>(
        &self,
        p: &Bound<'g>,
        images: Var<'g>,
        texts: Var<'g>,
        labels: &[usize],
    ) -> Result<Var<'g>> {
        let logits = self.classify(p, images, texts)?;
        cross_entropy(logits, labels)
    }

    /// Symmetric contrastive loss of the projected batch.
    pub fn contrastive_loss<'g>(&self, p: &Bound<'g>, images: Var<'g>, texts: Var<'g>) -> Result<Var<'g>> {
        let i = self.encode_image(p, images)?;
        let t = self.encode_text(p, texts)?;
        let (u, v) = self.project(p, i, t)?;
        contrastive::contrastive_loss(u, v)
    }

    /// Projected `(U, V)` without recording gradients.
    pub fn embed(&self, params: &ParamSet, images: &Tensor, texts: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let p = g.bind(params);
        let i = self.encode_image(&p, g.leaf(images.clone()))?;
        let t = self.encode_text(&p, g.leaf(texts.clone()))?;
        let (u, v) = self.project(&p, i, t)?;
        Ok((u.value(), v.value()))
    }

    /// Logits without recording gradients.
    pub fn predict(&self, params: &ParamSet, images: &Tensor, texts: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = g.bind(params);
        Ok(self.classify(&p, g.leaf(images.clone()), g.leaf(texts.clone()))?.value())
    }
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let [n, c] = logits.shape();
    if labels.len() != n {
        return Err(Error::shape("label count", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::shape("cross-entropy batch", "at least 1 row", 0));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    Ok(-logits.log_softmax_rows().pick(labels).mean())
}
