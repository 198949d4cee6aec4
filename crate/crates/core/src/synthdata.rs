//! Synthetic multilingual image-text benchmark.
//!
//! Each example starts from a latent concept `z ~ N(0, I)`:
//!
//! - image features: `P_img·z + σ_img·ε`
//! - text features in language `ℓ`: `P_txt·(Q_ℓ·z + s_ℓ) + σ_txt·ε`
//! - label: `argmax_c ⟨p_c, z⟩` over class prototypes, decided before noise
//!
//! Prototypes are the vertices of a regular simplex in a random frame, so
//! classes are equiprobable. Language transforms share one generator: a
//! set of rotation planes with fixed angles. A language at distance `d`
//! rotates each plane by `d·θ_k`, and its shift `s_ℓ = d·shift_scale·u`
//! points along a direction `u` the rotations leave fixed. The latent
//! displacement `‖(Q_ℓz + s_ℓ) − z‖` is therefore nondecreasing in `d` for
//! every `z` as long as `d·θ_k ≤ π`, which config validation enforces.
//!
//! On disk a benchmark is a directory with `manifest.json` and one JSON-lines
//! file per language and split (`<lang>/<split>.jsonl`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const ENGLISH: &str = "en";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "xvl-benchmark/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
    FewShot(usize),
}

impl Split {
    /// Splits written by [`generate`], in file order.
    pub const GENERATED: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Dev => f.write_str("dev"),
            Split::Test => f.write_str("test"),
            Split::FewShot(k) => write!(f, "fewshot-{k}"),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => s
                .strip_prefix("fewshot-")
                .and_then(|k| k.parse().ok())
                .map(Split::FewShot)
                .ok_or_else(|| format!("unknown split `{s}`")),
        }
    }
}

impl Serialize for Split {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    English,
    Auxiliary,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub code: String,
    pub distance: f64,
    pub role: Role,
}

impl LanguageConfig {
    fn new(code: &str, distance: f64, role: Role) -> Self {
        Self {
            code: code.to_string(),
            distance,
            role,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    pub languages: Vec<LanguageConfig>,
    pub train_per_language: usize,
    pub dev_per_language: usize,
    pub test_per_language: usize,
    pub fewshot_sizes: Vec<usize>,
    /// Text feature noise.
    pub noise_scale: f64,
    /// Image feature noise.
    pub image_noise_scale: f64,
    /// Largest plane rotation angle (radians) at distance 1.
    pub rotation_scale: f64,
    /// Shift magnitude at distance 1.
    pub shift_scale: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self::xvnli_like()
    }
}

impl BenchmarkConfig {
    /// Three-way classification task family.
    pub fn xvnli_like() -> Self {
        Self {
            name: "xvnli-like".into(),
            latent_dim: 16,
            image_dim: 32,
            text_dim: 32,
            num_classes: 3,
            languages: vec![
                LanguageConfig::new(ENGLISH, 0.0, Role::English),
                LanguageConfig::new("aux1", 0.35, Role::Auxiliary),
                LanguageConfig::new("aux2", 0.8, Role::Auxiliary),
                LanguageConfig::new("tgt1", 0.25, Role::Target),
                LanguageConfig::new("tgt2", 0.45, Role::Target),
                LanguageConfig::new("tgt3", 0.65, Role::Target),
                LanguageConfig::new("tgt4", 0.9, Role::Target),
            ],
            train_per_language: 2000,
            dev_per_language: 500,
            test_per_language: 500,
            fewshot_sizes: vec![1, 5, 10, 20, 48],
            noise_scale: 0.1,
            image_noise_scale: 0.6,
            rotation_scale: std::f64::consts::FRAC_PI_2,
            shift_scale: 0.3,
            seed: 0,
        }
    }

    /// Binary task family; same languages and sizes.
    pub fn marvl_like() -> Self {
        Self {
            name: "marvl-like".into(),
            num_classes: 2,
            seed: 1,
            ..Self::xvnli_like()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim < 2 || self.image_dim == 0 || self.text_dim == 0 {
            return bad("benchmark dims must be positive and latent_dim at least 2".into());
        }
        if self.num_classes < 2 || self.num_classes > self.latent_dim {
            return bad(format!(
                "num_classes must be in [2, latent_dim], got {}",
                self.num_classes
            ));
        }
        if self.fewshot_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("fewshot_sizes must be strictly increasing".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("image_noise_scale", self.image_noise_scale),
            ("rotation_scale", self.rotation_scale),
            ("shift_scale", self.shift_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.languages {
            if !seen.insert(l.code.as_str()) {
                return bad(format!("duplicate language `{}`", l.code));
            }
            if l.code.is_empty() || l.code.contains(['/', '\\', '.']) {
                return bad(format!("invalid language code `{}`", l.code));
            }
            if !(l.distance >= 0.0 && l.distance.is_finite()) {
                return bad(format!("language `{}` has invalid distance", l.code));
            }
            if l.distance * self.rotation_scale > std::f64::consts::PI {
                return bad(format!(
                    "language `{}`: distance {} × rotation_scale {} exceeds π",
                    l.code, l.distance, self.rotation_scale
                ));
            }
            let english = l.code == ENGLISH;
            if english != (l.role == Role::English) {
                return bad(format!("only `{ENGLISH}` may (and must) have role english"));
            }
            if english && l.distance != 0.0 {
                return bad(format!("`{ENGLISH}` must have distance 0"));
            }
        }
        if !seen.contains(ENGLISH) {
            return bad(format!("languages must include `{ENGLISH}`"));
        }
        Ok(())
    }

    pub fn codes_with_role(&self, role: Role) -> Vec<String> {
        self.languages
            .iter()
            .filter(|l| l.role == role)
            .map(|l| l.code.clone())
            .collect()
    }

    pub fn language(&self, code: &str) -> Result<&LanguageConfig> {
        self.languages
            .iter()
            .find(|l| l.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_language,
            Split::Dev => self.dev_per_language,
            Split::Test => self.test_per_language,
            Split::FewShot(k) => k,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: toml_line(&text, e.span()),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn toml_line(text: &str, span: Option<std::ops::Range<usize>>) -> usize {
    span.map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A language's latent transform.
#[derive(Clone, Debug)]
pub struct LanguageSpec {
    pub code: String,
    pub role: Role,
    pub distance: f64,
    /// Orthogonal `latent×latent` matrix `Q_ℓ`.
    pub transform: Tensor,
    pub shift: Vec<f64>,
}

impl LanguageSpec {
    /// `Q_ℓ·z + s_ℓ`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.shift.clone();
        for (r, o) in out.iter_mut().enumerate() {
            *o += self
                .transform
                .row(r)
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub pair_id: u64,
    pub lang: String,
    pub split: Split,
    pub img: Vec<f64>,
    pub txt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// Fixed random structure of a benchmark: projections, prototypes and
/// language transforms. A pure function of the config.
#[derive(Clone, Debug)]
pub struct Generator {
    config: BenchmarkConfig,
    image_proj: Tensor,
    text_proj: Tensor,
    prototypes: Tensor,
    languages: Vec<LanguageSpec>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Columns of a random orthonormal `n×n` basis, via Gram-Schmidt.
fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian(rng, n);
        // Two passes keep the basis orthogonal to rounding precision.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

impl Generator {
    pub fn new(config: BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let n = config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["structure"]));
        let scale = 1.0 / (n as f64).sqrt();
        let image_proj = Tensor::from_vec(
            config.image_dim,
            n,
            gaussian(&mut rng, config.image_dim * n).into_iter().map(|v| v * scale).collect(),
        );
        let text_proj = Tensor::from_vec(
            config.text_dim,
            n,
            gaussian(&mut rng, config.text_dim * n).into_iter().map(|v| v * scale).collect(),
        );

        // Regular simplex: p_c = Σ_j (δ_cj − 1/C) b_j, normalised.
        let c = config.num_classes;
        let frame = random_orthonormal(&mut rng, n);
        let mut prototypes = Tensor::zeros(c, n);
        for class in 0..c {
            let mut p = vec![0.0; n];
            for (j, b) in frame.iter().take(c).enumerate() {
                let w = if j == class { 1.0 } else { 0.0 } - 1.0 / c as f64;
                for (x, y) in p.iter_mut().zip(b) {
                    *x += w * y;
                }
            }
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (k, x) in p.into_iter().enumerate() {
                prototypes.set(class, k, x / norm);
            }
        }

        // Shared rotation planes; the last basis vector stays fixed and
        // carries the shift.
        let basis = random_orthonormal(&mut rng, n);
        let planes = (n - 1) / 2;
        let angles: Vec<f64> = (0..planes)
            .map(|_| config.rotation_scale * rand::Rng::random_range(&mut rng, 0.5..=1.0))
            .collect();
        let fixed = &basis[n - 1];

        let languages = config
            .languages
            .iter()
            .map(|l| {
                let mut q = Tensor::identity(n);
                for (k, &theta) in angles.iter().enumerate() {
                    let (a, b) = (&basis[2 * k], &basis[2 * k + 1]);
                    let (sin, cos) = (l.distance * theta).sin_cos();
                    for r in 0..n {
                        for col in 0..n {
                            let delta = (cos - 1.0) * (a[r] * a[col] + b[r] * b[col])
                                + sin * (b[r] * a[col] - a[r] * b[col]);
                            q.set(r, col, q.get(r, col) + delta);
                        }
                    }
                }
                LanguageSpec {
                    code: l.code.clone(),
                    role: l.role,
                    distance: l.distance,
                    transform: q,
                    shift: fixed
                        .iter()
                        .map(|u| u * l.distance * config.shift_scale)
                        .collect(),
                }
            })
            .collect();

        Ok(Self {
            config,
            image_proj,
            text_proj,
            prototypes,
            languages,
        })
    }

    pub fn config(&self) -> &BenchmarkConfig {
        &self.config
    }

    pub fn languages(&self) -> &[LanguageSpec] {
        &self.languages
    }

    pub fn language(&self, code: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// Class of a latent concept.
    pub fn label(&self, z: &[f64]) -> usize {
        let scores = Tensor::from_vec(1, z.len(), z.to_vec()).matmul(&self.prototypes.transpose());
        scores.argmax_rows()[0]
    }

    /// Features and label for one latent concept. `noise` draws are taken
    /// from `rng` in a fixed order: image first, then text.
    pub fn render(
        &self,
        lang: &LanguageSpec,
        z: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> (Vec<f64>, Vec<f64>, usize) {
        let project = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let mut img = project(&self.image_proj, z);
        for v in img.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += self.config.image_noise_scale * e;
        }
        let mut txt = project(&self.text_proj, &lang.apply(z));
        for v in txt.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += self.config.noise_scale * e;
        }
        (img, txt, self.label(z))
    }

    /// Examples for one language and split. Pair ids are unique within a
    /// language across train, dev and test.
    pub fn split_examples(&self, code: &str, split: Split) -> Result<Vec<Example>> {
        let lang = self.language(code)?;
        let c = &self.config;
        let offset = match split {
            Split::Train => 0,
            Split::Dev => c.train_per_language,
            Split::Test => c.train_per_language + c.dev_per_language,
            Split::FewShot(_) => {
                return Err(Error::Config(
                    "few-shot splits are drawn with fewshot_subset, not generated".into(),
                ))
            }
        } as u64;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(c.seed, &["examples", code, &split.to_string()]));
        Ok((0..c.split_size(split))
            .map(|i| {
                let z = gaussian(&mut rng, c.latent_dim);
                let (img, txt, label) = self.render(lang, &z, &mut rng);
                Example {
                    pair_id: offset + i as u64,
                    lang: code.to_string(),
                    split,
                    img,
                    txt,
                    label: Some(label),
                }
            })
            .collect())
    }
}

/// In-memory benchmark indexed by language and split.
#[derive(Clone, Debug)]
pub struct Dataset {
    config: BenchmarkConfig,
    splits: BTreeMap<(String, Split), Vec<Example>>,
}

impl Dataset {
    pub fn config(&self) -> &BenchmarkConfig {
        &self.config
    }

    /// Examples of a split; a known language with no such split yields an
    /// empty slice.
    pub fn split(&self, lang: &str, split: Split) -> Result<&[Example]> {
        self.config.language(lang)?;
        Ok(self
            .splits
            .get(&(lang.to_string(), split))
            .map(Vec::as_slice)
            .unwrap_or(&[]))
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageConfig> {
        self.config.languages.iter()
    }

    pub fn splits(&self) -> impl Iterator<Item = (&str, Split, &[Example])> {
        self.splits
            .iter()
            .map(|((l, s), v)| (l.as_str(), *s, v.as_slice()))
    }

    /// Builds a dataset from explicit examples (used by tests and tools).
    pub fn from_examples(config: BenchmarkConfig, examples: Vec<Example>) -> Result<Self> {
        let mut splits: BTreeMap<(String, Split), Vec<Example>> = BTreeMap::new();
        for e in examples {
            config.language(&e.lang)?;
            splits.entry((e.lang.clone(), e.split)).or_default().push(e);
        }
        Ok(Self { config, splits })
    }
}

/// Generates every language's train, dev and test split in memory.
pub fn generate(config: &BenchmarkConfig) -> Result<Dataset> {
    let gen = Generator::new(config.clone())?;
    let mut splits = BTreeMap::new();
    for l in &config.languages {
        for split in Split::GENERATED {
            splits.insert((l.code.clone(), split), gen.split_examples(&l.code, split)?);
        }
    }
    Ok(Dataset {
        config: config.clone(),
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub format: String,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    pub languages: Vec<LanguageConfig>,
    /// `counts[lang][split]`.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub files: Vec<String>,
    pub config: BenchmarkConfig,
}

fn split_file(lang: &str, split: Split) -> String {
    format!("{lang}/{split}.jsonl")
}

/// Writes `dataset` under `dir` and returns the manifest. Output bytes are a
/// pure function of the dataset.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<BenchmarkManifest> {
    let cfg = dataset.config();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut files = Vec::new();
    for l in &cfg.languages {
        fs::create_dir_all(dir.join(&l.code)).map_err(|e| Error::io(dir.join(&l.code), e))?;
        for split in Split::GENERATED {
            let rel = split_file(&l.code, split);
            let path = dir.join(&rel);
            let examples = dataset.split(&l.code, split)?;
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for e in examples {
                serde_json::to_writer(&mut w, e).expect("examples serialize");
                w.write_all(b"\n").map_err(|err| Error::io(&path, err))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            counts
                .entry(l.code.clone())
                .or_default()
                .insert(split.to_string(), examples.len());
            files.push(rel);
        }
    }
    let manifest = BenchmarkManifest {
        format: MANIFEST_FORMAT.into(),
        name: cfg.name.clone(),
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        latent_dim: cfg.latent_dim,
        image_dim: cfg.image_dim,
        text_dim: cfg.text_dim,
        num_classes: cfg.num_classes,
        languages: cfg.languages.clone(),
        counts,
        files,
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads one JSON-lines split file, checking every record against the
/// expected dims and class count.
pub fn load_split_file(
    path: &Path,
    image_dim: usize,
    text_dim: usize,
    num_classes: usize,
) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let e: Example = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if e.img.len() != image_dim || e.txt.len() != text_dim {
            return Err(parse_err(format!(
                "feature dims {}/{} do not match header {image_dim}/{text_dim}",
                e.img.len(),
                e.txt.len()
            )));
        }
        if let Some(label) = e.label.filter(|&l| l >= num_classes) {
            return Err(parse_err(format!("label {label} out of range for {num_classes} classes")));
        }
        out.push(e);
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<BenchmarkManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BenchmarkManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Parse {
            path,
            line: 0,
            msg: format!("unsupported manifest format `{}`", manifest.format),
        });
    }
    Ok(manifest)
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut splits = BTreeMap::new();
    for rel in &manifest.files {
        let path: PathBuf = dir.join(rel);
        let examples = load_split_file(
            &path,
            manifest.image_dim,
            manifest.text_dim,
            manifest.num_classes,
        )?;
        let (lang, split) = rel
            .strip_suffix(".jsonl")
            .and_then(|s| s.split_once('/'))
            .and_then(|(l, s)| Some((l.to_string(), s.parse::<Split>().ok()?)))
            .ok_or_else(|| Error::Parse {
                path: dir.join(MANIFEST_FILE),
                line: 0,
                msg: format!("unrecognised split file `{rel}`"),
            })?;
        if let Some(bad) = examples.iter().position(|e| e.lang != lang || e.split != split) {
            return Err(Error::Parse {
                path,
                line: bad + 1,
                msg: format!("record does not belong to {lang}/{split}"),
            });
        }
        splits.insert((lang, split), examples);
    }
    Ok(Dataset {
        config: manifest.config,
        splits,
    })
}

/// Deterministic class-stratified sample of `k` labelled training examples.
///
/// Each class's examples are shuffled under `seed` and then interleaved
/// round-robin in a seeded class order. The result is the first `k` items of
/// that single ordering, so `subset(k₁) ⊂ subset(k₂)` whenever `k₁ < k₂`.
pub fn fewshot_subset(dataset: &Dataset, lang: &str, k: usize, seed: u64) -> Result<Vec<Example>> {
    let train = dataset.split(lang, Split::Train)?;
    let labelled: Vec<&Example> = train.iter().filter(|e| e.label.is_some()).collect();
    if k > labelled.len() {
        return Err(Error::InsufficientData {
            language: lang.to_string(),
            needed: k,
            available: labelled.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["fewshot", lang]));
    let mut by_class: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for e in labelled {
        by_class.entry(e.label.unwrap()).or_default().push(e);
    }
    let mut queues: Vec<Vec<&Example>> = by_class.into_values().collect();
    queues.shuffle(&mut rng);
    for q in queues.iter_mut() {
        q.shuffle(&mut rng);
        q.reverse();
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        for q in queues.iter_mut() {
            if out.len() == k {
                break;
            }
            if let Some(e) = q.pop() {
                out.push(e.clone());
            }
        }
    }
    Ok(out)
}

/// `N` paired image/text feature rows with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub images: Tensor,
    pub texts: Tensor,
    labels: Option<Vec<usize>>,
    pub language: String,
}

impl PairedBatch {
    /// Stacks examples into a batch. Labels are kept only if every example has one.
    pub fn from_examples<'a, I>(language: &str, image_dim: usize, text_dim: usize, examples: I) -> Self
    where
        I: IntoIterator<Item = &'a Example>,
        I::IntoIter: Clone,
    {
        let it = examples.into_iter();
        let images = Tensor::from_rows(image_dim, it.clone().map(|e| e.img.as_slice()));
        let texts = Tensor::from_rows(text_dim, it.clone().map(|e| e.txt.as_slice()));
        let labels: Option<Vec<usize>> = it.map(|e| e.label).collect();
        Self {
            images,
            texts,
            labels,
            language: language.to_string(),
        }
    }

    pub fn new(images: Tensor, texts: Tensor, labels: Option<Vec<usize>>, language: &str) -> Result<Self> {
        if images.rows() != texts.rows() {
            return Err(Error::shape("paired batch size", images.rows(), texts.rows()));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::shape("label count", images.rows(), l.len()));
            }
        }
        Ok(Self {
            images,
            texts,
            labels,
            language: language.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Task labels; label-free batches report [`Error::MissingLabels`].
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }
}
