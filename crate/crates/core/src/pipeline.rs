//! Three-stage transfer pipeline and the experiments built on it.
//!
//! A replicate runs: optional contrastive pretraining on English pairs,
//! stage 1 English task fine-tuning, then either straight to evaluation
//! (the baseline) or through stage 2 meta fine-tuning on one auxiliary
//! language first (ours). Both paths share the stage-1 checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    eval_few_shot, eval_retrieval, eval_zero_shot, accuracy, mean, paired_t_test, stderr, write_csv,
    write_jsonl, EvalReport, MetricRecord, PairedTest,
};
use crate::meta::{meta_train, LogRecord, MetaConfig, MetaMode, MetaOutcome};
use crate::model::{Activation, Model, ModelConfig};
use crate::params::ParamSet;
use crate::seed::derive_seed;
use crate::synthdata::{self, hex_digest, toml_line, BenchmarkConfig, Dataset, Role, Split};
use crate::trainer::{finetune_english, pretrain_contrastive, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Encoder widths; input widths and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub proj_dim: Option<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden_dim: m.hidden_dim,
            embed_dim: m.embed_dim,
            proj_dim: m.proj_dim,
            activation: m.activation,
        }
    }
}

/// Score used by the meta-training hook to pick the stage-2 checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HookMetric {
    /// Auxiliary dev accuracy when the mode reads labels, English dev
    /// accuracy otherwise.
    #[default]
    Auto,
    AuxDevAccuracy,
    EnglishDevAccuracy,
    /// Mean of IR and TR Recall@1 on auxiliary dev pools; label-free.
    AuxDevRecall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Auxiliary language for stage 2.
    pub aux: String,
    /// Auxiliary languages for the heatmap sweep; empty means every
    /// auxiliary language.
    pub sweep_aux: Vec<String>,
    /// Target languages; empty means every target language.
    pub targets: Vec<String>,
    pub shots: Vec<usize>,
    pub fewshot: TrainConfig,
    pub hook: HookMetric,
    /// Also report Recall@1 on English test pools.
    pub retrieval: bool,
    /// One-sided significance level for paired tests.
    pub significance: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            aux: "aux1".into(),
            sweep_aux: Vec::new(),
            targets: Vec::new(),
            shots: vec![0, 1, 5, 10, 20],
            fewshot: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            hook: HookMetric::Auto,
            retrieval: true,
            significance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_id: String,
    pub seed: u64,
    /// Independent replicates, each with its own derived seed.
    pub replicates: usize,
    /// Worker threads for independent replicates and sweep cells.
    pub jobs: usize,
    /// Directory of a generated dataset. When absent, the benchmark is
    /// generated in memory.
    pub dataset: Option<PathBuf>,
    /// Benchmark config file; overrides `benchmark` when set.
    pub benchmark_file: Option<PathBuf>,
    pub benchmark: BenchmarkConfig,
    pub model: ArchConfig,
    pub skip_pretrain: bool,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            replicates: 1,
            jobs: 1,
            dataset: None,
            benchmark_file: None,
            benchmark: BenchmarkConfig::default(),
            model: ArchConfig::default(),
            skip_pretrain: false,
            pretrain: TrainConfig {
                epochs: 10,
                lr: 3e-3,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
            stage1: TrainConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: toml_line(&text, e.span()),
            msg: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.benchmark_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash_hex(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("invalid run_id `{}`", self.run_id));
        }
        if self.replicates == 0 || self.jobs == 0 {
            return bad("replicates and jobs must be at least 1".into());
        }
        for p in [&self.dataset, &self.benchmark_file].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced path does not exist"),
                ));
            }
        }
        if !self.skip_pretrain {
            self.pretrain.validate()?;
        }
        self.stage1.validate()?;
        self.meta.validate()?;
        self.eval.fewshot.validate()?;
        if !(self.eval.significance > 0.0 && self.eval.significance < 1.0) {
            return bad("eval.significance must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// A validated config together with its dataset and model.
pub struct Experiment {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub model: Model,
}

/// Stage-1 output shared by the baseline and every stage-2 run.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub seed: u64,
    pub pretrained: ParamSet,
    pub params: ParamSet,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    /// `(IR, TR)` on English test pools after pretraining.
    pub retrieval: Option<(f64, f64)>,
}

impl Experiment {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dataset = match (&config.dataset, &config.benchmark_file) {
            (Some(dir), _) => synthdata::load(dir)?,
            (None, Some(file)) => synthdata::generate(&BenchmarkConfig::from_toml_file(file)?)?,
            (None, None) => synthdata::generate(&config.benchmark)?,
        };
        let b = dataset.config();
        let model = Model::new(ModelConfig {
            image_dim: b.image_dim,
            text_dim: b.text_dim,
            num_classes: b.num_classes,
            hidden_dim: config.model.hidden_dim,
            embed_dim: config.model.embed_dim,
            proj_dim: config.model.proj_dim,
            activation: config.model.activation,
        })?;
        let exp = Self {
            config,
            dataset,
            model,
        };
        exp.check_languages()?;
        Ok(exp)
    }

    fn check_languages(&self) -> Result<()> {
        let b = self.dataset.config();
        let role = |code: &str, want: Role| -> Result<()> {
            let l = b.language(code)?;
            if l.role != want {
                return Err(Error::Config(format!("language `{code}` is not {want:?}")));
            }
            Ok(())
        };
        role(&self.config.eval.aux, Role::Auxiliary)?;
        for a in &self.config.eval.sweep_aux {
            role(a, Role::Auxiliary)?;
        }
        for t in &self.config.eval.targets {
            role(t, Role::Target)?;
        }
        Ok(())
    }

    pub fn targets(&self) -> Vec<String> {
        if self.config.eval.targets.is_empty() {
            self.dataset.config().codes_with_role(Role::Target)
        } else {
            self.config.eval.targets.clone()
        }
    }

    pub fn sweep_aux(&self) -> Vec<String> {
        if self.config.eval.sweep_aux.is_empty() {
            self.dataset.config().codes_with_role(Role::Auxiliary)
        } else {
            self.config.eval.sweep_aux.clone()
        }
    }

    /// Root seed of replicate `r`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.config.seed, &["replicate", &r.to_string()])
    }

    pub fn stage1(&self, seed: u64) -> Result<Stage1> {
        let c = &self.config;
        let init = self.model.init(derive_seed(seed, &["init"]));
        let (pretrained, retrieval) = if c.skip_pretrain {
            (init, None)
        } else {
            let cfg = TrainConfig {
                seed: derive_seed(seed, &["pretrain"]),
                ..c.pretrain.clone()
            };
            let p = pretrain_contrastive(&self.model, &init, &self.dataset, &cfg)
                .map_err(|e| e.in_stage("pretrain"))?
                .params;
            let r = if c.eval.retrieval {
                Some(
                    eval_retrieval(&self.model, &p, &self.dataset, "en", derive_seed(seed, &["retrieval"]))
                        .map_err(|e| e.in_stage("pretrain"))?,
                )
            } else {
                None
            };
            (p, r)
        };
        let cfg = TrainConfig {
            seed: derive_seed(seed, &["stage1"]),
            ..c.stage1.clone()
        };
        let out = finetune_english(&self.model, &pretrained, &self.dataset, &cfg)
            .map_err(|e| e.in_stage("stage1"))?;
        Ok(Stage1 {
            seed,
            pretrained,
            params: out.params,
            best_epoch: out.best_epoch,
            dev_accuracy: out.dev_accuracy.unwrap_or(f64::NAN),
            retrieval,
        })
    }

    fn hook_score(&self, params: &ParamSet, aux: &str, seed: u64) -> Result<f64> {
        let hook = match self.config.eval.hook {
            HookMetric::Auto if self.config.meta.mode.uses_labels() => HookMetric::AuxDevAccuracy,
            HookMetric::Auto => HookMetric::EnglishDevAccuracy,
            h => h,
        };
        match hook {
            HookMetric::AuxDevAccuracy => {
                if !self.config.meta.mode.uses_labels() {
                    return Err(Error::Config(
                        "aux-dev-accuracy reads auxiliary labels; unsupervised mode forbids it".into(),
                    ));
                }
                accuracy(&self.model, params, self.dataset.split(aux, Split::Dev)?)
            }
            HookMetric::EnglishDevAccuracy => {
                accuracy(&self.model, params, self.dataset.split("en", Split::Dev)?)
            }
            HookMetric::AuxDevRecall => {
                let cfg = self.model.config();
                let pools = crate::eval::retrieval_pools(
                    self.dataset.split(aux, Split::Dev)?,
                    100,
                    cfg.image_dim,
                    cfg.text_dim,
                    seed,
                );
                let mut total = 0.0;
                for p in &pools {
                    let (ir, tr) = crate::eval::recall_at_1(&self.model, params, p)?;
                    total += 0.5 * (ir + tr);
                }
                Ok(total / pools.len().max(1) as f64)
            }
            HookMetric::Auto => unreachable!(),
        }
    }

    /// Stage-2 meta fine-tuning from the stage-1 checkpoint.
    pub fn stage2(&self, stage1: &Stage1, aux: &str) -> Result<MetaOutcome> {
        self.stage2_with_log(stage1, aux, None)
    }

    pub fn stage2_with_log(
        &self,
        stage1: &Stage1,
        aux: &str,
        log: Option<&mut dyn std::io::Write>,
    ) -> Result<MetaOutcome> {
        let meta = MetaConfig {
            seed: derive_seed(stage1.seed, &["meta", aux]),
            ..self.config.meta.clone()
        };
        let hook_seed = derive_seed(stage1.seed, &["hook", aux]);
        let mut hook = |p: &ParamSet| self.hook_score(p, aux, hook_seed);
        meta_train(&self.model, &stage1.params, &self.dataset, aux, &meta, &mut hook, log)
            .map_err(|e| e.in_stage("stage2"))
    }

    pub fn zero_shot(&self, params: &ParamSet, stage: &str, seed: u64) -> Result<EvalReport> {
        eval_zero_shot(&self.model, params, &self.dataset, &self.targets(), stage, seed)
            .map_err(|e| e.in_stage("stage3"))
    }

    /// Few-shot reports for every target and shot, grouped by target.
    pub fn few_shot(&self, params: &ParamSet, stage: &str, seed: u64) -> Result<Vec<EvalReport>> {
        let mut out = Vec::new();
        for t in self.targets() {
            let cfg = TrainConfig {
                seed: derive_seed(seed, &["fewshot-train", &t]),
                ..self.config.eval.fewshot.clone()
            };
            let subset_seed = derive_seed(seed, &["fewshot", &t]);
            let mut reports = eval_few_shot(
                &self.model,
                params,
                &self.dataset,
                &t,
                &self.config.eval.shots,
                &cfg,
                stage,
                subset_seed,
            )
            .map_err(|e| e.in_stage("stage3"))?;
            for r in &mut reports {
                r.seed = seed;
            }
            out.extend(reports);
        }
        Ok(out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// Everything one replicate of the pipeline produces.
#[derive(Clone, Debug)]
pub struct ReplicateResult {
    pub index: usize,
    pub stage1: Stage1,
    pub stage2: MetaOutcome,
    pub baseline: EvalReport,
    pub ours: EvalReport,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl ReplicateResult {
    pub fn deltas(&self) -> BTreeMap<String, f64> {
        self.ours
            .per_language
            .iter()
            .map(|(l, v)| (l.clone(), v - self.baseline.per_language[l]))
            .collect()
    }
}

pub fn run_replicate(exp: &Experiment, index: usize) -> Result<ReplicateResult> {
    let seed = exp.replicate_seed(index);
    let mut secs = BTreeMap::new();
    let t = Instant::now();
    let s1 = exp.stage1(seed)?;
    secs.insert("stage1".to_string(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let baseline = exp.zero_shot(&s1.params, "baseline", seed)?;
    let mut stage3 = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let s2 = exp.stage2(&s1, &exp.config.eval.aux)?;
    secs.insert("stage2".to_string(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let ours = exp.zero_shot(&s2.best.params, "ours", seed)?;
    stage3 += t.elapsed().as_secs_f64();
    secs.insert("stage3".to_string(), stage3);
    tracing::info!(
        replicate = index,
        baseline = baseline.mean,
        ours = ours.mean,
        best_iteration = s2.best.iteration,
        "replicate done"
    );
    Ok(ReplicateResult {
        index,
        stage1: s1,
        stage2: s2,
        baseline,
        ours,
        stage_seconds: secs,
    })
}

/// Runs every replicate, `jobs` at a time; results come back in replicate
/// order.
pub fn run_replicates(exp: &Experiment) -> Result<Vec<ReplicateResult>> {
    exp.pool()?.install(|| {
        (0..exp.config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(exp, r))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub replicate: usize,
    pub seed: u64,
    pub language: String,
    pub baseline: f64,
    pub ours: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSummary {
    pub language: String,
    pub baseline_mean: f64,
    pub ours_mean: f64,
    pub delta_mean: f64,
    pub delta_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub mode: MetaMode,
    pub aux: String,
    pub replicates: usize,
    pub languages: Vec<LanguageSummary>,
    /// Mean over replicates of the target-averaged accuracies.
    pub baseline_mean: f64,
    pub ours_mean: f64,
    pub delta_mean: f64,
    pub delta_stderr: f64,
    /// Over replicates of the target-averaged accuracy; absent with one
    /// replicate.
    pub test: Option<PairedTest>,
    pub significant: Option<bool>,
    pub stage1_dev_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_ir: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_tr: Option<f64>,
}

pub fn summarize(exp: &Experiment, results: &[ReplicateResult]) -> Result<PipelineSummary> {
    let langs = exp.targets();
    let languages = langs
        .iter()
        .map(|l| {
            let b: Vec<f64> = results.iter().map(|r| r.baseline.per_language[l]).collect();
            let o: Vec<f64> = results.iter().map(|r| r.ours.per_language[l]).collect();
            let d: Vec<f64> = o.iter().zip(&b).map(|(o, b)| o - b).collect();
            LanguageSummary {
                language: l.clone(),
                baseline_mean: mean(&b),
                ours_mean: mean(&o),
                delta_mean: mean(&d),
                delta_stderr: stderr(&d),
            }
        })
        .collect();
    let b: Vec<f64> = results.iter().map(|r| r.baseline.mean).collect();
    let o: Vec<f64> = results.iter().map(|r| r.ours.mean).collect();
    let d: Vec<f64> = o.iter().zip(&b).map(|(o, b)| o - b).collect();
    let test = if results.len() >= 2 {
        Some(paired_t_test(&o, &b)?)
    } else {
        None
    };
    let retr: Vec<(f64, f64)> = results.iter().filter_map(|r| r.stage1.retrieval).collect();
    let (ir, tr) = if retr.is_empty() {
        (None, None)
    } else {
        (
            Some(mean(&retr.iter().map(|r| r.0).collect::<Vec<_>>())),
            Some(mean(&retr.iter().map(|r| r.1).collect::<Vec<_>>())),
        )
    };
    Ok(PipelineSummary {
        mode: exp.config.meta.mode,
        aux: exp.config.eval.aux.clone(),
        replicates: results.len(),
        languages,
        baseline_mean: mean(&b),
        ours_mean: mean(&o),
        delta_mean: mean(&d),
        delta_stderr: stderr(&d),
        significant: test.as_ref().map(|t| t.significant(exp.config.eval.significance)),
        test,
        stage1_dev_accuracy: mean(&results.iter().map(|r| r.stage1.dev_accuracy).collect::<Vec<_>>()),
        retrieval_ir: ir,
        retrieval_tr: tr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub replicate: usize,
    pub stage: String,
    pub path: String,
    pub hash: String,
}

/// Record of one command invocation. Paths are relative to the run
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub root_seed: u64,
    pub replicate_seeds: Vec<u64>,
    pub checkpoints: Vec<StageCheckpoint>,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage, summed over replicates.
    pub wall_clock: BTreeMap<String, f64>,
}

/// Writes files under a run directory and remembers what it wrote.
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    /// Creates `<out>/<run_id>`. An existing non-empty run directory is a
    /// config error so that runs never overwrite each other.
    pub fn create(out: &Path, run_id: &str) -> Result<Self> {
        let root = out.join(run_id);
        if root.exists() && fs::read_dir(&root).map_err(|e| Error::io(&root, e))?.next().is_some() {
            return Err(Error::Config(format!(
                "run directory {} already exists; choose another run_id or --out",
                root.display()
            )));
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn artifacts(&self) -> &[String] {
        &self.written
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(rel.to_string());
        Ok(path)
    }

    pub fn write_csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf)?;
        self.write(rel, &buf)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        write_jsonl(rows, &mut buf)?;
        self.write(rel, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    pub fn write_params(&mut self, rel: &str, params: &ParamSet) -> Result<PathBuf> {
        self.write(rel, &params.to_bytes())
    }

    /// Writes `manifest.json`, which lists every other file.
    pub fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.artifacts = self.written.clone();
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

fn manifest(
    command: &str,
    exp: &Experiment,
    seeds: Vec<u64>,
    checkpoints: Vec<StageCheckpoint>,
    wall_clock: BTreeMap<String, f64>,
) -> RunManifest {
    RunManifest {
        command: command.into(),
        run_id: exp.config.run_id.clone(),
        tool_version: TOOL_VERSION.into(),
        config_hash: exp.config.hash_hex(),
        dataset_hash: exp.dataset.config().hash_hex(),
        root_seed: exp.config.seed,
        replicate_seeds: seeds,
        checkpoints,
        artifacts: Vec::new(),
        wall_clock,
    }
}

fn save_checkpoints(
    dir: &mut RunDir,
    r: &ReplicateResult,
    out: &mut Vec<StageCheckpoint>,
) -> Result<()> {
    for (stage, p) in [("stage1", &r.stage1.params), ("stage2", &r.stage2.best.params)] {
        let rel = format!("replicate-{}/{stage}.params", r.index);
        dir.write_params(&rel, p)?;
        out.push(StageCheckpoint {
            replicate: r.index,
            stage: stage.into(),
            path: rel,
            hash: p.hash_hex(),
        });
    }
    let rel = format!("replicate-{}/meta_log.jsonl", r.index);
    dir.write_jsonl::<LogRecord>(&rel, &r.stage2.history)?;
    Ok(())
}

/// Output of [`cmd_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub dir: PathBuf,
    pub summary: PipelineSummary,
    pub results: Vec<ReplicateResult>,
    pub manifest: RunManifest,
}

/// Stage 1, the baseline evaluation, stage 2 and the final evaluation for
/// every replicate, plus paired deltas. Artifacts go to `<out>/<run_id>`.
pub fn cmd_pipeline(exp: &Experiment, out: &Path) -> Result<PipelineRun> {
    let mut dir = RunDir::create(out, &exp.config.run_id)?;
    dir.write("config.toml", exp.config.to_toml().as_bytes())?;
    let results = run_replicates(exp)?;
    let summary = summarize(exp, &results)?;

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut deltas = Vec::new();
    let mut checkpoints = Vec::new();
    let mut wall = BTreeMap::new();
    for r in &results {
        if let Some((ir, tr)) = r.stage1.retrieval {
            for (metric, value) in [("recall@1-ir", ir), ("recall@1-tr", tr)] {
                records.push(MetricRecord {
                    stage: "pretrain".into(),
                    language: "en".into(),
                    shot: 0,
                    metric: metric.into(),
                    value,
                    seed: r.stage1.seed,
                });
            }
        }
        records.extend(r.baseline.records());
        records.extend(r.ours.records());
        for (lang, d) in r.deltas() {
            deltas.push(DeltaRow {
                replicate: r.index,
                seed: r.stage1.seed,
                language: lang.clone(),
                baseline: r.baseline.per_language[&lang],
                ours: r.ours.per_language[&lang],
                delta: d,
            });
        }
        save_checkpoints(&mut dir, r, &mut checkpoints)?;
        for (k, v) in &r.stage_seconds {
            *wall.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    let mut reports = Vec::new();
    for r in &results {
        reports.push(r.baseline.clone());
        reports.push(r.ours.clone());
    }
    dir.write_jsonl("reports.jsonl", &reports)?;
    dir.write_csv("results.csv", &records)?;
    dir.write_csv("deltas.csv", &deltas)?;
    dir.write_json("summary.json", &summary)?;
    let seeds = results.iter().map(|r| r.stage1.seed).collect();
    let path = dir.path().to_path_buf();
    let manifest = dir.finish(manifest("pipeline", exp, seeds, checkpoints, wall))?;
    Ok(PipelineRun {
        dir: path,
        summary,
        results,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub aux: String,
    pub target: String,
    pub baseline_mean: f64,
    pub ours_mean: f64,
    pub delta_mean: f64,
    pub delta_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct Heatmap {
    pub aux: Vec<String>,
    pub targets: Vec<String>,
    pub cells: Vec<HeatmapCell>,
    /// `(aux, replicate) → ours` reports; baselines are shared per replicate.
    pub ours: BTreeMap<(String, usize), EvalReport>,
    pub baselines: Vec<EvalReport>,
}

impl Heatmap {
    pub fn cell(&self, aux: &str, target: &str) -> Option<&HeatmapCell> {
        self.cells.iter().find(|c| c.aux == aux && c.target == target)
    }

    /// Rows are auxiliary languages, columns targets, values mean deltas.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("aux");
        for t in &self.targets {
            s.push(',');
            s.push_str(t);
        }
        s.push('\n');
        for a in &self.aux {
            s.push_str(a);
            for t in &self.targets {
                let c = self.cell(a, t).expect("full grid");
                s.push_str(&format!(",{}", c.delta_mean));
            }
            s.push('\n');
        }
        s
    }
}

/// Stage 2 from each auxiliary language, scored against the shared
/// stage-1 baseline on every target.
pub fn sweep_heatmap(exp: &Experiment) -> Result<Heatmap> {
    let aux = exp.sweep_aux();
    let targets = exp.targets();
    let pool = exp.pool()?;
    let stage1: Vec<(Stage1, EvalReport)> = pool.install(|| {
        (0..exp.config.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = exp.replicate_seed(r);
                let s1 = exp.stage1(seed)?;
                let base = exp.zero_shot(&s1.params, "baseline", seed)?;
                Ok((s1, base))
            })
            .collect::<Result<_>>()
    })?;
    let jobs: Vec<(String, usize)> = aux
        .iter()
        .flat_map(|a| (0..exp.config.replicates).map(move |r| (a.clone(), r)))
        .collect();
    let ours: Vec<EvalReport> = pool.install(|| {
        jobs.par_iter()
            .map(|(a, r)| {
                let (s1, _) = &stage1[*r];
                let out = exp.stage2(s1, a)?;
                let mut rep = exp.zero_shot(&out.best.params, &format!("ours:{a}"), s1.seed)?;
                rep.stage = format!("ours:{a}");
                Ok(rep)
            })
            .collect::<Result<_>>()
    })?;
    let ours: BTreeMap<(String, usize), EvalReport> = jobs.into_iter().zip(ours).collect();
    let mut cells = Vec::new();
    for a in &aux {
        for t in &targets {
            let b: Vec<f64> = stage1.iter().map(|(_, base)| base.per_language[t]).collect();
            let o: Vec<f64> = (0..exp.config.replicates)
                .map(|r| ours[&(a.clone(), r)].per_language[t])
                .collect();
            let d: Vec<f64> = o.iter().zip(&b).map(|(o, b)| o - b).collect();
            cells.push(HeatmapCell {
                aux: a.clone(),
                target: t.clone(),
                baseline_mean: mean(&b),
                ours_mean: mean(&o),
                delta_mean: mean(&d),
                delta_stderr: stderr(&d),
            });
        }
    }
    Ok(Heatmap {
        aux,
        targets,
        cells,
        ours,
        baselines: stage1.into_iter().map(|(_, b)| b).collect(),
    })
}

pub fn cmd_sweep_heatmap(exp: &Experiment, out: &Path) -> Result<(PathBuf, Heatmap)> {
    if exp.sweep_aux().is_empty() || exp.targets().is_empty() {
        return Err(Error::Config("sweep needs at least one auxiliary and one target language".into()));
    }
    let mut dir = RunDir::create(out, &exp.config.run_id)?;
    dir.write("config.toml", exp.config.to_toml().as_bytes())?;
    let t = Instant::now();
    let map = sweep_heatmap(exp)?;
    dir.write("heatmap.csv", map.matrix_csv().as_bytes())?;
    dir.write_csv("heatmap_cells.csv", &map.cells)?;
    let mut records: Vec<MetricRecord> = map.baselines.iter().flat_map(|b| b.records()).collect();
    records.extend(map.ours.values().flat_map(|r| r.records()));
    dir.write_csv("results.csv", &records)?;
    let seeds = (0..exp.config.replicates).map(|r| exp.replicate_seed(r)).collect();
    let wall = BTreeMap::from([("sweep".to_string(), t.elapsed().as_secs_f64())]);
    let path = dir.path().to_path_buf();
    dir.finish(manifest("sweep-heatmap", exp, seeds, Vec::new(), wall))?;
    Ok((path, map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// A target code, or `mean` for the across-target average.
    pub language: String,
    pub shot: usize,
    pub baseline_mean: f64,
    pub baseline_stderr: f64,
    pub ours_mean: f64,
    pub ours_stderr: f64,
    pub delta_mean: f64,
    #[serde(default)]
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FewShotCurve {
    pub points: Vec<CurvePoint>,
    pub reports: Vec<EvalReport>,
}

impl FewShotCurve {
    pub fn point(&self, language: &str, shot: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.language == language && p.shot == shot)
    }
}

/// Baseline and meta-fine-tuned curves over the configured shots.
pub fn fewshot_curve(exp: &Experiment) -> Result<FewShotCurve> {
    let per_rep: Vec<(Vec<EvalReport>, Vec<EvalReport>)> = exp.pool()?.install(|| {
        (0..exp.config.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = exp.replicate_seed(r);
                let s1 = exp.stage1(seed)?;
                let s2 = exp.stage2(&s1, &exp.config.eval.aux)?;
                Ok((
                    exp.few_shot(&s1.params, "baseline", seed)?,
                    exp.few_shot(&s2.best.params, "ours", seed)?,
                ))
            })
            .collect::<Result<_>>()
    })?;
    let value = |reps: &[EvalReport], lang: &str, shot: usize| -> f64 {
        reps.iter()
            .find(|r| r.shot == shot && r.per_language.contains_key(lang))
            .map(|r| r.per_language[lang])
            .expect("every shot evaluated")
    };
    let targets = exp.targets();
    let mut points = Vec::new();
    for &shot in &exp.config.eval.shots {
        let mut rows: Vec<(String, Vec<f64>, Vec<f64>)> = targets
            .iter()
            .map(|t| {
                let b = per_rep.iter().map(|(b, _)| value(b, t, shot)).collect();
                let o = per_rep.iter().map(|(_, o)| value(o, t, shot)).collect();
                (t.clone(), b, o)
            })
            .collect();
        let across = |pick: fn(&(String, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
            (0..per_rep.len())
                .map(|r| mean(&rows.iter().map(|row| pick(row)[r]).collect::<Vec<_>>()))
                .collect()
        };
        let mb = across(|r| &r.1);
        let mo = across(|r| &r.2);
        rows.push(("mean".into(), mb, mo));
        for (lang, b, o) in rows {
            let p_value = if b.len() >= 2 {
                Some(paired_t_test(&o, &b)?.p_value)
            } else {
                None
            };
            points.push(CurvePoint {
                language: lang,
                shot,
                baseline_mean: mean(&b),
                baseline_stderr: stderr(&b),
                ours_mean: mean(&o),
                ours_stderr: stderr(&o),
                delta_mean: mean(&o) - mean(&b),
                p_value,
            });
        }
    }
    let reports = per_rep.into_iter().flat_map(|(b, o)| b.into_iter().chain(o)).collect();
    Ok(FewShotCurve { points, reports })
}

pub fn cmd_fewshot_curve(exp: &Experiment, out: &Path) -> Result<(PathBuf, FewShotCurve)> {
    let mut dir = RunDir::create(out, &exp.config.run_id)?;
    dir.write("config.toml", exp.config.to_toml().as_bytes())?;
    let t = Instant::now();
    let curve = fewshot_curve(exp)?;
    dir.write_csv("curve.csv", &curve.points)?;
    let records: Vec<MetricRecord> = curve.reports.iter().flat_map(|r| r.records()).collect();
    dir.write_csv("results.csv", &records)?;
    let seeds = (0..exp.config.replicates).map(|r| exp.replicate_seed(r)).collect();
    let wall = BTreeMap::from([("fewshot-curve".to_string(), t.elapsed().as_secs_f64())]);
    let path = dir.path().to_path_buf();
    dir.finish(manifest("fewshot-curve", exp, seeds, Vec::new(), wall))?;
    Ok((path, curve))
}
