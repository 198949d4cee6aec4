use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use proptest::prelude::*;
use xvl_core::synthdata::{
    fewshot_subset, generate, load, write_dataset, BenchmarkConfig, Generator, Split, ENGLISH,
};
use xvl_core::Error;

fn small() -> BenchmarkConfig {
    BenchmarkConfig {
        train_per_language: 60,
        dev_per_language: 20,
        test_per_language: 30,
        ..BenchmarkConfig::default()
    }
}

#[test]
fn transforms_preserve_norms() {
    let gen = Generator::new(BenchmarkConfig::default()).unwrap();
    let n = gen.config().latent_dim;
    let mut runner = proptest::test_runner::TestRunner::default();
    runner
        .run(&prop::collection::vec(-10.0f64..10.0, n), |x| {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for l in gen.languages() {
                let q = &l.transform;
                let qx: Vec<f64> = (0..n)
                    .map(|r| q.row(r).iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect();
                let qn = qx.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((qn - norm).abs() <= 1e-9 * norm.max(1.0), "{}: {qn} vs {norm}", l.code);
            }
            Ok(())
        })
        .unwrap();
}

#[test]
fn displacement_grows_with_distance() {
    for cfg in [BenchmarkConfig::xvnli_like(), BenchmarkConfig::marvl_like()] {
        let gen = Generator::new(cfg).unwrap();
        let n = gen.config().latent_dim;
        let mut langs: Vec<_> = gen.languages().iter().collect();
        langs.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        for k in 0..20u64 {
            let z: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * (k as f64 + 0.5)).sin()).collect();
            let disp: Vec<f64> = langs
                .iter()
                .map(|l| {
                    l.apply(&z)
                        .iter()
                        .zip(&z)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            assert_eq!(disp[0], 0.0);
            for w in disp.windows(2) {
                assert!(w[0] <= w[1] + 1e-12, "{disp:?}");
            }
        }
    }
}

#[test]
fn test_pair_ids_never_leak() {
    let data = generate(&small()).unwrap();
    for l in data.config().languages.clone() {
        let test: BTreeSet<u64> = data.split(&l.code, Split::Test).unwrap().iter().map(|e| e.pair_id).collect();
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for e in data.split(&l.code, split).unwrap() {
                assert!(seen.insert(e.pair_id), "duplicate pair id in {}", l.code);
                if split != Split::Test {
                    assert!(!test.contains(&e.pair_id));
                }
            }
        }
        for k in [1, 5, 10, 20, 48] {
            for e in fewshot_subset(&data, &l.code, k, 3).unwrap() {
                assert!(!test.contains(&e.pair_id));
            }
        }
    }
}

#[test]
fn classes_are_balanced() {
    for cfg in [BenchmarkConfig::xvnli_like(), BenchmarkConfig::marvl_like()] {
        let data = generate(&cfg).unwrap();
        let c = cfg.num_classes;
        let mut counts = vec![0usize; c];
        let mut total = 0;
        for (_, _, examples) in data.splits() {
            for e in examples {
                counts[e.label.unwrap()] += 1;
                total += 1;
            }
        }
        assert!(total >= 5000);
        for n in counts {
            let freq = n as f64 / total as f64;
            assert!((freq * c as f64 - 1.0).abs() <= 0.1, "class frequency {freq}");
        }
    }
}

#[test]
fn labels_and_dims_match_config() {
    let cfg = small();
    let data = generate(&cfg).unwrap();
    for (_, _, examples) in data.splits() {
        for e in examples {
            assert_eq!(e.img.len(), cfg.image_dim);
            assert_eq!(e.txt.len(), cfg.text_dim);
            assert!(e.label.unwrap() < cfg.num_classes);
        }
    }
}

#[test]
fn write_load_round_trip() {
    let data = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    assert_eq!(manifest.languages.len(), 7);
    let back = load(dir.path()).unwrap();
    assert_eq!(back.config(), data.config());
    let a: Vec<_> = data.splits().collect();
    let b: Vec<_> = back.splits().collect();
    assert_eq!(a, b);
}

#[test]
fn same_seed_writes_identical_bytes() {
    let read_all = |dir: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for entry in walk(dir) {
            let rel = entry.strip_prefix(dir).unwrap().display().to_string();
            out.insert(rel, fs::read(&entry).unwrap());
        }
        out
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&generate(&small()).unwrap(), a.path()).unwrap();
    write_dataset(&generate(&small()).unwrap(), b.path()).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    assert!(fa.len() > 7);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    write_dataset(&generate(&BenchmarkConfig { seed: 9, ..small() }).unwrap(), c.path()).unwrap();
    assert_ne!(fa, read_all(c.path()));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn truncated_record_names_its_line() {
    let data = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let path = dir.path().join("aux1").join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[6][..lines[6].len() / 2];
    lines[6] = cut;
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load(dir.path()) {
        Err(Error::Parse { path: p, line, .. }) => {
            assert_eq!(line, 7);
            assert!(p.ends_with("aux1/train.jsonl"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn empty_split_file_loads_as_empty() {
    let data = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    fs::write(dir.path().join("tgt2").join("dev.jsonl"), "").unwrap();
    let back = load(dir.path()).unwrap();
    assert!(back.split("tgt2", Split::Dev).unwrap().is_empty());
    assert_eq!(back.split("tgt2", Split::Test).unwrap().len(), 30);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let data = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let path = dir.path().join(ENGLISH).join("dev.jsonl");
    let mut e = data.split(ENGLISH, Split::Dev).unwrap()[0].clone();
    e.img.pop();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("{}{}\n", text, serde_json::to_string(&e).unwrap())).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Parse { line: 21, .. })));
}

#[test]
fn fewshot_k_equal_to_classes_is_one_per_class() {
    let data = generate(&small()).unwrap();
    let c = data.config().num_classes;
    for seed in 0..10 {
        let labels: BTreeSet<usize> = fewshot_subset(&data, "tgt1", c, seed)
            .unwrap()
            .iter()
            .map(|e| e.label.unwrap())
            .collect();
        assert_eq!(labels.len(), c);
    }
}

proptest! {
    #[test]
    fn fewshot_subsets_are_nested(seed in any::<u64>(), k1 in 0usize..60, k2 in 0usize..60) {
        let data = generate(&small()).unwrap();
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let a = fewshot_subset(&data, "tgt3", lo, seed).unwrap();
        let b = fewshot_subset(&data, "tgt3", hi, seed).unwrap();
        prop_assert_eq!(a.len(), lo);
        prop_assert_eq!(&b[..lo], &a[..]);
        prop_assert_eq!(fewshot_subset(&data, "tgt3", hi, seed).unwrap(), b);
    }
}

#[test]
fn fewshot_beyond_train_size_fails() {
    let data = generate(&small()).unwrap();
    assert!(matches!(
        fewshot_subset(&data, "tgt1", 61, 0),
        Err(Error::InsufficientData { needed: 61, available: 60, .. })
    ));
}
