//! In-process CLI pipeline checks: the full synth -> patchify -> train ->
//! eval -> export flow on a desk-scale dataset, store invariants, and
//! rerun reproducibility of the eval report.

use std::collections::HashSet;
use std::path::Path;

use mvfuse::cli::run_cli;
use mvfuse::data_model::Split;
use mvfuse::patch_pipeline::load_patch_store;

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("mvfuse").chain(args.iter().copied()))
}

fn p(dir: &Path, tail: &str) -> String {
    dir.join(tail).to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_smoke_and_reproducible_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_eq!(
        run(&[
            "synth", "--classes", "2", "--specimens", "4", "--mode", "texture",
            "--image-size", "80", "--seed", "11", "--out", &p(root, "data"),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "patchify", "--manifest", &p(root, "data/manifest.jsonl"),
            "--out", &p(root, "patches"), "--patch-size", "64",
            "--patches-per-image", "4", "--target", "12", "--variants", "2",
            "--seed", "12", "--jobs", "3",
        ]),
        0
    );

    // Store invariants: split soundness and augmentation provenance.
    let store = load_patch_store(root.join("patches")).unwrap();
    let train_ids: HashSet<&str> = store
        .split(Split::Train)
        .map(|q| q.patch_id.as_str())
        .collect();
    let test_ids: HashSet<&str> = store
        .split(Split::Test)
        .map(|q| q.patch_id.as_str())
        .collect();
    assert!(!train_ids.is_empty() && !test_ids.is_empty());
    assert!(train_ids.is_disjoint(&test_ids));
    let mut saw_augmented = false;
    for (patch, split) in &store.patches {
        if let Some(parent) = &patch.augmented_from {
            saw_augmented = true;
            // Augmentation runs after splitting, on the training side only.
            assert_eq!(*split, Split::Train);
            assert!(train_ids.contains(parent.as_str()), "parent {parent} not in train");
        }
    }
    assert!(saw_augmented, "variants requested but none stored");

    assert_eq!(
        run(&[
            "train-sv", "--patches", &p(root, "patches"), "--backbone", "mini",
            "--epochs", "1", "--seed", "13", "--out", &p(root, "sv"),
            "--val-fraction", "0.2",
        ]),
        0
    );
    assert!(root.join("sv/checkpoint.ckpt").is_file());
    let history = std::fs::read_to_string(root.join("sv/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,seconds"));
    assert_eq!(history.lines().count(), 2);

    assert_eq!(
        run(&[
            "train-mv", "--patches", &p(root, "patches"),
            "--sv-checkpoint", &p(root, "sv/checkpoint.ckpt"),
            "--fusion", "concat", "--pairing", "class_random",
            "--epochs", "1", "--seed", "14", "--out", &p(root, "mv"),
            "--val-fraction", "0",
        ]),
        0
    );

    // Same eval inputs and seed twice: byte-identical reports.
    for tag in ["a", "b"] {
        assert_eq!(
            run(&[
                "eval", "--checkpoint", &p(root, "sv/checkpoint.ckpt"),
                "--checkpoint", &p(root, "mv/checkpoint.ckpt"),
                "--patches", &p(root, "patches"),
                "--report-out", &p(root, &format!("report_{tag}.json")),
                "--seed", "15",
            ]),
            0
        );
    }
    let report_a = std::fs::read(root.join("report_a.json")).unwrap();
    let report_b = std::fs::read(root.join("report_b.json")).unwrap();
    assert_eq!(report_a, report_b);

    // Per-view supports partition the mixed support for single-view rows.
    let report: mvfuse::evaluation::SuiteReport = serde_json::from_slice(&report_a).unwrap();
    let total_of = |ctx: mvfuse::evaluation::EvalContext| {
        report
            .rows
            .iter()
            .find(|r| r.model_id.starts_with("SV") && r.context == ctx)
            .map(|r| r.metrics.total)
            .unwrap()
    };
    assert_eq!(
        total_of(mvfuse::evaluation::EvalContext::SurfaceOnly)
            + total_of(mvfuse::evaluation::EvalContext::SectionOnly),
        total_of(mvfuse::evaluation::EvalContext::Mixed)
    );

    // Feature export: headerless CSV rows plus a metadata sidecar.
    assert_eq!(
        run(&[
            "export-features", "--checkpoint", &p(root, "mv/checkpoint.ckpt"),
            "--patches", &p(root, "patches"), "--out", &p(root, "features.csv"),
            "--seed", "16",
        ]),
        0
    );
    let csv = std::fs::read_to_string(root.join("features.csv")).unwrap();
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("features.meta.json")).unwrap())
            .unwrap();
    assert_eq!(csv.lines().count() as u64, meta["rows"].as_u64().unwrap());
    let first = csv.lines().next().unwrap();
    // 3 metadata columns + fused feature width.
    assert_eq!(
        first.split(',').count() as u64,
        3 + meta["feature_columns"].as_u64().unwrap()
    );
}

#[test]
fn patchify_output_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(
        run(&[
            "synth", "--classes", "2", "--specimens", "3", "--image-size", "72",
            "--seed", "31", "--out", &p(root, "data"),
        ]),
        0
    );
    for (jobs, out) in [("1", "p1"), ("4", "p4")] {
        assert_eq!(
            run(&[
                "patchify", "--manifest", &p(root, "data/manifest.jsonl"),
                "--out", &p(root, out), "--patch-size", "64",
                "--patches-per-image", "3", "--target", "8", "--variants", "1",
                "--seed", "32", "--jobs", jobs,
            ]),
            0
        );
    }
    let read = |tail: &str| std::fs::read(root.join(tail)).unwrap();
    assert_eq!(read("p1/patches.jsonl"), read("p4/patches.jsonl"));
    assert_eq!(read("p1/run_meta.json"), read("p4/run_meta.json"));
    for entry in std::fs::read_dir(root.join("p1")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            read(&format!("p1/{}", name.to_str().unwrap())),
            read(&format!("p4/{}", name.to_str().unwrap())),
            "{name:?} differs between jobs=1 and jobs=4"
        );
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(
        run(&[
            "synth", "--classes", "2", "--specimens", "4", "--image-size", "80",
            "--seed", "41", "--out", &p(root, "data"),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "patchify", "--manifest", &p(root, "data/manifest.jsonl"),
            "--out", &p(root, "patches"), "--patch-size", "64",
            "--patches-per-image", "3", "--target", "10", "--variants", "0",
            "--seed", "42",
        ]),
        0
    );
    // Epoch counts, fusion and pairing come from the config file here.
    let config = serde_json::json!({
        "master_seed": 7,
        "val_fraction": 0.0,
        "backbone": "mini",
        "train_sv": { "epochs": 1, "batch_size": 16 },
        "train_mv": { "epochs": 2, "batch_size": 16 },
        "fusion": "concat",
        "pairing": "class_random",
    });
    std::fs::write(root.join("run.json"), serde_json::to_vec(&config).unwrap()).unwrap();

    // No --epochs anywhere: the config file supplies them.
    assert_eq!(
        run(&[
            "train-sv", "--patches", &p(root, "patches"),
            "--config", &p(root, "run.json"), "--seed", "43", "--out", &p(root, "sv"),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "train-mv", "--patches", &p(root, "patches"),
            "--sv-checkpoint", &p(root, "sv/checkpoint.ckpt"),
            "--config", &p(root, "run.json"), "--seed", "44", "--out", &p(root, "mv"),
        ]),
        0
    );
    // The config file's concat fusion must have taken effect.
    let header = mvfuse::nets::checkpoint::read_header(root.join("mv/checkpoint.ckpt")).unwrap();
    match header.model {
        mvfuse::nets::checkpoint::ModelMeta::MultiView { fusion, .. } => {
            assert_eq!(fusion, mvfuse::nets::FusionStrategy::Concat);
        }
        other => panic!("expected multi-view metadata, got {other:?}"),
    }
    // Two epochs were requested by the config file.
    let history = std::fs::read_to_string(root.join("mv/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // A flag overrides the config file: maxpool despite "concat" in the file.
    assert_eq!(
        run(&[
            "train-mv", "--patches", &p(root, "patches"),
            "--sv-checkpoint", &p(root, "sv/checkpoint.ckpt"),
            "--config", &p(root, "run.json"), "--fusion", "maxpool",
            "--epochs", "1", "--seed", "45", "--out", &p(root, "mv2"),
        ]),
        0
    );
    let header = mvfuse::nets::checkpoint::read_header(root.join("mv2/checkpoint.ckpt")).unwrap();
    match header.model {
        mvfuse::nets::checkpoint::ModelMeta::MultiView { fusion, .. } => {
            assert_eq!(fusion, mvfuse::nets::FusionStrategy::MaxPool);
        }
        other => panic!("expected multi-view metadata, got {other:?}"),
    }
    // Missing epochs with no config is a data error naming the requirement.
    assert_eq!(
        run(&[
            "train-sv", "--patches", &p(root, "patches"),
            "--seed", "46", "--out", &p(root, "sv2"),
        ]),
        2
    );
}

#[test]
fn eval_requires_matching_patch_size() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(
        run(&[
            "synth", "--classes", "2", "--specimens", "2", "--image-size", "48",
            "--seed", "21", "--out", &p(root, "data"),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "patchify", "--manifest", &p(root, "data/manifest.jsonl"),
            "--out", &p(root, "patches"), "--patch-size", "32",
            "--patches-per-image", "2", "--target", "4", "--variants", "0",
            "--seed", "22",
        ]),
        0
    );
    // mini wants 64px inputs; the 32px store must be rejected with exit 2.
    assert_eq!(
        run(&[
            "train-sv", "--patches", &p(root, "patches"), "--backbone", "mini",
            "--epochs", "1", "--seed", "23", "--out", &p(root, "sv"),
        ]),
        2
    );
}
