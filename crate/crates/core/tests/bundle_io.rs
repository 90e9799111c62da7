use std::fs;
use std::path::{Path, PathBuf};

use dfprune::bundle::{load_evalset, load_model, save_evalset, save_model, MANIFEST_FILE};
use dfprune::nn::{accuracy, forward};
use dfprune::plan::{build_prunable_plan, LayerType};
use dfprune::Error;
use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/digits")
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join(MANIFEST_FILE);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn golden_logits_match_framework() {
    let graph = load_model(fixture().join("model")).unwrap();
    let eval = load_evalset(fixture().join("eval")).unwrap();
    let golden: Value = serde_json::from_str(&fs::read_to_string(fixture().join("golden.json")).unwrap()).unwrap();
    let idx: Vec<usize> = golden["batch_indices"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    let batch = eval.select(&idx).unwrap();
    let logits = forward(&graph, &batch.images).unwrap();
    let mut worst = 0.0f64;
    for (i, row) in golden["logits"].as_array().unwrap().iter().enumerate() {
        for (a, b) in logits.row(i).iter().zip(row.as_array().unwrap()) {
            worst = worst.max((*a as f64 - b.as_f64().unwrap()).abs());
        }
    }
    assert!(worst <= 1e-4, "max abs logit difference {worst}");
}

#[test]
fn fixture_accuracy_matches_framework() {
    let graph = load_model(fixture().join("model")).unwrap();
    let eval = load_evalset(fixture().join("eval")).unwrap();
    let golden: Value = serde_json::from_str(&fs::read_to_string(fixture().join("golden.json")).unwrap()).unwrap();
    let acc = accuracy(&graph, &eval.images, &eval.labels).unwrap();
    let framework = golden["framework_accuracy"].as_f64().unwrap();
    assert_eq!(eval.len(), 1000);
    assert!(acc >= 0.75);
    assert!((acc - framework).abs() <= 0.002, "{acc} vs {framework}");
}

#[test]
fn fixture_plan_has_prunable_convs() {
    let graph = load_model(fixture().join("model")).unwrap();
    let plan = build_prunable_plan(&graph);
    assert!(plan.len() >= 3);
    assert!(plan.entries.iter().all(|e| e.layer_type == LayerType::Conv));
    // the classifier has no successor
    assert!(plan.entries.iter().all(|e| graph.layers()[e.layer].name != "fc"));
    assert_eq!(plan.total_params, graph.param_count());
    let last = plan.entries.last().unwrap();
    assert!(last.followers.contains(&"global_avg_pool".to_string()));
}

#[test]
fn model_and_evalset_round_trip() {
    let graph = load_model(fixture().join("model")).unwrap();
    let eval = load_evalset(fixture().join("eval")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&graph, dir.path().join("m")).unwrap();
    save_evalset(&eval, dir.path().join("e")).unwrap();
    assert_eq!(load_model(dir.path().join("m")).unwrap(), graph);
    let back = load_evalset(dir.path().join("e")).unwrap();
    assert_eq!(back.images, eval.images);
    assert_eq!(back.labels, eval.labels);
    assert_eq!(back.normalization, eval.normalization);
    // saving twice gives identical bytes
    save_model(&graph, dir.path().join("m2")).unwrap();
    for name in ["conv1.weight.bin", MANIFEST_FILE] {
        assert_eq!(
            fs::read(dir.path().join("m").join(name)).unwrap(),
            fs::read(dir.path().join("m2").join(name)).unwrap()
        );
    }
}

#[test]
fn corrupted_blob_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture().join("model"), dir.path());
    let blob = dir.path().join("conv2.weight.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[10] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    match load_model(dir.path()) {
        Err(Error::Checksum { blob, .. }) => assert_eq!(blob, "conv2.weight.bin"),
        other => panic!("expected checksum error, got {other:?}"),
    }
}

#[test]
fn missing_blob_is_dangling() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture().join("model"), dir.path());
    fs::remove_file(dir.path().join("fc.bias.bin")).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::DanglingBlob(b)) if b == "fc.bias.bin"));
}

#[test]
fn truncated_blob_reports_lengths() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture().join("model"), dir.path());
    let blob = dir.path().join("conv1.weight.bin");
    let bytes = fs::read(&blob).unwrap();
    let short = &bytes[..bytes.len() - 4];
    fs::write(&blob, short).unwrap();
    let checksum = dfprune::bundle::checksum_hex(short);
    edit_manifest(dir.path(), |v| {
        v["layers"][0]["checksums"]["conv1.weight.bin"] = Value::String(checksum);
    });
    match load_model(dir.path()) {
        Err(Error::BlobLength { expected, found, .. }) => assert_eq!((expected, found), (576, 572)),
        other => panic!("expected length error, got {other:?}"),
    }
}

#[test]
fn unsupported_layers_are_named() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture().join("model"), dir.path());
    edit_manifest(dir.path(), |v| {
        v["layers"][1]["kind"] = Value::String("max_pool".into());
    });
    let msg = load_model(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("max_pool"), "{msg}");

    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture().join("model"), dir.path());
    edit_manifest(dir.path(), |v| {
        v["layers"][1]["groups"] = Value::from(2);
    });
    assert!(matches!(load_model(dir.path()), Err(Error::UnsupportedLayer(_))));
}

#[test]
fn wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture().join("model"), dir.path());
    edit_manifest(dir.path(), |v| {
        v["format_version"] = Value::String("adfp-bundle/9".into());
    });
    assert!(matches!(load_model(dir.path()), Err(Error::Version { .. })));
}

#[test]
fn evalset_must_match_model() {
    let graph = load_model(fixture().join("model")).unwrap();
    let mut eval = load_evalset(fixture().join("eval")).unwrap();
    eval.check_model(&graph).unwrap();
    eval.num_classes = 3;
    assert!(eval.check_model(&graph).is_err());
}
