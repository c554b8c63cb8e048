//! Runs the pipeline on files in the exporter's JSON Lines formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use relanchor::datagen::load_feature_dataset;
use relanchor::experiment::{run, Command, ExperimentConfig};
use relanchor::text_anchor::load_text_anchors;
use serde_json::json;

const CLASSES: [&str; 5] = ["cat", "dog", "car", "tree", "boat"];
const DIM: usize = 6;

fn write_anchors(path: &Path) {
    let mut text = json!({"dim": DIM, "count": CLASSES.len(), "encoder": "toy-text"}).to_string();
    for (c, name) in CLASSES.iter().enumerate() {
        let embedding: Vec<f64> = (0..DIM).map(|k| if k == c { 1.0 } else { 0.1 * (k + c) as f64 }).collect();
        write!(text, "\n{}", json!({"class": name, "embedding": embedding})).unwrap();
    }
    fs::write(path, text).unwrap();
}

/// Six samples per class; the domain shifts every feature by `offset`.
fn write_features(path: &Path, domain: &str, offset: f64, with_split: bool) {
    let per_class = 6;
    let count = CLASSES.len() * per_class;
    let mut text = json!({"dim": DIM, "count": count, "domain": domain}).to_string();
    for c in 0..CLASSES.len() {
        for i in 0..per_class {
            let feature: Vec<f64> = (0..DIM)
                .map(|k| offset + if k == c { 2.0 } else { 0.0 } + 0.05 * ((i * 7 + k * 3) % 5) as f64)
                .collect();
            let mut line = json!({"label": c, "feature": feature});
            if with_split {
                line["split"] = json!(if i < 4 { "train" } else { "test" });
            }
            write!(text, "\n{line}").unwrap();
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn exported_files_load_and_train() {
    let tmp = tempfile::tempdir().unwrap();
    let anchors = tmp.path().join("anchors.jsonl");
    let photo = tmp.path().join("photo.jsonl");
    let sketch = tmp.path().join("sketch.jsonl");
    write_anchors(&anchors);
    write_features(&photo, "photo", 0.0, true);
    write_features(&sketch, "sketch", 1.5, false);

    let text = load_text_anchors(&anchors).unwrap();
    assert_eq!(text.class_names(), CLASSES);
    let photo_set = load_feature_dataset(&photo, 0, Some(CLASSES.len())).unwrap();
    assert_eq!((photo_set.train.len(), photo_set.test.len()), (20, 10));
    let sketch_set = load_feature_dataset(&sketch, 1, Some(CLASSES.len())).unwrap();
    assert_eq!((sketch_set.train.len(), sketch_set.test.len()), (15, 15));
    assert_eq!(sketch_set.name, "sketch");

    let config = format!(
        "seed = 1\n[anchors]\npath = {anchors:?}\n[features]\nfiles = [{photo:?}, {sketch:?}]\n\
         [model]\nprompt_length = 2\n[optimizer]\nepochs = 3\nbatch_size = 8\n\
         [identification]\nrouting = \"oracle\"\nlayers = [1]\n"
    );
    let mut cfg = ExperimentConfig::resolve(&config, &[]).unwrap();
    cfg.output_dir = Some(tmp.path().join("out"));
    run(&Command::Train, &cfg).unwrap();
    run(&Command::Eval { checkpoint: None }, &cfg).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["domains"], json!(["photo", "sketch"]));
    assert_eq!(summary["metrics"]["forgetting"].as_f64(), Some(0.0));
}

#[test]
fn malformed_lines_name_their_position() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.jsonl");
    fs::write(&path, "{\"dim\": 2, \"count\": 2, \"domain\": 0}\n{\"label\": 0, \"feature\": [1, 2]}\n{\"label\": 1}\n")
        .unwrap();
    let err = load_feature_dataset(&path, 0, None).unwrap_err().to_string();
    assert!(err.contains('3'), "{err}");

    fs::write(&path, "{\"dim\": 2, \"count\": 1, \"encoder\": \"x\"}\n{\"class\": \"a\", \"embedding\": [1]}\n")
        .unwrap();
    assert!(load_text_anchors(&path).is_err());
}
