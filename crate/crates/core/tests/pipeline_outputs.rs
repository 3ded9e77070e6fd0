use std::collections::BTreeMap;
use std::fs;

use chartpoint_core::bbox::{denormalize_box, NormBBox};
use chartpoint_core::chart_spec::parse_spec;
use chartpoint_core::cot::validate_cot;
use chartpoint_core::instruction::{InstructionSample, RecordKind};
use chartpoint_core::marker::{apply_marker, EditedSpec};
use chartpoint_core::pipeline::{run, DatasetManifest, PipelineConfig, RunOptions, Stage};

#[test]
fn every_referenced_image_exists_and_boxes_hit_targets() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::new(12, 500);
    config.fault_injection = BTreeMap::from([(Stage::Render, 0.2)]);
    let manifest = run(&config, dir.path(), RunOptions { workers: 2, halt: None }).unwrap();
    let data = fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    let records: Vec<InstructionSample> = data.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());

    let keys: Vec<_> = records.iter().map(|r| (r.chart_id.clone(), r.kind, r.step.unwrap_or(0))).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);

    for r in &records {
        assert!(dir.path().join(&r.image.file).is_file(), "missing {}", r.image.file);
        if matches!(r.kind, RecordKind::T2 | RecordKind::T3) {
            let step = r.step.unwrap();
            let read = |rel: String| fs::read_to_string(dir.path().join(rel)).unwrap();
            let spec = parse_spec(&read(format!("specs/{}.json", r.chart_id))).unwrap();
            let sample = validate_cot(&read(format!("cot/{}.json", r.chart_id))).unwrap();
            let edit = apply_marker(&spec, &sample.steps[step]).unwrap();
            let stored = EditedSpec::from_json(&read(format!("edited/{}_s{step}.json", r.chart_id))).unwrap();
            assert_eq!(stored, edit.edited);
            let (_, geometry) = edit.edited.render_svg().unwrap();
            let target = geometry.get(&edit.edited_target()).unwrap();
            let gt = denormalize_box(&NormBBox::parse(&r.ground_truth, config.bbox_format).unwrap(), spec.canvas());
            assert!(gt.intersects(target), "{} step {step}", r.chart_id);
        }
    }
    // Artifacts exist for every stage a chart passed.
    for c in &manifest.charts {
        for f in &c.files {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        if c.passed.contains(&Stage::Render) {
            assert!(dir.path().join(format!("renders/{}.svg", c.chart_id)).is_file());
        }
    }
    let reloaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(reloaded, manifest);
}

#[test]
fn empty_passed_set_emits_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::new(3, 20);
    config.fault_injection.insert(Stage::Meta, 1.0);
    let manifest = run(&config, dir.path(), RunOptions { workers: 1, halt: None }).unwrap();
    assert!(manifest.complete);
    assert!(manifest.stats.is_none());
    assert_eq!(fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap(), "");
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["charts"], 0);
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("stage_report.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["attempted"], 20);
    assert_eq!(reports[0]["passed"], 0);
    assert_eq!(reports[1]["attempted"], 0);
}

#[test]
fn resume_refuses_foreign_manifest() {
    let dir = tempfile::tempdir().unwrap();
    run(&PipelineConfig::new(1, 5), dir.path(), RunOptions { workers: 1, halt: None }).unwrap();
    assert!(run(&PipelineConfig::new(2, 5), dir.path(), RunOptions { workers: 1, halt: None }).is_err());
}

#[test]
fn rerun_of_complete_build_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig::new(6, 10);
    let first = run(&config, dir.path(), RunOptions { workers: 1, halt: None }).unwrap();
    let bytes = fs::read(dir.path().join("dataset.jsonl")).unwrap();
    let second = run(&config, dir.path(), RunOptions { workers: 4, halt: None }).unwrap();
    assert_eq!(first, second);
    assert_eq!(bytes, fs::read(dir.path().join("dataset.jsonl")).unwrap());
}
