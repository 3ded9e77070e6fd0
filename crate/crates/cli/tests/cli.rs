use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chartpoint_core::bbox::{NormBBox, NormFormat};

fn chartpoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chartpoint")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn build(dir: &Path, n: usize) {
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, format!(r#"{{"seed": 5, "n_charts": {n}}}"#)).unwrap();
    let out = dir.join("run");
    let o = chartpoint(&["build", "--config", p(&cfg), "--out", p(&out), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn build_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path(), 50);
    let run = dir.path().join("run");
    assert!(run.join("dataset.jsonl").is_file());
    assert!(run.join("manifest.json").is_file());

    let o = chartpoint(&["stats", "--manifest", p(&run)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("records"));
}

#[test]
fn eval_prints_table_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("g.jsonl");
    let pred = dir.path().join("p.jsonl");
    fs::write(
        &gold,
        "{\"sample_id\":\"a\",\"answer\":\"10\",\"group\":\"human\"}\n{\"sample_id\":\"b\",\"answer\":\"Cats\",\"group\":\"aug\"}\n",
    )
    .unwrap();
    fs::write(
        &pred,
        "{\"sample_id\":\"a\",\"raw_text\":\"The answer is 10.8\"}\n{\"sample_id\":\"b\",\"raw_text\":\"cats\"}\n",
    )
    .unwrap();
    let out = dir.path().join("report");
    let o = chartpoint(&["eval", "--gold", p(&gold), "--pred", p(&pred), "--margins", "0.05,0.1,0.2", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stdout.is_empty());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = chartpoint(&["detect", "--unknown-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn usage_error_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = chartpoint(&["gen", "--out", p(&out), "--n", "oops"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    // Domain errors are caught before any write as well.
    let o = chartpoint(&["build", "--out", p(&out), "--n", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(chartpoint(&["gen", "--out", p(d), "--n", "3", "--seed", "9"]).status.code(), Some(0));
    let spec = d.join("specs/c01.json");
    assert!(spec.is_file());
    let o = chartpoint(&["cot", "--specs", p(&d.join("specs")), "--out", p(d)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cot = d.join("cot/c01.json");
    let o = chartpoint(&["edit", "--spec", p(&spec), "--cot", p(&cot), "--out", p(d)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let edited = fs::read_dir(d.join("edited")).unwrap().next().unwrap().unwrap().path();
    let renders = d.join("renders");
    let o = chartpoint(&["render", "--spec", p(&edited), "--out", p(&renders), "--raster", "--geometry"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stem = edited.file_stem().unwrap().to_str().unwrap();
    let svg = renders.join(format!("{stem}.svg"));
    let o = chartpoint(&["detect", "--svg", p(&svg), "--format", "A"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["source"], "structural");
    let norm = NormBBox::parse(v["normalized"].as_str().unwrap(), NormFormat::A).unwrap();
    assert_eq!(norm.format(), NormFormat::A);
}

fn links(html: &str) -> Vec<String> {
    let mut out = Vec::new();
    for attr in ["href=\"", "src=\""] {
        let mut rest = html;
        while let Some(i) = rest.find(attr) {
            rest = &rest[i + attr.len()..];
            let end = rest.find('"').unwrap();
            out.push(rest[..end].to_string());
        }
    }
    out
}

#[test]
fn gallery_pages_link_to_existing_files() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path(), 10);
    let site = dir.path().join("site");
    let o = chartpoint(&["gallery", "--run", p(&dir.path().join("run")), "--out", p(&site)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let pages: Vec<_> = fs::read_dir(&site)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "html") && !p.ends_with("index.html"))
        .collect();
    assert_eq!(pages.len(), 10);
    let mut checked = 0;
    for page in pages.iter().chain([&site.join("index.html")]) {
        let html = fs::read_to_string(page).unwrap();
        for l in links(&html) {
            assert!(!l.starts_with('/') && !l.contains("://"), "{l}");
            assert!(site.join(&l).is_file(), "{} links to missing {l}", page.display());
            checked += 1;
        }
    }
    assert!(checked > 20);

    // Every grounding step of a kept chart gets its own edited render.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    for c in manifest["charts"].as_array().unwrap() {
        if c["failed"].is_null() {
            let html = fs::read_to_string(site.join(format!("{}.html", c["chart_id"].as_str().unwrap()))).unwrap();
            assert_eq!(html.matches("<figure>").count() as u64, c["grounding_steps"].as_u64().unwrap());
        }
    }
}

#[test]
fn gallery_of_empty_build_says_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "n_charts": 4, "fault_injection": {"meta": 1.0}}"#).unwrap();
    let run = dir.path().join("run");
    assert_eq!(chartpoint(&["build", "--config", p(&cfg), "--out", p(&run)]).status.code(), Some(0));
    let site = dir.path().join("site");
    assert_eq!(chartpoint(&["gallery", "--run", p(&run), "--out", p(&site)]).status.code(), Some(0));
    let index = fs::read_to_string(site.join("index.html")).unwrap();
    assert!(index.contains("0 samples from 4 charts"), "{index}");
}
