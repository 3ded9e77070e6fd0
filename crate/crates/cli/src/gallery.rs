//! Static HTML gallery over a finished build directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chartpoint_core::bbox::PixelBBox;
use chartpoint_core::cot::{validate_cot, StepKind};
use chartpoint_core::instruction::InstructionSample;
use chartpoint_core::marker::EditedSpec;
use chartpoint_core::pipeline::{ChartStatus, DatasetManifest, MANIFEST_FILE};
use chartpoint_core::renderer::{render_scene_svg, Scene};

const STYLE: &str = "body{font-family:sans-serif;margin:2em;max-width:1100px}\
img{max-width:100%;border:1px solid #ccc}\
.steps li{margin:.3em 0}.G{color:#a0007a}.fail{color:#b00}\
pre{background:#f6f6f6;padding:.5em;white-space:pre-wrap}\
table{border-collapse:collapse}td,th{border:1px solid #ddd;padding:.2em .6em}";

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head>\n<body>\n{body}</body></html>\n",
        esc(title)
    )
}

#[derive(serde::Deserialize)]
struct DetectEntry {
    step: usize,
    bbox: PixelBBox,
    normalized: String,
}

fn copy(run: &Path, rel: &str, out: &Path, name: &str) -> Result<bool> {
    let src = run.join(rel);
    if !src.is_file() {
        return Ok(false);
    }
    fs::copy(&src, out.join("img").join(name)).with_context(|| format!("copying {}", src.display()))?;
    Ok(true)
}

fn chart_page(run: &Path, out: &Path, c: &ChartStatus) -> Result<String> {
    let id = &c.chart_id;
    let mut b = String::new();
    let _ = writeln!(b, "<p><a href=\"index.html\">index</a></p>\n<h1>{}</h1>", esc(id));
    let status = match (c.failed, &c.reason) {
        (Some(stage), Some(reason)) => format!("<span class=\"fail\">discarded at {stage}: {}</span>", esc(reason)),
        (Some(stage), None) => format!("<span class=\"fail\">discarded at {stage}</span>"),
        _ => "passed every stage".to_string(),
    };
    let _ = writeln!(b, "<p>{} chart, {status}</p>", c.chart_type.as_str());

    if copy(run, &format!("renders/{id}.svg"), out, &format!("{id}.svg"))? {
        let _ = writeln!(b, "<h2>Chart</h2>\n<img src=\"img/{id}.svg\" alt=\"chart {id}\">");
    }

    let sample = fs::read_to_string(run.join(format!("cot/{id}.json")))
        .ok()
        .and_then(|t| validate_cot(&t).ok());
    let detections: Vec<DetectEntry> = fs::read_to_string(run.join(format!("detect/{id}.json")))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();

    if let Some(sample) = &sample {
        let _ = writeln!(b, "<h2>Question</h2>\n<p>{}</p>\n<p>Answer: <b>{}</b></p>", esc(&sample.question), esc(&sample.answer.to_string()));
        let _ = writeln!(b, "<ol class=\"steps\" start=\"0\">");
        for s in &sample.steps {
            let (class, kind) = match s.kind {
                StepKind::Grounding => ("G", "Grounding"),
                StepKind::Reasoning => ("R", "Reasoning"),
            };
            let bbox = detections.iter().find(|d| d.step == s.index).map(|d| format!(" <code>{}</code>", esc(&d.normalized)));
            let _ = writeln!(b, "<li class=\"{class}\">[{kind}] {}{}</li>", esc(&s.text), bbox.unwrap_or_default());
        }
        let _ = writeln!(b, "</ol>");

        let grounding: Vec<usize> = sample.grounding_steps().map(|s| s.index).collect();
        let mut shown = 0;
        let mut section = String::new();
        for k in grounding {
            let Ok(text) = fs::read_to_string(run.join(format!("edited/{id}_s{k}.json"))) else { continue };
            let edited = EditedSpec::from_json(&text).with_context(|| format!("edited spec {id} step {k}"))?;
            let boxes: Vec<PixelBBox> = detections.iter().filter(|d| d.step == k).map(|d| d.bbox).collect();
            let scene = Scene { overlays: &boxes, ..edited.scene() };
            let (svg, _) = render_scene_svg(&scene).with_context(|| format!("rendering {id} step {k}"))?;
            let name = format!("{id}_s{k}_det.svg");
            fs::write(out.join("img").join(&name), svg)?;
            let caption = if boxes.is_empty() { "not detected" } else { "detected box in red" };
            let _ = writeln!(section, "<figure><img src=\"img/{name}\" alt=\"step {k}\"><figcaption>step {k}: {caption}</figcaption></figure>");
            shown += 1;
        }
        if shown > 0 {
            let _ = writeln!(b, "<h2>Edited renders</h2>\n{section}");
        }
    }

    if let Ok(text) = fs::read_to_string(run.join(format!("records/{id}.jsonl"))) {
        let _ = writeln!(b, "<h2>Instruction records</h2>");
        for line in text.lines() {
            let r: InstructionSample = serde_json::from_str(line).context("parsing record")?;
            let step = r.step.map(|s| format!(" (step {s})")).unwrap_or_default();
            let _ = writeln!(b, "<h3>{}{step}</h3>", r.kind.as_str());
            let file = Path::new(&r.image.file).file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
            if copy(run, &r.image.file, out, &file)? {
                let _ = writeln!(b, "<p>image: <a href=\"img/{file}\">{}</a></p>", esc(&file));
            }
            let _ = writeln!(b, "<pre>{}</pre>\n<p>Ground truth:</p>\n<pre>{}</pre>", esc(&r.prompt.join("\n")), esc(&r.ground_truth));
        }
    }
    Ok(page(id, &b))
}

/// Writes `index.html` plus one page per chart into `out`; returns the page count.
pub fn write_gallery(run: &Path, out: &Path) -> Result<usize> {
    let manifest_path = run.join(MANIFEST_FILE);
    let manifest = DatasetManifest::load(&manifest_path).with_context(|| format!("loading {}", manifest_path.display()))?;
    if !manifest.complete {
        bail!("{} is from an unfinished build; resume it first", manifest_path.display());
    }
    fs::create_dir_all(out.join("img")).with_context(|| format!("creating {}", out.display()))?;
    let mut index = String::new();
    let _ = writeln!(index, "<h1>Build {}</h1>", esc(&manifest.run_id));
    let passed = manifest.charts.iter().filter(|c| c.passed_all()).count();
    let _ = writeln!(index, "<p>{passed} samples from {} charts.</p>", manifest.charts.len());
    if !manifest.charts.is_empty() {
        let _ = writeln!(index, "<table><tr><th>chart</th><th>type</th><th>status</th><th>records</th></tr>");
        for c in &manifest.charts {
            fs::write(out.join(format!("{}.html", c.chart_id)), chart_page(run, out, c)?)?;
            let status = c.failed.map_or("passed".to_string(), |s| format!("failed at {s}"));
            let _ = writeln!(
                index,
                "<tr><td><a href=\"{0}.html\">{0}</a></td><td>{1}</td><td>{status}</td><td>{2}</td></tr>",
                esc(&c.chart_id),
                c.chart_type.as_str(),
                c.records.unwrap_or(0)
            );
        }
        let _ = writeln!(index, "</table>");
    }
    fs::write(out.join("index.html"), page("chart gallery", &index))?;
    Ok(manifest.charts.len())
}
