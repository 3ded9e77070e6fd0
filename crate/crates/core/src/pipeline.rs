//! Gated, resumable dataset build.
//!
//! Every chart walks the stages meta, cot, code, render, detect and qa in
//! order; the first failing gate discards it. Charts are processed in fixed
//! chunks and the manifest is rewritten atomically after each chunk, so an
//! interrupted run resumes from the last committed chunk.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bbox::{contains_bbox_pattern, denormalize_box, normalize, NormBBox, NormFormat, PixelBBox};
use crate::chart_spec::{generate_corpus, ChartSpec, ChartType};
use crate::cot::{self, CotSample, StepKind};
use crate::instruction::{build_instructions, render_overlay_image, InstructionSample, RecordKind};
use crate::llm_client::{build_client, ClientConfig, ClientError, ClientMode, LlmClient};
use crate::marker::{
    self, apply_marker, detect_markers, finalize_bbox, min_box_px, verify_marker, Detection, EditedSpec, MarkerEdit,
};
use crate::renderer::{self, GeometryMap, MarkerAnchor, Scene};

/// Charts processed between manifest commits.
pub const CHUNK_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("no passed charts to summarize")]
    Empty,
    #[error("run halted before completion")]
    Halted,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Meta,
    Cot,
    Code,
    Render,
    Detect,
    Qa,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Meta, Stage::Cot, Stage::Code, Stage::Render, Stage::Detect, Stage::Qa];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Meta => "meta",
            Stage::Cot => "cot",
            Stage::Code => "code",
            Stage::Render => "render",
            Stage::Detect => "detect",
            Stage::Qa => "qa",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

fn default_type_mix() -> BTreeMap<ChartType, f64> {
    BTreeMap::from([(ChartType::Bar, 0.571), (ChartType::Line, 0.336), (ChartType::Pie, 0.093)])
}

fn default_bbox_format() -> NormFormat {
    NormFormat::C
}

fn default_min_marker_px() -> f64 {
    12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_charts: usize,
    #[serde(default = "default_type_mix")]
    pub type_mix: BTreeMap<ChartType, f64>,
    #[serde(default = "default_bbox_format")]
    pub bbox_format: NormFormat,
    #[serde(default = "default_min_marker_px")]
    pub min_marker_px: f64,
    #[serde(default)]
    pub cap: Option<f64>,
    #[serde(default)]
    pub client: ClientConfig,
    #[serde(default)]
    pub fault_injection: BTreeMap<Stage, f64>,
    /// Also write a PPM raster next to each edited SVG.
    #[serde(default)]
    pub write_raster: bool,
}

impl PipelineConfig {
    pub fn new(seed: u64, n_charts: usize) -> Self {
        Self {
            seed,
            n_charts,
            type_mix: default_type_mix(),
            bbox_format: NormFormat::C,
            min_marker_px: default_min_marker_px(),
            cap: None,
            client: ClientConfig::default(),
            fault_injection: BTreeMap::new(),
            write_raster: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let c: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n_charts == 0 {
            return bad("n_charts must be positive".into());
        }
        if !(self.min_marker_px.is_finite() && self.min_marker_px >= 0.0) {
            return bad("min_marker_px must be a non-negative number".into());
        }
        if let Some(cap) = self.cap {
            if !(cap.is_finite() && cap >= 0.0) {
                return bad("cap must be a non-negative number".into());
            }
        }
        for (stage, p) in &self.fault_injection {
            if !(0.0..=1.0).contains(p) {
                return bad(format!("fault_injection.{stage} must lie in [0, 1]"));
            }
        }
        if self.client.mode == ClientMode::Http && self.client.endpoint.trim().is_empty() {
            return bad("http client requires an endpoint".into());
        }
        generate_corpus(self.seed, 1, &self.type_mix).map_err(|e| PipelineError::Config(e.0))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn fault(&self, stage: Stage) -> f64 {
        self.fault_injection.get(&stage).copied().unwrap_or(0.0)
    }

    /// Seeded Bernoulli draw for a fault at `stage` on `chart_id`, plus a spare random bit.
    fn injected(&self, stage: Stage, chart_id: &str) -> Option<bool> {
        let p = self.fault(stage);
        if p <= 0.0 {
            return None;
        }
        let h = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(stage.as_str().as_bytes())
            .chain_update(chart_id.as_bytes())
            .finalize();
        let u = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
        (u < p).then_some(h[8] & 1 == 1)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-chart result recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartStatus {
    pub chart_id: String,
    pub chart_type: ChartType,
    pub passed: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
    pub files: Vec<String>,
}

impl ChartStatus {
    pub fn passed_all(&self) -> bool {
        self.failed.is_none() && self.passed.len() == Stage::ALL.len()
    }

    pub fn passed_stage(&self, stage: Stage) -> bool {
        self.passed.contains(&stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub attempted: usize,
    pub passed: usize,
    pub success_rate: f64,
}

pub fn stage_reports(charts: &[ChartStatus]) -> Vec<StageReport> {
    let mut attempted = charts.len();
    Stage::ALL
        .iter()
        .map(|&stage| {
            let passed = charts.iter().filter(|c| c.passed_stage(stage)).count();
            let report = StageReport {
                stage,
                attempted,
                passed,
                success_rate: if attempted == 0 { 0.0 } else { passed as f64 / attempted as f64 },
            };
            attempted = passed;
            report
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub charts: usize,
    pub records: usize,
    pub records_per_chart: f64,
    pub grounding_histogram: BTreeMap<usize, usize>,
    pub reasoning_histogram: BTreeMap<usize, usize>,
    pub total_histogram: BTreeMap<usize, usize>,
    pub total_mode: usize,
    pub type_counts: BTreeMap<ChartType, usize>,
    /// Percent of passed charts per type.
    pub type_distribution: BTreeMap<ChartType, f64>,
}

/// Step and type statistics over charts that passed every stage.
pub fn compute_stats(charts: &[ChartStatus]) -> Result<StatsReport, PipelineError> {
    let passed: Vec<&ChartStatus> = charts.iter().filter(|c| c.passed_all()).collect();
    if passed.is_empty() {
        return Err(PipelineError::Empty);
    }
    let mut grounding = BTreeMap::new();
    let mut reasoning = BTreeMap::new();
    let mut total = BTreeMap::new();
    let mut types = BTreeMap::new();
    let mut records = 0;
    for c in &passed {
        let (g, r) = (c.grounding_steps.unwrap_or(0), c.reasoning_steps.unwrap_or(0));
        *grounding.entry(g).or_insert(0) += 1;
        *reasoning.entry(r).or_insert(0) += 1;
        *total.entry(g + r).or_insert(0) += 1;
        *types.entry(c.chart_type).or_insert(0) += 1;
        records += c.records.unwrap_or(0);
    }
    // Ties go to the smaller step count.
    let total_mode = total
        .iter()
        .fold((0, 0), |best, (&k, &v)| if v > best.1 { (k, v) } else { best })
        .0;
    let n = passed.len();
    Ok(StatsReport {
        charts: n,
        records,
        records_per_chart: records as f64 / n as f64,
        type_distribution: types.iter().map(|(&t, &c)| (t, c as f64 * 100.0 / n as f64)).collect(),
        type_counts: types,
        grounding_histogram: grounding,
        reasoning_histogram: reasoning,
        total_histogram: total,
        total_mode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub run_id: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub complete: bool,
    pub charts: Vec<ChartStatus>,
    #[serde(default)]
    pub stage_reports: Vec<StageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsReport>,
}

impl DatasetManifest {
    fn new(config: &PipelineConfig) -> Self {
        let config_hash = config.hash();
        Self {
            run_id: config_hash[..16].to_string(),
            config_hash,
            config: config.clone(),
            complete: false,
            charts: Vec::new(),
            stage_reports: Vec::new(),
            stats: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// Artifacts produced for one chart, tagged by the stage that made them.
#[derive(Debug, Clone, Default)]
pub struct ChartFiles(pub Vec<(Stage, String, Vec<u8>)>);

impl ChartFiles {
    fn add(&mut self, stage: Stage, path: String, bytes: impl Into<Vec<u8>>) {
        self.0.push((stage, path, bytes.into()));
    }
}

#[derive(Debug, Clone)]
pub struct ChartOutcome {
    pub status: ChartStatus,
    pub sample: Option<CotSample>,
    pub records: Vec<InstructionSample>,
    pub files: ChartFiles,
}

struct GroundedStep {
    edit: MarkerEdit,
    svg: String,
    geometry: GeometryMap,
    detection: Option<Detection>,
    final_box: Option<PixelBBox>,
    norm: Option<NormBBox>,
}

#[derive(Serialize)]
struct DetectRecord<'a> {
    step: usize,
    source: marker::DetectSource,
    raw: &'a PixelBBox,
    bbox: &'a PixelBBox,
    normalized: String,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("value serializes");
    out.push(b'\n');
    out
}

/// Detection with an optional injected fault: `Some(true)` adds a second
/// marker blob, `Some(false)` removes the marker.
fn detect_step(edited: &EditedSpec, svg: &str, tamper: Option<bool>) -> Result<Detection, marker::DetectError> {
    match tamper {
        None => detect_markers(svg, None).or_else(|_| {
            let bitmap = renderer::rasterize_scene(&edited.scene()).ok().map(|r| r.0);
            detect_markers(svg, bitmap.as_ref())
        }),
        Some(true) => {
            let (w, h) = edited.spec.canvas;
            let real = marker::structural_candidates(svg).first().map(|b| b.center()).unwrap_or((0.0, 0.0));
            let stray = if real.0.hypot(real.1) < 60.0 {
                MarkerAnchor { x: f64::from(w) - 6.0, y: f64::from(h) - 6.0 }
            } else {
                MarkerAnchor { x: 5.0, y: 5.0 }
            };
            let mut markers = edited.markers.clone();
            markers.push(stray);
            let scene = Scene { markers: &markers, ..edited.scene() };
            let tampered = renderer::render_scene_svg(&scene).map(|r| r.0).unwrap_or_default();
            let bitmap = renderer::rasterize_scene(&scene).ok().map(|r| r.0);
            detect_markers(&tampered, bitmap.as_ref())
        }
        Some(false) => detect_markers(&strip_markers(svg), strip_raster(edited).as_ref()),
    }
}

fn strip_markers(svg: &str) -> String {
    svg.lines()
        .filter(|l| !l.starts_with("<rect class=\"marker\""))
        .map(|l| if l.starts_with("<text") { l.replace(crate::MARKER_CHAR, "") } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Raster of the edited chart with every marker pixel painted over.
fn strip_raster(edited: &EditedSpec) -> Option<renderer::Bitmap> {
    let (mut bmp, _) = renderer::rasterize_scene(&edited.scene()).ok()?;
    let (w, h) = (bmp.width, bmp.height);
    for y in 0..h {
        for x in 0..w {
            if bmp.get(x, y) == renderer::MARKER_RGB {
                bmp.set(x, y, renderer::BACKGROUND_RGB);
            }
        }
    }
    Some(bmp)
}

/// Run every stage for one chart; `collect_files` also renders the on-disk artifacts.
pub fn process_chart(
    config: &PipelineConfig,
    spec: &ChartSpec,
    client: &dyn LlmClient,
    collect_files: bool,
) -> ChartOutcome {
    let id = spec.id.clone();
    let mut files = ChartFiles::default();
    let mut status = ChartStatus {
        chart_id: id.clone(),
        chart_type: spec.chart_type,
        passed: Vec::new(),
        failed: None,
        reason: None,
        grounding_steps: None,
        reasoning_steps: None,
        records: None,
        files: Vec::new(),
    };
    let mut sample_out = None;
    let mut records_out = Vec::new();

    let result = (|| -> Result<(), (Stage, String)> {
        // meta
        spec.validate().map_err(|e| (Stage::Meta, e.to_string()))?;
        renderer::layout(spec).map_err(|e| (Stage::Meta, e.to_string()))?;
        if config.injected(Stage::Meta, &id).is_some() {
            return Err((Stage::Meta, "injected fault".into()));
        }
        if collect_files {
            files.add(Stage::Meta, format!("specs/{id}.json"), spec.to_json() + "\n");
        }
        status.passed.push(Stage::Meta);

        // cot: generation, validation and answer review
        let sample = cot::generate_cot_llm(spec, client).map_err(|e| (Stage::Cot, e.to_string()))?;
        if config.client.mode == ClientMode::Http && config.injected(Stage::Cot, &id).is_some() {
            return Err((Stage::Cot, "injected fault".into()));
        }
        let ok = client.review(&sample, spec).map_err(|e| (Stage::Cot, e.to_string()))?;
        if !ok {
            return Err((Stage::Cot, "review rejected the answer".into()));
        }
        status.grounding_steps = Some(sample.count(StepKind::Grounding));
        status.reasoning_steps = Some(sample.count(StepKind::Reasoning));
        if collect_files {
            files.add(Stage::Cot, format!("cot/{id}.json"), sample.to_json() + "\n");
        }
        status.passed.push(Stage::Cot);
        sample_out = Some(sample.clone());

        // code: one marker edit per grounding step
        let code_fault = config.injected(Stage::Code, &id);
        let mut steps = Vec::new();
        for (n, step) in sample.grounding_steps().enumerate() {
            let mut edit = apply_marker(spec, step).map_err(|e| (Stage::Code, e.to_string()))?;
            if n == 0 && code_fault.is_some() {
                // Simulated bad edit: a stray second marker.
                edit.edited.spec.title.push(crate::MARKER_CHAR);
            }
            verify_marker(&edit.edited).map_err(|e| (Stage::Code, e.to_string()))?;
            if collect_files {
                files.add(Stage::Code, format!("edited/{id}_s{}.json", step.index), edit.edited.to_json() + "\n");
            }
            steps.push(edit);
        }
        status.passed.push(Stage::Code);

        // render
        if config.injected(Stage::Render, &id).is_some() {
            return Err((Stage::Render, "injected fault".into()));
        }
        let (vanilla, _) = renderer::render_svg(spec, &[]).map_err(|e| (Stage::Render, e.to_string()))?;
        let mut grounded = Vec::new();
        for edit in steps {
            let (svg, geometry) = edit.edited.render_svg().map_err(|e| (Stage::Render, e.to_string()))?;
            if collect_files {
                let k = edit.step_index;
                if config.write_raster {
                    let (bmp, _) = edit.edited.rasterize().map_err(|e| (Stage::Render, e.to_string()))?;
                    files.add(Stage::Render, format!("edited/{id}_s{k}.ppm"), bmp.to_ppm());
                }
                files.add(Stage::Render, format!("edited/{id}_s{k}.svg"), svg.clone());
            }
            grounded.push(GroundedStep { edit, svg, geometry, detection: None, final_box: None, norm: None });
        }
        if collect_files {
            files.add(Stage::Render, format!("renders/{id}.svg"), vanilla);
        }
        status.passed.push(Stage::Render);

        // detect
        let detect_fault = config.injected(Stage::Detect, &id);
        let canvas = spec.canvas();
        let min = min_box_px(config.min_marker_px, canvas);
        let mut detect_log = Vec::new();
        for (n, g) in grounded.iter_mut().enumerate() {
            let tamper = if n == 0 { detect_fault } else { None };
            let d = detect_step(&g.edit.edited, &g.svg, tamper).map_err(|e| (Stage::Detect, e.to_string()))?;
            let target = g.edit.edited_target();
            let tb = g
                .geometry
                .get(&target)
                .ok_or_else(|| (Stage::Detect, format!("{target:?} missing from edited geometry")))?;
            let (cx, cy) = d.bbox.center();
            if !tb.contains_point(cx, cy) {
                return Err((Stage::Detect, format!("detected box for step {} misses its target", g.edit.step_index)));
            }
            let fin = finalize_bbox(&d.bbox, canvas, min, min);
            let norm = normalize(&fin, canvas, config.bbox_format);
            g.detection = Some(d);
            g.final_box = Some(fin);
            g.norm = Some(norm);
        }
        if collect_files {
            for g in &grounded {
                let d = g.detection.as_ref().expect("detected");
                detect_log.push(DetectRecord {
                    step: g.edit.step_index,
                    source: d.source,
                    raw: &d.bbox,
                    bbox: g.final_box.as_ref().expect("finalized"),
                    normalized: g.norm.as_ref().expect("normalized").to_string(),
                });
            }
            files.add(Stage::Detect, format!("detect/{id}.json"), json_bytes(&detect_log));
        }
        status.passed.push(Stage::Detect);

        // qa: instruction expansion and consistency
        if config.injected(Stage::Qa, &id).is_some() {
            return Err((Stage::Qa, "injected fault".into()));
        }
        let boxes: BTreeMap<usize, NormBBox> =
            grounded.iter().map(|g| (g.edit.step_index, g.norm.expect("normalized"))).collect();
        let pixel: BTreeMap<usize, PixelBBox> =
            grounded.iter().map(|g| (g.edit.step_index, g.final_box.expect("finalized"))).collect();
        let chart_seed = config.seed ^ u64::from_le_bytes(Sha256::digest(id.as_bytes())[..8].try_into().expect("8"));
        let records = build_instructions(&sample, &boxes, &pixel, config.cap, chart_seed)
            .map_err(|e| (Stage::Qa, e.to_string()))?;
        for r in &records {
            match r.kind {
                RecordKind::T1a | RecordKind::T1b => {
                    if contains_bbox_pattern(&r.ground_truth) || r.prompt.iter().any(|p| contains_bbox_pattern(p)) {
                        return Err((Stage::Qa, "bbox leaked into a T1 record".into()));
                    }
                }
                RecordKind::T2 | RecordKind::T3 => {
                    let step = r.step.expect("per-step record");
                    let g = grounded.iter().find(|g| g.edit.step_index == step).expect("grounded step");
                    let nb = NormBBox::parse(&r.ground_truth, config.bbox_format).map_err(|e| (Stage::Qa, e.to_string()))?;
                    let back = denormalize_box(&nb, canvas);
                    let tb = g.geometry.get(&g.edit.edited_target()).expect("checked in detect");
                    if !back.intersects(tb) {
                        return Err((Stage::Qa, format!("ground truth for step {step} misses its target")));
                    }
                }
                RecordKind::T4Final => {}
            }
        }
        if collect_files {
            for r in records.iter().filter(|r| r.kind == RecordKind::T3) {
                let svg = render_overlay_image(spec, &r.image.overlay_boxes).map_err(|e| (Stage::Qa, e.to_string()))?;
                files.add(Stage::Qa, r.image.file.clone(), svg);
            }
            let mut lines = String::new();
            for r in &records {
                lines.push_str(&serde_json::to_string(r).expect("record serializes"));
                lines.push('\n');
            }
            files.add(Stage::Qa, format!("records/{id}.jsonl"), lines);
        }
        status.records = Some(records.len());
        status.passed.push(Stage::Qa);
        records_out = records;
        Ok(())
    })();

    if let Err((stage, reason)) = result {
        status.failed = Some(stage);
        status.reason = Some(reason);
    }
    files.0.dedup_by(|a, b| a.1 == b.1);
    status.files = files.0.iter().map(|f| f.1.clone()).collect();
    status.files.sort();
    ChartOutcome { status, sample: sample_out, records: records_out, files }
}

/// Where to stop a run early, simulating a kill: after `charts` committed
/// charts, the next chart's artifacts are written up to `stage` and the run stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HaltPoint {
    pub charts: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub workers: usize,
    pub halt: Option<HaltPoint>,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn make_client(config: &PipelineConfig) -> Result<Box<dyn LlmClient>, PipelineError> {
    Ok(build_client(&config.client, config.seed, config.fault(Stage::Cot))?)
}

/// In-memory run without touching the filesystem.
pub fn simulate(config: &PipelineConfig, workers: usize) -> Result<Vec<ChartStatus>, PipelineError> {
    config.validate()?;
    let specs = generate_corpus(config.seed, config.n_charts, &config.type_mix).map_err(|e| PipelineError::Config(e.0))?;
    let client = make_client(config)?;
    let pool = thread_pool(workers)?;
    Ok(pool.install(|| {
        specs
            .par_iter()
            .map(|s| process_chart(config, s, client.as_ref(), false).status)
            .collect()
    }))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_file(out: &Path, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(&path, bytes).map_err(io_err(&path))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Run (or resume) a build into `out`, then emit the dataset.
pub fn run(config: &PipelineConfig, out: &Path, options: RunOptions) -> Result<DatasetManifest, PipelineError> {
    config.validate()?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let m = DatasetManifest::load(&manifest_path)?;
        if m.config_hash != config.hash() {
            return Err(PipelineError::Config(format!(
                "{} belongs to a different config; use a fresh output directory",
                manifest_path.display()
            )));
        }
        m
    } else {
        DatasetManifest::new(config)
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let specs = generate_corpus(config.seed, config.n_charts, &config.type_mix).map_err(|e| PipelineError::Config(e.0))?;
    let done: std::collections::BTreeSet<String> = manifest.charts.iter().map(|c| c.chart_id.clone()).collect();
    let pending: Vec<&ChartSpec> = specs.iter().filter(|s| !done.contains(&s.id)).collect();
    if !pending.is_empty() {
        log::info!("{} charts pending, {} already recorded", pending.len(), done.len());
    }
    let client = make_client(config)?;
    let pool = thread_pool(options.workers)?;
    let mut committed = 0usize;
    for chunk in pending.chunks(CHUNK_SIZE) {
        let budget = options.halt.map(|h| h.charts.saturating_sub(committed));
        let take = budget.map_or(chunk.len(), |b| b.min(chunk.len()));
        let outcomes: Vec<ChartOutcome> = pool.install(|| {
            chunk[..take]
                .par_iter()
                .map(|s| process_chart(config, s, client.as_ref(), true))
                .collect()
        });
        for o in &outcomes {
            for (_, rel, bytes) in &o.files.0 {
                write_file(out, rel, bytes)?;
            }
        }
        manifest.charts.extend(outcomes.into_iter().map(|o| o.status));
        manifest.charts.sort_by(|a, b| a.chart_id.cmp(&b.chart_id));
        write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
        committed += take;
        if let Some(h) = options.halt {
            if committed >= h.charts {
                if let Some(next) = chunk.get(take).or_else(|| pending.get(committed)) {
                    let partial = process_chart(config, next, client.as_ref(), true);
                    for (stage, rel, bytes) in &partial.files.0 {
                        if *stage <= h.stage {
                            write_file(out, rel, bytes)?;
                        }
                    }
                }
                return Err(PipelineError::Halted);
            }
        }
    }
    emit_dataset(out, &mut manifest)?;
    Ok(manifest)
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const STAGE_REPORT_FILE: &str = "stage_report.json";

/// Write dataset.jsonl, stats.json and stage_report.json, then the final manifest.
pub fn emit_dataset(out: &Path, manifest: &mut DatasetManifest) -> Result<(), PipelineError> {
    let mut dataset = Vec::new();
    for c in manifest.charts.iter().filter(|c| c.passed_all()) {
        let path = out.join(format!("records/{}.jsonl", c.chart_id));
        dataset.extend(fs::read(&path).map_err(io_err(&path))?);
    }
    write_atomic(&out.join(DATASET_FILE), &dataset)?;
    manifest.stage_reports = stage_reports(&manifest.charts);
    write_atomic(&out.join(STAGE_REPORT_FILE), &json_bytes(&manifest.stage_reports))?;
    manifest.stats = match compute_stats(&manifest.charts) {
        Ok(s) => Some(s),
        Err(PipelineError::Empty) => None,
        Err(e) => return Err(e),
    };
    let stats_json = match &manifest.stats {
        Some(s) => json_bytes(s),
        None => json_bytes(&serde_json::json!({ "charts": 0, "records": 0 })),
    };
    write_atomic(&out.join(STATS_FILE), &stats_json)?;
    manifest.complete = true;
    write_atomic(&out.join(MANIFEST_FILE), manifest.to_json().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn statuses(config: &PipelineConfig) -> Vec<ChartStatus> {
        simulate(config, 2).unwrap()
    }

    #[test]
    fn fault_free_run_passes_everything() {
        let config = PipelineConfig::new(4, 50);
        let s = statuses(&config);
        assert!(s.iter().all(|c| c.passed_all()), "{:?}", s.iter().find(|c| !c.passed_all()));
        let reports = stage_reports(&s);
        assert!(reports.iter().all(|r| r.attempted == 50 && r.passed == 50));
    }

    #[test]
    fn accounting_chains_attempts() {
        let mut config = PipelineConfig::new(5, 300);
        config.fault_injection = BTreeMap::from([(Stage::Cot, 0.1), (Stage::Code, 0.2), (Stage::Render, 0.3), (Stage::Detect, 0.2)]);
        let reports = stage_reports(&statuses(&config));
        for pair in reports.windows(2) {
            assert_eq!(pair[1].attempted, pair[0].passed);
            assert!(pair[1].passed <= pair[1].attempted);
        }
    }

    #[test]
    fn each_injected_fault_fails_its_stage() {
        for stage in Stage::ALL {
            let mut config = PipelineConfig::new(8, 12);
            config.fault_injection.insert(stage, 1.0);
            for c in statuses(&config) {
                let expected = if stage == Stage::Cot {
                    // Stub corruption fails either the parse or the review, both in the cot gate.
                    Stage::Cot
                } else {
                    stage
                };
                assert_eq!(c.failed, Some(expected), "{stage}: {c:?}");
            }
        }
    }

    #[test]
    fn stats_single_chart() {
        let s = statuses(&PipelineConfig::new(1, 1));
        let stats = compute_stats(&s).unwrap();
        assert_eq!(stats.total_histogram.len(), 1);
        assert_eq!(stats.total_histogram.values().sum::<usize>(), 1);
        assert!(matches!(compute_stats(&[]), Err(PipelineError::Empty)));
    }

    #[test]
    fn config_parsing() {
        let c = PipelineConfig::from_json(
            r#"{"seed":1,"n_charts":5,"cap":3.24,"client":{"mode":"stub"},"fault_injection":{"render":0.5}}"#,
        )
        .unwrap();
        assert_eq!(c.fault(Stage::Render), 0.5);
        assert_eq!(c.bbox_format, NormFormat::C);
        assert!(PipelineConfig::from_json(r#"{"seed":1,"n_charts":0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"seed":1,"n_charts":3,"fault_injection":{"render":1.5}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"seed":1,"n_charts":3,"api_key":"x"}"#).is_err());
    }

    #[test]
    fn run_writes_dataset_and_referenced_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::new(2, 12);
        config.fault_injection.insert(Stage::Render, 0.3);
        let m = run(&config, dir.path(), RunOptions { workers: 2, halt: None }).unwrap();
        assert!(m.complete);
        let data = fs::read_to_string(dir.path().join(DATASET_FILE)).unwrap();
        let n = data.lines().count();
        assert_eq!(n, m.stats.as_ref().unwrap().records);
        for line in data.lines() {
            let r: InstructionSample = serde_json::from_str(line).unwrap();
            assert!(dir.path().join(&r.image.file).exists(), "{}", r.image.file);
        }
    }
}
