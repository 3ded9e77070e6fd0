mod gallery;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chartpoint_core::bbox::{normalize, Canvas, NormFormat, PixelBBox};
use chartpoint_core::chart_spec::{generate_corpus, parse_spec, ChartSpec};
use chartpoint_core::cot::{check_against_spec, generate_cot_llm, generate_cot_rule_based, validate_cot};
use chartpoint_core::eval::{evaluate, parse_margins, read_jsonl, EvalOptions, ExtractMode, GoldEntry, GroupBy, Prediction};
use chartpoint_core::llm_client::{build_client, ClientMode};
use chartpoint_core::marker::{apply_marker, detect_markers, finalize_bbox, min_box_px, EditedSpec};
use chartpoint_core::pipeline::{run, DatasetManifest, PipelineConfig, RunOptions, Stage, MANIFEST_FILE};
use chartpoint_core::renderer::{render_scene_svg, rasterize_scene, Bitmap, Scene};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "chartpoint", version, about = "Build grounded chart reasoning datasets and score chart QA predictions")]
struct Cli {
    /// Worker threads for chart processing.
    #[arg(long, global = true, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=256))]
    workers: u64,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline config JSON. Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize chart specs.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of charts (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Generate and validate reasoning chains for chart specs.
    Cot {
        #[command(flatten)]
        common: Common,
        /// Spec file; repeatable.
        #[arg(long)]
        spec: Vec<PathBuf>,
        /// Directory of spec files.
        #[arg(long)]
        specs: Option<PathBuf>,
        /// Use the built-in rule-based generator instead of the client.
        #[arg(long)]
        rule_based: bool,
    },
    /// Insert one marker per grounding step.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        cot: PathBuf,
    },
    /// Render a chart spec or edited spec.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: PathBuf,
        /// Also write a PPM raster.
        #[arg(long)]
        raster: bool,
        /// Pixel box to outline, as x0,y0,x1,y1; repeatable.
        #[arg(long)]
        overlay: Vec<String>,
        /// Also write the element geometry map.
        #[arg(long)]
        geometry: bool,
    },
    /// Locate the marker in a rendered chart.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        svg: PathBuf,
        /// Raster fallback when the SVG has no marker.
        #[arg(long)]
        ppm: Option<PathBuf>,
        /// Normalized bbox format: A, B or C.
        #[arg(long)]
        format: Option<NormFormat>,
        #[arg(long)]
        min_marker_px: Option<f64>,
    },
    /// Run the full pipeline (resumes when the output holds a matching manifest).
    Build {
        #[command(flatten)]
        common: Common,
        /// Number of charts (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Print stage success rates and dataset statistics.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Manifest file or build directory.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score predictions against gold answers under relaxed accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Comma-separated relative margins.
        #[arg(long, default_value = "0.05,0.1,0.2")]
        margins: String,
        #[arg(long, default_value = "match")]
        mode: ExtractMode,
        /// gold, pred or none.
        #[arg(long, default_value = "gold")]
        group_by: GroupBy,
        /// Require exact text answers after case folding only.
        #[arg(long)]
        strict_text: bool,
    },
    /// Write a static HTML gallery for a finished build.
    Gallery {
        #[command(flatten)]
        common: Common,
        /// Build directory.
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common, n: Option<usize>) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = read(path)?;
            PipelineConfig::from_json(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => PipelineConfig::new(0, 100),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = n {
        config.n_charts = n;
    }
    config.validate()?;
    Ok(config)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn parse_box(text: &str) -> Result<PixelBBox> {
    let v: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("overlay {text:?}"))?;
    let [x0, y0, x1, y1] = v[..] else { bail!("overlay {text:?} needs four numbers") };
    Ok(PixelBBox::new(x0, y0, x1, y1)?)
}

/// Reads width and height from the root `<svg>` element.
fn svg_canvas(svg: &str) -> Result<Canvas> {
    let start = svg.find("<svg").ok_or_else(|| anyhow!("no <svg> element"))?;
    let head = &svg[start..start + svg[start..].find('>').ok_or_else(|| anyhow!("unterminated <svg> element"))?];
    let attr = |name: &str| -> Result<u32> {
        let key = format!(" {name}=\"");
        let i = head.find(&key).ok_or_else(|| anyhow!("<svg> has no {name}"))? + key.len();
        let v = &head[i..i + head[i..].find('"').unwrap_or(0)];
        v.trim_end_matches("px").parse().with_context(|| format!("<svg> {name}={v:?}"))
    };
    Ok(Canvas::new(attr("width")?, attr("height")?))
}

fn dispatch(cli: Cli) -> Result<()> {
    let workers = cli.workers as usize;
    match cli.command {
        Command::Gen { common, n } => {
            let config = load_config(&common, n)?;
            let out = out_dir(&common)?;
            let specs = generate_corpus(config.seed, config.n_charts, &config.type_mix).map_err(|e| anyhow!(e.0))?;
            let dir = out.join("specs");
            for s in &specs {
                write(&dir, &format!("{}.json", s.id), s.to_json() + "\n")?;
            }
            println!("wrote {} specs to {}", specs.len(), dir.display());
        }
        Command::Cot { common, spec, specs, rule_based } => {
            let config = load_config(&common, None)?;
            let out = out_dir(&common)?;
            let mut paths = spec;
            if let Some(dir) = specs {
                let mut found: Vec<PathBuf> = fs::read_dir(&dir)
                    .with_context(|| format!("reading {}", dir.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "json"))
                    .collect();
                found.sort();
                paths.extend(found);
            }
            if paths.is_empty() {
                bail!("no specs given; pass --spec or --specs");
            }
            let charts: Vec<ChartSpec> = paths
                .iter()
                .map(|p| parse_spec(&read(p)?).with_context(|| format!("spec {}", p.display())))
                .collect::<Result<_>>()?;
            let rate = config.fault_injection.get(&Stage::Cot).copied().unwrap_or(0.0);
            let client = build_client(&config.client, config.seed, rate)?;
            let dir = out.join("cot");
            let mut failed = 0;
            for s in &charts {
                let sample = if rule_based {
                    Ok(generate_cot_rule_based(s, config.seed))
                } else {
                    generate_cot_llm(s, client.as_ref())
                };
                match sample {
                    Ok(sample) => write(&dir, &format!("{}.json", s.id), sample.to_json() + "\n")?,
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", s.id);
                    }
                }
            }
            println!("{} of {} chains written to {}", charts.len() - failed, charts.len(), dir.display());
            if failed == charts.len() {
                bail!("every chain failed validation");
            }
        }
        Command::Edit { common, spec, cot } => {
            let out = out_dir(&common)?;
            let spec = parse_spec(&read(&spec)?).context("chart spec")?;
            let sample = validate_cot(&read(&cot)?).context("reasoning chain")?;
            check_against_spec(&sample, &spec)?;
            let edits = sample
                .grounding_steps()
                .map(|s| apply_marker(&spec, s).with_context(|| format!("step {}", s.index)))
                .collect::<Result<Vec<_>>>()?;
            let dir = out.join("edited");
            for e in &edits {
                write(&dir, &format!("{}_s{}.json", spec.id, e.step_index), e.edited.to_json() + "\n")?;
            }
            println!("wrote {} edited specs to {}", edits.len(), dir.display());
        }
        Command::Render { common, spec, raster, overlay, geometry } => {
            let out = out_dir(&common)?;
            let edited = EditedSpec::from_json(&read(&spec)?).with_context(|| format!("spec {}", spec.display()))?;
            let boxes = overlay.iter().map(|o| parse_box(o)).collect::<Result<Vec<_>>>()?;
            let scene = Scene { overlays: &boxes, ..edited.scene() };
            let (svg, geo) = render_scene_svg(&scene)?;
            let bitmap = if raster { Some(rasterize_scene(&scene)?.0) } else { None };
            let stem = spec.file_stem().and_then(|s| s.to_str()).unwrap_or("chart").to_string();
            write(out, &format!("{stem}.svg"), svg)?;
            if let Some(b) = bitmap {
                write(out, &format!("{stem}.ppm"), b.to_ppm())?;
            }
            if geometry {
                write(out, &format!("{stem}.geometry.json"), serde_json::to_string_pretty(&geo)? + "\n")?;
            }
            println!("rendered {stem} into {}", out.display());
        }
        Command::Detect { common, svg, ppm, format, min_marker_px } => {
            let config = load_config(&common, None)?;
            let text = read(&svg)?;
            let canvas = svg_canvas(&text)?;
            let bitmap = match &ppm {
                Some(p) => {
                    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    Some(Bitmap::from_ppm(&bytes).map_err(|e| anyhow!("{}: {e}", p.display()))?)
                }
                None => None,
            };
            let format = format.unwrap_or(config.bbox_format);
            let min = min_box_px(min_marker_px.unwrap_or(config.min_marker_px), canvas);
            let d = detect_markers(&text, bitmap.as_ref())?;
            let fin = finalize_bbox(&d.bbox, canvas, min, min);
            let report = serde_json::json!({
                "source": d.source,
                "raw": d.bbox,
                "bbox": fin,
                "normalized": normalize(&fin, canvas, format).to_string(),
            });
            let body = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(out) = &common.out {
                let stem = svg.file_stem().and_then(|s| s.to_str()).unwrap_or("chart");
                write(out, &format!("{stem}.detect.json"), &body)?;
            }
            print!("{body}");
        }
        Command::Build { common, n } => {
            let config = load_config(&common, n)?;
            let out = out_dir(&common)?;
            if config.client.mode == ClientMode::Http {
                log::info!("using http client at {}", config.client.endpoint);
            }
            let manifest = run(&config, out, RunOptions { workers, halt: None })?;
            print_reports(&manifest);
        }
        Command::Stats { common, manifest } => {
            let path = if manifest.is_dir() { manifest.join(MANIFEST_FILE) } else { manifest };
            let m = DatasetManifest::load(&path).with_context(|| format!("loading {}", path.display()))?;
            print_reports(&m);
            if let Some(out) = &common.out {
                let body = serde_json::json!({ "stage_reports": m.stage_reports, "stats": m.stats });
                write(out, "stats.json", serde_json::to_string_pretty(&body)? + "\n")?;
            }
        }
        Command::Eval { common, gold, pred, margins, mode, group_by, strict_text } => {
            let margins = parse_margins(&margins).map_err(|e| anyhow!("--margins: {e}"))?;
            let gold: Vec<GoldEntry> = read_jsonl(&gold)?;
            let preds: Vec<Prediction> = read_jsonl(&pred)?;
            let options = EvalOptions { mode, group_by, lenient_text: !strict_text };
            let report = evaluate(&preds, &gold, &margins, options)?;
            let table = report.to_table();
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            write(&out, "eval_report.json", report.to_json() + "\n")?;
            write(&out, "eval_report.txt", &table)?;
            print!("{table}");
        }
        Command::Gallery { common, run } => {
            let out = out_dir(&common)?;
            let pages = gallery::write_gallery(&run, out)?;
            println!("wrote {pages} chart pages and index.html to {}", out.display());
        }
    }
    Ok(())
}

fn print_reports(m: &DatasetManifest) {
    println!("run {} ({} charts, complete: {})", m.run_id, m.charts.len(), m.complete);
    for r in &m.stage_reports {
        println!("  {:<7} {:>6}/{:<6} {:6.2}%", r.stage.as_str(), r.passed, r.attempted, r.success_rate * 100.0);
    }
    match &m.stats {
        Some(s) => {
            println!("  {} charts kept, {} records ({:.2} per chart)", s.charts, s.records, s.records_per_chart);
            let mix: Vec<String> =
                s.type_distribution.iter().map(|(t, p)| format!("{} {p:.1}%", t.as_str())).collect();
            println!("  types: {}", mix.join(", "));
            println!("  steps per chart, mode {}: {:?}", s.total_mode, s.total_histogram);
        }
        None => println!("  no charts passed every stage"),
    }
}
