//! Marker insertion, verification and detection.
//!
//! One grounding step at a time, a single `@` is placed on the step's target:
//! appended to the target's text, or drawn as a cross glyph on a datapoint.
//! Detection recovers its pixel box from the rendered SVG, falling back to a
//! connected-component scan of the raster.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bbox::{Canvas, PixelBBox};
use crate::chart_spec::{ChartSpec, SpecError};
use crate::cot::{Step, StepKind};
use crate::renderer::{
    self, Bitmap, ElementRef, FontMetrics, GeometryMap, LayoutError, MarkerAnchor, Role, Scene, MARKER_RGB,
};
use crate::MARKER_CHAR;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkerError {
    #[error("target error: {0}")]
    Target(String),
    #[error("marker collision: {0}")]
    Collision(String),
    #[error("marker verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectError {
    #[error("no marker found")]
    NotFound,
    #[error("{0} marker candidates found")]
    Ambiguous(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerMode {
    TextSuffix,
    PointAnchor,
}

/// A chart spec carrying exactly one marker (when valid).
#[derive(Debug, Clone, PartialEq)]
pub struct EditedSpec {
    pub spec: ChartSpec,
    pub markers: Vec<MarkerAnchor>,
    /// Vanilla y tick label that gets the marker appended when drawn.
    pub y_tick_suffix: Option<String>,
}

impl EditedSpec {
    pub fn plain(spec: ChartSpec) -> Self {
        Self { spec, markers: Vec::new(), y_tick_suffix: None }
    }

    pub fn scene(&self) -> Scene<'_> {
        Scene {
            spec: &self.spec,
            y_tick_suffix: self.y_tick_suffix.as_deref(),
            markers: &self.markers,
            overlays: &[],
        }
    }

    pub fn render_svg(&self) -> Result<(String, GeometryMap), LayoutError> {
        renderer::render_scene_svg(&self.scene())
    }

    pub fn rasterize(&self) -> Result<(Bitmap, GeometryMap), LayoutError> {
        renderer::rasterize_scene(&self.scene())
    }

    /// The chart spec JSON object plus optional `markers` and `y_tick_suffix` keys.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(&self.spec).expect("chart spec serializes");
        let obj = v.as_object_mut().expect("spec is an object");
        if !self.markers.is_empty() {
            obj.insert("markers".into(), serde_json::to_value(&self.markers).expect("markers serialize"));
        }
        if let Some(l) = &self.y_tick_suffix {
            obj.insert("y_tick_suffix".into(), Value::String(l.clone()));
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| SpecError::Syntax(e.to_string()))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| SpecError::Syntax("edited spec is not an object".into()))?;
        let markers = match obj.remove("markers") {
            Some(m) => serde_json::from_value(m).map_err(|e| SpecError::Syntax(e.to_string()))?,
            None => Vec::new(),
        };
        let y_tick_suffix = match obj.remove("y_tick_suffix") {
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(SpecError::Syntax("y_tick_suffix must be a string".into())),
            None => None,
        };
        let spec: ChartSpec = serde_json::from_value(v).map_err(|e| SpecError::Syntax(e.to_string()))?;
        spec.validate()?;
        Ok(Self { spec, markers, y_tick_suffix })
    }
}

/// Marker insertion for one grounding step.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerEdit {
    pub step_index: usize,
    pub target: ElementRef,
    pub mode: MarkerMode,
    pub edited: EditedSpec,
}

impl MarkerEdit {
    /// The target's key in the edited chart's geometry map.
    pub fn edited_target(&self) -> ElementRef {
        let suffix = |s: &Option<String>| s.as_ref().map(|s| format!("{s}{MARKER_CHAR}"));
        let t = &self.target;
        match (self.mode, t.role) {
            (MarkerMode::TextSuffix, Role::LegendEntry) => ElementRef { series: suffix(&t.series), ..t.clone() },
            (MarkerMode::TextSuffix, Role::XTick | Role::YTick) => {
                ElementRef { category: suffix(&t.category), ..t.clone() }
            }
            _ => t.clone(),
        }
    }
}

/// Insert the marker for `step` into a copy of `spec`.
pub fn apply_marker(spec: &ChartSpec, step: &Step) -> Result<MarkerEdit, MarkerError> {
    if step.kind != StepKind::Grounding {
        return Err(MarkerError::Target(format!("step {} is not a grounding step", step.index)));
    }
    let target = step
        .target
        .clone()
        .ok_or_else(|| MarkerError::Target(format!("step {} has no target", step.index)))?;
    if let Some(t) = spec.texts().find(|t| t.contains(MARKER_CHAR)) {
        return Err(MarkerError::Collision(format!("chart text {t:?} already contains {MARKER_CHAR:?}")));
    }
    let layout = renderer::layout_scene(&Scene::plain(spec))?;
    if layout.geometry.get(&target).is_none() {
        return Err(MarkerError::Target(format!("{target:?} is not drawn in chart {}", spec.id)));
    }
    let mut edited = EditedSpec::plain(spec.clone());
    let append = |s: &mut String| s.push(MARKER_CHAR);
    let mode = match target.role {
        Role::Title => {
            append(&mut edited.spec.title);
            MarkerMode::TextSuffix
        }
        Role::LegendEntry => {
            let name = target.series.as_deref().unwrap_or_default();
            let s = edited.spec.series.iter_mut().find(|s| s.name == name).expect("drawn series exists");
            append(&mut s.name);
            MarkerMode::TextSuffix
        }
        Role::XTick => {
            let cat = target.category.as_deref().unwrap_or_default();
            let c = edited.spec.x_labels.iter_mut().find(|c| *c == cat).expect("drawn category exists");
            append(c);
            MarkerMode::TextSuffix
        }
        Role::YTick => {
            edited.y_tick_suffix = target.category.clone();
            MarkerMode::TextSuffix
        }
        Role::Datapoint => {
            let (s, c) = (target.series.as_deref().unwrap_or_default(), target.category.as_deref().unwrap_or_default());
            let anchor = layout
                .datapoint_anchor(s, c)
                .ok_or_else(|| MarkerError::Target(format!("no anchor for {target:?}")))?;
            edited.markers.push(anchor);
            MarkerMode::PointAnchor
        }
        Role::PlotArea => return Err(MarkerError::Target("plot_area cannot carry a marker".into())),
    };
    Ok(MarkerEdit { step_index: step.index, target, mode, edited })
}

/// Checks that the edited chart carries exactly one marker and still lays out.
pub fn verify_marker(edited: &EditedSpec) -> Result<(), MarkerError> {
    let chars: usize = edited.spec.texts().map(|t| t.matches(MARKER_CHAR).count()).sum();
    let total = chars + usize::from(edited.y_tick_suffix.is_some()) + edited.markers.len();
    if total != 1 {
        return Err(MarkerError::Verify(format!("expected exactly one marker, found {total}")));
    }
    edited.spec.validate()?;
    renderer::layout_scene(&edited.scene())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectSource {
    Structural,
    Raster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: PixelBBox,
    pub source: DetectSource,
}

fn text_node_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"<text x="(-?\d+)" y="(-?\d+)" font-family="monospace" font-size="(\d+)"[^>]*>([^<]*)</text>"#)
            .expect("static regex")
    })
}

fn marker_rect_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"<rect class="marker" x="(-?\d+)" y="(-?\d+)" width="(\d+)" height="(\d+)""#).expect("static regex")
    })
}

/// Groups boxes that touch or overlap; returns one union per group.
fn merge_touching(mut boxes: Vec<PixelBBox>) -> Vec<PixelBBox> {
    let touches = |a: &PixelBBox, b: &PixelBBox| a.x0 <= b.x1 && b.x0 <= a.x1 && a.y0 <= b.y1 && b.y0 <= a.y1;
    let mut merged = true;
    while merged {
        merged = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if touches(&boxes[i], &boxes[j]) {
                    let b = boxes.swap_remove(j);
                    boxes[i] = boxes[i].union(&b);
                    merged = true;
                    break 'outer;
                }
            }
        }
    }
    boxes
}

/// Marker candidates found in the SVG source.
pub fn structural_candidates(svg: &str) -> Vec<PixelBBox> {
    let mut hits = Vec::new();
    for cap in text_node_re().captures_iter(svg) {
        let x: f64 = cap[1].parse().unwrap_or(0.0);
        let baseline: f64 = cap[2].parse().unwrap_or(0.0);
        let font = FontMetrics::for_size(cap[3].parse().unwrap_or(0));
        let text = renderer::unescape(&cap[4]);
        let top = baseline - f64::from(font.ascent);
        for (i, ch) in text.chars().enumerate() {
            if ch == MARKER_CHAR {
                hits.push(font.glyph_cell(x, top, i));
            }
        }
    }
    let rects = marker_rect_re()
        .captures_iter(svg)
        .map(|c| {
            let v: Vec<f64> = (1..=4).map(|i| c[i].parse().unwrap_or(0.0)).collect();
            PixelBBox { x0: v[0], y0: v[1], x1: v[0] + v[2], y1: v[1] + v[3] }
        })
        .collect();
    hits.extend(merge_touching(rects));
    hits
}

/// 8-connected components of marker-colored pixels, as pixel-edge boxes.
pub fn raster_candidates(bitmap: &Bitmap) -> Vec<PixelBBox> {
    let (w, h) = (bitmap.width as usize, bitmap.height as usize);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || bitmap.get((start % w) as u32, (start / w) as u32) != MARKER_RGB {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if !seen[q] && bitmap.get(nx as u32, ny as u32) == MARKER_RGB {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(PixelBBox { x0: x0 as f64, y0: y0 as f64, x1: (x1 + 1) as f64, y1: (y1 + 1) as f64 });
    }
    out
}

/// Locate the single marker: structural pass first, raster pass as fallback.
pub fn detect_markers(svg: &str, bitmap: Option<&Bitmap>) -> Result<Detection, DetectError> {
    let structural = structural_candidates(svg);
    if let [bbox] = structural[..] {
        return Ok(Detection { bbox, source: DetectSource::Structural });
    }
    let Some(bitmap) = bitmap else {
        return Err(match structural.len() {
            0 => DetectError::NotFound,
            n => DetectError::Ambiguous(n),
        });
    };
    match raster_candidates(bitmap)[..] {
        [] => Err(DetectError::NotFound),
        [bbox] => Ok(Detection { bbox, source: DetectSource::Raster }),
        ref many => Err(DetectError::Ambiguous(many.len())),
    }
}

/// Minimum final box edge: `min_marker_px` per 1000 px of canvas width.
pub fn min_box_px(min_marker_px: f64, canvas: Canvas) -> f64 {
    min_marker_px * f64::from(canvas.width) / 1000.0
}

/// Grow `raw` about its center to at least `min_w` x `min_h`, then shift it
/// inside the canvas. Only a box larger than the canvas gets clipped.
pub fn finalize_bbox(raw: &PixelBBox, canvas: Canvas, min_w: f64, min_h: f64) -> PixelBBox {
    fn axis(lo: f64, hi: f64, min: f64, limit: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (lo, hi);
        if hi - lo < min {
            let c = (lo + hi) / 2.0;
            lo = c - min / 2.0;
            hi = c + min / 2.0;
        }
        if lo < 0.0 {
            hi -= lo;
            lo = 0.0;
        }
        if hi > limit {
            lo -= hi - limit;
            hi = limit;
        }
        (lo.max(0.0), hi)
    }
    let (x0, x1) = axis(raw.x0, raw.x1, min_w, f64::from(canvas.width));
    let (y0, y1) = axis(raw.y0, raw.y1, min_h, f64::from(canvas.height));
    PixelBBox { x0, y0, x1, y1 }
}
