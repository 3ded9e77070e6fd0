//! Deterministic chart layout, SVG output and rasterization.
//!
//! Layout is computed once per scene and shared by both back ends, so the
//! [`GeometryMap`] returned alongside each render is the exact pixel
//! footprint of every element. Text uses a bundled monospace metric table and
//! rasterizes as solid glyph blocks; the marker character and point markers
//! are painted in [`MARKER_RGB`], which no other drawing uses.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{Canvas, PixelBBox};
use crate::chart_spec::{ChartSpec, ChartType};
use crate::MARKER_CHAR;

pub type Rgb = [u8; 3];

pub const MARKER_RGB: Rgb = [255, 0, 255];
pub const OVERLAY_RGB: Rgb = [255, 0, 0];
pub const OVERLAY_STROKE: u32 = 3;
pub const BACKGROUND_RGB: Rgb = [255, 255, 255];
const TEXT_RGB: Rgb = [34, 34, 34];
const AXIS_RGB: Rgb = [68, 68, 68];

const PALETTE: [Rgb; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [23, 190, 207],
    [188, 189, 34],
];

/// Segments per pie wedge fan.
pub const WEDGE_SEGMENTS: usize = 64;
/// Marker cross glyph edge length in pixels.
pub const MARKER_GLYPH: i64 = 9;
const MIN_FONT: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("layout error: {0}")]
pub struct LayoutError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Title,
    LegendEntry,
    XTick,
    YTick,
    Datapoint,
    PlotArea,
}

/// Reference to one chart element. For `y_tick` the category holds the tick label text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementRef {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ElementRef {
    pub fn title() -> Self {
        Self { role: Role::Title, series: None, category: None }
    }

    pub fn plot_area() -> Self {
        Self { role: Role::PlotArea, series: None, category: None }
    }

    pub fn legend(series: impl Into<String>) -> Self {
        Self { role: Role::LegendEntry, series: Some(series.into()), category: None }
    }

    pub fn x_tick(category: impl Into<String>) -> Self {
        Self { role: Role::XTick, series: None, category: Some(category.into()) }
    }

    pub fn y_tick(label: impl Into<String>) -> Self {
        Self { role: Role::YTick, series: None, category: Some(label.into()) }
    }

    pub fn datapoint(series: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            role: Role::Datapoint,
            series: Some(series.into()),
            category: Some(category.into()),
        }
    }

    /// Checks the per-role field requirements.
    pub fn check(&self) -> Result<(), String> {
        let needs_series = matches!(self.role, Role::Datapoint | Role::LegendEntry);
        let needs_category = matches!(self.role, Role::Datapoint | Role::XTick | Role::YTick);
        if needs_series && self.series.is_none() {
            return Err(format!("{:?} target requires a series", self.role));
        }
        if needs_category && self.category.is_none() {
            return Err(format!("{:?} target requires a category", self.role));
        }
        Ok(())
    }
}

/// Exact pixel footprint of every visible element.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMap {
    pub canvas: Canvas,
    pub entries: BTreeMap<ElementRef, PixelBBox>,
}

impl GeometryMap {
    pub fn get(&self, r: &ElementRef) -> Option<&PixelBBox> {
        self.entries.get(r)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ElementRef, &PixelBBox)> {
        self.entries.iter()
    }
}

#[derive(Serialize)]
struct GeometryEntry<'a> {
    target: &'a ElementRef,
    bbox: &'a PixelBBox,
}

impl Serialize for GeometryMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            canvas: (u32, u32),
            entries: Vec<GeometryEntry<'a>>,
        }
        Repr {
            canvas: (self.canvas.width, self.canvas.height),
            entries: self.entries.iter().map(|(target, bbox)| GeometryEntry { target, bbox }).collect(),
        }
        .serialize(s)
    }
}

/// Point marker anchor in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerAnchor {
    pub x: f64,
    pub y: f64,
}

impl MarkerAnchor {
    /// The pixel the cross glyph is centered on.
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }

    /// The two arm rectangles of the cross glyph, in pixel-edge coordinates, unclipped.
    pub fn glyph_rects(&self) -> [[i64; 4]; 2] {
        let (cx, cy) = self.pixel();
        let half = MARKER_GLYPH / 2;
        [
            [cx - half, cy - 1, cx + half + 1, cy + 2],
            [cx - 1, cy - half, cx + 2, cy + half + 1],
        ]
    }
}

/// Everything drawn in one render: the chart plus optional decorations.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub spec: &'a ChartSpec,
    /// Tick label (by its vanilla text) that receives the marker suffix.
    pub y_tick_suffix: Option<&'a str>,
    pub markers: &'a [MarkerAnchor],
    pub overlays: &'a [PixelBBox],
}

impl<'a> Scene<'a> {
    pub fn plain(spec: &'a ChartSpec) -> Self {
        Self { spec, y_tick_suffix: None, markers: &[], overlays: &[] }
    }
}

/// Monospace metrics for one font size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FontMetrics {
    pub size: u32,
    pub advance: u32,
    pub ascent: u32,
}

impl FontMetrics {
    pub fn for_size(size: u32) -> Self {
        Self {
            size,
            advance: (size * 3 + 2) / 5,
            ascent: (size * 4 + 2) / 5,
        }
    }

    pub fn text_width(&self, text: &str) -> u32 {
        text.chars().count() as u32 * self.advance
    }

    /// Cell of the `index`-th glyph of a text whose box starts at (x, top).
    pub fn glyph_cell(&self, x: f64, top: f64, index: usize) -> PixelBBox {
        let adv = f64::from(self.advance);
        PixelBBox {
            x0: x + index as f64 * adv,
            y0: top,
            x1: x + (index + 1) as f64 * adv,
            y1: top + f64::from(self.size),
        }
    }

    /// Inked part of a glyph cell; symmetric inside the cell.
    fn glyph_ink(&self, cell: &PixelBBox) -> [i64; 4] {
        let hx = i64::from((self.advance / 8).max(1));
        let hy = i64::from(self.size / 6);
        [
            cell.x0 as i64 + hx,
            cell.y0 as i64 + hy,
            cell.x1 as i64 - hx,
            cell.y1 as i64 - hy,
        ]
    }
}

#[derive(Debug, Clone)]
enum Item {
    Rect { r: [i64; 4], color: Rgb },
    Line { a: (f64, f64), b: (f64, f64), width: f64, color: Rgb },
    Text { x: i64, top: i64, font: FontMetrics, text: String, color: Rgb },
    Fan { points: Vec<(f64, f64)>, color: Rgb },
}

/// Layout result shared by both back ends.
#[derive(Debug, Clone)]
pub struct Layout {
    pub geometry: GeometryMap,
    anchors: BTreeMap<(String, String), MarkerAnchor>,
    items: Vec<Item>,
    pub font_size: u32,
}

impl Layout {
    /// Marker anchor of a datapoint: bar top-center, line vertex, or pie wedge centroid.
    pub fn datapoint_anchor(&self, series: &str, category: &str) -> Option<MarkerAnchor> {
        self.anchors.get(&(series.to_string(), category.to_string())).copied()
    }
}

pub fn layout(spec: &ChartSpec) -> Result<GeometryMap, LayoutError> {
    Ok(layout_scene(&Scene::plain(spec))?.geometry)
}

/// Full layout, trying progressively smaller fonts until every element fits.
pub fn layout_scene(scene: &Scene<'_>) -> Result<Layout, LayoutError> {
    let (w, h) = scene.spec.canvas;
    let base = (w.min(h) / 40).clamp(MIN_FONT, 28);
    let mut last = LayoutError("no font size attempted".into());
    for fs in (MIN_FONT..=base).rev() {
        match layout_at(scene, fs) {
            Ok(l) => return Ok(l),
            Err(e) => last = e,
        }
    }
    Err(last)
}

struct Builder {
    canvas: Canvas,
    entries: BTreeMap<ElementRef, PixelBBox>,
    anchors: BTreeMap<(String, String), MarkerAnchor>,
    items: Vec<Item>,
}

impl Builder {
    fn entry(&mut self, r: ElementRef, b: [i64; 4]) -> Result<(), LayoutError> {
        let bb = PixelBBox {
            x0: b[0] as f64,
            y0: b[1] as f64,
            x1: b[2] as f64,
            y1: b[3] as f64,
        };
        if !bb.is_within(self.canvas) {
            return Err(LayoutError(format!("{:?} does not fit on the canvas", r.role)));
        }
        self.entries.insert(r, bb);
        Ok(())
    }

    fn text(&mut self, x: i64, top: i64, font: FontMetrics, text: &str) -> [i64; 4] {
        self.items.push(Item::Text {
            x,
            top,
            font,
            text: text.to_string(),
            color: TEXT_RGB,
        });
        [x, top, x + i64::from(font.text_width(text)), top + i64::from(font.size)]
    }
}

fn palette(spec: &ChartSpec, i: usize) -> Rgb {
    PALETTE[(spec.style_seed as usize + i) % PALETTE.len()]
}

fn layout_at(scene: &Scene<'_>, fs: u32) -> Result<Layout, LayoutError> {
    let spec = scene.spec;
    let canvas = spec.canvas();
    let (w, h) = (i64::from(canvas.width), i64::from(canvas.height));
    let pad = (w.min(h) / 60).max(4);
    let font = FontMetrics::for_size(fs);
    let title_font = FontMetrics::for_size(fs * 3 / 2);
    let mut b = Builder {
        canvas,
        entries: BTreeMap::new(),
        anchors: BTreeMap::new(),
        items: Vec::new(),
    };

    let tw = i64::from(title_font.text_width(&spec.title));
    if tw > w - 2 * pad {
        return Err(LayoutError("title wider than canvas".into()));
    }
    let title_box = b.text((w - tw) / 2, pad, title_font, &spec.title);
    b.entry(ElementRef::title(), title_box)?;

    let content_top = pad + i64::from(title_font.size) + pad;
    let content_bottom = h - pad;
    let mut right = w - pad;
    let row_h = i64::from(font.size + font.size / 2);
    let swatch = i64::from(font.ascent);

    // Keyed column on the right: series legend for bar/line, category key for pie.
    let keyed: Vec<(ElementRef, String, Rgb)> = match spec.chart_type {
        ChartType::Pie => spec
            .x_labels
            .iter()
            .enumerate()
            .map(|(i, c)| (ElementRef::x_tick(c.clone()), c.clone(), palette(spec, i)))
            .collect(),
        _ if spec.legend => spec
            .series
            .iter()
            .enumerate()
            .map(|(i, s)| (ElementRef::legend(s.name.clone()), s.name.clone(), palette(spec, i)))
            .collect(),
        _ => Vec::new(),
    };
    if !keyed.is_empty() {
        let entry_w = |t: &str| swatch + i64::from(font.advance) + i64::from(font.text_width(t));
        let col_w = keyed.iter().map(|(_, t, _)| entry_w(t)).max().unwrap_or(0);
        let x0 = right - col_w;
        if content_top + keyed.len() as i64 * row_h > content_bottom {
            return Err(LayoutError("legend taller than canvas".into()));
        }
        for (i, (r, t, color)) in keyed.iter().enumerate() {
            let top = content_top + i as i64 * row_h;
            let sy = top + (i64::from(font.size) - swatch) / 2;
            b.items.push(Item::Rect { r: [x0, sy, x0 + swatch, sy + swatch], color: *color });
            let tb = b.text(x0 + swatch + i64::from(font.advance), top, font, t);
            b.entry(r.clone(), [x0, top, tb[2], tb[3]])?;
        }
        right = x0 - 2 * pad;
    }

    match spec.chart_type {
        ChartType::Pie => layout_pie(&mut b, spec, [pad, content_top, right, content_bottom])?,
        ChartType::Bar | ChartType::Line => {
            layout_cartesian(&mut b, scene, font, pad, [content_top, content_bottom, right])?
        }
    }

    Ok(Layout {
        geometry: GeometryMap { canvas, entries: b.entries },
        anchors: b.anchors,
        items: b.items,
        font_size: fs,
    })
}

/// Tick values covering `[lo, hi]` with a 1/2/5 × 10^k step.
pub fn nice_ticks(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let range = if hi > lo { hi - lo } else { 1.0 };
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = mag
        * if norm <= 1.0 {
            1.0
        } else if norm <= 2.0 {
            2.0
        } else if norm <= 5.0 {
            5.0
        } else {
            10.0
        };
    let k0 = (lo / step).floor() as i64;
    let mut k1 = (hi / step).ceil() as i64;
    if k1 <= k0 {
        k1 = k0 + 1;
    }
    ((k0..=k1).map(|k| k as f64 * step).collect(), step)
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn layout_cartesian(
    b: &mut Builder,
    scene: &Scene<'_>,
    font: FontMetrics,
    pad: i64,
    [content_top, content_bottom, right]: [i64; 3],
) -> Result<(), LayoutError> {
    let spec = scene.spec;
    let fsz = i64::from(font.size);
    let adv = i64::from(font.advance);
    let all = spec.series.iter().flat_map(|s| s.values.iter().copied());
    let lo = all.clone().fold(0.0f64, f64::min);
    let hi = all.fold(0.0f64, f64::max);
    let (ticks, step) = nice_ticks(lo, hi);
    let labels: Vec<String> = ticks
        .iter()
        .map(|&t| {
            let l = tick_label(t, step);
            match scene.y_tick_suffix {
                Some(target) if target == l => format!("{l}{MARKER_CHAR}"),
                _ => l,
            }
        })
        .collect();
    let ylw = labels.iter().map(|l| i64::from(font.text_width(l))).max().unwrap_or(0);
    let tick_len = (fsz / 2).max(3);
    let plot_left = pad + ylw + tick_len + 2;
    let plot_top = content_top + fsz / 2 + 1;
    let xlabel_gap = (fsz + 1) / 2 + 1;
    let plot_bottom = content_bottom - fsz - xlabel_gap;
    let plot_w = right - plot_left;
    let plot_h = plot_bottom - plot_top;
    let n_cat = spec.x_labels.len();
    if plot_w < 2 * n_cat as i64 || plot_h < 3 * fsz {
        return Err(LayoutError("plot area too small".into()));
    }
    let (tmin, tmax) = (ticks[0], ticks[ticks.len() - 1]);
    let spacing = plot_h as f64 / (ticks.len() - 1) as f64;
    if spacing < (fsz + 2) as f64 {
        return Err(LayoutError("y tick labels overlap".into()));
    }
    let y_of = |v: f64| plot_bottom as f64 - (v - tmin) / (tmax - tmin) * plot_h as f64;

    b.entry(ElementRef::plot_area(), [plot_left, plot_top, right, plot_bottom + 1])?;
    b.items.push(Item::Line {
        a: (plot_left as f64 + 0.5, plot_top as f64),
        b: (plot_left as f64 + 0.5, plot_bottom as f64 + 1.0),
        width: 1.0,
        color: AXIS_RGB,
    });
    let y0px = y_of(0.0).round();
    b.items.push(Item::Line {
        a: (plot_left as f64, y0px + 0.5),
        b: (right as f64, y0px + 0.5),
        width: 1.0,
        color: AXIS_RGB,
    });

    for (t, label) in ticks.iter().zip(&labels) {
        let yc = y_of(*t).round() as i64;
        b.items.push(Item::Line {
            a: ((plot_left - tick_len) as f64, yc as f64 + 0.5),
            b: (plot_left as f64, yc as f64 + 0.5),
            width: 1.0,
            color: AXIS_RGB,
        });
        let lw = i64::from(font.text_width(label));
        let tb = b.text(plot_left - tick_len - 2 - lw, yc - fsz / 2, font, label);
        b.entry(ElementRef::y_tick(label.clone()), tb)?;
    }

    let slot = plot_w as f64 / n_cat as f64;
    let xtop = plot_bottom + xlabel_gap;
    let mut prev_right: Option<i64> = None;
    for (i, c) in spec.x_labels.iter().enumerate() {
        let center = plot_left as f64 + (i as f64 + 0.5) * slot;
        let lw = i64::from(font.text_width(c));
        let x0 = (center - lw as f64 / 2.0).round() as i64;
        if let Some(pr) = prev_right {
            if x0 < pr + adv / 2 {
                return Err(LayoutError("x tick labels overlap".into()));
            }
        }
        if x0 < 0 || x0 + lw > b.canvas.width as i64 {
            return Err(LayoutError("x tick label off canvas".into()));
        }
        prev_right = Some(x0 + lw);
        let tb = b.text(x0, xtop, font, c);
        b.entry(ElementRef::x_tick(c.clone()), tb)?;
    }

    let n_s = spec.series.len();
    match spec.chart_type {
        ChartType::Bar => {
            let bw = slot * 0.8 / n_s as f64;
            if bw < 2.0 {
                return Err(LayoutError("bars narrower than 2 px".into()));
            }
            let base = y_of(0.0);
            for (si, s) in spec.series.iter().enumerate() {
                let color = palette(spec, si);
                for (ci, (&v, c)) in s.values.iter().zip(&spec.x_labels).enumerate() {
                    let left = plot_left as f64 + ci as f64 * slot + 0.1 * slot;
                    let x0 = (left + si as f64 * bw).round() as i64;
                    let x1 = (left + (si + 1) as f64 * bw).round() as i64;
                    let yv = y_of(v);
                    let mut y0 = yv.min(base).round() as i64;
                    let mut y1 = yv.max(base).round() as i64;
                    if y1 == y0 {
                        if v < 0.0 {
                            y1 += 1;
                        } else {
                            y0 -= 1;
                        }
                    }
                    b.items.push(Item::Rect { r: [x0, y0, x1, y1], color });
                    b.entry(ElementRef::datapoint(s.name.clone(), c.clone()), [x0, y0, x1, y1])?;
                    let ay = if v < 0.0 { (y1 - 1) as f64 } else { y0 as f64 };
                    b.anchors.insert(
                        (s.name.clone(), c.clone()),
                        MarkerAnchor { x: (x0 + x1) as f64 / 2.0, y: ay },
                    );
                }
            }
        }
        ChartType::Line => {
            let r = (fsz / 4).max(3);
            for (si, s) in spec.series.iter().enumerate() {
                let color = palette(spec, si);
                let verts: Vec<(i64, i64)> = s
                    .values
                    .iter()
                    .enumerate()
                    .map(|(ci, &v)| {
                        let cx = plot_left as f64 + (ci as f64 + 0.5) * slot;
                        (cx.round() as i64, y_of(v).round() as i64)
                    })
                    .collect();
                for pair in verts.windows(2) {
                    b.items.push(Item::Line {
                        a: (pair[0].0 as f64 + 0.5, pair[0].1 as f64 + 0.5),
                        b: (pair[1].0 as f64 + 0.5, pair[1].1 as f64 + 0.5),
                        width: 2.0,
                        color,
                    });
                }
                for (&(vx, vy), c) in verts.iter().zip(&spec.x_labels) {
                    let rect = [vx - r, vy - r, vx + r + 1, vy + r + 1];
                    b.items.push(Item::Rect { r: rect, color });
                    let clipped = [
                        rect[0].max(0),
                        rect[1].max(0),
                        rect[2].min(b.canvas.width as i64),
                        rect[3].min(b.canvas.height as i64),
                    ];
                    b.entry(ElementRef::datapoint(s.name.clone(), c.clone()), clipped)?;
                    b.anchors
                        .insert((s.name.clone(), c.clone()), MarkerAnchor { x: vx as f64, y: vy as f64 });
                }
            }
        }
        ChartType::Pie => unreachable!("pie handled separately"),
    }
    Ok(())
}

fn layout_pie(b: &mut Builder, spec: &ChartSpec, region: [i64; 4]) -> Result<(), LayoutError> {
    let [x0, y0, x1, y1] = region;
    let r = ((x1 - x0).min(y1 - y0) / 2 - 2) as f64;
    if r < 20.0 {
        return Err(LayoutError("pie radius below 20 px".into()));
    }
    let cx = ((x0 + x1) / 2) as f64;
    let cy = ((y0 + y1) / 2) as f64;
    b.entry(
        ElementRef::plot_area(),
        [(cx - r).floor() as i64, (cy - r).floor() as i64, (cx + r).ceil() as i64, (cy + r).ceil() as i64],
    )?;
    let s = &spec.series[0];
    let total: f64 = s.values.iter().sum();
    let mut start = -PI / 2.0;
    for (i, (&v, c)) in s.values.iter().zip(&spec.x_labels).enumerate() {
        let theta = 2.0 * PI * v / total;
        let mut points = Vec::with_capacity(WEDGE_SEGMENTS + 2);
        points.push((cx, cy));
        for k in 0..=WEDGE_SEGMENTS {
            let a = start + theta * k as f64 / WEDGE_SEGMENTS as f64;
            points.push((cx + r * a.cos(), cy + r * a.sin()));
        }
        let bx0 = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor() as i64;
        let by0 = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor() as i64;
        let bx1 = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
        let by1 = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
        b.entry(
            ElementRef::datapoint(s.name.clone(), c.clone()),
            [bx0, by0, bx1.max(bx0 + 1), by1.max(by0 + 1)],
        )?;
        let mid = start + theta / 2.0;
        let dist = if theta >= 2.0 * PI - 1e-12 {
            0.0
        } else {
            4.0 * r * (theta / 2.0).sin() / (3.0 * theta)
        };
        b.anchors.insert(
            (s.name.clone(), c.clone()),
            MarkerAnchor { x: cx + dist * mid.cos(), y: cy + dist * mid.sin() },
        );
        b.items.push(Item::Fan { points, color: palette(spec, i) });
        start += theta;
    }
    Ok(())
}

/// RGB raster image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    pub width: u32,
    pub height: u32,
    data: Vec<u8>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&fill);
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Fill a pixel-edge rectangle, clipped to the image.
    pub fn fill_rect(&mut self, [x0, y0, x1, y1]: [i64; 4], c: Rgb) {
        let x0 = x0.clamp(0, self.width as i64) as u32;
        let x1 = x1.clamp(0, self.width as i64) as u32;
        let y0 = y0.clamp(0, self.height as i64) as u32;
        let y1 = y1.clamp(0, self.height as i64) as u32;
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, c);
            }
        }
    }

    fn clip_range(&self, lo: f64, hi: f64, limit: u32) -> (u32, u32) {
        let a = lo.floor().max(0.0) as u32;
        let b = (hi.ceil().max(0.0) as u32).min(limit);
        (a.min(limit), b)
    }

    fn fill_triangle(&mut self, p: (f64, f64), q: (f64, f64), r: (f64, f64), c: Rgb) {
        let (xa, xb) = self.clip_range(p.0.min(q.0).min(r.0), p.0.max(q.0).max(r.0), self.width);
        let (ya, yb) = self.clip_range(p.1.min(q.1).min(r.1), p.1.max(q.1).max(r.1), self.height);
        let edge = |a: (f64, f64), b: (f64, f64), x: f64, y: f64| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        let area = edge(p, q, r.0, r.1);
        if area == 0.0 {
            return;
        }
        for y in ya..yb {
            let py = f64::from(y) + 0.5;
            for x in xa..xb {
                let px = f64::from(x) + 0.5;
                let w0 = edge(q, r, px, py) * area.signum();
                let w1 = edge(r, p, px, py) * area.signum();
                let w2 = edge(p, q, px, py) * area.signum();
                if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                    self.set(x, y, c);
                }
            }
        }
    }

    fn draw_line(&mut self, a: (f64, f64), b: (f64, f64), width: f64, c: Rgb) {
        let half = width / 2.0;
        let (xa, xb) = self.clip_range(a.0.min(b.0) - half, a.0.max(b.0) + half, self.width);
        let (ya, yb) = self.clip_range(a.1.min(b.1) - half, a.1.max(b.1) + half, self.height);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in ya..yb {
            let py = f64::from(y) + 0.5;
            for x in xa..xb {
                let px = f64::from(x) + 0.5;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if qx * qx + qy * qy <= half * half {
                    self.set(x, y, c);
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?.to_string());
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err("only binary 8-bit PPM (P6) is supported".into());
        }
        let width: u32 = fields[1].parse().map_err(|_| "bad PPM width")?;
        let height: u32 = fields[2].parse().map_err(|_| "bad PPM height")?;
        let data = bytes.get(pos + 1..).ok_or("missing PPM raster")?;
        let need = width as usize * height as usize * 3;
        if data.len() != need {
            return Err(format!("PPM raster has {} bytes, expected {need}", data.len()));
        }
        Ok(Self { width, height, data: data.to_vec() })
    }
}

pub fn render_svg(spec: &ChartSpec, overlays: &[PixelBBox]) -> Result<(String, GeometryMap), LayoutError> {
    render_scene_svg(&Scene { overlays, ..Scene::plain(spec) })
}

pub fn rasterize(spec: &ChartSpec, markers: &[MarkerAnchor]) -> Result<(Bitmap, GeometryMap), LayoutError> {
    rasterize_scene(&Scene { markers, ..Scene::plain(spec) })
}

fn check_overlays(scene: &Scene<'_>) -> Result<(), LayoutError> {
    let canvas = scene.spec.canvas();
    if let Some(o) = scene.overlays.iter().find(|o| !o.is_within(canvas)) {
        return Err(LayoutError(format!("overlay box {o:?} outside canvas")));
    }
    Ok(())
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(text: &str) -> String {
    text.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
}

pub fn render_scene_svg(scene: &Scene<'_>) -> Result<(String, GeometryMap), LayoutError> {
    check_overlays(scene)?;
    let layout = layout_scene(scene)?;
    let Canvas { width, height } = layout.geometry.canvas;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="{}"/>"#, hex(BACKGROUND_RGB));
    svg.push_str("<g id=\"chart\">\n");
    for item in &layout.items {
        match item {
            Item::Rect { r, color } => {
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                    r[0],
                    r[1],
                    r[2] - r[0],
                    r[3] - r[1],
                    hex(*color)
                );
            }
            Item::Line { a, b, width, color } => {
                let _ = writeln!(
                    svg,
                    r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="{}"/>"#,
                    num(a.0),
                    num(a.1),
                    num(b.0),
                    num(b.1),
                    hex(*color),
                    num(*width)
                );
            }
            Item::Text { x, top, font, text, color } => {
                let _ = writeln!(
                    svg,
                    r#"<text x="{x}" y="{}" font-family="monospace" font-size="{}" fill="{}">{}</text>"#,
                    top + i64::from(font.ascent),
                    font.size,
                    hex(*color),
                    escape(text)
                );
            }
            Item::Fan { points, color } => {
                let mut d = format!("M{} {}", num(points[0].0), num(points[0].1));
                for p in &points[1..] {
                    let _ = write!(d, " L{} {}", num(p.0), num(p.1));
                }
                d.push_str(" Z");
                let _ = writeln!(svg, r#"<path d="{d}" fill="{}"/>"#, hex(*color));
            }
        }
    }
    svg.push_str("</g>\n<g id=\"markers\">\n");
    for m in scene.markers {
        for r in m.glyph_rects() {
            let r = [
                r[0].max(0),
                r[1].max(0),
                r[2].min(i64::from(width)),
                r[3].min(i64::from(height)),
            ];
            if r[0] < r[2] && r[1] < r[3] {
                let _ = writeln!(
                    svg,
                    r#"<rect class="marker" x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                    r[0],
                    r[1],
                    r[2] - r[0],
                    r[3] - r[1],
                    hex(MARKER_RGB)
                );
            }
        }
    }
    svg.push_str("</g>\n<g id=\"overlays\">\n");
    for o in scene.overlays {
        let _ = writeln!(
            svg,
            r#"<rect class="overlay" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="{OVERLAY_STROKE}"/>"#,
            num(o.x0),
            num(o.y0),
            num(o.width()),
            num(o.height()),
            hex(OVERLAY_RGB)
        );
    }
    svg.push_str("</g>\n</svg>\n");
    Ok((svg, layout.geometry))
}

pub fn rasterize_scene(scene: &Scene<'_>) -> Result<(Bitmap, GeometryMap), LayoutError> {
    check_overlays(scene)?;
    let layout = layout_scene(scene)?;
    let Canvas { width, height } = layout.geometry.canvas;
    let mut bmp = Bitmap::new(width, height, BACKGROUND_RGB);
    for item in &layout.items {
        match item {
            Item::Rect { r, color } => bmp.fill_rect(*r, *color),
            Item::Line { a, b, width, color } => bmp.draw_line(*a, *b, *width, *color),
            Item::Text { x, top, font, text, color } => {
                for (i, ch) in text.chars().enumerate() {
                    if ch.is_whitespace() {
                        continue;
                    }
                    let cell = font.glyph_cell(*x as f64, *top as f64, i);
                    let c = if ch == MARKER_CHAR { MARKER_RGB } else { *color };
                    bmp.fill_rect(font.glyph_ink(&cell), c);
                }
            }
            Item::Fan { points, color } => {
                let center = points[0];
                for pair in points[1..].windows(2) {
                    bmp.fill_triangle(center, pair[0], pair[1], *color);
                }
            }
        }
    }
    for m in scene.markers {
        for r in m.glyph_rects() {
            bmp.fill_rect(r, MARKER_RGB);
        }
    }
    let s = i64::from(OVERLAY_STROKE);
    for o in scene.overlays {
        let [x0, y0, x1, y1] = [o.x0.round() as i64, o.y0.round() as i64, o.x1.round() as i64, o.y1.round() as i64];
        let half = s / 2;
        bmp.fill_rect([x0 - half, y0 - half, x1 + half + 1, y0 + half + 1], OVERLAY_RGB);
        bmp.fill_rect([x0 - half, y1 - half, x1 + half + 1, y1 + half + 1], OVERLAY_RGB);
        bmp.fill_rect([x0 - half, y0 - half, x0 + half + 1, y1 + half + 1], OVERLAY_RGB);
        bmp.fill_rect([x1 - half, y0 - half, x1 + half + 1, y1 + half + 1], OVERLAY_RGB);
    }
    Ok((bmp, layout.geometry))
}
