//! Pixel boxes and their normalized text encodings.
//!
//! Three normalized formats are supported:
//!
//! * `A`: fractions of the canvas size with four decimals (`0.1234`)
//! * `B`: fractions with three decimals (`0.123`)
//! * `C`: integers in `0..=999` (`123`), the dataset default
//!
//! A normalized box stores its coordinates as integer quanta of the format
//! (1e-4, 1e-3 or 1/999 of the size), so text round-trips are exact.

use std::fmt;
use std::str::FromStr;

use patterns::bbox_regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BBoxError {
    #[error("invalid pixel box ({x0}, {y0}, {x1}, {y1}): {reason}")]
    InvalidPixel {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        reason: &'static str,
    },
    #[error("cannot parse bbox text {0:?}")]
    Parse(String),
    #[error("coordinate {value} out of range for format {format}")]
    Range { value: u32, format: NormFormat },
}

/// Canvas dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn full(&self) -> PixelBBox {
        PixelBBox {
            x0: 0.0,
            y0: 0.0,
            x1: f64::from(self.width),
            y1: f64::from(self.height),
        }
    }
}

/// Axis-aligned box in pixel space, origin top-left, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, BBoxError> {
        let b = Self { x0, y0, x1, y1 };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(b.invalid("non-finite coordinate"));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(b.invalid("empty or inverted extent"));
        }
        Ok(b)
    }

    /// Checked constructor that additionally requires the box to sit inside `canvas`.
    pub fn within(x0: f64, y0: f64, x1: f64, y1: f64, canvas: Canvas) -> Result<Self, BBoxError> {
        let b = Self::new(x0, y0, x1, y1)?;
        if !b.is_within(canvas) {
            return Err(b.invalid("outside canvas"));
        }
        Ok(b)
    }

    fn invalid(&self, reason: &'static str) -> BBoxError {
        BBoxError::InvalidPixel {
            x0: self.x0,
            y0: self.y0,
            x1: self.x1,
            y1: self.y1,
            reason,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn is_within(&self, canvas: Canvas) -> bool {
        self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= f64::from(canvas.width)
            && self.y1 <= f64::from(canvas.height)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    /// Closed-interval containment, so points on the border count.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersects(&self, other: &PixelBBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn union(&self, other: &PixelBBox) -> PixelBBox {
        PixelBBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Euclidean distance from a point to the box (zero inside).
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x0 - x).max(0.0).max(x - self.x1);
        let dy = (self.y0 - y).max(0.0).max(y - self.y1);
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NormFormat {
    A,
    B,
    C,
}

impl NormFormat {
    /// Number of quanta spanning the full canvas edge.
    pub fn scale(self) -> u32 {
        match self {
            NormFormat::A => 10_000,
            NormFormat::B => 1_000,
            NormFormat::C => 999,
        }
    }

    fn decimals(self) -> usize {
        match self {
            NormFormat::A => 4,
            NormFormat::B => 3,
            NormFormat::C => 0,
        }
    }

    /// Worst-case absolute error in pixels of `denormalize(normalize(p))` on an edge of `size` px.
    pub fn quantization_bound(self, size: u32) -> f64 {
        f64::from(size) / f64::from(self.scale()) / 2.0
    }
}

impl fmt::Display for NormFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NormFormat::A => "A",
            NormFormat::B => "B",
            NormFormat::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for NormFormat {
    type Err = BBoxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(NormFormat::A),
            "B" | "b" => Ok(NormFormat::B),
            "C" | "c" => Ok(NormFormat::C),
            other => Err(BBoxError::Parse(other.to_string())),
        }
    }
}

/// Normalized box. `units` are integer quanta of `format` in `x0, y0, x1, y1` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormBBox {
    format: NormFormat,
    units: [u32; 4],
}

impl NormBBox {
    pub fn from_units(format: NormFormat, units: [u32; 4]) -> Result<Self, BBoxError> {
        if let Some(&value) = units.iter().find(|&&u| u > format.scale()) {
            return Err(BBoxError::Range { value, format });
        }
        Ok(Self { format, units })
    }

    pub fn format(&self) -> NormFormat {
        self.format
    }

    pub fn units(&self) -> [u32; 4] {
        self.units
    }

    /// Coordinates as numbers in the format's own range (fractions for A/B, integers for C).
    pub fn coords(&self) -> [f64; 4] {
        let div = match self.format {
            NormFormat::C => 1.0,
            f => f64::from(f.scale()),
        };
        self.units.map(|u| f64::from(u) / div)
    }

    pub fn serialize(&self) -> String {
        self.to_string()
    }

    /// Strict inverse of [`NormBBox::serialize`] for the given format.
    pub fn parse(text: &str, format: NormFormat) -> Result<Self, BBoxError> {
        let caps = bbox_regex()
            .captures(text.trim())
            .ok_or_else(|| BBoxError::Parse(text.to_string()))?;
        let mut units = [0u32; 4];
        for (i, slot) in units.iter_mut().enumerate() {
            *slot = parse_coord(&caps[i + 1], format).ok_or_else(|| BBoxError::Parse(text.to_string()))?;
        }
        Self::from_units(format, units)
    }
}

fn parse_coord(tok: &str, format: NormFormat) -> Option<u32> {
    match format {
        NormFormat::C => {
            if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            if tok.len() > 1 && tok.starts_with('0') {
                return None;
            }
            tok.parse().ok()
        }
        NormFormat::A | NormFormat::B => {
            let (int, frac) = tok.split_once('.')?;
            if !(int == "0" || int == "1") || frac.len() != format.decimals() {
                return None;
            }
            if !frac.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            let whole: u32 = int.parse().ok()?;
            let part: u32 = frac.parse().ok()?;
            Some(whole * format.scale() + part)
        }
    }
}

impl fmt::Display for NormBBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x0, y0, x1, y1] = self.units.map(|u| fmt_unit(u, self.format));
        write!(f, "({x0},{y0}),({x1},{y1})")
    }
}

fn fmt_unit(u: u32, format: NormFormat) -> String {
    match format {
        NormFormat::C => u.to_string(),
        f => {
            let scale = f.scale();
            format!("{}.{:0width$}", u / scale, u % scale, width = f.decimals())
        }
    }
}

/// Half-away-from-zero rounding of `pixel * scale / size`, clamped to the format range.
fn quantize(pixel: f64, size: u32, format: NormFormat) -> u32 {
    let scale = f64::from(format.scale());
    let size = f64::from(size);
    let q = (pixel * scale / size).round();
    q.clamp(0.0, scale) as u32
}

pub fn normalize(p: &PixelBBox, canvas: Canvas, format: NormFormat) -> NormBBox {
    debug_assert!(p.is_within(canvas), "normalize precondition: {p:?} in {canvas:?}");
    NormBBox {
        format,
        units: [
            quantize(p.x0, canvas.width, format),
            quantize(p.y0, canvas.height, format),
            quantize(p.x1, canvas.width, format),
            quantize(p.y1, canvas.height, format),
        ],
    }
}

/// Inverse mapping back to (unrounded) pixels.
///
/// The result can be degenerate when the normalized box collapsed to a
/// single quantum, so this returns the raw coordinates rather than a checked
/// [`PixelBBox`].
pub fn denormalize(n: &NormBBox, canvas: Canvas) -> [f64; 4] {
    let scale = f64::from(n.format.scale());
    let w = f64::from(canvas.width);
    let h = f64::from(canvas.height);
    let [x0, y0, x1, y1] = n.units.map(f64::from);
    [x0 * w / scale, y0 * h / scale, x1 * w / scale, y1 * h / scale]
}

/// Like [`denormalize`] but returns a box, widening collapsed extents by one pixel.
pub fn denormalize_box(n: &NormBBox, canvas: Canvas) -> PixelBBox {
    let [mut x0, mut y0, mut x1, mut y1] = denormalize(n, canvas);
    if x1 <= x0 {
        x1 = (x0 + 1.0).min(f64::from(canvas.width));
        x0 = x1 - 1.0;
    }
    if y1 <= y0 {
        y1 = (y0 + 1.0).min(f64::from(canvas.height));
        y0 = y1 - 1.0;
    }
    PixelBBox { x0, y0, x1, y1 }
}

mod patterns {
    use regex::Regex;
    use std::sync::OnceLock;

    pub(super) fn bbox_regex() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| {
            Regex::new(r"^\(([0-9.]+),([0-9.]+)\),\(([0-9.]+),([0-9.]+)\)$").expect("static regex")
        })
    }

    /// Unanchored pattern for spotting any serialized box inside free text.
    pub fn leak_regex() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| {
            Regex::new(r"\(\s*[0-9.]+\s*,\s*[0-9.]+\s*\)\s*,\s*\(\s*[0-9.]+\s*,\s*[0-9.]+\s*\)")
                .expect("static regex")
        })
    }
}

/// True when `text` contains something shaped like a serialized bbox.
pub fn contains_bbox_pattern(text: &str) -> bool {
    patterns::leak_regex().is_match(text)
}
