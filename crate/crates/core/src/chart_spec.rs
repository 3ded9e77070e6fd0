//! Declarative chart specifications: schema, validation and seeded synthesis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Canvas;
use crate::MARKER_CHAR;

pub const MIN_CANVAS: u32 = 200;
pub const MAX_CANVAS: u32 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("validation error: {0}")]
    Validation(String),
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid corpus configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartType {
    Line,
    Bar,
    Pie,
}

impl ChartType {
    pub const ALL: [ChartType; 3] = [ChartType::Bar, ChartType::Line, ChartType::Pie];

    pub fn as_str(self) -> &'static str {
        match self {
            ChartType::Line => "line",
            ChartType::Bar => "bar",
            ChartType::Pie => "pie",
        }
    }
}

impl fmt::Display for ChartType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChartType {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "line" => Ok(ChartType::Line),
            "bar" => Ok(ChartType::Bar),
            "pie" => Ok(ChartType::Pie),
            other => Err(ConfigError(format!("unknown chart type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub id: String,
    pub chart_type: ChartType,
    pub title: String,
    pub series: Vec<Series>,
    pub x_labels: Vec<String>,
    pub canvas: (u32, u32),
    pub style_seed: u64,
    pub legend: bool,
    pub value_labels: bool,
}

impl ChartSpec {
    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.canvas.0, self.canvas.1)
    }

    pub fn series_named(&self, name: &str) -> Option<(usize, &Series)> {
        self.series.iter().enumerate().find(|(_, s)| s.name == name)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.x_labels.iter().position(|c| c == name)
    }

    /// Value of one datapoint.
    pub fn value(&self, series: &str, category: &str) -> Option<f64> {
        let (_, s) = self.series_named(series)?;
        s.values.get(self.category_index(category)?).copied()
    }

    /// Share of a pie wedge in percent, rounded to one decimal.
    pub fn pie_share(&self, category: &str) -> Option<f64> {
        let s = self.series.first()?;
        let idx = self.category_index(category)?;
        let total: f64 = s.values.iter().sum();
        Some(round1(s.values[idx] / total * 100.0))
    }

    /// Every human-visible string the spec carries.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.title.as_str())
            .chain(self.series.iter().map(|s| s.name.as_str()))
            .chain(self.x_labels.iter().map(String::as_str))
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let fail = |msg: &str| Err(SpecError::Validation(msg.to_string()));
        if self.id.trim().is_empty() {
            return fail("id must be non-empty");
        }
        if self.value_labels {
            return fail("value_labels must be false");
        }
        let (w, h) = self.canvas;
        if !(MIN_CANVAS..=MAX_CANVAS).contains(&w) || !(MIN_CANVAS..=MAX_CANVAS).contains(&h) {
            return fail("canvas dimensions must lie in [200, 4096]");
        }
        if self.series.is_empty() {
            return fail("series must be non-empty");
        }
        if self.x_labels.is_empty() {
            return fail("x_labels must be non-empty");
        }
        if self.chart_type == ChartType::Pie && self.series.len() != 1 {
            return fail("pie charts need exactly one series");
        }
        let mut names = BTreeSet::new();
        for s in &self.series {
            if s.name.trim().is_empty() {
                return fail("series names must be non-empty");
            }
            if !names.insert(s.name.as_str()) {
                return fail("series names must be unique");
            }
            if s.values.len() != self.x_labels.len() {
                return fail("series/category length mismatch");
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return fail("values must be finite");
            }
            if self.chart_type == ChartType::Pie && s.values.iter().any(|&v| v <= 0.0) {
                return fail("pie values must be strictly positive");
            }
        }
        let mut cats = BTreeSet::new();
        for c in &self.x_labels {
            if c.trim().is_empty() {
                return fail("category names must be non-empty");
            }
            if !cats.insert(c.as_str()) {
                return fail("category names must be unique");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chart spec serializes")
    }
}

/// Parse and validate a spec document.
pub fn parse_spec(text: &str) -> Result<ChartSpec, SpecError> {
    let spec: ChartSpec = serde_json::from_str(text).map_err(|e| SpecError::Syntax(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

const TITLE_SUBJECTS: &[&str] = &[
    "Revenue", "Sales", "Exports", "Visitors", "Output", "Spending", "Enrollment", "Rainfall",
    "Downloads", "Profit", "Imports", "Traffic", "Energy Use", "Subscribers", "Emissions",
];
const TITLE_QUALIFIERS: &[&str] = &[
    "Annual", "Quarterly", "Monthly", "Regional", "Projected", "Reported", "Average", "Total",
];
const TITLE_DIMENSIONS: &[&str] = &["by Year", "by Region", "by Month", "by Segment", "by Product", "Overview"];
const SERIES_NAMES: &[&str] = &[
    "Domestic", "Foreign", "Online", "Retail", "Urban", "Rural", "Men", "Women", "Team A",
    "Team B", "North", "South", "Basic", "Premium", "Public", "Private",
];
const CATEGORY_SETS: &[&[&str]] = &[
    &["2015", "2016", "2017", "2018", "2019", "2020", "2021", "2022"],
    &["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug"],
    &["Q1", "Q2", "Q3", "Q4", "Q5", "Q6", "Q7", "Q8"],
    &["North", "South", "East", "West", "Central", "Coast", "Hills", "Valley"],
    &["Alpha", "Beta", "Gamma", "Delta", "Omega", "Sigma", "Kappa", "Theta"],
    &["Food", "Rent", "Travel", "Health", "Tech", "Energy", "Media", "Other"],
];
const CANVASES: &[(u32, u32)] = &[(640, 480), (800, 600), (960, 720), (1000, 750)];

fn chart_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix-style stream separation per chart
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Split `n` into integer counts proportional to `weights` (largest remainder).
fn quotas(n: usize, weights: &[(ChartType, f64)]) -> Vec<(ChartType, usize)> {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut out: Vec<(ChartType, usize, f64)> = weights
        .iter()
        .map(|&(t, w)| {
            let exact = n as f64 * w / total;
            (t, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = out.iter().map(|(_, c, _)| c).sum();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[b].2.total_cmp(&out[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        out[i].1 += 1;
    }
    out.into_iter().map(|(t, c, _)| (t, c)).collect()
}

/// Deterministically synthesize `n` valid chart specs with the given type mix.
///
/// Type counts are allocated by largest remainder and then shuffled, so the
/// realized proportions track `type_mix` to within one chart.
pub fn generate_corpus(
    seed: u64,
    n: usize,
    type_mix: &BTreeMap<ChartType, f64>,
) -> Result<Vec<ChartSpec>, ConfigError> {
    if n == 0 {
        return Err(ConfigError("n must be at least 1".into()));
    }
    if type_mix.values().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ConfigError("type weights must be finite and non-negative".into()));
    }
    let weights: Vec<(ChartType, f64)> = type_mix.iter().map(|(&t, &w)| (t, w)).collect();
    if weights.iter().all(|(_, w)| *w == 0.0) {
        return Err(ConfigError("type weights must not all be zero".into()));
    }

    let mut types: Vec<ChartType> = quotas(n, &weights)
        .into_iter()
        .flat_map(|(t, c)| std::iter::repeat_n(t, c))
        .collect();
    types.shuffle(&mut chart_rng(seed, u64::MAX));

    let width = n.to_string().len().max(2);
    Ok(types
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let id = format!("c{:0width$}", i + 1);
            synthesize(id, t, &mut chart_rng(seed, i as u64))
        })
        .collect())
}

fn synthesize(id: String, chart_type: ChartType, rng: &mut ChaCha8Rng) -> ChartSpec {
    let title = format!(
        "{} {} {}",
        TITLE_QUALIFIERS[rng.random_range(0..TITLE_QUALIFIERS.len())],
        TITLE_SUBJECTS[rng.random_range(0..TITLE_SUBJECTS.len())],
        TITLE_DIMENSIONS[rng.random_range(0..TITLE_DIMENSIONS.len())],
    );
    let set = CATEGORY_SETS[rng.random_range(0..CATEGORY_SETS.len())];
    let n_cat = rng.random_range(3..=set.len().min(8));
    let start = rng.random_range(0..=set.len() - n_cat);
    let x_labels: Vec<String> = set[start..start + n_cat].iter().map(|s| s.to_string()).collect();
    let canvas = CANVASES[rng.random_range(0..CANVASES.len())];
    let style_seed = rng.random::<u32>() as u64;

    let series = match chart_type {
        ChartType::Pie => {
            let raw: Vec<f64> = (0..n_cat).map(|_| rng.random_range(10.0..1000.0)).collect();
            let name = SERIES_NAMES[rng.random_range(0..SERIES_NAMES.len())].to_string();
            vec![Series {
                name,
                values: pie_shares(&raw),
            }]
        }
        ChartType::Bar | ChartType::Line => {
            let n_series = rng.random_range(1..=4usize);
            let mut pool: Vec<&str> = SERIES_NAMES.to_vec();
            pool.shuffle(rng);
            pool.truncate(n_series);
            pool.into_iter()
                .map(|name| Series {
                    name: name.to_string(),
                    values: (0..n_cat).map(|_| round1(rng.random_range(10.0..1000.0))).collect(),
                })
                .collect()
        }
    };
    let legend = chart_type != ChartType::Pie && series.len() > 1;
    let spec = ChartSpec {
        id,
        chart_type,
        title,
        series,
        x_labels,
        canvas,
        style_seed,
        legend,
        value_labels: false,
    };
    debug_assert!(spec.validate().is_ok());
    debug_assert!(!spec.texts().any(|t| t.contains(MARKER_CHAR)));
    spec
}

/// Normalize raw weights to shares of 100 with one decimal that sum to exactly 100.0.
fn pie_shares(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let exact: Vec<f64> = raw.iter().map(|v| v / total * 1000.0).collect();
    let mut tenths: Vec<i64> = exact.iter().map(|e| (e.floor() as i64).max(1)).collect();
    let mut diff = 1000 - tenths.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut i = 0;
    while diff != 0 {
        let k = order[i % order.len()];
        if diff > 0 {
            tenths[k] += 1;
            diff -= 1;
        } else if tenths[k] > 1 {
            tenths[k] -= 1;
            diff += 1;
        }
        i += 1;
    }
    tenths.into_iter().map(|t| t as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const BAR_FIXTURE: &str = r#"{
        "id": "c01", "chart_type": "bar", "title": "Revenue",
        "series": [{"name": "Sales", "values": [10.0, 20.5, 30.0]}],
        "x_labels": ["C1", "C2", "C3"], "canvas": [640, 480],
        "style_seed": 3, "legend": false, "value_labels": false
    }"#;

    fn reference_mix() -> BTreeMap<ChartType, f64> {
        BTreeMap::from([(ChartType::Bar, 0.571), (ChartType::Line, 0.336), (ChartType::Pie, 0.093)])
    }

    #[test]
    fn parses_minimal_bar() {
        let spec = parse_spec(BAR_FIXTURE).unwrap();
        assert_eq!(spec.chart_type, ChartType::Bar);
        assert_eq!(spec.series[0].values, vec![10.0, 20.5, 30.0]);
        assert_eq!(spec.canvas(), Canvas::new(640, 480));
    }

    #[test]
    fn rejects_value_labels() {
        let doc = BAR_FIXTURE.replace(r#""value_labels": false"#, r#""value_labels": true"#);
        match parse_spec(&doc) {
            Err(SpecError::Validation(m)) => assert_eq!(m, "value_labels must be false"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_length_mismatch() {
        let doc = BAR_FIXTURE.replace("[10.0, 20.5, 30.0]", "[10.0, 20.5, 30.0, 1.0]");
        match parse_spec(&doc) {
            Err(SpecError::Validation(m)) => assert_eq!(m, "series/category length mismatch"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_garbage() {
        let doc = BAR_FIXTURE.replace(r#""legend": false"#, r#""legend": false, "theme": "dark""#);
        assert!(matches!(parse_spec(&doc), Err(SpecError::Syntax(_))));
        assert!(matches!(parse_spec("{"), Err(SpecError::Syntax(_))));
        let doc = BAR_FIXTURE.replace(r#""legend": false,"#, "");
        assert!(matches!(parse_spec(&doc), Err(SpecError::Syntax(_))));
    }

    #[test]
    fn rejects_invariant_violations() {
        let cases = [
            (r#"[640, 480]"#, r#"[199, 480]"#),
            (r#""name": "Sales""#, r#""name": """#),
            (r#""chart_type": "bar""#, r#""chart_type": "scatter""#),
            (r#"["C1", "C2", "C3"]"#, r#"["C1", "C1", "C3"]"#),
        ];
        for (from, to) in cases {
            assert!(parse_spec(&BAR_FIXTURE.replace(from, to)).is_err(), "{to}");
        }
        let pie = BAR_FIXTURE
            .replace(r#""chart_type": "bar""#, r#""chart_type": "pie""#)
            .replace("10.0, 20.5", "0.0, 20.5");
        assert!(matches!(parse_spec(&pie), Err(SpecError::Validation(_))));
    }

    #[test]
    fn corpus_matches_type_mix() {
        let specs = generate_corpus(7, 1000, &reference_mix()).unwrap();
        let count = |t| specs.iter().filter(|s| s.chart_type == t).count() as i64;
        assert!((count(ChartType::Bar) - 571).abs() <= 20);
        assert!((count(ChartType::Line) - 336).abs() <= 20);
        assert!((count(ChartType::Pie) - 93).abs() <= 20);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(7, 200, &reference_mix()).unwrap();
        let b = generate_corpus(7, 200, &reference_mix()).unwrap();
        let bytes = |v: &[ChartSpec]| serde_json::to_vec(v).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_corpus(8, 200, &reference_mix()).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn degenerate_mix() {
        let specs = generate_corpus(1, 50, &BTreeMap::from([(ChartType::Bar, 1.0)])).unwrap();
        assert!(specs.iter().all(|s| s.chart_type == ChartType::Bar));
    }

    #[test]
    fn bad_mixes() {
        assert!(generate_corpus(1, 10, &BTreeMap::from([(ChartType::Bar, 0.0)])).is_err());
        assert!(generate_corpus(1, 10, &BTreeMap::from([(ChartType::Bar, -1.0)])).is_err());
        assert!(generate_corpus(1, 10, &BTreeMap::new()).is_err());
        assert!(generate_corpus(1, 0, &reference_mix()).is_err());
    }

    #[test]
    fn pie_shares_sum_to_100() {
        let specs = generate_corpus(3, 300, &BTreeMap::from([(ChartType::Pie, 1.0)])).unwrap();
        for s in specs {
            let tenths: i64 = s.series[0].values.iter().map(|v| (v * 10.0).round() as i64).sum();
            assert_eq!(tenths, 1000);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_specs_round_trip(seed in any::<u64>(), n in 1usize..20) {
            for spec in generate_corpus(seed, n, &reference_mix()).unwrap() {
                let back = parse_spec(&spec.to_json()).unwrap();
                prop_assert_eq!(&back, &spec);
                prop_assert!(!spec.texts().any(|t| t.contains('@')));
            }
        }
    }
}
