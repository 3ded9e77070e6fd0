//! Chain-of-thought samples with Grounding/Reasoning step classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::answer::{format_number, Answer};
use crate::chart_spec::{ChartSpec, ChartType};
use crate::llm_client::{ChatRequest, ClientError, LlmClient, Message};
use crate::prompts::{self, PromptTemplate};
use crate::renderer::{self, ElementRef, Role};

#[derive(Debug, Error)]
pub enum CotError {
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Grounding,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub kind: StepKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ElementRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotSample {
    pub chart_id: String,
    pub question: String,
    pub answer: Answer,
    pub steps: Vec<Step>,
}

impl CotSample {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cot sample serializes")
    }

    pub fn grounding_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.kind == StepKind::Grounding)
    }

    pub fn count(&self, kind: StepKind) -> usize {
        self.steps.iter().filter(|s| s.kind == kind).count()
    }
}

/// Remove a surrounding markdown code fence, if any.
fn strip_fence(doc: &str) -> &str {
    let t = doc.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.split_once('\n').map(|(_, r)| r).unwrap_or("");
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}

/// Parse a CoT document and check its format and key integrity.
pub fn validate_cot(document: &str) -> Result<CotSample, CotError> {
    let value: Value = serde_json::from_str(strip_fence(document))
        .map_err(|e| CotError::Format(format!("not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CotError::Format("document is not a JSON object".into()))?;
    for key in ["chart_id", "question", "answer", "steps"] {
        if !obj.contains_key(key) {
            return Err(CotError::Integrity(format!("missing key {key:?}")));
        }
    }
    let steps = obj["steps"]
        .as_array()
        .ok_or_else(|| CotError::Format("steps is not an array".into()))?;
    for (i, step) in steps.iter().enumerate() {
        let s = step
            .as_object()
            .ok_or_else(|| CotError::Format(format!("step {i} is not an object")))?;
        for key in ["index", "kind", "text"] {
            if !s.contains_key(key) {
                return Err(CotError::Integrity(format!("step {i} missing key {key:?}")));
            }
        }
        match s["kind"].as_str() {
            Some("Grounding") | Some("Reasoning") => {}
            other => return Err(CotError::Integrity(format!("step {i} has bad kind {other:?}"))),
        }
    }
    let sample: CotSample = serde_json::from_value(value).map_err(|e| CotError::Format(e.to_string()))?;
    check_integrity(&sample)?;
    Ok(sample)
}

fn check_integrity(sample: &CotSample) -> Result<(), CotError> {
    let bad = |m: String| Err(CotError::Integrity(m));
    if sample.chart_id.trim().is_empty() {
        return bad("empty chart_id".into());
    }
    if sample.question.trim().is_empty() {
        return bad("empty question".into());
    }
    if matches!(&sample.answer, Answer::Text(t) if t.trim().is_empty()) {
        return bad("empty answer".into());
    }
    if sample.steps.is_empty() {
        return bad("no steps".into());
    }
    for (i, step) in sample.steps.iter().enumerate() {
        if step.index != i {
            return bad("non-contiguous step indices".into());
        }
        if step.text.trim().is_empty() {
            return bad(format!("step {i} has empty text"));
        }
        match (step.kind, &step.target) {
            (StepKind::Grounding, None) => return bad(format!("grounding step {i} has no target")),
            (StepKind::Reasoning, Some(_)) => return bad(format!("reasoning step {i} has a target")),
            (_, Some(t)) => t.check().or_else(|m| bad(format!("step {i}: {m}")))?,
            _ => {}
        }
    }
    Ok(())
}

/// Checks that a sample belongs to `spec` and every grounding target is drawn.
pub fn check_against_spec(sample: &CotSample, spec: &ChartSpec) -> Result<(), CotError> {
    if sample.chart_id != spec.id {
        return Err(CotError::Integrity(format!(
            "chart_id {:?} does not match {:?}",
            sample.chart_id, spec.id
        )));
    }
    let geometry = renderer::layout(spec).map_err(|e| CotError::Integrity(e.to_string()))?;
    for step in sample.grounding_steps() {
        let target = step.target.as_ref().expect("validated grounding target");
        if geometry.get(target).is_none() {
            return Err(CotError::Integrity(format!("step {} target {target:?} is not in the chart", step.index)));
        }
    }
    Ok(())
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

struct StepList(Vec<Step>);

impl StepList {
    fn ground(&mut self, text: String, target: ElementRef) {
        let index = self.0.len();
        self.0.push(Step { index, kind: StepKind::Grounding, text, target: Some(target) });
    }

    fn reason(&mut self, text: String) {
        let index = self.0.len();
        self.0.push(Step { index, kind: StepKind::Reasoning, text, target: None });
    }
}

/// Template-driven CoT generation, deterministic in `(spec, seed)`.
pub fn generate_cot_rule_based(spec: &ChartSpec, seed: u64) -> CotSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id_hash(&spec.id));
    let mut steps = StepList(Vec::new());
    let (question, answer) = match spec.chart_type {
        ChartType::Pie => {
            let s = &spec.series[0];
            let c = &spec.x_labels[rng.random_range(0..spec.x_labels.len())];
            let share = spec.pie_share(c).expect("category exists");
            steps.ground(
                format!("Locate the label \"{c}\" in the chart key to identify its color."),
                ElementRef::x_tick(c.clone()),
            );
            steps.ground(
                format!("Locate the wedge with that color, which represents \"{c}\"."),
                ElementRef::datapoint(s.name.clone(), c.clone()),
            );
            steps.reason(format!(
                "Comparing the wedge with the full circle, \"{c}\" accounts for {}% of the total.",
                format_number(share)
            ));
            (format!("What percentage of the total does {c} account for?"), Answer::percent(share))
        }
        ChartType::Bar | ChartType::Line => {
            let si = rng.random_range(0..spec.series.len());
            let s = &spec.series[si];
            let multi = spec.series.len() > 1;
            let mark = if spec.chart_type == ChartType::Bar { "bar" } else { "point" };
            let roll: f64 = rng.random();
            if multi && spec.legend {
                steps.ground(
                    format!("Locate the legend entry \"{}\" to identify its color.", s.name),
                    ElementRef::legend(s.name.clone()),
                );
            }
            if roll < 0.6 {
                let ci = rng.random_range(0..spec.x_labels.len());
                let c = &spec.x_labels[ci];
                let v = s.values[ci];
                steps.ground(format!("Find the category \"{c}\" on the x-axis."), ElementRef::x_tick(c.clone()));
                steps.ground(
                    format!("Locate the {mark} of {} above \"{c}\".", s.name),
                    ElementRef::datapoint(s.name.clone(), c.clone()),
                );
                steps.reason(format!(
                    "Reading the {mark} against the y-axis gives a value of {}.",
                    format_number(v)
                ));
                let q = if multi {
                    format!("What is the value of {} in {c}?", s.name)
                } else {
                    format!("What is the value for {c}?")
                };
                (q, Answer::number(v))
            } else {
                let highest = roll < 0.8;
                let pick = s
                    .values
                    .iter()
                    .enumerate()
                    .reduce(|best, cur| {
                        let better = if highest { cur.1 > best.1 } else { cur.1 < best.1 };
                        if better { cur } else { best }
                    })
                    .map(|(i, _)| i)
                    .expect("non-empty series");
                let c = &spec.x_labels[pick];
                let v = s.values[pick];
                let (word, pos) = if highest { ("highest", "tallest") } else { ("lowest", "shortest") };
                let pos = if spec.chart_type == ChartType::Bar { pos.to_string() } else { word.to_string() };
                steps.ground(
                    format!("Locate the {pos} {mark} of {}.", s.name),
                    ElementRef::datapoint(s.name.clone(), c.clone()),
                );
                steps.ground(
                    format!("Find the x-axis label under that {mark}, which is \"{c}\"."),
                    ElementRef::x_tick(c.clone()),
                );
                steps.reason(format!(
                    "Comparing it with the other {mark}s of {}, it is the {word} one.",
                    s.name
                ));
                steps.reason(format!("Its value on the y-axis is {}.", format_number(v)));
                let q = if multi {
                    format!("What is the {word} value of {}?", s.name)
                } else {
                    format!("What is the {word} value in the chart?")
                };
                (q, Answer::number(v))
            }
        }
    };
    CotSample { chart_id: spec.id.clone(), question, answer, steps: steps.0 }
}

/// Ask the teacher for a CoT sample; one retry on a format/integrity failure.
pub fn generate_cot_llm(spec: &ChartSpec, client: &dyn LlmClient) -> Result<CotSample, CotError> {
    let request = ChatRequest {
        template: PromptTemplate::Cot,
        chart_id: spec.id.clone(),
        messages: vec![Message::user(prompts::cot_prompt(spec))],
    };
    let mut last = None;
    for attempt in 0..2 {
        let reply = client.chat(&request)?;
        match validate_cot(&reply).and_then(|s| check_against_spec(&s, spec).map(|_| s)) {
            Ok(sample) => return Ok(sample),
            Err(e) => {
                log::debug!("chart {} cot attempt {attempt} rejected: {e}", spec.id);
                last = Some(e);
            }
        }
    }
    Err(last.expect("two attempts made"))
}

/// The value a sample's answer should equal according to the chart data.
///
/// Uses the last grounded datapoint (its value, or its share for pies); a
/// sample grounded only on the title is checked against the title text.
pub fn expected_answer(sample: &CotSample, spec: &ChartSpec) -> Option<Answer> {
    let datapoint = sample
        .grounding_steps()
        .filter_map(|s| s.target.as_ref())
        .filter(|t| t.role == Role::Datapoint)
        .last();
    if let Some(t) = datapoint {
        let (series, category) = (t.series.as_deref()?, t.category.as_deref()?);
        return match spec.chart_type {
            ChartType::Pie => spec.pie_share(category).map(Answer::percent),
            _ => spec.value(series, category).map(Answer::number),
        };
    }
    sample
        .grounding_steps()
        .any(|s| s.target.as_ref().is_some_and(|t| t.role == Role::Title))
        .then(|| Answer::Text(spec.title.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart_spec::{generate_corpus, parse_spec};
    use std::collections::BTreeMap;

    const FOUR_STEP: &str = r#"{
        "chart_id": "c01", "question": "What is the value of Domestic in 2018?", "answer": 412.5,
        "steps": [
          {"index": 0, "kind": "Grounding", "text": "legend", "target": {"role": "legend_entry", "series": "Domestic"}},
          {"index": 1, "kind": "Grounding", "text": "tick", "target": {"role": "x_tick", "category": "2018"}},
          {"index": 2, "kind": "Grounding", "text": "bar", "target": {"role": "datapoint", "series": "Domestic", "category": "2018"}},
          {"index": 3, "kind": "Reasoning", "text": "read 412.5"}
        ]}"#;

    fn spec(chart_type: &str, series: &[(&str, &[f64])], legend: bool) -> ChartSpec {
        let n = series[0].1.len();
        let doc = serde_json::json!({
            "id": "t1", "chart_type": chart_type, "title": "Demo",
            "series": series.iter().map(|(n, v)| serde_json::json!({"name": n, "values": v})).collect::<Vec<_>>(),
            "x_labels": (1..=n).map(|i| format!("C{i}")).collect::<Vec<_>>(),
            "canvas": [800, 600], "style_seed": 1, "legend": legend, "value_labels": false
        });
        parse_spec(&doc.to_string()).unwrap()
    }

    #[test]
    fn accepts_well_formed_document() {
        let s = validate_cot(FOUR_STEP).unwrap();
        assert_eq!(s.count(StepKind::Grounding), 3);
        assert_eq!(s.count(StepKind::Reasoning), 1);
        assert_eq!(s.answer, Answer::number(412.5));
        assert_eq!(validate_cot(&s.to_json()).unwrap(), s);
        let fenced = format!("```json\n{FOUR_STEP}\n```");
        assert_eq!(validate_cot(&fenced).unwrap(), s);
    }

    #[test]
    fn grounding_without_target_rejected() {
        let doc = FOUR_STEP.replace(r#", "target": {"role": "x_tick", "category": "2018"}"#, "");
        assert!(matches!(validate_cot(&doc), Err(CotError::Integrity(_))));
    }

    #[test]
    fn non_contiguous_rejected() {
        let doc = FOUR_STEP.replace(r#""index": 3"#, r#""index": 4"#);
        match validate_cot(&doc) {
            Err(CotError::Integrity(m)) => assert_eq!(m, "non-contiguous step indices"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn format_and_key_errors() {
        assert!(matches!(validate_cot("not json"), Err(CotError::Format(_))));
        assert!(matches!(validate_cot("[1,2]"), Err(CotError::Format(_))));
        let doc = FOUR_STEP.replace(r#""question": "What is the value of Domestic in 2018?", "#, "");
        assert!(matches!(validate_cot(&doc), Err(CotError::Integrity(_))));
        let doc = FOUR_STEP.replace(r#""kind": "Reasoning""#, r#""kind": "Summary""#);
        assert!(matches!(validate_cot(&doc), Err(CotError::Integrity(_))));
        let doc = FOUR_STEP.replace(r#""index": 3"#, r#""index": "3""#);
        assert!(matches!(validate_cot(&doc), Err(CotError::Format(_))));
        let doc = FOUR_STEP.replace(r#""text": "read 412.5""#, r#""text": "x", "target": {"role": "title"}"#);
        assert!(matches!(validate_cot(&doc), Err(CotError::Integrity(_))));
    }

    #[test]
    fn single_series_bar_lookup() {
        let sp = spec("bar", &[("S1", &[5.0, 7.5, 9.0])], false);
        let mut seen_lookup = false;
        for seed in 0..40 {
            let s = generate_cot_rule_based(&sp, seed);
            if s.question.starts_with("What is the value for") {
                seen_lookup = true;
                assert_eq!(s.count(StepKind::Grounding), 2);
                assert_eq!(s.count(StepKind::Reasoning), 1);
                let c = s.steps[0].target.as_ref().unwrap().category.clone().unwrap();
                assert_eq!(s.answer, Answer::number(sp.value("S1", &c).unwrap()));
            }
        }
        assert!(seen_lookup);
    }

    #[test]
    fn multi_series_starts_with_legend() {
        let sp = spec("line", &[("A", &[1.0, 2.0, 3.0]), ("B", &[2.0, 1.0, 0.5]), ("C", &[4.0, 4.0, 4.0])], true);
        for seed in 0..20 {
            let s = generate_cot_rule_based(&sp, seed);
            assert_eq!(s.steps[0].kind, StepKind::Grounding);
            assert_eq!(s.steps[0].target.as_ref().unwrap().role, Role::LegendEntry);
        }
    }

    #[test]
    fn pie_share_answer() {
        let sp = spec("pie", &[("Share", &[1.0, 2.0, 5.0])], false);
        for seed in 0..10 {
            let s = generate_cot_rule_based(&sp, seed);
            let c = s.steps[0].target.as_ref().unwrap().category.clone().unwrap();
            let i = sp.category_index(&c).unwrap();
            let expected = ((sp.series[0].values[i] / 8.0 * 100.0) * 10.0).round() / 10.0;
            assert_eq!(s.answer, Answer::percent(expected));
        }
    }

    #[test]
    fn rule_based_invariants_over_corpus() {
        let mix = BTreeMap::from([(ChartType::Bar, 0.571), (ChartType::Line, 0.336), (ChartType::Pie, 0.093)]);
        for sp in generate_corpus(21, 300, &mix).unwrap() {
            let s = generate_cot_rule_based(&sp, 5);
            assert_eq!(s, generate_cot_rule_based(&sp, 5));
            assert!((3..=5).contains(&s.steps.len()), "{}", sp.id);
            check_against_spec(&s, &sp).unwrap();
            assert_eq!(expected_answer(&s, &sp), Some(s.answer.clone()));
            assert_eq!(validate_cot(&s.to_json()).unwrap(), s);
        }
    }
}
