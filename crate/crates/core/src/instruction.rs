//! Expansion of a grounded CoT sample into instruction records.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{NormBBox, PixelBBox};
use crate::chart_spec::ChartSpec;
use crate::cot::{CotSample, Step, StepKind};
use crate::prompts::instruction_templates;
use crate::renderer::{self, LayoutError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstructionError {
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("overlay image needs at least one box")]
    NoOverlay,
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    T1a,
    T1b,
    T2,
    T3,
    #[serde(rename = "T4_final")]
    T4Final,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::T1a => "T1a",
            RecordKind::T1b => "T1b",
            RecordKind::T2 => "T2",
            RecordKind::T3 => "T3",
            RecordKind::T4Final => "T4_final",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageVariant {
    Vanilla,
    Overlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub chart_id: String,
    pub variant: ImageVariant,
    /// Relative path of the image inside the output directory.
    pub file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlay_boxes: Vec<PixelBBox>,
}

impl ImageRef {
    pub fn vanilla(chart_id: &str) -> Self {
        Self {
            chart_id: chart_id.to_string(),
            variant: ImageVariant::Vanilla,
            file: format!("renders/{chart_id}.svg"),
            overlay_boxes: Vec::new(),
        }
    }

    /// Overlay image whose last drawn box belongs to step `step_index`.
    pub fn overlay(chart_id: &str, step_index: usize, boxes: Vec<PixelBBox>) -> Self {
        Self {
            chart_id: chart_id.to_string(),
            variant: ImageVariant::Overlay,
            file: format!("renders/{chart_id}_ov{step_index}.svg"),
            overlay_boxes: boxes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub kind: RecordKind,
    pub chart_id: String,
    /// Step whose box is predicted (T2/T3); absent otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub image: ImageRef,
    pub prompt: Vec<String>,
    pub ground_truth: String,
}

impl InstructionSample {
    fn sort_key(&self) -> (&str, RecordKind, usize) {
        (&self.chart_id, self.kind, self.step.unwrap_or(0))
    }
}

fn step_line(step: &Step, bbox: Option<&NormBBox>) -> String {
    let kind = match step.kind {
        StepKind::Grounding => "Grounding",
        StepKind::Reasoning => "Reasoning",
    };
    match bbox {
        Some(b) => format!("Step {} ({kind}): {} {b}", step.index + 1, step.text),
        None => format!("Step {} ({kind}): {}", step.index + 1, step.text),
    }
}

/// Resolves a fractional cap into a per-chart record limit.
fn resolve_cap(cap: f64, rng: &mut ChaCha8Rng) -> usize {
    let whole = cap.floor();
    let extra = rng.random_bool((cap - whole).clamp(0.0, 1.0));
    whole as usize + usize::from(extra)
}

/// Emit every instruction record for one chart.
///
/// `cap` limits the records per chart; a fractional part is taken as the
/// probability of allowing one more. T1a, T1b and T4_final are always kept.
pub fn build_instructions(
    sample: &CotSample,
    boxes: &BTreeMap<usize, NormBBox>,
    pixel_boxes: &BTreeMap<usize, PixelBBox>,
    cap: Option<f64>,
    seed: u64,
) -> Result<Vec<InstructionSample>, InstructionError> {
    let grounding: Vec<usize> = sample.grounding_steps().map(|s| s.index).collect();
    for &g in &grounding {
        if !boxes.contains_key(&g) {
            return Err(InstructionError::Coverage(format!("no box for grounding step {g}")));
        }
        if !pixel_boxes.contains_key(&g) {
            return Err(InstructionError::Coverage(format!("no pixel box for grounding step {g}")));
        }
    }
    if let Some(extra) = boxes.keys().find(|k| !grounding.contains(k)) {
        return Err(InstructionError::Coverage(format!("box given for non-grounding step {extra}")));
    }

    let t = instruction_templates();
    let id = sample.chart_id.as_str();
    let question = format!("{}{}", t.question_prefix, sample.question);
    let answer = sample.answer.to_string();
    let record = |kind, step, image, prompt: Vec<String>, ground_truth: String| InstructionSample {
        kind,
        chart_id: id.to_string(),
        step,
        image,
        prompt,
        ground_truth,
    };
    let trace = |upto: usize| -> Vec<String> {
        let mut parts = vec![t.steps_header.clone()];
        parts.extend(sample.steps[..upto].iter().map(|s| step_line(s, boxes.get(&s.index))));
        parts
    };

    let mut fixed = Vec::new();
    fixed.push(record(RecordKind::T1a, None, ImageRef::vanilla(id), vec![t.t1a.clone(), question.clone()], answer.clone()));
    let mut long = String::new();
    for s in &sample.steps {
        long.push_str(&step_line(s, None));
        long.push('\n');
    }
    long.push_str(&t.answer_prefix);
    long.push_str(&answer);
    fixed.push(record(RecordKind::T1b, None, ImageRef::vanilla(id), vec![t.t1b.clone(), question.clone()], long));

    let mut per_step = Vec::new();
    for &g in &grounding {
        let mut prompt = vec![t.t2.clone(), question.clone()];
        prompt.extend(trace(g));
        per_step.push(record(RecordKind::T2, Some(g), ImageRef::vanilla(id), prompt, boxes[&g].to_string()));
    }
    for pair in sample.steps.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.kind != StepKind::Grounding || b.kind != StepKind::Grounding {
            continue;
        }
        let overlay: Vec<PixelBBox> = grounding.iter().filter(|&&g| g <= a.index).map(|g| pixel_boxes[g]).collect();
        let mut prompt = vec![t.t3.clone(), question.clone()];
        prompt.extend(trace(a.index + 1));
        per_step.push(record(
            RecordKind::T3,
            Some(b.index),
            ImageRef::overlay(id, a.index, overlay),
            prompt,
            boxes[&b.index].to_string(),
        ));
    }

    let mut prompt = vec![t.t4.clone(), question];
    prompt.extend(trace(sample.steps.len()));
    fixed.push(record(RecordKind::T4Final, None, ImageRef::vanilla(id), prompt, answer));

    if let Some(cap) = cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05EE_DCA9);
        let limit = resolve_cap(cap, &mut rng).saturating_sub(fixed.len());
        if limit < per_step.len() {
            let mut keep = sample_indices(&mut rng, per_step.len(), limit).into_vec();
            keep.sort_unstable();
            per_step = keep.into_iter().map(|i| per_step[i].clone()).collect();
        }
    }

    let mut all = fixed;
    all.extend(per_step);
    all.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(all)
}

/// Closed-form record count for a step sequence without a cap.
pub fn expected_record_count(kinds: &[StepKind]) -> usize {
    let g = kinds.iter().filter(|k| **k == StepKind::Grounding).count();
    let chained = kinds
        .windows(2)
        .filter(|w| w[0] == StepKind::Grounding && w[1] == StepKind::Grounding)
        .count();
    2 + g + chained + 1
}

/// Vanilla chart with red boxes drawn on top.
pub fn render_overlay_image(spec: &ChartSpec, boxes: &[PixelBBox]) -> Result<String, InstructionError> {
    if boxes.is_empty() {
        return Err(InstructionError::NoOverlay);
    }
    Ok(renderer::render_svg(spec, boxes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::Answer;
    use crate::bbox::{contains_bbox_pattern, normalize, Canvas, NormFormat};
    use crate::renderer::ElementRef;

    fn sample(kinds: &[StepKind]) -> CotSample {
        let steps = kinds
            .iter()
            .enumerate()
            .map(|(index, &kind)| Step {
                index,
                kind,
                text: format!("step text {index}"),
                target: (kind == StepKind::Grounding).then(ElementRef::title),
            })
            .collect();
        CotSample { chart_id: "c07".into(), question: "What is it?".into(), answer: Answer::number(3.5), steps }
    }

    fn boxes(s: &CotSample) -> (BTreeMap<usize, NormBBox>, BTreeMap<usize, PixelBBox>) {
        let canvas = Canvas::new(1000, 800);
        let mut n = BTreeMap::new();
        let mut p = BTreeMap::new();
        for st in s.grounding_steps() {
            let px = PixelBBox { x0: 10.0 * st.index as f64, y0: 20.0, x1: 10.0 * st.index as f64 + 30.0, y1: 60.0 };
            n.insert(st.index, normalize(&px, canvas, NormFormat::C));
            p.insert(st.index, px);
        }
        (n, p)
    }

    use StepKind::{Grounding as G, Reasoning as R};

    #[test]
    fn ggg_r_emits_seven() {
        let s = sample(&[G, G, G, R]);
        let (n, p) = boxes(&s);
        let recs = build_instructions(&s, &n, &p, None, 0).unwrap();
        let kinds: Vec<_> = recs.iter().map(|r| r.kind.as_str()).collect();
        assert_eq!(kinds, ["T1a", "T1b", "T2", "T2", "T2", "T3", "T3", "T4_final"]);
        let t3 = &recs[5];
        assert_eq!(t3.step, Some(1));
        assert_eq!(t3.image.variant, ImageVariant::Overlay);
        assert_eq!(t3.image.overlay_boxes.len(), 1);
        assert_eq!(recs[6].image.overlay_boxes.len(), 2);
        for r in &recs[2..7] {
            NormBBox::parse(&r.ground_truth, NormFormat::C).unwrap();
        }
    }

    #[test]
    fn gr_emits_four() {
        let s = sample(&[G, R]);
        let (n, p) = boxes(&s);
        assert_eq!(build_instructions(&s, &n, &p, None, 0).unwrap().len(), 4);
        assert_eq!(expected_record_count(&[G, R]), 4);
        assert_eq!(expected_record_count(&[G, R, G]), 5);
    }

    #[test]
    fn t1_has_no_boxes_and_t1b_has_every_step() {
        let s = sample(&[G, R, G, G, R]);
        let (n, p) = boxes(&s);
        let recs = build_instructions(&s, &n, &p, None, 0).unwrap();
        for r in recs.iter().filter(|r| matches!(r.kind, RecordKind::T1a | RecordKind::T1b)) {
            assert!(!contains_bbox_pattern(&r.ground_truth));
            assert!(r.prompt.iter().all(|p| !contains_bbox_pattern(p)));
        }
        let t1b = recs.iter().find(|r| r.kind == RecordKind::T1b).unwrap();
        for st in &s.steps {
            assert!(t1b.ground_truth.contains(&st.text));
        }
        assert!(t1b.ground_truth.ends_with("3.5"));
        let t2_first = recs.iter().find(|r| r.kind == RecordKind::T2).unwrap();
        assert_eq!(t2_first.prompt.len(), 3);
    }

    #[test]
    fn missing_box_is_coverage_error() {
        let s = sample(&[G, G]);
        let (mut n, p) = boxes(&s);
        n.remove(&1);
        assert!(matches!(build_instructions(&s, &n, &p, None, 0), Err(InstructionError::Coverage(_))));
    }

    #[test]
    fn cap_keeps_fixed_records() {
        let s = sample(&[G, G, G, R]);
        let (n, p) = boxes(&s);
        let recs = build_instructions(&s, &n, &p, Some(4.0), 9).unwrap();
        assert_eq!(recs.len(), 4);
        for k in [RecordKind::T1a, RecordKind::T1b, RecordKind::T4Final] {
            assert!(recs.iter().any(|r| r.kind == k));
        }
        assert_eq!(recs, build_instructions(&s, &n, &p, Some(4.0), 9).unwrap());
        let mean = (0..2000u64)
            .map(|seed| build_instructions(&s, &n, &p, Some(3.24), seed).unwrap().len())
            .sum::<usize>() as f64
            / 2000.0;
        assert!((mean - 3.24).abs() < 0.04, "{mean}");
    }

    #[test]
    fn overlay_image_rules() {
        let spec = crate::chart_spec::parse_spec(
            r#"{"id":"o1","chart_type":"pie","title":"Share","series":[{"name":"S","values":[1.0,2.0]}],
            "x_labels":["a","b"],"canvas":[640,480],"style_seed":0,"legend":false,"value_labels":false}"#,
        )
        .unwrap();
        assert_eq!(render_overlay_image(&spec, &[]), Err(InstructionError::NoOverlay));
        let one = PixelBBox { x0: 5.0, y0: 5.0, x1: 50.0, y1: 40.0 };
        let svg = render_overlay_image(&spec, &[one]).unwrap();
        assert_eq!(svg.matches("class=\"overlay\"").count(), 1);
        let out = PixelBBox { x0: 600.0, y0: 5.0, x1: 700.0, y1: 40.0 };
        assert!(matches!(render_overlay_image(&spec, &[out]), Err(InstructionError::Layout(_))));
    }
}
