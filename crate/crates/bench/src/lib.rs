//! Shared inputs for the benchmarks.

use std::collections::BTreeMap;

use chartpoint_core::chart_spec::{generate_corpus, ChartSpec, ChartType};
use chartpoint_core::eval::{GoldEntry, Prediction};
use chartpoint_core::Answer;

pub fn charts(n: usize) -> Vec<ChartSpec> {
    let mix = BTreeMap::from([(ChartType::Bar, 0.4), (ChartType::Line, 0.3), (ChartType::Pie, 0.3)]);
    generate_corpus(7, n, &mix).expect("valid mix")
}

/// `n` gold answers and predictions, every third one wrong and every fifth textual.
pub fn eval_pairs(n: usize) -> (Vec<GoldEntry>, Vec<Prediction>) {
    let mut gold = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{i}");
        let group = Some(if i % 2 == 0 { "human" } else { "aug" }.to_string());
        let (answer, raw) = if i % 5 == 0 {
            (Answer::Text("Cats".into()), format!("Step by step... Final answer: {}", if i % 3 == 0 { "dogs" } else { "cats" }))
        } else {
            let v = (i % 97) as f64 + 0.5;
            let p = if i % 3 == 0 { v * 1.3 } else { v * 1.02 };
            (Answer::number(v), format!("The value is about {p:.2}. Answer: {p:.2}"))
        };
        gold.push(GoldEntry { sample_id: id.clone(), answer, group });
        preds.push(Prediction { sample_id: id, raw_text: raw, group: None });
    }
    (gold, preds)
}
