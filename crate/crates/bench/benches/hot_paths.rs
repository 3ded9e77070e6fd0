use chartpoint_bench::{charts, eval_pairs};
use chartpoint_core::bbox::{denormalize_box, normalize, NormFormat, PixelBBox};
use chartpoint_core::cot::generate_cot_rule_based;
use chartpoint_core::eval::{evaluate, EvalOptions, DEFAULT_MARGINS};
use chartpoint_core::marker::{apply_marker, detect_markers};
use chartpoint_core::renderer::{layout, render_svg};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn render(c: &mut Criterion) {
    let specs = charts(32);
    c.bench_function("layout_32", |b| b.iter(|| specs.iter().map(|s| layout(s).unwrap().entries.len()).sum::<usize>()));
    c.bench_function("render_svg_32", |b| b.iter(|| specs.iter().map(|s| render_svg(s, &[]).unwrap().0.len()).sum::<usize>()));
    let edited: Vec<_> = specs
        .iter()
        .map(|s| {
            let sample = generate_cot_rule_based(s, 1);
            let step = sample.grounding_steps().next().unwrap().clone();
            apply_marker(s, &step).unwrap().edited
        })
        .collect();
    c.bench_function("rasterize_8", |b| b.iter(|| edited[..8].iter().map(|e| e.rasterize().unwrap().0.width).sum::<u32>()));

    let svgs: Vec<String> = edited.iter().map(|e| e.render_svg().unwrap().0).collect();
    c.bench_function("detect_structural_32", |b| {
        b.iter(|| svgs.iter().map(|s| detect_markers(s, None).unwrap().bbox.x0).sum::<f64>())
    });
    let bitmap = edited[0].rasterize().unwrap().0;
    c.bench_function("detect_raster_1", |b| b.iter(|| detect_markers("", Some(black_box(&bitmap))).unwrap()));
}

fn bbox(c: &mut Criterion) {
    let canvas = charts(1)[0].canvas();
    let boxes: Vec<PixelBBox> = (0..1000)
        .map(|i| {
            let x = (i * 7 % 500) as f64 + 0.25;
            let y = (i * 13 % 300) as f64 + 0.75;
            PixelBBox::new(x, y, x + 12.5, y + 9.0).unwrap()
        })
        .collect();
    for format in [NormFormat::A, NormFormat::B, NormFormat::C] {
        c.bench_function(&format!("normalize_roundtrip_{format}"), |b| {
            b.iter(|| boxes.iter().map(|p| denormalize_box(&normalize(p, canvas, format), canvas).x0).sum::<f64>())
        });
    }
}

fn eval(c: &mut Criterion) {
    let (gold, preds) = eval_pairs(2000);
    c.bench_function("evaluate_2000", |b| b.iter(|| evaluate(&preds, &gold, &DEFAULT_MARGINS, EvalOptions::default()).unwrap()));
}

criterion_group!(benches, render, bbox, eval);
criterion_main!(benches);
