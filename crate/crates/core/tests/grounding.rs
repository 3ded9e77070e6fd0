use std::collections::BTreeMap;

use chartpoint_core::chart_spec::{generate_corpus, ChartType};
use chartpoint_core::cot::generate_cot_rule_based;
use chartpoint_core::marker::{apply_marker, detect_markers, verify_marker, DetectSource, MarkerMode};
use proptest::prelude::*;

fn mix() -> BTreeMap<ChartType, f64> {
    BTreeMap::from([(ChartType::Bar, 0.4), (ChartType::Line, 0.3), (ChartType::Pie, 0.3)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Structural and raster detection agree on the marker, and both land on the target.
    #[test]
    fn marker_round_trip(seed in 0u64..10_000, pick in 0usize..6) {
        let specs = generate_corpus(seed, 6, &mix()).unwrap();
        let spec = &specs[pick];
        let sample = generate_cot_rule_based(spec, seed);
        for step in sample.grounding_steps() {
            let edit = apply_marker(spec, step).unwrap();
            verify_marker(&edit.edited).unwrap();
            let (svg, geometry) = edit.edited.render_svg().unwrap();
            let (bitmap, _) = edit.edited.rasterize().unwrap();
            let target = *geometry.get(&edit.edited_target()).unwrap();

            let structural = detect_markers(&svg, None).unwrap();
            prop_assert_eq!(structural.source, DetectSource::Structural);
            let (cx, cy) = structural.bbox.center();
            prop_assert!(target.contains_point(cx, cy));

            let raster = detect_markers("", Some(&bitmap)).unwrap();
            prop_assert_eq!(raster.source, DetectSource::Raster);
            // Raster ink sits inside the structural cell.
            prop_assert!(raster.bbox.x0 >= structural.bbox.x0 && raster.bbox.x1 <= structural.bbox.x1);
            prop_assert!(raster.bbox.y0 >= structural.bbox.y0 && raster.bbox.y1 <= structural.bbox.y1);
            let (rx, ry) = raster.bbox.center();
            prop_assert!(target.contains_point(rx, ry));
            if edit.mode == MarkerMode::TextSuffix {
                prop_assert!((rx - cx).hypot(ry - cy) <= 3.0, "centers {:?} vs {:?}", (cx, cy), (rx, ry));
            }
        }
    }
}
