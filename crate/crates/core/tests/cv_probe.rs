//! End-to-end cross-validation probe on a small rendered dataset.

use slsmil::bagging::GroundTruth;
use slsmil::evalkit::{render_text, run_cross_validation, DatasetImage};
use slsmil::params::PipelineParams;
use slsmil::synthgen::{render_scene, AxisTruth, SceneSpec};

fn build_dataset(n: usize, base_seed: u64) -> Vec<DatasetImage> {
    (0..n)
        .map(|i| {
            let clutter: f64 =
                std::env::var("PROBE_CLUTTER").map_or(4.0, |v| v.parse().unwrap());
            let spec = SceneSpec {
                seed: base_seed + i as u64,
                clutter_density: clutter,
                ..Default::default()
            };
            let (image, truth) = render_scene(&spec).expect("scene renders");
            let image_id = format!("img_{i:04}");
            let gt = GroundTruth {
                image_id: image_id.clone(),
                boxes: truth.planes.iter().map(|p| p.bbox).collect(),
            };
            let axes = truth
                .planes
                .iter()
                .enumerate()
                .map(|(gi, p)| AxisTruth { gt_index: gi, axis: p.axis, length: p.length })
                .collect();
            DatasetImage { image_id, image, gt, axes: Some(axes) }
        })
        .collect()
}

#[test]
fn three_fold_cv_on_synthetic_scenes() {
    let start = std::time::Instant::now();
    let dataset = build_dataset(12, 7_000);
    eprintln!("dataset built in {:.1}s", start.elapsed().as_secs_f64());
    let mut params = PipelineParams { seed: 5, ..Default::default() };
    if let Ok(steps) = std::env::var("PROBE_STEPS") {
        params.schedule.max_steps = steps.parse().unwrap();
    }
    let t = std::time::Instant::now();
    let report = run_cross_validation(&dataset, &params).expect("cv runs");
    eprintln!("cv in {:.1}s", t.elapsed().as_secs_f64());
    eprintln!("{}", render_text(&report));
    let gt_total: usize = dataset.iter().map(|d| d.gt.boxes.len()).sum();
    assert_eq!(report.total.nms.tp + report.total.nms.fn_, gt_total);
    assert_eq!(report.folds.len(), 3);
    let recall = report.total.metrics.recall.unwrap_or(0.0);
    let precision = report.total.metrics.precision.unwrap_or(0.0);
    eprintln!("recall {recall:.3} precision {precision:.3} ap {:.3}", report.total.ap);
    assert!(recall >= 0.8, "probe recall too low: {recall}");
}
