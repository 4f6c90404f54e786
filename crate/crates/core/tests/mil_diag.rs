//! Diagnostic: what does the trained scorer prefer within bags?

use slsmil::bagging::{build_instances, GroundTruth, LabelParams};
use slsmil::evalkit::direction_error;
use slsmil::linedet::DetectorParams;
use slsmil::net::{train, Geometry, OptimizerState, ScorerModel, TrainSchedule, TrainSet};
use slsmil::params::PipelineParams;
use slsmil::slsgen::{detect_and_propose, PairingParams};
use slsmil::synthgen::{render_scene, SceneSpec};

#[test]
#[ignore = "diagnostic only"]
fn bag_preference_breakdown() {
    let params = PipelineParams::default();
    let mut all = Vec::new();
    for i in 0..8u64 {
        let spec = SceneSpec { seed: 9_000 + i, ..Default::default() };
        let (image, truth) = render_scene(&spec).unwrap();
        let gt = GroundTruth {
            image_id: format!("img{i}"),
            boxes: truth.planes.iter().map(|p| p.bbox).collect(),
        };
        let proposals =
            detect_and_propose(&image, &DetectorParams::default(), &PairingParams::default())
                .unwrap();
        let (instances, bags) = build_instances(
            &image,
            &proposals,
            &gt,
            params.crop_size,
            params.model_input,
            &LabelParams::default(),
        );
        all.push((instances, bags, truth));
    }
    // train on images 0..6, inspect 6..8
    let mut patches = Vec::new();
    let mut bags = Vec::new();
    let mut negatives = Vec::new();
    for (instances, image_bags, _) in &all[..6] {
        let base = patches.len();
        for inst in instances {
            patches.push(&inst.patch);
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.label == 0 {
                negatives.push(base + i);
            }
        }
        for b in image_bags {
            bags.push(b.instance_indices.iter().map(|&i| base + i).collect());
        }
    }
    let steps: usize = std::env::var("PROBE_STEPS").map_or(8000, |s| s.parse().unwrap());
    let mut model = ScorerModel::reference(
        Geometry { height: 32, width: 32, channels: 3 },
        42,
    );
    let mut opt = OptimizerState::new(model.param_count(), 1e-4);
    let schedule = TrainSchedule { max_steps: steps, ..Default::default() };
    let hist = train(
        &mut model,
        &mut opt,
        &TrainSet { patches, bags, negatives },
        &schedule,
    )
    .unwrap();
    let tail_active: Vec<usize> = hist
        .steps
        .iter()
        .rev()
        .filter_map(|s| s.active.map(|a| (a, s.bag_size.unwrap())))
        .take(12)
        .map(|(a, b)| a * 100 / b)
        .collect();
    eprintln!("active%% of bag in last positive steps: {tail_active:?}");

    for (idx, (instances, image_bags, truth)) in all[6..].iter().enumerate() {
        eprintln!("--- image {idx}: {} instances, {} bags", instances.len(), image_bags.len());
        for bag in image_bags {
            let axis = truth.planes[bag.gt_index].axis;
            eprintln!("  bag gt={} ({} members)", bag.gt_index, bag.instance_indices.len());
            let mut rows: Vec<(f64, f64, f64, f64)> = bag
                .instance_indices
                .iter()
                .map(|&i| {
                    let inst = &instances[i];
                    let p = model.forward(&inst.patch).unwrap();
                    let terr = direction_error(inst.proposal.square.theta, axis);
                    (p, terr, inst.best_iou, inst.proposal.sym)
                })
                .collect();
            rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            for (p, terr, iou_v, sym) in rows.iter().take(6) {
                eprintln!("    p={p:.3} theta_err={terr:5.1} iou={iou_v:.2} sym={sym:.3}");
            }
        }
        // score the non-positive survivors
        let mut fp_like: Vec<(f64, i8, f64)> = instances
            .iter()
            .filter(|inst| inst.label != 1)
            .map(|inst| (model.forward(&inst.patch).unwrap(), inst.label, inst.best_iou))
            .filter(|(p, _, _)| *p >= 0.5)
            .collect();
        fp_like.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        eprintln!("  non-positive survivors: {}", fp_like.len());
        for (p, label, iou_v) in fp_like.iter().take(10) {
            eprintln!("    p={p:.3} label={label} iou={iou_v:.2}");
        }
    }
}
