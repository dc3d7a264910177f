//! Dumps per-pseudo-segment confidence against ground-truth overlap
//! while one simulation arm runs.

use panst_core::sim::{
    build_loss_targets, debug_build_worlds, evaluate_pq, teacher_pseudo_labels, toy_gradient,
    SimConfig, ToyParams,
};
use panst_core::ema::ema_update;
use panst_core::rng::{derive_seed, stream, STAGE_MODEL_INIT, STAGE_SEGMIX, STAGE_SIM_STEP};
use panst_core::segmix::{segmix_with_trace, LabeledImage};
use panst_core::Tensor;

fn main() {
    let mut args = std::env::args().skip(1);
    let mls: bool = args.next().map(|a| a.parse().unwrap()).unwrap_or(true);
    let cbpf: bool = args.next().map(|a| a.parse().unwrap()).unwrap_or(true);
    let seed: u64 = args.next().map(|a| a.parse().unwrap()).unwrap_or(1);

    let mut cfg = SimConfig {
        enable_mls: true, // compute lambda regardless, apply per flag below
        enable_cbpf: cbpf,
        seed,
        ..SimConfig::default()
    };
    cfg.world.domain_shift_magnitude = 0.55;
    let (source, target, holdout) = debug_build_worlds(&cfg);

    let mut params = ToyParams::init(
        cfg.n_queries,
        cfg.embed_dim,
        cfg.world.num_classes,
        &mut stream(cfg.seed, STAGE_MODEL_INIT, 0),
    );
    let src_lambda = vec![1.0f32; source.scene.labels.len()];
    for it in 0..cfg.freeze_iters {
        let it_seed = derive_seed(cfg.seed, STAGE_SIM_STEP, it as u64);
        let targets = build_loss_targets(
            &params, &source.scene.image, &source.scene.labels, &src_lambda, None,
            cfg.thresholds.tau2, &cfg.weights, cfg.n_points, cfg.beta, it_seed,
        )
        .unwrap();
        let (ge, gc) = toy_gradient(&params, &targets, &cfg.weights).unwrap();
        for (p, g) in params.mask_embeddings.iter_mut().zip(&ge) {
            *p -= cfg.learning_rate * g;
        }
        for (p, g) in params.class_params.iter_mut().zip(&gc) {
            *p -= cfg.learning_rate * g;
        }
    }

    let mut teacher = params.clone();
    let mut student = params;
    println!(
        "src_only={:.3}",
        evaluate_pq(&teacher, &holdout, &cfg.fusion).unwrap().pq
    );

    for it in cfg.freeze_iters..cfg.iterations {
        let it_seed = derive_seed(cfg.seed, STAGE_SIM_STEP, it as u64);
        let tout = teacher_pseudo_labels(
            &teacher, &target.scene.image, &cfg.fusion, &cfg.thresholds, true,
        )
        .unwrap();

        if it % 200 == 0 {
            // per segment: lambda, class, best IoU against any GT segment
            println!(
                "it {it}: teacher_pq={:.3}",
                evaluate_pq(&teacher, &holdout, &cfg.fusion).unwrap().pq
            );
            for (k, entry) in tout.panoptic.table.entries.iter().enumerate() {
                let mask: Vec<bool> = tout
                    .panoptic
                    .id_map
                    .data()
                    .iter()
                    .map(|&id| id == entry.segment_id)
                    .collect();
                let mut best_iou = 0.0f64;
                let mut best_class = 0u32;
                for ge in &target.scene.panoptic.table.entries {
                    let mut inter = 0u64;
                    let mut union = 0u64;
                    for (px, &inp) in mask.iter().enumerate() {
                        let ing = target.scene.panoptic.id_map.data()[px] == ge.segment_id;
                        if inp && ing {
                            inter += 1;
                        }
                        if inp || ing {
                            union += 1;
                        }
                    }
                    let iou = inter as f64 / union as f64;
                    if iou > best_iou {
                        best_iou = iou;
                        best_class = ge.class_id;
                    }
                }
                println!(
                    "  seg {k}: class={} area={} lambda={:.2} best_iou={:.2} gt_class={}",
                    entry.class_id, entry.area, tout.lambda[k], best_iou, best_class
                );
            }
        }

        let lambda = if mls {
            tout.lambda.clone()
        } else {
            vec![1.0; tout.labels.len()]
        };
        let target_labeled = LabeledImage::new(
            target.scene.image.clone(),
            tout.panoptic.clone(),
            tout.labels.clone(),
        )
        .unwrap();
        let mut mix_rng = stream(it_seed, STAGE_SEGMIX, 0);
        let (mixed, trace) = segmix_with_trace(&source.scene, &target_labeled, &mut mix_rng).unwrap();
        let mut mixed_lambda: Vec<f32> = trace.kept_target.iter().map(|&i| lambda[i]).collect();
        mixed_lambda.extend(trace.chosen_source.iter().map(|_| 1.0f32));
        let mixed_conf = cfg.enable_cbpf.then(|| {
            let data: Vec<f32> = tout
                .phi
                .data()
                .iter()
                .zip(trace.footprint.data())
                .map(|(&phi, &inside)| if inside == 1 { 1.0 } else { phi })
                .collect();
            Tensor::new(vec![cfg.world.height, cfg.world.width], data).unwrap()
        });

        let src_targets = build_loss_targets(
            &student, &source.scene.image, &source.scene.labels, &src_lambda, None,
            cfg.thresholds.tau2, &cfg.weights, cfg.n_points, cfg.beta,
            derive_seed(it_seed, STAGE_SIM_STEP, 1),
        )
        .unwrap();
        let tgt_targets = build_loss_targets(
            &student, &mixed.image, &mixed.labels, &mixed_lambda, mixed_conf.as_ref(),
            cfg.thresholds.tau2, &cfg.weights, cfg.n_points, cfg.beta,
            derive_seed(it_seed, STAGE_SIM_STEP, 2),
        )
        .unwrap();
        let (src_ge, src_gc) = toy_gradient(&student, &src_targets, &cfg.weights).unwrap();
        let (tgt_ge, tgt_gc) = toy_gradient(&student, &tgt_targets, &cfg.weights).unwrap();
        for ((p, g1), g2) in student.mask_embeddings.iter_mut().zip(&src_ge).zip(&tgt_ge) {
            *p -= cfg.learning_rate * (g1 + g2);
        }
        for ((p, g1), g2) in student.class_params.iter_mut().zip(&src_gc).zip(&tgt_gc) {
            *p -= cfg.learning_rate * (g1 + g2);
        }
        let tv = ema_update(&teacher.to_vector(), &student.to_vector(), cfg.alpha).unwrap();
        teacher = teacher.from_vector(&tv).unwrap();
    }
    println!(
        "final teacher_pq={:.3}",
        evaluate_pq(&teacher, &holdout, &cfg.fusion).unwrap().pq
    );
}
