//! Watches supervised pretraining fit the source scene.

use panst_core::panoptic::{fuse_panoptic, pixel_confidence};
use panst_core::sim::{
    build_loss_targets, debug_build_worlds, evaluate_pq, toy_forward_on, toy_grad_step, SimConfig,
    ToyParams,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map(|a| a.parse().unwrap()).unwrap_or(6.0);
    let iters: usize = args.get(1).map(|a| a.parse().unwrap()).unwrap_or(800);
    let embed_dim: usize = args.get(2).map(|a| a.parse().unwrap()).unwrap_or(32);
    let n_points: usize = args.get(3).map(|a| a.parse().unwrap()).unwrap_or(256);
    let seed: u64 = args.get(4).map(|a| a.parse().unwrap()).unwrap_or(0);

    let cfg = SimConfig {
        learning_rate: lr,
        freeze_iters: iters,
        iterations: iters,
        embed_dim,
        n_points,
        seed,
        ..SimConfig::default()
    };
    let (source, _target, holdout) = debug_build_worlds(&cfg);
    let mut params = ToyParams::init(
        cfg.n_queries,
        cfg.embed_dim,
        cfg.world.num_classes,
        &mut panst_core::rng::stream(cfg.seed, panst_core::rng::STAGE_MODEL_INIT, 0),
    );
    let lambdas = vec![1.0f32; source.scene.labels.len()];
    println!("gt segments: {}", source.scene.labels.len());

    for it in 0..iters {
        let seed = panst_core::rng::derive_seed(cfg.seed, panst_core::rng::STAGE_SIM_STEP, it as u64);
        let targets = build_loss_targets(
            &params,
            &source.scene.image,
            &source.scene.labels,
            &lambdas,
            None,
            cfg.thresholds.tau2,
            &cfg.weights,
            cfg.n_points,
            cfg.beta,
            seed,
        )
        .unwrap();
        params = toy_grad_step(&params, &targets, &cfg.weights, cfg.learning_rate).unwrap();

        if (it + 1) % 100 == 0 {
            let pred = toy_forward_on(&params, &source.scene.image).unwrap();
            let pan = fuse_panoptic(&pred, &cfg.fusion).unwrap();
            let rho = pixel_confidence(&pred);
            let max_s = pred
                .mask_logits()
                .data()
                .iter()
                .fold(0.0f32, |m, &v| m.max(v.abs()));
            let mut max_p = vec![0.0f64; pred.num_masks()];
            for (i, p) in max_p.iter_mut().enumerate() {
                let sm = pred.class_softmax(i);
                *p = sm[..pred.num_classes()].iter().copied().fold(0.0, f64::max);
            }
            let src_pq = evaluate_pq(&params, &source, &cfg.fusion).unwrap().pq;
            let hold_pq = evaluate_pq(&params, &holdout, &cfg.fusion).unwrap().pq;
            let rho_hi = rho.data().iter().filter(|&&v| v > 0.99).count();
            println!(
                "it {:4} src_pq={:.3} hold_pq={:.3} segs={} max|s|={:.2} rho>.99={} maxp={:?}",
                it + 1,
                src_pq,
                hold_pq,
                pan.table.len(),
                max_s,
                rho_hi,
                max_p.iter().map(|v| (v * 100.0) as i32).collect::<Vec<_>>()
            );
            if it + 1 == iters {
                let (h, w) = (cfg.world.height, cfg.world.width);
                for i in 0..pred.num_masks() {
                    if max_p[i] < 0.5 {
                        continue;
                    }
                    let sm = pred.class_softmax(i);
                    let class = sm
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    let orig = pred
                        .mask_logit_slab(i)
                        .iter()
                        .filter(|&&s| s > 0.0)
                        .count();
                    let mut claimed = 0;
                    for r in 0..h {
                        for c in 0..w {
                            let mut best = 0usize;
                            for k in 1..pred.num_masks() {
                                if rho.at3(k, r, c) > rho.at3(best, r, c) {
                                    best = k;
                                }
                            }
                            if best == i {
                                claimed += 1;
                            }
                        }
                    }
                    println!(
                        "  query {i:2} class={class} maxp={:.4} orig={orig} argmax_claimed={claimed}",
                        max_p[i]
                    );
                }
            }
        }
    }
}
