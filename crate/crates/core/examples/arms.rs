//! Prints the held-out PQ trajectory of the three ablation arms.

use panst_core::sim::{run_simulation, SimConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let shift: f64 = args.next().map(|a| a.parse().unwrap()).unwrap_or(0.55);
    let alpha: f64 = args.next().map(|a| a.parse().unwrap()).unwrap_or(0.999);
    let tau1: f32 = args.next().map(|a| a.parse().unwrap()).unwrap_or(0.99);
    let lr: f64 = args.next().map(|a| a.parse().unwrap()).unwrap_or(6.0);
    let seeds: Vec<u64> = args.map(|a| a.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    println!("shift={shift} alpha={alpha} tau1={tau1} lr={lr}");

    let mut means = [0.0f64; 3];
    for &seed in &seeds {
        let start = std::time::Instant::now();
        for (arm, (mls, cbpf)) in [(false, false), (true, false), (true, true)]
            .into_iter()
            .enumerate()
        {
            let mut cfg = SimConfig {
                enable_mls: mls,
                enable_cbpf: cbpf,
                alpha,
                learning_rate: lr,
                seed,
                ..SimConfig::default()
            };
            cfg.world.domain_shift_magnitude = shift;
            cfg.thresholds.tau1 = tau1;
            let out = run_simulation(&cfg).expect("simulation");
            let r = &out.report;
            print!(
                "seed {seed} mls={} cbpf={} src_only={:.3} final_t={:.3} final_s={:.3} | ",
                mls as u8, cbpf as u8, r.source_only_pq, r.final_teacher_pq, r.final_student_pq
            );
            for c in &r.checkpoints {
                print!("{:.2}/{:.2}({:.2},{}) ", c.teacher_pq, c.student_pq, c.mean_lambda, c.n_pseudo_segments);
            }
            println!();
            means[arm] += r.final_teacher_pq / seeds.len() as f64;
        }
        println!("  seed {seed} took {:.1?}", start.elapsed());
    }
    println!(
        "means: baseline={:.4} mls={:.4} full={:.4}",
        means[0], means[1], means[2]
    );
}
