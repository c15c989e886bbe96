//! Scratch sweep over optimizer settings for the desk-scale teacher.

use ekd_core::data::{generate_dataset, similarity_summary, DatasetSpec};
use ekd_core::trainer::{train_teacher, RunMode, TrainConfig};

fn main() {
    let out = std::env::temp_dir().join("ekd-sweep");
    std::fs::remove_dir_all(&out).ok();

    let (intra, inter) = similarity_summary(
        &generate_dataset(&DatasetSpec {
            num_identities: 50,
            samples_per_identity: 20,
            input_dim: 64,
            noise_sigma: 0.3,
            seed: 7,
        })
        .unwrap(),
    );
    println!("input space: intra {intra:.4} inter {inter:.4}");

    for (lr, scale, margin) in [
        (0.1, 64.0, 0.5),
        (0.05, 64.0, 0.5),
        (0.02, 64.0, 0.5),
        (0.01, 64.0, 0.5),
        (0.005, 64.0, 0.5),
        (0.02, 30.0, 0.5),
        (0.01, 30.0, 0.5),
        (0.02, 16.0, 0.5),
        (0.01, 16.0, 0.2),
    ] {
        let config = TrainConfig {
            mode: RunMode::Teacher,
            base_lr: lr,
            arc_scale: scale,
            arc_margin: margin,
            ..TrainConfig::default()
        };
        let dir = out.join(format!("t-{lr}-{scale}-{margin}"));
        match train_teacher(&config, &dir) {
            Ok(run) => {
                let first = run.metrics.steps.first().unwrap().breakdown.l_arcface;
                let last = run.metrics.steps.last().unwrap().breakdown.l_arcface;
                let tprs: Vec<String> = run
                    .final_eval
                    .iter()
                    .map(|p| format!("{:.0e}:{:.3}", p.fpr, p.tpr))
                    .collect();
                println!(
                    "lr={lr} s={scale} m={margin}: loss {first:.2} -> {last:.3}, eval {}",
                    tprs.join(" ")
                );
            }
            Err(e) => println!("lr={lr} s={scale} m={margin}: FAILED {e}"),
        }
    }
}
