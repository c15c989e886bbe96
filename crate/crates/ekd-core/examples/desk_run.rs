//! Scratch driver for eyeballing desk-scale training behavior.

use ekd_core::trainer::{
    distill_student, train_baseline_relation_l2, train_teacher, RunMode, TrainConfig,
};

fn main() {
    let t0 = std::time::Instant::now();
    let out = std::env::temp_dir().join("ekd-desk-run");
    std::fs::remove_dir_all(&out).ok();

    let teacher_config = TrainConfig {
        mode: RunMode::Teacher,
        ..TrainConfig::default()
    };
    let teacher = train_teacher(&teacher_config, &out.join("teacher")).unwrap();
    println!("teacher trained in {:?}", t0.elapsed());
    for p in &teacher.final_eval {
        println!("  teacher fpr={:.0e} tpr={:.4} thr={:.4}", p.fpr, p.tpr, p.threshold);
    }

    for seed in [1u64, 2, 3] {
        let t1 = std::time::Instant::now();
        let mk = |mode: RunMode| TrainConfig {
            mode,
            seed,
            ..TrainConfig::default()
        };
        let ekd = distill_student(
            &mk(RunMode::Distill),
            &teacher.checkpoint_path,
            &out.join(format!("ekd-{seed}")),
        )
        .unwrap();
        let base = distill_student(
            &mk(RunMode::BaselineArcface),
            &teacher.checkpoint_path,
            &out.join(format!("arc-{seed}")),
        )
        .unwrap();
        let l2 = train_baseline_relation_l2(
            &mk(RunMode::BaselineRelationL2),
            &teacher.checkpoint_path,
            &out.join(format!("l2-{seed}")),
        )
        .unwrap();
        let at = |points: &[ekd_core::metrics::OperatingPoint], fpr: f64| {
            points
                .iter()
                .find(|p| (p.fpr / fpr - 1.0).abs() < 1e-9)
                .map(|p| p.tpr)
                .unwrap_or(f64::NAN)
        };
        println!(
            "seed {seed} ({:?}): tpr@1e-3 ekd={:.4} arc={:.4} l2={:.4} | tpr@1e-2 ekd={:.4} arc={:.4} l2={:.4} | tail ratio ekd={:.4} arc={:.4}",
            t1.elapsed(),
            at(&ekd.final_eval, 1e-3),
            at(&base.final_eval, 1e-3),
            at(&l2.final_eval, 1e-3),
            at(&ekd.final_eval, 1e-2),
            at(&base.final_eval, 1e-2),
            at(&l2.final_eval, 1e-2),
            ekd.metrics.tail_critical_ratio(0.1),
            base.metrics.tail_critical_ratio(0.1),
        );
    }
    println!("total {:?}", t0.elapsed());
}
