//! Desk-scale experiments on the synthetic suites, at reduced sizes.

use taskmerge_core::interference::{rank_sweep, reconstruction_error, row_space_interference, DEFAULT_RATIOS};
use taskmerge_core::linalg::{singular_values, tail_energy};
use taskmerge_core::origin::{fip_abs_objective, mean_origin, rankmin_origin, OriginMode, RankMinConfig};
use taskmerge_core::suites::{ClassificationParams, ClassificationSuite, SharedComponentInstance, SharedComponentParams};
use taskmerge_core::tensor_store::ParamClassifier;
use taskmerge_core::Execution;

fn rankmin_instance(seed: u64) -> SharedComponentInstance {
    let p = SharedComponentParams { rows: 16, cols: 16, tasks: 4, task_rank: 2, shared_rank: 0, ..Default::default() };
    SharedComponentInstance::generate(p, seed).unwrap()
}

#[test]
fn rankmin_lowers_nuclear_sum() {
    let cfg = RankMinConfig::new(200, None).unwrap();
    for seed in 0..3 {
        let inst = rankmin_instance(seed);
        let (origin, trace) = rankmin_origin(&inst.finetuned, &cfg).unwrap();
        let first = trace.first().unwrap();
        let best = trace.best_nuclear().unwrap();
        assert!(best <= 0.9 * first.nuclear_sum, "seed {seed}: {} -> {best}", first.nuclear_sum);
        let start = fip_abs_objective(&mean_origin(&inst.finetuned).unwrap(), &inst.finetuned).unwrap();
        assert!(fip_abs_objective(&origin, &inst.finetuned).unwrap() <= start);
    }
}

#[test]
fn centering_lowers_interference() {
    let mut cells = 0;
    let mut wins = 0;
    for seed in 0..5 {
        let inst = SharedComponentInstance::generate(SharedComponentParams::default(), seed).unwrap();
        let (c, p) = (inst.centered_deltas(), inst.pretrained_deltas());
        for k in 1..=c[0].nrows() {
            cells += 1;
            if row_space_interference(&c, k).unwrap() <= row_space_interference(&p, k).unwrap() {
                wins += 1;
            }
        }
    }
    assert!(wins * 100 >= cells * 95, "{wins}/{cells}");
}

#[test]
fn reconstruction_error_laws() {
    let inst = SharedComponentInstance::generate(SharedComponentParams::default(), 7).unwrap();
    let mean = mean_origin(&inst.finetuned).unwrap();
    let full = inst.finetuned[0].nrows();
    let mut prev = f64::INFINITY;
    let total: f64 = inst.centered_deltas().iter().map(|d| d.norm_squared()).sum();
    for k in 0..=full {
        let r = reconstruction_error(&inst.finetuned, &mean, k).unwrap();
        assert!(r <= prev + 1e-9 * total);
        let tails: f64 = inst.centered_deltas().iter().map(|d| tail_energy(&singular_values(d).unwrap(), k)).sum();
        assert!((r - tails).abs() <= 1e-8 * total.max(1.0));
        prev = r;
    }
    assert!(prev <= 1e-8 * total);
}

#[test]
fn centered_sweep_peaks_inside() {
    let suite = ClassificationSuite::generate(ClassificationParams::default(), 0).unwrap();
    let table = rank_sweep(
        &suite.pretrained,
        &suite.finetuned,
        &|m: &_| suite.evaluate(m),
        &[1.0],
        &DEFAULT_RATIOS,
        &OriginMode::Mean,
        &ParamClassifier::default(),
        Execution::Parallel,
    )
    .unwrap();
    let wa: f64 = table.weight_average.iter().sum::<f64>() / table.weight_average.len() as f64;
    let best = table.best_interior().unwrap();
    for r in table.rows_at(0.0).chain(table.rows_at(1.0)) {
        assert_eq!(r.mean, wa);
    }
    assert!(best.mean >= wa + 0.02, "best {} at ratio {}, endpoints {wa}", best.mean, best.ratio);
}
