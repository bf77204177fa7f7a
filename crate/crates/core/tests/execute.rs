use std::collections::HashMap;

use ditpar_core::execute::{
    auto_warmup, build_toy_model, divergence, initial_latent, run_distrifusion, run_distrifusion_reference,
    run_pipefusion, run_pipefusion_reference, serial_reference, Mat, RunSpec, ToyDiT,
};
use ditpar_core::freshness::freshness_map;
use ditpar_core::schedule::{build_pipefusion_schedule, SlotKind};
use proptest::prelude::*;

fn reference(seed: u64) -> (ToyDiT, Mat) {
    (build_toy_model(seed, 4, 32, 4, 4).unwrap(), initial_latent(seed, 64, 32))
}

fn spec(steps: usize, warmup: usize, workers: usize, patches: usize) -> RunSpec {
    RunSpec {
        steps,
        warmup,
        workers,
        patches,
        step_size: 0.05,
    }
}

#[test]
fn golden_divergences_seed_zero() {
    let (toy, x) = reference(0);
    let serial = serial_reference(&toy, &x, 20, 0.05).unwrap().final_state.x;
    let s = spec(20, 1, 4, 4);
    let pf = divergence(&run_pipefusion(&toy, &x, &s).unwrap().final_state.x, &serial).unwrap();
    let df = divergence(&run_distrifusion(&toy, &x, &s).unwrap().final_state.x, &serial).unwrap();
    assert!((pf - 9.380224343902e-3).abs() < 1e-6, "{pf}");
    assert!((df - 1.587599719353e-2).abs() < 1e-6, "{df}");
}

#[test]
fn golden_auto_warmup() {
    let (toy, x) = reference(0);
    let w = auto_warmup(&toy, &x, 20, 0.05, 0.05).unwrap();
    assert_eq!(w.warmup, 14);
    assert!(w.threshold_met);
}

fn median_divergences(warmup: usize) -> (f64, f64) {
    let mut pf = Vec::new();
    let mut df = Vec::new();
    for seed in 0..10 {
        let (toy, x) = reference(seed);
        let serial = serial_reference(&toy, &x, 20, 0.05).unwrap().final_state.x;
        let s = spec(20, warmup, 4, 4);
        pf.push(divergence(&run_pipefusion(&toy, &x, &s).unwrap().final_state.x, &serial).unwrap());
        df.push(divergence(&run_distrifusion(&toy, &x, &s).unwrap().final_state.x, &serial).unwrap());
    }
    pf.sort_by(f64::total_cmp);
    df.sort_by(f64::total_cmp);
    ((pf[4] + pf[5]) / 2.0, (df[4] + df[5]) / 2.0)
}

#[test]
fn more_warmup_helps_once_buffers_are_real() {
    // W = 0 attends to zero buffers, which this toy tolerates better than one-step-old data;
    // the ordering is only asserted from W = 1 on.
    let runs: Vec<(usize, (f64, f64))> = [1, 2, 4, 8, 20].iter().map(|&w| (w, median_divergences(w))).collect();
    for pair in runs.windows(2) {
        let ((w0, (pf0, df0)), (w1, (pf1, df1))) = (pair[0], pair[1]);
        assert!(pf1 <= pf0 && df1 <= df0, "W={w0}->{w1}: {pf0}->{pf1}, {df0}->{df1}");
    }
    for (w, (pf, df)) in &runs {
        assert!(pf <= df, "W={w}: pipefusion {pf} above distrifusion {df}");
    }
    assert_eq!(runs.last().unwrap().1, (0.0, 0.0));
}

#[test]
fn read_pattern_matches_freshness_map() {
    let toy = build_toy_model(5, 12, 16, 2, 2).unwrap();
    let x = initial_latent(5, 60, 16);
    for (n, m, warmup) in [(4, 4, 0), (4, 4, 2), (2, 4, 1), (4, 2, 0), (3, 5, 1)] {
        let out = run_pipefusion(&toy, &x, &spec(6, warmup, n, m)).unwrap();
        let sched = build_pipefusion_schedule(n, m, 6, warmup).unwrap();
        let map = freshness_map(&sched);
        let mut want: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for ms in sched.micro_steps.iter().filter(|m| m.kind == SlotKind::Steady) {
            let fresh = map
                .entries
                .iter()
                .filter(|e| e.slot == ms.slot && e.device == ms.device && e.age == 0)
                .count();
            want.insert((ms.device, ms.timestep.unwrap(), ms.patch.unwrap()), fresh);
        }
        assert_eq!(out.fresh_reads.len(), want.len(), "n={n} m={m} w={warmup}");
        for r in &out.fresh_reads {
            assert_eq!(Some(&r.fresh), want.get(&(r.device, r.timestep, r.patch)), "n={n} m={m} w={warmup} {r:?}");
        }
    }
}

#[test]
fn repeated_threaded_runs_are_identical() {
    let (toy, x) = reference(3);
    let s = spec(8, 1, 4, 8);
    let pf = run_pipefusion(&toy, &x, &s).unwrap();
    let df = run_distrifusion(&toy, &x, &s).unwrap();
    for _ in 0..20 {
        assert_eq!(run_pipefusion(&toy, &x, &s).unwrap(), pf);
        assert_eq!(run_distrifusion(&toy, &x, &s).unwrap(), df);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn threads_agree_with_interpreters(
        seed in 0u64..1000,
        n in prop::sample::select(vec![1usize, 2, 4]),
        m in 1usize..=8,
        steps in 1usize..=5,
        warmup_frac in 0.0f64..=1.0,
    ) {
        let warmup = (warmup_frac * steps as f64).floor() as usize;
        let toy = build_toy_model(seed, 4, 16, 2, 2).unwrap();
        let x = initial_latent(seed, 8 * m, 16);
        let s = spec(steps, warmup, n, m);
        prop_assert_eq!(run_pipefusion(&toy, &x, &s).unwrap(), run_pipefusion_reference(&toy, &x, &s).unwrap());
        let x = initial_latent(seed, 8 * n, 16);
        prop_assert_eq!(
            run_distrifusion(&toy, &x, &s).unwrap(),
            run_distrifusion_reference(&toy, &x, &s).unwrap()
        );
    }

    #[test]
    fn divergence_stays_small_and_finite(seed in 0u64..1000, warmup in 0usize..=6) {
        let toy = build_toy_model(seed, 4, 16, 2, 2).unwrap();
        let x = initial_latent(seed, 16, 16);
        let serial = serial_reference(&toy, &x, 6, 0.05).unwrap().final_state.x;
        let out = run_pipefusion(&toy, &x, &spec(6, warmup, 2, 4)).unwrap();
        prop_assert!(out.final_state.x.is_finite());
        let d = divergence(&out.final_state.x, &serial).unwrap();
        prop_assert!(d < 0.5, "divergence {}", d);
        prop_assert_eq!(d == 0.0, warmup == 6);
    }
}
