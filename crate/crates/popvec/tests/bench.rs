use popvec::bench::{audit_modes, bench_update, BenchMode, BenchSpec};
use popvec::config::Algorithm;
use popvec::Error;

fn spec(mode: BenchMode, n: usize) -> BenchSpec {
    BenchSpec {
        mode,
        n,
        k: 5,
        reps: 3,
        ..BenchSpec::default()
    }
}

#[test]
fn vectorized_time_grows_with_population() {
    let medians: Vec<f64> = [1, 8, 32]
        .iter()
        .map(|&n| {
            bench_update(&spec(BenchMode::Vectorized, n))
                .unwrap()
                .median_ms
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[0] < w[1]), "{medians:?}");
}

#[test]
fn results_are_well_formed() {
    for mode in [
        BenchMode::Sequential,
        BenchMode::Vectorized,
        BenchMode::ParallelThreads,
    ] {
        let r = bench_update(&spec(mode, 3)).unwrap();
        assert_eq!(r.times_ms.len(), 3);
        assert!(r.median_ms > 0.0 && r.iqr_ms >= 0.0 && r.warmup_ms > 0.0);
        assert_eq!(r.kernel_launches.is_some(), mode == BenchMode::Vectorized);
    }
}

#[test]
fn every_mode_computes_the_same_update() {
    for algorithm in [Algorithm::Td3, Algorithm::Sac] {
        let d = audit_modes(&BenchSpec {
            algorithm,
            n: 4,
            k: 10,
            ..BenchSpec::default()
        })
        .unwrap();
        assert!(d <= 1e-10, "{algorithm:?}: {d:e}");
    }
}

#[test]
fn budget_and_repetitions_are_enforced() {
    let big = BenchSpec {
        memory_budget: 1 << 20,
        n: 64,
        ..spec(BenchMode::Vectorized, 64)
    };
    assert!(matches!(bench_update(&big), Err(Error::Resource(_))));
    let few = BenchSpec {
        reps: 2,
        ..spec(BenchMode::Vectorized, 1)
    };
    assert!(bench_update(&few).is_err());
}
