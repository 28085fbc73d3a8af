use popvec_core::envs::{Env, EnvKind, ARENA};
use popvec_core::evolve::dvd::{dvd_loss, LambdaSchedule};
use popvec_core::evolve::{CemState, PbtState};
use popvec_core::mlp::soft_update;
use popvec_core::replay::{
    sample_batch, BufferMode, Guard, RatioController, ReplayBuffer, Transition,
};
use popvec_core::rng::{domain, member_streams, stream};
use popvec_core::tensor::pop_matmul;
use popvec_core::PopTensor;
use proptest::prelude::*;

fn tagged(tag: f64) -> Transition<f64> {
    Transition {
        obs: vec![tag, tag],
        action: vec![tag],
        reward: tag,
        next_obs: vec![tag, -tag],
        done: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_update_contracts_by_one_minus_tau(
        vals in prop::collection::vec(-5.0f64..5.0, 6),
        online in prop::collection::vec(-5.0f64..5.0, 6),
        tau in 0.01f64..1.0,
    ) {
        let t = PopTensor::from_vec(&[2, 3], vals).unwrap();
        let o = PopTensor::from_vec(&[2, 3], online).unwrap();
        let gap = |a: &PopTensor<f64>| a.data().iter().zip(o.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let next = soft_update(&t, &o, tau).unwrap();
        prop_assert!((gap(&next) - (1.0 - tau) * gap(&t)).abs() <= 1e-12 * (1.0 + gap(&t)));
    }

    #[test]
    fn fifo_keeps_most_recent(cap in 1usize..12, pushes in 0usize..40) {
        let mut b = ReplayBuffer::new(cap, 2, 1).unwrap();
        for k in 0..pushes {
            b.push(&tagged(k as f64)).unwrap();
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let start = pushes.saturating_sub(cap);
        for (i, k) in (start..pushes).enumerate() {
            prop_assert_eq!(b.get(i).unwrap().reward, k as f64);
        }
    }

    #[test]
    fn rank_is_permutation_equivariant(
        returns in prop::collection::vec(-3i32..3, 1..9),
        seed in any::<u64>(),
    ) {
        let n = returns.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = stream(seed, domain::EVOLVE, 0, 0);
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let mut a = PbtState::new(n, 1, 0.3).unwrap();
        let mut b = PbtState::new(n, 1, 0.3).unwrap();
        for i in 0..n {
            a.record_return(i, returns[i] as f64);
            b.record_return(perm[i], returns[i] as f64);
        }
        let ra = a.rank().unwrap();
        let rb = b.rank().unwrap();
        // Same scores in the same order once ties are resolved by index.
        let sa: Vec<f64> = ra.iter().map(|&i| a.mean_return(i).unwrap()).collect();
        let sb: Vec<f64> = rb.iter().map(|&i| b.mean_return(i).unwrap()).collect();
        prop_assert_eq!(sa, sb);
        for w in rb.windows(2) {
            let (x, y) = (b.mean_return(w[0]).unwrap(), b.mean_return(w[1]).unwrap());
            prop_assert!(x > y || (x == y && w[0] < w[1]));
        }
    }

    #[test]
    fn dvd_loss_is_permutation_invariant(
        vals in prop::collection::vec(-1.0f64..1.0, 12),
        shift in 1usize..4,
    ) {
        let e = PopTensor::from_vec(&[4, 3], vals).unwrap();
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let p = e.select_members(&perm).unwrap();
        let (la, ga) = dvd_loss(&e, 0.9, 1e-6, 1.0).unwrap();
        let (lb, gb) = dvd_loss(&p, 0.9, 1e-6, 1.0).unwrap();
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(gb.member(i), ga.member(src));
        }
    }

    #[test]
    fn cem_symmetric_elites_center_mean(
        centre in prop::collection::vec(-3.0f64..3.0, 3),
        offset in prop::collection::vec(0.0f64..2.0, 3),
    ) {
        let mut s = CemState::new(vec![0.0; 3], 0.1).unwrap();
        let plus: Vec<f64> = centre.iter().zip(&offset).map(|(c, o)| c + o).collect();
        let minus: Vec<f64> = centre.iter().zip(&offset).map(|(c, o)| c - o).collect();
        let cands = vec![plus, vec![100.0; 3], minus, vec![-100.0; 3]];
        s.update(&cands, &[5.0, 0.0, 5.0, -1.0]).unwrap();
        for (m, c) in s.mean.iter().zip(&centre) {
            prop_assert!((m - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }
        prop_assert!(s.var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn schedules_are_monotone(start in 0.0f64..2.0, end in 0.0f64..2.0, horizon in 1u64..500) {
        let s = LambdaSchedule { start, end, horizon };
        let vals: Vec<f64> = (0..horizon + 10).map(|k| s.value(k)).collect();
        let up = end >= start;
        for w in vals.windows(2) {
            let ok = if up { w[1] >= w[0] - 1e-15 } else { w[1] <= w[0] + 1e-15 };
            prop_assert!(ok);
        }
        prop_assert_eq!(s.value(0), start);
    }

    #[test]
    fn matmul_member_isolation(
        x in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 4),
        w in prop::collection::vec(-1.0f64..1.0, 3 * 4 * 2),
        poke in -10.0f64..10.0,
        member in 0usize..3,
    ) {
        let xt = PopTensor::from_vec(&[3, 2, 4], x).unwrap();
        let wt = PopTensor::from_vec(&[3, 4, 2], w).unwrap();
        let base = pop_matmul(&xt, &wt).unwrap();
        let mut w2 = wt.clone();
        w2.member_mut(member)[0] += poke;
        let after = pop_matmul(&xt, &w2).unwrap();
        for m in (0..3).filter(|&m| m != member) {
            prop_assert_eq!(base.member(m), after.member(m));
        }
    }

    #[test]
    fn env_rewards_bounded_and_deterministic(
        seed in any::<u64>(),
        actions in prop::collection::vec(-3.0f64..3.0, 2 * 200),
    ) {
        for kind in [EnvKind::PointMass, EnvKind::Pendulum] {
            let spec = kind.default_spec();
            let (mut a, _) = Env::reset(spec, seed).unwrap();
            let (mut b, _) = Env::reset(spec, seed).unwrap();
            let da = spec.action_dim;
            for t in 0..spec.horizon {
                let u = &actions[t * 2..t * 2 + da];
                let sa = a.step(u).unwrap();
                prop_assert_eq!(&sa, &b.step(u).unwrap());
                prop_assert!(sa.reward <= 0.0);
                if kind == EnvKind::PointMass {
                    prop_assert!(sa.reward >= -4.0 * ARENA);
                }
                prop_assert_eq!(sa.done, t + 1 == spec.horizon);
            }
        }
    }

    #[test]
    fn ratio_guard_never_blocks_both_sides(
        target in 0.1f64..4.0,
        slack in 0.0f64..0.2,
        warmup in 0u32..50,
        n in 1usize..8,
        env in 0u64..2000,
        upd in 0u64..2000,
    ) {
        let mut c = RatioController::new(target, slack, warmup as f64, n).unwrap();
        c.record_env_steps(env);
        c.record_updates(upd);
        prop_assert!(c.check_sample() == Guard::Proceed || c.check_insert() == Guard::Proceed);
    }
}

#[test]
fn per_agent_sampling_stays_in_lane() {
    let bufs: Vec<ReplayBuffer<f64>> = (0..4)
        .map(|m| {
            let mut b = ReplayBuffer::new(64, 2, 1).unwrap();
            for k in 0..50 {
                b.push(&tagged(m as f64 * 1000.0 + k as f64)).unwrap();
            }
            b
        })
        .collect();
    let refs: Vec<&ReplayBuffer<f64>> = bufs.iter().collect();
    let mut rngs = member_streams(1, domain::SAMPLE, 4);
    let mut crossings = 0;
    for _ in 0..100 {
        let batch = sample_batch(&refs, 4, 256, BufferMode::PerAgent, &mut rngs).unwrap();
        for m in 0..4 {
            crossings += batch
                .reward
                .member(m)
                .iter()
                .filter(|&&r| (r / 1000.0).floor() as usize != m)
                .count();
        }
    }
    assert_eq!(crossings, 0);
}

#[test]
fn uniform_sampling_frequencies() {
    let mut b = ReplayBuffer::new(10, 2, 1).unwrap();
    for k in 0..10 {
        b.push(&tagged(k as f64)).unwrap();
    }
    let mut rngs = member_streams(2, domain::SAMPLE, 1);
    let draws = 100_000;
    let batch = sample_batch(&[&b], 1, draws, BufferMode::Shared, &mut rngs).unwrap();
    let mut counts = [0usize; 10];
    for &r in batch.reward.data() {
        counts[r as usize] += 1;
    }
    let p = 0.1;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!(
            (c as f64 - draws as f64 * p).abs() <= 4.0 * sigma,
            "{counts:?}"
        );
    }
}

#[test]
fn cem_sample_mean_converges() {
    let s = CemState::with_schedule(vec![1.0, -2.0, 0.5], 0.5, 0.0, 0.0, 1.0).unwrap();
    let mut rng = stream(5, domain::EVOLVE, 0, 0);
    let n = 100_000;
    let xs = s.sample(n, &mut rng).unwrap();
    for j in 0..3 {
        let m = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        let bound = 3.0 * 0.5f64.sqrt() / (n as f64).sqrt();
        assert!((m - s.mean[j]).abs() <= bound, "coord {j}: {m}");
    }
    let mut r1 = stream(6, domain::EVOLVE, 0, 0);
    let mut r2 = r1.clone();
    assert_eq!(s.sample(3, &mut r1).unwrap(), s.sample(3, &mut r2).unwrap());
}
