//! Oracles comparing population updates against per-member runs and
//! chained single steps.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use popvec_core::algos::sac::{SacConfig, SacHyper, SacMemberHyper, SacState};
use popvec_core::algos::td3::{Td3Config, Td3Hyper, Td3MemberHyper, Td3State};
use popvec_core::algos::{update_k_steps, Agent, TransitionBatch};
use popvec_core::evolve::{sample_hyper, HyperPrior};
use popvec_core::mlp::PopMlp;
use popvec_core::rng::{domain, member_streams, stream, StreamRng};
use popvec_core::PopTensor;
use rand::{Rng, SeedableRng};

pub fn batches(
    seed: u64,
    count: usize,
    n: usize,
    b: usize,
    ds: usize,
    da: usize,
) -> Vec<TransitionBatch<f64>> {
    let mut r = StreamRng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| PopTensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    (0..count)
        .map(|_| TransitionBatch {
            obs: t(&[n, b, ds]),
            action: t(&[n, b, da]),
            reward: t(&[n, b, 1]),
            next_obs: t(&[n, b, ds]),
            done: PopTensor::zeros(&[n, b, 1]),
        })
        .collect()
}

fn member_diff(a: &PopMlp<f64>, i: usize, b: &PopMlp<f64>) -> f64 {
    a.flatten_member(i)
        .unwrap()
        .iter()
        .zip(b.flatten_member(0).unwrap())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn td3_hypers(n: usize, seed: u64) -> Td3Hyper {
    let mut rng = stream(seed, domain::EVOLVE, 0, 0);
    Td3Hyper {
        members: (0..n)
            .map(|_| sample_hyper(&HyperPrior::td3(), Td3MemberHyper::default(), &mut rng).unwrap())
            .collect(),
    }
}

pub fn sac_hypers(n: usize, da: usize, seed: u64) -> SacHyper {
    let mut rng = stream(seed, domain::EVOLVE, 0, 0);
    SacHyper {
        members: (0..n)
            .map(|_| {
                sample_hyper(
                    &HyperPrior::sac(da),
                    SacMemberHyper::for_action_dim(da),
                    &mut rng,
                )
                .unwrap()
            })
            .collect(),
    }
}

fn td3_nets(s: &Td3State<f64>) -> Vec<&PopMlp<f64>> {
    let mut v = vec![&s.policy, &s.target_policy];
    v.extend(s.critics.iter());
    v.extend(s.target_critics.iter());
    v
}

fn sac_nets(s: &SacState<f64>) -> Vec<&PopMlp<f64>> {
    let mut v = vec![&s.policy];
    v.extend(s.critics.iter());
    v.extend(s.target_critics.iter());
    v
}

/// Max |Δ| between an `n`-member TD3 population and `n` single-member runs
/// over `steps` updates, checked after every step.
pub fn td3_vectorized_vs_sequential(n: usize, steps: usize, seed: u64) -> f64 {
    let cfg = Td3Config::desk(3, 2, 1.0);
    let hyper = td3_hypers(n, seed);
    let data = batches(seed, steps, n, 32, 3, 2);
    let mut pop = Td3State::<f64>::new(&cfg, n, seed).unwrap();
    let mut singles: Vec<_> = (0..n).map(|i| pop.select_members(&[i]).unwrap()).collect();
    let mut rngs = member_streams(seed, domain::UPDATE, n);
    let mut single_rngs: Vec<Vec<StreamRng>> = rngs.iter().map(|r| vec![r.clone()]).collect();
    let hs: Vec<_> = (0..n).map(|i| hyper.select_members(&[i])).collect();
    let mut worst = 0.0f64;
    for b in &data {
        pop.update_step(b, &hyper, &mut rngs).unwrap();
        for i in 0..n {
            let bi = b.select_members(&[i]).unwrap();
            singles[i]
                .update_step(&bi, &hs[i], &mut single_rngs[i])
                .unwrap();
            for (a, s) in td3_nets(&pop).into_iter().zip(td3_nets(&singles[i])) {
                worst = worst.max(member_diff(a, i, s));
            }
        }
    }
    worst
}

pub fn sac_vectorized_vs_sequential(n: usize, steps: usize, seed: u64) -> f64 {
    let cfg = SacConfig::desk(3, 2, 1.0);
    let hyper = sac_hypers(n, 2, seed);
    let data = batches(seed, steps, n, 32, 3, 2);
    let mut pop = SacState::<f64>::new(&cfg, n, seed).unwrap();
    let mut singles: Vec<_> = (0..n).map(|i| pop.select_members(&[i]).unwrap()).collect();
    let mut rngs = member_streams(seed, domain::UPDATE, n);
    let mut single_rngs: Vec<Vec<StreamRng>> = rngs.iter().map(|r| vec![r.clone()]).collect();
    let hs: Vec<_> = (0..n).map(|i| hyper.select_members(&[i])).collect();
    let mut worst = 0.0f64;
    for b in &data {
        pop.update_step(b, &hyper, &mut rngs).unwrap();
        for i in 0..n {
            let bi = b.select_members(&[i]).unwrap();
            singles[i]
                .update_step(&bi, &hs[i], &mut single_rngs[i])
                .unwrap();
            for (a, s) in sac_nets(&pop).into_iter().zip(sac_nets(&singles[i])) {
                worst = worst.max(member_diff(a, i, s));
            }
            let la = (pop.log_alpha.data()[i] - singles[i].log_alpha.data()[0]).abs();
            worst = worst.max(la);
        }
    }
    worst
}

pub struct KStepReport {
    pub bitwise_equal: bool,
    pub k_call: Duration,
    pub chained_with_export: Duration,
}

/// One `k`-step call against `k` chained single calls, each followed by a
/// state export (clone to the caller). Timings are minima over `reps`
/// interleaved runs.
pub fn k_step(n: usize, k: usize, reps: usize, seed: u64) -> KStepReport {
    let cfg = Td3Config::desk(3, 2, 1.0);
    let hyper = Td3Hyper::uniform(n, Td3MemberHyper::default());
    let data = batches(seed, k, n, 64, 3, 2);
    let base = Td3State::<f64>::new(&cfg, n, seed).unwrap();
    let base_rngs = member_streams(seed, domain::UPDATE, n);

    let run_k = || {
        let mut st = base.clone();
        let mut rngs = base_rngs.clone();
        let mut it = data.iter().cloned();
        let t = Instant::now();
        update_k_steps(&mut st, || it.next(), k, &hyper, &mut rngs).unwrap();
        (t.elapsed(), st)
    };
    let run_chain = || {
        let mut st = base.clone();
        let mut rngs = base_rngs.clone();
        let mut exported = Vec::with_capacity(k);
        let t = Instant::now();
        for b in &data {
            let mut it = std::iter::once(b.clone());
            update_k_steps(&mut st, || it.next(), 1, &hyper, &mut rngs).unwrap();
            exported.push(st.clone());
        }
        let el = t.elapsed();
        drop(exported);
        (el, st)
    };

    let (_, a) = run_k();
    let (_, b) = run_chain();
    let bitwise_equal = a == b;
    // Interleaved so drift hits both sides alike; minima discard
    // scheduler stalls, which only ever add time.
    let (mut tk, mut tc) = (Duration::MAX, Duration::MAX);
    for _ in 0..reps {
        tk = tk.min(run_k().0);
        tc = tc.min(run_chain().0);
    }
    KStepReport {
        bitwise_equal,
        k_call: tk,
        chained_with_export: tc,
    }
}
