//! Central finite-difference checks for every analytic backward rule.
//! Each case returns the worst relative error over its random instances.

#![allow(dead_code)]

use popvec_core::algos::sac::{squashed_gaussian, SacConfig, SacState};
use popvec_core::algos::td3::{Td3Config, Td3Hyper, Td3MemberHyper, Td3State};
use popvec_core::algos::{CriticMode, TransitionBatch};
use popvec_core::evolve::dvd::dvd_loss;
use popvec_core::mlp::{init_pop_mlp, OutputActivation, PopMlp};
use popvec_core::rng::{domain, member_streams, StreamRng};
use popvec_core::tensor::{
    activation, activation_backward, concat_last, pop_add_bias, pop_add_bias_backward, pop_matmul,
    pop_matmul_backward, Activation,
};
use popvec_core::PopTensor;
use rand::{Rng, SeedableRng};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 20;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let d = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let s = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if s < 1e-12 {
        d
    } else {
        d / s
    }
}

pub fn numeric_grad(x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn flat(net: &PopMlp<f64>) -> Vec<f64> {
    net.tensors().flat_map(|t| t.data().to_vec()).collect()
}

pub fn set_flat(net: &mut PopMlp<f64>, v: &[f64]) {
    let mut at = 0;
    for t in net.tensors_mut() {
        let n = t.data().len();
        t.data_mut().copy_from_slice(&v[at..at + n]);
        at += n;
    }
}

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut StreamRng, shape: &[usize]) -> PopTensor<f64> {
    PopTensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Finite differences are only meaningful away from kinks; instances whose
/// ReLU inputs (or twin-critic minimum) sit closer than this are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

fn worst(mut f: impl FnMut(u64) -> Option<f64>) -> f64 {
    let mut out = 0.0f64;
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < INSTANCES {
        if let Some(e) = f(seed) {
            out = out.max(e);
            accepted += 1;
        }
        seed += 1;
        assert!(seed < 50 * INSTANCES, "could not draw kink-free instances");
    }
    out
}

/// Smallest |pre-activation| over the hidden (ReLU) layers.
pub fn relu_margin(net: &PopMlp<f64>, x: &PopTensor<f64>) -> f64 {
    let (_, cache) = net.forward(x).unwrap();
    let pre = cache.pre_activations();
    pre[..pre.len() - 1]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

fn kink_free(m: f64) -> bool {
    m > KINK_MARGIN
}

/// Critic input `(s, a)`, folded onto `critic_n` members.
fn joint(obs: &PopTensor<f64>, action: &PopTensor<f64>, critic_n: usize) -> PopTensor<f64> {
    let x = concat_last(obs, action).unwrap();
    let s = x.shape().to_vec();
    x.reshape(&[critic_n, s[0] * s[1] / critic_n, s[2]])
        .unwrap()
}

fn dot(a: &PopTensor<f64>, b: &PopTensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn matmul() -> f64 {
    worst(|s| {
        let mut r = rng(s);
        let (n, b, i, o) = (
            r.random_range(1..4),
            r.random_range(1..5),
            r.random_range(1..5),
            r.random_range(1..5),
        );
        let x = rand_tensor(&mut r, &[n, b, i]);
        let w = rand_tensor(&mut r, &[n, i, o]);
        let g = rand_tensor(&mut r, &[n, b, o]);
        let (gx, gw) = pop_matmul_backward(&g, &x, &w).unwrap();
        let nx = numeric_grad(x.data(), |v| {
            dot(
                &pop_matmul(&PopTensor::from_vec(x.shape(), v.to_vec()).unwrap(), &w).unwrap(),
                &g,
            )
        });
        let nw = numeric_grad(w.data(), |v| {
            dot(
                &pop_matmul(&x, &PopTensor::from_vec(w.shape(), v.to_vec()).unwrap()).unwrap(),
                &g,
            )
        });
        Some(rel_err(gx.data(), &nx).max(rel_err(gw.data(), &nw)))
    })
}

pub fn bias() -> f64 {
    worst(|s| {
        let mut r = rng(100 + s);
        let (n, b, o) = (
            r.random_range(1..4),
            r.random_range(1..5),
            r.random_range(1..5),
        );
        let x = rand_tensor(&mut r, &[n, b, o]);
        let bias = rand_tensor(&mut r, &[n, 1, o]);
        let g = rand_tensor(&mut r, &[n, b, o]);
        let gb = pop_add_bias_backward(&g).unwrap();
        let nb = numeric_grad(bias.data(), |v| {
            dot(
                &pop_add_bias(&x, &PopTensor::from_vec(bias.shape(), v.to_vec()).unwrap()).unwrap(),
                &g,
            )
        });
        Some(rel_err(gb.data(), &nb))
    })
}

pub fn activations() -> f64 {
    worst(|s| {
        let mut r = rng(200 + s);
        let mut e: f64 = 0.0;
        for kind in [Activation::Relu, Activation::Tanh] {
            // Keep inputs away from the ReLU kink.
            let x = PopTensor::from_fn(&[2, 3, 4], |_| {
                let v: f64 = r.random_range(0.01..1.5);
                if r.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            let g = rand_tensor(&mut r, &[2, 3, 4]);
            let a = activation_backward(&g, &x, kind).unwrap();
            let num = numeric_grad(x.data(), |v| {
                dot(
                    &activation(&PopTensor::from_vec(x.shape(), v.to_vec()).unwrap(), kind),
                    &g,
                )
            });
            e = e.max(rel_err(a.data(), &num));
        }
        Some(e)
    })
}

pub fn mlp() -> f64 {
    worst(|s| {
        let mut r = rng(300 + s);
        let out = if s % 2 == 0 {
            OutputActivation::Tanh
        } else {
            OutputActivation::Identity
        };
        let net = init_pop_mlp::<f64>(2, &[3, 6, 5, 2], out, s).unwrap();
        let x = rand_tensor(&mut r, &[2, 4, 3]);
        let g = rand_tensor(&mut r, &[2, 4, 2]);
        if !kink_free(relu_margin(&net, &x)) {
            return None;
        }
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, gx) = net.backward(&cache, &g).unwrap();
        let p0 = flat(&net);
        let mut probe = net.clone();
        let np = numeric_grad(&p0, |v| {
            set_flat(&mut probe, v);
            dot(&probe.predict(&x).unwrap(), &g)
        });
        let nx = numeric_grad(x.data(), |v| {
            dot(
                &net.predict(&PopTensor::from_vec(x.shape(), v.to_vec()).unwrap())
                    .unwrap(),
                &g,
            )
        });
        Some(rel_err(&flat(&grads), &np).max(rel_err(gx.data(), &nx)))
    })
}

fn small_td3(mode: CriticMode, n: usize, seed: u64) -> Td3State<f64> {
    let cfg = Td3Config {
        hidden: vec![6, 5],
        ..Td3Config::desk(3, 2, 1.5)
    }
    .with_mode(mode);
    Td3State::new(&cfg, n, seed).unwrap()
}

pub fn random_batch(
    r: &mut StreamRng,
    n: usize,
    b: usize,
    ds: usize,
    da: usize,
) -> TransitionBatch<f64> {
    TransitionBatch {
        obs: rand_tensor(r, &[n, b, ds]),
        action: rand_tensor(r, &[n, b, da]),
        reward: rand_tensor(r, &[n, b, 1]),
        next_obs: rand_tensor(r, &[n, b, ds]),
        done: PopTensor::from_fn(&[n, b, 1], |_| if r.random_bool(0.1) { 1.0 } else { 0.0 }),
    }
}

fn td3_critic_case(mode: CriticMode, seed: u64) -> Option<f64> {
    let mut r = rng(seed);
    let n = 3;
    let st = small_td3(mode, n, seed);
    let b = random_batch(&mut r, n, 4, 3, 2);
    let mut rngs = member_streams(seed, domain::UPDATE, n);
    let y = st
        .critic_target(
            &b,
            &Td3Hyper::uniform(n, Td3MemberHyper::default()),
            &mut rngs,
        )
        .unwrap();
    let x = joint(&b.obs, &b.action, st.critic_population());
    if !st.critics.iter().all(|c| kink_free(relu_margin(c, &x))) {
        return None;
    }
    let (_, [g1, g2]) = st.critic_loss_grads(&b.obs, &b.action, &y).unwrap();
    let mut e: f64 = 0.0;
    for (c, g) in [(0, g1), (1, g2)] {
        let mut probe = st.clone();
        let num = numeric_grad(&flat(&st.critics[c]), |v| {
            set_flat(&mut probe.critics[c], v);
            let (l, _) = probe.critic_loss_grads(&b.obs, &b.action, &y).unwrap();
            match mode {
                CriticMode::Independent => l.iter().sum(),
                CriticMode::SharedCritic => l.iter().sum::<f64>() / n as f64,
            }
        });
        e = e.max(rel_err(&flat(&g), &num));
    }
    Some(e)
}

pub fn td3_critic() -> f64 {
    worst(|s| {
        Some(
            td3_critic_case(CriticMode::Independent, 400 + s)?
                .max(td3_critic_case(CriticMode::SharedCritic, 450 + s)?),
        )
    })
}

pub fn td3_policy() -> f64 {
    worst(|s| {
        let mut r = rng(500 + s);
        let mode = if s % 2 == 0 {
            CriticMode::Independent
        } else {
            CriticMode::SharedCritic
        };
        let st = small_td3(mode, 3, s);
        let obs = rand_tensor(&mut r, &[3, 4, 3]);
        let a = st
            .policy
            .predict(&obs)
            .unwrap()
            .map(|v| v * st.action_bound);
        let x = joint(&obs, &a, st.critic_population());
        if !kink_free(relu_margin(&st.policy, &obs).min(relu_margin(&st.critics[0], &x))) {
            return None;
        }
        let (_, g) = st.policy_loss_grads(&obs).unwrap();
        let mut probe = st.clone();
        let num = numeric_grad(&flat(&st.policy), |v| {
            set_flat(&mut probe.policy, v);
            probe.policy_loss_grads(&obs).unwrap().0.iter().sum()
        });
        Some(rel_err(&flat(&g), &num))
    })
}

fn small_sac(n: usize, seed: u64) -> SacState<f64> {
    let cfg = SacConfig {
        hidden: vec![6, 5],
        initial_log_alpha: -0.7,
        ..SacConfig::desk(3, 2, 1.5)
    };
    SacState::new(&cfg, n, seed).unwrap()
}

pub fn sac_critic() -> f64 {
    worst(|s| {
        let mut r = rng(600 + s);
        let st = small_sac(2, s);
        let b = random_batch(&mut r, 2, 4, 3, 2);
        let y = rand_tensor(&mut r, &[2, 4, 1]);
        let x = joint(&b.obs, &b.action, 2);
        if !st.critics.iter().all(|c| kink_free(relu_margin(c, &x))) {
            return None;
        }
        let (_, [g1, g2]) = st.critic_loss_grads(&b.obs, &b.action, &y).unwrap();
        let mut e: f64 = 0.0;
        for (c, g) in [(0, g1), (1, g2)] {
            let mut probe = st.clone();
            let num = numeric_grad(&flat(&st.critics[c]), |v| {
                set_flat(&mut probe.critics[c], v);
                probe
                    .critic_loss_grads(&b.obs, &b.action, &y)
                    .unwrap()
                    .0
                    .iter()
                    .sum()
            });
            e = e.max(rel_err(&flat(&g), &num));
        }
        Some(e)
    })
}

pub fn sac_policy() -> f64 {
    worst(|s| {
        let mut r = rng(700 + s);
        let st = small_sac(2, s);
        let obs = rand_tensor(&mut r, &[2, 4, 3]);
        let eps = rand_tensor(&mut r, &[2, 4, 2]);
        let head = st.policy.predict(&obs).unwrap();
        let a = squashed_gaussian(&head, &eps, st.action_bound)
            .unwrap()
            .action;
        let x = joint(&obs, &a, 2);
        let (q1, q2) = (
            st.critics[0].predict(&x).unwrap(),
            st.critics[1].predict(&x).unwrap(),
        );
        let gap = q1
            .data()
            .iter()
            .zip(q2.data())
            .map(|(a, b)| (a - b).abs())
            .fold(f64::INFINITY, f64::min);
        let m = relu_margin(&st.policy, &obs)
            .min(relu_margin(&st.critics[0], &x))
            .min(relu_margin(&st.critics[1], &x))
            .min(gap);
        if !kink_free(m) {
            return None;
        }
        let (_, _, g) = st.policy_loss_grads(&obs, &eps).unwrap();
        let mut probe = st.clone();
        let num = numeric_grad(&flat(&st.policy), |v| {
            set_flat(&mut probe.policy, v);
            probe.policy_loss_grads(&obs, &eps).unwrap().0.iter().sum()
        });
        Some(rel_err(&flat(&g), &num))
    })
}

pub fn tanh_gaussian_log_prob() -> f64 {
    worst(|s| {
        let mut r = rng(800 + s);
        let head = PopTensor::from_fn(&[2, 3, 4], |k| {
            if k % 4 >= 2 {
                r.random_range(-2.0..1.0)
            } else {
                r.random_range(-1.5..1.5)
            }
        });
        let eps = rand_tensor(&mut r, &[2, 3, 2]);
        let ga = rand_tensor(&mut r, &[2, 3, 2]);
        let gl = rand_tensor(&mut r, &[2, 3, 1]);
        let sq = squashed_gaussian(&head, &eps, 2.0).unwrap();
        let g = sq.backward(&ga, &gl);
        let num = numeric_grad(head.data(), |v| {
            let q = squashed_gaussian(
                &PopTensor::from_vec(head.shape(), v.to_vec()).unwrap(),
                &eps,
                2.0,
            )
            .unwrap();
            dot(&q.action, &ga) + dot(&q.log_prob, &gl)
        });
        Some(rel_err(g.data(), &num))
    })
}

pub fn dvd_logdet() -> f64 {
    worst(|s| {
        let mut r = rng(900 + s);
        let e = rand_tensor(&mut r, &[4, 5]);
        let (_, g) = dvd_loss(&e, 1.3, 1e-6, 0.8).unwrap();
        let num = numeric_grad(e.data(), |v| {
            dvd_loss(
                &PopTensor::from_vec(e.shape(), v.to_vec()).unwrap(),
                1.3,
                1e-6,
                0.8,
            )
            .unwrap()
            .0
        });
        Some(rel_err(g.data(), &num))
    })
}

/// All cases as `(name, worst relative error)`.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("pop_matmul", matmul()),
        ("pop_add_bias", bias()),
        ("activations", activations()),
        ("pop_mlp", mlp()),
        ("td3_critic_loss", td3_critic()),
        ("td3_policy_loss", td3_policy()),
        ("sac_critic_loss", sac_critic()),
        ("sac_policy_loss", sac_policy()),
        ("tanh_gaussian_log_prob", tanh_gaussian_log_prob()),
        ("dvd_logdet", dvd_logdet()),
    ]
}

/// Shared-critic gradient against the mean of per-member gradients; worst
/// max-abs difference over the instances.
pub fn shared_critic_linearity() -> f64 {
    worst(|s| {
        let mut r = rng(1000 + s);
        let n = 4;
        let st = small_td3(CriticMode::SharedCritic, n, s);
        let b = random_batch(&mut r, n, 5, 3, 2);
        let mut rngs = member_streams(s, domain::UPDATE, n);
        let y = st
            .critic_target(
                &b,
                &Td3Hyper::uniform(n, Td3MemberHyper::default()),
                &mut rngs,
            )
            .unwrap();
        let (_, shared) = st.critic_loss_grads(&b.obs, &b.action, &y).unwrap();
        let mut single = st.clone();
        single.policy = st.policy.select_members(&[0]).unwrap();
        let mut mean = [
            vec![0.0; flat(&shared[0]).len()],
            vec![0.0; flat(&shared[1]).len()],
        ];
        for p in 0..n {
            let (obs, act, yp) = (
                b.obs.select_members(&[p]).unwrap(),
                b.action.select_members(&[p]).unwrap(),
                y.select_members(&[p]).unwrap(),
            );
            let (_, g) = single.critic_loss_grads(&obs, &act, &yp).unwrap();
            for c in 0..2 {
                for (m, v) in mean[c].iter_mut().zip(flat(&g[c])) {
                    *m += v / n as f64;
                }
            }
        }
        let d = (0..2)
            .flat_map(|c| {
                flat(&shared[c])
                    .into_iter()
                    .zip(mean[c].clone())
                    .map(|(a, b)| (a - b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        Some(d)
    })
}
