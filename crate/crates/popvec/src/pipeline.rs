//! Actor/learner training loop.
//!
//! Threads: one learner (owns the agent), `actor_workers` actors (own the
//! environments), one ingest thread (writes the replay buffers) and one
//! prefetch thread (stages the next burst of batches). Actors read policy
//! snapshots from a [`Mailbox`] and push tagged transitions through a bounded
//! queue of `4·K·N` messages; the ratio guard inside [`SharedReplay`] paces
//! both sides. Every wait is bounded, and a learner that receives no batch
//! within `timeout_s` aborts with a starvation error.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use popvec_core::algos::sac::{squashed_gaussian, SacConfig, SacHyper, SacState};
use popvec_core::algos::td3::{Td3Config, Td3Hyper, Td3State};
use popvec_core::algos::{act, update_k_steps, TransitionBatch};
use popvec_core::envs::{Env, EnvSpec};
use popvec_core::evolve::dvd::{DvdConfig, LambdaSchedule};
use popvec_core::evolve::pbt::pbt_evolve;
use popvec_core::evolve::{sample_hyper, CemState, Dist, HyperPrior, PbtState};
use popvec_core::mlp::PopMlp;
use popvec_core::replay::{Guard, RatioController, Transition};
use popvec_core::rng::{domain, member_streams, stream, StreamRng};
use popvec_core::PopTensor;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::checkpoint::{mlp_checksum, save_checkpoint};
use crate::config::{Algorithm, RunConfig, Strategy};
use crate::error::{Error, Result};
use crate::mailbox::Mailbox;
use crate::metrics::MetricsLog;
use crate::shared_replay::{SharedReplay, Wait};

const POLL: Duration = Duration::from_millis(20);

/// How actors turn policy outputs into actions.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionRule {
    /// `bound·policy(s)` plus Gaussian noise of `noise_std[m]·bound`.
    Deterministic { noise_std: Vec<f32> },
    /// A draw from the squashed Gaussian head.
    Squashed,
}

/// What actors need to act: the policy parameters and how to use them.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    pub policy: PopMlp<f32>,
    pub rule: ActionRule,
    pub bound: f32,
    pub action_dim: usize,
    /// Checksum of the parameters at publish time.
    pub checksum: u64,
}

impl PolicySnapshot {
    pub fn new(policy: PopMlp<f32>, rule: ActionRule, bound: f32, action_dim: usize) -> Self {
        let checksum = mlp_checksum(&policy);
        Self {
            policy,
            rule,
            bound,
            action_dim,
            checksum,
        }
    }

    pub fn verify(&self) -> bool {
        mlp_checksum(&self.policy) == self.checksum
    }
}

/// Messages from actors to the ingest thread.
#[derive(Clone, Debug)]
pub enum Msg {
    Transition {
        member: usize,
        /// 1-based position in the member's stream of transitions.
        seq: u64,
        transition: Transition<f32>,
    },
    EpisodeEnd {
        member: usize,
        episode_return: f64,
    },
}

/// One finished episode as seen by the learner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub member: usize,
    pub episode_return: f64,
    /// Update steps completed when the learner received the episode.
    pub update_steps: u64,
    pub env_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub update_steps: u64,
    pub env_steps: u64,
    pub env_steps_per_member: f64,
    /// Update steps per post-warmup environment step per member.
    pub ratio: f64,
    pub dropped: u64,
    /// Transitions stored per member tag.
    pub transitions_per_member: Vec<u64>,
    /// Transitions that arrived out of their member's sequence.
    pub sequence_gaps: u64,
    pub episodes: Vec<EpisodeRecord>,
    /// Mean of each member's last ten episode returns.
    pub final_mean_returns: Vec<Option<f64>>,
    pub snapshots_published: u64,
    pub evolutions: u64,
    pub cem_generations: u64,
    pub wall_clock_s: f64,
}

/// Knobs that are not part of a run configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Each actor worker exits after this many environment steps.
    pub max_actor_env_steps: Option<u64>,
}

enum Learner {
    Td3 {
        state: Td3State<f32>,
        hyper: Td3Hyper,
    },
    Sac {
        state: SacState<f32>,
        hyper: SacHyper,
    },
}

fn td3_prior(cfg: &RunConfig) -> HyperPrior {
    with_lr_range(HyperPrior::td3(), cfg)
}

fn sac_prior(cfg: &RunConfig, action_dim: usize) -> HyperPrior {
    with_lr_range(HyperPrior::sac(action_dim), cfg)
}

fn with_lr_range(mut prior: HyperPrior, cfg: &RunConfig) -> HyperPrior {
    if let Some([lo, hi]) = cfg.pbt.lr_range {
        for (name, d) in &mut prior.entries {
            if name.ends_with("_lr") {
                *d = Dist::LogUniform { lo, hi };
            }
        }
    }
    prior
}

fn probe_states(spec: &EnvSpec, count: usize, seed: u64) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(count * spec.observation_dim);
    let (mut env, first) = Env::reset(*spec, stream(seed, domain::ENV, u64::MAX, 0).next_u64())?;
    out.extend(first.iter().map(|&v| v as f32));
    for _ in 1..count {
        out.extend(env.next_episode().iter().map(|&v| v as f32));
    }
    Ok(out)
}

impl Learner {
    fn build(cfg: &RunConfig, spec: &EnvSpec) -> Result<Self> {
        let n = cfg.population;
        let (od, ad, bound) = (spec.observation_dim, spec.action_dim, spec.action_bound);
        let mut evolve_rngs = member_streams(cfg.seed, domain::EVOLVE, n);
        Ok(match cfg.algorithm {
            Algorithm::Td3 => {
                let tc = Td3Config {
                    hidden: cfg.hidden.clone(),
                    ..Td3Config::desk(od, ad, bound)
                }
                .with_mode(cfg.mode.into());
                let mut state = Td3State::new(&tc, n, cfg.seed)?;
                if cfg.strategy == Strategy::Dvd {
                    let schedule = LambdaSchedule {
                        start: cfg.dvd.lambda_start,
                        end: cfg.dvd.lambda_end,
                        horizon: cfg.dvd.horizon,
                    };
                    let probes = probe_states(spec, cfg.dvd.probes, cfg.seed)?;
                    state = state.with_diversity(DvdConfig::new(probes, od, schedule)?);
                }
                let base = cfg.member_hyper_td3();
                let members = if cfg.strategy == Strategy::Pbt {
                    let prior = td3_prior(cfg);
                    evolve_rngs
                        .iter_mut()
                        .map(|r| sample_hyper(&prior, base, r))
                        .collect::<popvec_core::Result<_>>()?
                } else {
                    vec![base; n]
                };
                Learner::Td3 {
                    state,
                    hyper: Td3Hyper { members },
                }
            }
            Algorithm::Sac => {
                let sc = SacConfig {
                    hidden: cfg.hidden.clone(),
                    ..SacConfig::desk(od, ad, bound)
                };
                let state = SacState::new(&sc, n, cfg.seed)?;
                let base = cfg.member_hyper_sac()?;
                let members = if cfg.strategy == Strategy::Pbt {
                    let prior = sac_prior(cfg, ad);
                    evolve_rngs
                        .iter_mut()
                        .map(|r| sample_hyper(&prior, base, r))
                        .collect::<popvec_core::Result<_>>()?
                } else {
                    vec![base; n]
                };
                Learner::Sac {
                    state,
                    hyper: SacHyper { members },
                }
            }
        })
    }

    fn policy(&self) -> &PopMlp<f32> {
        match self {
            Learner::Td3 { state, .. } => &state.policy,
            Learner::Sac { state, .. } => &state.policy,
        }
    }

    fn snapshot(&self) -> PolicySnapshot {
        match self {
            Learner::Td3 { state, hyper } => PolicySnapshot::new(
                state.policy.clone(),
                ActionRule::Deterministic {
                    noise_std: hyper
                        .members
                        .iter()
                        .map(|h| h.exploration_noise_std as f32)
                        .collect(),
                },
                state.action_bound,
                state.action_dim,
            ),
            Learner::Sac { state, .. } => PolicySnapshot::new(
                state.policy.clone(),
                ActionRule::Squashed,
                state.action_bound,
                state.action_dim,
            ),
        }
    }

    fn update(&mut self, batches: Vec<TransitionBatch<f32>>, rngs: &mut [StreamRng]) -> Result<()> {
        let k = batches.len();
        let mut it = batches.into_iter();
        match self {
            Learner::Td3 { state, hyper } => update_k_steps(state, || it.next(), k, hyper, rngs)?,
            Learner::Sac { state, hyper } => update_k_steps(state, || it.next(), k, hyper, rngs)?,
        }
        Ok(())
    }

    fn pbt(&mut self, pbt: &mut PbtState, cfg: &RunConfig, rng: &mut StreamRng) -> Result<bool> {
        let plan = match self {
            Learner::Td3 { state, hyper } => {
                pbt_evolve(pbt, state, &mut hyper.members, &td3_prior(cfg), rng)?
            }
            Learner::Sac { state, hyper } => {
                let prior = sac_prior(cfg, state.action_dim);
                pbt_evolve(pbt, state, &mut hyper.members, &prior, rng)?
            }
        };
        if let Some(p) = &plan {
            log::info!("pbt: members {:?} replaced from {:?}", p.replaced, p.donors);
        }
        Ok(plan.is_some())
    }

    /// Refits the search distribution to the scored members and redraws
    /// every member's policy from it.
    fn cem_generation(
        &mut self,
        cem: &mut CemState<f32>,
        scores: &[f64],
        rng: &mut StreamRng,
    ) -> Result<()> {
        let n = self.policy().n();
        let current = (0..n)
            .map(|i| self.policy().flatten_member(i))
            .collect::<popvec_core::Result<Vec<_>>>()?;
        cem.update(&current, scores)?;
        let fresh = cem.sample(n, rng)?;
        for (i, flat) in fresh.iter().enumerate() {
            match self {
                Learner::Td3 { state, .. } => {
                    state.policy.unflatten_member(i, flat)?;
                    state.target_policy.unflatten_member(i, flat)?;
                    state.policy_opt.reset_member(i);
                    state.delay_acc[i] = 0.0;
                }
                Learner::Sac { state, .. } => {
                    state.policy.unflatten_member(i, flat)?;
                    state.policy_opt.reset_member(i);
                }
            }
        }
        Ok(())
    }

    fn save(&self, path: &std::path::Path) -> Result<()> {
        match self {
            Learner::Td3 { state, .. } => save_checkpoint(path, state),
            Learner::Sac { state, .. } => save_checkpoint(path, state),
        }
    }
}

struct Shared<'a> {
    cfg: &'a RunConfig,
    spec: EnvSpec,
    mailbox: Mailbox<PolicySnapshot>,
    replay: SharedReplay<f32>,
    stop: AtomicBool,
    opts: &'a RunOptions,
    /// Environment steps taken so far, per member.
    produced: Vec<AtomicU64>,
}

impl Shared<'_> {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    /// Holds a member back while it is more than `K` steps ahead of the
    /// slowest member, so every member collects at the same rate whatever
    /// the scheduler does. The slowest member never waits.
    fn pace(&self, member: usize) {
        let lead = self.cfg.k.max(1) as u64;
        loop {
            let min = self
                .produced
                .iter()
                .map(|c| c.load(Ordering::Acquire))
                .min()
                .unwrap_or(0);
            if self.produced[member].load(Ordering::Acquire) <= min + lead || self.stopped() {
                return;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Blocking send that gives up once the run stops. Returns `false` if the
    /// message was not delivered.
    fn send<M>(&self, tx: &Sender<M>, mut msg: M) -> bool {
        loop {
            match tx.send_timeout(msg, POLL) {
                Ok(()) => return true,
                Err(SendTimeoutError::Timeout(m)) => {
                    if self.stopped() {
                        return false;
                    }
                    msg = m;
                }
                Err(SendTimeoutError::Disconnected(_)) => return false,
            }
        }
    }
}

/// Members handled by worker `w` of `workers`: `m ≡ w (mod workers)`.
pub fn assigned_members(n: usize, workers: usize, w: usize) -> Vec<usize> {
    (w..n).step_by(workers).collect()
}

struct ActorSlot {
    member: usize,
    env: Env,
    obs: Vec<f64>,
    rng: StreamRng,
    steps: u64,
    episode_return: f64,
    policy: Option<PopMlp<f32>>,
}

fn member_env_seed(seed: u64, member: usize) -> u64 {
    stream(seed, domain::ENV, member as u64, 1).next_u64()
}

fn choose_action(slot: &mut ActorSlot, snap: &PolicySnapshot, warmup: u64) -> Result<Vec<f64>> {
    let bound = snap.bound as f64;
    let policy = match &slot.policy {
        Some(p) if slot.steps >= warmup => p,
        _ => {
            return Ok((0..snap.action_dim)
                .map(|_| slot.rng.random_range(-bound..=bound))
                .collect())
        }
    };
    let od = slot.obs.len();
    let obs = PopTensor::from_vec(&[1, 1, od], slot.obs.iter().map(|&v| v as f32).collect())?;
    let a = match &snap.rule {
        ActionRule::Deterministic { noise_std } => act(
            policy,
            &obs,
            &[noise_std[slot.member]],
            std::slice::from_mut(&mut slot.rng),
            false,
            snap.bound,
        )?,
        ActionRule::Squashed => {
            let head = policy.predict(&obs)?;
            let eps = PopTensor::from_fn(&[1, 1, snap.action_dim], |_| {
                slot.rng.sample::<f64, _>(StandardNormal) as f32
            });
            squashed_gaussian(&head, &eps, snap.bound)?.action
        }
    };
    Ok(a.data()
        .iter()
        .map(|&v| (v as f64).clamp(-bound, bound))
        .collect())
}

fn actor_loop(sh: &Shared, worker: usize, tx: Sender<Msg>) -> Result<()> {
    let cfg = sh.cfg;
    let members = assigned_members(cfg.population, cfg.actor_workers, worker);
    let mut slots = members
        .iter()
        .map(|&m| {
            let (env, obs) = Env::reset(sh.spec, member_env_seed(cfg.seed, m))?;
            Ok(ActorSlot {
                member: m,
                env,
                obs,
                rng: stream(cfg.seed, domain::EXPLORE, m as u64, 0),
                steps: 0,
                episode_return: 0.0,
                policy: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let warmup = cfg.replay.warmup as u64;
    let (mut snap, mut version) = sh.mailbox.fetch()?;
    let mut total = 0u64;
    loop {
        if sh.stopped() || sh.opts.max_actor_env_steps.is_some_and(|l| total >= l) {
            return Ok(());
        }
        if sh.mailbox.version() != version || slots.iter().any(|s| s.policy.is_none()) {
            (snap, version) = sh.mailbox.fetch()?;
            for s in &mut slots {
                s.policy = Some(snap.policy.select_members(&[s.member])?);
            }
        }
        for s in &mut slots {
            sh.pace(s.member);
            let action = choose_action(s, &snap, warmup)?;
            let step = s.env.step(&action)?;
            s.steps += 1;
            total += 1;
            sh.produced[s.member].fetch_add(1, Ordering::AcqRel);
            s.episode_return += step.reward;
            let msg = Msg::Transition {
                member: s.member,
                seq: s.steps,
                transition: Transition {
                    obs: s.obs.iter().map(|&v| v as f32).collect(),
                    action: action.iter().map(|&v| v as f32).collect(),
                    reward: step.reward as f32,
                    next_obs: step.observation.iter().map(|&v| v as f32).collect(),
                    // Episodes end only by time limit, which is not terminal.
                    done: false,
                },
            };
            if !sh.send(&tx, msg) {
                return Ok(());
            }
            if step.done {
                let ret = std::mem::take(&mut s.episode_return);
                if !sh.send(
                    &tx,
                    Msg::EpisodeEnd {
                        member: s.member,
                        episode_return: ret,
                    },
                ) {
                    return Ok(());
                }
                s.obs = s.env.next_episode();
            } else {
                s.obs = step.observation;
            }
        }
    }
}

#[derive(Default)]
struct IngestReport {
    per_member: Vec<u64>,
    gaps: u64,
}

fn ingest_loop(sh: &Shared, rx: Receiver<Msg>, events: Sender<(usize, f64)>) -> IngestReport {
    let n = sh.cfg.population;
    let mut report = IngestReport {
        per_member: vec![0; n],
        gaps: 0,
    };
    let mut last_seq = vec![0u64; n];
    loop {
        let msg = match rx.recv_timeout(POLL) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) if sh.stopped() => return report,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return report,
        };
        match msg {
            Msg::Transition {
                member,
                seq,
                transition,
            } => {
                if member >= n {
                    sh.replay.record_drop();
                    continue;
                }
                if seq != last_seq[member] + 1 {
                    report.gaps += 1;
                }
                last_seq[member] = seq;
                loop {
                    match sh.replay.insert(member, &transition, POLL) {
                        Wait::Done => break,
                        Wait::Closed => return report,
                        Wait::TimedOut if sh.stopped() => return report,
                        Wait::TimedOut => {}
                    }
                }
                report.per_member[member] += 1;
            }
            Msg::EpisodeEnd {
                member,
                episode_return,
            } => {
                let _ = events.send((member, episode_return));
            }
        }
    }
}

fn prefetch_loop(sh: &Shared, tx: Sender<Vec<TransitionBatch<f32>>>) -> Result<()> {
    let cfg = sh.cfg;
    let mut rngs = member_streams(cfg.seed, domain::SAMPLE, cfg.population);
    let mut reserved = 0u64;
    while reserved < cfg.total_update_steps {
        let k = (cfg.k as u64).min(cfg.total_update_steps - reserved) as usize;
        let mut burst = Vec::with_capacity(k);
        while burst.len() < k {
            match sh.replay.sample(cfg.batch_size, &mut rngs, POLL)? {
                (Some(b), _) => burst.push(b),
                (None, Wait::TimedOut) if !sh.stopped() => {}
                _ => return Ok(()),
            }
        }
        reserved += k as u64;
        if !sh.send(&tx, burst) {
            return Ok(());
        }
    }
    Ok(())
}

fn starvation(sh: &Shared, waited: f64) -> Error {
    let st = sh.replay.stats();
    let (sample, _) = sh.replay.guards();
    let side = if sample == Guard::Block {
        "actor side is not delivering environment steps"
    } else {
        "sampler is not delivering batches"
    };
    Error::Starvation(format!(
        "learner received no batch for {waited:.1}s: {side} \
         (env steps per member {:.1}, warmup {}, update steps {}, stored {})",
        st.env_steps_per_member, sh.cfg.replay.warmup, st.update_steps, st.stored
    ))
}

fn join<T>(h: thread::ScopedJoinHandle<'_, T>, name: &str) -> Result<T> {
    h.join()
        .map_err(|_| Error::Worker(format!("{name} thread panicked")))
}

pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    run_training_with(cfg, &RunOptions::default())
}

pub fn run_training_with(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.env.spec()?;
    let n = cfg.population;
    let mut learner = Learner::build(cfg, &spec)?;
    let ratio = RatioController::new(
        cfg.replay.ratio,
        cfg.replay.slack,
        cfg.replay.warmup as f64,
        n,
    )?;
    let replay = SharedReplay::new(
        n,
        cfg.buffer_mode.into(),
        cfg.replay.capacity,
        spec.observation_dim,
        spec.action_dim,
        ratio,
    )?;
    let sh = Shared {
        cfg,
        spec,
        mailbox: Mailbox::new(),
        replay,
        stop: AtomicBool::new(false),
        opts,
        produced: (0..cfg.population).map(|_| AtomicU64::new(0)).collect(),
    };
    let mut published = 1;
    sh.mailbox.publish(learner.snapshot());

    let mut metrics = MetricsLog::open(cfg.metrics_path.as_deref())?;
    metrics.row(0, 0, None, None, "start")?;

    thread::scope(|scope| {
        let (msg_tx, msg_rx) = bounded::<Msg>(4 * cfg.k * n);
        let (batch_tx, batch_rx) = bounded::<Vec<TransitionBatch<f32>>>(1);
        let (ev_tx, ev_rx) = unbounded::<(usize, f64)>();
        let sh = &sh;

        let actors: Vec<_> = (0..cfg.actor_workers)
            .map(|w| {
                let tx = msg_tx.clone();
                thread::Builder::new()
                    .name(format!("actor-{w}"))
                    .spawn_scoped(scope, move || actor_loop(sh, w, tx))
                    .expect("spawning actor thread")
            })
            .collect();
        drop(msg_tx);
        let ingest = thread::Builder::new()
            .name("ingest".into())
            .spawn_scoped(scope, move || ingest_loop(sh, msg_rx, ev_tx))
            .expect("spawning ingest thread");
        let prefetch = thread::Builder::new()
            .name("prefetch".into())
            .spawn_scoped(scope, move || prefetch_loop(sh, batch_tx))
            .expect("spawning prefetch thread");

        let mut stats = LearnerStats::default();
        let learned = learn(
            sh,
            &mut learner,
            &batch_rx,
            &ev_rx,
            &mut metrics,
            &mut stats,
            &mut published,
        );

        sh.stop.store(true, Ordering::Release);
        sh.replay.close();
        drop(batch_rx);
        let mut worker_err = None;
        for (w, h) in actors.into_iter().enumerate() {
            match join(h, &format!("actor-{w}")) {
                Ok(Ok(())) => {}
                Ok(Err(e)) | Err(e) => {
                    worker_err.get_or_insert(e);
                }
            }
        }
        let report = join(ingest, "ingest");
        match join(prefetch, "prefetch") {
            Ok(Ok(())) => {}
            Ok(Err(e)) | Err(e) => {
                worker_err.get_or_insert(e);
            }
        }
        let report = report?;
        match (learned, worker_err) {
            (Err(Error::Starvation(_)), Some(e)) => return Err(e),
            (Err(e), _) => return Err(e),
            (Ok(()), Some(e)) => return Err(e),
            (Ok(()), None) => {}
        }
        if let Some(path) = &cfg.checkpoint.path {
            learner.save(path)?;
        }
        let st = sh.replay.stats();
        metrics.row(st.env_steps, stats.update_steps, None, None, "end")?;
        metrics.flush()?;
        Ok(RunSummary {
            update_steps: stats.update_steps,
            env_steps: st.env_steps,
            env_steps_per_member: st.env_steps_per_member,
            ratio: st.ratio,
            dropped: st.dropped,
            transitions_per_member: report.per_member,
            sequence_gaps: report.gaps,
            episodes: stats.episodes,
            final_mean_returns: (0..n).map(|m| stats.returns.mean_return(m)).collect(),
            snapshots_published: published,
            evolutions: stats.evolutions,
            cem_generations: stats.cem_generations,
            wall_clock_s: metrics.elapsed_s(),
        })
    })
}

struct LearnerStats {
    update_steps: u64,
    episodes: Vec<EpisodeRecord>,
    returns: PbtState,
    evolutions: u64,
    cem_generations: u64,
}

impl Default for LearnerStats {
    fn default() -> Self {
        Self {
            update_steps: 0,
            episodes: Vec::new(),
            returns: PbtState::new(1, u64::MAX, 0.5).expect("valid tracker"),
            evolutions: 0,
            cem_generations: 0,
        }
    }
}

fn learn(
    sh: &Shared,
    learner: &mut Learner,
    batches: &Receiver<Vec<TransitionBatch<f32>>>,
    events: &Receiver<(usize, f64)>,
    metrics: &mut MetricsLog,
    stats: &mut LearnerStats,
    published: &mut u64,
) -> Result<()> {
    let cfg = sh.cfg;
    let n = cfg.population;
    stats.returns = if cfg.strategy == Strategy::Pbt {
        PbtState::new(n, cfg.pbt.interval, cfg.pbt.truncation_fraction)?
    } else {
        PbtState::new(n, u64::MAX, 0.5)?
    };
    let mut cem = match cfg.strategy {
        Strategy::Cem => {
            let p = learner.policy();
            let dim = p.member_param_count();
            let mut mean = vec![0.0f32; dim];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(p.flatten_member(i)?) {
                    *m += v / n as f32;
                }
            }
            Some(CemState::new(mean, cfg.cem.init_var)?)
        }
        _ => None,
    };
    let mut since_generation = 0u64;
    let mut update_rngs = member_streams(cfg.seed, domain::UPDATE, n);
    let mut evolve_rng = stream(cfg.seed, domain::EVOLVE, u64::MAX, 0);
    let timeout = Duration::from_secs_f64(cfg.timeout_s);
    let mut since_checkpoint = 0u64;

    while stats.update_steps < cfg.total_update_steps {
        let burst = match batches.recv_timeout(timeout) {
            Ok(b) => b,
            Err(RecvTimeoutError::Timeout) => return Err(starvation(sh, cfg.timeout_s)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Starvation(
                    "sampler stopped before the run finished".into(),
                ))
            }
        };
        let k = burst.len() as u64;
        learner.update(burst, &mut update_rngs)?;
        stats.update_steps += k;
        let env_steps = sh.replay.stats().env_steps;

        for (member, ret) in events.try_iter() {
            stats.returns.record_return(member, ret);
            stats.episodes.push(EpisodeRecord {
                member,
                episode_return: ret,
                update_steps: stats.update_steps,
                env_steps,
            });
            metrics.row(
                env_steps,
                stats.update_steps,
                Some(member),
                Some(ret),
                "episode",
            )?;
        }

        if cfg.strategy == Strategy::Pbt {
            stats.returns.tick(k);
            if stats.returns.due() && learner.pbt(&mut stats.returns, cfg, &mut evolve_rng)? {
                stats.evolutions += 1;
                metrics.row(env_steps, stats.update_steps, None, None, "evolve")?;
            }
        }
        if let Some(cem) = &mut cem {
            since_generation += k;
            if since_generation >= cfg.cem.interval {
                let scores: Option<Vec<f64>> =
                    (0..n).map(|m| stats.returns.mean_return(m)).collect();
                if let Some(scores) = scores {
                    learner.cem_generation(cem, &scores, &mut evolve_rng)?;
                    for m in 0..n {
                        stats.returns.returns[m].clear();
                    }
                    since_generation = 0;
                    stats.cem_generations += 1;
                    metrics.row(env_steps, stats.update_steps, None, None, "cem_generation")?;
                }
            }
        }

        sh.mailbox.publish(learner.snapshot());
        *published += 1;

        since_checkpoint += k;
        if cfg.checkpoint.interval > 0 && since_checkpoint >= cfg.checkpoint.interval {
            if let Some(path) = &cfg.checkpoint.path {
                learner.save(path)?;
                metrics.row(env_steps, stats.update_steps, None, None, "checkpoint")?;
            }
            since_checkpoint = 0;
        }
        metrics.row(env_steps, stats.update_steps, None, None, "burst")?;
    }
    Ok(())
}

/// The checksum audit used by tests: `publishers` threads publish `count`
/// snapshots each while `readers` threads fetch; returns
/// `(fetches, torn, max_version_seen)`.
pub fn mailbox_audit(
    net: &PopMlp<f32>,
    publishers: usize,
    count: usize,
    readers: usize,
) -> (u64, u64, u64) {
    let mailbox: Arc<Mailbox<PolicySnapshot>> = Arc::new(Mailbox::new());
    let make = |tag: usize| {
        let mut p = net.clone();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += tag as f32;
            }
        }
        PolicySnapshot::new(p, ActionRule::Squashed, 1.0, 1)
    };
    mailbox.publish(make(0));
    let done = AtomicBool::new(false);
    thread::scope(|s| {
        let pubs: Vec<_> = (0..publishers)
            .map(|p| {
                let mb = &mailbox;
                s.spawn(move || {
                    for i in 0..count {
                        mb.publish(make(p * count + i + 1));
                    }
                })
            })
            .collect();
        let reads: Vec<_> = (0..readers)
            .map(|_| {
                let mb = &mailbox;
                let done = &done;
                s.spawn(move || {
                    let (mut fetches, mut torn, mut last) = (0u64, 0u64, 0u64);
                    loop {
                        let finished = done.load(Ordering::Acquire);
                        let (snap, v) = mb.fetch().expect("published");
                        fetches += 1;
                        if !snap.verify() || v < last {
                            torn += 1;
                        }
                        last = v;
                        if finished {
                            return (fetches, torn, last);
                        }
                    }
                })
            })
            .collect();
        for p in pubs {
            p.join().expect("publisher");
        }
        done.store(true, Ordering::Release);
        reads.into_iter().fold((0, 0, 0), |acc, r| {
            let (f, t, l) = r.join().expect("reader");
            (acc.0 + f, acc.1 + t, acc.2.max(l))
        })
    })
}
