//! Episode loop, schedulers, metric traces and scheduler comparison.
//!
//! Slot order: move users and update blockage, draw channel phases and compute
//! rates, observe, schedule, serve, admit arrivals, update the virtual queues.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_channel_phases, link_rate, PhaseVector, RateMatrix};
use crate::config::{Decode, SchedulerKind, SimConfig};
use crate::error::{Error, Result};
use crate::geometry::{spawn_users, step_users, update_blockage, LinkGeometry, Room, UserState};
use crate::policy::{greedy_action, sample_action, Carry, HeadDists, MdpState, Policy};
use crate::queue::{
    drift_bound_check, evar_estimate, sample_arrivals, update_queues, DriftReport, QueueState,
};
use crate::rng::{derive_seed, stream, Stream, StreamId};
use crate::scheduler::{baseline_assoc, build_weights, reward, solve_assignment, Association, BaselineKind, SolveMethod};

/// Everything the controller may look at when deciding slot `t`.
#[derive(Debug, Clone)]
pub struct SlotView {
    pub t: usize,
    pub state: MdpState,
    pub rates: RateMatrix,
    pub geometry: LinkGeometry,
    pub queues: QueueState,
}

#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub t: usize,
    pub assoc: Association,
    pub served: Vec<f64>,
    pub arrivals: Vec<u64>,
    pub reward: f64,
    /// Max queue at slot start.
    pub q_max: f64,
    pub z1: f64,
    pub z2: f64,
    pub sum_rate_bps: f64,
    pub served_count: usize,
    pub drift: DriftReport,
}

/// One episode's world: users, links, queues and their random streams.
pub struct Simulator {
    config: SimConfig,
    room: Room,
    arrival_rates: Vec<f64>,
    users: Vec<UserState>,
    geometry: LinkGeometry,
    queues: QueueState,
    psi: Vec<PhaseVector>,
    mobility_rng: Stream,
    blockage_rng: Stream,
    phase_rng: Stream,
    arrival_rng: Stream,
    t: usize,
    pending: Option<SlotView>,
}

impl Simulator {
    pub fn new(config: &SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let room = config.room()?;
        let mut placement = stream(seed, StreamId::Placement);
        let users = spawn_users(&room, config.num_users, config.mobility.speed, &mut placement);
        let geometry = LinkGeometry::initial(&users, &room, &config.blockage);
        Ok(Simulator {
            arrival_rates: config.arrivals.rates(config.num_users)?,
            config: config.clone(),
            room,
            users,
            geometry,
            queues: QueueState::empty(config.num_users),
            psi: Vec::new(),
            mobility_rng: stream(seed, StreamId::Mobility),
            blockage_rng: stream(seed, StreamId::Blockage),
            phase_rng: stream(seed, StreamId::ChannelPhase),
            arrival_rng: stream(seed, StreamId::Arrivals),
            t: 0,
            pending: None,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn queues(&self) -> &QueueState {
        &self.queues
    }

    pub fn users(&self) -> &[UserState] {
        &self.users
    }

    pub fn slot(&self) -> usize {
        self.t
    }

    /// Advances mobility, blockage and channel phases and returns the observation.
    pub fn begin_slot(&mut self) -> Result<SlotView> {
        if self.pending.is_some() {
            return Err(Error::invalid("slot already begun"));
        }
        let c = &self.config;
        self.users = step_users(&self.users, &self.room, &c.mobility, &mut self.mobility_rng);
        self.geometry = update_blockage(&self.geometry, &self.users, &self.room, &c.blockage, &mut self.blockage_rng)?;
        if self.t % c.phase_coherence_slots == 0 {
            self.psi = draw_channel_phases(c.num_ris, c.num_users, c.channel.meta_surfaces, &mut self.phase_rng);
        }
        let rates = link_rate(&self.geometry, &self.psi, &c.channel)?;
        let state = MdpState {
            num_ris: c.num_ris,
            num_users: c.num_users,
            s_links: self.geometry.los_flat().to_vec(),
            q: self.queues.q.clone(),
            z1: self.queues.z1,
            z2: self.queues.z2,
            rates: rates.images_flat().to_vec(),
        };
        let view = SlotView {
            t: self.t,
            state,
            rates,
            geometry: self.geometry.clone(),
            queues: self.queues.clone(),
        };
        self.pending = Some(view.clone());
        Ok(view)
    }

    /// Serves the begun slot with `assoc`, admits arrivals and updates all queues.
    pub fn finish_slot(&mut self, assoc: &Association) -> Result<SlotOutcome> {
        let view = self
            .pending
            .take()
            .ok_or_else(|| Error::invalid("finish_slot called before begin_slot"))?;
        assoc.validate()?;
        let risk = &self.config.risk;
        let served = assoc.served(&view.rates)?;
        let arrivals = sample_arrivals(&self.arrival_rates, &mut self.arrival_rng);
        let r = reward(assoc, &view.rates, &view.queues, &arrivals, risk)?;
        let update = update_queues(&view.queues, &served, &arrivals, risk)?;
        let drift = drift_bound_check(&view.queues, &update.state, &served, &arrivals, &view.rates, risk)?;
        debug_assert!(drift.realized_holds, "drift bound violated at slot {}: {drift:?}", view.t);
        let outcome = SlotOutcome {
            t: view.t,
            sum_rate_bps: assoc.sum_rate_bps(&view.rates)?,
            served_count: assoc.links().filter(|&(b, u)| view.rates.images(b, u) > 0.0).count(),
            assoc: assoc.clone(),
            served,
            arrivals,
            reward: r,
            q_max: update.q_max,
            z1: view.queues.z1,
            z2: view.queues.z2,
            drift,
        };
        self.queues = update.state;
        self.t += 1;
        Ok(outcome)
    }
}

/// Chooses an association for each slot.
pub trait Scheduler {
    fn decide(&mut self, view: &SlotView, config: &SimConfig) -> Result<Association>;
}

/// Exact drift-plus-penalty maximizer.
#[derive(Debug, Clone, Copy)]
pub struct OptimalScheduler {
    pub method: SolveMethod,
}

impl Default for OptimalScheduler {
    fn default() -> Self {
        OptimalScheduler {
            method: SolveMethod::ExactMatching,
        }
    }
}

impl Scheduler for OptimalScheduler {
    fn decide(&mut self, view: &SlotView, config: &SimConfig) -> Result<Association> {
        let w = build_weights(&view.rates, &view.queues, &config.risk)?;
        Ok(solve_assignment(&w, self.method))
    }
}

pub struct BaselineScheduler {
    pub kind: BaselineKind,
    rng: Stream,
}

impl BaselineScheduler {
    pub fn new(kind: BaselineKind, seed: u64) -> Self {
        BaselineScheduler {
            kind,
            rng: stream(seed, StreamId::Scheduler),
        }
    }
}

impl Scheduler for BaselineScheduler {
    fn decide(&mut self, view: &SlotView, _config: &SimConfig) -> Result<Association> {
        Ok(baseline_assoc(self.kind, &view.geometry, &mut self.rng))
    }
}

/// Runs the recurrent policy; the carry lives for one episode.
pub struct PolicyScheduler<'a> {
    policy: &'a Policy,
    decode: Decode,
    carry: Carry,
    rng: Stream,
}

impl<'a> PolicyScheduler<'a> {
    pub fn new(policy: &'a Policy, decode: Decode, seed: u64) -> Self {
        PolicyScheduler {
            policy,
            decode,
            carry: Carry::zeros(policy.params.arch()),
            rng: stream(seed, StreamId::Scheduler),
        }
    }
}

impl Scheduler for PolicyScheduler<'_> {
    fn decide(&mut self, view: &SlotView, _config: &SimConfig) -> Result<Association> {
        let arch = self.policy.params.arch();
        if arch.num_ris != view.state.num_ris || arch.num_users != view.state.num_users {
            return Err(Error::dims(format!(
                "policy is {}x{}, world is {}x{}",
                arch.num_ris, arch.num_users, view.state.num_ris, view.state.num_users
            )));
        }
        if self.policy.context > 0 && view.t % self.policy.context == 0 {
            self.carry = Carry::zeros(arch);
        }
        let logits = self.policy.params.step(&self.policy.encode(&view.state), &mut self.carry)?;
        let dists = HeadDists::from_logits(arch, &logits);
        let (assoc, _) = match self.decode {
            Decode::Greedy => greedy_action(&dists),
            Decode::Sample => sample_action(&dists, &mut self.rng),
        };
        Ok(assoc)
    }
}

/// Builds the scheduler named in `kind` for an episode seeded with `seed`.
pub fn make_scheduler<'a>(
    kind: SchedulerKind,
    config: &SimConfig,
    policy: Option<&'a Policy>,
    seed: u64,
) -> Result<Box<dyn Scheduler + 'a>> {
    Ok(match kind {
        SchedulerKind::Optimal => Box::new(OptimalScheduler::default()),
        SchedulerKind::Random => Box::new(BaselineScheduler::new(BaselineKind::Random, seed)),
        SchedulerKind::Nearest => Box::new(BaselineScheduler::new(BaselineKind::Nearest, seed)),
        SchedulerKind::Policy => {
            let policy = policy.ok_or_else(|| Error::invalid("the policy scheduler needs a trained policy"))?;
            Box::new(PolicyScheduler::new(policy, config.policy.decode, seed))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub q_max: f64,
    pub sum_rate_bps: f64,
    pub z1: f64,
    pub z2: f64,
    pub evar_window: f64,
    pub served_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_q: f64,
    pub mean_q2: f64,
    pub mean_sum_rate_bps: f64,
    pub constraint_eps_ok: bool,
    pub constraint_eta_ok: bool,
    pub seed: u64,
    pub config_hash: String,
    pub num_ris: usize,
    pub num_users: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<TraceRow>,
    pub summary: Summary,
}

pub const TRACE_HEADER: &str = "t,q_max,sum_rate_bps,z1,z2,evar_window,served_count";

impl MetricsTrace {
    /// Time averages and constraint flags recomputed from `rows`.
    pub fn summarize(rows: &[TraceRow], config: &SimConfig, seed: u64) -> Summary {
        let n = rows.len().max(1) as f64;
        let mean_q = rows.iter().map(|r| r.q_max).sum::<f64>() / n;
        let mean_q2 = rows.iter().map(|r| r.q_max * r.q_max).sum::<f64>() / n;
        let mean_sum_rate_bps = rows.iter().map(|r| r.sum_rate_bps).sum::<f64>() / n;
        Summary {
            mean_q,
            mean_q2,
            mean_sum_rate_bps,
            constraint_eps_ok: mean_q < config.risk.epsilon(),
            constraint_eta_ok: mean_q2 < config.risk.eta(),
            seed,
            config_hash: config.hash(),
            num_ris: config.num_ris,
            num_users: config.num_users,
            horizon: config.horizon,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.t, r.q_max, r.sum_rate_bps, r.z1, r.z2, r.evar_window, r.served_count
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Vec<TraceRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::invalid("trace header does not match"));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(Error::invalid(format!("trace row has {} fields", f.len())));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| Error::invalid(e.to_string()));
                let int = |s: &str| s.parse::<usize>().map_err(|e| Error::invalid(e.to_string()));
                Ok(TraceRow {
                    t: int(f[0])?,
                    q_max: num(f[1])?,
                    sum_rate_bps: num(f[2])?,
                    z1: num(f[3])?,
                    z2: num(f[4])?,
                    evar_window: num(f[5])?,
                    served_count: int(f[6])?,
                })
            })
            .collect()
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `trace.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trace = dir.join("trace.csv");
        fs::write(&trace, self.to_csv()).map_err(|e| Error::io(&trace, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, self.summary_json()).map_err(|e| Error::io(&summary, e))?;
        Ok(())
    }
}

/// Online EVaR of the max queue over a sliding window.
struct EvarWindow {
    gamma: f64,
    cap: usize,
    window: VecDeque<f64>,
    sum: f64,
    since_refresh: usize,
}

impl EvarWindow {
    fn new(gamma: f64, cap: usize) -> Self {
        EvarWindow {
            gamma,
            cap,
            window: VecDeque::with_capacity(cap),
            sum: 0.0,
            since_refresh: 0,
        }
    }

    fn push(&mut self, q: f64) -> f64 {
        // exp(-gamma q) lies in (0, 1] for q >= 0, so a plain running sum is safe
        self.window.push_back(q);
        self.sum += (-self.gamma * q).exp();
        if self.window.len() > self.cap {
            let old = self.window.pop_front().expect("window is non-empty");
            self.sum -= (-self.gamma * old).exp();
        }
        self.since_refresh += 1;
        if self.since_refresh >= self.cap {
            self.sum = self.window.iter().map(|q| (-self.gamma * q).exp()).sum();
            self.since_refresh = 0;
        }
        let mean = self.sum / self.window.len() as f64;
        if mean > 0.0 && mean.is_finite() {
            mean.ln() / self.gamma
        } else {
            let samples: Vec<f64> = self.window.iter().copied().collect();
            evar_estimate(&samples, self.gamma).unwrap_or(f64::NAN)
        }
    }
}

/// Result of one simulated episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trace: MetricsTrace,
    pub final_queues: QueueState,
    pub drift_violations: usize,
    pub total_reward: f64,
}

/// Runs an episode with an explicit scheduler and seed, calling `on_slot` after every slot.
pub fn run_with(
    config: &SimConfig,
    seed: u64,
    scheduler: &mut dyn Scheduler,
    mut on_slot: impl FnMut(&SlotView, &SlotOutcome),
) -> Result<EpisodeResult> {
    let mut sim = Simulator::new(config, seed)?;
    let mut evar = EvarWindow::new(config.risk.gamma(), config.evar_window);
    let mut rows = Vec::with_capacity(config.horizon);
    let mut violations = 0;
    let mut total_reward = 0.0;
    for _ in 0..config.horizon {
        let view = sim.begin_slot()?;
        let assoc = scheduler.decide(&view, config)?;
        let out = sim.finish_slot(&assoc)?;
        if !out.drift.holds {
            violations += 1;
        }
        total_reward += out.reward;
        rows.push(TraceRow {
            t: out.t,
            q_max: out.q_max,
            sum_rate_bps: out.sum_rate_bps,
            z1: out.z1,
            z2: out.z2,
            evar_window: evar.push(out.q_max),
            served_count: out.served_count,
        });
        on_slot(&view, &out);
    }
    let summary = MetricsTrace::summarize(&rows, config, seed);
    Ok(EpisodeResult {
        trace: MetricsTrace { rows, summary },
        final_queues: sim.queues().clone(),
        drift_violations: violations,
        total_reward,
    })
}

/// Runs one episode of `config` with its configured scheduler and seed.
pub fn run_episode(config: &SimConfig, policy: Option<&Policy>) -> Result<EpisodeResult> {
    config.validate()?;
    let mut scheduler = make_scheduler(config.scheduler, config, policy, config.seed)?;
    run_with(config, config.seed, scheduler.as_mut(), |_, _| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config_index: usize,
    pub num_users: usize,
    pub scheduler: SchedulerKind,
    pub mean_q: f64,
    pub mean_q2: f64,
    pub mean_sum_rate_bps: f64,
    /// `(Qbar - Qbar_opt) / Qbar_opt`.
    pub queue_gap: f64,
    /// `(R_opt - R) / R_opt`.
    pub rate_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn get(&self, config_index: usize, scheduler: SchedulerKind) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.config_index == config_index && r.scheduler == scheduler)
    }
}

pub fn relative_gap(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (value - reference) / reference
    }
}

/// Averages over `episodes` episodes of one scheduler; episode `e` uses seed
/// `derive_seed(config.seed, e)` so every scheduler sees the same worlds.
pub fn mean_summary(
    config: &SimConfig,
    kind: SchedulerKind,
    policy: Option<&Policy>,
    episodes: usize,
) -> Result<(f64, f64, f64)> {
    if episodes == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    let results: Vec<(f64, f64, f64)> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let seed = episode_seed(config.seed, e, episodes);
            let mut s = make_scheduler(kind, config, policy, seed)?;
            let r = run_with(config, seed, s.as_mut(), |_, _| {})?;
            let m = &r.trace.summary;
            Ok((m.mean_q, m.mean_q2, m.mean_sum_rate_bps))
        })
        .collect::<Result<_>>()?;
    let n = episodes as f64;
    Ok(results.iter().fold((0.0, 0.0, 0.0), |acc, r| {
        (acc.0 + r.0 / n, acc.1 + r.1 / n, acc.2 + r.2 / n)
    }))
}

/// A single episode keeps the configured seed; several derive one each.
pub fn episode_seed(seed: u64, episode: usize, episodes: usize) -> u64 {
    if episodes == 1 {
        seed
    } else {
        derive_seed(seed, episode as u64)
    }
}

/// Runs every scheduler on every config under common random numbers and
/// reports gaps against the optimal scheduler.
pub fn compare(
    configs: &[SimConfig],
    schedulers: &[SchedulerKind],
    policy: Option<&Policy>,
    episodes: usize,
) -> Result<ComparisonReport> {
    if let Some(first) = configs.first() {
        if configs.iter().any(|c| c.horizon != first.horizon) {
            return Err(Error::invalid("compared configs must share one horizon"));
        }
    }
    let mut rows = Vec::new();
    for (i, config) in configs.iter().enumerate() {
        config.validate()?;
        let reference = mean_summary(config, SchedulerKind::Optimal, None, episodes)?;
        for &kind in schedulers {
            let m = if kind == SchedulerKind::Optimal {
                reference
            } else {
                mean_summary(config, kind, policy, episodes)?
            };
            rows.push(ComparisonRow {
                config_index: i,
                num_users: config.num_users,
                scheduler: kind,
                mean_q: m.0,
                mean_q2: m.1,
                mean_sum_rate_bps: m.2,
                queue_gap: relative_gap(m.0, reference.0),
                rate_gap: -relative_gap(m.2, reference.2),
            });
        }
    }
    Ok(ComparisonReport { rows })
}
