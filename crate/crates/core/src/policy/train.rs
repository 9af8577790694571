//! Behavior cloning from optimal-scheduler labels and REINFORCE fine-tuning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accumulate_log_prob_grad, action_labels, encode_state, feature_dim, greedy_action, masked_log_prob, sample_action, weighted_log_prob_grad,
    Architecture, Carry, HeadDists, MdpState, Policy, PolicyParams,
};
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, StreamId};
use crate::scheduler::Association;
use crate::sim::Simulator;

const INIT_SALT: u64 = 0x1417;
const SHUFFLE_SALT: u64 = 0x5a0f;
const ROLLOUT_SALT: u64 = 0x7e11;
const AUGMENT_SALT: u64 = 0xa06e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Clone,
    Reinforce,
    CloneThenReinforce,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clone" => Ok(TrainMode::Clone),
            "reinforce" => Ok(TrainMode::Reinforce),
            "clone_then_reinforce" => Ok(TrainMode::CloneThenReinforce),
            _ => Err(Error::invalid(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinforceSettings {
    pub iterations: usize,
    /// Episodes sampled per update.
    pub rollouts: usize,
    /// Slots per sampled episode.
    pub horizon: usize,
    pub learning_rate: f64,
    pub discount: f64,
}

impl Default for ReinforceSettings {
    fn default() -> Self {
        ReinforceSettings {
            iterations: 100,
            rollouts: 4,
            horizon: 128,
            learning_rate: 1e-4,
            discount: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub max_epochs: usize,
    /// Labeled slots per gradient step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
    /// Slots per truncated backpropagation window; the policy clears its
    /// recurrent state at the same period when acting.
    pub context: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Relabel users and RIS of each training window by a random permutation
    /// once `warmup_epochs` epochs have passed.
    pub augment: bool,
    pub warmup_epochs: usize,
    pub reinforce: ReinforceSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Clone,
            max_epochs: 1000,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            patience: 50,
            context: 16,
            grad_clip: 5.0,
            augment: false,
            warmup_epochs: 0,
            reinforce: ReinforceSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.context == 0 || self.patience == 0 {
            return Err(Error::invalid("max_epochs, batch_size, context and patience must be positive"));
        }
        let r = &self.reinforce;
        if r.rollouts == 0 || r.horizon == 0 {
            return Err(Error::invalid("reinforce rollouts and horizon must be positive"));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("reinforce.learning_rate", r.learning_rate)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&r.discount) {
            return Err(Error::invalid(format!("discount must lie in [0, 1], got {}", r.discount)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

/// One episode of states with the optimal scheduler's decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEpisode {
    pub states: Vec<MdpState>,
    pub actions: Vec<Association>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSplits {
    pub train: Vec<LabeledEpisode>,
    pub val: Vec<LabeledEpisode>,
    pub test: Vec<LabeledEpisode>,
}

impl LabeledSplits {
    pub fn slots(episodes: &[LabeledEpisode]) -> usize {
        episodes.iter().map(|e| e.states.len()).sum()
    }
}

/// Encoded windows of at most `context` slots, aligned to episode starts.
struct Window {
    states: Vec<MdpState>,
    features: Vec<Vec<f64>>,
    actions: Vec<Association>,
}

impl Window {
    /// The same window with RIS `b` renamed `pb[b]` and user `u` renamed `pu[u]`.
    fn permuted(&self, policy: &Policy, pb: &[usize], pu: &[usize]) -> Result<Window> {
        let (nb, nu) = (pb.len(), pu.len());
        let remap = |src: usize| {
            let (b, u) = (src / nu, src % nu);
            pb[b] * nu + pu[u]
        };
        let mut states = Vec::with_capacity(self.states.len());
        let mut actions = Vec::with_capacity(self.actions.len());
        for (s, a) in self.states.iter().zip(&self.actions) {
            let mut t = s.clone();
            let mut x = vec![false; nb * nu];
            for i in 0..nb * nu {
                let j = remap(i);
                t.s_links[j] = s.s_links[i];
                t.rates[j] = s.rates[i];
                x[j] = a.as_flat()[i];
            }
            for u in 0..nu {
                t.q[pu[u]] = s.q[u];
            }
            states.push(t);
            actions.push(Association::from_matrix(nb, nu, x)?);
        }
        Ok(Window {
            features: states.iter().map(|s| policy.encode(s)).collect(),
            states,
            actions,
        })
    }
}

fn windows(policy: &Policy, episodes: &[LabeledEpisode], context: usize) -> Result<Vec<Window>> {
    let arch = policy.params.arch();
    let mut out = Vec::new();
    for e in episodes {
        if e.states.len() != e.actions.len() {
            return Err(Error::dims("episode has different numbers of states and actions"));
        }
        for (s, a) in e.states.chunks(context).zip(e.actions.chunks(context)) {
            if s.iter().any(|s| s.num_ris != arch.num_ris || s.num_users != arch.num_users) {
                return Err(Error::dims(format!(
                    "data does not match a {}x{} policy",
                    arch.num_ris, arch.num_users
                )));
            }
            out.push(Window {
                states: s.to_vec(),
                features: s.iter().map(|s| policy.encode(s)).collect(),
                actions: a.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Summed negative log-likelihood and its gradient over a set of windows.
fn nll_grad(params: &PolicyParams, windows: &[&Window]) -> Result<(f64, Vec<f64>)> {
    let n = params.theta().len();
    let (loss, grad) = windows
        .par_iter()
        .try_fold(
            || (0.0, vec![0.0; n]),
            |(loss, mut grad), w| {
                let lp = accumulate_log_prob_grad(params, &w.features, &w.actions, &vec![-1.0; w.actions.len()], &mut grad)?;
                Ok::<_, Error>((loss + lp, grad))
            },
        )
        .try_reduce(
            || (0.0, vec![0.0; n]),
            |(la, mut ga), (lb, gb)| {
                ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                Ok((la + lb, ga))
            },
        )?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    /// Fraction of (slot, RIS) decisions matching the label.
    pub per_ris: f64,
    /// Fraction of slots whose whole association matches.
    pub exact_match: f64,
    /// Mean negative log-likelihood per slot.
    pub nll: f64,
}

fn score_windows(policy: &Policy, windows: &[Window]) -> Result<Accuracy> {
    let arch = *policy.params.arch();
    let parts: Vec<(usize, usize, f64)> = windows
        .par_iter()
        .map(|w| {
            let mut carry = Carry::zeros(&arch);
            let mut hits = 0;
            let mut exact = 0;
            let mut nll = 0.0;
            for (x, a) in w.features.iter().zip(&w.actions) {
                let logits = policy.params.step(x, &mut carry)?;
                let (g, _) = greedy_action(&HeadDists::from_logits(&arch, &logits));
                let (want, got) = (action_labels(a), action_labels(&g));
                let same = want.iter().zip(&got).filter(|(x, y)| x == y).count();
                hits += same;
                exact += usize::from(same == want.len());
                nll -= masked_log_prob(&arch, &logits, &want).0;
            }
            Ok((hits, exact, nll))
        })
        .collect::<Result<_>>()?;
    let slots: usize = windows.iter().map(|w| w.actions.len()).sum();
    if slots == 0 {
        return Err(Error::Empty("no labeled slots to score".into()));
    }
    let (hits, exact, nll) = parts
        .iter()
        .fold((0, 0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    Ok(Accuracy {
        per_ris: hits as f64 / (slots * arch.num_ris) as f64,
        exact_match: exact as f64 / slots as f64,
        nll: nll / slots as f64,
    })
}

/// Greedy-decoding agreement of `policy` with the labels in `episodes`.
pub fn accuracy(policy: &Policy, episodes: &[LabeledEpisode]) -> Result<Accuracy> {
    let context = if policy.context == 0 { usize::MAX } else { policy.context };
    score_windows(policy, &windows(policy, episodes, context)?)
}

#[derive(Debug, Clone)]
enum OptState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

struct Stepper {
    lr: f64,
    clip: f64,
    state: OptState,
}

impl Stepper {
    fn new(kind: Optimizer, lr: f64, clip: f64, n: usize) -> Self {
        let state = match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        };
        Stepper { lr, clip, state }
    }

    /// Descends along `grad`.
    fn apply(&mut self, theta: &mut [f64], grad: &mut [f64]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        if self.clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.clip {
                let k = self.clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        match &mut self.state {
            OptState::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for i in 0..theta.len() {
                    m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
                    theta[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Clone,
    Reinforce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_exact_match: Option<f64>,
    pub mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Clone epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

pub const REPORT_HEADER: &str = "phase,epoch,train_loss,val_loss,val_accuracy,val_exact_match,mean_reward";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::new();
        s.push_str(REPORT_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let phase = match e.phase {
                Phase::Clone => "clone",
                Phase::Reinforce => "reinforce",
            };
            let _ = writeln!(
                s,
                "{phase},{},{},{},{},{},{}",
                e.epoch,
                cell(e.train_loss),
                cell(e.val_loss),
                cell(e.val_accuracy),
                cell(e.val_exact_match),
                cell(e.mean_reward)
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fresh policy shaped by `config`, initialized from its seed.
pub fn init_policy(config: &SimConfig) -> Result<Policy> {
    let p = &config.policy;
    let arch = Architecture {
        input_dim: feature_dim(p.features, config.num_ris, config.num_users),
        hidden: p.hidden,
        num_ris: config.num_ris,
        num_users: config.num_users,
    };
    let mut rng = stream(derive_seed(config.seed, INIT_SALT), StreamId::Scheduler);
    let params = PolicyParams::init(arch, &mut rng)?;
    Ok(Policy::new(params, p.features, p.norms, config.seed)?.with_context(config.train.context))
}

/// Trains a policy as `config.train.mode` says. Cloning needs `data`.
pub fn train(config: &SimConfig, data: Option<&LabeledSplits>) -> Result<(Policy, TrainReport)> {
    config.validate()?;
    let mut policy = init_policy(config)?;
    let mut report = TrainReport::default();
    let mode = config.train.mode;
    if matches!(mode, TrainMode::Clone | TrainMode::CloneThenReinforce) {
        let data = data.ok_or_else(|| Error::invalid("behavior cloning needs a labeled dataset"))?;
        clone_train(config, data, &mut policy, &mut report)?;
    }
    if matches!(mode, TrainMode::Reinforce | TrainMode::CloneThenReinforce) {
        reinforce_train(config, &mut policy, &mut report)?;
    }
    Ok((policy, report))
}

/// Minimizes the masked cross-entropy to the labels with early stopping on
/// validation accuracy; the best parameters are kept.
pub fn clone_train(config: &SimConfig, data: &LabeledSplits, policy: &mut Policy, report: &mut TrainReport) -> Result<()> {
    let tc = &config.train;
    let train_w = windows(policy, &data.train, tc.context)?;
    if train_w.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    let val_w = windows(policy, &data.val, tc.context)?;
    let per_batch = tc.batch_size.div_ceil(tc.context).max(1);
    let mut opt = Stepper::new(tc.optimizer, tc.learning_rate, tc.grad_clip, policy.params.theta().len());
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut shuffle = stream(derive_seed(config.seed, SHUFFLE_SALT), StreamId::Scheduler);
    let mut augment_rng = stream(derive_seed(config.seed, AUGMENT_SALT), StreamId::Scheduler);
    let arch = *policy.params.arch();
    let mut pb: Vec<usize> = (0..arch.num_ris).collect();
    let mut pu: Vec<usize> = (0..arch.num_users).collect();
    let mut best: Option<(f64, f64, usize, PolicyParams)> = None;
    let mut stale = 0;

    for epoch in 0..tc.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut epoch_slots = 0;
        let augment = tc.augment && epoch >= tc.warmup_epochs;
        for batch in order.chunks(per_batch) {
            let permuted: Vec<Window> = if augment {
                batch
                    .iter()
                    .map(|&i| {
                        pb.shuffle(&mut augment_rng);
                        pu.shuffle(&mut augment_rng);
                        train_w[i].permuted(policy, &pb, &pu)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let ws: Vec<&Window> = if augment {
                permuted.iter().collect()
            } else {
                batch.iter().map(|&i| &train_w[i]).collect()
            };
            let slots: usize = ws.iter().map(|w| w.actions.len()).sum();
            let (loss, mut grad) = nll_grad(&policy.params, &ws)?;
            grad.iter_mut().for_each(|g| *g /= slots as f64);
            opt.apply(policy.params.theta_mut(), &mut grad)?;
            epoch_loss += loss;
            epoch_slots += slots;
        }
        let mut rec = EpochRecord {
            phase: Phase::Clone,
            epoch,
            train_loss: Some(epoch_loss / epoch_slots as f64),
            val_loss: None,
            val_accuracy: None,
            val_exact_match: None,
            mean_reward: None,
        };
        if val_w.is_empty() {
            report.epochs.push(rec);
            continue;
        }
        let acc = score_windows(policy, &val_w)?;
        rec.val_loss = Some(acc.nll);
        rec.val_accuracy = Some(acc.per_ris);
        rec.val_exact_match = Some(acc.exact_match);
        report.epochs.push(rec);
        let better = match &best {
            None => true,
            Some((a, l, _, _)) => acc.per_ris > *a || (acc.per_ris == *a && acc.nll < *l),
        };
        if better {
            best = Some((acc.per_ris, acc.nll, epoch, policy.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    if let Some((a, _, epoch, params)) = best {
        policy.params = params;
        report.best_epoch = Some(epoch);
        report.best_val_accuracy = Some(a);
    }
    Ok(())
}

/// One sampled episode: encoded observations, actions and rewards.
struct Rollout {
    features: Vec<Vec<f64>>,
    actions: Vec<Association>,
    rewards: Vec<f64>,
}

fn rollout(config: &SimConfig, policy: &Policy, horizon: usize, seed: u64) -> Result<Rollout> {
    let mut sim = Simulator::new(config, seed)?;
    let arch = *policy.params.arch();
    let mut rng = stream(seed, StreamId::Scheduler);
    let mut carry = Carry::zeros(&arch);
    let mut out = Rollout {
        features: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        if policy.context > 0 && t % policy.context == 0 {
            carry = Carry::zeros(&arch);
        }
        let view = sim.begin_slot()?;
        let x = policy.encode(&view.state);
        let logits = policy.params.step(&x, &mut carry)?;
        let (assoc, _) = sample_action(&HeadDists::from_logits(&arch, &logits), &mut rng);
        let outcome = sim.finish_slot(&assoc)?;
        out.features.push(x);
        out.actions.push(assoc);
        out.rewards.push(outcome.reward);
    }
    Ok(out)
}

/// Discounted reward-to-go of every slot.
pub fn returns_to_go(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + discount * acc;
        g[t] = acc;
    }
    g
}

/// Centers and scales advantages to unit variance; constant inputs map to zero.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Policy-gradient ascent on sampled episodes with a batch-mean baseline.
pub fn reinforce_train(config: &SimConfig, policy: &mut Policy, report: &mut TrainReport) -> Result<()> {
    let tc = &config.train;
    let rs = &tc.reinforce;
    let context = if policy.context == 0 { rs.horizon } else { policy.context };
    let mut opt = Stepper::new(tc.optimizer, rs.learning_rate, tc.grad_clip, policy.params.theta().len());
    for it in 0..rs.iterations {
        let base = derive_seed(derive_seed(config.seed, ROLLOUT_SALT), it as u64);
        let rollouts: Vec<Rollout> = (0..rs.rollouts)
            .into_par_iter()
            .map(|k| rollout(config, policy, rs.horizon, derive_seed(base, k as u64)))
            .collect::<Result<_>>()?;
        let returns: Vec<f64> = rollouts
            .iter()
            .flat_map(|r| returns_to_go(&r.rewards, rs.discount))
            .collect();
        let adv = normalize(&returns);
        let mut jobs = Vec::new();
        let mut offset = 0;
        for r in &rollouts {
            for start in (0..r.actions.len()).step_by(context) {
                let end = (start + context).min(r.actions.len());
                jobs.push((r, start, end, offset));
            }
            offset += r.actions.len();
        }
        let parts: Vec<Vec<f64>> = jobs
            .par_iter()
            .map(|&(r, s, e, off)| {
                // negated so the shared optimizer descends
                let w: Vec<f64> = adv[off + s..off + e].iter().map(|a| -a).collect();
                weighted_log_prob_grad(&policy.params, &r.features[s..e], &r.actions[s..e], &w).map(|(_, g)| g)
            })
            .collect::<Result<_>>()?;
        let slots = returns.len() as f64;
        let mut grad = vec![0.0; policy.params.theta().len()];
        for g in parts {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / slots);
        }
        opt.apply(policy.params.theta_mut(), &mut grad)?;
        let mean_reward = rollouts.iter().flat_map(|r| &r.rewards).sum::<f64>() / slots;
        report.epochs.push(EpochRecord {
            phase: Phase::Reinforce,
            epoch: it,
            train_loss: None,
            val_loss: None,
            val_accuracy: None,
            val_exact_match: None,
            mean_reward: Some(mean_reward),
        });
    }
    Ok(())
}

/// Encodes every state of an episode with `policy`'s feature set.
pub fn encode_episode(policy: &Policy, states: &[MdpState]) -> Vec<Vec<f64>> {
    states.iter().map(|s| encode_state(s, &policy.norms, policy.features)).collect()
}
