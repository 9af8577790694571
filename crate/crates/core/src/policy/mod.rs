//! The association MDP and its recurrent policy.

mod network;
pub mod train;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::Association;

pub use network::{Architecture, Carry, PolicyParams, SequenceCache, LSTM_LAYERS};

/// What the controller observes at the start of a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    pub num_ris: usize,
    pub num_users: usize,
    /// LoS indicators, row-major over (RIS, user).
    pub s_links: Vec<bool>,
    pub q: Vec<f64>,
    pub z1: f64,
    pub z2: f64,
    /// Image rates of every link this slot, row-major over (RIS, user).
    pub rates: Vec<f64>,
}

impl MdpState {
    pub fn empty(num_ris: usize, num_users: usize) -> Self {
        MdpState {
            num_ris,
            num_users,
            s_links: vec![false; num_ris * num_users],
            q: vec![0.0; num_users],
            z1: 0.0,
            z2: 0.0,
            rates: vec![0.0; num_ris * num_users],
        }
    }
}

/// Which observations feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// LoS matrix, queues and virtual queues: `B U + U + 2` features.
    LosQueues,
    /// `LosQueues` followed by the `B U` normalized link rates.
    WithRates,
    /// `LosQueues` followed by centered link weights `(offset + q) r`, their
    /// row and column ranks and row and column margins: `5 B U` extra features.
    Relational,
}

/// Scaling applied to queue, virtual-queue and rate features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateNorms {
    pub q_scale: f64,
    pub z_scale: f64,
    pub rate_scale: f64,
    /// Added to each backlog when weighting links for relational features.
    pub weight_offset: f64,
}

impl Default for StateNorms {
    fn default() -> Self {
        StateNorms {
            q_scale: 10.0,
            z_scale: 100.0,
            rate_scale: 50.0,
            weight_offset: 20.0,
        }
    }
}

impl StateNorms {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("q_scale", self.q_scale), ("z_scale", self.z_scale), ("rate_scale", self.rate_scale)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_offset >= 0.0) || !self.weight_offset.is_finite() {
            return Err(Error::invalid(format!("weight_offset must be non-negative, got {}", self.weight_offset)));
        }
        Ok(())
    }
}

pub fn feature_dim(features: FeatureSet, num_ris: usize, num_users: usize) -> usize {
    let base = num_ris * num_users + num_users + 2;
    match features {
        FeatureSet::LosQueues => base,
        FeatureSet::WithRates => base + num_ris * num_users,
        FeatureSet::Relational => base + 5 * num_ris * num_users,
    }
}

const BLOCKED_WEIGHT: f64 = -5.0;

/// Rank of each entry among `idx` by descending value, ties by position, scaled by `1 / n`.
fn ranks(values: &[f64], idx: &[usize], out: &mut [f64]) {
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_by(|&a, &b| values[idx[b]].total_cmp(&values[idx[a]]).then(a.cmp(&b)));
    let n = idx.len() as f64;
    for (rank, &k) in order.iter().enumerate() {
        out[idx[k]] = rank as f64 / n;
    }
}

/// Best value among `idx` other than position `skip`, floored at the blocked weight.
fn best_other(values: &[f64], idx: &[usize], skip: usize) -> f64 {
    idx.iter()
        .filter(|&&i| i != skip)
        .map(|&i| values[i])
        .fold(BLOCKED_WEIGHT, f64::max)
}

fn relational_features(state: &MdpState, offset: f64, v: &mut Vec<f64>) {
    let (nb, nu) = (state.num_ris, state.num_users);
    let w: Vec<f64> = (0..nb * nu).map(|i| (offset + state.q[i % nu]) * state.rates[i]).collect();
    let positive: Vec<f64> = w.iter().copied().filter(|&x| x > 0.0).collect();
    let m = if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    let wn: Vec<f64> = w
        .iter()
        .map(|&x| if x > 0.0 { (x - m) / (0.1 * m) } else { BLOCKED_WEIGHT })
        .collect();
    let rows: Vec<Vec<usize>> = (0..nb).map(|b| (0..nu).map(|u| b * nu + u).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..nu).map(|u| (0..nb).map(|b| b * nu + u).collect()).collect();
    let mut row_rank = vec![0.0; nb * nu];
    let mut col_rank = vec![0.0; nb * nu];
    rows.iter().for_each(|r| ranks(&wn, r, &mut row_rank));
    cols.iter().for_each(|c| ranks(&wn, c, &mut col_rank));
    v.extend_from_slice(&wn);
    v.extend_from_slice(&row_rank);
    v.extend_from_slice(&col_rank);
    v.extend((0..nb * nu).map(|i| (5.0 * (wn[i] - best_other(&wn, &rows[i / nu], i))).tanh()));
    v.extend((0..nb * nu).map(|i| (5.0 * (wn[i] - best_other(&wn, &cols[i % nu], i))).tanh()));
}

pub fn encode_state(state: &MdpState, norms: &StateNorms, features: FeatureSet) -> Vec<f64> {
    let mut v = Vec::with_capacity(feature_dim(features, state.num_ris, state.num_users));
    v.extend(state.s_links.iter().map(|&s| if s { 1.0 } else { 0.0 }));
    v.extend(state.q.iter().map(|q| q / norms.q_scale));
    v.push(state.z1 / norms.z_scale);
    v.push(state.z2 / norms.z_scale);
    match features {
        FeatureSet::LosQueues => {}
        FeatureSet::WithRates => v.extend(state.rates.iter().map(|r| r / norms.rate_scale)),
        FeatureSet::Relational => relational_features(state, norms.weight_offset, &mut v),
    }
    v
}

/// Per-RIS probabilities over `{user 0, .., user U-1, idle}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDists {
    pub num_users: usize,
    pub probs: Vec<Vec<f64>>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl HeadDists {
    pub fn from_logits(arch: &Architecture, logits: &[f64]) -> Self {
        let w = arch.head_width();
        HeadDists {
            num_users: arch.num_users,
            probs: logits.chunks(w).map(softmax).collect(),
        }
    }

    pub fn idle(&self) -> usize {
        self.num_users
    }
}

/// Runs the policy over a feature sequence, threading `carry`.
pub fn policy_forward(params: &PolicyParams, features: &[Vec<f64>], carry: &mut Carry) -> Result<Vec<HeadDists>> {
    features
        .iter()
        .map(|x| params.step(x, carry).map(|l| HeadDists::from_logits(params.arch(), &l)))
        .collect()
}

fn masked_pick(dists: &HeadDists, mut pick: impl FnMut(&[f64], &[bool]) -> usize) -> (Association, f64) {
    let nu = dists.num_users;
    let mut taken = vec![false; nu + 1];
    let mut choices = Vec::with_capacity(dists.probs.len());
    let mut log_prob = 0.0;
    for p in &dists.probs {
        let allowed: Vec<bool> = (0..=nu).map(|k| k == nu || !taken[k]).collect();
        let k = pick(p, &allowed);
        let mass: f64 = p.iter().zip(&allowed).filter(|(_, &a)| a).map(|(x, _)| x).sum();
        log_prob += (p[k] / mass).ln();
        if k < nu {
            taken[k] = true;
            choices.push(Some(k));
        } else {
            choices.push(None);
        }
    }
    let assoc = Association::from_choices(nu, &choices).expect("masking yields a feasible association");
    (assoc, log_prob)
}

/// Samples heads in RIS order, masking users already taken; returns the joint
/// log-probability under that masked factorization.
pub fn sample_action<R: Rng + ?Sized>(dists: &HeadDists, rng: &mut R) -> (Association, f64) {
    masked_pick(dists, |p, allowed| {
        let mass: f64 = p.iter().zip(allowed).filter(|(_, &a)| a).map(|(x, _)| x).sum();
        let mut draw = rng.random::<f64>() * mass;
        let mut last = p.len() - 1;
        for (k, (&x, &a)) in p.iter().zip(allowed).enumerate() {
            if !a {
                continue;
            }
            last = k;
            if draw < x {
                return k;
            }
            draw -= x;
        }
        last
    })
}

/// Most likely option of each head under the same masking; ties go to the lowest index.
pub fn greedy_action(dists: &HeadDists) -> (Association, f64) {
    masked_pick(dists, |p, allowed| {
        let mut best = p.len() - 1;
        let mut best_p = f64::NEG_INFINITY;
        for (k, (&x, &a)) in p.iter().zip(allowed).enumerate() {
            if a && x > best_p {
                best = k;
                best_p = x;
            }
        }
        best
    })
}

/// Per-head option indices of an association (`U` = idle).
pub fn action_labels(assoc: &Association) -> Vec<usize> {
    assoc
        .choices()
        .into_iter()
        .map(|c| c.unwrap_or(assoc.num_users()))
        .collect()
}

/// Masked log-probability of `labels` under one step's logits and its gradient
/// with respect to those logits.
pub(crate) fn masked_log_prob(arch: &Architecture, logits: &[f64], labels: &[usize]) -> (f64, Vec<f64>) {
    let w = arch.head_width();
    let nu = arch.num_users;
    let mut taken = vec![false; nu];
    let mut total = 0.0;
    let mut dlogits = vec![0.0; logits.len()];
    for (b, head) in logits.chunks(w).enumerate() {
        let a = labels[b];
        let allowed = |k: usize| k == nu || !taken[k];
        let m = (0..w).filter(|&k| allowed(k)).map(|k| head[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..w).filter(|&k| allowed(k)).map(|k| (head[k] - m).exp()).sum();
        let lse = m + z.ln();
        total += head[a] - lse;
        for k in 0..w {
            if allowed(k) {
                let p = (head[k] - lse).exp();
                dlogits[b * w + k] = if k == a { 1.0 - p } else { -p };
            }
        }
        if a < nu {
            taken[a] = true;
        }
    }
    (total, dlogits)
}

fn check_actions(arch: &Architecture, actions: &[Association]) -> Result<Vec<Vec<usize>>> {
    actions
        .iter()
        .map(|a| {
            if a.num_ris() != arch.num_ris || a.num_users() != arch.num_users {
                return Err(Error::dims(format!(
                    "action is {}x{}, policy is {}x{}",
                    a.num_ris(),
                    a.num_users(),
                    arch.num_ris,
                    arch.num_users
                )));
            }
            a.validate()?;
            Ok(action_labels(a))
        })
        .collect()
}

/// `sum_t w_t log pi(a_t | s_t)` over one episode and its gradient by
/// backpropagation through time. The carry starts at zero.
pub fn weighted_log_prob_grad(
    params: &PolicyParams,
    features: &[Vec<f64>],
    actions: &[Association],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.theta().len()];
    let total = accumulate_log_prob_grad(params, features, actions, weights, &mut grad)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((total, grad))
}

/// As [`weighted_log_prob_grad`], adding the gradient into `grad`.
pub(crate) fn accumulate_log_prob_grad(
    params: &PolicyParams,
    features: &[Vec<f64>],
    actions: &[Association],
    weights: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    if features.len() != actions.len() || weights.len() != actions.len() {
        return Err(Error::dims(format!(
            "{} states, {} actions, {} weights",
            features.len(),
            actions.len(),
            weights.len()
        )));
    }
    let labels = check_actions(params.arch(), actions)?;
    let cache = params.forward_cached(features)?;
    let mut total = 0.0;
    let mut dlogits = Vec::with_capacity(labels.len());
    for ((logits, lab), &w) in cache.logits.iter().zip(&labels).zip(weights) {
        let (lp, mut d) = masked_log_prob(params.arch(), logits, lab);
        total += w * lp;
        d.iter_mut().for_each(|v| *v *= w);
        dlogits.push(d);
    }
    params.backward_into(&cache, &dlogits, grad)?;
    Ok(total)
}

/// `sum_t log pi(a_t | s_t)` and its gradient.
pub fn log_prob_grad(params: &PolicyParams, features: &[Vec<f64>], actions: &[Association]) -> Result<(f64, Vec<f64>)> {
    weighted_log_prob_grad(params, features, actions, &vec![1.0; actions.len()])
}

/// A policy ready to act: parameters plus the observation encoding it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    pub features: FeatureSet,
    pub norms: StateNorms,
    /// Seed the parameters were initialized or trained with.
    pub seed: u64,
    /// The recurrent state is cleared every `context` slots; 0 never clears it.
    pub context: usize,
}

const CHECKPOINT_MAGIC: &str = "risvr-policy v1";

impl Policy {
    pub fn new(params: PolicyParams, features: FeatureSet, norms: StateNorms, seed: u64) -> Result<Self> {
        let arch = params.arch();
        let expect = feature_dim(features, arch.num_ris, arch.num_users);
        if arch.input_dim != expect {
            return Err(Error::dims(format!(
                "network input is {}, {features:?} encoding yields {expect}",
                arch.input_dim
            )));
        }
        norms.validate()?;
        Ok(Policy {
            params,
            features,
            norms,
            seed,
            context: 0,
        })
    }

    pub fn with_context(mut self, context: usize) -> Self {
        self.context = context;
        self
    }

    pub fn encode(&self, state: &MdpState) -> Vec<f64> {
        encode_state(state, &self.norms, self.features)
    }

    /// Text checkpoint: a small header followed by one parameter per line.
    pub fn to_checkpoint(&self) -> String {
        let a = self.params.arch();
        let features = match self.features {
            FeatureSet::LosQueues => "los_queues",
            FeatureSet::WithRates => "with_rates",
            FeatureSet::Relational => "relational",
        };
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "num_ris {}", a.num_ris);
        let _ = writeln!(s, "num_users {}", a.num_users);
        let _ = writeln!(s, "hidden {}", a.hidden);
        let _ = writeln!(s, "input_dim {}", a.input_dim);
        let _ = writeln!(s, "features {features}");
        let _ = writeln!(s, "q_scale {}", self.norms.q_scale);
        let _ = writeln!(s, "z_scale {}", self.norms.z_scale);
        let _ = writeln!(s, "rate_scale {}", self.norms.rate_scale);
        let _ = writeln!(s, "weight_offset {}", self.norms.weight_offset);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "context {}", self.context);
        let _ = writeln!(s, "params {}", self.params.theta().len());
        for v in self.params.theta() {
            let _ = writeln!(s, "{v:e}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("checkpoint: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {name}")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == name => Ok(v.to_string()),
                _ => Err(bad(format!("expected {name}, found {line:?}"))),
            }
        };
        let parse_usize = |v: String| v.parse::<usize>().map_err(|e| bad(e.to_string()));
        let parse_f64 = |v: String| v.parse::<f64>().map_err(|e| bad(e.to_string()));
        let num_ris = parse_usize(field("num_ris")?)?;
        let num_users = parse_usize(field("num_users")?)?;
        let hidden = parse_usize(field("hidden")?)?;
        let input_dim = parse_usize(field("input_dim")?)?;
        let features = match field("features")?.as_str() {
            "los_queues" => FeatureSet::LosQueues,
            "with_rates" => FeatureSet::WithRates,
            "relational" => FeatureSet::Relational,
            other => return Err(bad(format!("unknown feature set {other}"))),
        };
        let norms = StateNorms {
            q_scale: parse_f64(field("q_scale")?)?,
            z_scale: parse_f64(field("z_scale")?)?,
            rate_scale: parse_f64(field("rate_scale")?)?,
            weight_offset: parse_f64(field("weight_offset")?)?,
        };
        let seed = field("seed")?.parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let context = parse_usize(field("context")?)?;
        let count = parse_usize(field("params")?)?;
        let theta: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_>>()?;
        if theta.len() != count {
            return Err(bad(format!("header announces {count} parameters, found {}", theta.len())));
        }
        let arch = Architecture {
            input_dim,
            hidden,
            num_ris,
            num_users,
        };
        Ok(Policy::new(PolicyParams::from_flat(arch, theta)?, features, norms, seed)?.with_context(context))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Policy::from_checkpoint(&text).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::Parse {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};

    fn small_arch(b: usize, u: usize, h: usize) -> Architecture {
        Architecture {
            input_dim: feature_dim(FeatureSet::LosQueues, b, u),
            hidden: h,
            num_ris: b,
            num_users: u,
        }
    }

    #[test]
    fn encoding_layout() {
        let s = MdpState::empty(2, 3);
        let v = encode_state(&s, &StateNorms::default(), FeatureSet::LosQueues);
        assert_eq!(v, vec![0.0; 6 + 3 + 2]);
        assert_eq!(feature_dim(FeatureSet::LosQueues, 2, 2), 8);
        assert_eq!(feature_dim(FeatureSet::WithRates, 2, 2), 12);

        let mut s = MdpState::empty(1, 1);
        s.q = vec![4.0];
        s.s_links = vec![true];
        let norms = StateNorms { q_scale: 2.0, ..Default::default() };
        assert_eq!(encode_state(&s, &norms, FeatureSet::LosQueues), vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn heads_normalize() {
        let a = small_arch(3, 4, 8);
        let p = PolicyParams::init(a, &mut stream(1, StreamId::Scheduler)).unwrap();
        let mut rng = stream(2, StreamId::Scheduler);
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..a.input_dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let dists = policy_forward(&p, &xs, &mut Carry::zeros(&a)).unwrap();
        for d in &dists {
            assert_eq!(d.probs.len(), 3);
            for head in &d.probs {
                assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(head.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn zero_parameters_give_uniform_heads() {
        let a = small_arch(2, 3, 5);
        let p = PolicyParams::zeros(a).unwrap();
        let x = vec![1.0; a.input_dim];
        let d = policy_forward(&p, &[x], &mut Carry::zeros(&a)).unwrap();
        for head in &d[0].probs {
            for &v in head {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = small_arch(2, 2, 6);
        let p = PolicyParams::init(a, &mut stream(9, StreamId::Scheduler)).unwrap();
        let xs = vec![vec![0.3; a.input_dim]; 5];
        let one = policy_forward(&p, &xs, &mut Carry::zeros(&a)).unwrap();
        let two = policy_forward(&p, &xs, &mut Carry::zeros(&a)).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn sampling_examples() {
        let mut rng = stream(3, StreamId::Scheduler);
        let sure = HeadDists { num_users: 1, probs: vec![vec![1.0, 0.0]] };
        let (a, lp) = sample_action(&sure, &mut rng);
        assert!(a.get(0, 0));
        assert_eq!(lp, 0.0);

        let uniform = HeadDists { num_users: 2, probs: vec![vec![1.0 / 3.0; 3]] };
        let (_, lp) = sample_action(&uniform, &mut rng);
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-12);

        let both = HeadDists { num_users: 1, probs: vec![vec![0.9, 0.1], vec![0.9, 0.1]] };
        for _ in 0..50 {
            let (a, lp) = sample_action(&both, &mut rng);
            assert!(a.validate().is_ok());
            if a.get(0, 0) {
                assert!(!a.get(1, 0));
                // second head is forced to idle
                assert!((lp - 0.9f64.ln()).abs() < 1e-12);
            }
        }
        let (g, _) = greedy_action(&both);
        assert_eq!(g.choices(), vec![Some(0), None]);
    }

    #[test]
    fn centered_reward_gives_zero_update() {
        let a = small_arch(1, 2, 4);
        let p = PolicyParams::zeros(a).unwrap();
        let act = Association::from_choices(2, &[Some(1)]).unwrap();
        let x = vec![vec![0.5; a.input_dim]];
        let (_, g) = weighted_log_prob_grad(&p, &x, &[act], &[0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_episodes_identical_gradients() {
        let a = small_arch(2, 2, 6);
        let p = PolicyParams::init(a, &mut stream(4, StreamId::Scheduler)).unwrap();
        let xs = vec![vec![0.1; a.input_dim], vec![0.7; a.input_dim]];
        let acts = vec![
            Association::from_choices(2, &[Some(0), None]).unwrap(),
            Association::from_choices(2, &[Some(1), Some(0)]).unwrap(),
        ];
        assert_eq!(log_prob_grad(&p, &xs, &acts).unwrap(), log_prob_grad(&p, &xs, &acts).unwrap());
        assert!(log_prob_grad(&p, &xs, &acts[..1]).is_err());
    }

    #[test]
    fn masked_log_prob_matches_sampler() {
        let a = small_arch(2, 1, 4);
        let p = PolicyParams::init(a, &mut stream(5, StreamId::Scheduler)).unwrap();
        let x = vec![0.2; a.input_dim];
        let mut carry = Carry::zeros(&a);
        let logits = p.step(&x, &mut carry).unwrap();
        let dists = HeadDists::from_logits(&a, &logits);
        let (act, lp) = greedy_action(&dists);
        let (lp2, _) = masked_log_prob(&a, &logits, &action_labels(&act));
        assert!((lp - lp2).abs() < 1e-12);
    }

    #[test]
    fn relational_encoding_example() {
        let s = MdpState {
            num_ris: 1,
            num_users: 2,
            s_links: vec![true, true],
            q: vec![0.0, 0.0],
            z1: 0.0,
            z2: 0.0,
            rates: vec![1.0, 3.0],
        };
        let v = encode_state(&s, &StateNorms::default(), FeatureSet::Relational);
        assert_eq!(v.len(), feature_dim(FeatureSet::Relational, 1, 2));
        let t = 50f64.tanh();
        let want = [
            1.0, 1.0, 0.0, 0.0, 0.0, 0.0, -5.0, 5.0, 0.5, 0.0, 0.0, 0.0, -t, t, 0.0, t,
        ];
        for (a, b) in v.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }

        let mut blocked = s.clone();
        blocked.rates = vec![0.0, 0.0];
        let v = encode_state(&blocked, &StateNorms::default(), FeatureSet::Relational);
        assert_eq!(&v[6..8], &[-5.0, -5.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Architecture {
            input_dim: feature_dim(FeatureSet::WithRates, 2, 3),
            hidden: 4,
            num_ris: 2,
            num_users: 3,
        };
        let params = PolicyParams::init(a, &mut stream(6, StreamId::Scheduler)).unwrap();
        let pol = Policy::new(params, FeatureSet::WithRates, StateNorms::default(), 77)
            .unwrap()
            .with_context(16);
        let back = Policy::from_checkpoint(&pol.to_checkpoint()).unwrap();
        assert_eq!(back, pol);
        assert!(Policy::from_checkpoint("garbage").is_err());
        let truncated: String = pol.to_checkpoint().lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(Policy::from_checkpoint(&truncated).is_err());
    }

    #[test]
    fn policy_rejects_mismatched_encoding() {
        let a = small_arch(2, 2, 4);
        let params = PolicyParams::zeros(a).unwrap();
        assert!(Policy::new(params, FeatureSet::WithRates, StateNorms::default(), 0).is_err());
    }
}
