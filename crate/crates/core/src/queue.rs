//! Content queues, virtual risk queues, the Lyapunov drift bound and the
//! EVaR / VaR estimators.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::channel::RateMatrix;
use crate::error::{Error, Result};

/// `eta = eps^2 + 2 (gamma (kappa + 1) - eps)`; may be non-positive.
pub fn derive_eta(epsilon: f64, gamma: f64, kappa: f64) -> f64 {
    epsilon * epsilon + 2.0 * (gamma * (kappa + 1.0) - epsilon)
}

/// Raw risk settings as they appear in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSettings {
    pub gamma: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub v_tradeoff: f64,
}

impl Default for RiskSettings {
    fn default() -> Self {
        RiskSettings {
            gamma: 0.05,
            kappa: 50.0,
            epsilon: 2.0,
            alpha: 0.05,
            v_tradeoff: 20.0,
        }
    }
}

/// Validated risk parameters with the derived second-moment bound `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RiskSettings", into = "RiskSettings")]
pub struct RiskParams {
    gamma: f64,
    kappa: f64,
    epsilon: f64,
    eta: f64,
    alpha: f64,
    v_tradeoff: f64,
}

impl RiskParams {
    pub fn new(gamma: f64, kappa: f64, epsilon: f64, alpha: f64, v_tradeoff: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        if !kappa.is_finite() {
            return Err(Error::invalid("kappa must be finite"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if !(v_tradeoff >= 0.0) || !v_tradeoff.is_finite() {
            return Err(Error::invalid(format!("V must be non-negative, got {v_tradeoff}")));
        }
        let eta = derive_eta(epsilon, gamma, kappa);
        if !(eta > 0.0) {
            return Err(Error::invalid(format!(
                "eta = {eta} is not positive for epsilon={epsilon}, gamma={gamma}, kappa={kappa}"
            )));
        }
        Ok(RiskParams {
            gamma,
            kappa,
            epsilon,
            eta,
            alpha,
            v_tradeoff,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn v_tradeoff(&self) -> f64 {
        self.v_tradeoff
    }
}

impl Default for RiskParams {
    fn default() -> Self {
        RiskParams::try_from(RiskSettings::default()).expect("default risk settings are feasible")
    }
}

impl TryFrom<RiskSettings> for RiskParams {
    type Error = Error;

    fn try_from(s: RiskSettings) -> Result<Self> {
        RiskParams::new(s.gamma, s.kappa, s.epsilon, s.alpha, s.v_tradeoff)
    }
}

impl From<RiskParams> for RiskSettings {
    fn from(p: RiskParams) -> Self {
        RiskSettings {
            gamma: p.gamma,
            kappa: p.kappa,
            epsilon: p.epsilon,
            alpha: p.alpha,
            v_tradeoff: p.v_tradeoff,
        }
    }
}

/// Poisson arrival rates in images per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrivalConfig {
    /// Rate used for every user unless `per_user` is given.
    pub mean_rate: f64,
    pub per_user: Option<Vec<f64>>,
}

impl Default for ArrivalConfig {
    fn default() -> Self {
        ArrivalConfig {
            mean_rate: 1.0,
            per_user: None,
        }
    }
}

impl ArrivalConfig {
    pub fn uniform(rate: f64) -> Self {
        ArrivalConfig {
            mean_rate: rate,
            per_user: None,
        }
    }

    pub fn rates(&self, num_users: usize) -> Result<Vec<f64>> {
        let rates = match &self.per_user {
            Some(r) if r.len() != num_users => {
                return Err(Error::dims(format!(
                    "{} per-user arrival rates for {num_users} users",
                    r.len()
                )))
            }
            Some(r) => r.clone(),
            None => vec![self.mean_rate; num_users],
        };
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("arrival rates must be finite and non-negative"));
        }
        Ok(rates)
    }
}

/// Independent Poisson counts, one per user.
pub fn sample_arrivals<R: Rng + ?Sized>(rates: &[f64], rng: &mut R) -> Vec<u64> {
    rates
        .iter()
        .map(|&lambda| {
            if lambda > 0.0 {
                Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
            } else {
                0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub q: Vec<f64>,
    pub z1: f64,
    pub z2: f64,
}

impl QueueState {
    pub fn empty(num_users: usize) -> Self {
        QueueState {
            q: vec![0.0; num_users],
            z1: 0.0,
            z2: 0.0,
        }
    }

    /// Q_t, the largest user queue.
    pub fn max_queue(&self) -> f64 {
        self.q.iter().copied().fold(0.0, f64::max)
    }

    /// L_t = (Z1^2 + Z2^2 + sum_u Q_u^2) / 2.
    pub fn lyapunov(&self) -> f64 {
        0.5 * (self.z1 * self.z1 + self.z2 * self.z2 + self.q.iter().map(|q| q * q).sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueUpdate {
    pub state: QueueState,
    /// Max queue of the slot before service, which drives the virtual queues.
    pub q_max: f64,
}

pub fn update_queues(state: &QueueState, served: &[f64], arrivals: &[u64], params: &RiskParams) -> Result<QueueUpdate> {
    let n = state.q.len();
    if served.len() != n || arrivals.len() != n {
        return Err(Error::dims(format!(
            "{n} queues but {} service and {} arrival entries",
            served.len(),
            arrivals.len()
        )));
    }
    if served.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::invalid("served rates must be finite and non-negative"));
    }
    let q_max = state.max_queue();
    let q = state
        .q
        .iter()
        .zip(served)
        .zip(arrivals)
        .map(|((&q, &s), &a)| (q - s).max(0.0) + a as f64)
        .collect();
    let z1 = (state.z1 + q_max - params.epsilon()).max(0.0);
    let z2 = (state.z2 + q_max * q_max - params.eta()).max(0.0);
    Ok(QueueUpdate {
        state: QueueState { q, z1, z2 },
        q_max,
    })
}

/// `log(mean(exp(-gamma x))) / gamma`, evaluated with a max shift.
pub fn evar_estimate(samples: &[f64], gamma: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("EVaR needs at least one sample".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let shift = samples
        .iter()
        .map(|x| -gamma * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean = samples.iter().map(|x| (-gamma * x - shift).exp()).sum::<f64>() / samples.len() as f64;
    Ok((mean.ln() + shift) / gamma)
}

/// Empirical (1 - alpha) quantile with lower interpolation.
pub fn var_estimate(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("VaR needs at least one sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((1.0 - alpha) * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

/// Both sides of the one-slot drift inequality for a recorded transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub lyapunov_before: f64,
    pub lyapunov_after: f64,
    pub upsilon: f64,
    /// L_{t+1} - L_t.
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `(sum_u (S_u^2 + A_u^2) + (Q_t - eps)^2 + (Q_t^2 - eta)^2) / 2`: the slot's
    /// own second-order terms, which bound the drift for every realization.
    pub realized_upsilon: f64,
    pub realized_rhs: f64,
    pub realized_holds: bool,
}

/// `Upsilon = (U r_max^2 + eps^2 + eta^2) / 2`.
pub fn upsilon(num_users: usize, peak_rate: f64, params: &RiskParams) -> f64 {
    0.5 * (num_users as f64 * peak_rate * peak_rate + params.epsilon().powi(2) + params.eta().powi(2))
}

/// Checks `L_{t+1} - L_t <= Upsilon + sum_u Q_u (A_u - S_u) + Z1 (Q_t - eps) + Z2 (Q_t^2 - eta)`
/// with the rate peak taken over this slot's links.
pub fn drift_bound_check(
    before: &QueueState,
    after: &QueueState,
    served: &[f64],
    arrivals: &[u64],
    rates: &RateMatrix,
    params: &RiskParams,
) -> Result<DriftReport> {
    if rates.num_users() != before.q.len() {
        return Err(Error::dims(format!(
            "rate matrix covers {} users, queues {}",
            rates.num_users(),
            before.q.len()
        )));
    }
    drift_bound_check_with_peak(before, after, served, arrivals, rates.max_images(), params)
}

/// As [`drift_bound_check`] with an explicit rate peak (e.g. the channel's rate ceiling).
pub fn drift_bound_check_with_peak(
    before: &QueueState,
    after: &QueueState,
    served: &[f64],
    arrivals: &[u64],
    peak_rate: f64,
    params: &RiskParams,
) -> Result<DriftReport> {
    let n = before.q.len();
    if after.q.len() != n || served.len() != n || arrivals.len() != n {
        return Err(Error::dims(format!(
            "drift check over {n} users got {}, {}, {} entries",
            after.q.len(),
            served.len(),
            arrivals.len()
        )));
    }
    let q_t = before.max_queue();
    let ups = upsilon(n, peak_rate, params);
    let queue_term: f64 = before
        .q
        .iter()
        .zip(served)
        .zip(arrivals)
        .map(|((q, s), &a)| q * (a as f64 - s))
        .sum();
    let linear = queue_term + before.z1 * (q_t - params.epsilon()) + before.z2 * (q_t * q_t - params.eta());
    let rhs = ups + linear;
    let second: f64 = served.iter().zip(arrivals).map(|(s, &a)| s * s + (a as f64).powi(2)).sum();
    let realized_upsilon =
        0.5 * (second + (q_t - params.epsilon()).powi(2) + (q_t * q_t - params.eta()).powi(2));
    let realized_rhs = realized_upsilon + linear;
    let l0 = before.lyapunov();
    let l1 = after.lyapunov();
    let lhs = l1 - l0;
    let tol = |r: f64| 1e-9 * r.abs().max(l0.abs()).max(l1.abs()).max(1.0);
    Ok(DriftReport {
        lyapunov_before: l0,
        lyapunov_after: l1,
        upsilon: ups,
        lhs,
        rhs,
        holds: lhs <= rhs + tol(rhs),
        realized_upsilon,
        realized_rhs,
        realized_holds: lhs <= realized_rhs + tol(realized_rhs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::rng::{stream, StreamId};

    #[test]
    fn eta_formula() {
        assert!((derive_eta(2.0, 0.05, 50.0) - 5.1).abs() < 1e-12);
        // gamma (kappa + 1) = eps
        assert!((derive_eta(1.5, 0.05, 29.0) - 2.25).abs() < 1e-12);
        assert!((derive_eta(1.0, 0.01, 10.0) + 0.78).abs() < 1e-12);
        assert!(RiskParams::new(0.01, 10.0, 1.0, 0.05, 20.0).is_err());
        assert!((RiskParams::default().eta() - 5.1).abs() < 1e-12);
    }

    #[test]
    fn risk_params_validation() {
        assert!(RiskParams::new(0.0, 50.0, 2.0, 0.05, 20.0).is_err());
        assert!(RiskParams::new(1.0, 50.0, 2.0, 0.05, 20.0).is_err());
        assert!(RiskParams::new(0.05, 50.0, 0.0, 0.05, 20.0).is_err());
        assert!(RiskParams::new(0.05, 50.0, 2.0, 1.0, 20.0).is_err());
        assert!(RiskParams::new(0.05, 50.0, 2.0, 0.05, -1.0).is_err());
    }

    #[test]
    fn zero_rate_arrivals_are_zero() {
        let mut rng = stream(1, StreamId::Arrivals);
        for _ in 0..100 {
            assert_eq!(sample_arrivals(&[0.0, 0.0], &mut rng), vec![0, 0]);
        }
    }

    #[test]
    fn poisson_zero_probability() {
        let mut rng = stream(2, StreamId::Arrivals);
        let n = 1_000_000;
        let zeros = (0..n).filter(|_| sample_arrivals(&[2.5], &mut rng)[0] == 0).count();
        let expect = (-2.5f64).exp();
        assert!(((zeros as f64 / n as f64) / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn queue_update_examples() {
        let p = RiskParams::default();
        let s = QueueState { q: vec![5.0], z1: 0.0, z2: 0.0 };
        let up = update_queues(&s, &[3.5], &[2], &p).unwrap();
        assert_eq!(up.state.q, vec![3.5]);

        let s = QueueState { q: vec![1.0], z1: 0.0, z2: 0.0 };
        assert_eq!(update_queues(&s, &[10.0], &[0], &p).unwrap().state.q, vec![0.0]);

        let s = QueueState { q: vec![4.0, 1.0], z1: 2.0, z2: 0.0 };
        let up = update_queues(&s, &[0.0, 0.0], &[0, 0], &p).unwrap();
        assert_eq!(up.q_max, 4.0);
        assert!((up.state.z1 - 4.0).abs() < 1e-12);
        assert!((up.state.z2 - 10.9).abs() < 1e-12);
    }

    #[test]
    fn queue_update_rejects_bad_input() {
        let p = RiskParams::default();
        let s = QueueState::empty(2);
        assert!(update_queues(&s, &[-1.0, 0.0], &[0, 0], &p).is_err());
        assert!(update_queues(&s, &[0.0], &[0, 0], &p).is_err());
    }

    #[test]
    fn evar_examples() {
        assert!((evar_estimate(&[5.0; 10], 0.01).unwrap() + 5.0).abs() < 1e-12);
        assert_eq!(evar_estimate(&[0.0; 4], 0.3).unwrap(), 0.0);
        let two = evar_estimate(&[0.0, 10.0], 0.1).unwrap();
        let expect = ((1.0 + (-1.0f64).exp()) / 2.0).ln() / 0.1;
        assert!((two - expect).abs() < 1e-12);
        assert!((two + 3.799).abs() < 1e-3);
        assert!(evar_estimate(&[], 0.1).is_err());
    }

    #[test]
    fn evar_survives_large_samples() {
        let v = evar_estimate(&[1e6, 1e6 + 1.0], 0.5).unwrap();
        assert!(v.is_finite());
        assert!(v <= -1e6 && v >= -1e6 - 1.0);
    }

    #[test]
    fn var_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(var_estimate(&s, 0.05).unwrap(), 95.0);
        assert_eq!(var_estimate(&[3.0; 7], 0.2).unwrap(), 3.0);
        assert_eq!(var_estimate(&[0.0, 10.0], 0.5).unwrap(), 0.0);
        assert!(var_estimate(&[], 0.5).is_err());
    }

    #[test]
    fn lyapunov_and_upsilon() {
        let s = QueueState { q: vec![1.0, 2.0], z1: 1.0, z2: 2.0 };
        assert_eq!(s.lyapunov(), 5.0);
        let p = RiskParams::default();
        assert!((upsilon(2, 10.0, &p) - 115.005).abs() < 1e-9);
    }

    #[test]
    fn drift_on_empty_system() {
        let p = RiskParams::default();
        let s = QueueState::empty(2);
        let after = update_queues(&s, &[0.0, 0.0], &[0, 0], &p).unwrap().state;
        let rates = RateMatrix::zeros(1, 2);
        let r = drift_bound_check(&s, &after, &[0.0, 0.0], &[0, 0], &rates, &p).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.upsilon > 0.0);
        assert!(r.holds);
    }

    #[test]
    fn drift_check_uses_rate_peak() {
        let p = RiskParams::default();
        let c = ChannelParams::default();
        let rates = RateMatrix::from_images(1, 2, vec![10.0, 3.0], &c).unwrap();
        let s = QueueState::empty(2);
        let r = drift_bound_check(&s, &s, &[0.0, 0.0], &[0, 0], &rates, &p).unwrap();
        assert!((r.upsilon - 115.005).abs() < 1e-9);
        assert!(drift_bound_check(&s, &s, &[0.0], &[0, 0], &rates, &p).is_err());
    }

    #[test]
    fn large_backlog_breaks_nominal_bound_only() {
        let p = RiskParams::default();
        let before = QueueState {
            q: vec![20.0],
            z1: 0.0,
            z2: 0.0,
        };
        let after = update_queues(&before, &[0.0], &[0], &p).unwrap().state;
        assert_eq!(after.z1, 18.0);
        assert!((after.z2 - 394.9).abs() < 1e-12);
        let r = drift_bound_check_with_peak(&before, &after, &[0.0], &[0], 0.0, &p).unwrap();
        assert!((r.lhs - 78135.005).abs() < 1e-6);
        assert!(!r.holds);
        assert!((r.realized_rhs - r.lhs).abs() < 1e-6);
        assert!(r.realized_holds);
    }
}
