//! Per-slot drift-plus-penalty scheduling: objective weights, the exact
//! RIS-to-user assignment, the MDP reward and baseline policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::RateMatrix;
use crate::error::{Error, Result};
use crate::geometry::LinkGeometry;
use crate::queue::{QueueState, RiskParams};

/// Binary RIS-to-user association for one slot, row-major over (RIS, user).
///
/// Every RIS serves at most one user and every user is served by at most one RIS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Association {
    num_ris: usize,
    num_users: usize,
    x: Vec<bool>,
}

impl Association {
    pub fn empty(num_ris: usize, num_users: usize) -> Self {
        Association {
            num_ris,
            num_users,
            x: vec![false; num_ris * num_users],
        }
    }

    pub fn from_matrix(num_ris: usize, num_users: usize, x: Vec<bool>) -> Result<Self> {
        if x.len() != num_ris * num_users {
            return Err(Error::dims(format!(
                "association {num_ris}x{num_users} needs {} entries, got {}",
                num_ris * num_users,
                x.len()
            )));
        }
        let a = Association { num_ris, num_users, x };
        a.validate()?;
        Ok(a)
    }

    /// Builds an association from each RIS's chosen user (`None` = idle).
    pub fn from_choices(num_users: usize, choices: &[Option<usize>]) -> Result<Self> {
        let mut a = Association::empty(choices.len(), num_users);
        for (b, c) in choices.iter().enumerate() {
            if let Some(u) = *c {
                if u >= num_users {
                    return Err(Error::dims(format!("RIS {b} picks user {u} of {num_users}")));
                }
                a.x[b * num_users + u] = true;
            }
        }
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for b in 0..self.num_ris {
            let n = (0..self.num_users).filter(|&u| self.get(b, u)).count();
            if n > 1 {
                return Err(Error::Infeasible(format!("RIS {b} serves {n} users")));
            }
        }
        for u in 0..self.num_users {
            let n = (0..self.num_ris).filter(|&b| self.get(b, u)).count();
            if n > 1 {
                return Err(Error::Infeasible(format!("user {u} is served by {n} RIS")));
            }
        }
        Ok(())
    }

    pub fn num_ris(&self) -> usize {
        self.num_ris
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn get(&self, b: usize, u: usize) -> bool {
        self.x[b * self.num_users + u]
    }

    pub fn as_flat(&self) -> &[bool] {
        &self.x
    }

    /// The user served by RIS `b`, if any.
    pub fn choice(&self, b: usize) -> Option<usize> {
        (0..self.num_users).find(|&u| self.get(b, u))
    }

    pub fn choices(&self) -> Vec<Option<usize>> {
        (0..self.num_ris).map(|b| self.choice(b)).collect()
    }

    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let nu = self.num_users;
        self.x
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(move |(i, _)| (i / nu, i % nu))
    }

    pub fn len(&self) -> usize {
        self.x.iter().filter(|&&on| on).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images delivered to each user, `S_u = sum_b x_bu R_bu`.
    pub fn served(&self, rates: &RateMatrix) -> Result<Vec<f64>> {
        self.check_rates(rates)?;
        let mut s = vec![0.0; self.num_users];
        for (b, u) in self.links() {
            s[u] += rates.images(b, u);
        }
        Ok(s)
    }

    /// Sum rate of the selected links in bits per second.
    pub fn sum_rate_bps(&self, rates: &RateMatrix) -> Result<f64> {
        self.check_rates(rates)?;
        Ok(self.links().map(|(b, u)| rates.bps(b, u)).sum())
    }

    fn check_rates(&self, rates: &RateMatrix) -> Result<()> {
        if rates.num_ris() != self.num_ris || rates.num_users() != self.num_users {
            return Err(Error::dims(format!(
                "association is {}x{}, rates {}x{}",
                self.num_ris,
                self.num_users,
                rates.num_ris(),
                rates.num_users()
            )));
        }
        Ok(())
    }
}

/// Objective weights of the linear per-slot program, row-major over (RIS, user).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    num_ris: usize,
    num_users: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(num_ris: usize, num_users: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != num_ris * num_users {
            return Err(Error::dims(format!(
                "weights {num_ris}x{num_users} need {} entries, got {}",
                num_ris * num_users,
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(WeightMatrix { num_ris, num_users, w })
    }

    pub fn num_ris(&self) -> usize {
        self.num_ris
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn get(&self, b: usize, u: usize) -> f64 {
        self.w[b * self.num_users + u]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.w
    }

    /// `sum_bu w_bu x_bu`, accumulated in row-major order.
    pub fn objective(&self, assoc: &Association) -> f64 {
        assoc.links().map(|(b, u)| self.get(b, u)).sum()
    }
}

/// `w_bu = (V + Q_u) R_bu`: the action-dependent part of the per-slot objective.
pub fn build_weights(rates: &RateMatrix, queues: &QueueState, params: &RiskParams) -> Result<WeightMatrix> {
    if rates.num_users() != queues.q.len() {
        return Err(Error::dims(format!(
            "rates cover {} users, queues {}",
            rates.num_users(),
            queues.q.len()
        )));
    }
    let nu = rates.num_users();
    let w = rates
        .images_flat()
        .iter()
        .enumerate()
        .map(|(i, &r)| (params.v_tradeoff() + queues.q[i % nu]) * r)
        .collect();
    WeightMatrix::new(rates.num_ris(), nu, w)
}

/// The MDP reward
/// `V sum x R - sum_u Q_u (A_u - S_u) - Z1 (Q_t - eps) - Z2 (Q_t^2 - eta)`.
pub fn reward(
    assoc: &Association,
    rates: &RateMatrix,
    queues: &QueueState,
    arrivals: &[u64],
    params: &RiskParams,
) -> Result<f64> {
    assoc.validate()?;
    if queues.q.len() != assoc.num_users() || arrivals.len() != assoc.num_users() {
        return Err(Error::dims("queues and arrivals must cover every user"));
    }
    let served = assoc.served(rates)?;
    let utility: f64 = served.iter().sum();
    let q_t = queues.max_queue();
    let backlog: f64 = queues
        .q
        .iter()
        .zip(arrivals)
        .zip(&served)
        .map(|((q, &a), s)| q * (a as f64 - s))
        .sum();
    Ok(params.v_tradeoff() * utility
        - backlog
        - queues.z1 * (q_t - params.epsilon())
        - queues.z2 * (q_t * q_t - params.eta()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Enumerates every partial matching; fine for min(B, U) <= 6.
    Brute,
    /// Kuhn-Munkres with a lexicographic completion pass.
    ExactMatching,
}

fn tie_tolerance(w: &WeightMatrix) -> f64 {
    1e-12 * w.w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Maximizes `sum w x` over partial matchings.
///
/// Only strictly positive links are ever selected. Among optimal matchings the
/// one whose row-major indicator vector is lexicographically largest wins, so
/// equal weights yield (0,0), (1,1), ...
pub fn solve_assignment(weights: &WeightMatrix, method: SolveMethod) -> Association {
    match method {
        SolveMethod::Brute => solve_brute(weights),
        SolveMethod::ExactMatching => solve_matching(weights),
    }
}

fn lex_greater(a: &[bool], b: &[bool]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return *x;
        }
    }
    false
}

fn solve_brute(weights: &WeightMatrix) -> Association {
    let (nb, nu) = (weights.num_ris, weights.num_users);
    let mut all: Vec<(f64, Vec<bool>)> = Vec::new();
    let mut x = vec![false; nb * nu];
    let mut used = vec![false; nu];
    fn rec(
        b: usize,
        w: &WeightMatrix,
        x: &mut Vec<bool>,
        used: &mut Vec<bool>,
        out: &mut Vec<(f64, Vec<bool>)>,
    ) {
        if b == w.num_ris {
            let value = x
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(i, _)| w.w[i])
                .sum();
            out.push((value, x.clone()));
            return;
        }
        rec(b + 1, w, x, used, out);
        for u in 0..w.num_users {
            if !used[u] && w.get(b, u) > 0.0 {
                used[u] = true;
                x[b * w.num_users + u] = true;
                rec(b + 1, w, x, used, out);
                x[b * w.num_users + u] = false;
                used[u] = false;
            }
        }
    }
    rec(0, weights, &mut x, &mut used, &mut all);
    let best = all.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let tol = tie_tolerance(weights);
    let mut chosen: Option<&Vec<bool>> = None;
    for (v, cand) in &all {
        if *v >= best - tol && chosen.is_none_or(|c| lex_greater(cand, c)) {
            chosen = Some(cand);
        }
    }
    Association {
        num_ris: nb,
        num_users: nu,
        x: chosen.cloned().unwrap_or_else(|| vec![false; nb * nu]),
    }
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols).
/// Returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal value over the given rows/columns using only `allowed` links.
fn matching_value(w: &WeightMatrix, rows: &[usize], cols: &[usize], allowed: &[bool]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    // one idle column per row keeps the problem rectangular and feasible
    let width = cols.len() + rows.len();
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&b| {
            let mut row = vec![0.0; width];
            for (j, &u) in cols.iter().enumerate() {
                let i = b * w.num_users + u;
                if allowed[i] {
                    row[j] = -w.w[i];
                }
            }
            row
        })
        .collect();
    hungarian(&cost)
        .iter()
        .zip(rows)
        .filter(|(&j, _)| j < cols.len())
        .map(|(&j, &b)| {
            let i = b * w.num_users + cols[j];
            if allowed[i] {
                w.w[i]
            } else {
                0.0
            }
        })
        .sum()
}

fn solve_matching(weights: &WeightMatrix) -> Association {
    let (nb, nu) = (weights.num_ris, weights.num_users);
    let mut allowed: Vec<bool> = weights.w.iter().map(|&v| v > 0.0).collect();
    let all_rows: Vec<usize> = (0..nb).collect();
    let all_cols: Vec<usize> = (0..nu).collect();
    let best = matching_value(weights, &all_rows, &all_cols, &allowed);
    let tol = tie_tolerance(weights);

    let mut x = vec![false; nb * nu];
    let mut fixed_value = 0.0;
    let mut row_free = vec![true; nb];
    let mut col_free = vec![true; nu];
    for b in 0..nb {
        for u in 0..nu {
            let i = b * nu + u;
            if !allowed[i] || !row_free[b] || !col_free[u] {
                continue;
            }
            let rows: Vec<usize> = (0..nb).filter(|&r| row_free[r] && r != b).collect();
            let cols: Vec<usize> = (0..nu).filter(|&c| col_free[c] && c != u).collect();
            let completion = matching_value(weights, &rows, &cols, &allowed);
            if fixed_value + weights.w[i] + completion >= best - tol {
                x[i] = true;
                fixed_value += weights.w[i];
                row_free[b] = false;
                col_free[u] = false;
            } else {
                allowed[i] = false;
            }
        }
    }
    Association {
        num_ris: nb,
        num_users: nu,
        x,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Nearest,
}

/// Number of partial matchings of `rows` RIS into `cols` free users.
fn matching_count(rows: usize, cols: usize) -> f64 {
    // f(b, m) = f(b - 1, m) + m f(b - 1, m - 1), f(0, m) = 1
    let mut f = vec![1.0; cols + 1];
    for _ in 0..rows {
        let prev = f.clone();
        for m in 1..=cols {
            f[m] = prev[m] + m as f64 * prev[m - 1];
        }
    }
    f[cols]
}

/// Comparison baselines.
///
/// `Random` draws uniformly over every feasible matching; `Nearest` lets each
/// RIS in turn take its closest LoS user that is still unassigned.
pub fn baseline_assoc<R: Rng + ?Sized>(kind: BaselineKind, geom: &LinkGeometry, rng: &mut R) -> Association {
    let (nb, nu) = (geom.num_ris(), geom.num_users());
    let mut assoc = Association::empty(nb, nu);
    let mut taken = vec![false; nu];
    match kind {
        BaselineKind::Random => {
            for b in 0..nb {
                let free: Vec<usize> = (0..nu).filter(|&u| !taken[u]).collect();
                let rest = nb - b - 1;
                let total = matching_count(rest + 1, free.len());
                let idle = matching_count(rest, free.len());
                let mut draw = rng.random::<f64>() * total;
                if draw < idle {
                    continue;
                }
                draw -= idle;
                let each = matching_count(rest, free.len() - 1);
                let k = ((draw / each) as usize).min(free.len() - 1);
                taken[free[k]] = true;
                assoc.x[b * nu + free[k]] = true;
            }
        }
        BaselineKind::Nearest => {
            for b in 0..nb {
                let pick = (0..nu)
                    .filter(|&u| !taken[u] && geom.los(b, u))
                    .min_by(|&a, &c| geom.distance(b, a).total_cmp(&geom.distance(b, c)));
                if let Some(u) = pick {
                    taken[u] = true;
                    assoc.x[b * nu + u] = true;
                }
            }
        }
    }
    assoc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::rng::{stream, StreamId};
    use std::collections::HashMap;

    fn wm(nb: usize, nu: usize, w: &[f64]) -> WeightMatrix {
        WeightMatrix::new(nb, nu, w.to_vec()).unwrap()
    }

    #[test]
    fn weights_reduce_reward() {
        let p = RiskParams::default();
        let c = ChannelParams::default();
        let rates = RateMatrix::from_images(1, 1, vec![2.0], &c).unwrap();
        let q = QueueState { q: vec![5.0], z1: 0.0, z2: 0.0 };
        let w = build_weights(&rates, &q, &p).unwrap();
        assert!((w.get(0, 0) - 50.0).abs() < 1e-12);

        let on = Association::from_matrix(1, 1, vec![true]).unwrap();
        let off = Association::empty(1, 1);
        let r_on = reward(&on, &rates, &q, &[1], &p).unwrap();
        let r_off = reward(&off, &rates, &q, &[1], &p).unwrap();
        assert!((r_on - 45.0).abs() < 1e-12);
        assert!((r_off + 5.0).abs() < 1e-12);
        assert!((r_on - r_off - w.get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn blocked_and_degenerate_weights_vanish() {
        let c = ChannelParams::default();
        let rates = RateMatrix::from_images(1, 2, vec![0.0, 3.0], &c).unwrap();
        let q = QueueState { q: vec![4.0, 0.0], z1: 0.0, z2: 0.0 };
        let w = build_weights(&rates, &q, &RiskParams::default()).unwrap();
        assert_eq!(w.get(0, 0), 0.0);
        let v0 = RiskParams::new(0.05, 50.0, 2.0, 0.05, 0.0).unwrap();
        let zq = QueueState::empty(2);
        let w = build_weights(&rates, &zq, &v0).unwrap();
        assert!(w.as_flat().iter().all(|&v| v == 0.0));
        assert!(solve_assignment(&w, SolveMethod::ExactMatching).is_empty());
    }

    #[test]
    fn virtual_queue_term_is_action_independent() {
        let p = RiskParams::default();
        let c = ChannelParams::default();
        let rates = RateMatrix::from_images(1, 1, vec![0.0], &c).unwrap();
        let q = QueueState { q: vec![4.0], z1: 1.0, z2: 0.0 };
        let r = reward(&Association::empty(1, 1), &rates, &q, &[0], &p).unwrap();
        assert!((r + 2.0).abs() < 1e-12);

        let zero = QueueState::empty(1);
        assert_eq!(reward(&Association::empty(1, 1), &rates, &zero, &[0], &p).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_example() {
        let w = wm(2, 2, &[3.0, 1.0, 2.0, 4.0]);
        for m in [SolveMethod::Brute, SolveMethod::ExactMatching] {
            let a = solve_assignment(&w, m);
            assert!(a.get(0, 0) && a.get(1, 1));
            assert_eq!(w.objective(&a), 7.0);
        }
    }

    #[test]
    fn equal_weights_pick_the_diagonal() {
        let w = wm(3, 4, &[1.0; 12]);
        for m in [SolveMethod::Brute, SolveMethod::ExactMatching] {
            let a = solve_assignment(&w, m);
            assert_eq!(a.choices(), vec![Some(0), Some(1), Some(2)]);
        }
    }

    #[test]
    fn zero_row_leaves_ris_idle() {
        let w = wm(3, 2, &[0.0, 0.0, 5.0, 1.0, 2.0, 6.0]);
        let brute = solve_assignment(&w, SolveMethod::Brute);
        let exact = solve_assignment(&w, SolveMethod::ExactMatching);
        assert_eq!(brute, exact);
        assert_eq!(exact.choice(0), None);
        assert_eq!(w.objective(&exact), 11.0);
    }

    #[test]
    fn infeasible_associations_rejected() {
        assert!(Association::from_matrix(1, 2, vec![true, true]).is_err());
        assert!(Association::from_matrix(2, 1, vec![true, true]).is_err());
        assert!(Association::from_choices(2, &[Some(1), Some(1)]).is_err());
        let rates = RateMatrix::zeros(1, 2);
        let bad = Association { num_ris: 1, num_users: 2, x: vec![true, true] };
        let q = QueueState::empty(2);
        assert!(reward(&bad, &rates, &q, &[0, 0], &RiskParams::default()).is_err());
    }

    #[test]
    fn nearest_baseline() {
        let mut rng = stream(0, StreamId::Scheduler);
        let g = LinkGeometry::new(1, 1, vec![true], vec![5.0]).unwrap();
        assert_eq!(baseline_assoc(BaselineKind::Nearest, &g, &mut rng).choices(), vec![Some(0)]);
        let blocked = LinkGeometry::new(2, 2, vec![false; 4], vec![3.0; 4]).unwrap();
        assert!(baseline_assoc(BaselineKind::Nearest, &blocked, &mut rng).is_empty());

        let g = LinkGeometry::new(2, 2, vec![true, true, true, true], vec![5.0, 2.0, 1.5, 9.0]).unwrap();
        assert_eq!(baseline_assoc(BaselineKind::Nearest, &g, &mut rng).choices(), vec![Some(1), Some(0)]);
    }

    #[test]
    fn random_baseline_single_link() {
        // one RIS, one user: {idle, assigned}; both occur and the result is feasible
        let mut rng = stream(4, StreamId::Scheduler);
        let g = LinkGeometry::new(1, 1, vec![true], vec![5.0]).unwrap();
        let hits = (0..1000)
            .filter(|_| !baseline_assoc(BaselineKind::Random, &g, &mut rng).is_empty())
            .count();
        assert!(hits > 400 && hits < 600);
    }

    #[test]
    fn random_baseline_is_uniform() {
        let mut rng = stream(8, StreamId::Scheduler);
        let g = LinkGeometry::new(2, 2, vec![true; 4], vec![3.0; 4]).unwrap();
        let n = 100_000;
        let mut counts: HashMap<Vec<bool>, usize> = HashMap::new();
        for _ in 0..n {
            let a = baseline_assoc(BaselineKind::Random, &g, &mut rng);
            *counts.entry(a.as_flat().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 7);
        for c in counts.values() {
            let f = *c as f64 / n as f64;
            assert!((f - 1.0 / 7.0).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn matching_counts() {
        assert_eq!(matching_count(2, 2), 7.0);
        assert_eq!(matching_count(4, 3), 73.0);
        assert_eq!(matching_count(0, 5), 1.0);
        assert_eq!(matching_count(3, 0), 1.0);
    }
}
