use rand::Rng;
use risvr::policy::{feature_dim, log_prob_grad, Architecture, FeatureSet, PolicyParams};
use risvr::rng::{stream, StreamId};
use risvr::scheduler::Association;

fn random_case(seed: u64, b: usize, u: usize, h: usize, steps: usize) -> (PolicyParams, Vec<Vec<f64>>, Vec<Association>) {
    let arch = Architecture {
        input_dim: feature_dim(FeatureSet::WithRates, b, u),
        hidden: h,
        num_ris: b,
        num_users: u,
    };
    let mut rng = stream(seed, StreamId::Scheduler);
    let mut params = PolicyParams::init(arch, &mut rng).unwrap();
    for v in params.theta_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let xs = (0..steps)
        .map(|_| (0..arch.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let acts = (0..steps)
        .map(|_| {
            let mut taken = vec![false; u];
            let choices: Vec<Option<usize>> = (0..b)
                .map(|_| {
                    let k = rng.random_range(0..=u);
                    if k < u && !taken[k] {
                        taken[k] = true;
                        Some(k)
                    } else {
                        None
                    }
                })
                .collect();
            Association::from_choices(u, &choices).unwrap()
        })
        .collect();
    (params, xs, acts)
}

/// Largest `|analytic - fd| / max(1, |analytic|)` over all parameters.
fn worst_fd_error(params: &PolicyParams, xs: &[Vec<f64>], acts: &[Association], step: f64) -> f64 {
    let (_, grad) = log_prob_grad(params, xs, acts).unwrap();
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let orig = p.theta()[i];
        p.theta_mut()[i] = orig + step;
        let up = log_prob_grad(&p, xs, acts).unwrap().0;
        p.theta_mut()[i] = orig - step;
        let down = log_prob_grad(&p, xs, acts).unwrap().0;
        p.theta_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(1.0));
    }
    worst
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    for seed in 1..=3 {
        let (params, xs, acts) = random_case(seed, 2, 2, 8, 5);
        let err = worst_fd_error(&params, &xs, &acts, 1e-5);
        assert!(err <= 1e-4, "seed {seed}: worst relative error {err}");
    }
}

#[test]
fn gradient_check_over_longer_sequences() {
    let (params, xs, acts) = random_case(7, 3, 2, 4, 12);
    let err = worst_fd_error(&params, &xs, &acts, 1e-5);
    assert!(err <= 1e-4, "worst relative error {err}");
}
