//! Statistical checks of the mobility, blockage and arrival processes.

use rand_distr::{Distribution, Poisson};
use risvr::geometry::{spawn_users, step_users, BlockageModel, LinkGeometry, Mobility, Room};
use risvr::queue::sample_arrivals;
use risvr::rng::{stream, StreamId};

#[test]
fn walker_covers_the_room() {
    let room = Room::new(10.0, 4, 1.0).unwrap();
    let mobility = Mobility::default();
    let mut rng = stream(3, StreamId::Mobility);
    let mut users = spawn_users(&room, 1, mobility.speed, &mut rng);
    let mut seen = [[false; 5]; 5];
    for _ in 0..100_000 {
        users = step_users(&users, &room, &mobility, &mut rng);
        let p = users[0].position;
        assert!(room.contains_strictly(&p));
        seen[((p.x / 2.0) as usize).min(4)][((p.y / 2.0) as usize).min(4)] = true;
    }
    let covered = seen.iter().flatten().filter(|&&s| s).count();
    assert!(covered as f64 / 25.0 >= 0.95, "covered {covered} of 25 cells");
}

#[test]
fn markov_blockage_reaches_its_stationary_fraction() {
    let model = BlockageModel::markov(0.95, 0.8).unwrap();
    let pi = model.stationary_los();
    assert!((pi - 0.8).abs() < 1e-12);
    let room = Room::new(10.0, 1, 1.0).unwrap();
    let mut rng = stream(5, StreamId::Blockage);
    let users = spawn_users(&room, 1, 0.0, &mut rng);
    let mut geom = LinkGeometry::initial(&users, &room, &model);
    let steps = 1_000_000;
    let mut los = 0usize;
    for _ in 0..steps {
        geom = risvr::geometry::update_blockage(&geom, &users, &room, &model, &mut rng).unwrap();
        los += usize::from(geom.los(0, 0));
    }
    let frac = los as f64 / steps as f64;
    assert!((frac - pi).abs() / pi < 0.01, "{frac} vs {pi}");
}

#[test]
fn poisson_arrivals_match_their_moments() {
    let lambda = 3.0;
    let mut rng = stream(9, StreamId::Arrivals);
    let n = 1_000_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_arrivals(&[lambda], &mut rng)[0] as f64).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - lambda).abs() / lambda < 0.01, "mean {mean}");
    assert!((var - lambda).abs() / lambda < 0.02, "variance {var}");
}

#[test]
fn arrivals_agree_with_the_reference_sampler() {
    let mut ours = stream(11, StreamId::Arrivals);
    let mut reference = stream(11, StreamId::Arrivals);
    let poisson = Poisson::new(2.5).unwrap();
    for _ in 0..1000 {
        let a = sample_arrivals(&[2.5], &mut ours)[0];
        let b: f64 = poisson.sample(&mut reference);
        assert_eq!(a, b as u64);
    }
}

#[test]
fn zero_rate_users_never_receive() {
    let mut rng = stream(1, StreamId::Arrivals);
    for _ in 0..1000 {
        assert_eq!(sample_arrivals(&[0.0, 1.0], &mut rng)[0], 0);
    }
}
