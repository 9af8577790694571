//! Indoor room geometry, RIS placement, random-walk mobility and LoS blockage.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An RIS mounted on one of the four walls.
///
/// Walls are numbered 0 (y = 0), 1 (x = L), 2 (y = L), 3 (x = 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RisSite {
    pub position: Point,
    pub wall: usize,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(TAU);
    if r >= TAU {
        r -= TAU;
    }
    r - PI
}

/// Distributes `count` RIS round-robin over the four walls; the k-th of the n
/// RIS on a wall sits at fraction (k + 1/2)/n along it.
pub fn place_ris(room_side: f64, count: usize) -> Result<Vec<RisSite>> {
    if !(room_side > 0.0) || !room_side.is_finite() {
        return Err(Error::invalid(format!("room side must be positive, got {room_side}")));
    }
    if count == 0 {
        return Err(Error::invalid("at least one RIS is required"));
    }
    let per_wall: Vec<usize> = (0..4).map(|w| (count + 3 - w) / 4).collect();
    let sites = (0..count)
        .map(|i| {
            let wall = i % 4;
            let k = i / 4;
            let along = room_side * (k as f64 + 0.5) / per_wall[wall] as f64;
            let position = match wall {
                0 => Point::new(along, 0.0),
                1 => Point::new(room_side, along),
                2 => Point::new(along, room_side),
                _ => Point::new(0.0, along),
            };
            RisSite { position, wall }
        })
        .collect();
    Ok(sites)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    side_length: f64,
    ris: Vec<RisSite>,
    min_link_distance: f64,
}

impl Room {
    pub fn new(side_length: f64, ris_count: usize, min_link_distance: f64) -> Result<Self> {
        if !(min_link_distance > 0.0) || !min_link_distance.is_finite() {
            return Err(Error::invalid(format!(
                "min link distance must be positive, got {min_link_distance}"
            )));
        }
        let ris = place_ris(side_length, ris_count)?;
        Ok(Room {
            side_length,
            ris,
            min_link_distance,
        })
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn ris(&self) -> &[RisSite] {
        &self.ris
    }

    pub fn num_ris(&self) -> usize {
        self.ris.len()
    }

    pub fn min_link_distance(&self) -> f64 {
        self.min_link_distance
    }

    pub fn contains_strictly(&self, p: &Point) -> bool {
        p.x > 0.0 && p.x < self.side_length && p.y > 0.0 && p.y < self.side_length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
}

/// Heading-perturbation random walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mobility {
    /// Meters per slot.
    pub speed: f64,
    /// Turn per slot is uniform in `[-max_turn, max_turn]`.
    pub max_turn: f64,
}

impl Default for Mobility {
    fn default() -> Self {
        Mobility {
            speed: 0.5,
            max_turn: FRAC_PI_4,
        }
    }
}

impl Mobility {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(Error::invalid(format!("speed must be non-negative, got {}", self.speed)));
        }
        if !(0.0..=PI).contains(&self.max_turn) {
            return Err(Error::invalid(format!("max_turn must lie in [0, pi], got {}", self.max_turn)));
        }
        Ok(())
    }
}

/// Drops `count` users uniformly inside the room with uniform headings.
pub fn spawn_users<R: Rng + ?Sized>(room: &Room, count: usize, speed: f64, rng: &mut R) -> Vec<UserState> {
    let side = room.side_length();
    (0..count)
        .map(|_| {
            let mut p = Point::new(rng.random::<f64>() * side, rng.random::<f64>() * side);
            keep_inside(&mut p, side);
            UserState {
                position: p,
                heading: wrap_angle(rng.random_range(-PI..PI)),
                speed,
            }
        })
        .collect()
}

fn keep_inside(p: &mut Point, side: f64) {
    let nudge = side * 1e-12;
    p.x = p.x.clamp(nudge, side - nudge);
    p.y = p.y.clamp(nudge, side - nudge);
}

/// Advances one user by one slot; `turn` is the heading perturbation already drawn.
pub fn step_user(user: &UserState, room: &Room, turn: f64) -> UserState {
    let side = room.side_length();
    let mut heading = user.heading + turn;
    let mut x = user.position.x + user.speed * heading.cos();
    let mut y = user.position.y + user.speed * heading.sin();
    // specular reflection, repeated in case a step spans the whole room
    loop {
        if x > side {
            x = 2.0 * side - x;
            heading = PI - heading;
        } else if x < 0.0 {
            x = -x;
            heading = PI - heading;
        } else {
            break;
        }
    }
    loop {
        if y > side {
            y = 2.0 * side - y;
            heading = -heading;
        } else if y < 0.0 {
            y = -y;
            heading = -heading;
        } else {
            break;
        }
    }
    let mut position = Point::new(x, y);
    if !room.contains_strictly(&position) {
        keep_inside(&mut position, side);
    }
    UserState {
        position,
        heading: wrap_angle(heading),
        speed: user.speed,
    }
}

pub fn step_users<R: Rng + ?Sized>(
    users: &[UserState],
    room: &Room,
    mobility: &Mobility,
    rng: &mut R,
) -> Vec<UserState> {
    users
        .iter()
        .map(|u| {
            let turn = if mobility.max_turn > 0.0 {
                rng.random_range(-mobility.max_turn..=mobility.max_turn)
            } else {
                0.0
            };
            step_user(u, room, turn)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockageMode {
    Markov,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockageModel {
    pub mode: BlockageMode,
    pub p_stay_los: f64,
    pub p_stay_blocked: f64,
    pub self_block_half_angle: f64,
    pub body_radius: f64,
    /// Markov mode only: whether every link starts in LoS.
    pub initial_los: bool,
}

impl Default for BlockageModel {
    fn default() -> Self {
        BlockageModel {
            mode: BlockageMode::Markov,
            p_stay_los: 0.95,
            p_stay_blocked: 0.8,
            self_block_half_angle: PI / 3.0,
            body_radius: 0.3,
            initial_los: true,
        }
    }
}

impl BlockageModel {
    pub fn markov(p_stay_los: f64, p_stay_blocked: f64) -> Result<Self> {
        let m = BlockageModel {
            p_stay_los,
            p_stay_blocked,
            ..Default::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn geometric(self_block_half_angle: f64, body_radius: f64) -> Result<Self> {
        let m = BlockageModel {
            mode: BlockageMode::Geometric,
            self_block_half_angle,
            body_radius,
            ..Default::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_stay_los", self.p_stay_los), ("p_stay_blocked", self.p_stay_blocked)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be a probability, got {p}")));
            }
        }
        if !(self.self_block_half_angle > 0.0 && self.self_block_half_angle < PI) {
            return Err(Error::invalid(format!(
                "self_block_half_angle must lie in (0, pi), got {}",
                self.self_block_half_angle
            )));
        }
        if !(self.body_radius >= 0.0) || !self.body_radius.is_finite() {
            return Err(Error::invalid(format!("body_radius must be >= 0, got {}", self.body_radius)));
        }
        Ok(())
    }

    /// Closed-form long-run LoS fraction of the two-state chain.
    pub fn stationary_los(&self) -> f64 {
        let p_block = 1.0 - self.p_stay_los;
        let p_unblock = 1.0 - self.p_stay_blocked;
        if p_block + p_unblock == 0.0 {
            // both states absorbing; the chain never mixes
            return f64::NAN;
        }
        p_unblock / (p_block + p_unblock)
    }
}

/// Per-link LoS indicators and distances, row-major over (RIS, user).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    num_ris: usize,
    num_users: usize,
    los: Vec<bool>,
    distance: Vec<f64>,
}

impl LinkGeometry {
    pub fn new(num_ris: usize, num_users: usize, los: Vec<bool>, distance: Vec<f64>) -> Result<Self> {
        let n = num_ris * num_users;
        if los.len() != n || distance.len() != n {
            return Err(Error::dims(format!(
                "link geometry for {num_ris}x{num_users} needs {n} entries, got {} and {}",
                los.len(),
                distance.len()
            )));
        }
        if distance.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid("link distances must be positive and finite"));
        }
        Ok(LinkGeometry {
            num_ris,
            num_users,
            los,
            distance,
        })
    }

    /// Geometry at episode start: distances from positions, LoS per the model.
    pub fn initial(users: &[UserState], room: &Room, model: &BlockageModel) -> Self {
        let distance = link_distances(users, room);
        let los = match model.mode {
            BlockageMode::Markov => vec![model.initial_los; room.num_ris() * users.len()],
            BlockageMode::Geometric => geometric_los(users, room.ris(), model),
        };
        LinkGeometry {
            num_ris: room.num_ris(),
            num_users: users.len(),
            los,
            distance,
        }
    }

    pub fn num_ris(&self) -> usize {
        self.num_ris
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn los(&self, b: usize, u: usize) -> bool {
        self.los[b * self.num_users + u]
    }

    pub fn distance(&self, b: usize, u: usize) -> f64 {
        self.distance[b * self.num_users + u]
    }

    pub fn los_flat(&self) -> &[bool] {
        &self.los
    }

    pub fn distances_flat(&self) -> &[f64] {
        &self.distance
    }

    /// Distances from every RIS to user `u`.
    pub fn distances_to_user(&self, u: usize) -> Vec<f64> {
        (0..self.num_ris).map(|b| self.distance(b, u)).collect()
    }
}

fn link_distances(users: &[UserState], room: &Room) -> Vec<f64> {
    let floor = room.min_link_distance();
    room.ris()
        .iter()
        .flat_map(|site| {
            users
                .iter()
                .map(move |user| site.position.distance(&user.position).max(floor))
        })
        .collect()
}

fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let s = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(&Point::new(a.x + s * dx, a.y + s * dy))
}

fn geometric_los(users: &[UserState], ris: &[RisSite], model: &BlockageModel) -> Vec<bool> {
    let mut los = Vec::with_capacity(ris.len() * users.len());
    for site in ris {
        for (u, user) in users.iter().enumerate() {
            let to_ris = (site.position.y - user.position.y).atan2(site.position.x - user.position.x);
            let back = user.heading + PI;
            let self_blocked = wrap_angle(to_ris - back).abs() < model.self_block_half_angle;
            let body_blocked = model.body_radius > 0.0
                && users.iter().enumerate().any(|(v, other)| {
                    v != u
                        && point_segment_distance(&other.position, &site.position, &user.position)
                            < model.body_radius
                });
            los.push(!(self_blocked || body_blocked));
        }
    }
    los
}

/// Advances the LoS process one slot and recomputes distances from `users`.
pub fn update_blockage<R: Rng + ?Sized>(
    prev: &LinkGeometry,
    users: &[UserState],
    room: &Room,
    model: &BlockageModel,
    rng: &mut R,
) -> Result<LinkGeometry> {
    if prev.num_ris != room.num_ris() || prev.num_users != users.len() {
        return Err(Error::dims(format!(
            "previous geometry is {}x{}, world has {} RIS and {} users",
            prev.num_ris,
            prev.num_users,
            room.num_ris(),
            users.len()
        )));
    }
    let los = match model.mode {
        BlockageMode::Markov => prev
            .los
            .iter()
            .map(|&was_los| {
                let draw: f64 = rng.random();
                if was_los {
                    draw < model.p_stay_los
                } else {
                    draw >= model.p_stay_blocked
                }
            })
            .collect(),
        BlockageMode::Geometric => geometric_los(users, room.ris(), model),
    };
    Ok(LinkGeometry {
        num_ris: prev.num_ris,
        num_users: prev.num_users,
        los,
        distance: link_distances(users, room),
    })
}
