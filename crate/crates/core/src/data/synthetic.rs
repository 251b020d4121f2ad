use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusManifest, TrajectoryTable, UnitSystem};
use crate::error::{Error, Result};
use crate::graph::VehicleState;
use crate::simulation::{kinematic_update, DT};

/// Generator bound on recorded accelerations, m/s².
const ACCEL_BOUND: f64 = 8.0;

/// Intelligent Driver Model parameters (SI units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub jam_distance: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 20.0,
            time_headway: 1.5,
            max_accel: 1.0,
            comfortable_decel: 1.5,
            jam_distance: 2.0,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfortable_decel", self.comfortable_decel),
            ("jam_distance", self.jam_distance),
            ("exponent", self.exponent),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("IDM {name} must be positive, got {value}")));
            }
        }
        Ok(())
    }

    /// IDM command for speed `v` and an optional leader `(gap, leader_speed)`.
    pub fn acceleration(&self, v: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / self.desired_speed).powf(self.exponent);
        let Some((gap, v_lead)) = leader else {
            return self.max_accel * free;
        };
        if gap <= 0.0 {
            return -ACCEL_BOUND;
        }
        let dv = v - v_lead;
        let s_star = self.jam_distance
            + (v * self.time_headway + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt())).max(0.0);
        self.max_accel * (free - (s_star / gap).powi(2))
    }
}

/// A vehicle parked on the corridor for the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub lane: u32,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub lanes: u32,
    /// Initial vehicles per lane, evenly spaced; inflow keeps that spacing.
    pub vehicles_per_lane: u32,
    /// Vehicles leave once past this position, meters.
    pub corridor_length: f64,
    /// Recorded frames.
    pub duration_frames: u32,
    /// Frames simulated before recording starts.
    pub burn_in_frames: u32,
    pub idm: IdmParams,
    /// Lane-change attempts per vehicle per second.
    pub lane_change_rate: f64,
    /// Desired-speed resamples per vehicle per second.
    pub speed_change_rate: f64,
    /// Desired speeds are drawn from `desired_speed * (1 ± speed_spread)`.
    pub speed_spread: f64,
    /// Each driver's time headway and maximum acceleration are scaled by
    /// independent factors from `1 ± driver_spread`.
    pub driver_spread: f64,
    /// Standard deviation of white noise added to every IDM command, m/s².
    /// Zero gives the deterministic model.
    pub accel_noise: f64,
    /// Trucks (class 3) drive at 80% desired speed with 60% max accel.
    pub truck_fraction: f64,
    pub inflow: bool,
    /// Starting speed for every vehicle; `None` picks a spacing-safe speed.
    pub initial_speed: Option<f64>,
    pub obstacle: Option<Obstacle>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            lanes: 3,
            vehicles_per_lane: 17,
            corridor_length: 400.0,
            duration_frames: 9000,
            burn_in_frames: 600,
            idm: IdmParams::default(),
            lane_change_rate: 0.02,
            speed_change_rate: 0.02,
            speed_spread: 0.2,
            driver_spread: 0.0,
            accel_noise: 0.3,
            truck_fraction: 0.1,
            inflow: true,
            initial_speed: None,
            obstacle: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.idm.validate()?;
        if self.lanes == 0 || self.vehicles_per_lane == 0 || self.duration_frames == 0 {
            return Err(Error::Config("lanes, vehicles per lane and duration must be positive".into()));
        }
        let rates = [
            ("lane_change_rate", self.lane_change_rate),
            ("speed_change_rate", self.speed_change_rate),
            ("truck_fraction", self.truck_fraction),
            ("accel_noise", self.accel_noise),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {r}")));
            }
        }
        if !(0.0..1.0).contains(&self.speed_spread) || !(0.0..1.0).contains(&self.driver_spread) || self.truck_fraction > 1.0 {
            return Err(Error::Config(
                "speed_spread and driver_spread must lie in [0, 1) and truck_fraction in [0, 1]".into(),
            ));
        }
        if self.spacing() < self.idm.jam_distance {
            return Err(Error::Config(format!(
                "overcrowded: {} vehicles per lane on {} m leaves {:.2} m spacing, below the {} m jam distance",
                self.vehicles_per_lane,
                self.corridor_length,
                self.spacing(),
                self.idm.jam_distance
            )));
        }
        if let Some(o) = self.obstacle {
            if o.lane < 1 || o.lane > self.lanes {
                return Err(Error::Config(format!("obstacle lane {} outside 1..={}", o.lane, self.lanes)));
            }
        }
        Ok(())
    }

    fn spacing(&self) -> f64 {
        self.corridor_length / f64::from(self.vehicles_per_lane)
    }

    /// SHA-256 of the JSON encoding; identifies the corpus in its manifest.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        super::table::hex(&Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
struct Car {
    id: u32,
    lane: u32,
    class: u32,
    y: f64,
    v: f64,
    a: f64,
    idm: IdmParams,
    stationary: bool,
}

struct Road {
    cars: Vec<Car>,
}

impl Road {
    /// Nearest car strictly ahead of `y` in `lane`, excluding index `skip`.
    fn leader(&self, lane: u32, y: f64, skip: usize) -> Option<&Car> {
        self.cars
            .iter()
            .enumerate()
            .filter(|&(i, c)| i != skip && c.lane == lane && c.y > y)
            .map(|(_, c)| c)
            .min_by(|a, b| a.y.total_cmp(&b.y))
    }

    /// Nearest car at or behind `y` in `lane`, excluding index `skip`.
    fn follower(&self, lane: u32, y: f64, skip: usize) -> Option<&Car> {
        self.cars
            .iter()
            .enumerate()
            .filter(|&(i, c)| i != skip && c.lane == lane && c.y <= y)
            .map(|(_, c)| c)
            .max_by(|a, b| a.y.total_cmp(&b.y))
    }

    /// IDM acceleration plus `noise`, bounded.
    fn command(&self, i: usize, noise: f64) -> f64 {
        let c = &self.cars[i];
        if c.stationary {
            return 0.0;
        }
        let leader = self.leader(c.lane, c.y, i).map(|l| (l.y - c.y, l.v));
        let a = (c.idm.acceleration(c.v, leader) + noise).clamp(-ACCEL_BOUND, ACCEL_BOUND);
        // never reverse: the floor keeps v + a·dt ≥ 0
        a.max(-c.v / DT)
    }
}

/// Simulates IDM traffic on a multi-lane corridor and records it at 10 Hz.
///
/// Drivers follow IDM with additive white acceleration noise
/// (`accel_noise`). Every recorded `a` is the command that produced that frame's `(y, v)`
/// from the previous frame under [`kinematic_update`]. Lane changes are
/// instantaneous and only happen when neither the changer nor its new
/// follower would need to brake harder than the comfortable deceleration.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(TrajectoryTable, CorpusManifest)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut next_id = 1u32;
    let spacing = config.spacing();
    let mut road = Road { cars: Vec::new() };

    if let Some(o) = config.obstacle {
        road.cars.push(Car {
            id: next_id,
            lane: o.lane,
            class: 2,
            y: o.y,
            v: 0.0,
            a: 0.0,
            idm: config.idm,
            stationary: true,
        });
        next_id += 1;
    }
    for lane in 1..=config.lanes {
        for k in 0..config.vehicles_per_lane {
            let jitter = if config.vehicles_per_lane > 1 {
                0.25 * (spacing - config.idm.jam_distance) * rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
            let y = f64::from(k) * spacing + jitter;
            let mut car = new_car(config, &mut rng, next_id, lane, y, 0.0);
            car.v = match config.initial_speed {
                Some(v) => v,
                None => car.idm.desired_speed.min(((spacing - car.idm.jam_distance) / car.idm.time_headway).max(0.0)),
            };
            if let Some(o) = road.cars.iter().find(|c| c.stationary && c.lane == lane) {
                if (o.y - y).abs() < config.idm.jam_distance {
                    return Err(Error::Config(format!("obstacle at {} m overlaps vehicle {next_id}", o.y)));
                }
            }
            road.cars.push(car);
            next_id += 1;
        }
    }

    let mut rows = Vec::new();
    let total = config.burn_in_frames + config.duration_frames;
    for step in 0..total {
        if step >= config.burn_in_frames {
            let frame = step - config.burn_in_frames;
            rows.extend(road.cars.iter().map(|c| VehicleState {
                vehicle_id: c.id,
                frame,
                lane_id: c.lane,
                class_id: c.class,
                y: c.y,
                v: c.v,
                a: c.a,
            }));
        }
        if step + 1 == total {
            break;
        }
        advance(config, &mut road, &mut rng, &mut next_id);
    }

    let table = TrajectoryTable::new(rows)?;
    let manifest = CorpusManifest::describe(format!("synthetic:{}", config.fingerprint()), UnitSystem::Meters, &table, 0);
    Ok((table, manifest))
}

fn new_car(config: &SyntheticConfig, rng: &mut ChaCha8Rng, id: u32, lane: u32, y: f64, v: f64) -> Car {
    let truck = rng.random::<f64>() < config.truck_fraction;
    let mut idm = config.idm;
    idm.desired_speed = draw_speed(config, rng, truck);
    if config.driver_spread > 0.0 {
        let d = config.driver_spread;
        idm.time_headway *= 1.0 + rng.random_range(-d..d);
        idm.max_accel *= 1.0 + rng.random_range(-d..d);
    }
    if truck {
        idm.max_accel *= 0.6;
    }
    Car {
        id,
        lane,
        class: if truck { 3 } else { 2 },
        y,
        v,
        a: 0.0,
        idm,
        stationary: false,
    }
}

fn draw_speed(config: &SyntheticConfig, rng: &mut ChaCha8Rng, truck: bool) -> f64 {
    let spread = if config.speed_spread > 0.0 {
        rng.random_range(-config.speed_spread..config.speed_spread)
    } else {
        0.0
    };
    let base = config.idm.desired_speed * (1.0 + spread);
    if truck {
        0.8 * base
    } else {
        base
    }
}

/// One 0.1 s step: simultaneous IDM update, lane changes, exits, inflow.
fn advance(config: &SyntheticConfig, road: &mut Road, rng: &mut ChaCha8Rng, next_id: &mut u32) {
    let noise: Vec<f64> = (0..road.cars.len())
        .map(|_| {
            if config.accel_noise > 0.0 {
                config.accel_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        })
        .collect();
    let commands: Vec<f64> = (0..road.cars.len()).map(|i| road.command(i, noise[i])).collect();
    for (c, a) in road.cars.iter_mut().zip(commands) {
        let (v, y) = kinematic_update(c.v, c.y, a, DT);
        c.v = v;
        c.y = y;
        c.a = a;
    }

    let p_change = config.lane_change_rate * DT;
    let p_speed = config.speed_change_rate * DT;
    for i in 0..road.cars.len() {
        if road.cars[i].stationary {
            continue;
        }
        if rng.random::<f64>() < p_speed {
            let truck = road.cars[i].class == 3;
            road.cars[i].idm.desired_speed = draw_speed(config, rng, truck);
        }
        if config.lanes > 1 && rng.random::<f64>() < p_change {
            let lane = road.cars[i].lane;
            let target = if lane == 1 {
                2
            } else if lane == config.lanes || rng.random::<bool>() {
                lane - 1
            } else {
                lane + 1
            };
            if lane_change_is_safe(road, i, target) {
                road.cars[i].lane = target;
            }
        }
    }

    road.cars.retain(|c| c.stationary || c.y <= config.corridor_length);

    if config.inflow {
        for lane in 1..=config.lanes {
            let last = road
                .cars
                .iter()
                .filter(|c| c.lane == lane)
                .min_by(|a, b| a.y.total_cmp(&b.y))
                .map(|c| (c.y, c.v));
            let (room, v) = match last {
                Some((y, v)) => (y >= config.spacing(), v),
                None => (true, config.idm.desired_speed),
            };
            if room {
                // staggered so cars entering adjacent lanes together never share a position
                let y = rng.random_range(0.0..1.0);
                let mut car = new_car(config, rng, *next_id, lane, y, 0.0);
                car.v = v.min(car.idm.desired_speed);
                road.cars.push(car);
                *next_id += 1;
            }
        }
    }
}

/// Both the changer and its new follower keep at least the jam distance and
/// need no harder braking than the comfortable deceleration.
fn lane_change_is_safe(road: &Road, i: usize, target: u32) -> bool {
    let c = &road.cars[i];
    let b = c.idm.comfortable_decel;
    let leader = road.leader(target, c.y, i);
    let follower = road.follower(target, c.y, i);
    if let Some(l) = leader {
        let gap = l.y - c.y;
        if gap < c.idm.jam_distance || c.idm.acceleration(c.v, Some((gap, l.v))) < -b {
            return false;
        }
    }
    if let Some(f) = follower {
        if f.stationary {
            return false;
        }
        let gap = c.y - f.y;
        if gap < f.idm.jam_distance || f.idm.acceleration(f.v, Some((gap, c.v))) < -b {
            return false;
        }
    }
    true
}
