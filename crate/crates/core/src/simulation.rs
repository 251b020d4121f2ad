//! Closed-loop rollout of one ego vehicle through a test segment.
//!
//! The ego is driven by accelerations sampled from a [`Predictor`] while
//! every other vehicle replays its recorded trajectory. The graph is rebuilt
//! from the true scene plus the simulated ego at every frame.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::graph::{build_graph, FrameSnapshot, VehicleState};
use crate::layers::{gmm_sample, GmmParams, SAMPLE_CLAMP};
use crate::model::{Model, RecurrentState};
use crate::training::{Segment, SEGMENT_FRAMES, WARMUP_FRAMES};

/// Frame period of the corpus, seconds.
pub const DT: f64 = 0.1;
/// Simulated frames after warmup.
pub const HORIZON_FRAMES: usize = SEGMENT_FRAMES - WARMUP_FRAMES;
pub const DEFAULT_SAMPLES: usize = 20;

/// One explicit step: `v' = max(0, v + a·dt)`, then `y' = y + v'·dt`.
pub fn kinematic_update(v: f64, y: f64, a_next: f64, dt: f64) -> (f64, f64) {
    let v_next = (v + a_next * dt).max(0.0);
    (v_next, y + v_next * dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub samples_per_trajectory: usize,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
    /// Sampled accelerations are clamped into `[lo, hi]`, m/s².
    pub accel_clamp: (f64, f64),
    /// Egos simulated per segment, chosen evenly across eligible vehicles.
    pub max_egos_per_segment: Option<usize>,
    /// Rayon worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            samples_per_trajectory: DEFAULT_SAMPLES,
            horizon: HORIZON_FRAMES,
            dt: DT,
            seed: 0,
            accel_clamp: (-SAMPLE_CLAMP, SAMPLE_CLAMP),
            max_egos_per_segment: None,
            workers: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon + WARMUP_FRAMES != SEGMENT_FRAMES {
            return Err(Error::Config(format!(
                "horizon {} plus {WARMUP_FRAMES} warmup frames must equal the {SEGMENT_FRAMES}-frame segment",
                self.horizon
            )));
        }
        if (self.dt - DT).abs() > 1e-12 {
            return Err(Error::Config(format!("dt {} does not match the {DT} s corpus period", self.dt)));
        }
        if self.samples_per_trajectory == 0 {
            return Err(Error::Config("at least one sample per trajectory is required".into()));
        }
        let (lo, hi) = self.accel_clamp;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config(format!("acceleration clamp [{lo}, {hi}] is empty")));
        }
        if self.max_egos_per_segment == Some(0) {
            return Err(Error::Config("ego cap must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that maps a scene to a mixture over the ego's next acceleration.
pub trait Predictor: Sync {
    /// Carried between consecutive frames of one rollout.
    type State: Clone + Send;

    fn start(&self) -> Self::State;

    /// Mixture for `ego` in `snapshot`, advancing `state` by one frame.
    fn predict(&self, snapshot: &FrameSnapshot, ego: u32, state: &mut Self::State) -> Result<GmmParams>;
}

/// Eval-mode trained model over graphs built with connection range `tau`.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub tau: f64,
}

impl Predictor for ModelPredictor<'_> {
    type State = Option<RecurrentState>;

    fn start(&self) -> Self::State {
        self.model.arch().recurrent.then(RecurrentState::new)
    }

    fn predict(&self, snapshot: &FrameSnapshot, ego: u32, state: &mut Self::State) -> Result<GmmParams> {
        let graph = build_graph(snapshot, self.tau)?;
        let node = graph.index_of(ego).ok_or(Error::EgoAbsent {
            ego,
            frame: snapshot.frame(),
        })?;
        let input = self.model.prepare(&graph)?;
        let (params, next) = self.model.predict_node(&input, &graph, node, state.as_ref())?;
        *state = next;
        Ok(params)
    }
}

/// Simulated `(y, v, a)` for segment frames 20..120 of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedTrajectory {
    pub segment_id: usize,
    pub ego_id: u32,
    pub sample: usize,
    /// Seed of this sample's generator.
    pub seed: u64,
    /// Absolute frame of the first entry.
    pub first_frame: u32,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

/// Recorded ego trajectory over the simulated frames, with the positions of
/// its nearest same-lane leader and follower at each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthTrajectory {
    pub segment_id: usize,
    pub ego_id: u32,
    pub first_frame: u32,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub leader_y: Vec<Option<f64>>,
    pub follower_y: Vec<Option<f64>>,
}

impl TruthTrajectory {
    /// Ego `ego` over the simulated frames of `seg`. Leader and follower are
    /// found relative to the recorded ego position and lane.
    pub fn extract(seg: &Segment, ego: u32) -> Result<Self> {
        let frames = &seg.frames()[WARMUP_FRAMES..];
        let mut t = TruthTrajectory {
            segment_id: seg.id(),
            ego_id: ego,
            first_frame: frames[0].frame(),
            y: Vec::with_capacity(frames.len()),
            v: Vec::with_capacity(frames.len()),
            a: Vec::with_capacity(frames.len()),
            leader_y: Vec::with_capacity(frames.len()),
            follower_y: Vec::with_capacity(frames.len()),
        };
        for snap in frames {
            let e = snap.get(ego).ok_or(Error::EgoAbsent {
                ego,
                frame: snap.frame(),
            })?;
            let same_lane = || {
                snap.vehicles()
                    .iter()
                    .filter(move |o| o.vehicle_id != ego && o.lane_id == e.lane_id)
            };
            t.y.push(e.y);
            t.v.push(e.v);
            t.a.push(e.a);
            t.leader_y.push(same_lane().map(|o| o.y).filter(|&y| y > e.y).reduce(f64::min));
            t.follower_y.push(same_lane().map(|o| o.y).filter(|&y| y <= e.y).reduce(f64::max));
        }
        Ok(t)
    }
}

/// Generator seed for one sample: a SplitMix64 chain over the master seed,
/// segment, ego and sample, so each trajectory is reproducible alone.
pub fn derive_seed(master: u64, segment: usize, ego: u32, sample: usize) -> u64 {
    [segment as u64, u64::from(ego), sample as u64]
        .into_iter()
        .fold(splitmix(master), |h, x| splitmix(h ^ x))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Vehicles present in all frames of `seg`, thinned to at most `cap`
/// evenly spaced picks in id order.
pub fn select_egos(seg: &Segment, cap: Option<usize>) -> Vec<u32> {
    let all = seg.persistent_vehicles();
    match cap {
        Some(k) if all.len() > k => (0..k).map(|i| all[i * all.len() / k]).collect(),
        _ => all,
    }
}

/// All samples for one ego. Warmup runs once on recorded frames and its
/// state is shared by every sample.
pub fn rollout<P: Predictor>(
    predictor: &P,
    seg: &Segment,
    ego: u32,
    config: &RolloutConfig,
) -> Result<Vec<SimulatedTrajectory>> {
    config.validate()?;
    let frames = seg.frames();
    if let Some(f) = frames.iter().find(|f| !f.contains(ego)) {
        return Err(Error::EgoAbsent { ego, frame: f.frame() });
    }
    let mut warm = predictor.start();
    for snap in &frames[..WARMUP_FRAMES - 1] {
        predictor.predict(snap, ego, &mut warm)?;
    }
    let start = *frames[WARMUP_FRAMES - 1].get(ego).expect("presence checked");
    let (lo, hi) = config.accel_clamp;

    (0..config.samples_per_trajectory)
        .map(|sample| {
            let seed = derive_seed(config.seed, seg.id(), ego, sample);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = warm.clone();
            let (mut y, mut v, mut a) = (start.y, start.v, start.a);
            let mut out = SimulatedTrajectory {
                segment_id: seg.id(),
                ego_id: ego,
                sample,
                seed,
                first_frame: frames[WARMUP_FRAMES].frame(),
                y: Vec::with_capacity(config.horizon),
                v: Vec::with_capacity(config.horizon),
                a: Vec::with_capacity(config.horizon),
            };
            for snap in &frames[WARMUP_FRAMES - 1..SEGMENT_FRAMES - 1] {
                let truth = snap.get(ego).expect("presence checked");
                let scene = snap.with_replaced(VehicleState { y, v, a, ..*truth })?;
                let params = predictor.predict(&scene, ego, &mut state).map_err(|e| match e {
                    Error::Numeric { context } => Error::Rollout {
                        frame: snap.frame(),
                        reason: format!("non-finite value in {context}"),
                    },
                    other => other,
                })?;
                a = gmm_sample(&params, &mut rng).clamp(lo, hi);
                (v, y) = kinematic_update(v, y, a, config.dt);
                out.y.push(y);
                out.v.push(v);
                out.a.push(a);
            }
            Ok(out)
        })
        .collect()
}

/// Simulated and recorded trajectories of a batch of segments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub sims: Vec<SimulatedTrajectory>,
    pub truths: Vec<TruthTrajectory>,
}

/// Rolls out every selected ego of every segment in parallel. Output is
/// ordered by `(segment, ego, sample)` whatever the scheduling.
pub fn rollout_segments<P: Predictor>(
    predictor: &P,
    segments: &[Segment],
    config: &RolloutConfig,
) -> Result<RolloutBatch> {
    config.validate()?;
    let jobs: Vec<(&Segment, u32)> = segments
        .iter()
        .flat_map(|s| select_egos(s, config.max_egos_per_segment).into_iter().map(move |e| (s, e)))
        .collect();
    for s in segments {
        if select_egos(s, None).is_empty() {
            log::warn!("segment {} skipped: no vehicle spans all {SEGMENT_FRAMES} frames", s.id());
        }
    }
    let run = || {
        jobs.par_iter()
            .map(|&(seg, ego)| Ok((TruthTrajectory::extract(seg, ego)?, rollout(predictor, seg, ego, config)?)))
            .collect::<Result<Vec<_>>>()
    };
    let results = if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    let mut batch = RolloutBatch::default();
    for (truth, sims) in results {
        batch.truths.push(truth);
        batch.sims.extend(sims);
    }
    Ok(batch)
}

const SIM_HEADER: [&str; 7] = ["segment_id", "ego_id", "sample", "frame", "y_m", "v_mps", "a_mps2"];
const TRUTH_HEADER: [&str; 8] = [
    "segment_id",
    "ego_id",
    "frame",
    "y_m",
    "v_mps",
    "a_mps2",
    "leader_y_m",
    "follower_y_m",
];

/// One row per `(segment, ego, sample, frame)`.
pub fn write_trajectories(path: &Path, sims: &[SimulatedTrajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SIM_HEADER)?;
    for s in sims {
        for i in 0..s.y.len() {
            w.write_record([
                s.segment_id.to_string(),
                s.ego_id.to_string(),
                s.sample.to_string(),
                (s.first_frame + i as u32).to_string(),
                s.y[i].to_string(),
                s.v[i].to_string(),
                s.a[i].to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Inverse of [`write_trajectories`]. Seeds are not stored in the dump and
/// are recomputed from `master_seed`.
pub fn read_trajectories(path: &Path, master_seed: u64) -> Result<Vec<SimulatedTrajectory>> {
    let rows = read_rows(path, &SIM_HEADER)?;
    let mut out: Vec<SimulatedTrajectory> = Vec::new();
    for (line, r) in rows.into_iter().enumerate() {
        let key = (parse::<usize>(&r[0], line)?, parse::<u32>(&r[1], line)?, parse::<usize>(&r[2], line)?);
        let frame = parse::<u32>(&r[3], line)?;
        let (y, v, a) = (parse(&r[4], line)?, parse(&r[5], line)?, parse(&r[6], line)?);
        match out.last_mut() {
            Some(s) if (s.segment_id, s.ego_id, s.sample) == key => {
                if frame != s.first_frame + s.y.len() as u32 {
                    return Err(Error::Data(format!("line {}: frame {frame} out of sequence", line + 2)));
                }
                s.y.push(y);
                s.v.push(v);
                s.a.push(a);
            }
            _ => out.push(SimulatedTrajectory {
                segment_id: key.0,
                ego_id: key.1,
                sample: key.2,
                seed: derive_seed(master_seed, key.0, key.1, key.2),
                first_frame: frame,
                y: vec![y],
                v: vec![v],
                a: vec![a],
            }),
        }
    }
    Ok(out)
}

pub fn write_truths(path: &Path, truths: &[TruthTrajectory]) -> Result<()> {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRUTH_HEADER)?;
    for t in truths {
        for i in 0..t.y.len() {
            w.write_record([
                t.segment_id.to_string(),
                t.ego_id.to_string(),
                (t.first_frame + i as u32).to_string(),
                t.y[i].to_string(),
                t.v[i].to_string(),
                t.a[i].to_string(),
                opt(t.leader_y[i]),
                opt(t.follower_y[i]),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_truths(path: &Path) -> Result<Vec<TruthTrajectory>> {
    let rows = read_rows(path, &TRUTH_HEADER)?;
    let mut out: Vec<TruthTrajectory> = Vec::new();
    for (line, r) in rows.into_iter().enumerate() {
        let key = (parse::<usize>(&r[0], line)?, parse::<u32>(&r[1], line)?);
        let frame = parse::<u32>(&r[2], line)?;
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { parse(s, line).map(Some) } };
        let (leader, follower) = (opt(&r[6])?, opt(&r[7])?);
        let (y, v, a) = (parse(&r[3], line)?, parse(&r[4], line)?, parse(&r[5], line)?);
        match out.last_mut() {
            Some(t) if (t.segment_id, t.ego_id) == key => {
                if frame != t.first_frame + t.y.len() as u32 {
                    return Err(Error::Data(format!("line {}: frame {frame} out of sequence", line + 2)));
                }
                t.y.push(y);
                t.v.push(v);
                t.a.push(a);
                t.leader_y.push(leader);
                t.follower_y.push(follower);
            }
            _ => out.push(TruthTrajectory {
                segment_id: key.0,
                ego_id: key.1,
                first_frame: frame,
                y: vec![y],
                v: vec![v],
                a: vec![a],
                leader_y: vec![leader],
                follower_y: vec![follower],
            }),
        }
    }
    Ok(out)
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "trajectory dump not found"),
        ));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Schema(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            header.join(","),
            found.join(",")
        )));
    }
    reader.records().map(|r| r.map_err(Error::from)).collect()
}

fn parse<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Data(format!("line {}: cannot parse '{s}'", line + 2)))
}
