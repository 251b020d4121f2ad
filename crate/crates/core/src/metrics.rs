//! Trajectory-level scores of simulated rollouts against recorded truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::simulation::{SimulatedTrajectory, TruthTrajectory, DT};

/// Jerks smaller than this (m/s³) carry no sign.
pub const DEFAULT_JERK_DEADBAND: f64 = 0.05;
/// Whole-second horizons scored for velocity.
pub const HORIZONS_S: std::ops::RangeInclusive<usize> = 1..=10;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Each truth with its samples, in truth order. Every truth must have the
/// same number of samples `n > 0`, and every sample must match a truth.
pub fn pair_up<'a>(
    truths: &'a [TruthTrajectory],
    sims: &'a [SimulatedTrajectory],
) -> Result<Vec<(&'a TruthTrajectory, Vec<&'a SimulatedTrajectory>)>> {
    if truths.is_empty() {
        return Err(Error::Coverage("no truth trajectories".into()));
    }
    let mut by_key: BTreeMap<(usize, u32), Vec<&SimulatedTrajectory>> = BTreeMap::new();
    for s in sims {
        by_key.entry((s.segment_id, s.ego_id)).or_default().push(s);
    }
    let mut out = Vec::with_capacity(truths.len());
    let mut n = None;
    for t in truths {
        let group = by_key.remove(&(t.segment_id, t.ego_id)).unwrap_or_default();
        if group.is_empty() {
            return Err(Error::Coverage(format!(
                "no simulations for ego {} of segment {}",
                t.ego_id, t.segment_id
            )));
        }
        if *n.get_or_insert(group.len()) != group.len() {
            return Err(Error::Coverage(format!(
                "ego {} of segment {} has {} samples, others have {}",
                t.ego_id,
                t.segment_id,
                group.len(),
                n.unwrap_or_default()
            )));
        }
        if let Some(s) = group.iter().find(|s| s.y.len() != t.y.len() || s.first_frame != t.first_frame) {
            return Err(Error::Coverage(format!(
                "sample {} of ego {} does not cover the truth's frames",
                s.sample, s.ego_id
            )));
        }
        out.push((t, group));
    }
    if let Some(((seg, ego), _)) = by_key.into_iter().next() {
        return Err(Error::Coverage(format!("simulations for ego {ego} of segment {seg} have no truth")));
    }
    Ok(out)
}

fn rmse_at(
    truths: &[TruthTrajectory],
    sims: &[SimulatedTrajectory],
    index: usize,
    truth_field: fn(&TruthTrajectory) -> &[f64],
    sim_field: fn(&SimulatedTrajectory) -> &[f64],
) -> Result<f64> {
    let pairs = pair_up(truths, sims)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, group) in &pairs {
        for s in group {
            sum += (truth_field(t)[index] - sim_field(s)[index]).powi(2);
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

fn horizon_index(h: usize) -> Result<usize> {
    if !HORIZONS_S.contains(&h) {
        return Err(Error::Argument(format!("horizon {h} s outside 1..=10")));
    }
    Ok((h as f64 / DT).round() as usize - 1)
}

/// Velocity RMSE `H` seconds into the rollout, over all truths and samples.
pub fn rmse_velocity(truths: &[TruthTrajectory], sims: &[SimulatedTrajectory], horizon_s: usize) -> Result<f64> {
    let i = horizon_index(horizon_s)?;
    rmse_at(truths, sims, i, |t| &t.v, |s| &s.v)
}

/// Position RMSE at the 10 s horizon.
pub fn rmse_y_at_10s(truths: &[TruthTrajectory], sims: &[SimulatedTrajectory]) -> Result<f64> {
    let i = horizon_index(10)?;
    rmse_at(truths, sims, i, |t| &t.y, |s| &s.y)
}

/// Sign flips between consecutive jerks `(a[t+1] - a[t]) / dt` whose
/// magnitude reaches `deadband`; smaller jerks are skipped entirely.
pub fn jerk_sign_inversions(a: &[f64], dt: f64, deadband: f64) -> Result<usize> {
    if a.len() < 3 {
        return Err(Error::Argument(format!("jerk needs at least 3 frames, got {}", a.len())));
    }
    if !(dt > 0.0) || !(deadband >= 0.0) {
        return Err(Error::Argument("dt must be positive and the dead-band non-negative".into()));
    }
    let mut last = 0.0f64;
    let mut flips = 0;
    for w in a.windows(2) {
        let j = (w[1] - w[0]) / dt;
        if j.abs() < deadband || j == 0.0 {
            continue;
        }
        if last != 0.0 && j.signum() != last.signum() {
            flips += 1;
        }
        last = j;
    }
    Ok(flips)
}

/// Whether a sample passes its truth-side leader or is passed by its
/// truth-side follower at any frame.
pub fn headway_violated(sim: &SimulatedTrajectory, truth: &TruthTrajectory) -> bool {
    sim.y.iter().enumerate().any(|(i, &y)| {
        truth.leader_y.get(i).copied().flatten().is_some_and(|l| y >= l)
            || truth.follower_y.get(i).copied().flatten().is_some_and(|f| f >= y)
    })
}

/// Fraction of samples with at least one negative-headway frame.
pub fn negative_headway_rate(truths: &[TruthTrajectory], sims: &[SimulatedTrajectory]) -> Result<f64> {
    let pairs = pair_up(truths, sims)?;
    let (mut flagged, mut total) = (0usize, 0usize);
    for (t, group) in &pairs {
        for s in group {
            flagged += usize::from(headway_violated(s, t));
            total += 1;
        }
    }
    Ok(flagged as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    /// RMSE at horizons 1..=10 s, m/s.
    pub velocity_rmse: Vec<f64>,
    pub y_rmse_10s: f64,
    /// Mean inversions per simulated trajectory.
    pub jerk_sign_inversions: f64,
    /// Mean inversions per recorded trajectory, for reference.
    pub truth_jerk_sign_inversions: f64,
    pub negative_headway_rate: f64,
    /// Truth trajectories (m).
    pub truths: usize,
    /// Samples per truth (n).
    pub samples_per_truth: usize,
}

/// Every metric for one model's rollouts.
pub fn evaluate(model: &str, truths: &[TruthTrajectory], sims: &[SimulatedTrajectory], deadband: f64) -> Result<ModelMetrics> {
    let pairs = pair_up(truths, sims)?;
    let velocity_rmse = HORIZONS_S
        .map(|h| rmse_velocity(truths, sims, h))
        .collect::<Result<Vec<_>>>()?;
    let jerk_total = sims
        .iter()
        .map(|s| jerk_sign_inversions(&s.a, DT, deadband))
        .sum::<Result<usize>>()?;
    let truth_jerk = truths
        .iter()
        .map(|t| jerk_sign_inversions(&t.a, DT, deadband))
        .sum::<Result<usize>>()?;
    Ok(ModelMetrics {
        model: model.to_string(),
        velocity_rmse,
        y_rmse_10s: rmse_y_at_10s(truths, sims)?,
        jerk_sign_inversions: jerk_total as f64 / sims.len() as f64,
        truth_jerk_sign_inversions: truth_jerk as f64 / truths.len() as f64,
        negative_headway_rate: negative_headway_rate(truths, sims)?,
        truths: pairs.len(),
        samples_per_truth: pairs[0].1.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub jerk_deadband: f64,
    pub models: Vec<ModelMetrics>,
}

impl MetricsReport {
    pub fn new(jerk_deadband: f64, models: Vec<ModelMetrics>) -> Self {
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            jerk_deadband,
            models,
        }
    }

    /// Concatenates model rows in input order. Dead-bands must agree.
    pub fn merge(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Argument("nothing to merge".into()))?;
        let mut models = Vec::new();
        for r in reports {
            if r.schema_version != REPORT_SCHEMA_VERSION {
                return Err(Error::Version {
                    found: r.schema_version,
                    supported: REPORT_SCHEMA_VERSION,
                });
            }
            if r.jerk_deadband != first.jerk_deadband {
                return Err(Error::Argument(format!(
                    "reports use different jerk dead-bands ({} vs {})",
                    r.jerk_deadband, first.jerk_deadband
                )));
            }
            models.extend(r.models.iter().cloned());
        }
        Ok(MetricsReport::new(first.jerk_deadband, models))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Flat `model,metric,horizon,value` table; `horizon` is seconds or empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric,horizon,value\n");
        for m in &self.models {
            for (h, v) in HORIZONS_S.zip(&m.velocity_rmse) {
                out.push_str(&format!("{},velocity_rmse,{h},{v}\n", m.model));
            }
            out.push_str(&format!("{},y_rmse,10,{}\n", m.model, m.y_rmse_10s));
            out.push_str(&format!("{},jerk_sign_inversions,,{}\n", m.model, m.jerk_sign_inversions));
            out.push_str(&format!(
                "{},truth_jerk_sign_inversions,,{}\n",
                m.model, m.truth_jerk_sign_inversions
            ));
            out.push_str(&format!("{},negative_headway_rate,,{}\n", m.model, m.negative_headway_rate));
            out.push_str(&format!("{},truths,,{}\n", m.model, m.truths));
            out.push_str(&format!("{},samples_per_truth,,{}\n", m.model, m.samples_per_truth));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
