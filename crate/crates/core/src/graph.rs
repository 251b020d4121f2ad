//! Per-frame traffic graphs.
//!
//! Two vehicles in the same frame are connected when they are at most one
//! lane apart and their longitudinal positions differ by strictly less than
//! the neighbor threshold `tau`. Each node carries a 10-dimensional feature
//! row: lane, class, speed, acceleration, the distances to the three nearest
//! front neighbors (padded with `tau`) and the negated distances to the three
//! nearest rear neighbors (padded with `-tau`).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEET_TO_METERS: f64 = 0.3048;
/// 20 ft.
pub const DEFAULT_TAU: f64 = 20.0 * FEET_TO_METERS;
pub const FEATURE_DIM: usize = 10;

/// One vehicle at one 10 Hz frame, SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub vehicle_id: u32,
    pub frame: u32,
    pub lane_id: u32,
    /// 1 = motorcycle, 2 = auto, 3 = truck.
    pub class_id: u32,
    /// Longitudinal position, meters.
    pub y: f64,
    /// Speed, m/s.
    pub v: f64,
    /// Acceleration, m/s².
    pub a: f64,
}

impl VehicleState {
    pub fn validate(&self) -> Result<()> {
        if self.lane_id < 1 {
            return Err(Error::Data(format!("vehicle {} has lane id 0", self.vehicle_id)));
        }
        if !(self.y.is_finite() && self.v.is_finite() && self.a.is_finite()) {
            return Err(Error::Data(format!(
                "vehicle {} at frame {} has non-finite kinematics",
                self.vehicle_id, self.frame
            )));
        }
        if self.v < 0.0 {
            return Err(Error::Data(format!(
                "vehicle {} at frame {} has negative speed {}",
                self.vehicle_id, self.frame, self.v
            )));
        }
        Ok(())
    }
}

/// All vehicles observed at one frame, ordered by vehicle id.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSnapshot {
    frame: u32,
    vehicles: Vec<VehicleState>,
}

impl FrameSnapshot {
    pub fn new(frame: u32, mut vehicles: Vec<VehicleState>) -> Result<Self> {
        vehicles.sort_by_key(|v| v.vehicle_id);
        for w in vehicles.windows(2) {
            if w[0].vehicle_id == w[1].vehicle_id {
                return Err(Error::Data(format!(
                    "duplicate vehicle id {} in frame {frame}",
                    w[0].vehicle_id
                )));
            }
        }
        if let Some(v) = vehicles.iter().find(|v| v.frame != frame) {
            return Err(Error::Data(format!(
                "vehicle {} belongs to frame {}, not {frame}",
                v.vehicle_id, v.frame
            )));
        }
        Ok(FrameSnapshot { frame, vehicles })
    }

    pub fn frame(&self) -> u32 {
        self.frame
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn get(&self, vehicle_id: u32) -> Option<&VehicleState> {
        self.vehicles
            .binary_search_by_key(&vehicle_id, |v| v.vehicle_id)
            .ok()
            .map(|i| &self.vehicles[i])
    }

    pub fn contains(&self, vehicle_id: u32) -> bool {
        self.get(vehicle_id).is_some()
    }

    /// Returns a copy in which `state` replaces the vehicle with the same id.
    pub fn with_replaced(&self, state: VehicleState) -> Result<FrameSnapshot> {
        let idx = self
            .vehicles
            .binary_search_by_key(&state.vehicle_id, |v| v.vehicle_id)
            .map_err(|_| Error::Lookup(format!("vehicle {} not in frame {}", state.vehicle_id, self.frame)))?;
        let mut vehicles = self.vehicles.clone();
        vehicles[idx] = VehicleState {
            frame: self.frame,
            ..state
        };
        Ok(FrameSnapshot {
            frame: self.frame,
            vehicles,
        })
    }
}

/// Which normalized adjacency a propagation layer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyVariant {
    /// `D̂^{-1/2} (A + I) D̂^{-1/2}`, the base GCN rule.
    SelfLoopBinary,
    /// `D^{-1/2} A D^{-1/2}` without self-loops (ego-discriminated rule).
    Binary,
    /// Closeness levels 1..=3 in place of binary entries, normalized by the
    /// weighted degree (distance-aware rule).
    DistanceDiscretized,
}

/// Fractions of `tau` separating the "very close", "medium" and "far" levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosenessCutoffs {
    pub near: f64,
    pub medium: f64,
}

impl Default for ClosenessCutoffs {
    fn default() -> Self {
        ClosenessCutoffs {
            near: 1.0 / 3.0,
            medium: 2.0 / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub tau: f64,
    pub closeness: ClosenessCutoffs,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            tau: DEFAULT_TAU,
            closeness: ClosenessCutoffs::default(),
        }
    }
}

impl GraphOptions {
    pub fn with_tau(tau: f64) -> Self {
        GraphOptions {
            tau,
            ..GraphOptions::default()
        }
    }
}

/// Undirected traffic graph for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    pub frame: u32,
    /// Row order of every per-node matrix; ascending vehicle id.
    pub node_ids: Vec<u32>,
    pub positions: Vec<f64>,
    /// Unordered id pairs, smaller id first, sorted.
    pub edges: Vec<(u32, u32)>,
    /// Neighbor row indices per node, ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// N x 10 node features.
    pub features: Matrix,
    pub options: GraphOptions,
}

#[inline]
fn connected(a: &VehicleState, b: &VehicleState, tau: f64) -> bool {
    a.lane_id.abs_diff(b.lane_id) <= 1 && (a.y - b.y).abs() < tau
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("neighbor threshold must be positive, got {tau}")));
    }
    Ok(())
}

/// Builds the traffic graph with default closeness cutoffs.
pub fn build_graph(snapshot: &FrameSnapshot, tau: f64) -> Result<TrafficGraph> {
    build_graph_with(snapshot, &GraphOptions::with_tau(tau))
}

pub fn build_graph_with(snapshot: &FrameSnapshot, options: &GraphOptions) -> Result<TrafficGraph> {
    check_tau(options.tau)?;
    let tau = options.tau;
    // FrameSnapshot keeps vehicles sorted and unique by id.
    let vs = snapshot.vehicles();
    let n = vs.len();
    let mut neighbors = vec![Vec::new(); n];
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if connected(&vs[i], &vs[j], tau) {
                neighbors[i].push(j);
                neighbors[j].push(i);
                edges.push((vs[i].vehicle_id, vs[j].vehicle_id));
            }
        }
    }
    let mut features = Matrix::zeros(n, FEATURE_DIM);
    for i in 0..n {
        let row = features_from(&vs[i], neighbors[i].iter().map(|&j| &vs[j]), tau);
        features.row_mut(i).copy_from_slice(&row);
    }
    Ok(TrafficGraph {
        frame: snapshot.frame(),
        node_ids: vs.iter().map(|v| v.vehicle_id).collect(),
        positions: vs.iter().map(|v| v.y).collect(),
        edges,
        neighbors,
        features,
        options: *options,
    })
}

/// Feature row of a single vehicle in `snapshot`.
pub fn node_features(snapshot: &FrameSnapshot, vehicle_id: u32, tau: f64) -> Result<[f64; FEATURE_DIM]> {
    check_tau(tau)?;
    let me = snapshot
        .get(vehicle_id)
        .ok_or_else(|| Error::Lookup(format!("vehicle {vehicle_id} not in frame {}", snapshot.frame())))?;
    let nbrs = snapshot
        .vehicles()
        .iter()
        .filter(|o| o.vehicle_id != vehicle_id && connected(me, o, tau));
    Ok(features_from(me, nbrs, tau))
}

fn features_from<'a>(
    me: &VehicleState,
    neighbors: impl Iterator<Item = &'a VehicleState>,
    tau: f64,
) -> [f64; FEATURE_DIM] {
    let mut front: Vec<(f64, u32)> = Vec::new();
    let mut rear: Vec<(f64, u32)> = Vec::new();
    for o in neighbors {
        let dy = o.y - me.y;
        if dy > 0.0 {
            front.push((dy, o.vehicle_id));
        } else if dy < 0.0 {
            rear.push((-dy, o.vehicle_id));
        }
    }
    let by_gap = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    front.sort_by(by_gap);
    rear.sort_by(by_gap);
    let mut f = [0.0; FEATURE_DIM];
    f[0] = me.lane_id as f64;
    f[1] = me.class_id as f64;
    f[2] = me.v;
    f[3] = me.a;
    for k in 0..3 {
        f[4 + k] = front.get(k).map_or(tau, |x| x.0);
        f[7 + k] = rear.get(k).map_or(-tau, |x| -x.0);
    }
    f
}

/// Closeness level of an edge: 3 (very close), 2 (medium) or 1 (far).
pub fn discretize_closeness(delta_y: f64, tau: f64) -> Result<u8> {
    discretize_closeness_with(delta_y, tau, &ClosenessCutoffs::default())
}

pub fn discretize_closeness_with(delta_y: f64, tau: f64, cutoffs: &ClosenessCutoffs) -> Result<u8> {
    let d = delta_y.abs();
    if d == 0.0 {
        return Err(Error::Data(
            "degenerate distance: two neighboring vehicles share the same position".into(),
        ));
    }
    Ok(if d <= cutoffs.near * tau {
        3
    } else if d <= cutoffs.medium * tau {
        2
    } else {
        1
    })
}

impl TrafficGraph {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn index_of(&self, vehicle_id: u32) -> Option<usize> {
        self.node_ids.binary_search(&vehicle_id).ok()
    }

    pub fn tau(&self) -> f64 {
        self.options.tau
    }

    /// Nodes within `hops` edges of `node`, including itself, ascending.
    pub fn receptive_field(&self, node: usize, hops: usize) -> Vec<usize> {
        let mut seen = BTreeSet::from([node]);
        let mut frontier = vec![node];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for &w in &self.neighbors[u] {
                    if seen.insert(w) {
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        seen.into_iter().collect()
    }

    /// Edge weight matrix before normalization.
    fn raw_adjacency(&self, variant: AdjacencyVariant) -> Result<Matrix> {
        let n = self.len();
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for &j in &self.neighbors[i] {
                let w = match variant {
                    AdjacencyVariant::SelfLoopBinary | AdjacencyVariant::Binary => 1.0,
                    AdjacencyVariant::DistanceDiscretized => discretize_closeness_with(
                        self.positions[i] - self.positions[j],
                        self.tau(),
                        &self.options.closeness,
                    )? as f64,
                };
                a.set(i, j, w);
            }
            if variant == AdjacencyVariant::SelfLoopBinary {
                a.set(i, i, 1.0);
            }
        }
        Ok(a)
    }
}

/// Symmetrically normalized aggregation matrix for `variant`, and whether it
/// contains self-loops. Rows of isolated nodes without self-loops are zero.
pub fn normalized_adjacency(graph: &TrafficGraph, variant: AdjacencyVariant) -> Result<(Matrix, bool)> {
    let mut a = graph.raw_adjacency(variant)?;
    let n = graph.len();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    for i in 0..n {
        let row = a.row_mut(i);
        for j in 0..n {
            row[j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok((a, variant == AdjacencyVariant::SelfLoopBinary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn veh(id: u32, lane: u32, y: f64) -> VehicleState {
        VehicleState {
            vehicle_id: id,
            frame: 0,
            lane_id: lane,
            class_id: 2,
            y,
            v: 10.0,
            a: 0.5,
        }
    }

    fn snap(vs: Vec<VehicleState>) -> FrameSnapshot {
        FrameSnapshot::new(0, vs).unwrap()
    }

    fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, tau: f64) -> FrameSnapshot {
        let vs = (0..n)
            .map(|i| veh(i as u32 * 3 + 1, rng.random_range(1..=5), rng.random_range(0.0..4.0 * tau)))
            .collect();
        snap(vs)
    }

    #[test]
    fn one_lane_rule() {
        let g = build_graph(&snap(vec![veh(1, 1, 0.0), veh(2, 2, 1.0), veh(3, 4, 2.0)]), DEFAULT_TAU).unwrap();
        assert_eq!(g.edges, vec![(1, 2)]);
        assert!(g.neighbors[2].is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        let tau = 6.0;
        let g = build_graph(&snap(vec![veh(1, 1, 0.0), veh(2, 1, tau)]), tau).unwrap();
        assert!(g.edges.is_empty());
        let g = build_graph(&snap(vec![veh(1, 1, 0.0), veh(2, 1, tau - 1e-9)]), tau).unwrap();
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            FrameSnapshot::new(0, vec![veh(1, 1, 0.0), veh(1, 2, 3.0)]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn edges_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tau = DEFAULT_TAU;
        for _ in 0..20 {
            let s = random_snapshot(&mut rng, 20, tau);
            let g = build_graph(&s, tau).unwrap();
            let mut expected = Vec::new();
            for a in s.vehicles() {
                for b in s.vehicles() {
                    let lane_ok = (a.lane_id as i64 - b.lane_id as i64).abs() <= 1;
                    if a.vehicle_id < b.vehicle_id && lane_ok && (a.y - b.y).abs() < tau {
                        expected.push((a.vehicle_id, b.vehicle_id));
                    }
                }
            }
            expected.sort();
            let mut got = g.edges.clone();
            got.sort();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn isolated_vehicle_features_are_padded() {
        let tau = DEFAULT_TAU;
        let s = snap(vec![veh(4, 3, 100.0)]);
        let f = node_features(&s, 4, tau).unwrap();
        assert_eq!(f, [3.0, 2.0, 10.0, 0.5, tau, tau, tau, -tau, -tau, -tau]);
    }

    #[test]
    fn one_front_neighbor() {
        let tau = 6.096;
        let s = snap(vec![veh(1, 2, 10.0), veh(2, 2, 15.0)]);
        let f = node_features(&s, 1, tau).unwrap();
        assert!((f[4] - 5.0).abs() < 1e-12);
        assert_eq!(&f[5..7], &[tau, tau]);
        assert_eq!(&f[7..], &[-tau, -tau, -tau]);
        let f2 = node_features(&s, 2, tau).unwrap();
        assert!((f2[7] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_three_of_four_front() {
        let tau = 50.0;
        let s = snap(vec![veh(1, 2, 0.0), veh(2, 1, 30.0), veh(3, 2, 7.0), veh(4, 3, 12.0), veh(5, 2, 2.5)]);
        let f = node_features(&s, 1, tau).unwrap();
        let mut gaps = vec![30.0, 7.0, 12.0, 2.5];
        gaps.sort_by(f64::total_cmp);
        assert_eq!(&f[4..7], &gaps[..3]);
    }

    #[test]
    fn missing_vehicle_is_lookup_error() {
        assert!(matches!(node_features(&snap(vec![]), 1, 5.0), Err(Error::Lookup(_))));
    }

    #[test]
    fn closeness_levels() {
        let tau = 6.0;
        assert_eq!(discretize_closeness(tau / 6.0, tau).unwrap(), 3);
        assert_eq!(discretize_closeness(-tau / 2.0, tau).unwrap(), 2);
        assert_eq!(discretize_closeness(0.9 * tau, tau).unwrap(), 1);
        assert!(matches!(discretize_closeness(0.0, tau), Err(Error::Data(_))));
    }

    #[test]
    fn adjacency_examples() {
        let g = build_graph(&snap(vec![veh(1, 1, 0.0), veh(2, 1, 1.0)]), 6.0).unwrap();
        let (m, loops) = normalized_adjacency(&g, AdjacencyVariant::SelfLoopBinary).unwrap();
        assert!(loops);
        assert!(m.max_abs_diff(&Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]])) < 1e-15);
        let (m, _) = normalized_adjacency(&g, AdjacencyVariant::DistanceDiscretized).unwrap();
        assert!(m.max_abs_diff(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])) < 1e-15);

        let single = build_graph(&snap(vec![veh(1, 1, 0.0)]), 6.0).unwrap();
        let (m, loops) = normalized_adjacency(&single, AdjacencyVariant::Binary).unwrap();
        assert!(!loops);
        assert_eq!(m, Matrix::zeros(1, 1));
    }

    #[test]
    fn self_loop_entries_match_degree_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let s = random_snapshot(&mut rng, 12, 10.0);
            let g = build_graph(&s, 10.0).unwrap();
            let (m, _) = normalized_adjacency(&g, AdjacencyVariant::SelfLoopBinary).unwrap();
            for i in 0..g.len() {
                let di = g.neighbors[i].len() as f64 + 1.0;
                for j in 0..g.len() {
                    let linked = i == j || g.neighbors[i].contains(&j);
                    let dj = g.neighbors[j].len() as f64 + 1.0;
                    let expect = if linked { 1.0 / (di * dj).sqrt() } else { 0.0 };
                    assert!((m.get(i, j) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // triangle in one lane: every node has degree 2
        let g = build_graph(&snap(vec![veh(1, 1, 0.0), veh(2, 1, 1.0), veh(3, 1, 2.0)]), 6.0).unwrap();
        let (m, _) = normalized_adjacency(&g, AdjacencyVariant::SelfLoopBinary).unwrap();
        for i in 0..3 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn receptive_field_hops() {
        let g = build_graph(
            &snap(vec![veh(1, 1, 0.0), veh(2, 1, 5.0), veh(3, 1, 10.0), veh(4, 1, 15.0)]),
            6.0,
        )
        .unwrap();
        assert_eq!(g.receptive_field(0, 1), vec![0, 1]);
        assert_eq!(g.receptive_field(0, 2), vec![0, 1, 2]);
        assert_eq!(g.receptive_field(1, 2), vec![0, 1, 2, 3]);
    }

    proptest::proptest! {
        #[test]
        fn order_invariant_and_symmetric(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau = 8.0;
            let s = random_snapshot(&mut rng, 12, tau);
            let mut shuffled = s.vehicles().to_vec();
            shuffled.reverse();
            shuffled.swap(0, 5);
            let g1 = build_graph(&s, tau).unwrap();
            let g2 = build_graph(&FrameSnapshot::new(0, shuffled).unwrap(), tau).unwrap();
            proptest::prop_assert_eq!(&g1, &g2);
            for variant in [AdjacencyVariant::SelfLoopBinary, AdjacencyVariant::Binary, AdjacencyVariant::DistanceDiscretized] {
                let (m, _) = normalized_adjacency(&g1, variant).unwrap();
                proptest::prop_assert!(m.max_abs_diff(&m.transpose()) == 0.0);
            }
            for i in 0..g1.len() {
                let f = g1.features.row(i);
                proptest::prop_assert!(f[4..7].windows(2).all(|w| w[0] <= w[1]));
                proptest::prop_assert!(f[4..7].iter().all(|&d| d > 0.0 && d <= tau));
                proptest::prop_assert!(f[7..10].windows(2).all(|w| w[0] >= w[1]));
                proptest::prop_assert!(f[7..10].iter().all(|&d| (-tau..0.0).contains(&d)));
            }
        }

        #[test]
        fn small_perturbation_keeps_edges(seed in 0u64..5000, which in 0usize..12, sign in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau = 8.0;
            let s = random_snapshot(&mut rng, 12, tau);
            let g = build_graph(&s, tau).unwrap();
            let me = s.vehicles()[which];
            // distance from every pairwise gap to the threshold
            let margin = s.vehicles().iter()
                .filter(|o| o.vehicle_id != me.vehicle_id)
                .map(|o| ((o.y - me.y).abs() - tau).abs())
                .fold(f64::INFINITY, f64::min);
            let delta = if sign { 0.49 * margin } else { -0.49 * margin };
            let moved = s.with_replaced(VehicleState { y: me.y + delta, ..me }).unwrap();
            let g2 = build_graph(&moved, tau).unwrap();
            proptest::prop_assert_eq!(g.edges, g2.edges);
        }
    }
}
