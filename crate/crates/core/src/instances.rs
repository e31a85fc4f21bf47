//! Instance generators: the layered lower-bound graphs `G_m` with their
//! arrival sequence, the two bad-example fixtures, and seeded random
//! Euclidean workloads.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Schedule, ScheduleEvent};
use crate::metric::{euclidean, metric_closure, MetricInstance, VertexId, WeightedEdge};
use crate::rational::{frac, int, Rational};
use crate::routing::RoutingState;

/// Id of `v^i_{j,k}` in `G_m` (layers `0..=m`, `j, k` in `1..=m`).
pub fn gm_vertex(m: u32, i: u32, j: u32, k: u32) -> VertexId {
    debug_assert!(i <= m && (1..=m).contains(&j) && (1..=m).contains(&k));
    VertexId(1 + i * m * m + (j - 1) * m + (k - 1))
}

#[derive(Clone, Debug)]
pub struct LowerBoundInstance {
    pub m: u32,
    pub edges: Vec<WeightedEdge>,
    pub instance: MetricInstance,
    inter: usize,
    intra: usize,
    canonical: BTreeMap<(u32, u32), Vec<VertexId>>,
}

impl LowerBoundInstance {
    pub fn vertex(&self, i: u32, j: u32, k: u32) -> VertexId {
        gm_vertex(self.m, i, j, k)
    }

    pub fn inter_edges(&self) -> usize {
        self.inter
    }

    pub fn intra_edges(&self) -> usize {
        self.intra
    }

    /// `P_{j,k}`, from the end vertex `v^m_{j,k}` down to the root.
    pub fn canonical_path(&self, j: u32, k: u32) -> &[VertexId] {
        &self.canonical[&(j, k)]
    }

    pub fn canonical_paths(&self) -> impl Iterator<Item = (&(u32, u32), &Vec<VertexId>)> {
        self.canonical.iter()
    }

    /// Suffix of the canonical path starting at every non-root vertex.
    pub fn segments(&self) -> BTreeMap<VertexId, Vec<VertexId>> {
        let mut out = BTreeMap::new();
        for p in self.canonical.values() {
            for s in 0..p.len() - 1 {
                out.insert(p[s], p[s..].to_vec());
            }
        }
        out
    }

    /// The arrival/departure sequence over rounds taken in `order`, repeated for `m` phases.
    pub fn sigma(&self, order: &[(u32, u32)]) -> Schedule {
        let m = self.m;
        let mut events = Vec::new();
        for _phase in 0..m {
            for &(j, k) in order {
                let p = self.canonical_path(j, k);
                // p[0] is layer m, p[m - i] is layer i
                for i in 0..m {
                    events.push(ScheduleEvent::Arrival(vec![(p[(m - i) as usize], m * m)]));
                }
                events.push(ScheduleEvent::Arrival(vec![(p[0], 1)]));
                events.push(ScheduleEvent::Departure((0..m).map(|i| p[(m - i) as usize]).collect()));
            }
        }
        let mut s = Schedule::new(events);
        s.note = format!("sigma on G_{m}");
        s
    }

    pub fn end_vertices(&self) -> BTreeSet<VertexId> {
        self.canonical.values().map(|p| p[0]).collect()
    }
}

/// All pairs `(j, k)` in lexicographic order.
pub fn lexicographic_order(m: u32) -> Vec<(u32, u32)> {
    (1..=m).flat_map(|j| (1..=m).map(move |k| (j, k))).collect()
}

/// A seeded permutation of the pairs.
pub fn shuffled_order(m: u32, seed: u64) -> Vec<(u32, u32)> {
    let mut o = lexicographic_order(m);
    o.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    o
}

pub fn build_gm(m: u32) -> LowerBoundInstance {
    assert!(m >= 1, "G_m needs m >= 1");
    let n = (m * m * (m + 1) + 1) as usize;
    let r = VertexId::ROOT;
    let mut edges = Vec::new();
    for j in 1..=m {
        for k in 1..=m {
            edges.push(WeightedEdge(r, gm_vertex(m, 0, j, k), int(1)));
            edges.push(WeightedEdge(gm_vertex(m, 0, j, k), gm_vertex(m, 1, j, k), int(1)));
            for i in 1..m {
                edges.push(WeightedEdge(gm_vertex(m, i, j, k), gm_vertex(m, i + 1, k, j), int(1)));
            }
        }
    }
    let inter = edges.len();
    let short = frac(1, m as i64);
    for i in 1..=m {
        for j in 1..=m {
            for a in 1..=m {
                for b in a + 1..=m {
                    edges.push(WeightedEdge(gm_vertex(m, i, j, a), gm_vertex(m, i, j, b), short.clone()));
                }
            }
        }
    }
    let intra = edges.len() - inter;
    let mut canonical = BTreeMap::new();
    for j in 1..=m {
        for k in 1..=m {
            let (mut a, mut b) = (j, k);
            let mut path = vec![gm_vertex(m, m, a, b)];
            for i in (1..m).rev() {
                (a, b) = (b, a);
                path.push(gm_vertex(m, i, a, b));
            }
            path.push(gm_vertex(m, 0, a, b));
            path.push(r);
            canonical.insert((j, k), path);
        }
    }
    let mut instance = metric_closure(n, &edges).expect("G_m is connected");
    instance.set_note(format!("G_{m}: layered lower-bound graph"));
    LowerBoundInstance {
        m,
        edges,
        instance,
        inter,
        intra,
        canonical,
    }
}

/// `build_gm` memoised per `m`.
pub fn gm_cached(m: u32) -> Arc<LowerBoundInstance> {
    static CACHE: OnceLock<Mutex<BTreeMap<u32, Arc<LowerBoundInstance>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().unwrap().get(&m) {
        return hit.clone();
    }
    let built = Arc::new(build_gm(m));
    cache.lock().unwrap().entry(m).or_insert(built).clone()
}

/// `n + 1` agents at `u` routed over a cost-`n` detour while a cost-1 edge exists.
#[derive(Clone, Debug)]
pub struct PoaFixture {
    pub n: u32,
    pub instance: MetricInstance,
    pub state: RoutingState,
    pub opt: Rational,
}

pub const POA_U: VertexId = VertexId(1);
pub const POA_MID: VertexId = VertexId(2);

pub fn build_poa_fixture(n: u32) -> PoaFixture {
    assert!(n >= 2, "PoA fixture needs n >= 2");
    let (hi, lo) = (n.div_ceil(2) as i64, (n / 2) as i64);
    let r = VertexId::ROOT;
    let edges = [
        WeightedEdge(POA_U, r, int(1)),
        WeightedEdge(POA_U, POA_MID, int(hi)),
        WeightedEdge(POA_MID, r, int(lo)),
    ];
    let mut instance = metric_closure(3, &edges).expect("connected");
    instance.set_note(format!(
        "u = 1 reaches r = 0 directly at cost 1 or through midpoint 2 at cost {hi} + {lo} = {n}"
    ));
    let state = RoutingState::from_paths([r, POA_U, POA_MID], [(POA_U, n + 1, vec![POA_U, POA_MID, r])])
        .expect("valid fixture path");
    PoaFixture {
        n,
        instance,
        state,
        opt: int(1),
    }
}

/// A half-unit chain from the root out to `u`, plus a unit shortcut `u - r`.
#[derive(Clone, Debug)]
pub struct SteinerGapFixture {
    pub n: u32,
    pub instance: MetricInstance,
    pub schedule: Schedule,
    pub survivor: VertexId,
}

pub fn build_steiner_gap_fixture(n: u32) -> SteinerGapFixture {
    assert!(n >= 2, "Steiner-gap fixture needs n >= 2");
    let len = 2 * n; // chain vertices 1..2n-1, u = 2n
    let u = VertexId(len);
    let half = frac(1, 2);
    let mut edges: Vec<WeightedEdge> = (0..len)
        .map(|k| WeightedEdge(VertexId(k), VertexId(k + 1), half.clone()))
        .collect();
    edges.push(WeightedEdge(u, VertexId::ROOT, int(1)));
    let mut instance = metric_closure(len as usize + 1, &edges).expect("connected");
    instance.set_note(format!(
        "chain 0-1-...-{len} of half-unit edges, shortcut ({len}, 0) of cost 1"
    ));
    let mut events: Vec<ScheduleEvent> = (1..len).map(|k| ScheduleEvent::Arrival(vec![(VertexId(k), n)])).collect();
    events.push(ScheduleEvent::Arrival(vec![(u, n)]));
    events.push(ScheduleEvent::Departure((1..len).map(VertexId).collect()));
    let mut schedule = Schedule::new(events);
    schedule.note = format!("waves of {n} agents from the root outwards, then all but u depart");
    SteinerGapFixture {
        n,
        instance,
        schedule,
        survivor: u,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum EpochProfile {
    /// Arrivals only, `batch` terminals per epoch.
    Online { batch: u32 },
    /// Alternating epochs: `arrive_pct`% of the terminals arrive, then
    /// `depart_pct`% of the active ones (at random) leave.
    Churn { arrive_pct: u32, depart_pct: u32 },
}

impl EpochProfile {
    pub fn churn() -> Self {
        EpochProfile::Churn {
            arrive_pct: 10,
            depart_pct: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EuclideanWorkload {
    pub instance: MetricInstance,
    pub schedule: Schedule,
}

/// Grid resolution of random points in the unit square.
pub const GRID: i64 = 1000;

/// `n` distinct points of the `1/1000` grid in the unit square (point 0 is the root).
pub fn random_points(n: usize, seed: u64) -> Vec<(Rational, Rational)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = (rng.gen_range(0..=GRID), rng.gen_range(0..=GRID));
        if seen.insert(p) {
            pts.push((frac(p.0, GRID), frac(p.1, GRID)));
        }
    }
    pts
}

fn pct_of(total: usize, pct: u32) -> usize {
    (total * pct as usize).div_ceil(100)
}

pub fn build_random_euclidean(n: usize, seed: u64, profile: EpochProfile) -> EuclideanWorkload {
    assert!(n >= 1, "need at least the root");
    let mut instance = euclidean(&random_points(n, seed)).expect("distinct points");
    instance.set_note(format!("random Euclidean, n = {n}, seed = {seed}"));
    let terminals: Vec<VertexId> = (1..n as u32).map(VertexId).collect();
    let mut events = Vec::new();
    match profile {
        EpochProfile::Online { batch } => {
            for chunk in terminals.chunks(batch.max(1) as usize) {
                events.push(ScheduleEvent::Arrival(chunk.iter().map(|v| (*v, 1)).collect()));
            }
        }
        EpochProfile::Churn { arrive_pct, depart_pct } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c4a2);
            let a = pct_of(terminals.len(), arrive_pct).max(1);
            let d = pct_of(terminals.len(), depart_pct);
            let mut active: Vec<VertexId> = Vec::new();
            for chunk in terminals.chunks(a) {
                events.push(ScheduleEvent::Arrival(chunk.iter().map(|v| (*v, 1)).collect()));
                active.extend_from_slice(chunk);
                if d > 0 && !active.is_empty() {
                    active.shuffle(&mut rng);
                    let mut gone: Vec<VertexId> = active.split_off(active.len() - d.min(active.len()));
                    gone.sort();
                    active.sort();
                    events.push(ScheduleEvent::Departure(gone));
                }
            }
        }
    }
    let mut schedule = Schedule::new(events);
    schedule.note = format!("{profile:?}");
    EuclideanWorkload { instance, schedule }
}
