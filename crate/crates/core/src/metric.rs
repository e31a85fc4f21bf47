//! Vertex universe, exact metric costs and the MST baseline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::rational::{self, Rational};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexId(pub u32);

impl VertexId {
    pub const ROOT: VertexId = VertexId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ExplicitMetric,
    GraphClosure,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("graph is disconnected: no path between {0} and {1}")]
    Disconnected(VertexId, VertexId),
    #[error("negative edge weight on ({0}, {1})")]
    NegativeWeight(VertexId, VertexId),
    #[error("vertex {0} outside the instance")]
    UnknownVertex(VertexId),
    #[error("distinct vertices {0} and {1} at distance zero; co-locate agents with counts instead")]
    ZeroDistance(VertexId, VertexId),
    #[error("triangle inequality violated: c({0},{2}) > c({0},{1}) + c({1},{2})")]
    TriangleViolation(VertexId, VertexId, VertexId),
    #[error("missing cost for pair ({0}, {1})")]
    MissingCost(VertexId, VertexId),
    #[error("asymmetric cost on ({0}, {1})")]
    Asymmetric(VertexId, VertexId),
    #[error("new vertices must continue the dense id range at {expected}, got {got}")]
    NonDenseId { expected: u32, got: VertexId },
    #[error("vertex subset is empty")]
    EmptySubset,
    #[error("vertex subset must contain the root")]
    SubsetWithoutRoot,
    #[error("malformed instance: {0}")]
    Malformed(String),
}

/// A weighted input edge; serialized as `[u, v, "p/q"]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightedEdge(pub VertexId, pub VertexId, pub Rational);

impl Serialize for WeightedEdge {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.0, self.1, rational::to_pq(&self.2)).serialize(s)
    }
}

impl<'de> Deserialize<'de> for WeightedEdge {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (u, v, w): (VertexId, VertexId, String) = Deserialize::deserialize(d)?;
        let w = rational::parse_rational(&w).map_err(serde::de::Error::custom)?;
        Ok(WeightedEdge(u, v, w))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    WeightedGraph,
    Metric,
    Euclidean,
}

/// On-disk instance description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub vertices: Vec<VertexId>,
    #[serde(default)]
    pub edges: Vec<WeightedEdge>,
    pub kind: InstanceKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Distance denominator used for Euclidean instances.
pub const EUCLID_DENOM: u64 = 1_000_000;

/// Complete metric over dense vertex ids `0..n`; vertex 0 is the root.
#[derive(Clone, Debug)]
pub struct MetricInstance {
    n: usize,
    cost: Vec<Rational>,
    provenance: Provenance,
    source: InstanceFile,
}

impl MetricInstance {
    /// The one-vertex instance `{r}`.
    pub fn singleton() -> Self {
        MetricInstance {
            n: 1,
            cost: vec![Rational::zero()],
            provenance: Provenance::ExplicitMetric,
            source: InstanceFile {
                vertices: vec![VertexId::ROOT],
                edges: Vec::new(),
                kind: InstanceKind::Metric,
                points: Vec::new(),
                note: None,
            },
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.n as u32).map(VertexId)
    }

    pub fn contains(&self, v: VertexId) -> bool {
        v.index() < self.n
    }

    #[inline]
    pub fn cost(&self, u: VertexId, v: VertexId) -> &Rational {
        &self.cost[u.index() * self.n + v.index()]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn source(&self) -> &InstanceFile {
        &self.source
    }

    pub fn set_note(&mut self, note: impl Into<String>) {
        self.source.note = Some(note.into());
    }

    pub fn max_cost(&self) -> Rational {
        self.cost.iter().max().cloned().unwrap_or_else(Rational::zero)
    }

    /// Build an instance from a full symmetric cost table, verifying every triple.
    pub fn from_explicit(n: usize, costs: &BTreeMap<(VertexId, VertexId), Rational>) -> Result<Self, MetricError> {
        let mut cost = vec![Rational::zero(); n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let (u, v) = (VertexId(a as u32), VertexId(b as u32));
                let c = lookup(costs, u, v).ok_or(MetricError::MissingCost(u, v))?;
                if let (Some(x), Some(y)) = (costs.get(&(u, v)), costs.get(&(v, u))) {
                    if x != y {
                        return Err(MetricError::Asymmetric(u, v));
                    }
                }
                check_positive(u, v, &c)?;
                cost[a * n + b] = c.clone();
                cost[b * n + a] = c;
            }
        }
        let edges = (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .map(|(a, b)| WeightedEdge(VertexId(a as u32), VertexId(b as u32), cost[a * n + b].clone()))
            .collect();
        let inst = MetricInstance {
            n,
            cost,
            provenance: Provenance::ExplicitMetric,
            source: InstanceFile {
                vertices: (0..n as u32).map(VertexId).collect(),
                edges,
                kind: InstanceKind::Metric,
                points: Vec::new(),
                note: None,
            },
        };
        inst.check_triangle()?;
        Ok(inst)
    }

    /// Exhaustive triangle-inequality check over all triples.
    pub fn check_triangle(&self) -> Result<(), MetricError> {
        let n = self.n;
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    if self.cost[x * n + z] > &self.cost[x * n + y] + &self.cost[y * n + z] {
                        return Err(MetricError::TriangleViolation(
                            VertexId(x as u32),
                            VertexId(y as u32),
                            VertexId(z as u32),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Extend the metric by `new_vertices` (which must continue the dense id
    /// range). `new_costs` must cover every pair touching a new vertex.
    pub fn reveal_vertices(
        &self,
        new_vertices: &[VertexId],
        new_costs: &BTreeMap<(VertexId, VertexId), Rational>,
    ) -> Result<Self, MetricError> {
        for (i, v) in new_vertices.iter().enumerate() {
            let expected = (self.n + i) as u32;
            if v.0 != expected {
                return Err(MetricError::NonDenseId { expected, got: *v });
            }
        }
        let m = self.n + new_vertices.len();
        let mut cost = vec![Rational::zero(); m * m];
        for a in 0..self.n {
            for b in 0..self.n {
                cost[a * m + b] = self.cost[a * self.n + b].clone();
            }
        }
        for b in self.n..m {
            for a in 0..b {
                let (u, v) = (VertexId(a as u32), VertexId(b as u32));
                let c = lookup(new_costs, u, v).ok_or(MetricError::MissingCost(u, v))?;
                check_positive(u, v, &c)?;
                cost[a * m + b] = c.clone();
                cost[b * m + a] = c;
            }
        }
        // only triples touching a new vertex can be new violations
        for x in 0..m {
            for y in 0..m {
                for z in 0..m {
                    if x < self.n && y < self.n && z < self.n {
                        continue;
                    }
                    if cost[x * m + z] > &cost[x * m + y] + &cost[y * m + z] {
                        return Err(MetricError::TriangleViolation(
                            VertexId(x as u32),
                            VertexId(y as u32),
                            VertexId(z as u32),
                        ));
                    }
                }
            }
        }
        let mut source = self.source.clone();
        source.kind = InstanceKind::Metric;
        source.vertices = (0..m as u32).map(VertexId).collect();
        source.points.clear();
        source.edges = (0..m)
            .flat_map(|a| ((a + 1)..m).map(move |b| (a, b)))
            .map(|(a, b)| WeightedEdge(VertexId(a as u32), VertexId(b as u32), cost[a * m + b].clone()))
            .collect();
        Ok(MetricInstance {
            n: m,
            cost,
            provenance: Provenance::ExplicitMetric,
            source,
        })
    }

    /// Restriction of the metric to the first `k` vertices.
    pub fn prefix(&self, k: usize) -> Self {
        let mut costs = BTreeMap::new();
        for a in 0..k {
            for b in (a + 1)..k {
                costs.insert((VertexId(a as u32), VertexId(b as u32)), self.cost[a * self.n + b].clone());
            }
        }
        MetricInstance::from_explicit(k, &costs).expect("restriction of a metric is a metric")
    }

    pub fn from_file(file: &InstanceFile) -> Result<Self, MetricError> {
        let n = file.vertices.len();
        for (i, v) in file.vertices.iter().enumerate() {
            if v.index() != i {
                return Err(MetricError::NonDenseId { expected: i as u32, got: *v });
            }
        }
        if n == 0 {
            return Err(MetricError::Malformed("instance has no vertices".into()));
        }
        let mut inst = match file.kind {
            InstanceKind::WeightedGraph => metric_closure(n, &file.edges)?,
            InstanceKind::Metric => {
                let mut costs = BTreeMap::new();
                for WeightedEdge(u, v, c) in &file.edges {
                    if !(u.index() < n && v.index() < n) {
                        return Err(MetricError::UnknownVertex(if u.index() < n { *v } else { *u }));
                    }
                    if u != v {
                        costs.insert((*u, *v), c.clone());
                    }
                }
                MetricInstance::from_explicit(n, &costs)?
            }
            InstanceKind::Euclidean => {
                if file.points.len() != n {
                    return Err(MetricError::Malformed(format!(
                        "{} points for {} vertices",
                        file.points.len(),
                        n
                    )));
                }
                let pts = file
                    .points
                    .iter()
                    .map(|[x, y]| {
                        let x = rational::parse_rational(x).map_err(|e| MetricError::Malformed(e.to_string()))?;
                        let y = rational::parse_rational(y).map_err(|e| MetricError::Malformed(e.to_string()))?;
                        Ok((x, y))
                    })
                    .collect::<Result<Vec<_>, MetricError>>()?;
                euclidean(&pts)?
            }
        };
        inst.source.note = file.note.clone();
        Ok(inst)
    }
}

fn lookup(costs: &BTreeMap<(VertexId, VertexId), Rational>, u: VertexId, v: VertexId) -> Option<Rational> {
    costs.get(&(u, v)).or_else(|| costs.get(&(v, u))).cloned()
}

fn check_positive(u: VertexId, v: VertexId, c: &Rational) -> Result<(), MetricError> {
    if c.is_negative() {
        Err(MetricError::NegativeWeight(u, v))
    } else if c.is_zero() {
        Err(MetricError::ZeroDistance(u, v))
    } else {
        Ok(())
    }
}

#[derive(PartialEq, Eq)]
struct HeapItem(Rational, usize);

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All-pairs shortest-path metric of a connected weighted graph on `0..n`.
pub fn metric_closure(n: usize, edges: &[WeightedEdge]) -> Result<MetricInstance, MetricError> {
    let mut adj: Vec<Vec<(usize, Rational)>> = vec![Vec::new(); n];
    for WeightedEdge(u, v, w) in edges {
        for x in [u, v] {
            if x.index() >= n {
                return Err(MetricError::UnknownVertex(*x));
            }
        }
        if w.is_negative() {
            return Err(MetricError::NegativeWeight(*u, *v));
        }
        if u == v {
            continue;
        }
        adj[u.index()].push((v.index(), w.clone()));
        adj[v.index()].push((u.index(), w.clone()));
    }
    let mut cost = vec![Rational::zero(); n * n];
    for s in 0..n {
        let mut dist: Vec<Option<Rational>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[s] = Some(Rational::zero());
        heap.push(HeapItem(Rational::zero(), s));
        while let Some(HeapItem(d, x)) = heap.pop() {
            if done[x] {
                continue;
            }
            done[x] = true;
            for (y, w) in &adj[x] {
                let nd = &d + w;
                if dist[*y].as_ref().is_none_or(|cur| nd < *cur) {
                    dist[*y] = Some(nd.clone());
                    heap.push(HeapItem(nd, *y));
                }
            }
        }
        for t in 0..n {
            match &dist[t] {
                Some(d) => {
                    if t != s && d.is_zero() {
                        return Err(MetricError::ZeroDistance(VertexId(s as u32), VertexId(t as u32)));
                    }
                    cost[s * n + t] = d.clone();
                }
                None => {
                    let (a, b) = (s.min(t), s.max(t));
                    return Err(MetricError::Disconnected(VertexId(a as u32), VertexId(b as u32)));
                }
            }
        }
    }
    Ok(MetricInstance {
        n,
        cost,
        provenance: Provenance::GraphClosure,
        source: InstanceFile {
            vertices: (0..n as u32).map(VertexId).collect(),
            edges: edges.to_vec(),
            kind: InstanceKind::WeightedGraph,
            points: Vec::new(),
            note: None,
        },
    })
}

/// Euclidean metric over rational points. Each distance is
/// `floor(sqrt(d^2) * 10^6) / 10^6` and the rounded table is closed under
/// shortest paths, so the triangle inequality holds exactly.
pub fn euclidean(points: &[(Rational, Rational)]) -> Result<MetricInstance, MetricError> {
    let n = points.len();
    let scale2 = Rational::from_integer(BigInt::from(EUCLID_DENOM) * BigInt::from(EUCLID_DENOM));
    let mut units = vec![0u64; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let dx = &points[a].0 - &points[b].0;
            let dy = &points[a].1 - &points[b].1;
            let sq = (&dx * &dx + &dy * &dy) * &scale2;
            let floor = sq.floor().to_integer();
            let d = floor.sqrt().to_u64().ok_or_else(|| MetricError::Malformed("coordinates too large".into()))?;
            if d == 0 {
                return Err(MetricError::ZeroDistance(VertexId(a as u32), VertexId(b as u32)));
            }
            units[a * n + b] = d;
            units[b * n + a] = d;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = units[i * n + k] + units[k * n + j];
                if via < units[i * n + j] {
                    units[i * n + j] = via;
                }
            }
        }
    }
    let denom = BigInt::from(EUCLID_DENOM);
    let cost = units
        .iter()
        .map(|&u| Rational::new(BigInt::from(u), denom.clone()))
        .collect();
    Ok(MetricInstance {
        n,
        cost,
        provenance: Provenance::Euclidean,
        source: InstanceFile {
            vertices: (0..n as u32).map(VertexId).collect(),
            edges: Vec::new(),
            kind: InstanceKind::Euclidean,
            points: points
                .iter()
                .map(|(x, y)| [rational::to_pq(x), rational::to_pq(y)])
                .collect(),
            note: None,
        },
    })
}

/// Exact MST cost over the complete submetric induced by `subset` (Prim).
pub fn mst_cost(inst: &MetricInstance, subset: &BTreeSet<VertexId>) -> Result<Rational, MetricError> {
    if subset.is_empty() {
        return Err(MetricError::EmptySubset);
    }
    if !subset.contains(&VertexId::ROOT) {
        return Err(MetricError::SubsetWithoutRoot);
    }
    if let Some(v) = subset.iter().find(|v| !inst.contains(**v)) {
        return Err(MetricError::UnknownVertex(*v));
    }
    let vs: Vec<VertexId> = subset.iter().copied().collect();
    let k = vs.len();
    let mut in_tree = vec![false; k];
    let mut best: Vec<Option<Rational>> = vec![None; k];
    best[0] = Some(Rational::zero());
    let mut total = Rational::zero();
    for _ in 0..k {
        let mut pick = None;
        for i in 0..k {
            if in_tree[i] {
                continue;
            }
            if let Some(b) = &best[i] {
                if pick.is_none_or(|p: usize| b < best[p].as_ref().unwrap()) {
                    pick = Some(i);
                }
            }
        }
        let p = pick.expect("complete graph is connected");
        in_tree[p] = true;
        total += best[p].as_ref().unwrap();
        for i in 0..k {
            if !in_tree[i] {
                let c = inst.cost(vs[p], vs[i]);
                if best[i].as_ref().is_none_or(|b| c < b) {
                    best[i] = Some(c.clone());
                }
            }
        }
    }
    Ok(total)
}

/// MST over every vertex of the instance.
pub fn mst_all(inst: &MetricInstance) -> Rational {
    let all: BTreeSet<VertexId> = inst.vertices().collect();
    mst_cost(inst, &all).expect("instance contains the root")
}
