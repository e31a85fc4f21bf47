//! Routing state, Shapley shares, Rosenthal potential, best responses and
//! tree-follow moves.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::metric::{MetricInstance, VertexId};
use crate::rational::{self, Rational};

/// Undirected edge, stored with the smaller id first.
pub type Edge = (VertexId, VertexId);

#[inline]
pub fn edge(a: VertexId, b: VertexId) -> Edge {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoutingError {
    #[error("vertex {0} has no active agent")]
    NotActive(VertexId),
    #[error("vertex {0} is neither a terminal nor on any routing path")]
    NotOnAnyPath(VertexId),
    #[error("vertex {0} has not been revealed")]
    Unrevealed(VertexId),
    #[error("the root cannot host agents or move")]
    Root,
    #[error("invalid path for terminal {terminal}: {reason}")]
    InvalidPath { terminal: VertexId, reason: String },
    #[error("routing paths do not form a tree: {0} has parents {1} and {2}")]
    NotATree(VertexId, VertexId, VertexId),
    #[error("vertex {0} is not in the routing tree")]
    NotInTree(VertexId),
    #[error("cannot move {0} to {1}: target lies in its own subtree")]
    MoveIntoSubtree(VertexId, VertexId),
    #[error("co-located agents at {0} would take different paths")]
    DivergingColocated(VertexId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingState {
    revealed: BTreeSet<VertexId>,
    agents: BTreeMap<VertexId, u32>,
    paths: BTreeMap<VertexId, Vec<VertexId>>,
    usage: BTreeMap<Edge, u64>,
    last_mover: Option<VertexId>,
}

impl Default for RoutingState {
    fn default() -> Self {
        Self::new()
    }
}

impl RoutingState {
    /// Empty routing: only the root is revealed.
    pub fn new() -> Self {
        RoutingState {
            revealed: [VertexId::ROOT].into(),
            agents: BTreeMap::new(),
            paths: BTreeMap::new(),
            usage: BTreeMap::new(),
            last_mover: None,
        }
    }

    /// Build a state from explicit per-terminal `(vertex, count, path)` triples.
    pub fn from_paths(
        revealed: impl IntoIterator<Item = VertexId>,
        terminals: impl IntoIterator<Item = (VertexId, u32, Vec<VertexId>)>,
    ) -> Result<Self, RoutingError> {
        let mut st = RoutingState::new();
        st.revealed.extend(revealed);
        for (v, count, path) in terminals {
            st.check_path(v, &path)?;
            if count == 0 {
                continue;
            }
            st.agents.insert(v, count);
            st.paths.insert(v, path);
        }
        st.usage = st.recompute_usage();
        Ok(st)
    }

    pub fn revealed(&self) -> &BTreeSet<VertexId> {
        &self.revealed
    }

    pub fn is_revealed(&self, v: VertexId) -> bool {
        self.revealed.contains(&v)
    }

    pub fn reveal(&mut self, v: VertexId) {
        self.revealed.insert(v);
    }

    pub fn agents(&self) -> &BTreeMap<VertexId, u32> {
        &self.agents
    }

    pub fn terminals(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.agents.keys().copied()
    }

    pub fn is_active(&self, v: VertexId) -> bool {
        self.agents.contains_key(&v)
    }

    pub fn agent_count(&self, v: VertexId) -> u32 {
        self.agents.get(&v).copied().unwrap_or(0)
    }

    pub fn total_agents(&self) -> u64 {
        self.agents.values().map(|&c| c as u64).sum()
    }

    pub fn path(&self, v: VertexId) -> Option<&[VertexId]> {
        self.paths.get(&v).map(|p| p.as_slice())
    }

    pub fn paths(&self) -> &BTreeMap<VertexId, Vec<VertexId>> {
        &self.paths
    }

    pub fn usage(&self, e: Edge) -> u64 {
        self.usage.get(&e).copied().unwrap_or(0)
    }

    pub fn usage_map(&self) -> &BTreeMap<Edge, u64> {
        &self.usage
    }

    pub fn last_mover(&self) -> Option<VertexId> {
        self.last_mover
    }

    pub fn set_last_mover(&mut self, v: Option<VertexId>) {
        self.last_mover = v;
    }

    /// Total cost of every edge with at least one user.
    pub fn total_cost(&self, inst: &MetricInstance) -> Rational {
        self.usage
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|((a, b), _)| inst.cost(*a, *b))
            .sum()
    }

    /// Usage counts recomputed from the paths.
    pub fn recompute_usage(&self) -> BTreeMap<Edge, u64> {
        let mut usage = BTreeMap::new();
        for (v, path) in &self.paths {
            let count = self.agent_count(*v) as u64;
            for w in path.windows(2) {
                *usage.entry(edge(w[0], w[1])).or_insert(0) += count;
            }
        }
        usage
    }

    pub fn usage_consistent(&self) -> bool {
        let fresh = self.recompute_usage();
        let stored: BTreeMap<Edge, u64> = self.usage.iter().filter(|(_, &n)| n > 0).map(|(e, n)| (*e, *n)).collect();
        fresh == stored
    }

    fn check_path(&self, v: VertexId, path: &[VertexId]) -> Result<(), RoutingError> {
        let bad = |reason: &str| RoutingError::InvalidPath {
            terminal: v,
            reason: reason.to_string(),
        };
        if v == VertexId::ROOT {
            return Err(RoutingError::Root);
        }
        if path.first() != Some(&v) {
            return Err(bad("path must start at the terminal"));
        }
        if path.last() != Some(&VertexId::ROOT) {
            return Err(bad("path must end at the root"));
        }
        let distinct: BTreeSet<_> = path.iter().collect();
        if distinct.len() != path.len() {
            return Err(bad("path is not simple"));
        }
        if let Some(u) = path.iter().find(|u| !self.revealed.contains(u)) {
            return Err(RoutingError::Unrevealed(*u));
        }
        Ok(())
    }

    fn add_usage(&mut self, path: &[VertexId], delta: i64) {
        for w in path.windows(2) {
            let e = edge(w[0], w[1]);
            let cur = self.usage.get(&e).copied().unwrap_or(0) as i64 + delta;
            debug_assert!(cur >= 0);
            if cur <= 0 {
                self.usage.remove(&e);
            } else {
                self.usage.insert(e, cur as u64);
            }
        }
    }

    /// Add `count` agents at `v` on `path`. If `v` already hosts agents the
    /// path must coincide with theirs.
    pub fn add_agents(&mut self, v: VertexId, count: u32, path: Vec<VertexId>) -> Result<(), RoutingError> {
        self.check_path(v, &path)?;
        if let Some(existing) = self.paths.get(&v) {
            if *existing != path {
                return Err(RoutingError::DivergingColocated(v));
            }
        }
        self.add_usage(&path, count as i64);
        *self.agents.entry(v).or_insert(0) += count;
        self.paths.insert(v, path);
        Ok(())
    }

    /// Replace the path of every agent at `v`.
    pub fn set_path(&mut self, v: VertexId, path: Vec<VertexId>) -> Result<(), RoutingError> {
        let count = *self.agents.get(&v).ok_or(RoutingError::NotActive(v))?;
        self.check_path(v, &path)?;
        let old = self.paths.insert(v, path.clone()).expect("active terminal has a path");
        self.add_usage(&old, -(count as i64));
        self.add_usage(&path, count as i64);
        Ok(())
    }

    pub fn remove_terminal(&mut self, v: VertexId) -> Result<u32, RoutingError> {
        let count = self.agents.remove(&v).ok_or(RoutingError::NotActive(v))?;
        let path = self.paths.remove(&v).expect("active terminal has a path");
        self.add_usage(&path, -(count as i64));
        Ok(count)
    }

    /// Every vertex lying on some routing path, plus the root.
    pub fn path_vertices(&self) -> BTreeSet<VertexId> {
        let mut s: BTreeSet<VertexId> = self.paths.values().flatten().copied().collect();
        s.insert(VertexId::ROOT);
        s
    }

    /// Tree view of the routing; fails if two paths disagree on a parent.
    pub fn tree(&self) -> Result<RoutingTree, RoutingError> {
        RoutingTree::build(self)
    }

    pub fn snapshot(&self, inst: &MetricInstance) -> StateSnapshot {
        StateSnapshot {
            revealed: self.revealed.iter().copied().collect(),
            terminals: self
                .agents
                .iter()
                .map(|(v, c)| TerminalRecord {
                    vertex: *v,
                    count: *c,
                    path: self.paths[v].clone(),
                })
                .collect(),
            usage: self.usage.iter().map(|((a, b), n)| (*a, *b, *n)).collect(),
            potential: potential(inst, self),
            total_cost: self.total_cost(inst),
            last_mover: self.last_mover,
        }
    }

    /// Rebuild from a snapshot. Usage counts are taken verbatim, not recomputed.
    pub fn from_snapshot(snap: &StateSnapshot) -> Result<Self, RoutingError> {
        let mut st = RoutingState::from_paths(
            snap.revealed.iter().copied(),
            snap.terminals.iter().map(|t| (t.vertex, t.count, t.path.clone())),
        )?;
        st.usage = snap.usage.iter().map(|(a, b, n)| (edge(*a, *b), *n)).collect();
        st.last_mover = snap.last_mover;
        Ok(st)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub vertex: VertexId,
    pub count: u32,
    pub path: Vec<VertexId>,
}

/// JSON view of a routing state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub revealed: Vec<VertexId>,
    pub terminals: Vec<TerminalRecord>,
    pub usage: Vec<(VertexId, VertexId, u64)>,
    #[serde(with = "rational::pq")]
    pub potential: Rational,
    #[serde(with = "rational::pq")]
    pub total_cost: Rational,
    pub last_mover: Option<VertexId>,
}

#[inline]
fn share(c: &Rational, n: u64) -> Rational {
    if n == 1 {
        c.clone()
    } else {
        c / Rational::from_integer(BigInt::from(n))
    }
}

/// Cost share of one agent at `terminal`: sum of `c_e / N_e` along its path.
pub fn shared_cost(inst: &MetricInstance, state: &RoutingState, terminal: VertexId) -> Result<Rational, RoutingError> {
    let path = state.path(terminal).ok_or(RoutingError::NotActive(terminal))?;
    Ok(segment_cost(inst, state, path))
}

/// Current share of one user along an arbitrary walk of used edges.
pub fn segment_cost(inst: &MetricInstance, state: &RoutingState, path: &[VertexId]) -> Rational {
    path.windows(2)
        .map(|w| share(inst.cost(w[0], w[1]), state.usage(edge(w[0], w[1])).max(1)))
        .sum()
}

/// Rosenthal potential `sum_e sum_{i<=N_e} c_e / i`.
pub fn potential(inst: &MetricInstance, state: &RoutingState) -> Rational {
    let max_n = state.usage.values().copied().max().unwrap_or(0);
    let mut h = Vec::with_capacity(max_n as usize + 1);
    let mut acc = Rational::zero();
    h.push(acc.clone());
    for i in 1..=max_n {
        acc += Rational::new(BigInt::from(1), BigInt::from(i));
        h.push(acc.clone());
    }
    state
        .usage
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|((a, b), n)| inst.cost(*a, *b) * &h[*n as usize])
        .sum()
}

/// Result of a best-response search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BestResponse {
    pub path: Vec<VertexId>,
    pub share: Rational,
    pub fresh_edges: u32,
}

/// Who is deviating: one agent already routed on `own`, or a newcomer.
struct MoverView<'a> {
    own: BTreeSet<Edge>,
    state: &'a RoutingState,
}

impl MoverView<'_> {
    fn weight(&self, inst: &MetricInstance, a: VertexId, b: VertexId) -> (Rational, u32) {
        let e = edge(a, b);
        let n = self.state.usage(e);
        let own = self.own.contains(&e);
        let c = inst.cost(a, b);
        if own {
            (share(c, n.max(1)), u32::from(n <= 1))
        } else {
            (share(c, n + 1), u32::from(n == 0))
        }
    }
}

fn seq_to(pred: &[usize], mut x: usize, source: usize) -> Vec<usize> {
    let mut out = vec![x];
    while x != source {
        x = pred[x];
        out.push(x);
    }
    out.reverse();
    out
}

/// Lexicographic `(share, fresh edges, vertex sequence)` shortest path from
/// `source` to the root over the revealed complete metric, skipping `banned`.
fn lex_search(
    inst: &MetricInstance,
    state: &RoutingState,
    view: &MoverView<'_>,
    source: VertexId,
    banned: &BTreeSet<VertexId>,
) -> Option<BestResponse> {
    let verts: Vec<VertexId> = state
        .revealed
        .iter()
        .copied()
        .filter(|v| !banned.contains(v) || *v == source)
        .collect();
    let k = verts.len();
    let src = verts.iter().position(|v| *v == source)?;
    let root = verts.iter().position(|v| *v == VertexId::ROOT)?;
    // adjacency of edges with users, by local index
    let local: BTreeMap<VertexId, usize> = verts.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (a, b) in state.usage.keys() {
        if let (Some(&i), Some(&j)) = (local.get(a), local.get(b)) {
            used[i].push(j);
            used[j].push(i);
        }
    }
    let mut dist: Vec<Option<(Rational, u32)>> = vec![None; k];
    let mut pred = vec![usize::MAX; k];
    let mut done = vec![false; k];
    dist[src] = Some((Rational::zero(), 0));
    pred[src] = src;
    loop {
        let mut pick: Option<usize> = None;
        for i in 0..k {
            if done[i] || dist[i].is_none() {
                continue;
            }
            match pick {
                None => pick = Some(i),
                Some(p) => {
                    if dist[i].as_ref().unwrap() < dist[p].as_ref().unwrap() {
                        pick = Some(i);
                    }
                }
            }
        }
        let Some(x) = pick else { break };
        done[x] = true;
        if x == root {
            break;
        }
        let (dx, fx) = dist[x].clone().unwrap();
        for y in 0..k {
            if done[y] {
                continue;
            }
            let (w, f) = if used[x].contains(&y) {
                view.weight(inst, verts[x], verts[y])
            } else {
                // nobody routes over (x, y): full cost, and it is fresh
                (inst.cost(verts[x], verts[y]).clone(), 1)
            };
            let cand = (&dx + w, fx + f);
            let better = match &dist[y] {
                None => true,
                Some(cur) => match cand.cmp(cur) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => {
                        let mut a = seq_to(&pred, x, src);
                        a.push(y);
                        let b = seq_to(&pred, y, src);
                        let a: Vec<VertexId> = a.into_iter().map(|i| verts[i]).collect();
                        let b: Vec<VertexId> = b.into_iter().map(|i| verts[i]).collect();
                        a < b
                    }
                },
            };
            if better {
                dist[y] = Some(cand);
                pred[y] = x;
            }
        }
    }
    let (share, fresh) = dist[root].clone()?;
    let path = seq_to(&pred, root, src).into_iter().map(|i| verts[i]).collect();
    Some(BestResponse {
        path,
        share,
        fresh_edges: fresh,
    })
}

fn own_edges(path: &[VertexId]) -> BTreeSet<Edge> {
    path.windows(2).map(|w| edge(w[0], w[1])).collect()
}

/// Best response of one agent at `terminal`. An active terminal deviates
/// from its current path; an inactive vertex is evaluated as a newcomer.
pub fn best_response(inst: &MetricInstance, state: &RoutingState, terminal: VertexId) -> Result<BestResponse, RoutingError> {
    let own = state.path(terminal).map(own_edges).unwrap_or_default();
    br_with(inst, state, terminal, own)
}

/// Best response of one additional agent arriving at `terminal`, whether or
/// not agents already reside there.
pub fn best_response_newcomer(
    inst: &MetricInstance,
    state: &RoutingState,
    terminal: VertexId,
) -> Result<BestResponse, RoutingError> {
    br_with(inst, state, terminal, BTreeSet::new())
}

fn br_with(
    inst: &MetricInstance,
    state: &RoutingState,
    terminal: VertexId,
    own: BTreeSet<Edge>,
) -> Result<BestResponse, RoutingError> {
    if terminal == VertexId::ROOT {
        return Err(RoutingError::Root);
    }
    if !state.is_revealed(terminal) {
        return Err(RoutingError::Unrevealed(terminal));
    }
    let view = MoverView { own, state };
    Ok(lex_search(inst, state, &view, terminal, &BTreeSet::new()).expect("complete graph reaches the root"))
}

/// Evidence that a vertex can strictly lower some agent's share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImprovingWitness {
    /// The vertex that has the move (a terminal or a Steiner vertex).
    pub vertex: VertexId,
    /// The terminal whose agent benefits.
    pub terminal: VertexId,
    /// Full replacement path for that agent.
    pub new_path: Vec<VertexId>,
    pub current: Rational,
    pub improved: Rational,
}

/// Strict improving move for a terminal, or for a non-terminal on some path.
pub fn has_improving_move(
    inst: &MetricInstance,
    state: &RoutingState,
    vertex: VertexId,
) -> Result<Option<ImprovingWitness>, RoutingError> {
    if vertex == VertexId::ROOT {
        return Ok(None);
    }
    if state.is_active(vertex) {
        let current = shared_cost(inst, state, vertex)?;
        let br = best_response(inst, state, vertex)?;
        return Ok((br.share < current).then_some(ImprovingWitness {
            vertex,
            terminal: vertex,
            new_path: br.path,
            current,
            improved: br.share,
        }));
    }
    let witness = state
        .paths
        .iter()
        .find(|(_, p)| p.contains(&vertex))
        .map(|(t, _)| *t)
        .ok_or(RoutingError::NotOnAnyPath(vertex))?;
    let path = &state.paths[&witness];
    let idx = path.iter().position(|x| *x == vertex).unwrap();
    let current = segment_cost(inst, state, &path[idx..]);
    let banned: BTreeSet<VertexId> = path[..idx].iter().copied().collect();
    let view = MoverView {
        own: own_edges(path),
        state,
    };
    let Some(br) = lex_search(inst, state, &view, vertex, &banned) else {
        return Ok(None);
    };
    if br.share < current {
        let prefix_share = segment_cost(inst, state, &path[..=idx]);
        let mut new_path = path[..idx].to_vec();
        new_path.extend_from_slice(&br.path);
        Ok(Some(ImprovingWitness {
            vertex,
            terminal: witness,
            new_path,
            current: &prefix_share + current,
            improved: prefix_share + br.share,
        }))
    } else {
        Ok(None)
    }
}

/// Parent/children view of a routing whose paths form a tree rooted at r.
#[derive(Clone, Debug)]
pub struct RoutingTree {
    parent: Vec<Option<VertexId>>,
    children: Vec<Vec<VertexId>>,
    in_tree: Vec<bool>,
    depth: Vec<u32>,
    order: Vec<VertexId>,
}

impl RoutingTree {
    fn build(state: &RoutingState) -> Result<Self, RoutingError> {
        let size = state.path_vertices().iter().chain(state.revealed.iter()).map(|v| v.index()).max().unwrap_or(0) + 1;
        let mut parent: Vec<Option<VertexId>> = vec![None; size];
        let mut in_tree = vec![false; size];
        in_tree[0] = true;
        for path in state.paths.values() {
            for w in path.windows(2) {
                let (x, p) = (w[0], w[1]);
                in_tree[x.index()] = true;
                match parent[x.index()] {
                    None => parent[x.index()] = Some(p),
                    Some(q) if q == p => {}
                    Some(q) => return Err(RoutingError::NotATree(x, q, p)),
                }
            }
        }
        let mut children: Vec<Vec<VertexId>> = vec![Vec::new(); size];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[p.index()].push(VertexId(i as u32));
            }
        }
        // BFS from the root gives depths and a top-down order
        let mut depth = vec![0u32; size];
        let mut order = vec![VertexId::ROOT];
        let mut head = 0;
        while head < order.len() {
            let x = order[head];
            head += 1;
            for c in &children[x.index()] {
                depth[c.index()] = depth[x.index()] + 1;
                order.push(*c);
            }
        }
        Ok(RoutingTree {
            parent,
            children,
            in_tree,
            depth,
            order,
        })
    }

    pub fn contains(&self, v: VertexId) -> bool {
        self.in_tree.get(v.index()).copied().unwrap_or(false)
    }

    pub fn parent(&self, v: VertexId) -> Option<VertexId> {
        self.parent.get(v.index()).copied().flatten()
    }

    pub fn children(&self, v: VertexId) -> &[VertexId] {
        self.children.get(v.index()).map(|c| c.as_slice()).unwrap_or(&[])
    }

    /// A non-root tree vertex without children.
    pub fn is_leaf(&self, v: VertexId) -> bool {
        v != VertexId::ROOT && self.contains(v) && self.children(v).is_empty()
    }

    pub fn is_non_leaf(&self, v: VertexId) -> bool {
        self.contains(v) && !self.children(v).is_empty()
    }

    pub fn depth(&self, v: VertexId) -> u32 {
        self.depth[v.index()]
    }

    /// Tree vertices, root first, in BFS order.
    pub fn vertices_top_down(&self) -> &[VertexId] {
        &self.order
    }

    /// Tree vertices in id order.
    pub fn vertices(&self) -> Vec<VertexId> {
        let mut v = self.order.clone();
        v.sort();
        v
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.len() <= 1
    }

    pub fn path_to_root(&self, mut v: VertexId) -> Vec<VertexId> {
        let mut out = vec![v];
        while let Some(p) = self.parent(v) {
            out.push(p);
            v = p;
        }
        out
    }

    pub fn lca(&self, mut a: VertexId, mut b: VertexId) -> VertexId {
        while self.depth(a) > self.depth(b) {
            a = self.parent(a).unwrap();
        }
        while self.depth(b) > self.depth(a) {
            b = self.parent(b).unwrap();
        }
        while a != b {
            a = self.parent(a).unwrap();
            b = self.parent(b).unwrap();
        }
        a
    }

    /// `v` lies in the subtree rooted at `u` (inclusive).
    pub fn in_subtree(&self, u: VertexId, v: VertexId) -> bool {
        self.depth(v) >= self.depth(u) && {
            let mut x = v;
            while self.depth(x) > self.depth(u) {
                x = self.parent(x).unwrap();
            }
            x == u
        }
    }

    pub fn subtree(&self, u: VertexId) -> Vec<VertexId> {
        let mut out = vec![u];
        let mut i = 0;
        while i < out.len() {
            let x = out[i];
            out.extend_from_slice(self.children(x));
            i += 1;
        }
        out
    }

    pub fn edges(&self) -> Vec<(VertexId, VertexId)> {
        self.order.iter().filter_map(|v| self.parent(*v).map(|p| (*v, p))).collect()
    }
}

/// Per-vertex path sums on a tree, for constant-time move evaluation up to an
/// LCA walk. `cur[x]` is the current share of one user along `p_x`;
/// `alt[x]` is the share a newcomer would pay along `p_x`.
pub struct TreeEval<'a> {
    inst: &'a MetricInstance,
    tree: RoutingTree,
    cur: Vec<Rational>,
    alt: Vec<Rational>,
}

impl<'a> TreeEval<'a> {
    pub fn new(inst: &'a MetricInstance, state: &RoutingState) -> Result<Self, RoutingError> {
        let tree = state.tree()?;
        let size = tree.parent.len();
        let mut cur = vec![Rational::zero(); size];
        let mut alt = vec![Rational::zero(); size];
        for &v in tree.order.iter().skip(1) {
            let p = tree.parent(v).unwrap();
            let c = inst.cost(v, p);
            let n = state.usage(edge(v, p));
            cur[v.index()] = &cur[p.index()] + share(c, n.max(1));
            alt[v.index()] = &alt[p.index()] + share(c, n + 1);
        }
        Ok(TreeEval { inst, tree, cur, alt })
    }

    pub fn tree(&self) -> &RoutingTree {
        &self.tree
    }

    pub fn into_tree(self) -> RoutingTree {
        self.tree
    }

    /// Current share of a user along the tree path from `v`.
    pub fn path_share(&self, v: VertexId) -> &Rational {
        &self.cur[v.index()]
    }

    /// Whether a terminal in `u`'s subtree strictly gains by replacing the
    /// part of its path above `u` with `(u, v)` followed by `v`'s tree path.
    pub fn is_improving(&self, u: VertexId, v: VertexId) -> bool {
        if u == VertexId::ROOT || u == v || !self.tree.contains(u) || !self.tree.contains(v) {
            return false;
        }
        let c_uv = self.inst.cost(u, v);
        let here = &self.cur[u.index()];
        // cheap reject: the new first edge alone already costs too much
        if c_uv >= here {
            return false;
        }
        let l = self.tree.lca(u, v);
        if l == u {
            return false;
        }
        let gain = here - &self.cur[l.index()];
        let pay = c_uv + &self.alt[v.index()] - &self.alt[l.index()];
        pay < gain
    }

    /// Closest (metric distance, then id) `v` satisfying `filter` to which
    /// `u` has an improving tree move.
    pub fn closest_improving(&self, u: VertexId, mut filter: impl FnMut(VertexId) -> bool) -> Option<VertexId> {
        let mut best: Option<VertexId> = None;
        for &v in &self.tree.order {
            if !filter(v) {
                continue;
            }
            if let Some(b) = best {
                let (cv, cb) = (self.inst.cost(u, v), self.inst.cost(u, b));
                if cv > cb || (cv == cb && v > b) {
                    continue;
                }
            }
            if self.is_improving(u, v) {
                best = Some(v);
            }
        }
        best
    }

    /// Smallest-id vertex with any improving tree move, with its closest target.
    pub fn first_improving_move(&self) -> Option<(VertexId, VertexId)> {
        let mut verts = self.tree.vertices();
        verts.retain(|v| *v != VertexId::ROOT);
        verts.into_iter().find_map(|u| self.closest_improving(u, |_| true).map(|v| (u, v)))
    }
}

fn check_move(tree: &RoutingTree, u: VertexId, v: VertexId) -> Result<(), RoutingError> {
    if u == VertexId::ROOT {
        return Err(RoutingError::Root);
    }
    for x in [u, v] {
        if !tree.contains(x) {
            return Err(RoutingError::NotInTree(x));
        }
    }
    if tree.in_subtree(u, v) {
        return Err(RoutingError::MoveIntoSubtree(u, v));
    }
    Ok(())
}

/// Exact predicate for an improving tree-follow move from `u` to `v`.
pub fn is_improving_tree_move(
    inst: &MetricInstance,
    state: &RoutingState,
    u: VertexId,
    v: VertexId,
) -> Result<bool, RoutingError> {
    let eval = TreeEval::new(inst, state)?;
    check_move(eval.tree(), u, v)?;
    Ok(eval.is_improving(u, v))
}

/// Replace `u`'s parent edge by `(u, v)`; the whole subtree of `u` follows.
pub fn tree_follow_move(
    inst: &MetricInstance,
    state: &RoutingState,
    u: VertexId,
    v: VertexId,
) -> Result<RoutingState, RoutingError> {
    let _ = inst;
    let tree = state.tree()?;
    check_move(&tree, u, v)?;
    let above = tree.path_to_root(v);
    let mut next = state.clone();
    let movers: Vec<(VertexId, Vec<VertexId>)> = state
        .paths
        .iter()
        .filter_map(|(t, p)| {
            let idx = p.iter().position(|x| *x == u)?;
            let mut np = p[..=idx].to_vec();
            np.extend_from_slice(&above);
            Some((*t, np))
        })
        .collect();
    for (t, np) in movers {
        next.set_path(t, np)?;
    }
    next.last_mover = Some(u);
    Ok(next)
}

/// Apply a tree-follow move one subtree terminal at a time, in id order, and
/// report whether every single reroute strictly lowered that terminal's share.
pub fn decomposition_improves(
    inst: &MetricInstance,
    state: &RoutingState,
    u: VertexId,
    v: VertexId,
) -> Result<bool, RoutingError> {
    let tree = state.tree()?;
    check_move(&tree, u, v)?;
    let above = tree.path_to_root(v);
    let mut cur = state.clone();
    let subtree: Vec<(VertexId, Vec<VertexId>)> = state
        .paths
        .iter()
        .filter_map(|(t, p)| {
            let idx = p.iter().position(|x| *x == u)?;
            let mut np = p[..=idx].to_vec();
            np.extend_from_slice(&above);
            Some((*t, np))
        })
        .collect();
    for (t, np) in subtree {
        let before = shared_cost(inst, &cur, t)?;
        cur.set_path(t, np)?;
        if shared_cost(inst, &cur, t)? >= before {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Remove every agent at the departing vertices. Vertices still on surviving
/// paths stay as Steiner vertices; unused edges disappear.
pub fn prune_departures(state: &RoutingState, departing: &BTreeSet<VertexId>) -> Result<RoutingState, RoutingError> {
    let mut next = state.clone();
    for v in departing {
        next.remove_terminal(*v)?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{metric_closure, WeightedEdge};
    use crate::rational::{frac, int};

    fn v(i: u32) -> VertexId {
        VertexId(i)
    }

    fn star(costs: &[i64]) -> MetricInstance {
        // root 0 with leaves 1..k at the given distances; leaf-leaf via root
        let edges: Vec<_> = costs
            .iter()
            .enumerate()
            .map(|(i, c)| WeightedEdge(v(0), v(i as u32 + 1), int(*c)))
            .collect();
        metric_closure(costs.len() + 1, &edges).unwrap()
    }

    #[test]
    fn single_terminal_share() {
        let inst = star(&[5]);
        let st = RoutingState::from_paths([v(1)], [(v(1), 1, vec![v(1), v(0)])]).unwrap();
        assert_eq!(shared_cost(&inst, &st, v(1)).unwrap(), int(5));
        assert_eq!(has_improving_move(&inst, &st, v(1)).unwrap(), None);
        assert_eq!(shared_cost(&inst, &st, v(0)), Err(RoutingError::NotActive(v(0))));
    }

    #[test]
    fn three_agents_share_one_edge() {
        let inst = star(&[6]);
        let st = RoutingState::from_paths([v(1)], [(v(1), 3, vec![v(1), v(0)])]).unwrap();
        assert_eq!(shared_cost(&inst, &st, v(1)).unwrap(), int(2));
        assert_eq!(potential(&inst, &st), int(6) * frac(11, 6));
    }

    #[test]
    fn empty_potential_is_zero() {
        let inst = star(&[1]);
        assert_eq!(potential(&inst, &RoutingState::new()), int(0));
    }

    #[test]
    fn tree_follow_moves_subtree() {
        // 0 - 1 - 2 chain plus 3 next to root
        let inst = metric_closure(
            4,
            &[
                WeightedEdge(v(0), v(1), int(4)),
                WeightedEdge(v(1), v(2), int(1)),
                WeightedEdge(v(0), v(3), int(1)),
                WeightedEdge(v(1), v(3), int(3)),
                WeightedEdge(v(2), v(3), int(3)),
            ],
        )
        .unwrap();
        let st = RoutingState::from_paths(
            (0..4).map(v),
            [
                (v(1), 1, vec![v(1), v(0)]),
                (v(2), 1, vec![v(2), v(1), v(0)]),
                (v(3), 1, vec![v(3), v(0)]),
            ],
        )
        .unwrap();
        let moved = tree_follow_move(&inst, &st, v(1), v(3)).unwrap();
        assert_eq!(moved.path(v(2)).unwrap(), &[v(2), v(1), v(3), v(0)]);
        assert_eq!(moved.path(v(1)).unwrap(), &[v(1), v(3), v(0)]);
        assert_eq!(moved.usage(edge(v(0), v(1))), 0);
        assert_eq!(moved.usage(edge(v(3), v(0))), 3);
        assert_eq!(moved.last_mover(), Some(v(1)));
        assert!(moved.usage_consistent());
        assert_eq!(
            tree_follow_move(&inst, &st, v(1), v(2)).unwrap_err(),
            RoutingError::MoveIntoSubtree(v(1), v(2))
        );
        // moving to the current parent never improves
        assert!(!is_improving_tree_move(&inst, &st, v(1), v(0)).unwrap());
        // two users now pay 4/2 on (1,0) vs 3 + 1/4
        assert!(!is_improving_tree_move(&inst, &st, v(1), v(3)).unwrap());
    }

    #[test]
    fn leaf_move_swaps_one_edge() {
        let inst = star(&[3, 3, 3]);
        let st = RoutingState::from_paths(
            (0..4).map(v),
            [(v(1), 1, vec![v(1), v(0)]), (v(2), 1, vec![v(2), v(0)])],
        )
        .unwrap();
        let moved = tree_follow_move(&inst, &st, v(1), v(2)).unwrap();
        let before: BTreeSet<_> = st.usage_map().keys().copied().collect();
        let after: BTreeSet<_> = moved.usage_map().keys().copied().collect();
        let removed: Vec<_> = before.difference(&after).copied().collect();
        let added: Vec<_> = after.difference(&before).copied().collect();
        assert_eq!(removed, vec![edge(v(0), v(1))]);
        assert_eq!(added, vec![edge(v(1), v(2))]);
    }

    #[test]
    fn departures_leave_steiner_vertices() {
        let inst = star(&[2, 2]);
        let st = RoutingState::from_paths(
            (0..3).map(v),
            [(v(1), 1, vec![v(1), v(0)]), (v(2), 1, vec![v(2), v(1), v(0)])],
        )
        .unwrap();
        let pruned = prune_departures(&st, &[v(1)].into()).unwrap();
        assert!(!pruned.is_active(v(1)));
        assert_eq!(pruned.usage(edge(v(0), v(1))), 1);
        let tree = pruned.tree().unwrap();
        assert!(tree.is_non_leaf(v(1)));
        let all = prune_departures(&st, &[v(1), v(2)].into()).unwrap();
        assert!(all.usage_map().is_empty());
        assert_eq!(all.tree().unwrap().len(), 1);
        assert_eq!(total(&inst, &all), int(0));
        assert!(prune_departures(&st, &[v(0)].into()).is_err());
    }

    fn total(inst: &MetricInstance, st: &RoutingState) -> Rational {
        st.total_cost(inst)
    }

    #[test]
    fn steiner_vertex_improving_move() {
        // 2 routes 2 -> 1 -> 0 alone; five agents at 3 share (3, 0)
        let inst = metric_closure(
            4,
            &[
                WeightedEdge(v(0), v(1), int(4)),
                WeightedEdge(v(1), v(3), int(1)),
                WeightedEdge(v(3), v(0), int(4)),
                WeightedEdge(v(1), v(2), int(1)),
            ],
        )
        .unwrap();
        let st = RoutingState::from_paths(
            (0..4).map(v),
            [(v(2), 1, vec![v(2), v(1), v(0)]), (v(3), 5, vec![v(3), v(0)])],
        )
        .unwrap();
        let w = has_improving_move(&inst, &st, v(1)).unwrap().unwrap();
        assert_eq!(w.terminal, v(2));
        assert_eq!(w.new_path, vec![v(2), v(1), v(3), v(0)]);
        assert_eq!(w.current, int(5));
        assert_eq!(w.improved, int(2) + frac(2, 3));
        assert!(has_improving_move(&inst, &st, v(2)).unwrap().is_some());
        assert_eq!(has_improving_move(&inst, &st, v(0)).unwrap(), None);
        let lone = RoutingState::from_paths((0..4).map(v), [(v(3), 1, vec![v(3), v(0)])]).unwrap();
        assert_eq!(has_improving_move(&inst, &lone, v(1)), Err(RoutingError::NotOnAnyPath(v(1))));
    }

    #[test]
    fn colocated_divergence_is_rejected() {
        let mut st = RoutingState::from_paths((0..3).map(v), [(v(1), 1, vec![v(1), v(0)])]).unwrap();
        assert_eq!(
            st.add_agents(v(1), 1, vec![v(1), v(2), v(0)]),
            Err(RoutingError::DivergingColocated(v(1)))
        );
        st.add_agents(v(1), 2, vec![v(1), v(0)]).unwrap();
        assert_eq!(st.agent_count(v(1)), 3);
        assert_eq!(st.usage(edge(v(0), v(1))), 3);
    }

    #[test]
    fn snapshot_round_trip_keeps_usage_verbatim() {
        let inst = star(&[2, 3]);
        let st = RoutingState::from_paths((0..3).map(v), [(v(1), 2, vec![v(1), v(0)])]).unwrap();
        let snap = st.snapshot(&inst);
        let json = serde_json::to_string(&snap).unwrap();
        let mut back: StateSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(RoutingState::from_snapshot(&back).unwrap(), st);
        back.usage[0].2 = 5;
        let tampered = RoutingState::from_snapshot(&back).unwrap();
        assert!(!tampered.usage_consistent());
    }
}
