//! Independent reference implementations used by the integration tests.
//! Nothing here calls the engine's search, tree or accounting code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use costshare_core::metric::{MetricInstance, VertexId};
use costshare_core::rational::{int, Rational};
use costshare_core::routing::RoutingState;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn v(i: u32) -> VertexId {
    VertexId(i)
}

fn key(a: VertexId, b: VertexId) -> (VertexId, VertexId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Edge usage counted straight from the paths.
pub fn usage_from_paths(state: &RoutingState) -> BTreeMap<(VertexId, VertexId), u64> {
    let mut n = BTreeMap::new();
    for (t, p) in state.paths() {
        for w in p.windows(2) {
            *n.entry(key(w[0], w[1])).or_insert(0) += state.agent_count(*t) as u64;
        }
    }
    n
}

/// Share of one agent at `t`, from scratch.
pub fn share_from_scratch(inst: &MetricInstance, state: &RoutingState, t: VertexId) -> Rational {
    let n = usage_from_paths(state);
    state.path(t).unwrap().windows(2).map(|w| inst.cost(w[0], w[1]) / int(n[&key(w[0], w[1])] as i64)).sum()
}

/// Exhaustive best response: every simple path from `t` to the root over the
/// revealed vertices, ranked by (share, fresh edges, vertex sequence).
pub fn brute_best_response(
    inst: &MetricInstance,
    state: &RoutingState,
    t: VertexId,
) -> (Vec<VertexId>, Rational, u32) {
    let counts = usage_from_paths(state);
    let own: BTreeSet<(VertexId, VertexId)> = state
        .path(t)
        .map(|p| p.windows(2).map(|w| key(w[0], w[1])).collect())
        .unwrap_or_default();
    let verts: Vec<VertexId> = state.revealed().iter().copied().collect();
    let mut best: Option<(Rational, u32, Vec<VertexId>)> = None;
    let mut path = vec![t];
    fn rec(
        inst: &MetricInstance,
        verts: &[VertexId],
        counts: &BTreeMap<(VertexId, VertexId), u64>,
        own: &BTreeSet<(VertexId, VertexId)>,
        path: &mut Vec<VertexId>,
        best: &mut Option<(Rational, u32, Vec<VertexId>)>,
    ) {
        let last = *path.last().unwrap();
        if last == VertexId::ROOT {
            let mut share = Rational::zero();
            let mut fresh = 0;
            for w in path.windows(2) {
                let e = key(w[0], w[1]);
                let n = counts.get(&e).copied().unwrap_or(0);
                let mine = own.contains(&e);
                let others = if mine { n - 1 } else { n };
                share += inst.cost(w[0], w[1]) / int(others as i64 + 1);
                if others == 0 {
                    fresh += 1;
                }
            }
            let cand = (share, fresh, path.clone());
            if best.as_ref().is_none_or(|b| cand < *b) {
                *best = Some(cand);
            }
            return;
        }
        for &x in verts {
            if !path.contains(&x) {
                path.push(x);
                rec(inst, verts, counts, own, path, best);
                path.pop();
            }
        }
    }
    rec(inst, &verts, &counts, &own, &mut path, &mut best);
    let (s, f, p) = best.unwrap();
    (p, s, f)
}

/// A tree-follow move judged by moving one representative terminal and
/// recomputing its share from scratch.
pub fn brute_tree_move_improves(inst: &MetricInstance, state: &RoutingState, u: VertexId, v: VertexId) -> bool {
    let (&w, pw) = state.paths().iter().find(|(_, p)| p.contains(&u)).expect("u lies on a path");
    let pv: Vec<VertexId> = if v == VertexId::ROOT {
        vec![v]
    } else {
        let (_, p) = state.paths().iter().find(|(_, p)| p.contains(&v)).expect("v lies on a path");
        p[p.iter().position(|x| *x == v).unwrap()..].to_vec()
    };
    let before = share_from_scratch(inst, state, w);
    let mut np = pw[..=pw.iter().position(|x| *x == u).unwrap()].to_vec();
    np.extend_from_slice(&pv);
    let mut moved = state.clone();
    moved.set_path(w, np).unwrap();
    share_from_scratch(inst, &moved, w) < before
}

/// Floyd-Warshall over a dense weight matrix (`None` = no edge).
pub fn floyd(n: usize, w: &[Option<Rational>]) -> Vec<Option<Rational>> {
    let mut d = w.to_vec();
    for i in 0..n {
        d[i * n + i] = Some(Rational::zero());
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (&d[i * n + k], &d[k * n + j]) {
                    let via = a + b;
                    if d[i * n + j].as_ref().is_none_or(|c| via < *c) {
                        d[i * n + j] = Some(via);
                    }
                }
            }
        }
    }
    d
}

/// Complete metric from random integer weights in `1..=max_w`, closed by Floyd-Warshall.
pub fn random_metric(rng: &mut impl Rng, n: usize, max_w: i64) -> MetricInstance {
    let mut w = vec![None; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let c = Some(int(rng.gen_range(1..=max_w)));
            w[a * n + b] = c.clone();
            w[b * n + a] = c;
        }
    }
    let d = floyd(n, &w);
    let mut costs = BTreeMap::new();
    for a in 0..n {
        for b in a + 1..n {
            costs.insert((v(a as u32), v(b as u32)), d[a * n + b].clone().unwrap());
        }
    }
    MetricInstance::from_explicit(n, &costs).unwrap()
}

/// Random terminals on random simple paths (not necessarily a tree).
pub fn random_state(rng: &mut impl Rng, n: usize) -> RoutingState {
    let mut st = RoutingState::from_paths((0..n as u32).map(v), []).unwrap();
    let k = rng.gen_range(0..n);
    let mut cand: Vec<u32> = (1..n as u32).collect();
    cand.shuffle(rng);
    for &t in cand.iter().take(k) {
        let mut others: Vec<u32> = (1..n as u32).filter(|x| *x != t).collect();
        others.shuffle(rng);
        let hops = rng.gen_range(0..=others.len().min(3));
        let mut path = vec![v(t)];
        path.extend(others[..hops].iter().map(|x| v(*x)));
        path.push(VertexId::ROOT);
        st.add_agents(v(t), rng.gen_range(1..=3), path).unwrap();
    }
    st
}

/// Random tree over `0..n`; every leaf hosts one agent, internal vertices
/// host one with probability 1/2.
pub fn random_tree_state(rng: &mut impl Rng, n: usize) -> RoutingState {
    let mut order: Vec<u32> = (1..n as u32).collect();
    order.shuffle(rng);
    let mut parent = BTreeMap::new();
    let mut placed = vec![0u32];
    for &x in &order {
        let p = *placed.choose(rng).unwrap();
        parent.insert(x, p);
        placed.push(x);
    }
    let has_child: BTreeSet<u32> = parent.values().copied().collect();
    let mut st = RoutingState::from_paths((0..n as u32).map(v), []).unwrap();
    for &x in &order {
        if !has_child.contains(&x) || rng.gen_bool(0.5) {
            let mut path = vec![v(x)];
            let mut y = x;
            while y != 0 {
                y = parent[&y];
                path.push(v(y));
            }
            st.add_agents(v(x), 1, path).unwrap();
        }
    }
    st
}

/// Minimum spanning tree by enumerating every labelled tree (Prüfer codes).
pub fn brute_mst(inst: &MetricInstance, vs: &[VertexId]) -> Rational {
    let k = vs.len();
    if k <= 1 {
        return Rational::zero();
    }
    if k == 2 {
        return inst.cost(vs[0], vs[1]).clone();
    }
    let mut best: Option<Rational> = None;
    let mut code = vec![0usize; k - 2];
    loop {
        let mut degree = vec![1usize; k];
        for &c in &code {
            degree[c] += 1;
        }
        let mut total = Rational::zero();
        for &c in &code {
            let leaf = (0..k).find(|&i| degree[i] == 1).unwrap();
            total += inst.cost(vs[leaf], vs[c]);
            degree[leaf] -= 1;
            degree[c] -= 1;
        }
        let rest: Vec<usize> = (0..k).filter(|&i| degree[i] == 1).collect();
        total += inst.cost(vs[rest[0]], vs[rest[1]]);
        if best.as_ref().is_none_or(|b| total < *b) {
            best = Some(total);
        }
        let mut i = 0;
        loop {
            if i == code.len() {
                return best.unwrap();
            }
            code[i] += 1;
            if code[i] < k {
                break;
            }
            code[i] = 0;
            i += 1;
        }
    }
}

/// Any two paths through a common vertex agree from there to the root.
pub fn downward_closed(state: &RoutingState) -> bool {
    let mut above: BTreeMap<VertexId, &[VertexId]> = BTreeMap::new();
    for p in state.paths().values() {
        for i in 0..p.len() {
            match above.get(&p[i]) {
                Some(q) if *q != &p[i..] => return false,
                _ => {
                    above.insert(p[i], &p[i..]);
                }
            }
        }
    }
    true
}
