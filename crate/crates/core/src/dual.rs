//! Online level-j dual family, edge-to-cut charging, state classification and
//! the logarithmic cost accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::metric::{MetricInstance, VertexId};
use crate::rational::{self, ceil_log2, floor_log2, pow2, Rational};
use crate::routing::{RoutingState, RoutingTree, TreeEval};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DualError {
    #[error("cannot charge a zero-cost edge")]
    ZeroCost,
    #[error("closure violation: cuts {0:?} break every state class")]
    ClosureViolation(Vec<Cut>),
    #[error("certification failure: cut {0} charged {1} times at equilibrium")]
    Certification(Cut, usize),
    #[error(transparent)]
    Routing(#[from] crate::routing::RoutingError),
}

/// Components of diameter `< 2^j` whose centers are pairwise `>= 2^(j-1)` apart.
#[derive(Clone, Debug)]
pub struct LevelPartition {
    level: i64,
    radius: Rational,
    centers: Vec<VertexId>,
    members: Vec<Vec<VertexId>>,
    component_of: BTreeMap<VertexId, usize>,
}

impl LevelPartition {
    fn new(level: i64) -> Self {
        LevelPartition {
            level,
            radius: pow2(level - 1),
            centers: Vec::new(),
            members: Vec::new(),
            component_of: BTreeMap::new(),
        }
    }

    fn insert(&mut self, inst: &MetricInstance, v: VertexId) {
        if self.component_of.contains_key(&v) {
            return;
        }
        let joined = self.centers.iter().position(|s| *inst.cost(*s, v) < self.radius);
        let idx = match joined {
            Some(i) => i,
            None => {
                self.centers.push(v);
                self.members.push(Vec::new());
                self.centers.len() - 1
            }
        };
        self.members[idx].push(v);
        self.component_of.insert(v, idx);
    }

    pub fn level(&self) -> i64 {
        self.level
    }

    /// Number of components `|P_j|`.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[VertexId] {
        &self.centers
    }

    pub fn members(&self, component: usize) -> &[VertexId] {
        &self.members[component]
    }

    pub fn component_of(&self, v: VertexId) -> Option<usize> {
        self.component_of.get(&v).copied()
    }
}

#[derive(Clone, Debug)]
pub struct DualFamily {
    order: Vec<VertexId>,
    levels: BTreeMap<i64, LevelPartition>,
}

impl DualFamily {
    /// Family maintaining levels `lo..=hi`.
    pub fn with_window(lo: i64, hi: i64) -> Self {
        DualFamily {
            order: Vec::new(),
            levels: (lo..=hi).map(|j| (j, LevelPartition::new(j))).collect(),
        }
    }

    /// Window spanning every pairwise distance of the instance, with slack.
    pub fn for_instance(inst: &MetricInstance) -> Self {
        let (lo, hi) = level_window(inst);
        Self::with_window(lo, hi)
    }

    /// Add a newly revealed vertex to every maintained level.
    pub fn insert(&mut self, inst: &MetricInstance, v: VertexId) {
        if self.order.contains(&v) {
            return;
        }
        self.order.push(v);
        for part in self.levels.values_mut() {
            part.insert(inst, v);
        }
    }

    /// Level `j`, built by replaying the insertion order if not yet maintained.
    pub fn ensure_level(&mut self, inst: &MetricInstance, j: i64) -> &LevelPartition {
        let order = &self.order;
        self.levels.entry(j).or_insert_with(|| {
            let mut p = LevelPartition::new(j);
            for v in order {
                p.insert(inst, *v);
            }
            p
        })
    }

    pub fn level(&self, j: i64) -> Option<&LevelPartition> {
        self.levels.get(&j)
    }

    pub fn levels(&self) -> impl Iterator<Item = &LevelPartition> {
        self.levels.values()
    }

    pub fn inserted(&self) -> &[VertexId] {
        &self.order
    }

    /// `2^(j-1) * (|P_j| - 1)`, a lower bound on any spanning tree.
    pub fn lower_bound(&self, j: i64) -> Option<Rational> {
        self.levels.get(&j).map(|p| lower_bound_of(j, p.len()))
    }
}

fn lower_bound_of(j: i64, components: usize) -> Rational {
    if components == 0 {
        return Rational::zero();
    }
    pow2(j - 1) * rational::int(components as i64 - 1)
}

/// `floor(log2 min) - 4 ..= ceil(log2 max) + 1` over positive pairwise costs.
pub fn level_window(inst: &MetricInstance) -> (i64, i64) {
    let mut min: Option<&Rational> = None;
    let mut max: Option<&Rational> = None;
    let n = inst.len() as u32;
    for a in 0..n {
        for b in a + 1..n {
            let c = inst.cost(VertexId(a), VertexId(b));
            if c.is_zero() {
                continue;
            }
            if min.is_none_or(|m| c < m) {
                min = Some(c);
            }
            if max.is_none_or(|m| c > m) {
                max = Some(c);
            }
        }
    }
    match (min, max) {
        (Some(lo), Some(hi)) => (floor_log2(lo) - 4, ceil_log2(hi) + 1),
        _ => (0, 0),
    }
}

/// The unique `j` with `2^(j+2) <= c < 2^(j+3)`.
pub fn charge_level(cost: &Rational) -> Result<i64, DualError> {
    if cost.is_zero() {
        return Err(DualError::ZeroCost);
    }
    Ok(floor_log2(cost) - 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cut {
    pub level: i64,
    pub component: usize,
}

impl fmt::Display for Cut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(level {}, component {})", self.level, self.component)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charge {
    pub cut: Cut,
    pub cost: Rational,
    pub leaf: bool,
}

/// Which cut each non-root tree vertex charges its parent edge to.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChargeMap {
    by_vertex: BTreeMap<VertexId, Charge>,
    by_cut: BTreeMap<Cut, BTreeSet<VertexId>>,
}

impl ChargeMap {
    pub fn compute(inst: &MetricInstance, tree: &RoutingTree, family: &mut DualFamily) -> Self {
        let mut map = ChargeMap::default();
        for &v in tree.vertices_top_down() {
            map.refresh(inst, tree, family, v);
        }
        map
    }

    /// Re-derive the charges of `touched` vertices only.
    pub fn update(
        &mut self,
        inst: &MetricInstance,
        tree: &RoutingTree,
        family: &mut DualFamily,
        touched: impl IntoIterator<Item = VertexId>,
    ) {
        for v in touched {
            self.refresh(inst, tree, family, v);
        }
    }

    fn refresh(&mut self, inst: &MetricInstance, tree: &RoutingTree, family: &mut DualFamily, v: VertexId) {
        if let Some(old) = self.by_vertex.remove(&v) {
            if let Some(set) = self.by_cut.get_mut(&old.cut) {
                set.remove(&v);
                if set.is_empty() {
                    self.by_cut.remove(&old.cut);
                }
            }
        }
        let Some(p) = tree.parent(v) else { return };
        let cost = inst.cost(v, p);
        let Ok(level) = charge_level(cost) else { return };
        let component = family
            .ensure_level(inst, level)
            .component_of(v)
            .expect("tree vertices are revealed and inserted");
        let cut = Cut { level, component };
        self.by_cut.entry(cut).or_default().insert(v);
        self.by_vertex.insert(
            v,
            Charge {
                cut,
                cost: cost.clone(),
                leaf: tree.is_leaf(v),
            },
        );
    }

    pub fn charge(&self, v: VertexId) -> Option<&Charge> {
        self.by_vertex.get(&v)
    }

    pub fn chargers(&self, cut: &Cut) -> impl Iterator<Item = VertexId> + '_ {
        self.by_cut.get(cut).into_iter().flatten().copied()
    }

    pub fn cuts(&self) -> impl Iterator<Item = (&Cut, &BTreeSet<VertexId>)> {
        self.by_cut.iter()
    }

    pub fn charges(&self) -> impl Iterator<Item = (&VertexId, &Charge)> {
        self.by_vertex.iter()
    }

    pub fn len(&self) -> usize {
        self.by_vertex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_vertex.is_empty()
    }

    fn non_leaf_chargers(&self, cut: &Cut) -> Vec<VertexId> {
        self.chargers(cut).filter(|v| !self.by_vertex[v].leaf).collect()
    }
}

/// Vertices whose charge may change when `before` becomes `after`: anything
/// on either side's path from the given seeds to the root.
pub fn touched_by(before: &RoutingTree, after: &RoutingTree, seeds: &[VertexId]) -> BTreeSet<VertexId> {
    let mut out = BTreeSet::new();
    for &s in seeds {
        for t in [before, after] {
            if t.contains(s) {
                out.extend(t.path_to_root(s));
            } else {
                out.insert(s);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateClass {
    BalancedEquilibrium,
    Balanced,
    LeafUnbalanced,
    NonLeafUnbalanced { cut: Cut, chargers: [VertexId; 2] },
}

impl StateClass {
    /// 0 for the tightest class, 3 for the loosest.
    pub fn rank(&self) -> u8 {
        match self {
            StateClass::BalancedEquilibrium => 0,
            StateClass::Balanced => 1,
            StateClass::LeafUnbalanced => 2,
            StateClass::NonLeafUnbalanced { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StateClass::BalancedEquilibrium => "balanced-equilibrium",
            StateClass::Balanced => "balanced",
            StateClass::LeafUnbalanced => "leaf-unbalanced",
            StateClass::NonLeafUnbalanced { .. } => "non-leaf-unbalanced",
        }
    }

    pub fn at_most(&self, rank: u8) -> bool {
        self.rank() <= rank
    }
}

impl fmt::Display for StateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tightest class given the charges; `no_moves` is only consulted for
/// balanced states.
pub fn classify_charges(
    charges: &ChargeMap,
    last_mover: Option<VertexId>,
    no_moves: impl FnOnce() -> bool,
) -> Result<StateClass, DualError> {
    if charges.by_cut.values().all(|s| s.len() <= 1) {
        return Ok(if no_moves() {
            StateClass::BalancedEquilibrium
        } else {
            StateClass::Balanced
        });
    }
    let heavy: Vec<(Cut, Vec<VertexId>)> = charges
        .by_cut
        .keys()
        .map(|c| (*c, charges.non_leaf_chargers(c)))
        .filter(|(_, nl)| nl.len() >= 2)
        .collect();
    if heavy.is_empty() {
        return Ok(StateClass::LeafUnbalanced);
    }
    if let [(cut, nl)] = heavy.as_slice() {
        if nl.len() == 2 && last_mover.is_some_and(|m| nl.contains(&m)) {
            return Ok(StateClass::NonLeafUnbalanced {
                cut: *cut,
                chargers: [nl[0], nl[1]],
            });
        }
    }
    Err(DualError::ClosureViolation(heavy.into_iter().map(|(c, _)| c).collect()))
}

/// Classify a routing from scratch.
pub fn classify(inst: &MetricInstance, state: &RoutingState, family: &mut DualFamily) -> Result<StateClass, DualError> {
    let eval = TreeEval::new(inst, state)?;
    let charges = ChargeMap::compute(inst, eval.tree(), family);
    classify_charges(&charges, state.last_mover(), || eval.first_improving_move().is_none())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: i64,
    pub components: usize,
    pub charged_cuts: usize,
    #[serde(with = "rational::pq")]
    pub charged_cost: Rational,
    /// `2^(j+3) |P_j|`.
    #[serde(with = "rational::pq")]
    pub bound: Rational,
    /// `2^(j-1) (|P_j| - 1)`.
    #[serde(with = "rational::pq")]
    pub lower_bound: Rational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub n: usize,
    #[serde(with = "rational::pq")]
    pub max_edge: Rational,
    #[serde(with = "rational::pq")]
    pub ignored_cost: Rational,
    pub rows: Vec<LevelRow>,
    #[serde(with = "rational::pq")]
    pub total_cost: Rational,
    #[serde(with = "rational::pq")]
    pub opt: Rational,
    #[serde(with = "rational::pq")]
    pub ratio: Rational,
    pub ratio_decimal: String,
    /// `(ignored + sum_j 2^(j+3) * charged cuts at j) / opt`, an upper bound on `ratio`.
    #[serde(with = "rational::pq")]
    pub certified: Rational,
    pub certified_decimal: String,
    /// `32 (log2 n + 1)`.
    pub gate: f64,
    pub certified_ok: bool,
}

impl AccountingReport {
    pub fn levels(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,components,charged_cuts,charged_cost,bound,lower_bound\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.level,
                r.components,
                r.charged_cuts,
                rational::to_pq(&r.charged_cost),
                rational::to_pq(&r.bound),
                rational::to_pq(&r.lower_bound)
            ));
        }
        out
    }
}

fn ratio_of(total: &Rational, opt: &Rational) -> Rational {
    if opt.is_zero() {
        if total.is_zero() {
            Rational::one()
        } else {
            panic!("positive cost against a zero optimum")
        }
    } else {
        total / opt
    }
}

/// Charge every tree edge longer than `D/n` to its cut and bound the total
/// against `opt`. Expects a balanced routing: every cut charged at most once.
pub fn logn_accounting(
    inst: &MetricInstance,
    state: &RoutingState,
    family: &mut DualFamily,
    opt: &Rational,
) -> Result<AccountingReport, DualError> {
    let tree = state.tree()?;
    let charges = ChargeMap::compute(inst, &tree, family);
    if let Some((cut, set)) = charges.cuts().find(|(_, s)| s.len() > 1) {
        return Err(DualError::Certification(*cut, set.len()));
    }
    let n = state.revealed().len();
    let edge_costs: Vec<&Rational> = tree.edges().into_iter().map(|(a, b)| inst.cost(a, b)).collect();
    let max_edge = edge_costs.iter().copied().max().cloned().unwrap_or_else(Rational::zero);
    let threshold = &max_edge / rational::int(n.max(1) as i64);
    let ignored_cost: Rational = edge_costs.iter().copied().filter(|c| **c <= threshold).sum();
    let mut per_level: BTreeMap<i64, (usize, Rational)> = BTreeMap::new();
    for (_, ch) in charges.charges() {
        if ch.cost <= threshold {
            continue;
        }
        let e = per_level.entry(ch.cut.level).or_insert((0, Rational::zero()));
        e.0 += 1;
        e.1 += &ch.cost;
    }
    let mut rows = Vec::new();
    let mut certified_mass = ignored_cost.clone();
    for (j, (cuts, cost)) in per_level {
        let components = family.ensure_level(inst, j).len();
        certified_mass += pow2(j + 3) * rational::int(cuts as i64);
        rows.push(LevelRow {
            level: j,
            components,
            charged_cuts: cuts,
            charged_cost: cost,
            bound: pow2(j + 3) * rational::int(components as i64),
            lower_bound: lower_bound_of(j, components),
        });
    }
    let total_cost = state.total_cost(inst);
    let ratio = ratio_of(&total_cost, opt);
    let certified = if opt.is_zero() {
        Rational::one()
    } else {
        &certified_mass / opt
    };
    let gate = 32.0 * ((n.max(1) as f64).log2() + 1.0);
    Ok(AccountingReport {
        n,
        max_edge,
        ignored_cost,
        rows,
        ratio_decimal: rational::to_decimal(&ratio, 6),
        certified_decimal: rational::to_decimal(&certified, 6),
        certified_ok: rational::to_f64(&certified) <= gate,
        total_cost,
        opt: opt.clone(),
        ratio,
        certified,
        gate,
    })
}
