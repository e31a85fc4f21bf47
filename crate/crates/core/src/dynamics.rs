//! eq-p and non-eq-p drivers, the tree-move priority rules, event logs and
//! equilibrium verification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dual::{self, classify_charges, ChargeMap, DualError, DualFamily, StateClass};
use crate::metric::{MetricInstance, VertexId};
use crate::rational::{self, Rational};
use crate::routing::{
    best_response, best_response_newcomer, decomposition_improves, has_improving_move, potential, prune_departures,
    tree_follow_move, ImprovingWitness, RoutingError, RoutingState, RoutingTree, StateSnapshot, TreeEval,
};

/// One scheduled epoch: arrivals or departures, never both.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleEvent {
    Arrival(Vec<(VertexId, u32)>),
    Departure(Vec<VertexId>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub events: Vec<ScheduleEvent>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Schedule {
    pub fn new(events: Vec<ScheduleEvent>) -> Self {
        Schedule {
            events,
            note: String::new(),
        }
    }

    /// Number of arriving agents.
    pub fn arriving_agents(&self) -> u64 {
        self.events
            .iter()
            .map(|e| match e {
                ScheduleEvent::Arrival(a) => a.iter().map(|(_, c)| *c as u64).sum(),
                ScheduleEvent::Departure(_) => 0,
            })
            .sum()
    }

    /// Every vertex some agent arrives at.
    pub fn arrival_vertices(&self) -> BTreeSet<VertexId> {
        self.events
            .iter()
            .flat_map(|e| match e {
                ScheduleEvent::Arrival(a) => a.iter().map(|(v, _)| *v).collect(),
                ScheduleEvent::Departure(_) => Vec::new(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleTag {
    #[serde(rename = "equil")]
    Equil,
    #[serde(rename = "balanced")]
    Balanced,
    #[serde(rename = "lu-a")]
    LuA,
    #[serde(rename = "lu-b")]
    LuB,
    #[serde(rename = "lu-c")]
    LuC,
    #[serde(rename = "lu-d")]
    LuD,
    #[serde(rename = "nlu")]
    Nlu,
}

impl RuleTag {
    pub fn name(self) -> &'static str {
        match self {
            RuleTag::Equil => "equil",
            RuleTag::Balanced => "balanced",
            RuleTag::LuA => "lu-a",
            RuleTag::LuB => "lu-b",
            RuleTag::LuC => "lu-c",
            RuleTag::LuD => "lu-d",
            RuleTag::Nlu => "nlu",
        }
    }
}

impl fmt::Display for RuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    Arrival {
        agents: Vec<(VertexId, u32)>,
        paths: Vec<Vec<VertexId>>,
    },
    Departure {
        vertices: Vec<VertexId>,
    },
    TreeFollow {
        u: VertexId,
        v: VertexId,
        rule: RuleTag,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub event: Event,
    #[serde(with = "rational::pq")]
    pub phi_before: Rational,
    #[serde(with = "rational::pq")]
    pub phi_after: Rational,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_after: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error("epoch {epoch}: {rule} move {u}->{v} took {before} to {after}, outside the closure case analysis")]
    Transition {
        epoch: u64,
        rule: RuleTag,
        u: VertexId,
        v: VertexId,
        before: String,
        after: String,
    },
    #[error("epoch {epoch}: {what} left state {after}, expected {expected}")]
    EventClass {
        epoch: u64,
        what: &'static str,
        after: String,
        expected: &'static str,
    },
    #[error("claim violated: {0}")]
    Claim(String),
    #[error("epoch {epoch}: no improving tree move in a {class} state")]
    NoMove { epoch: u64, class: String },
    #[error("potential did not strictly decrease on move {u}->{v}")]
    Potential { u: VertexId, v: VertexId },
    #[error("epoch {epoch} exceeded the move ceiling of {ceiling}")]
    MoveCeiling { epoch: u64, ceiling: u64 },
    #[error("replay diverged at record {0}")]
    ReplayMismatch(usize),
}

impl DynamicsError {
    /// True for engine invariant failures, false for bad input.
    pub fn is_invariant(&self) -> bool {
        !matches!(self, DynamicsError::Schedule(_) | DynamicsError::Model(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchOrder {
    /// Every newcomer best-responds to the routing before the epoch.
    #[default]
    Snapshot,
    /// Newcomers best-respond one after another, seeing earlier arrivals.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqpConfig {
    pub batch_order: BatchOrder,
    /// `None` means `10 n^3`.
    pub move_ceiling: Option<u64>,
    /// Run the full best-response verifier at the end of every epoch.
    pub verify_epochs: bool,
    /// Compare the incrementally maintained charges with a recomputation after every move.
    pub check_incremental: bool,
    /// Keep a snapshot after every phase.
    pub trace: bool,
}

impl Default for EqpConfig {
    fn default() -> Self {
        EqpConfig {
            batch_order: BatchOrder::Snapshot,
            move_ceiling: None,
            verify_epochs: false,
            check_incremental: true,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EqpStats {
    pub epochs: u64,
    pub moves: u64,
    pub max_epoch_moves: u64,
    /// States visited strictly inside epochs (after the event and after each non-final move).
    pub intermediate_states: u64,
    pub intermediate_within_nlu: u64,
    /// `rule:before->after` counts.
    pub transitions: BTreeMap<String, u64>,
    pub arrivals: u64,
    pub single_edge_arrivals: u64,
    pub verified_epochs: u64,
    pub decomposition_checks: u64,
}

/// A selected tree-follow move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeMove {
    pub u: VertexId,
    pub v: VertexId,
    pub rule: RuleTag,
}

/// Pick the next move by the priority rules of the current class.
pub fn select_tree_move(
    eval: &TreeEval<'_>,
    charges: &ChargeMap,
    class: &StateClass,
) -> Result<Option<TreeMove>, DynamicsError> {
    let tree = eval.tree();
    let pick = |u, v, rule| Ok(Some(TreeMove { u, v, rule }));
    let no_move = |class: &StateClass| DynamicsError::NoMove {
        epoch: 0,
        class: class.to_string(),
    };
    match class {
        StateClass::BalancedEquilibrium => Ok(None),
        StateClass::Balanced => match eval.first_improving_move() {
            Some((u, v)) => pick(u, v, RuleTag::Balanced),
            None => Err(no_move(class)),
        },
        StateClass::LeafUnbalanced => {
            let verts = tree.vertices();
            let non_leaf = |w: VertexId| tree.is_non_leaf(w);
            for &u in verts.iter().filter(|u| tree.is_leaf(**u)) {
                if let Some(v) = eval.closest_improving(u, non_leaf) {
                    return pick(u, v, RuleTag::LuA);
                }
            }
            for &u in verts.iter().filter(|u| **u != VertexId::ROOT && tree.is_non_leaf(**u)) {
                if let Some(v) = eval.closest_improving(u, non_leaf) {
                    return pick(u, v, RuleTag::LuB);
                }
            }
            for (cut, set) in charges.cuts() {
                let (nl, leaves): (Vec<VertexId>, Vec<VertexId>) = set.iter().partition(|w| tree.is_non_leaf(**w));
                if let (Some(&u), Some(&v)) = (nl.first(), leaves.first()) {
                    if eval.is_improving(u, v) {
                        return pick(u, v, RuleTag::LuC);
                    }
                    return Err(DynamicsError::Claim(format!(
                        "non-leaf {u} and leaf {v} charge cut {cut} but neither move improves"
                    )));
                }
            }
            match eval.first_improving_move() {
                Some((u, v)) => pick(u, v, RuleTag::LuD),
                None => Err(no_move(class)),
            }
        }
        StateClass::NonLeafUnbalanced { cut, chargers: [a, b] } => {
            let u = if eval.is_improving(*a, *b) {
                *a
            } else if eval.is_improving(*b, *a) {
                *b
            } else {
                return Err(DynamicsError::Claim(format!(
                    "non-leaf chargers {a} and {b} of {cut} have no improving move to each other"
                )));
            };
            let v = eval.closest_improving(u, |_| true).expect("u has at least one improving target");
            pick(u, v, RuleTag::Nlu)
        }
    }
}

/// Whether `after` is a state the closure case analysis allows for `rule`.
pub fn transition_allowed(rule: RuleTag, before: &StateClass, after: &StateClass) -> bool {
    match rule {
        RuleTag::Equil => false,
        RuleTag::Balanced | RuleTag::LuB | RuleTag::LuC => true,
        RuleTag::LuA | RuleTag::LuD => after.at_most(2),
        RuleTag::Nlu => match (before, after) {
            (
                StateClass::NonLeafUnbalanced { cut: old, .. },
                StateClass::NonLeafUnbalanced { cut: new, .. },
            ) => new.level < old.level,
            _ => true,
        },
    }
}

/// Result of sweeping every vertex for an improving move.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub equilibrium: bool,
    pub witness: Option<ImprovingWitness>,
    pub checked: usize,
}

/// Check every active terminal, then every Steiner vertex on a path.
pub fn verify_equilibrium(inst: &MetricInstance, state: &RoutingState) -> Result<Verdict, RoutingError> {
    let terminals: Vec<VertexId> = state.terminals().collect();
    let steiner: Vec<VertexId> = state
        .path_vertices()
        .into_iter()
        .filter(|v| *v != VertexId::ROOT && !state.is_active(*v))
        .collect();
    let mut checked = 0;
    for v in terminals.into_iter().chain(steiner) {
        checked += 1;
        if let Some(w) = has_improving_move(inst, state, v)? {
            return Ok(Verdict {
                equilibrium: false,
                witness: Some(w),
                checked,
            });
        }
    }
    Ok(Verdict {
        equilibrium: true,
        witness: None,
        checked,
    })
}

fn check_vertex(inst: &MetricInstance, v: VertexId) -> Result<(), DynamicsError> {
    if v == VertexId::ROOT {
        return Err(DynamicsError::Schedule("the root cannot arrive or depart".into()));
    }
    if !inst.contains(v) {
        return Err(DynamicsError::Schedule(format!("vertex {v} is not in the instance")));
    }
    Ok(())
}

/// True when `path` is one edge followed by `tree`'s path from its second vertex.
fn attaches_by_single_edge(tree: &RoutingTree, path: &[VertexId]) -> bool {
    path.len() >= 2 && tree.contains(path[1]) && tree.path_to_root(path[1]) == path[1..]
}

/// The eq-p driver: every epoch is restored to a balanced equilibrium by
/// tree-follow moves chosen with [`select_tree_move`].
pub struct EqpSimulation<'a> {
    inst: &'a MetricInstance,
    cfg: EqpConfig,
    state: RoutingState,
    family: DualFamily,
    charges: ChargeMap,
    log: Vec<EventRecord>,
    stats: EqpStats,
    trace: Vec<StateSnapshot>,
    ceiling: u64,
}

impl<'a> EqpSimulation<'a> {
    pub fn new(inst: &'a MetricInstance, cfg: EqpConfig) -> Self {
        let mut family = DualFamily::for_instance(inst);
        family.insert(inst, VertexId::ROOT);
        let n = inst.len() as u64;
        let ceiling = cfg.move_ceiling.unwrap_or(10 * n * n * n).max(1);
        EqpSimulation {
            inst,
            cfg,
            state: RoutingState::new(),
            family,
            charges: ChargeMap::default(),
            log: Vec::new(),
            stats: EqpStats::default(),
            trace: Vec::new(),
            ceiling,
        }
    }

    pub fn state(&self) -> &RoutingState {
        &self.state
    }

    pub fn family(&self) -> &DualFamily {
        &self.family
    }

    pub fn family_mut(&mut self) -> &mut DualFamily {
        &mut self.family
    }

    pub fn charges(&self) -> &ChargeMap {
        &self.charges
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn stats(&self) -> &EqpStats {
        &self.stats
    }

    pub fn trace(&self) -> &[StateSnapshot] {
        &self.trace
    }

    pub fn into_parts(self) -> (RoutingState, DualFamily, Vec<EventRecord>, EqpStats, Vec<StateSnapshot>) {
        (self.state, self.family, self.log, self.stats, self.trace)
    }

    pub fn run(&mut self, schedule: &Schedule) -> Result<(), DynamicsError> {
        for ev in &schedule.events {
            self.run_epoch(ev)?;
        }
        Ok(())
    }

    fn push(&mut self, event: Event, phi_before: Rational, phi_after: Rational, before: &StateClass, after: &StateClass) {
        self.log.push(EventRecord {
            seq: self.log.len() as u64,
            epoch: self.stats.epochs,
            event,
            phi_before,
            phi_after,
            class_before: Some(before.to_string()),
            class_after: Some(after.to_string()),
        });
        if self.cfg.trace {
            self.trace.push(self.state.snapshot(self.inst));
        }
    }

    fn apply_event(&mut self, ev: &ScheduleEvent) -> Result<(Event, Vec<VertexId>), DynamicsError> {
        match ev {
            ScheduleEvent::Arrival(agents) => {
                let mut seen = BTreeSet::new();
                for &(v, count) in agents {
                    check_vertex(self.inst, v)?;
                    if count != 1 {
                        return Err(DynamicsError::Model(format!(
                            "eq-p dynamics host one agent per vertex; {count} arrive at {v}"
                        )));
                    }
                    if self.state.is_active(v) || !seen.insert(v) {
                        return Err(DynamicsError::Model(format!("{v} already hosts an agent")));
                    }
                }
                for &(v, _) in agents {
                    self.state.reveal(v);
                    self.family.insert(self.inst, v);
                }
                let base = self.state.clone();
                let base_tree = base.tree()?;
                let mut paths = Vec::with_capacity(agents.len());
                for &(v, _) in agents {
                    let (reference, tree) = match self.cfg.batch_order {
                        BatchOrder::Snapshot => (&base, base_tree.clone()),
                        BatchOrder::Sequential => (&self.state, self.state.tree()?),
                    };
                    let path = if tree.contains(v) {
                        tree.path_to_root(v)
                    } else {
                        best_response(self.inst, reference, v)?.path
                    };
                    self.stats.arrivals += 1;
                    if path.len() == 2 || attaches_by_single_edge(&tree, &path) || tree.contains(v) {
                        self.stats.single_edge_arrivals += 1;
                    }
                    paths.push(path);
                }
                for (&(v, _), path) in agents.iter().zip(&paths) {
                    self.state.add_agents(v, 1, path.clone())?;
                }
                let seeds = agents.iter().map(|(v, _)| *v).collect();
                Ok((
                    Event::Arrival {
                        agents: agents.clone(),
                        paths,
                    },
                    seeds,
                ))
            }
            ScheduleEvent::Departure(vs) => {
                let set: BTreeSet<VertexId> = vs.iter().copied().collect();
                for &v in &set {
                    check_vertex(self.inst, v)?;
                    if !self.state.is_active(v) {
                        return Err(DynamicsError::Schedule(format!("{v} departs but hosts no agent")));
                    }
                }
                self.state = prune_departures(&self.state, &set)?;
                Ok((Event::Departure { vertices: vs.clone() }, vs.clone()))
            }
        }
    }

    fn check_charges(&mut self, tree: &RoutingTree) -> Result<(), DynamicsError> {
        if self.cfg.check_incremental {
            let fresh = ChargeMap::compute(self.inst, tree, &mut self.family);
            if fresh != self.charges {
                return Err(DynamicsError::Claim("incremental charges differ from recomputation".into()));
            }
        }
        Ok(())
    }

    /// Apply one arrival or departure epoch and move back to a balanced equilibrium.
    pub fn run_epoch(&mut self, ev: &ScheduleEvent) -> Result<(), DynamicsError> {
        self.stats.epochs += 1;
        let epoch = self.stats.epochs;
        let phi0 = potential(self.inst, &self.state);
        let before_tree = self.state.tree()?;
        self.state.set_last_mover(None);
        let (event, seeds) = self.apply_event(ev)?;
        let tree = self.state.tree()?;
        let touched = dual::touched_by(&before_tree, &tree, &seeds);
        self.charges.update(self.inst, &tree, &mut self.family, touched);
        self.check_charges(&tree)?;
        let mut eval = TreeEval::new(self.inst, &self.state)?;
        let mut class = classify_charges(&self.charges, None, || eval.first_improving_move().is_none())?;
        let (what, limit, expected) = match ev {
            ScheduleEvent::Arrival(_) => ("arrival", 2, "leaf-unbalanced or tighter"),
            ScheduleEvent::Departure(_) => ("departure", 1, "balanced or tighter"),
        };
        if !class.at_most(limit) {
            return Err(DynamicsError::EventClass {
                epoch,
                what,
                after: class.to_string(),
                expected,
            });
        }
        let phi1 = potential(self.inst, &self.state);
        self.push(event, phi0, phi1.clone(), &StateClass::BalancedEquilibrium, &class);
        let mut phi = phi1;
        let mut moves = 0u64;
        while class != StateClass::BalancedEquilibrium {
            self.stats.intermediate_states += 1;
            if class.at_most(3) {
                self.stats.intermediate_within_nlu += 1;
            }
            let mv = select_tree_move(&eval, &self.charges, &class)
                .map_err(|e| match e {
                    DynamicsError::NoMove { class, .. } => DynamicsError::NoMove { epoch, class },
                    e => e,
                })?
                .expect("non-equilibrium class selects a move");
            let TreeMove { u, v, rule } = mv;
            let old_tree = eval.into_tree();
            if !decomposition_improves(self.inst, &self.state, u, v)? {
                return Err(DynamicsError::Claim(format!(
                    "move {u}->{v} ({rule}) does not decompose into improving reroutes"
                )));
            }
            self.stats.decomposition_checks += 1;
            self.state = tree_follow_move(self.inst, &self.state, u, v)?;
            let next_phi = potential(self.inst, &self.state);
            if next_phi >= phi {
                return Err(DynamicsError::Potential { u, v });
            }
            eval = TreeEval::new(self.inst, &self.state)?;
            let touched = dual::touched_by(&old_tree, eval.tree(), &[u, v]);
            self.charges.update(self.inst, eval.tree(), &mut self.family, touched);
            let new_tree = eval.tree().clone();
            self.check_charges(&new_tree)?;
            let after = classify_charges(&self.charges, Some(u), || eval.first_improving_move().is_none())?;
            if !transition_allowed(rule, &class, &after) {
                return Err(DynamicsError::Transition {
                    epoch,
                    rule,
                    u,
                    v,
                    before: class.to_string(),
                    after: after.to_string(),
                });
            }
            *self
                .stats
                .transitions
                .entry(format!("{rule}:{class}->{after}"))
                .or_insert(0) += 1;
            self.push(Event::TreeFollow { u, v, rule }, phi.clone(), next_phi.clone(), &class, &after);
            phi = next_phi;
            class = after;
            moves += 1;
            self.stats.moves += 1;
            if moves > self.ceiling {
                return Err(DynamicsError::MoveCeiling {
                    epoch,
                    ceiling: self.ceiling,
                });
            }
        }
        self.stats.max_epoch_moves = self.stats.max_epoch_moves.max(moves);
        if self.cfg.verify_epochs {
            let verdict = verify_equilibrium(self.inst, &self.state)?;
            if let Some(w) = verdict.witness {
                return Err(DynamicsError::Claim(format!(
                    "balanced-equilibrium state, yet {} can lower terminal {}'s share",
                    w.vertex, w.terminal
                )));
            }
            self.stats.verified_epochs += 1;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct NoneqpOptions {
    /// Required best-response path per arrival vertex.
    pub expected_paths: Option<BTreeMap<VertexId, Vec<VertexId>>>,
    pub trace: bool,
    /// Skip the final equilibrium sweep.
    pub skip_verdict: bool,
    /// Start from this routing instead of `{r}`.
    pub initial: Option<RoutingState>,
}

#[derive(Clone, Debug)]
pub struct NoneqpOutcome {
    pub state: RoutingState,
    pub log: Vec<EventRecord>,
    pub verdict: Option<Verdict>,
    pub checked_arrivals: u64,
    pub trace: Vec<StateSnapshot>,
}

/// Best response on arrival only; paths never change afterwards.
pub fn run_noneqp(
    inst: &MetricInstance,
    schedule: &Schedule,
    opts: &NoneqpOptions,
) -> Result<NoneqpOutcome, DynamicsError> {
    let mut state = opts.initial.clone().unwrap_or_default();
    let mut log = Vec::new();
    let mut trace = Vec::new();
    let mut checked = 0;
    let mut phi = potential(inst, &state);
    for (epoch, ev) in schedule.events.iter().enumerate() {
        let event = match ev {
            ScheduleEvent::Arrival(agents) => {
                let mut paths = Vec::with_capacity(agents.len());
                for &(v, count) in agents {
                    check_vertex(inst, v)?;
                    if count == 0 {
                        return Err(DynamicsError::Schedule(format!("zero agents arrive at {v}")));
                    }
                    state.reveal(v);
                    let br = best_response_newcomer(inst, &state, v)?;
                    if let Some(existing) = state.path(v) {
                        if existing != br.path.as_slice() {
                            return Err(DynamicsError::Model(format!(
                                "newcomer at {v} prefers {:?} over the incumbents' {:?}",
                                br.path, existing
                            )));
                        }
                    }
                    if let Some(expected) = opts.expected_paths.as_ref().and_then(|m| m.get(&v)) {
                        if *expected != br.path {
                            return Err(DynamicsError::Claim(format!(
                                "arrival at {v} chose {:?}, expected segment {:?}",
                                br.path, expected
                            )));
                        }
                        checked += 1;
                    }
                    state.add_agents(v, count, br.path.clone())?;
                    paths.push(br.path);
                }
                Event::Arrival {
                    agents: agents.clone(),
                    paths,
                }
            }
            ScheduleEvent::Departure(vs) => {
                for &v in vs {
                    check_vertex(inst, v)?;
                    if !state.is_active(v) {
                        return Err(DynamicsError::Schedule(format!("{v} departs but hosts no agent")));
                    }
                    state.remove_terminal(v)?;
                }
                Event::Departure { vertices: vs.clone() }
            }
        };
        let next = potential(inst, &state);
        log.push(EventRecord {
            seq: log.len() as u64,
            epoch: epoch as u64 + 1,
            event,
            phi_before: phi,
            phi_after: next.clone(),
            class_before: None,
            class_after: None,
        });
        phi = next;
        if opts.trace {
            trace.push(state.snapshot(inst));
        }
    }
    let verdict = if opts.skip_verdict {
        None
    } else {
        Some(verify_equilibrium(inst, &state)?)
    };
    Ok(NoneqpOutcome {
        state,
        log,
        verdict,
        checked_arrivals: checked,
        trace,
    })
}
