//! Experiment configuration, single runs, sweeps, snapshot verification and
//! log replay. File handling stays in the CLI; everything here is in-memory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dual::{self, AccountingReport, DualError, DualFamily, StateClass};
use crate::dynamics::{
    run_noneqp, verify_equilibrium, BatchOrder, DynamicsError, EqpConfig, EqpSimulation, EqpStats, EventRecord,
    NoneqpOptions, Schedule,
};
use crate::instances::{
    build_poa_fixture, build_random_euclidean, build_steiner_gap_fixture, gm_cached, lexicographic_order,
    shuffled_order, EpochProfile,
};
use crate::metric::{mst_cost, InstanceFile, MetricError, MetricInstance, VertexId};
use crate::rational::{self, Rational};
use crate::routing::{shared_cost, RoutingError, RoutingState, StateSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Eqp,
    Noneqp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum InstanceSource {
    /// `G_m` with its sequence; rounds in lexicographic order unless shuffled.
    Gm {
        m: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order_seed: Option<u64>,
    },
    Euclidean {
        n: usize,
        seed: u64,
        profile: EpochProfile,
    },
    Poa {
        n: u32,
    },
    SteinerGap {
        n: u32,
    },
    /// Instance and schedule read from JSON files; a missing instance means `{r}`.
    File {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        instance: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule: Option<PathBuf>,
    },
}

impl InstanceSource {
    pub fn name(&self) -> &'static str {
        match self {
            InstanceSource::Gm { .. } => "gm",
            InstanceSource::Euclidean { .. } => "euclidean",
            InstanceSource::Poa { .. } => "poa",
            InstanceSource::SteinerGap { .. } => "steiner-gap",
            InstanceSource::File { .. } => "file",
        }
    }

    pub fn params(&self) -> String {
        match self {
            InstanceSource::Gm { m, order_seed } => match order_seed {
                Some(s) => format!("m={m};order_seed={s}"),
                None => format!("m={m}"),
            },
            InstanceSource::Euclidean { n, profile, .. } => match profile {
                EpochProfile::Online { batch } => format!("n={n};online;batch={batch}"),
                EpochProfile::Churn { arrive_pct, depart_pct } => {
                    format!("n={n};churn;arrive={arrive_pct}%;depart={depart_pct}%")
                }
            },
            InstanceSource::Poa { n } | InstanceSource::SteinerGap { n } => format!("n={n}"),
            InstanceSource::File { instance, schedule } => format!(
                "instance={};schedule={}",
                instance.as_ref().map_or("-".into(), |p| p.display().to_string()),
                schedule.as_ref().map_or("-".into(), |p| p.display().to_string())
            ),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            InstanceSource::Euclidean { seed, .. } => Some(*seed),
            InstanceSource::Gm { order_seed, .. } => *order_seed,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub source: InstanceSource,
    #[serde(default)]
    pub batch_order: BatchOrder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_ceiling: Option<u64>,
    #[serde(default)]
    pub trace: bool,
    /// Run the full best-response verifier after every eq-p epoch.
    #[serde(default)]
    pub verify_epochs: bool,
}

impl ExperimentConfig {
    pub fn new(mode: Mode, source: InstanceSource) -> Self {
        ExperimentConfig {
            mode,
            source,
            batch_order: BatchOrder::Snapshot,
            move_ceiling: None,
            trace: false,
            verify_epochs: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Io(String),
}

impl From<DualError> for ExperimentError {
    fn from(e: DualError) -> Self {
        ExperimentError::Dynamics(DynamicsError::Dual(e))
    }
}

impl From<RoutingError> for ExperimentError {
    fn from(e: RoutingError) -> Self {
        ExperimentError::Dynamics(DynamicsError::Routing(e))
    }
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for invariant or closure violations, 4 for failed verification or replay.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Dynamics(DynamicsError::ReplayMismatch(_)) => 4,
            ExperimentError::Config(_) | ExperimentError::Metric(_) | ExperimentError::Io(_) => 2,
            ExperimentError::Dynamics(d) if !d.is_invariant() => 2,
            ExperimentError::Dynamics(_) | ExperimentError::Invariant(_) => 3,
            ExperimentError::Verification(_) => 4,
        }
    }
}

/// Everything a run needs, however it was sourced.
#[derive(Clone, Debug)]
pub struct Workload {
    pub instance: MetricInstance,
    pub schedule: Schedule,
    /// Required best-response path per arrival vertex, checked during the run.
    pub expected_paths: Option<BTreeMap<VertexId, Vec<VertexId>>>,
    /// A preset routing that the run starts from instead of `{r}`.
    pub initial: Option<RoutingState>,
}

/// Build the instance and schedule a config describes. File sources are read
/// through `read`, so the core stays free of path handling policy.
pub fn load_workload(
    cfg: &ExperimentConfig,
    read: &dyn Fn(&PathBuf) -> Result<String, String>,
) -> Result<Workload, ExperimentError> {
    let w = match &cfg.source {
        InstanceSource::Gm { m, order_seed } => {
            if *m == 0 {
                return Err(ExperimentError::Config("G_m needs m >= 1".into()));
            }
            let g = gm_cached(*m);
            let order = match order_seed {
                Some(s) => shuffled_order(*m, *s),
                None => lexicographic_order(*m),
            };
            Workload {
                instance: g.instance.clone(),
                schedule: g.sigma(&order),
                expected_paths: Some(g.segments()),
                initial: None,
            }
        }
        InstanceSource::Euclidean { n, seed, profile } => {
            if *n == 0 {
                return Err(ExperimentError::Config("Euclidean instances need n >= 1".into()));
            }
            let w = build_random_euclidean(*n, *seed, *profile);
            Workload {
                instance: w.instance,
                schedule: w.schedule,
                expected_paths: None,
                initial: None,
            }
        }
        InstanceSource::Poa { n } => {
            if *n < 2 {
                return Err(ExperimentError::Config("PoA fixture needs n >= 2".into()));
            }
            if cfg.mode == Mode::Eqp {
                return Err(ExperimentError::Config(
                    "the PoA fixture places co-located agents; run it in noneqp mode".into(),
                ));
            }
            let f = build_poa_fixture(*n);
            Workload {
                instance: f.instance,
                schedule: Schedule::default(),
                expected_paths: None,
                initial: Some(f.state),
            }
        }
        InstanceSource::SteinerGap { n } => {
            if *n < 2 {
                return Err(ExperimentError::Config("Steiner-gap fixture needs n >= 2".into()));
            }
            let f = build_steiner_gap_fixture(*n);
            Workload {
                instance: f.instance,
                schedule: f.schedule,
                expected_paths: None,
                initial: None,
            }
        }
        InstanceSource::File { instance, schedule } => {
            let instance = match instance {
                Some(p) => {
                    let text = read(p).map_err(ExperimentError::Config)?;
                    let file: InstanceFile = serde_json::from_str(&text)
                        .map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?;
                    MetricInstance::from_file(&file)?
                }
                None => MetricInstance::singleton(),
            };
            let schedule = match schedule {
                Some(p) => {
                    let text = read(p).map_err(ExperimentError::Config)?;
                    serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?
                }
                None => Schedule::default(),
            };
            Workload {
                instance,
                schedule,
                expected_paths: None,
                initial: None,
            }
        }
    };
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub generator: String,
    pub params: String,
    pub seed: Option<u64>,
    pub n: usize,
    pub n_events: u64,
    pub final_cost: String,
    pub mst: String,
    pub ratio: String,
    pub moves: u64,
    pub levels: usize,
    pub wall_ms: u128,
    pub status: String,
}

pub const SUMMARY_HEADER: &str = "mode,generator,params,seed,n,N_events,final_cost,mst,ratio,moves,levels,wall_ms,status";

impl SummaryRow {
    fn failed(cfg: &ExperimentConfig, err: &ExperimentError, wall_ms: u128) -> Self {
        SummaryRow {
            mode: cfg.mode,
            generator: cfg.source.name().into(),
            params: cfg.source.params(),
            seed: cfg.source.seed(),
            n: 0,
            n_events: 0,
            final_cost: String::new(),
            mst: String::new(),
            ratio: String::new(),
            moves: 0,
            levels: 0,
            wall_ms,
            status: format!("error({}): {err}", err.exit_code()),
        }
    }

    pub fn csv_line(&self) -> String {
        let mode = match self.mode {
            Mode::Eqp => "eqp",
            Mode::Noneqp => "noneqp",
        };
        let esc = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            mode,
            self.generator,
            esc(&self.params),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.n,
            self.n_events,
            self.final_cost,
            self.mst,
            self.ratio,
            self.moves,
            self.levels,
            self.wall_ms,
            esc(&self.status)
        )
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub equilibrium: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
    pub checked_vertices: usize,
    pub checked_arrivals: u64,
}

/// Instance plus routing, self-contained for `verify`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub instance: InstanceFile,
    pub state: StateSnapshot,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: SummaryRow,
    pub log: Vec<EventRecord>,
    pub final_state: RoutingState,
    pub snapshot: SnapshotFile,
    pub accounting: Option<AccountingReport>,
    pub verdict: VerdictReport,
    pub stats: Option<EqpStats>,
    pub trace: Vec<StateSnapshot>,
}

fn ratio_string(cost: &Rational, opt: &Rational) -> String {
    use num_traits::Zero;
    if opt.is_zero() {
        if cost.is_zero() {
            "1.000000".into()
        } else {
            "inf".into()
        }
    } else {
        rational::to_decimal(&(cost / opt), 6)
    }
}

/// Run one experiment on an already loaded workload.
pub fn run_workload(cfg: &ExperimentConfig, w: &Workload) -> Result<RunOutcome, ExperimentError> {
    let start = Instant::now();
    let inst = &w.instance;
    let n_events = w.schedule.arriving_agents();
    // the optimum connects the root and every vertex that ever hosted an agent
    let mut demand = w.schedule.arrival_vertices();
    demand.insert(VertexId::ROOT);
    if let Some(init) = &w.initial {
        demand.extend(init.terminals());
    }
    let (state, log, accounting, verdict, stats, trace) = match cfg.mode {
        Mode::Eqp => {
            if w.initial.is_some() {
                return Err(ExperimentError::Config("eq-p runs start from the empty routing".into()));
            }
            let eq = EqpConfig {
                batch_order: cfg.batch_order,
                move_ceiling: cfg.move_ceiling,
                verify_epochs: cfg.verify_epochs,
                check_incremental: true,
                trace: cfg.trace,
            };
            let mut sim = EqpSimulation::new(inst, eq);
            sim.run(&w.schedule)?;
            let (state, mut family, log, stats, trace) = sim.into_parts();
            let class = dual::classify(inst, &state, &mut family)?;
            if class != StateClass::BalancedEquilibrium {
                return Err(ExperimentError::Invariant(format!("eq-p run ended in a {class} state")));
            }
            let v = verify_equilibrium(inst, &state)?;
            if let Some(wit) = &v.witness {
                return Err(ExperimentError::Invariant(format!(
                    "balanced-equilibrium state, yet {} can lower terminal {}'s share",
                    wit.vertex, wit.terminal
                )));
            }
            let opt = mst_cost(inst, &demand)?;
            let acc = dual::logn_accounting(inst, &state, &mut family, &opt)?;
            if !acc.certified_ok {
                return Err(ExperimentError::Invariant(format!(
                    "certified ratio {} exceeds 32(log2 n + 1) = {:.3}",
                    acc.certified_decimal, acc.gate
                )));
            }
            let verdict = VerdictReport {
                equilibrium: true,
                class: Some(class.to_string()),
                witness: None,
                checked_vertices: v.checked,
                checked_arrivals: 0,
            };
            (state, log, Some(acc), verdict, Some(stats), trace)
        }
        Mode::Noneqp => {
            let opts = NoneqpOptions {
                expected_paths: w.expected_paths.clone(),
                trace: cfg.trace,
                skip_verdict: false,
                initial: w.initial.clone(),
            };
            let out = run_noneqp(inst, &w.schedule, &opts)?;
            let v = out.verdict.expect("verdict requested");
            let verdict = VerdictReport {
                equilibrium: v.equilibrium,
                class: None,
                witness: v.witness.map(|wit| {
                    format!(
                        "{} lowers terminal {}'s share from {} to {} via {:?}",
                        wit.vertex,
                        wit.terminal,
                        rational::to_pq(&wit.current),
                        rational::to_pq(&wit.improved),
                        wit.new_path.iter().map(|x| x.0).collect::<Vec<_>>()
                    )
                }),
                checked_vertices: v.checked,
                checked_arrivals: out.checked_arrivals,
            };
            (out.state, out.log, None, verdict, None, out.trace)
        }
    };
    let cost = state.total_cost(inst);
    let opt = mst_cost(inst, &demand)?;
    let summary = SummaryRow {
        mode: cfg.mode,
        generator: cfg.source.name().into(),
        params: cfg.source.params(),
        seed: cfg.source.seed(),
        n: inst.len(),
        n_events,
        final_cost: rational::to_pq(&cost),
        mst: rational::to_pq(&opt),
        ratio: ratio_string(&cost, &opt),
        moves: stats.as_ref().map_or(0, |s| s.moves),
        levels: accounting.as_ref().map_or(0, |a| a.levels()),
        wall_ms: start.elapsed().as_millis(),
        status: "ok".into(),
    };
    let snapshot = SnapshotFile {
        instance: inst.source().clone(),
        state: state.snapshot(inst),
    };
    Ok(RunOutcome {
        summary,
        log,
        final_state: state,
        snapshot,
        accounting,
        verdict,
        stats,
        trace,
    })
}

pub fn run(
    cfg: &ExperimentConfig,
    read: &dyn Fn(&PathBuf) -> Result<String, String>,
) -> Result<RunOutcome, ExperimentError> {
    let w = load_workload(cfg, read)?;
    run_workload(cfg, &w)
}

/// Run every config, in parallel when enabled; failures become error rows.
pub fn sweep(
    grid: &[ExperimentConfig],
    threads: Option<usize>,
    read: &(dyn Fn(&PathBuf) -> Result<String, String> + Sync),
) -> Vec<SummaryRow> {
    crate::par::map(grid, threads, |cfg| {
        let start = Instant::now();
        match run(cfg, read) {
            Ok(out) => out.summary,
            Err(e) => SummaryRow::failed(cfg, &e, start.elapsed().as_millis()),
        }
    })
}

/// Re-run a config and require the identical event sequence.
pub fn replay(
    cfg: &ExperimentConfig,
    recorded: &[EventRecord],
    read: &dyn Fn(&PathBuf) -> Result<String, String>,
) -> Result<RunOutcome, ExperimentError> {
    let out = run(cfg, read)?;
    if let Some(i) = (0..out.log.len().max(recorded.len())).find(|&i| out.log.get(i) != recorded.get(i)) {
        return Err(DynamicsError::ReplayMismatch(i).into());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Re-check a snapshot from scratch: usage counts, conservation, tree shape,
/// potential, classification and equilibrium.
pub fn verify_snapshot(file: &SnapshotFile) -> Result<VerifyReport, ExperimentError> {
    let inst = MetricInstance::from_file(&file.instance)?;
    let state = RoutingState::from_snapshot(&file.state)?;
    let mut checks = Vec::new();
    let mut add = |name: &str, pass: bool, detail: String| {
        checks.push(Check {
            name: name.into(),
            pass,
            detail,
        })
    };
    add(
        "usage",
        state.usage_consistent(),
        "stored usage counts match the paths".into(),
    );
    let shares: Result<Rational, _> = state
        .terminals()
        .map(|t| shared_cost(&inst, &state, t).map(|s| s * rational::int(state.agent_count(t) as i64)))
        .sum();
    let shares = shares?;
    let cost = state.total_cost(&inst);
    add(
        "conservation",
        shares == cost,
        format!(
            "sum of shares {} vs used edge cost {}",
            rational::to_pq(&shares),
            rational::to_pq(&cost)
        ),
    );
    let phi = crate::routing::potential(&inst, &state);
    add(
        "potential",
        phi == file.state.potential,
        format!("recomputed {}", rational::to_pq(&phi)),
    );
    let tree = state.tree();
    add(
        "tree",
        tree.is_ok(),
        match &tree {
            Ok(t) => format!("{} vertices", t.len()),
            Err(e) => e.to_string(),
        },
    );
    if tree.is_ok() && state.usage_consistent() {
        let mut family = DualFamily::for_instance(&inst);
        let order: BTreeSet<VertexId> = state.revealed().iter().copied().collect();
        for v in order {
            family.insert(&inst, v);
        }
        let class = dual::classify(&inst, &state, &mut family);
        add(
            "classification",
            class.is_ok(),
            match &class {
                Ok(c) => c.to_string(),
                Err(e) => e.to_string(),
            },
        );
    }
    if state.usage_consistent() {
        let verdict = verify_equilibrium(&inst, &state)?;
        add(
            "equilibrium",
            verdict.equilibrium,
            match &verdict.witness {
                None => format!("{} vertices checked", verdict.checked),
                Some(w) => format!("{} can lower terminal {}'s share", w.vertex, w.terminal),
            },
        );
    }
    Ok(VerifyReport { checks })
}
