mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use costshare_core::dual::{classify, logn_accounting, DualFamily, StateClass};
use costshare_core::dynamics::*;
use costshare_core::instances::*;
use costshare_core::metric::{mst_all, mst_cost, MetricInstance, VertexId};
use costshare_core::par;
use costshare_core::rational::{int, pow2, to_f64, Rational};
use costshare_core::routing::*;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(failures: &[String], detail: String) -> Outcome {
    if failures.is_empty() {
        Outcome { pass: true, detail }
    } else {
        let shown: Vec<&str> = failures.iter().take(4).map(String::as_str).collect();
        Outcome {
            pass: false,
            detail: format!("{detail} | {} failure(s): {}", failures.len(), shown.join("; ")),
        }
    }
}

fn lower_bound_reproduction() -> Outcome {
    let mut fails = Vec::new();
    let mut rows = Vec::new();
    for m in 2..=5u32 {
        let g = build_gm(m);
        let schedule = g.sigma(&lexicographic_order(m));
        let opts = NoneqpOptions {
            expected_paths: Some(g.segments()),
            ..Default::default()
        };
        let out = match run_noneqp(&g.instance, &schedule, &opts) {
            Ok(o) => o,
            Err(e) => {
                fails.push(format!("m={m}: {e}"));
                continue;
            }
        };
        let mm = m as i64;
        let cost = out.state.total_cost(&g.instance);
        let mst = mst_all(&g.instance);
        let eq = out.verdict.as_ref().is_some_and(|v| v.equilibrium);
        if !eq {
            fails.push(format!("m={m}: final state is not an equilibrium"));
        }
        if cost != int(mm * mm * (mm + 1)) {
            fails.push(format!("m={m}: cost {cost}"));
        }
        if mst > int(3 * mm * mm) {
            fails.push(format!("m={m}: MST {mst}"));
        }
        if &cost / &mst < Rational::new((mm + 1).into(), 3.into()) {
            fails.push(format!("m={m}: ratio below (m+1)/3"));
        }
        let arrivals = (m * m * m * (m + 1)) as u64;
        if out.checked_arrivals != arrivals {
            fails.push(format!("m={m}: {} of {arrivals} arrivals checked", out.checked_arrivals));
        }
        rows.push(format!("m={m} cost={cost} mst={mst} ratio={:.3}", to_f64(&(&cost / &mst))));
    }
    outcome(&fails, rows.join(", "))
}

/// Everything observed along one eq-p churn run.
#[derive(Default)]
struct ChurnReport {
    label: String,
    error: Option<String>,
    epochs: u64,
    moves: u64,
    worst_ratio: f64,
    worst_certified_margin: f64,
    gate_failures: Vec<String>,
    intermediate: u64,
    intermediate_within: u64,
    class_mismatches: Vec<String>,
    transition_failures: Vec<String>,
    potential_failures: Vec<String>,
    single_edge_failures: Vec<String>,
    closure_failures: Vec<String>,
    ceiling_hit: bool,
}

fn class_rank(name: &str) -> Option<u8> {
    match name {
        "balanced-equilibrium" => Some(0),
        "balanced" => Some(1),
        "leaf-unbalanced" => Some(2),
        "non-leaf-unbalanced" => Some(3),
        _ => None,
    }
}

fn churn_run(n: usize, seed: u64) -> ChurnReport {
    let mut rep = ChurnReport {
        label: format!("n={n} seed={seed}"),
        ..Default::default()
    };
    let w = build_random_euclidean(n, seed, EpochProfile::churn());
    let inst = &w.instance;
    let cfg = EqpConfig {
        verify_epochs: n <= 50,
        trace: true,
        ..Default::default()
    };
    let mut sim = EqpSimulation::new(inst, cfg);
    for ev in &w.schedule.events {
        if let Err(e) = sim.run_epoch(ev) {
            rep.ceiling_hit = matches!(e, DynamicsError::MoveCeiling { .. });
            rep.error = Some(e.to_string());
            break;
        }
        let state = sim.state().clone();
        if !downward_closed(&state) {
            rep.closure_failures.push(format!("epoch {}", sim.stats().epochs));
        }
        let opt = mst_cost(inst, state.revealed()).expect("revealed vertices are in the instance");
        match logn_accounting(inst, &state, sim.family_mut(), &opt) {
            Ok(acc) => {
                rep.worst_ratio = rep.worst_ratio.max(to_f64(&acc.ratio));
                rep.worst_certified_margin = rep.worst_certified_margin.max(to_f64(&acc.certified) / acc.gate);
                if !acc.certified_ok || acc.ratio > acc.certified {
                    rep.gate_failures.push(format!("epoch {}: certified {}", sim.stats().epochs, acc.certified_decimal));
                }
            }
            Err(e) => rep.gate_failures.push(format!("epoch {}: {e}", sim.stats().epochs)),
        }
    }
    rep.epochs = sim.stats().epochs;
    rep.moves = sim.stats().moves;

    // Re-derive every logged class from the recorded states.
    let mut family: DualFamily = sim.family().clone();
    let log = sim.log();
    let trace = sim.trace();
    let mut prev_class: Option<StateClass> = None;
    let mut prev_state = RoutingState::new();
    for (rec, snap) in log.iter().zip(trace) {
        let state = RoutingState::from_snapshot(snap).expect("trace snapshot");
        let class = match classify(inst, &state, &mut family) {
            Ok(c) => c,
            Err(e) => {
                rep.class_mismatches.push(format!("seq {}: {e}", rec.seq));
                break;
            }
        };
        if rec.class_after.as_deref() != Some(class.name()) {
            rep.class_mismatches.push(format!("seq {}: logged {:?}, found {}", rec.seq, rec.class_after, class));
        }
        match &rec.event {
            Event::TreeFollow { u, v, rule } => {
                if rec.phi_after >= rec.phi_before {
                    rep.potential_failures.push(format!("seq {}", rec.seq));
                }
                let before = prev_class.as_ref().expect("a move follows an event");
                if !transition_allowed(*rule, before, &class) {
                    rep.transition_failures.push(format!("seq {} {u}->{v} {rule}: {before}->{class}", rec.seq));
                }
            }
            Event::Arrival { agents, paths } => {
                if !class_rank(class.name()).is_some_and(|r| r <= 2) {
                    rep.transition_failures.push(format!("seq {}: arrival into {class}", rec.seq));
                }
                for ((t, _), p) in agents.iter().zip(paths) {
                    let attached = p.len() == 2
                        || prev_state.paths().values().any(|q| q.ends_with(&p[1..]) && q.contains(&p[1]));
                    if !attached {
                        rep.single_edge_failures.push(format!("seq {}: {t} via {p:?}", rec.seq));
                    }
                }
            }
            Event::Departure { .. } => {
                if class.rank() > 1 {
                    rep.transition_failures.push(format!("seq {}: departure into {class}", rec.seq));
                }
            }
        }
        if class != StateClass::BalancedEquilibrium {
            rep.intermediate += 1;
            if class.rank() <= 3 {
                rep.intermediate_within += 1;
            }
        }
        prev_class = Some(class);
        prev_state = state;
    }
    if log.len() != trace.len() {
        rep.class_mismatches.push(format!("{} records but {} snapshots", log.len(), trace.len()));
    }
    rep
}

struct ChurnSuite {
    runs: Vec<ChurnReport>,
}

fn churn_suite() -> ChurnSuite {
    let grid: Vec<(usize, u64)> = [25usize, 50, 100, 200]
        .iter()
        .flat_map(|&n| (1..=5u64).map(move |s| (n, s)))
        .collect();
    ChurnSuite {
        runs: par::map(&grid, None, |&(n, s)| churn_run(n, s)),
    }
}

fn upper_bound(suite: &ChurnSuite) -> Outcome {
    let mut fails = Vec::new();
    let mut worst = 0f64;
    let mut margin = 0f64;
    let mut epochs = 0;
    for r in &suite.runs {
        if let Some(e) = &r.error {
            fails.push(format!("{}: {e}", r.label));
        }
        fails.extend(r.gate_failures.iter().map(|f| format!("{}: {f}", r.label)));
        worst = worst.max(r.worst_ratio);
        margin = margin.max(r.worst_certified_margin);
        epochs += r.epochs;
    }
    outcome(
        &fails,
        format!(
            "{} runs, {epochs} epochs; observed ratio <= {worst:.3}; certified bound <= {:.1}% of the gate",
            suite.runs.len(),
            100.0 * margin
        ),
    )
}

fn closure(suite: &ChurnSuite) -> Outcome {
    let mut fails = Vec::new();
    let (mut inter, mut within) = (0, 0);
    for r in &suite.runs {
        if let Some(e) = &r.error {
            fails.push(format!("{}: {e}", r.label));
        }
        for f in r.class_mismatches.iter().chain(&r.transition_failures) {
            fails.push(format!("{}: {f}", r.label));
        }
        inter += r.intermediate;
        within += r.intermediate_within;
    }
    if within != inter {
        fails.push(format!("{} of {inter} intermediate states outside the allowed classes", inter - within));
    }
    outcome(&fails, format!("{within}/{inter} intermediate states within non-leaf-unbalanced; every transition re-checked"))
}

fn potential_monotonicity(suite: &ChurnSuite) -> Outcome {
    let mut fails = Vec::new();
    let mut moves = 0;
    for r in &suite.runs {
        if r.ceiling_hit {
            fails.push(format!("{}: move ceiling reached", r.label));
        } else if let Some(e) = &r.error {
            fails.push(format!("{}: {e}", r.label));
        }
        fails.extend(r.potential_failures.iter().map(|f| format!("{}: potential rose at {f}", r.label)));
        moves += r.moves;
    }
    outcome(&fails, format!("{moves} moves, each strictly lowering the potential"))
}

fn oracle_equivalence() -> Outcome {
    let mut fails = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0_5eed);
    let mut compared = 0;
    for i in 0..200 {
        let n = rng.gen_range(2..=8);
        let inst = random_metric(&mut rng, n, 4);
        let state = random_state(&mut rng, n);
        for t in 1..n as u32 {
            let t = v(t);
            let got = best_response(&inst, &state, t).expect("revealed terminal");
            let (path, share, fresh) = brute_best_response(&inst, &state, t);
            compared += 1;
            if got.path != path || got.share != share || got.fresh_edges != fresh {
                fails.push(format!(
                    "instance {i} terminal {t}: engine {:?} {} {}, oracle {path:?} {share} {fresh}",
                    got.path, got.share, got.fresh_edges
                ));
            }
        }
    }
    let mut moves = 0;
    for i in 0..200 {
        let n = rng.gen_range(2..=8);
        let inst = random_metric(&mut rng, n, 4);
        let state = random_tree_state(&mut rng, n);
        let tree = state.tree().expect("random tree state");
        for a in 1..n as u32 {
            for b in 0..n as u32 {
                let (a, b) = (v(a), v(b));
                if a == b || tree.in_subtree(a, b) {
                    continue;
                }
                moves += 1;
                let got = is_improving_tree_move(&inst, &state, a, b).expect("valid move");
                if got != brute_tree_move_improves(&inst, &state, a, b) {
                    fails.push(format!("tree {i} move {a}->{b}: engine says {got}"));
                }
            }
        }
    }
    outcome(&fails, format!("{compared} best responses, {moves} tree moves on 200 + 200 instances"))
}

fn stability_quadruples(target: usize) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1a1);
    let mut found = 0;
    let mut fails = Vec::new();
    while found < target {
        let n = rng.gen_range(4..=9);
        let inst = random_metric(&mut rng, n, 6);
        let state = random_tree_state(&mut rng, n);
        let eval = TreeEval::new(&inst, &state).expect("tree state");
        let tree = eval.tree();
        let verts = tree.vertices();
        'outer: for &u in &verts {
            if u == VertexId::ROOT {
                continue;
            }
            let targets: Vec<VertexId> = verts.iter().copied().filter(|w| *w != u && !tree.in_subtree(u, *w)).collect();
            for &x in &targets {
                if Some(x) == tree.parent(u) || !eval.is_improving(u, x) {
                    continue;
                }
                let moved = tree_follow_move(&inst, &state, u, x).expect("valid move");
                let moved_eval = TreeEval::new(&inst, &moved).expect("tree state");
                for &w in &targets {
                    if w == x || !moved_eval.tree().contains(w) || eval.is_improving(u, w) {
                        continue;
                    }
                    found += 1;
                    let engine = moved_eval.is_improving(u, w);
                    let oracle = brute_tree_move_improves(&inst, &moved, u, w);
                    if engine || oracle {
                        fails.push(format!("{u}->{w} became improving after {u}->{x}"));
                    }
                    if found >= target {
                        break 'outer;
                    }
                }
            }
        }
    }
    (found, fails)
}

/// Partition invariants (first list) and the spanning-tree bound (second list).
/// Also reports any level breaking `2^(j-2) (|P| - 1) <= MST`, which the
/// separation of centers guarantees on its own.
fn check_partitions(inst: &MetricInstance, family: &mut DualFamily, lo: i64, hi: i64) -> (Vec<String>, Vec<String>) {
    let mut fails = Vec::new();
    let mut bound_fails = Vec::new();
    let inserted: Vec<VertexId> = family.inserted().to_vec();
    let mst = mst_cost(inst, &inserted.iter().copied().collect()).expect("known vertices");
    for j in lo..=hi {
        let p = family.ensure_level(inst, j).clone();
        let mut seen = BTreeSet::new();
        for c in 0..p.len() {
            for &x in p.members(c) {
                if !seen.insert(x) || p.component_of(x) != Some(c) {
                    fails.push(format!("level {j}: {x} listed twice"));
                }
                for &y in p.members(c) {
                    if *inst.cost(x, y) >= pow2(j) {
                        fails.push(format!("level {j}: {x},{y} too far apart"));
                    }
                }
            }
        }
        if seen.len() != inserted.len() || !inserted.iter().all(|x| seen.contains(x)) {
            fails.push(format!("level {j}: not a partition of the inserted vertices"));
        }
        let centers = p.centers();
        for a in 0..centers.len() {
            for b in a + 1..centers.len() {
                if *inst.cost(centers[a], centers[b]) < pow2(j - 1) {
                    fails.push(format!("level {j}: centers {} and {} too close", centers[a], centers[b]));
                }
            }
        }
        let lb = family.lower_bound(j).expect("level exists");
        if lb > mst {
            bound_fails.push(format!("level {j}: bound {lb} > MST {mst} with {} components", p.len()));
        }
        if &lb / int(2) > mst {
            fails.push(format!("level {j}: even half the bound exceeds MST {mst}"));
        }
    }
    (fails, bound_fails)
}

/// Leaves 0, 1, 2 pairwise 2 apart, hub 3 at distance 1 from each, inserted last.
fn star() -> MetricInstance {
    let mut costs = std::collections::BTreeMap::new();
    for a in 0..3u32 {
        for b in a + 1..3 {
            costs.insert((v(a), v(b)), int(2));
        }
        costs.insert((v(a), v(3)), int(1));
    }
    MetricInstance::from_explicit(4, &costs).expect("metric")
}

fn property_suite(suite: &ChurnSuite) -> Outcome {
    let mut fails = Vec::new();

    // (a) and (b) over every epoch end and arrival of the churn runs, plus the fixtures.
    let mut eq_states = 0;
    for r in &suite.runs {
        eq_states += r.epochs;
        fails.extend(r.closure_failures.iter().map(|f| format!("(a) {}: {f}", r.label)));
        fails.extend(r.single_edge_failures.iter().map(|f| format!("(b) {}: {f}", r.label)));
    }
    for m in 2..=3u32 {
        let g = gm_cached(m);
        let out = run_noneqp(&g.instance, &g.sigma(&lexicographic_order(m)), &NoneqpOptions::default());
        match out {
            Ok(o) if o.verdict.as_ref().is_some_and(|v| v.equilibrium) => {
                eq_states += 1;
                if !downward_closed(&o.state) {
                    fails.push(format!("(a) G_{m} final equilibrium is not a tree"));
                }
            }
            _ => fails.push(format!("(a) G_{m} run did not end in equilibrium")),
        }
    }

    // (c)
    let (quads, qfails) = stability_quadruples(500);
    fails.extend(qfails.into_iter().map(|f| format!("(c) {f}")));

    // (d) and (e)
    let mut instances: Vec<(String, MetricInstance)> = (1..=3u64)
        .map(|s| (format!("euclid seed {s}"), build_random_euclidean(40, s, EpochProfile::churn()).instance))
        .collect();
    instances.push(("G_3".into(), gm_cached(3).instance.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0a1);
    for i in 0..5 {
        instances.push((format!("random {i}"), random_metric(&mut rng, 12, 9)));
    }
    instances.push(("star".into(), star()));
    let mut insertions = 0;
    let mut bound_breaks: Vec<String> = Vec::new();
    for (name, inst) in &instances {
        let mut family = DualFamily::for_instance(inst);
        let (lo, hi) = costshare_core::dual::level_window(inst);
        let mut first_break = None;
        for x in inst.vertices() {
            family.insert(inst, x);
            insertions += 1;
            let (d, e) = check_partitions(inst, &mut family, lo, hi);
            fails.extend(d.into_iter().map(|f| format!("(d) {name}: {f}")));
            if first_break.is_none() {
                first_break = e.into_iter().next().map(|f| format!("after inserting {x}, {f}"));
            }
        }
        if let Some(b) = first_break {
            bound_breaks.push(format!("{name} ({b})"));
        }
    }
    if !bound_breaks.is_empty() {
        fails.push(format!(
            "(e) 2^(j-1)(|P|-1) exceeds the MST on {} of {} instances: {}",
            bound_breaks.len(),
            instances.len(),
            bound_breaks.join(", ")
        ));
    }

    outcome(
        &fails,
        format!(
            "(a,b) {eq_states} equilibrium states; (c) {quads} quadruples; (d,e) {insertions} insertions over {} instances",
            instances.len()
        ),
    )
}

fn fixture_ratios() -> Outcome {
    let mut fails = Vec::new();
    let mut rows = Vec::new();
    for n in [2u32, 5, 10] {
        let f = build_poa_fixture(n);
        let verdict = verify_equilibrium(&f.instance, &f.state).expect("fixture state");
        let opt = mst_cost(&f.instance, &[VertexId::ROOT, POA_U].into_iter().collect()).expect("fixture vertices");
        let ratio = f.state.total_cost(&f.instance) / &opt;
        if !verdict.equilibrium {
            fails.push(format!("PoA n={n}: not an equilibrium"));
        }
        if ratio != int(n as i64) {
            fails.push(format!("PoA n={n}: ratio {ratio}"));
        }
        let mut lone = RoutingState::from_paths(f.state.revealed().iter().copied(), []).expect("empty");
        lone.add_agents(POA_U, 1, vec![POA_U, POA_MID, VertexId::ROOT]).expect("path");
        if verify_equilibrium(&f.instance, &lone).expect("state").equilibrium {
            fails.push(format!("PoA n={n}: a single agent should defect"));
        }
        rows.push(format!("PoA n={n} ratio={ratio}"));
    }
    for n in [2u32, 3, 5, 10] {
        let f = build_steiner_gap_fixture(n);
        let out = match run_noneqp(&f.instance, &f.schedule, &NoneqpOptions::default()) {
            Ok(o) => o,
            Err(e) => {
                fails.push(format!("gap n={n}: {e}"));
                continue;
            }
        };
        let cost = out.state.total_cost(&f.instance);
        let steiner = mst_cost(&f.instance, &[VertexId::ROOT, f.survivor].into_iter().collect()).expect("vertices");
        let all = mst_all(&f.instance);
        if steiner.is_zero() || &cost / &steiner != int(n as i64) {
            fails.push(format!("gap n={n}: surviving ratio {cost}/{steiner}"));
        }
        if &cost / &all != int(1) {
            fails.push(format!("gap n={n}: all-vertex ratio {cost}/{all}"));
        }
        if !out.verdict.is_some_and(|v| v.equilibrium) {
            fails.push(format!("gap n={n}: final state is not an equilibrium"));
        }
        rows.push(format!("gap n={n} ratios {}/1", &cost / &steiner));
    }
    outcome(&fails, rows.join(", "))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let t = Instant::now();
    results.push(("lower-bound reproduction", lower_bound_reproduction()));
    eprintln!("  [1] {:.1?}", t.elapsed());
    let t = Instant::now();
    let suite = churn_suite();
    eprintln!("  [2-4] churn runs {:.1?}", t.elapsed());
    results.push(("eq-p certified upper bound", upper_bound(&suite)));
    results.push(("closure of intermediate states", closure(&suite)));
    results.push(("potential monotonicity and termination", potential_monotonicity(&suite)));
    let t = Instant::now();
    results.push(("oracle equivalence", oracle_equivalence()));
    eprintln!("  [5] {:.1?}", t.elapsed());
    let t = Instant::now();
    results.push(("structural property suite", property_suite(&suite)));
    eprintln!("  [6] {:.1?}", t.elapsed());
    results.push(("fixture ratios", fixture_ratios()));

    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        if !o.pass {
            failed += 1;
        }
        println!("{} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed in {:.1?}", results.len() - failed, results.len(), start.elapsed());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
