use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use costshare_core::dynamics::{BatchOrder, EventRecord};
use costshare_core::experiment::{
    self, summary_csv, ExperimentConfig, ExperimentError, InstanceSource, Mode, RunOutcome, SnapshotFile,
};
use costshare_core::instances::EpochProfile;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "costshare", version, about = "Shapley cost-sharing broadcast game simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a generated instance, schedule and (for the PoA fixture) preset routing as JSON.
    Gen {
        #[command(flatten)]
        src: SourceArgs,
        #[arg(long, default_value = "instance")]
        out: PathBuf,
    },
    /// Run one simulation and write its reports.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-check a final-state snapshot from scratch.
    Verify { snapshot: PathBuf },
    /// Run a grid of configurations and print one CSV row per run.
    Sweep {
        /// JSON array of run configurations.
        #[arg(long, conflicts_with_all = ["m", "n", "seeds"])]
        grid: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Eqp)]
        mode: ModeArg,
        #[arg(long = "gen", value_enum, default_value_t = GenArg::Euclidean)]
        generator: GenArg,
        /// Comma-separated sizes for `gm`.
        #[arg(long, value_delimiter = ',')]
        m: Vec<u32>,
        /// Comma-separated sizes for `euclidean`, `poa`, `steiner-gap`.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = ProfileArg::Churn)]
        profile: ProfileArg,
        #[arg(long, default_value_t = 1)]
        batch: u32,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a recorded run and require the identical event log.
    Replay {
        /// Directory written by `run`.
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Eqp,
    Noneqp,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenArg {
    Gm,
    Euclidean,
    Poa,
    SteinerGap,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Churn,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchOrderArg {
    Snapshot,
    Sequential,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long = "gen", value_enum)]
    generator: Option<GenArg>,
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Shuffle the rounds of the G_m sequence with this seed.
    #[arg(long)]
    order_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Churn)]
    profile: ProfileArg,
    /// Arrivals per epoch for the online profile.
    #[arg(long, default_value_t = 1)]
    batch: u32,
    /// Instance JSON; without a generator or instance the run uses the lone root.
    #[arg(long, conflicts_with = "generator")]
    instance: Option<PathBuf>,
    #[arg(long, conflicts_with = "generator")]
    schedule: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// A full run configuration in JSON; overrides every other flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Eqp)]
    mode: ModeArg,
    #[command(flatten)]
    src: SourceArgs,
    #[arg(long, value_enum, default_value_t = BatchOrderArg::Snapshot)]
    batch_order: BatchOrderArg,
    #[arg(long)]
    move_ceiling: Option<u64>,
    /// Record a state snapshot after every phase.
    #[arg(long)]
    trace: bool,
    /// Run the full best-response verifier after every eq-p epoch.
    #[arg(long)]
    verify_epochs: bool,
}

fn profile(p: ProfileArg, batch: u32) -> EpochProfile {
    match p {
        ProfileArg::Churn => EpochProfile::churn(),
        ProfileArg::Online => EpochProfile::Online { batch },
    }
}

fn mode(m: ModeArg) -> Mode {
    match m {
        ModeArg::Eqp => Mode::Eqp,
        ModeArg::Noneqp => Mode::Noneqp,
    }
}

fn need<T>(v: Option<T>, flag: &str, generator: &str) -> Result<T, ExperimentError> {
    v.ok_or_else(|| ExperimentError::Config(format!("--gen {generator} needs --{flag}")))
}

impl SourceArgs {
    fn source(&self) -> Result<InstanceSource, ExperimentError> {
        Ok(match self.generator {
            Some(GenArg::Gm) => InstanceSource::Gm {
                m: need(self.m, "m", "gm")?,
                order_seed: self.order_seed,
            },
            Some(GenArg::Euclidean) => InstanceSource::Euclidean {
                n: need(self.n, "n", "euclidean")?,
                seed: self.seed,
                profile: profile(self.profile, self.batch),
            },
            Some(GenArg::Poa) => InstanceSource::Poa {
                n: need(self.n, "n", "poa")? as u32,
            },
            Some(GenArg::SteinerGap) => InstanceSource::SteinerGap {
                n: need(self.n, "n", "steiner-gap")? as u32,
            },
            None => InstanceSource::File {
                instance: self.instance.clone(),
                schedule: self.schedule.clone(),
            },
        })
    }
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        if let Some(p) = &self.config {
            let text = read_text(p).map_err(ExperimentError::Config)?;
            return serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())));
        }
        let mut cfg = ExperimentConfig::new(mode(self.mode), self.src.source()?);
        cfg.batch_order = match self.batch_order {
            BatchOrderArg::Snapshot => BatchOrder::Snapshot,
            BatchOrderArg::Sequential => BatchOrder::Sequential,
        };
        cfg.move_ceiling = self.move_ceiling;
        cfg.trace = self.trace;
        cfg.verify_epochs = self.verify_epochs;
        Ok(cfg)
    }
}

fn read_text(p: &PathBuf) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn io(e: anyhow::Error) -> ExperimentError {
    ExperimentError::Io(format!("{e:#}"))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

/// First line of `events.jsonl`.
#[derive(Serialize, Deserialize)]
struct LogHeader {
    config: ExperimentConfig,
}

fn events_jsonl(cfg: &ExperimentConfig, log: &[EventRecord]) -> String {
    let mut out = serde_json::to_string(&LogHeader { config: cfg.clone() }).expect("serialisable");
    out.push('\n');
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("serialisable"));
        out.push('\n');
    }
    out
}

fn write_outcome(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, "config.json", pretty(cfg))?;
    write(dir, "events.jsonl", events_jsonl(cfg, &out.log))?;
    write(dir, "final_state.json", pretty(&out.snapshot))?;
    write(dir, "verdict.json", pretty(&json!({ "config": cfg, "verdict": out.verdict })))?;
    write(dir, "summary.csv", summary_csv(std::slice::from_ref(&out.summary)))?;
    if let Some(acc) = &out.accounting {
        write(dir, "accounting.json", pretty(&json!({ "config": cfg, "accounting": acc, "stats": out.stats })))?;
        write(dir, "accounting.csv", acc.to_csv())?;
    }
    if cfg.trace {
        let mut t = String::new();
        for s in &out.trace {
            t.push_str(&serde_json::to_string(s).expect("serialisable"));
            t.push('\n');
        }
        write(dir, "trace.jsonl", t)?;
    }
    Ok(())
}

fn cmd_gen(src: &SourceArgs, out: &Path) -> Result<(), ExperimentError> {
    if src.generator.is_none() {
        return Err(ExperimentError::Config("gen needs --gen".into()));
    }
    let cfg = ExperimentConfig::new(Mode::Noneqp, src.source()?);
    let w = experiment::load_workload(&cfg, &read_text)?;
    fs::create_dir_all(out).map_err(|e| ExperimentError::Io(format!("{}: {e}", out.display())))?;
    write(out, "instance.json", pretty(w.instance.source())).map_err(io)?;
    write(out, "schedule.json", pretty(&w.schedule)).map_err(io)?;
    if let Some(st) = &w.initial {
        write(out, "initial_state.json", pretty(&st.snapshot(&w.instance))).map_err(io)?;
    }
    println!("wrote {} ({} vertices, {} events)", out.display(), w.instance.len(), w.schedule.events.len());
    Ok(())
}

fn cmd_run(args: &RunArgs, out: &Path) -> Result<(), ExperimentError> {
    let cfg = args.config()?;
    match experiment::run(&cfg, &read_text) {
        Ok(o) => {
            write_outcome(out, &cfg, &o).map_err(io)?;
            print!("{}", summary_csv(std::slice::from_ref(&o.summary)));
            Ok(())
        }
        Err(e) => {
            if e.exit_code() == 3 {
                let bundle = json!({ "config": cfg, "error": e.to_string(), "exit_code": 3 });
                fs::create_dir_all(out)
                    .and_then(|_| fs::write(out.join("diagnostic.json"), pretty(&bundle)))
                    .map_err(|io| ExperimentError::Io(format!("{}: {io}", out.display())))?;
            }
            Err(e)
        }
    }
}

fn cmd_verify(path: &PathBuf) -> Result<(), ExperimentError> {
    let text = read_text(path).map_err(ExperimentError::Config)?;
    let file: SnapshotFile =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    let report = experiment::verify_snapshot(&file)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        Err(ExperimentError::Verification(failed.join(", ")))
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep_grid(
    grid: &Option<PathBuf>,
    mode_arg: ModeArg,
    generator: GenArg,
    ms: &[u32],
    ns: &[usize],
    seeds: &[u64],
    prof: ProfileArg,
    batch: u32,
) -> Result<Vec<ExperimentConfig>, ExperimentError> {
    if let Some(p) = grid {
        let text = read_text(p).map_err(ExperimentError::Config)?;
        return serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())));
    }
    let md = mode(mode_arg);
    let configs = match generator {
        GenArg::Gm => ms
            .iter()
            .map(|&m| ExperimentConfig::new(md, InstanceSource::Gm { m, order_seed: None }))
            .collect(),
        GenArg::Euclidean => ns
            .iter()
            .flat_map(|&n| {
                seeds.iter().map(move |&seed| {
                    ExperimentConfig::new(
                        md,
                        InstanceSource::Euclidean {
                            n,
                            seed,
                            profile: profile(prof, batch),
                        },
                    )
                })
            })
            .collect(),
        GenArg::Poa => ns
            .iter()
            .map(|&n| ExperimentConfig::new(md, InstanceSource::Poa { n: n as u32 }))
            .collect(),
        GenArg::SteinerGap => ns
            .iter()
            .map(|&n| ExperimentConfig::new(md, InstanceSource::SteinerGap { n: n as u32 }))
            .collect(),
    };
    Ok(configs)
}

fn threads() -> Result<Option<usize>, ExperimentError> {
    match std::env::var("COSTSHARE_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(Some(k)),
            _ => Err(ExperimentError::Config(format!("COSTSHARE_THREADS must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn cmd_replay(dir: &Path) -> Result<(), ExperimentError> {
    let text = read_text(&dir.join("events.jsonl")).map_err(ExperimentError::Config)?;
    let mut lines = text.lines();
    let header: LogHeader = serde_json::from_str(lines.next().unwrap_or_default())
        .map_err(|e| ExperimentError::Config(format!("events.jsonl header: {e}")))?;
    let recorded: Vec<EventRecord> = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ExperimentError::Config(format!("events.jsonl line {}: {e}", i + 2))))
        .collect::<Result<_, _>>()?;
    let out = experiment::replay(&header.config, &recorded, &read_text)?;
    println!("replayed {} records identically", out.log.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.cmd {
        Cmd::Gen { src, out } => cmd_gen(&src, &out),
        Cmd::Run { run, out } => cmd_run(&run, &out),
        Cmd::Verify { snapshot } => cmd_verify(&snapshot),
        Cmd::Sweep {
            grid,
            mode,
            generator,
            m,
            n,
            seeds,
            profile,
            batch,
            out,
        } => {
            let configs = sweep_grid(&grid, mode, generator, &m, &n, &seeds, profile, batch)?;
            let rows = experiment::sweep(&configs, threads()?, &read_text);
            let csv = summary_csv(&rows);
            match out {
                Some(p) => fs::write(&p, csv).map_err(|e| ExperimentError::Io(format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Replay { dir } => cmd_replay(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
