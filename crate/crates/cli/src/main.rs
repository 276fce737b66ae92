//! Command-line front end: generate and validate topologies, run
//! simulations, sweep parameter grids, dump BSA forwarding tables, and
//! replay saved event logs.
//!
//! Exit codes: 0 success, 1 validation error, 2 simulation assertion
//! failure, 64 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use bipath::analytics::{summarize, sweep, sweep_csv, RunSummary};
use bipath::discovery::{compute_bsa_table, Lsdb};
use bipath::eventlog::EventLog;
use bipath::simnet::{run, DelayModel, SimConfig, SimError, TopologySpec};
use bipath::topology::{
    generate_qfly, load_topology, serialize_topology, NodeId, NodeKind, QFlyParams, Topology,
};

/// Environment variable naming the directory relative output paths are
/// written under.
const OUT_DIR_ENV: &str = "BIPATH_OUT_DIR";

#[derive(Parser)]
#[command(name = "bipath", version, about = "Distributed BSA switching simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Q-Fly topology file.
    GenTopo(GenTopoArgs),
    /// Validate a topology file.
    Validate { file: PathBuf },
    /// Run one simulation.
    Run(RunArgs),
    /// Run a (topology x lambda x seed) grid and emit CSV.
    Sweep(SweepArgs),
    /// Print BSA forwarding tables for a topology.
    Tables(TablesArgs),
    /// Recompute the summary of a saved event log.
    Replay {
        /// JSON-lines event log written by `run --log`.
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Args)]
struct TopoArgs {
    /// Topology source: `sphd20`, `dphd42`, `qfly`, or `file`.
    #[arg(long, default_value = "sphd20")]
    topo: String,
    /// Group count (qfly).
    #[arg(long)]
    g: Option<u32>,
    /// End nodes per group in a fully populated system (qfly).
    #[arg(long)]
    p: Option<u32>,
    /// BSAs per group (qfly).
    #[arg(long)]
    b: Option<u32>,
    /// Declared group switch radix (qfly, informational).
    #[arg(long)]
    k: Option<u32>,
    /// Total end nodes when not fully populated (qfly).
    #[arg(long)]
    n: Option<u32>,
    /// Topology file (with `--topo file`).
    #[arg(long)]
    file: Option<PathBuf>,
}

impl TopoArgs {
    fn resolve(&self) -> Result<TopologySpec> {
        match self.topo.as_str() {
            "sphd20" => Ok(TopologySpec::QFly(
                QFlyParams::new(5, 5, 2, 6).with_end_nodes(20),
            )),
            "dphd42" => Ok(TopologySpec::QFly(
                QFlyParams::new(7, 6, 3, 12).with_end_nodes(42),
            )),
            "qfly" => {
                let (Some(g), Some(p), Some(b)) = (self.g, self.p, self.b) else {
                    return Err(anyhow!("--topo qfly needs --g, --p and --b"));
                };
                let mut params = QFlyParams::new(g, p, b, self.k.unwrap_or(2 * p));
                if let Some(n) = self.n {
                    params = params.with_end_nodes(n);
                }
                Ok(TopologySpec::QFly(params))
            }
            "file" => {
                let file = self
                    .file
                    .as_ref()
                    .ok_or_else(|| anyhow!("--topo file needs --file <path>"))?;
                let text = fs::read_to_string(file)
                    .with_context(|| format!("reading {}", file.display()))?;
                Ok(TopologySpec::Explicit(load_topology(&text)?))
            }
            other => Err(anyhow!(
                "unknown topology `{other}` (sphd20|dphd42|qfly|file)"
            )),
        }
    }

    fn materialize(&self) -> Result<Topology> {
        Ok(match self.resolve()? {
            TopologySpec::QFly(params) => generate_qfly(&params)?,
            TopologySpec::Explicit(t) => t,
        })
    }
}

#[derive(Args)]
struct GenTopoArgs {
    #[arg(long)]
    g: u32,
    #[arg(long)]
    p: u32,
    #[arg(long)]
    b: u32,
    #[arg(long)]
    k: Option<u32>,
    /// Total end nodes when not fully populated.
    #[arg(long)]
    n: Option<u32>,
    /// Output topology file.
    #[arg(long)]
    file: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Mean request inter-arrival interval (time steps).
    #[arg(long, default_value_t = 100)]
    lambda: u64,
    /// Traffic injection horizon (time steps).
    #[arg(long, default_value_t = 10_000)]
    horizon: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Post-horizon drain budget (time steps).
    #[arg(long, default_value_t = 5_000)]
    grace: u64,
    /// Circuit hold after completion (time steps).
    #[arg(long, default_value_t = 10)]
    hold: u64,
    /// Fixed delay before a queued request re-enters the protocol.
    #[arg(long, default_value_t = 100)]
    dequeue_delay: u64,
    /// Queued requests older than this are dropped.
    #[arg(long, default_value_t = 10_000)]
    timeout: u64,
    /// Delay between proposing a start time and circuit usability.
    #[arg(long, default_value_t = 0)]
    reconfig_delay: u64,
    /// Time steps per classical hop.
    #[arg(long, default_value_t = 1)]
    hop_latency: u64,
    /// Charge classical messages per hop instead of per message.
    #[arg(long)]
    per_hop_delay: bool,
}

impl SimArgs {
    fn config(&self, topology: TopologySpec) -> SimConfig {
        let mut config = SimConfig::new(topology);
        config.lambda = self.lambda;
        config.horizon = self.horizon;
        config.seed = self.seed;
        config.grace = self.grace;
        config.hop_latency = self.hop_latency;
        config.delay_model = if self.per_hop_delay {
            DelayModel::PerHop
        } else {
            DelayModel::PerMessage
        };
        config.protocol.session_hold = self.hold;
        config.protocol.dequeue_delay = self.dequeue_delay;
        config.protocol.request_timeout = self.timeout;
        config.protocol.reconfiguration_delay = self.reconfig_delay;
        config
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    topo: TopoArgs,
    #[command(flatten)]
    sim: SimArgs,
    /// Load the whole simulation config from a JSON file instead of
    /// flags.
    #[arg(long, conflicts_with_all = ["topo", "file"])]
    config: Option<PathBuf>,
    /// Write the machine-readable run report here (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the event log here (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated inter-arrival intervals.
    #[arg(long, default_value = "75,100,150")]
    lambdas: String,
    /// Seeds 0..N per (topology, lambda).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated topology presets.
    #[arg(long, default_value = "sphd20,dphd42")]
    topos: String,
    #[command(flatten)]
    sim: SimArgs,
    /// Write the sweep table here (CSV).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TablesArgs {
    #[command(flatten)]
    topo: TopoArgs,
    /// Restrict the dump to one node.
    #[arg(long)]
    node: Option<u32>,
}

#[derive(Serialize)]
struct RunReport {
    topology: String,
    nodes: usize,
    channels: usize,
    lambda: u64,
    horizon: u64,
    seed: u64,
    session_hold: u64,
    discovery_lsa_sends: u64,
    summary: RunSummary,
}

/// Relative output paths land under `BIPATH_OUT_DIR` when it is set.
fn out_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    let path = out_path(path);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_summary(summary: &RunSummary) {
    let pct = |x: f64| format!("{:.1}%", 100.0 * x);
    println!(
        "requests {}   completed {}   expired {}   unresolved {}",
        summary.requests, summary.completed, summary.expired, summary.unresolved
    );
    println!(
        "success {}   immediate completion {}",
        pct(summary.success_rate),
        pct(summary.immediate_completion_pct)
    );
    match (
        summary.mean_completion_uncontested,
        summary.max_completion_uncontested,
    ) {
        (Some(mean), Some(max)) => {
            println!("completion (uncontested) mean {mean:.1} max {max}");
        }
        _ => println!("completion (uncontested) n/a"),
    }
    match (
        summary.mean_completion_queued,
        summary.max_completion_queued,
    ) {
        (Some(mean), Some(max)) => {
            println!("completion (incl. queue) mean {mean:.1} max {max}");
        }
        _ => println!("completion (incl. queue) n/a"),
    }
    println!("max retries {}", summary.max_retries);
    if let Some((bsa, count)) = summary
        .sessions_per_bsa
        .iter()
        .max_by_key(|(bsa, count)| (**count, std::cmp::Reverse(**bsa)))
    {
        println!("busiest bsa {bsa} served {count} session(s)");
    }
}

fn cmd_gen_topo(args: &GenTopoArgs) -> Result<()> {
    let mut params = QFlyParams::new(args.g, args.p, args.b, args.k.unwrap_or(2 * args.p));
    if let Some(n) = args.n {
        params = params.with_end_nodes(n);
    }
    let topo = generate_qfly(&params)?;
    for warning in params.radix_warnings() {
        eprintln!("warning: {warning}");
    }
    write_out(&args.file, &serialize_topology(&topo))?;
    println!(
        "wrote {} ({} nodes, {} channels)",
        out_path(&args.file).display(),
        topo.node_count(),
        topo.channels().len()
    );
    Ok(())
}

fn cmd_validate(file: &Path) -> Result<()> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let topo = load_topology(&text)?;
    for warning in topo.warnings() {
        eprintln!("warning: {warning}");
    }
    let count = |kind: NodeKind| topo.nodes_of_kind(kind).len();
    println!(
        "{}: ok ({} end nodes, {} switches, {} bsas, {} channels)",
        file.display(),
        count(NodeKind::EndNode),
        count(NodeKind::Switch),
        count(NodeKind::Bsa),
        topo.channels().len()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => args.sim.config(args.topo.resolve()?),
    };
    let output = run(&config)?;
    let summary = summarize(&output.log)?;
    println!(
        "topology {} ({} nodes, {} channels), lambda {}, seed {}",
        output.topology_name, output.nodes, output.channels, config.lambda, config.seed
    );
    print_summary(&summary);
    if let Some(path) = &args.out {
        let report = RunReport {
            topology: output.topology_name.clone(),
            nodes: output.nodes,
            channels: output.channels,
            lambda: config.lambda,
            horizon: config.horizon,
            seed: config.seed,
            session_hold: config.protocol.session_hold,
            discovery_lsa_sends: output.lsa_sends,
            summary: summary.clone(),
        };
        write_out(path, &serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", out_path(path).display());
    }
    if let Some(path) = &args.log {
        write_out(path, &output.log.to_jsonl())?;
        println!("event log written to {}", out_path(path).display());
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let lambdas: Vec<u64> = args
        .lambdas
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad lambda `{s}`")))
        .collect::<Result<_>>()?;
    let mut configs = Vec::new();
    for topo in args.topos.split(',') {
        let spec = TopoArgs {
            topo: topo.trim().to_string(),
            g: None,
            p: None,
            b: None,
            k: None,
            n: None,
            file: None,
        }
        .resolve()?;
        for &lambda in &lambdas {
            for seed in 0..args.seeds {
                let mut config = args.sim.config(spec.clone());
                config.lambda = lambda;
                config.seed = seed;
                configs.push(config);
            }
        }
    }
    let rows = sweep(&configs);
    let csv = sweep_csv(&rows);
    print!("{csv}");
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if let Some(path) = &args.csv {
        write_out(path, &csv)?;
        eprintln!("csv written to {}", out_path(path).display());
    }
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", rows.len());
    }
    Ok(())
}

fn cmd_tables(args: &TablesArgs) -> Result<()> {
    let topo = args.topo.materialize()?;
    let lsdb = Lsdb::from_topology(&topo);
    for (id, kind) in topo.nodes() {
        if kind == NodeKind::Bsa {
            continue;
        }
        if let Some(only) = args.node {
            if id != NodeId(only) {
                continue;
            }
        }
        let table = compute_bsa_table(&lsdb, id);
        println!("# node {id} ({kind})");
        print!("{}", table.dump());
    }
    Ok(())
}

fn cmd_replay(log: &Path) -> Result<()> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let log = EventLog::from_jsonl(&text)?;
    let summary = summarize(&log)?;
    println!("replayed {} records", log.len());
    print_summary(&summary);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenTopo(args) => cmd_gen_topo(args),
        Command::Validate { file } => cmd_validate(file),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Tables(args) => cmd_tables(args),
        Command::Replay { log } => cmd_replay(log),
    }
}

/// Simulation assertion failures (deadlock, invariant sweeps, protocol
/// violations) exit with 2; bad inputs with 1.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(sim) = cause.downcast_ref::<SimError>() {
            return match sim {
                SimError::Deadlock { .. }
                | SimError::AuditFailure { .. }
                | SimError::Protocol(_)
                | SimError::PastEvent { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path too.
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
