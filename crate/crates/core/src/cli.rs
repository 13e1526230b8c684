//! `nestor` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchError, BenchRunSpec, SyntheticEnv};
use crate::fabric::FabricError;
use crate::node::{self, AgentEnv, ClientError, HeadClient};
use crate::orchestrator::{self, ClusterConfig, HandleFile, OrchestratorError, Phase, UpFailure};
use crate::report::{self, Measurements, ReportError, TableFormat};
use crate::scheduler::tasks::TaskRegistry;
use crate::scheduler::{JobPhase, JobSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_STORE: i32 = 3;
pub const EXIT_STATE: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_INTERNAL: i32 = 10;

#[derive(Debug, Parser)]
#[command(name = "nestor", version, about = "Run a head-worker task cluster inside a batch allocation")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Allocate nodes, form a cluster and leave it running.
    Up(UpArgs),
    /// Shut a cluster down and remove its processes and sandboxes.
    Down(Target),
    /// Show phase, workers and jobs of a cluster.
    Status(Target),
    /// Submit a JSON array of jobs and wait for them.
    Submit(SubmitArgs),
    /// Run the throughput benchmark over a ladder of worker slot counts.
    Bench(BenchArgs),
    /// Compute speedup and efficiency tables from benchmark results.
    Report(ReportArgs),
    #[command(hide = true)]
    Agent,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Cluster config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cluster_id: Option<String>,
    #[arg(long)]
    store_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct UpArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct Target {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct SubmitArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// JSON array of job specs.
    jobfile: PathBuf,
    /// Write final statuses as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Environment preset, e.g. acrobot or humanoid.
    #[arg(long)]
    preset: String,
    /// Worker slot totals, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ladder: Vec<u32>,
    #[arg(long, default_value_t = bench::DEFAULT_REPETITIONS)]
    reps: u32,
    #[arg(long, default_value_t = bench::DEFAULT_SAMPLES_PER_WORKER)]
    samples_per_worker: u64,
    /// Bench CSV to append to.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    /// Also write all records of this run as a JSON array.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Bench CSV, summary CSV (env,total_cpus,mean,stddev) or JSON.
    input: PathBuf,
    /// Baseline cpu count; defaults to the smallest one present.
    #[arg(long)]
    base_cpus: Option<u32>,
    /// Directory for report.csv and series.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Format printed to stdout.
    #[arg(long, default_value = "text")]
    format: TableFormat,
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn client_code(e: &ClientError) -> i32 {
    match e {
        ClientError::Remote { .. } => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

pub fn orchestrator_code(e: &OrchestratorError) -> i32 {
    match e {
        OrchestratorError::InvalidConfig(_) => EXIT_USAGE,
        OrchestratorError::Up { failure, .. } => match failure {
            UpFailure::Store(_) => EXIT_STORE,
            UpFailure::AlreadyRunning(_) => EXIT_STATE,
            UpFailure::Fabric(FabricError::InvalidBundle(_))
            | UpFailure::Fabric(FabricError::DigestMismatch { .. }) => EXIT_DATA,
            UpFailure::Fabric(FabricError::InvalidRequest(_)) => EXIT_USAGE,
            UpFailure::Fabric(FabricError::Io { .. }) => EXIT_STORE,
            _ => EXIT_INTERNAL,
        },
        OrchestratorError::ClusterNotReady(_) => EXIT_STATE,
        OrchestratorError::WorkloadFailed { .. } => EXIT_DATA,
        OrchestratorError::Client(c) => client_code(c),
        OrchestratorError::HandleFile { .. } => EXIT_STORE,
    }
}

fn bench_code(e: &BenchError) -> i32 {
    match e {
        BenchError::UnknownPreset(_) | BenchError::InvalidSpec(_) => EXIT_USAGE,
        BenchError::SlotMismatch { .. } => EXIT_STATE,
        BenchError::ActorFailed { .. } | BenchError::SampleShortfall { .. } => EXIT_DATA,
        BenchError::Cluster(o) => orchestrator_code(o),
        BenchError::Client(c) => client_code(c),
        BenchError::Io(_) | BenchError::Csv(_) => EXIT_STORE,
        BenchError::EmptyInput | BenchError::Heterogeneous => EXIT_DATA,
    }
}

fn report_code(e: &ReportError) -> i32 {
    match e {
        ReportError::EmptyInput | ReportError::Parse(_) => EXIT_USAGE,
        ReportError::MissingBase(_) | ReportError::InconsistentUnits(_) | ReportError::ZeroBase => EXIT_DATA,
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        Failure::new(orchestrator_code(&e), e.to_string())
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        Failure::new(bench_code(&e), e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure::new(report_code(&e), e.to_string())
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::new(client_code(&e), e.to_string())
    }
}

/// Config file plus command-line overrides. Without `--config`, both
/// `--cluster-id` and `--store-root` are required.
fn resolve_config(a: &ConfigArgs) -> Result<ClusterConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => ClusterConfig::load(p)?,
        None => {
            let (Some(id), Some(root)) = (&a.cluster_id, &a.store_root) else {
                return Err(Failure::new(
                    EXIT_USAGE,
                    "either --config or both --cluster-id and --store-root are required",
                ));
            };
            ClusterConfig::new(id, 1, 1, root)
        }
    };
    if let Some(id) = &a.cluster_id {
        cfg.cluster_id = id.clone();
    }
    if let Some(root) = &a.store_root {
        cfg.store_root = root.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn live_handle(cfg: &ClusterConfig) -> Result<HandleFile, Failure> {
    match HandleFile::load(&cfg.store_root, &cfg.cluster_id)? {
        Some(h) if h.is_live() => Ok(h),
        _ => Err(Failure::new(
            EXIT_STATE,
            format!("cluster {} is not running", cfg.cluster_id),
        )),
    }
}

fn attach(h: &HandleFile) -> Result<HeadClient, Failure> {
    let head = h
        .head
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_STATE, "handle file has no head record"))?;
    Ok(HeadClient::attach(head, Duration::from_secs(10))?)
}

fn cmd_up(a: &UpArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&a.cfg)?;
    if let Some(h) = HandleFile::load(&cfg.store_root, &cfg.cluster_id)? {
        if h.is_live() {
            return Err(Failure::new(
                EXIT_STATE,
                format!("cluster {} already exists", cfg.cluster_id),
            ));
        }
        orchestrator::down_detached(&cfg.store_root, &cfg.cluster_id)?;
    }
    let handle = orchestrator::up(cfg.clone())?;
    let file = handle.handle_file();
    if let Err(e) = file.save(&cfg.store_root) {
        handle.down();
        return Err(e.into());
    }
    let head = file.head.as_ref().expect("ready cluster has a head");
    println!("cluster {} ready", file.cluster_id);
    println!("head     {}", head.socket_addr());
    println!("workers  {} ({} slots)", file.workers.len(), file.worker_slots);
    println!("handle   {}", cfg.handle_path().display());
    Ok(())
}

fn cmd_down(a: &Target) -> Result<(), Failure> {
    let cfg = resolve_config(&a.cfg)?;
    let report = orchestrator::down_detached(&cfg.store_root, &cfg.cluster_id)?;
    println!(
        "cluster {} down (signaled {}, killed {})",
        cfg.cluster_id, report.signaled, report.killed
    );
    if !report.unkillable.is_empty() {
        return Err(Failure::new(
            EXIT_INTERNAL,
            format!("unkillable agents: {:?}", report.unkillable),
        ));
    }
    Ok(())
}

fn cmd_status(a: &Target) -> Result<(), Failure> {
    let cfg = resolve_config(&a.cfg)?;
    let h = live_handle(&cfg).inspect_err(|_| println!("cluster {} phase {:?}", cfg.cluster_id, Phase::Down))?;
    let mut client = attach(&h)?;
    let (workers, jobs) = client.describe()?;
    println!("cluster {} phase {:?}", h.cluster_id, h.phase);
    if let Some(head) = &h.head {
        println!("head {}", head.socket_addr());
    }
    println!("{:>6} {:>6} {:>6} {:>8}", "worker", "slots", "free", "running");
    for w in &workers {
        println!(
            "{:>6} {:>6} {:>6} {:>8}",
            w.worker_id,
            w.cpu_slots_total,
            w.cpu_slots_free,
            w.running.len()
        );
    }
    let count = |p: JobPhase| jobs.iter().filter(|j| j.phase == p).count();
    println!(
        "jobs: {} queued, {} ready, {} running, {} succeeded, {} failed",
        count(JobPhase::Queued),
        count(JobPhase::Ready),
        count(JobPhase::Running),
        count(JobPhase::Succeeded),
        count(JobPhase::Failed)
    );
    Ok(())
}

fn cmd_submit(a: &SubmitArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&a.cfg)?;
    let raw = fs::read(&a.jobfile)
        .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", a.jobfile.display())))?;
    let jobs: Vec<JobSpec> = serde_json::from_slice(&raw)
        .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", a.jobfile.display())))?;
    let h = live_handle(&cfg)?;
    let mut client = attach(&h)?;
    client.set_timeout(None)?;
    let ids = client.submit(jobs)?;
    let statuses = client.wait(&ids)?;
    for s in &statuses {
        match &s.error {
            Some(e) => println!("{} {:?} {e}", s.job_id, s.phase),
            None => println!("{} {:?}", s.job_id, s.phase),
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_vec_pretty(&statuses).expect("statuses serialize"))
            .map_err(|e| Failure::new(EXIT_STORE, format!("{}: {e}", out.display())))?;
    }
    match statuses.iter().find(|s| s.phase != JobPhase::Succeeded) {
        Some(bad) => Err(Failure::new(EXIT_DATA, format!("job {} did not succeed", bad.job_id))),
        None => Ok(()),
    }
}

/// Node layout for a ladder rung: one head node plus enough worker nodes of
/// `cpus_per_node` slots each.
fn ladder_nodes(total: u32, cpus_per_node: u32) -> Result<u32, Failure> {
    if total == 0 || total % cpus_per_node != 0 {
        return Err(Failure::new(
            EXIT_USAGE,
            format!("ladder value {total} is not a positive multiple of cpus_per_node {cpus_per_node}"),
        ));
    }
    Ok(total / cpus_per_node + 1)
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let base = resolve_config(&a.cfg)?;
    SyntheticEnv::preset(&a.preset, 0)?;
    if a.reps == 0 {
        return Err(Failure::new(EXIT_USAGE, "--reps must be at least 1"));
    }
    let layouts: Vec<(u32, u32)> = a
        .ladder
        .iter()
        .map(|&l| ladder_nodes(l, base.cpus_per_node).map(|n| (l, n)))
        .collect::<Result<_, _>>()?;
    let mut all = Vec::new();
    for (slots, n_nodes) in layouts {
        let mut cfg = base.clone();
        cfg.cluster_id = format!("{}-b{slots}", base.cluster_id);
        cfg.n_nodes = n_nodes;
        let mut spec = BenchRunSpec::new(&a.preset, slots)?;
        spec.repetitions = a.reps;
        spec.samples_per_worker = a.samples_per_worker;
        let handle = orchestrator::up(cfg)?;
        let result = bench::run_benchmark(&handle, &spec);
        handle.down();
        let records = result?;
        bench::append_csv(&a.out, &records)?;
        for r in &records {
            println!(
                "{} cpus={} rep={} samples={} wall_s={:.3} throughput={:.1}",
                r.env_name, r.total_cpu_workers, r.repetition_index, r.samples_collected, r.wall_seconds, r.throughput
            );
        }
        all.extend(records);
        if let Some(p) = &a.json {
            bench::write_json(p, &all)?;
        }
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let raw = fs::read(&a.input)
        .map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", a.input.display())))?;
    let m = Measurements::parse(&raw)?;
    let base = match a.base_cpus {
        Some(b) => b,
        None => m.smallest_cpus().ok_or(ReportError::EmptyInput)?,
    };
    let source = a.input.display().to_string();
    let mut rep = report::build_report(&m, base)?;
    rep.provenance.insert(source, crate::fabric::sha256_hex(&raw));
    write_out(&a.out.join("report.csv"), &report::emit_table(&rep, TableFormat::Csv))?;
    write_out(&a.out.join("series.csv"), &report::emit_scaling_series(&rep))?;
    print!("{}", String::from_utf8_lossy(&report::emit_table(&rep, a.format)));
    Ok(())
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::new(EXIT_STORE, format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::new(EXIT_STORE, format!("{}: {e}", path.display())))
}

fn cmd_agent() -> Result<(), Failure> {
    let env = AgentEnv::from_env().map_err(|e| Failure::new(e.exit_code(), e.to_string()))?;
    let walltime = env.walltime;
    std::thread::Builder::new()
        .name("walltime".into())
        .spawn(move || {
            std::thread::sleep(walltime);
            log::warn!("walltime of {walltime:?} reached, exiting");
            std::process::exit(EXIT_INTERNAL);
        })
        .map_err(|e| Failure::new(EXIT_INTERNAL, e.to_string()))?;
    match node::run_agent(&env, TaskRegistry::with_builtins()) {
        Ok(role) => {
            log::info!("agent finished as {role:?}");
            Ok(())
        }
        Err(e) => Err(Failure::new(e.exit_code(), e.to_string())),
    }
}

fn init_logging(verbose: u8, agent: bool) {
    let default = match (verbose, agent) {
        (0, false) => "warn",
        (0, true) | (1, _) => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp_millis()
        .try_init();
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose, matches!(cli.command, Command::Agent));
    let result = match &cli.command {
        Command::Up(a) => cmd_up(a),
        Command::Down(a) => cmd_down(a),
        Command::Status(a) => cmd_status(a),
        Command::Submit(a) => cmd_submit(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Report(a) => cmd_report(a),
        Command::Agent => cmd_agent(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("nestor: {}", f.message);
            f.code
        }
    }
}
