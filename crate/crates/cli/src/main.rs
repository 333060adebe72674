use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use sparse_ckpt::config::{apply_override, Config};
use sparse_ckpt::schedule::{order_operators, plan_window};
use sparse_ckpt::sim::{
    interval_sweep, run_simulation, sweep, FailureProcess, Metrics, MetricsRow, PolicyKind, Scenario,
};
use sparse_ckpt::verify::{run_matrix, VerifyConfig};
use sparse_ckpt::workload::{hhi, skewness};
use sparse_ckpt::Execution;

const LOG_ENV: &str = "SPARSE_CKPT_LOG";

#[derive(Parser, Debug)]
#[command(name = "sparse-ckpt", version, about = "Sparse checkpointing experiments for MoE training")]
struct Cli {
    /// TOML config, or a manifest.toml written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; defaults to the manifest seed, else 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `sim.policy`; restricts sweeps and trace replay to one policy.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// Overrides `sim.mtbf` in seconds.
    #[arg(long, global = true)]
    mtbf: Option<f64>,
    /// Failure trace CSV; overrides `sim.trace`.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// `key=value` config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Sparse window schedule for the configured model and profile.
    Schedule,
    /// Recovery equivalence matrix on the toy engine.
    TrainVerify,
    /// One simulation run.
    Simulate,
    /// Policies by MTBF grid, plus dense interval curves when configured.
    Sweep,
    /// Every policy against a recorded failure trace.
    TraceReplay,
    /// Synthetic expert popularity per iteration bucket.
    Popularity,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Schedule => "schedule",
            Command::TrainVerify => "train-verify",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::TraceReplay => "trace-replay",
            Command::Popularity => "popularity",
        }
    }
}

enum Failure {
    Config(String),
    Verify(String),
}

impl From<sparse_ckpt::Error> for Failure {
    fn from(e: sparse_ckpt::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    let (cfg, seed) = load_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    write_manifest(&cli.out, cli.command, &cfg, seed)?;
    info!("{} with seed {seed} into {}", cli.command.name(), cli.out.display());
    match cli.command {
        Command::Schedule => schedule(&cfg, &cli.out),
        Command::TrainVerify => train_verify(&cfg, &cli.out),
        Command::Simulate => simulate(&cfg, seed, &cli.out),
        Command::Sweep => run_sweep(&cfg, seed, cli.policy.is_some(), &cli.out),
        Command::TraceReplay => trace_replay(&cfg, seed, cli.policy.is_some(), &cli.out),
        Command::Popularity => popularity(&cfg, seed, &cli.out),
    }
}

/// Reads the config or manifest, applies overrides and resolves a relative
/// trace path against the file's directory.
fn load_config(cli: &Cli) -> Outcome<(Config, u64)> {
    let (mut table, base) = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| io_err(path, e))?;
            (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    let manifest_seed = match table.remove("run") {
        Some(toml::Value::Table(run)) => run.get("seed").and_then(toml::Value::as_integer).map(|s| s as u64),
        Some(_) => return Err(Failure::Config("[run] must be a table".into())),
        None => None,
    };
    for o in &cli.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(p) = &cli.policy {
        PolicyKind::parse(p)?;
        apply_override(&mut table, &format!("sim.policy=\"{p}\""))?;
    }
    if let Some(m) = cli.mtbf {
        apply_override(&mut table, &format!("sim.mtbf={m:?}"))?;
    }
    if cli.command == Command::TrainVerify {
        fill_verify_defaults(&mut table)?;
    }
    let text = toml::to_string(&table).map_err(|e| Failure::Config(e.to_string()))?;
    let mut cfg = Config::from_toml_str(&text, &[])?;
    match &cli.trace {
        Some(t) => cfg.sim.trace = Some(absolute(t)?),
        None => {
            if let Some(t) = cfg.sim.trace.take() {
                cfg.sim.trace = Some(absolute(&if t.is_relative() { base.join(t) } else { t })?);
            }
        }
    }
    Ok((cfg, cli.seed.or(manifest_seed).unwrap_or(0)))
}

fn absolute(p: &Path) -> Outcome<PathBuf> {
    fs::canonicalize(p).map_err(|e| io_err(p, e))
}

/// Keys missing from `[verify]` take the standard matrix values.
fn fill_verify_defaults(table: &mut toml::Table) -> Outcome<()> {
    let standard = toml::to_string(&VerifyConfig::standard()).map_err(|e| Failure::Config(e.to_string()))?;
    let mut merged: toml::Table = toml::from_str(&standard).map_err(|e| Failure::Config(e.to_string()))?;
    match table.remove("verify") {
        Some(toml::Value::Table(user)) => merge(&mut merged, user),
        Some(_) => return Err(Failure::Config("[verify] must be a table".into())),
        None => {}
    }
    table.insert("verify".into(), toml::Value::Table(merged));
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// The resolved config with a `[run]` table; loadable again with `--config`.
fn write_manifest(out: &Path, command: Command, cfg: &Config, seed: u64) -> Outcome<()> {
    let mut table: toml::Table = toml::from_str(&cfg.to_toml()?).map_err(|e| Failure::Config(e.to_string()))?;
    let mut run = toml::Table::new();
    run.insert("command".into(), command.name().into());
    run.insert("seed".into(), toml::Value::Integer(seed as i64));
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    table.insert("run".into(), toml::Value::Table(run));
    let path = out.join("manifest.toml");
    let text = toml::to_string(&table).map_err(|e| Failure::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn csv_writer(out: &Path, name: &str) -> Outcome<(csv::Writer<fs::File>, PathBuf)> {
    let path = out.join(name);
    let w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    Ok((w, path))
}

fn write_rows<I, R>(out: &Path, name: &str, header: &[&str], rows: I) -> Outcome<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let (mut w, path) = csv_writer(out, name)?;
    w.write_record(header).map_err(|e| io_err(&path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn ids<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn schedule(cfg: &Config, out: &Path) -> Outcome<()> {
    let sc = cfg.scenario(0)?;
    let costs = sc.costs()?;
    let ordered = order_operators(&sc.model.operators, sc.params.ordering)?;
    let (sched, fits) = plan_window(
        &ordered,
        &sc.profile.operator_bytes,
        costs.window_budget(),
        sc.params.ordering,
        sc.params.allow_single,
        0,
    )?;
    if !fits {
        warn!("largest slot exceeds the per-iteration copy budget; snapshots will stall");
    }
    println!("W_sparse = {}", sched.w);
    println!("O_active = {}", sched.o_active);
    println!("{:>4}  {:>8}  {:>12}  {:>14}  {:>10}", "slot", "active", "compute_only", "bytes", "seconds");
    let rows: Vec<[String; 5]> = sched
        .slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let bytes = s.bytes(&sc.profile.operator_bytes);
            [i.to_string(), ids(&s.active), ids(&s.compute_only), bytes.to_string(), format!("{:.6}", costs.copy_time(bytes))]
        })
        .collect();
    for (r, s) in rows.iter().zip(&sched.slots) {
        println!("{:>4}  {:>8}  {:>12}  {:>14}  {:>10}", r[0], s.active.len(), s.compute_only.len(), r[3], r[4]);
    }
    write_rows(out, "schedule.csv", &["slot", "active_ids", "compute_only_ids", "slot_bytes", "slot_seconds"], rows)
}

fn train_verify(cfg: &Config, out: &Path) -> Outcome<()> {
    let vc = cfg.verify.clone().unwrap_or_else(VerifyConfig::standard);
    let m = run_matrix(&vc, Execution::Parallel)?;
    let rows = m.cells.iter().map(|c| {
        [
            c.seed.to_string(),
            c.position.to_string(),
            c.policy.name().to_string(),
            c.stage.map(|s| s.to_string()).unwrap_or_default(),
            c.matched.to_string(),
            format!("{:.1}", c.tokens_lost),
            c.detail.clone(),
        ]
    });
    write_rows(out, "verify.csv", &["seed", "position", "policy", "stage", "matched", "tokens_lost", "detail"], rows)?;
    println!("{:<10} {:>6} {:>8} {:>10} {:>12}", "policy", "cells", "matched", "mismatched", "tokens_lost");
    for p in &vc.policies {
        let cells: Vec<_> = m.cells.iter().filter(|c| c.policy == *p).collect();
        let matched = cells.iter().filter(|c| c.matched).count();
        let lost: f64 = cells.iter().map(|c| c.tokens_lost).sum();
        println!("{:<10} {:>6} {:>8} {:>10} {:>12.1}", p.name(), cells.len(), matched, cells.len() - matched, lost);
    }
    let bad: Vec<String> = m.failures().map(|c| format!("{} seed {} position {}", c.policy.name(), c.seed, c.position)).collect();
    if bad.is_empty() {
        println!("all required cells match");
        Ok(())
    } else {
        Err(Failure::Verify(format!("{} cells differ: {}", bad.len(), bad.join(", "))))
    }
}

fn metrics_rows<'a>(runs: impl IntoIterator<Item = (&'a Metrics, f64)>) -> Vec<[String; 9]> {
    runs.into_iter().map(|(m, mtbf)| MetricsRow::new(m, mtbf).fields()).collect()
}

fn goodput_rows(m: &Metrics) -> impl Iterator<Item = [String; 4]> + '_ {
    m.goodput.iter().map(move |b| {
        [m.policy.clone(), format!("{}", b.start), format!("{:.4}", b.samples_per_s), format!("{:.6}", b.expert_fraction)]
    })
}

const GOODPUT_HEADER: [&str; 4] = ["policy", "bucket_start_s", "samples_per_s", "expert_fraction"];

fn print_metrics(rows: &[[String; 9]]) {
    println!("{}", MetricsRow::HEADER.join("  "));
    for r in rows {
        println!("{}", r.join("  "));
    }
}

fn run_policy(sc: &Scenario, kind: PolicyKind, process: &FailureProcess, mtbf: f64) -> Outcome<Metrics> {
    Ok(run_simulation(&sc.sim_config(kind, process.clone(), mtbf)?)?)
}

fn simulate(cfg: &Config, seed: u64, out: &Path) -> Outcome<()> {
    let sc = cfg.scenario(seed)?;
    let (process, mtbf) = cfg.failure_process(sc.cluster.nodes)?;
    let m = run_policy(&sc, cfg.sim.policy, &process, mtbf)?;
    let rows = metrics_rows([(&m, mtbf)]);
    print_metrics(&rows);
    write_rows(out, "metrics.csv", &MetricsRow::HEADER, rows)?;
    write_rows(out, "goodput.csv", &GOODPUT_HEADER, goodput_rows(&m))?;
    write_recoveries(out, [&m])
}

fn write_recoveries<'a>(out: &Path, runs: impl IntoIterator<Item = &'a Metrics>) -> Outcome<()> {
    let rows: Vec<[String; 10]> = runs
        .into_iter()
        .flat_map(|m| {
            m.recoveries.iter().map(move |e| {
                [
                    m.policy.clone(),
                    format!("{:.3}", e.t),
                    e.node.to_string(),
                    e.target.to_string(),
                    e.lost_iterations.to_string(),
                    format!("{:.3}", e.wasted_seconds),
                    format!("{:.3}", e.fixed_seconds),
                    format!("{:.3}", e.replay_seconds),
                    format!("{:.1}", e.tokens_lost),
                    (if e.cascaded { "cascaded" } else if e.interrupted { "interrupted" } else { "complete" }).to_string(),
                ]
            })
        })
        .collect();
    write_rows(
        out,
        "recoveries.csv",
        &["policy", "t_s", "node", "target", "lost_iterations", "wasted_s", "fixed_s", "replay_s", "tokens_lost", "status"],
        rows,
    )
}

fn selected_policies(cfg: &Config, restrict: bool, default: &[PolicyKind]) -> Vec<PolicyKind> {
    if restrict {
        vec![cfg.sim.policy]
    } else {
        default.to_vec()
    }
}

fn run_sweep(cfg: &Config, seed: u64, restrict: bool, out: &Path) -> Outcome<()> {
    let sc = cfg.scenario(seed)?;
    let policies = selected_policies(cfg, restrict, &cfg.sweep.policies);
    let rows = sweep(std::slice::from_ref(&sc), &cfg.sweep.mtbfs, &policies, Execution::Parallel);
    let mut ok = Vec::new();
    for r in &rows {
        match &r.result {
            Ok(m) => ok.push((m, r.mtbf)),
            Err(e) => return Err(Failure::Config(format!("{} at MTBF {} s: {e}", r.policy.as_str(), r.mtbf))),
        }
    }
    let table = metrics_rows(ok);
    print_metrics(&table);
    write_rows(out, "metrics.csv", &MetricsRow::HEADER, table)?;
    if !cfg.sweep.intervals.is_empty() {
        let mut curve = Vec::new();
        for &mtbf in &cfg.sweep.mtbfs {
            for (interval, r) in interval_sweep(&sc, mtbf, &cfg.sweep.intervals, Execution::Parallel) {
                let m = r.map_err(|e| Failure::Config(format!("interval {interval} at MTBF {mtbf} s: {e}")))?;
                curve.push([format!("{mtbf}"), interval.to_string(), format!("{:.6}", m.ettr)]);
            }
        }
        write_rows(out, "interval_sweep.csv", &["mtbf_s", "interval", "ettr"], curve)?;
    }
    Ok(())
}

fn trace_replay(cfg: &Config, seed: u64, restrict: bool, out: &Path) -> Outcome<()> {
    if cfg.sim.trace.is_none() {
        return Err(Failure::Config("trace-replay needs --trace or sim.trace".into()));
    }
    let sc = cfg.scenario(seed)?;
    let (process, mtbf) = cfg.failure_process(sc.cluster.nodes)?;
    if let FailureProcess::Trace(t) = &process {
        info!("replaying {} failures, mean gap {:.0} s", t.len(), mtbf);
    }
    let policies = selected_policies(cfg, restrict, &PolicyKind::ALL);
    let runs = Execution::Parallel.map(&policies, |&k| run_policy(&sc, k, &process, mtbf));
    let runs: Vec<Metrics> = runs.into_iter().collect::<Outcome<_>>()?;
    let rows = metrics_rows(runs.iter().map(|m| (m, mtbf)));
    print_metrics(&rows);
    for m in &runs {
        println!("{} mean goodput {:.2} samples/s", m.policy, m.mean_goodput());
    }
    write_rows(out, "metrics.csv", &MetricsRow::HEADER, rows)?;
    write_rows(out, "goodput.csv", &GOODPUT_HEADER, runs.iter().flat_map(goodput_rows))?;
    write_recoveries(out, &runs)
}

fn popularity(cfg: &Config, seed: u64, out: &Path) -> Outcome<()> {
    let (p, trace) = cfg.routing_trace(seed, Execution::Parallel)?;
    let bucket = cfg.workload.bucket as usize;
    let experts = trace.experts as usize;
    let mut rows = Vec::new();
    let mut overall = vec![0u64; experts];
    let summary = |label: String, counts: &[u64]| -> Outcome<[String; 6]> {
        let total: u64 = counts.iter().sum();
        let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
        Ok([label, "all".into(), total.to_string(), format!("{:.6}", 1.0), format!("{:.6}", hhi(&shares)), format!("{:.6}", skewness(&shares)?)])
    };
    for (b, chunk) in trace.iterations.chunks(bucket).enumerate() {
        let mut counts = vec![0u64; experts];
        for it in chunk {
            for layer in &it.counts {
                for (c, x) in counts.iter_mut().zip(layer) {
                    *c += x;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        for (e, &c) in counts.iter().enumerate() {
            rows.push([b.to_string(), e.to_string(), c.to_string(), format!("{:.6}", c as f64 / total.max(1) as f64), String::new(), String::new()]);
        }
        rows.push(summary(b.to_string(), &counts)?);
        for (o, c) in overall.iter_mut().zip(&counts) {
            *o += c;
        }
    }
    let last = summary("total".into(), &overall)?;
    println!("experts {experts}, drawn skewness {:.4}, observed HHI {} skewness {}", p.skewness()?, last[4], last[5]);
    rows.push(last);
    write_rows(out, "popularity.csv", &["bucket", "expert_id", "tokens", "share", "hhi", "skewness"], rows)
}
