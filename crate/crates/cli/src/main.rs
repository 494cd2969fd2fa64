//! `stabcon`: run scenarios, fuzz campaigns and the baseline comparison.
//!
//! Exit codes: 0 when every verdict passes, 1 on a verdict failure (the
//! failing seed is printed), 2 on bad flags or an invalid configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use stabcon_core::sim::campaign::{consensus_config, contrast_config, convergence_config, par_map, to_config, Summary};
use stabcon_core::sim::scenario::{run_mrt, run_mv};
use stabcon_core::sim::{run, RunReport, ScenarioKind, SimConfig};
use stabcon_core::Variant;

#[derive(Parser)]
#[command(name = "stabcon", version, about = "Self-stabilizing consensus simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and report its verdicts.
    Run(Common),
    /// Run a scenario over consecutive seeds.
    Fuzz(Common),
    /// Inject transient faults and report stabilization metrics.
    Converge(Common),
    /// Compare the baseline with the stabilizing algorithm on shared schedules.
    DiffBaseline(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Seq,
    Conc,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Seq => Variant::Sequential,
            VariantArg::Conc => Variant::Concurrent,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// JSON scenario file; flags override its fields.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    nodes: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Number of seeds for campaigns.
    #[arg(long, value_name = "K", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_name = "D")]
    delta: Option<u64>,
    #[arg(long, value_name = "B")]
    budget: Option<u64>,
    #[arg(long, value_name = "PATH")]
    trace_out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    report_out: Option<PathBuf>,
}

/// A configuration error: reported with exit code 2.
struct Usage(String);

impl Common {
    fn base(&self) -> Result<Option<SimConfig>> {
        let Some(path) = &self.scenario else { return Ok(None) };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Some(cfg))
    }

    fn apply(&self, mut cfg: SimConfig) -> SimConfig {
        if let Some(n) = self.nodes {
            if n != cfg.n {
                cfg.n = n;
                cfg.t = SimConfig::max_faulty(n.max(1));
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v.into();
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        cfg
    }

    fn nodes(&self) -> usize {
        self.nodes.unwrap_or(3)
    }

    fn first_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn variant(&self) -> Variant {
        self.variant.map_or(Variant::Sequential, Into::into)
    }

    /// Config for one seed of a campaign: the scenario file when given,
    /// otherwise `family`.
    fn seeded(&self, base: &Option<SimConfig>, seed: u64, family: impl Fn(usize, u64, Variant) -> SimConfig) -> SimConfig {
        let cfg = match base {
            Some(b) => SimConfig { seed, ..b.clone() },
            None => family(self.nodes(), seed, self.variant()),
        };
        SimConfig { seed, ..self.apply(cfg) }
    }
}

fn check(cfg: &SimConfig) -> Result<(), Usage> {
    cfg.validate().map_err(|e| Usage(e.to_string()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_trace(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Replay `cfg` with the trace captured and store it, returning the path.
fn dump_failure(c: &Common, cfg: &SimConfig) -> Result<Option<PathBuf>> {
    let Some(path) = &c.trace_out else { return Ok(None) };
    let out = run(cfg, true).map_err(|e| anyhow::anyhow!(e))?;
    write_trace(path, out.trace.as_deref().unwrap_or_default())?;
    Ok(Some(path.clone()))
}

fn report_failure(c: &Common, cfg: &SimConfig, r: &RunReport) -> Result<()> {
    let names: Vec<String> = r.failures().map(|v| format!("{} ({})", v.name, v.witness.as_deref().unwrap_or("-"))).collect();
    println!("FAIL seed {}: {}", cfg.seed, names.join(", "));
    if let Some(p) = dump_failure(c, cfg)? {
        println!("trace written to {}", p.display());
    }
    Ok(())
}

fn cmd_run(c: &Common) -> Result<Result<bool, Usage>> {
    let base = c.base()?;
    let cfg = c.apply(base.unwrap_or_else(|| {
        let n = c.nodes();
        SimConfig { n, t: SimConfig::max_faulty(n.max(1)), ..SimConfig::default() }
    }));
    if let Err(u) = check(&cfg) {
        return Ok(Err(u));
    }
    let out = run(&cfg, c.trace_out.is_some()).map_err(|e| anyhow::anyhow!(e))?;
    if let (Some(p), Some(lines)) = (&c.trace_out, &out.trace) {
        write_trace(p, lines)?;
    }
    if let Some(p) = &c.report_out {
        write_json(p, &serde_json::to_value(&out.report)?)?;
    }
    for v in &out.report.verdicts {
        println!("{:<22} {}", v.name, if v.pass { "pass" } else { "FAIL" });
    }
    println!("bc_invocations {}  steps {}  trace {}", out.report.metrics.bc_invocations, out.report.metrics.steps, out.report.trace_hash);
    let ok = out.report.pass();
    if !ok {
        report_failure(c, &cfg, &out.report)?;
    }
    Ok(Ok(ok))
}

fn configs(c: &Common, family: impl Fn(usize, u64, Variant) -> SimConfig) -> Result<Result<Vec<SimConfig>, Usage>> {
    let base = c.base()?;
    let s0 = c.first_seed();
    let cfgs: Vec<SimConfig> = (s0..s0 + c.seeds).map(|s| c.seeded(&base, s, &family)).collect();
    if let Some(u) = cfgs.iter().find_map(|cfg| check(cfg).err()) {
        return Ok(Err(u));
    }
    Ok(Ok(cfgs))
}

fn cmd_fuzz(c: &Common) -> Result<Result<bool, Usage>> {
    let cfgs = match configs(c, consensus_config)? {
        Ok(x) => x,
        Err(u) => return Ok(Err(u)),
    };
    let reports: Vec<RunReport> =
        par_map(0..cfgs.len() as u64, |i| run(&cfgs[i as usize], false).expect("validated").report);
    let summary = Summary::from_reports(&reports);
    println!("{} runs, {} passed", summary.runs, summary.passed);
    for (name, k) in &summary.failures_by_verdict {
        println!("  {name}: {k} failing runs");
    }
    if let Some(p) = &c.report_out {
        write_json(p, &json!({ "schema": 1, "command": "fuzz", "summary": summary, "runs": reports }))?;
    }
    if let Some(r) = reports.iter().find(|r| !r.pass()) {
        report_failure(c, &r.config, r)?;
    }
    Ok(Ok(summary.all_pass()))
}

fn cmd_converge(c: &Common) -> Result<Result<bool, Usage>> {
    let base = c.base()?;
    let to_family = base.as_ref().is_some_and(|b| matches!(b.scenario, ScenarioKind::ToUrb | ScenarioKind::Rsm));
    let cfgs = if to_family {
        configs(c, |n, s, _| to_config(n, s, true))?
    } else {
        configs(c, convergence_config)?
    };
    let cfgs = match cfgs {
        Ok(x) => x,
        Err(u) => return Ok(Err(u)),
    };
    let reports: Vec<RunReport> =
        par_map(0..cfgs.len() as u64, |i| run(&cfgs[i as usize], false).expect("validated").report);
    let summary = Summary::from_reports(&reports);
    let max_of = |key: &str| reports.iter().filter_map(|r| r.stat_u64(key)).max();
    let metrics = json!({
        "max_settled_step": max_of("settled_step"),
        "max_cycles_to_legality": max_of("cycles_to_legality"),
        "max_transient_errors": max_of("transient_errors"),
    });
    println!("{} runs, {} passed", summary.runs, summary.passed);
    println!("stabilization: {metrics}");
    if let Some(p) = &c.report_out {
        write_json(p, &json!({ "schema": 1, "command": "converge", "summary": summary, "stabilization": metrics, "runs": reports }))?;
    }
    if let Some(r) = reports.iter().find(|r| !r.pass()) {
        report_failure(c, &r.config, r)?;
    }
    Ok(Ok(summary.all_pass()))
}

fn cmd_diff(c: &Common) -> Result<Result<bool, Usage>> {
    let cfgs = match configs(c, |n, s, _| contrast_config(n, s))? {
        Ok(x) => x,
        Err(u) => return Ok(Err(u)),
    };
    let rows = par_map(0..cfgs.len() as u64, |i| {
        let cfg = &cfgs[i as usize];
        let mrt = run_mrt(&SimConfig { scenario: ScenarioKind::Mrt, ..cfg.clone() }, false).expect("validated");
        let mv = run_mv(&SimConfig { scenario: ScenarioKind::Mv, ..cfg.clone() }, false).expect("validated");
        (cfg.seed, mrt.liveness_failure, mv.report)
    });
    println!("{:>8}  {:<14} {:<6}", "seed", "baseline", "mv");
    for (seed, lf, mv) in &rows {
        println!("{seed:>8}  {:<14} {:<6}", if *lf { "stuck" } else { "terminated" }, if mv.pass() { "pass" } else { "FAIL" });
    }
    let stuck = rows.iter().filter(|r| r.1).count();
    let mv_ok = rows.iter().filter(|r| r.2.pass()).count();
    let both = rows.iter().filter(|r| r.1 && r.2.pass()).count();
    println!("baseline stuck {stuck}/{n}, mv pass {mv_ok}/{n}, split {both}/{n}", n = rows.len());
    if let Some(p) = &c.report_out {
        let table: Vec<_> = rows.iter().map(|(s, lf, mv)| json!({ "seed": s, "baseline_liveness_failure": lf, "mv_pass": mv.pass() })).collect();
        write_json(p, &json!({ "schema": 1, "command": "diff-baseline", "rows": table, "baseline_stuck": stuck, "mv_pass": mv_ok, "split": both }))?;
    }
    if let Some((_, _, r)) = rows.iter().find(|r| !r.2.pass()) {
        report_failure(c, &r.config, r)?;
    }
    Ok(Ok(mv_ok == rows.len()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run(c) => cmd_run(c),
        Cmd::Fuzz(c) => cmd_fuzz(c),
        Cmd::Converge(c) => cmd_converge(c),
        Cmd::DiffBaseline(c) => cmd_diff(c),
    };
    match res {
        Ok(Ok(true)) => ExitCode::SUCCESS,
        Ok(Ok(false)) => ExitCode::from(1),
        Ok(Err(Usage(msg))) => {
            eprintln!("error: {msg}");
            eprintln!("see `stabcon --help`");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
