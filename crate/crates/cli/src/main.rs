//! Command-line entry point: run scenarios, sweep factors, recompute
//! metrics from saved event logs, and validate inputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use rideshare_core::log::{read_jsonl, write_jsonl, LogRecord};
use rideshare_core::metrics::{self, MetricsReport};
use rideshare_core::scenario::{
    self, build_network, default_levels, load_config, ScenarioConfig, ScenarioError,
    SweepFactor,
};

#[derive(Parser)]
#[command(name = "rideshare", about = "Dynamic peer-to-peer ridesharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for replications and candidate generation
    /// (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Suppress console summaries.
    #[arg(long, global = true, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Replication count override.
    #[arg(long)]
    replications: Option<u32>,
    /// Dotted-path config overrides, e.g. `matching.window_min=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured scenario and write logs and metrics.
    Run(ScenarioArgs),
    /// Run a sensitivity sweep over one factor.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Factor to sweep: supply-level | matching-window.
        #[arg(long)]
        factor: String,
        /// Comma-separated levels; defaults to the factor's full ladder.
        #[arg(long)]
        levels: Option<String>,
    },
    /// Recompute metrics from a saved event log.
    Report {
        /// events.jsonl produced by `run`.
        #[arg(long)]
        log: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Load the config and network and report problems without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_workers(cli.workers);
    let quiet = cli.quiet;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if !quiet {
                for cause in e.chain().skip(1) {
                    eprintln!("  caused by: {cause}");
                }
            }
            if e.downcast_ref::<ScenarioError>()
                .map(|se| matches!(se, ScenarioError::Config(_) | ScenarioError::Io(_)))
                .unwrap_or(false)
            {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn init_workers(workers: usize) {
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_workers: usize) {}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(args, cli.quiet),
        Command::Sweep { scenario, factor, levels } => sweep(scenario, factor, levels, cli.quiet),
        Command::Report { log, out } => report(&log, &out, cli.quiet),
        Command::Validate { config, set } => validate(&config, &set),
    }
}

fn load(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = load_config(&args.config, &args.set)?;
    if let Some(seed) = args.seed {
        cfg.scenario.master_seed = seed;
    }
    if let Some(reps) = args.replications {
        cfg.scenario.replications = reps;
    }
    Ok(cfg)
}

fn run(args: ScenarioArgs, quiet: bool) -> Result<()> {
    let cfg = load(&args)?;
    let (net, od) = build_network(&cfg)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let started = Instant::now();
    let runs = scenario::run_replications(&cfg, &net, &od)?;
    let elapsed_min = started.elapsed().as_secs_f64() / 60.0;

    let reports: Vec<MetricsReport> = runs.iter().map(|(_, _, r)| r.clone()).collect();
    let single = runs.len() == 1;

    for (i, (_, output, rep_report)) in runs.iter().enumerate() {
        let (events_name, metrics_name) = if single {
            ("events.jsonl".to_string(), "metrics.json".to_string())
        } else {
            (format!("events_r{i:03}.jsonl"), format!("metrics_r{i:03}.json"))
        };
        write_atomic(&args.out.join(&events_name), |w| write_jsonl(w, &output.log))?;
        write_atomic(&args.out.join(&metrics_name), |w| {
            serde_json::to_writer_pretty(&mut *w, rep_report)?;
            w.write_all(b"\n")
        })?;
    }

    if !single {
        let aggregate = metrics::aggregate(&reports);
        write_atomic(&args.out.join("metrics.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &aggregate)?;
            w.write_all(b"\n")
        })?;
    }

    // Profiles and agent snapshots come from the first replication.
    let (_, first, _) = &runs[0];
    let profiles = metrics::collect_profiles(&first.log, cfg.outputs.profile_step_min);
    write_atomic(&args.out.join("profiles.csv"), |w| {
        writeln!(w, "t,series,value")?;
        for (t, series, value) in &profiles {
            writeln!(w, "{t},{series},{value}")?;
        }
        Ok(())
    })?;
    write_atomic(&args.out.join("agents.jsonl"), |w| {
        for snap in &first.snapshots {
            serde_json::to_writer(&mut *w, snap)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if cfg.outputs.matching_trace {
        let rows = scenario::matching_trace_rows(&first.log)?;
        write_atomic(&args.out.join("matching_trace.csv"), |w| {
            writeln!(
                w,
                "round,t,pool_drivers,pool_passengers,expected_matched,actual_matched,expected_objective_km,actual_objective_km"
            )?;
            for (round, t, pd, pp, em, am, ez, az) in &rows {
                writeln!(w, "{round},{t},{pd},{pp},{em},{am},{ez},{az}")?;
            }
            Ok(())
        })?;
    }

    if !quiet {
        eprintln!(
            "completed {} replication(s) in {:.2} min (wall clock)",
            runs.len(),
            elapsed_min
        );
        print_summary(&reports);
    }
    Ok(())
}

fn print_summary(reports: &[MetricsReport]) {
    let agg = metrics::aggregate(reports);
    eprintln!("metric, mean, stdev");
    for (name, stat) in &agg.metrics {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "n/a".to_string(),
        };
        eprintln!("{name}, {}, {}", fmt(stat.mean), fmt(stat.stdev));
    }
}

fn sweep(args: ScenarioArgs, factor: String, levels: Option<String>, quiet: bool) -> Result<()> {
    let cfg = load(&args)?;
    let factor = SweepFactor::parse(&factor)?;
    let levels: Vec<f64> = match levels {
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| anyhow!("bad level `{x}`"))
            })
            .collect::<Result<_>>()?,
        None => default_levels(factor),
    };
    if levels.is_empty() {
        return Err(ScenarioError::Config("no sweep levels given".into()).into());
    }
    let (net, od) = build_network(&cfg)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let rows = scenario::sweep(&cfg, &net, &od, factor, &levels)?;
    let name = match factor {
        SweepFactor::SupplyLevel => "sweep_supply-level.csv",
        SweepFactor::MatchingWindow => "sweep_matching-window.csv",
    };
    write_atomic(&args.out.join(name), |w| {
        writeln!(w, "level,metric,mean,stdev")?;
        for (level, agg) in &rows {
            for (metric, stat) in &agg.metrics {
                let fmt = |v: Option<f64>| {
                    v.map(|x| x.to_string()).unwrap_or_else(|| "".to_string())
                };
                writeln!(w, "{level},{metric},{},{}", fmt(stat.mean), fmt(stat.stdev))?;
            }
        }
        Ok(())
    })?;
    if !quiet {
        eprintln!("swept {} levels of {name}", rows.len());
    }
    Ok(())
}

fn report(log_path: &Path, out: &Path, quiet: bool) -> Result<()> {
    let text = fs::File::open(log_path)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", log_path.display())))?;
    let records: Vec<LogRecord> = read_jsonl(std::io::BufReader::new(text))
        .map_err(|e| ScenarioError::Config(format!("{}: {e}", log_path.display())))?;
    metrics::audit(&records).map_err(|e| anyhow!("audit: {e}"))?;
    let report = metrics::compute(&records).map_err(|e| anyhow!("metrics: {e}"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("metrics.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        w.write_all(b"\n")
    })?;
    if !quiet {
        print_summary(&[report]);
    }
    Ok(())
}

fn validate(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let (net, od) = build_network(&cfg)?;
    let needed = {
        let s = &cfg.scenario;
        let warm = if s.warmup {
            2.0 * s.warmup_share * (s.passengers + cfg.driver_count()) as f64
        } else {
            0.0
        };
        (s.passengers + cfg.driver_count()) as f64 + warm
    };
    if needed as u64 > od.total_trips {
        return Err(ScenarioError::Config(format!(
            "scenario needs {} trips but the OD table holds {}",
            needed as u64, od.total_trips
        ))
        .into());
    }
    println!(
        "ok: {} nodes, {} links, {} OD trips, {} passengers, {} drivers, {} replication(s)",
        net.node_count(),
        net.link_count(),
        od.total_trips,
        cfg.scenario.passengers,
        cfg.driver_count(),
        cfg.scenario.replications
    );
    Ok(())
}

/// Write through a temp file and rename, so interrupted runs leave no
/// partial outputs.
fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<fs::File>) -> std::io::Result<()>,
{
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = std::io::BufWriter::new(file);
        write(&mut w).with_context(|| format!("writing {}", tmp.display()))?;
        w.flush().with_context(|| format!("flushing {}", tmp.display()))?;
    }
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}
