//! `swarmtrack` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use swarmtrack::calibration::{ransac_affine_fit_with, RansacConfig};
use swarmtrack::eventlog::{self, LogRecord};
use swarmtrack::metrics::{pair_errors, MetricsReport};
use swarmtrack::pipeline::PipelineStats;
use swarmtrack::protocol::ProtocolParams;
use swarmtrack::sim::bench::{measure_frequency, protocol_bench, BenchReport, FrequencyPoint};
use swarmtrack::sim::config::{ConfigError, ScenarioConfig, BUNDLED};
use swarmtrack::sim::network::NetStats;
use swarmtrack::sim::run::{evaluate, replay_config, simulate, truth_samples, Evaluation, RangeStats, RunError};

#[derive(Parser)]
#[command(name = "swarmtrack", version, about = "Relative tracking of UWB/IMU constellations")]
struct Cli {
    /// Log pipeline diagnostics to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and run the tracking pipeline over it.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Publish the EKF-only variant.
        #[arg(long)]
        disable_mds: bool,
        /// Override the scenario duration, s.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, env = "SWARMTRACK_OUT", default_value = "swarmtrack-out")]
        out: PathBuf,
    },
    /// Re-run the pipeline over a recorded event log.
    Replay {
        log: PathBuf,
        #[arg(long, env = "SWARMTRACK_OUT", default_value = "swarmtrack-out")]
        out: PathBuf,
    },
    /// Fit the affine range calibration from `true,raw` distance pairs.
    Calibrate {
        pairs: PathBuf,
        /// Calibration file to write.
        #[arg(long, default_value = "calibration.toml")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure round rates and cohort-change timing of the ranging protocol.
    ProtocolBench {
        /// Scenario with a join/leave schedule.
        #[arg(default_value = "protocol_fig6")]
        config: String,
        /// Width of the rate trace bins, s.
        #[arg(long, default_value_t = 0.25)]
        bin: f64,
        #[arg(long, env = "SWARMTRACK_OUT", default_value = "swarmtrack-out")]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) => Self::usage(e.to_string()),
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            disable_mds,
            duration,
            out,
        } => cmd_run(&config, seed, disable_mds, duration, &out),
        Command::Replay { log, out } => cmd_replay(&log, &out),
        Command::Calibrate { pairs, out, seed } => cmd_calibrate(&pairs, &out, seed),
        Command::ProtocolBench { config, bin, out } => cmd_protocol_bench(&config, bin, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// A scenario file, or a bundled scenario name when no such file exists.
fn load_config(spec: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(cfg) = ScenarioConfig::bundled(spec) {
            return Ok(cfg);
        }
    }
    ScenarioConfig::load(path).map_err(|e| match e {
        ConfigError::NotFound(p) => Failure::usage(format!(
            "config not found: {p} (bundled scenarios: {})",
            BUNDLED.join(", ")
        )),
        other => Failure::usage(other.to_string()),
    })
}

#[derive(Serialize)]
struct VariantSummary {
    variant: &'static str,
    rmse: f64,
    distance_rmse: f64,
    samples: usize,
}

#[derive(Serialize)]
struct RunReport<'a> {
    scenario: &'a str,
    seed: u64,
    config_hash: String,
    published: &'static str,
    variants: Vec<VariantSummary>,
    metrics: &'a MetricsReport,
    pipeline: &'a PipelineStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    network: Option<NetStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ranges: Option<RangeStats>,
    files: Vec<String>,
}

fn variant_name(mds: bool) -> &'static str {
    if mds {
        "ekf+mds"
    } else {
        "ekf-only"
    }
}

fn cmd_run(spec: &str, seed: Option<u64>, disable_mds: bool, duration: Option<f64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(spec)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
    if disable_mds {
        cfg.pipeline.mds = false;
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let sim = simulate(&cfg)?;
    fs::create_dir_all(out)?;
    let log_path = out.join("events.jsonl");
    eventlog::write_jsonl(&sim.records, BufWriter::new(File::create(&log_path)?))
        .map_err(|e| Failure::runtime(e.to_string()))?;
    write_outputs(&cfg, &sim.records, Some((sim.net, sim.ranges)), out)
}

fn cmd_replay(log: &Path, out: &Path) -> Result<(), Failure> {
    let file = File::open(log).map_err(|e| Failure::usage(format!("cannot open {}: {e}", log.display())))?;
    let records = eventlog::read_jsonl(BufReader::new(file)).map_err(|e| Failure::usage(e.to_string()))?;
    let cfg = replay_config(&records).map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(out)?;
    write_outputs(&cfg, &records, None, out)
}

fn write_outputs(
    cfg: &ScenarioConfig,
    records: &[LogRecord],
    sim_stats: Option<(NetStats, RangeStats)>,
    out: &Path,
) -> Result<(), Failure> {
    let primary = evaluate(cfg, records, cfg.pipeline.mds);
    let other = evaluate(cfg, records, !cfg.pipeline.mds);
    let (with_mds, ekf_only) = if primary.mds { (&primary, &other) } else { (&other, &primary) };

    let mut layouts = BufWriter::new(File::create(out.join("layouts.jsonl"))?);
    for s in &primary.snapshots {
        serde_json::to_writer(&mut layouts, s).map_err(|e| Failure::runtime(e.to_string()))?;
        layouts.write_all(b"\n")?;
    }
    layouts.flush()?;
    write_truth_csv(&primary, records, &out.join("truth.csv"))?;

    let files = ["layouts.jsonl", "truth.csv", "metrics.json", "report.md"]
        .iter()
        .map(|f| out.join(f).display().to_string())
        .collect();
    let summary = |e: &Evaluation| VariantSummary {
        variant: variant_name(e.mds),
        rmse: e.metrics.rmse,
        distance_rmse: e.metrics.distance_rmse,
        samples: e.metrics.samples,
    };
    let report = RunReport {
        scenario: &cfg.name,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        published: variant_name(primary.mds),
        variants: vec![summary(with_mds), summary(ekf_only)],
        metrics: &primary.metrics,
        pipeline: &primary.stats,
        network: sim_stats.map(|s| s.0),
        ranges: sim_stats.map(|s| s.1),
        files,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(out.join("metrics.json"), json + "\n")?;
    fs::write(out.join("report.md"), run_markdown(&report, with_mds, ekf_only))?;
    println!(
        "{}: {} rmse {:.4} m (ekf+mds {:.4} m, ekf-only {:.4} m) -> {}",
        cfg.name,
        report.published,
        primary.metrics.rmse,
        with_mds.metrics.rmse,
        ekf_only.metrics.rmse,
        out.display()
    );
    Ok(())
}

fn write_truth_csv(eval: &Evaluation, records: &[LogRecord], path: &Path) -> Result<(), Failure> {
    let truth = truth_samples(records);
    let (errors, _) = pair_errors(&eval.snapshots, &truth, 0.0);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,pair_i,pair_j,est_x,est_y,est_z,true_x,true_y,true_z,err")?;
    for e in errors {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            e.t, e.i, e.j, e.estimate.x, e.estimate.y, e.estimate.z, e.truth.x, e.truth.y, e.truth.z, e.err
        )?;
    }
    w.flush()?;
    Ok(())
}

fn run_markdown(r: &RunReport, with_mds: &Evaluation, ekf_only: &Evaluation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", r.scenario);
    let _ = writeln!(s, "- seed: {}", r.seed);
    let _ = writeln!(s, "- config hash: `{}`", r.config_hash);
    let _ = writeln!(s, "- published variant: {}", r.published);
    let _ = writeln!(s, "- warmup excluded: {} s\n", r.metrics.warmup);
    let _ = writeln!(s, "## Relative position error\n");
    let _ = writeln!(s, "| variant | RMSE (m) | distance RMSE (m) | samples |");
    let _ = writeln!(s, "|---|---|---|---|");
    for v in &r.variants {
        let _ = writeln!(s, "| {} | {:.4} | {:.4} | {} |", v.variant, v.rmse, v.distance_rmse, v.samples);
    }
    let ratio = ekf_only.metrics.rmse / with_mds.metrics.rmse;
    let _ = writeln!(s, "\nEKF-only / EKF+MDS ratio: {ratio:.2}\n");
    let _ = writeln!(s, "## Per pair ({})\n", r.published);
    let _ = writeln!(s, "| pair | RMSE (m) | distance RMSE (m) |");
    let _ = writeln!(s, "|---|---|---|");
    for p in &r.metrics.per_pair {
        let _ = writeln!(s, "| {}-{} | {:.4} | {:.4} |", p.i, p.j, p.rmse, p.distance_rmse);
    }
    let _ = writeln!(s, "\n## Error over time\n");
    let _ = writeln!(s, "| from (s) | ekf+mds (m) | ekf-only (m) |");
    let _ = writeln!(s, "|---|---|---|");
    for (a, b) in with_mds.metrics.trace.iter().zip(&ekf_only.metrics.trace) {
        let _ = writeln!(s, "| {:.0} | {:.4} | {:.4} |", a.t_start, a.rmse, b.rmse);
    }
    let p = r.pipeline;
    let _ = writeln!(s, "\n## Pipeline\n");
    let _ = writeln!(s, "- range updates: {}, rejected by gate: {}", p.updates, p.rejected_ranges);
    let _ = writeln!(s, "- rounds: {}, refinements: {}", p.rounds, p.refinements);
    let _ = writeln!(s, "- coasting predictions: {}", p.coasting_predictions);
    let _ = writeln!(s, "- late events dropped: {}", p.late_events);
    if let Some(n) = &r.ranges {
        let _ = writeln!(s, "- transactions: {}, NLOS: {}, beyond model range: {}", n.transactions, n.nlos, n.out_of_model);
    }
    let _ = writeln!(s, "\n## Files\n");
    for f in &r.files {
        let _ = writeln!(s, "- {f}");
    }
    s
}

fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => pairs.push(p),
            None if pairs.is_empty() && n == 0 => continue,
            None => return Err(Failure::usage(format!("{}: line {}: expected `true,raw`", path.display(), n + 1))),
        }
    }
    Ok(pairs)
}

fn cmd_calibrate(pairs: &Path, out: &Path, seed: u64) -> Result<(), Failure> {
    let data = read_pairs(pairs)?;
    let cfg = RansacConfig {
        seed,
        ..RansacConfig::default()
    };
    let report = ransac_affine_fit_with(&data, &cfg).map_err(|e| Failure::runtime(e.to_string()))?;
    report
        .calibration
        .save(out)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let c = report.calibration;
    println!(
        "a = {:.5}, b = {:.4} m, sigma_d = {:.4} m, {} of {} pairs inliers -> {}",
        c.a,
        c.b,
        c.sigma_d,
        report.inliers.len(),
        data.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    scenario: &'a str,
    config_hash: String,
    frequency: Vec<FrequencyPoint>,
    schedule: BenchReport,
}

fn cmd_protocol_bench(spec: &str, bin: f64, out: &Path) -> Result<(), Failure> {
    if !(bin > 0.0) {
        return Err(Failure::usage("--bin must be positive"));
    }
    let cfg = load_config(spec)?;
    let params: ProtocolParams = cfg.protocol;
    let frequency: Vec<FrequencyPoint> = (2..=8).map(|n| measure_frequency(&params, n, 2.0)).collect();
    let schedule = protocol_bench(&cfg, bin)?;
    let output = BenchOutput {
        scenario: &cfg.name,
        config_hash: cfg.hash(),
        frequency,
        schedule,
    };
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&output).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(out.join("bench.json"), json + "\n")?;
    let md = bench_markdown(&output);
    fs::write(out.join("bench.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn bench_markdown(b: &BenchOutput) -> String {
    let mut s = String::new();
    let p = &b.schedule.params;
    let _ = writeln!(s, "# Protocol bench: {}\n", b.scenario);
    let _ = writeln!(s, "- config hash: `{}`", b.config_hash);
    let _ = writeln!(
        s,
        "- t_msg {:.3} ms, overhead {:.3} ms, watchdog {:.0} ms\n",
        p.t_msg * 1e3,
        p.round_overhead * 1e3,
        p.watchdog * 1e3
    );
    let _ = writeln!(s, "| nodes | measured (Hz) | nominal (Hz) | error |");
    let _ = writeln!(s, "|---|---|---|---|");
    for f in &b.frequency {
        let _ = writeln!(s, "| {} | {:.2} | {:.2} | {:.3}% |", f.n, f.measured, f.ideal, 100.0 * f.rel_error);
    }
    let _ = writeln!(s, "\n| t (s) | node | change | nodes | settle (ms) | rounds |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for c in &b.schedule.changes {
        let kind = serde_json::to_value(c.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let settle = c.settle_time.map_or("-".to_string(), |t| format!("{:.1}", t * 1e3));
        let rounds = c.settle_rounds.map_or("-".to_string(), |r| r.to_string());
        let _ = writeln!(
            s,
            "| {:.2} | {} | {} | {}->{} | {} | {} |",
            c.t, c.node, kind, c.n_before, c.n_after, settle, rounds
        );
    }
    s
}
