mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use corridor_planner::mpc::{self, ClosedLoopTrace, MpcConfig};
use corridor_planner::sim::{
    evaluate, generate_with, horizon_sweep, GeneratorConfig, MetricsReport, RunSummary, Scenario,
};
use log::info;

use config::{FileConfig, PlannerFlags, ReasonerKind, RunConfig};

#[derive(Parser)]
#[command(name = "corridor-planner", version, about = "Corridor-constrained MPC for multi-lane driving")]
struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario file and write its trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        planner: PlannerArgs,
    },
    /// Run a generated suite (or a directory of scenario files) and report metrics.
    Batch {
        #[command(flatten)]
        suite: SuiteArgs,
        /// Evaluate every *.json in this directory instead of generating.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        planner: PlannerArgs,
    },
    /// Planning time against horizon length over a generated suite.
    Sweep {
        /// Comma-separated horizon lengths in steps.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[command(flatten)]
        suite: SuiteArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        planner: PlannerArgs,
    },
    /// Write generated scenarios as JSON files.
    Gen {
        #[command(flatten)]
        suite: SuiteArgs,
        #[arg(long)]
        out: PathBuf,
        /// Step length stored in the files.
        #[arg(long)]
        dt: Option<f64>,
    },
}

#[derive(Args, Default)]
struct PlannerArgs {
    /// Horizon K in steps.
    #[arg(long)]
    horizon: Option<usize>,
    /// Step length T [s].
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    w3: Option<f64>,
    #[arg(long)]
    w4: Option<f64>,
    #[arg(long, value_enum)]
    reasoner: Option<ReasonerKind>,
}

impl PlannerArgs {
    fn flags(&self) -> PlannerFlags {
        PlannerFlags {
            horizon: self.horizon,
            dt: self.dt,
            w: [self.w1, self.w2, self.w3, self.w4],
            reasoner: self.reasoner,
        }
    }
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    lanes: Option<usize>,
    /// Obstacles per scenario.
    #[arg(long)]
    obstacles: Option<usize>,
    /// Number of scenarios.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    /// Bad flags, config or input files.
    Config(String),
    /// A run ended in a collision or solver failure.
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("cannot write {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Run(m) => eprintln!("{m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(Failure::Config)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Run { scenario, out, planner } => {
            let cfg = config::resolve(file, &planner.flags(), None).map_err(Failure::Config)?;
            cmd_run(&scenario, &out, &cfg)
        }
        Command::Batch { suite, scenarios, out, planner } => {
            let cfg = resolve_suite(file, &planner, &suite)?;
            let list = match scenarios {
                Some(dir) => load_dir(&dir, cfg.dt)?,
                None => generate(&cfg)?,
            };
            cmd_batch(&list, &out, &cfg)
        }
        Command::Sweep { horizons, suite, out, planner } => {
            let mut cfg = resolve_suite(file, &planner, &suite)?;
            if let Some(h) = horizons {
                cfg.horizons = h;
            }
            if cfg.horizons.is_empty() || cfg.horizons.iter().any(|&k| k < 2) {
                return Err(Failure::Config("--horizons needs one or more values of at least 2".into()));
            }
            let list = generate(&cfg)?;
            cmd_sweep(&list, &out, &cfg)
        }
        Command::Gen { suite, out, dt } => {
            let flags = PlannerArgs {
                dt,
                ..PlannerArgs::default()
            };
            let cfg = resolve_suite(file, &flags, &suite)?;
            let list = generate(&cfg)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            for s in &list {
                let path = out.join(format!("{}.json", s.name));
                fs::write(&path, s.to_json()).map_err(io_err(&path))?;
            }
            println!("wrote {} scenarios to {}", list.len(), out.display());
            Ok(())
        }
    }
}

fn resolve_suite(file: FileConfig, planner: &PlannerArgs, suite: &SuiteArgs) -> Result<RunConfig, Failure> {
    let mut cfg = config::resolve(file, &planner.flags(), suite.seed).map_err(Failure::Config)?;
    let s = &mut cfg.suite;
    s.lanes = suite.lanes.unwrap_or(s.lanes);
    s.obstacles = suite.obstacles.unwrap_or(s.obstacles);
    s.n = suite.n.unwrap_or(s.n);
    Ok(cfg)
}

fn generate(cfg: &RunConfig) -> Result<Vec<Scenario>, Failure> {
    let mut g = GeneratorConfig::default();
    if let Some(t) = cfg.dt {
        g.dt = t;
    }
    let s = cfg.suite;
    info!("generating {} scenarios: {} lanes, {} obstacles, seed {}", s.n, s.lanes, s.obstacles, cfg.seed);
    generate_with(s.lanes, s.obstacles, s.n, cfg.seed, &g).map_err(|e| Failure::Config(e.to_string()))
}

fn load_scenario(path: &Path, dt: Option<f64>) -> Result<Scenario, Failure> {
    let mut s = Scenario::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(t) = dt {
        s.dt = t;
        s.validate()
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(s)
}

fn load_dir(dir: &Path, dt: Option<f64>) -> Result<Vec<Scenario>, Failure> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::Config(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Config(format!("no scenario files in {}", dir.display())));
    }
    paths.iter().map(|p| load_scenario(p, dt)).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn cmd_run(path: &Path, out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let scenario = load_scenario(path, cfg.dt)?;
    let mpc_cfg = MpcConfig {
        // Keep only the first cycle's corridor.
        snapshot_every: usize::MAX,
        ..cfg.mpc.clone()
    };
    info!("running {} for {} s", scenario.name, scenario.duration);
    let trace = mpc::run(&scenario, scenario.duration, &mpc_cfg);
    fs::create_dir_all(out).map_err(io_err(out))?;

    let p = out.join("trace.csv");
    let mut w = create(&p)?;
    trace.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&p))?;
    write_corridors(&trace, out)?;
    write_solver_trace(&trace, &out.join("solver_trace.csv"))?;

    let summary = RunSummary::from_trace(&scenario.name, scenario.ego.desired_speed, &trace);
    let doc = serde_json::json!({
        "scenario": scenario.name,
        "horizon": mpc_cfg.horizon,
        "dt": scenario.dt,
        "final_time": trace.final_time,
        "final_state": trace.final_state,
        "summary": summary,
    });
    let p = out.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&doc).expect("summary serializes")).map_err(io_err(&p))?;

    println!(
        "{}: {} after {:.2} s, mean speed {:.3} m/s, mean cycle {:.3} ms",
        scenario.name,
        trace.status.label(),
        trace.final_time,
        summary.mean_speed,
        summary.mean_solve_ms
    );
    if summary.success {
        Ok(())
    } else {
        Err(Failure::Run(format!("run ended with status {}", trace.status.label())))
    }
}

/// One file per horizon step of the first cycle's corridor.
fn write_corridors(trace: &ClosedLoopTrace, out: &Path) -> Result<(), Failure> {
    let Some(snap) = trace.snapshots.first() else {
        return Ok(());
    };
    let inputs = snap.corridor.inputs();
    let (from, to) = (inputs.ego.x - 20.0, inputs.search.1.max(inputs.ego.x + 20.0));
    let width = snap.corridor.horizon().to_string().len().max(2);
    for (k, step) in snap.corridor.steps().iter().enumerate() {
        let p = out.join(format!("corridor_k{k:0width$}.csv"));
        let mut w = create(&p)?;
        step.write_csv(&mut w, from, to, 481).and_then(|_| w.flush()).map_err(io_err(&p))?;
    }
    Ok(())
}

fn write_solver_trace(trace: &ClosedLoopTrace, p: &Path) -> Result<(), Failure> {
    let mut w = create(p)?;
    let body = (|| -> std::io::Result<()> {
        writeln!(w, "cycle,t,status,iterations,source,reasoner_ms,corridor_ms,solve_ms,total_ms,brake_override,stop_line")?;
        for c in &trace.cycles {
            let stop = c.stop_line.map(|l| format!("{:.4}", l.position)).unwrap_or_default();
            writeln!(
                w,
                "{},{:.4},{},{},{:?},{:.4},{:.4},{:.4},{:.4},{},{}",
                c.cycle,
                c.t,
                c.status.label(),
                c.iterations,
                c.source,
                c.timing.reasoner_ms,
                c.timing.corridor_ms,
                c.timing.solve_ms,
                c.timing.total_ms,
                c.brake_override,
                stop
            )?;
        }
        w.flush()
    })();
    body.map_err(io_err(p))
}

fn write_report(report: &MetricsReport, out: &Path, stem: &str) -> Result<(), Failure> {
    let p = out.join(format!("{stem}.json"));
    fs::write(&p, report.to_json()).map_err(io_err(&p))?;
    let p = out.join(format!("{stem}.csv"));
    let mut w = create(&p)?;
    report.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&p))
}

fn suite_outcome(report: &MetricsReport) -> Result<(), Failure> {
    if report.collisions == 0 && report.solver_failures == 0 {
        Ok(())
    } else {
        Err(Failure::Run(format!(
            "{} collisions and {} solver failures in {} runs",
            report.collisions, report.solver_failures, report.runs
        )))
    }
}

fn cmd_batch(list: &[Scenario], out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    info!("evaluating {} scenarios at K = {}", list.len(), cfg.mpc.horizon);
    let report = evaluate(list, &cfg.mpc);
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_report(&report, out, "report")?;
    println!(
        "runs {}  success_rate {:.4}  collisions {}  pinched {}  solver_failures {}  mean cycle {:.3} ms (p95 {:.3}, max {:.3})",
        report.runs,
        report.success_rate,
        report.collisions,
        report.pinched,
        report.solver_failures,
        report.timing.mean_ms,
        report.timing.p95_ms,
        report.timing.max_ms
    );
    suite_outcome(&report)
}

fn cmd_sweep(list: &[Scenario], out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    info!("sweeping horizons {:?} over {} scenarios", cfg.horizons, list.len());
    let reports = horizon_sweep(list, &cfg.mpc, &cfg.horizons);
    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join("sweep.csv");
    let mut w = create(&p)?;
    let dt = cfg.dt.unwrap_or(GeneratorConfig::default().dt);
    let table = (|| -> std::io::Result<()> {
        writeln!(w, "horizon,horizon_s,cycles,mean_ms,p95_ms,max_ms,success_rate")?;
        for r in &reports {
            let t = r.timing;
            writeln!(
                w,
                "{},{:.2},{},{:.4},{:.4},{:.4},{:.4}",
                t.horizon,
                t.horizon as f64 * dt,
                t.cycles,
                t.mean_ms,
                t.p95_ms,
                t.max_ms,
                r.success_rate
            )?;
        }
        w.flush()
    })();
    table.map_err(io_err(&p))?;
    let p = out.join("sweep.json");
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    fs::write(&p, json).map_err(io_err(&p))?;

    println!("{:>4} {:>7} {:>10} {:>10} {:>10} {:>8}", "K", "K*T [s]", "mean [ms]", "p95 [ms]", "max [ms]", "success");
    for r in &reports {
        let t = r.timing;
        println!(
            "{:>4} {:>7.2} {:>10.3} {:>10.3} {:>10.3} {:>8.4}",
            t.horizon,
            t.horizon as f64 * dt,
            t.mean_ms,
            t.p95_ms,
            t.max_ms,
            r.success_rate
        );
    }
    if let (Some(a), Some(b)) = (reports.first(), reports.last()) {
        if reports.len() > 1 && a.timing.mean_ms > 0.0 {
            println!(
                "t(K={})/t(K={}) = {:.3}",
                b.timing.horizon,
                a.timing.horizon,
                b.timing.mean_ms / a.timing.mean_ms
            );
        }
    }
    reports.iter().try_for_each(suite_outcome)
}
