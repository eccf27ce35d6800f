//! Command-line front end: synthesize sensor data, train the ensemble,
//! sweep the estimator, run closed-loop scenarios singly or in batches, and
//! recompute metrics from record files.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use headway::harness::{
    batch_run, compute_metrics, lead_trajectories, load_config, read_records, run_with,
    write_records, MetricsParams, ScenarioConfig, DEFAULT_MIN_SPEED_STD,
};
use headway::perception::{
    build_ensemble, ensemble_estimate, load_ensemble, regressor_forward, save_ensemble,
    synth_observe, EnsemblePlan, SensorModel, TrainingSet,
};
use headway::smpc::{QpProblem, QpSolution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "headway",
    version,
    about = "Car-following control with a learned stereo range sensor: \
             data synthesis, ensemble training, closed-loop simulation, and safety metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled training CSV by sweeping true headways through
    /// the stereo sensor model.
    GenData(GenDataArgs),
    /// Train a heteroscedastic deep ensemble on a training CSV and save it.
    Train(TrainArgs),
    /// Sweep true headways and report per-member and fused estimates as CSV.
    EvalEnsemble(EvalEnsembleArgs),
    /// Run one closed-loop scenario; writes records.csv and metrics.json.
    Simulate(SimulateArgs),
    /// Run one scenario per lead trajectory and aggregate the results.
    Batch(BatchArgs),
    /// Recompute a metrics report from a records CSV.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Number of labeled observations.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Observation-noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observe through the out-of-distribution distortion.
    #[arg(long)]
    ood: bool,
    /// Scenario TOML supplying the sensor model; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving the member files and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Ensemble size.
    #[arg(long, default_value_t = 6)]
    members: usize,
    /// Training epochs per member.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Base seed for member initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario TOML supplying the sensor model; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalEnsembleArgs {
    /// Ensemble manifest produced by train.
    #[arg(long)]
    ensemble: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Sweep start (m); defaults to the sensor's training floor.
    #[arg(long)]
    lo: Option<f64>,
    /// Sweep end (m); defaults to the sensor's training ceiling.
    #[arg(long)]
    hi: Option<f64>,
    /// Number of sweep points.
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Observation-noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observe through the out-of-distribution distortion.
    #[arg(long)]
    ood: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for records.csv, metrics.json, and QP dumps.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Force out-of-distribution observations.
    #[arg(long)]
    ood: bool,
    /// Apply risk levels above 0.5 verbatim (margins go negative).
    #[arg(long)]
    allow_negative_margin: bool,
    /// Write one plain-text QP dump per solve into <out>/qp.
    #[arg(long)]
    dump_qp: bool,
}

#[derive(Args)]
struct BatchArgs {
    /// Scenario TOML used as the template for every run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for per-run files, summary.csv, and histograms.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Force out-of-distribution observations.
    #[arg(long)]
    ood: bool,
    /// Apply risk levels above 0.5 verbatim (margins go negative).
    #[arg(long)]
    allow_negative_margin: bool,
    /// Drop lead traces whose speed standard deviation does not exceed this
    /// (m/s).
    #[arg(long, default_value_t = DEFAULT_MIN_SPEED_STD)]
    min_std: f64,
}

#[derive(Args)]
struct MetricsArgs {
    /// Records CSV produced by simulate or batch.
    #[arg(long)]
    records: PathBuf,
    /// Where to write the JSON report; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Set speed the run tracked (m/s).
    #[arg(long)]
    v_s: f64,
    /// Standstill distance of the safety floor (m).
    #[arg(long, default_value_t = 15.0)]
    d_s: f64,
    /// Time-headway coefficient of the safety floor (s).
    #[arg(long, default_value_t = 0.0)]
    t_s: f64,
    /// Command update period of the run (s).
    #[arg(long, default_value_t = 0.5)]
    replan_period: f64,
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::EvalEnsemble(args) => eval_ensemble(args),
        Command::Simulate(args) => simulate(args),
        Command::Batch(args) => batch(args),
        Command::Metrics(args) => metrics(args),
    }
}

fn sensor_from(config: Option<&Path>) -> Result<SensorModel> {
    match config {
        Some(path) => Ok(load_config(path)?.sensor),
        None => Ok(SensorModel::default()),
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    let sensor = sensor_from(args.config.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut pairs = Vec::with_capacity(args.count);
    for d in linspace(sensor.d_lo, sensor.d_hi, args.count) {
        pairs.push((d, synth_observe(&sensor, d, args.ood, &mut rng)?));
    }
    let set = TrainingSet::new(pairs, sensor.d_lo, sensor.d_hi)?;
    let mut out = Vec::new();
    set.write_csv(&mut out)?;
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} labeled observations over [{}, {}] m to {}",
        set.len(),
        sensor.d_lo,
        sensor.d_hi,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let sensor = sensor_from(args.config.as_deref())?;
    let file = fs::File::open(&args.data)
        .with_context(|| format!("opening {}", args.data.display()))?;
    let set = TrainingSet::read_csv(std::io::BufReader::new(file), sensor.d_lo, sensor.d_hi)?;
    if set.feature_dim() != sensor.feature_dim {
        bail!(
            "{} carries {} features per camera but the sensor model expects {}",
            args.data.display(),
            set.feature_dim(),
            sensor.feature_dim
        );
    }
    let plan = EnsemblePlan {
        members: args.members,
        epochs: args.epochs,
        base_seed: args.seed,
        ..EnsemblePlan::default()
    };
    log::info!("training {} members on {} rows", plan.members, set.len());
    let members = build_ensemble(&set, &plan)?;
    let manifest = save_ensemble(&args.out, &members, &sensor)?;
    println!(
        "trained {} members on {} rows; manifest at {}",
        members.len(),
        set.len(),
        manifest.display()
    );
    Ok(())
}

fn eval_ensemble(args: EvalEnsembleArgs) -> Result<()> {
    if args.points == 0 {
        bail!("--points must be at least 1");
    }
    let (members, sensor) = load_ensemble(&args.ensemble)?;
    let lo = args.lo.unwrap_or(sensor.d_lo);
    let hi = args.hi.unwrap_or(sensor.d_hi);
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        bail!("need 0 < lo <= hi, got [{lo}, {hi}]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = String::from("d,p_fused,var_fused");
    for i in 1..=members.len() {
        let _ = write!(out, ",m{i}_p,m{i}_var");
    }
    out.push('\n');
    for d in linspace(lo, hi, args.points) {
        let obs = synth_observe(&sensor, d, args.ood, &mut rng)?;
        let fused = ensemble_estimate(&members, &obs)?;
        let _ = write!(out, "{d},{},{}", fused.p, fused.var);
        for m in &members {
            let est = regressor_forward(m, &obs)?;
            let _ = write!(out, ",{},{}", est.p, est.var);
        }
        out.push('\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "swept {} headways over [{lo}, {hi}] m ({}) to {}",
        args.points,
        if args.ood { "out-of-distribution" } else { "in-distribution" },
        args.out.display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut ScenarioConfig, seed: Option<u64>, ood: bool, negative: bool) {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if ood {
        cfg.ood = true;
    }
    if negative {
        cfg.mpc.allow_negative_margin = true;
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.ood, args.allow_negative_margin);
    let mut traces = lead_trajectories(&cfg)?;
    if traces.len() != 1 {
        bail!(
            "simulate runs exactly one lead trajectory, the scenario provides {}; use batch",
            traces.len()
        );
    }
    let (trace_name, trace) = traces.pop().expect("length checked");
    let (members, _) = load_ensemble(&cfg.ensemble)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let qp_dir = args.out.join("qp");
    let mut dump_failure: Option<anyhow::Error> = None;
    let mut dump = |index: usize, problem: &QpProblem, solution: &QpSolution| {
        if dump_failure.is_some() {
            return;
        }
        let path = qp_dir.join(format!("solve_{index:04}.txt"));
        let result = (|| -> std::io::Result<()> {
            let mut buf = Vec::new();
            problem.write_dump(&mut buf)?;
            solution.write_dump(problem, &mut buf)?;
            fs::write(&path, buf)
        })();
        if let Err(e) = result {
            dump_failure = Some(anyhow::anyhow!("writing {}: {e}", path.display()));
        }
    };
    let observer: Option<&mut dyn FnMut(usize, &QpProblem, &QpSolution)> = if args.dump_qp {
        fs::create_dir_all(&qp_dir)
            .with_context(|| format!("creating {}", qp_dir.display()))?;
        Some(&mut dump)
    } else {
        None
    };

    log::info!("running trace {trace_name} for {} s", cfg.duration);
    let result = run_with(&cfg, &trace, &members, observer)?;
    if let Some(e) = dump_failure {
        return Err(e);
    }

    let records_path = args.out.join("records.csv");
    write_records(&records_path, &result.records)?;
    let metrics_path = args.out.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&result.metrics)? + "\n")
        .with_context(|| format!("writing {}", metrics_path.display()))?;

    println!(
        "simulated {:.2} s: v_s = {:.3} m/s, min headway = {:.3} m, collision = {}, \
         time-to-safety = {:.2} s (reached = {}), fallbacks = {}",
        result.records.last().map_or(0.0, |r| r.t),
        result.v_s,
        result.metrics.min_headway,
        result.metrics.collision,
        result.metrics.time_to_safety,
        result.metrics.time_to_safety_reached,
        result.fallback_count,
    );
    println!("records at {}, metrics at {}", records_path.display(), metrics_path.display());
    if let Some(msg) = result.aborted {
        bail!("run aborted early: {msg} (partial records were kept)");
    }
    Ok(())
}

fn batch(args: BatchArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.ood, args.allow_negative_margin);
    let traces = lead_trajectories(&cfg)?;
    let total = traces.len();
    log::info!("batching {total} candidate traces");
    let summary = batch_run(&cfg, traces, args.min_std, &args.out)?;
    for row in &summary.rows {
        if let Some(e) = &row.error {
            println!("run {:03} ({}): {e}", row.index, row.name);
        }
    }
    println!(
        "{} of {} traces passed the filter; {} completed, {} collisions; summary at {}",
        summary.rows.len(),
        total,
        summary.completed(),
        summary.collisions(),
        args.out.join("summary.csv").display()
    );
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let params = MetricsParams {
        d_s: args.d_s,
        t_s: args.t_s,
        replan_period: args.replan_period,
        v_s: args.v_s,
    };
    let report = compute_metrics(&records, &params)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => {
            fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
            println!("metrics at {}", path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}
