//! `protps` command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given by `--config`, then individual flags. The resolved config is written
//! to `config.json` in every run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use protps::artifacts::{write_eval_dir, write_run_dir};
use protps::checkpoint::read_checkpoint;
use protps::config::{RunConfig, Scenario};
use protps::embedding_io::{gen_synthetic, read_dataset, write_dataset, StreamMode, TaskStream};
use protps::encoders::ToyTextEncoder;
use protps::evaluator::{trajectory_point, EvalReport, InferenceConfig};
use protps::scenarios::{prototypes_only_baseline, run_cdc, run_cdi, run_ci};

const AFTER_HELP: &str =
    "Precedence: flags override values from --config, which override built-in defaults.\n\
Exit codes: 0 success, 1 usage or configuration error, 2 data error.";

#[derive(Parser)]
#[command(name = "protps", version, about = "Prototype-guided prompt selection for continual learning", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset.
    Gen(GenArgs),
    /// Train a scenario and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train one run per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Print the trajectory table of a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
#[command(after_help = AFTER_HELP)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Stream shape: ci, cdc or cdi.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// ci, cdc or cdi.
    #[arg(long)]
    scenario: Option<String>,
    /// Dataset files. CDC takes two (first, second) or one file split in half.
    /// Without data, a stream is generated from the synthetic settings.
    #[arg(long, value_delimiter = ',')]
    data: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_pp: Option<f64>,
    /// Prompt length M.
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    sample_old: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CDC evaluation: i2c or i_plus_c.
    #[arg(long)]
    cdc_eval: Option<String>,
    /// Keep Gaussian prompt init in CDC instead of copying earlier prompts.
    #[arg(long)]
    no_transfer: bool,
}

#[derive(Args)]
#[command(after_help = AFTER_HELP)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(after_help = AFTER_HELP)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config supplying inference settings (aggregation, selection).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = AFTER_HELP)]
struct SweepArgs {
    /// lambda_pp or M.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
    /// Runs to train at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) => m,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

/// Classifies a core error, prefixing the path it concerns when there is one.
fn fail(err: protps::Error, path: Option<&Path>) -> Failure {
    let msg = match path {
        Some(p) => format!("{}: {err}", p.display()),
        None => err.to_string(),
    };
    if err.is_data_error() {
        Failure::Data(msg)
    } else {
        Failure::Config(msg)
    }
}

fn out_err(path: &Path) -> impl Fn(protps::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("cannot write {}: {e}", path.display()))
}

/// Parses a flag value through the same names the config file uses.
fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> Outcome<T> {
    serde_json::from_value(json!(value))
        .map_err(|_| Failure::Config(format!("invalid value '{value}' for --{flag}")))
}

fn load_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_json(&text).map_err(|e| fail(e, Some(path)))
}

fn resolve(flags: &RunFlags) -> Outcome<RunConfig> {
    let mut cfg = load_config(flags.config.as_deref())?;
    if let Some(s) = &flags.scenario {
        cfg.scenario = parse_enum("scenario", s)?;
    }
    if let Some(s) = &flags.cdc_eval {
        cfg.cdc_eval = parse_enum("cdc-eval", s)?;
    }
    let t = &mut cfg.train;
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.lr {
        t.lr0 = v;
    }
    if let Some(v) = flags.lambda_pp {
        t.lambda_pp = v;
    }
    if let Some(v) = flags.prompt_len {
        t.prompt_len = v;
    }
    if let Some(v) = flags.sample_old {
        t.sample_old = v;
    }
    if let Some(v) = flags.seed {
        t.seed = v;
    }
    if flags.no_transfer {
        t.cdc_transfer = false;
    }
    cfg.validate().map_err(|e| fail(e, None))?;
    Ok(cfg)
}

fn load_stream(path: &Path) -> Outcome<TaskStream> {
    let ds = read_dataset(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    TaskStream::from_dataset(ds).map_err(|e| fail(e, Some(path)))
}

enum Data {
    Single(TaskStream),
    Pair(TaskStream, TaskStream),
}

fn scenario_mode(s: Scenario) -> StreamMode {
    match s {
        Scenario::Ci => StreamMode::Ci,
        Scenario::Cdc => StreamMode::Cdc,
        Scenario::Cdi => StreamMode::Cdi,
    }
}

fn load_data(cfg: &RunConfig, paths: &[PathBuf]) -> Outcome<Data> {
    let streams: Vec<TaskStream> = if paths.is_empty() {
        vec![gen_synthetic(&cfg.synth, scenario_mode(cfg.scenario)).map_err(|e| fail(e, None))?]
    } else {
        paths
            .iter()
            .map(|p| load_stream(p))
            .collect::<Outcome<_>>()?
    };
    let mut streams = streams.into_iter();
    match (cfg.scenario, streams.len()) {
        (Scenario::Cdc, 1) => {
            let s = streams.next().unwrap();
            if s.tasks.len() < 2 {
                return Err(Failure::Data(format!(
                    "cross-dataset run needs at least 2 tasks in one file, found {}",
                    s.tasks.len()
                )));
            }
            let (a, b) = s.split_at(s.tasks.len() / 2);
            Ok(Data::Pair(a, b))
        }
        (Scenario::Cdc, 2) => Ok(Data::Pair(streams.next().unwrap(), streams.next().unwrap())),
        (Scenario::Cdc, n) => Err(Failure::Config(format!(
            "cdc takes one or two dataset files, got {n}"
        ))),
        (_, 1) => Ok(Data::Single(streams.next().unwrap())),
        (_, n) => Err(Failure::Config(format!(
            "expected one dataset file, got {n}"
        ))),
    }
}

/// Trains one configuration on `data` and writes its run directory.
/// Returns the last accuracy.
fn run_to_dir(cfg: &RunConfig, data: &Data, out: &Path, paths: &[PathBuf]) -> Outcome<f64> {
    let data_paths: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let (run, extra) = match (cfg.scenario, data) {
        (Scenario::Cdc, Data::Pair(a, b)) => {
            let r = run_cdc(a, b, &cfg.train, cfg.cdc_eval).map_err(|e| fail(e, None))?;
            let base = prototypes_only_baseline(b).map_err(|e| fail(e, None))?;
            let extra = json!({
                "data": data_paths,
                "i2c_last_accuracy": r.i2c_last,
                "standalone_last_accuracy": r.standalone.report.last_accuracy,
                "baseline_last_accuracy": base.last_accuracy,
            });
            (r.run, extra)
        }
        (Scenario::Ci | Scenario::Cdi, Data::Single(s)) => {
            let r = if cfg.scenario == Scenario::Ci {
                run_ci(s, &cfg.train)
            } else {
                run_cdi(s, &cfg.train)
            }
            .map_err(|e| fail(e, None))?;
            let base = prototypes_only_baseline(s).map_err(|e| fail(e, None))?;
            let extra = json!({
                "data": data_paths,
                "baseline_last_accuracy": base.last_accuracy,
            });
            (r, extra)
        }
        _ => {
            return Err(Failure::Config(
                "dataset count does not match the scenario".into(),
            ))
        }
    };
    write_run_dir(out, cfg, &run, extra).map_err(out_err(out))?;
    Ok(run.report.last_accuracy)
}

fn cmd_gen(args: GenArgs) -> Outcome<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = &args.mode {
        cfg.stream_mode = parse_enum("mode", m)?;
    }
    if let Some(s) = args.seed {
        cfg.synth.seed = s;
    }
    let stream = gen_synthetic(&cfg.synth, cfg.stream_mode).map_err(|e| fail(e, None))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| out_err(&args.out)(e.into()))?;
    }
    write_dataset(&stream.to_dataset(), &args.out).map_err(out_err(&args.out))?;
    println!(
        "wrote {} tasks, {} classes to {}",
        stream.tasks.len(),
        stream.class_ids().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Outcome<()> {
    let cfg = resolve(&args.run)?;
    let data = load_data(&cfg, &args.run.data)?;
    let last = run_to_dir(&cfg, &data, &args.out, &args.run.data)?;
    println!(
        "last accuracy {last:.4}; run written to {}",
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Outcome<()> {
    let cfg = load_config(args.config.as_deref())?;
    let ckpt = read_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::Data(format!("{}: {e}", args.checkpoint.display())))?;
    let stream = load_stream(&args.data)?;
    let banks = &ckpt.banks;
    if banks.dim() != stream.d {
        return Err(Failure::Data(format!(
            "{}: dimension {} does not match checkpoint dimension {}",
            args.data.display(),
            stream.d,
            banks.dim()
        )));
    }
    let enc = ToyTextEncoder::new(banks.dim(), banks.prompt_len(), ckpt.encoder_seed)
        .map_err(|e| fail(e, None))?;
    let known: Vec<Vec<_>> = stream
        .tasks
        .iter()
        .map(|t| {
            t.test
                .iter()
                .filter(|r| banks.index_of(r.class_id).is_some())
                .cloned()
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect();
    if known.is_empty() {
        return Err(Failure::Data(format!(
            "{}: no test records of classes in the checkpoint",
            args.data.display()
        )));
    }
    let groups: Vec<&[_]> = known.iter().map(Vec::as_slice).collect();
    let inference = InferenceConfig::from(&cfg.train);
    let mut report = EvalReport::default();
    for t in 0..groups.len() {
        let p = trajectory_point(banks, &enc, &stream.tokens, inference, t, &groups[..=t])
            .map_err(|e| fail(e, Some(&args.data)))?;
        report.push(p);
    }
    let extra = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "data": args.data.display().to_string(),
        "num_classes": banks.len(),
    });
    write_eval_dir(&args.out, &report, extra).map_err(out_err(&args.out))?;
    println!(
        "accuracy {:.4}; written to {}",
        report.last_accuracy,
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Outcome<()> {
    let base = resolve(&args.run)?;
    let param = args.param.as_str();
    let configs: Vec<(String, RunConfig)> = args
        .values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            match param {
                "lambda_pp" => cfg.train.lambda_pp = v,
                "M" | "prompt_len" => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(Failure::Config(format!(
                            "M must be a positive integer, got {v}"
                        )));
                    }
                    cfg.train.prompt_len = v as usize;
                }
                other => {
                    return Err(Failure::Config(format!(
                        "unknown sweep parameter '{other}' (expected lambda_pp or M)"
                    )))
                }
            }
            cfg.validate().map_err(|e| fail(e, None))?;
            Ok((format!("{param}_{v}"), cfg))
        })
        .collect::<Outcome<_>>()?;
    let data = load_data(&base, &args.run.data)?;

    let next = AtomicUsize::new(0);
    let workers = args.parallel.clamp(1, configs.len().max(1));
    let mut results: Vec<(usize, Outcome<f64>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some((name, cfg)) = configs.get(i) else {
                            break;
                        };
                        let dir = args.out.join(name);
                        done.push((i, run_to_dir(cfg, &data, &dir, &args.run.data)));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);

    let mut table = format!("{param},last_accuracy\n");
    for (i, res) in results {
        let acc = res?;
        table.push_str(&format!("{},{acc:.6}\n", args.values[i]));
        println!("{param}={} last accuracy {acc:.4}", args.values[i]);
    }
    let path = args.out.join("sweep.csv");
    fs::write(&path, table).map_err(|e| out_err(&path)(e.into()))?;
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Outcome<()> {
    let path = args.run.join("trajectory.csv");
    let text =
        fs::read_to_string(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Failure::Data(format!("{}: empty file", path.display())))?
        .split(',')
        .collect();
    let row = |cells: &[&str]| cells.iter().map(|c| format!("{c:>11}")).collect::<String>();
    println!("{}", row(&header));
    for line in lines {
        let cells: Vec<&str> = line
            .split(',')
            .map(|c| if c.is_empty() { "-" } else { c })
            .collect();
        println!("{}", row(&cells));
    }
    let summary_path = args.run.join("summary.json");
    if let Ok(s) = fs::read_to_string(&summary_path) {
        let v: serde_json::Value = serde_json::from_str(&s)
            .map_err(|e| Failure::Data(format!("{}: {e}", summary_path.display())))?;
        for key in [
            "last_accuracy",
            "forward_transfer",
            "baseline_last_accuracy",
        ] {
            if let Some(x) = v.get(key).and_then(serde_json::Value::as_f64) {
                println!("{key}: {x:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
