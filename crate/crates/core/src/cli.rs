//! Command-line front end: `train`, `eval`, `trace`, `gen` and `params`.

use std::collections::HashMap;
use std::error::Error;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::controller::{param_count, ControllerKind, ControllerSpec};
use crate::evaluation::{evaluate_generalization, export_heatmap, record_trace, DEFAULT_LENGTHS, DEFAULT_TRIALS};
use crate::tasks::{make_example, sample_example, TaskKind};
use crate::training::{TrainConfig, Trainer};

type CliResult<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(
    name = "ntm",
    version,
    about = "Neural Turing Machines for binary addition and multiplication"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model online, one example per update
    Train(TrainArgs),
    /// Measure bit errors on operands longer than those seen in training
    Eval(EvalArgs),
    /// Export the read/write weightings of one episode
    Trace(TraceArgs),
    /// Write a dataset of random examples, one `<task> <bits> <a> <b>` per line
    Gen(GenArgs),
    /// Report trainable parameter counts
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value file; command-line flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// add | mul [default: add]
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// ff | lstm | baseline [default: ff]
    #[arg(long)]
    pub controller: Option<ControllerKind>,
    /// Hidden units per layer [default: 100, or 128 for baseline]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Largest training operand length [default: 8]
    #[arg(long)]
    pub max_bits: Option<usize>,
    /// Total examples to train on [default: 1000000]
    #[arg(long)]
    pub examples: Option<u64>,
    /// RMSProp learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// RMSProp decay [default: 0.95]
    #[arg(long)]
    pub rmsprop_decay: Option<f64>,
    /// Memory rows [default: 128]
    #[arg(long)]
    pub mem_rows: Option<usize>,
    /// Memory columns [default: 20]
    #[arg(long)]
    pub mem_cols: Option<usize>,
    /// Elementwise gradient clip [default: 10]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Examples per bits-per-sequence window [default: 1000]
    #[arg(long)]
    pub curve_window: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint output path
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Learning-curve CSV output path
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Examples between checkpoints, 0 for only the final one [default: 10000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint; model and optimizer settings come from it
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated operand lengths
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS.to_vec())]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Task to test [default: the checkpoint's]
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Report CSV path; printed to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub a: u64,
    #[arg(long)]
    pub b: u64,
    /// Operand length
    #[arg(long)]
    pub bits: usize,
    /// Task to run [default: the checkpoint's]
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = TaskKind::Add)]
    pub task: TaskKind,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub max_bits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Only this architecture
    #[arg(long)]
    pub controller: Option<ControllerKind>,
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// Keys may use `-` or `_`.
pub fn parse_config_file(text: &str) -> CliResult<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got {raw:?}", n + 1))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

const TRAIN_KEYS: [&str; 15] = [
    "task",
    "controller",
    "hidden",
    "max-bits",
    "examples",
    "lr",
    "rmsprop-decay",
    "mem-rows",
    "mem-cols",
    "clip",
    "curve-window",
    "seed",
    "checkpoint",
    "curve",
    "checkpoint-every",
];

fn pick<T: FromStr>(flag: Option<T>, file: &HashMap<String, String>, key: &str, default: T) -> CliResult<T>
where
    T::Err: Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(s) => s.parse().map_err(|e| format!("config key {key}: {e}").into()),
        None => Ok(default),
    }
}

/// Flags over config file over defaults.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let file = match &args.config {
        Some(p) => parse_config_file(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
        None => HashMap::new(),
    };
    if let Some(k) = file.keys().find(|k| !TRAIN_KEYS.contains(&k.as_str())) {
        return Err(format!("unknown config key {k}").into());
    }
    let d = TrainConfig::default();
    let controller = pick(args.controller, &file, "controller", d.controller)?;
    let opt_path = |flag: &Option<PathBuf>, key: &str| flag.clone().or_else(|| file.get(key).map(PathBuf::from));
    let cfg = TrainConfig {
        task: pick(args.task, &file, "task", d.task)?,
        controller,
        hidden: pick(args.hidden, &file, "hidden", controller.default_hidden())?,
        learning_rate: pick(args.lr, &file, "lr", d.learning_rate)?,
        rmsprop_decay: pick(args.rmsprop_decay, &file, "rmsprop-decay", d.rmsprop_decay)?,
        examples: pick(args.examples, &file, "examples", d.examples)?,
        max_bits: pick(args.max_bits, &file, "max-bits", d.max_bits)?,
        mem_rows: pick(args.mem_rows, &file, "mem-rows", d.mem_rows)?,
        mem_cols: pick(args.mem_cols, &file, "mem-cols", d.mem_cols)?,
        clip: pick(args.clip, &file, "clip", d.clip)?,
        curve_window: pick(args.curve_window, &file, "curve-window", d.curve_window)?,
        seed: pick(args.seed, &file, "seed", d.seed)?,
        checkpoint: opt_path(&args.checkpoint, "checkpoint"),
        curve: opt_path(&args.curve, "curve"),
        checkpoint_every: pick(args.checkpoint_every, &file, "checkpoint-every", d.checkpoint_every)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = resolve_train_config(args)?;
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(Checkpoint::load(p).map_err(|e| format!("{}: {e}", p.display()))?, &cfg)?,
        None => Trainer::new(cfg)?,
    };
    writeln!(out, "# resolved configuration")?;
    write!(out, "{}", trainer.config.describe())?;
    out.flush()?;
    let curve = trainer.run()?;
    if let Some(last) = curve.last() {
        writeln!(
            out,
            "trained {} examples; last loss {}; windowed bits/seq {}",
            trainer.examples_seen, last.loss, last.window_mean
        )?;
    }
    Ok(())
}

fn load(path: &PathBuf) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let ckpt = load(&args.checkpoint)?;
    let task = args.task.unwrap_or(ckpt.train.task);
    writeln!(out, "# resolved configuration")?;
    writeln!(out, "checkpoint={}", args.checkpoint.display())?;
    writeln!(out, "task={task}")?;
    let lengths: Vec<String> = args.lengths.iter().map(|l| l.to_string()).collect();
    writeln!(out, "lengths={}", lengths.join(","))?;
    writeln!(out, "trials={}", args.trials)?;
    writeln!(out, "seed={}", args.seed)?;
    writeln!(
        out,
        "out={}",
        args.out.as_ref().map_or("-".into(), |p| p.display().to_string())
    )?;
    let report = evaluate_generalization(&ckpt.model, task, &args.lengths, args.trials, args.seed)?;
    match &args.out {
        Some(p) => report.save(p)?,
        None => write!(out, "{}", report.to_csv())?,
    }
    Ok(())
}

fn trace(args: &TraceArgs, out: &mut dyn Write) -> CliResult {
    let ckpt = load(&args.checkpoint)?;
    let task = args.task.unwrap_or(ckpt.train.task);
    writeln!(out, "# resolved configuration")?;
    writeln!(out, "checkpoint={}", args.checkpoint.display())?;
    writeln!(out, "task={task}")?;
    writeln!(out, "a={}\nb={}\nbits={}", args.a, args.b, args.bits)?;
    writeln!(out, "out={}", args.out.display())?;
    let ex = make_example(args.a, args.b, args.bits, task)?;
    let t = record_trace(&ckpt.model, &ex)?;
    export_heatmap(&t, &args.out)?;
    writeln!(out, "{} steps, input END at step {}", t.read.len(), t.marker)?;
    Ok(())
}

fn generate(args: &GenArgs, out: &mut dyn Write) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut text = String::new();
    for _ in 0..args.count {
        text.push_str(&sample_example(&mut rng, args.max_bits, args.task)?.to_line());
        text.push('\n');
    }
    match &args.out {
        Some(p) => {
            writeln!(out, "# resolved configuration")?;
            writeln!(
                out,
                "task={}\ncount={}\nmax-bits={}\nseed={}\nout={}",
                args.task,
                args.count,
                args.max_bits,
                args.seed,
                p.display()
            )?;
            fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()))?;
        }
        None => write!(out, "{text}")?,
    }
    Ok(())
}

/// Totals, per-group breakdowns and the gap to the published figures.
pub fn param_report(kinds: &[ControllerKind]) -> String {
    let mut s = String::new();
    for &kind in kinds {
        let c = param_count(&ControllerSpec::new(kind));
        let published = kind.published_param_count();
        s.push_str(&format!(
            "{}: total {} published {} difference {}\n",
            kind.architecture_name(),
            c.total,
            published,
            c.total.abs_diff(published)
        ));
        for (name, n) in &c.breakdown {
            s.push_str(&format!("  {name} {n}\n"));
        }
    }
    s
}

fn params(args: &ParamsArgs, out: &mut dyn Write) -> CliResult {
    let kinds = match args.controller {
        Some(k) => vec![k],
        None => vec![
            ControllerKind::Feedforward,
            ControllerKind::Lstm,
            ControllerKind::Baseline,
        ],
    };
    write!(out, "{}", param_report(&kinds))?;
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Trace(a) => trace(a, out),
        Command::Gen(a) => generate(a, out),
        Command::Params(a) => params(a, out),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
