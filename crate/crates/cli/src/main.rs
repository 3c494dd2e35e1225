//! `moss`: dataset generation, training, evaluation, visualisation and the
//! numerical checks.
//!
//! Exit codes: 0 success, 1 check or run failure, 2 usage or configuration
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moss::checks::{bench_stss, gradcheck_suite, oracle_sweep, BENCH_CSV_HEADER};
use moss::encoder::EncoderKind;
use moss::moss::{high_order_stss, init_params, MossConfig, MAX_ORDER};
use moss::stss::{FeatureMap, WindowSpec};
use moss::synthdata::{gen_motion_dataset_with, load_dataset, patch_embed, save_dataset, MotionSpec, PatchEmbed};
use moss::train::{evaluate, train_loop, Checkpoint, Classifier, ExperimentConfig, RunOptions, Split};
use moss::viz::render_query_set;
use moss::{Error, Exec, Tensor};

const GRAD_TOL: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "moss", version, about = "Multi-order space-time self-similarity toolkit")]
struct Cli {
    /// Worker threads for the parallel kernels; 1 runs everything
    /// sequentially and is bitwise reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a motion-classification dataset (clip files plus manifest.json).
    GenData {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier; streams one JSON metrics object per iteration.
    Train {
        /// JSON document `{"model": {...}, "train": {...}}`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset evaluated periodically.
        #[arg(long)]
        held_out: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report held-out accuracy of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write STSS query maps and feature-norm maps as PPM files.
    Visualize(VisualizeArgs),
    /// Finite-difference gradient checks; prints the worst relative error
    /// per component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Blocked STSS kernel against the literal oracle; prints the largest
    /// absolute difference.
    OracleCheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 52)]
        instances: usize,
    },
    /// Time the naive, blocked and parallel STSS kernels.
    ///
    /// Writes CSV with columns `shape,window,variant,threads,ms,gflops`:
    /// shape as `TxHxWxC`, window as `LxUxV`, variant one of naive, blocked
    /// or parallel, median milliseconds over the repetitions, and GFLOP/s
    /// counting two operations per channel per similarity.
    Bench {
        #[arg(long, default_value = "8,14,14,64", value_parser = parse_list)]
        shape: List,
        #[arg(long, default_value = "5,9,9", value_parser = parse_list)]
        window: List,
        /// Thread counts for the parallel rows.
        #[arg(long = "parallel-threads", default_value = "1,8", value_parser = parse_list)]
        parallel_threads: List,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct VisualizeArgs {
    /// Clip tensor file (`[T, H, W, 1]`).
    #[arg(long)]
    clip: PathBuf,
    /// Use this model's embedding, window, encoders and parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query on the feature grid as `t,h,w`.
    #[arg(long, value_parser = parse_list)]
    query: List,
    #[arg(long, default_value = "1,2,3", value_parser = parse_list)]
    orders: List,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "viz")]
    prefix: String,
    /// Without a checkpoint: feature channels of the patch embedding.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Without a checkpoint: window `L,U,V` for every order.
    #[arg(long, default_value = "5,9,9", value_parser = parse_list)]
    window: List,
    /// Without a checkpoint: learned, vectorize or mean_pool.
    #[arg(long, default_value = "learned")]
    encoder: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Comma-separated integers such as `8,14,14,64`.
#[derive(Debug, Clone)]
struct List(Vec<usize>);

fn parse_list(s: &str) -> Result<List, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(List)
}

/// Failure classes mapped onto the exit-code contract.
enum Failure {
    Check(String),
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } | Error::Degenerate(_) | Error::State(_) => {
                Failure::Run(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn window3(v: &[usize]) -> Result<WindowSpec, Failure> {
    match v {
        [l, u, w] => Ok(WindowSpec::new(*l, *u, *w)?),
        _ => Err(Failure::Usage(format!("window needs three values, got {v:?}"))),
    }
}

fn gen_data(per_class: usize, seed: u64, out: &Path) -> CmdResult {
    let spec = MotionSpec::default();
    let clips = gen_motion_dataset_with(&spec, per_class, seed)?;
    let m = save_dataset(out, &clips, &spec)?;
    println!(
        "{}",
        serde_json::json!({"clips": clips.len(), "out": out.display().to_string(), "spec_hash": m.spec_hash})
    );
    Ok(())
}

fn train(config: &Path, data: &Path, held_out: Option<&Path>, out: &Path, exec: Exec) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    cfg.train.validate()?;
    let model = Classifier::<f32>::new(cfg.model.clone())?;
    let (clips, _) = load_dataset(data)?;
    let train_split = Split::from_clips(&model, &clips)?;
    let held = match held_out {
        Some(p) => Some(Split::from_clips(&model, &load_dataset(p)?.0)?),
        None => None,
    };
    let params = model.init(cfg.model.moss.seed)?;
    let opts = RunOptions {
        exec,
        checkpoint: Some(out.to_path_buf()),
    };
    let stdout = std::io::stdout();
    let mut sink = |line: &moss::train::MetricLine| -> moss::Result<()> {
        let mut lock = stdout.lock();
        writeln!(lock, "{}", serde_json::to_string(line)?).map_err(|e| Error::io("<stdout>", e))
    };
    train_loop(&model, params, &cfg.train, &train_split, held.as_ref(), &opts, &mut sink)?;
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, exec: Exec) -> CmdResult {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let model = Classifier::<f32>::new(ck.model.clone())?;
    let split = Split::from_clips(&model, &load_dataset(data)?.0)?;
    let r = evaluate(&model, &ck.params, &split, exec)?;
    println!(
        "{}",
        serde_json::json!({"accuracy": r.accuracy, "per_class": r.per_class, "count": r.count})
    );
    Ok(())
}

fn visualize(a: &VisualizeArgs, exec: Exec) -> CmdResult {
    let [t, h, w] = a.query.0[..] else {
        return Err(Failure::Usage(format!("--query needs t,h,w, got {:?}", a.query)));
    };
    let up_to = a.orders.0.iter().copied().max().unwrap_or(0);
    if up_to == 0 || up_to > MAX_ORDER || a.orders.0.contains(&0) {
        return Err(Failure::Usage(format!("orders must lie in 1..={MAX_ORDER}")));
    }
    let pixels = Tensor::<f64>::load(&a.clip)?;
    let (cfg, embed, params) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::<f64>::load(p)?;
            let trained = ck.model.moss.max_order();
            if ck.model.baseline || up_to > trained {
                return Err(Failure::Usage(format!(
                    "checkpoint model has encoders up to order {}, requested order {up_to}",
                    if ck.model.baseline { 0 } else { trained }
                )));
            }
            (ck.model.moss.clone(), ck.model.embed(), ck.params)
        }
        None => {
            let encoder: EncoderKind = serde_json::from_value(serde_json::Value::String(a.encoder.clone()))
                .map_err(|_| Failure::Usage(format!("unknown encoder {:?}", a.encoder)))?;
            let cfg = MossConfig {
                orders: (1..=up_to).collect(),
                c: a.channels,
                d: a.channels,
                encoder,
                seed: a.seed,
                ..Default::default()
            }
            .with_window(window3(&a.window.0)?);
            let params = init_params(&cfg, a.seed)?;
            (cfg, PatchEmbed::new(a.channels, a.seed), params)
        }
    };
    let f: FeatureMap<f64> = patch_embed(&pixels, &embed)?;
    let outputs = high_order_stss(&f, &cfg, &params, up_to, moss::tensor::Mode::Eval, exec)?;
    let written = render_query_set(&outputs, t, h, w, &a.orders.0, &a.out, &a.prefix)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck(seed: u64) -> CmdResult {
    let reports = gradcheck_suite(seed)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{:<20} max_rel_err={:.3e} checked={}", r.component, r.max_rel_err, r.checked);
        worst = worst.max(r.max_rel_err);
    }
    if worst > GRAD_TOL {
        return Err(Failure::Check(format!("gradient check failed: {worst:.3e} > {GRAD_TOL:e}")));
    }
    println!("ok: all components within {GRAD_TOL:e}");
    Ok(())
}

fn oracle_check(seed: u64, instances: usize, exec: Exec) -> CmdResult {
    let r = oracle_sweep(instances, seed, exec)?;
    let d = r.max_abs_diff();
    println!("instances={} max_abs_diff={d:.3e}", r.cases.len());
    if d > ORACLE_TOL {
        return Err(Failure::Check(format!("oracle mismatch {d:.3e} > {ORACLE_TOL:e}")));
    }
    Ok(())
}

fn bench(shape: &[usize], window: &[usize], threads: &[usize], reps: usize, seed: u64) -> CmdResult {
    if shape.len() != 4 {
        return Err(Failure::Usage(format!("--shape needs T,H,W,C, got {shape:?}")));
    }
    let rows = bench_stss(shape, window3(window)?, threads, reps, seed)?;
    println!("{BENCH_CSV_HEADER}");
    for r in rows {
        println!("{}", r.csv());
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let exec = Exec::from_threads(cli.threads);
    match &cli.command {
        Command::GenData { per_class, seed, out } => gen_data(*per_class, *seed, out),
        Command::Train {
            config,
            data,
            held_out,
            out,
        } => train(config, data, held_out.as_deref(), out, exec),
        Command::Eval { checkpoint, data } => eval(checkpoint, data, exec),
        Command::Visualize(a) => visualize(a, exec),
        Command::Gradcheck { seed } => gradcheck(*seed),
        Command::OracleCheck { seed, instances } => oracle_check(*seed, *instances, exec),
        Command::Bench {
            shape,
            window,
            parallel_threads,
            reps,
            seed,
        } => bench(&shape.0, &window.0, &parallel_threads.0, *reps, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if cli.threads > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    #[cfg(not(feature = "parallel"))]
    if cli.threads > 1 {
        eprintln!("warning: built without the `parallel` feature; running on one thread");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) | Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
