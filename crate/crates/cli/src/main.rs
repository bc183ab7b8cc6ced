//! `comba` — driver for the sequence-mixing kernel library.
//!
//! Subcommands: `verify` (numerical self-checks), `train` (synthetic recall
//! task), `bench` (engine throughput), `gen-data` (dataset files).

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use comba_cli::checkpoint;
use comba_cli::config::RunConfig;
use comba_core::bench::{default_suite, run_case, write_csv, BenchResult};
use comba_core::model::{ExecMode, ModelConfig, ModelParams};
use comba_core::real::{Precision, Real};
use comba_core::tasks::{
    train, AdamW, Dataset, MqarConfig, TrainConfig, TrainEvent,
};
use comba_core::verify::{run_all, run_suite, Mutation, VerifyOptions, SUITE_NAMES};

#[derive(Parser)]
#[command(name = "comba", version, about = "Sequence-mixing kernels: verify, train, bench")]
struct Cli {
    /// Worker threads for intra-run parallelism (default: all cores).
    #[arg(long, global = true, env = "COMBA_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical self-check suites.
    Verify {
        /// One of the suite names, or "all".
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Inject a named fault so the suites should fail (harness self-test).
        #[arg(long, hide = true)]
        mutation: Option<String>,
    },
    /// Train a model on the synthetic recall task described by the config.
    Train {
        /// Run configuration (JSON with model, task, and train sections).
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints and a metrics log (created if absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter precision: "single" or "double".
        #[arg(long, default_value = "single")]
        precision: String,
        /// Override the config's execution mode: "recurrent" or "chunkwise".
        #[arg(long)]
        mode: Option<String>,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Time the engines over seeded synthetic inputs and emit CSV.
    Bench {
        /// Run configuration with a "bench" section (default: built-in suite).
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a recall-task dataset file.
    GenData {
        /// Run configuration with a "task" section (default: standard task).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Verify { suite, seed, mutation } => cmd_verify(&suite, seed, mutation.as_deref()),
        Command::Train { config, out, seed, precision, mode, resume } => cmd_train(
            &config,
            out.as_deref(),
            seed,
            &precision,
            mode.as_deref(),
            resume.as_deref(),
        ),
        Command::Bench { config, out } => cmd_bench(config.as_deref(), out.as_deref()),
        Command::GenData { config, out, seed, instances } => {
            cmd_gen_data(config.as_deref(), &out, seed, instances)
        }
    }
}

fn cmd_verify(suite: &str, seed: u64, mutation: Option<&str>) -> anyhow::Result<ExitCode> {
    let mutation = mutation.map(Mutation::from_name).transpose()?;
    let opts = VerifyOptions { seed, mutation };
    let reports = if suite == "all" {
        run_all(&opts)
    } else {
        vec![run_suite(suite, &opts).with_context(|| {
            format!("available suites: all, {}", SUITE_NAMES.join(", "))
        })?]
    };
    let mut failed = false;
    for report in &reports {
        println!("{}", report.summary_line());
        for failure in &report.failures {
            println!("  failure: {failure}");
        }
        failed |= !report.passed();
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn parse_precision(name: &str) -> anyhow::Result<Precision> {
    Precision::parse(name)
        .with_context(|| format!("unknown precision {name:?}; expected \"single\" or \"double\""))
}

fn cmd_train(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    precision: &str,
    mode: Option<&str>,
    resume: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let run = RunConfig::from_file(config)?;
    let (model_cfg, task_cfg, train_cfg) = run.require_training()?;
    let mut train_cfg = train_cfg.clone();
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    if let Some(mode) = mode {
        train_cfg.mode = Some(ExecMode::from_name(mode)?);
    }
    let precision = parse_precision(precision)?;
    if let Some(path) = resume {
        let info = checkpoint::load_info(path)?;
        if info.precision_name != precision.name() {
            bail!(
                "checkpoint {} holds {} precision; pass --precision {}",
                path.display(),
                info.precision_name,
                info.precision_name
            );
        }
        if &info.model != model_cfg {
            bail!(
                "checkpoint {} was written for a different model configuration",
                path.display()
            );
        }
    }
    match precision {
        Precision::Single => run_train::<f32>(model_cfg, task_cfg, &train_cfg, out, resume),
        Precision::Double => run_train::<f64>(model_cfg, task_cfg, &train_cfg, out, resume),
    }
}

fn run_train<T: Real>(
    model_cfg: &ModelConfig,
    task_cfg: &MqarConfig,
    train_cfg: &TrainConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let (mut params, mut opt, start_step) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load::<T>(path)?;
            let opt = ckpt.opt.with_context(|| {
                format!("checkpoint {} has no optimizer state to resume from", path.display())
            })?;
            log::info!("resuming from {} at step {}", path.display(), ckpt.step);
            (ckpt.params, opt, ckpt.step as usize)
        }
        None => {
            let params = ModelParams::<T>::init(model_cfg, train_cfg.seed);
            let opt = AdamW::new(train_cfg.optim, params.data().len());
            (params, opt, 0)
        }
    };

    let mut metrics_log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating output directory {}", dir.display()))?;
            let path = dir.join("metrics.jsonl");
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .with_context(|| format!("opening {}", path.display()))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let checkpoint_path = out.map(|dir| dir.join("checkpoint.ckpt"));

    let log_line = |w: &mut Option<BufWriter<File>>, value: serde_json::Value| {
        if let Some(w) = w {
            let _ = writeln!(w, "{value}");
            let _ = w.flush();
        }
    };

    let outcome = train(
        model_cfg,
        task_cfg,
        train_cfg,
        &mut params,
        &mut opt,
        start_step,
        |event| {
            match event {
                TrainEvent::Step(m) => {
                    log::info!(
                        "step {:>6}  loss {:.4}  acc {:.3}  lr {:.2e}  |g| {:.3}  tok/s {:.0}",
                        m.step, m.loss, m.masked_accuracy, m.lr, m.grad_norm, m.tokens_per_sec
                    );
                    let mut value = serde_json::to_value(m).expect("metrics serialize");
                    value["event"] = "step".into();
                    log_line(&mut metrics_log, value);
                }
                TrainEvent::Eval { step, accuracy } => {
                    log::info!("eval  {step:>6}  held-out accuracy {accuracy:.4}");
                    log_line(
                        &mut metrics_log,
                        serde_json::json!({"event": "eval", "step": step, "accuracy": accuracy}),
                    );
                }
                TrainEvent::Checkpoint { step, params, opt } => {
                    if let Some(path) = &checkpoint_path {
                        checkpoint::save(path, model_cfg, step as u64, params, Some(opt))?;
                        log::info!("checkpoint {step:>6} -> {}", path.display());
                        log_line(
                            &mut metrics_log,
                            serde_json::json!({"event": "checkpoint", "step": step}),
                        );
                    }
                }
            }
            Ok(())
        },
    )?;

    println!(
        "trained to step {}: final loss {:.4}, held-out accuracy {:.4}",
        outcome.final_step, outcome.final_loss, outcome.final_accuracy
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(config: Option<&Path>, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let cases = match config {
        Some(path) => RunConfig::from_file(path)?
            .bench
            .with_context(|| format!("{} has no \"bench\" section", path.display()))?,
        None => default_suite(),
    };
    if cases.is_empty() {
        bail!("no benchmark cases to run");
    }
    let mut results: Vec<BenchResult> = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        log::info!(
            "case {}/{}: {} {} T={} C={} {}",
            i + 1,
            cases.len(),
            case.variant,
            case.mode,
            case.seq_len,
            case.chunk_size,
            case.precision,
        );
        let result = run_case(case)?;
        log::info!(
            "  median {:.4}s  ({:.0} tokens/s)",
            result.median_secs,
            result.tokens_per_sec
        );
        results.push(result);
    }
    match out {
        Some(path) => {
            let mut file = BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            write_csv(&results, &mut file)?;
            file.flush()?;
            println!("wrote {} results to {}", results.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            write_csv(&results, &mut stdout.lock())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    instances: usize,
) -> anyhow::Result<ExitCode> {
    let task_cfg = match config {
        Some(path) => RunConfig::from_file(path)?
            .task
            .with_context(|| format!("{} has no \"task\" section", path.display()))?,
        None => MqarConfig::default(),
    };
    let dataset = Dataset::generate(&task_cfg, seed, instances)?;
    dataset.save(out)?;
    let bytes = fs::metadata(out).map(|m| m.len()).unwrap_or(0);
    println!(
        "wrote {} instances (seq_len {}, vocab {}) to {} ({} bytes)",
        instances,
        task_cfg.seq_len,
        task_cfg.vocab,
        out.display(),
        bytes
    );
    Ok(ExitCode::SUCCESS)
}
