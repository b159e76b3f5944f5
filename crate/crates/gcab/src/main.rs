use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gcab::checkpoint::{load_checkpoint, save_checkpoint};
use gcab::config::ExperimentConfig;
use gcab::distill::{distill, save_student, DistillConfig};
use gcab::error::{Error, Result};
use gcab::harness::{
    evaluate, export_embeddings, load_data, metrics, run_experiment_with, split_tasks,
    write_metrics_csv, AccuracyMatrix, TrainOpts,
};

#[derive(Parser)]
#[command(name = "gcab", about = "Class-incremental ViT experiments with gated class-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full class-incremental experiment from a TOML config.
    Train {
        config: PathBuf,
    },
    /// Recompute final-stage metrics from a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Where to write the recomputed metrics CSV (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill the multi-pass decoder into a single class-attention block.
    Distill {
        checkpoint: PathBuf,
        /// Fraction of units active in the student's static masks.
        #[arg(long, default_value_t = 1.0)]
        capacity: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump backbone features mapped into a task's feature space.
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the metrics CSVs under a run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Run the config once per value of a hyperparameter.
    Sweep {
        config: PathBuf,
        /// One of: seed, train.lr, train.epochs, train.lambda_pfr,
        /// train.lambda_gcab, train.s_max
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root()
        .join(format!("{}-{}-s{}", cfg.name, cfg.hash(), cfg.seed))
}

fn cmd_train(config: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config)?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let dir = run_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    let outcome = run_experiment_with(&cfg, |t, state, rng| {
        save_checkpoint(&dir.join(format!("task{t}.ckpt")), state, &text, &hash, rng, None)
    })?;
    write_metrics_csv(
        &dir.join("metrics.csv"),
        &hash,
        cfg.seed,
        &outcome.matrix,
        &outcome.metrics,
        &outcome.capacity,
    )?;
    println!(
        "ACC_TAG {:.2}  ACC_TAW {:.2}  ACC_AVG {:.2}  ({})",
        outcome.metrics.acc_tag,
        outcome.metrics.acc_taw,
        outcome.metrics.acc_avg,
        dir.display()
    );
    Ok(())
}

fn rebuild(ckpt_path: &Path) -> Result<(gcab::checkpoint::Checkpoint, ExperimentConfig, TrainOpts)> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let cfg = ExperimentConfig::from_toml(&ckpt.config_toml)?;
    let opts = TrainOpts::from_config(&cfg);
    Ok((ckpt, cfg, opts))
}

fn cmd_eval(ckpt_path: &Path, out: Option<&Path>) -> Result<()> {
    let (ckpt, cfg, opts) = rebuild(ckpt_path)?;
    let (train, test) = load_data(&cfg)?;
    let seq = split_tasks(&train, &test, &cfg.split, cfg.seed)?;
    let stage = ckpt.state.finalized_tasks.checked_sub(1).ok_or_else(|| {
        Error::State("checkpoint has no finalized tasks".into())
    })?;
    let row = evaluate(&ckpt.state, &seq.tasks, stage, &opts)?;
    // a single final row is enough for the final-stage metrics
    let mut matrix = AccuracyMatrix::default();
    for t in 0..stage {
        matrix.tag.push(row.tag[..=t].to_vec());
        matrix.taw.push(row.taw[..=t].to_vec());
    }
    matrix.push_row(&row)?;
    let m = metrics(&matrix)?;
    println!("stage {stage}: ACC_TAG {:.4}  ACC_TAW {:.4}", m.acc_tag, m.acc_taw);
    for (t, (a, b)) in row.tag.iter().zip(&row.taw).enumerate() {
        println!("  task {t}: tag {a:.4}  taw {b:.4}");
    }
    if let Some(path) = out {
        write_metrics_csv(path, &ckpt.config_hash, cfg.seed, &matrix, &m, &[])?;
    }
    Ok(())
}

fn cmd_distill(
    ckpt_path: &Path,
    capacity: f64,
    epochs: Option<usize>,
    lr: Option<f64>,
    temperature: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (ckpt, cfg, opts) = rebuild(ckpt_path)?;
    let mut dcfg = DistillConfig::new(capacity);
    dcfg.epochs = epochs.unwrap_or(cfg.train.distill_epochs);
    dcfg.lr = lr.unwrap_or(cfg.train.distill_lr);
    dcfg.temperature = temperature;
    dcfg.seed = seed;
    dcfg.batch_size = cfg.train.batch_size;
    dcfg.validate()?;
    let (train, test) = load_data(&cfg)?;
    let seq = split_tasks(&train, &test, &cfg.split, cfg.seed)?;
    let last = ckpt.state.finalized_tasks - 1;
    let (student, history) = distill(&ckpt.state, &opts, &seq.tasks[last].train, &dcfg)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_path.with_extension("student"));
    save_student(&out, &student)?;
    let csv = out.with_extension("distill.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv)?);
    writeln!(w, "# config_hash={} seed={seed} capacity={capacity}", ckpt.config_hash)?;
    writeln!(w, "epoch,kl,accuracy")?;
    for (e, st) in history.iter().enumerate() {
        writeln!(w, "{e},{:.8},{:.4}", st.kl, st.accuracy)?;
    }
    let final_stats = history.last().expect("epochs > 0");
    println!(
        "student: KL {:.6}  train acc {:.2}  -> {}",
        final_stats.kl,
        final_stats.accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_export(ckpt_path: &Path, task: usize, out: &Path) -> Result<()> {
    let (ckpt, cfg, opts) = rebuild(ckpt_path)?;
    let (train, test) = load_data(&cfg)?;
    let seq = split_tasks(&train, &test, &cfg.split, cfg.seed)?;
    let mut samples = Vec::new();
    for t in seq.tasks.iter().take(ckpt.state.finalized_tasks) {
        samples.extend(t.test.iter().cloned());
    }
    let rows = export_embeddings(&ckpt.state, &opts, &samples, task)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "# config_hash={} seed={} task={task}", ckpt.config_hash, cfg.seed)?;
    for (label, feats) in rows {
        let joined: Vec<String> = feats.iter().map(|x| format!("{x:.8}")).collect();
        writeln!(w, "{label},{}", joined.join(","))?;
    }
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    let mut found = false;
    let mut walk = vec![run_dir.to_path_buf()];
    let mut rows = Vec::new();
    while let Some(dir) = walk.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.csv") {
                found = true;
                let text = std::fs::read_to_string(&path)?;
                let pick = |key: &str| {
                    text.lines()
                        .find_map(|l| l.strip_prefix(&format!("summary,{key},")))
                        .unwrap_or("?")
                        .to_string()
                };
                rows.push((
                    path.parent().unwrap().display().to_string(),
                    pick("ACC_TAG"),
                    pick("ACC_TAW"),
                    pick("ACC_AVG"),
                ));
            }
        }
    }
    if !found {
        return Err(Error::Data(format!(
            "no metrics.csv found under {}",
            run_dir.display()
        )));
    }
    rows.sort();
    println!("{:<48} {:>10} {:>10} {:>10}", "run", "ACC_TAG", "ACC_TAW", "ACC_AVG");
    for (run, tag, taw, avg) in rows {
        println!("{run:<48} {tag:>10} {taw:>10} {avg:>10}");
    }
    Ok(())
}

fn cmd_sweep(config: &Path, param: &str, values: &str) -> Result<()> {
    let text = std::fs::read_to_string(config)?;
    let base = ExperimentConfig::from_toml(&text)?;
    for value in values.split(',') {
        let value = value.trim();
        let mut cfg = base.clone();
        match param {
            "seed" => cfg.seed = value.parse().map_err(|_| bad_value(param, value))?,
            "train.lr" => cfg.train.lr = value.parse().map_err(|_| bad_value(param, value))?,
            "train.epochs" => {
                cfg.train.epochs = value.parse().map_err(|_| bad_value(param, value))?
            }
            "train.lambda_pfr" => {
                cfg.train.lambda_pfr = value.parse().map_err(|_| bad_value(param, value))?
            }
            "train.lambda_gcab" => {
                cfg.train.lambda_gcab = value.parse().map_err(|_| bad_value(param, value))?
            }
            "train.s_max" => {
                cfg.train.s_max = value.parse().map_err(|_| bad_value(param, value))?
            }
            other => {
                return Err(Error::Config(format!("unsupported sweep parameter `{other}`")))
            }
        }
        cfg.name = format!("{}-{}-{}", base.name, param.replace('.', "_"), value);
        cfg.validate()?;
        let dir = run_dir(&cfg);
        std::fs::create_dir_all(&dir)?;
        let outcome = gcab::harness::run_experiment(&cfg)?;
        write_metrics_csv(
            &dir.join("metrics.csv"),
            &cfg.hash(),
            cfg.seed,
            &outcome.matrix,
            &outcome.metrics,
            &outcome.capacity,
        )?;
        println!(
            "{param}={value}: ACC_TAG {:.2}  ACC_TAW {:.2}  ACC_AVG {:.2}",
            outcome.metrics.acc_tag, outcome.metrics.acc_taw, outcome.metrics.acc_avg
        );
    }
    Ok(())
}

fn bad_value(param: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for {param}"))
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Eval { checkpoint, out } => cmd_eval(checkpoint, out.as_deref()),
        Command::Distill {
            checkpoint,
            capacity,
            epochs,
            lr,
            temperature,
            seed,
            out,
        } => cmd_distill(checkpoint, *capacity, *epochs, *lr, *temperature, *seed, out.as_deref()),
        Command::ExportEmbeddings { checkpoint, task, out } => cmd_export(checkpoint, *task, out),
        Command::Report { run_dir } => cmd_report(run_dir),
        Command::Sweep { config, param, values } => cmd_sweep(config, param, values),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
