use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;
use xsmae_core::augment::{check_separability, generate_synthetic_dataset, Dataset, SyntheticSpec};
use xsmae_core::eval::{run_ablation, scale_sweep, stratified_split, sweep_csv, AblationGrid};
use xsmae_core::io::{read_tiles, write_tiles};
use xsmae_core::numerics::{Element, Streams};
use xsmae_core::train::{csv_row, Checkpoint, Precision, TrainConfig, Trainer, CSV_HEADER};
use xsmae_core::vit::ModelParams;

#[derive(Parser)]
#[command(
    name = "xsmae",
    version,
    about = "Cross-scale masked autoencoder pretraining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic tile dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain an encoder on a tile dataset.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Step-log CSV (defaults to the checkpoint path with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print the parameter count and step plan without training.
        #[arg(long)]
        dry_run: bool,
        /// Continue from `--out` if it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// KNN accuracy of a frozen encoder at several evaluation ratios.
    EvalKnn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,1.0")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Seed of the stratified reference/query split.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// Result CSV (defaults to the checkpoint path with a .knn.csv suffix).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse checkpoints already present under `--out`.
        #[arg(long)]
        resume: bool,
    },
}

/// Bad invocation; reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn need(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Usage(format!("{what} {} does not exist", path.display())).into())
    }
}

fn invalid(path: &Path, e: xsmae_core::Error) -> anyhow::Error {
    Usage(format!("{}: {e}", path.display())).into()
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    need(path, what)?;
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut s =
        SyntheticSpec::from_kv(&read_text(spec, "spec file")?).map_err(|e| invalid(spec, e))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let ds = generate_synthetic_dataset(&s)?;
    let rep = check_separability(&ds)?;
    println!(
        "separability probe: train accuracy {:.3}, scale consistency {:.3}",
        rep.train_accuracy, rep.scale_consistency
    );
    if !rep.passes() {
        anyhow::bail!("dataset classes are not separable by the frequency probe");
    }
    write_tiles(out, &ds)?;
    println!("wrote {} images to {}", ds.len(), out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    need(dir, "data directory")?;
    read_tiles(dir).with_context(|| format!("reading tiles from {}", dir.display()))
}

fn pretrain_with<T: Element>(
    cfg: TrainConfig,
    data: &Dataset,
    out: &Path,
    log_path: &Path,
    resume: bool,
    log_every: u64,
) -> Result<()> {
    let mut trainer = if resume && out.exists() {
        let t = Checkpoint::<T>::load(out, Some(&cfg))?.into_trainer()?;
        eprintln!("resuming from step {}", t.step());
        t
    } else {
        Trainer::<T>::new(cfg.clone())?
    };
    let total = cfg.total_steps(data.len());
    let fresh = trainer.step() == 0;
    let mut log = if fresh {
        format!("{CSV_HEADER}\n")
    } else {
        std::fs::read_to_string(log_path).unwrap_or_else(|_| format!("{CSV_HEADER}\n"))
    };
    let start = Instant::now();
    let result = trainer.run(data, None, |l| {
        log.push_str(&csv_row(l));
        log.push('\n');
        if log_every > 0 && (l.step % log_every == 0 || l.step == total) {
            eprintln!(
                "step {}/{} lr {:.3e} loss {:.5} ({:.1}s)",
                l.step,
                total,
                l.lr,
                l.report.total,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    });
    std::fs::write(log_path, &log)?;
    result?;
    Checkpoint::from_trainer(&trainer).save(out)?;
    println!("wrote {} (step {})", out.display(), trainer.step());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    log: Option<PathBuf>,
    dry_run: bool,
    resume: bool,
    log_every: u64,
) -> Result<()> {
    let mut cfg =
        TrainConfig::from_kv(&read_text(config, "config file")?).map_err(|e| invalid(config, e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = load_data(data)?;
    let total = cfg.total_steps(ds.len());
    if dry_run {
        let params = ModelParams::<f32>::init(&cfg.model_config(), &Streams::new(cfg.seed))?;
        println!("parameters: {}", params.count());
        println!("images: {}", ds.len());
        println!("steps per epoch: {}", cfg.steps_per_epoch(ds.len()));
        println!("total steps: {total}");
        println!("warmup steps: {}", cfg.warmup(total));
        println!("peak lr: {:e}", cfg.peak_lr());
        return Ok(());
    }
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    match cfg.precision {
        Precision::F32 => pretrain_with::<f32>(cfg, &ds, out, &log_path, resume, log_every),
        Precision::F64 => pretrain_with::<f64>(cfg, &ds, out, &log_path, resume, log_every),
    }
}

fn sweep_from<T: Element>(
    bytes: &[u8],
    train: &Dataset,
    test: &Dataset,
    ratios: &[f64],
    k: usize,
) -> Result<Vec<(f64, f64)>> {
    let ck = Checkpoint::<T>::decode(bytes)?;
    Ok(scale_sweep(&ck.params, train, test, ratios, k)?)
}

fn eval_knn(
    ckpt: &Path,
    data: &Path,
    ratios: &[f64],
    k: usize,
    split_seed: u64,
    train_fraction: f64,
    csv: Option<PathBuf>,
) -> Result<()> {
    need(ckpt, "checkpoint")?;
    let bytes = std::fs::read(ckpt)?;
    let precision = Checkpoint::<f64>::decode(&bytes)
        .with_context(|| format!("reading {}", ckpt.display()))?
        .config
        .precision;
    let ds = load_data(data)?;
    let (tr, te) = stratified_split(&ds.labels, train_fraction, split_seed)?;
    let (train, test) = (ds.subset(&tr), ds.subset(&te));
    let rows = match precision {
        Precision::F32 => sweep_from::<f32>(&bytes, &train, &test, ratios, k)?,
        Precision::F64 => sweep_from::<f64>(&bytes, &train, &test, ratios, k)?,
    };
    for (r, a) in &rows {
        println!("ratio {r}: knn@{k} accuracy {a:.4}");
    }
    let path = csv.unwrap_or_else(|| ckpt.with_extension("knn.csv"));
    std::fs::write(&path, sweep_csv(&rows))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(grid: &Path, out: &Path, resume: bool) -> Result<()> {
    let text = read_text(grid, "grid file")?;
    let dir = grid.parent().unwrap_or(Path::new("."));
    let g = AblationGrid::parse(&text, dir).map_err(|e| invalid(grid, e))?;
    std::fs::create_dir_all(out)?;
    let rep = run_ablation(&g, Some(out), resume, |m| eprintln!("{m}"))?;
    print!("{}", rep.summary_table());
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
        Command::Pretrain {
            config,
            data,
            out,
            seed,
            log,
            dry_run,
            resume,
            log_every,
        } => pretrain(&config, &data, &out, seed, log, dry_run, resume, log_every),
        Command::EvalKnn {
            ckpt,
            data,
            ratios,
            k,
            split_seed,
            train_fraction,
            csv,
        } => eval_knn(&ckpt, &data, &ratios, k, split_seed, train_fraction, csv),
        Command::Ablate { grid, out, resume } => ablate(&grid, &out, resume),
    }
}

fn threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("XSMAE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Usage(format!(
            "XSMAE_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match threads_from_env().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
