use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsaflow::harness::{
    ablate, dump_attention, evaluate, load_checkpoint, save_checkpoint, train, write_eval_csvs, write_log_csv,
    HarnessError, TrainConfig,
};
use tsaflow::io::write_pgm16;
use tsaflow::scenegen::{generate_dataset, read_dataset, write_dataset, SceneConfig, SceneSample};

#[derive(Parser)]
#[command(
    name = "tsaflow",
    version,
    about = "Trustworthy self-attention optical flow on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metric CSVs.
    Eval(EvalArgs),
    /// Dump one query cell's attention map.
    DumpAttn(DumpArgs),
    /// Train and evaluate the four-row ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    /// Square image side; overrides the JSON scene config.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON scene config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_translation: Option<i32>,
    /// Draw pixel-level geometry and translations instead of whole cells.
    #[arg(long)]
    unaligned: bool,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    constraint_weight: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    no_ext_features: bool,
    #[arg(long)]
    no_repulsion: bool,
    #[arg(long)]
    no_attraction: bool,
    #[arg(long)]
    no_gma: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    /// Per-step CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "eval")]
    prefix: String,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    image: usize,
    /// Query cell as `x,y`.
    #[arg(long, value_parser = parse_query)]
    query: (usize, usize),
    /// Output prefix; writes `<out>.pgm` and `<out>.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Also write the occlusion map as `<out>_om.pgm`.
    #[arg(long)]
    om: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_query(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    Ok((
        x.trim().parse().map_err(|e| format!("bad x: {e}"))?,
        y.trim().parse().map_err(|e| format!("bad y: {e}"))?,
    ))
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_data(path: &Path, what: &str) -> Result<Vec<SceneSample>, CliError> {
    existing(path, what)?;
    read_dataset(path).map_err(runtime)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    existing(path, "config")?;
    let text = fs::read_to_string(path).map_err(runtime)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn train_config(f: &TrainFlags) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = match &f.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = &f.train_data {
        cfg.train_data = Some(p.clone());
    }
    if let Some(p) = &f.val_data {
        cfg.val_data = Some(p.clone());
    }
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.iters {
        cfg.model.refiner.iters = v;
    }
    if let Some(v) = f.constraint_weight {
        cfg.constraint_weight = v;
    }
    if let Some(v) = f.gamma {
        cfg.gamma = v;
    }
    cfg.flags.use_ext_features &= !f.no_ext_features;
    cfg.flags.use_repulsion &= !f.no_repulsion;
    cfg.flags.use_attraction &= !f.no_attraction;
    cfg.flags.use_gma_baseline &= !f.no_gma;
    cfg.validate()?;
    Ok(cfg)
}

fn train_set(cfg: &TrainConfig) -> Result<Vec<SceneSample>, CliError> {
    match &cfg.train_data {
        Some(p) => load_data(p, "training dataset"),
        None if cfg.steps == 0 => Ok(Vec::new()),
        None => Err(CliError::Usage("--train-data is required".into())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => {
            let mut cfg: SceneConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => SceneConfig::default(),
            };
            if let Some(s) = a.size {
                cfg.height = s;
                cfg.width = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(t) = a.max_translation {
                cfg.max_translation = t;
            }
            cfg.cell_aligned &= !a.unaligned;
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let samples = generate_dataset(&cfg, a.count).map_err(runtime)?;
            write_dataset(&samples, &a.out).map_err(runtime)?;
            println!("wrote {} samples to {}", samples.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = train_config(&a.flags)?;
            let data = train_set(&cfg)?;
            let outcome = match train(&cfg, &data) {
                Ok(o) => o,
                Err(HarnessError::NonFinite {
                    step,
                    last_good,
                    diagnostic,
                }) => {
                    save_checkpoint(&last_good, &a.out)?;
                    return Err(CliError::Runtime(format!(
                        "non-finite value at step {step} ({diagnostic}); saved step-{} checkpoint to {}",
                        last_good.step,
                        a.out.display()
                    )));
                }
                Err(e) => return Err(e.into()),
            };
            save_checkpoint(&outcome.checkpoint, &a.out)?;
            let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.csv"));
            fs::write(&log_path, write_log_csv(&outcome.log)).map_err(runtime)?;
            println!(
                "trained {} steps ({} parameters); checkpoint {}",
                outcome.checkpoint.step,
                outcome.checkpoint.params.parameter_count(),
                a.out.display()
            );
        }
        Command::Eval(a) => {
            existing(&a.ckpt, "checkpoint")?;
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = load_data(&a.data, "dataset")?;
            let records = evaluate(&ckpt, &data)?;
            let summary = write_eval_csvs(&a.out_dir, &a.prefix, &records)?;
            for c in ["aepe_all", "moa_occ", "mrd_noc", "mma_noc"] {
                match summary.get(c) {
                    Some(v) => println!("{c}: {v:.4}"),
                    None => println!("{c}: undefined"),
                }
            }
        }
        Command::DumpAttn(a) => {
            existing(&a.ckpt, "checkpoint")?;
            let ckpt = load_checkpoint(&a.ckpt)?;
            let data = load_data(&a.data, "dataset")?;
            let sample = data
                .get(a.image)
                .ok_or_else(|| CliError::Usage(format!("image {} outside a {}-sample dataset", a.image, data.len())))?;
            let dump = dump_attention(&ckpt, sample, a.query)?;
            let (w, h) = (dump.cells.w, dump.cells.h);
            write_pgm16(&a.out.with_extension("pgm"), w, h, &dump.weights).map_err(runtime)?;
            fs::write(a.out.with_extension("csv"), dump.csv()).map_err(runtime)?;
            if a.om {
                let name = format!("{}_om.pgm", a.out.file_stem().unwrap_or_default().to_string_lossy());
                write_pgm16(&a.out.with_file_name(name), w, h, &dump.om).map_err(runtime)?;
            }
            let (bx, by) = dump.argmax();
            println!("query ({},{}): peak at ({bx},{by})", a.query.0, a.query.1);
        }
        Command::Ablate(a) => {
            let cfg = train_config(&a.flags)?;
            let train_data = train_set(&cfg)?;
            let val_path = cfg
                .val_data
                .clone()
                .ok_or_else(|| CliError::Usage("--val-data is required".into()))?;
            let val = load_data(&val_path, "validation dataset")?;
            let rows = ablate(&cfg, &train_data, &val, Some(&a.out_dir))?;
            println!("row,moa_occ,mrd_noc,mma_noc,aepe_all,rect_aepe_all");
            for r in &rows {
                let g = |c: &str| r.summary.get(c).map(|v| format!("{v:.4}")).unwrap_or_default();
                println!(
                    "{},{},{},{},{},{}",
                    r.label,
                    g("moa_occ"),
                    g("mrd_noc"),
                    g("mma_noc"),
                    g("aepe_all"),
                    g("rect_aepe_all")
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
