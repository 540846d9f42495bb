//! `soc`: dataset generation, training, evaluation, inference and
//! self-verification for the referring segmentation model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use soc_core::synth::{load_split, make_dataset, mask_lines, DatasetSpec, Split};
use soc_core::train::{evaluate, num_threads, predict_all, prepare, train, CSV_HEADER};
use soc_core::{verify, Config, ConfigError, Model, ParamStore, SocError};

#[derive(Parser, Debug)]
#[command(name = "soc", version, about = "Referring video object segmentation at desk scale")]
struct Cli {
    /// `key = value` configuration file; unspecified keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `gen`, the run directory
    /// otherwise).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic dataset (clips, masks, manifest).
    Gen,
    /// Trains on the train split; writes a checkpoint and a CSV loss log.
    Train,
    /// Scores a checkpoint on a split; writes JSON and TSV reports.
    Eval {
        /// Defaults to `checkpoint.bin` in the run directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Predicts masks for a split; writes them as run-length lines.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Runs the gradient, assignment and metric verification suites.
    Verify,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "train_log.csv";
const CONFIG_FILE: &str = "config.txt";

fn load_config(cli: &Cli) -> Result<Config, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SocError + '_ {
    move |source| SocError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), SocError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, contents).map_err(io(path))
}

fn run_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn load_checkpoint(model: &Model, path: &Path) -> Result<ParamStore, SocError> {
    let params = ParamStore::load(path)?;
    params.check_compatible(&model.init_params(model.config.seed))?;
    Ok(params)
}

fn run(cli: &Cli) -> Result<(), SocError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let manifest = make_dataset(&DatasetSpec::from_config(&cfg), &dir)?;
            println!("wrote {} train + {} val samples, manifest {}", cfg.n_train, cfg.n_val, manifest.display());
        }
        Command::Train => {
            let model = Model::new(&cfg)?;
            let clips = prepare(&model, &load_split(&cfg.data_dir, Split::Train)?)?;
            let dir = run_dir(cli, &cfg);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            write(&dir.join(CONFIG_FILE), cfg.to_text())?;
            let mut params = model.init_params(cfg.seed);
            let mut log = format!("{CSV_HEADER}\n");
            let log_path = dir.join(LOG_FILE);
            train(&model, &mut params, &clips, cfg.epochs, |epoch, _| {
                let row = epoch.csv_row();
                println!("{row}");
                log.push_str(&row);
                log.push('\n');
                write(&log_path, &log)
            })?;
            let ckpt = dir.join(CHECKPOINT_FILE);
            params.save(&ckpt)?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Eval { checkpoint, split } => {
            let model = Model::new(&cfg)?;
            let dir = run_dir(cli, &cfg);
            let params = load_checkpoint(&model, &checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE)))?;
            let split = Split::from(*split);
            let clips = prepare(&model, &load_split(&cfg.data_dir, split)?)?;
            let (report, _) = evaluate(&model, &params, &clips, num_threads())?;
            write(&dir.join(format!("eval_{}.json", split.name())), report.to_json())?;
            write(&dir.join(format!("eval_{}.tsv", split.name())), report.to_tsv())?;
            println!(
                "{} videos: J {:.4} F {:.4} J&F {:.4} mAP {:.4} IoU variance {:.5}",
                report.num_videos, report.j_mean, report.f_mean, report.jf_mean, report.map_50_95, report.iou_variance
            );
        }
        Command::Infer { checkpoint, split } => {
            let model = Model::new(&cfg)?;
            let dir = run_dir(cli, &cfg);
            let params = load_checkpoint(&model, &checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE)))?;
            let split = Split::from(*split);
            let clips = prepare(&model, &load_split(&cfg.data_dir, split)?)?;
            let preds = predict_all(&model, &params, &clips, num_threads())?;
            let mut lines = String::new();
            for (clip, pred) in clips.iter().zip(&preds) {
                lines.push_str(&mask_lines(&clip.id, &pred.masks));
                println!("{} query {} score {:.4}", clip.id, pred.query, pred.scores[pred.query]);
            }
            write(&dir.join(format!("predictions_{}.rle", split.name())), lines)?;
        }
        Command::Verify => {
            let outcomes = verify::run_all()?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(SocError::Contract(format!("{failed} of {} checks failed", outcomes.len())));
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SocError::Config(_) | SocError::CheckpointShape { .. } | SocError::MissingParam(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
