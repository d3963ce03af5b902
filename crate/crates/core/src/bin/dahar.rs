use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dahar::blocks::Model;
use dahar::data::{generate_samples, load_dataset, save_dataset, Dataset, SceneSpec};
use dahar::harness::{
    ablate_rows, evaluate, inspect, report_text, sha256_hex, train_with, EvalMode, TrainConfig, ABLATION_ROWS,
    CONFIG_KEYS_HELP,
};
use dahar::metrics::Protocol;
use dahar::Result;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dahar", version, about = "Distraction-aware attribute recognition at desk scale", after_help = CONFIG_KEYS_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic distraction-scene dataset.
    Generate {
        /// Scene spec (key=value); benchmark defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes epoch checkpoints, latest.ckpt and run.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// crops: mean logits over four corners and centre; full: whole image.
        #[arg(long, default_value = "crops")]
        mode: EvalMode,
        #[arg(long, default_value = "wider")]
        protocol: Protocol,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the six-row toggle matrix for each seed.
    Ablate {
        /// Base config; must set train_data and test_data.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Rows to run (1-based); all six by default.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Keep per-run checkpoints, logs and reports here.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Write saliency, gate, median-binarized and ground-truth maps as PGM.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_text(&fs::read_to_string(path)?)?;
    cfg.apply_env();
    Ok(cfg)
}

fn require_data(path: &Option<PathBuf>, key: &str) -> Result<Dataset> {
    let p = path
        .as_ref()
        .ok_or_else(|| dahar::Error::Config(format!("config must set {key}")))?;
    load_dataset(p)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { spec, out, count, seed } => {
            let spec = match spec {
                Some(p) => SceneSpec::from_text(&fs::read_to_string(p)?)?,
                None => SceneSpec::benchmark(8),
            };
            let ds = Dataset::from_samples(Some(spec.clone()), generate_samples(&spec, count, seed)?)?;
            save_dataset(&ds, &out)?;
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = load_config(&config)?;
            let data = require_data(&cfg.train_data, "train_data")?;
            let outcome = train_with(&cfg, &data, Some(&out), &mut |s| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4} (main {:.4} side {:.4} mask {:.4})  {} ms",
                    s.epoch, s.lr, s.mean.total, s.mean.main, s.mean.side, s.mean.mask, s.wall_ms
                )
            })?;
            if let Some(test) = &cfg.test_data {
                let test = load_dataset(test)?;
                for mode in EvalMode::BOTH {
                    let r = evaluate(&outcome.model, &test, mode, Protocol::Wider)?;
                    eprintln!("test mAP ({mode}) {:.4}", r.map);
                }
            }
            eprintln!("checkpoint {}", out.join("latest.ckpt").display());
        }
        Cmd::Eval { ckpt, data, mode, protocol, out } => {
            let before = sha256_hex(&fs::read(&ckpt)?);
            let model = Model::<f32>::load(&ckpt)?;
            let report = evaluate(&model, &load_dataset(&data)?, mode, protocol)?;
            let text = report_text(&report, mode);
            print!("{text}");
            if let Some(p) = out {
                fs::write(p, &text)?;
            }
            debug_assert_eq!(before, sha256_hex(&fs::read(&ckpt)?));
        }
        Cmd::Ablate { config, seeds, rows, out, runs } => {
            let cfg = load_config(&config)?;
            let train = require_data(&cfg.train_data, "train_data")?;
            let test = require_data(&cfg.test_data, "test_data")?;
            let rows: Vec<usize> = match rows {
                Some(r) => r.into_iter().map(|r| r.wrapping_sub(1)).collect(),
                None => (0..ABLATION_ROWS.len()).collect(),
            };
            let table = ablate_rows(&cfg, &train, &test, &rows, &seeds, runs.as_deref(), &mut |r, seed, cells| {
                for c in cells {
                    eprintln!("row {} seed {seed} {}: mAP {:.4}", r + 1, c.mode, c.map);
                }
            })?;
            fs::write(&out, table.to_csv())?;
            print!("{}", table.to_csv());
        }
        Cmd::Inspect { ckpt, data, id, out } => {
            let model = Model::<f32>::load(&ckpt)?;
            let ds = load_dataset(&data)?;
            let sample = ds
                .find(&id)
                .ok_or_else(|| dahar::Error::Config(format!("no sample {id:?} in {}", data.display())))?;
            for f in inspect(&model, sample, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
