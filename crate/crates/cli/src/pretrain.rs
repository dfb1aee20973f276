use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::Args;
use serde::{Deserialize, Serialize};
use softclu::checkpoint::{sha256_hex, Checkpoint, CheckpointMeta};
use softclu::trainer::{pretrain_with, TrainConfig, TrainState};

use crate::data;
use crate::exit::Failure;

#[derive(Args)]
pub struct PretrainArgs {
    /// Training config (TOML). Missing keys take their defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory searched recursively for .off, .ply and .xyz clouds.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, env = "SOFTCLU_OUT_DIR", default_value = "softclu-run")]
    pub out_dir: PathBuf,
    /// Worker threads for the E-step. Results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override `epochs` from the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Written to `manifest.json` before training starts, and again with
/// `finished_at` once it ends.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

pub fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    TrainConfig::from_toml(&text).map_err(|e| Failure::from(e).context(path.display().to_string()))
}

fn save_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig, hash: &str) -> softclu::Result<()> {
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            encoder: config.encoder_config(),
            solver: config.solver.clone(),
            config_hash: hash.to_string(),
            epoch: state.epoch,
            step: state.step,
        },
        params: state.params.clone(),
    };
    ckpt.save(path)
}

pub fn run(args: PretrainArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let threads = match args.threads {
        Some(0) => return Err(Failure::config("--threads must be at least 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };

    let inputs = data::discover(&args.data_dir)?;
    let clouds = inputs.iter().map(|p| data::load(p)).collect::<Result<Vec<_>, _>>()?;

    let out = &args.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_failure(&ckpt_dir, e))?;

    let resolved = config.to_toml();
    let config_hash = sha256_hex(resolved.as_bytes());
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_hash: config_hash.clone(),
        seed: config.seed,
        threads,
        inputs: inputs.clone(),
        started_at: now(),
        finished_at: None,
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, &resolved).map_err(|e| io_failure(&config_path, e))?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).map_err(|e| io_failure(&metrics_path, e))?);
    eprintln!(
        "pretraining on {} clouds for {} epochs ({} threads), writing to {}",
        clouds.len(),
        config.epochs,
        threads,
        out.display()
    );

    let state = pretrain_with(&clouds, &config, threads, |state, m| {
        let line = serde_json::to_string(m).expect("serializable");
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| softclu::Error::io(&metrics_path, e))?;
        eprintln!(
            "epoch {:>4}  l_tot {:.5}  l_soft {:.5}  l_orth {:.5}  lr {:.2e}",
            m.epoch, m.l_total, m.l_soft, m.l_orth, m.lr
        );
        if config.checkpoint_every > 0 && m.epoch % config.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("epoch-{:04}.ckpt", m.epoch));
            save_checkpoint(&path, state, &config, &config_hash)?;
        }
        Ok(())
    })?;

    save_checkpoint(&out.join("final.ckpt"), &state, &config, &config_hash)?;
    manifest.finished_at = Some(now());
    write_json(&manifest_path, &manifest)?;
    eprintln!("final checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}
