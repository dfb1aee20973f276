//! `softclu`: pretraining, clustering, export and self-verification.
//!
//! Exit codes:
//!
//! | code | meaning                                        |
//! |------|------------------------------------------------|
//! | 0    | success                                        |
//! | 1    | `verify` found a failing check                 |
//! | 2    | bad config file or flags                       |
//! | 3    | unreadable or missing data, file I/O failure   |
//! | 4    | numerical failure (non-finite loss, solver)    |
//! | 5    | checkpoint corrupt or incompatible with flags  |

mod cluster;
mod data;
mod exit;
mod pretrain;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use softclu::verify::{self, Level};

use crate::exit::Failure;

#[derive(Parser)]
#[command(name = "softclu", version, about = "Soft-clustering self-supervised pretraining for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder on every cloud under a directory.
    Pretrain(pretrain::PretrainArgs),
    /// Cluster one cloud with a trained checkpoint.
    Cluster(cluster::ClusterArgs),
    /// Color a cloud by a labels sidecar and write a PLY.
    Export(cluster::ExportArgs),
    /// Run the self-check suite against exact oracles.
    Verify {
        #[arg(long, value_enum, default_value_t = VerifyLevel::Fast)]
        level: VerifyLevel,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyLevel {
    Fast,
    Full,
}

fn run_verify(level: VerifyLevel) -> Result<(), Failure> {
    let level = match level {
        VerifyLevel::Fast => Level::Fast,
        VerifyLevel::Full => Level::Full,
    };
    let results = verify::run_suite(level);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure::verify(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Pretrain(args) => pretrain::run(args),
        Command::Cluster(args) => cluster::run_cluster(args),
        Command::Export(args) => cluster::run_export(args),
        Command::Verify { level } => run_verify(level),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use std::path::PathBuf;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn out_dir_flag_parses() {
        let cli = Cli::try_parse_from([
            "softclu", "pretrain", "--config", "c.toml", "--data-dir", "d", "--out-dir", "o", "--threads", "1",
        ])
        .unwrap();
        let Command::Pretrain(args) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(args.out_dir, PathBuf::from("o"));
        assert_eq!(args.threads, Some(1));
    }
}

#[cfg(test)]
mod command_tests {
    use std::fs;
    use std::path::Path;

    use softclu::pointcloud::{load_cloud, save_cloud};
    use softclu::synthetic::blob_cloud;
    use softclu::trainer::BackboneConfig;
    use softclu::{CloudFormat, SolverConfig, TrainConfig};

    use crate::cluster::{read_report, run_cluster, run_export, sidecar_path, ClusterArgs, ExportArgs};
    use crate::exit::{CHECKPOINT, CONFIG, DATA};
    use crate::pretrain::{run, PretrainArgs};

    fn write_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
        let config = TrainConfig {
            epochs,
            batch_size: 2,
            points: 64,
            checkpoint_every: 2,
            solver: SolverConfig {
                clusters: 2,
                ..SolverConfig::default()
            },
            encoder: BackboneConfig {
                hidden: vec![16],
                feature_dim: 8,
                global_context: true,
            },
            ..TrainConfig::default()
        };
        let path = dir.join("config.toml");
        fs::write(&path, config.to_toml()).unwrap();
        path
    }

    fn write_data(dir: &Path) -> std::path::PathBuf {
        let data = dir.join("data");
        fs::create_dir_all(data.join("nested")).unwrap();
        for s in 0..3u64 {
            let (cloud, _) = blob_cloud(2, 50, 10.0, 1.0, s);
            save_cloud(&cloud, &data.join(format!("c{s}.xyz")), CloudFormat::Xyz).unwrap();
        }
        let (cloud, _) = blob_cloud(2, 50, 10.0, 1.0, 9);
        save_cloud(&cloud, &data.join("nested/d.ply"), CloudFormat::PlyAscii).unwrap();
        data
    }

    fn pretrain_args(dir: &Path, config: std::path::PathBuf, data: std::path::PathBuf) -> PretrainArgs {
        PretrainArgs {
            config,
            data_dir: data,
            out_dir: dir.join("run"),
            threads: Some(1),
            epochs: None,
            seed: None,
        }
    }

    fn cluster_args(ckpt: &Path, cloud: &Path, out: &Path) -> ClusterArgs {
        ClusterArgs {
            checkpoint: ckpt.to_path_buf(),
            cloud: cloud.to_path_buf(),
            out: out.to_path_buf(),
            clusters: None,
            epsilon: None,
            lambda: None,
            fixed_iters: false,
        }
    }

    #[test]
    fn pretrain_cluster_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), 4);
        let data = write_data(dir.path());
        run(pretrain_args(dir.path(), config, data.clone())).unwrap();

        let run_dir = dir.path().join("run");
        let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        for name in ["manifest.json", "config.toml", "final.ckpt", "checkpoints/epoch-0002.ckpt", "checkpoints/epoch-0004.ckpt"] {
            assert!(run_dir.join(name).is_file(), "{name}");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
        assert!(manifest["finished_at"].is_string());

        let cloud = data.join("c0.xyz");
        let out = dir.path().join("labeled.ply");
        run_cluster(cluster_args(&run_dir.join("final.ckpt"), &cloud, &out)).unwrap();
        let report = read_report(&sidecar_path(&out)).unwrap();
        assert_eq!(report.points, 100);
        assert!(report.marginal_residual < 1e-5);
        assert!(report.equipartition_deviation < 100.0 * 1e-5);
        assert_eq!(report.counts.iter().sum::<usize>(), 100);
        assert!(report.counts.iter().all(|&c| c == 50), "{:?}", report.counts);
        let labeled = load_cloud(&out, CloudFormat::PlyAscii).unwrap();
        assert_eq!(labeled.len(), 100);

        let exported = dir.path().join("exported.ply");
        run_export(ExportArgs {
            cloud,
            labels: sidecar_path(&out),
            out: exported.clone(),
        })
        .unwrap();
        assert_eq!(fs::read(&exported).unwrap(), fs::read(&out).unwrap());
    }

    #[test]
    fn failures_map_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), 1);

        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        let err = run(pretrain_args(dir.path(), config.clone(), empty)).unwrap_err();
        assert_eq!(err.code, DATA);
        assert!(format!("{:#}", err.error).contains("found 0 point-cloud files"));

        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "epochs = \"many\"\n").unwrap();
        let err = run(pretrain_args(dir.path(), bad, write_data(dir.path()))).unwrap_err();
        assert_eq!(err.code, CONFIG);

        let mut args = pretrain_args(dir.path(), config, dir.path().join("data"));
        args.threads = Some(0);
        assert_eq!(run(args).unwrap_err().code, CONFIG);

        let garbage = dir.path().join("data/broken.xyz");
        fs::write(&garbage, "1 2\n").unwrap();
        let err = run(pretrain_args(dir.path(), write_config(dir.path(), 1), dir.path().join("data"))).unwrap_err();
        assert_eq!(err.code, DATA);
        fs::remove_file(&garbage).unwrap();

        run(pretrain_args(dir.path(), write_config(dir.path(), 1), dir.path().join("data"))).unwrap();
        let ckpt = dir.path().join("run/final.ckpt");
        let out = dir.path().join("o.ply");
        let mut args = cluster_args(&ckpt, &dir.path().join("data/c1.xyz"), &out);
        args.clusters = Some(3);
        assert_eq!(run_cluster(args).unwrap_err().code, CHECKPOINT);

        fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
        let args = cluster_args(&dir.path().join("junk.ckpt"), &dir.path().join("data/c1.xyz"), &out);
        assert_eq!(run_cluster(args).unwrap_err().code, CHECKPOINT);
    }
}
