use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use softclu::checkpoint::Checkpoint;
use softclu::pointcloud::{default_palette, export_labeled_ply};
use softclu::trainer::{e_step_with, SolveMode};
use softclu::LabeledCloud;

use crate::data;
use crate::exit::Failure;

#[derive(Args)]
pub struct ClusterArgs {
    pub checkpoint: PathBuf,
    pub cloud: PathBuf,
    /// Colored PLY to write; the labels sidecar goes next to it as `.json`.
    pub out: PathBuf,
    /// Expected cluster count; must match the checkpoint's head.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Fixed cost mix, overriding the trained or configured value.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Run exactly the configured number of scaling rounds instead of
    /// solving to the configured tolerance.
    #[arg(long)]
    pub fixed_iters: bool,
}

#[derive(Args)]
pub struct ExportArgs {
    pub cloud: PathBuf,
    /// Labels sidecar written by `cluster`.
    pub labels: PathBuf,
    pub out: PathBuf,
}

/// JSON sidecar written next to a clustered PLY.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub checkpoint: PathBuf,
    pub cloud: PathBuf,
    pub points: usize,
    pub clusters: usize,
    pub epsilon: f64,
    pub lambda: f64,
    /// Points per cluster under the arg-max labels.
    pub counts: Vec<usize>,
    pub mean_confidence: f64,
    /// Largest deviation of the transport plan's marginals.
    pub marginal_residual: f64,
    /// Largest `|colsum(gamma) - N/J|`.
    pub equipartition_deviation: f64,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

pub fn run_cluster(args: ClusterArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut solver = ckpt.meta.solver.clone();
    if let Some(j) = args.clusters {
        if j != ckpt.params.clusters() {
            return Err(Failure::checkpoint(format!(
                "--clusters {j} does not match the checkpoint head width {}; \
                 a different cluster count needs a re-initialized head",
                ckpt.params.clusters()
            )));
        }
    }
    if let Some(eps) = args.epsilon {
        solver.epsilon = eps;
    }
    if let Some(lambda) = args.lambda {
        solver.lambda = lambda;
        solver.learn_lambda = false;
    }
    solver.validate()?;
    let lambda = softclu::trainer::effective_lambda(&ckpt.params, &solver);

    let cloud = data::load(&args.cloud)?;
    let mode = if args.fixed_iters { SolveMode::Fixed } else { SolveMode::Converged };
    let step = e_step_with(&ckpt.params, &cloud.normalize(), &solver, mode)?;

    let labeled = LabeledCloud::from_soft_labels(cloud.clone(), step.labels.gamma.view())?;
    let mut counts = vec![0; solver.clusters];
    for &l in &labeled.labels {
        counts[l] += 1;
    }
    let report = ClusterReport {
        checkpoint: args.checkpoint.clone(),
        cloud: args.cloud.clone(),
        points: cloud.len(),
        clusters: solver.clusters,
        epsilon: solver.epsilon,
        lambda,
        counts,
        mean_confidence: labeled.confidences.iter().sum::<f64>() / cloud.len() as f64,
        marginal_residual: step.plan.max_marginal_residual(),
        equipartition_deviation: step.labels.equipartition_deviation(),
        labels: labeled.labels.clone(),
        confidences: labeled.confidences.clone(),
    };

    export_labeled_ply(&labeled, &args.out, &default_palette(solver.clusters))?;
    let sidecar = sidecar_path(&args.out);
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    fs::write(&sidecar, text + "\n").map_err(|e| Failure::data(format!("{}: {e}", sidecar.display())))?;
    eprintln!(
        "{} points into {} clusters, marginal residual {:.2e}, mean confidence {:.3}",
        report.points, report.clusters, report.marginal_residual, report.mean_confidence
    );
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ClusterReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn run_export(args: ExportArgs) -> Result<(), Failure> {
    let cloud = data::load(&args.cloud)?;
    let report = read_report(&args.labels)?;
    if report.labels.len() != cloud.len() {
        return Err(Failure::data(format!(
            "{} has {} labels but {} has {} points",
            args.labels.display(),
            report.labels.len(),
            args.cloud.display(),
            cloud.len()
        )));
    }
    let clusters = report.clusters.max(report.labels.iter().max().map_or(0, |m| m + 1));
    let labeled = LabeledCloud::new(cloud, report.labels, report.confidences)?;
    export_labeled_ply(&labeled, &args.out, &default_palette(clusters))?;
    Ok(())
}
