//! The full training loop: batch assembly from the manifest, per-step
//! optimization, per-epoch validation on a held-out slice of the labeled
//! set, logging, and checkpointing.

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::data::{materialize, DataPool};
use super::step::{train_step, StepBatch, TrainState};
use crate::datagen::DatasetManifest;
use crate::error::{CosegError, Result};
use crate::evaluate::evaluate_domain;
use crate::losses::LossReport;
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub val_dsc: Vec<f64>,
    pub val_iou: Vec<f64>,
    pub mean_loss: LossReport,
}

pub struct RunArtifacts<F: Scalar> {
    pub state: TrainState<F>,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub step_log: Vec<(u64, LossReport)>,
}

/// Provenance header lines stamped on every output file.
pub fn provenance_lines(cfg: &TrainConfig) -> Vec<String> {
    vec![format!(
        "version={} config-sha256={} seed={}",
        env!("CARGO_PKG_VERSION"),
        cfg.config_hash(),
        cfg.seed
    )]
}

/// Train per the config on the manifest's data. Deterministic given
/// (cfg.seed, manifest). When `out_dir` is set, writes `train_log.csv`,
/// `metrics.csv`, a per-epoch `latest.ckpt` and a `final.ckpt`.
pub fn run_training<F: Scalar>(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    manifest_dir: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts<F>> {
    let cfg = cfg.clone().normalized();
    cfg.validate()?;
    let pool: DataPool<F> = materialize(
        manifest,
        cfg.crop_size,
        cfg.model.num_classes,
        cfg.val_fraction,
        cfg.seed,
        manifest_dir,
    )?;
    if pool.train_labeled.is_empty() {
        return Err(CosegError::Config(
            "manifest provides no labeled training data".into(),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CosegError::io(dir, e))?;
    }

    let mut state = TrainState::<F>::new(cfg.clone())?;
    let n_lab = pool.train_labeled.len();
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        n_lab.div_ceil(cfg.batch_size)
    };

    let mut step_log: Vec<(u64, LossReport)> = Vec::new();
    let mut epoch_metrics: Vec<EpochMetrics> = Vec::new();

    for epoch in 0..cfg.epochs as u64 {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..n_lab).collect();
        order.shuffle(&mut stream(cfg.seed, "labeled-order", epoch));

        let mut epoch_sum = LossReport {
            sup: 0.0,
            cps: 0.0,
            cfs: 0.0,
            loc: 0.0,
            rot: 0.0,
            total: 0.0,
        };
        for s in 0..steps_per_epoch {
            let global_step = epoch * steps_per_epoch as u64 + s as u64;
            let labeled: Vec<_> = (0..cfg.batch_size.min(n_lab))
                .map(|k| &pool.train_labeled[order[(s * cfg.batch_size + k) % n_lab]])
                .collect();

            let pair = if pool.unlabeled.len() >= 2 {
                let mut rng = stream(cfg.seed, "unlabeled-pick", global_step);
                let i = rng.random_range(0..pool.unlabeled.len());
                let mut j = rng.random_range(0..pool.unlabeled.len());
                for _ in 0..8 {
                    if j != i {
                        break;
                    }
                    j = rng.random_range(0..pool.unlabeled.len());
                }
                Some((&pool.unlabeled[i], &pool.unlabeled[j]))
            } else {
                None
            };

            let batch = StepBatch {
                labeled,
                unlabeled_pair: pair,
            };
            let step_seed = derive_seed(cfg.seed, "step", global_step);
            let report = train_step(&mut state, &batch, step_seed)?;
            if !report.total.is_finite() {
                return Err(CosegError::Numeric(format!(
                    "total loss became non-finite at step {global_step}"
                )));
            }
            if report.total > cfg.divergence_threshold {
                return Err(CosegError::Diverged {
                    step: global_step,
                    total: report.total,
                });
            }
            epoch_sum.sup += report.sup;
            epoch_sum.cps += report.cps;
            epoch_sum.cfs += report.cfs;
            epoch_sum.loc += report.loc;
            epoch_sum.rot += report.rot;
            epoch_sum.total += report.total;
            step_log.push((global_step, report));
        }

        let inv = 1.0 / steps_per_epoch as f64;
        let mean_loss = LossReport {
            sup: epoch_sum.sup * inv,
            cps: epoch_sum.cps * inv,
            cfs: epoch_sum.cfs * inv,
            loc: epoch_sum.loc * inv,
            rot: epoch_sum.rot * inv,
            total: epoch_sum.total * inv,
        };
        let (val_dsc, val_iou) = if pool.val_labeled.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let r = evaluate_domain(
                &state.model1,
                &state.model2,
                &state.store,
                &pool.val_labeled,
                "val",
                cfg.sigma,
            )?;
            (r.per_class_dsc, r.per_class_iou)
        };
        epoch_metrics.push(EpochMetrics {
            epoch,
            val_dsc,
            val_iou,
            mean_loss,
        });

        if let Some(dir) = out_dir {
            save_checkpoint(&state, &dir.join("latest.ckpt"))?;
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&state, &dir.join("final.ckpt"))?;
        write_step_log(&cfg, &step_log, &dir.join("train_log.csv"))?;
        write_epoch_metrics(&cfg, &epoch_metrics, &dir.join("metrics.csv"))?;
    }

    Ok(RunArtifacts {
        state,
        epoch_metrics,
        step_log,
    })
}

pub fn write_step_log(
    cfg: &TrainConfig,
    log: &[(u64, LossReport)],
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    for line in provenance_lines(cfg) {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("step,sup,cps,cfs,loc,rot,total\n");
    for (step, r) in log {
        let _ = writeln!(
            out,
            "{step},{},{},{},{},{},{}",
            r.sup, r.cps, r.cfs, r.loc, r.rot, r.total
        );
    }
    std::fs::write(path, out).map_err(|e| CosegError::io(path, e))
}

pub fn write_epoch_metrics(
    cfg: &TrainConfig,
    metrics: &[EpochMetrics],
    path: &Path,
) -> Result<()> {
    let classes = metrics.first().map_or(0, |m| m.val_dsc.len());
    let mut out = String::new();
    for line in provenance_lines(cfg) {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("epoch");
    for c in 0..classes {
        let _ = write!(out, ",val_dsc_c{c},val_iou_c{c}");
    }
    out.push_str(",sup,cps,cfs,loc,rot,total\n");
    for m in metrics {
        let _ = write!(out, "{}", m.epoch);
        for c in 0..classes {
            let _ = write!(out, ",{},{}", m.val_dsc[c], m.val_iou[c]);
        }
        let l = &m.mean_loss;
        let _ = writeln!(out, ",{},{},{},{},{},{}", l.sup, l.cps, l.cfs, l.loc, l.rot, l.total);
    }
    std::fs::write(path, out).map_err(|e| CosegError::io(path, e))
}
