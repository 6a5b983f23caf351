use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{loss_graph, standard_normal, LossBreakdown, LossVars, Target};
use super::optim::{clip_global_norm, Adam};
use super::TrainConfig;
use crate::checkpoint::Dtype;
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Bound, Latent, ModelConfig, ParamStore};
use crate::tape::Graph;

/// A per-record loss over a set of trainable tensors.
pub trait Objective: Sync {
    fn latent_dim(&self) -> usize;

    /// Builds the loss on `g`, where `trainable` binds the tensors being fitted.
    fn record_loss(
        &self,
        g: &mut Graph,
        trainable: &Bound,
        rec: &Record,
        target: &Target,
        latent: Latent<'_>,
    ) -> Result<LossVars>;
}

/// Every model parameter is trainable.
pub struct Pretrain<'a> {
    pub cfg: &'a ModelConfig,
    pub tcfg: &'a TrainConfig,
}

impl Objective for Pretrain<'_> {
    fn latent_dim(&self) -> usize {
        self.cfg.d_z
    }

    fn record_loss(
        &self,
        g: &mut Graph,
        trainable: &Bound,
        rec: &Record,
        target: &Target,
        latent: Latent<'_>,
    ) -> Result<LossVars> {
        loss_graph(g, trainable, self.cfg, self.tcfg, rec, target, latent, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over records of the losses seen during the epoch.
    pub loss: LossBreakdown,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
}

impl TrainReport {
    pub fn first_total(&self) -> Option<f64> {
        self.history.first().map(|e| e.loss.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.history.last().map(|e| e.loss.total)
    }
}

/// Loss and gradients of one record with respect to `trainable`.
pub(crate) fn record_gradient(
    objective: &dyn Objective,
    trainable: &ParamStore,
    rec: &Record,
    target: &Target,
    noise: &crate::tensor::Mat,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut g = Graph::new();
    let bound = Bound::trainable(&mut g, trainable);
    let lv = objective.record_loss(&mut g, &bound, rec, target, Latent::Sample(noise))?;
    let grads = g.backward(lv.total);
    let mut out = ParamStore::new();
    for (name, var) in bound.iter() {
        out.insert(name, grads.get(var));
    }
    Ok((lv.values(&g), out))
}

/// Shuffled mini-batch Adam over `records`. Per-record gradients run in
/// parallel and are reduced in batch order. `on_epoch` sees the parameters
/// after each epoch. On a non-finite loss or gradient the batch is not
/// applied, so `trainable` keeps the last good values.
pub fn fit(
    trainable: &mut ParamStore,
    records: &[Record],
    tcfg: &TrainConfig,
    objective: &dyn Objective,
    on_epoch: &mut dyn FnMut(&EpochLog, &ParamStore) -> Result<()>,
) -> Result<TrainReport> {
    tcfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let targets = records.iter().map(Target::full_horizon).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = Adam::new(trainable, tcfg);
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..records.len()).collect();

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(tcfg.batch_size) {
            let len = batch.iter().map(|&i| targets[i].len()).max().unwrap_or(0);
            let noises: Vec<_> = batch
                .iter()
                .map(|&i| standard_normal(&mut rng, records[i].n_channels(), objective.latent_dim()))
                .collect();
            let snapshot = &*trainable;
            let results: Vec<Result<(LossBreakdown, ParamStore)>> = batch
                .par_iter()
                .zip(noises.par_iter())
                .map(|(&i, noise)| record_gradient(objective, snapshot, &records[i], &targets[i].padded(len), noise))
                .collect();
            let mut acc = trainable.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() || grads.check_finite().is_err() {
                    return Err(Error::NanLoss { epoch });
                }
                sum.mse += loss.mse;
                sum.kl += loss.kl;
                sum.lb += loss.lb;
                sum.total += loss.total;
                for ((_, a), (_, g)) in acc.iter_mut().zip(grads.iter()) {
                    a.axpy(scale, g);
                }
            }
            clip_global_norm(&mut acc, tcfg.grad_clip_norm);
            adam.update(trainable, &acc);
        }
        let n = records.len() as f64;
        let log = EpochLog {
            epoch,
            loss: LossBreakdown {
                mse: sum.mse / n,
                kl: sum.kl / n,
                lb: sum.lb / n,
                total: sum.total / n,
            },
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: total {:.6e}", log.loss.total);
        on_epoch(&log, trainable)?;
        report.history.push(log);
    }
    Ok(report)
}

pub fn write_train_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,mse,kl,lb,total,wall_seconds\n");
    for e in history {
        let l = &e.loss;
        let _ = writeln!(text, "{},{},{},{},{},{}", e.epoch, l.mse, l.kl, l.lb, l.total, e.wall_seconds);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
    }
    std::fs::write(path, text).map_err(|err| Error::io(path, err))
}

/// Pretrains every model parameter. With `out_dir` set, `train_log.csv` is
/// rewritten after each epoch and the checkpoint is written on the
/// configured cadence, at the end, and on a non-finite abort (holding the
/// last good parameters).
pub fn train(
    records: &[Record],
    params: &mut ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<(&Path, Dtype)>,
) -> Result<TrainReport> {
    let objective = Pretrain { cfg, tcfg };
    let mut history = Vec::new();
    let mut hook = |log: &EpochLog, p: &ParamStore| -> Result<()> {
        history.push(log.clone());
        if let Some((dir, dtype)) = out_dir {
            write_train_log(&dir.join("train_log.csv"), &history)?;
            if tcfg.checkpoint_every > 0 && log.epoch % tcfg.checkpoint_every == 0 {
                save_checkpoint(dir, cfg, p, dtype)?;
            }
        }
        Ok(())
    };
    let result = fit(params, records, tcfg, &objective, &mut hook);
    if let Some((dir, dtype)) = out_dir {
        match &result {
            Ok(_) | Err(Error::NanLoss { .. }) => save_checkpoint(dir, cfg, params, dtype)?,
            Err(_) => {}
        }
    }
    result
}
