use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conditions::{targets, Features, Targets};
use super::model::CWFAModel;
use crate::error::{Error, Result};
use crate::numerics::{Graph, LionState, Tensor};

/// A unit of the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum Stage {
    LowRes,
    Level(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::LowRes => write!(f, "lowres"),
            Stage::Level(i) => write!(f, "level{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean objective over the epoch's samples.
    pub loss: f64,
    /// Mean NLL part (equal to `loss` for the low-resolution stage).
    pub nll: f64,
    /// Mean spatial part (zero for the low-resolution stage).
    pub spatial: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Mean `total_loglik` over the training set before and after training.
    pub initial_nll: Vec<f64>,
    pub final_nll: Vec<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn curve(&self, stage: Stage) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.stage == stage).map(|e| e.loss).collect()
    }
}

/// Stage for every epoch: chunks of `epochs_per_level` cycling through the
/// low-resolution net and then the flow levels, coarse to fine.
pub fn schedule(levels: usize, epochs: usize, per_stage: usize) -> Vec<Stage> {
    let mut order = vec![Stage::LowRes];
    order.extend((0..levels).rev().map(Stage::Level));
    (0..epochs).map(|e| order[(e / per_stage.max(1)) % order.len()]).collect()
}

struct Sample {
    feats: Features,
    targets: Targets,
}

fn prepare(model: &CWFAModel, volumes: &[Tensor], images: &[Tensor]) -> Result<Vec<Sample>> {
    if volumes.len() != images.len() || volumes.is_empty() {
        return Err(Error::invalid(format!(
            "need matching, nonempty volumes and images, got {} and {}",
            volumes.len(),
            images.len()
        )));
    }
    volumes
        .iter()
        .zip(images)
        .map(|(v, img)| {
            if v.shape() != model.prior.volume.shape() {
                return Err(Error::shape(format!(
                    "training volume {:?} vs model {:?}",
                    v.shape(),
                    model.prior.volume.shape()
                )));
            }
            Ok(Sample {
                feats: model.features(&model.conditions(img)?)?,
                targets: targets(v, model.levels.len())?,
            })
        })
        .collect()
}

fn mean_loglik(model: &CWFAModel, volumes: &[Tensor], images: &[Tensor]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.levels.len() + 1];
    for (v, img) in volumes.iter().zip(images) {
        for (a, x) in acc.iter_mut().zip(model.total_loglik(v, &model.conditions(img)?)?) {
            *a += x;
        }
    }
    Ok(acc.into_iter().map(|a| a / volumes.len() as f64).collect())
}

/// Train all stages of `model` on paired volumes and images, one optimizer
/// step per sample.
pub fn train(model: &mut CWFAModel, volumes: &[Tensor], images: &[Tensor]) -> Result<TrainReport> {
    let start = Instant::now();
    let samples = prepare(model, volumes, images)?;
    let initial_nll = mean_loglik(model, volumes, images)?;
    let cfg = model.config.clone();
    let opt = cfg.optimizer();
    let n = model.levels.len();
    let mut lr_state = LionState::new(opt, &model.store, &model.lr.params())?;
    let mut level_states = model
        .levels
        .iter()
        .map(|l| LionState::new(opt, &model.store, &l.params()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for (epoch, stage) in schedule(n, cfg.epochs, cfg.epochs_per_level).into_iter().enumerate() {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss, mut nll, mut spatial) = (0.0, 0.0, 0.0);
        for &k in &order {
            let s = &samples[k];
            let mut g = Graph::new();
            let (total, parts) = match stage {
                Stage::LowRes => {
                    let l = model.lr_loss_graph(&mut g, &model.store, &s.feats, &s.targets.approx[n])?;
                    (l, None)
                }
                Stage::Level(i) => {
                    let l = model.level_loss_graph(
                        &mut g,
                        &model.store,
                        i,
                        &s.feats,
                        &s.targets.approx[i],
                        &s.targets.approx[i + 1],
                        &s.targets.details[i],
                    )?;
                    (l.total, Some((l.nll, l.spatial)))
                }
            };
            let value = g.scalar(total);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    epoch,
                    loss: value,
                });
            }
            loss += value;
            match parts {
                Some((a, b)) => {
                    nll += g.scalar(a);
                    spatial += g.scalar(b);
                }
                None => nll += value,
            }
            g.backward(total, &mut model.store)?;
            match stage {
                Stage::LowRes => lr_state.step(&mut model.store)?,
                Stage::Level(i) => level_states[i].step(&mut model.store)?,
            }
        }
        let m = samples.len() as f64;
        let rec = EpochRecord {
            epoch,
            stage,
            loss: loss / m,
            nll: nll / m,
            spatial: spatial / m,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch} {stage}: loss {:.5} ({:.2}s)", rec.loss, rec.seconds);
        records.push(rec);
    }

    let final_nll = mean_loglik(model, volumes, images)?;
    Ok(TrainReport {
        epochs: records,
        initial_nll,
        final_nll,
        seconds: start.elapsed().as_secs_f64(),
    })
}
