use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Tensor};

use crate::rng::{SeedTree, SHUFFLE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-batch training loss for each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn snapshot(vs: &nn::VarStore) -> HashMap<String, Tensor> {
    vs.variables()
        .into_iter()
        .map(|(k, v)| (k, v.detach().copy()))
        .collect()
}

fn restore(vs: &nn::VarStore, saved: &HashMap<String, Tensor>) {
    let vars = vs.variables();
    tch::no_grad(|| {
        for (k, v) in vars {
            if let Some(src) = saved.get(&k) {
                let mut v = v;
                v.copy_(src);
            }
        }
    });
}

/// Mini-batch training loop shared by all networks.
///
/// `batch_loss(split, indices, train)` must return the scalar loss for the
/// given sample indices of `split`. Samples are reshuffled every epoch from
/// the seed tree. After the last epoch the weights with the lowest
/// validation loss are restored (training loss when there is no validation
/// split).
pub fn fit<F>(vs: &nn::VarStore, n_train: usize, n_val: usize, cfg: &TrainConfig, mut batch_loss: F) -> Result<TrainReport>
where
    F: FnMut(Split, &[usize], bool) -> Result<Tensor>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut opt = match cfg.optimizer {
        Optimizer::Adam => nn::Adam::default().build(vs, cfg.learning_rate)?,
    };
    let seeds = SeedTree::new(cfg.seed);
    let mut report = TrainReport {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = None;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeds.stream(SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = batch_loss(Split::Train, chunk, true)?;
            opt.backward_step(&loss);
            total += loss.double_value(&[]) * chunk.len() as f64;
        }
        let train = total / n_train as f64;
        report.train_loss.push(train);

        let score = if n_val > 0 {
            let idx: Vec<usize> = (0..n_val).collect();
            let mut total = 0.0;
            for chunk in idx.chunks(cfg.batch_size) {
                let loss = tch::no_grad(|| batch_loss(Split::Validation, chunk, false))?;
                total += loss.double_value(&[]) * chunk.len() as f64;
            }
            let val = total / n_val as f64;
            report.val_loss.push(val);
            val
        } else {
            train
        };
        log::info!("epoch {}/{}: train {train:.6} val {score:.6}", epoch + 1, cfg.epochs);
        if score < report.best_val_loss || best.is_none() {
            report.best_val_loss = score;
            report.best_epoch = epoch + 1;
            best = Some(snapshot(vs));
        }
    }
    if let Some(saved) = &best {
        restore(vs, saved);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let vs = nn::VarStore::new(Device::Cpu);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(fit(&vs, 1, 0, &cfg, |_, _, _| unreachable!()).is_err());
        let cfg = TrainConfig::default();
        assert!(matches!(
            fit(&vs, 0, 0, &cfg, |_, _, _| unreachable!()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn keeps_best_validation_weights() {
        // w is pulled towards 3 on train; validation prefers w near 0, so
        // the best validation epoch is the first.
        let vs = nn::VarStore::new(Device::Cpu);
        let w = vs.root().zeros("w", &[1]);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 10,
            batch_size: 1,
            ..Default::default()
        };
        let report = fit(&vs, 1, 1, &cfg, |split, _, _| {
            Ok(match split {
                Split::Train => (&w - 3.0).square().sum(Kind::Float),
                Split::Validation => w.square().sum(Kind::Float),
            })
        })
        .unwrap();
        assert_eq!(report.train_loss.len(), 10);
        assert_eq!(report.best_epoch, 1);
        let kept = w.double_value(&[0]);
        assert!((kept.powi(2) - report.best_val_loss).abs() < 1e-6);
        assert!(report.train_loss.last().unwrap() < &report.train_loss[0]);
    }

    #[test]
    fn same_seed_same_curve() {
        let run = || {
            let vs = nn::VarStore::new(Device::Cpu);
            let w = vs.root().zeros("w", &[1]);
            let targets = [1.0, 2.0, 3.0, 4.0, 5.0];
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 2,
                seed: 9,
                ..Default::default()
            };
            fit(&vs, 5, 0, &cfg, |_, idx, _| {
                let t: Vec<f32> = idx.iter().map(|&i| targets[i] as f32).collect();
                Ok((&w - Tensor::from_slice(&t)).square().mean(Kind::Float))
            })
            .unwrap()
            .train_loss
        };
        assert_eq!(run(), run());
    }
}
