//! Supervised SGD training of a graph-defined classifier with a validation
//! trajectory.

use serde::{Deserialize, Serialize};

use crate::archspace::CompGraph;
use crate::autograd::{Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{accuracy, argmax_rows, forward, predict_logits, to_channel_major, BnMode};
use crate::optim::{LrSchedule, Sgd};
use crate::rng::{derive_seed, permutation, rng};
use crate::weights::{BnStats, Network};

/// How often the validation accuracy is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Epochs(usize),
    Batches(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, factor)`: from `epoch` on the rate is multiplied by
    /// `factor` (cumulatively).
    pub milestones: Vec<(usize, f32)>,
    pub seed: u64,
    pub dataset: String,
    pub cadence: Cadence,
}

impl TrainConfig {
    /// SGD 0.1 / momentum 0.9 / weight decay 1e-4 / batch 128, with the
    /// rate divided by 5 after two thirds of the epochs and by a further 2
    /// after five sixths.
    pub fn standard(epochs: usize, seed: u64) -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs,
            milestones: Self::two_step_milestones(epochs),
            seed,
            dataset: "desk".into(),
            cadence: Cadence::Epochs(1),
        }
    }

    pub fn two_step_milestones(epochs: usize) -> Vec<(usize, f32)> {
        let a = ((epochs * 2) as f64 / 3.0).round().max(1.0) as usize;
        let b = (((epochs * 5) as f64 / 6.0).round() as usize).max(a + 1);
        vec![(a, 0.2), (b, 0.5)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalisation)");
        }
        match self.cadence {
            Cadence::Epochs(0) | Cadence::Batches(0) => return bad("cadence must be positive"),
            _ => {}
        }
        self.schedule().validate().map_err(Error::Config)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Milestones {
            milestones: self.milestones.clone(),
        }
    }
}

/// Validation accuracy at 1-based evaluation indices; index 1 is the
/// evaluation before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cadence: Cadence,
    pub points: Vec<(usize, f64)>,
}

impl Trajectory {
    pub fn accuracies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eval_index,val_acc\n");
        for (i, a) in &self.points {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }
}

pub struct TrainOutcome {
    pub final_net: Network,
    /// Network at the best validation evaluation (earliest on ties).
    pub best_net: Network,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub trajectory: Trajectory,
    pub steps: usize,
}

pub fn evaluate(g: &CompGraph, net: &Network, data: &LabeledDataset) -> Result<f64> {
    let logits = predict_logits(g, net, &data.images)?;
    Ok(accuracy(&argmax_rows(&logits), &data.labels))
}

/// One SGD step on a batch; returns the mean cross-entropy.
pub fn sgd_step(
    g: &CompGraph,
    net: &mut Network,
    opt: &mut Sgd,
    images: &crate::tensor::Tensor<f32>,
    labels: &[usize],
    lr: f32,
) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let params: Vec<Var> = net
        .weights
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let x = tape.constant(to_channel_major(images));
    let f = forward(&mut tape, g, &params, x, BnMode::Batch)?;
    let loss = tape.cross_entropy(f.logits, labels);
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let running = net.running.get_or_insert_with(BnStats::default);
    for (node, v) in &f.bn_nodes {
        if let Some((m, var)) = tape.batch_norm_stats(*v) {
            running.update(*node, &m, &var);
        }
    }
    let mut grads = tape.backward(loss);
    let gs: Vec<_> = params.iter().map(|&p| grads.take(p)).collect();
    opt.step(&mut net.weights.tensors, &gs, lr);
    Ok(lv)
}

/// Trains `init` on `train`, evaluating on `val` at the configured cadence.
pub fn train_network(
    g: &CompGraph,
    init: Network,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.weights.check(g)?;
    if train.len() < cfg.batch_size {
        return Err(Error::TooFewSamples {
            have: train.len(),
            batch: cfg.batch_size,
        });
    }
    let schedule = cfg.schedule();
    let mut net = init;
    let mut opt = Sgd::new(net.weights.tensors.len(), cfg.momentum, cfg.weight_decay);
    let first = evaluate(g, &net, val)?;
    let mut traj = Trajectory {
        cadence: cfg.cadence,
        points: vec![(1, first)],
    };
    let mut best = (first, net.clone());
    let mut last_acc = first;
    let mut last_eval_step = 0;
    let mut step = 0;
    let batches = train.len() / cfg.batch_size;
    for epoch in 0..cfg.epochs {
        let lr = schedule.rate(cfg.lr, epoch);
        let order = permutation(&mut rng(derive_seed(cfg.seed, epoch as u64)), train.len());
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let (x, y) = train.batch(idx);
            sgd_step(g, &mut net, &mut opt, &x, &y, lr).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step },
                e => e,
            })?;
            step += 1;
            let due = match cfg.cadence {
                Cadence::Batches(s) => step % s == 0,
                Cadence::Epochs(e) => b + 1 == batches && (epoch + 1) % e == 0,
            };
            if due {
                last_acc = evaluate(g, &net, val)?;
                last_eval_step = step;
                traj.points.push((traj.points.len() + 1, last_acc));
                if last_acc > best.0 {
                    best = (last_acc, net.clone());
                }
            }
        }
    }
    if last_eval_step != step {
        last_acc = evaluate(g, &net, val)?;
    }
    Ok(TrainOutcome {
        final_net: net,
        best_val_acc: best.0,
        best_net: best.1,
        final_val_acc: last_acc,
        trajectory: traj,
        steps: step,
    })
}
