//! Executes a [`CompGraph`] on the autodiff tape.

use crate::archspace::{enumerate_params, CompGraph, OpKind, ParamKind};
use crate::autograd::{softmax, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{BnStats, Network};

/// How batch-norm nodes normalise.
#[derive(Clone, Copy)]
pub enum BnMode<'a> {
    /// Statistics of the current batch (training, or inference without
    /// running statistics).
    Batch,
    Running(&'a BnStats),
}

pub struct Forward {
    pub logits: Var,
    /// `(node id, tape var)` of every batch-norm node evaluated in batch
    /// mode, for running-statistics updates.
    pub bn_nodes: Vec<(usize, Var)>,
}

/// `[N, C, H, W] -> [C, N, H, W]`.
pub fn to_channel_major<T: Scalar>(images: &Tensor<T>) -> Tensor<T> {
    let s = images.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + ch) * hw..][..hw]);
        }
    }
    Tensor::new(vec![c, n, s[2], s[3]], out)
}

/// Runs `g` on channel-major `images` with parameters `params` (aligned
/// with [`enumerate_params`]). Returns `[N, classes]` logits.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    g: &CompGraph,
    params: &[Var],
    images: Var,
    mode: BnMode<'_>,
) -> Result<Forward> {
    let specs = enumerate_params(g);
    if specs.len() != params.len() {
        return Err(Error::Graph(format!(
            "graph `{}` needs {} parameter tensors, got {}",
            g.name,
            specs.len(),
            params.len()
        )));
    }
    let mut by_node: Vec<Vec<(ParamKind, Var)>> = vec![Vec::new(); g.nodes.len()];
    for (s, &p) in specs.iter().zip(params) {
        by_node[s.node_id].push((s.kind, p));
    }
    let find = |node: usize, kind: ParamKind| -> Var {
        by_node[node]
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| *v)
            .expect("param present")
    };
    let preds = g.in_neighbours();
    let mut acts: Vec<Option<Var>> = vec![None; g.nodes.len()];
    let mut bn_nodes = Vec::new();
    let mut logits = None;
    for node in &g.nodes {
        let input = |k: usize| -> Result<Var> {
            preds[node.id]
                .get(k)
                .and_then(|&p| acts[p])
                .ok_or_else(|| Error::Graph(format!("node {} is missing input {k}", node.id)))
        };
        let out = match node.op {
            OpKind::Input => images,
            OpKind::Conv => {
                let stride = node.attr("stride").unwrap_or(1) as usize;
                let pad = node.attr("padding").unwrap_or(0) as usize;
                let x = input(0)?;
                tape.conv2d(x, find(node.id, ParamKind::ConvKernel), stride, pad)
            }
            OpKind::Batchnorm => {
                let x = input(0)?;
                let (gamma, beta) = (find(node.id, ParamKind::BnScale), find(node.id, ParamKind::BnShift));
                match mode {
                    BnMode::Running(stats) => {
                        let (m, v) = stats.per_node.get(&node.id).ok_or_else(|| {
                            Error::Graph(format!("no running statistics for node {}", node.id))
                        })?;
                        let m: Vec<T> = m.iter().map(|&x| T::lit(x as f64)).collect();
                        let v: Vec<T> = v.iter().map(|&x| T::lit(x as f64)).collect();
                        tape.batch_norm_fixed(x, gamma, beta, &m, &v)
                    }
                    BnMode::Batch => {
                        let y = tape.batch_norm(x, gamma, beta);
                        bn_nodes.push((node.id, y));
                        y
                    }
                }
            }
            OpKind::Relu => {
                let x = input(0)?;
                tape.relu(x)
            }
            OpKind::Add => {
                let (a, b) = (input(0)?, input(1)?);
                tape.add(a, b)
            }
            OpKind::GlobalPool => {
                let x = input(0)?;
                tape.global_avg_pool(x)
            }
            OpKind::Linear => {
                let x = input(0)?;
                let y = tape.matmul_t(x, true, find(node.id, ParamKind::LinearWeight), true);
                tape.add_row_bias(y, find(node.id, ParamKind::Bias))
            }
            OpKind::Output => {
                let x = input(0)?;
                logits = Some(x);
                x
            }
            OpKind::Pool => {
                return Err(Error::Graph(format!(
                    "node {}: local pooling is not supported by the executor",
                    node.id
                )))
            }
        };
        acts[node.id] = Some(out);
    }
    Ok(Forward {
        logits: logits.ok_or_else(|| Error::Graph("graph has no output".into()))?,
        bn_nodes,
    })
}

pub const EVAL_CHUNK: usize = 250;

/// Logits `[N, classes]` of `net` on `images: [N, C, H, W]`, evaluated in
/// chunks of [`EVAL_CHUNK`].
pub fn predict_logits(g: &CompGraph, net: &Network, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let per = images.len() / n.max(1);
    let mut out: Vec<f32> = Vec::new();
    let mut classes = g.num_classes().unwrap_or(0);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec());
        let mut tape = Tape::<f32>::new();
        let params: Vec<Var> = net
            .weights
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let x = tape.constant(to_channel_major(&chunk));
        let mode = match &net.running {
            Some(s) => BnMode::Running(s),
            None => BnMode::Batch,
        };
        let f = forward(&mut tape, g, &params, x, mode)?;
        let l = tape.value(f.logits);
        classes = l.shape()[1];
        out.extend_from_slice(l.data());
        start = end;
    }
    Ok(Tensor::new(vec![n, classes], out))
}

pub fn predict_probs(g: &CompGraph, net: &Network, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(softmax(&predict_logits(g, net, images)?))
}

pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}
