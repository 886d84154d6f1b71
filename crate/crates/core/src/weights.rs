//! Parameter assignments for a computational graph.

use std::collections::BTreeMap;

use crate::archspace::{enumerate_params, CompGraph, ParamKind, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One tensor per [`ParamSpec`] of a graph, in [`enumerate_params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub arch: String,
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Tensor<f32>>,
}

impl WeightSet {
    pub fn new(g: &CompGraph, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let ws = Self {
            arch: g.name.clone(),
            specs: enumerate_params(g),
            tensors,
        };
        ws.check(g)?;
        Ok(ws)
    }

    /// Every tensor has exactly the shape its spec requires, and the specs
    /// are those of `g`.
    pub fn check(&self, g: &CompGraph) -> Result<()> {
        let specs = enumerate_params(g);
        if specs.len() != self.specs.len() || specs.len() != self.tensors.len() {
            return Err(Error::Graph(format!(
                "weight set has {} tensors, graph `{}` needs {}",
                self.tensors.len(),
                g.name,
                specs.len()
            )));
        }
        for ((want, have), t) in specs.iter().zip(&self.specs).zip(&self.tensors) {
            if want != have || t.shape() != want.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    node: want.node_id,
                    expected: want.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, node_id: usize, kind: ParamKind) -> Option<&Tensor<f32>> {
        self.specs
            .iter()
            .position(|s| s.node_id == node_id && s.kind == kind)
            .map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Running batch-norm statistics keyed by batch-norm node id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    pub per_node: BTreeMap<usize, (Vec<f32>, Vec<f32>)>,
}

impl BnStats {
    pub const MOMENTUM: f32 = 0.1;

    /// `running = (1 - m)·running + m·batch`, starting from mean 0 /
    /// variance 1 for unseen nodes.
    pub fn update(&mut self, node: usize, mean: &[f32], var: &[f32]) {
        let m = Self::MOMENTUM;
        let entry = self
            .per_node
            .entry(node)
            .or_insert_with(|| (vec![0.0; mean.len()], vec![1.0; var.len()]));
        for (r, &b) in entry.0.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in entry.1.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Weights plus, once the network has been trained, running batch-norm
/// statistics. Without statistics inference normalises with the
/// statistics of each evaluation chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub weights: WeightSet,
    pub running: Option<BnStats>,
}

impl Network {
    pub fn fresh(weights: WeightSet) -> Self {
        Self {
            weights,
            running: None,
        }
    }
}
