//! Pointwise initialisation schemes used as baselines and as the fallback
//! for tensors the generative models do not cover.

use serde::{Deserialize, Serialize};

use crate::archspace::{enumerate_params, CompGraph, ParamKind, ParamSpec};
use crate::rng::{derive_seed, normal_tensor, rng, uniform_tensor};
use crate::tensor::Tensor;
use crate::weights::WeightSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScheme {
    He,
    Xavier,
}

/// He: `N(0, 2/fan_in)`. Xavier: `U(±sqrt(6/(fan_in + fan_out)))`.
/// Batch-norm scales are 1; shifts and biases are 0.
pub fn init_tensor(spec: &ParamSpec, scheme: BaselineScheme, seed: u64) -> Tensor<f32> {
    match spec.kind {
        ParamKind::ConvKernel | ParamKind::LinearWeight => {
            let mut r = rng(seed);
            match scheme {
                BaselineScheme::He => {
                    normal_tensor(&mut r, &spec.shape, (2.0 / spec.fan_in() as f64).sqrt())
                }
                BaselineScheme::Xavier => {
                    let bound = (6.0 / (spec.fan_in() + spec.fan_out()) as f64).sqrt();
                    uniform_tensor(&mut r, &spec.shape, bound)
                }
            }
        }
        ParamKind::BnScale => Tensor::full(&spec.shape, 1.0),
        ParamKind::BnShift | ParamKind::Bias => Tensor::zeros(&spec.shape),
    }
}

/// Seeds each tensor from `(seed, position)` so tensors are independent.
pub fn baseline_init(g: &CompGraph, scheme: BaselineScheme, seed: u64) -> WeightSet {
    let specs = enumerate_params(g);
    let tensors = specs
        .iter()
        .enumerate()
        .map(|(i, s)| init_tensor(s, scheme, derive_seed(seed, i as u64)))
        .collect();
    WeightSet {
        arch: g.name.clone(),
        specs,
        tensors,
    }
}
