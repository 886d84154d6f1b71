//! Base-network populations and the per-layer Weight-Datasets of 3×3
//! kernel slices built from them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::archspace::{CompGraph, ParamKind};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::{network_container, network_from_container, Container};
use crate::localinit::baseline::{baseline_init, BaselineScheme};
use crate::tensor::Tensor;
use crate::train::{train_network, TrainConfig};
use crate::weights::Network;

/// A trained base network with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run_id: u64,
    pub network: Network,
    pub config: TrainConfig,
    pub val_acc: f64,
}

impl Checkpoint {
    pub fn file_name(arch: &str, seed: u64) -> String {
        format!("base_{arch}_{seed}.ckpt")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "run_id": self.run_id,
            "config": self.config,
            "val_acc": self.val_acc,
        });
        network_container("checkpoint", &self.network, meta).write(path)
    }

    pub fn load(path: &Path, g: &CompGraph) -> Result<Self> {
        let c = Container::read(path, "checkpoint")?;
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{k}`")))
        };
        Ok(Self {
            run_id: serde_json::from_value(field("run_id")?)?,
            config: serde_json::from_value(field("config")?)?,
            val_acc: serde_json::from_value(field("val_acc")?)?,
            network: network_from_container(&c, g)?,
        })
    }
}

/// He-initialised (seeded by `cfg.seed`) network trained on `train`; the
/// weights of the best validation evaluation are kept.
pub fn train_base_network(
    g: &CompGraph,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<Checkpoint> {
    let init = Network::fresh(baseline_init(g, BaselineScheme::He, cfg.seed));
    let out = train_network(g, init, cfg, train, val)?;
    Ok(Checkpoint {
        run_id: cfg.seed,
        network: out.best_net,
        config: cfg.clone(),
        val_acc: out.best_val_acc,
    })
}

/// 3×3 slices of one layer, pooled over source networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSet {
    pub layer_id: usize,
    /// `[N, 3, 3]`.
    pub slices: Tensor<f32>,
    pub source_run_ids: Vec<u64>,
}

impl SliceSet {
    pub fn len(&self) -> usize {
        self.slices.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        &self.slices.data()[i * 9..(i + 1) * 9]
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.slice(i)
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// `layer node id -> [O·I, 3, 3]` for every 3×3 convolution of `g`, slices
/// in (out-channel, in-channel) order.
pub fn extract_slices(net: &Network, g: &CompGraph) -> Result<BTreeMap<usize, Tensor<f32>>> {
    net.weights.check(g)?;
    let mut out = BTreeMap::new();
    for layer in g.conv3x3_layers() {
        let w = net
            .weights
            .get(layer, ParamKind::ConvKernel)
            .ok_or(Error::MissingLayer(layer))?;
        let s = w.shape();
        out.insert(layer, w.clone().reshape(&[s[0] * s[1], 3, 3]));
    }
    Ok(out)
}

/// Drops the `⌊fraction·N⌋` slices of smallest ℓ2 norm. At the cut-off
/// earlier slices win ties; survivors keep their order.
pub fn filter_low_norm(s: &SliceSet, fraction: f64) -> Result<SliceSet> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("filter fraction {fraction} outside [0, 1)")));
    }
    let n = s.len();
    let k = (fraction * n as f64).floor() as usize;
    let norms = s.norms();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(b.cmp(&a)));
    let mut removed = vec![false; n];
    for &i in &order[..k] {
        removed[i] = true;
    }
    let mut data = Vec::with_capacity((n - k) * 9);
    for i in (0..n).filter(|&i| !removed[i]) {
        data.extend_from_slice(s.slice(i));
    }
    Ok(SliceSet {
        layer_id: s.layer_id,
        slices: Tensor::new(vec![n - k, 3, 3], data),
        source_run_ids: s.source_run_ids.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightDataset {
    pub arch: String,
    pub per_layer: BTreeMap<usize, SliceSet>,
    pub num_sources: usize,
    pub filter_fraction: f64,
}

impl WeightDataset {
    pub fn file_name(arch: &str) -> String {
        format!("weights_{arch}.wds")
    }

    pub fn to_container(&self) -> Container {
        let layers: Vec<_> = self
            .per_layer
            .values()
            .map(|s| json!({"layer_id": s.layer_id, "source_run_ids": s.source_run_ids}))
            .collect();
        let mut c = Container::new(
            "weight_dataset",
            json!({
                "arch": self.arch,
                "num_sources": self.num_sources,
                "filter_fraction": self.filter_fraction,
                "layers": layers,
            }),
        );
        for s in self.per_layer.values() {
            c.push(format!("layer.{}", s.layer_id), s.slices.clone());
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, "weight_dataset")?;
        let bad = |k: &str| Error::Format(format!("weight dataset header lacks `{k}`"));
        let m = &c.meta;
        let arch = m.get("arch").and_then(|v| v.as_str()).ok_or_else(|| bad("arch"))?;
        let num_sources = m
            .get("num_sources")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("num_sources"))? as usize;
        let filter_fraction = m
            .get("filter_fraction")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| bad("filter_fraction"))?;
        let layers = m.get("layers").and_then(|v| v.as_array()).ok_or_else(|| bad("layers"))?;
        let mut per_layer = BTreeMap::new();
        for l in layers {
            let layer_id = l
                .get("layer_id")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("layers[].layer_id"))? as usize;
            let source_run_ids = serde_json::from_value(
                l.get("source_run_ids").cloned().ok_or_else(|| bad("layers[].source_run_ids"))?,
            )?;
            let slices = c.array(&format!("layer.{layer_id}"))?.clone();
            per_layer.insert(
                layer_id,
                SliceSet {
                    layer_id,
                    slices,
                    source_run_ids,
                },
            );
        }
        Ok(Self {
            arch: arch.into(),
            per_layer,
            num_sources,
            filter_fraction,
        })
    }
}

/// Pools the slices of every checkpoint per layer, then filters each layer.
pub fn assemble_weight_dataset(
    checkpoints: &[Checkpoint],
    g: &CompGraph,
    fraction: f64,
) -> Result<WeightDataset> {
    if checkpoints.is_empty() {
        return Err(Error::Config("at least one checkpoint is required".into()));
    }
    if let Some(ck) = checkpoints.iter().find(|c| c.network.weights.arch != g.name) {
        return Err(Error::Graph(format!(
            "checkpoint {} is a `{}`, expected `{}`",
            ck.run_id, ck.network.weights.arch, g.name
        )));
    }
    let mut pooled: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    for ck in checkpoints {
        for (layer, t) in extract_slices(&ck.network, g)? {
            pooled.entry(layer).or_default().extend_from_slice(t.data());
        }
    }
    let ids: Vec<u64> = checkpoints.iter().map(|c| c.run_id).collect();
    let mut per_layer = BTreeMap::new();
    for (layer, data) in pooled {
        let n = data.len() / 9;
        let raw = SliceSet {
            layer_id: layer,
            slices: Tensor::new(vec![n, 3, 3], data),
            source_run_ids: ids.clone(),
        };
        per_layer.insert(layer, filter_low_norm(&raw, fraction)?);
    }
    Ok(WeightDataset {
        arch: g.name.clone(),
        per_layer,
        num_sources: checkpoints.len(),
        filter_fraction: fraction,
    })
}

/// Checkpoint path of run `seed` under `dir`.
pub fn checkpoint_path(dir: &Path, arch: &str, seed: u64) -> PathBuf {
    dir.join(Checkpoint::file_name(arch, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{build_resnet_graph, CompGraph, NodeSpec, OpKind};
    use crate::data::{synthetic_textures, Domain};
    use proptest::prelude::*;

    fn slice_set(norms: &[f32]) -> SliceSet {
        let mut data = Vec::new();
        for &n in norms {
            let mut s = [0.0f32; 9];
            s[0] = n;
            data.extend_from_slice(&s);
        }
        SliceSet {
            layer_id: 0,
            slices: Tensor::new(vec![norms.len(), 3, 3], data),
            source_run_ids: vec![0],
        }
    }

    #[test]
    fn filter_removes_smallest_norm() {
        let norms: Vec<f32> = (1..=20).rev().map(|v| v as f32).collect();
        let out = filter_low_norm(&slice_set(&norms), 0.05).unwrap();
        assert_eq!(out.len(), 19);
        let kept: Vec<f32> = (0..19).map(|i| out.slice(i)[0]).collect();
        assert_eq!(kept, norms[..19].to_vec());
        let s = slice_set(&vec![1.0; 100]);
        assert_eq!(filter_low_norm(&s, 0.05).unwrap().len(), 95);
        assert_eq!(filter_low_norm(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn filter_ties_keep_earlier_slices() {
        let s = slice_set(&[2.0, 1.0, 1.0, 1.0, 3.0]);
        let out = filter_low_norm(&s, 0.5).unwrap();
        // ⌊2.5⌋ = 2 removed: the two later norm-1 slices
        let kept: Vec<f32> = (0..out.len()).map(|i| out.slice(i)[0]).collect();
        assert_eq!(kept, vec![2.0, 1.0, 3.0]);
    }

    #[test]
    fn extraction_counts() {
        let g = build_resnet_graph(20, 1, 10).unwrap();
        let net = Network::fresh(baseline_init(&g, BaselineScheme::He, 0));
        let sl = extract_slices(&net, &g).unwrap();
        assert_eq!(sl.len(), 19);
        let stem = g.conv3x3_layers()[0];
        assert_eq!(sl[&stem].shape(), &[48, 3, 3]);
        let total: usize = sl.values().map(|t| t.len()).sum();
        let conv3: usize = g
            .nodes
            .iter()
            .filter(|n| n.kernel() == Some(3))
            .map(|n| n.param_shape.as_ref().unwrap().iter().product::<usize>())
            .sum();
        assert_eq!(total, conv3);
    }

    #[test]
    fn no_3x3_layers_gives_empty_map() {
        let mut attrs = std::collections::BTreeMap::new();
        attrs.insert("kernel".to_string(), 1);
        let g = CompGraph {
            name: "pointwise".into(),
            nodes: vec![
                NodeSpec { id: 0, op: OpKind::Input, param_shape: None, attrs: Default::default() },
                NodeSpec { id: 1, op: OpKind::Conv, param_shape: Some(vec![4, 3, 1, 1]), attrs },
                NodeSpec { id: 2, op: OpKind::Output, param_shape: None, attrs: Default::default() },
            ],
            edges: vec![(0, 1), (1, 2)],
        };
        let ws = baseline_init(&g, BaselineScheme::He, 0);
        assert!(extract_slices(&Network::fresh(ws), &g).unwrap().is_empty());
    }

    #[test]
    fn assemble_pools_and_round_trips() {
        let g = build_resnet_graph(8, 1, 2).unwrap();
        let cks: Vec<Checkpoint> = (0..3)
            .map(|s| Checkpoint {
                run_id: s,
                network: Network::fresh(baseline_init(&g, BaselineScheme::He, s)),
                config: TrainConfig::standard(0, s),
                val_acc: 0.5,
            })
            .collect();
        let raw = assemble_weight_dataset(&cks[..1], &g, 0.0).unwrap();
        let direct = extract_slices(&cks[0].network, &g).unwrap();
        for (l, s) in &raw.per_layer {
            assert_eq!(&s.slices, &direct[l]);
        }
        let wd = assemble_weight_dataset(&cks, &g, 0.05).unwrap();
        let stem = g.conv3x3_layers()[0];
        let n = 3 * 48;
        assert_eq!(wd.per_layer[&stem].len(), n - n / 20);
        let dir = std::env::temp_dir().join(format!("initforge-wds-{}", std::process::id()));
        let path = dir.join(WeightDataset::file_name(&g.name));
        wd.save(&path).unwrap();
        assert_eq!(WeightDataset::load(&path).unwrap(), wd);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn base_training_zero_epochs_and_determinism() {
        let g = build_resnet_graph(8, 1, 2).unwrap();
        let ds = synthetic_textures(200, Domain::Source, 5);
        let (tr, va, _) = ds.split_70_10_20(0);
        let mut cfg = TrainConfig::standard(0, 9);
        cfg.batch_size = 32;
        let ck = train_base_network(&g, &cfg, &tr, &va).unwrap();
        assert_eq!(ck.network.weights, baseline_init(&g, BaselineScheme::He, 9));
        cfg.epochs = 1;
        let a = train_base_network(&g, &cfg, &tr, &va).unwrap();
        let b = train_base_network(&g, &cfg, &tr, &va).unwrap();
        assert_eq!(a, b);
        let dir = std::env::temp_dir().join(format!("initforge-ck-{}", std::process::id()));
        let p = checkpoint_path(&dir, &g.name, 9);
        a.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p, &g).unwrap(), a);
        std::fs::remove_dir_all(dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn filter_keeps_the_largest(norms in prop::collection::vec(0.0f32..10.0, 1..200), frac in 0.0f64..0.99) {
            let s = slice_set(&norms);
            let out = filter_low_norm(&s, frac).unwrap();
            let k = (frac * norms.len() as f64).floor() as usize;
            prop_assert_eq!(out.len(), norms.len() - k);
            let kept: Vec<f32> = (0..out.len()).map(|i| out.slice(i)[0]).collect();
            let mut removed = norms.clone();
            for v in &kept {
                let p = removed.iter().position(|x| x == v).unwrap();
                removed.remove(p);
            }
            let min_kept = kept.iter().cloned().fold(f32::INFINITY, f32::min);
            let max_removed = removed.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(removed.is_empty() || min_kept >= max_removed);
        }
    }
}
