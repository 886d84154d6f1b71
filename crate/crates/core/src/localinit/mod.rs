//! Layer-local initialisation: one generative model per 3×3 convolution,
//! sampled slice by slice.

pub mod baseline;
pub mod vae;
pub mod vq;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archspace::{CompGraph, ParamKind};
use crate::error::{Error, Result};
use crate::harvest::{SliceSet, WeightDataset};
use crate::io::Container;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::weights::WeightSet;
use baseline::{baseline_init, BaselineScheme};
use vae::{sample_vae, train_vae, VaeConfig, VaeModel};
use vq::{sample_vqvae, train_vqvae, Codebook, VqvaeConfig, VqvaeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalKind {
    Vae,
    Vqvae,
}

impl LocalKind {
    pub fn name(self) -> &'static str {
        match self {
            LocalKind::Vae => "vae",
            LocalKind::Vqvae => "vqvae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(LocalKind::Vae),
            "vqvae" => Some(LocalKind::Vqvae),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LocalModel {
    Vae(VaeModel),
    Vqvae(VqvaeModel),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub vae: VaeConfig,
    pub vqvae: VqvaeConfig,
}

impl LocalModel {
    pub fn kind(&self) -> LocalKind {
        match self {
            LocalModel::Vae(_) => LocalKind::Vae,
            LocalModel::Vqvae(_) => LocalKind::Vqvae,
        }
    }

    pub fn layer_id(&self) -> usize {
        match self {
            LocalModel::Vae(m) => m.layer_id,
            LocalModel::Vqvae(m) => m.layer_id,
        }
    }

    pub fn loss_log(&self) -> &[f64] {
        match self {
            LocalModel::Vae(m) => &m.loss_log,
            LocalModel::Vqvae(m) => &m.loss_log,
        }
    }

    pub fn file_name(arch: &str, layer: usize, kind: LocalKind) -> String {
        format!("local_{arch}_{layer}_{}.gm", kind.name())
    }

    pub fn to_container(&self, arch: &str) -> Container {
        match self {
            LocalModel::Vae(m) => {
                let mut c = Container::new(
                    "local_model",
                    json!({
                        "kind": "vae", "arch": arch, "layer_id": m.layer_id,
                        "latent_dim": m.latent_dim, "hidden_dim": m.hidden_dim,
                        "offset": m.offset, "scale": m.scale, "loss_log": m.loss_log,
                    }),
                );
                for (i, t) in m.params.iter().enumerate() {
                    c.push(format!("p{i}"), t.clone());
                }
                c
            }
            LocalModel::Vqvae(m) => {
                let mut c = Container::new(
                    "local_model",
                    json!({
                        "kind": "vqvae", "arch": arch, "layer_id": m.layer_id,
                        "hidden_dim": m.hidden_dim, "beta": m.beta,
                        "offset": m.offset, "scale": m.scale, "loss_log": m.loss_log,
                        "usage": m.codebook.usage,
                    }),
                );
                for (i, t) in m.params.iter().enumerate() {
                    c.push(format!("p{i}"), t.clone());
                }
                c.push("codebook", m.codebook.entries.clone());
                c
            }
        }
    }

    /// Model and the architecture name it was fitted for.
    pub fn from_container(c: &Container) -> Result<(Self, String)> {
        fn get<T: serde::de::DeserializeOwned>(m: &Value, k: &str) -> Result<T> {
            let v = m
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("local model header lacks `{k}`")))?;
            Ok(serde_json::from_value(v)?)
        }
        let m = &c.meta;
        let kind: String = get(m, "kind")?;
        let arch: String = get(m, "arch")?;
        let params = |n: usize| -> Result<Vec<Tensor<f32>>> {
            (0..n).map(|i| c.array(&format!("p{i}")).cloned()).collect()
        };
        let model = match kind.as_str() {
            "vae" => LocalModel::Vae(VaeModel {
                layer_id: get(m, "layer_id")?,
                latent_dim: get(m, "latent_dim")?,
                hidden_dim: get(m, "hidden_dim")?,
                offset: get(m, "offset")?,
                scale: get(m, "scale")?,
                loss_log: get(m, "loss_log")?,
                params: params(13)?,
            }),
            "vqvae" => {
                let mut codebook = Codebook::new(c.array("codebook")?.clone());
                codebook.usage = get(m, "usage")?;
                LocalModel::Vqvae(VqvaeModel {
                    layer_id: get(m, "layer_id")?,
                    hidden_dim: get(m, "hidden_dim")?,
                    beta: get(m, "beta")?,
                    offset: get(m, "offset")?,
                    scale: get(m, "scale")?,
                    loss_log: get(m, "loss_log")?,
                    params: params(12)?,
                    codebook,
                })
            }
            other => return Err(Error::Format(format!("unknown local model kind `{other}`"))),
        };
        Ok((model, arch))
    }
}

/// Fits a model of `kind` to one layer's slices.
pub fn train_local_model(ds: &SliceSet, kind: LocalKind, cfg: &LocalTrainConfig) -> Result<LocalModel> {
    match kind {
        LocalKind::Vae => Ok(LocalModel::Vae(train_vae(&ds.slices, ds.layer_id, &cfg.vae)?)),
        LocalKind::Vqvae => Ok(LocalModel::Vqvae(train_vqvae(&ds.slices, ds.layer_id, &cfg.vqvae)?)),
    }
}

/// `[n, 3, 3]` slices drawn from `model`.
pub fn sample_slices(model: &LocalModel, n: usize, seed: u64) -> Result<Tensor<f32>> {
    match model {
        LocalModel::Vae(m) => sample_vae(m, n, seed),
        LocalModel::Vqvae(m) => sample_vqvae(m, n, seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalInitRegistry {
    pub arch: String,
    pub kind: LocalKind,
    pub models: BTreeMap<usize, LocalModel>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arch: String,
    kind: LocalKind,
    layers: BTreeMap<usize, String>,
}

impl LocalInitRegistry {
    pub fn manifest_name(arch: &str, kind: LocalKind) -> String {
        format!("local_{arch}_{}.json", kind.name())
    }

    /// Writes one model file per layer and the manifest; returns the paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut layers = BTreeMap::new();
        for (&layer, m) in &self.models {
            let name = LocalModel::file_name(&self.arch, layer, self.kind);
            let path = dir.join(&name);
            m.to_container(&self.arch).write(&path)?;
            written.push(path);
            layers.insert(layer, name);
        }
        let manifest = Manifest {
            arch: self.arch.clone(),
            kind: self.kind,
            layers,
        };
        let path = dir.join(Self::manifest_name(&self.arch, self.kind));
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        written.push(path);
        Ok(written)
    }

    /// Loads a registry from its manifest; model paths are relative to the
    /// manifest's directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(manifest)?)?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let mut models = BTreeMap::new();
        for (&layer, file) in &m.layers {
            let (model, _) = LocalModel::from_container(&Container::read(&dir.join(file), "local_model")?)?;
            if model.layer_id() != layer || model.kind() != m.kind {
                return Err(Error::Format(format!("{file} does not hold a {} for layer {layer}", m.kind.name())));
            }
            models.insert(layer, model);
        }
        Ok(Self {
            arch: m.arch,
            kind: m.kind,
            models,
        })
    }
}

/// One model per layer of `wds`; layer `l` trains with seed
/// `derive_seed(seed, l)`, so layers are independent of each other.
pub fn train_registry(
    wds: &WeightDataset,
    kind: LocalKind,
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<LocalInitRegistry> {
    let mut models = BTreeMap::new();
    for (&layer, set) in &wds.per_layer {
        let mut c = cfg.clone();
        c.vae.seed = derive_seed(seed, layer as u64);
        c.vqvae.seed = derive_seed(seed, layer as u64);
        models.insert(layer, train_local_model(set, kind, &c)?);
    }
    Ok(LocalInitRegistry {
        arch: wds.arch.clone(),
        kind,
        models,
    })
}

/// Fills every 3×3 convolution of `g` with slices from its layer model in
/// (out-channel, in-channel) order; every other tensor is He/standard.
pub fn initialize_network_local(g: &CompGraph, reg: &LocalInitRegistry, seed: u64) -> Result<WeightSet> {
    if reg.arch != g.name {
        return Err(Error::Graph(format!(
            "registry was fitted for `{}`, graph is `{}`",
            reg.arch, g.name
        )));
    }
    let mut ws = baseline_init(g, BaselineScheme::He, seed);
    for layer in g.conv3x3_layers() {
        let model = reg.models.get(&layer).ok_or(Error::MissingLayer(layer))?;
        let i = ws
            .specs
            .iter()
            .position(|s| s.node_id == layer && s.kind == ParamKind::ConvKernel)
            .ok_or(Error::MissingLayer(layer))?;
        let shape = ws.specs[i].shape.clone();
        let slices = sample_slices(model, shape[0] * shape[1], derive_seed(seed ^ 0x4C4F_4341_4C00, layer as u64))?;
        ws.tensors[i] = slices.reshape(&shape);
    }
    ws.check(g)?;
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::build_resnet_graph;
    use crate::harvest::{assemble_weight_dataset, Checkpoint};
    use crate::train::TrainConfig;
    use crate::weights::Network;

    fn quick_cfg() -> LocalTrainConfig {
        let mut c = LocalTrainConfig::default();
        c.vae.epochs = 1;
        c.vae.batch_size = 16;
        c.vqvae.epochs = 1;
        c.vqvae.batch_size = 16;
        c
    }

    fn resnet8_wds() -> (CompGraph, WeightDataset) {
        let g = build_resnet_graph(8, 1, 2).unwrap();
        let ck = Checkpoint {
            run_id: 0,
            network: Network::fresh(baseline_init(&g, BaselineScheme::He, 0)),
            config: TrainConfig::standard(0, 0),
            val_acc: 0.5,
        };
        let wds = assemble_weight_dataset(&[ck], &g, 0.05).unwrap();
        (g, wds)
    }

    #[test]
    fn local_init_shapes_determinism_and_round_trip() {
        let (g, wds) = resnet8_wds();
        for kind in [LocalKind::Vae, LocalKind::Vqvae] {
            let reg = train_registry(&wds, kind, &quick_cfg(), 3).unwrap();
            let a = initialize_network_local(&g, &reg, 7).unwrap();
            assert_eq!(a, initialize_network_local(&g, &reg, 7).unwrap());
            assert!(a.all_finite());
            let dir = std::env::temp_dir().join(format!("initforge-reg-{}-{}", std::process::id(), kind.name()));
            let files = reg.save(&dir).unwrap();
            assert_eq!(files.len(), g.conv3x3_layers().len() + 1);
            let back = LocalInitRegistry::load(&dir.join(LocalInitRegistry::manifest_name(&g.name, kind))).unwrap();
            assert_eq!(back, reg);
            std::fs::remove_dir_all(dir).ok();
        }
    }

    #[test]
    fn missing_layer_is_named() {
        let (g, wds) = resnet8_wds();
        let mut reg = train_registry(&wds, LocalKind::Vae, &quick_cfg(), 3).unwrap();
        let last = *reg.models.keys().last().unwrap();
        reg.models.remove(&last);
        match initialize_network_local(&g, &reg, 0) {
            Err(Error::MissingLayer(l)) => assert_eq!(l, last),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layers_are_sampled_independently() {
        let (g, wds) = resnet8_wds();
        let reg = train_registry(&wds, LocalKind::Vae, &quick_cfg(), 3).unwrap();
        let mut other = reg.clone();
        let layers = g.conv3x3_layers();
        let replaced = layers[1];
        let mut c = quick_cfg();
        c.vae.seed = 999;
        other.models.insert(replaced, train_local_model(&wds.per_layer[&layers[0]], LocalKind::Vae, &c).unwrap());
        if let LocalModel::Vae(m) = other.models.get_mut(&replaced).unwrap() {
            m.layer_id = replaced;
        }
        let a = initialize_network_local(&g, &reg, 5).unwrap();
        let b = initialize_network_local(&g, &other, 5).unwrap();
        for l in layers {
            let same = a.get(l, ParamKind::ConvKernel) == b.get(l, ParamKind::ConvKernel);
            assert_eq!(same, l != replaced, "layer {l}");
        }
    }

    #[test]
    fn constant_slices_reproduce_the_constant() {
        let (g, mut wds) = resnet8_wds();
        for set in wds.per_layer.values_mut() {
            set.slices = Tensor::full(set.slices.shape(), 0.05);
        }
        let mut cfg = LocalTrainConfig::default();
        cfg.vae.epochs = 20;
        cfg.vae.batch_size = 16;
        let reg = train_registry(&wds, LocalKind::Vae, &cfg, 1).unwrap();
        let ws = initialize_network_local(&g, &reg, 2).unwrap();
        for l in g.conv3x3_layers() {
            let t = ws.get(l, ParamKind::ConvKernel).unwrap();
            let worst = t.data().iter().map(|v| (v - 0.05).abs()).fold(0.0f32, f32::max);
            assert!(worst < 5e-3, "layer {l}: max deviation {worst}");
        }
    }
}
