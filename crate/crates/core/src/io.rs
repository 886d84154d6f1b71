//! Binary artifact container: magic, `u32` header length, JSON header,
//! then the arrays as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archspace::CompGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::{BnStats, Network, WeightSet};

pub const MAGIC: &[u8; 8] = b"INITFRG1";

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.arrays.push((name.into(), t));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{} container has no array `{name}`", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let body: usize = self.arrays.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + h.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not an initforge artifact (bad magic)"));
        }
        let mut at = MAGIC.len();
        let hlen = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        at += 4;
        let h = bytes.get(at..at + hlen).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(h)?;
        at += hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(at..at + 4 * n)
                .ok_or_else(|| Error::Format(format!("array `{}` truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((e.name, Tensor::new(e.shape, data)));
            at += 4 * n;
        }
        if at != bytes.len() {
            return Err(fail("trailing bytes after last array"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        // write-then-rename so an interrupted run never leaves a partial file
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Reads `path` and checks its kind.
    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::from_bytes(&std::fs::read(path)?)?;
        if c.kind != kind {
            return Err(Error::Format(format!(
                "{} holds a `{}` artifact, expected `{kind}`",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}

/// Stores weights (arrays `p0..`) and running statistics (`bn_mean.{node}`,
/// `bn_var.{node}`) of a network, with `meta` merged into the header.
pub fn network_container(kind: &str, net: &Network, mut meta: Value) -> Container {
    if let Value::Object(m) = &mut meta {
        m.insert("arch".into(), Value::String(net.weights.arch.clone()));
        m.insert("has_running_stats".into(), Value::Bool(net.running.is_some()));
    }
    let mut c = Container::new(kind, meta);
    for (i, t) in net.weights.tensors.iter().enumerate() {
        c.push(format!("p{i}"), t.clone());
    }
    if let Some(stats) = &net.running {
        for (node, (m, v)) in &stats.per_node {
            c.push(format!("bn_mean.{node}"), Tensor::new(vec![m.len()], m.clone()));
            c.push(format!("bn_var.{node}"), Tensor::new(vec![v.len()], v.clone()));
        }
    }
    c
}

pub fn network_from_container(c: &Container, g: &CompGraph) -> Result<Network> {
    let arch = c.meta.get("arch").and_then(Value::as_str).unwrap_or_default();
    if arch != g.name {
        return Err(Error::Format(format!(
            "artifact is for `{arch}`, graph is `{}`",
            g.name
        )));
    }
    let n = crate::archspace::enumerate_params(g).len();
    let tensors = (0..n)
        .map(|i| c.array(&format!("p{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let weights = WeightSet::new(g, tensors)?;
    let mut stats = BnStats::default();
    for (name, t) in &c.arrays {
        if let Some(node) = name.strip_prefix("bn_mean.") {
            let node: usize = node
                .parse()
                .map_err(|_| Error::Format(format!("bad array name `{name}`")))?;
            let var = c.array(&format!("bn_var.{node}"))?;
            stats
                .per_node
                .insert(node, (t.data().to_vec(), var.data().to_vec()));
        }
    }
    let has = c
        .meta
        .get("has_running_stats")
        .and_then(Value::as_bool)
        .unwrap_or(false);
    Ok(Network {
        weights,
        running: has.then_some(stats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::build_resnet_graph;
    use crate::localinit::baseline::{baseline_init, BaselineScheme};

    #[test]
    fn container_round_trip() {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.push("x", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]));
        c.push("empty", Tensor::new(vec![0], vec![]));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut c = Container::new("t", Value::Null);
        c.push("x", Tensor::zeros(&[4]));
        let b = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn network_round_trip_with_stats() {
        let g = build_resnet_graph(8, 1, 2).unwrap();
        let mut net = Network::fresh(baseline_init(&g, BaselineScheme::He, 0));
        let mut stats = BnStats::default();
        stats.update(2, &[0.5; 16], &[2.0; 16]);
        net.running = Some(stats);
        let c = network_container("checkpoint", &net, serde_json::json!({}));
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(network_from_container(&back, &g).unwrap(), net);
        let other = build_resnet_graph(14, 1, 2).unwrap();
        assert!(network_from_container(&back, &other).is_err());
    }
}
