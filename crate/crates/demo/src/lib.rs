//! Browser bindings: inspect a ResNet graph, generate its weights with a
//! (loaded or freshly seeded) GHN and preview the evaluation corruptions.

use std::cell::RefCell;

use initforge::archspace::{build_resnet_graph, enumerate_params, CompGraph};
use initforge::data::{synthetic_textures, Domain};
use initforge::evalkit::{corrupt, CorruptionKind};
use initforge::globalinit::{ghn_forward, sample_noise, GhnModel, GhnVariant};
use initforge::io::Container;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

thread_local! {
    static LOADED: RefCell<Option<GhnModel>> = const { RefCell::new(None) };
}

fn graph(depth: usize, classes: usize) -> Result<CompGraph, String> {
    build_resnet_graph(depth, 1, classes).map_err(|e| e.to_string())
}

/// Node list, edges and parameter specs of ResNet-`depth` as JSON.
#[wasm_bindgen]
pub fn describe_architecture(depth: usize, classes: usize) -> Result<String, String> {
    let g = graph(depth, classes)?;
    let nodes: Vec<Value> = g
        .nodes
        .iter()
        .map(|n| json!({"id": n.id, "op": n.op.name(), "param_shape": n.param_shape}))
        .collect();
    let params: Vec<Value> = enumerate_params(&g)
        .iter()
        .map(|s| json!({"node": s.node_id, "kind": format!("{:?}", s.kind), "shape": s.shape}))
        .collect();
    Ok(json!({
        "name": g.name,
        "nodes": nodes,
        "edges": g.edges,
        "params": params,
        "param_count": g.param_count(),
    })
    .to_string())
}

/// Replaces the demo's GHN with a trained model file (`.gm` bytes);
/// returns the variant name.
#[wasm_bindgen]
pub fn load_model(bytes: &[u8]) -> Result<String, String> {
    let c = Container::from_bytes(bytes).map_err(|e| e.to_string())?;
    let m = GhnModel::from_container(&c).map_err(|e| e.to_string())?;
    let name = m.variant.name().to_string();
    LOADED.with(|l| *l.borrow_mut() = Some(m));
    Ok(name)
}

/// Generates weights for ResNet-`depth` and returns per-tensor statistics.
/// Without a loaded model an untrained GHN seeded by `seed` is used;
/// `noise_seed` selects ξ for Noise GHNs.
#[wasm_bindgen]
pub fn generate_weights(depth: usize, noise: bool, seed: u64, noise_seed: u64) -> Result<String, String> {
    let model = LOADED.with(|l| l.borrow().clone()).map_or_else(
        || {
            let v = if noise { GhnVariant::NoiseGhn } else { GhnVariant::Ghn };
            GhnModel::new(v, 32, 32, 1, seed).map_err(|e| e.to_string())
        },
        Ok,
    )?;
    let classes = 2;
    let g = graph(depth, classes)?;
    let xi = sample_noise(&model, noise_seed);
    let ws = ghn_forward(&g, &model, xi.as_deref()).map_err(|e| e.to_string())?;
    let tensors: Vec<Value> = ws
        .specs
        .iter()
        .zip(&ws.tensors)
        .map(|(s, t)| {
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            json!({
                "node": s.node_id,
                "kind": format!("{:?}", s.kind),
                "shape": s.shape,
                "mean": mean,
                "std": var.sqrt(),
                "head": t.data().iter().take(9).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({"variant": model.variant.name(), "xi": xi, "tensors": tensors}).to_string())
}

/// RGBA pixels (row-major, `count` images side by side, each upscaled by
/// `zoom`) of synthetic texture images before and after a corruption:
/// the first row is clean, the second corrupted.
#[wasm_bindgen]
pub fn corruption_preview(kind: &str, severity: usize, count: usize, zoom: usize, seed: u64) -> Result<Vec<u8>, String> {
    let kind = CorruptionKind::ALL
        .into_iter()
        .find(|k| k.name() == kind)
        .ok_or_else(|| format!("unknown corruption `{kind}`"))?;
    let clean = synthetic_textures(count.max(1), Domain::Source, seed);
    let bad = corrupt(&clean, kind, severity, seed).map_err(|e| e.to_string())?;
    let [c, h, w] = clean.image_shape();
    let n = clean.len();
    let (width, height) = (n * w * zoom, 2 * h * zoom);
    let mut px = vec![255u8; width * height * 4];
    for (row, ds) in [&clean, &bad].into_iter().enumerate() {
        let data = ds.images.data();
        for i in 0..n {
            for y in 0..h * zoom {
                for x in 0..w * zoom {
                    let o = ((row * h * zoom + y) * width + i * w * zoom + x) * 4;
                    for ch in 0..3 {
                        let src = ch.min(c - 1);
                        let v = data[((i * c + src) * h + y / zoom) * w + x / zoom];
                        px[o + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok(px)
}

/// Width in pixels of [`corruption_preview`] output.
#[wasm_bindgen]
pub fn preview_width(count: usize, zoom: usize) -> usize {
    count.max(1) * synthetic_textures(1, Domain::Source, 0).image_shape()[2] * zoom
}
