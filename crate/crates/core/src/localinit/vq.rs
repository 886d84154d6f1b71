//! Vector-quantised autoencoder over 3×3 slices.
//!
//! A slice is treated as a one-channel 3×3 image. The convolutional encoder
//! maps it to nine `D`-dimensional vectors (one per position) which are
//! snapped to their nearest codebook entries before decoding.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::localinit::vae::normaliser;
use crate::optim::{Adam, LrSchedule};
use crate::rng::{derive_seed, normal_tensor, permutation, rng, uniform_tensor};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[K, D]`.
    pub entries: Tensor<f32>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor<f32>) -> Self {
        let k = entries.shape()[0];
        Self {
            entries,
            usage: vec![0; k],
        }
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }
}

/// Index of the entry nearest to `v` in squared Euclidean distance; ties go
/// to the lowest index.
pub fn nearest(entries: &Tensor<f32>, v: &[f32]) -> usize {
    let d = entries.shape()[1];
    let mut best = (f32::INFINITY, 0);
    for (k, e) in entries.data().chunks(d).enumerate() {
        let dist: f32 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

/// Snaps every row of `z_e: [M, D]` to its nearest codebook entry.
pub fn vq_quantize(z_e: &Tensor<f32>, cb: &Codebook) -> Result<(Tensor<f32>, Vec<usize>)> {
    let d = cb.dim();
    if z_e.shape().len() != 2 || z_e.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "encoder output {:?} against codebook dimension {d}",
            z_e.shape()
        )));
    }
    let idx: Vec<usize> = z_e.data().chunks(d).map(|row| nearest(&cb.entries, row)).collect();
    let mut q = Vec::with_capacity(z_e.len());
    for &i in &idx {
        q.extend_from_slice(cb.entries.row(i));
    }
    Ok((Tensor::new(z_e.shape().to_vec(), q), idx))
}

/// `(‖sg(z_e) − z_q‖², β·‖z_e − sg(z_q)‖²)` as values. On the forward pass
/// both are squared gaps; they differ only in where gradients flow.
pub fn vq_losses(z_e: &Tensor<f32>, z_q: &Tensor<f32>, beta: f64) -> Result<(f64, f64)> {
    if z_e.shape() != z_q.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", z_e.shape(), z_q.shape())));
    }
    let gap: f64 = z_e
        .data()
        .iter()
        .zip(z_q.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((gap, beta * gap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqvaeConfig {
    pub hidden_dim: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub beta: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            code_dim: 4,
            codebook_size: 128,
            beta: 0.25,
            lr: 0.01,
            weight_decay: 1e-5,
            batch_size: 128,
            epochs: 20,
            seed: 0,
        }
    }
}

/// Conv kernel and bias shapes: encoder `1 → h → h → D`, decoder
/// `D → h → h → 1`, all 3×3 with padding 1.
pub fn param_shapes(hidden: usize, code_dim: usize) -> Vec<Vec<usize>> {
    let chans = [(1, hidden), (hidden, hidden), (hidden, code_dim), (code_dim, hidden), (hidden, hidden), (hidden, 1)];
    chans
        .iter()
        .flat_map(|&(i, o)| [vec![o, i, 3, 3], vec![o]])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqvaeModel {
    pub layer_id: usize,
    pub hidden_dim: usize,
    pub beta: f32,
    pub offset: f32,
    pub scale: f32,
    pub params: Vec<Tensor<f32>>,
    pub codebook: Codebook,
    pub loss_log: Vec<f64>,
}

fn conv_bias<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.conv2d(x, w, 1, 1);
    let shape = tape.value(y).shape().to_vec();
    let per = shape[1..].iter().product::<usize>();
    let bb = tape.gather(b, (0..shape[0] * per).map(|i| i / per).collect(), &shape);
    tape.add(y, bb)
}

/// `[C, B, 3, 3] <-> [B·9, C]`.
fn cnhw_to_rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (c, m) = (s[0], s[1] * 9);
    let idx = (0..m * c).map(|i| (i % c) * m + i / c).collect();
    tape.gather(x, idx, &[m, c])
}

fn rows_to_cnhw<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (m, c) = (s[0], s[1]);
    let idx = (0..m * c).map(|i| (i % m) * c + i / m).collect();
    tape.gather(x, idx, &[c, m / 9, 3, 3])
}

/// Encoder output rows `[B·9, D]` for normalised slices `x: [1, B, 3, 3]`.
pub fn encode_tape<T: Scalar>(tape: &mut Tape<T>, p: &[Var], x: Var) -> Var {
    let h = conv_bias(tape, x, p[0], p[1]);
    let h = tape.elu(h);
    let h = conv_bias(tape, h, p[2], p[3]);
    let h = tape.elu(h);
    let z = conv_bias(tape, h, p[4], p[5]);
    cnhw_to_rows(tape, z)
}

/// Reconstructions `[1, B, 3, 3]` from quantised rows `[B·9, D]`.
pub fn decode_tape<T: Scalar>(tape: &mut Tape<T>, p: &[Var], zq: Var) -> Var {
    let z = rows_to_cnhw(tape, zq);
    let h = conv_bias(tape, z, p[6], p[7]);
    let h = tape.elu(h);
    let h = conv_bias(tape, h, p[8], p[9]);
    let h = tape.elu(h);
    conv_bias(tape, h, p[10], p[11])
}

pub struct VqStep {
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub indices: Vec<usize>,
    pub encodings: Tensor<f32>,
    pub grads: Vec<Tensor<f32>>,
    pub codebook_grad: Tensor<f32>,
}

/// Forward and backward pass on normalised slices `x: [B, 3, 3]`.
pub fn vq_step(params: &[Tensor<f32>], cb: &Codebook, beta: f32, x: &Tensor<f32>) -> VqStep {
    let b = x.shape()[0];
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let code = tape.leaf(cb.entries.clone(), true);
    let xv = tape.constant(x.clone().reshape(&[1, b, 3, 3]));
    let ze = encode_tape(&mut tape, &p, xv);
    let encodings = tape.value(ze).clone();
    let d = cb.dim();
    let indices: Vec<usize> = encodings.data().chunks(d).map(|r| nearest(&cb.entries, r)).collect();
    let zq = tape.select_rows(code, &indices);
    // straight-through: forward uses z_q, backward copies into z_e
    let gap = tape.sub(zq, ze);
    let gap = tape.detach(gap);
    let st = tape.add(ze, gap);
    let ze_sg = tape.detach(ze);
    let zq_sg = tape.detach(zq);
    let cdiff = tape.sub(ze_sg, zq);
    let c2 = tape.mul(cdiff, cdiff);
    let cb_loss = tape.sum(c2);
    let mdiff = tape.sub(ze, zq_sg);
    let m2 = tape.mul(mdiff, mdiff);
    let ms = tape.sum(m2);
    let commit = tape.scale(ms, beta);
    let xr = decode_tape(&mut tape, &p, st);
    let r = tape.sub(xv, xr);
    let r2 = tape.mul(r, r);
    let recon = tape.sum(r2);
    let l1 = tape.add(recon, cb_loss);
    let loss = tape.add(l1, commit);
    let mut g = tape.backward(loss);
    let grads = p
        .iter()
        .zip(params)
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    VqStep {
        loss: tape.value(loss).item() as f64,
        recon: tape.value(recon).item() as f64,
        codebook: tape.value(cb_loss).item() as f64,
        commitment: tape.value(commit).item() as f64,
        indices,
        encodings,
        grads,
        codebook_grad: g.take(code).unwrap_or_else(|| Tensor::zeros(cb.entries.shape())),
    }
}

pub fn train_vqvae(slices: &Tensor<f32>, layer_id: usize, cfg: &VqvaeConfig) -> Result<VqvaeModel> {
    let n = slices.shape()[0];
    if n < cfg.batch_size || cfg.batch_size == 0 {
        return Err(Error::TooFewSamples {
            have: n,
            batch: cfg.batch_size,
        });
    }
    if !(cfg.beta > 0.0) {
        return Err(Error::Config("commitment cost must be positive".into()));
    }
    let (offset, scale) = normaliser(slices);
    let data: Vec<f32> = slices.data().iter().map(|&v| (v - offset) / scale).collect();
    let mut params: Vec<Tensor<f32>> = param_shapes(cfg.hidden_dim, cfg.code_dim)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.len() == 4 {
                let fan_in = (s[1] * 9) as f64;
                normal_tensor(&mut rng(derive_seed(cfg.seed, i as u64)), &s, (1.0 / fan_in).sqrt())
            } else {
                Tensor::zeros(&s)
            }
        })
        .collect();
    let k = cfg.codebook_size;
    let mut cb = Codebook::new(uniform_tensor(
        &mut rng(derive_seed(cfg.seed, 50)),
        &[k, cfg.code_dim],
        1.0 / k as f64,
    ));
    let batches = n / cfg.batch_size;
    let schedule = LrSchedule::Linear {
        total_steps: batches * cfg.epochs,
    };
    let mut opt = Adam::new(&params, cfg.weight_decay);
    let mut cb_opt = Adam::new(std::slice::from_ref(&cb.entries), cfg.weight_decay);
    let mut reseed = rng(derive_seed(cfg.seed, 51));
    let mut loss_log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut rng(derive_seed(cfg.seed, 100 + epoch as u64)), n);
        let mut used = vec![0u64; k];
        let mut total = 0.0;
        let mut last_enc = None;
        for bi in 0..batches {
            let mut xb = Vec::with_capacity(cfg.batch_size * 9);
            for &i in &order[bi * cfg.batch_size..(bi + 1) * cfg.batch_size] {
                xb.extend_from_slice(&data[i * 9..(i + 1) * 9]);
            }
            let x = Tensor::new(vec![cfg.batch_size, 3, 3], xb);
            let s = vq_step(&params, &cb, cfg.beta, &x);
            if !s.loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            for &i in &s.indices {
                used[i] += 1;
            }
            total += s.loss / cfg.batch_size as f64;
            let lr = schedule.rate(cfg.lr, step);
            let grads: Vec<Option<Tensor<f32>>> = s.grads.into_iter().map(Some).collect();
            opt.step(&mut params, &grads, lr);
            cb_opt.step(std::slice::from_mut(&mut cb.entries), &[Some(s.codebook_grad)], lr);
            last_enc = Some(s.encodings);
            step += 1;
        }
        // entries unused for a whole epoch restart at a random encoding
        if let Some(enc) = last_enc {
            let rows = enc.shape()[0];
            let d = cfg.code_dim;
            for (e, &u) in used.iter().enumerate() {
                if u == 0 && epoch + 1 < cfg.epochs {
                    let r = reseed.random_range(0..rows);
                    cb.entries.data_mut()[e * d..(e + 1) * d].copy_from_slice(enc.row(r));
                }
            }
        }
        cb.usage = used;
        loss_log.push(total / batches as f64);
    }
    Ok(VqvaeModel {
        layer_id,
        hidden_dim: cfg.hidden_dim,
        beta: cfg.beta,
        offset,
        scale,
        params,
        codebook: cb,
        loss_log,
    })
}

/// Codebook indices of the nine positions of normalised slices `[B, 3, 3]`.
pub fn encode_indices(model: &VqvaeModel, x: &Tensor<f32>) -> Vec<usize> {
    let b = x.shape()[0];
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x.clone().reshape(&[1, b, 3, 3]));
    let ze = encode_tape(&mut tape, &p, xv);
    let d = model.codebook.dim();
    tape.value(ze)
        .data()
        .chunks(d)
        .map(|r| nearest(&model.codebook.entries, r))
        .collect()
}

/// Decodes nine uniformly drawn codebook indices per slice.
pub fn sample_vqvae(model: &VqvaeModel, n: usize, seed: u64) -> Result<Tensor<f32>> {
    if n == 0 {
        return Err(Error::Config("number of samples must be at least 1".into()));
    }
    let k = model.codebook.size();
    let mut r = rng(seed);
    let idx: Vec<usize> = (0..n * 9).map(|_| r.random_range(0..k)).collect();
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let code = tape.constant(model.codebook.entries.clone());
    let zq = tape.select_rows(code, &idx);
    let xr = decode_tape(&mut tape, &p, zq);
    let out: Vec<f32> = tape
        .value(xr)
        .data()
        .iter()
        .map(|&v| v * model.scale + model.offset)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("VQVAE samples".into()));
    }
    Ok(Tensor::new(vec![n, 3, 3], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_hand_cases() {
        let cb = Codebook::new(Tensor::new(vec![2, 1], vec![0.0, 1.0]));
        let (q, i) = vq_quantize(&Tensor::new(vec![1, 1], vec![0.4]), &cb).unwrap();
        assert_eq!(i, vec![0]);
        assert_eq!(q.data(), &[0.0]);
        let mut r = rng(0);
        let entries = normal_tensor::<f32>(&mut r, &[128, 4], 1.0);
        let cb = Codebook::new(entries.clone());
        let ze = Tensor::new(vec![1, 4], entries.row(7).to_vec());
        let (q, i) = vq_quantize(&ze, &cb).unwrap();
        assert_eq!(i, vec![7]);
        assert_eq!(q.data(), entries.row(7));
        let zero = Codebook::new(Tensor::zeros(&[128, 4]));
        let (_, i) = vq_quantize(&normal_tensor(&mut r, &[9, 4], 1.0), &zero).unwrap();
        assert!(i.iter().all(|&j| j == 0));
    }

    #[test]
    fn loss_hand_cases() {
        let ze = Tensor::zeros(&[9, 4]);
        let zq = Tensor::full(&[9, 4], 1.0);
        assert_eq!(vq_losses(&ze, &zq, 0.25).unwrap(), (36.0, 9.0));
        assert_eq!(vq_losses(&ze, &ze, 0.25).unwrap(), (0.0, 0.0));
        assert_eq!(vq_losses(&ze, &zq, 0.0).unwrap().1, 0.0);
    }

    #[test]
    fn straight_through_gradient_reaches_encoder_and_codebook() {
        let mut r = rng(1);
        let params: Vec<Tensor<f32>> = param_shapes(4, 2)
            .into_iter()
            .map(|s| normal_tensor(&mut r, &s, 0.3))
            .collect();
        let cb = Codebook::new(normal_tensor(&mut r, &[8, 2], 0.5));
        let x = normal_tensor(&mut r, &[5, 3, 3], 1.0);
        let s = vq_step(&params, &cb, 0.25, &x);
        // encoder conv kernels receive reconstruction gradient through z_q
        assert!(s.grads[0].data().iter().any(|&g| g != 0.0));
        assert!(s.grads[10].data().iter().any(|&g| g != 0.0));
        let used: std::collections::BTreeSet<_> = s.indices.iter().copied().collect();
        for e in 0..8 {
            let row_nonzero = s.codebook_grad.row(e).iter().any(|&g| g != 0.0);
            assert_eq!(row_nonzero, used.contains(&e) && s.codebook > 0.0, "entry {e}");
        }
    }

    #[test]
    fn training_emits_valid_indices_and_is_deterministic() {
        let mut r = rng(2);
        let slices = normal_tensor::<f32>(&mut r, &[500, 3, 3], 0.05);
        let cfg = VqvaeConfig {
            epochs: 3,
            ..VqvaeConfig::default()
        };
        let m = train_vqvae(&slices, 3, &cfg).unwrap();
        let norm = slices.map(|v| (v - m.offset) / m.scale);
        let idx = encode_indices(&m, &norm);
        assert_eq!(idx.len(), 500 * 9);
        assert!(idx.iter().all(|&i| i < 128));
        assert_eq!(m, train_vqvae(&slices, 3, &cfg).unwrap());
        let s = sample_vqvae(&m, 20, 0).unwrap();
        assert_eq!(s.shape(), &[20, 3, 3]);
        assert_eq!(s, sample_vqvae(&m, 20, 0).unwrap());
    }
}
