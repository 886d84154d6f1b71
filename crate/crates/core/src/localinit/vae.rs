//! Gaussian VAE over normalised 3×3 slices.
//!
//! Encoder and decoder are ELU MLPs `9 → h → h → 2d` and `d → h → h → 9`.
//! The decoder likelihood is a diagonal Gaussian whose per-element
//! log-variance is a learned parameter.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Adam, LrSchedule};
use crate::rng::{derive_seed, normal_tensor, permutation, rng, standard_normal_vec};
use crate::tensor::{Scalar, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian `N(mean, exp(log_variance))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            log_variance: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Closed-form `KL[q || p]` of two diagonal Gaussians.
pub fn kl_diag_gaussian(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64> {
    if q.dim() != p.dim() || q.log_variance.len() != q.dim() || p.log_variance.len() != p.dim() {
        return Err(Error::Dimension(format!(
            "KL between {}-d and {}-d Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_variance[i], p.mean[i], p.log_variance[i]);
        let d = mq - mp;
        kl += 0.5 * (lp - lq + (lq.exp() + d * d) / lp.exp() - 1.0);
    }
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

/// Tensor shapes of the VAE parameters in storage order: three encoder
/// `(W, b)` pairs, three decoder pairs, decoder log-variance.
pub fn param_shapes(latent_dim: usize, hidden_dim: usize) -> Vec<Vec<usize>> {
    let (d, h) = (latent_dim, hidden_dim);
    vec![
        vec![9, h],
        vec![h],
        vec![h, h],
        vec![h],
        vec![h, 2 * d],
        vec![2 * d],
        vec![d, h],
        vec![h],
        vec![h, h],
        vec![h],
        vec![h, 9],
        vec![9],
        vec![9],
    ]
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, mut x: Var, layers: &[Var]) -> Var {
    let n = layers.len() / 2;
    for i in 0..n {
        x = tape.matmul(x, layers[2 * i]);
        x = tape.add_row_bias(x, layers[2 * i + 1]);
        if i + 1 < n {
            x = tape.elu(x);
        }
    }
    x
}

/// `(mean, log_variance)` of `q(z|x)` for rows of `x: [B, 9]`.
pub fn encode_tape<T: Scalar>(tape: &mut Tape<T>, p: &[Var], x: Var, latent_dim: usize) -> (Var, Var) {
    let h = mlp(tape, x, &p[0..6]);
    (tape.slice_cols(h, 0, latent_dim), tape.slice_cols(h, latent_dim, latent_dim))
}

/// Decoder mean `[B, 9]` for latents `z: [B, d]`.
pub fn decode_tape<T: Scalar>(tape: &mut Tape<T>, p: &[Var], z: Var) -> Var {
    mlp(tape, z, &p[6..12])
}

/// Tiles the length-`w` vector `v` into `[rows, w]`.
fn broadcast_rows<T: Scalar>(tape: &mut Tape<T>, v: Var, rows: usize, w: usize) -> Var {
    tape.gather(v, (0..rows * w).map(|i| i % w).collect(), &[rows, w])
}

/// How the latent sample is supplied to [`neg_elbo_tape`].
#[derive(Clone, Copy)]
pub enum Latent {
    /// Standard-normal noise, reparameterised as `mean + exp(½·logvar)·ε`.
    Eps(Var),
    /// A latent sample used as given.
    Sample(Var),
}

/// Negative single-sample ELBO summed over the rows of `x: [B, 9]`.
pub fn neg_elbo_tape<T: Scalar>(tape: &mut Tape<T>, p: &[Var], x: Var, latent: Latent, latent_dim: usize) -> Var {
    let rows = tape.value(x).shape()[0];
    let (mu, lv) = encode_tape(tape, p, x, latent_dim);
    let z = match latent {
        Latent::Eps(eps) => {
            let half = tape.scale(lv, T::lit(0.5));
            let sd = tape.exp(half);
            let noise = tape.mul(sd, eps);
            tape.add(mu, noise)
        }
        Latent::Sample(z) => z,
    };
    let xm = decode_tape(tape, p, z);
    // −log p(x|z) = ½ Σ [(x−μ)²·e^{−v} + v + log 2π]
    let dlv = broadcast_rows(tape, p[12], rows, 9);
    let r = tape.sub(x, xm);
    let r2 = tape.mul(r, r);
    let neg = tape.scale(dlv, T::lit(-1.0));
    let prec = tape.exp(neg);
    let w = tape.mul(r2, prec);
    let t = tape.add(w, dlv);
    let t = tape.shift(t, T::lit(LN_2PI));
    let s = tape.sum(t);
    let nll = tape.scale(s, T::lit(0.5));
    // KL[q || N(0, I)] = ½ Σ (μ² + e^{v} − 1 − v)
    let m2 = tape.mul(mu, mu);
    let ev = tape.exp(lv);
    let a = tape.add(m2, ev);
    let b = tape.sub(a, lv);
    let b = tape.shift(b, T::lit(-1.0));
    let ks = tape.sum(b);
    let kl = tape.scale(ks, T::lit(0.5));
    tape.add(nll, kl)
}

/// Negative ELBO (summed over rows of `x`) and its gradient with respect to
/// every parameter tensor, for reparameterisation noise `eps`.
pub fn neg_elbo_with_grads<T: Scalar>(
    params: &[Tensor<T>],
    x: &Tensor<T>,
    eps: &Tensor<T>,
    latent_dim: usize,
) -> (T, Vec<Tensor<T>>) {
    let mut tape = Tape::<T>::new();
    let p: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(eps.clone());
    let loss = neg_elbo_tape(&mut tape, &p, xv, Latent::Eps(ev), latent_dim);
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss);
    let grads = p
        .iter()
        .zip(params)
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            hidden_dim: 32,
            lr: 0.01,
            weight_decay: 1.0,
            batch_size: 128,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub layer_id: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Slices are modelled as `(x − offset) / scale`.
    pub offset: f32,
    pub scale: f32,
    pub params: Vec<Tensor<f32>>,
    /// Mean training loss per epoch.
    pub loss_log: Vec<f64>,
}

impl VaeModel {
    /// Weights with variance 1/fan_in, zero biases, unit decoder variance.
    pub fn new(layer_id: usize, latent_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let params = param_shapes(latent_dim, hidden_dim)
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() == 2 {
                    normal_tensor(&mut rng(derive_seed(seed, i as u64)), &s, (1.0 / s[0] as f64).sqrt())
                } else {
                    Tensor::zeros(&s)
                }
            })
            .collect();
        Self {
            layer_id,
            latent_dim,
            hidden_dim,
            offset: 0.0,
            scale: 1.0,
            params,
            loss_log: Vec::new(),
        }
    }

    /// Posterior `q(z|x)` of one normalised slice.
    pub fn encode(&self, x: &[f32; 9]) -> GaussianPosterior {
        let mut tape = Tape::<f64>::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant(t.cast())).collect();
        let xv = tape.constant(Tensor::new(vec![1, 9], x.iter().map(|&v| v as f64).collect()));
        let (m, l) = encode_tape(&mut tape, &p, xv, self.latent_dim);
        GaussianPosterior {
            mean: tape.value(m).data().to_vec(),
            log_variance: tape.value(l).data().to_vec(),
        }
    }

    /// Decoder mean of one latent vector (normalised units).
    pub fn decode_mean(&self, z: &[f64]) -> [f64; 9] {
        let mut tape = Tape::<f64>::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.constant(t.cast())).collect();
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec()));
        let m = decode_tape(&mut tape, &p, zv);
        let mut out = [0.0; 9];
        out.copy_from_slice(tape.value(m).data());
        out
    }
}

/// Single-sample ELBO `log p(x|z) − KL[q(z|x) || N(0, I)]` of a slice `x`
/// (in the model's normalised units) at latent sample `z`.
pub fn elbo(x: &[f32; 9], model: &VaeModel, z_sample: &[f64]) -> Result<f64> {
    if z_sample.len() != model.latent_dim {
        return Err(Error::Dimension(format!(
            "latent sample has {} entries, model expects {}",
            z_sample.len(),
            model.latent_dim
        )));
    }
    let mut tape = Tape::<f64>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.cast())).collect();
    let xv = tape.constant(Tensor::new(vec![1, 9], x.iter().map(|&v| v as f64).collect()));
    let z = tape.constant(Tensor::new(vec![1, z_sample.len()], z_sample.to_vec()));
    let loss = neg_elbo_tape(&mut tape, &p, xv, Latent::Sample(z), model.latent_dim);
    let v = -tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("ELBO".into()));
    }
    Ok(v)
}

/// Mean and standard deviation of all entries. A (near-)constant set gets a
/// scale of 1e-3 of its magnitude so samples stay close to the constant.
pub fn normaliser(slices: &Tensor<f32>) -> (f32, f32) {
    let n = slices.len().max(1) as f64;
    let mean = slices.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = slices
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-8 { sd } else { (1e-3 * mean.abs()).max(1e-8) };
    (mean as f32, scale as f32)
}

/// Adam with linearly decaying rate on the summed negative ELBO.
pub fn train_vae(slices: &Tensor<f32>, layer_id: usize, cfg: &VaeConfig) -> Result<VaeModel> {
    let n = slices.shape()[0];
    if n < cfg.batch_size || cfg.batch_size == 0 {
        return Err(Error::TooFewSamples {
            have: n,
            batch: cfg.batch_size,
        });
    }
    let mut model = VaeModel::new(layer_id, cfg.latent_dim, cfg.hidden_dim, derive_seed(cfg.seed, 1));
    let (offset, scale) = normaliser(slices);
    model.offset = offset;
    model.scale = scale;
    let data: Vec<f32> = slices.data().iter().map(|&v| (v - offset) / scale).collect();
    let batches = n / cfg.batch_size;
    let schedule = LrSchedule::Linear {
        total_steps: batches * cfg.epochs,
    };
    let mut opt = Adam::new(&model.params, cfg.weight_decay);
    let mut noise = rng(derive_seed(cfg.seed, 2));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = permutation(&mut rng(derive_seed(cfg.seed, 100 + epoch as u64)), n);
        let mut total = 0.0;
        for b in 0..batches {
            let mut xb = Vec::with_capacity(cfg.batch_size * 9);
            for &i in &order[b * cfg.batch_size..(b + 1) * cfg.batch_size] {
                xb.extend_from_slice(&data[i * 9..(i + 1) * 9]);
            }
            let x = Tensor::new(vec![cfg.batch_size, 9], xb);
            let eps = Tensor::new(
                vec![cfg.batch_size, cfg.latent_dim],
                standard_normal_vec(&mut noise, cfg.batch_size * cfg.latent_dim),
            );
            let (loss, grads) = neg_elbo_with_grads(&model.params, &x, &eps, cfg.latent_dim);
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            total += loss as f64 / cfg.batch_size as f64;
            let grads: Vec<Option<Tensor<f32>>> = grads.into_iter().map(Some).collect();
            opt.step(&mut model.params, &grads, schedule.rate(cfg.lr, step));
            step += 1;
        }
        model.loss_log.push(total / batches as f64);
    }
    Ok(model)
}

/// `n` slices `[n, 3, 3]` in data units: `z ~ N(0, I)`, then a draw from
/// the decoder Gaussian `p(x|z)`.
pub fn sample_vae(model: &VaeModel, n: usize, seed: u64) -> Result<Tensor<f32>> {
    if n == 0 {
        return Err(Error::Config("number of samples must be at least 1".into()));
    }
    let mut r = rng(seed);
    let z = Tensor::new(vec![n, model.latent_dim], standard_normal_vec(&mut r, n * model.latent_dim));
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let zv = tape.constant(z);
    let mean = decode_tape(&mut tape, &p, zv);
    let sd: Vec<f32> = model.params[12].data().iter().map(|&v| (0.5 * v).exp()).collect();
    let eps = standard_normal_vec(&mut r, n * 9);
    let out: Vec<f32> = tape
        .value(mean)
        .data()
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&m, e))| (m + sd[i % 9] * e) * model.scale + model.offset)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("VAE samples".into()));
    }
    Ok(Tensor::new(vec![n, 3, 3], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kl_closed_form_cases() {
        let std = GaussianPosterior::standard(3);
        assert_eq!(kl_diag_gaussian(&std, &std).unwrap(), 0.0);
        let q = GaussianPosterior {
            mean: vec![1.0],
            log_variance: vec![0.0],
        };
        let p = GaussianPosterior::standard(1);
        assert!((kl_diag_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-12);
        let q = GaussianPosterior {
            mean: vec![0.0],
            log_variance: vec![1.0],
        };
        let want = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl_diag_gaussian(&q, &p).unwrap() - want).abs() < 1e-12);
        // ½(e − 1 − 1)
        assert!((want - 0.359_14).abs() < 1e-5);
        assert!(kl_diag_gaussian(&q, &GaussianPosterior::standard(2)).is_err());
    }

    #[test]
    fn elbo_at_perfect_reconstruction_with_prior_posterior() {
        // zero weights: decoder mean 0, posterior N(0, I), unit variance
        let mut m = VaeModel::new(0, 2, 4, 0);
        for t in m.params.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let v = elbo(&[0.0; 9], &m, &[0.3, -1.0]).unwrap();
        assert!((v + 4.5 * LN_2PI).abs() < 1e-9);
        // any non-zero x scores lower
        assert!(elbo(&[0.1; 9], &m, &[0.3, -1.0]).unwrap() < v);
    }

    #[test]
    fn zero_noise_sample_is_posterior_mean() {
        let m = VaeModel::new(0, 3, 8, 4);
        let x = [0.2, -0.1, 0.4, 0.0, 1.0, -0.3, 0.5, 0.2, -0.8f32];
        let q = m.encode(&x);
        let mut tape = Tape::<f64>::new();
        let p: Vec<Var> = m.params.iter().map(|t| tape.constant(t.cast())).collect();
        let xv = tape.constant(Tensor::new(vec![1, 9], x.iter().map(|&v| v as f64).collect()));
        let eps = tape.constant(Tensor::zeros(&[1, 3]));
        let a = neg_elbo_tape(&mut tape, &p, xv, Latent::Eps(eps), 3);
        let zm = tape.constant(Tensor::new(vec![1, 3], q.mean.clone()));
        let b = neg_elbo_tape(&mut tape, &p, xv, Latent::Sample(zm), 3);
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn training_is_deterministic_and_rejects_small_sets() {
        let mut r = rng(3);
        let slices = normal_tensor::<f32>(&mut r, &[300, 3, 3], 0.1);
        let cfg = VaeConfig {
            epochs: 2,
            ..VaeConfig::default()
        };
        let a = train_vae(&slices, 1, &cfg).unwrap();
        let b = train_vae(&slices, 1, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_vae(&a, 10, 5).unwrap(), sample_vae(&a, 10, 5).unwrap());
        assert!(sample_vae(&a, 0, 5).is_err());
        let few = normal_tensor::<f32>(&mut r, &[100, 3, 3], 0.1);
        assert!(matches!(train_vae(&few, 1, &cfg), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn fitted_on_gaussian_slices_matches_moments() {
        let sigma = 0.1f64;
        let mut r = rng(11);
        let slices = normal_tensor::<f32>(&mut r, &[1000, 3, 3], sigma);
        let model = train_vae(&slices, 0, &VaeConfig::default()).unwrap();
        let s = sample_vae(&model, 10_000, 1).unwrap();
        // standard error of a per-element mean: the 1000 training slices
        // and the 10⁴ samples both contribute
        let se = sigma * (1.0 / 1000.0 + 1.0 / 1e4f64).sqrt();
        for j in 0..9 {
            let col: Vec<f64> = (0..10_000).map(|i| s.data()[i * 9 + j] as f64).collect();
            let m = col.iter().sum::<f64>() / 1e4;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (1e4 - 1.0);
            assert!(m.abs() < 3.0 * se, "element {j} mean {m}");
            assert!((v / (sigma * sigma) - 1.0).abs() < 0.2, "element {j} variance {v}");
        }
        let first = model.loss_log[0];
        assert!(*model.loss_log.last().unwrap() <= first);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn kl_is_non_negative(
            m in prop::collection::vec(-3.0f64..3.0, 4),
            l in prop::collection::vec(-3.0f64..3.0, 4),
            pm in prop::collection::vec(-3.0f64..3.0, 4),
            pl in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let q = GaussianPosterior { mean: m, log_variance: l };
            let p = GaussianPosterior { mean: pm, log_variance: pl };
            prop_assert!(kl_diag_gaussian(&q, &p).unwrap() >= 0.0);
        }
    }
}
