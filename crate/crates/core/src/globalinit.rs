//! Graph hypernetworks.
//!
//! Every node of a [`CompGraph`] starts from an embedding of its operation
//! plus a small encoding of its shape attributes. Gated recurrent updates
//! propagate states forward then backward along the edges; a shared
//! decoder turns each parameterised node's final state (optionally joined
//! with a noise vector ξ) into a canonical raw tensor that is sliced or
//! tiled to the layer's shape and normalised.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archspace::{enumerate_params, resnet_from_name, CompGraph, OpKind, ParamKind, ParamSpec};
use crate::autograd::{Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::Container;
use crate::nn::{forward, to_channel_major, BnMode};
use crate::optim::{Adam, LrSchedule};
use crate::rng::{derive_seed, normal_tensor, permutation, rng, standard_normal_vec};
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightSet;

/// Largest output/input channel count the decoder emits directly.
pub const CANONICAL_CHANNELS: usize = 64;
pub const CANONICAL_KERNEL: usize = 3;
pub const NOISE_DIM: usize = 8;
/// Initial scale of the decoder weights that read ξ, relative to those
/// that read the node state.
pub const NOISE_INIT_GAIN: f32 = 0.1;
const ATTR_DIMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhnVariant {
    Ghn,
    NoiseGhn,
}

impl GhnVariant {
    pub fn name(self) -> &'static str {
        match self {
            GhnVariant::Ghn => "ghn",
            GhnVariant::NoiseGhn => "noise_ghn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ghn" => Some(GhnVariant::Ghn),
            "noise_ghn" => Some(GhnVariant::NoiseGhn),
            _ => None,
        }
    }

    pub fn noise_dim(self) -> usize {
        match self {
            GhnVariant::Ghn => 0,
            GhnVariant::NoiseGhn => NOISE_DIM,
        }
    }
}

/// Parameter tensors in storage order.
mod slot {
    pub const EMBED: usize = 0;
    /// Forward sweep: message `W, b`, GRU input weights, hidden weights for
    /// the update/reset gates, hidden weight of the candidate, input bias.
    pub const FWD: usize = 1;
    pub const BWD: usize = 7;
    pub const DEC_W: usize = 13;
    pub const DEC_B: usize = 14;
    pub const KERNEL_W: usize = 15;
    pub const KERNEL_B: usize = 16;
    pub const SCALE_W: usize = 17;
    pub const SCALE_B: usize = 18;
    pub const SHIFT_W: usize = 19;
    pub const SHIFT_B: usize = 20;
    pub const BIAS_W: usize = 21;
    pub const BIAS_B: usize = 22;
    pub const COUNT: usize = 23;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhnModel {
    pub variant: GhnVariant,
    /// Hidden state width `d`.
    pub d: usize,
    pub decoder_hidden: usize,
    /// Forward-then-backward sweeps per propagation.
    pub rounds: usize,
    pub params: Vec<Tensor<f32>>,
}

fn shapes(d: usize, noise: usize, hidden: usize) -> Vec<Vec<usize>> {
    let c = CANONICAL_CHANNELS;
    let k = c * c * CANONICAL_KERNEL * CANONICAL_KERNEL;
    let sweep = || vec![vec![d, d], vec![d], vec![d, 3 * d], vec![d, 2 * d], vec![d, d], vec![3 * d]];
    let mut s = vec![vec![OpKind::ALL.len(), d - ATTR_DIMS]];
    s.extend(sweep());
    s.extend(sweep());
    s.extend([
        vec![d + noise, hidden],
        vec![hidden],
        vec![hidden, k],
        vec![k],
        vec![hidden, c],
        vec![c],
        vec![hidden, c],
        vec![c],
        vec![hidden, c],
        vec![c],
    ]);
    s
}

impl GhnModel {
    pub fn new(variant: GhnVariant, d: usize, decoder_hidden: usize, rounds: usize, seed: u64) -> Result<Self> {
        if d <= ATTR_DIMS {
            return Err(Error::Config(format!("hidden width must exceed {ATTR_DIMS}")));
        }
        if rounds == 0 {
            return Err(Error::Config("at least one propagation round is required".into()));
        }
        let mut params = shapes(d, variant.noise_dim(), decoder_hidden)
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng(derive_seed(seed, i as u64));
                match s.len() {
                    2 if i == slot::EMBED => normal_tensor(&mut r, &s, 1.0),
                    // affine heads start at the identity (scale 1, shift 0)
                    2 if i >= slot::SCALE_W => Tensor::zeros(&s),
                    2 => normal_tensor(&mut r, &s, (1.0 / s[0] as f64).sqrt()),
                    _ => Tensor::zeros(&s),
                }
            })
            .collect::<Vec<Tensor<f32>>>();
        // noise rows start small so early training sees near-deterministic weights
        let dec = &mut params[slot::DEC_W];
        for v in &mut dec.data_mut()[d * decoder_hidden..] {
            *v *= NOISE_INIT_GAIN;
        }
        Ok(Self {
            variant,
            d,
            decoder_hidden,
            rounds,
            params,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.variant.noise_dim()
    }

    pub fn file_name(variant: GhnVariant, dataset: &str) -> String {
        format!("ghn_{}_{dataset}.gm", variant.name())
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut m = json!({
            "variant": self.variant,
            "d": self.d,
            "decoder_hidden": self.decoder_hidden,
            "rounds": self.rounds,
            "noise_dim": self.noise_dim(),
            "canonical_shape": [CANONICAL_CHANNELS, CANONICAL_CHANNELS, CANONICAL_KERNEL, CANONICAL_KERNEL],
            "bn_params": "generated",
        });
        if let (Some(a), serde_json::Value::Object(b)) = (m.as_object_mut(), meta) {
            a.extend(b);
        }
        let mut c = Container::new("ghn", m);
        for (i, t) in self.params.iter().enumerate() {
            c.push(format!("p{i}"), t.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let get = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("ghn header lacks `{k}`")))
        };
        let variant: GhnVariant = serde_json::from_value(get("variant")?)?;
        let d: usize = serde_json::from_value(get("d")?)?;
        let decoder_hidden: usize = serde_json::from_value(get("decoder_hidden")?)?;
        let rounds: usize = serde_json::from_value(get("rounds")?)?;
        let params = (0..slot::COUNT)
            .map(|i| c.array(&format!("p{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        for (p, s) in params.iter().zip(shapes(d, variant.noise_dim(), decoder_hidden)) {
            if p.shape() != s.as_slice() {
                return Err(Error::Format(format!("ghn parameter shape {:?}, expected {s:?}", p.shape())));
            }
        }
        Ok(Self {
            variant,
            d,
            decoder_hidden,
            rounds,
            params,
        })
    }

    pub fn save(&self, path: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta).write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path, "ghn")?)
    }
}

/// Per-node states `[N, d]` after `round` propagation rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor<f32>,
    pub round: usize,
}

impl HiddenStates {
    pub fn node(&self, i: usize) -> &[f32] {
        self.states.row(i)
    }
}

/// Shape attributes of a node: log-scaled output and input channels,
/// kernel size and stride.
pub fn attr_encoding(node: &crate::archspace::NodeSpec) -> [f64; ATTR_DIMS] {
    let (out, inp) = match (&node.param_shape, node.op) {
        (Some(s), OpKind::Batchnorm) => (s[0], s[0]),
        (Some(s), _) => (s[0], s[1]),
        (None, OpKind::Input) => (node.attr("channels").unwrap_or(3) as usize, 0),
        (None, _) => (0, 0),
    };
    let lg = |c: usize| ((c + 1) as f64).log2() / 7.0;
    [
        lg(out),
        lg(inp),
        node.kernel().unwrap_or(0) as f64 / 3.0,
        node.attr("stride").unwrap_or(0) as f64 / 2.0,
    ]
}

fn check_noise(model: &GhnModel, xi: Option<&[f32]>) -> Result<()> {
    match (model.noise_dim(), xi) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(Error::Noise("a deterministic GHN takes no noise vector".into())),
        (n, Some(x)) if x.len() == n => Ok(()),
        (n, Some(x)) => Err(Error::Noise(format!("expected {n} noise entries, got {}", x.len()))),
        (n, None) => Err(Error::Noise(format!("a Noise GHN needs a {n}-entry noise vector"))),
    }
}

/// Draws ξ ~ N(0, I) for a Noise GHN; `None` for a deterministic one.
pub fn sample_noise(model: &GhnModel, seed: u64) -> Option<Vec<f32>> {
    match model.noise_dim() {
        0 => None,
        n => Some(standard_normal_vec(&mut rng(seed), n)),
    }
}

/// Tape variables of one forward/backward sweep.
#[derive(Clone, Copy)]
struct Sweep {
    msg_w: Var,
    msg_b: Var,
    wx: Var,
    uzr: Var,
    un: Var,
    bx: Var,
}

impl Sweep {
    fn at(p: &[Var], base: usize) -> Self {
        Self {
            msg_w: p[base],
            msg_b: p[base + 1],
            wx: p[base + 2],
            uzr: p[base + 3],
            un: p[base + 4],
            bx: p[base + 5],
        }
    }
}

fn gru<T: Scalar>(tape: &mut Tape<T>, s: Sweep, m: Var, h: Var, d: usize) -> Var {
    let xw = tape.matmul(m, s.wx);
    let xw = tape.add_row_bias(xw, s.bx);
    let hu = tape.matmul(h, s.uzr);
    let xz = tape.slice_cols(xw, 0, d);
    let xr = tape.slice_cols(xw, d, d);
    let xn = tape.slice_cols(xw, 2 * d, d);
    let hz = tape.slice_cols(hu, 0, d);
    let hr = tape.slice_cols(hu, d, d);
    let z = tape.add(xz, hz);
    let z = tape.sigmoid(z);
    let r = tape.add(xr, hr);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h);
    let hn = tape.matmul(rh, s.un);
    let n = tape.add(xn, hn);
    let n = tape.tanh(n);
    // h' = h + (1 − z)·(n − h)
    let diff = tape.sub(n, h);
    let nz = tape.scale(z, T::lit(-1.0));
    let keep = tape.shift(nz, T::one());
    let step = tape.mul(keep, diff);
    tape.add(h, step)
}

fn initial_states_tape<T: Scalar>(tape: &mut Tape<T>, g: &CompGraph, p: &[Var]) -> Vec<Var> {
    g.nodes
        .iter()
        .map(|node| {
            let e = tape.select_rows(p[slot::EMBED], &[node.op.index()]);
            let a = attr_encoding(node).map(T::lit).to_vec();
            let a = tape.constant(Tensor::new(vec![1, ATTR_DIMS], a));
            tape.concat_cols(&[e, a])
        })
        .collect()
}

fn propagate_tape<T: Scalar>(tape: &mut Tape<T>, g: &CompGraph, p: &[Var], mut h: Vec<Var>, rounds: usize, d: usize) -> Vec<Var> {
    let preds = g.in_neighbours();
    let succs = g.out_neighbours();
    for _ in 0..rounds {
        for (base, order, nbrs) in [
            (slot::FWD, (0..g.nodes.len()).collect::<Vec<_>>(), &preds),
            (slot::BWD, (0..g.nodes.len()).rev().collect(), &succs),
        ] {
            let s = Sweep::at(p, base);
            let mut msg: Vec<Option<Var>> = vec![None; g.nodes.len()];
            for v in order {
                if nbrs[v].is_empty() {
                    continue;
                }
                let mut total: Option<Var> = None;
                for &u in &nbrs[v] {
                    let mu = match msg[u] {
                        Some(m) => m,
                        None => {
                            let m = tape.matmul(h[u], s.msg_w);
                            let m = tape.add_row_bias(m, s.msg_b);
                            let m = tape.relu(m);
                            msg[u] = Some(m);
                            m
                        }
                    };
                    total = Some(match total {
                        Some(t) => tape.add(t, mu),
                        None => mu,
                    });
                }
                h[v] = gru(tape, s, total.expect("non-empty"), h[v], d);
            }
        }
    }
    h
}

/// `H⁰`: operation embedding joined with [`attr_encoding`].
pub fn init_hidden_states(g: &CompGraph, model: &GhnModel) -> Result<HiddenStates> {
    g.validate()?;
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let h = initial_states_tape(&mut tape, g, &p);
    Ok(HiddenStates {
        states: stack(&tape, &h),
        round: 0,
    })
}

fn stack(tape: &Tape<f32>, h: &[Var]) -> Tensor<f32> {
    let d = tape.value(h[0]).len();
    let mut data = Vec::with_capacity(h.len() * d);
    for &v in h {
        data.extend_from_slice(tape.value(v).data());
    }
    Tensor::new(vec![h.len(), d], data)
}

/// Runs `rounds` forward-then-backward sweeps from `h0`.
pub fn propagate(g: &CompGraph, h0: &HiddenStates, model: &GhnModel, rounds: usize) -> Result<HiddenStates> {
    if rounds == 0 {
        return Err(Error::Config("propagation needs at least one round".into()));
    }
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let h: Vec<Var> = (0..g.nodes.len())
        .map(|i| tape.constant(Tensor::new(vec![1, model.d], h0.node(i).to_vec())))
        .collect();
    let h = propagate_tape(&mut tape, g, &p, h, rounds, model.d);
    Ok(HiddenStates {
        states: stack(&tape, &h),
        round: h0.round + rounds,
    })
}

/// Flat indices into a canonical tensor that slice (top-left) or tile
/// (modulo) it to `target`. Targets with fewer than four axes are padded
/// with trailing unit axes; 1-D targets index a 1-D canonical vector.
pub fn fit_indices(canonical: &[usize], target: &[usize]) -> Vec<usize> {
    let mut t = target.to_vec();
    if canonical.len() == 4 {
        t.resize(4, 1);
    }
    let n: usize = t.iter().product();
    let mut strides = vec![1; canonical.len()];
    for i in (0..canonical.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * canonical[i + 1];
    }
    let mut idx = Vec::with_capacity(n);
    let mut pos = vec![0usize; t.len()];
    for _ in 0..n {
        idx.push(
            pos.iter()
                .zip(canonical)
                .zip(&strides)
                .map(|((&p, &c), &s)| (p % c) * s)
                .sum(),
        );
        for ax in (0..t.len()).rev() {
            pos[ax] += 1;
            if pos[ax] < t[ax] {
                break;
            }
            pos[ax] = 0;
        }
    }
    idx
}

fn canonical_shape(kind: ParamKind) -> Vec<usize> {
    match kind {
        ParamKind::ConvKernel | ParamKind::LinearWeight => {
            vec![CANONICAL_CHANNELS, CANONICAL_CHANNELS, CANONICAL_KERNEL, CANONICAL_KERNEL]
        }
        _ => vec![CANONICAL_CHANNELS],
    }
}

/// He standard deviation `√(2/fan_in)`.
pub fn he_std(spec: &ParamSpec) -> f64 {
    (2.0 / spec.fan_in() as f64).sqrt()
}

fn fit_tape<T: Scalar>(tape: &mut Tape<T>, raw: Var, spec: &ParamSpec) -> Var {
    let idx = fit_indices(&canonical_shape(spec.kind), &spec.shape);
    let x = tape.gather(raw, idx, &spec.shape);
    match spec.kind {
        ParamKind::ConvKernel | ParamKind::LinearWeight => tape.std_normalize(x, T::lit(he_std(spec))),
        ParamKind::BnScale => tape.recentre(x, T::one()),
        ParamKind::BnShift | ParamKind::Bias => tape.recentre(x, T::zero()),
    }
}

/// Slices/tiles a canonical raw tensor to `spec.shape` and normalises it:
/// kernels and linear weights to standard deviation `√(2/fan_in)`,
/// batch-norm scales to mean 1, shifts and biases to mean 0.
pub fn fit_to_shape(raw: &Tensor<f32>, spec: &ParamSpec) -> Result<Tensor<f32>> {
    let want = canonical_shape(spec.kind);
    if raw.shape() != want.as_slice() {
        return Err(Error::Dimension(format!(
            "raw tensor {:?} is not the canonical {want:?} for {:?}",
            raw.shape(),
            spec.kind
        )));
    }
    let mut tape = Tape::<f32>::new();
    let r = tape.constant(raw.clone());
    let out = fit_tape(&mut tape, r, spec);
    Ok(tape.value(out).clone())
}

fn head(kind: ParamKind) -> (usize, usize) {
    match kind {
        ParamKind::ConvKernel | ParamKind::LinearWeight => (slot::KERNEL_W, slot::KERNEL_B),
        ParamKind::BnScale => (slot::SCALE_W, slot::SCALE_B),
        ParamKind::BnShift => (slot::SHIFT_W, slot::SHIFT_B),
        ParamKind::Bias => (slot::BIAS_W, slot::BIAS_B),
    }
}

/// Decoder input rows `[h, ξ]` → hidden ReLU layer, for several nodes.
fn decoder_hidden<T: Scalar>(tape: &mut Tape<T>, p: &[Var], h: &[Var], xi: Option<Var>) -> Var {
    let d = tape.value(h[0]).len();
    let joined = tape.concat_cols(h);
    let hs = tape.reshape(joined, &[h.len(), d]);
    let input = match xi {
        Some(x) => {
            let n = tape.value(x).len();
            let rows = tape.gather(x, (0..h.len() * n).map(|i| i % n).collect(), &[h.len(), n]);
            tape.concat_cols(&[hs, rows])
        }
        None => hs,
    };
    let z = tape.matmul(input, p[slot::DEC_W]);
    let z = tape.add_row_bias(z, p[slot::DEC_B]);
    tape.relu(z)
}

/// Generated parameters of `g`, aligned with [`enumerate_params`].
fn generate_tape<T: Scalar>(tape: &mut Tape<T>, g: &CompGraph, p: &[Var], xi: Option<Var>, rounds: usize, d: usize) -> Vec<Var> {
    let h0 = initial_states_tape(tape, g, p);
    let h = propagate_tape(tape, g, p, h0, rounds, d);
    let specs = enumerate_params(g);
    let mut out: Vec<Option<Var>> = vec![None; specs.len()];
    // one decoder pass per head over all nodes that use it
    let mut groups: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let (w, b) = head(s.kind);
        match groups.iter_mut().find(|(gw, _, _)| *gw == w) {
            Some(gr) => gr.2.push(i),
            None => groups.push((w, b, vec![i])),
        }
    }
    for (w, b, members) in groups {
        let states: Vec<Var> = members.iter().map(|&i| h[specs[i].node_id]).collect();
        let hid = decoder_hidden(tape, p, &states, xi);
        let raw = tape.matmul(hid, p[w]);
        let raw = tape.add_row_bias(raw, p[b]);
        let width = tape.value(raw).shape()[1];
        for (row, &i) in members.iter().enumerate() {
            let canon = canonical_shape(specs[i].kind);
            let r = tape.gather(raw, (row * width..(row + 1) * width).collect(), &canon);
            out[i] = Some(fit_tape(tape, r, &specs[i]));
        }
    }
    out.into_iter().map(|v| v.expect("every spec decoded")).collect()
}

/// Raw canonical decoder output for one final state `h`.
pub fn decode_node_weights(h: &[f32], xi: Option<&[f32]>, kind: ParamKind, model: &GhnModel) -> Result<Tensor<f32>> {
    check_noise(model, xi)?;
    if h.len() != model.d {
        return Err(Error::Dimension(format!("state has {} entries, model width is {}", h.len(), model.d)));
    }
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let hv = tape.constant(Tensor::new(vec![1, h.len()], h.to_vec()));
    let xv = xi.map(|x| tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())));
    let hid = decoder_hidden(&mut tape, &p, &[hv], xv);
    let (w, b) = head(kind);
    let raw = tape.matmul(hid, p[w]);
    let raw = tape.add_row_bias(raw, p[b]);
    Ok(tape.value(raw).clone().reshape(&canonical_shape(kind)))
}

/// Complete weight set of `g` in one generative pass.
pub fn ghn_forward(g: &CompGraph, model: &GhnModel, xi: Option<&[f32]>) -> Result<WeightSet> {
    check_noise(model, xi)?;
    g.validate()?;
    let mut tape = Tape::<f32>::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = xi.map(|x| tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())));
    let vars = generate_tape(&mut tape, g, &p, xv, model.rounds, model.d);
    let tensors: Vec<Tensor<f32>> = vars.iter().map(|&v| tape.value(v).clone()).collect();
    if tensors.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("generated weights".into()));
    }
    WeightSet::new(g, tensors)
}

/// Mean cosine similarity of matching logit rows and the number of rows
/// that had zero norm (those count as 0).
pub fn similarity_loss(logits1: &Tensor<f32>, logits2: &Tensor<f32>) -> Result<(f64, usize)> {
    if logits1.shape() != logits2.shape() || logits1.shape().len() != 2 || logits1.shape()[0] == 0 {
        return Err(Error::Dimension(format!("{:?} vs {:?}", logits1.shape(), logits2.shape())));
    }
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(logits1.cast());
    let b = tape.constant(logits2.cast());
    let c = tape.cosine_mean(a, b);
    Ok((tape.value(c).item(), tape.zero_norm_rows(c)))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub xent1: f64,
    pub xent2: Option<f64>,
    pub simloss: Option<f64>,
    /// ξ₁ = ξ₂: the similarity term carries no diversity signal.
    pub degenerate_noise: bool,
    /// Rows treated as zero-norm by the similarity term.
    pub zero_norm_rows: usize,
}

/// Optimiser state of a GHN under training.
pub struct GhnTrainer {
    pub model: GhnModel,
    opt: Adam,
    pub sim_weight: f32,
}

impl GhnTrainer {
    pub fn new(model: GhnModel, sim_weight: f32) -> Self {
        let opt = Adam::new(&model.params, 0.0);
        Self {
            model,
            opt,
            sim_weight,
        }
    }

    fn step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        archs: &[CompGraph],
        noise: Option<(&[f32], &[f32])>,
        lr: f32,
    ) -> Result<(StepStats, Vec<Option<Tensor<f32>>>)> {
        if archs.is_empty() {
            return Err(Error::Config("at least one training architecture is required".into()));
        }
        let (d, rounds) = (self.model.d, self.model.rounds);
        let mut tape = Tape::<f32>::new();
        let p: Vec<Var> = self.model.params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let x = tape.constant(to_channel_major(images));
        let mut stats = StepStats::default();
        let mut terms = Vec::new();
        let mut x2 = 0.0;
        let mut sim = 0.0;
        for g in archs {
            match noise {
                None => {
                    let w = generate_tape(&mut tape, g, &p, None, rounds, d);
                    let f = forward(&mut tape, g, &w, x, BnMode::Batch)?;
                    let ce = tape.cross_entropy(f.logits, labels);
                    stats.xent1 += tape.value(ce).item() as f64;
                    terms.push(ce);
                }
                Some((xi1, xi2)) => {
                    let mut logits = Vec::with_capacity(2);
                    for (k, xi) in [xi1, xi2].into_iter().enumerate() {
                        let xv = tape.constant(Tensor::new(vec![1, xi.len()], xi.to_vec()));
                        let w = generate_tape(&mut tape, g, &p, Some(xv), rounds, d);
                        let f = forward(&mut tape, g, &w, x, BnMode::Batch)?;
                        let ce = tape.cross_entropy(f.logits, labels);
                        let v = tape.value(ce).item() as f64;
                        if k == 0 {
                            stats.xent1 += v;
                        } else {
                            x2 += v;
                        }
                        terms.push(ce);
                        logits.push(f.logits);
                    }
                    let c = tape.cosine_mean(logits[0], logits[1]);
                    sim += tape.value(c).item() as f64;
                    stats.zero_norm_rows += tape.zero_norm_rows(c);
                    terms.push(tape.scale(c, self.sim_weight));
                }
            }
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t);
        }
        stats.loss = tape.value(loss).item() as f64;
        if noise.is_some() {
            stats.xent2 = Some(x2);
            stats.simloss = Some(sim);
        }
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite("GHN loss".into()));
        }
        let mut grads = tape.backward(loss);
        let gs: Vec<Option<Tensor<f32>>> = p.iter().map(|&v| grads.take(v)).collect();
        self.opt.step(&mut self.model.params, &gs, lr);
        Ok((stats, gs))
    }

    /// `Σ_arch CE(f(x, a, H(a)), y)` followed by one Adam step. Returns the
    /// statistics and the gradients that were applied.
    pub fn ghn_training_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        archs: &[CompGraph],
        lr: f32,
    ) -> Result<(StepStats, Vec<Option<Tensor<f32>>>)> {
        if self.model.noise_dim() != 0 {
            return Err(Error::Noise("the deterministic step needs a GHN without noise".into()));
        }
        self.step(images, labels, archs, None, lr)
    }

    /// `Σ_arch [CE(ξ₁) + CE(ξ₂) + w·CoSim(logits(ξ₁), logits(ξ₂))]` followed
    /// by one Adam step.
    pub fn noise_ghn_training_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        archs: &[CompGraph],
        xi1: &[f32],
        xi2: &[f32],
        lr: f32,
    ) -> Result<(StepStats, Vec<Option<Tensor<f32>>>)> {
        check_noise(&self.model, Some(xi1))?;
        check_noise(&self.model, Some(xi2))?;
        let (mut stats, g) = self.step(images, labels, archs, Some((xi1, xi2)), lr)?;
        stats.degenerate_noise = xi1 == xi2;
        Ok((stats, g))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhnTrainConfig {
    pub batch_size: usize,
    pub archs: Vec<String>,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub lr: f32,
    /// `(fraction of total steps, factor)` learning-rate milestones.
    pub milestones: Vec<(f64, f32)>,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub rounds: usize,
    pub sim_weight: f32,
    pub num_classes: usize,
    pub seed: u64,
    /// Architectures are always accumulated sequentially; the flag is
    /// recorded for provenance.
    pub strict_determinism: bool,
}

impl GhnTrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            batch_size: 64,
            archs: vec!["resnet14".into(), "resnet20".into(), "resnet26".into()],
            epochs: 3,
            max_steps: None,
            lr: 1e-3,
            milestones: vec![(0.5, 0.1), (2.0 / 3.0, 0.1)],
            hidden: 32,
            decoder_hidden: 32,
            rounds: 1,
            sim_weight: 0.1,
            num_classes: 2,
            seed,
            strict_determinism: true,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            epochs: 30,
            hidden: 128,
            decoder_hidden: 64,
            sim_weight: 1.0,
            num_classes: 10,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.archs.is_empty() {
            return bad("at least one training architecture is required");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("milestones must be strictly increasing");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.hidden <= ATTR_DIMS {
            return bad("hidden must exceed 4");
        }
        for a in &self.archs {
            resnet_from_name(a, self.num_classes)?;
        }
        Ok(())
    }

    fn schedule(&self, total: usize) -> LrSchedule {
        LrSchedule::Milestones {
            milestones: self
                .milestones
                .iter()
                .map(|&(f, m)| (((total as f64) * f).round() as usize, m))
                .collect(),
        }
    }
}

pub struct GhnTrainOutcome {
    pub model: GhnModel,
    /// `(step, loss, xent1, xent2, simloss)`.
    pub log: Vec<StepStats>,
    /// Model snapshots taken when the learning rate drops.
    pub snapshots: Vec<(usize, GhnModel)>,
}

impl GhnTrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss,xent1,xent2,simloss\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, r) in self.log.iter().enumerate() {
            s.push_str(&format!("{},{},{},{},{}\n", i + 1, r.loss, r.xent1, opt(r.xent2), opt(r.simloss)));
        }
        s
    }
}

/// Trains a GHN of `variant` on `data` with all architectures in every
/// step. ξ₁, ξ₂ are redrawn every step and shared across architectures.
pub fn train_ghn(
    cfg: &GhnTrainConfig,
    data: &LabeledDataset,
    variant: GhnVariant,
    mut progress: Option<&mut dyn Write>,
) -> Result<GhnTrainOutcome> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::TooFewSamples {
            have: data.len(),
            batch: cfg.batch_size,
        });
    }
    let archs = cfg
        .archs
        .iter()
        .map(|a| resnet_from_name(a, cfg.num_classes))
        .collect::<Result<Vec<_>>>()?;
    let model = GhnModel::new(variant, cfg.hidden, cfg.decoder_hidden, cfg.rounds, derive_seed(cfg.seed, 1))?;
    let mut trainer = GhnTrainer::new(model, cfg.sim_weight);
    let batches = data.len() / cfg.batch_size;
    let total = (batches * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));
    let schedule = cfg.schedule(total);
    let mut noise = rng(derive_seed(cfg.seed, 2));
    let mut log = Vec::with_capacity(total);
    let mut snapshots = Vec::new();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let order = permutation(&mut rng(derive_seed(cfg.seed, 100 + epoch as u64)), data.len());
        for b in 0..batches {
            if step >= total {
                break 'outer;
            }
            let lr = schedule.rate(cfg.lr, step);
            if step > 0 && lr != schedule.rate(cfg.lr, step - 1) {
                snapshots.push((step, trainer.model.clone()));
            }
            let (x, y) = data.batch(&order[b * cfg.batch_size..(b + 1) * cfg.batch_size]);
            let res = match variant {
                GhnVariant::Ghn => trainer.ghn_training_step(&x, &y, &archs, lr),
                GhnVariant::NoiseGhn => {
                    let xi1 = standard_normal_vec(&mut noise, NOISE_DIM);
                    let xi2 = standard_normal_vec(&mut noise, NOISE_DIM);
                    trainer.noise_ghn_training_step(&x, &y, &archs, &xi1, &xi2, lr)
                }
            };
            let (stats, _) = res.map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step },
                e => e,
            })?;
            if let Some(w) = progress.as_deref_mut() {
                writeln!(w, "step {} loss {:.4}", step + 1, stats.loss).ok();
            }
            log.push(stats);
            step += 1;
        }
    }
    Ok(GhnTrainOutcome {
        model: trainer.model,
        log,
        snapshots,
    })
}
