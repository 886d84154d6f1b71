//! Measurement protocol: training from an initialisation, steps to
//! accuracy thresholds, calibration, ensembles, pairwise diversity,
//! synthetic corruptions and small-data transfer.

use serde::{Deserialize, Serialize};

use crate::archspace::CompGraph;
use crate::autograd::softmax;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::globalinit::similarity_loss;
use crate::nn::{accuracy, argmax_rows, predict_logits};
use crate::rng::{permutation, rng};
use crate::tensor::Tensor;
use crate::train::{evaluate, train_network, TrainConfig, Trajectory};
use crate::weights::{Network, WeightSet};

/// Trains a fresh network holding `ws`; the learning-rate schedule comes
/// from `cfg` alone, so every initialisation sees the same one.
pub fn train_from_init(
    ws: WeightSet,
    g: &CompGraph,
    cfg: &TrainConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(Network, Trajectory)> {
    ws.check(g)?;
    let out = train_network(g, Network::fresh(ws), cfg, train, val)?;
    Ok((out.final_net, out.trajectory))
}

/// First 1-based evaluation index whose accuracy reaches each threshold.
pub fn steps_to_threshold(t: &Trajectory, thresholds: &[f64]) -> Result<Vec<(f64, Option<usize>)>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("thresholds must be sorted ascending".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&th| (th, t.points.iter().find(|p| p.1 >= th).map(|p| p.0)))
        .collect())
}

/// Confidence buckets `(i/s, (i+1)/s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub s: usize,
    pub counts: Vec<usize>,
    /// Fraction correct per bucket (0 for empty buckets).
    pub accuracy: Vec<f64>,
    /// Mean confidence per bucket (0 for empty buckets).
    pub confidence: Vec<f64>,
}

fn bucket(p: f64, s: usize) -> usize {
    let sf = s as f64;
    let mut b = ((p * sf).ceil() as isize - 1).clamp(0, s as isize - 1) as usize;
    while b > 0 && p <= b as f64 / sf {
        b -= 1;
    }
    while b + 1 < s && p > (b + 1) as f64 / sf {
        b += 1;
    }
    b
}

fn confidences(probs: &Tensor<f64>, labels: &[usize]) -> Result<Vec<(f64, bool)>> {
    let sh = probs.shape();
    if sh.len() != 2 || sh[0] != labels.len() {
        return Err(Error::Dimension(format!("probabilities {sh:?} for {} labels", labels.len())));
    }
    let c = sh[1];
    probs
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            if y >= c {
                return Err(Error::LabelRange { label: y, classes: c });
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Dimension(format!("probability row sums to {total}")));
            }
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            Ok((row[best], best == y))
        })
        .collect()
}

impl CalibrationBins {
    pub fn compute(probs: &Tensor<f64>, labels: &[usize], s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config("at least one bucket is required".into()));
        }
        let mut counts = vec![0; s];
        let mut correct = vec![0.0; s];
        let mut conf = vec![0.0; s];
        for (p, ok) in confidences(probs, labels)? {
            let b = bucket(p, s);
            counts[b] += 1;
            conf[b] += p;
            if ok {
                correct[b] += 1.0;
            }
        }
        let per = |v: Vec<f64>| -> Vec<f64> {
            v.iter()
                .zip(&counts)
                .map(|(x, &n)| if n == 0 { 0.0 } else { x / n as f64 })
                .collect()
        };
        Ok(Self {
            s,
            accuracy: per(correct),
            confidence: per(conf),
            counts,
        })
    }

    pub fn ece(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            return 0.0;
        }
        (0..self.s)
            .map(|i| self.counts[i] as f64 / n as f64 * (self.accuracy[i] - self.confidence[i]).abs())
            .sum()
    }
}

/// Expected calibration error with `s` equal-width confidence buckets;
/// confidence is the largest class probability.
pub fn ece(probs: &Tensor<f64>, labels: &[usize], s: usize) -> Result<f64> {
    Ok(CalibrationBins::compute(probs, labels, s)?.ece())
}

/// How member predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    #[default]
    MeanProbability,
    MeanLogit,
}

/// Averaged class probabilities `[N, C]` of an ensemble.
pub fn ensemble_predict(members: &[Network], g: &CompGraph, x: &Tensor<f32>, rule: EnsembleRule) -> Result<Tensor<f32>> {
    let logits = members
        .iter()
        .map(|m| {
            m.weights.check(g)?;
            predict_logits(g, m, x)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_logits(&logits, rule)
}

/// Combines per-member logits `[N, C]` into ensemble probabilities.
pub fn combine_logits(logits: &[Tensor<f32>], rule: EnsembleRule) -> Result<Tensor<f32>> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
    let member = |l: &Tensor<f32>| -> Result<Tensor<f64>> {
        if l.shape() != first.shape() {
            return Err(Error::Dimension(format!("member logits {:?} vs {:?}", l.shape(), first.shape())));
        }
        let l = l.cast::<f64>();
        Ok(match rule {
            EnsembleRule::MeanProbability => softmax(&l),
            EnsembleRule::MeanLogit => l,
        })
    };
    let mut acc = member(first)?;
    for l in rest {
        acc.add_assign(&member(l)?);
    }
    let k = logits.len() as f64;
    let mean = acc.map(|v| v / k);
    Ok(match rule {
        EnsembleRule::MeanProbability => mean,
        EnsembleRule::MeanLogit => softmax(&mean),
    }
    .cast())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<usize>,
    pub seed: u64,
}

/// `n` ensembles of `k` distinct members drawn uniformly from `pool`.
pub fn sample_ensembles(pool: &[usize], k: usize, n: usize, seed: u64) -> Result<Vec<EnsembleSpec>> {
    if k == 0 || pool.len() < k {
        return Err(Error::Config(format!("cannot draw {k} members from a pool of {}", pool.len())));
    }
    let mut r = rng(seed);
    Ok((0..n)
        .map(|_| {
            let mut members: Vec<usize> = permutation(&mut r, pool.len())[..k].iter().map(|&i| pool[i]).collect();
            members.sort_unstable();
            EnsembleSpec { members, seed }
        })
        .collect())
}

pub fn prediction_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} predictions", a.len(), b.len())));
    }
    Ok(accuracy(a, b))
}

/// Mean cosine similarity of matching logit rows (zero rows count as 0).
pub fn logit_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    Ok(similarity_loss(a, b)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    PredictionAgreement,
    LogitCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    pub values: Vec<Vec<f64>>,
    /// Mean over the strict upper triangle.
    pub mean_upper: f64,
}

impl SimilarityMatrix {
    pub fn from_pairs(kind: SimilarityKind, m: usize, mut pair: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config("similarity needs at least two models".into()));
        }
        let mut values = vec![vec![1.0; m]; m];
        let mut total = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                let v = pair(i, j)?;
                values[i][j] = v;
                values[j][i] = v;
                total += v;
            }
        }
        Ok(Self {
            kind,
            values,
            mean_upper: total / (m * (m - 1) / 2) as f64,
        })
    }
}

/// Pairwise similarity of the models' outputs on `data`.
pub fn pairwise_similarity(models: &[(&Network, &CompGraph)], data: &LabeledDataset, kind: SimilarityKind) -> Result<SimilarityMatrix> {
    let logits = models
        .iter()
        .map(|(n, g)| predict_logits(g, n, &data.images))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Vec<usize>> = logits.iter().map(argmax_rows).collect();
    SimilarityMatrix::from_pairs(kind, models.len(), |i, j| match kind {
        SimilarityKind::PredictionAgreement => prediction_agreement(&preds[i], &preds[j]),
        SimilarityKind::LogitCosine => logit_cosine(&logits[i], &logits[j]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussNoise,
    Blur,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussNoise => "gauss_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Severity 1..5 parameter: noise σ, blur σ, contrast factor, or the
    /// side length of the downsampled grid.
    pub fn parameter(self, severity: usize) -> f64 {
        let t = match self {
            CorruptionKind::GaussNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::Blur => [0.4, 0.6, 0.8, 1.0, 1.3],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::Pixelate => [7.0, 6.0, 5.0, 4.0, 3.0],
        };
        t[severity - 1]
    }
}

fn blur_plane(p: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, clampi(x as isize + o, w))
                    } else {
                        (clampi(y as isize + o, h), x)
                    };
                    acc += kv * src[yy * w + xx] as f64;
                }
                out[y * w + x] = (acc / norm) as f32;
            }
        }
        out
    };
    pass(&pass(p, true), false)
}

fn pixelate_plane(p: &[f32], h: usize, w: usize, side: usize) -> Vec<f32> {
    let cell = |i: usize, n: usize| i * side / n;
    let mut sums = vec![0.0f64; side * side];
    let mut counts = vec![0usize; side * side];
    for y in 0..h {
        for x in 0..w {
            let c = cell(y, h) * side + cell(x, w);
            sums[c] += p[y * w + x] as f64;
            counts[c] += 1;
        }
    }
    (0..h * w)
        .map(|i| {
            let c = cell(i / w, h) * side + cell(i % w, w);
            (sums[c] / counts[c] as f64) as f32
        })
        .collect()
}

/// Label-preserving corruption at severity 1..5; outputs are clipped to
/// `[0, 1]`.
pub fn corrupt(data: &LabeledDataset, kind: CorruptionKind, severity: usize, seed: u64) -> Result<LabeledDataset> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside 1..=5")));
    }
    let a = kind.parameter(severity);
    let [c, h, w] = data.image_shape();
    let plane = h * w;
    let src = data.images.data();
    let mut out = Vec::with_capacity(src.len());
    let mut r = rng(seed);
    for img in src.chunks(c * plane) {
        match kind {
            CorruptionKind::GaussNoise => {
                let noise = crate::rng::standard_normal_vec(&mut r, img.len());
                out.extend(img.iter().zip(noise).map(|(&v, z)| v + a as f32 * z));
            }
            CorruptionKind::Contrast => {
                for p in img.chunks(plane) {
                    let m = p.iter().sum::<f32>() / plane as f32;
                    out.extend(p.iter().map(|&v| (v - m) * a as f32 + m));
                }
            }
            CorruptionKind::Blur => {
                for p in img.chunks(plane) {
                    out.extend(blur_plane(p, h, w, a));
                }
            }
            CorruptionKind::Pixelate => {
                let side = (a as usize * h.min(w)).div_ceil(8).clamp(1, h.min(w));
                for p in img.chunks(plane) {
                    out.extend(pixelate_plane(p, h, w, side));
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledDataset::new(
        Tensor::new(data.images.shape().to_vec(), out),
        data.labels.clone(),
        data.classes,
        data.split,
    )
}

/// Mean per-image L2 distance between two datasets of equal shape.
pub fn mean_distortion(a: &LabeledDataset, b: &LabeledDataset) -> f64 {
    let per = a.images.len() / a.len().max(1);
    a.images
        .data()
        .chunks(per)
        .zip(b.images.data().chunks(per))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// 40 epochs, rate halved after 20 and divided by five after 30.
pub fn transfer_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        milestones: vec![(20, 0.5), (30, 0.2)],
        dataset: "shifted".into(),
        ..TrainConfig::standard(40, seed)
    }
}

/// Fine-tunes `init` on the class-balanced `small_train` and returns the
/// accuracy on `test`.
pub fn transfer_eval(
    init: WeightSet,
    g: &CompGraph,
    small_train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let counts = small_train.class_counts();
    let (lo, hi) = (counts.iter().min().copied().unwrap_or(0), counts.iter().max().copied().unwrap_or(0));
    if hi - lo > 1 {
        return Err(Error::Config(format!("transfer set is not class-balanced: {counts:?}")));
    }
    init.check(g)?;
    if cfg.epochs == 0 {
        return evaluate(g, &Network::fresh(init), test);
    }
    let out = train_network(g, Network::fresh(init), cfg, small_train, test)?;
    Ok(out.final_val_acc)
}

/// Box-plot statistics with linearly interpolated quartiles and whiskers
/// at the most extreme points within 1.5 IQR of the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile_summary(values).map(|s| s.median)
}

pub fn quantile_summary(values: &[f64]) -> Option<QuantileSummary> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
    let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
    let inside: Vec<f64> = v.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    Some(QuantileSummary {
        n: v.len(),
        median: quantile(&v, 0.5),
        q1,
        q3,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: v.iter().copied().filter(|x| !(lo..=hi).contains(x)).collect(),
    })
}

/// Median of per-run step counts; unreached runs rank above every step,
/// so the median is `None` when it falls on them.
pub fn median_steps(steps: &[Option<usize>]) -> Option<f64> {
    if steps.is_empty() {
        return None;
    }
    let mut v: Vec<Option<usize>> = steps.to_vec();
    v.sort_by_key(|s| s.unwrap_or(usize::MAX));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        Some((v[n / 2 - 1]? + v[n / 2]?) as f64 / 2.0)
    }
}

pub fn trajectory_file_name(run: &str) -> String {
    format!("traj_{run}.csv")
}

pub fn eval_file_name(experiment: &str) -> String {
    format!("eval_{experiment}.json")
}
