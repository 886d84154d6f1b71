//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Exact properties are checked against independent
//! oracles; directional claims run the desk-scale experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use initforge::archspace::{enumerate_params, resnet_from_name, CompGraph};
use initforge::data::{synthetic_textures, Domain, LabeledDataset, Split};
use initforge::evalkit::{
    corrupt, ece, ensemble_predict, median, median_steps, pairwise_similarity, sample_ensembles, steps_to_threshold,
    train_from_init, transfer_config, transfer_eval, CorruptionKind, EnsembleRule, SimilarityKind,
};
use initforge::globalinit::{ghn_forward, sample_noise, train_ghn, GhnModel, GhnTrainConfig, GhnVariant};
use initforge::harvest::{assemble_weight_dataset, filter_low_norm, Checkpoint, SliceSet};
use initforge::localinit::baseline::{baseline_init, BaselineScheme};
use initforge::localinit::vae::{kl_diag_gaussian, neg_elbo_with_grads, param_shapes, GaussianPosterior};
use initforge::localinit::vq::{vq_losses, vq_quantize, Codebook};
use initforge::localinit::{initialize_network_local, train_registry, LocalKind, LocalTrainConfig};
use initforge::rng::{normal_tensor, rng, Rng};
use initforge::tensor::Tensor;
use initforge::train::{evaluate, Cadence, TrainConfig};
use initforge::weights::{Network, WeightSet};
use rand::Rng as _;
use statrs::distribution::{Binomial, DiscreteCDF};

type Outcome = (bool, String);

fn main() {
    let t0 = Instant::now();
    let mut desk = Desk::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Desk) -> Outcome>)> = vec![
        ("shape audit", Box::new(|_| shape_audit())),
        ("ECE oracle equivalence", Box::new(|_| ece_oracle())),
        ("KL closed form vs Monte Carlo", Box::new(|_| kl_monte_carlo())),
        ("ELBO gradient check", Box::new(|_| elbo_gradients())),
        ("VQ nearest neighbour and losses", Box::new(|_| vq_property())),
        ("l2 filter", Box::new(|_| l2_filter())),
        ("desk convergence ordering", Box::new(convergence_ordering)),
        ("instant performance", Box::new(instant_performance)),
        ("diversity ordering", Box::new(diversity_ordering)),
        ("calibration trend", Box::new(calibration_trend)),
        ("CLI determinism", Box::new(|_| cli_determinism())),
        ("transfer trend", Box::new(transfer_trend)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = check(&mut desk);
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {:<34} {}  ({:.1}s) {detail}",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of 12 passed in {:.0}s", 12 - failed, t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn shapes_match(ws: &WeightSet, g: &CompGraph) -> (usize, usize) {
    let specs = enumerate_params(g);
    let ok = specs
        .iter()
        .enumerate()
        .filter(|(i, s)| ws.specs.get(*i) == Some(s) && ws.tensors.get(*i).map(|t| t.shape()) == Some(&s.shape[..]))
        .count();
    (ok, specs.len().max(ws.tensors.len()))
}

/// Local registries for the audit are fitted to a bounded sample of slices
/// of one He-initialised network per architecture; only shapes matter here.
fn audit_registry(g: &CompGraph, kind: LocalKind) -> initforge::localinit::LocalInitRegistry {
    let ck = Checkpoint {
        run_id: 0,
        network: Network::fresh(baseline_init(g, BaselineScheme::He, 0)),
        config: TrainConfig::standard(1, 0),
        val_acc: 0.0,
    };
    let mut wds = assemble_weight_dataset(&[ck], g, 0.05).unwrap();
    for set in wds.per_layer.values_mut() {
        let n = set.len().min(256);
        set.slices = Tensor::new(vec![n, 3, 3], set.slices.data()[..n * 9].to_vec());
    }
    let mut cfg = LocalTrainConfig::default();
    cfg.vae.epochs = 1;
    cfg.vqvae.epochs = 1;
    cfg.vqvae.codebook_size = 16;
    cfg.vae.batch_size = 32;
    cfg.vqvae.batch_size = 32;
    train_registry(&wds, kind, &cfg, 0).unwrap()
}

fn shape_audit() -> Outcome {
    let archs = ["resnet8", "resnet14", "resnet20", "resnet32", "resnet44", "resnet56"];
    let graphs: Vec<CompGraph> = archs.iter().map(|a| resnet_from_name(a, 10).unwrap()).collect();
    let registries: Vec<_> = graphs
        .iter()
        .map(|g| [LocalKind::Vae, LocalKind::Vqvae].map(|k| audit_registry(g, k)))
        .collect();
    let ghn = GhnModel::new(GhnVariant::Ghn, 32, 32, 1, 0).unwrap();
    let noise = GhnModel::new(GhnVariant::NoiseGhn, 32, 32, 1, 0).unwrap();
    let t = Instant::now();
    let (mut ok, mut total) = (0, 0);
    for (g, regs) in graphs.iter().zip(&registries) {
        let mut sets = vec![
            ghn_forward(g, &ghn, None).unwrap(),
            ghn_forward(g, &noise, sample_noise(&noise, 0).as_deref()).unwrap(),
        ];
        for r in regs {
            sets.push(initialize_network_local(g, r, 0).unwrap());
        }
        for ws in &sets {
            let (a, b) = shapes_match(ws, g);
            ok += a;
            total += b;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        ok == total && secs < 30.0,
        format!("{ok}/{total} ParamSpecs exact over 6 depths x 4 generators, generation {secs:.1}s"),
    )
}

fn random_probs(r: &mut Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        match r.random_range(0..4) {
            // rows on bucket edges: tenths that sum to one
            0 => {
                let mut row = vec![0.0; c];
                let mut left = 10;
                for v in row.iter_mut().take(c - 1) {
                    let k = r.random_range(0..=left);
                    *v = k as f64 / 10.0;
                    left -= k;
                }
                row[c - 1] = left as f64 / 10.0;
                data.extend(row);
            }
            1 => {
                let mut row = vec![0.0; c];
                row[r.random_range(0..c)] = 1.0;
                data.extend(row);
            }
            _ => {
                let z: Vec<f64> = (0..c).map(|_| r.random_range(-4.0..4.0)).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                data.extend(e.iter().map(|v| v / s));
            }
        }
    }
    Tensor::new(vec![n, c], data)
}

/// Bucket-by-bucket scan over all samples, written independently of the
/// library's single-pass binning.
fn ece_brute_force(p: &Tensor<f64>, labels: &[usize], s: usize) -> f64 {
    let (n, c) = (p.shape()[0], p.shape()[1]);
    let conf_pred: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let row = &p.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            (row[best], best)
        })
        .collect();
    let mut total = 0.0;
    for b in 0..s {
        let (lo, hi) = (b as f64 / s as f64, (b + 1) as f64 / s as f64);
        let members: Vec<usize> = (0..n)
            .filter(|&i| {
                let q = conf_pred[i].0;
                (q > lo || (b == 0 && q >= 0.0)) && q <= hi
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| conf_pred[i].1 == labels[i]).count() as f64 / m;
        let conf = members.iter().map(|&i| conf_pred[i].0).sum::<f64>() / m;
        total += m / n as f64 * (acc - conf).abs();
    }
    total
}

fn ece_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..=500);
        let c = r.random_range(2..=10);
        let p = random_probs(&mut r, n, c);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        worst = worst.max((ece(&p, &labels, 10).unwrap() - ece_brute_force(&p, &labels, 10)).abs());
    }
    let n = 200;
    let labels: Vec<usize> = (0..n).map(|i| i % 7).collect();
    let confident = Tensor::from_fn(&[n, 7], |k| if k % 7 == labels[k / 7] { 1.0 } else { 0.0 });
    let zero = ece(&confident, &labels, 10).unwrap();
    (
        worst <= 1e-12 && zero == 0.0,
        format!("max |lib - oracle| {worst:.2e} over 1000 sets; confident-correct ECE {zero}"),
    )
}

/// Pairs are drawn with 4 to 8 dimensions and means in [-2, 2] so that the
/// Monte Carlo standard error at 1e5 samples sits well below 1% of the KL.
fn kl_monte_carlo() -> Outcome {
    let mut r = rng(3);
    let (mut worst, mut worst_z, mut min_kl): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for _ in 0..100 {
        let d = r.random_range(4..=8);
        let mut g = || GaussianPosterior {
            mean: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
            log_variance: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let (q, p) = (g(), g());
        let closed = kl_diag_gaussian(&q, &p).unwrap();
        let log_density = |dist: &GaussianPosterior, z: &[f64]| -> f64 {
            z.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let var = dist.log_variance[i].exp();
                    -0.5 * ((2.0 * std::f64::consts::PI).ln() + dist.log_variance[i] + (v - dist.mean[i]).powi(2) / var)
                })
                .sum()
        };
        let samples = 100_000;
        let (mut acc, mut acc2) = (0.0, 0.0);
        let mut z = vec![0.0; d];
        for _ in 0..samples {
            let e: Tensor<f64> = normal_tensor(&mut r, &[d], 1.0);
            for i in 0..d {
                z[i] = q.mean[i] + (0.5 * q.log_variance[i]).exp() * e.data()[i];
            }
            let v = log_density(&q, &z) - log_density(&p, &z);
            acc += v;
            acc2 += v * v;
        }
        let n = samples as f64;
        let mc = acc / n;
        let se = ((acc2 / n - mc * mc) / n).sqrt();
        worst = worst.max((mc - closed).abs() / closed.abs());
        worst_z = worst_z.max((mc - closed).abs() / se);
        min_kl = min_kl.min(closed);
    }
    (
        worst < 0.01,
        format!(
            "max relative error {worst:.4} over 100 pairs, 1e5 samples each (smallest KL {min_kl:.2}, max deviation {worst_z:.1} standard errors)"
        ),
    )
}

fn elbo_gradients() -> Outcome {
    let (d, h, n) = (2, 4, 6);
    let mut r = rng(4);
    let params: Vec<Tensor<f64>> = param_shapes(d, h).iter().map(|s| normal_tensor(&mut r, s, 0.5)).collect();
    let x: Tensor<f64> = normal_tensor(&mut r, &[n, 9], 1.0);
    let eps: Tensor<f64> = normal_tensor(&mut r, &[n, d], 1.0);
    let (_, grads) = neg_elbo_with_grads(&params, &x, &eps, d);
    let step = 1e-6;
    let (mut worst, mut count): (f64, usize) = (0.0, 0);
    for (t, g) in grads.iter().enumerate() {
        for j in 0..params[t].len() {
            let at = |delta: f64| {
                let mut p = params.clone();
                p[t].data_mut()[j] += delta;
                neg_elbo_with_grads(&p, &x, &eps, d).0
            };
            let numeric = (at(step) - at(-step)) / (2.0 * step);
            let analytic = g.data()[j];
            let scale = analytic.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((analytic - numeric).abs() / scale);
            count += 1;
        }
    }
    (
        worst < 1e-4,
        format!("{count} parameters, max relative error {worst:.2e} (latent 2, hidden 4)"),
    )
}

fn vq_property() -> Outcome {
    let mut r = rng(5);
    let (k, dim, m) = (64, 4, 10_000);
    let cb = Codebook::new(normal_tensor(&mut r, &[k, dim], 1.0));
    let z: Tensor<f32> = normal_tensor(&mut r, &[m, dim], 1.2);
    let (zq, idx) = vq_quantize(&z, &cb).unwrap();
    let mut mismatches = 0;
    for i in 0..m {
        let row = z.row(i);
        let dist = |e: usize| -> f64 {
            cb.entries.row(e).iter().zip(row).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
        };
        let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        if best != idx[i] || zq.row(i) != cb.entries.row(best) {
            mismatches += 1;
        }
    }
    let ze = Tensor::<f32>::zeros(&[9, 4]);
    let zq_hand = Tensor::<f32>::full(&[9, 4], 1.0);
    let losses = vq_losses(&ze, &zq_hand, 0.25).unwrap();
    (
        mismatches == 0 && losses == (36.0, 9.0),
        format!("{mismatches} mismatches over {m} inputs; hand case {losses:?}"),
    )
}

fn l2_filter() -> Outcome {
    let mut r = rng(6);
    let mut bad = 0;
    for _ in 0..10_000 {
        let n = r.random_range(1..=120);
        let mut data: Vec<f32> = Vec::with_capacity(n * 9);
        for i in 0..n {
            if i > 0 && r.random_bool(0.2) {
                let j = r.random_range(0..i);
                let copy = data[j * 9..j * 9 + 9].to_vec();
                data.extend(copy);
            } else {
                let s = r.random_range(0.0..2.0f32);
                data.extend((0..9).map(|_| r.random_range(-1.0..1.0f32) * s));
            }
        }
        let set = SliceSet {
            layer_id: 0,
            slices: Tensor::new(vec![n, 3, 3], data),
            source_run_ids: vec![0],
        };
        let kept = filter_low_norm(&set, 0.05).unwrap();
        let norm = |s: &[f32]| s.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let mut removed = Vec::new();
        let mut kept_norms = Vec::new();
        let mut j = 0;
        for i in 0..n {
            if j < kept.len() && kept.slice(j) == set.slice(i) {
                kept_norms.push(norm(set.slice(i)));
                j += 1;
            } else {
                removed.push(norm(set.slice(i)));
            }
        }
        let min_kept = kept_norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_removed = removed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = n - (0.05 * n as f64).floor() as usize;
        if kept.len() != expected || j != kept.len() || min_kept < max_removed {
            bad += 1;
        }
    }
    (bad == 0, format!("{bad} violations over 10000 fuzzed sets"))
}

/// Shared desk state, built lazily: the 8k two-class dataset, trained
/// GHN and Noise GHN, and pools of networks trained from each init.
struct Desk {
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
    g: CompGraph,
    models: BTreeMap<&'static str, GhnModel>,
    pools: BTreeMap<&'static str, Vec<(Network, Option<usize>)>>,
}

const POOL: u64 = 8;
const METHODS: [&str; 3] = ["he", "ghn", "noise_ghn"];

impl Desk {
    fn new() -> Self {
        let ds = synthetic_textures(8000, Domain::Source, 0);
        let (train, val, test) = ds.split_70_10_20(0);
        Self {
            train,
            val,
            test,
            g: resnet_from_name("resnet8", 2).unwrap(),
            models: BTreeMap::new(),
            pools: BTreeMap::new(),
        }
    }

    fn model(&mut self, v: GhnVariant) -> &GhnModel {
        if !self.models.contains_key(v.name()) {
            let m = train_ghn(&GhnTrainConfig::desk(1), &self.train, v, None).unwrap().model;
            self.models.insert(v.name(), m);
        }
        &self.models[v.name()]
    }

    fn init(&mut self, method: &str, seed: u64) -> WeightSet {
        match method {
            "he" => baseline_init(&self.g, BaselineScheme::He, seed),
            "ghn" => {
                let m = self.model(GhnVariant::Ghn).clone();
                ghn_forward(&self.g, &m, None).unwrap()
            }
            _ => {
                let m = self.model(GhnVariant::NoiseGhn).clone();
                ghn_forward(&self.g, &m, sample_noise(&m, seed).as_deref()).unwrap()
            }
        }
    }

    /// `POOL` networks per method, trained 2 epochs with evaluations every
    /// 5 batches, with their steps to 0.5 validation accuracy.
    fn pool(&mut self, method: &'static str) -> &[(Network, Option<usize>)] {
        if !self.pools.contains_key(method) {
            let mut pool = Vec::new();
            for s in 0..POOL {
                let cfg = TrainConfig {
                    cadence: Cadence::Batches(5),
                    ..TrainConfig::standard(2, s)
                };
                let ws = self.init(method, s);
                let (net, t) = train_from_init(ws, &self.g, &cfg, &self.train, &self.val).unwrap();
                pool.push((net, steps_to_threshold(&t, &[0.5]).unwrap()[0].1));
            }
            self.pools.insert(method, pool);
        }
        &self.pools[method]
    }
}

fn convergence_ordering(d: &mut Desk) -> Outcome {
    let med: Vec<Option<f64>> = METHODS
        .iter()
        .map(|m| median_steps(&d.pool(m)[..5].iter().map(|p| p.1).collect::<Vec<_>>()))
        .collect();
    let v = |x: Option<f64>| x.unwrap_or(f64::INFINITY);
    let (he, ghn, noise) = (v(med[0]), v(med[1]), v(med[2]));
    (
        ghn <= noise && noise < he && ghn < he,
        format!("median evals to 0.50 over 5 seeds: GHN {ghn}, Noise GHN {noise}, He {he}"),
    )
}

fn instant_performance(d: &mut Desk) -> Outcome {
    let g = d.g.clone();
    let ws = ghn_forward(&g, d.model(GhnVariant::Ghn), None).unwrap();
    let net = Network::fresh(ws);
    let acc = evaluate(&g, &net, &d.val).unwrap();
    let n = d.val.len() as u64;
    let k = (acc * n as f64).round() as u64;
    let p = Binomial::new(0.5, n).unwrap().sf(k - 1);
    (
        p < 0.01,
        format!("held-out resnet8, 0 steps: val acc {acc:.4} ({k}/{n}), one-sided binomial p = {p:.2e}"),
    )
}

fn diversity_ordering(d: &mut Desk) -> Outcome {
    let mut cos = BTreeMap::new();
    for m in ["ghn", "noise_ghn"] {
        let g = d.g.clone();
        let test = d.test.clone();
        let members: Vec<(&Network, &CompGraph)> = d.pool(m)[..5].iter().map(|p| (&p.0, &g)).collect();
        cos.insert(m, pairwise_similarity(&members, &test, SimilarityKind::LogitCosine).unwrap().mean_upper);
    }
    let ghn_same = d.init("ghn", 0) == d.init("ghn", 1);
    let noise: Vec<WeightSet> = (0..5).map(|s| d.init("noise_ghn", s)).collect();
    let mut all_differ = true;
    for i in 0..noise.len() {
        for j in i + 1..noise.len() {
            all_differ &= noise[i] != noise[j];
        }
    }
    (
        cos["noise_ghn"] < cos["ghn"] && ghn_same && all_differ,
        format!(
            "logit cosine Noise GHN {:.4} vs GHN {:.4}; GHN inits identical {ghn_same}; Noise GHN pairs all differ {all_differ}",
            cos["noise_ghn"], cos["ghn"]
        ),
    )
}

fn calibration_trend(d: &mut Desk) -> Outcome {
    let idx: Vec<usize> = (0..POOL as usize).collect();
    let specs = sample_ensembles(&idx, 5, 10, 7).unwrap();
    let g = d.g.clone();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in CorruptionKind::ALL {
        let c = corrupt(&d.test, kind, 5, 1).unwrap();
        let mut med = BTreeMap::new();
        for m in ["ghn", "noise_ghn"] {
            let pool = d.pool(m);
            let eces: Vec<f64> = specs
                .iter()
                .map(|s| {
                    let members: Vec<Network> = s.members.iter().map(|&i| pool[i].0.clone()).collect();
                    let p = ensemble_predict(&members, &g, &c.images, EnsembleRule::MeanProbability).unwrap();
                    ece(&p.cast(), &c.labels, 10).unwrap()
                })
                .collect();
            med.insert(m, median(&eces).unwrap());
        }
        ok &= med["noise_ghn"] <= med["ghn"];
        parts.push(format!("{} {:.4}<={:.4}", kind.name(), med["noise_ghn"], med["ghn"]));
    }
    (ok, format!("severity 5, median ECE Noise GHN vs GHN: {}", parts.join(", ")))
}

const CLI_CONFIG: &str = r#"
[data]
n = 400
shifted_n = 300

[harvest]
population = 2

[harvest.train]
epochs = 1
batch_size = 32
milestones = []

[local.vae]
epochs = 2
batch_size = 32

[local.vqvae]
epochs = 1
batch_size = 32

[ghn]
epochs = 1
max_steps = 3
batch_size = 8
milestones = []

[evaluate]
seeds = 2
pool = 2
ensemble_k = 2
ensemble_n = 2
similarity_members = 2
corruptions = ["contrast"]
transfer_train = 100
transfer_test = 100

[evaluate.train]
epochs = 1
batch_size = 32
milestones = []
cadence = { batches = 2 }

[evaluate.transfer]
epochs = 1
batch_size = 32
milestones = []
"#;

fn run_pipeline(cfg: &Path, out: &Path) -> Result<(), String> {
    let mut cmds: Vec<Vec<String>> = vec![vec!["harvest".into()]];
    for k in ["vae", "vqvae", "ghn", "noise_ghn"] {
        cmds.push(vec!["train-gen".into(), "--kind".into(), k.into()]);
    }
    for m in ["he", "xavier", "vae", "vqvae", "ghn", "noise_ghn"] {
        cmds.push(["init", "--arch", "resnet8", "--method", m].map(String::from).to_vec());
    }
    for e in ["convergence", "accuracy", "ensemble_ood", "similarity", "transfer"] {
        cmds.push(vec!["evaluate".into(), "--experiment".into(), e.into()]);
    }
    cmds.push(vec!["report".into()]);
    for c in cmds {
        let o = Command::new(env!("CARGO_BIN_EXE_initforge"))
            .args(&c)
            .args(["--seed", "3", "--config"])
            .arg(cfg)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{c:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(files(&p));
        } else {
            v.push(p);
        }
    }
    v.sort();
    v
}

/// Manifests differ legitimately in wall-clock time and output paths.
fn comparable(p: &Path, root: &Path) -> Vec<u8> {
    let bytes = std::fs::read(p).unwrap();
    let name = p.file_name().unwrap().to_string_lossy();
    if !name.starts_with("manifest_") {
        return bytes;
    }
    let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_secs");
    serde_json::to_string(&v).unwrap().replace(&*root.to_string_lossy(), "<out>").into_bytes()
}

fn cli_determinism() -> Outcome {
    let base = std::env::temp_dir().join(format!("initforge-acceptance-{}", std::process::id()));
    std::fs::remove_dir_all(&base).ok();
    std::fs::create_dir_all(&base).unwrap();
    let cfg = base.join("tiny.toml");
    std::fs::write(&cfg, CLI_CONFIG).unwrap();
    let (a, b) = (base.join("a"), base.join("b"));
    for out in [&a, &b] {
        if let Err(e) = run_pipeline(&cfg, out) {
            return (false, e);
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    let rel = |v: &[PathBuf], root: &Path| -> Vec<PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    if rel(&fa, &a) != rel(&fb, &b) {
        return (false, "runs produced different file sets".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| comparable(x, &a) != comparable(y, &b))
        .map(|(x, _)| x.strip_prefix(&a).unwrap().display().to_string())
        .collect();
    std::fs::remove_dir_all(&base).ok();
    (
        differing.is_empty(),
        format!(
            "19 commands run twice, {} artifacts compared, differing: {differing:?}",
            fa.len()
        ),
    )
}

fn transfer_trend(d: &mut Desk) -> Outcome {
    let shifted = synthetic_textures(3000, Domain::Shifted, 11);
    let parts = shifted.stratified_split(&[1000.0 / 3000.0, 2000.0 / 3000.0], 0);
    let small = shifted.subset(&parts[0], Split::Train);
    let test = shifted.subset(&parts[1], Split::Test);
    let g = d.g.clone();
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in 0..5 {
        for m in ["he", "noise_ghn"] {
            let ws = d.init(m, s);
            acc.entry(m).or_default().push(transfer_eval(ws, &g, &small, &test, &transfer_config(s)).unwrap());
        }
    }
    let (he, noise) = (median(&acc["he"]).unwrap(), median(&acc["noise_ghn"]).unwrap());
    (
        noise >= he,
        format!("40 epochs on 1000 shifted samples, median test acc Noise GHN {noise:.4} vs He {he:.4}"),
    )
}
