//! Initialisation methods and the five evaluation experiments.

use std::path::Path;

use initforge::archspace::{resnet_from_name, CompGraph};
use initforge::data::{Domain, LabeledDataset, Split};
use initforge::evalkit::{
    combine_logits, corrupt, ece, median, median_steps, pairwise_similarity, quantile_summary, sample_ensembles,
    steps_to_threshold, train_from_init, trajectory_file_name, transfer_eval, SimilarityKind,
};
use initforge::globalinit::{ghn_forward, sample_noise, GhnModel, GhnVariant};
use initforge::localinit::baseline::{baseline_init, BaselineScheme};
use initforge::localinit::{initialize_network_local, LocalInitRegistry, LocalKind};
use initforge::nn::{accuracy, argmax_rows, predict_logits};
use initforge::train::{evaluate, TrainConfig};
use initforge::weights::{Network, WeightSet};
use serde_json::{json, Value};

use crate::config::Config;
use crate::manifest::Recorder;
use crate::{load_dataset, require, write_artifact, CliError, CliResult};

/// Generative models needed by a set of initialisation methods.
#[derive(Default)]
pub struct Initializer {
    ghn: Option<GhnModel>,
    noise_ghn: Option<GhnModel>,
    vae: Option<LocalInitRegistry>,
    vqvae: Option<LocalInitRegistry>,
}

impl Initializer {
    /// Loads what `methods` need from `dir`; a missing file is named in the
    /// error.
    pub fn load(methods: &[String], arch: &str, dataset: &str, dir: &Path, rec: &mut Recorder) -> CliResult<Self> {
        let mut me = Self::default();
        for m in methods {
            match m.as_str() {
                "he" | "xavier" => {}
                "ghn" | "noise_ghn" => {
                    let v = GhnVariant::parse(m).expect("known variant");
                    let p = require(&dir.join(GhnModel::file_name(v, dataset)), &format!("{m} model"))?;
                    let model = GhnModel::load(&p)?;
                    rec.inputs.push(p);
                    match v {
                        GhnVariant::Ghn => me.ghn = Some(model),
                        GhnVariant::NoiseGhn => me.noise_ghn = Some(model),
                    }
                }
                "vae" | "vqvae" => {
                    let k = LocalKind::parse(m).expect("known kind");
                    let p = require(
                        &dir.join(LocalInitRegistry::manifest_name(arch, k)),
                        &format!("{m} registry for {arch}"),
                    )?;
                    let reg = LocalInitRegistry::load(&p)?;
                    rec.inputs.push(p);
                    match k {
                        LocalKind::Vae => me.vae = Some(reg),
                        LocalKind::Vqvae => me.vqvae = Some(reg),
                    }
                }
                other => return Err(CliError::Config(format!("unknown initialisation method `{other}`"))),
            }
        }
        Ok(me)
    }

    /// Weights for `g` and, for the noise method, the ξ used.
    pub fn init(&self, method: &str, g: &CompGraph, seed: u64) -> CliResult<(WeightSet, Option<Vec<f32>>)> {
        let missing = || CliError::Missing(format!("no model loaded for method `{method}`"));
        Ok(match method {
            "he" => (baseline_init(g, BaselineScheme::He, seed), None),
            "xavier" => (baseline_init(g, BaselineScheme::Xavier, seed), None),
            "vae" => (initialize_network_local(g, self.vae.as_ref().ok_or_else(missing)?, seed)?, None),
            "vqvae" => (initialize_network_local(g, self.vqvae.as_ref().ok_or_else(missing)?, seed)?, None),
            "ghn" => (ghn_forward(g, self.ghn.as_ref().ok_or_else(missing)?, None)?, None),
            "noise_ghn" => {
                let m = self.noise_ghn.as_ref().ok_or_else(missing)?;
                let xi = sample_noise(m, seed);
                (ghn_forward(g, m, xi.as_deref())?, xi)
            }
            other => return Err(CliError::Config(format!("unknown initialisation method `{other}`"))),
        })
    }
}

pub const EXPERIMENTS: [&str; 5] = ["convergence", "accuracy", "ensemble_ood", "similarity", "transfer"];

struct Env<'a> {
    cfg: &'a Config,
    seed: u64,
    out: &'a Path,
    g: CompGraph,
    inits: Initializer,
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
}

impl Env<'_> {
    fn run_seeds(&self, n: usize) -> Vec<u64> {
        (0..n as u64).map(|i| self.seed + i).collect()
    }

    fn train_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg.evaluate.train.clone()
        }
    }

    fn trained(&self, method: &str, seed: u64) -> CliResult<(Network, initforge::train::Trajectory)> {
        let (ws, _) = self.inits.init(method, &self.g, seed)?;
        Ok(train_from_init(ws, &self.g, &self.train_cfg(seed), &self.train, &self.val)?)
    }
}

fn progress(msg: &str) {
    eprintln!("[initforge] {msg}");
}

/// Runs `experiment` and writes `eval_{experiment}.json` (plus trajectory
/// CSVs for convergence) into `out`.
pub fn run(experiment: &str, cfg: &Config, seed: u64, models: &Path, out: &Path, rec: &mut Recorder) -> CliResult<Value> {
    if !EXPERIMENTS.contains(&experiment) {
        return Err(CliError::Config(format!(
            "unknown experiment `{experiment}` (expected one of {EXPERIMENTS:?})"
        )));
    }
    let e = &cfg.evaluate;
    let classes = cfg.ghn.num_classes;
    let g = resnet_from_name(&e.arch, classes)?;
    let inits = Initializer::load(&e.methods, &e.arch, &cfg.data.name, models, rec)?;
    let data = load_dataset(&cfg.data.source, cfg.data.n, Domain::Source, cfg.data.seed)?;
    if data.classes != classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes, ghn.num_classes is {classes}",
            data.classes
        )));
    }
    let (train, val, test) = data.split_70_10_20(cfg.data.seed);
    let env = Env {
        cfg,
        seed,
        out,
        g,
        inits,
        train,
        val,
        test,
    };
    let body = match experiment {
        "convergence" => convergence(&env, rec)?,
        "accuracy" => accuracy_exp(&env)?,
        "ensemble_ood" => ensemble_ood(&env)?,
        "similarity" => similarity(&env)?,
        _ => transfer(&env)?,
    };
    let doc = json!({
        "experiment": experiment,
        "arch": e.arch,
        "dataset": cfg.data.name,
        "seed": seed,
        "methods": e.methods,
        "results": body,
    });
    let p = write_artifact(
        out,
        &initforge::evalkit::eval_file_name(experiment),
        &serde_json::to_vec_pretty(&doc)?,
    )?;
    rec.outputs.push(p);
    Ok(doc)
}

fn convergence(env: &Env, rec: &mut Recorder) -> CliResult<Value> {
    let th = &env.cfg.evaluate.thresholds;
    let mut per_method = serde_json::Map::new();
    for m in &env.cfg.evaluate.methods {
        let mut runs = Vec::new();
        let mut steps: Vec<Vec<Option<usize>>> = vec![Vec::new(); th.len()];
        let mut first = Vec::new();
        for s in env.run_seeds(env.cfg.evaluate.seeds) {
            progress(&format!("convergence {m} seed {s}"));
            let (_, t) = env.trained(m, s)?;
            let p = write_artifact(env.out, &trajectory_file_name(&format!("{m}_{s}")), t.to_csv().as_bytes())?;
            rec.outputs.push(p);
            let st = steps_to_threshold(&t, th)?;
            for (i, (_, v)) in st.iter().enumerate() {
                steps[i].push(*v);
            }
            first.push(t.points[0].1);
            runs.push(json!({
                "seed": s,
                "first_val_acc": t.points[0].1,
                "final_val_acc": t.points.last().map(|p| p.1),
                "steps": st.iter().map(|(a, b)| json!({"threshold": a, "step": b})).collect::<Vec<_>>(),
            }));
        }
        per_method.insert(
            m.clone(),
            json!({
                "runs": runs,
                "median_steps": th.iter().zip(&steps).map(|(t, s)| json!({"threshold": t, "median": median_steps(s)})).collect::<Vec<_>>(),
                "first_val_acc": quantile_summary(&first),
            }),
        );
    }
    Ok(Value::Object(per_method))
}

fn accuracy_exp(env: &Env) -> CliResult<Value> {
    let mut per_method = serde_json::Map::new();
    for m in &env.cfg.evaluate.methods {
        let mut acc = Vec::new();
        for s in env.run_seeds(env.cfg.evaluate.seeds) {
            progress(&format!("accuracy {m} seed {s}"));
            let (net, _) = env.trained(m, s)?;
            acc.push(evaluate(&env.g, &net, &env.test)?);
        }
        per_method.insert(m.clone(), json!({"test_acc": acc, "summary": quantile_summary(&acc)}));
    }
    Ok(Value::Object(per_method))
}

fn ensemble_ood(env: &Env) -> CliResult<Value> {
    let e = &env.cfg.evaluate;
    let ids: Vec<usize> = (0..e.pool).collect();
    let specs = sample_ensembles(&ids, e.ensemble_k, e.ensemble_n, env.seed)?;
    let mut conditions: Vec<(String, usize, LabeledDataset)> = vec![("clean".into(), 0, env.test.clone())];
    for (ki, kind) in e.corruptions.iter().enumerate() {
        for sev in 1..=5 {
            let seed = initforge::rng::derive_seed(env.seed, (ki * 10 + sev) as u64);
            conditions.push((kind.name().into(), sev, corrupt(&env.test, *kind, sev, seed)?));
        }
    }
    let mut per_method = serde_json::Map::new();
    for m in &e.methods {
        let mut pool = Vec::new();
        for s in env.run_seeds(e.pool) {
            progress(&format!("ensemble_ood {m} member seed {s}"));
            pool.push(env.trained(m, s)?.0);
        }
        let mut rows = Vec::new();
        for (kind, sev, data) in &conditions {
            let logits = pool
                .iter()
                .map(|n| predict_logits(&env.g, n, &data.images))
                .collect::<Result<Vec<_>, _>>()?;
            let mut eces = Vec::new();
            let mut accs = Vec::new();
            for spec in &specs {
                let members: Vec<_> = spec.members.iter().map(|&i| logits[i].clone()).collect();
                let p = combine_logits(&members, e.ensemble_rule)?;
                accs.push(accuracy(&argmax_rows(&p), &data.labels));
                eces.push(ece(&p.cast(), &data.labels, 10)?);
            }
            rows.push(json!({
                "corruption": kind,
                "severity": sev,
                "median_ece": median(&eces),
                "median_acc": median(&accs),
                "ece": quantile_summary(&eces),
                "acc": quantile_summary(&accs),
            }));
        }
        per_method.insert(m.clone(), Value::Array(rows));
    }
    Ok(json!({"ensembles": specs, "by_method": per_method}))
}

fn similarity(env: &Env) -> CliResult<Value> {
    let e = &env.cfg.evaluate;
    let mut per_method = serde_json::Map::new();
    for m in &e.methods {
        let mut nets = Vec::new();
        for s in env.run_seeds(e.similarity_members) {
            progress(&format!("similarity {m} seed {s}"));
            nets.push(env.trained(m, s)?.0);
        }
        let refs: Vec<(&Network, &CompGraph)> = nets.iter().map(|n| (n, &env.g)).collect();
        let agree = pairwise_similarity(&refs, &env.test, SimilarityKind::PredictionAgreement)?;
        let cos = pairwise_similarity(&refs, &env.test, SimilarityKind::LogitCosine)?;
        per_method.insert(m.clone(), json!({"prediction_agreement": agree, "logit_cosine": cos}));
    }
    Ok(Value::Object(per_method))
}

fn transfer(env: &Env) -> CliResult<Value> {
    let e = &env.cfg.evaluate;
    let d = &env.cfg.data;
    let shifted = load_dataset(&d.shifted_source, d.shifted_n, Domain::Shifted, d.seed.wrapping_add(1))?;
    let total = shifted.len() as f64;
    if e.transfer_train + e.transfer_test > shifted.len() {
        return Err(CliError::Config(format!(
            "evaluate.transfer_train + transfer_test exceed the {} shifted samples",
            shifted.len()
        )));
    }
    let parts = shifted.stratified_split(&[e.transfer_train as f64 / total, e.transfer_test as f64 / total, 0.0], d.seed);
    let small = shifted.subset(&parts[0], Split::Train);
    let test = shifted.subset(&parts[1], Split::Test);
    let mut per_method = serde_json::Map::new();
    for m in &e.methods {
        let mut acc = Vec::new();
        for s in env.run_seeds(e.seeds) {
            progress(&format!("transfer {m} seed {s}"));
            let (ws, _) = env.inits.init(m, &env.g, s)?;
            let cfg = TrainConfig {
                seed: s,
                ..e.transfer.clone()
            };
            acc.push(transfer_eval(ws, &env.g, &small, &test, &cfg)?);
        }
        per_method.insert(m.clone(), json!({"test_acc": acc, "summary": quantile_summary(&acc)}));
    }
    Ok(json!({"train_size": small.len(), "test_size": test.len(), "by_method": per_method}))
}
