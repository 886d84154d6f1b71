//! The five subcommands.

use std::path::{Path, PathBuf};

use initforge::archspace::resnet_from_name;
use initforge::data::{Domain, LabeledDataset};
use initforge::globalinit::{train_ghn, GhnModel, GhnVariant};
use initforge::harvest::{assemble_weight_dataset, checkpoint_path, train_base_network, Checkpoint, WeightDataset};
use initforge::io::network_container;
use initforge::localinit::{train_registry, LocalKind};
use initforge::train::TrainConfig;
use initforge::weights::Network;
use serde_json::{json, Value};

use crate::config::Config;
use crate::experiments::{self, Initializer};
use crate::manifest::{Recorder, RunManifest};
use crate::{load_dataset, require, write_artifact, CliError, CliResult};

fn source_data(cfg: &Config) -> CliResult<LabeledDataset> {
    let d = load_dataset(&cfg.data.source, cfg.data.n, Domain::Source, cfg.data.seed)?;
    if d.classes != cfg.ghn.num_classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes, ghn.num_classes is {}",
            d.classes, cfg.ghn.num_classes
        )));
    }
    Ok(d)
}

/// Trains `harvest.population` base networks (reusing checkpoints already
/// on disk) and assembles the filtered Weight-Dataset.
pub fn harvest(cfg: &Config, seed: u64, out: &Path) -> CliResult<RunManifest> {
    let h = &cfg.harvest;
    let mut rec = Recorder::new("harvest", seed);
    let g = resnet_from_name(&h.arch, cfg.ghn.num_classes)?;
    let (train, val, _) = source_data(cfg)?.split_70_10_20(cfg.data.seed);
    let dir = out.join("checkpoints");
    let seeds: Vec<u64> = (0..h.population as u64).map(|i| seed + i).collect();
    let run = |s: u64| -> CliResult<Checkpoint> {
        let path = checkpoint_path(&dir, &h.arch, s);
        if path.exists() {
            eprintln!("[initforge] harvest: reusing {}", path.display());
            return Ok(Checkpoint::load(&path, &g)?);
        }
        eprintln!("[initforge] harvest: training base network {s}");
        let tc = TrainConfig {
            seed: s,
            dataset: cfg.data.name.clone(),
            ..h.train.clone()
        };
        let ck = train_base_network(&g, &tc, &train, &val)?;
        ck.save(&path)?;
        Ok(ck)
    };
    let mut cks: Vec<Option<CliResult<Checkpoint>>> = (0..seeds.len()).map(|_| None).collect();
    for chunk in seeds.chunks(h.workers).zip(cks.chunks_mut(h.workers)) {
        std::thread::scope(|sc| {
            let handles: Vec<_> = chunk.0.iter().map(|&s| sc.spawn(move || run(s))).collect();
            for (slot, hd) in chunk.1.iter_mut().zip(handles) {
                *slot = Some(hd.join().unwrap_or_else(|_| Err(CliError::Other("worker panicked".into()))));
            }
        });
    }
    let cks = cks.into_iter().map(|c| c.expect("every run joined")).collect::<CliResult<Vec<_>>>()?;
    rec.seeds = seeds.clone();
    rec.outputs.extend(seeds.iter().map(|&s| checkpoint_path(&dir, &h.arch, s)));
    let wds = assemble_weight_dataset(&cks, &g, h.filter_fraction)?;
    let p = out.join(WeightDataset::file_name(&h.arch));
    wds.save(&p)?;
    rec.outputs.push(p);
    rec.finish(cfg, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum GenKind {
    Vae,
    Vqvae,
    Ghn,
    NoiseGhn,
}

impl GenKind {
    pub fn name(self) -> &'static str {
        match self {
            GenKind::Vae => "vae",
            GenKind::Vqvae => "vqvae",
            GenKind::Ghn => "ghn",
            GenKind::NoiseGhn => "noise_ghn",
        }
    }
}

/// Trains a generator. Local kinds read `weights_{arch}.wds` from
/// `inputs`; global kinds train on the configured dataset.
pub fn train_gen(cfg: &Config, kind: GenKind, seed: u64, inputs: &Path, out: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new(&format!("train-gen_{}", kind.name()), seed);
    match kind {
        GenKind::Vae | GenKind::Vqvae => {
            let lk = LocalKind::parse(kind.name()).expect("local kind");
            let arch = &cfg.harvest.arch;
            let p = require(&inputs.join(WeightDataset::file_name(arch)), "Weight-Dataset (run harvest first)")?;
            let wds = WeightDataset::load(&p)?;
            rec.inputs.push(p);
            eprintln!("[initforge] train-gen: {} models for {} layers", kind.name(), wds.per_layer.len());
            let reg = train_registry(&wds, lk, &cfg.local, seed)?;
            rec.outputs.extend(reg.save(out)?);
            let mut log = String::from("layer,epoch,loss\n");
            for (layer, m) in &reg.models {
                for (e, l) in m.loss_log().iter().enumerate() {
                    log.push_str(&format!("{layer},{},{l}\n", e + 1));
                }
            }
            rec.outputs
                .push(write_artifact(out, &format!("trainlog_{}.csv", kind.name()), log.as_bytes())?);
        }
        GenKind::Ghn | GenKind::NoiseGhn => {
            let v = GhnVariant::parse(kind.name()).expect("global kind");
            let (train, _, _) = source_data(cfg)?.split_70_10_20(cfg.data.seed);
            let gc = initforge::globalinit::GhnTrainConfig {
                seed,
                ..cfg.ghn.clone()
            };
            let mut err = std::io::stderr();
            let outcome = train_ghn(&gc, &train, v, Some(&mut err))?;
            let meta = json!({"dataset": cfg.data.name, "seed": seed, "archs": gc.archs, "warm_start": false});
            let p = out.join(GhnModel::file_name(v, &cfg.data.name));
            outcome.model.save(&p, meta.clone())?;
            rec.outputs.push(p);
            for (step, m) in &outcome.snapshots {
                let p = out
                    .join("snapshots")
                    .join(format!("ghn_{}_{}_step{step}.gm", v.name(), cfg.data.name));
                m.save(&p, meta.clone())?;
                rec.outputs.push(p);
            }
            rec.outputs.push(write_artifact(
                out,
                &format!("trainlog_{}.csv", v.name()),
                outcome.log_csv().as_bytes(),
            )?);
        }
    }
    rec.finish(cfg, out)
}

pub fn init_file_name(arch: &str, method: &str, seed: u64) -> String {
    format!("init_{arch}_{method}_{seed}.ws")
}

/// Writes one initial weight set of `arch` by `method`.
pub fn init(cfg: &Config, arch: &str, method: &str, seed: u64, models: &Path, out: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new(&format!("init_{arch}_{method}_{seed}"), seed);
    let g = resnet_from_name(arch, cfg.ghn.num_classes)?;
    let inits = Initializer::load(&[method.to_string()], arch, &cfg.data.name, models, &mut rec)?;
    let (ws, xi) = inits.init(method, &g, seed)?;
    let meta = json!({"method": method, "seed": seed, "xi": xi});
    let c = network_container("weight_set", &Network::fresh(ws), meta);
    let p = out.join(init_file_name(arch, method, seed));
    c.write(&p)?;
    rec.outputs.push(p);
    rec.finish(cfg, out)
}

pub fn evaluate(cfg: &Config, experiment: &str, seed: u64, models: &Path, out: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new(&format!("evaluate_{experiment}"), seed);
    experiments::run(experiment, cfg, seed, models, out, &mut rec)?;
    rec.finish(cfg, out)
}

/// Summarises every `eval_*.json` in `out` into `report.json` and
/// `report.md`.
pub fn report(cfg: &Config, seed: u64, out: &Path) -> CliResult<RunManifest> {
    let mut rec = Recorder::new("report", seed);
    let mut docs = serde_json::Map::new();
    for exp in experiments::EXPERIMENTS {
        let p = out.join(initforge::evalkit::eval_file_name(exp));
        if p.exists() {
            docs.insert(exp.into(), serde_json::from_slice(&std::fs::read(&p)?)?);
            rec.inputs.push(p);
        }
    }
    if docs.is_empty() {
        return Err(CliError::Missing(format!(
            "no eval_*.json in {} (run evaluate first)",
            out.display()
        )));
    }
    let md = markdown(&docs);
    rec.outputs
        .push(write_artifact(out, "report.json", &serde_json::to_vec_pretty(&Value::Object(docs))?)?);
    rec.outputs.push(write_artifact(out, "report.md", md.as_bytes())?);
    rec.finish(cfg, out)
}

fn fmt_num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.4}"),
        None => "unreached".into(),
    }
}

fn markdown(docs: &serde_json::Map<String, Value>) -> String {
    let mut s = String::from("# initforge report\n");
    if let Some(d) = docs.get("convergence") {
        s.push_str("\n## Steps to accuracy thresholds (median over seeds)\n\n| method | threshold | median step |\n|---|---|---|\n");
        for (m, r) in d["results"].as_object().into_iter().flatten() {
            for t in r["median_steps"].as_array().into_iter().flatten() {
                s.push_str(&format!("| {m} | {} | {} |\n", t["threshold"], fmt_num(&t["median"])));
            }
        }
    }
    for (exp, title, key) in [
        ("accuracy", "Test accuracy", "summary"),
        ("transfer", "Transfer accuracy", "summary"),
    ] {
        if let Some(d) = docs.get(exp) {
            s.push_str(&format!(
                "\n## {title}\n\n| method | median | q1 | q3 |\n|---|---|---|---|\n"
            ));
            let res = if exp == "transfer" { &d["results"]["by_method"] } else { &d["results"] };
            for (m, r) in res.as_object().into_iter().flatten() {
                let q = &r[key];
                s.push_str(&format!(
                    "| {m} | {} | {} | {} |\n",
                    fmt_num(&q["median"]),
                    fmt_num(&q["q1"]),
                    fmt_num(&q["q3"])
                ));
            }
        }
    }
    if let Some(d) = docs.get("ensemble_ood") {
        s.push_str("\n## Ensemble ECE (median over ensembles)\n\n| method | corruption | severity | ECE | accuracy |\n|---|---|---|---|---|\n");
        for (m, rows) in d["results"]["by_method"].as_object().into_iter().flatten() {
            for r in rows.as_array().into_iter().flatten() {
                s.push_str(&format!(
                    "| {m} | {} | {} | {} | {} |\n",
                    r["corruption"].as_str().unwrap_or(""),
                    r["severity"],
                    fmt_num(&r["median_ece"]),
                    fmt_num(&r["median_acc"])
                ));
            }
        }
    }
    if let Some(d) = docs.get("similarity") {
        s.push_str("\n## Pairwise similarity (strict upper triangle mean)\n\n| method | prediction agreement | logit cosine |\n|---|---|---|\n");
        for (m, r) in d["results"].as_object().into_iter().flatten() {
            s.push_str(&format!(
                "| {m} | {} | {} |\n",
                fmt_num(&r["prediction_agreement"]["mean_upper"]),
                fmt_num(&r["logit_cosine"]["mean_upper"])
            ));
        }
    }
    s
}

/// Default models directory: `--models` if given, else the output dir.
pub fn models_dir(models: Option<PathBuf>, out: &Path) -> PathBuf {
    models.unwrap_or_else(|| out.to_path_buf())
}
