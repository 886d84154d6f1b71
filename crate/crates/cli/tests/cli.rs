//! End-to-end runs of the `initforge` binary on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
n = 300
shifted_n = 200

[harvest]
population = 2

[harvest.train]
epochs = 1
batch_size = 32
milestones = []

[local.vae]
epochs = 2
batch_size = 16

[local.vqvae]
epochs = 2
batch_size = 16

[ghn]
epochs = 1
max_steps = 2
batch_size = 8
milestones = []
"#;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("initforge-cli-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&d).ok();
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("c.toml");
    std::fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn initforge(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_initforge"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_errors_exit_2() {
    let d = scratch("cfg");
    let o = initforge(&["harvest"], &config(&d, "[evaluate]\nseedz = 3\n"), &d.join("out"));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("seedz"));

    let d = scratch("pop0");
    config(&d, "");
    let text = std::fs::read_to_string(d.join("c.toml")).unwrap().replace("population = 2", "population = 0");
    std::fs::write(d.join("p.toml"), text).unwrap();
    let o = initforge(&["harvest"], &d.join("p.toml"), &d.join("out"));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("population"));
    assert!(!d.join("out").join("weights_resnet8.wds").exists());

    let o = initforge(&["evaluate", "--experiment", "nonsense"], &config(&d, ""), &d.join("out"));
    assert_eq!(code(&o), 2);
    let o = initforge(&["train-gen", "--kind", "gan"], &config(&d, ""), &d.join("out"));
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_artifacts_exit_3() {
    let d = scratch("missing");
    let cfg = config(&d, "");
    let out = d.join("out");
    for args in [
        &["train-gen", "--kind", "vae"][..],
        &["init", "--arch", "resnet8", "--method", "ghn"],
        &["evaluate", "--experiment", "accuracy", "--models", "/nonexistent"],
        &["report"],
    ] {
        let o = initforge(args, &cfg, &out);
        assert_eq!(code(&o), 3, "{args:?}: {}", stderr(&o));
    }
    let o = initforge(&["harvest"], &d.join("absent.toml"), &out);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4() {
    let d = scratch("diverge");
    let o = initforge(&["harvest"], &config(&d, ""), &d.join("out"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("c.toml"))
        .unwrap()
        .replace("[local.vae]\n", "[local.vae]\nlr = 1e30\n");
    std::fs::write(d.join("c.toml"), text).unwrap();
    let o = initforge(&["train-gen", "--kind", "vae"], &d.join("c.toml"), &d.join("out"));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn harvest_is_deterministic_and_resumable() {
    let d = scratch("determinism");
    let cfg = config(&d, "");
    let (a, b) = (d.join("a"), d.join("b"));
    assert_eq!(code(&initforge(&["harvest", "--seed", "7"], &cfg, &a)), 0);
    assert_eq!(code(&initforge(&["harvest", "--seed", "7"], &cfg, &b)), 0);
    let wds = "weights_resnet8.wds";
    let bytes = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(bytes(a.join(wds)), bytes(b.join(wds)));
    let ck = a.join("checkpoints").join("base_resnet8_8.ckpt");
    assert_eq!(bytes(ck.clone()), bytes(b.join("checkpoints").join("base_resnet8_8.ckpt")));

    std::fs::remove_file(&ck).unwrap();
    std::fs::remove_file(a.join(wds)).unwrap();
    let o = initforge(&["harvest", "--seed", "7"], &cfg, &a);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("reusing"), "{}", stderr(&o));
    assert!(stderr(&o).contains("training base network 8"));
    assert_eq!(bytes(a.join(wds)), bytes(b.join(wds)));

    let m: serde_json::Value = serde_json::from_slice(&bytes(a.join("manifest_harvest.json"))).unwrap();
    assert_eq!(m["seeds"], serde_json::json!([7, 8]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn generators_train_and_initialise() {
    let d = scratch("pipeline");
    let cfg = config(&d, "");
    let out = d.join("out");
    assert_eq!(code(&initforge(&["harvest"], &cfg, &out)), 0);
    for kind in ["vae", "vqvae", "ghn", "noise_ghn"] {
        let o = initforge(&["train-gen", "--kind", kind], &cfg, &out);
        assert_eq!(code(&o), 0, "{kind}: {}", stderr(&o));
    }
    let log = std::fs::read_to_string(out.join("trainlog_noise_ghn.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,xent1,xent2,simloss"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(row[4].parse::<f64>().unwrap().is_finite());
    assert!(std::fs::read_to_string(out.join("trainlog_vae.csv"))
        .unwrap()
        .starts_with("layer,epoch,loss\n"));

    for method in ["he", "xavier", "vae", "vqvae", "ghn", "noise_ghn"] {
        let o = initforge(&["init", "--arch", "resnet14", "--method", method, "--seed", "3"], &cfg, &out);
        assert_eq!(code(&o), if method.contains("vae") { 3 } else { 0 }, "{method}: {}", stderr(&o));
        let o = initforge(&["init", "--arch", "resnet8", "--method", method, "--seed", "3"], &cfg, &out);
        assert_eq!(code(&o), 0, "{method}: {}", stderr(&o));
        assert!(out.join(format!("init_resnet8_{method}_3.ws")).exists());
    }
}
