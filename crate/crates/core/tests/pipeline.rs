//! Harvest, fit local and global generators, initialise and train, all on
//! a few hundred synthetic images.

use initforge::archspace::{enumerate_params, resnet_from_name};
use initforge::data::{synthetic_textures, Domain};
use initforge::evalkit::train_from_init;
use initforge::globalinit::{ghn_forward, sample_noise, train_ghn, GhnTrainConfig, GhnVariant};
use initforge::harvest::{assemble_weight_dataset, train_base_network};
use initforge::localinit::{initialize_network_local, train_registry, LocalKind, LocalTrainConfig};
use initforge::train::TrainConfig;

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        milestones: vec![],
        ..TrainConfig::standard(1, seed)
    }
}

#[test]
fn generated_weights_fit_and_train() {
    let ds = synthetic_textures(400, Domain::Source, 0);
    let (train, val, _) = ds.split_70_10_20(0);
    let g = resnet_from_name("resnet8", 2).unwrap();
    let cks: Vec<_> = (0..2)
        .map(|s| train_base_network(&g, &small_train(s), &train, &val).unwrap())
        .collect();
    let wds = assemble_weight_dataset(&cks, &g, 0.05).unwrap();
    assert_eq!(wds.per_layer.len(), g.conv3x3_layers().len());

    let mut cfg = LocalTrainConfig::default();
    cfg.vae.epochs = 1;
    cfg.vae.batch_size = 16;
    let reg = train_registry(&wds, LocalKind::Vae, &cfg, 0).unwrap();
    let local = initialize_network_local(&g, &reg, 1).unwrap();

    let ghn_cfg = GhnTrainConfig {
        epochs: 1,
        max_steps: Some(2),
        batch_size: 8,
        milestones: vec![],
        ..GhnTrainConfig::desk(0)
    };
    let model = train_ghn(&ghn_cfg, &train, GhnVariant::NoiseGhn, None).unwrap().model;
    let global = ghn_forward(&g, &model, sample_noise(&model, 3).as_deref()).unwrap();

    for ws in [local, global] {
        assert_eq!(ws.specs, enumerate_params(&g));
        assert!(ws.all_finite());
        let (_, t) = train_from_init(ws, &g, &small_train(5), &train, &val).unwrap();
        assert!(t.points.iter().all(|p| (0.0..=1.0).contains(&p.1)));
    }
}
