use std::fs;
use std::path::Path;

use evade_core::env::{EnvSpec, ObjectWorld};
use evade_core::world_model::{ModelConfig, WorldModel};
use evade_core::{dump_activations, LayerKind, Rng, Tensor};

fn model() -> WorldModel<f64> {
    let config = ModelConfig { hidden_channels: 4, reward_hidden: 8, sigma_init: 0.0, train_sigma: false, ..ModelConfig::default() };
    WorldModel::new(&EnvSpec::default(), &config, &mut Rng::new(1)).unwrap()
}

fn read_csv(path: &Path) -> Vec<f64> {
    fs::read_to_string(path).unwrap().split(['\n', ',']).filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect()
}

fn layer(model: &WorldModel<f64>, kind: LayerKind) -> String {
    model.noisy_groups().find(|g| g.kind == Some(kind)).unwrap().name.clone()
}

#[test]
fn untrained_blocks_pass_maps_through() {
    let model = model();
    let (_, obs) = ObjectWorld::new(EnvSpec::default()).unwrap().reset::<f64>(0);
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = LayerKind::ALL.iter().map(|&k| layer(&model, k)).collect();
    dump_activations(&model, &model.mean_sample(), &obs, 3, &names, dir.path()).unwrap();
    for name in &names {
        for k in 0..4 {
            let input = read_csv(&dir.path().join(name).join(format!("in_{k}.csv")));
            let output = read_csv(&dir.path().join(name).join(format!("out_{k}.csv")));
            assert_eq!(input, output, "{name} channel {k}");
        }
    }
}

#[test]
fn weighting_factor_scales_its_channel() {
    let mut model = model();
    let name = layer(&model, LayerKind::Weighting);
    let id = model.noisy_groups().find(|g| g.name == name).unwrap().theta;
    let mut theta = model.params().get(id).clone();
    let c = theta.shape()[0];
    theta.data_mut()[c + 1] = 1.93;
    model.params_mut().set(id, theta).unwrap();
    let (_, obs) = ObjectWorld::new(EnvSpec::default()).unwrap().reset::<f64>(0);
    let dir = tempfile::tempdir().unwrap();
    let written = dump_activations(&model, &model.mean_sample(), &obs, 1, std::slice::from_ref(&name), dir.path()).unwrap();
    assert_eq!(written.len(), 4 * c + 1);
    let factors = fs::read_to_string(dir.path().join(&name).join("factors.csv")).unwrap();
    assert_eq!(factors.lines().nth(2).unwrap(), "1,1.93");
    let input = read_csv(&dir.path().join(&name).join("in_1.csv"));
    let output = read_csv(&dir.path().join(&name).join("out_1.csv"));
    assert!(input.iter().any(|&v| v != 0.0));
    for (i, o) in input.iter().zip(&output) {
        assert!((o - 1.93 * i).abs() <= 1e-12 * i.abs().max(1.0));
    }
    assert_eq!(read_csv(&dir.path().join(&name).join("in_0.csv")), read_csv(&dir.path().join(&name).join("out_0.csv")));
}

#[test]
fn images_are_binary_pgm() {
    let model = model();
    let (_, obs) = ObjectWorld::new(EnvSpec::default()).unwrap().reset::<f64>(0);
    let dir = tempfile::tempdir().unwrap();
    dump_activations(&model, &model.mean_sample(), &obs, 0, &["enc1".to_string()], dir.path()).unwrap();
    let img = fs::read(dir.path().join("enc1/in_0.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(img.len(), b"P5\n8 8\n255\n".len() + 64);
    // The first input channel is the agent map: one bright pixel.
    assert_eq!(img.iter().rev().take(64).filter(|&&b| b == 255).count(), 1);
    assert!(!dir.path().join("dec1").exists());
}

#[test]
fn unknown_layers_are_rejected() {
    let model = model();
    let obs = Tensor::<f64>::zeros(&[16, 8, 8]);
    let dir = tempfile::tempdir().unwrap();
    assert!(dump_activations(&model, &model.mean_sample(), &obs, 0, &["nope".to_string()], dir.path()).is_err());
}
