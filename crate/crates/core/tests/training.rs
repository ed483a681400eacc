mod common;

use common::{toy_spec, windows};
use sparsetraj::models::{ModelKind, ModelState, SceneBatch, SceneInput};
use sparsetraj::training::{batch_loss, huber_loss, train, train_seed, TrainConfig, TrainData};

fn toy_config(kind: ModelKind, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(toy_spec(kind, 8, 4, 2));
    c.epochs = epochs;
    c.batch_size = 4;
    c.seeds = vec![0, 1];
    c
}

fn toy_data() -> TrainData {
    let all = windows(17, 10, 4, 8);
    TrainData { train: all[..8].to_vec(), val: all[8..].to_vec() }
}

#[test]
fn batch_loss_matches_independent_huber() {
    let spec = toy_spec(ModelKind::Granma, 8, 4, 2);
    let state = ModelState::init(spec.clone(), 3).unwrap();
    let ws = windows(5, 4, 4, 8);
    let batch = SceneBatch::from_windows(&spec, &ws).unwrap();
    let (loss, dense) = batch_loss(&state, &batch).unwrap();
    // rows are (scene, agent, coordinate); every scene has equal weight
    let agents = batch.slots.len();
    let mut total = 0.0;
    for (s, w) in ws.iter().enumerate() {
        let truth = sparsetraj::models::window_targets(w, false);
        let pred: Vec<Vec<[f64; 2]>> = (0..agents)
            .map(|a| {
                let (xs, ys) = (dense.row((s * agents + a) * 2), dense.row((s * agents + a) * 2 + 1));
                xs.iter().zip(ys).map(|(x, y)| [*x, *y]).collect()
            })
            .collect();
        total += huber_loss(&truth, &pred).unwrap();
    }
    let independent = total / ws.len() as f64;
    assert!((loss - independent).abs() <= 1e-12 * independent.max(1.0), "{loss} vs {independent}");
}

#[test]
fn huber_examples() {
    let y = vec![vec![[1.0, 2.0], [3.0, -1.0]], vec![[0.0, 0.0], [5.0, 5.0]]];
    assert_eq!(huber_loss(&y, &y).unwrap(), 0.0);
    let z = vec![vec![[0.0, 0.0]]];
    assert_eq!(huber_loss(&z, &[vec![[0.5, 0.0]]]).unwrap(), 0.5 * (0.5 * 0.25));
    assert_eq!(huber_loss(&z, &[vec![[3.0, 4.0]]]).unwrap(), 0.5 * (2.5 + 3.5));
    assert!(huber_loss(&y, &y[..1]).is_err());
}

#[test]
fn learning_rate_after_200_epochs() {
    let mut c = toy_config(ModelKind::RedStyle, 200);
    c.seeds = vec![0];
    let data = TrainData { train: toy_data().train[..2].to_vec(), val: vec![] };
    let out = train_seed(&c, 0, &data, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 200);
    let lr = out.metrics[199].lr;
    assert!((lr - 5e-4 * 0.999f64.powi(200)).abs() < 1e-15, "{lr}");
    assert!((lr - 4.094e-4).abs() < 1e-7, "{lr}");
    assert!((out.metrics[0].lr - 5e-4 * 0.999).abs() < 1e-15);
}

#[test]
fn same_config_and_seed_reproduce_the_checkpoint() {
    let c = toy_config(ModelKind::Granma, 3);
    let data = toy_data();
    let a = train_seed(&c, 7, &data, |_| {}).unwrap();
    let b = train_seed(&c, 7, &data, |_| {}).unwrap();
    let other = train_seed(&c, 8, &data, |_| {}).unwrap();
    assert_eq!(a.final_hash, b.final_hash);
    assert_eq!(a.metrics, b.metrics);
    assert_ne!(a.final_hash, other.final_hash);
}

#[test]
fn best_checkpoint_has_lowest_validation_l2() {
    let c = toy_config(ModelKind::Granma, 6);
    let out = train_seed(&c, 2, &toy_data(), |_| {}).unwrap();
    let best = out.metrics.iter().min_by(|a, b| a.val_l2_cm.total_cmp(&b.val_l2_cm)).unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    assert_eq!(out.best_val_l2_cm, best.val_l2_cm);
    assert!(out.metrics.iter().all(|m| m.train_loss.is_finite() && m.val_loss.is_finite()));
}

#[test]
fn run_directory_layout() {
    let c = toy_config(ModelKind::Granma, 2);
    let data = toy_data();
    let dir = tempfile::tempdir().unwrap();
    let (summary, states) = train(&c, &data, dir.path()).unwrap();
    assert_eq!(states.len(), 2);
    assert_eq!(summary.config_hash, c.hash());
    let cfg = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(TrainConfig::from_toml(&cfg).unwrap(), c);
    assert!(dir.path().join("summary.json").exists());
    for (seed, state) in c.seeds.iter().zip(&states) {
        let sd = dir.path().join(format!("seed_{seed}"));
        let csv = std::fs::read_to_string(sd.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
        assert_eq!(lines.len(), 3);
        let loaded = ModelState::load_expecting(&sd.join("best.ckpt"), &c.model).unwrap();
        let scene = SceneInput::from_window(&data.val[0], false);
        assert_eq!(loaded.predict(&scene).unwrap(), state.predict(&scene).unwrap());
    }
}

#[test]
fn diverging_seeds_are_recorded_and_the_rest_continue() {
    let c = toy_config(ModelKind::Granma, 2);
    let mut data = toy_data();
    for w in &mut data.train {
        for track in &mut w.tracks {
            for p in track.iter_mut() {
                p[0] *= 1e300;
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let (summary, states) = train(&c, &data, dir.path()).unwrap();
    assert!(states.is_empty());
    assert_eq!(summary.seeds.len(), 2);
    for s in &summary.seeds {
        assert!(!s.ok);
        assert!(s.error.as_deref().unwrap().contains("non-finite"), "{:?}", s.error);
    }
}

#[test]
fn config_validation() {
    let mut c = toy_config(ModelKind::Granma, 1);
    c.batch_size = 1;
    assert!(c.validate().is_err());
    c.model.kind = ModelKind::RedStyle;
    assert!(c.validate().is_ok());
    c.epochs = 0;
    assert!(c.validate().is_err());
    assert!(TrainConfig::from_toml("[model]\nkind = \"granma\"\nbogus = 1\n").is_err());
    assert_eq!(TrainConfig::low_lr_preset(c.model.clone()).learning_rate, 1e-6);
}
