//! Huber-loss training with Adam, per-epoch learning-rate decay and
//! best-validation checkpoint selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use diffcore::{clip_grad_norm, huber, Adam, AdamConfig, Graph, Mode, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment_flip, Point, PredictionWindow};
use crate::error::{Error, Result};
use crate::evaluation::l2_error;
use crate::models::{window_targets, ModelKind, ModelSpec, ModelState, SceneBatch};

/// Mean over agents and steps of `(1/2) Σ_{x,y} huber(y - ŷ)`, threshold 1 m.
pub fn huber_loss(truth: &[Vec<Point>], pred: &[Vec<Point>]) -> Result<f64> {
    check_shapes(truth, pred)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, p) in truth.iter().zip(pred) {
        for (a, b) in t.iter().zip(p) {
            total += 0.5 * (huber(a[0] - b[0]) + huber(a[1] - b[1]));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub(crate) fn check_shapes(truth: &[Vec<Point>], pred: &[Vec<Point>]) -> Result<()> {
    if truth.len() != pred.len() || truth.iter().zip(pred).any(|(a, b)| a.len() != b.len()) {
        let shape = |x: &[Vec<Point>]| (x.len(), x.first().map_or(0, Vec::len));
        return Err(Error::Shape(format!("truth {:?} vs prediction {:?}", shape(truth), shape(pred))));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Random horizontal and vertical flips of training windows.
    #[serde(default = "yes")]
    pub flip_augment: bool,
    /// Optional max global gradient norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Dataset manifest, when driven from a file.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    5e-4
}
fn default_decay() -> f64 {
    0.999
}
fn default_seeds() -> Vec<u64> {
    (0..7).collect()
}
fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            lr_decay: default_decay(),
            seeds: default_seeds(),
            flip_augment: true,
            clip_norm: None,
            manifest: None,
        }
    }

    /// 400 epochs for long (24 s) horizons.
    pub fn for_horizon(model: ModelSpec) -> Self {
        let long = model.horizon as f64 / model.frame_rate_hz > 10.0;
        let mut c = Self::new(model);
        if long {
            c.epochs = 400;
        }
        c
    }

    /// Very small learning rate used for the autoregressive baselines.
    pub fn low_lr_preset(model: ModelSpec) -> Self {
        Self { learning_rate: 1e-6, ..Self::new(model) }
    }

    /// Window length `T` and observed prefix `n`.
    pub fn window(&self) -> (usize, usize) {
        (self.model.input_len + self.model.horizon, self.model.input_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty");
        }
        if self.batch_size == 0 || (self.model.kind.uses_batch_norm() && self.batch_size < 2) {
            return fail("batch size must be at least 2 for models with batch norm");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return fail("learning rate and decay must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn hash(&self) -> String {
        crate::models::hex_digest(&serde_json::to_vec(self).unwrap_or_default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_l2_cm: f64,
    /// Learning rate after this epoch's decay.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_l2_cm: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Parameters at the best validation epoch.
    pub best: ModelState,
    /// SHA-256 of the final-epoch checkpoint bytes.
    pub final_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub ok: bool,
    pub best_epoch: Option<usize>,
    pub best_val_l2_cm: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub final_hash: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seeds: Vec<SeedSummary>,
}

/// Training and validation windows.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<PredictionWindow>,
    pub val: Vec<PredictionWindow>,
}

/// Eval-mode loss and L2 on `windows`, batched.
pub fn evaluate_windows(state: &ModelState, windows: &[PredictionWindow]) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let spec = state.spec();
    let mut loss = 0.0;
    let mut l2 = 0.0;
    for chunk in windows.chunks(256) {
        let scenes: Vec<_> =
            chunk.iter().map(|w| crate::models::SceneInput::from_window(w, spec.conditioned)).collect();
        let preds = state.predict_batch(&scenes)?;
        for (w, p) in chunk.iter().zip(preds) {
            let truth = window_targets(w, spec.conditioned);
            let dense = p.dense();
            loss += huber_loss(&truth, &dense)?;
            l2 += l2_error(&truth, &dense)?.mean_cm;
        }
    }
    let n = windows.len() as f64;
    Ok((loss / n, l2 / n))
}

/// One optimisation step. Returns the batch loss.
fn step(state: &mut ModelState, adam: &mut Adam, batch: &SceneBatch, clip: Option<f64>) -> Result<f64> {
    let targets = batch.targets.as_ref().ok_or_else(|| Error::Shape("training batch without targets".into()))?;
    let (loss, mut grads, updates) = {
        let mut g = Graph::new(state.store(), Mode::Train);
        let out = state.forward(&mut g, batch)?;
        let h = g.huber_elementwise(out.dense, targets)?;
        let l = g.mean_reduce(h);
        let loss = g.value(l).item();
        if !loss.is_finite() {
            return Err(Error::Config(format!("non-finite loss {}", loss)));
        }
        let grads = g.backward(l)?;
        (loss, grads, g.take_stat_updates())
    };
    if let Some(max) = clip {
        clip_grad_norm(&mut grads, max);
    }
    adam.step(state.store_mut(), &grads)?;
    Graph::apply_stat_updates(updates, state.store_mut());
    Ok(loss)
}

/// Loss of the current parameters on a training batch, as the optimiser
/// sees it (train-mode batch norm, no update).
pub fn batch_loss(state: &ModelState, batch: &SceneBatch) -> Result<(f64, Tensor)> {
    let targets = batch.targets.as_ref().ok_or_else(|| Error::Shape("batch without targets".into()))?;
    let mut g = Graph::new(state.store(), Mode::Train);
    let out = state.forward(&mut g, batch)?;
    let h = g.huber_elementwise(out.dense, targets)?;
    let l = g.mean_reduce(h);
    Ok((g.value(l).item(), g.value(out.dense).clone()))
}

/// Trains one seed. `on_epoch` sees every epoch's metrics as they happen.
pub fn train_seed(
    config: &TrainConfig,
    seed: u64,
    data: &TrainData,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<SeedOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    let spec = &config.model;
    let mut state = ModelState::init(spec.clone(), seed)?;
    let adam_cfg =
        AdamConfig { learning_rate: config.learning_rate, epoch_decay: config.lr_decay, ..Default::default() };
    let mut adam = Adam::new(state.store(), adam_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let trainable = spec.kind != ModelKind::LinExt;
    let epochs = if trainable { config.epochs } else { 1 };
    let min_batch = if spec.kind.uses_batch_norm() { 2 } else { 1 };

    let mut best: Option<(usize, f64, ModelState)> = None;
    let mut metrics = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=epochs {
        let mut train_loss = f64::NAN;
        if trainable {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut seen = 0usize;
            for idx in order.chunks(config.batch_size) {
                if idx.len() < min_batch {
                    continue;
                }
                let windows: Vec<PredictionWindow> = idx
                    .iter()
                    .map(|&i| {
                        let w = &data.train[i];
                        if config.flip_augment {
                            augment_flip(w, rng.gen_bool(0.5), rng.gen_bool(0.5))
                        } else {
                            w.clone()
                        }
                    })
                    .collect();
                let batch = SceneBatch::from_windows(spec, &windows)?;
                let loss = step(&mut state, &mut adam, &batch, config.clip_norm).map_err(|e| {
                    Error::Config(format!("seed {} epoch {} step {}: {}", seed, epoch, adam.steps(), e))
                })?;
                total += loss * idx.len() as f64;
                seen += idx.len();
            }
            train_loss = total / seen.max(1) as f64;
            adam.end_epoch();
        }
        let (val_loss, val_l2) = if data.val.is_empty() {
            evaluate_windows(&state, &data.train)?
        } else {
            evaluate_windows(&state, &data.val)?
        };
        if !trainable {
            train_loss = evaluate_windows(&state, &data.train)?.0;
        }
        let m = EpochMetrics { epoch, train_loss, val_loss, val_l2_cm: val_l2, lr: adam.learning_rate() };
        on_epoch(&m);
        metrics.push(m);
        if best.as_ref().is_none_or(|(_, b, _)| val_l2 < *b) {
            best = Some((epoch, val_l2, state.clone()));
        }
    }
    let final_bytes = state.checkpoint(Some(&adam), epochs, &config.hash())?.to_bytes();
    let (best_epoch, best_val_l2_cm, best) = best.expect("at least one epoch");
    Ok(SeedOutcome {
        seed,
        best_epoch,
        best_val_l2_cm,
        metrics,
        best,
        final_hash: crate::models::hex_digest(&final_bytes),
    })
}

/// Runs every configured seed, writing
///
/// ```text
/// run_dir/config.toml
/// run_dir/seed_<s>/metrics.csv      epoch,train_loss,val_loss,lr
/// run_dir/seed_<s>/best.ckpt
/// run_dir/summary.json
/// ```
///
/// A seed that diverges is recorded as failed and the remaining seeds run.
pub fn train(config: &TrainConfig, data: &TrainData, run_dir: &Path) -> Result<(TrainSummary, Vec<ModelState>)> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.toml"), config.to_toml()?)?;
    let config_hash = config.hash();
    let mut seeds = Vec::new();
    let mut states = Vec::new();
    for &seed in &config.seeds {
        let dir = run_dir.join(format!("seed_{}", seed));
        fs::create_dir_all(&dir)?;
        let mut csv = fs::File::create(dir.join("metrics.csv"))?;
        writeln!(csv, "epoch,train_loss,val_loss,lr")?;
        let mut io_err = None;
        let result = train_seed(config, seed, data, |m| {
            if let Err(e) = writeln!(csv, "{},{},{},{}", m.epoch, m.train_loss, m.val_loss, m.lr) {
                io_err.get_or_insert(e);
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        match result {
            Ok(outcome) => {
                let path = dir.join("best.ckpt");
                outcome.best.checkpoint(None, outcome.best_epoch, &config_hash)?.save(&path)?;
                seeds.push(SeedSummary {
                    seed,
                    ok: true,
                    best_epoch: Some(outcome.best_epoch),
                    best_val_l2_cm: Some(outcome.best_val_l2_cm),
                    final_train_loss: outcome.metrics.last().map(|m| m.train_loss),
                    checkpoint: Some(path),
                    final_hash: Some(outcome.final_hash.clone()),
                    error: None,
                });
                states.push(outcome.best);
            }
            Err(e) => seeds.push(SeedSummary {
                seed,
                ok: false,
                best_epoch: None,
                best_val_l2_cm: None,
                final_train_loss: None,
                checkpoint: None,
                final_hash: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let summary = TrainSummary { config_hash, seeds };
    fs::write(run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((summary, states))
}
