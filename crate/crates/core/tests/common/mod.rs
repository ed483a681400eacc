#![allow(dead_code)]

use diffcore::{grad_check, GradCheckConfig, GradCheckReport, Mode};
use sparsetraj::dataio::{make_windows, synth_plays, PredictionWindow, SynthParams};
use sparsetraj::models::{ModelKind, ModelSpec, ModelState, SceneBatch};
use sparsetraj::motion::MotionOrder;

/// Small widths so full-graph checks stay fast.
pub fn toy_spec(kind: ModelKind, horizon: usize, input_len: usize, stride: usize) -> ModelSpec {
    let mut spec = ModelSpec::new(kind);
    spec.embedding_width = 8;
    spec.decoder_hidden = Some(8);
    spec.heads = 2;
    spec.horizon = horizon;
    spec.input_len = input_len;
    spec.output_stride = stride;
    spec.order = MotionOrder::ACCELERATION;
    spec
}

/// One window per synthetic play, each exactly `past + horizon` frames.
pub fn windows(seed: u64, plays: usize, past: usize, horizon: usize) -> Vec<PredictionWindow> {
    let len = past + horizon;
    let params = SynthParams { frames_per_play: len, ..SynthParams::default() };
    synth_plays(seed, plays, &params).iter().flat_map(|ex| make_windows(ex, len, past).unwrap()).collect()
}

/// Central-difference check of every parameter of a toy GraN-MA whose
/// Huber loss is taken on densified outputs.
pub fn granma_grad_check(seed: u64, tolerance: f64) -> GradCheckReport {
    let spec = toy_spec(ModelKind::Granma, 8, 4, 3);
    let state = ModelState::init(spec.clone(), seed).unwrap();
    let batch = SceneBatch::from_windows(&spec, &windows(seed, 2, 4, 8)).unwrap();
    let targets = batch.targets.clone().unwrap();
    let mut store = state.store().clone();
    grad_check(&mut store, GradCheckConfig::new(1e-5, tolerance).with_mode(Mode::Train), |g| {
        let out = state.forward(g, &batch).expect("forward");
        let h = g.huber_elementwise(out.dense, &targets)?;
        Ok(g.mean_reduce(h))
    })
    .unwrap()
}
