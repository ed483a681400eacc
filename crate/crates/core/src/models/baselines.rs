//! Non-equivariant baselines over the canonical agent order.

use diffcore::{Graph, NodeId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use super::layers::{CausalConv, GruStack, Linear, ResMlp, OUTPUT_SCALE_M};
use super::scene::SceneBatch;
use super::spec::ModelSpec;
use crate::dataio::Point;
use crate::error::{Error, Result};

const AGENTS: usize = 23;
const FRAME: usize = 2 * AGENTS;
const MLP_LAYERS: usize = 5;
const GRU_DEPTH: usize = 2;

/// Constant-velocity continuation at the average past velocity.
pub fn linear_extrapolate(past: &[Point], horizon: usize) -> Result<Vec<Point>> {
    if past.len() < 2 {
        return Err(Error::InsufficientHistory { have: past.len(), need: 2 });
    }
    let first = past[0];
    let last = past[past.len() - 1];
    let steps = (past.len() - 1) as f64;
    let v = [(last[0] - first[0]) / steps, (last[1] - first[1]) / steps];
    Ok((1..=horizon).map(|t| [last[0] + v[0] * t as f64, last[1] + v[1] * t as f64]).collect())
}

pub(crate) fn lin_ext_dense(batch: &SceneBatch, input_len: usize, horizon: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.rows() * horizon);
    for s in &batch.scenes {
        for slot in &batch.slots {
            let future = linear_extrapolate(s.past(*slot, input_len), horizon)?;
            for c in 0..2 {
                data.extend(future.iter().map(|p| p[c]));
            }
        }
    }
    Ok(Tensor::matrix(batch.rows(), horizon, data)?)
}

/// Stacks per-step `B x 46` outputs into `(B*46) x steps`, rows ordered
/// (scene, agent, coordinate).
fn stack_steps(g: &mut Graph<'_>, steps: &[NodeId]) -> Result<NodeId> {
    let cols = steps
        .iter()
        .map(|&s| {
            let rows = g.shape(s)[0] * g.shape(s)[1];
            g.reshape(s, &[rows, 1])
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(g.concat_cols(&cols)?)
}

fn scaled(g: &mut Graph<'_>, layer: &Linear, x: NodeId) -> Result<NodeId> {
    let y = layer.forward(g, x)?;
    Ok(g.scale(y, OUTPUT_SCALE_M))
}

/// Flattened scene into a 5-layer residual MLP.
#[derive(Clone, Debug)]
pub(crate) struct MlpNet {
    net: ResMlp,
}

impl MlpNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Result<Self> {
        let input = 2 * (12 * spec.offense_len() + 11 * spec.input_len);
        let output = spec.predicted_agents() * 2 * spec.control_count();
        Ok(Self { net: ResMlp::new(store, rng, "mlp", input, spec.hidden(), MLP_LAYERS, Some(output))? })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.net.hidden_layers, self.net.hidden)
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch, k: usize) -> Result<NodeId> {
        let b = batch.len();
        let mut data = Vec::new();
        for s in &batch.scenes {
            for a in 0..AGENTS {
                data.extend(s.flat(a));
            }
        }
        let width = data.len() / b;
        let x = g.constant(Tensor::matrix(b, width, data)?);
        let out = self.net.forward(g, x)?;
        let out = g.scale(out, OUTPUT_SCALE_M);
        let rows = g.shape(out)[1] / k * b;
        Ok(g.reshape(out, &[rows, k])?)
    }
}

/// Two-layer GRU over whole-scene frames, continued autoregressively.
#[derive(Clone, Debug)]
pub(crate) struct SimpleGru {
    gru: GruStack,
    readout: Linear,
}

impl SimpleGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Result<Self> {
        let h = spec.embedding_width;
        Ok(Self {
            gru: GruStack::new(store, rng, "simple_gru.gru", FRAME, h, GRU_DEPTH)?,
            readout: Linear::new(store, rng, "simple_gru.readout", h, FRAME)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch, input_len: usize, horizon: usize) -> Result<NodeId> {
        let mut state = self.gru.zero_state(g, batch.len());
        let mut top = None;
        for t in 0..input_len {
            let x = g.constant(batch.frame_matrix(t)?);
            top = Some(self.gru.step(g, x, &mut state)?);
        }
        let mut outputs = Vec::with_capacity(horizon);
        let mut next = scaled(g, &self.readout, top.expect("input_len >= 2"))?;
        outputs.push(next);
        for _ in 1..horizon {
            let top = self.gru.step(g, next, &mut state)?;
            next = scaled(g, &self.readout, top)?;
            outputs.push(next);
        }
        stack_steps(g, &outputs)
    }
}

/// Separate two-layer encoder and decoder GRUs; the decoder emits one
/// frame per control point, fed back as its next input.
#[derive(Clone, Debug)]
pub(crate) struct GruEncDec {
    encoder: GruStack,
    decoder: GruStack,
    readout: Linear,
}

impl GruEncDec {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Result<Self> {
        let h = spec.embedding_width;
        Ok(Self {
            encoder: GruStack::new(store, rng, "gru_encdec.encoder", FRAME, h, GRU_DEPTH)?,
            decoder: GruStack::new(store, rng, "gru_encdec.decoder", FRAME, h, GRU_DEPTH)?,
            readout: Linear::new(store, rng, "gru_encdec.readout", h, FRAME)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch, input_len: usize, k: usize) -> Result<NodeId> {
        let mut state = self.encoder.zero_state(g, batch.len());
        for t in 0..input_len {
            let x = g.constant(batch.frame_matrix(t)?);
            self.encoder.step(g, x, &mut state)?;
        }
        let mut input = g.constant(batch.frame_matrix(input_len - 1)?);
        let mut outputs = Vec::with_capacity(k);
        for _ in 0..k {
            let top = self.decoder.step(g, input, &mut state)?;
            input = scaled(g, &self.readout, top)?;
            outputs.push(input);
        }
        stack_steps(g, &outputs)
    }
}

/// Per-agent GRU encoder with a single affine decoder emitting every
/// output at once. Rows never interact, so predictions do not depend on the
/// rest of the batch.
#[derive(Clone, Debug)]
pub(crate) struct RedStyle {
    encoder: GruStack,
    decoder: Linear,
}

impl RedStyle {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Result<Self> {
        let h = spec.embedding_width;
        Ok(Self {
            encoder: GruStack::new(store, rng, "red_style.encoder", 2, h, 1)?,
            decoder: Linear::new(store, rng, "red_style.decoder", h, 2 * spec.control_count())?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch, input_len: usize, k: usize) -> Result<NodeId> {
        let rows = batch.len() * AGENTS;
        let all = g.constant(batch.group_matrix(0, AGENTS)?);
        let mut state = self.encoder.zero_state(g, rows);
        let mut top = None;
        for t in 0..input_len {
            let x = g.slice_cols(all, 2 * t, 2)?;
            top = Some(self.encoder.step(g, x, &mut state)?);
        }
        let out = scaled(g, &self.decoder, top.expect("input_len >= 2"))?;
        Ok(g.reshape(out, &[rows * 2, k])?)
    }
}

/// Dilated causal convolutions over whole-scene frames, generating one
/// frame at a time from a sliding window that covers the receptive field.
#[derive(Clone, Debug)]
pub(crate) struct AutoregCnn {
    layers: Vec<CausalConv>,
    head: CausalConv,
}

const CNN_DILATIONS: [usize; 3] = [1, 2, 4];
const CNN_KERNEL: usize = 2;

impl AutoregCnn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Result<Self> {
        let h = spec.embedding_width;
        let mut layers = Vec::new();
        let mut cin = FRAME;
        for (i, d) in CNN_DILATIONS.iter().enumerate() {
            layers.push(CausalConv::new(store, rng, &format!("autoreg_cnn.conv{i}"), cin, h, CNN_KERNEL, *d)?);
            cin = h;
        }
        let head = CausalConv::new(store, rng, "autoreg_cnn.head", h, FRAME, 1, 1)?;
        Ok(Self { layers, head })
    }

    fn window(&self) -> usize {
        1 + self.layers.iter().map(CausalConv::receptive_field).sum::<usize>()
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch, input_len: usize, horizon: usize) -> Result<NodeId> {
        let b = batch.len();
        let mut frames =
            (0..input_len).map(|t| Ok(g.constant(batch.frame_matrix(t)?))).collect::<Result<Vec<NodeId>>>()?;
        let mut outputs = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let w = self.window().min(frames.len());
            let recent = &frames[frames.len() - w..];
            // time-major rows -> per-sequence rows
            let stacked = g.concat_rows(recent)?;
            let order = (0..b).flat_map(|s| (0..w).map(move |t| t * b + s)).collect();
            let mut h = g.gather_rows(stacked, order)?;
            for layer in &self.layers {
                h = layer.forward(g, h, w)?;
                h = g.relu(h);
            }
            let y = self.head.forward(g, h, w)?;
            let y = g.scale(y, OUTPUT_SCALE_M);
            let last = (0..b).map(|s| s * w + w - 1).collect();
            let next = g.gather_rows(y, last)?;
            outputs.push(next);
            frames.push(next);
        }
        stack_steps(g, &outputs)
    }
}
