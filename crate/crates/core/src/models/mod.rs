//! Predictors and the shared inference path.
//!
//! Every network writes its output as a matrix with one row per
//! (scene, predicted agent, coordinate). Sparse heads emit `K` control
//! points per row, which are densified in-graph by the affine map from
//! [`crate::motion::DensifyOperator`], so losses on dense outputs
//! backpropagate through the interpolation. Dense-only networks emit every
//! step; with a stride above one their outputs are subsampled and
//! densified the same way.

mod baselines;
mod granma;
mod layers;
mod scene;
mod spec;

use std::path::Path;

use diffcore::{Adam, Checkpoint, Graph, Mode, NodeId, ParamStore, RunMetadata, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baselines::linear_extrapolate;
pub use granma::relational_layer;
pub use scene::{window_targets, AgentSlot, PredictedAgent, SceneBatch, SceneInput, ScenePrediction};
pub(crate) use spec::hex_digest;
pub use spec::{ModelKind, ModelSpec};

use crate::error::{Error, Result};
use crate::motion::DensifyOperator;

#[derive(Clone, Debug)]
enum Net {
    LinExt,
    Mlp(baselines::MlpNet),
    SimpleGru(baselines::SimpleGru),
    GruEncDec(baselines::GruEncDec),
    RedStyle(baselines::RedStyle),
    AutoregCnn(baselines::AutoregCnn),
    Granma(granma::Granma),
}

/// Nodes produced by one forward pass. Both are `rows x steps` with rows
/// ordered (scene, agent, coordinate).
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub dense: NodeId,
    /// `rows x K`; absent when a dense network runs at stride one.
    pub controls: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredModel {
    spec: ModelSpec,
    seed: u64,
}

/// A predictor's configuration and learned parameters.
#[derive(Clone, Debug)]
pub struct ModelState {
    spec: ModelSpec,
    seed: u64,
    store: ParamStore,
    net: Net,
    densify: DensifyOperator,
    /// `K x horizon` control basis as a tensor.
    basis: Tensor,
}

impl ModelState {
    /// Builds a freshly initialised model; weights depend only on `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match spec.kind {
            ModelKind::LinExt => Net::LinExt,
            ModelKind::Mlp => Net::Mlp(baselines::MlpNet::new(&mut store, &mut rng, &spec)?),
            ModelKind::SimpleGru => Net::SimpleGru(baselines::SimpleGru::new(&mut store, &mut rng, &spec)?),
            ModelKind::GruEncdec => Net::GruEncDec(baselines::GruEncDec::new(&mut store, &mut rng, &spec)?),
            ModelKind::RedStyle => Net::RedStyle(baselines::RedStyle::new(&mut store, &mut rng, &spec)?),
            ModelKind::AutoregCnn => Net::AutoregCnn(baselines::AutoregCnn::new(&mut store, &mut rng, &spec)?),
            ModelKind::Granma => Net::Granma(granma::Granma::new(&mut store, &mut rng, &spec)?),
        };
        let densify = DensifyOperator::new(spec.horizon, spec.output_stride, spec.order)?;
        let basis = Tensor::matrix(densify.control_count(), spec.horizon, densify.control_basis.clone())?;
        Ok(Self { spec, seed, store, net, densify, basis })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `(hidden layers, hidden width)` of the GraN-MA decoders or of the
    /// MLP baseline.
    pub fn hidden_shape(&self) -> Option<(usize, usize)> {
        match &self.net {
            Net::Granma(n) => Some(n.decoder_shape()),
            Net::Mlp(m) => Some(m.shape()),
            _ => None,
        }
    }

    /// Builds the forward pass into `g`, which must borrow this model's
    /// store.
    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let k = spec.control_count();
        let (n, h) = (spec.input_len, spec.horizon);
        let (raw, sparse) = match &self.net {
            Net::LinExt => (g.constant(baselines::lin_ext_dense(batch, n, h)?), false),
            Net::Mlp(m) => (m.forward(g, batch, k)?, true),
            Net::SimpleGru(m) => (m.forward(g, batch, n, h)?, false),
            Net::GruEncDec(m) => (m.forward(g, batch, n, k)?, true),
            Net::RedStyle(m) => (m.forward(g, batch, n, k)?, true),
            Net::AutoregCnn(m) => (m.forward(g, batch, n, h)?, false),
            Net::Granma(m) => (m.forward(g, batch, k)?, true),
        };
        if g.shape(raw)[0] != batch.rows() {
            return Err(Error::Shape(format!("network produced {:?} for {} rows", g.shape(raw), batch.rows())));
        }
        if spec.output_stride == 1 {
            return Ok(ForwardOutput { dense: raw, controls: if sparse { Some(raw) } else { None } });
        }
        let controls = if sparse {
            raw
        } else {
            let mut select = Tensor::zeros(&[h, k]);
            for (j, off) in self.densify.offsets.iter().enumerate() {
                select.data_mut()[(off - 1) * k + j] = 1.0;
            }
            g.matmul_const(raw, select)?
        };
        let dense = self.densify_node(g, controls, batch)?;
        Ok(ForwardOutput { dense, controls: Some(controls) })
    }

    /// In-graph densification of `rows x K` controls.
    fn densify_node(&self, g: &mut Graph<'_>, controls: NodeId, batch: &SceneBatch) -> Result<NodeId> {
        let h = self.spec.horizon;
        let lin = g.matmul_const(controls, self.basis.clone())?;
        let mut offset = Vec::with_capacity(batch.rows() * h);
        for anchor in &batch.anchors {
            offset.extend(self.densify.anchor_response(anchor));
        }
        Ok(g.add_const(lin, &Tensor::matrix(batch.rows(), h, offset)?)?)
    }

    pub fn predict(&self, scene: &SceneInput) -> Result<ScenePrediction> {
        Ok(self.predict_batch(std::slice::from_ref(scene))?.remove(0))
    }

    /// Eval-mode inference. Batch norm uses running statistics, so each
    /// scene's prediction does not depend on the rest of the batch.
    pub fn predict_batch(&self, scenes: &[SceneInput]) -> Result<Vec<ScenePrediction>> {
        let batch = SceneBatch::new(&self.spec, scenes.to_vec())?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let out = self.forward(&mut g, &batch)?;
        let dense = g.value(out.dense);
        let controls = out.controls.map(|c| g.value(c));
        let h = self.spec.horizon;
        let k = self.spec.control_count();
        let agents = batch.slots.len();
        let mut preds = Vec::with_capacity(scenes.len());
        for s in 0..scenes.len() {
            let mut list = Vec::with_capacity(agents);
            for (a, slot) in batch.slots.iter().enumerate() {
                let row = (s * agents + a) * 2;
                let (xs, ys) = (dense.row(row), dense.row(row + 1));
                let track = xs.iter().zip(ys).map(|(x, y)| [*x, *y]).collect();
                let ctrl = match controls {
                    Some(c) if self.spec.output_stride > 1 => {
                        let (cx, cy) = (c.row(row), c.row(row + 1));
                        Some((0..k).map(|j| (self.densify.offsets[j], [cx[j], cy[j]])).collect())
                    }
                    _ => None,
                };
                list.push(PredictedAgent { slot: *slot, dense: track, controls: ctrl });
            }
            debug_assert!(list.iter().all(|a| a.dense.len() == h));
            preds.push(ScenePrediction { agents: list });
        }
        Ok(preds)
    }

    /// Snapshot of parameters, optimizer state and the embedded spec.
    pub fn checkpoint(&self, optimizer: Option<&Adam>, epoch: usize, config_hash: &str) -> Result<Checkpoint> {
        let extra = serde_json::to_value(StoredModel { spec: self.spec.clone(), seed: self.seed })?;
        let metadata = RunMetadata { seed: self.seed, epoch, config_hash: config_hash.to_string(), extra };
        Ok(Checkpoint::capture(&self.store, optimizer, metadata))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let stored: StoredModel = serde_json::from_value(ckpt.metadata.extra.clone())
            .map_err(|e| Error::Spec(format!("checkpoint lacks a model spec: {}", e)))?;
        let mut state = Self::init(stored.spec, stored.seed)?;
        ckpt.restore_into(&mut state.store)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint(None, 0, "")?.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt =
            Checkpoint::load(path).map_err(|e| Error::Checkpoint { path: path.into(), detail: e.to_string() })?;
        Self::from_checkpoint(&ckpt).map_err(|e| Error::Checkpoint { path: path.into(), detail: e.to_string() })
    }

    /// Loads a checkpoint and insists its embedded spec equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelSpec) -> Result<Self> {
        let state = Self::load(path)?;
        if state.spec != *expected {
            return Err(Error::Checkpoint {
                path: path.into(),
                detail: format!("spec mismatch: checkpoint has {:?}, expected {:?}", state.spec, expected),
            });
        }
        Ok(state)
    }
}
