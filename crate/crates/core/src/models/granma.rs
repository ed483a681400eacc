//! Graph network with multi-head attention.
//!
//! Each agent's flattened input is encoded by an MLP. Within each team a
//! fully connected relational layer computes `e_ij = φe([v_i, v_j])` for all
//! ordered pairs (self-pairs included) and `o_i = φv(Σ_j e_ij)`. The ball is
//! only encoded. All 23 embeddings then pass through one multi-head
//! self-attention block with a residual connection, and per-team decoders
//! map each agent's attended embedding to `2K` control-point coordinates.
//! Decoder weights are shared within a team so the network is equivariant
//! to the order of agents inside a team.

use diffcore::{Graph, NodeId, ParamStore};
use rand_chacha::ChaCha8Rng;

use super::layers::{ResMlp, SelfAttention, OUTPUT_SCALE_M};
use super::scene::SceneBatch;
use super::spec::ModelSpec;
use crate::error::Result;

const ENCODER_LAYERS: usize = 3;
const DECODER_LAYERS: usize = 5;
const TEAM: usize = 11;
const SCENE: usize = 23;

/// Fully connected relational layer over consecutive sets of `set` rows of
/// `v`: `o_i = phi_v(Σ_j phi_e([v_i, v_j]))`.
pub fn relational_layer<E, V>(g: &mut Graph<'_>, v: NodeId, set: usize, mut phi_e: E, mut phi_v: V) -> Result<NodeId>
where
    E: FnMut(&mut Graph<'_>, NodeId) -> Result<NodeId>,
    V: FnMut(&mut Graph<'_>, NodeId) -> Result<NodeId>,
{
    let groups = g.shape(v)[0] / set;
    let mut idx_i = Vec::with_capacity(groups * set * set);
    let mut idx_j = Vec::with_capacity(groups * set * set);
    for grp in 0..groups {
        for i in 0..set {
            for j in 0..set {
                idx_i.push(grp * set + i);
                idx_j.push(grp * set + j);
            }
        }
    }
    let vi = g.gather_rows(v, idx_i)?;
    let vj = g.gather_rows(v, idx_j)?;
    let pairs = g.concat_cols(&[vi, vj])?;
    let e = phi_e(g, pairs)?;
    let summed = g.sum_over_set(e, set)?;
    phi_v(g, summed)
}

/// Row order that turns `[balls; attackers; defenders]` (each block
/// scene-major) into per-scene groups of 23.
fn scene_major(b: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(b * SCENE);
    for s in 0..b {
        order.push(s);
        order.extend((0..TEAM).map(|i| b + s * TEAM + i));
        order.extend((0..TEAM).map(|i| b + b * TEAM + s * TEAM + i));
    }
    order
}

#[derive(Clone, Debug)]
struct TeamGraph {
    edge: ResMlp,
    node: ResMlp,
}

impl TeamGraph {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            edge: ResMlp::new(store, rng, &format!("{name}.edge"), 2 * width, width, ENCODER_LAYERS, None)?,
            node: ResMlp::new(store, rng, &format!("{name}.node"), width, width, ENCODER_LAYERS, None)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, v: NodeId) -> Result<NodeId> {
        relational_layer(g, v, TEAM, |g, x| self.edge.forward(g, x), |g, x| self.node.forward(g, x))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Granma {
    enc_ball: ResMlp,
    enc_att: ResMlp,
    enc_def: ResMlp,
    graph_att: TeamGraph,
    graph_def: TeamGraph,
    attention: SelfAttention,
    dec_ball: Option<ResMlp>,
    dec_att: Option<ResMlp>,
    dec_def: ResMlp,
}

impl Granma {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Result<Self> {
        let e = spec.embedding_width;
        let off_in = 2 * spec.offense_len();
        let def_in = 2 * spec.input_len;
        let out = 2 * spec.control_count();
        let hidden = spec.hidden();
        let decoder = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            ResMlp::new(store, rng, name, e, hidden, DECODER_LAYERS, Some(out))
        };
        let enc_ball = ResMlp::new(store, rng, "granma.enc_ball", off_in, e, ENCODER_LAYERS, None)?;
        let enc_att = ResMlp::new(store, rng, "granma.enc_att", off_in, e, ENCODER_LAYERS, None)?;
        let enc_def = ResMlp::new(store, rng, "granma.enc_def", def_in, e, ENCODER_LAYERS, None)?;
        let graph_att = TeamGraph::new(store, rng, "granma.graph_att", e)?;
        let graph_def = TeamGraph::new(store, rng, "granma.graph_def", e)?;
        let attention = SelfAttention::new(store, rng, "granma.attn", e, spec.heads)?;
        let (dec_ball, dec_att) = if spec.conditioned {
            (None, None)
        } else {
            (Some(decoder(store, rng, "granma.dec_ball")?), Some(decoder(store, rng, "granma.dec_att")?))
        };
        let dec_def = decoder(store, rng, "granma.dec_def")?;
        Ok(Self { enc_ball, enc_att, enc_def, graph_att, graph_def, attention, dec_ball, dec_att, dec_def })
    }

    /// `(hidden layers, hidden width)` of each decoder.
    pub fn decoder_shape(&self) -> (usize, usize) {
        (self.dec_def.hidden_layers, self.dec_def.hidden)
    }

    /// Control points, `(B * agents * 2) x K`.
    pub fn forward(&self, g: &mut Graph<'_>, batch: &SceneBatch, k: usize) -> Result<NodeId> {
        let b = batch.len();
        let ball_in = g.constant(batch.group_matrix(0, 1)?);
        let att_in = g.constant(batch.group_matrix(1, TEAM)?);
        let def_in = g.constant(batch.group_matrix(12, TEAM)?);

        let ball = self.enc_ball.forward(g, ball_in)?;
        let att = self.enc_att.forward(g, att_in)?;
        let att = self.graph_att.forward(g, att)?;
        let def = self.enc_def.forward(g, def_in)?;
        let def = self.graph_def.forward(g, def)?;

        // [balls; attackers; defenders] -> scene-major tokens
        let stacked = g.concat_rows(&[ball, att, def])?;
        let tokens = g.gather_rows(stacked, scene_major(b))?;
        let tokens = self.attention.forward(g, tokens, SCENE)?;

        let pick = |first: usize, count: usize| -> Vec<usize> {
            (0..b).flat_map(|s| (0..count).map(move |i| s * SCENE + first + i)).collect()
        };
        let def_tok = g.gather_rows(tokens, pick(12, TEAM))?;
        let def_out = self.dec_def.forward(g, def_tok)?;
        let out = match (&self.dec_ball, &self.dec_att) {
            (Some(dec_ball), Some(dec_att)) => {
                let ball_tok = g.gather_rows(tokens, pick(0, 1))?;
                let att_tok = g.gather_rows(tokens, pick(1, TEAM))?;
                let ball_out = dec_ball.forward(g, ball_tok)?;
                let att_out = dec_att.forward(g, att_tok)?;
                let stacked = g.concat_rows(&[ball_out, att_out, def_out])?;
                g.gather_rows(stacked, scene_major(b))?
            }
            _ => def_out,
        };
        let out = g.scale(out, OUTPUT_SCALE_M);
        let rows = g.shape(out)[0];
        Ok(g.reshape(out, &[rows * 2, k])?)
    }
}
