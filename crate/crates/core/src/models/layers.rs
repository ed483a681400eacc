//! Parameterised building blocks shared by the predictors.

use diffcore::{BnBuffers, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Fixed gain on every position-valued output, so unit-scale activations
/// map to pitch-scale metres.
pub(crate) const OUTPUT_SCALE_M: f64 = 10.0;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
        let b = store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        Ok(g.dense_affine(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    buffers: BnBuffers,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add_param(format!("{name}.gamma"), Tensor::full(&[width], 1.0))?;
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(&[width]))?;
        let mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[width]))?;
        let var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[width], 1.0))?;
        Ok(Self { gamma, beta, buffers: BnBuffers { mean, var } })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        Ok(g.batch_norm(x, gamma, beta, self.buffers)?)
    }
}

/// ReLU, batch norm, then affine.
#[derive(Clone, Debug)]
struct PreAct {
    bn: BatchNorm,
    lin: Linear,
}

impl PreAct {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm::new(store, &format!("{name}.bn"), fan_in)?,
            lin: Linear::new(store, rng, &format!("{name}.lin"), fan_in, fan_out)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let h = g.relu(x);
        let h = self.bn.forward(g, h)?;
        self.lin.forward(g, h)
    }
}

/// MLP with an odd number of hidden layers: one affine layer followed by
/// pre-activation residual blocks of two layers each, plus an optional
/// output projection.
#[derive(Clone, Debug)]
pub(crate) struct ResMlp {
    first: Linear,
    blocks: Vec<(PreAct, PreAct)>,
    head: Option<PreAct>,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl ResMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: Option<usize>,
    ) -> Result<Self> {
        debug_assert!(hidden_layers % 2 == 1);
        let first = Linear::new(store, rng, &format!("{name}.l0"), input, hidden)?;
        let mut blocks = Vec::new();
        for i in 0..hidden_layers / 2 {
            let a = PreAct::new(store, rng, &format!("{name}.res{i}.a"), hidden, hidden)?;
            let b = PreAct::new(store, rng, &format!("{name}.res{i}.b"), hidden, hidden)?;
            blocks.push((a, b));
        }
        let head = match output {
            Some(out) => Some(PreAct::new(store, rng, &format!("{name}.out"), hidden, out)?),
            None => None,
        };
        Ok(Self { first, blocks, head, hidden, hidden_layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = self.first.forward(g, x)?;
        for (a, b) in &self.blocks {
            let t = a.forward(g, h)?;
            let t = b.forward(g, t)?;
            h = g.add(h, t)?;
        }
        match &self.head {
            Some(head) => head.forward(g, h),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GruLayer {
    w_input: ParamId,
    w_hidden: ParamId,
    b_input: ParamId,
    b_hidden: ParamId,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_input: store.add_uniform(format!("{name}.w_input"), &[input, 3 * hidden], hidden, rng)?,
            w_hidden: store.add_uniform(format!("{name}.w_hidden"), &[hidden, 3 * hidden], hidden, rng)?,
            b_input: store.add_uniform(format!("{name}.b_input"), &[3 * hidden], hidden, rng)?,
            b_hidden: store.add_uniform(format!("{name}.b_hidden"), &[3 * hidden], hidden, rng)?,
            hidden,
        })
    }

    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId) -> Result<NodeId> {
        let wi = g.param(self.w_input);
        let wh = g.param(self.w_hidden);
        let bi = g.param(self.b_input);
        let bh = g.param(self.b_hidden);
        Ok(g.gru_cell(x, h, wi, wh, bi, bh)?)
    }
}

/// Stacked GRU layers stepped one time step at a time.
#[derive(Clone, Debug)]
pub(crate) struct GruStack {
    layers: Vec<GruLayer>,
}

impl GruStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| GruLayer::new(store, rng, &format!("{name}.l{i}"), if i == 0 { input } else { hidden }, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn zero_state(&self, g: &mut Graph<'_>, rows: usize) -> Vec<NodeId> {
        self.layers.iter().map(|l| g.constant(Tensor::zeros(&[rows, l.hidden]))).collect()
    }

    /// Advances every layer by one step and returns the top layer's output.
    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, state: &mut [NodeId]) -> Result<NodeId> {
        let mut input = x;
        for (layer, h) in self.layers.iter().zip(state.iter_mut()) {
            *h = layer.step(g, input, *h)?;
            input = *h;
        }
        Ok(input)
    }
}

/// Multi-head self-attention over consecutive groups of rows with a
/// residual connection from the input.
#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), width, width)?,
            k: Linear::new(store, rng, &format!("{name}.k"), width, width)?,
            v: Linear::new(store, rng, &format!("{name}.v"), width, width)?,
            o: Linear::new(store, rng, &format!("{name}.o"), width, width)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, group: usize) -> Result<NodeId> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = g.scaled_dot_attention(q, k, v, group, self.heads)?;
        let o = self.o.forward(g, a)?;
        Ok(g.add(x, o)?)
    }
}

/// Causal convolution layer, weights laid out `(kernel*C_in) x C_out`.
#[derive(Clone, Debug)]
pub(crate) struct CausalConv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    pub dilation: usize,
}

impl CausalConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let fan_in = kernel * cin;
        Ok(Self {
            w: store.add_uniform(format!("{name}.w"), &[fan_in, cout], fan_in, rng)?,
            b: store.add_uniform(format!("{name}.b"), &[cout], fan_in, rng)?,
            kernel,
            dilation,
        })
    }

    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, seq_len: usize) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        Ok(g.causal_conv1d(x, w, b, seq_len, self.kernel, self.dilation)?)
    }
}
