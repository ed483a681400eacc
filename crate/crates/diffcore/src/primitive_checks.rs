//! Randomized gradient checks for each primitive.
//!
//! Every check draws small random shapes and values from a seed, reduces the
//! primitive's output to a scalar with fixed random weights, and compares the
//! reverse pass against central differences. Inputs are kept away from the
//! kinks of ReLU and Huber so the finite-difference oracle stays smooth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{BnBuffers, Graph, Mode, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    DenseAffine,
    Relu,
    BatchNormTrain,
    BatchNormEval,
    Softmax,
    ScaledDotAttention,
    GruCell,
    CausalConv1d,
    Concat,
    SumOverSet,
    HuberElementwise,
    MeanReduce,
    Elementwise,
    GatherSlice,
    MatmulConst,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::DenseAffine,
        Primitive::Relu,
        Primitive::BatchNormTrain,
        Primitive::BatchNormEval,
        Primitive::Softmax,
        Primitive::ScaledDotAttention,
        Primitive::GruCell,
        Primitive::CausalConv1d,
        Primitive::Concat,
        Primitive::SumOverSet,
        Primitive::HuberElementwise,
        Primitive::MeanReduce,
        Primitive::Elementwise,
        Primitive::GatherSlice,
        Primitive::MatmulConst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::DenseAffine => "dense_affine",
            Primitive::Relu => "relu",
            Primitive::BatchNormTrain => "batch_norm(train)",
            Primitive::BatchNormEval => "batch_norm(eval)",
            Primitive::Softmax => "softmax",
            Primitive::ScaledDotAttention => "scaled_dot_attention",
            Primitive::GruCell => "gru_cell",
            Primitive::CausalConv1d => "causal_conv1d",
            Primitive::Concat => "concat",
            Primitive::SumOverSet => "sum_over_set",
            Primitive::HuberElementwise => "huber_elementwise",
            Primitive::MeanReduce => "mean_reduce",
            Primitive::Elementwise => "add/sub/mul/scale",
            Primitive::GatherSlice => "gather_rows/slice_cols/reshape",
            Primitive::MatmulConst => "matmul_const",
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[margin, 1]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rescales each column's deviations so its standard deviation is at least
/// `min_std` (nearly constant columns make batch norm ill-conditioned).
fn spread_columns(mut t: Tensor, min_std: f64) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let data = t.data_mut();
    for j in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (data[r * cols + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        if std < min_std {
            for r in 0..rows {
                let dev = data[r * cols + j] - mean;
                data[r * cols + j] = if std > 1e-12 {
                    mean + dev * min_std / std
                } else {
                    mean + if r % 2 == 0 { min_std } else { -min_std }
                };
            }
        }
    }
    t
}

struct Case {
    store: ParamStore,
    ids: Vec<ParamId>,
    consts: Vec<Tensor>,
    ints: Vec<usize>,
    mode: Mode,
    bn: Option<BnBuffers>,
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn build_case(prim: Primitive, rng: &mut ChaCha8Rng) -> Case {
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    let mut consts = Vec::new();
    let mut ints = Vec::new();
    let mut mode = Mode::Train;
    let mut bn = None;
    let mut add = |store: &mut ParamStore, name: &str, t: Tensor| ids.push(store.add_param(name, t).unwrap());
    match prim {
        Primitive::DenseAffine => {
            let d = dims(rng, 3, 1, 5);
            add(&mut store, "x", uniform(rng, &[d[0], d[1]], -1.0, 1.0));
            add(&mut store, "w", uniform(rng, &[d[1], d[2]], -1.0, 1.0));
            add(&mut store, "b", uniform(rng, &[d[2]], -1.0, 1.0));
        }
        Primitive::Relu => {
            let d = dims(rng, 2, 1, 6);
            add(&mut store, "x", away_from_zero(rng, &[d[0], d[1]], 0.05));
        }
        Primitive::BatchNormTrain | Primitive::BatchNormEval => {
            let d = dims(rng, 2, 2, 6);
            add(&mut store, "x", spread_columns(uniform(rng, &[d[0], d[1]], -2.0, 2.0), 1.0));
            add(&mut store, "gamma", uniform(rng, &[d[1]], 0.5, 1.5));
            add(&mut store, "beta", uniform(rng, &[d[1]], -0.5, 0.5));
            let mean = store.add_buffer("rm", uniform(rng, &[d[1]], -0.5, 0.5)).unwrap();
            let var = store.add_buffer("rv", uniform(rng, &[d[1]], 0.5, 2.0)).unwrap();
            bn = Some(BnBuffers { mean, var });
            if prim == Primitive::BatchNormEval {
                mode = Mode::Eval;
            }
        }
        Primitive::Softmax => {
            let d = dims(rng, 2, 1, 6);
            add(&mut store, "x", uniform(rng, &[d[0], d[1]], -2.0, 2.0));
        }
        Primitive::ScaledDotAttention => {
            let groups = rng.gen_range(1..=3);
            let group = rng.gen_range(1..=5);
            let heads = rng.gen_range(1..=3);
            let dh = rng.gen_range(1..=3);
            let shape = [groups * group, heads * dh];
            add(&mut store, "q", uniform(rng, &shape, -1.0, 1.0));
            add(&mut store, "k", uniform(rng, &shape, -1.0, 1.0));
            add(&mut store, "v", uniform(rng, &shape, -1.0, 1.0));
            ints.extend([group, heads]);
        }
        Primitive::GruCell => {
            let d = dims(rng, 3, 1, 4);
            let (rows, input, hidden) = (d[0], d[1], d[2]);
            add(&mut store, "x", uniform(rng, &[rows, input], -1.0, 1.0));
            add(&mut store, "h", uniform(rng, &[rows, hidden], -1.0, 1.0));
            add(&mut store, "wx", uniform(rng, &[input, 3 * hidden], -1.0, 1.0));
            add(&mut store, "wh", uniform(rng, &[hidden, 3 * hidden], -1.0, 1.0));
            add(&mut store, "bx", uniform(rng, &[3 * hidden], -0.5, 0.5));
            add(&mut store, "bh", uniform(rng, &[3 * hidden], -0.5, 0.5));
        }
        Primitive::CausalConv1d => {
            let batch = rng.gen_range(1..=3);
            let seq = rng.gen_range(1..=6);
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let kernel = rng.gen_range(1..=3);
            let dilation = rng.gen_range(1..=2);
            add(&mut store, "x", uniform(rng, &[batch * seq, cin], -1.0, 1.0));
            add(&mut store, "w", uniform(rng, &[kernel * cin, cout], -1.0, 1.0));
            add(&mut store, "b", uniform(rng, &[cout], -1.0, 1.0));
            ints.extend([seq, kernel, dilation]);
        }
        Primitive::Concat => {
            let rows = rng.gen_range(1..=4);
            let parts = rng.gen_range(2..=3);
            for i in 0..parts {
                let c = rng.gen_range(1..=4);
                add(&mut store, &format!("p{}", i), uniform(rng, &[rows, c], -1.0, 1.0));
            }
            ints.push(rng.gen_range(0..2));
        }
        Primitive::SumOverSet => {
            let groups = rng.gen_range(1..=4);
            let set = rng.gen_range(1..=5);
            let c = rng.gen_range(1..=4);
            add(&mut store, "x", uniform(rng, &[groups * set, c], -1.0, 1.0));
            ints.push(set);
        }
        Primitive::HuberElementwise => {
            let d = dims(rng, 2, 1, 6);
            let n = d[0] * d[1];
            let target = uniform(rng, &[d[0], d[1]], -2.0, 2.0);
            // offsets on both branches, at least 0.05 from the threshold
            let offsets: Vec<f64> = (0..n)
                .map(|_| {
                    let m = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.95) } else { rng.gen_range(1.05..3.0) };
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let x: Vec<f64> = target.data().iter().zip(&offsets).map(|(t, o)| t + o).collect();
            add(&mut store, "x", Tensor::new(vec![d[0], d[1]], x).unwrap());
            consts.push(target);
        }
        Primitive::MeanReduce => {
            let d = dims(rng, 2, 1, 6);
            add(&mut store, "x", uniform(rng, &[d[0], d[1]], -1.0, 1.0));
        }
        Primitive::Elementwise => {
            let d = dims(rng, 2, 1, 5);
            add(&mut store, "a", uniform(rng, &[d[0], d[1]], -1.0, 1.0));
            add(&mut store, "b", uniform(rng, &[d[0], d[1]], -1.0, 1.0));
            consts.push(uniform(rng, &[d[0], d[1]], -1.0, 1.0));
        }
        Primitive::GatherSlice => {
            let rows = rng.gen_range(1..=5);
            let cols = rng.gen_range(2..=5);
            add(&mut store, "x", uniform(rng, &[rows, cols], -1.0, 1.0));
            let picks = rng.gen_range(1..=6);
            for _ in 0..picks {
                ints.push(rng.gen_range(0..rows));
            }
            let start = rng.gen_range(0..cols - 1);
            let len = rng.gen_range(1..=cols - start);
            ints.push(start);
            ints.push(len);
        }
        Primitive::MatmulConst => {
            let d = dims(rng, 3, 1, 5);
            add(&mut store, "x", uniform(rng, &[d[0], d[1]], -1.0, 1.0));
            consts.push(uniform(rng, &[d[1], d[2]], -1.0, 1.0));
        }
    }
    Case { store, ids, consts, ints, mode, bn }
}

fn apply(prim: Primitive, g: &mut Graph<'_>, case: &Case) -> Result<NodeId> {
    let p: Vec<NodeId> = case.ids.iter().map(|&id| g.param(id)).collect();
    match prim {
        Primitive::DenseAffine => g.dense_affine(p[0], p[1], Some(p[2])),
        Primitive::Relu => Ok(g.relu(p[0])),
        Primitive::BatchNormTrain | Primitive::BatchNormEval => g.batch_norm(p[0], p[1], p[2], case.bn.unwrap()),
        Primitive::Softmax => Ok(g.softmax(p[0])),
        Primitive::ScaledDotAttention => g.scaled_dot_attention(p[0], p[1], p[2], case.ints[0], case.ints[1]),
        Primitive::GruCell => g.gru_cell(p[0], p[1], p[2], p[3], p[4], p[5]),
        Primitive::CausalConv1d => g.causal_conv1d(p[0], p[1], p[2], case.ints[0], case.ints[1], case.ints[2]),
        Primitive::Concat => {
            if case.ints[0] == 0 {
                g.concat_cols(&p)
            } else {
                // stack along rows after slicing every part to one column
                let cols: Vec<NodeId> = p.iter().map(|&x| g.slice_cols(x, 0, 1)).collect::<Result<_>>()?;
                g.concat_rows(&cols)
            }
        }
        Primitive::SumOverSet => g.sum_over_set(p[0], case.ints[0]),
        Primitive::HuberElementwise => g.huber_elementwise(p[0], &case.consts[0]),
        Primitive::MeanReduce => Ok(g.mean_reduce(p[0])),
        Primitive::Elementwise => {
            let s = g.add(p[0], p[1])?;
            let d = g.sub(s, p[1])?;
            let m = g.mul(d, p[1])?;
            let k = g.scale(m, 1.7);
            g.add_const(k, &case.consts[0])
        }
        Primitive::GatherSlice => {
            let n = case.ints.len();
            let index = case.ints[..n - 2].to_vec();
            let gathered = g.gather_rows(p[0], index)?;
            let sliced = g.slice_cols(gathered, case.ints[n - 2], case.ints[n - 1])?;
            let shape = g.shape(sliced).to_vec();
            let total = shape.iter().product::<usize>();
            let flat = g.reshape(sliced, &[1, total])?;
            g.reshape(flat, &shape)
        }
        Primitive::MatmulConst => g.matmul_const(p[0], case.consts.last().unwrap().clone()),
    }
}

/// Runs one randomized gradient check of `prim`.
pub fn check_primitive(prim: Primitive, seed: u64, eps: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = build_case(prim, &mut rng);
    // output shape is only known after a forward pass
    let out_len = {
        let mut g = Graph::new(&case.store, case.mode);
        let out = apply(prim, &mut g, &case)?;
        g.value(out).len()
    };
    let weights = uniform(&mut rng, &[out_len], -1.0, 1.0);
    let mut store = case.store.clone();
    let config = GradCheckConfig::new(eps, tolerance).with_mode(case.mode);
    grad_check(&mut store, config, |g| {
        let out = apply(prim, g, &case)?;
        let shape = g.shape(out).to_vec();
        let w = g.constant(weights.clone().reshaped(shape)?);
        let prod = g.mul(out, w)?;
        let mean = g.mean_reduce(prod);
        Ok(g.scale(mean, out_len as f64))
    })
}
