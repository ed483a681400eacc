use diffcore::gradcheck::{analytic_gradients, compare_gradients};
use diffcore::primitive_checks::{check_primitive, Primitive};
use diffcore::{grad_check, BnBuffers, GradCheckConfig, Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(std::env::var("GC_CASES").ok().and_then(|v| v.parse().ok()).unwrap_or(100)))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for prim in Primitive::ALL {
            let report = check_primitive(prim, seed, 1e-3, 1e-4).unwrap();
            prop_assert!(
                report.passed,
                "{} seed {}: rel {:.3e} at {}[{}] analytic {} numeric {}",
                prim.name(), seed, report.max_rel_error, report.worst_param,
                report.worst_index, report.analytic, report.numeric
            );
        }
    }
}

#[test]
fn relu_gradient_masks_negative_inputs() {
    let mut s = ParamStore::new();
    let id = s.add_param("x", Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new(&s, Mode::Train);
    let x = g.param(id);
    let y = g.relu(x);
    let out = g.mean_reduce(y);
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[0.0, 0.5]);
}

#[test]
fn identity_affine_is_identity() {
    let mut s = ParamStore::new();
    let w = s.add_param("w", Tensor::identity(3)).unwrap();
    let b = s.add_param("b", Tensor::zeros(&[3])).unwrap();
    let mut g = Graph::new(&s, Mode::Eval);
    let input = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 0.0, -7.0]).unwrap();
    let x = g.constant(input.clone());
    let (wn, bn) = (g.param(w), g.param(b));
    let y = g.dense_affine(x, wn, Some(bn)).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}

#[test]
fn shape_mismatch_names_the_primitive() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s, Mode::Eval);
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.dense_affine(x, w, None).unwrap_err().to_string();
    assert!(err.contains("dense_affine") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{}", err);
}

#[test]
fn train_batch_norm_needs_two_rows() {
    let mut s = ParamStore::new();
    let gamma = s.add_param("g", Tensor::full(&[2], 1.0)).unwrap();
    let beta = s.add_param("b", Tensor::zeros(&[2])).unwrap();
    let mean = s.add_buffer("m", Tensor::zeros(&[2])).unwrap();
    let var = s.add_buffer("v", Tensor::full(&[2], 1.0)).unwrap();
    let mut g = Graph::new(&s, Mode::Train);
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let (gn, bn) = (g.param(gamma), g.param(beta));
    assert!(g.batch_norm(x, gn, bn, BnBuffers { mean, var }).is_err());
}

/// A small graph with five parameters mixing most primitives.
fn five_param_graph(g: &mut Graph<'_>, ids: &[diffcore::ParamId]) -> diffcore::Result<diffcore::NodeId> {
    let p: Vec<_> = ids.iter().map(|&i| g.param(i)).collect();
    let h = g.dense_affine(p[0], p[1], Some(p[2]))?;
    let s = g.softmax(h);
    let t = g.dense_affine(s, p[3], Some(p[4]))?;
    let target = Tensor::matrix(3, 2, vec![0.1, -0.3, 2.0, 0.5, -1.4, 0.0]).unwrap();
    let hub = g.huber_elementwise(t, &target)?;
    Ok(g.mean_reduce(hub))
}

fn five_param_store() -> (ParamStore, Vec<diffcore::ParamId>) {
    let mut s = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
    let ids = vec![
        s.add_uniform("x", &[3, 4], 1, &mut rng).unwrap(),
        s.add_uniform("w1", &[4, 3], 4, &mut rng).unwrap(),
        s.add_uniform("b1", &[3], 4, &mut rng).unwrap(),
        s.add_uniform("w2", &[3, 2], 3, &mut rng).unwrap(),
        s.add_uniform("b2", &[2], 3, &mut rng).unwrap(),
    ];
    (s, ids)
}

#[test]
fn random_five_parameter_graph_passes() {
    let (mut s, ids) = five_param_store();
    let report = grad_check(&mut s, GradCheckConfig::new(1e-3, 1e-4), |g| five_param_graph(g, &ids)).unwrap();
    assert!(report.passed, "{:?}", report);
}

#[test]
fn quadratic_loss_on_linear_layer_passes_tight() {
    let mut s = ParamStore::new();
    let w = s.add_param("w", Tensor::matrix(2, 2, vec![0.3, -0.2, 0.8, 0.1]).unwrap()).unwrap();
    let b = s.add_param("b", Tensor::new(vec![2], vec![0.05, -0.4]).unwrap()).unwrap();
    let input = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.3, 0.0, 1.5]).unwrap();
    let report = grad_check(&mut s, GradCheckConfig::new(1e-3, 1e-6), |g| {
        let x = g.constant(input.clone());
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.dense_affine(x, wn, Some(bn))?;
        let sq = g.mul(y, y)?;
        Ok(g.mean_reduce(sq))
    })
    .unwrap();
    assert!(report.passed, "{:?}", report);
    assert!(report.max_rel_error < 1e-9);
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let (mut s, ids) = five_param_store();
    let build = |g: &mut Graph<'_>| five_param_graph(g, &ids);
    let (_, mut grads) = analytic_gradients(&s, Mode::Train, &build).unwrap();
    grads.get_mut(ids[3]).unwrap().data_mut()[0] *= 1.5;
    let report = compare_gradients(&mut s, GradCheckConfig::new(1e-3, 1e-4), &build, &grads).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst_param, "w2");
}

#[test]
fn batch_norm_eval_matches_train_when_statistics_agree() {
    let data = vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1, 1.9, 0.0];
    let x = Tensor::matrix(4, 2, data.clone()).unwrap();
    let mut s = ParamStore::new();
    let gamma = s.add_param("g", Tensor::new(vec![2], vec![1.3, 0.7]).unwrap()).unwrap();
    let beta = s.add_param("b", Tensor::new(vec![2], vec![0.1, -0.2]).unwrap()).unwrap();
    let mean = s.add_buffer("m", Tensor::zeros(&[2])).unwrap();
    let var = s.add_buffer("v", Tensor::full(&[2], 1.0)).unwrap();
    let bufs = BnBuffers { mean, var };

    let run = |s: &ParamStore, mode| {
        let mut g = Graph::new(s, mode);
        let xn = g.constant(x.clone());
        let (gn, bn) = (g.param(gamma), g.param(beta));
        let y = g.batch_norm(xn, gn, bn, bufs).unwrap();
        g.value(y).clone()
    };
    let train = run(&s, Mode::Train);

    // freeze running statistics at the (biased) batch statistics
    let cols = 2;
    let n = 4.0;
    let mut m = vec![0.0; cols];
    let mut v = vec![0.0; cols];
    for r in data.chunks(cols) {
        for j in 0..cols {
            m[j] += r[j] / n;
        }
    }
    for r in data.chunks(cols) {
        for j in 0..cols {
            v[j] += (r[j] - m[j]).powi(2) / n;
        }
    }
    *s.buffer_mut(mean) = Tensor::new(vec![2], m).unwrap();
    *s.buffer_mut(var) = Tensor::new(vec![2], v).unwrap();
    let eval = run(&s, Mode::Eval);
    for (a, b) in train.data().iter().zip(eval.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn running_statistics_are_queued_not_applied() {
    let mut s = ParamStore::new();
    let gamma = s.add_param("g", Tensor::full(&[1], 1.0)).unwrap();
    let beta = s.add_param("b", Tensor::zeros(&[1])).unwrap();
    let mean = s.add_buffer("m", Tensor::zeros(&[1])).unwrap();
    let var = s.add_buffer("v", Tensor::full(&[1], 1.0)).unwrap();
    let updates = {
        let mut g = Graph::new(&s, Mode::Train);
        let x = g.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap());
        let (gn, bn) = (g.param(gamma), g.param(beta));
        g.batch_norm(x, gn, bn, BnBuffers { mean, var }).unwrap();
        g.take_stat_updates()
    };
    assert_eq!(s.buffer(mean).item(), 0.0);
    Graph::apply_stat_updates(updates, &mut s);
    assert!((s.buffer(mean).item() - 0.2).abs() < 1e-12);
    // unbiased batch variance is 2
    assert!((s.buffer(var).item() - (0.9 + 0.2)).abs() < 1e-12);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let (s, ids) = five_param_store();
    let run = || {
        let mut g = Graph::new(&s, Mode::Train);
        let out = five_param_graph(&mut g, &ids).unwrap();
        g.value(out).item().to_bits()
    };
    assert_eq!(run(), run());
}
