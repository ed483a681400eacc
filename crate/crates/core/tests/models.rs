mod common;

use common::{granma_grad_check, toy_spec, windows};
use diffcore::{Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;
use sparsetraj::models::{
    linear_extrapolate, relational_layer, AgentSlot, ModelKind, ModelSpec, ModelState, SceneBatch, SceneInput,
};
use sparsetraj::Error;

fn scenes(spec: &ModelSpec, seed: u64, count: usize) -> Vec<SceneInput> {
    windows(seed, count, spec.input_len, spec.horizon)
        .iter()
        .map(|w| SceneInput::from_window(w, spec.conditioned))
        .collect()
}

#[test]
fn linear_extrapolation_examples() {
    let past: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 / 10.0, 0.0]).collect();
    let future = linear_extrapolate(&past, 5).unwrap();
    for (t, p) in future.iter().enumerate() {
        assert!((p[0] - (1.0 + t as f64 / 10.0)).abs() < 1e-12, "{t}: {}", p[0]);
        assert_eq!(p[1], 0.0);
    }

    let still = linear_extrapolate(&[[3.0, -2.0]; 6], 4).unwrap();
    assert!(still.iter().all(|p| *p == [3.0, -2.0]));

    // net displacement zero: v = (0 - 0) / 4
    let wobble = [[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5], [2.0, -1.0], [0.0, 0.0]];
    assert!(linear_extrapolate(&wobble, 3).unwrap().iter().all(|p| *p == [0.0, 0.0]));

    assert!(matches!(linear_extrapolate(&[[0.0, 0.0]], 3), Err(Error::InsufficientHistory { have: 1, need: 2 })));
}

proptest! {
    #[test]
    fn linear_extrapolation_flips_exactly(
        past in prop::collection::vec((-50.0..50.0f64, -30.0..30.0f64), 2..12),
        fx in any::<bool>(),
        fy in any::<bool>(),
        horizon in 1usize..40,
    ) {
        let sx = if fx { -1.0 } else { 1.0 };
        let sy = if fy { -1.0 } else { 1.0 };
        let past: Vec<[f64; 2]> = past.into_iter().map(|(x, y)| [x, y]).collect();
        let flipped: Vec<[f64; 2]> = past.iter().map(|p| [sx * p[0], sy * p[1]]).collect();
        let a = linear_extrapolate(&past, horizon).unwrap();
        let b = linear_extrapolate(&flipped, horizon).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!([sx * p[0], sy * p[1]], *q);
        }
    }
}

#[test]
fn relational_layer_hand_case() {
    // two sets of two agents, width 4; phi_e sums the pair halves, phi_v is
    // the identity, so o_i = sum_j (v_i + v_j) = 2 v_i + v_1 + v_2
    let v = [[1.0, 0.0, -2.0, 0.5], [3.0, 1.0, 0.0, -1.0], [0.25, 4.0, 2.0, 2.0], [-1.0, -1.0, 1.0, 0.0]];
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::matrix(4, 4, v.concat()).unwrap());
    let mut halves = Tensor::zeros(&[8, 4]);
    for c in 0..4 {
        halves.data_mut()[c * 4 + c] = 1.0;
        halves.data_mut()[(c + 4) * 4 + c] = 1.0;
    }
    let out =
        relational_layer(&mut g, x, 2, |g, pairs| Ok(g.matmul_const(pairs, halves.clone())?), |_, s| Ok(s)).unwrap();
    let got = g.value(out).data().to_vec();
    let mut want = Vec::new();
    for set in [[0, 1], [2, 3]] {
        for &i in &set {
            for c in 0..4 {
                want.push(2.0 * v[i][c] + v[set[0]][c] + v[set[1]][c]);
            }
        }
    }
    assert_eq!(got, want);
}

fn permute(scene: &SceneInput, perm: &[usize], defenders: bool) -> SceneInput {
    let mut out = scene.clone();
    let group = if defenders { &mut out.defenders } else { &mut out.attackers };
    let src = if defenders { &scene.defenders } else { &scene.attackers };
    for (i, &p) in perm.iter().enumerate() {
        group[i] = src[p].clone();
    }
    out
}

fn shuffled(seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut perm: Vec<usize> = (0..11).collect();
    perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    perm
}

#[test]
fn granma_is_equivariant_within_teams() {
    for conditioned in [false, true] {
        let mut spec = toy_spec(ModelKind::Granma, 10, 5, 2);
        spec.conditioned = conditioned;
        let state = ModelState::init(spec.clone(), 3).unwrap();
        for (k, scene) in scenes(&spec, 21, 6).iter().enumerate() {
            let base = state.predict(scene).unwrap();
            for defenders in [true, false] {
                let perm = shuffled(k as u64 * 2 + defenders as u64);
                let moved = state.predict(&permute(scene, &perm, defenders)).unwrap();
                for (a, agent) in moved.agents.iter().enumerate() {
                    let src = match agent.slot {
                        AgentSlot::Defender(i) if defenders => AgentSlot::Defender(perm[i]),
                        AgentSlot::Attacker(i) if !defenders => AgentSlot::Attacker(perm[i]),
                        s => s,
                    };
                    let want = base.agents.iter().find(|x| x.slot == src).unwrap();
                    for (p, q) in agent.dense.iter().zip(&want.dense) {
                        assert!((p[0] - q[0]).abs() <= 1e-5 && (p[1] - q[1]).abs() <= 1e-5, "agent {a}");
                    }
                }
            }
        }
    }
}

#[test]
fn single_control_is_one_arc() {
    let spec = toy_spec(ModelKind::Granma, 40, 10, 40);
    assert_eq!(spec.control_count(), 1);
    let state = ModelState::init(spec.clone(), 1).unwrap();
    let scene = &scenes(&spec, 4, 1)[0];
    let pred = state.predict(scene).unwrap();
    for agent in &pred.agents {
        let ctrl = agent.controls.as_ref().unwrap();
        assert_eq!(ctrl.len(), 1);
        assert_eq!(ctrl[0].0, 40);
        assert_eq!(agent.dense[39], ctrl[0].1);
        // constant second difference from the last observed position on
        let last = *scene.past(agent.slot, spec.input_len).last().unwrap();
        let path: Vec<[f64; 2]> = std::iter::once(last).chain(agent.dense.iter().copied()).collect();
        for c in 0..2 {
            let acc: Vec<f64> = path.windows(3).map(|w| w[2][c] - 2.0 * w[1][c] + w[0][c]).collect();
            let scale = path.iter().fold(1.0f64, |m, p| m.max(p[c].abs()));
            assert!(acc.iter().all(|a| (a - acc[0]).abs() <= 1e-9 * scale), "{acc:?}");
        }
    }
}

#[test]
fn sparse_heads_pass_through_their_controls() {
    for kind in ModelKind::ALL {
        let spec = toy_spec(kind, 12, 4, 5);
        let state = ModelState::init(spec.clone(), 2).unwrap();
        let preds = state.predict_batch(&scenes(&spec, 9, 3)).unwrap();
        for pred in &preds {
            assert_eq!(pred.agents.len(), 23, "{kind}");
            for agent in &pred.agents {
                assert_eq!(agent.dense.len(), 12);
                let ctrl = agent.controls.as_ref().unwrap();
                assert_eq!(ctrl.iter().map(|c| c.0).collect::<Vec<_>>(), vec![5, 10, 12], "{kind}");
                for (off, p) in ctrl {
                    let d = agent.dense[off - 1];
                    assert!((d[0] - p[0]).abs() < 1e-9 && (d[1] - p[1]).abs() < 1e-9, "{kind}");
                }
            }
        }
    }
}

#[test]
fn stride_one_output_is_the_network_output() {
    for kind in [ModelKind::Granma, ModelKind::Mlp, ModelKind::RedStyle] {
        let spec = toy_spec(kind, 6, 3, 1);
        let state = ModelState::init(spec.clone(), 0).unwrap();
        let batch = SceneBatch::new(&spec, scenes(&spec, 2, 2)).unwrap();
        let mut g = Graph::new(state.store(), Mode::Eval);
        let out = state.forward(&mut g, &batch).unwrap();
        assert_eq!(out.controls, Some(out.dense));
        assert!(state
            .predict_batch(&batch.scenes)
            .unwrap()
            .iter()
            .all(|p| p.agents.iter().all(|a| a.controls.is_none())));
    }
}

#[test]
fn mlp_output_widths() {
    let spec = ModelSpec::new(ModelKind::Mlp);
    let state = ModelState::init(spec.clone(), 0).unwrap();
    assert_eq!(state.hidden_shape(), Some((5, 2048)));
    for (stride, cols) in [(1, 40), (40, 1)] {
        let mut s = toy_spec(ModelKind::Mlp, 40, 10, stride);
        s.decoder_hidden = Some(16);
        let st = ModelState::init(s.clone(), 0).unwrap();
        let batch = SceneBatch::new(&s, scenes(&s, 5, 2)).unwrap();
        let mut g = Graph::new(st.store(), Mode::Eval);
        let out = st.forward(&mut g, &batch).unwrap();
        let shape = g.shape(out.controls.unwrap()).to_vec();
        // per scene: 23 agents x 2 coordinates x K
        assert_eq!(shape, vec![2 * 46, cols]);
        assert_eq!(46 * cols, if stride == 1 { 1840 } else { 46 });
    }
}

#[test]
fn granma_decoders_are_five_by_128() {
    let state = ModelState::init(ModelSpec::new(ModelKind::Granma), 0).unwrap();
    assert_eq!(state.hidden_shape(), Some((5, 128)));
    assert_eq!(state.spec().embedding_width, 128);
    assert_eq!(state.spec().heads, 4);
}

#[test]
fn zero_weight_encoder_decoder_predicts_zero() {
    let spec = toy_spec(ModelKind::GruEncdec, 8, 4, 1);
    let mut state = ModelState::init(spec.clone(), 5).unwrap();
    let ids: Vec<_> = state.store().param_ids().collect();
    for id in ids {
        state.store_mut().value_mut(id).data_mut().fill(0.0);
    }
    for pred in state.predict_batch(&scenes(&spec, 8, 3)).unwrap() {
        assert!(pred.agents.iter().all(|a| a.dense.iter().all(|p| *p == [0.0, 0.0])));
    }
}

#[test]
fn red_style_ignores_the_rest_of_the_batch() {
    let spec = toy_spec(ModelKind::RedStyle, 10, 5, 2);
    let state = ModelState::init(spec.clone(), 6).unwrap();
    let s = scenes(&spec, 12, 4);
    let a = state.predict_batch(&[s[0].clone(), s[1].clone()]).unwrap();
    let b = state.predict_batch(&[s[2].clone(), s[0].clone(), s[3].clone()]).unwrap();
    assert_eq!(a[0], b[1]);
    assert_eq!(state.predict(&s[0]).unwrap(), a[0]);
}

#[test]
fn every_decoder_parameter_receives_gradient() {
    for conditioned in [false, true] {
        let mut spec = toy_spec(ModelKind::Granma, 8, 4, 3);
        spec.conditioned = conditioned;
        let state = ModelState::init(spec.clone(), 4).unwrap();
        let batch = SceneBatch::from_windows(&spec, &windows(4, 4, 4, 8)).unwrap();
        let mut g = Graph::new(state.store(), Mode::Train);
        let out = state.forward(&mut g, &batch).unwrap();
        let h = g.huber_elementwise(out.dense, batch.targets.as_ref().unwrap()).unwrap();
        let loss = g.mean_reduce(h);
        let grads = g.backward(loss).unwrap();
        let mut decoders = 0;
        for id in state.store().param_ids() {
            let name = &state.store().param(id).name;
            if name.starts_with("granma.dec_") {
                decoders += 1;
                let norm = grads.get(id).map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>());
                assert!(norm > 0.0, "no gradient on {name}");
            }
        }
        assert!(decoders > 0);
        assert_eq!(state.store().params().iter().any(|p| p.name.starts_with("granma.dec_att")), !conditioned);
    }
}

#[test]
fn toy_granma_gradients_through_densify() {
    let report = granma_grad_check(11, 1e-3);
    assert!(report.checked > 1000);
    assert!(
        report.passed,
        "rel {:.3e} at {}[{}]: analytic {} numeric {}",
        report.max_rel_error, report.worst_param, report.worst_index, report.analytic, report.numeric
    );
}

#[test]
fn conditioned_predicts_eleven_defenders() {
    let mut spec = toy_spec(ModelKind::Granma, 10, 5, 5);
    spec.conditioned = true;
    let state = ModelState::init(spec.clone(), 0).unwrap();
    let scene = &scenes(&spec, 1, 1)[0];
    assert_eq!(scene.ball.len(), 15);
    assert_eq!(scene.defenders[0].len(), 5);
    let pred = state.predict(scene).unwrap();
    let slots: Vec<AgentSlot> = pred.agents.iter().map(|a| a.slot).collect();
    assert_eq!(slots, (0..11).map(AgentSlot::Defender).collect::<Vec<_>>());
    assert!(pred.agents.iter().all(|a| a.dense.len() == 10));

    let mut mlp = toy_spec(ModelKind::Mlp, 10, 5, 5);
    mlp.conditioned = true;
    assert_eq!(ModelState::init(mlp.clone(), 0).unwrap().predict(scene).unwrap().agents.len(), 11);

    for kind in
        [ModelKind::SimpleGru, ModelKind::AutoregCnn, ModelKind::GruEncdec, ModelKind::RedStyle, ModelKind::LinExt]
    {
        let mut bad = toy_spec(kind, 10, 5, 1);
        bad.conditioned = true;
        assert!(matches!(ModelState::init(bad, 0), Err(Error::Spec(_))), "{kind}");
    }
}

#[test]
fn scene_length_mismatch_is_rejected() {
    let spec = toy_spec(ModelKind::Granma, 10, 5, 2);
    let state = ModelState::init(spec.clone(), 0).unwrap();
    let mut scene = scenes(&spec, 3, 1).remove(0);
    scene.defenders[4].pop();
    let err = state.predict(&scene).unwrap_err();
    assert!(matches!(err, Error::Scene(_)) && err.to_string().contains("defenders[4]"), "{err}");
}

#[test]
fn predictions_are_deterministic_across_checkpoint_loads() {
    let spec = toy_spec(ModelKind::Granma, 10, 5, 2);
    let state = ModelState::init(spec.clone(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    state.save(&path).unwrap();
    let a = ModelState::load(&path).unwrap();
    let b = ModelState::load_expecting(&path, &spec).unwrap();
    let s = scenes(&spec, 6, 3);
    let pa = a.predict_batch(&s).unwrap();
    assert_eq!(pa, b.predict_batch(&s).unwrap());
    assert_eq!(pa, state.predict_batch(&s).unwrap());
    assert_eq!(ModelState::init(spec.clone(), 9).unwrap().predict_batch(&s).unwrap(), pa);

    let mut other = spec.clone();
    other.output_stride = 5;
    assert!(matches!(ModelState::load_expecting(&path, &other), Err(Error::Checkpoint { .. })));
}
