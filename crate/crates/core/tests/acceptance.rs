//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p sparsetraj --test acceptance -- <substring>` runs only the
//! criteria whose name contains the substring.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use diffcore::primitive_checks::{check_primitive, Primitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsetraj::dataio::{
    make_windows, split_by_match, synth_plays, window_starts, AgentInfo, PredictionWindow, Split, SynthParams, Team,
    TrackedExample,
};
use sparsetraj::evaluation::{cumulative_curve, eval_model, eval_model_scoped, l2_error, Scope};
use sparsetraj::models::{window_targets, AgentSlot, ModelKind, ModelSpec, ModelState, SceneInput};
use sparsetraj::motion::{densify, Anchor, Control, MotionOrder, SparseTrack};
use sparsetraj::training::{evaluate_windows, huber_loss, train_seed, TrainConfig, TrainData};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// `Σ c_k t^k / k!`, m-th derivative.
fn poly(c: &[f64], t: f64, m: usize) -> f64 {
    c.iter().enumerate().skip(m).map(|(k, v)| v * t.powi((k - m) as i32) / factorial(k - m)).sum()
}

fn interpolation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut endpoint_misses = 0;
    for n in 1..=3usize {
        let order = MotionOrder::new(n as u8).unwrap();
        for _ in 0..1000 {
            let duration = rng.gen_range(1..=60usize);
            let coeffs: Vec<f64> =
                (0..=n).map(|k| rng.gen_range(-2.0..2.0) / (duration as f64).powi(k as i32 - 1).max(1.0)).collect();
            let anchor = Anchor { position: coeffs[0], derivatives: (1..n).map(|m| poly(&coeffs, 0.0, m)).collect() };
            let target = poly(&coeffs, duration as f64, 0);
            let track = SparseTrack {
                anchor,
                controls: vec![Control { offset: duration, position: target }],
                stride: duration,
            };
            let dense = densify(&track, order).unwrap();
            for (t, v) in dense.iter().enumerate() {
                let truth = poly(&coeffs, (t + 1) as f64, 0);
                worst = worst.max((v - truth).abs() / truth.abs().max(1.0));
            }
            if dense[duration - 1] != target {
                endpoint_misses += 1;
            }
            // chained controls land exactly on every control as well
            let stride = rng.gen_range(1..=10usize);
            let horizon = rng.gen_range(stride..=6 * stride);
            let controls: Vec<Control> = sparsetraj::motion::control_offsets(horizon, stride)
                .into_iter()
                .map(|offset| Control { offset, position: rng.gen_range(-50.0..50.0) })
                .collect();
            let anchor =
                Anchor { position: rng.gen_range(-50.0..50.0), derivatives: vec![rng.gen_range(-1.0..1.0); 2] };
            let chained = densify(&SparseTrack { anchor, controls: controls.clone(), stride }, order).unwrap();
            endpoint_misses += controls.iter().filter(|c| chained[c.offset - 1] != c.position).count();
        }
    }
    outcome(
        worst <= 1e-9 && endpoint_misses == 0,
        format!("3000 segments, max rel error {:.2e} (tol 1e-9), endpoint misses {}", worst, endpoint_misses),
    )
}

fn gradient_contract() -> Outcome {
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    for prim in Primitive::ALL {
        for seed in 0..100u64 {
            let r = check_primitive(prim, seed, 1e-3, 1e-4).unwrap();
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, prim.name());
            }
            if !r.passed {
                failures.push(format!("{}#{}", prim.name(), seed));
            }
        }
    }
    let toy = common::granma_grad_check(11, 1e-3);
    outcome(
        failures.is_empty() && toy.passed,
        format!(
            "{} primitives x 100 shapes, worst {:.2e} ({}) tol 1e-4, failures {:?}; toy GraN-MA through densify {:.2e} over {} scalars (tol 1e-3)",
            Primitive::ALL.len(),
            worst.0,
            worst.1,
            failures,
            toy.max_rel_error,
            toy.checked
        ),
    )
}

fn equivariance() -> Outcome {
    let spec = ModelSpec::new(ModelKind::Granma);
    let state = ModelState::init(spec.clone(), 0).unwrap();
    let windows = common::windows(31, 50, spec.input_len, spec.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for w in &windows {
        let scene = SceneInput::from_window(w, false);
        let mut perm: Vec<usize> = (0..11).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let mut moved = scene.clone();
        for (i, &p) in perm.iter().enumerate() {
            moved.defenders[i] = scene.defenders[p].clone();
        }
        let a = state.predict(&scene).unwrap();
        let b = state.predict(&moved).unwrap();
        for agent in &b.agents {
            let src = match agent.slot {
                AgentSlot::Defender(i) => AgentSlot::Defender(perm[i]),
                s => s,
            };
            let want = a.agents.iter().find(|x| x.slot == src).unwrap();
            for (p, q) in agent.dense.iter().zip(&want.dense) {
                worst = worst.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
            }
        }
    }
    outcome(worst <= 1e-5, format!("{} scenes, max discrepancy {:.2e} m (tol 1e-5)", windows.len(), worst))
}

fn loss_metric_oracles() -> Outcome {
    let z = vec![vec![[0.0, 0.0]]];
    let checks = [
        ("huber zero", huber_loss(&z, &z).unwrap(), 0.0),
        ("huber (0.5,0)", huber_loss(&z, &[vec![[0.5, 0.0]]]).unwrap(), 0.0625),
        ("huber (3,4)", huber_loss(&z, &[vec![[3.0, 4.0]]]).unwrap(), 3.0),
        ("l2 (3,4)", l2_error(&z, &[vec![[3.0, 4.0]]]).unwrap().mean_cm, 500.0),
        ("l2 zero", l2_error(&z, &z).unwrap().mean_cm, 0.0),
        (
            "l2 100/300",
            l2_error(&[vec![[0.0, 0.0]], vec![[0.0, 0.0]]], &[vec![[1.0, 0.0]], vec![[0.0, 3.0]]]).unwrap().mean_cm,
            200.0,
        ),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let agents = rng.gen_range(1..24);
        let steps = rng.gen_range(1..241);
        let truth: Vec<Vec<[f64; 2]>> = (0..agents).map(|_| vec![[0.0, 0.0]; steps]).collect();
        let pred: Vec<Vec<[f64; 2]>> = (0..agents)
            .map(|_| (0..steps).map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect())
            .collect();
        let s = l2_error(&truth, &pred).unwrap();
        let c = cumulative_curve(&s.per_step_cm);
        worst = worst.max((c[steps - 1] - s.mean_cm).abs() / s.mean_cm.max(1.0));
    }
    outcome(
        bad.is_empty() && worst <= 1e-9,
        format!(
            "hand cases {}; cumulative endpoint vs mean over 1000 curves {:.2e} (tol 1e-9)",
            if bad.is_empty() { "exact".to_string() } else { bad.join(", ") },
            worst
        ),
    )
}

fn agents() -> Vec<AgentInfo> {
    let mut a = vec![AgentInfo { agent_id: 0, team: Team::Ball, role: 0 }];
    a.extend((0..11).map(|r| AgentInfo { agent_id: 1 + r, team: Team::Home, role: r }));
    a.extend((0..11).map(|r| AgentInfo { agent_id: 12 + r, team: Team::Away, role: r }));
    a
}

/// Every agent at constant velocity, in quarter-metre steps so all
/// positions are exact in binary.
fn constant_velocity(frames: usize) -> TrackedExample {
    let frames = (0..frames)
        .map(|t| {
            (0..23)
                .map(|i| {
                    let v = [0.25 * ((i % 5) as f64 - 2.0), 0.125 * ((i % 3) as f64 - 1.0)];
                    [-20.0 + 2.0 * i as f64 + v[0] * t as f64, 10.0 - i as f64 + v[1] * t as f64]
                })
                .collect()
        })
        .collect();
    TrackedExample {
        match_id: "cv".into(),
        frame_rate_hz: 10.0,
        first_frame: 0,
        agents: agents(),
        in_play: vec![true; 50],
        frames,
    }
}

fn windowing_oracle() -> Outcome {
    // all starts that fit, filtered greedily to at most 50% overlap
    let brute = |span: usize, t: usize| {
        let mut out: Vec<usize> = Vec::new();
        for s in 0..span {
            if s + t <= span && out.last().is_none_or(|p| s - p >= t.div_ceil(2)) {
                out.push(s);
            }
        }
        out
    };
    let mut ex = constant_velocity(120);
    ex.in_play = vec![true; 120];
    let got: Vec<usize> = make_windows(&ex, 50, 10).unwrap().iter().map(|w| w.start_frame as usize).collect();
    let want = brute(120, 50);
    let edge = window_starts(49, 50).is_empty() && window_starts(50, 50) == vec![0];
    outcome(got == want && want == vec![0, 25, 50] && edge, format!("starts {:?}, brute force {:?}", got, want))
}

/// Synthetic dataset shared by the trend criteria.
struct TrendData {
    train: TrainData,
    test: Vec<PredictionWindow>,
}

fn trend_data() -> TrendData {
    let params = SynthParams { frames_per_play: 110, ..SynthParams::default() };
    let plays = synth_plays(2024, 2000, &params);
    let splits = split_by_match(plays.iter().map(|p| p.match_id.as_str()));
    let mut data = TrendData { train: TrainData::default(), test: Vec::new() };
    for p in &plays {
        let w = make_windows(p, 50, 10).unwrap();
        match splits[&p.match_id] {
            Split::Train => data.train.train.extend(w),
            Split::Val => data.train.val.extend(w),
            Split::Test => data.test.extend(w),
        }
    }
    data
}

fn trend_config(stride: usize, order: MotionOrder, conditioned: bool) -> TrainConfig {
    let mut spec = ModelSpec::new(ModelKind::Granma);
    spec.embedding_width = 32;
    spec.decoder_hidden = Some(32);
    spec.output_stride = stride;
    spec.order = order;
    spec.conditioned = conditioned;
    let mut c = TrainConfig::new(spec);
    c.epochs = 20;
    c.seeds = vec![0, 1, 2];
    c
}

fn train_all(label: &str, config: &TrainConfig, data: &TrainData) -> Vec<ModelState> {
    config
        .seeds
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let out = train_seed(config, seed, data, |_| {}).unwrap();
            eprintln!(
                "  {label} seed {seed}: best epoch {} val {:.1} cm ({:.0} s)",
                out.best_epoch,
                out.best_val_l2_cm,
                t.elapsed().as_secs_f64()
            );
            out.best
        })
        .collect()
}

struct Trends {
    data: TrendData,
    dense: Option<(Vec<ModelState>, Duration)>,
}

impl Trends {
    fn dense(&mut self) -> &[ModelState] {
        if self.dense.is_none() {
            let t = Instant::now();
            let models = train_all("dense", &trend_config(1, MotionOrder::ACCELERATION, false), &self.data.train);
            self.dense = Some((models, t.elapsed()));
        }
        &self.dense.as_ref().unwrap().0
    }
}

fn trend_eval_sparsity(trends: &mut Trends) -> Outcome {
    let start = Instant::now();
    let earlier = trends.dense.as_ref().map_or(Duration::ZERO, |d| d.1);
    trends.dense();
    let models = trends.dense.as_ref().unwrap().0.clone();
    let strides = [1, 2, 4, 10, 20, 40];
    let means: Vec<f64> = strides
        .iter()
        .map(|&s| eval_model(&models, &trends.data.test, s, MotionOrder::ACCELERATION).unwrap().mean_cm)
        .collect();
    let steps: Vec<f64> = means.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let banded = steps.iter().all(|r| *r <= 0.02);
    let gain = 1.0 - means[5] / means[0];
    let runtime = earlier + start.elapsed();
    let fast = runtime < Duration::from_secs(20 * 60);
    outcome(
        banded && gain >= 0.05 && fast,
        format!(
            "mean L2 cm at strides {:?}: {:?}; adjacent changes {:?} (band +2%); stride 40 vs 1: -{:.1}% (need >= 5%); runtime {:.0} s",
            strides,
            means.iter().map(|m| (m * 10.0).round() / 10.0).collect::<Vec<_>>(),
            steps.iter().map(|r| format!("{:+.1}%", 100.0 * r)).collect::<Vec<_>>(),
            100.0 * gain,
            runtime.as_secs_f64()
        ),
    )
}

fn trend_conditioning(trends: &mut Trends) -> Outcome {
    let start = Instant::now();
    let cond = train_all("conditioned", &trend_config(1, MotionOrder::ACCELERATION, true), &trends.data.train);
    let cond_eval = eval_model(&cond, &trends.data.test, 1, MotionOrder::ACCELERATION).unwrap();
    let runtime = start.elapsed();
    let dense = trends.dense().to_vec();
    let std_eval =
        eval_model_scoped(&dense, &trends.data.test, 1, MotionOrder::ACCELERATION, Scope::Defenders).unwrap();
    outcome(
        cond_eval.mean_cm <= std_eval.mean_cm && runtime < Duration::from_secs(30 * 60),
        format!(
            "defender mean L2: conditioned {:.1} +- {:.1} cm vs standard {:.1} +- {:.1} cm; runtime {:.0} s",
            cond_eval.mean_cm,
            cond_eval.std_cm,
            std_eval.mean_cm,
            std_eval.std_cm,
            runtime.as_secs_f64()
        ),
    )
}

fn trend_orders(trends: &mut Trends) -> Outcome {
    let start = Instant::now();
    let mut means = Vec::new();
    for order in [MotionOrder::ACCELERATION, MotionOrder::JERK] {
        let models = train_all(&format!("order {order}"), &trend_config(20, order, false), &trends.data.train);
        means.push(eval_model(&models, &trends.data.test, 1, order).unwrap());
    }
    outcome(
        means[0].mean_cm <= means[1].mean_cm,
        format!(
            "train stride 2.0 s: order 2 {:.1} +- {:.1} cm vs order 3 {:.1} +- {:.1} cm; runtime {:.0} s",
            means[0].mean_cm,
            means[0].std_cm,
            means[1].mean_cm,
            means[1].std_cm,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn baselines() -> Outcome {
    let ex = constant_velocity(50);
    let w = &make_windows(&ex, 50, 10).unwrap()[0];
    let lin = ModelState::init(ModelSpec::new(ModelKind::LinExt), 0).unwrap();
    let pred = lin.predict(&SceneInput::from_window(w, false)).unwrap();
    let lin_err = l2_error(&window_targets(w, false), &pred.dense()).unwrap().mean_cm;

    let mut spec = ModelSpec::new(ModelKind::Granma);
    spec.embedding_width = 32;
    spec.decoder_hidden = Some(128);
    let windows = common::windows(99, 8, spec.input_len, spec.horizon);
    let mut c = TrainConfig::new(spec);
    c.epochs = 500;
    c.batch_size = 8;
    c.learning_rate = 1e-3;
    c.lr_decay = 1.0;
    c.flip_augment = false;
    c.seeds = vec![0];
    let data = TrainData { train: windows.clone(), val: windows.clone() };
    let out = train_seed(&c, 0, &data, |_| {}).unwrap();
    let final_train = out.metrics.last().unwrap().train_loss;
    let (eval_loss, _) = evaluate_windows(&out.best, &windows).unwrap();
    let ids: BTreeSet<&str> = windows.iter().map(|w| w.match_id.as_str()).collect();
    outcome(
        lin_err == 0.0 && final_train < 1e-3,
        format!(
            "lin_ext on constant velocity {} cm (need exactly 0); overfit on 8 windows ({} matches), 500 epochs: final train loss {:.4} m, best-checkpoint eval-mode loss {:.4} m (need < 1e-3)",
            lin_err,
            ids.len(),
            final_train,
            eval_loss
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut trends: Option<Trends> = None;
    let mut trends = |f: fn(&mut Trends) -> Outcome| {
        let t = trends.get_or_insert_with(|| Trends { data: trend_data(), dense: None });
        f(t)
    };

    type Criterion<'a> = (&'static str, Box<dyn FnMut() -> Outcome + 'a>);
    let mut criteria: Vec<Criterion> = vec![
        ("interpolation_oracle", Box::new(interpolation_oracle)),
        ("gradient_contract", Box::new(gradient_contract)),
        ("equivariance", Box::new(equivariance)),
        ("loss_metric_oracles", Box::new(loss_metric_oracles)),
        ("windowing_oracle", Box::new(windowing_oracle)),
        ("baselines", Box::new(baselines)),
    ];
    let mut results = Vec::new();
    for (name, f) in criteria.iter_mut() {
        if wanted(name) {
            results.push(run(name, f));
        }
    }
    let trend_list: [(&str, fn(&mut Trends) -> Outcome); 3] = [
        ("trend_eval_sparsity", trend_eval_sparsity),
        ("trend_conditioning", trend_conditioning),
        ("trend_orders", trend_orders),
    ];
    for (name, f) in trend_list {
        if wanted(name) {
            results.push(run(name, &mut || trends(f)));
        }
    }

    println!();
    for (name, o, secs) in &results {
        println!("{} {:<22} {} [{:.1} s]", if o.passed { "PASS" } else { "FAIL" }, name, o.detail, secs);
    }
    let passed = results.iter().filter(|r| r.1.passed).count();
    println!("\nacceptance: {}/{} criteria passed", passed, results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

fn run(name: &'static str, f: &mut dyn FnMut() -> Outcome) -> (&'static str, Outcome, f64) {
    eprintln!("running {name}");
    let t = Instant::now();
    let o = f();
    let secs = t.elapsed().as_secs_f64();
    println!("{} {:<22} {} [{:.1} s]", if o.passed { "PASS" } else { "FAIL" }, name, o.detail, secs);
    (name, o, secs)
}
