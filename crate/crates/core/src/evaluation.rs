//! Mean L2 error in centimetres, per-step and cumulative curves, and
//! evaluation of a trained model after subsampling its output.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Point, PredictionWindow};
use crate::error::{Error, Result};
use crate::models::{AgentSlot, ModelState, PredictedAgent, SceneInput};
use crate::motion::{densify, estimate_anchor_derivatives, sparsify_dense, MotionOrder};
use crate::training::check_shapes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Summary {
    /// Mean over agents at each future step, in cm.
    pub per_step_cm: Vec<f64>,
    /// Mean over agents and steps, in cm.
    pub mean_cm: f64,
}

/// Euclidean error between `[agent][step]` trajectories given in metres.
pub fn l2_error(truth: &[Vec<Point>], pred: &[Vec<Point>]) -> Result<L2Summary> {
    check_shapes(truth, pred)?;
    let steps = truth.first().map_or(0, Vec::len);
    let mut per_step_cm = vec![0.0; steps];
    for (t, p) in truth.iter().zip(pred) {
        for (k, (a, b)) in t.iter().zip(p).enumerate() {
            per_step_cm[k] += 100.0 * (a[0] - b[0]).hypot(a[1] - b[1]);
        }
    }
    let agents = truth.len().max(1) as f64;
    per_step_cm.iter_mut().for_each(|v| *v /= agents);
    let mean_cm = if steps == 0 { 0.0 } else { per_step_cm.iter().sum::<f64>() / steps as f64 };
    Ok(L2Summary { per_step_cm, mean_cm })
}

/// Running mean of a per-step curve: entry `t` averages steps `0..=t`, so
/// the final entry is the overall mean.
pub fn cumulative_curve(per_step: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    per_step
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Keeps every `stride`-th predicted position and re-densifies with the
/// given order, anchored on finite differences of the agent's past.
pub fn resample_prediction(
    agent: &PredictedAgent,
    past: &[Point],
    stride: usize,
    order: MotionOrder,
) -> Result<Vec<Point>> {
    if stride == 1 {
        return Ok(agent.dense.clone());
    }
    let mut coords = [Vec::new(), Vec::new()];
    for (c, out) in coords.iter_mut().enumerate() {
        let history: Vec<f64> = past.iter().map(|p| p[c]).collect();
        let dense: Vec<f64> = agent.dense.iter().map(|p| p[c]).collect();
        let anchor = estimate_anchor_derivatives(&history, order)?;
        *out = densify(&sparsify_dense(&dense, stride, anchor)?, order)?;
    }
    Ok(coords[0].iter().zip(&coords[1]).map(|(x, y)| [*x, *y]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub mean_cm: f64,
    pub per_step_cm: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub train_stride_s: f64,
    pub eval_stride_s: f64,
    pub order: u8,
    pub conditioned: bool,
    pub frame_rate_hz: f64,
    pub windows: usize,
    pub per_seed: Vec<SeedEval>,
    /// Per-step mean across seeds.
    pub per_step_cm: Vec<f64>,
    pub cumulative_cm: Vec<f64>,
    pub mean_cm: f64,
    pub std_cm: f64,
}

impl EvalReport {
    pub fn label(&self) -> String {
        format!(
            "{}_train{}_eval{}_o{}{}",
            self.model,
            self.train_stride_s,
            self.eval_stride_s,
            self.order,
            if self.conditioned { "_cond" } else { "" }
        )
    }

    /// `t_s,cumulative_l2_cm`
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "t_s,cumulative_l2_cm")?;
        for (i, v) in self.cumulative_cm.iter().enumerate() {
            writeln!(f, "{},{}", (i + 1) as f64 / self.frame_rate_hz, v)?;
        }
        Ok(())
    }
}

pub const RESULTS_HEADER: &str = "model,train_stride_s,eval_stride_s,order,conditioned,seed,mean_l2_cm";

/// One CSV row per seed of every report.
pub fn write_results_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", RESULTS_HEADER)?;
    for r in reports {
        for s in &r.per_seed {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.model, r.train_stride_s, r.eval_stride_s, r.order, r.conditioned, s.seed, s.mean_cm
            )?;
        }
    }
    Ok(())
}

/// Which predicted agents are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every agent the model predicts.
    #[default]
    Predicted,
    /// The eleven defenders only, comparable across modes.
    Defenders,
}

/// Evaluates every seed's model on `windows`, subsampling predictions to
/// `eval_stride` steps and re-densifying at `order`.
pub fn eval_model(
    models: &[ModelState],
    windows: &[PredictionWindow],
    eval_stride: usize,
    order: MotionOrder,
) -> Result<EvalReport> {
    eval_model_scoped(models, windows, eval_stride, order, Scope::Predicted)
}

pub fn eval_model_scoped(
    models: &[ModelState],
    windows: &[PredictionWindow],
    eval_stride: usize,
    order: MotionOrder,
    scope: Scope,
) -> Result<EvalReport> {
    let first = models.first().ok_or_else(|| Error::Config("no models to evaluate".into()))?;
    let spec = first.spec().clone();
    if models.iter().any(|m| {
        let s = m.spec();
        s.kind != spec.kind
            || s.conditioned != spec.conditioned
            || s.horizon != spec.horizon
            || s.input_len != spec.input_len
    }) {
        return Err(Error::Config("models in one report must share kind, mode and window".into()));
    }
    if eval_stride == 0 || eval_stride > spec.horizon {
        return Err(Error::Config(format!("eval stride {} outside 1..={}", eval_stride, spec.horizon)));
    }
    if windows.is_empty() {
        return Err(Error::Dataset("no evaluation windows".into()));
    }
    let scenes: Vec<SceneInput> = windows.iter().map(|w| SceneInput::from_window(w, spec.conditioned)).collect();
    let mut per_seed = Vec::with_capacity(models.len());
    for model in models {
        let mut sum = vec![0.0; spec.horizon];
        for (chunk_w, chunk_s) in windows.chunks(256).zip(scenes.chunks(256)) {
            let preds = model.predict_batch(chunk_s)?;
            for ((w, scene), pred) in chunk_w.iter().zip(chunk_s).zip(preds) {
                let keep = |a: &&PredictedAgent| scope == Scope::Predicted || matches!(a.slot, AgentSlot::Defender(_));
                let resampled = pred
                    .agents
                    .iter()
                    .filter(keep)
                    .map(|a| resample_prediction(a, scene.past(a.slot, spec.input_len), eval_stride, order))
                    .collect::<Result<Vec<_>>>()?;
                let truth =
                    pred.agents.iter().filter(keep).map(|a| w.future(a.slot.canonical()).to_vec()).collect::<Vec<_>>();
                let l2 = l2_error(&truth, &resampled)?;
                sum.iter_mut().zip(&l2.per_step_cm).for_each(|(s, v)| *s += v);
            }
        }
        let per_step_cm: Vec<f64> = sum.iter().map(|v| v / windows.len() as f64).collect();
        let mean_cm = per_step_cm.iter().sum::<f64>() / per_step_cm.len() as f64;
        per_seed.push(SeedEval { seed: model.seed(), mean_cm, per_step_cm });
    }
    let per_step_cm: Vec<f64> = (0..spec.horizon)
        .map(|k| per_seed.iter().map(|s| s.per_step_cm[k]).sum::<f64>() / per_seed.len() as f64)
        .collect();
    let (mean_cm, std_cm) = mean_std(&per_seed.iter().map(|s| s.mean_cm).collect::<Vec<_>>());
    let rate = spec.frame_rate_hz;
    Ok(EvalReport {
        model: spec.kind.name().to_string(),
        train_stride_s: spec.output_stride as f64 / rate,
        eval_stride_s: eval_stride as f64 / rate,
        order: order.get() as u8,
        conditioned: spec.conditioned,
        frame_rate_hz: rate,
        windows: windows.len(),
        cumulative_cm: cumulative_curve(&per_step_cm),
        per_step_cm,
        per_seed,
        mean_cm,
        std_cm,
    })
}

/// Cumulative-error curves of several reports as a standalone SVG.
pub fn curves_svg(reports: &[EvalReport]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let t_max = reports.iter().map(|r| r.cumulative_cm.len() as f64 / r.frame_rate_hz).fold(0.0, f64::max).max(1e-9);
    let y_max = reports
        .iter()
        .flat_map(|r| r.cumulative_cm.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-9)
        * 1.05;
    let sx = |t: f64| M + t / t_max * (W - 2.0 * M);
    let sy = |v: f64| H - M - v / y_max * (H - 2.0 * M);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<path d="M{M} {M} V{} H{}" stroke="black" fill="none"/>"#, H - M, W - M);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">cumulative L2 (cm)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for i in 0..=4 {
        let t = t_max * i as f64 / 4.0;
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.1}</text>"#, sx(t), H - M + 14.0, t);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.0}</text>"#, M - 4.0, sy(v) + 4.0, v);
    }
    for (i, r) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = r
            .cumulative_cm
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.1},{:.1}", sx((k + 1) as f64 / r.frame_rate_hz), sy(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, M + 8.0, r.label());
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_hand_cases() {
        let z = vec![vec![[0.0, 0.0]]];
        assert_eq!(l2_error(&z, &[vec![[3.0, 4.0]]]).unwrap().mean_cm, 500.0);
        assert_eq!(l2_error(&z, &z).unwrap().mean_cm, 0.0);
    }

    #[test]
    fn cumulative_ends_at_mean() {
        let c = cumulative_curve(&[1.0, 2.0, 6.0]);
        assert_eq!(c, vec![1.0, 1.5, 3.0]);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
