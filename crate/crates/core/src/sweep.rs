//! Experiment grids: each cell trains its own seeds and is evaluated at
//! one or more evaluation strides. A failing cell is recorded and the grid
//! continues.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{make_windows, PredictionWindow, TrackedExample};
use crate::error::{Error, Result};
use crate::evaluation::{curves_svg, eval_model, write_results_csv, EvalReport};
use crate::models::{ModelKind, ModelSpec};
use crate::motion::MotionOrder;
use crate::training::{train, TrainConfig, TrainData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// GraN-MA trained at output strides 0.1, 0.4, 1, 2 and 4 s.
    TrainSparsity,
    /// Every model kind, dense outputs.
    Baselines,
    /// Interpolation order 1 to 4 at several strides.
    Orders,
    /// 24 s horizon at strides 0.1, 2, 6 and 24 s.
    LongHorizon,
    /// Standard against fully conditioned, for the kinds that support it.
    Conditioning,
    /// One dense model evaluated at strides 1, 2, 4, 10, 20 and 40 steps.
    EvalSparsity,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::TrainSparsity,
        Experiment::Baselines,
        Experiment::Orders,
        Experiment::LongHorizon,
        Experiment::Conditioning,
        Experiment::EvalSparsity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::TrainSparsity => "train_sparsity",
            Experiment::Baselines => "baselines",
            Experiment::Orders => "orders",
            Experiment::LongHorizon => "long_horizon",
            Experiment::Conditioning => "conditioning",
            Experiment::EvalSparsity => "eval_sparsity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{}'", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub train: TrainConfig,
    pub eval_strides: Vec<usize>,
    pub eval_order: MotionOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub name: String,
    pub cells: Vec<SweepCell>,
}

pub const TRAIN_STRIDES: [usize; 5] = [1, 4, 10, 20, 40];
pub const LONG_STRIDES: [usize; 4] = [1, 20, 60, 240];
pub const EVAL_STRIDES: [usize; 6] = [1, 2, 4, 10, 20, 40];

/// Steps per `seconds` at `rate`, rounded.
fn steps(seconds: f64, rate: f64) -> usize {
    (seconds * rate).round() as usize
}

impl SweepSpec {
    /// The standard grid for `experiment`; `base` supplies epochs, seeds,
    /// widths and the frame rate.
    pub fn preset(experiment: Experiment, base: &TrainConfig) -> Self {
        let rate = base.model.frame_rate_hz;
        let with = |kind: ModelKind, f: &dyn Fn(&mut ModelSpec)| {
            let mut cfg = base.clone();
            cfg.model.kind = kind;
            cfg.model.conditioned = false;
            cfg.model.output_stride = 1;
            f(&mut cfg.model);
            cfg
        };
        let cell = |label: String, train: TrainConfig| SweepCell {
            label,
            eval_order: train.model.order,
            train,
            eval_strides: vec![1],
        };
        let cells = match experiment {
            Experiment::TrainSparsity => TRAIN_STRIDES
                .iter()
                .map(|&s| cell(format!("granma_s{}", s), with(ModelKind::Granma, &|m| m.output_stride = s)))
                .collect(),
            Experiment::Baselines => ModelKind::ALL
                .iter()
                .map(|&k| {
                    let mut cfg = with(k, &|_| {});
                    if matches!(k, ModelKind::SimpleGru | ModelKind::AutoregCnn) {
                        cfg = TrainConfig { learning_rate: 1e-6, ..cfg };
                    }
                    cell(k.name().to_string(), cfg)
                })
                .collect(),
            Experiment::Orders => (1..=4u8)
                .flat_map(|o| [4, 10, 20].map(move |s| (o, s)))
                .map(|(o, s)| {
                    let order = MotionOrder::new(o).expect("1..=4");
                    cell(
                        format!("granma_o{}_s{}", o, s),
                        with(ModelKind::Granma, &|m| {
                            m.order = order;
                            m.output_stride = s;
                        }),
                    )
                })
                .collect(),
            Experiment::LongHorizon => {
                let horizon = steps(24.0, rate);
                let mut cells: Vec<SweepCell> = LONG_STRIDES
                    .iter()
                    .map(|&s| {
                        let stride = steps(s as f64 / 10.0, rate).clamp(1, horizon);
                        let mut cfg = with(ModelKind::Granma, &|m| {
                            m.horizon = horizon;
                            m.output_stride = stride;
                        });
                        cfg.epochs = cfg.epochs.max(400);
                        cell(format!("granma_h{}_s{}", horizon, stride), cfg)
                    })
                    .collect();
                cells.push(cell(format!("lin_ext_h{}", horizon), with(ModelKind::LinExt, &|m| m.horizon = horizon)));
                cells
            }
            Experiment::Conditioning => ModelKind::ALL
                .iter()
                .filter(|k| k.supports_conditioning())
                .flat_map(|&k| {
                    [false, true].map(|c| {
                        let mut cfg = with(k, &|_| {});
                        cfg.model.conditioned = c;
                        cell(format!("{}{}", k.name(), if c { "_cond" } else { "" }), cfg)
                    })
                })
                .collect(),
            Experiment::EvalSparsity => {
                let mut c = cell("granma_dense".into(), with(ModelKind::Granma, &|_| {}));
                c.eval_order = MotionOrder::ACCELERATION;
                c.eval_strides = EVAL_STRIDES.iter().copied().filter(|s| *s <= c.train.model.horizon).collect();
                vec![c]
            }
        };
        Self { name: experiment.name().to_string(), cells }
    }
}

/// Tracked examples for the three splits; windows are cut per cell so
/// cells with different horizons share one dataset.
#[derive(Clone, Debug, Default)]
pub struct SweepData {
    pub train: Vec<TrackedExample>,
    pub val: Vec<TrackedExample>,
    pub test: Vec<TrackedExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub label: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reports: Vec<EvalReport>,
    pub failures: Vec<CellFailure>,
}

fn windows_of(examples: &[TrackedExample], window_len: usize, past_len: usize) -> Result<Vec<PredictionWindow>> {
    let mut out = Vec::new();
    for ex in examples {
        out.extend(make_windows(ex, window_len, past_len)?);
    }
    Ok(out)
}

type Split = (Vec<PredictionWindow>, Vec<PredictionWindow>, Vec<PredictionWindow>);

/// Runs every cell into `out_dir/<cell label>/`, then writes
/// `results.csv`, one `curve_<report>.csv` per report and `curves.svg`.
pub fn run_sweep(spec: &SweepSpec, data: &SweepData, out_dir: &Path) -> Result<SweepOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut cache: HashMap<(usize, usize), Split> = HashMap::new();
    let mut outcome = SweepOutcome::default();
    for cell in &spec.cells {
        let result = (|| -> Result<Vec<EvalReport>> {
            let key = cell.train.window();
            if !cache.contains_key(&key) {
                let split = (
                    windows_of(&data.train, key.0, key.1)?,
                    windows_of(&data.val, key.0, key.1)?,
                    windows_of(&data.test, key.0, key.1)?,
                );
                cache.insert(key, split);
            }
            let (tr, va, te) = &cache[&key];
            let data = TrainData { train: tr.clone(), val: va.clone() };
            let (summary, states) = train(&cell.train, &data, &out_dir.join(&cell.label))?;
            if states.is_empty() {
                let errors: Vec<String> = summary.seeds.iter().filter_map(|s| s.error.clone()).collect();
                return Err(Error::Config(format!("every seed failed: {}", errors.join("; "))));
            }
            cell.eval_strides.iter().map(|&s| eval_model(&states, te, s, cell.eval_order)).collect()
        })();
        match result {
            Ok(reports) => outcome.reports.extend(reports),
            Err(e) => outcome.failures.push(CellFailure { label: cell.label.clone(), error: e.to_string() }),
        }
    }
    write_results_csv(&out_dir.join("results.csv"), &outcome.reports)?;
    for r in &outcome.reports {
        r.write_curve(&out_dir.join(format!("curve_{}.csv", r.label())))?;
    }
    fs::write(out_dir.join("curves.svg"), curves_svg(&outcome.reports))?;
    fs::write(out_dir.join("sweep.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_control_counts() {
        let base = TrainConfig::new(ModelSpec::new(ModelKind::Granma));
        let counts = |e| -> Vec<usize> {
            SweepSpec::preset(e, &base)
                .cells
                .iter()
                .filter(|c| c.train.model.kind == ModelKind::Granma)
                .map(|c| c.train.model.control_count())
                .collect()
        };
        assert_eq!(counts(Experiment::TrainSparsity), vec![40, 10, 4, 2, 1]);
        assert_eq!(counts(Experiment::LongHorizon), vec![240, 12, 4, 1]);
        let cond = SweepSpec::preset(Experiment::Conditioning, &base);
        let kinds: Vec<_> =
            cond.cells.iter().filter(|c| c.train.model.conditioned).map(|c| c.train.model.kind).collect();
        assert_eq!(kinds, vec![ModelKind::Mlp, ModelKind::Granma]);
        assert_eq!(SweepSpec::preset(Experiment::EvalSparsity, &base).cells[0].eval_strides.len(), 6);
    }
}
