use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsetraj::dataio::{
    make_windows, synth_plays, write_dataset, Manifest, Point, PredictionWindow, Split, SynthParams,
};
use sparsetraj::evaluation::{eval_model_scoped, l2_error, write_results_csv, Scope};
use sparsetraj::models::ModelState;
use sparsetraj::motion::{control_count, densify, estimate_anchor_derivatives, sparsify_dense, MotionOrder};
use sparsetraj::sweep::{run_sweep, Experiment, SweepData, SweepSpec};
use sparsetraj::training::{train, TrainConfig, TrainData};

use crate::service::{self, AppState, Registry};

/// Sparse multi-agent trajectory prediction.
#[derive(Debug, Parser)]
#[command(name = "sparsetraj", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tracking dataset with a manifest.
    Synth(SynthArgs),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Score checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Sweep(SweepArgs),
    /// Keep every stride-th step of dense predictions and re-interpolate.
    Sparsify(SparsifyArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of plays.
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    #[arg(long)]
    pub frames_per_play: Option<usize>,
    #[arg(long)]
    pub plays_per_match: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the manifest named in the config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Predicted,
    Defenders,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint files, one per seed.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Training run directory; every `seed_*/best.ckpt` is used.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Steps between kept predictions; repeat for several.
    #[arg(long = "eval-stride", default_value = "1")]
    pub eval_strides: Vec<usize>,
    /// Interpolation order; defaults to the model's.
    #[arg(long)]
    pub order: Option<u8>,
    #[arg(long, value_enum, default_value = "predicted")]
    pub scope: ScopeArg,
    /// Directory for results.csv, curves and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Preset grid name.
    #[arg(long, conflicts_with = "spec")]
    pub experiment: Option<String>,
    /// Base training config for a preset.
    #[arg(long, requires = "experiment")]
    pub config: Option<PathBuf>,
    /// Explicit sweep spec (TOML or JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SparsifyArgs {
    /// Dense prediction file (JSON).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub stride: usize,
    #[arg(long, default_value_t = 2)]
    pub order: u8,
    /// Interpolated prediction file.
    #[arg(long)]
    pub out: PathBuf,
    /// L2 delta report; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// `ID=PATH` of a checkpoint; the id defaults to the file stem.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Falls back to SPARSETRAJ_BIND, then 127.0.0.1:8080.
    #[arg(long)]
    pub bind: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Sparsify(a) => sparsify(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut params = SynthParams::default();
    if let Some(f) = a.frames_per_play {
        params.frames_per_play = f;
    }
    if let Some(p) = a.plays_per_match {
        params.plays_per_match = p;
    }
    let plays = synth_plays(a.seed, a.count, &params);
    let manifest = write_dataset(&a.out, &plays)?;
    print_json(
        &json!({ "plays": plays.len(), "manifest": a.out.join("manifest.txt") , "files": manifest.entries.len() }),
    )
}

fn load_windows(manifest: &Manifest, split: Split, config: &TrainConfig) -> Result<Vec<PredictionWindow>> {
    let (len, past) = config.window();
    let mut out = Vec::new();
    for ex in manifest.load(split, config.model.frame_rate_hz)? {
        out.extend(make_windows(&ex, len, past)?);
    }
    Ok(out)
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::from_toml(&text)?)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut config = read_config(&a.config)?;
    if let Some(m) = &a.manifest {
        config.manifest = Some(m.clone());
    }
    if let Some(s) = &a.seeds {
        config.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let Some(path) = &config.manifest else { bail!("no manifest given in the config or with --manifest") };
    let manifest = Manifest::read(path).with_context(|| format!("reading {}", path.display()))?;
    let data = TrainData {
        train: load_windows(&manifest, Split::Train, &config)?,
        val: load_windows(&manifest, Split::Val, &config)?,
    };
    if data.train.is_empty() {
        bail!("no training windows of length {} in {}", config.window().0, path.display());
    }
    let (summary, states) = train(&config, &data, &a.out)?;
    print_json(&summary)?;
    if states.is_empty() {
        bail!("every seed failed");
    }
    Ok(())
}

fn checkpoints(a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let mut paths = a.checkpoints.clone();
    if let Some(dir) = &a.run_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path().join("best.ckpt")))
            .filter(|p| p.is_file())
            .collect();
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() {
        bail!("no checkpoints: pass --checkpoint or --run-dir");
    }
    Ok(paths)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let models =
        checkpoints(a)?.iter().map(|p| ModelState::load(p)).collect::<sparsetraj::Result<Vec<ModelState>>>()?;
    let spec = models[0].spec().clone();
    let order = match a.order {
        Some(o) => MotionOrder::new(o)?,
        None => spec.order,
    };
    let split: Split = a.split.parse()?;
    let manifest = Manifest::read(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let windows = load_windows(&manifest, split, &TrainConfig::new(spec.clone()))?;
    if windows.is_empty() {
        bail!("no {} windows of length {}", split, spec.input_len + spec.horizon);
    }
    let scope = match a.scope {
        ScopeArg::Predicted => Scope::Predicted,
        ScopeArg::Defenders => Scope::Defenders,
    };
    let reports = a
        .eval_strides
        .iter()
        .map(|&s| eval_model_scoped(&models, &windows, s, order, scope))
        .collect::<sparsetraj::Result<Vec<_>>>()?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_results_csv(&dir.join("results.csv"), &reports)?;
        for r in &reports {
            r.write_curve(&dir.join(format!("curve_{}.csv", r.label())))?;
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)?)?;
    }
    let summary: Vec<_> = reports
        .iter()
        .zip(&a.eval_strides)
        .map(|(r, &s)| {
            json!({
                "model": r.model,
                "eval_stride_s": r.eval_stride_s,
                "controls": control_count(spec.horizon, s),
                "order": r.order,
                "windows": r.windows,
                "seeds": r.per_seed.len(),
                "mean_l2_cm": r.mean_cm,
                "std_l2_cm": r.std_cm,
            })
        })
        .collect();
    print_json(&summary)
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let spec: SweepSpec = match (&a.spec, &a.experiment) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                toml::from_str(&text)?
            }
        }
        (None, Some(name)) => {
            let base = match &a.config {
                Some(p) => read_config(p)?,
                None => TrainConfig::new(sparsetraj::models::ModelSpec::new(sparsetraj::models::ModelKind::Granma)),
            };
            SweepSpec::preset(Experiment::parse(name)?, &base)
        }
        (None, None) => bail!("pass --experiment or --spec"),
    };
    let manifest = Manifest::read(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let rate = spec.cells.first().map_or(10.0, |c| c.train.model.frame_rate_hz);
    let data = SweepData {
        train: manifest.load(Split::Train, rate)?,
        val: manifest.load(Split::Val, rate)?,
        test: manifest.load(Split::Test, rate)?,
    };
    let outcome = run_sweep(&spec, &data, &a.out)?;
    print_json(&outcome)?;
    if outcome.reports.is_empty() && !outcome.failures.is_empty() {
        bail!("every cell failed");
    }
    Ok(())
}

/// Dense predictions with the observed past each one continues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseFile {
    pub frame_rate_hz: f64,
    pub agents: Vec<DenseAgent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseAgent {
    #[serde(default)]
    pub id: Option<String>,
    pub past: Vec<Point>,
    pub dense: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAgent {
    pub id: Option<String>,
    pub controls: Vec<(usize, Point)>,
    pub dense: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseFile {
    pub frame_rate_hz: f64,
    pub stride: usize,
    pub order: u8,
    pub agents: Vec<SparseAgent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDelta {
    pub id: Option<String>,
    pub mean_delta_cm: f64,
    pub max_delta_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub stride: usize,
    pub order: u8,
    pub controls: usize,
    pub mean_delta_cm: f64,
    pub agents: Vec<AgentDelta>,
}

/// Sparsifies every agent and re-densifies it.
pub fn sparsify_file(input: &DenseFile, stride: usize, order: MotionOrder) -> Result<(SparseFile, DeltaReport)> {
    if stride == 0 {
        bail!("stride must be at least 1");
    }
    let mut agents = Vec::with_capacity(input.agents.len());
    let mut deltas = Vec::with_capacity(input.agents.len());
    for (i, agent) in input.agents.iter().enumerate() {
        let name = agent.id.clone().unwrap_or_else(|| format!("agents[{i}]"));
        if agent.dense.is_empty() {
            bail!("{name}: empty dense track");
        }
        let mut coords: [Vec<f64>; 2] = Default::default();
        let mut controls: [Vec<f64>; 2] = Default::default();
        let mut offsets = Vec::new();
        for c in 0..2 {
            let history: Vec<f64> = agent.past.iter().map(|p| p[c]).collect();
            let dense: Vec<f64> = agent.dense.iter().map(|p| p[c]).collect();
            let anchor = estimate_anchor_derivatives(&history, order).with_context(|| format!("{name}: past"))?;
            let track = sparsify_dense(&dense, stride, anchor)?;
            offsets = track.controls.iter().map(|k| k.offset).collect();
            controls[c] = track.controls.iter().map(|k| k.position).collect();
            coords[c] = densify(&track, order)?;
        }
        let dense: Vec<Point> = coords[0].iter().zip(&coords[1]).map(|(x, y)| [*x, *y]).collect();
        let l2 = l2_error(std::slice::from_ref(&agent.dense), std::slice::from_ref(&dense))?;
        deltas.push(AgentDelta {
            id: agent.id.clone(),
            mean_delta_cm: l2.mean_cm,
            max_delta_cm: l2.per_step_cm.iter().copied().fold(0.0, f64::max),
        });
        let ctrl = offsets.iter().enumerate().map(|(k, &o)| (o, [controls[0][k], controls[1][k]])).collect();
        agents.push(SparseAgent { id: agent.id.clone(), controls: ctrl, dense });
    }
    let n = deltas.len().max(1) as f64;
    let report = DeltaReport {
        stride,
        order: order.get() as u8,
        controls: agents.first().map_or(0, |a| a.controls.len()),
        mean_delta_cm: deltas.iter().map(|d| d.mean_delta_cm).sum::<f64>() / n,
        agents: deltas,
    };
    let out = SparseFile { frame_rate_hz: input.frame_rate_hz, stride, order: report.order, agents };
    Ok((out, report))
}

pub fn sparsify(a: &SparsifyArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let input: DenseFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let (out, report) = sparsify_file(&input, a.stride, MotionOrder::new(a.order)?)?;
    fs::write(&a.out, serde_json::to_string_pretty(&out)?)?;
    match &a.report {
        Some(p) => fs::write(p, serde_json::to_string_pretty(&report)?)?,
        None => print_json(&report)?,
    }
    Ok(())
}

/// Parses `ID=PATH` or a bare path.
pub fn model_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((id, path)) => (id.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (id, path)
        }
    }
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let mut models = Vec::new();
    for arg in &a.models {
        let (id, path) = model_arg(arg);
        models.push((id, ModelState::load(&path)?));
    }
    let state = AppState::new(Registry::new(models));
    let bind = service::bind_address(a.bind.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, &bind)).with_context(|| format!("serving on {bind}"))?;
    Ok(())
}
