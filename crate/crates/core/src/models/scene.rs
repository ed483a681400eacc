use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::dataio::{Point, PredictionWindow};
use crate::error::{Error, Result};
use crate::motion::{estimate_anchor_derivatives, Anchor};

/// Model input in canonical order. Ball and attackers span `input_len`
/// steps, or `input_len + horizon` when conditioned; defenders always span
/// `input_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInput {
    pub ball: Vec<Point>,
    pub attackers: Vec<Vec<Point>>,
    pub defenders: Vec<Vec<Point>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "group", content = "index", rename_all = "snake_case")]
pub enum AgentSlot {
    Ball,
    Attacker(usize),
    Defender(usize),
}

impl AgentSlot {
    /// Slots predicted under the given mode, in output order.
    pub fn predicted(conditioned: bool) -> Vec<AgentSlot> {
        let defenders = (0..11).map(AgentSlot::Defender);
        if conditioned {
            defenders.collect()
        } else {
            std::iter::once(AgentSlot::Ball).chain((0..11).map(AgentSlot::Attacker)).chain(defenders).collect()
        }
    }

    /// Index in the canonical 23-agent order.
    pub fn canonical(self) -> usize {
        match self {
            AgentSlot::Ball => 0,
            AgentSlot::Attacker(i) => 1 + i,
            AgentSlot::Defender(i) => 12 + i,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedAgent {
    pub slot: AgentSlot,
    /// One position per future step.
    pub dense: Vec<Point>,
    /// `(step offset, position)` control points when the output was sparse.
    pub controls: Option<Vec<(usize, Point)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub agents: Vec<PredictedAgent>,
}

impl ScenePrediction {
    /// Dense trajectories `[agent][step]`.
    pub fn dense(&self) -> Vec<Vec<Point>> {
        self.agents.iter().map(|a| a.dense.clone()).collect()
    }
}

impl SceneInput {
    pub fn from_window(window: &PredictionWindow, conditioned: bool) -> Self {
        let n = window.past_len;
        let offense = |i: usize| {
            if conditioned {
                window.full(i).to_vec()
            } else {
                window.past(i).to_vec()
            }
        };
        Self {
            ball: offense(PredictionWindow::BALL),
            attackers: PredictionWindow::ATTACKERS.map(offense).collect(),
            defenders: PredictionWindow::DEFENDERS.map(|i| window.full(i)[..n].to_vec()).collect(),
        }
    }

    /// Trajectory of a canonical agent index.
    pub fn agent(&self, canonical: usize) -> &[Point] {
        match canonical {
            0 => &self.ball,
            1..=11 => &self.attackers[canonical - 1],
            _ => &self.defenders[canonical - 12],
        }
    }

    /// Observed past of a slot (the first `input_len` steps).
    pub fn past(&self, slot: AgentSlot, input_len: usize) -> &[Point] {
        &self.agent(slot.canonical())[..input_len]
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.attackers.len() != 11 || self.defenders.len() != 11 {
            return Err(Error::Scene(format!(
                "need 11 attackers and 11 defenders, got {} and {}",
                self.attackers.len(),
                self.defenders.len()
            )));
        }
        let off = spec.offense_len();
        let check = |name: String, track: &[Point], want: usize| {
            if track.len() != want {
                return Err(Error::Scene(format!("{} has {} steps, model expects {}", name, track.len(), want)));
            }
            if track.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(Error::Scene(format!("{} has non-finite positions", name)));
            }
            Ok(())
        };
        check("ball".into(), &self.ball, off)?;
        for (i, a) in self.attackers.iter().enumerate() {
            check(format!("attackers[{}]", i), a, off)?;
        }
        for (i, d) in self.defenders.iter().enumerate() {
            check(format!("defenders[{}]", i), d, spec.input_len)?;
        }
        Ok(())
    }

    /// Row of interleaved `[x0, y0, x1, y1, ..]` for one agent.
    pub(crate) fn flat(&self, canonical: usize) -> Vec<f64> {
        self.agent(canonical).iter().flat_map(|p| [p[0], p[1]]).collect()
    }
}

/// Ground-truth futures of the predicted agents `[agent][step]`.
pub fn window_targets(window: &PredictionWindow, conditioned: bool) -> Vec<Vec<Point>> {
    AgentSlot::predicted(conditioned).iter().map(|s| window.future(s.canonical()).to_vec()).collect()
}

/// Scenes plus everything derived from them that the networks and the
/// densify step consume.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub scenes: Vec<SceneInput>,
    pub slots: Vec<AgentSlot>,
    /// One anchor per output row, rows ordered (scene, agent, coordinate).
    pub anchors: Vec<Anchor>,
    pub targets: Option<Tensor>,
}

impl SceneBatch {
    pub fn new(spec: &ModelSpec, scenes: Vec<SceneInput>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Scene("empty batch".into()));
        }
        for s in &scenes {
            s.validate(spec)?;
        }
        let slots = AgentSlot::predicted(spec.conditioned);
        let mut anchors = Vec::with_capacity(scenes.len() * slots.len() * 2);
        for s in &scenes {
            for slot in &slots {
                let past = s.past(*slot, spec.input_len);
                for c in 0..2 {
                    let coord: Vec<f64> = past.iter().map(|p| p[c]).collect();
                    anchors.push(estimate_anchor_derivatives(&coord, spec.order)?);
                }
            }
        }
        Ok(Self { scenes, slots, anchors, targets: None })
    }

    /// Attaches `[scene][agent][step]` targets as a `(rows x horizon)` tensor.
    pub fn with_targets(mut self, spec: &ModelSpec, targets: &[Vec<Vec<Point>>]) -> Result<Self> {
        if targets.len() != self.scenes.len() {
            return Err(Error::Shape(format!("{} targets for {} scenes", targets.len(), self.scenes.len())));
        }
        let h = spec.horizon;
        let mut data = Vec::with_capacity(self.rows() * h);
        for t in targets {
            if t.len() != self.slots.len() || t.iter().any(|a| a.len() != h) {
                return Err(Error::Shape(format!("targets must be {} agents x {} steps", self.slots.len(), h)));
            }
            for agent in t {
                for c in 0..2 {
                    data.extend(agent.iter().map(|p| p[c]));
                }
            }
        }
        self.targets = Some(Tensor::matrix(self.rows(), h, data)?);
        Ok(self)
    }

    pub fn from_windows(spec: &ModelSpec, windows: &[PredictionWindow]) -> Result<Self> {
        let scenes = windows.iter().map(|w| SceneInput::from_window(w, spec.conditioned)).collect();
        let targets: Vec<_> = windows.iter().map(|w| window_targets(w, spec.conditioned)).collect();
        Self::new(spec, scenes)?.with_targets(spec, &targets)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Output rows: scenes x predicted agents x 2.
    pub fn rows(&self) -> usize {
        self.scenes.len() * self.slots.len() * 2
    }

    /// `(B*count) x (2*len)` matrix of flattened trajectories for canonical
    /// agents `first..first+count`.
    pub(crate) fn group_matrix(&self, first: usize, count: usize) -> Result<Tensor> {
        let width = self.scenes[0].agent(first).len() * 2;
        let mut data = Vec::with_capacity(self.scenes.len() * count * width);
        for s in &self.scenes {
            for a in first..first + count {
                data.extend(s.flat(a));
            }
        }
        Ok(Tensor::matrix(self.scenes.len() * count, width, data)?)
    }

    /// `B x (23*2)` positions at step `t` for every agent, interleaved.
    pub(crate) fn frame_matrix(&self, t: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.scenes.len() * 46);
        for s in &self.scenes {
            for a in 0..23 {
                let p = s.agent(a)[t];
                data.extend([p[0], p[1]]);
            }
        }
        Ok(Tensor::matrix(self.scenes.len(), 46, data)?)
    }
}
