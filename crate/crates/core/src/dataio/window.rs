use super::tracking::{AgentInfo, Team, TrackedExample, AGENTS};
use super::Point;
use crate::error::{Error, Result};

/// A fixed-length training example in canonical order: ball, the eleven
/// attackers by role, then the eleven defenders by role.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionWindow {
    pub match_id: String,
    pub start_frame: i64,
    pub frame_rate_hz: f64,
    pub past_len: usize,
    pub attacking: Team,
    pub agents: Vec<AgentInfo>,
    /// `tracks[agent][t]` for `t` in `0..len`.
    pub tracks: Vec<Vec<Point>>,
}

impl PredictionWindow {
    pub const BALL: usize = 0;
    pub const ATTACKERS: std::ops::Range<usize> = 1..12;
    pub const DEFENDERS: std::ops::Range<usize> = 12..23;

    pub fn len(&self) -> usize {
        self.tracks.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.len() - self.past_len
    }

    pub fn past(&self, agent: usize) -> &[Point] {
        &self.tracks[agent][..self.past_len]
    }

    pub fn future(&self, agent: usize) -> &[Point] {
        &self.tracks[agent][self.past_len..]
    }

    pub fn full(&self, agent: usize) -> &[Point] {
        &self.tracks[agent]
    }
}

/// Start offsets of windows inside a span, stepping by `ceil(T/2)`.
pub fn window_starts(span_len: usize, window_len: usize) -> Vec<usize> {
    let step = window_len.div_ceil(2).max(1);
    (0..).map(|k| k * step).take_while(|s| s + window_len <= span_len).collect()
}

/// Team of the player nearest the ball at frame `t`; ties go to home.
pub fn attacking_team(agents: &[AgentInfo], frame: &[Point]) -> Team {
    let ball = agents.iter().position(|a| a.team == Team::Ball).map_or([0.0, 0.0], |i| frame[i]);
    let mut best = (f64::INFINITY, Team::Home);
    for (a, p) in agents.iter().zip(frame) {
        if a.team == Team::Ball {
            continue;
        }
        let d = (p[0] - ball[0]).hypot(p[1] - ball[1]);
        if d < best.0 || (d == best.0 && a.team == Team::Home && best.1 == Team::Away) {
            best = (d, a.team);
        }
    }
    best.1
}

/// Cuts windows of `window_len` frames, the first `past_len` of them
/// observed, from every maximal in-play span of `example`.
pub fn make_windows(example: &TrackedExample, window_len: usize, past_len: usize) -> Result<Vec<PredictionWindow>> {
    if !(window_len > past_len && past_len >= 2) {
        return Err(Error::Window(format!(
            "need window length > past length >= 2, got T={} n={}",
            window_len, past_len
        )));
    }
    if example.agents.len() != AGENTS {
        return Err(Error::Window(format!("expected {} agents, got {}", AGENTS, example.agents.len())));
    }
    let mut out = Vec::new();
    let mut t = 0;
    while t < example.len() {
        if !example.in_play[t] {
            t += 1;
            continue;
        }
        let span_start = t;
        while t < example.len() && example.in_play[t] {
            t += 1;
        }
        for s in window_starts(t - span_start, window_len) {
            out.push(cut_window(example, span_start + s, window_len, past_len));
        }
    }
    Ok(out)
}

fn cut_window(example: &TrackedExample, start: usize, window_len: usize, past_len: usize) -> PredictionWindow {
    let frames = &example.frames[start..start + window_len];
    let attacking = attacking_team(&example.agents, &frames[past_len - 1]);
    let order: Vec<usize> = [Team::Ball, attacking, attacking.opponent()]
        .into_iter()
        .flat_map(|team| example.agents.iter().enumerate().filter(move |(_, a)| a.team == team).map(|(i, _)| i))
        .collect();
    PredictionWindow {
        match_id: example.match_id.clone(),
        start_frame: example.first_frame + start as i64,
        frame_rate_hz: example.frame_rate_hz,
        past_len,
        attacking,
        agents: order.iter().map(|&i| example.agents[i]).collect(),
        tracks: order.iter().map(|&i| frames.iter().map(|f| f[i]).collect()).collect(),
    }
}

/// Mirrors a window across the pitch centre lines.
pub fn augment_flip(window: &PredictionWindow, flip_x: bool, flip_y: bool) -> PredictionWindow {
    let sx = if flip_x { -1.0 } else { 1.0 };
    let sy = if flip_y { -1.0 } else { 1.0 };
    let mut out = window.clone();
    for track in &mut out.tracks {
        for p in track.iter_mut() {
            p[0] *= sx;
            p[1] *= sy;
        }
    }
    out
}
