//! Synthetic soccer plays with kinematic caps.
//!
//! Attackers steer toward waypoints around their formation slot that are
//! resampled at random times. The ball follows its possessor and travels to
//! a teammate on pass events. Each defender steers toward a fixed convex
//! combination of the nearest attacker, the ball and its own formation slot.
//! All agents, ball included, obey the same speed and acceleration caps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tracking::{AgentInfo, Team, TrackedExample};
use super::Point;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub pitch_length_m: f64,
    pub pitch_width_m: f64,
    pub frame_rate_hz: f64,
    pub frames_per_play: usize,
    pub warmup_frames: usize,
    /// m/s
    pub max_speed: f64,
    /// m/s²
    pub max_accel: f64,
    /// Expected waypoint switches per attacker per second.
    pub waypoint_rate_hz: f64,
    /// Expected passes per second while the ball is controlled.
    pub pass_rate_hz: f64,
    pub plays_per_match: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            pitch_length_m: 105.0,
            pitch_width_m: 68.0,
            frame_rate_hz: 10.0,
            frames_per_play: 60,
            warmup_frames: 30,
            max_speed: 9.0,
            max_accel: 6.0,
            waypoint_rate_hz: 0.4,
            pass_rate_hz: 0.3,
            plays_per_match: 20,
        }
    }
}

/// 4-4-2 slots for a team attacking toward +x, by role.
const FORMATION: [Point; 11] = [
    [-47.0, 0.0],
    [-30.0, -24.0],
    [-32.0, -8.0],
    [-32.0, 8.0],
    [-30.0, 24.0],
    [-10.0, -22.0],
    [-12.0, -7.0],
    [-12.0, 7.0],
    [-10.0, 22.0],
    [8.0, -8.0],
    [8.0, 8.0],
];

#[derive(Clone, Copy)]
struct Body {
    pos: Point,
    vel: Point,
}

struct Kinematics {
    dt: f64,
    max_speed: f64,
    max_accel: f64,
}

impl Kinematics {
    fn steer(&self, body: &mut Body, target: Point, cruise: f64) {
        let to = [target[0] - body.pos[0], target[1] - body.pos[1]];
        let dist = to[0].hypot(to[1]);
        let desired = if dist > 1e-9 {
            let speed = cruise.min(1.2 * dist);
            [to[0] / dist * speed, to[1] / dist * speed]
        } else {
            [0.0, 0.0]
        };
        let mut dv = [desired[0] - body.vel[0], desired[1] - body.vel[1]];
        let cap = self.max_accel * self.dt;
        let n = dv[0].hypot(dv[1]);
        if n > cap {
            dv = [dv[0] * cap / n, dv[1] * cap / n];
        }
        let mut v = [body.vel[0] + dv[0], body.vel[1] + dv[1]];
        let s = v[0].hypot(v[1]);
        if s > self.max_speed {
            v = [v[0] * self.max_speed / s, v[1] * self.max_speed / s];
        }
        body.vel = v;
        body.pos = [body.pos[0] + v[0] * self.dt, body.pos[1] + v[1] * self.dt];
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Generates `count` plays. Play `i` depends only on `(seed, i)`.
pub fn synth_plays(seed: u64, count: usize, params: &SynthParams) -> Vec<TrackedExample> {
    (0..count).map(|i| synth_play(seed, i, params)).collect()
}

fn synth_play(seed: u64, index: usize, p: &SynthParams) -> TrackedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let kin = Kinematics { dt: 1.0 / p.frame_rate_hz, max_speed: p.max_speed, max_accel: p.max_accel };
    let dt = kin.dt;
    let half_l = p.pitch_length_m / 2.0;
    let half_w = p.pitch_width_m / 2.0;
    let clamp = |q: Point| [q[0].clamp(-half_l + 2.0, half_l - 2.0), q[1].clamp(-half_w + 2.0, half_w - 2.0)];

    let home_attacks = rng.gen_bool(0.5);
    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let push = rng.gen_range(0.0..20.0);
    let attack_slot = |r: usize| clamp([dir * (FORMATION[r][0] + 12.0 + push), FORMATION[r][1]]);
    let defend_slot = |r: usize| clamp([-dir * FORMATION[r][0] * 0.8 + dir * (push - 10.0), FORMATION[r][1] * 0.8]);

    let jitter = |rng: &mut ChaCha8Rng, q: Point, sx: f64, sy: f64| {
        clamp([q[0] + rng.gen_range(-sx..sx), q[1] + rng.gen_range(-sy..sy)])
    };

    let mut attackers: Vec<Body> =
        (0..11).map(|r| Body { pos: jitter(&mut rng, attack_slot(r), 4.0, 4.0), vel: [0.0, 0.0] }).collect();
    let mut defenders: Vec<Body> =
        (0..11).map(|r| Body { pos: jitter(&mut rng, defend_slot(r), 4.0, 4.0), vel: [0.0, 0.0] }).collect();
    let mut waypoints: Vec<Point> = (0..11).map(|r| jitter(&mut rng, attack_slot(r), 12.0, 10.0)).collect();
    let mut cruise: Vec<f64> = (0..11).map(|_| rng.gen_range(2.0..7.0)).collect();
    let def_cruise: Vec<f64> = (0..11).map(|_| rng.gen_range(3.0..7.5)).collect();
    let def_weights: Vec<[f64; 3]> = (0..11)
        .map(|_| {
            let w = [rng.gen_range(0.2..1.0), rng.gen_range(0.0..0.6), rng.gen_range(0.3..1.0)];
            let s: f64 = w.iter().sum();
            [w[0] / s, w[1] / s, w[2] / s]
        })
        .collect();

    let mut possessor = rng.gen_range(5..11);
    let mut receiver: Option<usize> = None;
    let mut ball = Body { pos: attackers[possessor].pos, vel: [0.0, 0.0] };

    let total = p.warmup_frames + p.frames_per_play;
    let mut recorded = Vec::with_capacity(p.frames_per_play);
    for t in 0..total {
        for r in 0..11 {
            if rng.gen_bool((p.waypoint_rate_hz * dt).clamp(0.0, 1.0)) {
                waypoints[r] = jitter(&mut rng, attack_slot(r), 12.0, 10.0);
                cruise[r] = rng.gen_range(2.0..7.0);
            }
            kin.steer(&mut attackers[r], waypoints[r], cruise[r]);
        }

        match receiver {
            Some(to) => {
                kin.steer(&mut ball, attackers[to].pos, p.max_speed);
                if dist(ball.pos, attackers[to].pos) < 1.0 {
                    possessor = to;
                    receiver = None;
                }
            }
            None => {
                let owner = attackers[possessor];
                let lead = [owner.pos[0] + 0.3 * owner.vel[0], owner.pos[1] + 0.3 * owner.vel[1]];
                kin.steer(&mut ball, lead, p.max_speed);
                if dist(ball.pos, owner.pos) < 2.0 && rng.gen_bool((p.pass_rate_hz * dt).clamp(0.0, 1.0)) {
                    let mut to = rng.gen_range(1..11);
                    if to == possessor {
                        to = 0;
                    }
                    receiver = Some(to);
                }
            }
        }

        for r in 0..11 {
            let me = defenders[r].pos;
            let nearest =
                attackers.iter().map(|a| a.pos).min_by(|a, b| dist(*a, me).total_cmp(&dist(*b, me))).unwrap_or(me);
            let [wa, wb, wh] = def_weights[r];
            let home = defend_slot(r);
            let target =
                [wa * nearest[0] + wb * ball.pos[0] + wh * home[0], wa * nearest[1] + wb * ball.pos[1] + wh * home[1]];
            kin.steer(&mut defenders[r], target, def_cruise[r]);
        }

        if t >= p.warmup_frames {
            let (home, away) = if home_attacks { (&attackers, &defenders) } else { (&defenders, &attackers) };
            let mut frame = Vec::with_capacity(23);
            frame.push(ball.pos);
            frame.extend(home.iter().map(|b| b.pos));
            frame.extend(away.iter().map(|b| b.pos));
            recorded.push(frame);
        }
    }

    let mut agents = vec![AgentInfo { agent_id: 0, team: Team::Ball, role: 0 }];
    agents.extend((0..11).map(|r| AgentInfo { agent_id: 1 + r, team: Team::Home, role: r }));
    agents.extend((0..11).map(|r| AgentInfo { agent_id: 12 + r, team: Team::Away, role: r }));
    let per_match = p.plays_per_match.max(1);
    TrackedExample {
        match_id: format!("s{}_m{:04}", seed, index / per_match),
        frame_rate_hz: p.frame_rate_hz,
        first_frame: 0,
        agents,
        in_play: vec![true; recorded.len()],
        frames: recorded,
    }
}
