use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Point;
use crate::error::{Error, Result};

/// Agents per frame: one ball and two teams of eleven.
pub const AGENTS: usize = 23;

const HEADER: [&str; 7] = ["frame", "agent_id", "team", "role", "x_m", "y_m", "in_play"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Team {
    Ball,
    Home,
    Away,
}

impl Team {
    pub fn as_str(self) -> &'static str {
        match self {
            Team::Ball => "ball",
            Team::Home => "home",
            Team::Away => "away",
        }
    }

    pub fn opponent(self) -> Team {
        match self {
            Team::Home => Team::Away,
            Team::Away => Team::Home,
            Team::Ball => Team::Ball,
        }
    }

    fn parse(s: &str) -> Option<Team> {
        match s {
            "ball" => Some(Team::Ball),
            "home" => Some(Team::Home),
            "away" => Some(Team::Away),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub agent_id: u32,
    pub team: Team,
    pub role: u32,
}

/// One tracked sequence: 23 agents sorted ball, home by role, away by role.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedExample {
    pub match_id: String,
    pub frame_rate_hz: f64,
    pub first_frame: i64,
    pub agents: Vec<AgentInfo>,
    /// `frames[t][agent]`.
    pub frames: Vec<Vec<Point>>,
    pub in_play: Vec<bool>,
}

impl TrackedExample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Trajectory of one agent (by index into `agents`).
    pub fn track(&self, agent: usize) -> Vec<Point> {
        self.frames.iter().map(|f| f[agent]).collect()
    }
}

#[derive(Deserialize)]
struct Row {
    frame: i64,
    agent_id: u32,
    team: String,
    role: u32,
    x_m: f64,
    y_m: f64,
    in_play: u8,
}

/// Loads a tracking CSV. The match id is the file stem.
pub fn load_tracking(path: &Path, frame_rate_hz: f64) -> Result<TrackedExample> {
    let file = std::fs::File::open(path)?;
    let match_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_tracking(file, &path.display().to_string(), &match_id, frame_rate_hz)
}

/// Parses and validates tracking rows from any reader. `label` names the
/// source in error messages.
pub fn read_tracking<R: Read>(reader: R, label: &str, match_id: &str, frame_rate_hz: f64) -> Result<TrackedExample> {
    let parse_err = |line: u64, detail: String| Error::Parse { path: label.to_string(), line, detail };
    let frame_err = |frame: i64, detail: String| Error::Frame { path: label.to_string(), frame, detail };

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(parse_err(1, format!("expected header `{}`, got `{}`", HEADER.join(","), header.join(","))));
    }

    // frame -> (in_play, rows), preserving file order of frames
    let mut frames: Vec<(i64, bool, Vec<(AgentInfo, Point)>)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record.deserialize(Some(&csv::StringRecord::from(HEADER.to_vec()))).map_err(|e| {
            let detail = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            };
            parse_err(line, detail)
        })?;
        let team = Team::parse(&row.team)
            .ok_or_else(|| parse_err(line, format!("team must be ball, home or away, got `{}`", row.team)))?;
        if !row.x_m.is_finite() || !row.y_m.is_finite() {
            return Err(parse_err(line, format!("non-finite coordinate for agent {}", row.agent_id)));
        }
        let in_play = match row.in_play {
            0 => false,
            1 => true,
            v => return Err(parse_err(line, format!("in_play must be 0 or 1, got {}", v))),
        };
        let info = AgentInfo { agent_id: row.agent_id, team, role: row.role };
        match frames.last_mut() {
            Some((f, flag, rows)) if *f == row.frame => {
                if *flag != in_play {
                    return Err(parse_err(line, format!("in_play disagrees within frame {}", row.frame)));
                }
                rows.push((info, [row.x_m, row.y_m]));
            }
            Some((f, _, _)) if row.frame != *f + 1 => {
                return Err(parse_err(
                    line,
                    format!("frames must be contiguous and increasing: {} follows {}", row.frame, f),
                ));
            }
            _ => frames.push((row.frame, in_play, vec![(info, [row.x_m, row.y_m])])),
        }
    }
    if frames.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }

    let first_frame = frames[0].0;
    let mut agents: Vec<AgentInfo> = Vec::new();
    let mut out_frames = Vec::with_capacity(frames.len());
    let mut in_play = Vec::with_capacity(frames.len());
    for (frame, flag, mut rows) in frames {
        let mut counts = BTreeMap::new();
        for (info, _) in &rows {
            *counts.entry(info.team).or_insert(0usize) += 1;
        }
        for (team, want) in [(Team::Ball, 1), (Team::Home, 11), (Team::Away, 11)] {
            let have = counts.get(&team).copied().unwrap_or(0);
            if have != want {
                return Err(frame_err(frame, format!("expected {} {} agent(s), found {}", want, team.as_str(), have)));
            }
        }
        rows.sort_by_key(|(i, _)| (i.team, i.role, i.agent_id));
        let infos: Vec<AgentInfo> = rows.iter().map(|(i, _)| *i).collect();
        if agents.is_empty() {
            agents = infos;
        } else if agents != infos {
            return Err(frame_err(frame, "agent ids, teams or roles differ from the first frame".into()));
        }
        out_frames.push(rows.into_iter().map(|(_, p)| p).collect());
        in_play.push(flag);
    }

    Ok(TrackedExample {
        match_id: match_id.to_string(),
        frame_rate_hz,
        first_frame,
        agents,
        frames: out_frames,
        in_play,
    })
}

/// Writes the documented CSV layout.
pub fn write_tracking<W: Write>(example: &TrackedExample, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for (t, frame) in example.frames.iter().enumerate() {
        let f = (example.first_frame + t as i64).to_string();
        let flag = if example.in_play[t] { "1" } else { "0" };
        for (info, p) in example.agents.iter().zip(frame) {
            w.write_record([
                f.as_str(),
                &info.agent_id.to_string(),
                info.team.as_str(),
                &info.role.to_string(),
                &format!("{:?}", p[0]),
                &format!("{:?}", p[1]),
                flag,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
