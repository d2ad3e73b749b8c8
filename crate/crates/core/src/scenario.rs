//! Scenario schema, JSON (de)serialization with validation, and the
//! observed/future timestep layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkingType {
    Dashed,
    Solid,
    None,
}

impl MarkingType {
    pub fn one_hot(&self) -> [f64; 3] {
        match self {
            MarkingType::Dashed => [1.0, 0.0, 0.0],
            MarkingType::Solid => [0.0, 1.0, 0.0],
            MarkingType::None => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Bus,
    Cyclist,
    Motorcyclist,
}

impl AgentType {
    pub const ALL: [AgentType; 5] = [
        AgentType::Vehicle,
        AgentType::Pedestrian,
        AgentType::Bus,
        AgentType::Cyclist,
        AgentType::Motorcyclist,
    ];

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|t| t == self).unwrap()
    }

    pub fn one_hot(&self) -> [f64; 5] {
        let mut v = [0.0; 5];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Bus => "bus",
            AgentType::Cyclist => "cyclist",
            AgentType::Motorcyclist => "motorcyclist",
        }
    }

    /// Vehicle-like agents are subject to the lane orientation gate.
    pub fn is_vehicle_like(&self) -> bool {
        !matches!(self, AgentType::Pedestrian)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackCategory {
    Focal,
    Scored,
    Unscored,
    Fragment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
    pub observed: bool,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub id: u64,
    pub centerline: Vec<[f64; 2]>,
    pub left_dist: Vec<f64>,
    pub right_dist: Vec<f64>,
    pub left_mark: MarkingType,
    pub right_mark: MarkingType,
    pub predecessors: Vec<u64>,
    pub successors: Vec<u64>,
    pub left_neighbor: Option<u64>,
    pub right_neighbor: Option<u64>,
    pub is_intersection: bool,
}

impl LanePolyline {
    pub fn length(&self) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }

    /// Position at arc length `s`, clamped to the polyline range.
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        let mut remaining = s.max(0.0);
        for w in self.centerline.windows(2) {
            let seg = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            if remaining <= seg {
                let t = if seg > 0.0 { remaining / seg } else { 0.0 };
                return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
            }
            remaining -= seg;
        }
        *self.centerline.last().unwrap()
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let mut remaining = s.max(0.0);
        for w in self.centerline.windows(2) {
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            let seg = (dx * dx + dy * dy).sqrt();
            if remaining <= seg && seg > 0.0 {
                return [dx / seg, dy / seg];
            }
            remaining -= seg;
        }
        let w = &self.centerline[self.centerline.len() - 2..];
        let dx = w[1][0] - w[0][0];
        let dy = w[1][1] - w[0][1];
        let seg = (dx * dx + dy * dy).sqrt().max(1e-12);
        [dx / seg, dy / seg]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub category: TrackCategory,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn n_observed(&self) -> usize {
        self.states.iter().take_while(|s| s.observed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub id: String,
    pub dt_s: f64,
    pub lanes: Vec<LanePolyline>,
    pub tracks: Vec<AgentTrack>,
}

impl Scenario {
    pub fn focal_track(&self) -> &AgentTrack {
        self.tracks
            .iter()
            .find(|t| t.category == TrackCategory::Focal)
            .expect("validated scenario has a focal track")
    }

    pub fn t_obs(&self) -> usize {
        self.tracks[0].n_observed()
    }

    pub fn t_fut(&self) -> usize {
        self.tracks[0].states.len() - self.t_obs()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if self.dt_s <= 0.0 {
            return Err(Error::Invariant("timestep duration must be positive".into()));
        }
        let lane_ids: std::collections::BTreeSet<u64> = self.lanes.iter().map(|l| l.id).collect();
        if lane_ids.len() != self.lanes.len() {
            return Err(Error::Invariant("duplicate lane ids".into()));
        }
        for lane in &self.lanes {
            if lane.centerline.len() < 2 {
                return Err(Error::Invariant(format!(
                    "lane {} has fewer than 2 centerline points",
                    lane.id
                )));
            }
            for w in lane.centerline.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::Invariant(format!(
                        "lane {} has consecutive duplicate centerline points",
                        lane.id
                    )));
                }
            }
            if lane.left_dist.len() != lane.centerline.len()
                || lane.right_dist.len() != lane.centerline.len()
            {
                return Err(Error::Invariant(format!(
                    "lane {} marking distances do not match centerline length",
                    lane.id
                )));
            }
            for r in lane
                .predecessors
                .iter()
                .chain(&lane.successors)
                .chain(lane.left_neighbor.iter())
                .chain(lane.right_neighbor.iter())
            {
                if !lane_ids.contains(r) {
                    return Err(Error::Invariant(format!(
                        "lane {} references unknown lane {}",
                        lane.id, r
                    )));
                }
            }
        }
        if self.tracks.is_empty() {
            return Err(Error::Invariant("scenario has no tracks".into()));
        }
        let n_focal = self
            .tracks
            .iter()
            .filter(|t| t.category == TrackCategory::Focal)
            .count();
        if n_focal != 1 {
            return Err(Error::Invariant(format!(
                "expected exactly one focal track, found {n_focal}"
            )));
        }
        let total = self.tracks[0].states.len();
        let t_obs = self.tracks[0].n_observed();
        if t_obs == 0 || t_obs >= total {
            return Err(Error::Invariant(
                "tracks must have observed steps followed by future steps".into(),
            ));
        }
        let track_ids: std::collections::BTreeSet<u64> =
            self.tracks.iter().map(|t| t.id).collect();
        if track_ids.len() != self.tracks.len() {
            return Err(Error::Invariant("duplicate track ids".into()));
        }
        for track in &self.tracks {
            if track.states.len() != total {
                return Err(Error::Invariant(format!(
                    "track {} has {} timesteps, expected {}",
                    track.id,
                    track.states.len(),
                    total
                )));
            }
            for (i, s) in track.states.iter().enumerate() {
                if s.observed != (i < t_obs) {
                    return Err(Error::Invariant(format!(
                        "track {} observed flags are not a prefix of length {}",
                        track.id, t_obs
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load and validate a scenario from a JSON file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn save_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    let text = serde_json::to_string_pretty(scenario)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Observed/future split: 5 s observed, 6 s future at the configured rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepLayout {
    pub t_obs: usize,
    pub t_fut: usize,
    pub rate_hz: f64,
}

pub fn timestep_layout(rate_hz: f64) -> Result<TimestepLayout> {
    if rate_hz <= 0.0 {
        return Err(Error::Config(format!("rate must be positive, got {rate_hz}")));
    }
    let t_obs = (5.0 * rate_hz).round() as usize;
    let t_fut = (6.0 * rate_hz).round() as usize;
    if t_obs == 0 || t_fut == 0 {
        return Err(Error::Config(format!("rate {rate_hz} Hz gives an empty window")));
    }
    Ok(TimestepLayout { t_obs, t_fut, rate_hz })
}
