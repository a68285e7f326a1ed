use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cell::{CellState, Waypoint};
use crate::cbf::Params;

/// Upper bound on `rate · duration`.
pub const MAX_TICKS: u64 = 10_000_000;

/// Channel names the simulator publishes on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Channels {
    pub robot_pos: String,
    pub battery: String,
    pub human_pos: String,
    pub human_vel: String,
    pub cmd_vel: String,
}

impl Default for Channels {
    fn default() -> Self {
        Channels {
            robot_pos: "robot/pos".into(),
            battery: "robot/battery".into(),
            human_pos: "human/pos".into(),
            human_vel: "human/vel".into(),
            cmd_vel: "robot/cmd_vel".into(),
        }
    }
}

impl Channels {
    fn all(&self) -> [&str; 5] {
        [&self.robot_pos, &self.battery, &self.human_pos, &self.human_vel, &self.cmd_vel]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub state: usize,
    pub channel: String,
    pub component: usize,
}

/// A barrier on the cell state enforced by the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBarrierConfig {
    pub name: String,
    /// `name` or `name@version`.
    pub spec: String,
    #[serde(default)]
    pub params: Params,
    pub channels: BTreeMap<String, String>,
    /// State index driven by each command axis.
    pub actuated: Vec<usize>,
    #[serde(default)]
    pub rates: Vec<RateConfig>,
}

/// A barrier on the command itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBarrierConfig {
    pub name: String,
    pub spec: String,
    #[serde(default)]
    pub params: Params,
    pub channels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    #[serde(default = "yes")]
    pub filter_enabled: bool,
    /// Leaf keys of the actions whose commands are filtered.
    #[serde(default)]
    pub filtered_actions: BTreeSet<String>,
    #[serde(default)]
    pub state_barriers: Vec<StateBarrierConfig>,
    #[serde(default)]
    pub input_barriers: Vec<InputBarrierConfig>,
    /// Symmetric per-axis command limit.
    #[serde(default)]
    pub u_box: Option<f64>,
}

fn yes() -> bool {
    true
}

impl SafetyConfig {
    /// Human-distance filter on every moving action, tracking the human's velocity.
    pub fn standard(channels: &Channels) -> Self {
        SafetyConfig {
            filter_enabled: true,
            filtered_actions: ["go_to_goal", "retreat", "dock", "chase_human"].map(String::from).into(),
            state_barriers: vec![StateBarrierConfig {
                name: "human_guard".into(),
                spec: "human_distance".into(),
                params: Params::new(),
                channels: BTreeMap::from([
                    ("robot".to_owned(), channels.robot_pos.clone()),
                    ("human".to_owned(), channels.human_pos.clone()),
                ]),
                actuated: vec![0, 1],
                rates: (0..2)
                    .map(|i| RateConfig { state: 2 + i, channel: channels.human_vel.clone(), component: i })
                    .collect(),
            }],
            input_barriers: Vec::new(),
            u_box: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub initial: CellState,
    /// Path after the initial human position.
    #[serde(default)]
    pub human_waypoints: Vec<Waypoint>,
    /// Battery fraction lost per second.
    #[serde(default)]
    pub battery_drain: f64,
    pub goal: [f64; 2],
    /// Tick rate in Hz.
    pub rate: f64,
    /// Seconds.
    pub duration: f64,
    #[serde(default)]
    pub channels: Channels,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the uniform noise added to published positions.
    #[serde(default)]
    pub sensor_noise: f64,
    #[serde(default)]
    pub safety: Option<SafetyConfig>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario document at {path}: {message}")]
    Format { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de)
            .map_err(|e| ScenarioError::Format { path: e.path().to_string(), message: e.inner().to_string() })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        let ticks = (self.rate * self.duration).round();
        if ticks < 1.0 || ticks > MAX_TICKS as f64 {
            return bad(format!("rate · duration = {ticks} ticks, must be within 1..={MAX_TICKS}"));
        }
        if !(0.0..=1.0).contains(&self.initial.battery) {
            return bad(format!("battery {} outside [0, 1]", self.initial.battery));
        }
        if !(self.battery_drain >= 0.0 && self.battery_drain.is_finite()) {
            return bad(format!("battery_drain must be non-negative, got {}", self.battery_drain));
        }
        if !(self.sensor_noise >= 0.0 && self.sensor_noise.is_finite()) {
            return bad(format!("sensor_noise must be non-negative, got {}", self.sensor_noise));
        }
        let finite = |p: &[f64; 2]| p.iter().all(|v| v.is_finite());
        if !finite(&self.initial.robot) || !finite(&self.initial.human) || !finite(&self.goal) {
            return bad("positions must be finite".into());
        }
        if !(self.initial.time >= 0.0 && self.initial.time.is_finite()) {
            return bad(format!("initial time must be non-negative, got {}", self.initial.time));
        }
        for (i, w) in self.human_waypoints.iter().enumerate() {
            if !(w.speed >= 0.0 && w.speed.is_finite()) || !finite(&w.position) {
                return bad(format!("waypoint {i}: speed must be non-negative and position finite"));
            }
        }
        let names = self.channels.all();
        if names.iter().any(|c| c.is_empty()) || names.iter().collect::<BTreeSet<_>>().len() != names.len() {
            return bad("channel names must be non-empty and distinct".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn ticks(&self) -> u64 {
        (self.rate * self.duration).round() as u64
    }

    /// The human's full path, starting at the initial position.
    pub fn human_path(&self) -> Vec<Waypoint> {
        let mut path = vec![Waypoint { position: self.initial.human, speed: 0.0 }];
        path.extend_from_slice(&self.human_waypoints);
        path
    }

    pub fn safety_config(&self) -> SafetyConfig {
        self.safety.clone().unwrap_or_else(|| SafetyConfig::standard(&self.channels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "initial": {"robot": [0, 0], "battery": 1.0, "human": [4, 0]},
        "goal": [5, 5],
        "rate": 10,
        "duration": 2
    }"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.ticks(), 20);
        assert_eq!(s.channels, Channels::default());
        assert_eq!(s.safety_config().state_barriers[0].spec, "human_distance");
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_documents() {
        let e = Scenario::from_json(&MINIMAL.replace("\"rate\": 10", "\"rate\": 0")).unwrap_err();
        assert!(matches!(e, ScenarioError::Invalid(m) if m.contains("rate")));
        let e = Scenario::from_json(&MINIMAL.replace("\"goal\"", "\"gaol\"")).unwrap_err();
        assert!(matches!(e, ScenarioError::Format { .. }));
        let e = Scenario::from_json(&MINIMAL.replace("\"battery\": 1.0", "\"battery\": 1.5")).unwrap_err();
        assert!(matches!(e, ScenarioError::Invalid(_)));
        let e = Scenario::from_json(&MINIMAL.replace("\"duration\": 2", "\"duration\": 2e7")).unwrap_err();
        assert!(matches!(e, ScenarioError::Invalid(m) if m.contains("ticks")));
    }
}
