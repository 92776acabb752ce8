//! Scenario configuration: strict JSON with field-path error reporting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::RejectionPolicy;
use crate::detect::DetectorParams;
use crate::kinematics::{check_config_limits, KinematicChain, Position};
use crate::physical::ExecutorConfig;
use crate::planning::{GripperWidths, PlannerParams};
use crate::protocol::ChannelModel;
use crate::scene::{Aabb, Scene, SensorParams};
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{}: {message}{}", if path.is_empty() { "<root>" } else { path }, line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Invalid {
        path: String,
        message: String,
        line: Option<usize>,
    },
}

impl ConfigError {
    fn at(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
            line: None,
        }
    }

    /// Dotted field path the error refers to.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            ConfigError::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproverMode {
    AutoApprove,
    AutoRejectNTimes,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproverConfig {
    pub mode: ApproverMode,
    /// Rejections before approving; only used by `auto-reject-n-times`.
    #[serde(default)]
    pub n: u32,
    /// Time the scripted operator takes to decide.
    #[serde(rename = "delay_ms", default)]
    pub delay: SimTime,
    #[serde(default = "default_operator")]
    pub operator_id: String,
}

fn default_operator() -> String {
    "auto-approver".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Physical site to twin.
    pub uplink: ChannelModel,
    /// Twin to physical site.
    pub downlink: ChannelModel,
    /// Twin to operator console, both directions.
    pub console: ChannelModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    #[serde(rename = "planning_time_ms")]
    pub planning_time: SimTime,
    #[serde(default)]
    pub rejection: RejectionPolicy,
    /// Registration error of the digital model's base frame (m), added to
    /// every mirrored end-effector position.
    #[serde(default)]
    pub mirror_offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "max_sim_time_ms")]
    pub max_sim_time: SimTime,
    pub chain: KinematicChain,
    pub home: Vec<f64>,
    pub pick: Vec<f64>,
    pub place: Vec<f64>,
    #[serde(default)]
    pub gripper: GripperWidths,
    pub scene: Scene,
    pub sensor: SensorParams,
    pub detector: DetectorParams,
    pub planner: PlannerParams,
    pub links: LinkConfig,
    pub executor: ExecutorConfig,
    pub twin: TwinConfig,
    pub approver: ApproverConfig,
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("must be positive, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("must be non-negative, got {v}")))
    }
}

fn positive_time(path: &str, t: SimTime) -> Result<(), ConfigError> {
    if t > SimTime::ZERO {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("must be positive, got {t} ms")))
    }
}

fn non_negative_time(path: &str, t: SimTime) -> Result<(), ConfigError> {
    if t.is_negative() {
        Err(ConfigError::at(path, format!("must be non-negative, got {t} ms")))
    } else {
        Ok(())
    }
}

fn valid_box(path: &str, b: &Aabb) -> Result<(), ConfigError> {
    b.validate().map_err(|e| ConfigError::at(path, e.to_string()))
}

impl ScenarioConfig {
    /// Checks every field invariant; the error names the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ConfigError::at("name", "must be a non-empty file-name-safe string"));
        }
        positive_time("max_sim_time_ms", self.max_sim_time)?;
        self.chain.validate().map_err(|e| ConfigError::at("chain", e.to_string()))?;
        for (field, q) in [("home", &self.home), ("pick", &self.pick), ("place", &self.place)] {
            match check_config_limits(&self.chain, q) {
                Ok(v) if v.is_empty() => {}
                Ok(v) => {
                    return Err(ConfigError::at(
                        &format!("{field}[{}]", v[0].joint),
                        format!("outside joint limits by {}", v[0].excess),
                    ))
                }
                Err(e) => return Err(ConfigError::at(field, e.to_string())),
            }
        }
        non_negative("gripper.closed", self.gripper.closed)?;
        if !(self.gripper.open.is_finite() && self.gripper.open >= self.gripper.closed) {
            return Err(ConfigError::at("gripper.open", "must be at least the closed width"));
        }

        let table = &self.scene.table;
        if !table.height.is_finite() {
            return Err(ConfigError::at("scene.table.height", "must be finite"));
        }
        for (i, h) in table.half_extents.iter().enumerate() {
            positive(&format!("scene.table.half_extents[{i}]"), *h)?;
        }
        valid_box("scene.task_object", &self.scene.task_object)?;
        for (i, o) in self.scene.obstacles.iter().enumerate() {
            valid_box(&format!("scene.obstacles[{i}].box"), &o.bbox)?;
            non_negative_time(&format!("scene.obstacles[{i}].spawn_at_ms"), o.spawn_at)?;
        }

        positive_time("sensor.frame_period_ms", self.sensor.frame_period)?;
        positive("sensor.density", self.sensor.density)?;
        non_negative("sensor.noise_sigma", self.sensor.noise_sigma)?;

        let d = &self.detector;
        non_negative("detector.height_threshold", d.height_threshold)?;
        positive("detector.cluster_eps", d.cluster_eps)?;
        if d.cluster_min_pts == 0 {
            return Err(ConfigError::at("detector.cluster_min_pts", "must be at least 1"));
        }
        non_negative("detector.min_volume", d.min_volume)?;
        non_negative_time("detector.compute_time_ms", d.compute_time)?;

        let p = &self.planner;
        non_negative("planner.safety_margin", p.safety_margin)?;
        non_negative("planner.via_height", p.via_height)?;
        positive_time("planner.sample_dt_ms", p.sample_dt)?;
        positive("planner.v_joint_max", p.v_joint_max)?;

        for (name, link) in [
            ("uplink", &self.links.uplink),
            ("downlink", &self.links.downlink),
            ("console", &self.links.console),
        ] {
            link.validate().map_err(|m| ConfigError::at(&format!("links.{name}"), m))?;
        }

        positive_time("executor.telemetry_period_ms", self.executor.telemetry_period)?;
        non_negative_time("executor.actuation_latency_ms", self.executor.actuation_latency)?;
        if !self.executor.instantaneous_stop {
            return Err(ConfigError::at(
                "executor.instantaneous_stop",
                "only instantaneous stops are supported",
            ));
        }

        non_negative_time("twin.planning_time_ms", self.twin.planning_time)?;
        if self.twin.rejection.max_rejections == 0 {
            return Err(ConfigError::at("twin.rejection.max_rejections", "must be at least 1"));
        }
        if !(self.twin.rejection.margin_growth.is_finite() && self.twin.rejection.margin_growth >= 1.0) {
            return Err(ConfigError::at("twin.rejection.margin_growth", "must be at least 1"));
        }

        for (i, v) in self.twin.mirror_offset.iter().enumerate() {
            if !v.is_finite() {
                return Err(ConfigError::at(&format!("twin.mirror_offset[{i}]"), "must be finite"));
            }
        }

        non_negative_time("approver.delay_ms", self.approver.delay)?;
        if self.approver.operator_id.is_empty() {
            return Err(ConfigError::at("approver.operator_id", "must not be empty"));
        }
        Ok(())
    }

    /// Place pose of the task object: its pick-time center carried by the
    /// tool from the pick to the place configuration.
    pub fn expected_place_center(&self) -> Result<Position, ConfigError> {
        let fk = |q: &[f64]| crate::kinematics::ee_position(&self.chain, q).map_err(|e| ConfigError::at("chain", e.to_string()));
        let (a, b) = (fk(&self.pick)?, fk(&self.place)?);
        let c = self.scene.task_object.center;
        Ok([0, 1, 2].map(|k| c[k] + b[k] - a[k]))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configs serialize");
        s.push('\n');
        s
    }
}

/// Strict parse followed by [`ScenarioConfig::validate`].
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Invalid {
            path: if path == "." { String::new() } else { path },
            line: (inner.line() > 0).then_some(inner.line()),
            message: inner.to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}
