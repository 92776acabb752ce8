//! Messages exchanged between the physical site (robot + edge node), the
//! digital site (twin controller) and the operator console.
//!
//! Every message is framed as a 4-byte big-endian length followed by a
//! UTF-8 JSON object `{"kind", "payload", "sent_at", "seq"}`. Keys are
//! written in sorted order at every level and every payload carries
//! `"v": 1`.

mod channel;
mod codec;

use serde::{Deserialize, Serialize};

use crate::detect::ObstacleReport;
use crate::kinematics::{JointState, Position};
use crate::planning::{MotionPlan, PlanId};
use crate::time::SimTime;

pub use channel::{Channel, ChannelModel};
pub use codec::{
    decode_message, decode_message_json, encode_message, encode_scene_frame, message_json, DecodeError, FrameDecoder,
    MAX_FRAME_LEN, PAYLOAD_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Telemetry,
    ObstacleReport,
    StopCmd,
    PlanProposed,
    ValidationResult,
    PlanDeploy,
    DeployAck,
    MotionStarted,
    TaskDone,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::Telemetry,
        MessageKind::ObstacleReport,
        MessageKind::StopCmd,
        MessageKind::PlanProposed,
        MessageKind::ValidationResult,
        MessageKind::PlanDeploy,
        MessageKind::DeployAck,
        MessageKind::MotionStarted,
        MessageKind::TaskDone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Telemetry => "TELEMETRY",
            MessageKind::ObstacleReport => "OBSTACLE_REPORT",
            MessageKind::StopCmd => "STOP_CMD",
            MessageKind::PlanProposed => "PLAN_PROPOSED",
            MessageKind::ValidationResult => "VALIDATION_RESULT",
            MessageKind::PlanDeploy => "PLAN_DEPLOY",
            MessageKind::DeployAck => "DEPLOY_ACK",
            MessageKind::MotionStarted => "MOTION_STARTED",
            MessageKind::TaskDone => "TASK_DONE",
        }
    }

    pub fn parse(s: &str) -> Option<MessageKind> {
        MessageKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// What the executor is doing when a telemetry sample is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorMode {
    Moving,
    Halted,
    AwaitingMotion,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Telemetry {
    pub state: JointState,
    pub mode: ExecutorMode,
    pub plan_id: Option<PlanId>,
    /// First waypoint of `plan_id` not yet reached.
    pub next_waypoint: usize,
    /// Sequence number of the last STOP_CMD the executor applied.
    pub stop_applied: Option<u64>,
    pub holding_object: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCmd {
    pub report_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracePoint {
    pub t: SimTime,
    pub p: Position,
}

/// A replanned motion offered to the operator, with the digital rehearsal
/// trace and the clearance the planner computed for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanProposed {
    pub plan: MotionPlan,
    pub ee_trace: Vec<TracePoint>,
    pub clearance: f64,
    pub safety_margin: f64,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationResult {
    pub plan_id: PlanId,
    pub approved: bool,
    pub operator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDeploy {
    pub plan: MotionPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployAck {
    pub plan_id: PlanId,
    pub accepted: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionStarted {
    pub plan_id: PlanId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDone {
    pub plan_id: PlanId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Telemetry(Telemetry),
    ObstacleReport(ObstacleReport),
    StopCmd(StopCmd),
    PlanProposed(PlanProposed),
    ValidationResult(ValidationResult),
    PlanDeploy(PlanDeploy),
    DeployAck(DeployAck),
    MotionStarted(MotionStarted),
    TaskDone(TaskDone),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Telemetry(_) => MessageKind::Telemetry,
            Payload::ObstacleReport(_) => MessageKind::ObstacleReport,
            Payload::StopCmd(_) => MessageKind::StopCmd,
            Payload::PlanProposed(_) => MessageKind::PlanProposed,
            Payload::ValidationResult(_) => MessageKind::ValidationResult,
            Payload::PlanDeploy(_) => MessageKind::PlanDeploy,
            Payload::DeployAck(_) => MessageKind::DeployAck,
            Payload::MotionStarted(_) => MessageKind::MotionStarted,
            Payload::TaskDone(_) => MessageKind::TaskDone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    pub sent_at: SimTime,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

impl Serialize for Message {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        codec::to_value(self).map_err(serde::ser::Error::custom)?.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        codec::from_value(value).map_err(serde::de::Error::custom)
    }
}

/// Per-sender sequence numbering.
#[derive(Debug, Clone, Default)]
pub struct Outbox {
    next_seq: u64,
    last_sent: SimTime,
}

impl Outbox {
    pub fn new() -> Self {
        Outbox::default()
    }

    /// Stamps a payload. `now` must not go backwards.
    pub fn stamp(&mut self, payload: Payload, now: SimTime) -> Message {
        debug_assert!(now >= self.last_sent, "sender clock went backwards");
        self.last_sent = now;
        let seq = self.next_seq;
        self.next_seq += 1;
        Message {
            seq,
            sent_at: now,
            payload,
        }
    }
}
