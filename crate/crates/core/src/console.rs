//! Frames exchanged with the operator console over the WebSocket bridge.
//!
//! Outbound frames are the twin-protocol JSON bodies the twin sees plus
//! `SNAPSHOT` frames carrying controller state. Inbound, the console may
//! send `SUBSCRIBE` and `VALIDATION_RESULT` only.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::controller::Phase;
use crate::kinematics::{ee_position, JointState, Position};
use crate::metrics::{EventRecord, Link, LoggedEvent, Outcome};
use crate::planning::PlanId;
use crate::protocol::{decode_message_json, message_json, DecodeError, Message, Payload, PlanProposed, ValidationResult, PAYLOAD_VERSION};
use crate::scene::Aabb;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub run_id: String,
    pub t: SimTime,
    pub phase: Phase,
    pub mirror: JointState,
    pub mirror_ee: Position,
    #[serde(rename = "obstacle")]
    pub obstacle: Option<Aabb>,
    pub active_plan_id: PlanId,
    pub pending: Option<PlanProposed>,
    pub rejections: u32,
    pub alarm: Option<String>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConsoleFrame {
    Message(Message),
    Snapshot { seq: u64, snapshot: Snapshot },
}

impl ConsoleFrame {
    pub fn to_json(&self) -> String {
        match self {
            ConsoleFrame::Message(m) => String::from_utf8(message_json(m)).expect("JSON is UTF-8"),
            ConsoleFrame::Snapshot { seq, snapshot } => {
                let mut payload = serde_json::to_value(snapshot).expect("snapshots serialize");
                if let Value::Object(p) = &mut payload {
                    p.insert("v".into(), Value::from(PAYLOAD_VERSION));
                }
                let mut map = Map::new();
                map.insert("kind".into(), Value::from("SNAPSHOT"));
                map.insert("payload".into(), payload);
                map.insert("sent_at".into(), serde_json::to_value(snapshot.t).expect("times serialize"));
                map.insert("seq".into(), Value::from(*seq));
                Value::Object(map).to_string()
            }
        }
    }
}

/// What a console may send.
#[derive(Debug, Clone, PartialEq)]
pub enum ConsoleInbound {
    Subscribe { run_id: Option<String> },
    Validation(ValidationResult),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubscribeBody {
    #[serde(default)]
    run_id: Option<String>,
    v: u64,
}

pub fn parse_console_inbound(text: &str) -> Result<ConsoleInbound, DecodeError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::Malformed(format!("json: {e}")))?;
    if value.get("kind").and_then(Value::as_str) == Some("SUBSCRIBE") {
        let payload = value.get("payload").cloned().unwrap_or_else(|| Value::Object(Map::new()));
        let body: SubscribeBody =
            serde_json::from_value(payload).map_err(|e| DecodeError::Malformed(format!("subscribe payload: {e}")))?;
        if body.v != PAYLOAD_VERSION {
            return Err(DecodeError::UnsupportedVersion(body.v.to_string()));
        }
        return Ok(ConsoleInbound::Subscribe { run_id: body.run_id });
    }
    let m: Message = decode_message_json(text.as_bytes())?;
    match m.payload {
        Payload::ValidationResult(v) => Ok(ConsoleInbound::Validation(v)),
        other => Err(DecodeError::Invalid(format!(
            "console may only send SUBSCRIBE or VALIDATION_RESULT, got {}",
            other.kind().as_str()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("the log does not start with a run_started event")]
    MissingHeader,
    #[error("the logged configuration does not match its own chain")]
    BadConfig,
}

#[derive(Default)]
struct Stream {
    frames: Vec<(SimTime, ConsoleFrame)>,
    seq: u64,
}

impl Stream {
    fn push(&mut self, snap: &Snapshot) {
        let (seq, snapshot) = (self.seq, snap.clone());
        self.frames.push((snap.t, ConsoleFrame::Snapshot { seq, snapshot }));
        self.seq += 1;
    }

    fn finish_step(&mut self, snap: &mut Snapshot, t: SimTime, changed: bool) {
        snap.t = t;
        if snap.phase == Phase::Done && snap.outcome.is_none() {
            snap.outcome = Some(Outcome::Done);
            self.push(snap);
        }
        if changed {
            self.push(snap);
        }
    }
}

/// Rebuilds the console stream of a recorded run: every message the console
/// saw plus a SNAPSHOT wherever the live bridge would have pushed one.
pub fn replay_frames(events: &[LoggedEvent]) -> Result<Vec<(SimTime, ConsoleFrame)>, ReplayError> {
    let Some(EventRecord::RunStarted { config }) = events.first().map(|e| &e.event) else {
        return Err(ReplayError::MissingHeader);
    };
    let mirror_ee = |q: &[f64]| -> Result<Position, ReplayError> {
        let p = ee_position(&config.chain, q).map_err(|_| ReplayError::BadConfig)?;
        let o = config.twin.mirror_offset;
        Ok([p[0] + o[0], p[1] + o[1], p[2] + o[2]])
    };
    let mut snap = Snapshot {
        run_id: format!("{}-seed{}", config.name, config.seed),
        t: SimTime::ZERO,
        phase: Phase::Nominal,
        mirror: JointState::new(config.home.clone()).with_gripper(config.gripper.open),
        mirror_ee: mirror_ee(&config.home)?,
        obstacle: None,
        active_plan_id: PlanId(1),
        pending: None,
        rejections: 0,
        alarm: None,
        outcome: None,
    };
    let mut out = Stream::default();
    out.push(&snap);
    // a controller step's own snapshot follows the snapshots of its actions
    let mut step: Option<(SimTime, bool)> = None;
    for (i, e) in events.iter().enumerate() {
        let cascade = matches!(
            e.event,
            EventRecord::MessageSent { .. }
                | EventRecord::MessageDropped { .. }
                | EventRecord::AnomalyRaised { .. }
                | EventRecord::ObstacleRendered { .. }
                | EventRecord::ReplanStarted { .. }
                | EventRecord::ValidationRequested { .. }
                | EventRecord::Alarm { .. }
        );
        if !(cascade && step.is_some_and(|(t, _)| t == e.t)) {
            if let Some((t, changed)) = step.take() {
                out.finish_step(&mut snap, t, changed);
            }
        }
        snap.t = e.t;
        match &e.event {
            EventRecord::PlanLoaded { plan } => snap.active_plan_id = plan.plan_id,
            EventRecord::MessageDelivered { link, message } if *link != Link::Downlink => {
                if let Payload::Telemetry(t) = &message.payload {
                    snap.mirror = t.state.clone();
                    snap.mirror_ee = mirror_ee(&t.state.q)?;
                }
                out.frames.push((e.t, ConsoleFrame::Message(message.clone())));
            }
            EventRecord::ObstacleRendered { bbox } => {
                snap.obstacle = Some(*bbox);
                out.push(&snap);
            }
            EventRecord::ValidationRequested { plan_id, .. } => {
                // the proposal body is only logged when the console receives it
                snap.pending = events[i..].iter().find_map(|later| match &later.event {
                    EventRecord::MessageDelivered { link: Link::ConsoleOut, message } => match &message.payload {
                        Payload::PlanProposed(p) if p.plan.plan_id == *plan_id => Some(p.clone()),
                        _ => None,
                    },
                    _ => None,
                });
            }
            EventRecord::ControllerStep { trigger, from, to, actions } => {
                if trigger == "DeployAcked" && *to == Phase::Nominal {
                    if let Some(p) = &snap.pending {
                        snap.active_plan_id = p.plan.plan_id;
                    }
                    snap.rejections = 0;
                }
                if trigger == "ValidationArrived" && *from == Phase::PendingValidation && *to != Phase::Deploying {
                    snap.rejections += 1;
                }
                if actions.iter().any(|a| a == "SendStop") {
                    snap.rejections = 0;
                }
                snap.phase = *to;
                if !matches!(to, Phase::PendingValidation | Phase::Deploying) {
                    snap.pending = None;
                }
                step = Some((e.t, from != to));
            }
            EventRecord::Alarm { reason } => {
                snap.alarm = Some(reason.clone());
                if snap.outcome.is_none() {
                    snap.outcome = Some(Outcome::Alarm);
                    out.push(&snap);
                }
            }
            EventRecord::RunEnded { outcome, .. } if snap.outcome.is_none() => {
                snap.outcome = Some(*outcome);
                out.push(&snap);
            }
            _ => {}
        }
    }
    if let Some((t, changed)) = step {
        out.finish_step(&mut snap, t, changed);
    }
    Ok(out.frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subscribe_and_validation() {
        assert_eq!(
            parse_console_inbound(r#"{"kind":"SUBSCRIBE","payload":{"run_id":"standard-seed7","v":1}}"#).unwrap(),
            ConsoleInbound::Subscribe {
                run_id: Some("standard-seed7".into())
            }
        );
        let v = r#"{"kind":"VALIDATION_RESULT","payload":{"approved":true,"operator_id":"ana","plan_id":2,"v":1},"sent_at":0.0,"seq":0}"#;
        assert_eq!(
            parse_console_inbound(v).unwrap(),
            ConsoleInbound::Validation(ValidationResult {
                plan_id: PlanId(2),
                approved: true,
                operator_id: "ana".into()
            })
        );
    }

    #[test]
    fn console_cannot_send_commands() {
        let stop = r#"{"kind":"STOP_CMD","payload":{"report_seq":1,"v":1},"sent_at":0.0,"seq":0}"#;
        assert!(matches!(parse_console_inbound(stop), Err(DecodeError::Invalid(_))));
        assert!(parse_console_inbound("not json").is_err());
    }
}
