//! The digital-twin controller: a pure state machine that mirrors the
//! physical robot, halts it on an obstacle report, and gates every
//! replanned motion behind operator validation.

mod divergence;

use serde::{Deserialize, Serialize};

use crate::detect::ObstacleReport;
use crate::kinematics::JointState;
use crate::planning::{MotionPlan, PlanId};
use crate::scene::Aabb;

pub use divergence::{mirror_divergence, resample, DivergenceError, DivergenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Nominal,
    Halted,
    Replanning,
    PendingValidation,
    Deploying,
    Done,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Nominal,
        Phase::Halted,
        Phase::Replanning,
        Phase::PendingValidation,
        Phase::Deploying,
        Phase::Done,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionPolicy {
    /// The rejection that reaches this count raises the alarm.
    pub max_rejections: u32,
    /// Safety margin multiplier applied per rejection.
    pub margin_growth: f64,
}

impl Default for RejectionPolicy {
    fn default() -> Self {
        RejectionPolicy {
            max_rejections: 3,
            margin_growth: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub phase: Phase,
    pub active_plan: MotionPlan,
    pub pending_plan: Option<MotionPlan>,
    pub last_report: Option<ObstacleReport>,
    pub mirror: JointState,
    /// Obstacle the current or most recent replan was computed against.
    pub plan_basis: Option<Aabb>,
    pub rejections: u32,
    /// Bumped on every StartReplan; replan results from older epochs are stale.
    pub replan_epoch: u64,
    pub alarmed: bool,
    pub safety_margin: f64,
    pub policy: RejectionPolicy,
}

impl ControllerState {
    pub fn new(active_plan: MotionPlan, mirror: JointState, safety_margin: f64, policy: RejectionPolicy) -> Self {
        ControllerState {
            phase: Phase::Nominal,
            active_plan,
            pending_plan: None,
            last_report: None,
            mirror,
            plan_basis: None,
            rejections: 0,
            replan_epoch: 0,
            alarmed: false,
            safety_margin,
            policy,
        }
    }

    /// Margin for the replan that follows `rejections` rejections.
    pub fn margin_for(&self, rejections: u32) -> f64 {
        self.safety_margin * self.policy.margin_growth.powi(rejections as i32)
    }

    /// Structural invariants; returns the first one violated.
    pub fn check_invariants(&self) -> Result<(), String> {
        let wants_pending = matches!(self.phase, Phase::PendingValidation | Phase::Deploying);
        if wants_pending != self.pending_plan.is_some() {
            return Err(format!(
                "pending_plan is {} in phase {:?}",
                if self.pending_plan.is_some() { "set" } else { "unset" },
                self.phase
            ));
        }
        if !matches!(self.phase, Phase::Nominal | Phase::Done) && self.last_report.is_none() {
            return Err(format!("phase {:?} without an obstacle report on record", self.phase));
        }
        if self.alarmed && self.phase != Phase::Halted {
            return Err(format!("alarm raised but phase is {:?}", self.phase));
        }
        Ok(())
    }

    fn box_changed(&self, bbox: &Aabb) -> bool {
        match &self.plan_basis {
            Some(basis) => basis.max_corner_shift(bbox) > self.safety_margin / 2.0,
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerEvent {
    TelemetryArrived(JointState),
    ReportArrived(ObstacleReport),
    ReplanDone { plan: MotionPlan, epoch: u64 },
    ReplanFailed { epoch: u64, reason: String },
    ValidationArrived { plan_id: PlanId, approved: bool, operator_id: String },
    DeployAcked { plan_id: PlanId, accepted: bool },
    TaskDone { plan_id: PlanId },
}

impl ControllerEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerEvent::TelemetryArrived(_) => "TelemetryArrived",
            ControllerEvent::ReportArrived(_) => "ReportArrived",
            ControllerEvent::ReplanDone { .. } => "ReplanDone",
            ControllerEvent::ReplanFailed { .. } => "ReplanFailed",
            ControllerEvent::ValidationArrived { .. } => "ValidationArrived",
            ControllerEvent::DeployAcked { .. } => "DeployAcked",
            ControllerEvent::TaskDone { .. } => "TaskDone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ControllerAction {
    SendStop {
        report_seq: u64,
    },
    StartReplan {
        report: ObstacleReport,
        safety_margin: f64,
        epoch: u64,
        attempt: u32,
    },
    RequestValidation {
        plan: MotionPlan,
    },
    SendDeploy {
        plan: MotionPlan,
    },
    UpdateMirror {
        state: JointState,
    },
    RenderObstacle {
        #[serde(rename = "box")]
        bbox: Aabb,
    },
    RaiseAlarm {
        reason: String,
    },
}

fn start_replan(s: &mut ControllerState, report: &ObstacleReport) -> ControllerAction {
    s.replan_epoch += 1;
    s.plan_basis = Some(report.bbox);
    ControllerAction::StartReplan {
        report: *report,
        safety_margin: s.margin_for(s.rejections),
        epoch: s.replan_epoch,
        attempt: s.rejections + 1,
    }
}

fn alarm(s: &mut ControllerState, reason: String) -> ControllerAction {
    s.phase = Phase::Halted;
    s.pending_plan = None;
    s.alarmed = true;
    ControllerAction::RaiseAlarm { reason }
}

/// Total transition function. Pairs not covered by a rule return the
/// state unchanged with no actions.
pub fn transition(state: &ControllerState, event: &ControllerEvent) -> (ControllerState, Vec<ControllerAction>) {
    use ControllerEvent as E;
    use Phase as P;

    let mut s = state.clone();
    let mut actions = Vec::new();
    match (state.phase, event) {
        (_, E::TelemetryArrived(js)) => {
            s.mirror = js.clone();
            actions.push(ControllerAction::UpdateMirror { state: js.clone() });
        }
        (P::Done, E::ReportArrived(_)) => {}
        (_, E::ReportArrived(r)) if !r.is_valid() => {}
        (P::Nominal, E::ReportArrived(r)) => {
            s.last_report = Some(*r);
            actions.push(ControllerAction::RenderObstacle { bbox: r.bbox });
            if s.box_changed(&r.bbox) {
                s.phase = P::Halted;
                s.rejections = 0;
                actions.insert(0, ControllerAction::SendStop { report_seq: r.seq });
                actions.push(start_replan(&mut s, r));
            }
        }
        (_, E::ReportArrived(r)) => {
            s.last_report = Some(*r);
            actions.push(ControllerAction::RenderObstacle { bbox: r.bbox });
            if !s.alarmed && s.box_changed(&r.bbox) {
                s.phase = P::Halted;
                s.pending_plan = None;
                s.rejections = 0;
                actions.insert(0, ControllerAction::SendStop { report_seq: r.seq });
                actions.push(start_replan(&mut s, r));
            }
        }
        (P::Halted | P::Replanning, E::ReplanDone { plan, epoch }) if *epoch == s.replan_epoch && !s.alarmed => {
            s.phase = P::PendingValidation;
            s.pending_plan = Some(plan.clone());
            actions.push(ControllerAction::RequestValidation { plan: plan.clone() });
        }
        (P::Halted | P::Replanning, E::ReplanFailed { epoch, reason }) if *epoch == s.replan_epoch && !s.alarmed => {
            actions.push(alarm(&mut s, format!("replanning failed: {reason}")));
        }
        (
            P::PendingValidation,
            E::ValidationArrived {
                plan_id,
                approved,
                operator_id,
            },
        ) if s.pending_plan.as_ref().is_some_and(|p| p.plan_id == *plan_id) => {
            if *approved {
                s.phase = P::Deploying;
                let plan = s.pending_plan.clone().expect("guarded above");
                actions.push(ControllerAction::SendDeploy { plan });
            } else {
                s.rejections += 1;
                if s.rejections >= s.policy.max_rejections {
                    let reason = format!("{} rejected {} consecutive plans", operator_id, s.rejections);
                    actions.push(alarm(&mut s, reason));
                } else {
                    s.phase = P::Replanning;
                    s.pending_plan = None;
                    let report = s.last_report.expect("pending validation implies a report");
                    actions.push(start_replan(&mut s, &report));
                }
            }
        }
        (P::Deploying, E::DeployAcked { plan_id, accepted })
            if s.pending_plan.as_ref().is_some_and(|p| p.plan_id == *plan_id) =>
        {
            if *accepted {
                s.phase = P::Nominal;
                s.active_plan = s.pending_plan.take().expect("guarded above");
                s.rejections = 0;
            } else {
                actions.push(alarm(&mut s, format!("physical site refused {plan_id}")));
            }
        }
        (P::Nominal, E::TaskDone { plan_id }) if *plan_id == s.active_plan.plan_id => {
            s.phase = P::Done;
        }
        _ => {}
    }
    (s, actions)
}
