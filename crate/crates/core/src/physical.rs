//! The physical robot: executes its active plan in simulated time, latches
//! on STOP_CMD, and only resumes through a validated PLAN_DEPLOY.

use serde::{Deserialize, Serialize};

use crate::kinematics::{ee_position, JointState, KinematicChain, Position};
use crate::planning::{GripperAction, MotionPlan, PlanId, PlanValidationError};
use crate::protocol::{ExecutorMode, Telemetry};
use crate::time::SimTime;

/// Deployed plans must start within this distance (rad, per joint) of the
/// held configuration.
pub const START_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorConfig {
    #[serde(rename = "telemetry_period_ms")]
    pub telemetry_period: SimTime,
    #[serde(rename = "actuation_latency_ms")]
    pub actuation_latency: SimTime,
    #[serde(default = "default_true")]
    pub instantaneous_stop: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
enum Motion {
    Moving { plan: MotionPlan, started_at: SimTime },
    AwaitingMotion { plan: MotionPlan, hold: JointState },
    Halted { hold: JointState, plan_id: PlanId, next_waypoint: usize },
    Idle { hold: JointState, plan_id: PlanId, next_waypoint: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeployRefusal {
    #[error("robot is not halted")]
    NotHalted,
    #[error("plan is invalid: {0}")]
    Invalid(#[from] PlanValidationError),
    #[error("plan does not start at the held configuration (joint {joint} off by {offset})")]
    StartMismatch { joint: usize, offset: f64 },
}

/// What happened when the executor passed a waypoint.
#[derive(Debug, Clone, PartialEq)]
pub enum WaypointOutcome {
    Grasped { object_center: Position },
    Released { object_center: Position },
    Finished { plan_id: PlanId },
}

#[derive(Debug, Clone)]
pub struct PhysicalRobot {
    chain: KinematicChain,
    v_joint_max: f64,
    motion: Motion,
    /// Bumped whenever motion is replaced; stale scheduled wake-ups compare against it.
    generation: u64,
    stop_applied: Option<u64>,
    object_center: Position,
    /// Object center relative to the tool point while grasped.
    grasp_offset: Option<[f64; 3]>,
}

impl PhysicalRobot {
    /// Starts executing `plan` at `now`.
    pub fn new(chain: KinematicChain, v_joint_max: f64, plan: MotionPlan, now: SimTime, object_center: Position) -> Self {
        PhysicalRobot {
            chain,
            v_joint_max,
            motion: Motion::Moving { plan, started_at: now },
            generation: 0,
            stop_applied: None,
            object_center,
            grasp_offset: None,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn mode(&self) -> ExecutorMode {
        match self.motion {
            Motion::Moving { .. } => ExecutorMode::Moving,
            Motion::AwaitingMotion { .. } => ExecutorMode::AwaitingMotion,
            Motion::Halted { .. } => ExecutorMode::Halted,
            Motion::Idle { .. } => ExecutorMode::Idle,
        }
    }

    pub fn plan_id(&self) -> PlanId {
        match &self.motion {
            Motion::Moving { plan, .. } | Motion::AwaitingMotion { plan, .. } => plan.plan_id,
            Motion::Halted { plan_id, .. } | Motion::Idle { plan_id, .. } => *plan_id,
        }
    }

    /// The executing plan and its start time, if moving.
    pub fn active(&self) -> Option<(&MotionPlan, SimTime)> {
        match &self.motion {
            Motion::Moving { plan, started_at } => Some((plan, *started_at)),
            _ => None,
        }
    }

    pub fn state_at(&self, now: SimTime) -> JointState {
        match &self.motion {
            Motion::Moving { plan, started_at } => plan.state_at(now - *started_at).at(now),
            Motion::AwaitingMotion { hold, .. } | Motion::Halted { hold, .. } | Motion::Idle { hold, .. } => {
                hold.clone().at(now)
            }
        }
    }

    fn next_waypoint(&self, now: SimTime) -> usize {
        match &self.motion {
            Motion::Moving { plan, started_at } => plan.next_waypoint_after(now - *started_at),
            Motion::AwaitingMotion { .. } => 0,
            Motion::Halted { next_waypoint, .. } | Motion::Idle { next_waypoint, .. } => *next_waypoint,
        }
    }

    pub fn holding_object(&self) -> bool {
        self.grasp_offset.is_some()
    }

    /// Current task-object center (follows the tool while grasped).
    pub fn object_center(&self, now: SimTime) -> Position {
        match self.grasp_offset {
            Some(off) => {
                let p = self.ee(now);
                [0, 1, 2].map(|k| p[k] + off[k])
            }
            None => self.object_center,
        }
    }

    pub fn ee(&self, now: SimTime) -> Position {
        ee_position(&self.chain, &self.state_at(now).q).expect("robot state matches its chain")
    }

    pub fn telemetry(&self, now: SimTime) -> Telemetry {
        let next = self.next_waypoint(now);
        Telemetry {
            state: self.state_at(now),
            mode: self.mode(),
            plan_id: Some(self.plan_id()),
            next_waypoint: next,
            stop_applied: self.stop_applied,
            holding_object: self.holding_object(),
        }
    }

    /// Freezes the robot at its configuration at `now`. Returns the held state.
    pub fn stop(&mut self, now: SimTime, stop_seq: u64) -> JointState {
        let hold = self.state_at(now);
        let plan_id = self.plan_id();
        let next_waypoint = self.next_waypoint(now);
        match &self.motion {
            Motion::Moving { .. } | Motion::AwaitingMotion { .. } => {
                self.generation += 1;
                self.motion = Motion::Halted {
                    hold: hold.clone(),
                    plan_id,
                    next_waypoint,
                };
            }
            Motion::Halted { .. } => {}
            Motion::Idle { .. } => {
                self.motion = Motion::Halted {
                    hold: hold.clone(),
                    plan_id,
                    next_waypoint,
                };
            }
        }
        self.stop_applied = Some(self.stop_applied.map_or(stop_seq, |s| s.max(stop_seq)));
        hold
    }

    /// Checks a deployed plan; on success the robot waits out the actuation
    /// latency and the caller schedules [`PhysicalRobot::start_motion`].
    pub fn accept_deploy(&mut self, plan: MotionPlan, now: SimTime) -> Result<(), DeployRefusal> {
        let Motion::Halted { hold, .. } = &self.motion else {
            return Err(DeployRefusal::NotHalted);
        };
        plan.validate(&self.chain, self.v_joint_max)?;
        let first = &plan.waypoints[0].state.q;
        if first.len() != hold.q.len() {
            return Err(PlanValidationError::Dimension(0).into());
        }
        if let Some((joint, offset)) = first
            .iter()
            .zip(&hold.q)
            .map(|(a, b)| (a - b).abs())
            .enumerate()
            .find(|(_, d)| *d > START_TOLERANCE)
        {
            return Err(DeployRefusal::StartMismatch { joint, offset });
        }
        let hold = hold.clone().at(now);
        self.generation += 1;
        self.motion = Motion::AwaitingMotion { plan, hold };
        Ok(())
    }

    /// Begins the accepted plan. Returns its id, or `None` if the wake-up is stale.
    pub fn start_motion(&mut self, generation: u64, now: SimTime) -> Option<PlanId> {
        if generation != self.generation {
            return None;
        }
        let Motion::AwaitingMotion { plan, .. } = &self.motion else {
            return None;
        };
        let plan = plan.clone();
        let id = plan.plan_id;
        self.motion = Motion::Moving {
            started_at: now - plan.start(),
            plan,
        };
        Some(id)
    }

    /// Absolute times of the waypoints of the executing plan that need a
    /// wake-up (gripper actions and the final waypoint).
    pub fn wakeups(&self) -> Vec<(usize, SimTime)> {
        let Some((plan, started_at)) = self.active() else {
            return Vec::new();
        };
        let last = plan.waypoints.len() - 1;
        plan.waypoints
            .iter()
            .enumerate()
            .filter(|(i, w)| *i == last || w.gripper_action != GripperAction::None)
            .map(|(i, w)| (i, started_at + w.t_offset))
            .collect()
    }

    /// Handles a waypoint wake-up; stale ones yield nothing.
    pub fn reach_waypoint(&mut self, generation: u64, index: usize, now: SimTime) -> Vec<WaypointOutcome> {
        if generation != self.generation {
            return Vec::new();
        }
        let Some((plan, _)) = self.active() else {
            return Vec::new();
        };
        let Some(w) = plan.waypoints.get(index) else {
            return Vec::new();
        };
        let (action, len, plan_id) = (w.gripper_action, plan.waypoints.len(), plan.plan_id);
        let mut out = Vec::new();
        let ee = self.ee(now);
        match action {
            GripperAction::Close if self.grasp_offset.is_none() => {
                self.grasp_offset = Some([0, 1, 2].map(|k| self.object_center[k] - ee[k]));
                out.push(WaypointOutcome::Grasped {
                    object_center: self.object_center,
                });
            }
            GripperAction::Open => {
                if let Some(off) = self.grasp_offset.take() {
                    self.object_center = [0, 1, 2].map(|k| ee[k] + off[k]);
                    out.push(WaypointOutcome::Released {
                        object_center: self.object_center,
                    });
                }
            }
            _ => {}
        }
        if index + 1 == len {
            let hold = self.state_at(now);
            self.generation += 1;
            self.motion = Motion::Idle {
                hold,
                plan_id,
                next_waypoint: len,
            };
            out.push(WaypointOutcome::Finished { plan_id });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::{plan_pick_and_place, GripperWidths, PlannerParams};

    fn setup() -> (PhysicalRobot, MotionPlan) {
        let chain = KinematicChain::planar_two_link();
        let params = PlannerParams {
            safety_margin: 0.05,
            via_height: 0.05,
            sample_dt: SimTime::from_millis(10),
            v_joint_max: 1.0,
        };
        let home = JointState::new(vec![0.0, 0.5]);
        let plan = plan_pick_and_place(&chain, &home, &[0.5, 0.5], &[-0.5, 0.5], &params, PlanId(1), GripperWidths::default())
            .unwrap();
        let obj = ee_position(&chain, &[0.5, 0.5]).unwrap();
        (PhysicalRobot::new(chain, 1.0, plan.clone(), SimTime::ZERO, obj), plan)
    }

    #[test]
    fn stop_latches_position() {
        let (mut r, _) = setup();
        let held = r.stop(SimTime::from_ms(123.45), 0);
        for t in [200, 500, 5000] {
            assert_eq!(r.state_at(SimTime::from_millis(t)).q, held.q);
        }
        assert_eq!(r.telemetry(SimTime::from_millis(600)).stop_applied, Some(0));
        assert_eq!(r.mode(), ExecutorMode::Halted);
    }

    #[test]
    fn deploy_requires_halt_and_matching_start() {
        let (mut r, plan) = setup();
        let mut p2 = plan.clone();
        p2.plan_id = PlanId(2);
        assert_eq!(r.accept_deploy(p2.clone(), SimTime::from_millis(10)), Err(DeployRefusal::NotHalted));
        r.stop(SimTime::from_millis(100), 0);
        assert!(matches!(
            r.accept_deploy(p2.clone(), SimTime::from_millis(200)),
            Err(DeployRefusal::StartMismatch { .. })
        ));
        let mut bad = p2.clone();
        bad.waypoints[1].t_offset = SimTime::ZERO;
        assert!(matches!(r.accept_deploy(bad, SimTime::from_millis(200)), Err(DeployRefusal::Invalid(_))));
        assert_eq!(r.mode(), ExecutorMode::Halted);
    }

    #[test]
    fn full_run_moves_object() {
        let (mut r, plan) = setup();
        let gen = r.generation();
        let mut outcomes = vec![];
        for (i, t) in r.wakeups() {
            outcomes.extend(r.reach_waypoint(gen, i, t));
        }
        assert_eq!(outcomes.len(), 3);
        assert!(!r.holding_object());
        let place = ee_position(&KinematicChain::planar_two_link(), &[-0.5, 0.5]).unwrap();
        let c = r.object_center(plan.end());
        for k in 0..3 {
            assert!((c[k] - place[k]).abs() < 1e-12);
        }
        assert_eq!(r.mode(), ExecutorMode::Idle);
    }

    #[test]
    fn stale_wakeups_ignored_after_stop() {
        let (mut r, _) = setup();
        let gen = r.generation();
        let wake = r.wakeups();
        r.stop(SimTime::from_millis(1), 0);
        for (i, t) in wake {
            assert!(r.reach_waypoint(gen, i, t).is_empty());
        }
    }
}
