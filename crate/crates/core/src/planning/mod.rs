//! Motion plans: the nominal pick-and-place plan, obstacle clearance
//! checks, and the via-point detour replanner.

mod ik;
mod replan;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{self, check_config_limits, ee_position, JointState, KinematicChain, KinematicsError, Position};
use crate::scene::Aabb;
use crate::time::SimTime;

pub use ik::{solve_position, IkOptions};
pub use replan::replan_around_obstacle;

/// Shortest segment duration; keeps waypoint times strictly increasing.
pub const MIN_SEGMENT: SimTime = SimTime::from_millis(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanningError {
    #[error("joint {joint} of the {which} configuration is outside its limits by {excess}")]
    LimitViolation { which: String, joint: usize, excess: f64 },
    #[error("no feasible plan: {0}")]
    NoFeasiblePlan(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    InvalidPlan(#[from] PlanValidationError),
}

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanValidationError {
    #[error("plan needs at least two waypoints, has {0}")]
    TooShort(usize),
    #[error("waypoint {0} does not come strictly after its predecessor")]
    NonMonotone(usize),
    #[error("waypoint {0} has a negative time offset")]
    NegativeOffset(usize),
    #[error("segment into waypoint {index} moves joint {joint} at {speed} rad/s")]
    SpeedExceeded { index: usize, joint: usize, speed: f64 },
    #[error("waypoint {index} joint {joint} is outside its limits")]
    OutOfLimits { index: usize, joint: usize },
    #[error("waypoint {0} has the wrong number of joints")]
    Dimension(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperAction {
    None,
    Open,
    Close,
}

/// Task waypoints are the goals of the job; via waypoints are detour
/// points inserted by the replanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaypointKind {
    Task,
    Via,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub state: JointState,
    pub gripper_action: GripperAction,
    pub t_offset: SimTime,
    pub kind: WaypointKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanId(pub u64);

impl fmt::Display for PlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "plan-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionPlan {
    pub plan_id: PlanId,
    pub parent_id: Option<PlanId>,
    pub waypoints: Vec<Waypoint>,
}

impl MotionPlan {
    pub fn start(&self) -> SimTime {
        self.waypoints.first().map_or(SimTime::ZERO, |w| w.t_offset)
    }

    pub fn end(&self) -> SimTime {
        self.waypoints.last().map_or(SimTime::ZERO, |w| w.t_offset)
    }

    pub fn duration(&self) -> SimTime {
        self.end() - self.start()
    }

    /// Linear joint-space interpolation at plan-relative time `t`, clamped
    /// to the plan's time range. The gripper width holds the value of the
    /// last waypoint reached.
    ///
    /// Panics on an empty plan.
    pub fn state_at(&self, t: SimTime) -> JointState {
        let wps = &self.waypoints;
        assert!(!wps.is_empty(), "state_at on an empty plan");
        let idx = wps.partition_point(|w| w.t_offset <= t);
        if idx == 0 {
            return wps[0].state.clone().at(t);
        }
        if idx == wps.len() {
            return wps[idx - 1].state.clone().at(t);
        }
        let (a, b) = (&wps[idx - 1], &wps[idx]);
        let span = (b.t_offset - a.t_offset).ticks() as f64;
        let s = (t - a.t_offset).ticks() as f64 / span;
        let q = a.state.q.iter().zip(&b.state.q).map(|(x, y)| x + s * (y - x)).collect();
        JointState {
            q,
            gripper_width: a.state.gripper_width,
            t,
        }
    }

    /// Index of the first waypoint whose time is strictly after `t`.
    pub fn next_waypoint_after(&self, t: SimTime) -> usize {
        self.waypoints.partition_point(|w| w.t_offset <= t)
    }

    pub fn gripper_actions(&self) -> Vec<GripperAction> {
        self.waypoints
            .iter()
            .map(|w| w.gripper_action)
            .filter(|a| *a != GripperAction::None)
            .collect()
    }

    /// Checks the executable-plan invariants: at least two waypoints,
    /// strictly increasing non-negative offsets, joint limits and the
    /// per-joint speed bound.
    pub fn validate(&self, chain: &KinematicChain, v_joint_max: f64) -> Result<(), PlanValidationError> {
        if self.waypoints.len() < 2 {
            return Err(PlanValidationError::TooShort(self.waypoints.len()));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.t_offset.is_negative() {
                return Err(PlanValidationError::NegativeOffset(i));
            }
            match check_config_limits(chain, &w.state.q) {
                Ok(v) if v.is_empty() => {}
                Ok(v) => return Err(PlanValidationError::OutOfLimits { index: i, joint: v[0].joint }),
                Err(_) => return Err(PlanValidationError::Dimension(i)),
            }
        }
        for (i, pair) in self.waypoints.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.t_offset <= a.t_offset {
                return Err(PlanValidationError::NonMonotone(i + 1));
            }
            let dt = (b.t_offset - a.t_offset).as_secs();
            for (joint, (x, y)) in a.state.q.iter().zip(&b.state.q).enumerate() {
                let speed = (y - x).abs() / dt;
                if speed > v_joint_max * (1.0 + 1e-9) {
                    return Err(PlanValidationError::SpeedExceeded { index: i + 1, joint, speed });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerParams {
    pub safety_margin: f64,
    /// Detour clearance above the inflated obstacle.
    pub via_height: f64,
    #[serde(rename = "sample_dt_ms")]
    pub sample_dt: SimTime,
    /// rad/s
    pub v_joint_max: f64,
}

/// Duration of a joint-space segment at the speed bound, rounded up to
/// whole ticks and never shorter than [`MIN_SEGMENT`].
pub fn segment_duration(a: &[f64], b: &[f64], v_joint_max: f64) -> SimTime {
    let max_delta = a.iter().zip(b).map(|(x, y)| (y - x).abs()).fold(0.0, f64::max);
    let ticks = (max_delta / v_joint_max * 1000.0 * SimTime::TICKS_PER_MS as f64).ceil() as i64;
    SimTime::from_ticks(ticks).max(MIN_SEGMENT)
}

/// Builds a plan through `configs` with speed-bounded timing starting at zero.
pub(crate) fn timed_plan(
    plan_id: PlanId,
    parent_id: Option<PlanId>,
    points: Vec<(JointState, GripperAction, WaypointKind)>,
    v_joint_max: f64,
) -> MotionPlan {
    let mut waypoints: Vec<Waypoint> = Vec::with_capacity(points.len());
    let mut t = SimTime::ZERO;
    for (state, gripper_action, kind) in points {
        if let Some(prev) = waypoints.last() {
            t += segment_duration(&prev.state.q, &state.q, v_joint_max);
        }
        waypoints.push(Waypoint {
            state: state.at(t),
            gripper_action,
            t_offset: t,
            kind,
        });
    }
    MotionPlan {
        plan_id,
        parent_id,
        waypoints,
    }
}

/// Gripper widths used by the nominal plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperWidths {
    pub open: f64,
    pub closed: f64,
}

impl Default for GripperWidths {
    fn default() -> Self {
        GripperWidths { open: 0.08, closed: 0.05 }
    }
}

/// home → pick (close) → place (open) → home.
pub fn plan_pick_and_place(
    chain: &KinematicChain,
    home: &JointState,
    pick_q: &[f64],
    place_q: &[f64],
    params: &PlannerParams,
    plan_id: PlanId,
    gripper: GripperWidths,
) -> Result<MotionPlan, PlanningError> {
    for (which, q) in [("home", &home.q[..]), ("pick", pick_q), ("place", place_q)] {
        if let Some(v) = check_config_limits(chain, q)?.first() {
            return Err(PlanningError::LimitViolation {
                which: which.into(),
                joint: v.joint,
                excess: v.excess,
            });
        }
    }
    let js = |q: &[f64], w: f64| JointState::new(q.to_vec()).with_gripper(w);
    let plan = timed_plan(
        plan_id,
        None,
        vec![
            (js(&home.q, gripper.open), GripperAction::None, WaypointKind::Task),
            (js(pick_q, gripper.closed), GripperAction::Close, WaypointKind::Task),
            (js(place_q, gripper.open), GripperAction::Open, WaypointKind::Task),
            (js(&home.q, gripper.open), GripperAction::None, WaypointKind::Task),
        ],
        params.v_joint_max,
    );
    plan.validate(chain, params.v_joint_max)?;
    Ok(plan)
}

/// Exact slab test: true iff the closed segment `p0 → p1` misses the box
/// inflated by `margin` on every axis.
pub fn segment_clear(p0: Position, p1: Position, bbox: &Aabb, margin: f64) -> bool {
    let inflated = bbox.inflated(margin);
    let (lo, hi) = (inflated.min(), inflated.max());
    let mut t_enter: f64 = 0.0;
    let mut t_exit: f64 = 1.0;
    for k in 0..3 {
        let d = p1[k] - p0[k];
        if d == 0.0 {
            if p0[k] < lo[k] || p0[k] > hi[k] {
                return true;
            }
            continue;
        }
        let (mut a, mut b) = ((lo[k] - p0[k]) / d, (hi[k] - p0[k]) / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t_enter = t_enter.max(a);
        t_exit = t_exit.min(b);
        if t_enter > t_exit {
            return true;
        }
    }
    false
}

/// Minimum signed distance from the sampled end-effector trace to the box
/// surface (negative when a sample is inside).
pub fn plan_clearance(
    chain: &KinematicChain,
    plan: &MotionPlan,
    bbox: &Aabb,
    sample_dt: SimTime,
) -> Result<f64, PlanningError> {
    let trace = kinematics::ee_trace(chain, plan, sample_dt)?;
    Ok(trace.iter().map(|(_, p)| bbox.signed_distance(*p)).fold(f64::INFINITY, f64::min))
}

/// Clearance of the joint-space straight line `a → b`, sampled at
/// `samples + 1` evenly spaced points.
pub(crate) fn segment_clearance(
    chain: &KinematicChain,
    a: &[f64],
    b: &[f64],
    bbox: &Aabb,
    samples: usize,
) -> Result<f64, KinematicsError> {
    let n = samples.max(1);
    let mut best = f64::INFINITY;
    let mut q = vec![0.0; a.len()];
    for i in 0..=n {
        let s = i as f64 / n as f64;
        for (k, qk) in q.iter_mut().enumerate() {
            *qk = a[k] + s * (b[k] - a[k]);
        }
        best = best.min(bbox.signed_distance(ee_position(chain, &q)?));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn params() -> PlannerParams {
        PlannerParams {
            safety_margin: 0.05,
            via_height: 0.1,
            sample_dt: SimTime::from_millis(10),
            v_joint_max: 1.0,
        }
    }

    fn box_at_origin() -> Aabb {
        Aabb::new([0.0; 3], [0.1; 3]).unwrap()
    }

    #[test]
    fn segment_clear_examples() {
        let b = box_at_origin();
        assert!(segment_clear([-1.0, 0.0, 0.5], [1.0, 0.0, 0.5], &b, 0.05));
        assert!(!segment_clear([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], &b, 0.05));
        assert!(!segment_clear([-1.0, 0.0, 0.14], [1.0, 0.0, 0.14], &b, 0.05));
        assert!(segment_clear([-1.0, 0.0, 0.16], [1.0, 0.0, 0.16], &b, 0.05));
        // segment ending before the box
        assert!(segment_clear([-1.0, 0.0, 0.0], [-0.5, 0.0, 0.0], &b, 0.05));
        // degenerate segment inside
        assert!(!segment_clear([0.0; 3], [0.0; 3], &b, 0.0));
    }

    #[test]
    fn degenerate_pick_and_place() {
        let chain = KinematicChain::planar_two_link();
        let home = JointState::new(vec![0.1, 0.2]);
        let plan = plan_pick_and_place(&chain, &home, &home.q, &home.q, &params(), PlanId(1), GripperWidths::default())
            .unwrap();
        assert_eq!(plan.waypoints.len(), 4);
        assert!(plan.waypoints.iter().all(|w| w.state.q == home.q));
        assert_eq!(plan.gripper_actions(), vec![GripperAction::Close, GripperAction::Open]);
        let times: Vec<_> = plan.waypoints.iter().map(|w| w.t_offset).collect();
        assert_eq!(times, vec![SimTime::ZERO, MIN_SEGMENT, SimTime::from_millis(2), SimTime::from_millis(3)]);
    }

    #[test]
    fn pick_waypoint_reaches_pick_pose() {
        let chain = KinematicChain::planar_two_link();
        let home = JointState::new(vec![0.0, 0.0]);
        let pick = [0.7, -1.1];
        let place = [-0.4, 0.9];
        let plan = plan_pick_and_place(&chain, &home, &pick, &place, &params(), PlanId(1), GripperWidths::default())
            .unwrap();
        let a = ee_position(&chain, &plan.waypoints[1].state.q).unwrap();
        let b = ee_position(&chain, &pick).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-12);
        }
        // 0.7 rad at 1 rad/s
        assert_eq!(plan.waypoints[1].t_offset, SimTime::from_millis(1100));
        plan.validate(&chain, 1.0).unwrap();
    }

    #[test]
    fn pick_beyond_limit_rejected() {
        let chain = KinematicChain::planar_two_link();
        let home = JointState::new(vec![0.0, 0.0]);
        let err = plan_pick_and_place(&chain, &home, &[4.0, 0.0], &[0.0, 0.0], &params(), PlanId(1), GripperWidths::default())
            .unwrap_err();
        match err {
            PlanningError::LimitViolation { which, joint, .. } => {
                assert_eq!(which, "pick");
                assert_eq!(joint, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_catches_bad_plans() {
        let chain = KinematicChain::planar_two_link();
        let home = JointState::new(vec![0.0, 0.0]);
        let mut plan = plan_pick_and_place(&chain, &home, &[1.0, 0.0], &[0.0, 1.0], &params(), PlanId(1), GripperWidths::default())
            .unwrap();
        let mut bad = plan.clone();
        bad.waypoints[2].t_offset = bad.waypoints[1].t_offset;
        assert_eq!(bad.validate(&chain, 1.0), Err(PlanValidationError::NonMonotone(2)));
        assert!(matches!(plan.validate(&chain, 0.5), Err(PlanValidationError::SpeedExceeded { .. })));
        plan.waypoints.truncate(1);
        assert_eq!(plan.validate(&chain, 1.0), Err(PlanValidationError::TooShort(1)));
    }

    #[test]
    fn interpolation_midpoint() {
        let chain = KinematicChain::planar_two_link();
        let home = JointState::new(vec![0.0, 0.0]);
        let plan = plan_pick_and_place(&chain, &home, &[FRAC_PI_2, -FRAC_PI_2], &[0.0, 0.0], &params(), PlanId(1), GripperWidths::default())
            .unwrap();
        let mid = plan.state_at(SimTime::from_ticks(plan.waypoints[1].t_offset.ticks() / 2));
        assert!((mid.q[0] - FRAC_PI_2 / 2.0).abs() < 1e-12);
        assert_eq!(plan.next_waypoint_after(SimTime::ZERO), 1);
        assert_eq!(plan.next_waypoint_after(plan.end()), 4);
    }

    #[test]
    fn clearance_above_box() {
        // box top at z = 0.2, tool kept at z = 1
        let chain = KinematicChain::new(
            "lifted",
            vec![
                kinematics::JointSpec::new(1.0, 1.0, 0.0, (-3.0, 3.0)),
                kinematics::JointSpec::new(1.0, 0.0, 0.0, (-3.0, 3.0)),
            ],
        )
        .unwrap();
        let home = JointState::new(vec![0.0, 0.0]);
        let plan = plan_pick_and_place(&chain, &home, &[1.0, 0.5], &[-1.0, 0.5], &params(), PlanId(1), GripperWidths::default())
            .unwrap();
        let b = Aabb::new([0.0, 0.0, 0.1], [5.0, 5.0, 0.1]).unwrap();
        let c = plan_clearance(&chain, &plan, &b, SimTime::from_millis(10)).unwrap();
        assert!((c - 0.8).abs() < 1e-12);
        // a box whose top face touches the tool path
        let touching = Aabb::new([0.0, 0.0, 0.5], [5.0, 5.0, 0.5]).unwrap();
        let c = plan_clearance(&chain, &plan, &touching, SimTime::from_millis(10)).unwrap();
        assert!(c.abs() < 1e-12);

        let empty = MotionPlan {
            plan_id: PlanId(9),
            parent_id: None,
            waypoints: vec![],
        };
        assert!(matches!(
            plan_clearance(&chain, &empty, &b, SimTime::from_millis(10)),
            Err(PlanningError::Kinematics(KinematicsError::EmptyPlan))
        ));
    }
}
