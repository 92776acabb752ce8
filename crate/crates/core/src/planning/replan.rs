//! Deterministic "up, over, down" detour around a reported obstacle.

use crate::detect::ObstacleReport;
use crate::kinematics::{ee_position, JointState, KinematicChain, Position};
use crate::scene::Aabb;
use crate::time::SimTime;

use super::ik::{solve_position, IkOptions};
use super::{
    plan_clearance, segment_clearance, segment_duration, timed_plan, GripperAction, MotionPlan, PlanId, PlannerParams,
    PlanningError, WaypointKind,
};

/// Extra clearance the planner keeps beyond the safety margin so samples
/// taken off its own check grid still clear the margin.
const CLEARANCE_PAD: f64 = 1e-3;
/// Clearance checks run at `sample_dt / FINE_DIVISOR`.
const FINE_DIVISOR: i64 = 20;
const CARTESIAN_STEPS: [f64; 3] = [0.02, 0.01, 0.005];

fn fine_dt(params: &PlannerParams) -> SimTime {
    SimTime::from_ticks((params.sample_dt.ticks() / FINE_DIVISOR).max(1))
}

fn lerp(a: Position, b: Position, s: f64) -> Position {
    [0, 1, 2].map(|k| a[k] + s * (b[k] - a[k]))
}

fn dist(a: Position, b: Position) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Joint configurations along the Cartesian polyline
/// `start → lift → over → down`, excluding both endpoints.
fn detour_configs(
    chain: &KinematicChain,
    qa: &[f64],
    qb: &[f64],
    inflated: &Aabb,
    via_height: f64,
    step: f64,
) -> Result<Vec<Vec<f64>>, PlanningError> {
    let pa = ee_position(chain, qa)?;
    let pb = ee_position(chain, qb)?;
    let z = inflated.max()[2] + via_height;
    let lift = [pa[0], pa[1], pa[2].max(z)];
    let over = [pb[0], pb[1], pb[2].max(z)];
    let mut targets: Vec<Position> = Vec::new();
    let legs = [(pa, lift), (lift, over), (over, pb)];
    for (i, (a, b)) in legs.iter().enumerate() {
        let len = dist(*a, *b);
        if len == 0.0 {
            continue;
        }
        let n = (len / step).ceil() as usize;
        let last_leg = i == legs.len() - 1;
        for j in 1..=n {
            if last_leg && j == n {
                break; // the goal itself is reached with its own configuration
            }
            targets.push(lerp(*a, *b, j as f64 / n as f64));
        }
    }
    let opts = IkOptions::default();
    let mut seed = qa.to_vec();
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let q = solve_position(chain, target, &seed, &opts).ok_or_else(|| {
            PlanningError::NoFeasiblePlan(format!("via point {target:?} could not be reached within joint limits"))
        })?;
        seed.clone_from(&q);
        out.push(q);
    }
    Ok(out)
}

/// Replans from the halted state `current` through every task waypoint of
/// `plan` at or after index `next_waypoint`, detouring over `report.bbox`
/// wherever the direct joint-space segment comes within the safety margin.
///
/// The returned plan is re-timed from zero, has `parent_id = plan.plan_id`,
/// keeps the remaining gripper actions in order, and its end-effector
/// clearance to the reported box is at least `params.safety_margin`.
pub fn replan_around_obstacle(
    chain: &KinematicChain,
    current: &JointState,
    plan: &MotionPlan,
    next_waypoint: usize,
    report: &ObstacleReport,
    params: &PlannerParams,
    new_id: PlanId,
) -> Result<MotionPlan, PlanningError> {
    let margin = params.safety_margin;
    let inflated = report.bbox.inflated(margin);
    let fine = fine_dt(params);

    if inflated.contains(ee_position(chain, &current.q)?) {
        return Err(PlanningError::NoFeasiblePlan(
            "halted end-effector is inside the inflated obstacle".into(),
        ));
    }
    let goals: Vec<_> = plan
        .waypoints
        .iter()
        .skip(next_waypoint)
        .filter(|w| w.kind == WaypointKind::Task)
        .collect();
    for g in &goals {
        if inflated.contains(ee_position(chain, &g.state.q)?) {
            return Err(PlanningError::NoFeasiblePlan(format!(
                "goal at offset {} lies inside the inflated obstacle",
                g.t_offset
            )));
        }
    }

    let mut last_err = None;
    for step in CARTESIAN_STEPS {
        let mut points = vec![(current.clone(), GripperAction::None, WaypointKind::Via)];
        let mut prev = current.clone();
        let mut failed = None;
        for g in &goals {
            let duration = segment_duration(&prev.q, &g.state.q, params.v_joint_max);
            let samples = (duration.ticks() / fine.ticks()).max(8) as usize;
            let direct = segment_clearance(chain, &prev.q, &g.state.q, &report.bbox, samples)?;
            if direct < margin + CLEARANCE_PAD {
                match detour_configs(chain, &prev.q, &g.state.q, &inflated, params.via_height, step) {
                    Ok(vias) => {
                        for q in vias {
                            let s = JointState::new(q).with_gripper(prev.gripper_width);
                            points.push((s, GripperAction::None, WaypointKind::Via));
                        }
                    }
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            points.push((g.state.clone(), g.gripper_action, WaypointKind::Task));
            prev = g.state.clone();
        }
        if let Some(e) = failed {
            last_err = Some(e);
            continue;
        }
        if points.len() == 1 {
            points.push((current.clone(), GripperAction::None, WaypointKind::Via));
        }
        let candidate = timed_plan(new_id, Some(plan.plan_id), points, params.v_joint_max);
        candidate.validate(chain, params.v_joint_max)?;
        let clearance = plan_clearance(chain, &candidate, &report.bbox, fine)?;
        if clearance >= margin {
            return Ok(candidate);
        }
        last_err = Some(PlanningError::NoFeasiblePlan(format!(
            "detour clearance {clearance:.4} m below margin {margin} m"
        )));
    }
    Err(last_err.unwrap_or_else(|| PlanningError::NoFeasiblePlan("no detour found".into())))
}
