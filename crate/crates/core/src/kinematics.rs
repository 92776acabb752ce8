//! Forward kinematics over a serial chain described by standard
//! Denavit–Hartenberg parameters.
//!
//! Each joint contributes `Rz(q + theta_offset) · Tz(d) · Tx(a) · Rx(alpha)`.
//! The composed transform maps the tool frame into the robot base frame.

use nalgebra::{Matrix3, Matrix3xX, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planning::MotionPlan;
use crate::time::SimTime;

/// Cartesian position in meters, base frame.
pub type Position = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("joint value {index} is not finite")]
    NonFinite { index: usize },
    #[error("plan has no waypoints")]
    EmptyPlan,
    #[error("sampling period must be positive")]
    NonPositiveStep,
    #[error("invalid chain: {0}")]
    InvalidChain(String),
}

/// One revolute joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub dh_a: f64,
    pub dh_d: f64,
    pub dh_alpha: f64,
    pub theta_offset: f64,
    pub limit_lower: f64,
    pub limit_upper: f64,
}

impl JointSpec {
    pub fn new(dh_a: f64, dh_d: f64, dh_alpha: f64, limits: (f64, f64)) -> Self {
        JointSpec {
            dh_a,
            dh_d,
            dh_alpha,
            theta_offset: 0.0,
            limit_lower: limits.0,
            limit_upper: limits.1,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.limit_lower + self.limit_upper)
    }

    /// Local transform of this joint at angle `q`.
    fn local(&self, q: f64) -> RigidTransform {
        let theta = q + self.theta_offset;
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), theta);
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), self.dh_alpha);
        let translation = rz * Vector3::new(self.dh_a, 0.0, 0.0) + Vector3::new(0.0, 0.0, self.dh_d);
        RigidTransform {
            rotation: (rz * rx).into_inner(),
            translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub name: String,
    pub joints: Vec<JointSpec>,
}

impl KinematicChain {
    pub fn new(name: impl Into<String>, joints: Vec<JointSpec>) -> Result<Self, KinematicsError> {
        let chain = KinematicChain {
            name: name.into(),
            joints,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.joints.is_empty() {
            return Err(KinematicsError::InvalidChain("chain has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            let params = [j.dh_a, j.dh_d, j.dh_alpha, j.theta_offset, j.limit_lower, j.limit_upper];
            if params.iter().any(|v| !v.is_finite()) {
                return Err(KinematicsError::InvalidChain(format!("joint {i} has a non-finite parameter")));
            }
            if !(j.limit_lower < j.limit_upper) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i}: limit_lower {} must be below limit_upper {}",
                    j.limit_lower, j.limit_upper
                )));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn midpoint_config(&self) -> Vec<f64> {
        self.joints.iter().map(JointSpec::midpoint).collect()
    }

    /// Two unit links in the plane, used throughout the tests.
    pub fn planar_two_link() -> Self {
        let lim = (-std::f64::consts::PI, std::f64::consts::PI);
        KinematicChain {
            name: "planar-2".into(),
            joints: vec![JointSpec::new(1.0, 0.0, 0.0, lim), JointSpec::new(1.0, 0.0, 0.0, lim)],
        }
    }

    /// Seven-joint arm with Panda-like proportions.
    pub fn panda_like() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let j = |a: f64, d: f64, alpha: f64, lo: f64, hi: f64| JointSpec::new(a, d, alpha, (lo, hi));
        KinematicChain {
            name: "panda-like".into(),
            joints: vec![
                j(0.0, 0.333, -FRAC_PI_2, -2.8973, 2.8973),
                j(0.0, 0.0, FRAC_PI_2, -1.7628, 1.7628),
                j(0.0825, 0.316, FRAC_PI_2, -2.8973, 2.8973),
                j(-0.0825, 0.0, -FRAC_PI_2, -3.0718, -0.0698),
                j(0.0, 0.384, FRAC_PI_2, -2.8973, 2.8973),
                j(0.088, 0.0, FRAC_PI_2, -0.0175, 3.7525),
                j(0.0, 0.2104, 0.0, -2.8973, 2.8973),
            ],
        }
    }

    fn check_dims(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        if let Some(index) = q.iter().position(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite { index });
        }
        Ok(())
    }
}

/// Instantaneous arm configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointState {
    pub q: Vec<f64>,
    pub gripper_width: f64,
    pub t: SimTime,
}

impl JointState {
    pub fn new(q: Vec<f64>) -> Self {
        JointState {
            q,
            gripper_width: 0.0,
            t: SimTime::ZERO,
        }
    }

    pub fn with_gripper(mut self, width: f64) -> Self {
        self.gripper_width = width;
        self
    }

    pub fn at(mut self, t: SimTime) -> Self {
        self.t = t;
        self
    }
}

/// End-effector pose. Orientation is a unit quaternion `(w, x, y, z)` with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EePose {
    pub position: Position,
    pub orientation: [f64; 4],
}

/// Homogeneous rigid transform kept as rotation + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn then(&self, child: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * child.rotation,
            translation: self.translation + self.rotation * child.translation,
        }
    }
}

/// Base-to-tool transform together with every intermediate frame
/// (frame 0 is the base, frame `n` is the tool).
pub fn frame_chain(chain: &KinematicChain, q: &[f64]) -> Result<Vec<RigidTransform>, KinematicsError> {
    chain.check_dims(q)?;
    let mut frames = Vec::with_capacity(q.len() + 1);
    let mut acc = RigidTransform::identity();
    frames.push(acc);
    for (joint, &qi) in chain.joints.iter().zip(q) {
        acc = acc.then(&joint.local(qi));
        frames.push(acc);
    }
    Ok(frames)
}

pub fn end_effector_transform(chain: &KinematicChain, q: &[f64]) -> Result<RigidTransform, KinematicsError> {
    Ok(*frame_chain(chain, q)?.last().expect("frame chain always contains the base"))
}

pub fn forward_kinematics(chain: &KinematicChain, q: &[f64]) -> Result<EePose, KinematicsError> {
    let tf = end_effector_transform(chain, q)?;
    let rot = Rotation3::from_matrix_unchecked(tf.rotation);
    let quat = UnitQuaternion::from_rotation_matrix(&rot);
    let mut o = [quat.w, quat.i, quat.j, quat.k];
    if o[0] < 0.0 {
        o.iter_mut().for_each(|c| *c = -*c);
    }
    Ok(EePose {
        position: [tf.translation.x, tf.translation.y, tf.translation.z],
        orientation: o,
    })
}

/// Tool position only; the hot path for traces and clearance checks.
pub fn ee_position(chain: &KinematicChain, q: &[f64]) -> Result<Position, KinematicsError> {
    let t = end_effector_transform(chain, q)?.translation;
    Ok([t.x, t.y, t.z])
}

/// Positional Jacobian (3 × dof) of the tool point.
pub fn position_jacobian(chain: &KinematicChain, q: &[f64]) -> Result<Matrix3xX<f64>, KinematicsError> {
    let frames = frame_chain(chain, q)?;
    let tool = frames[frames.len() - 1].translation;
    let mut jac = Matrix3xX::zeros(chain.dof());
    for i in 0..chain.dof() {
        let axis = frames[i].rotation.column(2).into_owned();
        let col = axis.cross(&(tool - frames[i].translation));
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// End-effector positions along a plan, sampled every `dt` from the plan
/// start, with the final sample pinned to the plan end. Times are plan-relative.
pub fn ee_trace(
    chain: &KinematicChain,
    plan: &MotionPlan,
    dt: SimTime,
) -> Result<Vec<(SimTime, Position)>, KinematicsError> {
    if dt <= SimTime::ZERO {
        return Err(KinematicsError::NonPositiveStep);
    }
    let (start, end) = match (plan.waypoints.first(), plan.waypoints.last()) {
        (Some(a), Some(b)) => (a.t_offset, b.t_offset),
        _ => return Err(KinematicsError::EmptyPlan),
    };
    let mut out = Vec::new();
    let mut t = start;
    while t < end {
        out.push((t, ee_position(chain, &plan.state_at(t).q)?));
        t += dt;
    }
    out.push((end, ee_position(chain, &plan.waypoints[plan.waypoints.len() - 1].state.q)?));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitViolation {
    pub joint: usize,
    /// Distance beyond the violated bound, always positive.
    pub excess: f64,
}

/// Closed-interval limit check: a value sitting exactly on a bound is legal.
pub fn check_limits(chain: &KinematicChain, state: &JointState) -> Result<Vec<LimitViolation>, KinematicsError> {
    check_config_limits(chain, &state.q)
}

pub fn check_config_limits(chain: &KinematicChain, q: &[f64]) -> Result<Vec<LimitViolation>, KinematicsError> {
    chain.check_dims(q)?;
    Ok(chain
        .joints
        .iter()
        .zip(q)
        .enumerate()
        .filter_map(|(joint, (spec, &qi))| {
            if qi > spec.limit_upper {
                Some(LimitViolation {
                    joint,
                    excess: qi - spec.limit_upper,
                })
            } else if qi < spec.limit_lower {
                Some(LimitViolation {
                    joint,
                    excess: spec.limit_lower - qi,
                })
            } else {
                None
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Position, b: Position, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn planar_straight_and_elbow() {
        let chain = KinematicChain::planar_two_link();
        let p = forward_kinematics(&chain, &[0.0, 0.0]).unwrap().position;
        assert_eq!(p, [2.0, 0.0, 0.0]);
        let p = forward_kinematics(&chain, &[FRAC_PI_2, -FRAC_PI_2]).unwrap().position;
        assert!(close(p, [1.0, 1.0, 0.0], 1e-12), "{p:?}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let chain = KinematicChain::planar_two_link();
        assert_eq!(
            forward_kinematics(&chain, &[0.0]),
            Err(KinematicsError::DimensionMismatch { expected: 2, got: 1 })
        );
        assert!(check_config_limits(&chain, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn limits_closed_interval() {
        let chain = KinematicChain::panda_like();
        let mid = chain.midpoint_config();
        assert!(check_config_limits(&chain, &mid).unwrap().is_empty());

        let mut q = mid.clone();
        q[0] = chain.joints[0].limit_upper + 0.1;
        let v = check_config_limits(&chain, &q).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].joint, 0);
        assert!((v[0].excess - 0.1).abs() < 1e-12);

        let mut q = mid;
        q[3] = chain.joints[3].limit_lower;
        q[5] = chain.joints[5].limit_upper;
        assert!(check_config_limits(&chain, &q).unwrap().is_empty());
    }

    #[test]
    fn quaternion_is_unit() {
        let chain = KinematicChain::panda_like();
        let pose = forward_kinematics(&chain, &[0.3, -0.5, 0.2, -2.0, 0.1, 1.7, 0.6]).unwrap();
        let n: f64 = pose.orientation.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(pose.orientation[0] >= 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let chain = KinematicChain::panda_like();
        let q = vec![0.1, -0.6, 0.3, -2.2, -0.2, 1.8, 0.4];
        let jac = position_jacobian(&chain, &q).unwrap();
        let h = 1e-6;
        for i in 0..chain.dof() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let pp = ee_position(&chain, &qp).unwrap();
            let pm = ee_position(&chain, &qm).unwrap();
            for k in 0..3 {
                let fd = (pp[k] - pm[k]) / (2.0 * h);
                assert!((fd - jac[(k, i)]).abs() < 1e-7, "joint {i} axis {k}");
            }
        }
    }

    #[test]
    fn invalid_chains_rejected() {
        assert!(KinematicChain::new("empty", vec![]).is_err());
        let bad = JointSpec::new(1.0, 0.0, 0.0, (1.0, 1.0));
        assert!(KinematicChain::new("flat", vec![bad]).is_err());
        let nan = JointSpec::new(f64::NAN, 0.0, 0.0, (-1.0, 1.0));
        assert!(KinematicChain::new("nan", vec![nan]).is_err());
    }
}
