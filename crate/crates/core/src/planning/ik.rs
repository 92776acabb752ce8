use nalgebra::{Matrix3, Vector3};

use crate::kinematics::{ee_position, position_jacobian, KinematicChain, Position};

/// Damped least-squares settings for position-only IK.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub max_iterations: usize,
    /// Converged once the tool is this close to the target (meters).
    pub tolerance: f64,
    pub damping: f64,
    /// Largest per-iteration step in joint space (rad, infinity norm).
    pub max_step: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            max_iterations: 200,
            tolerance: 1e-4,
            damping: 0.05,
            max_step: 0.2,
        }
    }
}

/// Moves the tool point to `target` starting from `seed`, clamping every
/// iterate to the joint limits. Returns `None` if it fails to converge.
pub fn solve_position(chain: &KinematicChain, target: Position, seed: &[f64], opts: &IkOptions) -> Option<Vec<f64>> {
    let mut q = seed.to_vec();
    let goal = Vector3::from(target);
    let lambda2 = opts.damping * opts.damping;
    for _ in 0..opts.max_iterations {
        let p = Vector3::from(ee_position(chain, &q).ok()?);
        let err = goal - p;
        if err.norm() <= opts.tolerance {
            return Some(q);
        }
        let jac = position_jacobian(chain, &q).ok()?;
        let jjt = &jac * jac.transpose() + Matrix3::identity() * lambda2;
        let y = jjt.try_inverse()? * err;
        let mut dq = jac.transpose() * y;
        let largest = dq.amax();
        if largest > opts.max_step {
            dq *= opts.max_step / largest;
        }
        for ((qi, d), spec) in q.iter_mut().zip(dq.iter()).zip(&chain.joints) {
            *qi = (*qi + d).clamp(spec.limit_lower, spec.limit_upper);
        }
    }
    let p = Vector3::from(ee_position(chain, &q).ok()?);
    ((goal - p).norm() <= opts.tolerance).then_some(q)
}
