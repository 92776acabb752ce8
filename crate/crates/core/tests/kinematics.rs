use proptest::prelude::*;
use twinloop::kinematics::{ee_position, ee_trace, end_effector_transform, forward_kinematics, KinematicChain};
use twinloop::planning::{plan_pick_and_place, GripperWidths, PlanId, PlannerParams};
use twinloop::kinematics::JointState;
use twinloop::SimTime;

type M4 = [[f64; 4]; 4];

fn mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

// Rz(theta) Tz(d) Tx(a) Rx(alpha) written out element by element.
fn dh(theta: f64, d: f64, a: f64, alpha: f64) -> M4 {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn oracle(chain: &KinematicChain, q: &[f64]) -> M4 {
    let mut t: M4 = [[0.0; 4]; 4];
    for (i, row) in t.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (j, qi) in chain.joints.iter().zip(q) {
        t = mul(&t, &dh(qi + j.theta_offset, j.dh_d, j.dh_a, j.dh_alpha));
    }
    t
}

fn panda_config() -> impl Strategy<Value = Vec<f64>> {
    let chain = KinematicChain::panda_like();
    chain
        .joints
        .iter()
        .map(|j| j.limit_lower..=j.limit_upper)
        .collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn fk_matches_transform_product(q in panda_config()) {
        let chain = KinematicChain::panda_like();
        let want = oracle(&chain, &q);
        let got = end_effector_transform(&chain, &q).unwrap();
        for i in 0..3 {
            prop_assert!((got.translation[i] - want[i][3]).abs() < 1e-9);
            for j in 0..3 {
                prop_assert!((got.rotation[(i, j)] - want[i][j]).abs() < 1e-9);
            }
        }
        let p = ee_position(&chain, &q).unwrap();
        prop_assert_eq!(p, [got.translation.x, got.translation.y, got.translation.z]);
    }

    #[test]
    fn rotation_is_orthonormal(q in panda_config()) {
        let r = end_effector_transform(&KinematicChain::panda_like(), &q).unwrap().rotation;
        let rtr = r.transpose() * r;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                prop_assert!((rtr[(i, j)] - id).abs() < 1e-9);
            }
        }
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quaternion_reproduces_rotation(q in panda_config()) {
        let chain = KinematicChain::panda_like();
        let pose = forward_kinematics(&chain, &q).unwrap();
        let [w, x, y, z] = pose.orientation;
        prop_assert!(w >= 0.0);
        let r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let want = oracle(&chain, &q);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((r[i][j] - want[i][j]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn planar_arm_closed_form() {
    let chain = KinematicChain::planar_two_link();
    let (l1, l2) = (chain.joints[0].dh_a, chain.joints[1].dh_a);
    for (a, b) in [(0.3, -0.7), (1.2, 0.4), (-2.0, 2.5)] {
        let p = ee_position(&chain, &[a, b]).unwrap();
        let want = [l1 * f64::cos(a) + l2 * f64::cos(a + b), l1 * f64::sin(a) + l2 * f64::sin(a + b)];
        assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12);
    }
}

#[test]
fn trace_starts_and_ends_on_waypoints() {
    let chain = KinematicChain::panda_like();
    let home = JointState::new(vec![0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785]);
    let pick = [-0.3074, 0.6484, -0.2987, -2.0396, -0.2006, 2.5569, 0.785];
    let place = [0.3074, 0.6484, 0.2987, -2.0396, 0.2006, 2.5569, 0.785];
    let params = PlannerParams {
        safety_margin: 0.1,
        via_height: 0.1,
        sample_dt: SimTime::from_millis(10),
        v_joint_max: 0.5,
    };
    let plan = plan_pick_and_place(&chain, &home, &pick, &place, &params, PlanId(1), GripperWidths::default()).unwrap();
    let trace = ee_trace(&chain, &plan, params.sample_dt).unwrap();
    assert_eq!(trace[0].1, ee_position(&chain, &home.q).unwrap());
    assert_eq!(trace.last().unwrap().0, plan.end());
    assert!(trace.windows(2).all(|w| w[1].0 > w[0].0 && w[1].0 - w[0].0 <= params.sample_dt));
}
