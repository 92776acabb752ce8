use proptest::prelude::*;
use twinloop::controller::{transition, ControllerAction, ControllerEvent, ControllerState, Phase, RejectionPolicy};
use twinloop::detect::ObstacleReport;
use twinloop::kinematics::JointState;
use twinloop::planning::{GripperAction, MotionPlan, PlanId, Waypoint, WaypointKind};
use twinloop::scene::Aabb;
use twinloop::SimTime;

fn plan(id: u64) -> MotionPlan {
    let w = |q: f64, t: i64| Waypoint {
        state: JointState::new(vec![q, 0.0]).at(SimTime::from_millis(t)),
        gripper_action: GripperAction::None,
        t_offset: SimTime::from_millis(t),
        kind: WaypointKind::Task,
    };
    MotionPlan {
        plan_id: PlanId(id),
        parent_id: (id > 1).then_some(PlanId(1)),
        waypoints: vec![w(0.0, 0), w(1.0, 1000)],
    }
}

fn report(x: f64) -> ObstacleReport {
    ObstacleReport {
        bbox: Aabb::new([x, 0.0, 0.1], [0.1; 3]).unwrap(),
        confidence: 1.0,
        captured_at: SimTime::ZERO,
        report_ready_at: SimTime::from_millis(375),
        seq: 1,
    }
}

fn initial() -> ControllerState {
    ControllerState::new(plan(1), JointState::new(vec![0.0, 0.0]), 0.1, RejectionPolicy::default())
}

/// Compact event alphabet; small id and epoch ranges make collisions likely.
#[derive(Debug, Clone)]
enum Op {
    Telemetry,
    Report(u8),
    ReplanDone(u8, u8),
    ReplanFailed(u8),
    Validation(u8, bool),
    Ack(u8, bool),
    TaskDone(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Telemetry),
        (0u8..3).prop_map(Op::Report),
        (2u8..6, 0u8..5).prop_map(|(id, e)| Op::ReplanDone(id, e)),
        (0u8..5).prop_map(Op::ReplanFailed),
        (1u8..6, any::<bool>()).prop_map(|(id, a)| Op::Validation(id, a)),
        (1u8..6, prop::bool::weighted(0.9)).prop_map(|(id, a)| Op::Ack(id, a)),
        (1u8..6).prop_map(Op::TaskDone),
    ]
}

fn event(op: &Op) -> ControllerEvent {
    match *op {
        Op::Telemetry => ControllerEvent::TelemetryArrived(JointState::new(vec![0.5, 0.0])),
        Op::Report(k) => ControllerEvent::ReportArrived(report(0.5 + 0.3 * k as f64)),
        Op::ReplanDone(id, e) => ControllerEvent::ReplanDone { plan: plan(id as u64), epoch: e as u64 },
        Op::ReplanFailed(e) => ControllerEvent::ReplanFailed { epoch: e as u64, reason: "x".into() },
        Op::Validation(id, approved) => ControllerEvent::ValidationArrived {
            plan_id: PlanId(id as u64),
            approved,
            operator_id: "op".into(),
        },
        Op::Ack(id, accepted) => ControllerEvent::DeployAcked { plan_id: PlanId(id as u64), accepted },
        Op::TaskDone(id) => ControllerEvent::TaskDone { plan_id: PlanId(id as u64) },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn safety_rules_hold_on_any_sequence(ops in prop::collection::vec(op(), 1..60)) {
        let mut s = initial();
        let mut approved: Vec<PlanId> = Vec::new();
        for op in &ops {
            let ev = event(op);
            if let ControllerEvent::ValidationArrived { plan_id, approved: true, .. } = &ev {
                approved.push(*plan_id);
            }
            let was_alarmed = s.alarmed;
            let (next, actions) = transition(&s, &ev);
            prop_assert!(next.check_invariants().is_ok(), "{:?}", next.check_invariants());
            for a in &actions {
                match a {
                    ControllerAction::SendDeploy { plan } => {
                        prop_assert!(approved.contains(&plan.plan_id));
                        prop_assert_eq!(s.phase, Phase::PendingValidation);
                        prop_assert_eq!(s.pending_plan.as_ref().map(|p| p.plan_id), Some(plan.plan_id));
                    }
                    ControllerAction::UpdateMirror { .. } | ControllerAction::RenderObstacle { .. } => {}
                    _ => prop_assert!(!was_alarmed, "alarmed controller emitted {a:?}"),
                }
            }
            if let Some(i) = actions.iter().position(|a| matches!(a, ControllerAction::SendStop { .. })) {
                let first_effect = actions.iter().position(|a| !matches!(a, ControllerAction::UpdateMirror { .. }));
                prop_assert_eq!(first_effect, Some(i), "STOP must precede every other effect");
            }
            if was_alarmed {
                prop_assert!(next.alarmed);
            }
            if s.phase == Phase::Done {
                prop_assert_eq!(next.phase, Phase::Done);
            }
            s = next;
        }
    }

    #[test]
    fn margins_grow_geometrically(rejections in 0u32..3) {
        let mut s = initial();
        let (n, _) = transition(&s, &ControllerEvent::ReportArrived(report(0.5)));
        s = n;
        let mut margins = Vec::new();
        for r in 0..=rejections {
            let epoch = s.replan_epoch;
            let id = 2 + r as u64;
            let (n, _) = transition(&s, &ControllerEvent::ReplanDone { plan: plan(id), epoch });
            prop_assert_eq!(n.phase, Phase::PendingValidation);
            let (n, actions) = transition(&n, &ControllerEvent::ValidationArrived {
                plan_id: PlanId(id),
                approved: r == rejections,
                operator_id: "op".into(),
            });
            for a in actions {
                if let ControllerAction::StartReplan { safety_margin, .. } = a {
                    margins.push(safety_margin);
                }
            }
            s = n;
        }
        prop_assert_eq!(s.phase, Phase::Deploying);
        for (i, m) in margins.iter().enumerate() {
            prop_assert!((m - 0.1 * 1.5f64.powi(i as i32 + 1)).abs() < 1e-12);
        }
    }
}

#[test]
fn third_rejection_alarms_without_deploying() {
    let mut s = transition(&initial(), &ControllerEvent::ReportArrived(report(0.5))).0;
    for attempt in 0..3u64 {
        let epoch = s.replan_epoch;
        s = transition(&s, &ControllerEvent::ReplanDone { plan: plan(2 + attempt), epoch }).0;
        let (n, actions) = transition(&s, &ControllerEvent::ValidationArrived {
            plan_id: PlanId(2 + attempt),
            approved: false,
            operator_id: "op".into(),
        });
        assert!(!actions.iter().any(|a| matches!(a, ControllerAction::SendDeploy { .. })));
        s = n;
    }
    assert!(s.alarmed);
    assert_eq!(s.phase, Phase::Halted);
    assert_eq!(s.rejections, 3);
}
