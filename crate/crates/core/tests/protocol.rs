use proptest::prelude::*;
use twinloop::kinematics::JointState;
use twinloop::planning::PlanId;
use twinloop::protocol::{
    decode_message, decode_message_json, encode_message, message_json, DecodeError, DeployAck, ExecutorMode,
    FrameDecoder, Message, Payload, StopCmd, TaskDone, Telemetry, ValidationResult,
};
use twinloop::SimTime;

fn mode() -> impl Strategy<Value = ExecutorMode> {
    prop_oneof![
        Just(ExecutorMode::Moving),
        Just(ExecutorMode::Halted),
        Just(ExecutorMode::AwaitingMotion),
        Just(ExecutorMode::Idle),
    ]
}

fn payload() -> impl Strategy<Value = Payload> {
    let telemetry = (
        prop::collection::vec(-3.0..3.0f64, 7),
        0.0..0.1f64,
        0i64..10_000_000,
        mode(),
        prop::option::of(1u64..50),
        0usize..20,
        prop::option::of(any::<u64>()),
        any::<bool>(),
    )
        .prop_map(|(q, w, t, mode, plan, next, stop, holding)| {
            Payload::Telemetry(Telemetry {
                state: JointState::new(q).with_gripper(w).at(SimTime::from_ticks(t)),
                mode,
                plan_id: plan.map(PlanId),
                next_waypoint: next,
                stop_applied: stop,
                holding_object: holding,
            })
        });
    prop_oneof![
        telemetry,
        any::<u64>().prop_map(|s| Payload::StopCmd(StopCmd { report_seq: s })),
        (1u64..100, any::<bool>(), "[a-z0-9 -]{1,12}").prop_map(|(id, approved, op)| {
            Payload::ValidationResult(ValidationResult {
                plan_id: PlanId(id),
                approved,
                operator_id: op,
            })
        }),
        (1u64..100, any::<bool>(), prop::option::of("[ -~]{0,20}")).prop_map(|(id, accepted, reason)| {
            Payload::DeployAck(DeployAck {
                plan_id: PlanId(id),
                accepted,
                reason,
            })
        }),
        (1u64..100).prop_map(|id| Payload::TaskDone(TaskDone { plan_id: PlanId(id) })),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    (any::<u64>(), 0i64..1_000_000_000, payload()).prop_map(|(seq, t, payload)| Message {
        seq,
        sent_at: SimTime::from_ticks(t),
        payload,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn frames_round_trip(m in message()) {
        let bytes = encode_message(&m);
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        prop_assert_eq!(len + 4, bytes.len());
        prop_assert_eq!(decode_message(&bytes).unwrap(), m.clone());
        prop_assert_eq!(decode_message_json(&message_json(&m)).unwrap(), m);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode_message(&bytes);
        let _ = decode_message_json(&bytes);
        let mut d = FrameDecoder::new();
        d.push(&bytes);
        while let Some(r) = d.next_message() {
            if r.is_err() {
                break;
            }
        }
    }

    #[test]
    fn every_strict_prefix_is_truncated(m in message(), cut in 0.0..1.0f64) {
        let bytes = encode_message(&m);
        let n = ((bytes.len() as f64) * cut) as usize;
        let short = &bytes[..n.min(bytes.len() - 1)];
        prop_assert!(
            matches!(decode_message(short), Err(DecodeError::Truncated { .. })),
            "truncated input was not reported as such"
        );
    }

    #[test]
    fn corrupted_bodies_are_rejected_or_reparsed(m in message(), at in any::<prop::sample::Index>(), b in any::<u8>()) {
        let mut bytes = encode_message(&m);
        let i = 4 + at.index(bytes.len() - 4);
        bytes[i] = b;
        if let Ok(decoded) = decode_message(&bytes) {
            prop_assert_eq!(decode_message(&encode_message(&decoded)).unwrap(), decoded);
        }
    }

    #[test]
    fn stream_split_anywhere(ms in prop::collection::vec(message(), 1..6), chunk in 1usize..64) {
        let stream: Vec<u8> = ms.iter().flat_map(encode_message).collect();
        let mut d = FrameDecoder::new();
        let mut out = Vec::new();
        for c in stream.chunks(chunk) {
            d.push(c);
            while let Some(r) = d.next_message() {
                out.push(r.unwrap());
            }
        }
        prop_assert_eq!(out, ms);
        prop_assert_eq!(d.buffered(), 0);
    }
}

#[test]
fn encoding_is_canonical() {
    let m = Message {
        seq: 3,
        sent_at: SimTime::from_ms(2403.79),
        payload: Payload::StopCmd(StopCmd { report_seq: 5 }),
    };
    assert_eq!(
        String::from_utf8(message_json(&m)).unwrap(),
        r#"{"kind":"STOP_CMD","payload":{"report_seq":5,"v":1},"sent_at":2403.79,"seq":3}"#
    );
}

#[test]
fn rejects_foreign_shapes() {
    let cases: [(&str, fn(&DecodeError) -> bool); 5] = [
        (r#"{"kind":"WARP","payload":{"v":1},"sent_at":0.0,"seq":0}"#, |e| matches!(e, DecodeError::UnknownKind(_))),
        (r#"{"kind":"STOP_CMD","payload":{"report_seq":1,"v":2},"sent_at":0.0,"seq":0}"#, |e| {
            matches!(e, DecodeError::UnsupportedVersion(_))
        }),
        (r#"{"kind":"STOP_CMD","payload":{"report_seq":1,"v":1},"sent_at":0.0,"seq":0,"x":1}"#, |e| {
            matches!(e, DecodeError::Malformed(_))
        }),
        (r#"{"kind":"STOP_CMD","payload":{"v":1},"sent_at":0.0,"seq":0}"#, |e| matches!(e, DecodeError::Malformed(_))),
        (r#"[1,2,3]"#, |e| matches!(e, DecodeError::Malformed(_))),
    ];
    for (text, check) in cases {
        let err = decode_message_json(text.as_bytes()).unwrap_err();
        assert!(check(&err), "{text}: {err:?}");
    }
    let mut framed = encode_message(&Message {
        seq: 0,
        sent_at: SimTime::ZERO,
        payload: Payload::TaskDone(TaskDone { plan_id: PlanId(1) }),
    });
    framed.push(0);
    assert_eq!(decode_message(&framed), Err(DecodeError::TrailingBytes(1)));
}
