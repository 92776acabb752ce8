//! Discrete-event wiring of the physical site (robot, sensor, edge node),
//! the digital site (twin controller and planner) and the console.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::console::{ConsoleFrame, Snapshot};
use crate::controller::{mirror_divergence, transition, ControllerAction, ControllerEvent, ControllerState, Phase};
use crate::detect::{EdgeNode, ObstacleReport};
use crate::kinematics::{ee_position, ee_trace, JointState, Position};
use crate::metrics::{
    action_name, derive_all_latencies, mae, quantize_sample, ClearanceSummary, EventRecord, Link, LoggedEvent,
    Outcome, RunLog, RunSummary, Site,
};
use crate::physical::{PhysicalRobot, WaypointOutcome};
use crate::planning::{
    plan_clearance, plan_pick_and_place, replan_around_obstacle, MotionPlan, PlanId, PlannerParams, PlanningError,
};
use crate::protocol::{
    encode_message, encode_scene_frame, Channel, DeployAck, ExecutorMode, Message, Outbox, Payload, PlanDeploy,
    PlanProposed, StopCmd, TaskDone, Telemetry, TracePoint, ValidationResult,
};
use crate::scenario::{ApproverMode, ConfigError, ScenarioConfig};
use crate::scene::{render_frame, Aabb};
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("nominal plan: {0}")]
    NominalPlan(#[from] PlanningError),
}

#[derive(Debug, Clone)]
enum Ev {
    TelemetryTick,
    SensorTick,
    ObstacleSpawn(usize),
    ReportReady(ObstacleReport),
    Deliver(Link, Message),
    ReplanComplete { epoch: u64, result: Result<MotionPlan, String> },
    MotionStart(u64),
    Waypoint(u64, usize),
    StopRetry(u64),
    DeployRetry(PlanId),
    Decision(ValidationResult),
    MaxTime,
}

struct Scheduled {
    t: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.seq) == (other.t, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

struct ReplanRequest {
    report: ObstacleReport,
    safety_margin: f64,
    epoch: u64,
    attempt: u32,
}

/// A stepping simulation. Headless callers use [`run_scenario`].
pub struct Simulation {
    cfg: ScenarioConfig,
    now: SimTime,
    queue: BinaryHeap<Scheduled>,
    next_seq: u64,
    log: Vec<LoggedEvent>,
    end: Option<(SimTime, Outcome)>,

    robot: PhysicalRobot,
    edge: EdgeNode,
    phys_out: Outbox,
    edge_out: Outbox,
    frame_seed: u64,
    frames: u64,
    physical_trace: Vec<(SimTime, Position)>,

    uplink: Channel,
    downlink: Channel,
    console_out: Channel,
    console_in: Channel,

    ctrl: ControllerState,
    dig_out: Outbox,
    plans: BTreeMap<PlanId, MotionPlan>,
    next_plan: u64,
    latest_telemetry: Option<Telemetry>,
    last_stop: Option<(u64, u64)>,
    replan: Option<ReplanRequest>,
    mirror_trace: Vec<(SimTime, Position)>,
    rendered: Option<Aabb>,
    pending_proposal: Option<PlanProposed>,
    alarm: Option<String>,

    con_out: Outbox,
    rejections_sent: u32,

    bridge: Option<Vec<ConsoleFrame>>,
    snapshot_seq: u64,
}

fn fine_dt(p: &PlannerParams) -> SimTime {
    SimTime::from_ticks((p.sample_dt.ticks() / 20).max(1))
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let home = JointState::new(cfg.home.clone()).with_gripper(cfg.gripper.open);
        let nominal = plan_pick_and_place(
            &cfg.chain,
            &home,
            &cfg.pick,
            &cfg.place,
            &cfg.planner,
            PlanId(1),
            cfg.gripper,
        )?;
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut seed = || master.next_u64();
        let (s_up, s_down, s_cout, s_cin, frame_seed) = (seed(), seed(), seed(), seed(), seed());
        let robot = PhysicalRobot::new(
            cfg.chain.clone(),
            cfg.planner.v_joint_max,
            nominal.clone(),
            SimTime::ZERO,
            cfg.scene.task_object.center,
        );
        let mirror0 = ee_position(&cfg.chain, &cfg.home).expect("validated");
        let ctrl = ControllerState::new(
            nominal.clone(),
            home.clone(),
            cfg.planner.safety_margin,
            cfg.twin.rejection,
        );
        let mut sim = Simulation {
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            log: Vec::new(),
            end: None,
            robot,
            edge: EdgeNode::new(cfg.detector),
            phys_out: Outbox::new(),
            edge_out: Outbox::new(),
            frame_seed,
            frames: 0,
            physical_trace: Vec::new(),
            uplink: Channel::new(cfg.links.uplink, s_up),
            downlink: Channel::new(cfg.links.downlink, s_down),
            console_out: Channel::new(cfg.links.console, s_cout),
            console_in: Channel::new(cfg.links.console, s_cin),
            ctrl,
            dig_out: Outbox::new(),
            plans: BTreeMap::from([(PlanId(1), nominal.clone())]),
            next_plan: 2,
            latest_telemetry: None,
            last_stop: None,
            replan: None,
            mirror_trace: vec![(SimTime::ZERO, offset(mirror0, cfg.twin.mirror_offset))],
            rendered: None,
            pending_proposal: None,
            alarm: None,
            con_out: Outbox::new(),
            rejections_sent: 0,
            bridge: None,
            snapshot_seq: 0,
            cfg,
        };
        sim.record(
            Site::Scheduler,
            EventRecord::RunStarted {
                config: Box::new(sim.cfg.clone()),
            },
        );
        sim.record(Site::Digital, EventRecord::PlanLoaded { plan: nominal });
        sim.schedule(SimTime::ZERO, Ev::TelemetryTick);
        sim.schedule(SimTime::ZERO, Ev::SensorTick);
        for (i, o) in sim.cfg.scene.obstacles.clone().iter().enumerate() {
            sim.schedule(o.spawn_at, Ev::ObstacleSpawn(i));
        }
        sim.schedule_wakeups();
        sim.schedule(sim.cfg.max_sim_time, Ev::MaxTime);
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.cfg.name, self.cfg.seed)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn phase(&self) -> Phase {
        self.ctrl.phase
    }

    pub fn controller(&self) -> &ControllerState {
        &self.ctrl
    }

    /// Time of the next event to process, or `None` once the run is over.
    pub fn next_event_time(&self) -> Option<SimTime> {
        let next = self.queue.peek()?.t;
        match self.end {
            Some((end, _)) if next > end => None,
            _ => Some(next),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.next_event_time().is_none()
    }

    /// Starts collecting frames for the console bridge.
    pub fn enable_bridge(&mut self) {
        self.bridge = Some(Vec::new());
        self.push_snapshot();
    }

    pub fn drain_bridge_frames(&mut self) -> Vec<ConsoleFrame> {
        self.bridge.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            run_id: self.run_id(),
            t: self.now,
            phase: self.ctrl.phase,
            mirror: self.ctrl.mirror.clone(),
            mirror_ee: self.mirror_trace.last().map_or([0.0; 3], |(_, p)| *p),
            obstacle: self.rendered,
            active_plan_id: self.ctrl.active_plan.plan_id,
            pending: self.pending_proposal.clone(),
            rejections: self.ctrl.rejections,
            alarm: self.alarm.clone(),
            outcome: self.end.map(|(_, o)| o),
        }
    }

    /// A decision from a human operator; sent over the console link now.
    pub fn submit_validation(&mut self, v: ValidationResult) {
        let t = self.now;
        self.schedule(t, Ev::Decision(v));
    }

    fn push_snapshot(&mut self) {
        if self.bridge.is_some() {
            let snapshot = self.snapshot();
            let seq = self.snapshot_seq;
            self.snapshot_seq += 1;
            if let Some(b) = self.bridge.as_mut() {
                b.push(ConsoleFrame::Snapshot { seq, snapshot });
            }
        }
    }

    fn schedule(&mut self, t: SimTime, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { t, seq, ev });
    }

    fn record(&mut self, site: Site, event: EventRecord) {
        self.log.push(LoggedEvent { t: self.now, site, event });
    }

    fn finish(&mut self, outcome: Outcome) {
        if self.end.is_none() {
            self.end = Some((self.now, outcome));
            self.push_snapshot();
        }
    }

    /// Processes one event. Returns `false` once the run is over.
    pub fn step(&mut self) -> bool {
        if self.next_event_time().is_none() {
            return false;
        }
        let Scheduled { t, ev, .. } = self.queue.pop().expect("peeked");
        self.now = t;
        self.handle(ev);
        true
    }

    pub fn run_to_end(mut self) -> RunLog {
        while self.step() {}
        self.into_log()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::TelemetryTick => {
                let tel = self.robot.telemetry(self.now);
                let ee = self.robot.ee(self.now);
                self.physical_trace.push((self.now, ee));
                self.record(
                    Site::Physical,
                    EventRecord::TelemetrySampled {
                        state: tel.state.clone(),
                        ee,
                        mode: tel.mode,
                        plan_id: self.robot.plan_id(),
                    },
                );
                self.send(Link::Uplink, Payload::Telemetry(tel));
                let next = self.now + self.cfg.executor.telemetry_period;
                self.schedule(next, Ev::TelemetryTick);
            }
            Ev::SensorTick => {
                if self.edge.is_idle(self.now) {
                    self.capture_frame();
                }
                let next = self.now + self.cfg.sensor.frame_period;
                self.schedule(next, Ev::SensorTick);
            }
            Ev::ObstacleSpawn(i) => {
                let bbox = self.cfg.scene.obstacles[i].bbox;
                self.record(Site::Physical, EventRecord::ObstacleSpawned { bbox });
            }
            Ev::ReportReady(report) => {
                let bytes = serde_json::to_vec(&report).map_or(0, |b| b.len());
                self.record(
                    Site::Edge,
                    EventRecord::ReportReady {
                        report,
                        bytes,
                    },
                );
                self.send(Link::Uplink, Payload::ObstacleReport(report));
            }
            Ev::Deliver(link, msg) => self.deliver(link, msg),
            Ev::ReplanComplete { epoch, result } => match result {
                Ok(plan) => {
                    let bbox = self.ctrl.plan_basis.unwrap_or(self.cfg.scene.task_object);
                    let clearance = plan_clearance(&self.cfg.chain, &plan, &bbox, fine_dt(&self.cfg.planner))
                        .unwrap_or(f64::NEG_INFINITY);
                    self.record(
                        Site::Digital,
                        EventRecord::ReplanFinished {
                            epoch,
                            plan_id: plan.plan_id,
                            clearance,
                        },
                    );
                    self.plans.insert(plan.plan_id, plan.clone());
                    self.controller_event(ControllerEvent::ReplanDone { plan, epoch });
                }
                Err(reason) => {
                    self.record(
                        Site::Digital,
                        EventRecord::ReplanFailed {
                            epoch,
                            reason: reason.clone(),
                        },
                    );
                    self.controller_event(ControllerEvent::ReplanFailed { epoch, reason });
                }
            },
            Ev::MotionStart(generation) => {
                if let Some(plan_id) = self.robot.start_motion(generation, self.now) {
                    self.record(Site::Physical, EventRecord::MotionStarted { plan_id });
                    self.send(Link::Uplink, Payload::MotionStarted(crate::protocol::MotionStarted { plan_id }));
                    self.schedule_wakeups();
                }
            }
            Ev::Waypoint(generation, index) => {
                for outcome in self.robot.reach_waypoint(generation, index, self.now) {
                    match outcome {
                        WaypointOutcome::Grasped { object_center } => {
                            self.record(Site::Physical, EventRecord::ObjectGrasped { center: object_center })
                        }
                        WaypointOutcome::Released { object_center } => {
                            self.record(Site::Physical, EventRecord::ObjectReleased { center: object_center })
                        }
                        WaypointOutcome::Finished { plan_id } => {
                            let object_center = self.robot.object_center(self.now);
                            self.record(Site::Physical, EventRecord::TaskCompleted { plan_id, object_center });
                            self.send(Link::Uplink, Payload::TaskDone(TaskDone { plan_id }));
                        }
                    }
                }
            }
            Ev::StopRetry(stop_seq) => {
                let outstanding = self.last_stop.is_some_and(|(s, _)| s == stop_seq);
                let active = !matches!(self.ctrl.phase, Phase::Nominal | Phase::Done);
                if outstanding && active && !self.halt_confirmed() {
                    let (_, report_seq) = self.last_stop.expect("checked");
                    self.send_stop(report_seq);
                }
            }
            Ev::DeployRetry(id) => {
                let waiting = self.ctrl.phase == Phase::Deploying && !self.ctrl.alarmed;
                if let Some(plan) = self.ctrl.pending_plan.clone().filter(|p| waiting && p.plan_id == id) {
                    self.send_deploy(plan);
                }
            }
            Ev::Decision(v) => {
                self.record(
                    Site::Console,
                    EventRecord::ValidationDecided {
                        plan_id: v.plan_id,
                        approved: v.approved,
                        operator_id: v.operator_id.clone(),
                    },
                );
                self.send(Link::ConsoleIn, Payload::ValidationResult(v));
            }
            Ev::MaxTime => self.finish(Outcome::Timeout),
        }
    }

    fn schedule_wakeups(&mut self) {
        let generation = self.robot.generation();
        for (i, t) in self.robot.wakeups() {
            self.schedule(t, Ev::Waypoint(generation, i));
        }
    }

    fn capture_frame(&mut self) {
        let seq = self.frames;
        self.frames += 1;
        let mut scene = self.cfg.scene.clone();
        scene.task_object.center = self.robot.object_center(self.now);
        let seed = self.frame_seed ^ seq.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let frame = render_frame(&scene, self.now, &self.cfg.sensor, seed, seq);
        let report = self.edge.process(&frame, scene.table_height());
        self.record(
            Site::Edge,
            EventRecord::FrameCaptured {
                seq,
                points: frame.points.len(),
                bytes: encode_scene_frame(&frame).len(),
                processed: true,
            },
        );
        if let Some(r) = report {
            self.schedule(r.report_ready_at, Ev::ReportReady(r));
        }
    }

    /// Stamps, logs and transmits a message; returns its sequence number.
    fn send(&mut self, link: Link, payload: Payload) -> u64 {
        let msg = match link {
            Link::Uplink if matches!(payload, Payload::ObstacleReport(_)) => self.edge_out.stamp(payload, self.now),
            Link::Uplink => self.phys_out.stamp(payload, self.now),
            Link::Downlink | Link::ConsoleOut => self.dig_out.stamp(payload, self.now),
            Link::ConsoleIn => self.con_out.stamp(payload, self.now),
        };
        let bytes = encode_message(&msg).len();
        let (kind, seq) = (msg.kind(), msg.seq);
        let sender = match link {
            Link::Uplink if kind == crate::protocol::MessageKind::ObstacleReport => Site::Edge,
            Link::Uplink => Site::Physical,
            Link::Downlink | Link::ConsoleOut => Site::Digital,
            Link::ConsoleIn => Site::Console,
        };
        self.record(
            sender,
            EventRecord::MessageSent {
                link,
                message_kind: kind,
                seq,
                bytes,
            },
        );
        let channel = match link {
            Link::Uplink => &mut self.uplink,
            Link::Downlink => &mut self.downlink,
            Link::ConsoleOut => &mut self.console_out,
            Link::ConsoleIn => &mut self.console_in,
        };
        match channel.deliver(msg, self.now) {
            Some((msg, at)) => self.schedule(at, Ev::Deliver(link, msg)),
            None => self.record(
                sender,
                EventRecord::MessageDropped {
                    link,
                    message_kind: kind,
                    seq,
                },
            ),
        }
        seq
    }

    fn deliver(&mut self, link: Link, msg: Message) {
        let site = match link {
            Link::Uplink | Link::ConsoleIn => Site::Digital,
            Link::Downlink => Site::Physical,
            Link::ConsoleOut => Site::Console,
        };
        self.record(
            site,
            EventRecord::MessageDelivered {
                link,
                message: msg.clone(),
            },
        );
        if link != Link::Downlink {
            if let Some(b) = self.bridge.as_mut() {
                b.push(ConsoleFrame::Message(msg.clone()));
            }
        }
        match site {
            Site::Digital => self.digital_receive(msg),
            Site::Physical => self.physical_receive(msg),
            _ => self.console_receive(msg),
        }
    }

    fn physical_receive(&mut self, msg: Message) {
        match msg.payload {
            Payload::StopCmd(_) => {
                let hold = self.robot.stop(self.now, msg.seq);
                self.record(
                    Site::Physical,
                    EventRecord::StopApplied {
                        stop_seq: msg.seq,
                        q: hold.q,
                    },
                );
            }
            Payload::PlanDeploy(PlanDeploy { plan }) => {
                let plan_id = plan.plan_id;
                let duplicate = self.robot.mode() != ExecutorMode::Halted && self.robot.plan_id() == plan_id;
                if duplicate {
                    self.send(
                        Link::Uplink,
                        Payload::DeployAck(DeployAck {
                            plan_id,
                            accepted: true,
                            reason: None,
                        }),
                    );
                    return;
                }
                match self.robot.accept_deploy(plan, self.now) {
                    Ok(()) => {
                        let motion_at = self.now + self.cfg.executor.actuation_latency;
                        self.record(Site::Physical, EventRecord::DeployAccepted { plan_id, motion_at });
                        self.send(
                            Link::Uplink,
                            Payload::DeployAck(DeployAck {
                                plan_id,
                                accepted: true,
                                reason: None,
                            }),
                        );
                        let generation = self.robot.generation();
                        self.schedule(motion_at, Ev::MotionStart(generation));
                    }
                    Err(e) => {
                        let reason = e.to_string();
                        self.record(
                            Site::Physical,
                            EventRecord::DeployRejected {
                                plan_id,
                                reason: reason.clone(),
                            },
                        );
                        self.send(
                            Link::Uplink,
                            Payload::DeployAck(DeployAck {
                                plan_id,
                                accepted: false,
                                reason: Some(reason),
                            }),
                        );
                    }
                }
            }
            _ => {}
        }
    }

    fn console_receive(&mut self, msg: Message) {
        let Payload::PlanProposed(p) = msg.payload else {
            return;
        };
        let approver = &self.cfg.approver;
        let approved = match approver.mode {
            ApproverMode::AutoApprove => true,
            ApproverMode::AutoRejectNTimes => {
                if self.rejections_sent < approver.n {
                    self.rejections_sent += 1;
                    false
                } else {
                    true
                }
            }
            ApproverMode::Human => return,
        };
        let decision = ValidationResult {
            plan_id: p.plan.plan_id,
            approved,
            operator_id: approver.operator_id.clone(),
        };
        let at = self.now + approver.delay;
        self.schedule(at, Ev::Decision(decision));
    }

    fn digital_receive(&mut self, msg: Message) {
        match msg.payload {
            Payload::Telemetry(t) => {
                let ee = ee_position(&self.cfg.chain, &t.state.q).expect("telemetry matches the chain");
                self.mirror_trace.push((self.now, offset(ee, self.cfg.twin.mirror_offset)));
                let state = t.state.clone();
                let finished = (t.mode == ExecutorMode::Idle).then_some(t.plan_id).flatten();
                self.latest_telemetry = Some(t);
                self.controller_event(ControllerEvent::TelemetryArrived(state));
                if let Some(plan_id) = finished.filter(|id| self.ctrl.phase == Phase::Nominal && *id == self.ctrl.active_plan.plan_id) {
                    // completion is also evident from telemetry, so a lost TASK_DONE cannot stall the run
                    self.controller_event(ControllerEvent::TaskDone { plan_id });
                }
                self.try_start_replan();
            }
            Payload::ObstacleReport(r) => self.controller_event(ControllerEvent::ReportArrived(r)),
            Payload::DeployAck(a) => self.controller_event(ControllerEvent::DeployAcked {
                plan_id: a.plan_id,
                accepted: a.accepted,
            }),
            Payload::TaskDone(d) => self.controller_event(ControllerEvent::TaskDone { plan_id: d.plan_id }),
            Payload::ValidationResult(v) => self.controller_event(ControllerEvent::ValidationArrived {
                plan_id: v.plan_id,
                approved: v.approved,
                operator_id: v.operator_id,
            }),
            _ => {}
        }
    }

    fn controller_event(&mut self, event: ControllerEvent) {
        let from = self.ctrl.phase;
        let (next, actions) = transition(&self.ctrl, &event);
        self.ctrl = next;
        if !matches!(event, ControllerEvent::TelemetryArrived(_)) {
            self.record(
                Site::Digital,
                EventRecord::ControllerStep {
                    trigger: event.name().into(),
                    from,
                    to: self.ctrl.phase,
                    actions: actions.iter().map(|a| action_name(a).to_string()).collect(),
                },
            );
        }
        if let ControllerEvent::ReportArrived(r) = &event {
            if actions.iter().any(|a| matches!(a, ControllerAction::SendStop { .. })) {
                self.record(
                    Site::Digital,
                    EventRecord::AnomalyRaised {
                        report_seq: r.seq,
                        captured_at: r.captured_at,
                        report_ready_at: r.report_ready_at,
                        bbox: r.bbox,
                    },
                );
            }
        }
        if !matches!(self.ctrl.phase, Phase::PendingValidation | Phase::Deploying) {
            self.pending_proposal = None;
        }
        let changed = from != self.ctrl.phase;
        for action in actions {
            self.execute(action);
        }
        if self.ctrl.phase == Phase::Done {
            self.finish(Outcome::Done);
        }
        if changed {
            self.push_snapshot();
        }
    }

    fn execute(&mut self, action: ControllerAction) {
        match action {
            ControllerAction::SendStop { report_seq } => self.send_stop(report_seq),
            ControllerAction::RenderObstacle { bbox } => {
                self.rendered = Some(bbox);
                self.record(Site::Digital, EventRecord::ObstacleRendered { bbox });
                self.push_snapshot();
            }
            ControllerAction::StartReplan {
                report,
                safety_margin,
                epoch,
                attempt,
            } => {
                self.replan = Some(ReplanRequest {
                    report,
                    safety_margin,
                    epoch,
                    attempt,
                });
                self.try_start_replan();
            }
            ControllerAction::RequestValidation { plan } => {
                let (margin, bbox) = (self.current_margin(), self.ctrl.plan_basis);
                let trace: Vec<TracePoint> = ee_trace(&self.cfg.chain, &plan, self.cfg.planner.sample_dt)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(t, p)| TracePoint { t, p })
                    .collect();
                let clearance = bbox.map_or(f64::INFINITY, |b| {
                    plan_clearance(&self.cfg.chain, &plan, &b, fine_dt(&self.cfg.planner)).unwrap_or(f64::NEG_INFINITY)
                });
                let proposal = PlanProposed {
                    plan,
                    ee_trace: trace,
                    clearance,
                    safety_margin: margin,
                    attempt: self.ctrl.rejections + 1,
                };
                self.record(
                    Site::Digital,
                    EventRecord::ValidationRequested {
                        plan_id: proposal.plan.plan_id,
                        clearance,
                        safety_margin: margin,
                    },
                );
                self.pending_proposal = Some(proposal.clone());
                self.send(Link::ConsoleOut, Payload::PlanProposed(proposal));
            }
            ControllerAction::SendDeploy { plan } => self.send_deploy(plan),
            ControllerAction::UpdateMirror { .. } => {}
            ControllerAction::RaiseAlarm { reason } => {
                self.alarm = Some(reason.clone());
                self.record(Site::Digital, EventRecord::Alarm { reason });
                self.finish(Outcome::Alarm);
            }
        }
    }

    fn current_margin(&self) -> f64 {
        self.ctrl.margin_for(self.ctrl.rejections)
    }

    /// Time to wait for the effect of a downlink command to show up on the uplink.
    fn retry_interval(&self) -> SimTime {
        let e = &self.cfg;
        e.links.uplink.delay + e.links.downlink.delay + e.executor.telemetry_period + e.executor.telemetry_period
            + SimTime::from_millis(1)
    }

    fn send_stop(&mut self, report_seq: u64) {
        let seq = self.send(Link::Downlink, Payload::StopCmd(StopCmd { report_seq }));
        self.last_stop = Some((seq, report_seq));
        let at = self.now + self.retry_interval();
        self.schedule(at, Ev::StopRetry(seq));
    }

    fn send_deploy(&mut self, plan: MotionPlan) {
        let id = plan.plan_id;
        self.send(Link::Downlink, Payload::PlanDeploy(PlanDeploy { plan }));
        let at = self.now + self.retry_interval();
        self.schedule(at, Ev::DeployRetry(id));
    }

    /// The latest telemetry shows the robot halted by the latest STOP_CMD.
    fn halt_confirmed(&self) -> bool {
        match (&self.latest_telemetry, self.last_stop) {
            (Some(t), Some((seq, _))) => t.mode == ExecutorMode::Halted && t.stop_applied.is_some_and(|s| s >= seq),
            _ => false,
        }
    }

    fn try_start_replan(&mut self) {
        if self.replan.is_none() || !self.halt_confirmed() {
            return;
        }
        let req = self.replan.take().expect("checked");
        let tel = self.latest_telemetry.clone().expect("halt confirmed");
        let plan = tel
            .plan_id
            .and_then(|id| self.plans.get(&id))
            .unwrap_or(&self.ctrl.active_plan)
            .clone();
        self.record(
            Site::Digital,
            EventRecord::ReplanStarted {
                epoch: req.epoch,
                attempt: req.attempt,
                safety_margin: req.safety_margin,
                from: tel.state.clone(),
                next_waypoint: tel.next_waypoint,
            },
        );
        let params = PlannerParams {
            safety_margin: req.safety_margin,
            ..self.cfg.planner
        };
        let id = PlanId(self.next_plan);
        self.next_plan += 1;
        let result = replan_around_obstacle(&self.cfg.chain, &tel.state, &plan, tel.next_waypoint, &req.report, &params, id)
            .map_err(|e| e.to_string());
        let at = self.now + self.cfg.twin.planning_time;
        self.schedule(at, Ev::ReplanComplete { epoch: req.epoch, result });
    }

    /// Ends the run (if still going) and assembles the log and summary.
    pub fn into_log(mut self) -> RunLog {
        if self.end.is_none() {
            self.finish(Outcome::Timeout);
        }
        let (end, outcome) = self.end.expect("finished above");
        self.now = end;
        self.record(
            Site::Scheduler,
            EventRecord::RunEnded {
                outcome,
                phase: self.ctrl.phase,
            },
        );
        let divergence: Vec<_> = mirror_divergence(&self.mirror_trace, &self.physical_trace)
            .unwrap_or_default()
            .iter()
            .map(quantize_sample)
            .collect();
        let latencies = derive_all_latencies(&self.log);
        let min_clearance = self
            .cfg
            .scene
            .obstacles
            .iter()
            .flat_map(|o| {
                self.physical_trace
                    .iter()
                    .filter(move |(t, _)| *t >= o.spawn_at)
                    .map(move |(_, p)| o.bbox.signed_distance(*p))
            })
            .reduce(f64::min);
        let mut log = RunLog {
            events: self.log,
            latencies: latencies.clone(),
            summary: RunSummary {
                scenario: self.cfg.name.clone(),
                seed: self.cfg.seed,
                outcome,
                final_phase: self.ctrl.phase,
                sim_end_ms: end,
                mae: mae(&divergence).ok().map(Into::into),
                latencies,
                clearance: ClearanceSummary {
                    safety_margin: self.cfg.planner.safety_margin,
                    min_clearance,
                },
                halts: 0,
                deploys: 0,
                divergence_samples: divergence.len(),
            },
            divergence,
        };
        log.summary.halts = log.count_actions("SendStop");
        log.summary.deploys = log.count_actions("SendDeploy");
        log
    }
}

fn offset(p: Position, o: [f64; 3]) -> Position {
    [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
}

/// Runs a scenario headless to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunLog, SimError> {
    Ok(Simulation::new(cfg.clone())?.run_to_end())
}
