//! Run log, Table-style metrics (per-axis MAE, latency decomposition) and
//! the on-disk artifacts of a run.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerAction, DivergenceSample, Phase};
use crate::detect::ObstacleReport;
use crate::kinematics::{JointState, Position};
use crate::planning::{MotionPlan, PlanId};
use crate::protocol::{ExecutorMode, Message, MessageKind, Payload};
use crate::scenario::ScenarioConfig;
use crate::scene::Aabb;
use crate::time::SimTime;

pub const DIVERGENCE_HEADER: &str = "t,px,py,pz,dx,dy,dz,|ex|,|ey|,|ez|";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Scheduler,
    Physical,
    Edge,
    Digital,
    Console,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Uplink,
    Downlink,
    ConsoleOut,
    ConsoleIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Done,
    Alarm,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    /// Carries the full configuration so a log can be replayed on its own.
    RunStarted {
        config: Box<ScenarioConfig>,
    },
    PlanLoaded {
        plan: MotionPlan,
    },
    ObstacleSpawned {
        #[serde(rename = "box")]
        bbox: Aabb,
    },
    FrameCaptured {
        seq: u64,
        points: usize,
        bytes: usize,
        processed: bool,
    },
    ReportReady {
        report: ObstacleReport,
        bytes: usize,
    },
    MessageSent {
        link: Link,
        message_kind: MessageKind,
        seq: u64,
        bytes: usize,
    },
    MessageDropped {
        link: Link,
        message_kind: MessageKind,
        seq: u64,
    },
    MessageDelivered {
        link: Link,
        message: Message,
    },
    ControllerStep {
        trigger: String,
        from: Phase,
        to: Phase,
        actions: Vec<String>,
    },
    AnomalyRaised {
        report_seq: u64,
        captured_at: SimTime,
        report_ready_at: SimTime,
        #[serde(rename = "box")]
        bbox: Aabb,
    },
    ObstacleRendered {
        #[serde(rename = "box")]
        bbox: Aabb,
    },
    ReplanStarted {
        epoch: u64,
        attempt: u32,
        safety_margin: f64,
        from: JointState,
        next_waypoint: usize,
    },
    ReplanFinished {
        epoch: u64,
        plan_id: PlanId,
        clearance: f64,
    },
    ReplanFailed {
        epoch: u64,
        reason: String,
    },
    ValidationRequested {
        plan_id: PlanId,
        clearance: f64,
        safety_margin: f64,
    },
    ValidationDecided {
        plan_id: PlanId,
        approved: bool,
        operator_id: String,
    },
    StopApplied {
        stop_seq: u64,
        q: Vec<f64>,
    },
    DeployAccepted {
        plan_id: PlanId,
        motion_at: SimTime,
    },
    DeployRejected {
        plan_id: PlanId,
        reason: String,
    },
    MotionStarted {
        plan_id: PlanId,
    },
    ObjectGrasped {
        center: Position,
    },
    ObjectReleased {
        center: Position,
    },
    TelemetrySampled {
        state: JointState,
        ee: Position,
        mode: ExecutorMode,
        plan_id: PlanId,
    },
    TaskCompleted {
        plan_id: PlanId,
        object_center: Position,
    },
    Alarm {
        reason: String,
    },
    RunEnded {
        outcome: Outcome,
        phase: Phase,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub t: SimTime,
    pub site: Site,
    pub event: EventRecord,
}

pub fn action_name(a: &ControllerAction) -> &'static str {
    match a {
        ControllerAction::SendStop { .. } => "SendStop",
        ControllerAction::StartReplan { .. } => "StartReplan",
        ControllerAction::RequestValidation { .. } => "RequestValidation",
        ControllerAction::SendDeploy { .. } => "SendDeploy",
        ControllerAction::UpdateMirror { .. } => "UpdateMirror",
        ControllerAction::RenderObstacle { .. } => "RenderObstacle",
        ControllerAction::RaiseAlarm { .. } => "RaiseAlarm",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub edge_compute_ms: f64,
    pub communication_ms: f64,
    pub actuation_ms: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("series is empty")]
    EmptySeries,
    #[error("incomplete anomaly episode: missing {0}")]
    IncompleteEpisode(&'static str),
}

/// Per-axis mean absolute error.
pub fn mae(samples: &[DivergenceSample]) -> Result<[f64; 3], MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let mut sum = [0.0; 3];
    for s in samples {
        for (acc, e) in sum.iter_mut().zip(s.abs_error) {
            *acc += e.abs();
        }
    }
    Ok(sum.map(|v| v / samples.len() as f64))
}

fn latency_from(events: &[LoggedEvent], start: usize) -> Result<LatencyRecord, MetricsError> {
    let (arrival, captured, ready) = match &events[start] {
        LoggedEvent {
            t,
            event: EventRecord::AnomalyRaised {
                captured_at,
                report_ready_at,
                ..
            },
            ..
        } => (*t, *captured_at, *report_ready_at),
        _ => unreachable!("caller passes an anomaly index"),
    };
    let rest = &events[start + 1..];
    let accepted = rest
        .iter()
        .find_map(|e| match &e.event {
            EventRecord::DeployAccepted { plan_id, .. } => Some((e.t, *plan_id)),
            _ => None,
        })
        .ok_or(MetricsError::IncompleteEpisode("deploy acceptance"))?;
    let deploy_arrival = rest
        .iter()
        .rev()
        .find(|e| {
            e.t <= accepted.0
                && matches!(&e.event, EventRecord::MessageDelivered { message, .. }
                    if matches!(&message.payload, Payload::PlanDeploy(d) if d.plan.plan_id == accepted.1))
        })
        .map(|e| e.t)
        .ok_or(MetricsError::IncompleteEpisode("PLAN_DEPLOY arrival"))?;
    let motion = rest
        .iter()
        .find(|e| matches!(&e.event, EventRecord::MotionStarted { plan_id } if *plan_id == accepted.1))
        .map(|e| e.t)
        .ok_or(MetricsError::IncompleteEpisode("MOTION_STARTED"))?;
    Ok(LatencyRecord {
        edge_compute_ms: (ready - captured).as_ms(),
        communication_ms: (arrival - ready).as_ms(),
        actuation_ms: (motion - deploy_arrival).as_ms(),
    })
}

/// Latency decomposition of the first anomaly episode in the log.
pub fn derive_latencies(events: &[LoggedEvent]) -> Result<LatencyRecord, MetricsError> {
    let start = events
        .iter()
        .position(|e| matches!(e.event, EventRecord::AnomalyRaised { .. }))
        .ok_or(MetricsError::IncompleteEpisode("anomaly report"))?;
    latency_from(events, start)
}

/// One record per anomaly episode that ran to a started motion.
pub fn derive_all_latencies(events: &[LoggedEvent]) -> Vec<LatencyRecord> {
    events
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.event, EventRecord::AnomalyRaised { .. }))
        .filter_map(|(i, _)| latency_from(events, i).ok())
        .collect()
}

/// Rounds to the 6 decimals written to divergence.csv.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

pub fn quantize_sample(s: &DivergenceSample) -> DivergenceSample {
    DivergenceSample {
        t: s.t,
        physical: s.physical.map(quantize),
        digital: s.digital.map(quantize),
        abs_error: s.abs_error.map(quantize),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisTriple {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for AxisTriple {
    fn from(v: [f64; 3]) -> Self {
        AxisTriple { x: v[0], y: v[1], z: v[2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearanceSummary {
    pub safety_margin: f64,
    /// Smallest distance from a physical telemetry sample to a spawned obstacle.
    pub min_clearance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub final_phase: Phase,
    pub sim_end_ms: SimTime,
    pub mae: Option<AxisTriple>,
    pub latencies: Vec<LatencyRecord>,
    pub clearance: ClearanceSummary,
    pub halts: usize,
    pub deploys: usize,
    pub divergence_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub events: Vec<LoggedEvent>,
    /// Quantized to the CSV precision.
    pub divergence: Vec<DivergenceSample>,
    pub latencies: Vec<LatencyRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn count_actions(&self, name: &str) -> usize {
        self.events
            .iter()
            .map(|e| match &e.event {
                EventRecord::ControllerStep { actions, .. } => actions.iter().filter(|a| *a == name).count(),
                _ => 0,
            })
            .sum()
    }
}

pub fn write_events<W: Write>(events: &[LoggedEvent], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events(text: &str) -> Result<Vec<LoggedEvent>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

pub fn divergence_csv(samples: &[DivergenceSample]) -> String {
    let mut out = String::from(DIVERGENCE_HEADER);
    out.push('\n');
    for s in samples {
        let p = s.physical;
        let d = s.digital;
        let e = s.abs_error;
        out.push_str(&format!(
            "{:.2},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.t.as_ms(),
            p[0],
            p[1],
            p[2],
            d[0],
            d[1],
            d[2],
            e[0],
            e[1],
            e[2]
        ));
    }
    out
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("missing or wrong header")]
    Header,
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
}

pub fn parse_divergence_csv(text: &str) -> Result<Vec<DivergenceSample>, CsvError> {
    let mut lines = text.lines();
    if lines.next() != Some(DIVERGENCE_HEADER) {
        return Err(CsvError::Header);
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let row = |message: String| CsvError::Row { line: i + 2, message };
            let v: Vec<f64> = l
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|e| row(format!("{c:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            if v.len() != 10 {
                return Err(row(format!("expected 10 columns, found {}", v.len())));
            }
            Ok(DivergenceSample {
                t: SimTime::from_ms(v[0]),
                physical: [v[1], v[2], v[3]],
                digital: [v[4], v[5], v[6]],
                abs_error: [v[7], v[8], v[9]],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub events: PathBuf,
    pub divergence: PathBuf,
    pub summary: PathBuf,
}

/// Writes events.jsonl, divergence.csv and summary.json into `dir`.
pub fn export_run(log: &RunLog, dir: &Path) -> io::Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let files = RunFiles {
        dir: dir.to_path_buf(),
        events: dir.join("events.jsonl"),
        divergence: dir.join("divergence.csv"),
        summary: dir.join("summary.json"),
    };
    let mut w = BufWriter::new(fs::File::create(&files.events)?);
    write_events(&log.events, &mut w)?;
    w.flush()?;
    fs::write(&files.divergence, divergence_csv(&log.divergence))?;
    let mut summary = serde_json::to_string_pretty(&log.summary)?;
    summary.push('\n');
    fs::write(&files.summary, summary)?;
    Ok(files)
}
