//! `twinloop`: run, replay or validate digital-twin scenarios.

mod bridge;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::{Parser, Subcommand};
use twinloop::console::replay_frames;
use twinloop::metrics::{export_run, read_events, EventRecord, Outcome};
use twinloop::scenario::ApproverMode;
use twinloop::{parse_config, ScenarioConfig, SimTime, Simulation};

use bridge::Bridge;

const DEFAULT_OUT: &str = "runs";
const LINGER: Duration = Duration::from_secs(2);

#[derive(Parser)]
#[command(name = "twinloop", version, about = "Edge-assisted digital twin simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and export its log.
    Run {
        config: PathBuf,
        /// Output directory; defaults to $TWINLOOP_OUT or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Serve the operator console here; decisions then come from it.
        #[arg(long, value_name = "ADDR")]
        bridge: Option<String>,
        /// Simulated ms per wall ms. Defaults to 1 with --bridge, unpaced without.
        #[arg(long, value_name = "F")]
        realtime_factor: Option<f64>,
        /// With --bridge, hold the clock until a console subscribes.
        #[arg(long)]
        wait_for_subscriber: bool,
    },
    /// Re-stream a recorded run to the console.
    Replay {
        events: PathBuf,
        #[arg(long, value_name = "ADDR")]
        bridge: String,
        #[arg(long, value_name = "F", default_value_t = 1.0)]
        realtime_factor: f64,
        #[arg(long)]
        wait_for_subscriber: bool,
    },
    /// Parse and check a scenario file.
    Validate { config: PathBuf },
}

enum Failure {
    Config(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn exit_code(outcome: Outcome) -> u8 {
    match outcome {
        Outcome::Done => 0,
        Outcome::Alarm => 2,
        Outcome::Timeout => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            bridge,
            realtime_factor,
            wait_for_subscriber,
        } => run(&config, out, seed, bridge, realtime_factor, wait_for_subscriber).map(exit_code),
        Command::Replay {
            events,
            bridge,
            realtime_factor,
            wait_for_subscriber,
        } => replay(&events, &bridge, realtime_factor, wait_for_subscriber).map(|()| 0),
        Command::Validate { config } => load(&config).map(|cfg| {
            println!("{}: ok ({})", config.display(), cfg.name);
            0
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(4)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    parse_config(path).map_err(|e| Failure::Config(e.to_string()))
}

fn check_factor(f: f64) -> Result<f64, Failure> {
    if f.is_finite() && f > 0.0 {
        Ok(f)
    } else {
        Err(Failure::Config(format!("--realtime-factor must be positive, got {f}")))
    }
}

/// Maps simulated time onto the wall clock.
struct Pacer {
    start: Instant,
    factor: Option<f64>,
}

impl Pacer {
    fn due(&self, t: SimTime) -> Option<Duration> {
        let f = self.factor?;
        let at = self.start + Duration::from_secs_f64(t.as_secs().max(0.0) / f);
        at.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
    }
}

fn wait_for_subscriber(bridge: &Bridge) {
    eprintln!("waiting for a console to subscribe");
    while bridge.subscribers() == 0 {
        thread::sleep(Duration::from_millis(5));
    }
}

fn run(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    bridge_addr: Option<String>,
    realtime_factor: Option<f64>,
    wait: bool,
) -> Result<Outcome, Failure> {
    let mut cfg = load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if bridge_addr.is_some() {
        cfg.approver.mode = ApproverMode::Human;
    } else if cfg.approver.mode == ApproverMode::Human {
        return Err(Failure::Config("approver.mode human needs --bridge".into()));
    }
    let factor = match (realtime_factor, &bridge_addr) {
        (Some(f), _) => Some(check_factor(f)?),
        (None, Some(_)) => Some(1.0),
        (None, None) => None,
    };
    let mut sim = Simulation::new(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    let run_id = sim.run_id();

    let bridge = match &bridge_addr {
        Some(addr) => {
            let b = Bridge::bind(addr, run_id.clone()).with_context(|| format!("binding {addr}"))?;
            println!("bridge: ws://{}", b.local_addr());
            sim.enable_bridge();
            Some(b)
        }
        None => None,
    };
    if let (Some(b), true) = (&bridge, wait) {
        wait_for_subscriber(b);
    }

    let pacer = Pacer {
        start: Instant::now(),
        factor,
    };
    loop {
        if let Some(b) = &bridge {
            for v in b.decisions() {
                sim.submit_validation(v);
            }
            for f in sim.drain_bridge_frames() {
                b.publish(&f);
            }
        }
        let Some(t) = sim.next_event_time() else { break };
        if let Some(d) = pacer.due(t) {
            thread::sleep(d.min(Duration::from_millis(5)));
            continue;
        }
        sim.step();
    }
    if let Some(b) = &bridge {
        for f in sim.drain_bridge_frames() {
            b.publish(&f);
        }
    }

    let log = sim.into_log();
    let root = out
        .or_else(|| std::env::var_os("TWINLOOP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let files = export_run(&log, &root.join(&run_id)).with_context(|| format!("writing {}", root.display()))?;
    let s = &log.summary;
    println!(
        "{run_id}: {} at {}, {} halts, {} deploys",
        format!("{:?}", s.outcome).to_lowercase(),
        s.sim_end_ms,
        s.halts,
        s.deploys
    );
    println!("wrote {}", files.dir.display());
    if let Some(b) = bridge {
        b.close(LINGER);
    }
    Ok(s.outcome)
}

fn replay(path: &Path, addr: &str, factor: f64, wait: bool) -> Result<(), Failure> {
    let factor = check_factor(factor)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let events = read_events(&text).with_context(|| format!("parsing {}", path.display()))?;
    let frames = replay_frames(&events).with_context(|| format!("replaying {}", path.display()))?;
    let run_id = match events.first().map(|e| &e.event) {
        Some(EventRecord::RunStarted { config }) => format!("{}-seed{}", config.name, config.seed),
        _ => unreachable!("replay_frames checks the header"),
    };
    let bridge = Bridge::bind(addr, run_id).with_context(|| format!("binding {addr}"))?;
    println!("bridge: ws://{}", bridge.local_addr());
    if wait {
        wait_for_subscriber(&bridge);
    }
    let pacer = Pacer {
        start: Instant::now(),
        factor: Some(factor),
    };
    for (t, frame) in &frames {
        while let Some(d) = pacer.due(*t) {
            thread::sleep(d.min(Duration::from_millis(5)));
        }
        for v in bridge.decisions() {
            eprintln!("replay: ignoring decision on {} from {}", v.plan_id, v.operator_id);
        }
        bridge.publish(frame);
    }
    println!("replayed {} frames", frames.len());
    bridge.close(LINGER);
    Ok(())
}
