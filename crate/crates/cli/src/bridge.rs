//! WebSocket endpoint for the operator console.
//!
//! The scheduler thread publishes frames; each client gets its own thread
//! and queue. Validation decisions come back through a channel that the
//! scheduler drains between events.

use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tungstenite::protocol::frame::coding::CloseCode;
use tungstenite::protocol::CloseFrame;
use tungstenite::{Error as WsError, Message, WebSocket};
use twinloop::console::{parse_console_inbound, ConsoleFrame, ConsoleInbound};
use twinloop::protocol::ValidationResult;

const POLL: Duration = Duration::from_millis(5);

#[derive(Default)]
struct HubState {
    subscribers: Vec<Sender<Arc<str>>>,
    latest_snapshot: Option<Arc<str>>,
}

struct Hub {
    run_id: String,
    state: Mutex<HubState>,
    closing: AtomicBool,
}

impl Hub {
    fn subscribe(&self, tx: Sender<Arc<str>>) {
        let mut s = self.state.lock().expect("hub lock");
        if let Some(snap) = &s.latest_snapshot {
            let _ = tx.send(snap.clone());
        }
        s.subscribers.push(tx);
    }
}

pub struct Bridge {
    addr: SocketAddr,
    hub: Arc<Hub>,
    decisions: Receiver<ValidationResult>,
    acceptor: Option<JoinHandle<()>>,
    clients: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Bridge {
    pub fn bind(addr: &str, run_id: String) -> io::Result<Bridge> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let hub = Arc::new(Hub {
            run_id,
            state: Mutex::new(HubState::default()),
            closing: AtomicBool::new(false),
        });
        let (tx, decisions) = mpsc::channel();
        let clients = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let (hub, clients) = (hub.clone(), clients.clone());
            thread::spawn(move || accept_loop(listener, hub, tx, clients))
        };
        Ok(Bridge {
            addr,
            hub,
            decisions,
            acceptor: Some(acceptor),
            clients,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn subscribers(&self) -> usize {
        self.hub.state.lock().expect("hub lock").subscribers.len()
    }

    pub fn publish(&self, frame: &ConsoleFrame) {
        let text: Arc<str> = frame.to_json().into();
        let mut s = self.hub.state.lock().expect("hub lock");
        if matches!(frame, ConsoleFrame::Snapshot { .. }) {
            s.latest_snapshot = Some(text.clone());
        }
        s.subscribers.retain(|tx| tx.send(text.clone()).is_ok());
    }

    pub fn decisions(&self) -> Vec<ValidationResult> {
        self.decisions.try_iter().collect()
    }

    /// Lets clients drain their queues, closes them, and waits up to `linger`.
    pub fn close(mut self, linger: Duration) {
        self.hub.closing.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let deadline = Instant::now() + linger;
        let handles = std::mem::take(&mut *self.clients.lock().expect("client list"));
        for h in handles {
            while !h.is_finished() && Instant::now() < deadline {
                thread::sleep(POLL);
            }
            if h.is_finished() {
                let _ = h.join();
            }
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    hub: Arc<Hub>,
    decisions: Sender<ValidationResult>,
    clients: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    while !hub.closing.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (hub, decisions) = (hub.clone(), decisions.clone());
                let h = thread::spawn(move || {
                    if let Err(e) = serve(stream, &hub, decisions) {
                        eprintln!("bridge: {peer}: {e}");
                    }
                });
                clients.lock().expect("client list").push(h);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                eprintln!("bridge: accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn idle(e: &WsError) -> bool {
    matches!(e, WsError::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn serve(stream: TcpStream, hub: &Hub, decisions: Sender<ValidationResult>) -> anyhow::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("handshake: {e}"))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let (tx, rx) = mpsc::channel::<Arc<str>>();
    let mut subscribed = false;
    let mut closing_sent = false;
    loop {
        match ws.read() {
            Ok(Message::Text(text)) => match parse_console_inbound(text.as_str()) {
                Ok(ConsoleInbound::Subscribe { run_id }) => {
                    if run_id.as_ref().is_some_and(|r| *r != hub.run_id) {
                        let reason = format!("unknown run id, this bridge serves {}", hub.run_id);
                        close(&mut ws, CloseCode::Policy, reason)?;
                        closing_sent = true;
                    } else if !subscribed {
                        subscribed = true;
                        hub.subscribe(tx.clone());
                    }
                }
                Ok(ConsoleInbound::Validation(v)) => {
                    let _ = decisions.send(v);
                }
                Err(e) => eprintln!("bridge: rejected inbound frame: {e}"),
            },
            Ok(_) => {}
            Err(e) if idle(&e) => {}
            Err(WsError::ConnectionClosed | WsError::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        if closing_sent {
            continue;
        }
        while let Ok(text) = rx.try_recv() {
            ws.send(Message::text(&*text))?;
        }
        if hub.closing.load(Ordering::SeqCst) {
            while let Ok(text) = rx.try_recv() {
                ws.send(Message::text(&*text))?;
            }
            close(&mut ws, CloseCode::Normal, "run over".into())?;
            closing_sent = true;
        }
    }
}

fn close(ws: &mut WebSocket<TcpStream>, code: CloseCode, reason: String) -> anyhow::Result<()> {
    ws.close(Some(CloseFrame {
        code,
        reason: reason.into(),
    }))?;
    let _ = ws.flush();
    Ok(())
}
