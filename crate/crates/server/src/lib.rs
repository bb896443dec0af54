//! Live interaction service. A haptic thread ticks the session at
//! `haptic_hz`; async tasks publish snapshots at `broadcast_hz` and
//! numerical health reports at `analysis_hz` to every WebSocket client.
//!
//! The first client to say hello drives the pointer; later clients observe.
//! When the driver leaves, the next new client takes over.

mod haptic;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use kinestat_core::conditioning::condition_number_of;
use kinestat_core::fivebar::{velocity_matrices, WorkingMode};
use kinestat_core::model::FiveBarModel;
use kinestat_core::protocol::{
    force_decimation, AnalysisReport, ClientMessage, ParamsPatch, Role, ServerMessage,
    SessionInfo, StateSnapshot, PROTOCOL_VERSION,
};
use kinestat_core::session::{Session, SessionConfig};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, oneshot, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use haptic::{Command, HapticLoop, TickStats};

/// How long a new connection may take to send its hello.
pub const HELLO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("endpoint {0} is busy")]
    EndpointBusy(String),
    #[error("invalid endpoint `{0}`")]
    InvalidEndpoint(String),
    #[error("cannot bind {endpoint}: {source}")]
    Bind {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Session(#[from] kinestat_core::Error),
}

/// Accepts `host:port`, optionally prefixed with `ws://`.
pub fn parse_endpoint(endpoint: &str) -> Result<SocketAddr, ServerError> {
    let bare = endpoint.strip_prefix("ws://").unwrap_or(endpoint);
    let bare = bare.strip_suffix('/').unwrap_or(bare);
    let bare = bare.replacen("localhost", "127.0.0.1", 1);
    bare.parse()
        .map_err(|_| ServerError::InvalidEndpoint(endpoint.to_string()))
}

struct Shared {
    model: FiveBarModel,
    config: SessionConfig,
    decimation: u32,
    commands: Mutex<mpsc::Sender<Command>>,
    snapshots: watch::Receiver<Option<Arc<StateSnapshot>>>,
    outbound: broadcast::Sender<Arc<str>>,
    mode: Mutex<WorkingMode>,
    driver: Mutex<Option<u64>>,
    next_id: Mutex<u64>,
    stats: Arc<Mutex<TickStats>>,
}

impl Shared {
    fn command(&self, cmd: Command) {
        let _ = self.commands.lock().unwrap().send(cmd);
    }

    async fn set_params(&self, patch: ParamsPatch) -> Result<WorkingMode, String> {
        let (tx, rx) = oneshot::channel();
        self.command(Command::Params(patch, tx));
        let mode = rx.await.map_err(|_| "session stopped".to_string())??;
        *self.mode.lock().unwrap() = mode;
        Ok(mode)
    }

    fn info(&self) -> SessionInfo {
        let rates = &self.config.rates;
        SessionInfo {
            model_name: self.model.name.clone(),
            model_hash: self.model.model_hash(),
            mode: *self.mode.lock().unwrap(),
            haptic_hz: rates.haptic_hz,
            analysis_hz: rates.analysis_hz,
            broadcast_hz: rates.broadcast_hz,
            force_decimation: self.decimation,
        }
    }

    fn claim_driver(&self, id: u64) -> Role {
        let mut d = self.driver.lock().unwrap();
        if d.is_none() {
            *d = Some(id);
            Role::Driver
        } else {
            Role::Observer
        }
    }

    fn release_driver(&self, id: u64) {
        let mut d = self.driver.lock().unwrap();
        if *d == Some(id) {
            *d = None;
            drop(d);
            self.command(Command::ReleasePointer);
        }
    }
}

/// A running service. Dropping it without [`Server::shutdown`] leaves the
/// haptic thread running until the process exits.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    tasks: Vec<JoinHandle<()>>,
    haptic: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    /// Binds `endpoint` and starts all three loops. Must be called inside a
    /// Tokio runtime.
    pub async fn start(config: SessionConfig, endpoint: &str) -> Result<Server, ServerError> {
        let addr = parse_endpoint(endpoint)?;
        let listener = TcpListener::bind(addr).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => ServerError::EndpointBusy(endpoint.to_string()),
            _ => ServerError::Bind {
                endpoint: endpoint.to_string(),
                source: e,
            },
        })?;
        let addr = listener.local_addr().map_err(|e| ServerError::Bind {
            endpoint: endpoint.to_string(),
            source: e,
        })?;

        let session = Session::new(config.clone())?;
        let decimation = force_decimation(config.rates.haptic_hz);
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let (snap_tx, snap_rx) = watch::channel(None);
        let (out_tx, _) = broadcast::channel(1024);
        let stats = Arc::new(Mutex::new(TickStats::default()));
        let stop = Arc::new(AtomicBool::new(false));

        let haptic = HapticLoop {
            session,
            commands: cmd_rx,
            snapshots: snap_tx,
            outbound: out_tx.clone(),
            stats: stats.clone(),
            stop: stop.clone(),
            decimation,
        };
        let haptic = std::thread::Builder::new()
            .name("haptic".into())
            .spawn(move || haptic.run())
            .expect("spawn haptic thread");

        let shared = Arc::new(Shared {
            model: config.model.clone(),
            mode: Mutex::new(config.params.mode),
            config,
            decimation,
            commands: Mutex::new(cmd_tx),
            snapshots: snap_rx,
            outbound: out_tx,
            driver: Mutex::new(None),
            next_id: Mutex::new(0),
            stats,
        });
        let tasks = vec![
            tokio::spawn(accept_loop(listener, shared.clone())),
            tokio::spawn(broadcast_loop(shared.clone())),
            tokio::spawn(analysis_loop(shared)),
        ];
        Ok(Server {
            addr,
            stop,
            tasks,
            haptic: Some(haptic),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs until `signal` resolves, then shuts down.
    pub async fn run_until(self, signal: impl std::future::Future<Output = ()>) {
        signal.await;
        self.shutdown().await;
    }

    pub async fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in &self.tasks {
            t.abort();
        }
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
        if let Some(h) = self.haptic.take() {
            let _ = tokio::task::spawn_blocking(move || h.join()).await;
        }
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            continue;
        };
        let id = {
            let mut n = shared.next_id.lock().unwrap();
            *n += 1;
            *n
        };
        tokio::spawn(connection(stream, id, shared.clone()));
    }
}

fn period(hz: f64) -> Duration {
    Duration::from_secs_f64(1.0 / hz)
}

async fn broadcast_loop(shared: Arc<Shared>) {
    let mut every = tokio::time::interval(period(shared.config.rates.broadcast_hz));
    every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut last = None;
    loop {
        every.tick().await;
        let snap = shared.snapshots.borrow().clone();
        if let Some(s) = snap {
            if last != Some(s.tick) {
                last = Some(s.tick);
                let msg = ServerMessage::Snapshot((*s).clone()).to_json();
                let _ = shared.outbound.send(msg.into());
            }
        }
    }
}

/// SVD cross-check of the latest posture plus tick-time statistics.
fn analysis_report(shared: &Shared, snap: &StateSnapshot, max_rel_err: &mut f64) -> AnalysisReport {
    let (mut ka, mut kb) = (f64::INFINITY, f64::INFINITY);
    if let Some(p) = &snap.posture {
        let m = velocity_matrices(&shared.model, p);
        for (svd, closed, matrix) in [
            (&mut ka, snap.indices.kappa_a, &m.a),
            (&mut kb, snap.indices.kappa_b, &m.b),
        ] {
            if let Ok(r) = condition_number_of(matrix) {
                *svd = r.kappa;
                if r.kappa.is_finite() && r.kappa < 1e12 {
                    *max_rel_err = max_rel_err.max((closed - r.kappa).abs() / r.kappa);
                }
            }
        }
    }
    let stats = shared.stats.lock().unwrap();
    let (p50, p99) = stats.percentiles();
    AnalysisReport {
        tick: snap.tick,
        kappa_a_svd: ka,
        kappa_b_svd: kb,
        max_rel_err: *max_rel_err,
        ticks: stats.ticks,
        tick_p50_us: p50,
        tick_p99_us: p99,
        tick_max_us: stats.max_us,
    }
}

async fn analysis_loop(shared: Arc<Shared>) {
    let mut every = tokio::time::interval(period(shared.config.rates.analysis_hz));
    every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut max_rel_err = 0.0;
    loop {
        every.tick().await;
        let snap = shared.snapshots.borrow().clone();
        if let Some(s) = snap {
            let report = analysis_report(&shared, &s, &mut max_rel_err);
            let _ = shared.outbound.send(ServerMessage::Analysis(report).to_json().into());
        }
    }
}

enum Flow {
    Continue,
    Close,
}

type Ws = tokio_tungstenite::WebSocketStream<TcpStream>;

async fn send(ws: &mut futures_util::stream::SplitSink<Ws, Message>, msg: &ServerMessage) -> bool {
    ws.send(Message::Text(msg.to_json())).await.is_ok()
}

async fn connection(stream: TcpStream, id: u64, shared: Arc<Shared>) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();

    let hello = loop {
        match tokio::time::timeout(HELLO_TIMEOUT, source.next()).await {
            Ok(Some(Ok(Message::Text(t)))) => break Some(t),
            Ok(Some(Ok(Message::Ping(_) | Message::Pong(_)))) => continue,
            Ok(Some(Ok(Message::Binary(_)))) => {
                let _ = send(&mut sink, &ServerMessage::error("malformed", "binary frames are not supported")).await;
                break None;
            }
            Err(_) => {
                let _ = send(&mut sink, &ServerMessage::error("timeout", "no hello received")).await;
                break None;
            }
            _ => break None,
        }
    };
    let Some(hello) = hello else {
        let _ = sink.close().await;
        return;
    };
    let patch = match serde_json::from_str::<ClientMessage>(&hello) {
        Ok(ClientMessage::Hello { version, session_config }) if version == PROTOCOL_VERSION => session_config,
        Ok(ClientMessage::Hello { version, .. }) => {
            let reason = format!("protocol version {version} is not supported; server speaks {PROTOCOL_VERSION}");
            let _ = send(&mut sink, &ServerMessage::Reject { reason }).await;
            let _ = sink.close().await;
            return;
        }
        Ok(other) => {
            let reason = format!("expected hello, got {}", other.kind());
            let _ = send(&mut sink, &ServerMessage::error("expected_hello", reason)).await;
            let _ = sink.close().await;
            return;
        }
        Err(e) => {
            let _ = send(&mut sink, &ServerMessage::error("malformed", e.to_string())).await;
            let _ = sink.close().await;
            return;
        }
    };

    let role = shared.claim_driver(id);
    if role == Role::Driver {
        if let Some(patch) = patch {
            if let Err(reason) = shared.set_params(patch).await {
                let _ = send(&mut sink, &ServerMessage::error("invalid_params", reason)).await;
                let _ = sink.close().await;
                shared.release_driver(id);
                return;
            }
        }
    }
    // Subscribe before the welcome so no update after it is missed.
    let mut updates = shared.outbound.subscribe();
    let welcome = ServerMessage::Welcome {
        version: PROTOCOL_VERSION,
        role,
        session: shared.info(),
    };
    if send(&mut sink, &welcome).await {
        let mut last_seq = None;
        loop {
            tokio::select! {
                update = updates.recv() => match update {
                    Ok(text) => {
                        if sink.send(Message::Text(text.to_string())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                frame = source.next() => {
                    let flow = match frame {
                        Some(Ok(Message::Text(t))) => {
                            client_message(&t, role, &mut last_seq, &shared, &mut sink).await
                        }
                        Some(Ok(Message::Binary(_))) => {
                            let _ = send(&mut sink, &ServerMessage::error("malformed", "binary frames are not supported")).await;
                            Flow::Close
                        }
                        Some(Ok(Message::Ping(_) | Message::Pong(_) | Message::Frame(_))) => Flow::Continue,
                        _ => Flow::Close,
                    };
                    if let Flow::Close = flow {
                        break;
                    }
                }
            }
        }
    }
    let _ = sink.close().await;
    shared.release_driver(id);
}

async fn client_message(
    text: &str,
    role: Role,
    last_seq: &mut Option<u64>,
    shared: &Shared,
    sink: &mut futures_util::stream::SplitSink<Ws, Message>,
) -> Flow {
    let msg = match serde_json::from_str::<ClientMessage>(text) {
        Ok(m) => m,
        Err(e) => {
            let _ = send(sink, &ServerMessage::error("malformed", e.to_string())).await;
            return Flow::Close;
        }
    };
    let reply = match (&msg, role) {
        (ClientMessage::Hello { .. }, _) => Some(ServerMessage::error("unexpected_hello", "hello was already received")),
        (_, Role::Observer) => Some(ServerMessage::error(
            "not_driver",
            format!("observers cannot send {}", msg.kind()),
        )),
        (ClientMessage::Pointer { .. }, Role::Driver) => {
            let p = msg.as_pointer().expect("pointer");
            if last_seq.is_some_and(|s| p.seq <= s) {
                Some(ServerMessage::error(
                    "stale_sequence",
                    format!("pointer sequence {} does not follow {}", p.seq, last_seq.unwrap_or(0)),
                ))
            } else {
                *last_seq = Some(p.seq);
                shared.command(Command::Pointer(p));
                None
            }
        }
        (ClientMessage::SetMode { s1, s2 }, Role::Driver) => {
            let patch = ParamsPatch {
                mode: Some(WorkingMode::new(*s1, *s2)),
                ..ParamsPatch::default()
            };
            shared.set_params(patch).await.err().map(|r| ServerMessage::error("invalid_params", r))
        }
        (ClientMessage::SetParams(patch), Role::Driver) => shared
            .set_params(patch.clone())
            .await
            .err()
            .map(|r| ServerMessage::error("invalid_params", r)),
    };
    match reply {
        Some(m) if !send(sink, &m).await => Flow::Close,
        _ => Flow::Continue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_parse() {
        assert_eq!(parse_endpoint("127.0.0.1:9000").unwrap().port(), 9000);
        assert_eq!(parse_endpoint("ws://127.0.0.1:9001/").unwrap().port(), 9001);
        assert_eq!(parse_endpoint("localhost:9002").unwrap().port(), 9002);
        assert!(matches!(parse_endpoint("nowhere"), Err(ServerError::InvalidEndpoint(_))));
    }
}
