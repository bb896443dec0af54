use std::path::Path;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use kinestat_core::protocol::{Role, ServerMessage};
use kinestat_core::session::{load_session_config, SessionConfig};
use kinestat_server::{Server, ServerError};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

const WAIT: Duration = Duration::from_secs(5);

fn config() -> SessionConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/session_fivebar.toml");
    load_session_config(path).unwrap()
}

async fn start() -> Server {
    Server::start(config(), "127.0.0.1:0").await.unwrap()
}

async fn connect(server: &Server) -> Client {
    let url = format!("ws://{}", server.local_addr());
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn send(c: &mut Client, text: &str) {
    c.send(Message::Text(text.to_string())).await.unwrap();
}

/// Next server message, or `None` once the connection closes.
async fn recv(c: &mut Client) -> Option<ServerMessage> {
    loop {
        match tokio::time::timeout(WAIT, c.next()).await.expect("server went quiet") {
            Some(Ok(Message::Text(t))) => return Some(serde_json::from_str(&t).unwrap()),
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return None,
            Some(Ok(_)) => continue,
        }
    }
}

async fn recv_until<T>(c: &mut Client, mut pick: impl FnMut(&ServerMessage) -> Option<T>) -> T {
    let wait = async {
        loop {
            let m = recv(c).await.expect("connection closed");
            if let Some(v) = pick(&m) {
                return v;
            }
        }
    };
    tokio::time::timeout(WAIT, wait).await.expect("expected message never arrived")
}

async fn hello(c: &mut Client) -> (Role, u32) {
    send(c, r#"{"type":"hello","version":1}"#).await;
    match recv(c).await {
        Some(ServerMessage::Welcome { version, role, session }) => {
            assert_eq!(version, 1);
            (role, session.force_decimation)
        }
        other => panic!("expected welcome, got {other:?}"),
    }
}

async fn closes(c: &mut Client) -> bool {
    loop {
        match recv(c).await {
            None => return true,
            Some(ServerMessage::Snapshot(_) | ServerMessage::Force { .. } | ServerMessage::Analysis(_)) => continue,
            Some(_) => return false,
        }
    }
}

#[tokio::test]
async fn driver_and_observer_share_the_session() {
    let server = start().await;
    let mut driver = connect(&server).await;
    let mut observer = connect(&server).await;
    assert_eq!(hello(&mut driver).await, (Role::Driver, 4));
    assert_eq!(hello(&mut observer).await.0, Role::Observer);

    send(&mut driver, r#"{"type":"pointer","seq":1,"t":0,"x":0.0,"y":0.5}"#).await;
    let target = recv_until(&mut observer, |m| match m {
        ServerMessage::Snapshot(s) if (s.target.y - 6.5).abs() < 1e-12 => Some(s.target),
        _ => None,
    })
    .await;
    assert!((target.x - 3.0).abs() < 1e-12);

    // Force and analysis streams reach observers too.
    let tick = recv_until(&mut observer, |m| match m {
        ServerMessage::Force { tick, .. } => Some(*tick),
        _ => None,
    })
    .await;
    assert_eq!(tick % 4, 0);
    let report = recv_until(&mut observer, |m| match m {
        ServerMessage::Analysis(r) => Some(r.clone()),
        _ => None,
    })
    .await;
    assert!(report.max_rel_err < 1e-9 && report.ticks > 0);

    send(&mut observer, r#"{"type":"pointer","seq":1,"t":0,"x":1.0,"y":0.0}"#).await;
    let code = recv_until(&mut observer, |m| match m {
        ServerMessage::Error { code, .. } => Some(code.clone()),
        _ => None,
    })
    .await;
    assert_eq!(code, "not_driver");

    send(&mut driver, r#"{"type":"set_mode","s1":"+","s2":"-"}"#).await;
    recv_until(&mut observer, |m| match m {
        ServerMessage::Snapshot(s) if s.mode.to_string() == "+-" => Some(()),
        _ => None,
    })
    .await;
    server.shutdown().await;
}

#[tokio::test]
async fn driver_slot_is_handed_over() {
    let server = start().await;
    let mut first = connect(&server).await;
    let mut second = connect(&server).await;
    assert_eq!(hello(&mut first).await.0, Role::Driver);
    assert_eq!(hello(&mut second).await.0, Role::Observer);
    first.close(None).await.unwrap();
    drop(first);
    tokio::time::sleep(Duration::from_millis(100)).await;
    // Existing observers stay observers; the next new client drives.
    let mut third = connect(&server).await;
    assert_eq!(hello(&mut third).await.0, Role::Driver);
    send(&mut third, r#"{"type":"pointer","seq":1,"t":0,"x":0.0,"y":0.0}"#).await;
    send(&mut third, r#"{"type":"pointer","seq":1,"t":1,"x":0.0,"y":0.0}"#).await;
    let code = recv_until(&mut third, |m| match m {
        ServerMessage::Error { code, .. } => Some(code.clone()),
        _ => None,
    })
    .await;
    assert_eq!(code, "stale_sequence");
    server.shutdown().await;
}

#[tokio::test]
async fn version_mismatch_is_rejected() {
    let server = start().await;
    let mut c = connect(&server).await;
    send(&mut c, r#"{"type":"hello","version":2}"#).await;
    assert!(matches!(recv(&mut c).await, Some(ServerMessage::Reject { .. })));
    assert!(recv(&mut c).await.is_none());
    // The rejected client did not take the driver slot.
    let mut d = connect(&server).await;
    assert_eq!(hello(&mut d).await.0, Role::Driver);
    server.shutdown().await;
}

#[tokio::test]
async fn malformed_frames_close_the_connection() {
    let server = start().await;
    let mut c = connect(&server).await;
    send(&mut c, "{not json").await;
    assert!(matches!(recv(&mut c).await, Some(ServerMessage::Error { code, .. }) if code == "malformed"));
    assert!(recv(&mut c).await.is_none());

    let mut d = connect(&server).await;
    hello(&mut d).await;
    send(&mut d, r#"{"type":"pointer","seq":1}"#).await;
    let code = recv_until(&mut d, |m| match m {
        ServerMessage::Error { code, .. } => Some(code.clone()),
        _ => None,
    })
    .await;
    assert_eq!(code, "malformed");
    assert!(closes(&mut d).await);
    server.shutdown().await;
}

#[tokio::test]
async fn invalid_params_are_reported_and_session_continues() {
    let server = start().await;
    let mut c = connect(&server).await;
    hello(&mut c).await;
    send(&mut c, r#"{"type":"set_params","view_zoom":-1}"#).await;
    let code = recv_until(&mut c, |m| match m {
        ServerMessage::Error { code, .. } => Some(code.clone()),
        _ => None,
    })
    .await;
    assert_eq!(code, "invalid_params");
    send(&mut c, r#"{"type":"set_params","sensitivity":"fine"}"#).await;
    recv_until(&mut c, |m| matches!(m, ServerMessage::Snapshot(_)).then_some(())).await;
    server.shutdown().await;
}

#[tokio::test]
async fn busy_endpoint_is_reported() {
    let server = start().await;
    let taken = server.local_addr().to_string();
    match Server::start(config(), &taken).await {
        Err(ServerError::EndpointBusy(e)) => assert_eq!(e, taken),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("second bind succeeded"),
    }
    server.shutdown().await;
}
