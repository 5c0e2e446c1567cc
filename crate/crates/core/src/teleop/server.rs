//! The WebSocket endpoint: one client drives one [`TeleopSession`].

use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use super::{ClientMessage, Clock, ServerMessage, SessionSummary, TeleopSession};
use crate::error::TeleopError;

pub struct TeleopServer {
    listener: TcpListener,
}

impl TeleopServer {
    pub fn bind(addr: impl ToSocketAddrs + std::fmt::Display) -> Result<Self, TeleopError> {
        let shown = addr.to_string();
        let listener = TcpListener::bind(addr).map_err(|source| TeleopError::Bind { addr: shown, source })?;
        Ok(TeleopServer { listener })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Accepts one client and runs the session until `end_session` or
    /// disconnect, then saves the dataset.
    pub fn serve_session(&self, mut session: TeleopSession) -> Result<SessionSummary, TeleopError> {
        let (stream, _) = self.listener.accept().map_err(|e| TeleopError::Connection(e.to_string()))?;
        stream.set_nodelay(true).ok();
        let mut ws = tungstenite::accept(stream).map_err(|e| TeleopError::Connection(e.to_string()))?;
        // a dropped connection ends the session but still keeps the data
        let _ = run_connection(&mut ws, &mut session);
        let summary = session.finish()?;
        if let Ok(text) = serde_json::to_string(&session.status()) {
            let _ = ws.send(Message::text(text));
        }
        let _ = ws.close(None);
        let _ = ws.flush();
        Ok(summary)
    }
}

fn send_json(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> tungstenite::Result<()> {
    ws.send(Message::text(serde_json::to_string(msg).expect("message serializes")))
}

fn run_connection(ws: &mut WebSocket<TcpStream>, session: &mut TeleopSession) -> tungstenite::Result<()> {
    let period = Duration::from_secs_f64(session.ctrl.dt() / session.cfg.pacing.max(1e-6));
    let wall = session.cfg.clock == Clock::Wall;
    let status_every = session.cfg.status_every.max(1) as u64;
    ws.send(Message::binary(session.frame()))?;
    send_json(ws, &session.status())?;
    let mut deadline = Instant::now() + period;
    loop {
        if wall {
            let now = Instant::now();
            if now >= deadline {
                if let Err(e) = session.tick() {
                    send_json(ws, &ServerMessage::Error { message: e.to_string() })?;
                }
                ws.send(Message::binary(session.frame()))?;
                if session.steps % status_every == 0 {
                    send_json(ws, &session.status())?;
                }
                if session.demo_complete() {
                    return Ok(());
                }
                deadline += period;
                continue;
            }
            ws.get_ref().set_read_timeout(Some(deadline - now)).ok();
        }
        let msg = match ws.read() {
            Ok(m) => m,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                continue
            }
            Err(e) => return Err(e),
        };
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => return Ok(()),
            Message::Binary(_) => {
                send_json(ws, &ServerMessage::Error { message: "binary client messages are not supported".into() })?;
                continue;
            }
            _ => continue,
        };
        let parsed: ClientMessage = match serde_json::from_str(text.as_str()) {
            Ok(m) => m,
            Err(e) => {
                send_json(ws, &ServerMessage::Error { message: format!("malformed message: {e}") })?;
                continue;
            }
        };
        let end = parsed == ClientMessage::EndSession;
        let is_twist = matches!(parsed, ClientMessage::Twist { .. });
        let is_reset = parsed == ClientMessage::Reset;
        match session.handle(parsed) {
            Ok(stepped) => {
                if stepped {
                    ws.send(Message::binary(session.frame()))?;
                    if session.steps % status_every == 0 {
                        send_json(ws, &session.status())?;
                    }
                } else if !is_twist && !end {
                    if is_reset {
                        ws.send(Message::binary(session.frame()))?;
                    }
                    send_json(ws, &session.status())?;
                }
            }
            Err(e) => send_json(ws, &ServerMessage::Error { message: e.to_string() })?,
        }
        if end || session.demo_complete() {
            return Ok(());
        }
    }
}
