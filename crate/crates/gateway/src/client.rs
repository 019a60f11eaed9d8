//! Blocking client, used by the command-line tools and the tests.

use std::io;
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use crate::protocol::{ClientMessage, Record};

pub struct Client {
    ws: WebSocket<TcpStream>,
}

fn io_err(e: tungstenite::Error) -> io::Error {
    match e {
        tungstenite::Error::Io(e) => e,
        other => io::Error::other(other.to_string()),
    }
}

impl Client {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).map_err(|e| match e {
            tungstenite::HandshakeError::Failure(e) => io_err(e),
            tungstenite::HandshakeError::Interrupted(_) => io::Error::other("handshake interrupted"),
        })?;
        Ok(Self { ws })
    }

    pub fn send(&mut self, msg: &ClientMessage) -> io::Result<()> {
        self.send_raw(&msg.to_string())
    }

    /// Send a record as-is, well formed or not.
    pub fn send_raw(&mut self, text: &str) -> io::Result<()> {
        self.ws.send(Message::text(text)).map_err(io_err)
    }

    /// Next text record, or `None` if none arrives within `timeout`.
    pub fn recv(&mut self, timeout: Duration) -> io::Result<Option<String>> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.ws.get_mut().set_read_timeout(Some(left))?;
            match self.ws.read() {
                Ok(Message::Text(t)) => return Ok(Some(t.as_str().to_string())),
                Ok(Message::Close(_)) => {
                    return Err(io::Error::new(io::ErrorKind::ConnectionAborted, "server closed"))
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
                {
                    return Ok(None)
                }
                Err(e) => return Err(io_err(e)),
            }
        }
    }

    /// Read until a record satisfies `pred`, returning everything read on the
    /// way (the match last). Heartbeats are skipped.
    pub fn recv_until(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&Record) -> bool,
    ) -> io::Result<Vec<Record>> {
        let deadline = Instant::now() + timeout;
        let mut seen = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let Some(text) = self.recv(left)? else {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    format!("no matching record; saw {seen:?}"),
                ));
            };
            let Some(rec) = Record::parse(&text) else { continue };
            if rec.kind == "heartbeat" {
                continue;
            }
            let done = pred(&rec);
            seen.push(rec);
            if done {
                return Ok(seen);
            }
        }
    }

    /// Everything that arrives until the line goes quiet for `idle`.
    pub fn drain(&mut self, idle: Duration) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        while let Some(t) = self.recv(idle)? {
            out.push(t);
        }
        Ok(out)
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}
