//! Accept loop, one thread per connection and the hub that owns the driver.
//!
//! Connection threads parse records and stamp input on receipt; the hub
//! applies them to the driver in arrival order and fans every resulting
//! record out to the per-client outboxes. A client that stops reading only
//! loses its own oldest records.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use tungstenite::{Message, WebSocket};

use duet_core::engine::Phase;
use duet_core::host::SessionEvent;
use duet_core::midi::{MidiKind, PedalConfig};

use crate::driver::{Driver, Finished};
use crate::feed::Feed;
use crate::protocol::{ClientMessage, PedalKind, Role, ServerMessage};

const POLL: Duration = Duration::from_millis(1);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    /// Records a client may fall behind by before the oldest are dropped.
    pub outbox: usize,
    pub heartbeat: Duration,
    pub pedals: PedalConfig,
    /// Answer to `config_get`.
    pub settings: Vec<(String, String)>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            outbox: 256,
            heartbeat: Duration::from_secs(1),
            pedals: PedalConfig::default(),
            settings: Vec::new(),
        }
    }
}

/// Bounded record queue; overflow drops the oldest and is reported with a
/// `gap` record ahead of whatever survived.
#[derive(Debug)]
pub struct Outbox {
    queue: VecDeque<String>,
    cap: usize,
    dropped: u64,
}

impl Outbox {
    pub fn new(cap: usize) -> Self {
        Self {
            queue: VecDeque::new(),
            cap: cap.max(1),
            dropped: 0,
        }
    }

    pub fn push(&mut self, record: String) {
        if self.queue.len() == self.cap {
            self.queue.pop_front();
            self.dropped += 1;
        }
        self.queue.push_back(record);
    }

    pub fn take(&mut self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.queue.len() + 1);
        if self.dropped > 0 {
            out.push(ServerMessage::Gap { dropped: self.dropped }.to_string());
            self.dropped = 0;
        }
        out.extend(self.queue.drain(..));
        out
    }
}

type SharedOutbox = Arc<Mutex<Outbox>>;

enum HubMsg {
    Join(u64, SharedOutbox),
    Leave(u64),
    Record {
        conn: u64,
        msg: ClientMessage,
        received: Instant,
    },
}

/// Receipt-to-ingest times, in milliseconds, for every accepted input.
#[derive(Debug, Default)]
pub struct IngestStats {
    pub samples_ms: Vec<f64>,
}

impl IngestStats {
    pub fn max_ms(&self) -> f64 {
        self.samples_ms.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_ms(&self) -> f64 {
        if self.samples_ms.is_empty() {
            0.0
        } else {
            self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64
        }
    }
}

pub struct GatewayHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<IngestStats>>,
    accept: Option<JoinHandle<()>>,
    hub: Option<JoinHandle<Finished>>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ingest_latencies_ms(&self) -> Vec<f64> {
        self.stats.lock().unwrap().samples_ms.clone()
    }

    pub fn ingest_stats(&self) -> IngestStats {
        IngestStats {
            samples_ms: self.ingest_latencies_ms(),
        }
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::SeqCst)
    }

    /// Close every connection and stop the session.
    pub fn shutdown(mut self) -> Finished {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        self.hub
            .take()
            .expect("hub thread")
            .join()
            .expect("hub thread panicked")
    }

    /// Block until the process is asked to stop from elsewhere.
    pub fn wait(self) -> Finished {
        while self.is_running() {
            thread::sleep(Duration::from_millis(50));
        }
        self.shutdown()
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        if let Some(h) = self.hub.take() {
            let _ = h.join();
        }
    }
}

pub fn serve(driver: Box<dyn Driver>, config: GatewayConfig) -> io::Result<GatewayHandle> {
    let listener = TcpListener::bind(config.listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    info!("gateway listening on ws://{addr}/");
    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(Mutex::new(IngestStats::default()));
    let (hub_tx, hub_rx) = mpsc::channel();

    let hub = {
        let stop = stop.clone();
        let stats = stats.clone();
        let config = config.clone();
        thread::Builder::new()
            .name("gateway-hub".into())
            .spawn(move || Hub::new(driver, config, stats).run(hub_rx, &stop))?
    };
    let accept = {
        let stop = stop.clone();
        thread::Builder::new()
            .name("gateway-accept".into())
            .spawn(move || accept_loop(listener, hub_tx, config.outbox, stop))?
    };
    Ok(GatewayHandle {
        addr,
        stop,
        stats,
        accept: Some(accept),
        hub: Some(hub),
    })
}

fn accept_loop(listener: TcpListener, hub: Sender<HubMsg>, outbox: usize, stop: Arc<AtomicBool>) {
    let mut next_id = 1u64;
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next_id;
                next_id += 1;
                let hub = hub.clone();
                let stop = stop.clone();
                let spawned = thread::Builder::new()
                    .name(format!("gateway-conn-{id}"))
                    .spawn(move || {
                        if let Err(e) = connection(id, stream, hub, outbox, stop) {
                            debug!("connection {id} from {peer}: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => conns.push(h),
                    Err(e) => warn!("cannot spawn connection thread: {e}"),
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn connection(
    id: u64,
    stream: TcpStream,
    hub: Sender<HubMsg>,
    outbox_cap: usize,
    stop: Arc<AtomicBool>,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => {
            tungstenite::Error::Io(io::Error::new(io::ErrorKind::TimedOut, "handshake stalled"))
        }
    })?;
    ws.get_mut().set_read_timeout(Some(POLL))?;

    let outbox = Arc::new(Mutex::new(Outbox::new(outbox_cap)));
    if hub.send(HubMsg::Join(id, outbox.clone())).is_err() {
        return Ok(());
    }
    let result = serve_connection(id, &mut ws, &hub, &outbox, &stop);
    let _ = hub.send(HubMsg::Leave(id));
    if stop.load(Ordering::SeqCst) {
        for r in outbox.lock().unwrap().take() {
            let _ = ws.write(Message::text(r));
        }
        let _ = ws.close(None);
        let _ = ws.flush();
    }
    result
}

fn serve_connection(
    id: u64,
    ws: &mut WebSocket<TcpStream>,
    hub: &Sender<HubMsg>,
    outbox: &SharedOutbox,
    stop: &AtomicBool,
) -> Result<(), tungstenite::Error> {
    while !stop.load(Ordering::SeqCst) {
        let pending = outbox.lock().unwrap().take();
        if !pending.is_empty() {
            for r in pending {
                ws.write(Message::text(r))?;
            }
            ws.flush()?;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                let received = Instant::now();
                match ClientMessage::parse(text.as_str()) {
                    Ok(msg) => {
                        let record = HubMsg::Record {
                            conn: id,
                            msg,
                            received,
                        };
                        if hub.send(record).is_err() {
                            return Ok(());
                        }
                    }
                    Err(e) => outbox
                        .lock()
                        .unwrap()
                        .push(ServerMessage::Error { text: e.to_string() }.to_string()),
                }
            }
            Ok(Message::Binary(_)) => outbox.lock().unwrap().push(
                ServerMessage::Error {
                    text: "binary frames are not supported".into(),
                }
                .to_string(),
            ),
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

struct Client {
    outbox: SharedOutbox,
    role: Role,
}

struct Hub {
    driver: Box<dyn Driver>,
    config: GatewayConfig,
    stats: Arc<Mutex<IngestStats>>,
    feed: Feed,
    clients: BTreeMap<u64, Client>,
    performer: Option<u64>,
    events: Vec<SessionEvent>,
}

impl Hub {
    fn new(driver: Box<dyn Driver>, config: GatewayConfig, stats: Arc<Mutex<IngestStats>>) -> Self {
        Self {
            driver,
            feed: Feed::new(config.pedals),
            config,
            stats,
            clients: BTreeMap::new(),
            performer: None,
            events: Vec::new(),
        }
    }

    fn run(mut self, rx: Receiver<HubMsg>, stop: &AtomicBool) -> Finished {
        let mut next_beat = Instant::now() + self.config.heartbeat;
        while !stop.load(Ordering::SeqCst) {
            match rx.recv_timeout(POLL) {
                Ok(msg) => {
                    self.handle(msg);
                    while let Ok(msg) = rx.try_recv() {
                        self.handle(msg);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            self.pump();
            if Instant::now() >= next_beat {
                next_beat += self.config.heartbeat;
                let now = self.driver.clock().now_ms();
                self.broadcast(&ServerMessage::Heartbeat { time_ms: now });
            }
        }
        self.pump();
        let mut finished = self.driver.finish();
        self.events.append(&mut finished.events);
        finished.events = self.events;
        finished
    }

    fn pump(&mut self) {
        for ev in self.driver.poll() {
            for msg in self.feed.translate(&ev) {
                self.broadcast(&msg);
            }
            self.events.push(ev);
        }
    }

    fn broadcast(&self, msg: &ServerMessage) {
        let text = msg.to_string();
        for c in self.clients.values() {
            c.outbox.lock().unwrap().push(text.clone());
        }
    }

    fn reply(&self, conn: u64, msg: ServerMessage) {
        if let Some(c) = self.clients.get(&conn) {
            c.outbox.lock().unwrap().push(msg.to_string());
        }
    }

    fn error(&self, conn: u64, text: impl Into<String>) {
        self.reply(conn, ServerMessage::Error { text: text.into() });
    }

    fn handle(&mut self, msg: HubMsg) {
        match msg {
            HubMsg::Join(id, outbox) => {
                // Anything already observed belongs to the clients that were
                // there to see it.
                self.pump();
                self.clients.insert(
                    id,
                    Client {
                        outbox,
                        role: Role::Observer,
                    },
                );
                self.welcome(id);
            }
            HubMsg::Leave(id) => {
                self.clients.remove(&id);
                if self.performer == Some(id) {
                    info!("performer disconnected");
                    self.performer = None;
                }
            }
            HubMsg::Record { conn, msg, received } => {
                // The session time at receipt, read back from the wall time
                // the record spent queued.
                let received_ms = self.driver.clock().now_ms() - received.elapsed().as_secs_f64() * 1000.0;
                self.record(conn, msg, received, received_ms);
            }
        }
    }

    fn welcome(&self, id: u64) {
        let Some(c) = self.clients.get(&id) else { return };
        self.reply(
            id,
            ServerMessage::Welcome {
                role: c.role,
                time_ms: self.driver.clock().now_ms(),
            },
        );
        self.reply(
            id,
            ServerMessage::State {
                phase: self.feed.phase(),
                time_ms: self.driver.clock().now_ms(),
            },
        );
    }

    fn record(&mut self, conn: u64, msg: ClientMessage, received: Instant, received_ms: f64) {
        let Some(role) = self.clients.get(&conn).map(|c| c.role) else {
            return;
        };
        match msg {
            ClientMessage::Hello { role: Role::Performer } => match self.performer {
                Some(p) if p != conn => self.error(conn, "another client is the performer"),
                _ => {
                    self.performer = Some(conn);
                    self.clients.get_mut(&conn).unwrap().role = Role::Performer;
                    self.welcome(conn);
                }
            },
            ClientMessage::Hello { role: Role::Observer } => {
                if self.performer == Some(conn) {
                    self.performer = None;
                }
                self.clients.get_mut(&conn).unwrap().role = Role::Observer;
                self.welcome(conn);
            }
            ClientMessage::ConfigGet => self.reply(conn, ServerMessage::Config(self.config.settings.clone())),
            _ if role != Role::Performer => self.error(conn, "observers cannot send input"),
            ClientMessage::Advance { ms } => {
                if let Err(e) = self.driver.advance(ms) {
                    self.error(conn, e);
                }
            }
            ClientMessage::Takeover { .. } if self.feed.phase() != Phase::Listen => {
                self.error(conn, "takeover is only possible while listening")
            }
            ClientMessage::Reclaim { .. } if self.feed.phase() != Phase::Generating => {
                self.error(conn, "reclaim is only possible while generating")
            }
            other => {
                let pedals = self.config.pedals;
                for kind in to_midi(&other, &pedals) {
                    if let Err(e) = self.driver.ingest(kind, received_ms) {
                        self.error(conn, e);
                        return;
                    }
                }
                let latency = received.elapsed().as_secs_f64() * 1000.0;
                self.stats.lock().unwrap().samples_ms.push(latency);
            }
        }
        self.pump();
    }
}

/// Wire events for an input record. Takeover and reclaim are a tap of the
/// soft pedal.
fn to_midi(msg: &ClientMessage, pedals: &PedalConfig) -> Vec<MidiKind> {
    let cc = |which: PedalKind, down: bool| MidiKind::Control {
        controller: match which {
            PedalKind::Sustain => pedals.sustain_controller,
            PedalKind::Soft => pedals.soft_controller,
        },
        value: if down { 127 } else { 0 },
    };
    match *msg {
        ClientMessage::NoteOn { pitch, velocity, .. } => vec![MidiKind::NoteOn { pitch, velocity }],
        ClientMessage::NoteOff { pitch, .. } => vec![MidiKind::NoteOff { pitch, velocity: 0 }],
        ClientMessage::Pedal { which, down, .. } => vec![cc(which, down)],
        ClientMessage::Takeover { .. } | ClientMessage::Reclaim { .. } => {
            vec![cc(PedalKind::Soft, true), cc(PedalKind::Soft, false)]
        }
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outbox_drops_oldest_and_marks_the_gap() {
        let mut o = Outbox::new(3);
        for i in 0..5 {
            o.push(format!("r{i}"));
        }
        assert_eq!(o.take(), ["gap 2", "r2", "r3", "r4"]);
        assert!(o.take().is_empty());
        o.push("r5".into());
        assert_eq!(o.take(), ["r5"]);
    }
}
