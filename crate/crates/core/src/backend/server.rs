//! TCP service exposing in-process backends over the wire protocol.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use super::protocol::{read_frame, write_frame, Request, Status};
use super::{Backend, BackendError, ContractViolation, Mark};

/// Builds a backend for a requested vocabulary and session id.
pub type BackendFactory =
    Arc<dyn Fn(&str, u64) -> Result<Box<dyn Backend>, ContractViolation> + Send + Sync>;

#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Block until the accept loop ends (it only ends on shutdown).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Serve on `listener`, one thread per connection.
pub fn serve_backend(listener: TcpListener, factory: BackendFactory) -> io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let next_session = Arc::new(AtomicU64::new(1));
    let stop2 = stop.clone();
    let accept = thread::Builder::new()
        .name("backend-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let factory = factory.clone();
                        let ids = next_session.clone();
                        let _ = thread::Builder::new()
                            .name("backend-conn".into())
                            .spawn(move || {
                                if let Err(e) = handle_connection(stream, factory, ids) {
                                    debug!("backend connection ended: {e}");
                                }
                            });
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        })?;
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

fn handle_connection(
    mut stream: TcpStream,
    factory: BackendFactory,
    ids: Arc<AtomicU64>,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut sessions: HashMap<u64, Box<dyn Backend>> = HashMap::new();
    while let Some(body) = read_frame(&mut stream)? {
        let status = match Request::decode(&body) {
            Err(e) => Status::Protocol(e.0),
            Ok((_, Request::Open { vocab })) => {
                let id = ids.fetch_add(1, Ordering::SeqCst);
                match factory(&vocab, id) {
                    Ok(b) if b.vocab_descriptor() == vocab => {
                        sessions.insert(id, b);
                        Status::Ok(id.to_be_bytes().to_vec())
                    }
                    Ok(_) => Status::Contract(ContractViolation::VocabMismatch),
                    Err(v) => Status::Contract(v),
                }
            }
            Ok((sid, Request::Close)) => match sessions.remove(&sid) {
                Some(_) => Status::Ok(Vec::new()),
                None => Status::UnknownSession,
            },
            Ok((sid, req)) => match sessions.get_mut(&sid) {
                None => Status::UnknownSession,
                Some(b) => execute(b.as_mut(), sid, req),
            },
        };
        write_frame(&mut stream, &status.encode())?;
    }
    Ok(())
}

fn execute(b: &mut dyn Backend, session: u64, req: Request) -> Status {
    let result = match req {
        Request::Prefill { tokens } => b.prefill(&tokens).map(|n| (n as u64).to_be_bytes().to_vec()),
        Request::Decode { params } => b.decode_next(&params).map(|t| {
            let mut p = t.to_be_bytes().to_vec();
            p.extend_from_slice(&(b.cache_len() as u64).to_be_bytes());
            p
        }),
        Request::Checkpoint => b.checkpoint().map(|m| {
            let mut p = m.id.to_be_bytes().to_vec();
            p.extend_from_slice(&(m.position as u64).to_be_bytes());
            p
        }),
        Request::Rollback { mark_id, position } => b
            .rollback(Mark {
                session,
                id: mark_id,
                position: position as usize,
            })
            .map(|_| (b.cache_len() as u64).to_be_bytes().to_vec()),
        Request::Open { .. } | Request::Close => unreachable!("handled by the connection loop"),
    };
    match result {
        Ok(p) => Status::Ok(p),
        Err(BackendError::Contract(v)) => Status::Contract(v),
        Err(e) => Status::Internal(e.to_string()),
    }
}
