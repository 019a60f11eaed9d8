//! WebSocket bridge between a duet session and remote clients.
//!
//! Clients speak the text records in [`protocol`]; one of them may play,
//! the rest watch. See `docs/gateway-protocol.md` for the wire format.

pub mod client;
pub mod driver;
pub mod feed;
pub mod protocol;
pub mod server;

pub use driver::{AcousticSource, Driver, Finished, LiveDriver, VirtualDriver};
pub use protocol::{ClientMessage, PedalKind, Record, Role, ServerMessage};
pub use server::{serve, GatewayConfig, GatewayHandle, IngestStats};
