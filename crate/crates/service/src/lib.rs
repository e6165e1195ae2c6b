//! Live steering service. One WebSocket session per connection at `/ws`,
//! plus `GET /map` and `GET /health`.

pub mod error;
pub mod protocol;
pub mod server;
pub mod session;

pub use error::{Result, ServiceError};
pub use server::{router, serve, Service};
pub use session::ServiceConfig;
