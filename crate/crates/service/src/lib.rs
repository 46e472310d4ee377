//! Interactive steering server.
//!
//! Each session owns one environment and runs its own fixed-rate tick loop.
//! Clients create sessions over HTTP and then exchange JSON messages on a
//! WebSocket: goals and database switches in, frames out.

mod error;
mod server;
mod session;

pub use error::{ServiceError, ServiceResult};
pub use server::{port_from_env, router, serve, AppState, ServeOptions, DEFAULT_PORT};
pub use session::{
    validate_message, ClientMessage, Frame, GoalMsg, ServerMessage, Session, Shared, StateMsg, DEFAULT_V_MAX,
};
