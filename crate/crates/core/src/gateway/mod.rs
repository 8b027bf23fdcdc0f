//! Server side of the tunnel: decapsulate a POSTed RPC call, forward it to the
//! local RPC service found through the portmapper, and return the reply.
//!
//! The same pipeline ([`Gateway::handle_rpc_post`]) backs both the embedded
//! HTTP(S) server and the CGI mode.

mod cgi;
mod handler;
mod policy;
mod server;

use thiserror::Error;

use crate::portmap::PortmapError;

pub use cgi::{run_cgi, CgiEnv};
pub use handler::{
    check_request_shape, Gateway, GatewayRequest, GatewayResponse, GatewayStats,
    CONTENT_TYPE_OCTET_STREAM, CONTENT_TYPE_STREAM, DEFAULT_BACKEND_TIMEOUT,
};
pub use ipnet::IpNet;
pub use policy::{parse_network, GatewayPolicy, ProgramRule, DEFAULT_BACKEND};
pub use server::{GatewayServer, ServeError, RPC_PATH, SERVER_HINT_HEADER};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("program {prog} version {vers} is not registered")]
    NotRegistered { prog: u32, vers: u32 },
    #[error("record exceeds {max} bytes")]
    TooLarge { max: usize },
    #[error("portmapper: {0}")]
    Portmapper(PortmapError),
    #[error("backend connect failed: {0}")]
    ConnectFailure(String),
    #[error("backend I/O: {0}")]
    BackendIo(String),
    #[error("backend reply of {len} bytes exceeds {max}")]
    ReplyOversize { len: usize, max: usize },
}

impl GatewayError {
    /// HTTP status reported for this failure.
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::Malformed(_) => 400,
            GatewayError::Forbidden(_) => 403,
            GatewayError::NotRegistered { .. } => 404,
            GatewayError::TooLarge { .. } => 413,
            GatewayError::Portmapper(_)
            | GatewayError::ConnectFailure(_)
            | GatewayError::BackendIo(_)
            | GatewayError::ReplyOversize { .. } => 502,
        }
    }
}
