//! CGI mode: the web server strips the HTTP request, hands us the body on
//! stdin, and relays whatever we write to stdout.

use std::io::{self, Read, Write};
use std::net::IpAddr;

use hyper::StatusCode;

use super::{check_request_shape, Gateway, GatewayRequest, GatewayResponse};

/// The subset of CGI meta-variables the gateway looks at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CgiEnv {
    pub request_method: Option<String>,
    pub content_type: Option<String>,
    pub content_length: Option<usize>,
    pub remote_addr: Option<IpAddr>,
    /// `X-RPC-Server` request header, as passed by the web server.
    pub server_hint: Option<String>,
}

impl CgiEnv {
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        CgiEnv {
            request_method: var("REQUEST_METHOD"),
            content_type: var("CONTENT_TYPE"),
            content_length: var("CONTENT_LENGTH").and_then(|v| v.trim().parse().ok()),
            remote_addr: var("REMOTE_ADDR").and_then(|v| v.parse().ok()),
            server_hint: var("HTTP_X_RPC_SERVER"),
        }
    }
}

fn write_response<W: Write>(out: &mut W, resp: &GatewayResponse) -> io::Result<()> {
    let reason = StatusCode::from_u16(resp.status)
        .ok()
        .and_then(|s| s.canonical_reason())
        .unwrap_or("");
    write!(out, "Status: {} {}\r\n", resp.status, reason)?;
    write!(out, "Content-Type: {}\r\n", resp.content_type)?;
    write!(out, "Content-Length: {}\r\n", resp.body.len())?;
    if resp.status == 405 {
        out.write_all(b"Allow: POST\r\n")?;
    }
    out.write_all(b"\r\n")?;
    out.write_all(&resp.body)?;
    out.flush()
}

/// Handles one request. Returns the process exit status: 0 once a response
/// (of any HTTP status) has been written, 2 when I/O on stdin/stdout fails.
pub async fn run_cgi<R: Read, W: Write>(
    mut input: R,
    mut output: W,
    env: &CgiEnv,
    gateway: &Gateway,
) -> i32 {
    let resp = match check_request_shape(env.request_method.as_deref(), env.content_type.as_deref()) {
        Some(r) => r,
        None => {
            let limit = gateway.policy().max_body_bytes();
            let want = env.content_length.map_or(limit + 1, |n| n.min(limit + 1));
            let mut body = Vec::new();
            if let Err(e) = input.by_ref().take(want as u64).read_to_end(&mut body) {
                tracing::error!("reading request body: {e}");
                return 2;
            }
            if body.len() > limit {
                gateway.too_large()
            } else if env.content_length.is_some_and(|n| body.len() < n) {
                GatewayResponse::error(400, "request body shorter than CONTENT_LENGTH")
            } else {
                gateway
                    .handle_rpc_post(GatewayRequest {
                        body: &body,
                        client: env.remote_addr,
                        server_hint: env.server_hint.as_deref(),
                    })
                    .await
            }
        }
    };
    match write_response(&mut output, &resp) {
        Ok(()) => 0,
        Err(e) => {
            tracing::error!("writing response: {e}");
            2
        }
    }
}
