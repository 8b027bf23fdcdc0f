//! Tunnel ONC RPC traffic through HTTP(S).
//!
//! The pieces, bottom up:
//!
//! - [`xdr`]: XDR integers and opaque data.
//! - [`rpc`]: RPC v2 call/reply messages and TCP record marking.
//! - [`portmap`]: portmapper client plus an embedded portmapper server.
//! - [`tcpfilter`]: a plain bidirectional TCP relay.
//! - [`tunnel`]: the client side (`rpcfilter`), which impersonates an RPC
//!   service locally and POSTs each call to a gateway.
//! - [`gateway`]: the server side, which forwards POSTed calls to the real
//!   RPC service, either as an HTTP(S) server or as a CGI program.
//! - [`demo`]: a toy RPC program for exercising the tunnel end to end.
//! - [`tls`]: rustls settings for the gateway and the tunnel client.
//! - [`config`]: the gateway's `key = value` configuration file.

pub mod config;
pub mod demo;
pub mod gateway;
pub mod portmap;
pub mod rpc;
pub mod tcpfilter;
pub mod tls;
pub mod tunnel;
pub mod xdr;
