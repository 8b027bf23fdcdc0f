//! Argument parsing and process lifecycle for the `rpctunnel` binary and its
//! `tcpfilter` / `rpcfilter` aliases.

mod certs;
mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rpctunnel::config::{ConfigLayer, LogLevel, CONFIG_ENV};
use rpctunnel::gateway::{parse_network, ProgramRule};
use rpctunnel::rpc::DEFAULT_MAX_RECORD;
use rpctunnel::tls::ClientTlsOptions;
use rpctunnel::tunnel::TunnelEndpointConfig;
use url::Url;

pub use certs::{generate_test_certs, TestCertPaths};

pub const TCPFILTER_SYNOPSIS: &str = "tcpfilter <source port> <destination machine> <destination port>";
pub const RPCFILTER_SYNOPSIS: &str =
    "rpcfilter <server machine address> <program number> <version numbers> [OPTIONS]";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Bad command line. Displays the parser's message followed by the synopsis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError {
    pub message: String,
    pub synopsis: &'static str,
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\nusage: {}", self.message.trim_end(), self.synopsis)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "rpctunnel", version, about = "Tunnel ONC RPC over HTTP(S)")]
pub struct Cli {
    /// error, info or debug (default info; RUST_LOG overrides)
    #[arg(long, global = true)]
    pub log_level: Option<LogLevel>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Relay a TCP port to another host
    Tcpfilter(TcpfilterArgs),
    /// Register a local endpoint for an RPC program and tunnel its calls to a gateway
    Rpcfilter(RpcfilterArgs),
    /// Server side of the tunnel
    #[command(subcommand)]
    Gateway(GatewayCommand),
    /// Run an embedded TCP portmapper
    Portmap(PortmapArgs),
    /// Run the demo RPC program and register it with a portmapper
    DemoServer(DemoServerArgs),
    /// Call the demo RPC program
    DemoClient(DemoClientArgs),
    /// Write a throwaway CA plus server and client certificates
    GenTestCerts(GenTestCertsArgs),
}

#[derive(Args, Debug, Clone, PartialEq, Eq)]
#[command(override_usage = TCPFILTER_SYNOPSIS)]
pub struct TcpfilterArgs {
    #[arg(value_name = "source port", value_parser = clap::value_parser!(u16).range(1..))]
    pub source_port: u16,
    #[arg(value_name = "destination machine")]
    pub destination_host: String,
    #[arg(value_name = "destination port", value_parser = clap::value_parser!(u16).range(1..))]
    pub destination_port: u16,
}

#[derive(Args, Debug, Clone, PartialEq, Eq)]
#[command(override_usage = RPCFILTER_SYNOPSIS)]
pub struct RpcfilterArgs {
    #[arg(value_name = "server machine address")]
    pub server_address: String,
    #[arg(value_name = "program number")]
    pub program: u32,
    #[arg(value_name = "version numbers", required = true, num_args = 1..)]
    pub versions: Vec<u32>,
    /// Gateway URL [default: https://<server machine address>/rpc]
    #[arg(long)]
    pub gateway: Option<Url>,
    #[arg(long, default_value = "127.0.0.1:111")]
    pub portmapper: String,
    /// Local port to register; 0 picks one
    #[arg(long, default_value_t = 0)]
    pub listen_port: u16,
    /// PEM file with the CA that signed the gateway certificate
    #[arg(long)]
    pub ca_file: Option<PathBuf>,
    /// Skip gateway certificate checks and allow http:// URLs
    #[arg(long)]
    pub insecure: bool,
    /// Client certificate chain for gateways that require one
    #[arg(long, requires = "client_key")]
    pub client_cert: Option<PathBuf>,
    #[arg(long, requires = "client_cert")]
    pub client_key: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_RECORD)]
    pub max_record_bytes: usize,
    /// Per-request timeout in seconds
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
}

impl RpcfilterArgs {
    pub fn gateway_url(&self) -> Result<Url, UsageError> {
        match &self.gateway {
            Some(u) => Ok(u.clone()),
            None => {
                let host = rpctunnel::tcpfilter::host_port(&self.server_address, 443);
                Url::parse(&format!("https://{host}/rpc")).map_err(|e| UsageError {
                    message: format!("cannot derive gateway URL from {:?}: {e}", self.server_address),
                    synopsis: RPCFILTER_SYNOPSIS,
                })
            }
        }
    }

    pub fn endpoint_config(&self) -> Result<TunnelEndpointConfig, UsageError> {
        let mut cfg = TunnelEndpointConfig::new(
            self.gateway_url()?,
            self.server_address.clone(),
            self.program,
            self.versions.clone(),
        );
        cfg.portmapper = self.portmapper.clone();
        cfg.listen = std::net::SocketAddr::from(([127, 0, 0, 1], self.listen_port));
        cfg.tls = ClientTlsOptions {
            ca_file: self.ca_file.clone(),
            insecure_skip_verify: self.insecure,
            client_identity: self.client_cert.clone().zip(self.client_key.clone()),
        };
        cfg.max_record_bytes = self.max_record_bytes;
        cfg.request_timeout = std::time::Duration::from_secs(self.timeout);
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum GatewayCommand {
    /// Serve POST /rpc over HTTP or HTTPS
    Serve(GatewayServeArgs),
    /// Handle one request as a CGI program
    Cgi(GatewayCgiArgs),
}

/// Flags shared by `gateway serve` and `gateway cgi`.
#[derive(Args, Debug, Clone, Default)]
pub struct PolicyArgs {
    /// Config file with [gateway], [policy] and [tls] sections
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub portmapper: Option<String>,
    /// Allowed program, `<num>` or `<num>:<vers,...>`; repeatable
    #[arg(long = "allow-prog", value_name = "PROG[:VERS,...]")]
    pub allow_prog: Vec<ProgramRule>,
    /// Allowed client network; repeatable
    #[arg(long = "allow-client", value_name = "CIDR", value_parser = parse_network)]
    pub allow_client: Vec<rpctunnel::gateway::IpNet>,
    /// Backend host the gateway may forward to; the first is the default
    #[arg(long = "allow-backend", value_name = "HOST")]
    pub allow_backend: Vec<String>,
    #[arg(long)]
    pub max_record_bytes: Option<usize>,
    /// Print the effective configuration and exit
    #[arg(long)]
    pub print_config: bool,
}

impl PolicyArgs {
    fn layer(&self) -> ConfigLayer {
        fn non_empty<T: Clone>(v: &[T]) -> Option<Vec<T>> {
            (!v.is_empty()).then(|| v.to_vec())
        }
        ConfigLayer {
            portmapper: self.portmapper.clone(),
            allow_prog: non_empty(&self.allow_prog),
            allow_client: non_empty(&self.allow_client),
            allow_backend: non_empty(&self.allow_backend),
            max_record_bytes: self.max_record_bytes,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct GatewayServeArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// [default: 0.0.0.0:443 with TLS, 0.0.0.0:80 without]
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, requires = "tls_key")]
    pub tls_cert: Option<PathBuf>,
    #[arg(long, requires = "tls_cert")]
    pub tls_key: Option<PathBuf>,
    #[arg(long)]
    pub require_client_cert: bool,
    /// PEM file with the CA that signs client certificates
    #[arg(long)]
    pub client_ca: Option<PathBuf>,
}

impl GatewayServeArgs {
    /// Settings given on the command line; unset fields fall through to the file.
    pub fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            listen: self.listen.clone(),
            tls_cert: self.tls_cert.clone(),
            tls_key: self.tls_key.clone(),
            require_client_cert: self.require_client_cert.then_some(true),
            client_ca: self.client_ca.clone(),
            ..self.policy.layer()
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct GatewayCgiArgs {
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PortmapArgs {
    #[arg(long, default_value = "127.0.0.1:111")]
    pub listen: String,
}

#[derive(Args, Debug, Clone)]
pub struct DemoServerArgs {
    /// 0 picks a free port
    #[arg(long, default_value_t = 0)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "127.0.0.1:111")]
    pub portmapper: String,
}

#[derive(Args, Debug, Clone)]
pub struct DemoClientArgs {
    /// null, echo or add
    #[arg(long = "proc")]
    pub procedure: rpctunnel::demo::DemoProc,
    /// echo: the text to send; add: two numbers
    pub args: Vec<String>,
    #[arg(long, default_value = "127.0.0.1:111")]
    pub portmapper: String,
    /// Call this host:port directly instead of asking the portmapper
    #[arg(long)]
    pub server: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct GenTestCertsArgs {
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// DNS names and IP addresses for the server certificate
    #[arg(long = "san", default_values = ["localhost", "127.0.0.1"])]
    pub subject_alt_names: Vec<String>,
}

fn usage(e: clap::Error, synopsis: &'static str) -> UsageError {
    UsageError { message: e.render().to_string(), synopsis }
}

/// Parses `argv` (without the program name) in the `tcpfilter` positional form.
pub fn parse_tcpfilter_args<I, T>(argv: I) -> Result<TcpfilterArgs, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    #[derive(Parser)]
    #[command(name = "tcpfilter", no_binary_name = true)]
    struct P {
        #[command(flatten)]
        a: TcpfilterArgs,
    }
    P::try_parse_from(argv).map(|p| p.a).map_err(|e| usage(e, TCPFILTER_SYNOPSIS))
}

/// Parses `argv` (without the program name) in the `rpcfilter` positional form.
pub fn parse_rpcfilter_args<I, T>(argv: I) -> Result<RpcfilterArgs, UsageError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    #[derive(Parser)]
    #[command(name = "rpcfilter", no_binary_name = true)]
    struct P {
        #[command(flatten)]
        a: RpcfilterArgs,
    }
    P::try_parse_from(argv).map(|p| p.a).map_err(|e| usage(e, RPCFILTER_SYNOPSIS))
}

/// Rewrites argv so `tcpfilter ...` and `rpcfilter ...` (by alias binary or
/// by argv[0]) run the matching subcommand.
pub fn normalize_argv(argv: Vec<OsString>, alias: Option<&str>) -> Vec<OsString> {
    let from_name = argv
        .first()
        .and_then(|a| std::path::Path::new(a).file_stem())
        .and_then(|s| s.to_str())
        .filter(|s| matches!(*s, "tcpfilter" | "rpcfilter"))
        .map(str::to_string);
    match alias.map(str::to_string).or(from_name) {
        Some(cmd) => {
            let mut out = vec![OsString::from("rpctunnel"), OsString::from(cmd)];
            out.extend(argv.into_iter().skip(1));
            out
        }
        None => argv,
    }
}

/// Process entry point. Returns the exit status.
pub fn main_entry(alias: Option<&str>) -> i32 {
    let argv = normalize_argv(std::env::args_os().collect(), alias);
    let synopsis = match argv.get(1).and_then(|a| a.to_str()) {
        Some("tcpfilter") => Some(TCPFILTER_SYNOPSIS),
        Some("rpcfilter") => Some(RPCFILTER_SYNOPSIS),
        _ => None,
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            match synopsis {
                Some(synopsis) => eprintln!("{}", usage(e, synopsis)),
                None => {
                    let _ = e.print();
                }
            }
            return EXIT_USAGE;
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_RUNTIME;
        }
    };
    rt.block_on(commands::run(cli))
}
