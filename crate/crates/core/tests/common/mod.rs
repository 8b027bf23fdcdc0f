//! Loopback fixtures shared by the integration tests.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::time::Duration;

use rcgen::{BasicConstraints, CertificateParams, DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair};
use rpctunnel::demo::{DemoProgram, DemoServer, DEMO_PROG, DEMO_VERS};
use rpctunnel::gateway::{Gateway, GatewayPolicy, GatewayServer, ProgramRule};
use rpctunnel::portmap::{MappingRegistry, PortMapping, PortmapClient, PortmapServer, PortmapStats};
use rpctunnel::tls::{ClientTlsOptions, TlsServerConfig};
use rpctunnel::tunnel::{GatewayClient, RpcFilter, TunnelEndpointConfig};
use tempfile::TempDir;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_util::sync::CancellationToken;
use url::Url;

/// A test CA with a server leaf (localhost, 127.0.0.1) and a client leaf,
/// plus an unrelated CA whose leaf no client trusts.
pub struct TestPki {
    _dir: TempDir,
    pub ca: PathBuf,
    pub server_cert: PathBuf,
    pub server_key: PathBuf,
    pub client_cert: PathBuf,
    pub client_key: PathBuf,
    pub rogue_cert: PathBuf,
    pub rogue_key: PathBuf,
}

fn make_ca(name: &str) -> (rcgen::Certificate, KeyPair) {
    let mut p = CertificateParams::new(Vec::<String>::new()).unwrap();
    p.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    p.distinguished_name.push(DnType::CommonName, name);
    let key = KeyPair::generate().unwrap();
    (p.self_signed(&key).unwrap(), key)
}

fn make_leaf(
    sans: &[&str],
    usage: ExtendedKeyUsagePurpose,
    ca: &rcgen::Certificate,
    ca_key: &KeyPair,
) -> (String, String) {
    let mut p = CertificateParams::new(sans.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();
    p.extended_key_usages = vec![usage];
    let key = KeyPair::generate().unwrap();
    (p.signed_by(&key, ca, ca_key).unwrap().pem(), key.serialize_pem())
}

impl TestPki {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = |n: &str| dir.path().join(n);
        let (ca, ca_key) = make_ca("test CA");
        let (server, server_key) =
            make_leaf(&["localhost", "127.0.0.1"], ExtendedKeyUsagePurpose::ServerAuth, &ca, &ca_key);
        let (client, client_key) = make_leaf(&[], ExtendedKeyUsagePurpose::ClientAuth, &ca, &ca_key);
        let (rogue_ca, rogue_ca_key) = make_ca("untrusted CA");
        let (rogue, rogue_key) =
            make_leaf(&["localhost", "127.0.0.1"], ExtendedKeyUsagePurpose::ServerAuth, &rogue_ca, &rogue_ca_key);
        for (name, pem) in [
            ("ca.pem", ca.pem()),
            ("server.pem", server),
            ("server-key.pem", server_key),
            ("client.pem", client),
            ("client-key.pem", client_key),
            ("rogue.pem", rogue),
            ("rogue-key.pem", rogue_key),
        ] {
            std::fs::write(path(name), pem).unwrap();
        }
        TestPki {
            ca: path("ca.pem"),
            server_cert: path("server.pem"),
            server_key: path("server-key.pem"),
            client_cert: path("client.pem"),
            client_key: path("client-key.pem"),
            rogue_cert: path("rogue.pem"),
            rogue_key: path("rogue-key.pem"),
            _dir: dir,
        }
    }

    pub fn server_tls(&self) -> TlsServerConfig {
        TlsServerConfig::new(&self.server_cert, &self.server_key)
    }

    pub fn mutual_server_tls(&self) -> TlsServerConfig {
        TlsServerConfig { require_client_cert: true, client_ca: Some(self.ca.clone()), ..self.server_tls() }
    }

    pub fn rogue_server_tls(&self) -> TlsServerConfig {
        TlsServerConfig::new(&self.rogue_cert, &self.rogue_key)
    }

    pub fn client_tls(&self) -> ClientTlsOptions {
        ClientTlsOptions { ca_file: Some(self.ca.clone()), ..Default::default() }
    }

    pub fn client_tls_with_identity(&self) -> ClientTlsOptions {
        ClientTlsOptions {
            client_identity: Some((self.client_cert.clone(), self.client_key.clone())),
            ..self.client_tls()
        }
    }
}

pub struct Portmapper {
    pub addr: SocketAddr,
    pub registry: Arc<MappingRegistry>,
    pub stats: Arc<PortmapStats>,
}

impl Portmapper {
    pub fn addr_string(&self) -> String {
        self.addr.to_string()
    }

    pub fn client(&self) -> PortmapClient {
        PortmapClient::with_timeout(self.addr_string(), Duration::from_secs(5))
    }
}

pub async fn start_portmapper(shutdown: &CancellationToken) -> Portmapper {
    let registry = Arc::new(MappingRegistry::new());
    let server = PortmapServer::bind("127.0.0.1:0", Arc::clone(&registry)).await.unwrap();
    let pm = Portmapper { addr: server.local_addr().unwrap(), registry, stats: server.stats() };
    tokio::spawn(server.run(shutdown.clone()));
    pm
}

pub struct Demo {
    pub addr: SocketAddr,
    pub program: Arc<DemoProgram>,
}

/// Starts the demo program and registers it with `pm`.
pub async fn start_demo(pm: &Portmapper, shutdown: &CancellationToken) -> Demo {
    let server = DemoServer::bind("127.0.0.1:0").await.unwrap();
    let demo = Demo { addr: server.local_addr().unwrap(), program: server.program() };
    assert!(pm
        .client()
        .set_mapping(&PortMapping::tcp(DEMO_PROG, DEMO_VERS, demo.addr.port() as u32))
        .await
        .unwrap());
    tokio::spawn(server.run(shutdown.clone()));
    demo
}

pub struct RunningGateway {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    pub handshake_failures: Arc<AtomicU64>,
    pub tls: bool,
}

impl RunningGateway {
    pub fn url(&self) -> Url {
        let scheme = if self.tls { "https" } else { "http" };
        Url::parse(&format!("{scheme}://127.0.0.1:{}/rpc", self.addr.port())).unwrap()
    }
}

pub fn demo_policy() -> GatewayPolicy {
    GatewayPolicy::default().allow_program(ProgramRule::any_version(DEMO_PROG))
}

pub async fn start_gateway(
    policy: GatewayPolicy,
    pm: &Portmapper,
    tls: Option<&TlsServerConfig>,
    shutdown: &CancellationToken,
) -> RunningGateway {
    let gateway = Arc::new(
        Gateway::new(policy, pm.addr_string()).with_timeouts(Duration::from_secs(5), Duration::from_secs(5)),
    );
    let server = GatewayServer::bind("127.0.0.1:0", tls, Arc::clone(&gateway)).await.unwrap();
    let gw = RunningGateway {
        addr: server.local_addr().unwrap(),
        gateway,
        handshake_failures: server.handshake_failures(),
        tls: tls.is_some(),
    };
    tokio::spawn(server.run(shutdown.clone()));
    gw
}

pub fn gateway_client(gw: &RunningGateway, tls: &ClientTlsOptions) -> GatewayClient {
    GatewayClient::new(&gw.url(), tls, Some("127.0.0.1"), Duration::from_secs(10), 8 << 20).unwrap()
}

pub struct Filter {
    pub addr: SocketAddr,
    pub client: Arc<GatewayClient>,
}

/// Starts an rpcfilter for the demo program registered with `client_pm`.
pub async fn start_filter(
    gw: &RunningGateway,
    client_pm: &Portmapper,
    tls: ClientTlsOptions,
    shutdown: &CancellationToken,
) -> Filter {
    let mut cfg = TunnelEndpointConfig::new(gw.url(), "127.0.0.1", DEMO_PROG, vec![DEMO_VERS]);
    cfg.portmapper = client_pm.addr_string();
    cfg.tls = tls;
    cfg.request_timeout = Duration::from_secs(10);
    let filter = RpcFilter::start(cfg).await.unwrap();
    let f = Filter { addr: filter.local_addr().unwrap(), client: filter.client() };
    tokio::spawn(filter.run(shutdown.clone()));
    f
}

/// The whole tunnel on loopback: server-side portmapper, demo server, HTTPS
/// gateway, client-side portmapper, and an rpcfilter registered there.
pub struct Stack {
    pub shutdown: CancellationToken,
    pub pki: TestPki,
    pub server_pm: Portmapper,
    pub demo: Demo,
    pub gateway: RunningGateway,
    pub client_pm: Portmapper,
    pub filter: Filter,
}

impl Stack {
    pub async fn start() -> Stack {
        let shutdown = CancellationToken::new();
        let pki = TestPki::new();
        let server_pm = start_portmapper(&shutdown).await;
        let demo = start_demo(&server_pm, &shutdown).await;
        let gateway = start_gateway(demo_policy(), &server_pm, Some(&pki.server_tls()), &shutdown).await;
        let client_pm = start_portmapper(&shutdown).await;
        let filter = start_filter(&gateway, &client_pm, pki.client_tls(), &shutdown).await;
        Stack { shutdown, pki, server_pm, demo, gateway, client_pm, filter }
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        self.shutdown.cancel();
    }
}

/// Minimal HTTP/1.1 POST over plain TCP, returning status and body.
pub async fn http_post(
    addr: SocketAddr,
    path: &str,
    content_type: Option<&str>,
    body: &[u8],
) -> (u16, Vec<u8>) {
    http_request(addr, "POST", path, content_type, body).await
}

pub async fn http_request(
    addr: SocketAddr,
    method: &str,
    path: &str,
    content_type: Option<&str>,
    body: &[u8],
) -> (u16, Vec<u8>) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let mut head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    if let Some(ct) = content_type {
        head.push_str(&format!("Content-Type: {ct}\r\n"));
    }
    head.push_str("\r\n");
    s.write_all(head.as_bytes()).await.unwrap();
    // the server may answer early (e.g. 413) and stop reading
    let _ = s.write_all(body).await;
    let mut raw = Vec::new();
    let _ = s.read_to_end(&mut raw).await;
    parse_http_response(&raw)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

pub fn parse_http_response(raw: &[u8]) -> (u16, Vec<u8>) {
    let end = find(raw, b"\r\n\r\n").expect("complete response head");
    let head = String::from_utf8_lossy(&raw[..end]);
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let len = head
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once(':')?;
            k.eq_ignore_ascii_case("content-length").then(|| v.trim().parse::<usize>().unwrap())
        })
        .expect("content-length");
    let body = raw[end + 4..].to_vec();
    assert_eq!(body.len(), len, "body length matches header");
    (status, body)
}

/// Splits CGI output into status code and body.
pub fn parse_cgi_output(raw: &[u8]) -> (u16, Vec<u8>) {
    let end = find(raw, b"\r\n\r\n").expect("complete CGI head");
    let head = String::from_utf8_lossy(&raw[..end]);
    let status = head
        .lines()
        .find_map(|l| l.strip_prefix("Status: "))
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    (status, raw[end + 4..].to_vec())
}
