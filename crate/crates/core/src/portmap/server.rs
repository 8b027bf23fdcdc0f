use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;
use tracing::debug;

use super::{
    MappingRegistry, PortMapping, IPPROTO_TCP, PMAPPROC_GETPORT, PMAPPROC_NULL, PMAPPROC_SET,
    PMAPPROC_UNSET, PMAP_PROG, PMAP_VERS,
};
use crate::rpc::server::{serve_program, ProcResult, RpcProgram};
use crate::xdr::{self, XdrCursor};

/// Per-procedure call counters, used to observe portmapper traffic in tests.
#[derive(Debug, Default)]
pub struct PortmapStats {
    calls: [AtomicU64; 6],
    other: AtomicU64,
}

impl PortmapStats {
    fn record(&self, procedure: u32) {
        match self.calls.get(procedure as usize) {
            Some(c) => c.fetch_add(1, Ordering::Relaxed),
            None => self.other.fetch_add(1, Ordering::Relaxed),
        };
    }

    pub fn calls(&self, procedure: u32) -> u64 {
        self.calls.get(procedure as usize).map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn getport_calls(&self) -> u64 {
        self.calls(PMAPPROC_GETPORT)
    }

    pub fn total(&self) -> u64 {
        self.calls.iter().map(|c| c.load(Ordering::Relaxed)).sum::<u64>()
            + self.other.load(Ordering::Relaxed)
    }
}

/// The portmapper program. SET and UNSET are honoured only from loopback peers.
#[derive(Debug)]
pub struct PortmapProgram {
    registry: Arc<MappingRegistry>,
    stats: Arc<PortmapStats>,
}

impl PortmapProgram {
    pub fn new(registry: Arc<MappingRegistry>) -> Self {
        PortmapProgram { registry, stats: Arc::default() }
    }

    pub fn stats(&self) -> &Arc<PortmapStats> {
        &self.stats
    }
}

fn bool_result(b: bool) -> ProcResult {
    ProcResult::Success(xdr::encode_u32(b as u32).to_vec())
}

impl RpcProgram for PortmapProgram {
    fn program(&self) -> u32 {
        PMAP_PROG
    }

    fn versions(&self) -> (u32, u32) {
        (PMAP_VERS, PMAP_VERS)
    }

    fn call(&self, _vers: u32, procedure: u32, args: &[u8], peer: SocketAddr) -> ProcResult {
        self.stats.record(procedure);
        let mapping = || PortMapping::decode(&mut XdrCursor::new(args));
        match procedure {
            PMAPPROC_NULL => ProcResult::Success(Vec::new()),
            PMAPPROC_SET | PMAPPROC_UNSET | PMAPPROC_GETPORT => {
                let Ok(m) = mapping() else {
                    return ProcResult::GarbageArgs;
                };
                match procedure {
                    PMAPPROC_GETPORT => ProcResult::Success(
                        xdr::encode_u32(self.registry.getport(m.prog, m.vers, m.proto)).to_vec(),
                    ),
                    _ if !peer.ip().is_loopback() => {
                        debug!(%peer, "refusing registry change from non-local peer");
                        bool_result(false)
                    }
                    PMAPPROC_SET => bool_result(self.registry.set(&m)),
                    _ => bool_result(self.registry.unset(m.prog, m.vers)),
                }
            }
            // DUMP, CALLIT and anything else
            _ => ProcResult::ProcUnavail,
        }
    }
}

/// An embedded TCP portmapper bound to a listening socket.
pub struct PortmapServer {
    listener: TcpListener,
    program: Arc<PortmapProgram>,
    registry: Arc<MappingRegistry>,
}

impl PortmapServer {
    /// Binds and registers the portmapper itself as (100000, 2, TCP) → bound port.
    pub async fn bind(addr: &str, registry: Arc<MappingRegistry>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let port = listener.local_addr()?.port() as u32;
        registry.set(&PortMapping { prog: PMAP_PROG, vers: PMAP_VERS, proto: IPPROTO_TCP, port });
        let program = Arc::new(PortmapProgram::new(Arc::clone(&registry)));
        Ok(PortmapServer { listener, program, registry })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn registry(&self) -> Arc<MappingRegistry> {
        Arc::clone(&self.registry)
    }

    pub fn stats(&self) -> Arc<PortmapStats> {
        Arc::clone(self.program.stats())
    }

    pub async fn run(self, shutdown: CancellationToken) -> std::io::Result<()> {
        serve_program(self.listener, self.program, shutdown).await
    }
}
