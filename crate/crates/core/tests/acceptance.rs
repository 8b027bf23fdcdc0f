//! Acceptance suite: one PASS/FAIL line per criterion, each under its time bound.
//!
//! Run with `cargo test -p rpctunnel-core --test acceptance`. Set
//! `ACCEPTANCE_SEED` to replay a particular randomized run.

mod common;

use std::collections::BTreeSet;
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use common::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rpctunnel::demo::{encode_add_args, DemoClient, DemoProc, DEMO_PROG, DEMO_VERS};
use rpctunnel::gateway::{run_cgi, CgiEnv, Gateway, GatewayPolicy, ProgramRule};
use rpctunnel::portmap::{PortMapping, IPPROTO_TCP};
use rpctunnel::rpc::{
    build_call, frame_record, frame_single, parse_call_target, parse_reply_status, read_record,
    CallTarget, RpcCallHeader,
};
use rpctunnel::tcpfilter::TcpFilter;
use rpctunnel::tunnel::TunnelError;
use rpctunnel::xdr::{self, XdrCursor};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;

type Outcome = Result<(), String>;
type Check = fn(u64) -> Pin<Box<dyn Future<Output = Outcome> + Send>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e:?}"))
}

// ---------------------------------------------------------------------------
// 1. codec round-trips

/// Oracle XDR encoding written from the wire rules, independent of the library.
fn oracle_opaque(data: &[u8]) -> Vec<u8> {
    let mut v = (data.len() as u32).to_be_bytes().to_vec();
    v.extend_from_slice(data);
    while !v.len().is_multiple_of(4) {
        v.push(0);
    }
    v
}

fn oracle_framed_len(len: usize, max_fragment: usize) -> usize {
    let fragments = if len == 0 { 1 } else { len.div_ceil(max_fragment) };
    len + 4 * fragments
}

async fn codec_round_trips(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..10_000 {
        let n: u32 = rng.gen();
        let enc = xdr::encode_u32(n);
        ensure!(enc == n.to_be_bytes(), "u32 {n:#x} encoded as {enc:?}");
        ensure!(XdrCursor::new(&enc).decode_u32() == Ok(n), "u32 {n:#x} did not decode");

        let data: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        let enc = xdr::encode_opaque_var(&data);
        ensure!(enc == oracle_opaque(&data), "opaque #{i} of {} bytes encoded differently", data.len());
        let mut cur = XdrCursor::new(&enc);
        ensure!(cur.decode_opaque_var() == Ok(&data[..]), "opaque #{i} did not decode");
        ensure!(cur.remaining() == 0, "opaque #{i} left {} bytes", cur.remaining());
    }
    for i in 0..1_000 {
        let len = rng.gen_range(0..=64 * 1024);
        let max_fragment = rng.gen_range(1..=4096);
        let mut record = vec![0u8; len];
        rng.fill(&mut record[..]);
        let framed = frame_record(&record, max_fragment);
        ensure!(
            framed.len() == oracle_framed_len(len, max_fragment),
            "record #{i}: {len} bytes / fragment {max_fragment} framed to {} bytes",
            framed.len()
        );
        let back = ok(read_record(&mut &framed[..], usize::MAX), "reassemble")?;
        ensure!(back.record.as_bytes() == &record[..], "record #{i} payload differs");
        ensure!(back.raw == framed, "record #{i} raw bytes differ");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 2. RPC header round-trip

fn golden_null_call() -> Vec<u8> {
    // xid 1, CALL, rpcvers 2, prog 100003, vers 3, proc 0, AUTH_NONE cred and verf
    [1u32, 0, 2, 100_003, 3, 0, 0, 0, 0, 0].iter().flat_map(|w| w.to_be_bytes()).collect()
}

async fn rpc_header_round_trip(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    for _ in 0..1_000 {
        let (xid, prog, vers, procedure) = (rng.gen(), rng.gen(), rng.gen(), rng.gen());
        let args: Vec<u8> = (0..rng.gen_range(0..16) * 4).map(|_| rng.gen()).collect();
        let rec = ok(build_call(&RpcCallHeader::new(xid, prog, vers, procedure), &args), "build_call")?;
        ensure!(rec.len() == 40 + args.len(), "call length {} for {} arg bytes", rec.len(), args.len());
        let got = ok(parse_call_target(rec.as_bytes()), "parse_call_target")?;
        ensure!(
            got == CallTarget { xid, prog, vers, procedure },
            "round trip of ({xid}, {prog}, {vers}, {procedure}) gave {got:?}"
        );
    }
    let rec = ok(build_call(&RpcCallHeader::new(1, 100_003, 3, 0), &[]), "build_call")?;
    ensure!(rec.as_bytes() == &golden_null_call()[..], "golden NULL call mismatch: {:02x?}", rec.as_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// 3. portmapper semantics

async fn portmapper_semantics(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    let shutdown = CancellationToken::new();
    let pm = start_portmapper(&shutdown).await;
    let c = pm.client();
    for _ in 0..20 {
        let (prog, vers, port) = (rng.gen_range(200_000..300_000), rng.gen_range(1..10), rng.gen_range(1..=65_535));
        ensure!(ok(c.getport(prog, vers, IPPROTO_TCP).await, "getport")? == 0, "fresh key already mapped");
        ensure!(ok(c.set_mapping(&PortMapping::tcp(prog, vers, port)).await, "set")?, "set refused");
        let got = ok(c.getport(prog, vers, IPPROTO_TCP).await, "getport")?;
        ensure!(got == port, "getport after set returned {got}, want {port}");
        let dup = ok(c.set_mapping(&PortMapping::tcp(prog, vers, port % 65_535 + 1)).await, "duplicate set")?;
        ensure!(!dup, "duplicate set accepted");
        ensure!(ok(c.getport(prog, vers, IPPROTO_TCP).await, "getport")? == port, "duplicate set changed the port");
        ensure!(ok(c.unset_mapping(prog, vers).await, "unset")?, "unset refused");
        let got = ok(c.getport(prog, vers, IPPROTO_TCP).await, "getport")?;
        ensure!(got == 0, "getport after unset returned {got}");
    }
    shutdown.cancel();
    Ok(())
}

// ---------------------------------------------------------------------------
// 4. tcpfilter transparency

const MASK: u8 = 0x5A;

/// Destination that records what it receives and streams back each byte
/// XOR-masked, so the two directions carry different data at the same time.
async fn masking_destination() -> (String, Arc<Mutex<Vec<Vec<u8>>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    tokio::spawn(async move {
        while let Ok((s, _)) = listener.accept().await {
            let log = Arc::clone(&log);
            tokio::spawn(async move {
                let (mut r, mut w) = s.into_split();
                let mut got = Vec::new();
                let mut buf = vec![0u8; 16 * 1024];
                loop {
                    let n = r.read(&mut buf).await.unwrap();
                    if n == 0 {
                        break;
                    }
                    got.extend_from_slice(&buf[..n]);
                    let masked: Vec<u8> = buf[..n].iter().map(|b| b ^ MASK).collect();
                    w.write_all(&masked).await.unwrap();
                }
                // log before EOF reaches the client
                log.lock().unwrap().push(got);
                w.shutdown().await.unwrap();
            });
        }
    });
    (addr, seen)
}

async fn session(addr: std::net::SocketAddr, payload: Vec<u8>) -> std::io::Result<Vec<u8>> {
    let (mut r, mut w) = TcpStream::connect(addr).await?.into_split();
    let writer = tokio::spawn(async move {
        w.write_all(&payload).await?;
        w.shutdown().await
    });
    let mut back = Vec::new();
    r.read_to_end(&mut back).await?;
    writer.await.unwrap()?;
    Ok(back)
}

async fn tcpfilter_transparency(seed: u64) -> Outcome {
    let mut rng = StdRng::seed_from_u64(seed);
    let shutdown = CancellationToken::new();
    let (dest, seen) = masking_destination().await;
    let filter = ok(TcpFilter::bind("127.0.0.1:0", dest).await, "bind")?;
    let addr = ok(filter.local_addr(), "local_addr")?;
    tokio::spawn(filter.run(shutdown.clone()));

    let mut a = vec![0u8; 1 << 20];
    let mut b = vec![0u8; 1 << 20];
    rng.fill(&mut a[..]);
    rng.fill(&mut b[..]);
    let masked = |p: &[u8]| p.iter().map(|x| x ^ MASK).collect::<Vec<u8>>();

    let single = ok(session(addr, a.clone()).await, "single session")?;
    ensure!(single == masked(&a), "1 MiB session: server-to-client bytes differ");
    ensure!(seen.lock().unwrap().first() == Some(&a), "1 MiB session: client-to-server bytes differ");

    let (ra, rb) = tokio::join!(session(addr, a.clone()), session(addr, b.clone()));
    ensure!(ok(ra, "session A")? == masked(&a), "concurrent session A received foreign or altered bytes");
    ensure!(ok(rb, "session B")? == masked(&b), "concurrent session B received foreign or altered bytes");
    let mut got = seen.lock().unwrap()[1..].to_vec();
    got.sort();
    let mut want = vec![a, b];
    want.sort();
    ensure!(got == want, "destination saw mixed client-to-server streams");
    shutdown.cancel();
    Ok(())
}

// ---------------------------------------------------------------------------
// 5. end-to-end tunnel equivalence

const CALL_TIMEOUT: Duration = Duration::from_secs(10);

/// One ECHO (10 KiB random) and one ADD, sent directly and through the tunnel
/// with the same xid; returns the number of tunnelled calls.
async fn cycle(rng: &mut StdRng, direct: &mut DemoClient, tunnel: &mut DemoClient) -> Result<u64, String> {
    let mut data = vec![0u8; 10 * 1024];
    rng.fill(&mut data[..]);
    let calls = [
        (DemoProc::Echo as u32, xdr::encode_opaque_var(&data)),
        (DemoProc::Add as u32, encode_add_args(rng.gen(), rng.gen())),
    ];
    for (procedure, args) in calls {
        let xid: u32 = rng.gen();
        let d = ok(direct.call_raw(xid, DEMO_VERS, procedure, &args).await, "direct call")?;
        let t = ok(tunnel.call_raw(xid, DEMO_VERS, procedure, &args).await, "tunnelled call")?;
        ensure!(d.raw == t.raw, "procedure {procedure}: tunnelled reply differs from direct reply");
        let got = ok(parse_reply_status(t.record.as_bytes()), "reply")?.xid;
        ensure!(got == xid, "xid {xid:#x} came back as {got:#x}");
    }
    Ok(2)
}

async fn end_to_end_equivalence(seed: u64) -> Outcome {
    let stack = Stack::start().await;
    let demo_addr = stack.demo.addr.to_string();
    let client_pm = stack.client_pm.addr_string();
    let mut rng = StdRng::seed_from_u64(seed);

    let mut direct = ok(DemoClient::connect(&demo_addr, CALL_TIMEOUT).await, "direct connect")?;
    let mut tunnel = ok(DemoClient::via_portmapper(&client_pm, CALL_TIMEOUT).await, "tunnel connect")?;
    let mut tunnelled = 0u64;
    for _ in 0..100 {
        tunnelled += cycle(&mut rng, &mut direct, &mut tunnel).await?;
    }

    let workers: Vec<_> = (0..2)
        .map(|w| {
            let (demo_addr, client_pm) = (demo_addr.clone(), client_pm.clone());
            let mut rng = StdRng::seed_from_u64(seed ^ (0x1000 + w));
            tokio::spawn(async move {
                let mut direct = ok(DemoClient::connect(&demo_addr, CALL_TIMEOUT).await, "direct connect")?;
                let mut tunnel = ok(DemoClient::via_portmapper(&client_pm, CALL_TIMEOUT).await, "tunnel connect")?;
                let mut n = 0;
                for _ in 0..50 {
                    n += cycle(&mut rng, &mut direct, &mut tunnel).await?;
                }
                Ok::<u64, String>(n)
            })
        })
        .collect();
    for w in workers {
        tunnelled += ok(w.await, "worker")??;
    }

    let forwarded = stack.gateway.gateway.stats().forwarded();
    ensure!(forwarded == tunnelled, "gateway forwarded {forwarded} calls, tunnel sent {tunnelled}");
    let served = stack.demo.program.calls();
    ensure!(served == 2 * tunnelled, "server handled {served} calls, expected {}", 2 * tunnelled);
    ensure!(tunnelled == 400, "ran {tunnelled} tunnelled calls");
    Ok(())
}

// ---------------------------------------------------------------------------
// 6. security behaviour

fn call_body(prog: u32, vers: u32) -> Bytes {
    let call = build_call(&RpcCallHeader::new(0x77, prog, vers, 0), &[]).unwrap();
    Bytes::from(frame_single(call.as_bytes()))
}

async fn security_behaviour(_seed: u64) -> Outcome {
    let shutdown = CancellationToken::new();
    let pki = TestPki::new();
    let pm = start_portmapper(&shutdown).await;
    let demo = start_demo(&pm, &shutdown).await;

    // (a) untrusted gateway certificate
    let rogue = start_gateway(demo_policy(), &pm, Some(&pki.rogue_server_tls()), &shutdown).await;
    let client = gateway_client(&rogue, &pki.client_tls());
    match client.post(call_body(DEMO_PROG, DEMO_VERS)).await {
        Err(TunnelError::TlsVerificationFailure(_)) => {}
        other => return Err(format!("(a) untrusted certificate: got {other:?}")),
    }
    ensure!(client.posts() == 0, "(a) a request was sent");
    ensure!(rogue.gateway.stats().requests() == 0, "(a) gateway received RPC bytes");

    // (b) non-allowlisted program: no portmapper or backend traffic
    let gw = start_gateway(
        GatewayPolicy::default().allow_program(ProgramRule::any_version(DEMO_PROG)),
        &pm,
        Some(&pki.server_tls()),
        &shutdown,
    )
    .await;
    let client = gateway_client(&gw, &pki.client_tls());
    let (pm_before, demo_before) = (pm.stats.total(), demo.program.calls());
    match client.post(call_body(100_003, 3)).await {
        Err(TunnelError::GatewayHttpError(403)) => {}
        other => return Err(format!("(b) denied program: got {other:?}")),
    }
    ensure!(pm.stats.total() == pm_before, "(b) portmapper was queried");
    ensure!(demo.program.calls() == demo_before, "(b) backend was called");
    ok(client.post(call_body(DEMO_PROG, DEMO_VERS)).await, "(b) allowed program")?;

    // (c) client certificate required
    let mutual = start_gateway(demo_policy(), &pm, Some(&pki.mutual_server_tls()), &shutdown).await;
    let anonymous = gateway_client(&mutual, &pki.client_tls());
    ensure!(anonymous.post(call_body(DEMO_PROG, DEMO_VERS)).await.is_err(), "(c) anonymous client accepted");
    let deadline = Instant::now() + Duration::from_secs(2);
    while mutual.handshake_failures.load(Ordering::Relaxed) == 0 && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    ensure!(mutual.handshake_failures.load(Ordering::Relaxed) >= 1, "(c) no handshake rejection recorded");
    ensure!(mutual.gateway.stats().requests() == 0, "(c) request reached the gateway");
    let authenticated = gateway_client(&mutual, &pki.client_tls_with_identity());
    ok(authenticated.post(call_body(DEMO_PROG, DEMO_VERS)).await, "(c) authenticated client")?;
    shutdown.cancel();
    Ok(())
}

// ---------------------------------------------------------------------------
// 7. CGI/serve equivalence

async fn cgi_serve_equivalence(seed: u64) -> Outcome {
    const MAX_RECORD: usize = 4096;
    let mut rng = StdRng::seed_from_u64(seed);
    let shutdown = CancellationToken::new();
    let pm = start_portmapper(&shutdown).await;
    let _demo = start_demo(&pm, &shutdown).await;
    let mut policy = demo_policy();
    policy.max_record_bytes = MAX_RECORD;
    let gw = start_gateway(policy.clone(), &pm, None, &shutdown).await;
    let cgi = Gateway::new(policy, pm.addr_string());

    let mut per_kind: [BTreeSet<u16>; 4] = Default::default();
    for i in 0..100 {
        let kind = i % 4;
        let payload: Vec<u8> = (0..rng.gen_range(0..2048)).map(|_| rng.gen()).collect();
        let prog = if kind == 3 { rng.gen_range(100_000..200_000) } else { DEMO_PROG };
        let call = build_call(&RpcCallHeader::new(rng.gen(), prog, 1, 1), &xdr::encode_opaque_var(&payload)).unwrap();
        let framed = frame_record(call.as_bytes(), rng.gen_range(1..=1024));
        let body = match kind {
            0 => framed,
            1 => framed[..rng.gen_range(0..framed.len())].to_vec(),
            2 => frame_record(&vec![0u8; MAX_RECORD + rng.gen_range(1..4096)], rng.gen_range(64..=8192)),
            _ => framed,
        };
        let served = http_post(gw.addr, "/rpc", Some("application/octet-stream"), &body).await;
        let env = CgiEnv {
            request_method: Some("POST".into()),
            content_type: Some("application/octet-stream".into()),
            content_length: Some(body.len()),
            remote_addr: Some("127.0.0.1".parse().unwrap()),
            server_hint: None,
        };
        let mut out = Vec::new();
        let code = run_cgi(&body[..], &mut out, &env, &cgi).await;
        ensure!(code == 0, "body #{i}: CGI exit status {code}");
        let via_cgi = parse_cgi_output(&out);
        ensure!(
            via_cgi == served,
            "body #{i}: CGI gave {} ({} bytes), serve gave {} ({} bytes)",
            via_cgi.0,
            via_cgi.1.len(),
            served.0,
            served.1.len()
        );
        per_kind[kind].insert(served.0);
    }
    let expected = [200, 400, 413, 403];
    for (kind, want) in expected.iter().enumerate() {
        let got: Vec<u16> = per_kind[kind].iter().copied().collect();
        ensure!(got == vec![*want], "category {kind} produced statuses {got:?}, expected {want}");
    }
    shutdown.cancel();
    Ok(())
}

// ---------------------------------------------------------------------------
// 8. error taxonomy

async fn error_taxonomy(_seed: u64) -> Outcome {
    let shutdown = CancellationToken::new();
    let pki = TestPki::new();
    let pm = start_portmapper(&shutdown).await;
    let _demo = start_demo(&pm, &shutdown).await;
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    ok(pm.client().set_mapping(&PortMapping::tcp(300_300, 1, dead as u32)).await, "register dead backend")?;
    let mut policy = demo_policy()
        .allow_program(ProgramRule::any_version(300_200))
        .allow_program(ProgramRule::any_version(300_300));
    policy.max_record_bytes = 1024;
    let gw = start_gateway(policy, &pm, Some(&pki.server_tls()), &shutdown).await;
    let client = gateway_client(&gw, &pki.client_tls());

    let cases: [(&str, Bytes, u16); 4] = [
        ("malformed framing", Bytes::from_static(b"\x00\x00\x00\x10short"), 400),
        ("unregistered program", call_body(300_200, 1), 404),
        ("dead backend", call_body(300_300, 1), 502),
        ("oversize record", Bytes::from(frame_single(&[0u8; 2048])), 413),
    ];
    for (name, body, want) in cases {
        match client.post(body).await {
            Err(TunnelError::GatewayHttpError(got)) if got == want => {}
            other => return Err(format!("{name}: expected HTTP {want}, got {other:?}")),
        }
    }
    ok(client.post(call_body(DEMO_PROG, DEMO_VERS)).await, "valid call after errors")?;
    shutdown.cancel();
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    let seed = std::env::var("ACCEPTANCE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(rand::random::<u64>);
    println!("acceptance suite, seed {seed}");

    let criteria: [(&str, Duration, Check); 8] = [
        ("codec round-trips", Duration::from_secs(10), |s| Box::pin(codec_round_trips(s))),
        ("RPC header round-trip", Duration::from_secs(5), |s| Box::pin(rpc_header_round_trip(s))),
        ("portmapper semantics", Duration::from_secs(5), |s| Box::pin(portmapper_semantics(s))),
        ("tcpfilter transparency", Duration::from_secs(10), |s| Box::pin(tcpfilter_transparency(s))),
        ("end-to-end tunnel equivalence", Duration::from_secs(60), |s| Box::pin(end_to_end_equivalence(s))),
        ("security behaviour", Duration::from_secs(15), |s| Box::pin(security_behaviour(s))),
        ("CGI/serve equivalence", Duration::from_secs(10), |s| Box::pin(cgi_serve_equivalence(s))),
        ("error taxonomy", Duration::from_secs(10), |s| Box::pin(error_taxonomy(s))),
    ];

    let mut failures = 0;
    for (i, (name, bound, check)) in criteria.into_iter().enumerate() {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        let start = Instant::now();
        let result = rt.block_on(async {
            match tokio::time::timeout(bound, tokio::spawn(check(seed.wrapping_add(i as u64)))).await {
                Err(_) => Err(format!("did not finish within {}s", bound.as_secs())),
                Ok(Err(join)) => Err(format!("panicked: {join}")),
                Ok(Ok(r)) => r,
            }
        });
        rt.shutdown_timeout(Duration::from_secs(1));
        let elapsed = start.elapsed();
        let result = result.and_then(|()| {
            if elapsed < bound {
                Ok(())
            } else {
                Err(format!("took {:.2}s, bound {}s", elapsed.as_secs_f64(), bound.as_secs()))
            }
        });
        match result {
            Ok(()) => println!(
                "PASS {}. {name} ({:.2}s < {}s)",
                i + 1,
                elapsed.as_secs_f64(),
                bound.as_secs()
            ),
            Err(why) => {
                failures += 1;
                println!("FAIL {}. {name}: {why} ({:.2}s)", i + 1, elapsed.as_secs_f64());
            }
        }
    }
    if failures > 0 {
        println!("{failures} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
