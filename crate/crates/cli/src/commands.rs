use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use rpctunnel::config::{read_config_file, ConfigLayer, LogLevel, ParsedConfig, RuntimeConfig};
use rpctunnel::demo::{run_demo_server, DemoClient, DemoProc};
use rpctunnel::gateway::{run_cgi, CgiEnv, Gateway, GatewayServer};
use rpctunnel::portmap::{MappingRegistry, PortmapServer};
use rpctunnel::tcpfilter::run_tcpfilter;
use rpctunnel::tunnel::run_rpcfilter;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;

use crate::{
    generate_test_certs, Cli, Command, DemoClientArgs, GatewayCommand, PolicyArgs, UsageError,
    EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, RPCFILTER_SYNOPSIS,
};

const DEMO_CLIENT_SYNOPSIS: &str = "demo-client --proc <null|echo|add> [args] --portmapper <host:port>";

fn init_logging(level: LogLevel) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level.to_string()));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Cancels `token` on Ctrl-C or SIGTERM.
fn spawn_signal_handler(token: CancellationToken) {
    tokio::spawn(async move {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            match signal(SignalKind::terminate()) {
                Ok(mut term) => {
                    tokio::select! {
                        _ = tokio::signal::ctrl_c() => {}
                        _ = term.recv() => {}
                    }
                }
                Err(_) => {
                    let _ = tokio::signal::ctrl_c().await;
                }
            }
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;
        info!("shutting down");
        token.cancel();
    });
}

pub(crate) async fn run(cli: Cli) -> i32 {
    match dispatch(cli).await {
        Ok(code) => code,
        Err(e) => match e.downcast_ref::<UsageError>() {
            Some(u) => {
                eprintln!("error: {u}");
                EXIT_USAGE
            }
            None => {
                eprintln!("error: {e:#}");
                EXIT_RUNTIME
            }
        },
    }
}

async fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let level = cli.log_level;
    let shutdown = CancellationToken::new();
    match cli.command {
        Command::Gateway(cmd) => return gateway(cmd, level, shutdown).await,
        Command::GenTestCerts(a) => {
            init_logging(level.unwrap_or_default());
            let paths = generate_test_certs(&a.out_dir, &a.subject_alt_names)?;
            println!("{paths}");
            return Ok(EXIT_OK);
        }
        Command::DemoClient(a) => {
            init_logging(level.unwrap_or(LogLevel::Error));
            return demo_client(a).await;
        }
        _ => {}
    }
    init_logging(level.unwrap_or_default());
    spawn_signal_handler(shutdown.clone());
    match cli.command {
        Command::Tcpfilter(a) => {
            run_tcpfilter(a.source_port, &a.destination_host, a.destination_port, shutdown)
                .await
                .with_context(|| format!("tcpfilter on port {}", a.source_port))?;
        }
        Command::Rpcfilter(a) => {
            let cfg = a.endpoint_config()?;
            if let Err(e) = cfg.validate() {
                return Err(UsageError { message: e.to_string(), synopsis: RPCFILTER_SYNOPSIS }.into());
            }
            run_rpcfilter(cfg, shutdown).await?;
        }
        Command::Portmap(a) => {
            let server = PortmapServer::bind(&a.listen, Arc::new(MappingRegistry::new()))
                .await
                .with_context(|| format!("cannot bind {}", a.listen))?;
            info!(listen = %server.local_addr()?, "portmapper running");
            server.run(shutdown).await?;
        }
        Command::DemoServer(a) => {
            let listen = rpctunnel::tcpfilter::host_port(&a.host, a.port);
            run_demo_server(&listen, &a.portmapper, shutdown).await?;
        }
        Command::Gateway(_) | Command::GenTestCerts(_) | Command::DemoClient(_) => unreachable!(),
    }
    Ok(EXIT_OK)
}

fn file_layer(policy: &PolicyArgs) -> anyhow::Result<ParsedConfig> {
    match &policy.config {
        Some(path) => read_config_file(path).map_err(|e| UsageError { message: e.to_string(), synopsis: "gateway --config <path>" }.into()),
        None => Ok(ParsedConfig::default()),
    }
}

fn effective(
    flags: ConfigLayer,
    file: ParsedConfig,
    level: Option<LogLevel>,
) -> anyhow::Result<RuntimeConfig> {
    let mut cfg = flags
        .over(file.layer)
        .resolve()
        .map_err(|e| UsageError { message: e.to_string(), synopsis: "gateway serve|cgi [OPTIONS]" })?;
    if let Some(l) = level {
        cfg.log_level = l;
    }
    init_logging(cfg.log_level);
    for w in &file.warnings {
        warn!("config: {w}");
    }
    Ok(cfg)
}

async fn gateway(cmd: GatewayCommand, level: Option<LogLevel>, shutdown: CancellationToken) -> anyhow::Result<i32> {
    match cmd {
        GatewayCommand::Serve(a) => {
            let cfg = effective(a.layer(), file_layer(&a.policy)?, level)?;
            if a.policy.print_config {
                print!("{cfg}");
                return Ok(EXIT_OK);
            }
            if cfg.policy.allowed_programs.is_empty() {
                warn!("no --allow-prog given; every call will be refused");
            }
            let gw = Arc::new(Gateway::new(cfg.policy.clone(), cfg.portmapper.clone()));
            let server = GatewayServer::bind(&cfg.listen, cfg.tls.as_ref(), gw).await?;
            spawn_signal_handler(shutdown.clone());
            server.run(shutdown).await?;
            Ok(EXIT_OK)
        }
        GatewayCommand::Cgi(a) => {
            let cfg = effective(a.policy.layer(), file_layer(&a.policy)?, Some(level.unwrap_or(LogLevel::Error)))?;
            if a.policy.print_config {
                print!("{cfg}");
                return Ok(EXIT_OK);
            }
            let gw = Gateway::new(cfg.policy, cfg.portmapper);
            let env = CgiEnv::from_env();
            Ok(run_cgi(std::io::stdin().lock(), std::io::stdout().lock(), &env, &gw).await)
        }
    }
}

fn demo_usage(message: impl Into<String>) -> anyhow::Error {
    UsageError { message: message.into(), synopsis: DEMO_CLIENT_SYNOPSIS }.into()
}

enum DemoAction {
    Null,
    Echo(Vec<u8>),
    Add(u32, u32),
}

fn demo_action(a: &DemoClientArgs) -> anyhow::Result<DemoAction> {
    match a.procedure {
        DemoProc::Null if a.args.is_empty() => Ok(DemoAction::Null),
        DemoProc::Null => Err(demo_usage("null takes no arguments")),
        DemoProc::Echo => Ok(DemoAction::Echo(a.args.join(" ").into_bytes())),
        DemoProc::Add => {
            let [x, y] = a.args.as_slice() else {
                return Err(demo_usage("add takes two numbers"));
            };
            let parse = |s: &String| s.parse::<u32>().map_err(|_| demo_usage(format!("not a u32: {s:?}")));
            Ok(DemoAction::Add(parse(x)?, parse(y)?))
        }
    }
}

async fn demo_client(a: DemoClientArgs) -> anyhow::Result<i32> {
    let action = demo_action(&a)?;
    let timeout = Duration::from_secs(10);
    let mut client = match &a.server {
        Some(addr) => DemoClient::connect(addr, timeout).await?,
        None => DemoClient::via_portmapper(&a.portmapper, timeout).await?,
    };
    match action {
        DemoAction::Null => {
            client.null().await?;
            println!("ok");
        }
        DemoAction::Echo(data) => println!("{}", String::from_utf8_lossy(&client.echo(&data).await?)),
        DemoAction::Add(x, y) => println!("{}", client.add(x, y).await?),
    }
    Ok(EXIT_OK)
}
