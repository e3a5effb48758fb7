use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use sati_core::providers::{ProviderSettings, Providers};
use sati_core::session::{EventLog, ServiceConfig, ServiceParts, SessionService, SystemClock};
use sati_core::VectorIndex;
use sati_server::{app, spawn_idle_sweeper, AppState};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "sati-server", about = "Meditation session API and client host")]
struct Args {
    #[arg(long, env = "BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory for the event log and vector index. In-memory when unset.
    #[arg(long, env = "DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Built client bundle to serve at `/`.
    #[arg(long, env = "STATIC_DIR")]
    static_dir: Option<PathBuf>,
    /// Require this key as `Authorization: Bearer` or `x-api-key`.
    #[arg(long, env = "API_KEY")]
    api_key: Option<String>,
    /// Return static-condition scripts immediately instead of waiting out the pseudo delay.
    #[arg(long)]
    no_delay: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();

    let settings = ProviderSettings::from_env().context("provider settings")?;
    let providers = Providers::from_settings(&settings).context("building providers")?;
    let dim = providers.embedder.dim();
    let (index, log) = match &args.data_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let index = VectorIndex::open(dir.join("index"), dim).context("opening vector index")?;
            let log = EventLog::open(dir.join("events.jsonl")).context("opening event log")?;
            (index, log)
        }
        None => (VectorIndex::new(dim), EventLog::memory()),
    };
    let parts = ServiceParts::new(providers, Arc::new(index), Arc::new(SystemClock))?;
    let config = ServiceConfig::from_lookup(|k| std::env::var(k).ok())?;
    let svc = Arc::new(SessionService::new(parts, config, log).context("replaying event log")?);
    tracing::info!(mode = ?settings.mode, sessions = svc.sessions().len(), "service ready");

    spawn_idle_sweeper(svc.clone());
    let state = AppState { svc, api_key: args.api_key, apply_delay: !args.no_delay };
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    tracing::info!(addr = %args.bind, "listening");
    axum::serve(listener, app(state, args.static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
