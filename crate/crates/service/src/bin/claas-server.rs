//! Environment:
//!
//! - `CLAAS_BIND`: listen address (default `127.0.0.1:8080`; port 0 picks a
//!   free port)
//! - `CLAAS_STORAGE`: storage root (default `./claas-data`)
//! - `CLAAS_WORKERS`: training worker threads (default 1)

use anyhow::Context;
use claas_service::{serve, Service};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let bind = std::env::var("CLAAS_BIND").unwrap_or_else(|_| "127.0.0.1:8080".into());
    let root = std::env::var("CLAAS_STORAGE").unwrap_or_else(|_| "./claas-data".into());
    let workers: usize = match std::env::var("CLAAS_WORKERS") {
        Ok(v) => v.parse().with_context(|| format!("CLAAS_WORKERS={v:?} is not a count"))?,
        Err(_) => 1,
    };
    anyhow::ensure!(workers >= 1, "CLAAS_WORKERS must be at least 1");

    let service = Service::open(&root, workers).with_context(|| format!("opening storage at {root}"))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        // Printed on stdout so callers binding port 0 can find the server.
        println!("listening on {}", listener.local_addr()?);
        log::info!("storage {root}, {workers} worker(s)");
        serve(listener, service.clone(), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;
    service.shutdown();
    Ok(())
}
