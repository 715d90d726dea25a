//! HTTP service that keeps small classifiers up to date over a stream of
//! experiences.
//!
//! [`Service`] owns the registry, the experiments and the job queue, and runs
//! training on worker threads. [`router`] exposes it as a JSON API under
//! `/v1`. The `claas-server` binary wires both to a TCP listener.

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod service;

pub use api::router;
pub use config::{parse_config, ExperimentConfig, TriggerMode, TriggerRule};
pub use error::{ApiError, ErrorBody};
pub use service::Service;

/// Serves `service` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Service,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
