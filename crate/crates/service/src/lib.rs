//! Publishes validated corpora as immutable snapshots and serves them over a
//! read-only REST API.

pub mod api;
pub mod pipeline;
pub mod snapshot;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::{router, ApiError, AppState};
pub use snapshot::{build_snapshot, PublishError, PublishInputs, PublishSettings, Snapshot, SnapshotMeta, Stage};
pub use store::{Artifact, Manifest, SnapshotStore, StoreError};

pub const PORT_ENV: &str = "POLIMATCH_PORT";
pub const DATA_DIR_ENV: &str = "POLIMATCH_DATA_DIR";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Server(#[source] std::io::Error),
}

/// Opens the store and serves until the process is stopped.
pub async fn serve(cfg: ServeConfig) -> Result<(), ServeError> {
    let store = Arc::new(SnapshotStore::open(&cfg.data_dir)?);
    let listener = tokio::net::TcpListener::bind(cfg.addr)
        .await
        .map_err(|source| ServeError::Bind { addr: cfg.addr, source })?;
    tracing::info!(addr = %cfg.addr, snapshot = ?store.active().map(|s| s.id()), "serving");
    let app = router(AppState { store });
    axum::serve(listener, app).await.map_err(ServeError::Server)
}
