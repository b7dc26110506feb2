//! Running the service: bind, serve, stop.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use gaia_core::platform::{Platform, PlatformError};
use gaia_core::store::StoreError;

use crate::api::{router, AppState};
use crate::config::ServiceConfig;

/// How long a stop waits for in-flight requests before giving up on them.
pub const DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("store is corrupt: {0}")]
    StoreCorrupt(StoreError),
    #[error(transparent)]
    Platform(PlatformError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

impl From<PlatformError> for ServiceError {
    fn from(e: PlatformError) -> Self {
        match e {
            PlatformError::Store(e @ StoreError::Corrupt { .. }) => ServiceError::StoreCorrupt(e),
            e => ServiceError::Platform(e),
        }
    }
}

pub struct ServiceHandle {
    addr: SocketAddr,
    platform: Arc<Platform>,
    stop: watch::Sender<bool>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    /// Stops accepting connections, closes notification sockets with a close
    /// frame, drains in-flight requests and flushes the store.
    pub async fn stop(self) -> Result<(), ServiceError> {
        let _ = self.stop.send(true);
        self.platform.notifier.close_all();
        match tokio::time::timeout(DRAIN_TIMEOUT, self.task).await {
            Ok(Ok(result)) => result?,
            Ok(Err(e)) => log::error!("server task failed: {e}"),
            Err(_) => log::warn!("requests still running after {DRAIN_TIMEOUT:?}; stopping anyway"),
        }
        let platform = self.platform;
        tokio::task::spawn_blocking(move || platform.flush())
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))??;
        log::info!("stopped");
        Ok(())
    }
}

/// Opens the data directory and starts serving on the configured address.
pub async fn run(cfg: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let listener = TcpListener::bind(cfg.listen)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: cfg.listen,
            source,
        })?;
    let addr = listener.local_addr()?;
    let opts = cfg.platform_options();
    let platform = tokio::task::spawn_blocking(move || Platform::open(cfg.tree, cfg.users, opts))
        .await
        .map_err(|e| std::io::Error::other(e.to_string()))??;
    let platform = Arc::new(platform);
    for (id, error) in platform.engine.invalid_rules() {
        log::warn!("rule {id} is inactive: {error}");
    }

    let (stop, stopped) = watch::channel(false);
    let app = router(AppState {
        platform: platform.clone(),
        shutdown: stopped.clone(),
    });
    let mut signal = stopped;
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = signal.wait_for(|s| *s).await;
            })
            .await
    });
    log::info!("listening on {addr}");
    Ok(ServiceHandle {
        addr,
        platform,
        stop,
        task,
    })
}
