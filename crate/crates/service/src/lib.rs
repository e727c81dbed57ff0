//! Review service: hard-case queue, correction gate, reward scoring,
//! annotation validation and dataset statistics over HTTP.

pub mod api;
pub mod store;

use std::path::Path;

use facecot_core::dataset::{dataset_stats, DatasetError};
use facecot_core::manifest::{read_manifest_file, ManifestError, ATTEMPTS, SAMPLES};
use facecot_core::pipeline::{collect_hard_cases, AnnotationAttempt};
use facecot_core::taxonomy::SampleRecord;
use thiserror::Error;

pub use api::{router, ApiError, AppState, ErrorCode, ServiceConfig, API_VERSION};
pub use store::{Event, QueueState, Store, StoreError};

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Inputs for building the service state.
#[derive(Debug, Default, Clone)]
pub struct StoreSources<'a> {
    /// Event log to replay and append to; in-memory when absent.
    pub events: Option<&'a Path>,
    /// Samples manifest, used for statistics and hard-case metadata.
    pub samples: Option<&'a Path>,
    /// Attempt log; hard cases found there and not yet queued are flagged.
    pub attempts: Option<&'a Path>,
}

pub fn load_store(src: &StoreSources<'_>) -> Result<Store, StartupError> {
    let mut store = match src.events {
        Some(p) => Store::open(p)?,
        None => Store::in_memory(),
    };
    let samples: Vec<SampleRecord> = match src.samples {
        Some(p) => {
            store.set_stats(dataset_stats(std::io::BufReader::new(std::fs::File::open(p)?))?);
            read_manifest_file(p, SAMPLES)?
        }
        None => Vec::new(),
    };
    if let Some(p) = src.attempts {
        let attempts: Vec<AnnotationAttempt> = read_manifest_file(p, ATTEMPTS)?;
        let added = store.flag_new(collect_hard_cases(&samples, &attempts))?;
        tracing::info!(added, queued = store.cases().len(), "hard cases imported");
    }
    Ok(store)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
