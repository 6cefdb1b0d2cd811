//! Editing sessions with undo/redo, their on-disk store and the HTTP
//! service in front of them.

pub mod api;
pub mod config;
pub mod session;
pub mod store;

use std::sync::Arc;

use segedit_core::backend::Backends;
use segedit_core::Result;
use segedit_editnet::engine::EditEngine;
use segedit_editnet::model::{init_generator, ModelConfig};

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use session::{BackgroundInput, EditSession, EditStep, SessionState};
pub use store::SessionStore;

/// Working size of the generator used when no weights are configured.
pub const FALLBACK_WORKING_SIZE: usize = 32;

/// Builds the edit engine from the configured backends and weights.
pub fn build_engine(config: &ServiceConfig) -> Result<EditEngine> {
    let backends = Backends::from_config(&config.backends)?;
    match &config.weights {
        Some(path) => EditEngine::from_checkpoint(path, backends),
        None => {
            let model = ModelConfig {
                working_size: FALLBACK_WORKING_SIZE,
                ..ModelConfig::default()
            };
            Ok(EditEngine::new(init_generator(&model, 0)?, backends))
        }
    }
}

/// Application state for `config`; sessions already on disk load lazily.
pub fn build_state(config: &ServiceConfig) -> Result<Arc<AppState>> {
    Ok(AppState::new(build_engine(config)?, SessionStore::new(&config.session_root)?))
}

/// Serves the API until the listener fails.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let app = router(build_state(&config)?);
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    axum::serve(listener, app).await?;
    Ok(())
}
