//! Persistence, the HTTP feedback API, and the pipeline stages behind the
//! `evicon` command.

pub mod api;
pub mod config;
pub mod engine;
pub mod http;
pub mod pipeline;
pub mod store;

pub use api::App;
pub use config::EngineConfig;
pub use engine::Engine;
pub use store::Store;
