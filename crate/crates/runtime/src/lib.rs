//! Model backends, the response cache and the per-mode pipeline.
//!
//! This is the only crate that touches the network. The mock backend makes
//! every pipeline runnable offline and bit-for-bit repeatable.

pub mod backend;
pub mod cache;
pub mod config;
pub mod http;
pub mod limit;
pub mod mock;
pub mod pipeline;

pub use backend::{Backend, BackendError, BackendKind, BackendProfile, BackendRegistry, ModelReply, ModelRequest};
pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use config::{Config, ConfigError};
pub use http::HttpBackend;
pub use limit::LimitedBackend;
pub use mock::{mock_reply, MockBackend, MockScript};
pub use pipeline::{run_mode, CallStage, ModeRun, Outcome, PipelineError, RunContext, RunOptions, RunRecord};
