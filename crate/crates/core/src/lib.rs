//! Runtime for a self-extending LLM agent: the model writes fenced code
//! blocks, program code is staged into the session directory, terminal
//! commands run under a policy, and every step is recorded in an
//! append-only transcript that can be replayed deterministically.

pub mod bm25;
pub mod config;
pub mod error;
pub mod executor;
pub mod gateway;
pub mod parser;
pub mod policy;
pub mod prompt;
pub mod replay;
pub mod scenario;
pub mod session;
pub mod snippets;
pub mod stub;
pub mod transcript;

pub use error::StorageFailure;
pub use executor::{ApprovalDecision, ApprovalOracle, ExecutionRecord, Executor, Verdict};
pub use gateway::{CompletionBackend, LiveBackend, ScriptedModel};
pub use parser::{parse_response, ParsedResponse, ParserConfig};
pub use policy::{Policy, PolicySpec};
pub use session::{Session, SessionConfig, SessionState, SessionStatus};
pub use transcript::{Transcript, TranscriptEvent};

/// BM25 scorer over `f64`.
pub type Bm25 = bm25::Bm25<f64>;
/// BM25 parameters over `f64`.
pub type Bm25Params = bm25::Bm25Params<f64>;
/// BM25 scorer over `f32`.
pub type Bm25F32 = bm25::Bm25<f32>;
