//! Behavioral diffing for black-box chat models.
//!
//! Given two models reachable through a chat-completion gateway, this crate
//! surfaces natural-language hypotheses about how their behavior differs and
//! evaluates those hypotheses with a comparative judge on held-out data.
//!
//! The main pieces:
//!
//! - [`corpus`] — prompt loading, paired response collection, generation /
//!   held-out splitting.
//! - [`gateway`] — uniform access to chat, embedding, and top-logprob
//!   endpoints, with a live OpenAI-compatible backend and a deterministic
//!   scripted mock for offline runs.
//! - [`diff_llm`] — the LLM pipeline: per-triplet difference extraction,
//!   attribution normalization, PCA, HDBSCAN clustering, cluster
//!   summarization, and direction assignment.
//! - [`diff_sae`] — the SAE pipeline: activation ingestion, completion-token
//!   max-pooling, per-feature activation-frequency differencing, candidate
//!   selection, relabeling, and summarization.
//! - [`judge`] — the comparative, position-debiased judge mapping
//!   (hypothesis, triplet) pairs to verdicts in {-1, 0, +1}.
//! - [`metrics`] — frequency, accuracy, vfd, acceptance rate, autorater
//!   scores, and t-distribution confidence intervals.
//! - [`kl_fork`] — fork-token detection via entropy-normalized KL over
//!   top-k logprobs, fork resampling, and hypothesis generation.
//! - [`runner`] — stage-based orchestration that persists line-delimited
//!   JSON artifacts plus a run manifest, and emits comparison reports.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `modeldiff` binary for the stage-oriented CLI.

pub mod corpus;
pub mod diff_llm;
pub mod diff_sae;
pub mod gateway;
pub mod hypothesis;
pub mod jsonl;
pub mod judge;
pub mod kl_fork;
pub mod metrics;
pub mod prompts;
pub mod runner;

pub use gateway::{GenerationConfig, Gateway};
pub use hypothesis::{Direction, Hypothesis, Method};
