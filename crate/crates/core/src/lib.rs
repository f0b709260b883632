//! Quality estimation before completion (QEBC) for neural code completion.
//!
//! A code completion system backed by a large code model burns a full
//! inference on every prompt, including prompts that cannot yield a useful
//! completion. This crate implements the early-rejection mechanism around
//! that observation: a lightweight Transformer regressor (TCQE) predicts,
//! from the prompt alone, how well the target model would complete it, and a
//! gate rejects prompts whose predicted score falls below a configurable
//! threshold.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`corpus`]: ingest code snippets and split each into a prompt and a
//!   ground-truth completion.
//! - [`tokenizer`]: byte-level BPE shared by the splitter, oracle, and
//!   estimator.
//! - [`metrics`]: smoothed BLEU, CrystalBLEU, and the gate metric Acc@t.
//! - [`oracle`]: stand-ins for the target completion model (an n-gram
//!   reference model and an external HTTP client) plus dataset labeling.
//! - [`estimator`]: the TCQE regressor, its training loop, and the
//!   rule-based baselines (RAND, CC, COC).
//! - [`gate`]: the accept/reject decision, the expected-gain cost model,
//!   analytic FLOPs estimates, and an HTTP gate service.
//! - [`eval`]: threshold sweeps, prompt-pattern features, exact Shapley
//!   attribution, and sampling statistics.

pub mod corpus;
pub mod estimator;
pub mod eval;
pub mod gate;
pub mod metrics;
pub mod oracle;
mod textscan;
pub mod tokenizer;
