//! Evaluation and dataset-construction harness for LLM-generated plotting
//! code: sandboxed execution, multi-round self-debugging, error taxonomy,
//! metrics, and the dataset forge.

pub mod cli;
pub mod codeblock;
pub mod config;
pub mod digest;
pub mod forge;
pub mod gateway;
pub mod library;
pub mod metrics;
pub mod pool;
pub mod prompts;
pub mod sandbox;
pub mod selfdebug;
pub mod task_store;
pub mod taxonomy;
