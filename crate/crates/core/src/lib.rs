//! Materialized KV caches for retrieval-augmented generation.
//!
//! Document chunks are prefilled once at ingest time, their KV caches are
//! written to disk, and at query time the caches are loaded and the query is
//! prefilled on top of them instead of recomputing the documents.

pub mod model;
pub mod kvstore;
pub mod pipeline;
pub mod policy;
pub mod retrieval;
pub mod costmodel;
pub mod workload;
pub mod cli;
