//! Early-exit inference laboratory for small decoder-only transformers.
//!
//! The crate is organized around four pieces:
//!
//! - [`model`]: a layer-indexed transformer supporting truncated forward
//!   passes, intermediate-layer decoding through the shared unembedding,
//!   a portable weight file format, and synthetic planted-exit models.
//! - [`exit`]: the early-exit mechanism — label-token matching with a
//!   confidence threshold, the dynamic layer-by-layer exit loop, and
//!   fixed-layer exit with latency accounting.
//! - [`profiler`]: layer-truncation accuracy profiling, optimal exit
//!   layer selection with a restoration check, and per-layer treatment
//!   effect statistics.
//! - [`bench`]: dataset ingestion, the 8:1 profiling/eval split,
//!   policy evaluation, and report rendering.

pub mod bench;
pub mod exit;
pub mod math;
pub mod model;
pub mod profiler;
