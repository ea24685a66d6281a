//! Bench-only crate; see benches/pipeline.rs.
