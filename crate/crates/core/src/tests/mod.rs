//! Property tests and oracle cross-checks over the public API.

#[path = "../../tests/common/mod.rs"]
mod common;
mod properties;
