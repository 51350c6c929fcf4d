//! Host crate for the acceptance suite in `tests/acceptance.rs`.
//!
//! Kept separate from the library so that the suite runs after every other
//! test binary and its verdict lines close the test log.
