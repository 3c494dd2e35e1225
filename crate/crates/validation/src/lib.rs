//! Holds the `acceptance` test target (`tests/acceptance.rs`), which prints
//! one PASS/FAIL line per acceptance criterion:
//!
//! ```text
//! cargo test -p moss-validation --test acceptance
//! ```
