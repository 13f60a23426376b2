//! Empty library crate; the package exists for its benchmarks.
