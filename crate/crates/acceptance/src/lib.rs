//! Acceptance gate for `uncha`. Everything lives in `tests/acceptance.rs`;
//! run it with `cargo test --release -p uncha-acceptance`.
