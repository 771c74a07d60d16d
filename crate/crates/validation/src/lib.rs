//! Holds the `acceptance` test target, which trains and scores the desk-scale
//! pipelines. It lives in its own package so that `cargo test --workspace`
//! runs it after every other crate's tests.
