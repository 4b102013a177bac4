//! Shared harness for the integration tests: a finite-difference gradient suite over
//! every differentiable operation, and explicit-loop reference implementations.
#![allow(dead_code)]

pub mod gradsuite;
pub mod oracles;
