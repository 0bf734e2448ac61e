//! Command-line harness for the deterministic-annealing mapping designer.
//!
//! The binary (`damap`) wraps the `damap` core library with four verbs:
//! `run` (anneal or baseline-fit one configuration), `sweep` (side-channel
//! power sweep producing a cost table), `score` (re-evaluate an exported
//! mapping CSV by quadrature and Monte Carlo), and `selftest` (fast
//! numerical invariant suite).  This library crate holds everything except
//! argument parsing so the pieces stay unit-testable.

pub mod config;
pub mod io;
pub mod report;
pub mod run;
pub mod selftest;
