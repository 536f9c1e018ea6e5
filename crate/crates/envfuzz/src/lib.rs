//! File formats, campaign directories and the command line for `envfuzz`.
//!
//! The engine itself lives in [`envfuzz_core`], which has no IO; this crate
//! reads and writes traces, env scripts and campaign output.

pub mod campaign;
pub mod cli;
pub mod etf;
pub mod script;
pub mod text;

use std::time::Instant;

/// Wall clock for campaign time budgets.
#[derive(Clone, Copy, Debug)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn start() -> Self {
        StdClock(Instant::now())
    }
}

impl envfuzz_core::Clock for StdClock {
    fn elapsed_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}
