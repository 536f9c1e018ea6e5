//! Record-and-replay environment fuzzing.
//!
//! A target program talks to its environment only through env-calls (a
//! syscall-shaped boundary). A run against a concrete environment is recorded
//! into a [`trace::Recording`]; the [`engine`] then replays that recording
//! faithfully along a spine and forks mutant branches at every input
//! interaction, continuing each branch under relaxed replay.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, campaign
//! persistence and the command line live in the `envfuzz` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod engine;
pub mod feedback;
pub mod hash;
pub mod mutation;
pub mod recorder;
pub mod replay;
pub mod targets;
pub mod trace;

pub use engine::{
    fuzz_campaign, replay_plain, triage, Campaign, CampaignConfig, CampaignReport, Clock,
    ExecOutcome, ExecStatus,
};
pub use recorder::{bundled_script, record, EnvScript};
pub use targets::{bundled_target, Process};
pub use trace::{classify, Record, Recording, SyscallClass};
