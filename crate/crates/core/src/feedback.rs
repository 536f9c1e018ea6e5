//! Edge coverage and output-state feedback.
//!
//! Coverage is the usual hit-count bitmap: each `(prev, cur)` block edge is
//! hashed into one of [`MAP_SIZE`] slots and its count bucketed into one of
//! eight classes. Output states come from a 64-bit simhash of each output
//! payload, clustered by Hamming distance.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::hash::mix64;

pub const MAP_SIZE: usize = 1 << 16;

/// Hamming radius within which two output signatures are the same state.
pub const THETA: u32 = 16;

/// Predecessor of the first state of every execution.
pub const START_STATE: u32 = u32::MAX;

pub fn edge_slot(prev: u32, cur: u32) -> u16 {
    mix64(((prev as u64) << 32) | cur as u64) as u16
}

/// Bucket bit for a raw hit count; 0 for no hits.
pub fn bucket(count: u32) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        _ => 128,
    }
}

/// Bucketed coverage of one execution, stored as sorted `(slot, bucket)`
/// pairs for the slots that were hit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoverageMap {
    hits: Vec<(u16, u8)>,
}

impl CoverageMap {
    pub fn get(&self, slot: u16) -> u8 {
        self.hits
            .binary_search_by_key(&slot, |&(s, _)| s)
            .map_or(0, |i| self.hits[i].1)
    }

    pub fn slots_hit(&self) -> usize {
        self.hits.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, u8)> + '_ {
        self.hits.iter().copied()
    }

    pub fn to_dense(&self) -> Vec<u8> {
        let mut map = vec![0u8; MAP_SIZE];
        for &(s, b) in &self.hits {
            map[s as usize] = b;
        }
        map
    }
}

pub fn fold_edges(edges: &[(u32, u32)]) -> CoverageMap {
    let mut slots: Vec<u16> = edges.iter().map(|&(p, c)| edge_slot(p, c)).collect();
    slots.sort_unstable();
    let mut hits = Vec::new();
    let mut i = 0;
    while i < slots.len() {
        let s = slots[i];
        let mut j = i;
        while j < slots.len() && slots[j] == s {
            j += 1;
        }
        hits.push((s, bucket((j - i).min(u32::MAX as usize) as u32)));
        i = j;
    }
    CoverageMap { hits }
}

/// All-time coverage: the union of bucket bits seen per slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirginMap {
    seen: Vec<u8>,
    population: usize,
}

impl Default for VirginMap {
    fn default() -> Self {
        VirginMap {
            seen: vec![0; MAP_SIZE],
            population: 0,
        }
    }
}

impl VirginMap {
    pub fn has_new_bits(&self, cov: &CoverageMap) -> bool {
        cov.iter().any(|(s, b)| self.seen[s as usize] & b != b)
    }

    /// Merges `cov`; true if any new bucket bit was set.
    pub fn merge(&mut self, cov: &CoverageMap) -> bool {
        let mut new = false;
        for (s, b) in cov.iter() {
            let slot = &mut self.seen[s as usize];
            if *slot & b != b {
                if *slot == 0 {
                    self.population += 1;
                }
                *slot |= b;
                new = true;
            }
        }
        new
    }

    /// Slots with any coverage.
    pub fn population(&self) -> usize {
        self.population
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.seen
    }
}

fn feature(a: u8, b: u8) -> u64 {
    mix64(0x5eed_0000_0000_0000 | ((a as u64) << 8) | b as u64)
}

fn single_feature(byte: u8) -> u64 {
    mix64(0x0001_0000_0000_0000 | byte as u64)
}

/// 64-bit simhash over byte 2-grams.
pub fn state_signature(output: &[u8]) -> u64 {
    if output.is_empty() {
        return 0;
    }
    let mut votes = [0i32; 64];
    let mut vote = |h: u64| {
        for (bit, v) in votes.iter_mut().enumerate() {
            if h >> bit & 1 == 1 {
                *v += 1;
            } else {
                *v -= 1;
            }
        }
    };
    if output.len() < 2 {
        vote(single_feature(output[0]));
    } else {
        for w in output.windows(2) {
            vote(feature(w[0], w[1]));
        }
    }
    votes
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .fold(0u64, |sig, (bit, _)| sig | 1 << bit)
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Output-state clusters and the transitions seen between them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateModel {
    pub theta: u32,
    reps: Vec<u64>,
    transitions: BTreeSet<(u32, u32)>,
}

impl Default for StateModel {
    fn default() -> Self {
        Self::new(THETA)
    }
}

impl StateModel {
    pub fn new(theta: u32) -> Self {
        StateModel {
            theta,
            reps: Vec::new(),
            transitions: BTreeSet::new(),
        }
    }

    pub fn representatives(&self) -> &[u64] {
        &self.reps
    }

    pub fn states(&self) -> usize {
        self.reps.len()
    }

    pub fn transitions(&self) -> usize {
        self.transitions.len()
    }

    pub fn knows_transition(&self, from: u32, to: u32) -> bool {
        self.transitions.contains(&(from, to))
    }

    /// Nearest representative within θ (lowest id on ties), else a new state.
    pub fn assign_state(&mut self, sig: u64) -> (u32, bool) {
        let best = self
            .reps
            .iter()
            .enumerate()
            .map(|(id, &r)| (hamming(r, sig), id))
            .filter(|&(d, _)| d <= self.theta)
            .min();
        match best {
            Some((_, id)) => (id as u32, false),
            None => {
                self.reps.push(sig);
                ((self.reps.len() - 1) as u32, true)
            }
        }
    }

    /// State ids of each output in order, preceded by [`START_STATE`].
    pub fn state_sequence<'a, I>(&mut self, outputs: I) -> Vec<u32>
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        let mut seq = vec![START_STATE];
        seq.extend(
            outputs
                .into_iter()
                .map(|o| self.assign_state(state_signature(o)).0),
        );
        seq
    }

    /// Adds every consecutive pair of `states`; true if any was new.
    pub fn merge_transitions(&mut self, states: &[u32]) -> bool {
        let mut new = false;
        for w in states.windows(2) {
            new |= self.transitions.insert((w[0], w[1]));
        }
        new
    }
}

/// Global feedback maps for one campaign.
#[derive(Clone, Debug, Default)]
pub struct Feedback {
    pub virgin: VirginMap,
    pub states: StateModel,
    /// When false nothing is ever interesting; maps still grow for stats.
    pub enabled: bool,
}

impl Feedback {
    pub fn new(enabled: bool) -> Self {
        Feedback {
            enabled,
            ..Self::default()
        }
    }

    /// Folds an execution into the global maps. True iff it set a new
    /// virgin bit or showed a new transition, and feedback is enabled.
    pub fn is_interesting(&mut self, cov: &CoverageMap, states: &[u32]) -> bool {
        let new_cov = self.virgin.merge(cov);
        let new_trans = self.states.merge_transitions(states);
        self.enabled && (new_cov || new_trans)
    }
}
