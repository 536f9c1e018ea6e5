//! Havoc mutation of input payloads and the per-seed power schedule.

use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hash::mix64;
use crate::trace::{SeedCorpus, SeedStats};

/// Hard cap on a mutant's length.
pub const MAX_PAYLOAD: usize = 64 * 1024;
/// Growth allowance for very short payloads, so empty ones can grow at all.
pub const MIN_GROWTH: usize = 16;
pub const INTERESTING: [u8; 5] = [0x00, 0x01, 0x7f, 0x80, 0xff];
pub const ARITH_MAX: u32 = 35;
/// Largest block touched by delete, duplicate and insert.
pub const MAX_BLOCK: usize = 32;

pub const BASE_ENERGY: u32 = 8;
pub const MAX_ENERGY: u32 = 64;
/// Novelty-free schedulings after which energy starts halving.
pub const STALE_AFTER: u32 = 4;

/// Deterministic random source.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Generator for one scheduling point of a campaign.
    pub fn for_tuple(campaign_seed: u64, record_seq: u64, pass: u64) -> Self {
        Self::seeded(mix64(mix64(mix64(campaign_seed) ^ record_seq) ^ pass))
    }

    /// Generator for the `branch`-th branch forked at `record_seq` in `pass`.
    pub fn for_branch(campaign_seed: u64, record_seq: u64, pass: u64, branch: u64) -> Self {
        Self::seeded(mix64(
            mix64(mix64(mix64(campaign_seed) ^ record_seq) ^ pass) ^ branch,
        ))
    }

    /// Uniform in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Uniform in `lo..=hi`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.0.gen_range(lo..=hi)
    }

    /// True with probability `num / den`.
    pub fn chance(&mut self, num: u32, den: u32) -> bool {
        self.0.gen_range(0..den) < num
    }

    pub fn byte(&mut self) -> u8 {
        self.0.gen()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operator {
    BitFlip,
    Interesting,
    Arith8,
    Arith16,
    Arith32,
    RandomByte,
    BlockDelete,
    BlockDuplicate,
    BlockInsert,
    Splice,
}

pub const OPERATORS: [Operator; 10] = [
    Operator::BitFlip,
    Operator::Interesting,
    Operator::Arith8,
    Operator::Arith16,
    Operator::Arith32,
    Operator::RandomByte,
    Operator::BlockDelete,
    Operator::BlockDuplicate,
    Operator::BlockInsert,
    Operator::Splice,
];

/// Length limit for mutants of an `original`-byte payload.
pub fn length_limit(original: usize) -> usize {
    original.saturating_mul(4).clamp(MIN_GROWTH, MAX_PAYLOAD)
}

impl Operator {
    /// Whether the operator can act on `data` under `limit`.
    fn applicable(self, data: &[u8], limit: usize, has_donor: bool) -> bool {
        let n = data.len();
        match self {
            Operator::BitFlip | Operator::Interesting | Operator::Arith8 | Operator::RandomByte => {
                n >= 1
            }
            Operator::Arith16 => n >= 2,
            Operator::Arith32 => n >= 4,
            Operator::BlockDelete => n >= 2,
            Operator::BlockDuplicate => n >= 1 && n < limit,
            Operator::BlockInsert => n < limit,
            Operator::Splice => has_donor,
        }
    }
}

fn arith_delta(rng: &mut Rng) -> i64 {
    let d = rng.between(1, ARITH_MAX as usize) as i64;
    if rng.chance(1, 2) {
        d
    } else {
        -d
    }
}

fn arith(data: &mut [u8], width: usize, rng: &mut Rng) {
    let pos = rng.below(data.len() - width + 1);
    let delta = arith_delta(rng);
    let big = rng.chance(1, 2);
    let slot = &mut data[pos..pos + width];
    let mut v: u64 = 0;
    for i in 0..width {
        let b = if big { slot[i] } else { slot[width - 1 - i] };
        v = (v << 8) | b as u64;
    }
    let mask = if width == 8 {
        u64::MAX
    } else {
        (1u64 << (8 * width)) - 1
    };
    let v = (v as i64).wrapping_add(delta) as u64 & mask;
    for i in 0..width {
        let b = (v >> (8 * (width - 1 - i))) as u8;
        if big {
            slot[i] = b;
        } else {
            slot[width - 1 - i] = b;
        }
    }
}

fn block_len(rng: &mut Rng, max: usize) -> usize {
    rng.between(1, max.clamp(1, MAX_BLOCK))
}

/// Inserts `block` at `pos`, truncated so the result fits in `limit`.
pub fn insert_block(data: &mut Vec<u8>, pos: usize, block: &[u8], limit: usize) {
    let room = limit.saturating_sub(data.len());
    let block = &block[..block.len().min(room)];
    data.splice(pos..pos, block.iter().copied());
}

/// Applies one operator in place. `donor` is another seed for splicing.
pub fn apply(op: Operator, data: &mut Vec<u8>, donor: Option<&[u8]>, limit: usize, rng: &mut Rng) {
    match op {
        Operator::BitFlip => {
            let bit = rng.below(data.len() * 8);
            data[bit / 8] ^= 0x80 >> (bit % 8);
        }
        Operator::Interesting => {
            let pos = rng.below(data.len());
            data[pos] = INTERESTING[rng.below(INTERESTING.len())];
        }
        Operator::Arith8 => arith(data, 1, rng),
        Operator::Arith16 => arith(data, 2, rng),
        Operator::Arith32 => arith(data, 4, rng),
        Operator::RandomByte => {
            let pos = rng.below(data.len());
            // never a no-op
            data[pos] ^= rng.between(1, 255) as u8;
        }
        Operator::BlockDelete => {
            let len = block_len(rng, data.len() - 1);
            let pos = rng.below(data.len() - len + 1);
            data.drain(pos..pos + len);
        }
        Operator::BlockDuplicate => {
            let len = block_len(rng, data.len());
            let from = rng.below(data.len() - len + 1);
            let to = rng.below(data.len() + 1);
            let block: Vec<u8> = data[from..from + len].to_vec();
            insert_block(data, to, &block, limit);
        }
        Operator::BlockInsert => {
            let len = block_len(rng, limit - data.len());
            let pos = rng.below(data.len() + 1);
            let block: Vec<u8> = (0..len).map(|_| rng.byte()).collect();
            insert_block(data, pos, &block, limit);
        }
        Operator::Splice => {
            let donor = donor.unwrap_or(&[]);
            let cut = rng.below(data.len() + 1);
            let from = rng.below(donor.len() + 1);
            data.truncate(cut);
            let room = limit.saturating_sub(data.len());
            let tail = &donor[from..];
            data.extend_from_slice(&tail[..tail.len().min(room)]);
        }
    }
}

fn pick_operator(data: &[u8], limit: usize, has_donor: bool, rng: &mut Rng) -> Option<Operator> {
    let mut ops = [Operator::BitFlip; 10];
    let mut n = 0;
    for op in OPERATORS {
        if op.applicable(data, limit, has_donor) {
            ops[n] = op;
            n += 1;
        }
    }
    (n > 0).then(|| ops[rng.below(n)])
}

/// Havoc: a stack of `1..=2^s` operators, `s` uniform in `1..=6`. Also
/// returns the operators applied, in order.
/// The length limit derives from the corpus's original payload (its first
/// seed), so mutants of mutants cannot keep growing.
pub fn mutate_traced(
    payload: &[u8],
    corpus: &SeedCorpus,
    rng: &mut Rng,
) -> (Vec<u8>, Vec<Operator>) {
    let original = corpus.seeds.first().map_or(payload.len(), |s| s.data.len());
    let limit = length_limit(original).max(payload.len());
    let is_donor = |d: &[u8]| !d.is_empty() && d != payload;
    let has_donor = corpus.seeds.iter().any(|s| is_donor(&s.data));
    let s = rng.between(1, 6);
    let stack = rng.between(1, 1 << s);
    let mut data = payload.to_vec();
    let mut applied = Vec::with_capacity(stack);
    for _ in 0..stack {
        let Some(op) = pick_operator(&data, limit, has_donor, rng) else {
            break;
        };
        let donor = (op == Operator::Splice).then(|| {
            // first eligible seed at or after a random start
            let n = corpus.seeds.len();
            let start = rng.below(n);
            (0..n)
                .map(|k| corpus.seeds[(start + k) % n].data.as_slice())
                .find(|d| is_donor(d))
                .unwrap_or_default()
        });
        apply(op, &mut data, donor, limit, rng);
        applied.push(op);
    }
    (data, applied)
}

pub fn mutate(payload: &[u8], corpus: &SeedCorpus, rng: &mut Rng) -> Vec<u8> {
    mutate_traced(payload, corpus, rng).0
}

/// Branches to generate from a seed at its next scheduling.
pub fn energy(stats: &SeedStats) -> u32 {
    let e = if stats.novel_streak > 0 {
        BASE_ENERGY << stats.novel_streak.min(3)
    } else if stats.stale_streak >= STALE_AFTER {
        BASE_ENERGY >> (stats.stale_streak - STALE_AFTER + 1).min(31)
    } else {
        BASE_ENERGY
    };
    e.clamp(1, MAX_ENERGY)
}

/// Credits a finished scheduling that yielded `interesting` new seeds.
pub fn update_stats(stats: &mut SeedStats, interesting: u64) {
    stats.times_chosen += 1;
    if interesting > 0 {
        stats.novel_streak += 1;
        stats.stale_streak = 0;
        stats.novelty_credit += interesting;
    } else {
        stats.novel_streak = 0;
        stats.stale_streak += 1;
    }
}
