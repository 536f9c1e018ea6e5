use std::collections::HashMap;

use envfuzz_core::feedback::{
    bucket, edge_slot, fold_edges, hamming, state_signature, StateModel, MAP_SIZE, THETA,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Reference values computed with a separate implementation of the slot hash
// and the 2-gram simhash.
#[test]
fn frozen_edge_slots() {
    assert_eq!(edge_slot(0, 0), 0xcdaf);
    assert_eq!(edge_slot(1, 2), 0x7022);
    assert_eq!(edge_slot(u32::MAX, 7), 0xfbd5);
}

#[test]
fn frozen_signatures() {
    let ok = state_signature(b"RESP 200 OK\n");
    let err = state_signature(b"RESP 404 ERR\n");
    assert_eq!(ok, 0x5aab_3df8_e748_9b3f);
    assert_eq!(err, 0x4829_84b4_38b2_58b0);
    assert_eq!(hamming(ok, err), 34);
    assert!(hamming(ok, err) > THETA, "status codes must separate");
    assert_eq!(state_signature(b"result: 3\n"), 0x2972_69bd_9bd1_67ea);
    assert_eq!(state_signature(b"x"), 0x26fe_8317_495a_d89c);
    assert_eq!(state_signature(b""), 0);
}

fn bucket_oracle(n: u32) -> u8 {
    const UPPER: [(u32, u8); 8] = [
        (1, 1),
        (2, 2),
        (3, 4),
        (7, 8),
        (15, 16),
        (31, 32),
        (127, 64),
        (u32::MAX, 128),
    ];
    if n == 0 {
        return 0;
    }
    UPPER.iter().find(|&&(hi, _)| n <= hi).unwrap().1
}

#[test]
fn fold_matches_dense_count_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // A small block universe so that slots are hit many times.
    let edges: Vec<(u32, u32)> = (0..100_000)
        .map(|_| (rng.gen_range(0..64u32), rng.gen_range(0..64u32)))
        .collect();
    let mut counts: HashMap<u16, u32> = HashMap::new();
    for &(p, c) in &edges {
        *counts.entry(edge_slot(p, c)).or_default() += 1;
    }
    let mut dense = vec![0u8; MAP_SIZE];
    for (&s, &n) in &counts {
        dense[s as usize] = bucket_oracle(n);
    }
    let map = fold_edges(&edges);
    assert_eq!(map.to_dense(), dense);
    assert_eq!(map.slots_hit(), counts.len());
    for n in 0..300 {
        assert_eq!(bucket(n), bucket_oracle(n), "count {n}");
    }
    assert_eq!(bucket(u32::MAX), 128);
}

#[test]
fn identical_outputs_have_distance_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let len = rng.gen_range(0..40);
        let out: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        assert_eq!(
            hamming(state_signature(&out), state_signature(&out.clone())),
            0
        );
    }
}

#[test]
fn single_byte_edits_stay_within_theta() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut within = 0;
    for _ in 0..1000 {
        let out: Vec<u8> = (0..12).map(|_| rng.gen()).collect();
        let mut edited = out.clone();
        let i = rng.gen_range(0..12);
        edited[i] = edited[i].wrapping_add(rng.gen_range(1..=255));
        if hamming(state_signature(&out), state_signature(&edited)) <= THETA {
            within += 1;
        }
    }
    // The reference implementation gives 93 to 95% on runs of this size.
    assert!(within >= 900, "{within}/1000 within θ");
}

#[test]
fn cluster_separation_after_every_insertion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = StateModel::default();
    let mut last_len = 0;
    for _ in 0..10_000 {
        // Mix of near duplicates and fresh outputs.
        let sig = if rng.gen_bool(0.5) && !model.representatives().is_empty() {
            let reps = model.representatives();
            let base = reps[rng.gen_range(0..reps.len())];
            (0..rng.gen_range(0..24)).fold(base, |s, _| s ^ 1 << rng.gen_range(0..64))
        } else {
            rng.gen()
        };
        let (id, new) = model.assign_state(sig);
        let reps = model.representatives();
        assert_eq!(new, reps.len() > last_len);
        last_len = reps.len();
        if !new {
            assert!(hamming(reps[id as usize], sig) <= THETA);
        }
        if new {
            let fresh = *reps.last().unwrap();
            for &r in &reps[..reps.len() - 1] {
                assert!(hamming(r, fresh) > THETA);
            }
        }
    }
    let reps = model.representatives();
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            assert!(hamming(reps[i], reps[j]) > THETA);
        }
    }
}
