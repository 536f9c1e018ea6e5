use std::collections::BTreeMap;

use envfuzz_core::replay::{build_miniqueues, BranchResponse, DivergenceLog, RelaxedReplay};
use envfuzz_core::targets::{EnvCall, PollEntry, PollEvents, Reply};
use envfuzz_core::trace::{Record, Recording};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Read(i64, Vec<u8>),
    Recv(i64, Vec<u8>),
    Write(i64, Vec<u8>),
    Send(i64, Vec<u8>),
    Poll(Vec<i64>),
    Close(i64),
    Getpid,
}

fn op() -> impl Strategy<Value = Op> {
    let fd = 0i64..5;
    // Inputs are non-empty: a recorded empty read is itself an end-of-file.
    let input = proptest::collection::vec(any::<u8>(), 1..12);
    let bytes = proptest::collection::vec(any::<u8>(), 0..12);
    prop_oneof![
        (fd.clone(), input.clone()).prop_map(|(f, b)| Op::Read(f, b)),
        (fd.clone(), input).prop_map(|(f, b)| Op::Recv(f, b)),
        (fd.clone(), bytes.clone()).prop_map(|(f, b)| Op::Write(f, b)),
        (fd.clone(), bytes).prop_map(|(f, b)| Op::Send(f, b)),
        proptest::collection::vec(fd.clone(), 1..4).prop_map(Op::Poll),
        fd.prop_map(Op::Close),
        Just(Op::Getpid),
    ]
}

fn build(ops: &[Op]) -> Recording {
    let mut rec = Recording::new("random");
    for op in ops {
        let r = match op {
            Op::Read(fd, b) => Record::new(
                0,
                0,
                "read",
                Some(*fd),
                vec![64],
                Some(b.clone()),
                b.len() as i64,
            ),
            Op::Recv(fd, b) => Record::new(
                0,
                0,
                "recv",
                Some(*fd),
                vec![64],
                Some(b.clone()),
                b.len() as i64,
            ),
            Op::Write(fd, b) => Record::new(
                0,
                0,
                "write",
                Some(*fd),
                vec![b.len() as i64],
                Some(b.clone()),
                b.len() as i64,
            ),
            Op::Send(fd, b) => Record::new(
                0,
                1,
                "send",
                Some(*fd),
                vec![b.len() as i64],
                Some(b.clone()),
                b.len() as i64,
            ),
            Op::Poll(fds) => {
                let args = fds.iter().flat_map(|&f| [f, 1, 1]).collect();
                Record::new(0, 0, "poll", None, args, None, fds.len() as i64)
            }
            Op::Close(fd) => Record::new(0, 0, "close", Some(*fd), vec![], None, 0),
            Op::Getpid => Record::new(0, 0, "getpid", None, vec![], None, 42),
        };
        rec.push(r);
    }
    rec
}

/// Stable partition by fd, written independently of the library.
fn partition_oracle(suffix: &[Record]) -> BTreeMap<i64, Vec<u64>> {
    let mut q: BTreeMap<i64, Vec<u64>> = BTreeMap::new();
    for r in suffix {
        if let (true, Some(fd)) = (r.is_input() || r.is_output(), r.fd) {
            q.entry(fd).or_default().push(r.seq);
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn merged_queues_reproduce_suffix(ops in proptest::collection::vec(op(), 0..40), cut in 0usize..40) {
        let rec = build(&ops);
        let cut = cut.min(rec.len());
        let suffix = &rec.records[cut..];
        let q = build_miniqueues(suffix);
        prop_assert_eq!(q.merged(), suffix.to_vec());
        let oracle = partition_oracle(suffix);
        for fd in 0..5 {
            let got: Vec<u64> = q.queue(fd).iter().map(|r| r.seq).collect();
            prop_assert_eq!(got, oracle.get(&fd).cloned().unwrap_or_default());
        }
    }
}

/// Reference model of the emulated poll: queues of (seq, is_input).
fn poll_model(
    queues: &mut BTreeMap<i64, Vec<(u64, bool)>>,
    entries: &[(i64, u8)],
) -> (i64, Vec<u8>, u64) {
    const IN: u8 = 0x01;
    const OUT: u8 = 0x04;
    const HUP: u8 = 0x10;
    let mut reorders = 0;
    loop {
        let revents: Vec<u8> = entries
            .iter()
            .map(|&(fd, ev)| match queues.get(&fd).and_then(|q| q.first()) {
                None => HUP,
                Some(&(_, input)) => ev & if input { IN } else { OUT },
            })
            .collect();
        let count = revents.iter().filter(|&&r| r != 0).count() as i64;
        if count > 0 || entries.is_empty() {
            return (count, revents, reorders);
        }
        // Every polled queue is non-empty here, so the pick is among them.
        let fd = entries
            .iter()
            .map(|&(fd, _)| (queues[&fd][0].0, fd))
            .min()
            .unwrap()
            .1;
        let wanted = entries.iter().filter(|e| e.0 == fd).fold(0, |a, e| a | e.1);
        let q = queues.get_mut(&fd).unwrap();
        let hit = q
            .iter()
            .position(|&(_, input)| wanted & if input { IN } else { OUT } != 0);
        match hit {
            Some(i) => {
                let e = q.remove(i);
                q.insert(0, e);
            }
            None => {
                q.remove(0);
            }
        }
        if q.is_empty() {
            queues.remove(&fd);
        }
        reorders += 1;
    }
}

fn io_record() -> impl Strategy<Value = (i64, bool)> {
    (0i64..4, any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn poll_matches_reference_model(
        recs in proptest::collection::vec(io_record(), 0..24),
        entries in proptest::collection::vec((0i64..5, 0u8..4), 0..5),
    ) {
        let mut rec = Recording::new("poll");
        for &(fd, input) in &recs {
            let r = if input {
                Record::new(0, 0, "recv", Some(fd), vec![8], Some(vec![1]), 1)
            } else {
                Record::new(0, 0, "send", Some(fd), vec![1], Some(vec![2]), 1)
            };
            rec.push(r);
        }
        let entries: Vec<(i64, u8)> = entries
            .into_iter()
            .map(|(fd, bits)| (fd, (bits & 1) | if bits & 2 != 0 { 0x04 } else { 0 }))
            .collect();

        let mut model: BTreeMap<i64, Vec<(u64, bool)>> = BTreeMap::new();
        for r in &rec.records {
            model.entry(r.fd.unwrap()).or_default().push((r.seq, r.is_input()));
        }
        let (want_count, want_revents, want_reorders) = poll_model(&mut model, &entries);

        let mut q = build_miniqueues(&rec.records);
        let mut fds: Vec<PollEntry> = entries.iter().map(|&(fd, ev)| PollEntry::new(fd, PollEvents(ev))).collect();
        let mut log = DivergenceLog::default();
        let count = q.emulate_poll(&mut fds, &mut log);

        prop_assert_eq!(count, want_count);
        prop_assert_eq!(count, fds.iter().filter(|e| !e.revents.is_empty()).count() as i64);
        prop_assert_eq!(fds.iter().map(|e| e.revents.bits()).collect::<Vec<_>>(), want_revents);
        prop_assert_eq!(log.reordered_io, want_reorders);
        prop_assert_eq!(count == 0, entries.is_empty());
        for fd in 0..5 {
            let got: Vec<(u64, bool)> = q.queue(fd).iter().map(|r| (r.seq, r.is_input())).collect();
            prop_assert_eq!(got, model.get(&fd).cloned().unwrap_or_default());
        }
    }
}

/// A random sequence of calls a branch might issue.
#[derive(Clone, Debug)]
enum Call {
    Read(i64, usize),
    Write(i64, Vec<u8>),
    Poll(Vec<(i64, u8)>),
    Close(i64),
}

fn call() -> impl Strategy<Value = Call> {
    prop_oneof![
        4 => (0i64..5, 1usize..16).prop_map(|(f, c)| Call::Read(f, c)),
        2 => (0i64..5, proptest::collection::vec(any::<u8>(), 0..6)).prop_map(|(f, b)| Call::Write(f, b)),
        2 => proptest::collection::vec((0i64..5, prop_oneof![Just(1u8), Just(4u8), Just(5u8)]), 1..4).prop_map(Call::Poll),
        1 => (0i64..5).prop_map(Call::Close),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Every byte served under relaxed replay is a contiguous piece of a
    /// recorded payload on the same fd, served front to back.
    #[test]
    fn served_bytes_come_from_the_recording(
        ops in proptest::collection::vec(op(), 0..30),
        calls in proptest::collection::vec(call(), 0..60),
    ) {
        let rec = build(&ops);
        let mut relaxed = RelaxedReplay::new(&rec.records);
        let mut served: BTreeMap<i64, Vec<Vec<u8>>> = BTreeMap::new();
        let mut eof: BTreeMap<i64, bool> = BTreeMap::new();
        for c in &calls {
            let env = match c {
                Call::Read(fd, cap) => EnvCall::read(*fd, *cap),
                Call::Write(fd, b) => EnvCall::write(*fd, b),
                Call::Poll(es) => EnvCall::poll(es.iter().map(|&(f, e)| PollEntry::new(f, PollEvents(e))).collect()),
                Call::Close(fd) => EnvCall::close(*fd),
            };
            let reply = match relaxed.respond(&env, |_| None) {
                BranchResponse::Reply(r) => r,
                BranchResponse::Exit => break,
            };
            match (c, reply) {
                (Call::Read(fd, cap), Reply::Data(d)) => {
                    prop_assert!(d.len() <= *cap);
                    if d.is_empty() {
                        eof.insert(*fd, true);
                    } else {
                        prop_assert!(!eof.get(fd).copied().unwrap_or(false), "data after EOF on fd {}", fd);
                    }
                    served.entry(*fd).or_default().push(d);
                }
                (Call::Write(_, b), Reply::Ret(n)) => prop_assert_eq!(n, b.len() as i64),
                (Call::Poll(es), Reply::Ready { count, revents }) => {
                    prop_assert_eq!(revents.len(), es.len());
                    prop_assert_eq!(count, revents.iter().filter(|r| !r.is_empty()).count() as i64);
                    for (&(fd, _), r) in es.iter().zip(&revents) {
                        if eof.get(&fd).copied().unwrap_or(false) {
                            prop_assert_eq!(*r, PollEvents::HUP);
                        }
                    }
                }
                (Call::Close(_), Reply::Ret(r)) => prop_assert_eq!(r, 0),
                (c, r) => prop_assert!(false, "reply {:?} to {:?}", r, c),
            }
        }
        // Each read is a slice of one recorded payload on its fd, and the
        // reads of an fd walk those payloads in order, each record possibly
        // cut short (the rest dropped by a reorder) or skipped entirely.
        for (fd, pieces) in served {
            let payloads: Vec<&[u8]> = rec
                .records
                .iter()
                .filter(|r| r.is_input() && r.fd == Some(fd))
                .map(|r| r.payload())
                .collect();
            let pieces: Vec<&[u8]> = pieces.iter().map(Vec::as_slice).filter(|p| !p.is_empty()).collect();
            prop_assert!(walks_in_order(&pieces, &payloads), "fd {} served {:?} from {:?}", fd, pieces, payloads);
        }
    }
}

/// Whether `reads` can be produced by reading `payloads` front to back,
/// where each payload is read in consecutive chunks from its start, may be
/// abandoned early, and may be skipped.
fn walks_in_order(reads: &[&[u8]], payloads: &[&[u8]]) -> bool {
    fn go(reads: &[&[u8]], payloads: &[&[u8]], offset: usize) -> bool {
        let Some((first, rest_reads)) = reads.split_first() else {
            return true;
        };
        let Some((p, rest_payloads)) = payloads.split_first() else {
            return false;
        };
        // Continue the current payload.
        if p[offset..].starts_with(first) && go(rest_reads, payloads, offset + first.len()) {
            return true;
        }
        // Or move on to a later one from its start.
        go(reads, rest_payloads, 0)
    }
    go(reads, payloads, 0)
}

#[test]
fn spec_poll_table() {
    let in_rec = {
        let mut r = Recording::new("t");
        r.push(Record::new(
            0,
            0,
            "recv",
            Some(3),
            vec![8],
            Some(b"x".to_vec()),
            1,
        ));
        r.push(Record::new(
            0,
            0,
            "send",
            Some(3),
            vec![1],
            Some(b"y".to_vec()),
            1,
        ));
        r
    };
    let mut log = DivergenceLog::default();

    let mut q = build_miniqueues(&in_rec.records);
    let mut fds = [PollEntry::new(3, PollEvents::IN)];
    assert_eq!(
        (q.emulate_poll(&mut fds, &mut log), fds[0].revents),
        (1, PollEvents::IN)
    );

    let mut q = build_miniqueues(&[]);
    let mut fds = [PollEntry::new(7, PollEvents::IN)];
    assert_eq!(
        (q.emulate_poll(&mut fds, &mut log), fds[0].revents),
        (1, PollEvents::HUP)
    );

    let mut q = build_miniqueues(&in_rec.records);
    let mut fds = [PollEntry::new(3, PollEvents::OUT)];
    assert_eq!(
        (q.emulate_poll(&mut fds, &mut log), fds[0].revents),
        (1, PollEvents::OUT)
    );
    assert_eq!(q.head(3).unwrap().sys, "send");
}
