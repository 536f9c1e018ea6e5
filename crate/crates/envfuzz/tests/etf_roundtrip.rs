use envfuzz::etf::{decode_recording, encode_recording};
use envfuzz::text::import_text_trace;
use envfuzz_core::trace::{Record, Recording};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = Record> {
    let bytes = proptest::collection::vec(any::<u8>(), 0..48);
    let fd = -1i64..1024;
    prop_oneof![
        (fd.clone(), bytes.clone(), 1i64..4096, any::<u32>()).prop_map(|(fd, b, cap, tid)| {
            let n = b.len() as i64;
            Record::new(0, tid % 4, "recv", Some(fd), vec![cap], Some(b), n)
        }),
        (fd.clone(), bytes, any::<bool>()).prop_map(|(fd, b, failed)| {
            let ret = if failed { -32 } else { b.len() as i64 };
            Record::new(0, 0, "write", Some(fd), vec![b.len() as i64], Some(b), ret)
        }),
        proptest::collection::vec((0i64..64, 0i64..32, 0i64..32), 0..4).prop_map(|es| {
            let args: Vec<i64> = es.iter().flat_map(|&(f, e, r)| [f, e, r]).collect();
            Record::new(0, 0, "poll", None, args, None, es.len() as i64)
        }),
        fd.clone()
            .prop_map(|fd| Record::new(0, 0, "close", Some(fd), vec![], None, 0)),
        any::<i64>().prop_map(|code| Record::new(0, 0, "exit", None, vec![code], None, 0)),
        (any::<i64>(), any::<i64>()).prop_map(|(a, r)| Record::new(
            0,
            2,
            "getpid",
            None,
            vec![a],
            None,
            r
        )),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn thousand_record_round_trip(
        records in proptest::collection::vec(record(), 1000),
        paths in proptest::collection::btree_map(0i64..8, "(/dev/|/etc/|socket:)[a-z]{1,6}", 0..4),
    ) {
        let mut rec = Recording::new("prop");
        for (fd, p) in &paths {
            rec.set_fd_path(*fd, p);
        }
        for r in records {
            rec.push(r);
        }
        let text = encode_recording(&rec);
        prop_assert_eq!(text.lines().count(), 1001);
        let back = decode_recording(&text).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode_recording(&back), text);
    }
}

#[test]
fn text_import_matches_native_recording() {
    let text = "\
0 0 read(0, \"mode=simple\\n\", 256) = 12
1 0 send(3, \"ready\\n\", 6) = 6
2 0 recv(3, \"1+2=\", 64) = 4
3 0 send(3, \"result: 3\\n\", 10) = 10
4 0 recv(3, \"\", 64) = 0
5 0 exit(0) = 0
";
    let imported = import_text_trace(text, "calc").unwrap();
    assert_eq!(imported.unknown_calls, 0);
    let mut expected = Recording::new("calc");
    expected.push(Record::new(
        0,
        0,
        "read",
        Some(0),
        vec![256],
        Some(b"mode=simple\n".to_vec()),
        12,
    ));
    expected.push(Record::new(
        0,
        0,
        "send",
        Some(3),
        vec![6],
        Some(b"ready\n".to_vec()),
        6,
    ));
    expected.push(Record::new(
        0,
        0,
        "recv",
        Some(3),
        vec![64],
        Some(b"1+2=".to_vec()),
        4,
    ));
    expected.push(Record::new(
        0,
        0,
        "send",
        Some(3),
        vec![10],
        Some(b"result: 3\n".to_vec()),
        10,
    ));
    expected.push(Record::new(
        0,
        0,
        "recv",
        Some(3),
        vec![64],
        Some(vec![]),
        0,
    ));
    expected.push(Record::new(0, 0, "exit", None, vec![0], None, 0));
    assert_eq!(imported.recording, expected);
    let back = decode_recording(&encode_recording(&imported.recording)).unwrap();
    assert_eq!(back, expected);
}
