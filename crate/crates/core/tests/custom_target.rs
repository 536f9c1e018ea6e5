//! A target defined outside the crate goes through record, replay and a
//! campaign like the bundled ones.

use envfuzz_core::engine::NoClock;
use envfuzz_core::targets::{EnvCall, Fiber, FiberCx, Reply, Yield};
use envfuzz_core::trace::FaultClass;
use envfuzz_core::*;

#[derive(Clone, Debug, Default)]
struct Upper {
    step: u8,
}

impl Fiber for Upper {
    fn resume(&mut self, cx: &mut FiberCx<'_>, reply: Option<Reply>) -> Yield {
        match self.step {
            0 => {
                self.step = 1;
                Yield::Call(EnvCall::read(0, 64))
            }
            1 => {
                let Some(Reply::Data(line)) = reply else {
                    return Yield::Fault(FaultClass::Assertion);
                };
                cx.block(1);
                if line.is_empty() {
                    cx.block(2);
                    self.step = 3;
                    return Yield::Call(EnvCall::exit(0));
                }
                if line.starts_with(b"!!") {
                    cx.block(3);
                    return Yield::Fault(FaultClass::Memory);
                }
                self.step = 2;
                Yield::Call(EnvCall::write(1, &line.to_ascii_uppercase()))
            }
            2 => {
                self.step = 0;
                self.resume(cx, None)
            }
            _ => Yield::Done,
        }
    }

    fn box_clone(&self) -> Box<dyn Fiber> {
        Box::new(self.clone())
    }
}

fn upper() -> Process {
    Process::new("upper", Upper::default().into())
}

#[test]
fn custom_target_round_trip() {
    let env = EnvScript::new().source(0, "pipe", None, &[b"hello", b"world"]);
    let rec = record(upper(), &env).unwrap().recording;
    let sys: Vec<&str> = rec.records.iter().map(|r| r.sys.as_str()).collect();
    assert_eq!(sys, ["read", "write", "read", "write", "read", "exit"]);
    assert_eq!(rec.records[3].payload(), b"WORLD");

    let plain = replay_plain(&rec, upper()).unwrap();
    assert!(plain.divergence.is_zero());

    let cfg = CampaignConfig {
        max_passes: None,
        max_execs: Some(20_000),
        ..Default::default()
    };
    let c = fuzz_campaign(&rec, &upper, &cfg, &NoClock).unwrap();
    assert!(c
        .crashes
        .iter()
        .any(|e| e.fault == trace::Fault::Crash(FaultClass::Memory)));
}
