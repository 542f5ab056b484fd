use std::sync::mpsc;
use std::time::Duration;

use hiermem::lockfree::{
    run, Clock, Delays, GradBuffer, GradMessage, Mode, RunOptions, ToyConfig, ToyProblem,
    TrainReport,
};
use proptest::prelude::*;

fn small() -> ToyConfig {
    ToyConfig {
        layers: 3,
        width: 6,
        train_samples: 512,
        val_samples: 256,
        ..ToyConfig::default()
    }
}

fn delays() -> impl Strategy<Value = Delays> {
    let d = || 0.0..5e-3f64;
    (d(), d(), d(), d(), d(), d(), d()).prop_map(
        |(h2d, d2h, fwd, bwd, ssd_fetch, ssd_store, cpu_update)| Delays {
            h2d,
            d2h,
            fwd,
            bwd,
            ssd_fetch,
            ssd_store,
            cpu_update,
        },
    )
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Sync), Just(Mode::Lockfree)]
}

fn check_report(r: &TrainReport, layers: usize) -> Result<(), TestCaseError> {
    prop_assert!(r.conserved(), "{:?}", r.conservation);
    prop_assert_eq!(r.rejected_updates, 0);
    let counted: u64 = r.staleness_histogram.values().sum();
    prop_assert_eq!(counted, r.iterations * layers as u64);
    prop_assert!(r.final_val_loss.is_finite());
    prop_assert!((0.0..=1.0).contains(&r.gpu_idle_fraction));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn virtual_runs_conserve_gradients(d in delays(), m in mode(), iters in 1..60u64, seed in 0..4u64) {
        let p = ToyProblem::new(&small(), seed).unwrap();
        let r = run(&p, &d, &RunOptions::new(m, iters), seed).unwrap();
        check_report(&r, 3)?;
        if m == Mode::Sync {
            prop_assert_eq!(r.max_staleness(), 0);
            prop_assert_eq!(r.updates_applied, iters * 3);
        }
        prop_assert!(r.updates_applied <= iters * 3);
        prop_assert_eq!(&r, &run(&p, &d, &RunOptions::new(m, iters), seed).unwrap());
    }

    #[test]
    fn staleness_bound_is_respected(d in delays(), bound in 0..4u64, iters in 1..60u64) {
        let p = ToyProblem::new(&small(), 1).unwrap();
        let opts = RunOptions { max_staleness: Some(bound), ..RunOptions::new(Mode::Lockfree, iters) };
        let r = run(&p, &d, &opts, 1).unwrap();
        check_report(&r, 3)?;
        prop_assert!(r.max_staleness() <= bound);
    }

    /// Whatever the interleaving of arrivals and fetches, every sent
    /// gradient is either consumed or still buffered.
    #[test]
    fn buffer_accounting_balances(ops in prop::collection::vec((0..3usize, 0..4u8, prop::collection::vec(-4.0f32..4.0, 5)), 1..80)) {
        let mut buf = GradBuffer::new(&[5, 5, 5]);
        let mut fetched = vec![None; 3];
        for (k, (layer, op, g)) in ops.into_iter().enumerate() {
            match op {
                0 | 1 => {
                    let msg = GradMessage::new(layer, k as u64, &g);
                    buf.note_sent(&msg);
                    buf.accumulate(&msg).unwrap();
                }
                2 => fetched[layer] = Some(buf.view(layer)),
                _ => {
                    if let Some(v) = fetched[layer].take() {
                        buf.consume(&v);
                    }
                }
            }
            for c in buf.conservation() {
                prop_assert!(c.balanced, "{:?}", c);
                prop_assert_eq!(c.sent_checksum, c.consumed_checksum + c.residual_checksum);
                prop_assert_eq!(c.messages_sent, c.messages_accumulated);
            }
        }
    }
}

#[test]
fn wrong_length_gradient_is_a_protocol_error() {
    let mut buf = GradBuffer::new(&[4]);
    assert!(buf.accumulate(&GradMessage::new(0, 0, &[1.0; 3])).is_err());
    assert!(buf.accumulate(&GradMessage::new(1, 0, &[1.0; 4])).is_err());
}

/// Threaded runs finish under a watchdog for every mode and bound.
#[test]
fn wall_clock_runs_do_not_deadlock() {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let p = ToyProblem::new(&small(), 3).unwrap();
        for mode in [Mode::Sync, Mode::Lockfree] {
            for bound in [None, Some(0), Some(2)] {
                for d in [
                    Delays::zero(),
                    Delays::ssd().scaled(0.05),
                    Delays::cpu().scaled(0.05),
                ] {
                    let opts = RunOptions {
                        clock: Clock::Wall { scale: 1.0 },
                        max_staleness: bound,
                        ..RunOptions::new(mode, 40)
                    };
                    let r = run(&p, &d, &opts, 3).unwrap();
                    tx.send((mode, bound, r.conserved(), r.max_staleness()))
                        .unwrap();
                }
            }
        }
    });
    for _ in 0..18 {
        let (mode, bound, conserved, stale) = rx
            .recv_timeout(Duration::from_secs(60))
            .expect("run stalled");
        assert!(conserved, "{mode:?} {bound:?}");
        assert!(stale <= bound.unwrap_or(u64::MAX));
        if mode == Mode::Sync {
            assert_eq!(stale, 0);
        }
    }
}
