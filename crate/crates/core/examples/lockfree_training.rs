//! Toy regression trained with synchronous and lock-free updating.

use hiermem::lockfree::{run, Delays, Mode, RunOptions, ToyConfig, ToyProblem};

fn main() -> hiermem::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let problem = ToyProblem::new(&ToyConfig::default(), seed)?;
    let delays = Delays::ssd();

    let mut tput = Vec::new();
    for mode in [Mode::Sync, Mode::Lockfree] {
        let r = run(&problem, &delays, &RunOptions::new(mode, 2000), seed)?;
        assert!(r.conserved());
        println!(
            "{mode:?}: val loss {:.5}, {:.0} samples/s, gpu idle {:.1}%, staleness mean {:.2} max {}, {} updates",
            r.final_val_loss,
            r.samples_per_s.unwrap_or(0.0),
            100.0 * r.gpu_idle_fraction,
            r.mean_staleness(),
            r.max_staleness(),
            r.updates_applied
        );
        println!("  staleness histogram {:?}", r.staleness_histogram);
        tput.push(r.samples_per_s.unwrap_or(0.0));
    }
    println!("speedup {:.2}x", tput[1] / tput[0]);

    // Bounding staleness trades some of that back.
    for bound in [0, 1, 2] {
        let o = RunOptions {
            max_staleness: Some(bound),
            ..RunOptions::new(Mode::Lockfree, 2000)
        };
        let r = run(&problem, &delays, &o, seed)?;
        println!(
            "max staleness {bound}: {:.0} samples/s, val loss {:.5}",
            r.samples_per_s.unwrap_or(0.0),
            r.final_val_loss
        );
    }
    Ok(())
}
