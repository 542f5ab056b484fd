//! Two-phase scheduling under a shrinking GPU budget.

use hiermem::footprint::{tensor_inventory, Granularity};
use hiermem::presets;
use hiermem::scheduler::{plan, validate_schedule, Operation, ScheduleOptions, ShardingModel};
use hiermem::tracer::{build_trace, RecomputePolicy, TimingModel};
use hiermem::Error;

fn main() -> hiermem::Result<()> {
    let cfg = presets::model("gpt3-1.7b")?;
    let inv = tensor_inventory(&cfg, Granularity::PerLogicalTensor)?;
    let traces = build_trace(&inv, &TimingModel::default(), RecomputePolicy::On)?;
    let sharding = ShardingModel::new(8, 0, 4 << 20)?;
    let opts = ScheduleOptions {
        full_iteration: true,
    };

    for gib in [40u64, 16, 8, 6, 4] {
        let budget = gib << 30;
        match plan(&traces, budget, &sharding, opts) {
            Ok(p) => {
                assert!(validate_schedule(&p.phase2, &traces, budget).is_empty());
                // How far ahead of its compute each gather was issued, on average.
                let lead = |s: &hiermem::scheduler::Schedule| {
                    let g: Vec<_> = s
                        .tasks
                        .iter()
                        .filter(|t| t.operation == Operation::AllGather)
                        .collect();
                    g.iter()
                        .map(|t| (t.consumer - t.trigger_id) as f64)
                        .sum::<f64>()
                        / g.len().max(1) as f64
                };
                println!(
                    "{gib:>3} GiB: {} tasks, gather lead {:.2} -> {:.2} steps",
                    p.phase2.tasks.len(),
                    lead(&p.phase1),
                    lead(&p.phase2)
                );
            }
            Err(Error::Infeasible { layer, reason }) => {
                println!("{gib:>3} GiB: infeasible at layer {layer} ({reason})")
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
