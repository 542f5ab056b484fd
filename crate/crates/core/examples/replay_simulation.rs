//! Replay a schedule on the A100 server profile and compare where the
//! optimizer state lives.
//!
//!     cargo run --example replay_simulation -- [timeline.csv]

use hiermem::footprint::{tensor_inventory, Granularity};
use hiermem::presets;
use hiermem::scheduler::{plan, ScheduleOptions, ShardingModel};
use hiermem::simengine::{
    compare, simulate, timeline_csv, LinkKind, Resource, SimOptions, UpdateMode,
};
use hiermem::tracer::{build_trace, RecomputePolicy, TimingModel};

fn main() -> hiermem::Result<()> {
    let cfg = presets::model("gpt3-1.7b")?;
    let hw = presets::hardware("a100-server")?;
    let inv = tensor_inventory(&cfg, Granularity::PerLogicalTensor)?;
    let traces = build_trace(
        &inv,
        &TimingModel::from_rates(hw.gpu_rate, hw.cpu_rate),
        RecomputePolicy::On,
    )?;
    let p = plan(
        &traces,
        40 << 30,
        &ShardingModel::new(8, 0, 4 << 20)?,
        ScheduleOptions {
            full_iteration: true,
        },
    )?;

    let run = |update, hw: &hiermem::simengine::HardwareProfile, s| {
        let opts = SimOptions {
            iterations: 3,
            update,
            samples_per_iteration: (cfg.batch_size * 8) as f64,
        };
        simulate(s, &traces, hw, &opts)
    };

    let p1 = run(UpdateMode::SyncCpu, &hw, &p.phase1)?;
    let p2 = run(UpdateMode::SyncCpu, &hw, &p.phase2)?;
    println!(
        "phase 1 -> phase 2 speedup {:.4}",
        compare(&p1, &p2).speedup
    );

    for update in [UpdateMode::None, UpdateMode::SyncCpu, UpdateMode::SyncSsd] {
        let r = run(update, &hw, &p.phase2)?;
        println!(
            "{update:?}: makespan {:.3} s, gpu idle {:.1}%, pcie {:.1}%, ssd {:.1}%",
            r.makespan_s,
            100.0 * r.gpu_idle_fraction,
            100.0 * r.utilization(Resource::PcieH2d),
            100.0 * r.utilization(Resource::Ssd)
        );
    }

    // A faster SSD narrows the gap.
    for factor in [2.0, 4.0, 8.0] {
        let fast = hw.with_scaled_bandwidth(LinkKind::SsdIo, factor);
        let r = run(UpdateMode::SyncSsd, &fast, &p.phase2)?;
        println!(
            "ssd x{factor}: gpu idle {:.1}%",
            100.0 * r.gpu_idle_fraction
        );
    }

    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, timeline_csv(&p2))?;
        println!("timeline written to {path}");
    }
    Ok(())
}
