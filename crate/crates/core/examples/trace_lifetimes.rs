//! Tensor lifetimes over one training iteration, with and without
//! activation recomputation.

use hiermem::footprint::{tensor_inventory, ByteUnit, Granularity, TensorKind};
use hiermem::presets;
use hiermem::tracer::{
    build_trace, live_bytes_profile, validate_trace, LogicalTimeline, RecomputePolicy, TimingModel,
};

fn main() -> hiermem::Result<()> {
    let cfg = presets::model("gpt3-1.7b")?.with_layers(4);
    let inv = tensor_inventory(&cfg, Granularity::PerLogicalTensor)?;
    let timeline = LogicalTimeline::new(cfg.num_layers as usize);
    let timing = TimingModel::default();

    for policy in [RecomputePolicy::Off, RecomputePolicy::On] {
        let traces = build_trace(&inv, &timing, policy)?;
        assert!(validate_trace(&traces, &timeline).is_empty());
        let profile = live_bytes_profile(&traces, timeline.total_ops());
        println!("recompute {policy:?}: {} traces", traces.len());
        for (id, bytes) in profile.iter().enumerate() {
            let op = timeline.op(id);
            let bar = "#".repeat((bytes >> 28) as usize);
            println!(
                "  op {id:>2} {:?} L{} {:>8} MiB {bar}",
                op.pass,
                op.layer,
                ByteUnit::MiB.format(*bytes)
            );
        }
    }

    // Where the first layer's activations live under each policy.
    let off = build_trace(&inv, &timing, RecomputePolicy::Off)?;
    let on = build_trace(&inv, &timing, RecomputePolicy::On)?;
    let acts = |ts: &[hiermem::tracer::TensorTrace]| {
        ts.iter()
            .filter(|t| t.layer == 0 && t.kind == TensorKind::Activation16)
            .map(|t| format!("{} [{}, {}]", t.name, t.first_id, t.end_id))
            .collect::<Vec<_>>()
    };
    println!("layer 0 activations, stored:     {:?}", acts(&off));
    println!("layer 0 activations, recomputed: {:?}", acts(&on));
    Ok(())
}
