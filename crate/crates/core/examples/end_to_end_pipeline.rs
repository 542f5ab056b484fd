//! Whole pipeline from one experiment config, writing the report and CSV
//! series next to each other.
//!
//!     cargo run --example end_to_end_pipeline -- [preset] [out_dir]

use std::path::PathBuf;

use hiermem::presets::{self, ToyRun};
use hiermem::report::{cmd_plot, run_pipeline, PlotKind};

fn main() -> hiermem::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "gpt3-1.7b".into());
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "target/pipeline".into()));

    let mut cfg = presets::experiment(&name)?;
    cfg.toy = Some(ToyRun::default());
    let out = run_pipeline(&cfg)?;
    let r = &out.report;

    let fp = r.footprint.as_ref().expect("footprint section");
    println!(
        "params {} B, acts {} B, optims {} B",
        fp.totals.params_bytes, fp.totals.acts_bytes, fp.totals.optims_bytes
    );
    if let Some(s) = r.schedule.as_ref().and_then(|s| s.phase2.as_ref()) {
        println!(
            "schedule: {} tasks, peak {} of {} bytes",
            s.tasks, s.peak_bytes, s.gpu_budget
        );
    }
    if let Some(c) = r.simulation.as_ref().and_then(|s| s.comparison.as_ref()) {
        println!("phase 2 speedup over phase 1: {:.4}", c.speedup);
    }
    if let Some(t) = &r.training {
        println!(
            "lock-free training speedup: {:.2}",
            t.speedup.unwrap_or(f64::NAN)
        );
    }

    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), r.to_json()?)?;
    for (kind, file) in [
        (PlotKind::Timeline, "timeline.csv"),
        (PlotKind::Utilization, "utilization.csv"),
        (PlotKind::Loss, "loss.csv"),
    ] {
        std::fs::write(dir.join(file), cmd_plot(r, kind)?)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
