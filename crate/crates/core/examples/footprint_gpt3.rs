//! Memory footprint of a GPT-3-sized model, per layer and in total.
//!
//!     cargo run --example footprint_gpt3 [preset]

use hiermem::footprint::{layer_footprint, model_footprint, param_count, ByteUnit};
use hiermem::presets;

fn main() -> hiermem::Result<()> {
    let name = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "gpt3-175b".into());
    let cfg = presets::model(&name)?;
    let layer = layer_footprint(&cfg, false)?;
    let gib = ByteUnit::GiB;

    println!(
        "{name}: {} layers, d_model {}, d_ffn {}",
        cfg.num_layers, cfg.d_model, cfg.d_ffn
    );
    println!(
        "{:<22} {:>12} {:>12} {:>12}",
        "row", "params", "acts", "optims"
    );
    for r in &layer.rows {
        println!(
            "{:<22} {:>12} {:>12} {:>12}",
            r.layer_name,
            ByteUnit::MiB.format(r.params_bytes),
            ByteUnit::MiB.format(r.acts_bytes),
            ByteUnit::MiB.format(r.optims_bytes)
        );
    }
    println!("(rows in MiB)");

    let total = model_footprint(&cfg, false)?;
    let exact = model_footprint(&cfg, true)?;
    println!();
    println!("params  {:>10} GiB", gib.format(total.params_bytes));
    println!("acts    {:>10} GiB", gib.format(total.acts_bytes));
    println!("optims  {:>10} GiB", gib.format(total.optims_bytes));
    println!(
        "small terms add {} params / {} acts / {} optims bytes",
        exact.params_bytes - total.params_bytes,
        exact.acts_bytes - total.acts_bytes,
        exact.optims_bytes - total.optims_bytes
    );
    println!("{} FP16 parameters", param_count(&cfg)?);
    Ok(())
}
