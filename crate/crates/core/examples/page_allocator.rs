//! Page allocation with tail sharing, tier moves and merging.

use hiermem::footprint::{tensor_inventory, Granularity, TensorKind};
use hiermem::pagemem::{PageManager, Tier, TierPool};
use hiermem::presets;

const MIB: u64 = 1 << 20;

fn main() -> hiermem::Result<()> {
    let page = 4 * MIB;
    let mut mgr = PageManager::with_pools(vec![
        TierPool::new(Tier::Gpu, 512 * MIB, page)?,
        TierPool::new(Tier::Cpu, 2048 * MIB, page)?,
        TierPool::new(Tier::Ssd, 4096 * MIB, page)?,
    ])?;

    // One layer of the 1.7B model, per Table-1 row.
    let cfg = presets::model("gpt3-1.7b")?.with_layers(1);
    let inv = tensor_inventory(&cfg, Granularity::PerTableRow)?;
    for t in inv.iter().filter(|t| t.kind == TensorKind::Param16) {
        let m = mgr.allocate(Tier::Cpu, t)?;
        println!(
            "{:<28} {:>10} B -> {} pages",
            t.name,
            t.bytes,
            m.page_list.len()
        );
    }
    let cpu = mgr.pool(Tier::Cpu).expect("cpu pool");
    println!(
        "cpu pages in use: {}, fragmentation {:.4}",
        cpu.allocated_pages(),
        mgr.fragmentation(Tier::Cpu)
    );

    // Prefetch the first parameter to the GPU page by page.
    let first = inv
        .iter()
        .find(|t| t.kind == TensorKind::Param16)
        .expect("a parameter");
    let pages = mgr.tensor(first.id).expect("allocated").page_list.clone();
    for p in &pages {
        let d = mgr.move_page(*p, Tier::Gpu)?;
        println!("move {:?} -> {:?} ({} bytes)", d.src, d.dst, d.bytes);
    }
    mgr.complete_all_moves();
    println!("{} resident: {:?}", first.name, mgr.residency(first.id)?);

    // Optimizer states are the only tensors allowed on SSD.
    if let Some(opt) = inv.iter().find(|t| t.kind == TensorKind::Optim32) {
        mgr.allocate(Tier::Ssd, opt)?;
        println!("{} placed on SSD", opt.name);
    }

    let bad = mgr.check_invariants();
    assert!(bad.is_empty(), "{bad:?}");
    println!("invariants hold");
    Ok(())
}
