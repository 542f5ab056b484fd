//! Page-granular memory manager over pre-allocated GPU/CPU/SSD pools.
//!
//! Every pool is carved into fixed-size pages at construction. A page holds
//! at most two tensors. Tensors of at least one page occupy
//! `ceil(bytes / page_bytes)` pages and only their final partial page (the
//! tail) can host a second tensor. Smaller tensors get their own page unless
//! they fit into the slack of such a tail (first fit by page index).
//!
//! Moves free the source page and claim a destination page; no bytes are
//! copied. The destination stays in flight until [`PageManager::complete_move`].

use std::collections::{BTreeMap, BTreeSet};

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::{TensorKind, TensorSpec};

pub const DEFAULT_PAGE_BYTES: u64 = 4 << 20;
pub const MIN_PAGE_BYTES: u64 = 64 << 10;
pub const MAX_OCCUPANTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Gpu,
    Cpu,
    Ssd,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Gpu, Tier::Cpu, Tier::Ssd];

    pub fn device_index(self) -> i32 {
        match self {
            Tier::Gpu => 0,
            Tier::Cpu => 1,
            Tier::Ssd => 2,
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpu" => Ok(Tier::Gpu),
            "cpu" => Ok(Tier::Cpu),
            "ssd" => Ok(Tier::Ssd),
            other => Err(Error::Usage(format!("unknown tier '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageRef {
    pub tier: Tier,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupant {
    pub tensor_id: u64,
    pub occupied_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub page_id: u32,
    pub tier: Tier,
    pub total_bytes: u64,
    pub available_bytes: u64,
    pub occupants: ArrayVec<Occupant, MAX_OCCUPANTS>,
    /// Holds the tail of a multi-page tensor and can take one more tenant.
    pub shareable: bool,
    pub in_flight: bool,
}

impl Page {
    fn empty(page_id: u32, tier: Tier, total_bytes: u64) -> Self {
        Page {
            page_id,
            tier,
            total_bytes,
            available_bytes: total_bytes,
            occupants: ArrayVec::new(),
            shareable: false,
            in_flight: false,
        }
    }

    pub fn occupied_bytes(&self) -> u64 {
        self.occupants.iter().map(|o| o.occupied_bytes).sum()
    }

    fn reset(&mut self) {
        self.available_bytes = self.total_bytes;
        self.occupants.clear();
        self.shareable = false;
        self.in_flight = false;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub allocations: u64,
    pub releases: u64,
    pub moves_in: u64,
    pub moves_out: u64,
    pub peak_allocated_pages: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierPool {
    pub tier: Tier,
    pub capacity_bytes: u64,
    pub page_bytes: u64,
    pub pages: Vec<Page>,
    pub free: BTreeSet<u32>,
    pub stats: PoolStats,
}

impl TierPool {
    /// Carve `capacity_bytes` into pages of `page_bytes`, all free.
    pub fn new(tier: Tier, capacity_bytes: u64, page_bytes: u64) -> Result<Self> {
        if !page_bytes.is_power_of_two() || page_bytes < MIN_PAGE_BYTES {
            return Err(Error::InvalidConfig(format!(
                "page size {page_bytes} must be a power of two >= {MIN_PAGE_BYTES}"
            )));
        }
        if !capacity_bytes.is_multiple_of(page_bytes) {
            return Err(Error::InvalidConfig(format!(
                "{tier:?} capacity {capacity_bytes} is not a multiple of the page size {page_bytes}"
            )));
        }
        let count = capacity_bytes / page_bytes;
        let count = u32::try_from(count).map_err(|_| {
            Error::InvalidConfig(format!("{count} pages exceed the page index range"))
        })?;
        Ok(TierPool {
            tier,
            capacity_bytes,
            page_bytes,
            pages: (0..count)
                .map(|i| Page::empty(i, tier, page_bytes))
                .collect(),
            free: (0..count).collect(),
            stats: PoolStats::default(),
        })
    }

    pub fn page_count(&self) -> u64 {
        self.pages.len() as u64
    }

    pub fn free_pages(&self) -> u64 {
        self.free.len() as u64
    }

    pub fn allocated_pages(&self) -> u64 {
        self.page_count() - self.free_pages()
    }

    pub fn free_bytes(&self) -> u64 {
        self.free_pages() * self.page_bytes
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated_pages() * self.page_bytes
    }

    pub fn occupied_bytes(&self) -> u64 {
        self.pages.iter().map(Page::occupied_bytes).sum()
    }

    pub fn is_allocated(&self, index: u32) -> bool {
        (index as usize) < self.pages.len() && !self.free.contains(&index)
    }

    /// `1 - occupied / allocated`; an empty pool has no fragmentation.
    pub fn fragmentation(&self) -> f64 {
        let allocated = self.allocated_bytes();
        if allocated == 0 {
            return 0.0;
        }
        1.0 - self.occupied_bytes() as f64 / allocated as f64
    }

    fn claim(&mut self) -> Option<u32> {
        let idx = self.free.pop_first()?;
        self.stats.peak_allocated_pages =
            self.stats.peak_allocated_pages.max(self.allocated_pages());
        Some(idx)
    }

    fn claim_at(&mut self, idx: u32) {
        let removed = self.free.remove(&idx);
        debug_assert!(removed, "page {idx} was not free");
        self.stats.peak_allocated_pages =
            self.stats.peak_allocated_pages.max(self.allocated_pages());
    }

    fn give_back(&mut self, idx: u32) {
        self.pages[idx as usize].reset();
        self.free.insert(idx);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Fp16,
    Fp32,
}

impl Dtype {
    pub fn bytes(self) -> u64 {
        match self {
            Dtype::Fp16 => 2,
            Dtype::Fp32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagedTensor {
    pub tensor_id: u64,
    pub name: String,
    pub kind: TensorKind,
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub page_list: Vec<PageRef>,
}

impl ManagedTensor {
    pub fn bytes(&self) -> u64 {
        self.shape.iter().product::<u64>() * self.dtype.bytes()
    }
}

/// Where a tensor can be computed on: one tier, or not ready (pages spread
/// over tiers or still in flight), which serializes as device index -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    Ready(Tier),
    NotReady,
}

impl Residency {
    pub fn device_index(self) -> i32 {
        match self {
            Residency::Ready(t) => t.device_index(),
            Residency::NotReady => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseReport {
    pub freed_bytes: u64,
    pub pages_freed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferDescriptor {
    pub bytes: u64,
    pub src_tier: Tier,
    pub dst_tier: Tier,
    pub src: PageRef,
    pub dst: PageRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub tensor_id: u64,
    pub tier: Tier,
    pub before: Vec<u32>,
    pub after: Vec<u32>,
    pub relocated_pages: usize,
    pub contiguous: bool,
}

/// All tier pools plus the tensor table. Single owner; clone for snapshots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PageManager {
    pools: BTreeMap<Tier, TierPool>,
    tensors: BTreeMap<u64, ManagedTensor>,
}

impl PageManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_pools(pools: impl IntoIterator<Item = TierPool>) -> Result<Self> {
        let mut mgr = Self::new();
        for pool in pools {
            mgr.add_pool(pool)?;
        }
        Ok(mgr)
    }

    pub fn add_pool(&mut self, pool: TierPool) -> Result<()> {
        if self.pools.contains_key(&pool.tier) {
            return Err(Error::InvalidConfig(format!(
                "duplicate {:?} pool",
                pool.tier
            )));
        }
        self.pools.insert(pool.tier, pool);
        Ok(())
    }

    pub fn pool(&self, tier: Tier) -> Option<&TierPool> {
        self.pools.get(&tier)
    }

    pub fn pools(&self) -> impl Iterator<Item = &TierPool> {
        self.pools.values()
    }

    pub fn tensor(&self, id: u64) -> Option<&ManagedTensor> {
        self.tensors.get(&id)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &ManagedTensor> {
        self.tensors.values()
    }

    pub fn page(&self, page: PageRef) -> Option<&Page> {
        self.pools.get(&page.tier)?.pages.get(page.index as usize)
    }

    fn pool_mut(&mut self, tier: Tier) -> Result<&mut TierPool> {
        self.pools
            .get_mut(&tier)
            .ok_or_else(|| Error::InvalidConfig(format!("no {tier:?} pool configured")))
    }

    pub fn fragmentation(&self, tier: Tier) -> f64 {
        self.pools.get(&tier).map_or(0.0, TierPool::fragmentation)
    }

    pub fn residency(&self, id: u64) -> Result<Residency> {
        let t = self.tensors.get(&id).ok_or(Error::UnknownTensor(id))?;
        let first = t.page_list[0].tier;
        let ready = t
            .page_list
            .iter()
            .all(|p| p.tier == first && !self.page(*p).is_none_or(|pg| pg.in_flight));
        Ok(if ready {
            Residency::Ready(first)
        } else {
            Residency::NotReady
        })
    }

    /// Place a tensor in `tier` following the tail-sharing policy.
    pub fn allocate(&mut self, tier: Tier, spec: &TensorSpec) -> Result<&ManagedTensor> {
        if self.tensors.contains_key(&spec.id) {
            return Err(Error::DuplicateTensor(spec.id));
        }
        if spec.bytes == 0 {
            return Err(Error::InvalidConfig(format!(
                "tensor {} has zero bytes",
                spec.id
            )));
        }
        let elem = spec.kind.element_bytes();
        if !spec.bytes.is_multiple_of(elem) {
            return Err(Error::InvalidConfig(format!(
                "tensor {} size {} is not a multiple of its element size {elem}",
                spec.id, spec.bytes
            )));
        }
        if tier == Tier::Ssd && spec.kind != TensorKind::Optim32 {
            return Err(Error::Precondition(format!(
                "only FP32 optimizer states may live on SSD (tensor {} is {:?})",
                spec.id, spec.kind
            )));
        }

        let pool = self.pool_mut(tier)?;
        let pb = pool.page_bytes;
        let full = spec.bytes / pb;
        let tail = spec.bytes % pb;
        let large = spec.bytes >= pb;

        let host = if tail > 0 {
            pool.pages
                .iter()
                .find(|p| {
                    !pool.free.contains(&p.page_id)
                        && p.shareable
                        && !p.in_flight
                        && p.occupants.len() == 1
                        && p.available_bytes >= tail
                })
                .map(|p| p.page_id)
        } else {
            None
        };
        let fresh_needed = full + u64::from(tail > 0 && host.is_none());
        if fresh_needed > pool.free_pages() {
            return Err(Error::OutOfMemory {
                tier,
                requested: spec.bytes,
                available: pool.free_bytes(),
            });
        }

        let id = spec.id;
        let mut page_list = Vec::with_capacity(fresh_needed as usize + 1);
        for _ in 0..full {
            let idx = pool.claim().expect("free page count checked");
            let page = &mut pool.pages[idx as usize];
            page.occupants.push(Occupant {
                tensor_id: id,
                occupied_bytes: pb,
            });
            page.available_bytes = 0;
            page_list.push(PageRef { tier, index: idx });
        }
        if tail > 0 {
            let idx = match host {
                Some(idx) => {
                    let page = &mut pool.pages[idx as usize];
                    page.shareable = false;
                    idx
                }
                None => {
                    let idx = pool.claim().expect("free page count checked");
                    pool.pages[idx as usize].shareable = large;
                    idx
                }
            };
            let page = &mut pool.pages[idx as usize];
            page.occupants.push(Occupant {
                tensor_id: id,
                occupied_bytes: tail,
            });
            page.available_bytes -= tail;
            page_list.push(PageRef { tier, index: idx });
        }
        pool.stats.allocations += 1;

        let dtype = if spec.kind == TensorKind::Optim32 {
            Dtype::Fp32
        } else {
            Dtype::Fp16
        };
        let tensor = ManagedTensor {
            tensor_id: id,
            name: spec.name.clone(),
            kind: spec.kind,
            dtype,
            shape: vec![spec.bytes / dtype.bytes()],
            page_list,
        };
        Ok(self.tensors.entry(id).or_insert(tensor))
    }

    pub fn release(&mut self, id: u64) -> Result<ReleaseReport> {
        let tensor = self.tensors.get(&id).ok_or(Error::UnknownTensor(id))?;
        if tensor
            .page_list
            .iter()
            .any(|p| self.page(*p).is_some_and(|pg| pg.in_flight))
        {
            return Err(Error::Precondition(format!(
                "tensor {id} has pages in flight"
            )));
        }
        let tensor = self.tensors.remove(&id).expect("checked above");
        let mut report = ReleaseReport {
            freed_bytes: 0,
            pages_freed: 0,
        };
        for pref in &tensor.page_list {
            let survivor_large = {
                let pool = &self.pools[&pref.tier];
                let page = &pool.pages[pref.index as usize];
                page.occupants
                    .iter()
                    .find(|o| o.tensor_id != id)
                    .and_then(|o| self.tensors.get(&o.tensor_id))
                    .map(|t| t.bytes() >= pool.page_bytes)
            };
            let pool = self
                .pools
                .get_mut(&pref.tier)
                .expect("page tier has a pool");
            let page = &mut pool.pages[pref.index as usize];
            let pos = page
                .occupants
                .iter()
                .position(|o| o.tensor_id == id)
                .ok_or_else(|| Error::Internal(format!("tensor {id} missing from its page")))?;
            let occ = page.occupants.remove(pos);
            page.available_bytes += occ.occupied_bytes;
            report.freed_bytes += occ.occupied_bytes;
            if page.occupants.is_empty() {
                pool.give_back(pref.index);
                report.pages_freed += 1;
            } else {
                page.shareable = survivor_large.unwrap_or(false);
            }
        }
        if let Some(pool) = tensor
            .page_list
            .first()
            .and_then(|p| self.pools.get_mut(&p.tier))
        {
            pool.stats.releases += 1;
        }
        Ok(report)
    }

    /// Move one page to `target`. The destination page is marked in flight.
    pub fn move_page(&mut self, src: PageRef, target: Tier) -> Result<TransferDescriptor> {
        if src.tier == target {
            return Err(Error::MoveFailed(format!("page already on {target:?}")));
        }
        let src_pool = self
            .pools
            .get(&src.tier)
            .ok_or_else(|| Error::MoveFailed(format!("no {:?} pool", src.tier)))?;
        if !src_pool.is_allocated(src.index) {
            return Err(Error::MoveFailed(format!("page {src:?} is not allocated")));
        }
        let page = src_pool.pages[src.index as usize].clone();
        if page.in_flight {
            return Err(Error::MoveFailed(format!(
                "page {src:?} is already in flight"
            )));
        }
        if target == Tier::Ssd {
            let bad = page.occupants.iter().any(|o| {
                self.tensors
                    .get(&o.tensor_id)
                    .is_none_or(|t| t.kind != TensorKind::Optim32)
            });
            if bad {
                return Err(Error::MoveFailed(
                    "only FP32 optimizer states may move to SSD".into(),
                ));
            }
        }
        let dst_pool = self
            .pools
            .get_mut(&target)
            .ok_or_else(|| Error::MoveFailed(format!("no {target:?} pool")))?;
        if dst_pool.page_bytes != page.total_bytes {
            return Err(Error::MoveFailed(
                "source and destination page sizes differ".into(),
            ));
        }
        let dst_idx = dst_pool
            .claim()
            .ok_or_else(|| Error::MoveFailed(format!("{target:?} tier is full")))?;
        let dst_page = &mut dst_pool.pages[dst_idx as usize];
        dst_page.available_bytes = page.available_bytes;
        dst_page.occupants = page.occupants.clone();
        dst_page.shareable = page.shareable;
        dst_page.in_flight = true;
        dst_pool.stats.moves_in += 1;

        let src_pool = self.pools.get_mut(&src.tier).expect("checked above");
        src_pool.give_back(src.index);
        src_pool.stats.moves_out += 1;

        let dst = PageRef {
            tier: target,
            index: dst_idx,
        };
        for occ in &page.occupants {
            if let Some(t) = self.tensors.get_mut(&occ.tensor_id) {
                for p in t.page_list.iter_mut().filter(|p| **p == src) {
                    *p = dst;
                }
            }
        }
        Ok(TransferDescriptor {
            bytes: page.total_bytes,
            src_tier: src.tier,
            dst_tier: target,
            src,
            dst,
        })
    }

    /// Mark an in-flight destination page as landed.
    pub fn complete_move(&mut self, page: PageRef) -> Result<()> {
        let pool = self.pool_mut(page.tier)?;
        if !pool.is_allocated(page.index) || !pool.pages[page.index as usize].in_flight {
            return Err(Error::Precondition(format!(
                "page {page:?} is not in flight"
            )));
        }
        pool.pages[page.index as usize].in_flight = false;
        Ok(())
    }

    pub fn complete_all_moves(&mut self) {
        for pool in self.pools.values_mut() {
            for page in &mut pool.pages {
                page.in_flight = false;
            }
        }
    }

    /// Relocate a ready tensor's pages onto the lowest run of consecutive
    /// page ids in its tier. Co-occupants of relocated pages follow along.
    pub fn merge(&mut self, id: u64) -> Result<MergeReport> {
        let tier = match self.residency(id)? {
            Residency::Ready(t) => t,
            Residency::NotReady => {
                return Err(Error::Precondition(format!(
                    "tensor {id} is not ready for merge"
                )))
            }
        };
        let before: Vec<u32> = self.tensors[&id]
            .page_list
            .iter()
            .map(|p| p.index)
            .collect();
        let already = before.windows(2).all(|w| w[1] == w[0] + 1);
        if already {
            return Ok(MergeReport {
                tensor_id: id,
                tier,
                after: before.clone(),
                before,
                relocated_pages: 0,
                contiguous: true,
            });
        }

        let pool = self
            .pools
            .get_mut(&tier)
            .expect("ready tensor tier has a pool");
        let own: BTreeSet<u32> = before.iter().copied().collect();
        let k = before.len();
        let n = pool.pages.len();
        let start = (0..=n.saturating_sub(k))
            .find(|&s| {
                (s..s + k).all(|i| pool.free.contains(&(i as u32)) || own.contains(&(i as u32)))
            })
            .ok_or_else(|| {
                Error::Precondition(format!("no run of {k} consecutive pages for tensor {id}"))
            })?;

        let contents: Vec<Page> = before
            .iter()
            .map(|&i| pool.pages[i as usize].clone())
            .collect();
        for &i in &before {
            pool.give_back(i);
        }
        let mut mapping = BTreeMap::new();
        for (offset, mut content) in contents.into_iter().enumerate() {
            let new_idx = (start + offset) as u32;
            pool.claim_at(new_idx);
            mapping.insert(content.page_id, new_idx);
            content.page_id = new_idx;
            pool.pages[new_idx as usize] = content;
        }

        let affected: BTreeSet<u64> = mapping
            .values()
            .flat_map(|&i| pool.pages[i as usize].occupants.iter().map(|o| o.tensor_id))
            .collect();
        for tid in affected {
            if let Some(t) = self.tensors.get_mut(&tid) {
                for p in t.page_list.iter_mut().filter(|p| p.tier == tier) {
                    if let Some(&new_idx) = mapping.get(&p.index) {
                        p.index = new_idx;
                    }
                }
            }
        }
        let after: Vec<u32> = self.tensors[&id]
            .page_list
            .iter()
            .map(|p| p.index)
            .collect();
        let relocated_pages = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        Ok(MergeReport {
            tensor_id: id,
            tier,
            before,
            after,
            relocated_pages,
            contiguous: true,
        })
    }

    /// Structural invariants; empty when the manager is consistent.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
        for pool in self.pools.values() {
            if pool.free_bytes() + pool.allocated_bytes() != pool.capacity_bytes {
                out.push(format!("{:?}: free + allocated != capacity", pool.tier));
            }
            for page in &pool.pages {
                let free = pool.free.contains(&page.page_id);
                if page.occupied_bytes() + page.available_bytes != page.total_bytes {
                    out.push(format!(
                        "{:?}/{}: occupied + available != total",
                        pool.tier, page.page_id
                    ));
                }
                if free && (!page.occupants.is_empty() || page.in_flight) {
                    out.push(format!(
                        "{:?}/{}: free page has state",
                        pool.tier, page.page_id
                    ));
                }
                if !free && page.occupants.is_empty() {
                    out.push(format!(
                        "{:?}/{}: allocated page without occupants",
                        pool.tier, page.page_id
                    ));
                }
                for occ in &page.occupants {
                    if occ.occupied_bytes == 0 {
                        out.push(format!(
                            "{:?}/{}: zero-byte occupant",
                            pool.tier, page.page_id
                        ));
                    }
                    *seen.entry(occ.tensor_id).or_default() += occ.occupied_bytes;
                    let pref = PageRef {
                        tier: pool.tier,
                        index: page.page_id,
                    };
                    match self.tensors.get(&occ.tensor_id) {
                        Some(t) if t.page_list.contains(&pref) => {}
                        _ => out.push(format!(
                            "{pref:?}: occupant {} not linked back",
                            occ.tensor_id
                        )),
                    }
                }
            }
        }
        for t in self.tensors.values() {
            if seen.get(&t.tensor_id).copied().unwrap_or(0) != t.bytes() {
                out.push(format!(
                    "tensor {}: page bytes do not sum to its size",
                    t.tensor_id
                ));
            }
        }
        out
    }
}

/// Pool layout read by the replay demo.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    #[serde(default = "default_page_bytes")]
    pub page_bytes: u64,
    pub pools: Vec<PoolCapacity>,
}

fn default_page_bytes() -> u64 {
    DEFAULT_PAGE_BYTES
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCapacity {
    pub tier: Tier,
    pub capacity_bytes: u64,
}

impl PoolSpec {
    pub fn build(&self) -> Result<PageManager> {
        PageManager::with_pools(
            self.pools
                .iter()
                .map(|p| TierPool::new(p.tier, p.capacity_bytes, self.page_bytes))
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PageOp {
    Allocate { tier: Tier, tensor: TensorSpec },
    Release { tensor_id: u64 },
    Move { page: PageRef, target: Tier },
    CompleteMove { page: PageRef },
    Merge { tensor_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpOutcome {
    pub step: usize,
    pub ok: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub outcomes: Vec<OpOutcome>,
    pub fragmentation: BTreeMap<Tier, f64>,
    pub state: PageManager,
}

/// Apply an operation script; failing operations are recorded, not fatal.
pub fn replay(mut mgr: PageManager, ops: &[PageOp]) -> ReplayReport {
    let mut outcomes = Vec::with_capacity(ops.len());
    for (step, op) in ops.iter().enumerate() {
        let res: Result<serde_json::Value> = match op {
            PageOp::Allocate { tier, tensor } => mgr
                .allocate(*tier, tensor)
                .map(|t| serde_json::json!({ "page_list": t.page_list })),
            PageOp::Release { tensor_id } => mgr.release(*tensor_id).map(|r| serde_json::json!(r)),
            PageOp::Move { page, target } => {
                mgr.move_page(*page, *target).map(|d| serde_json::json!(d))
            }
            PageOp::CompleteMove { page } => {
                mgr.complete_move(*page).map(|_| serde_json::Value::Null)
            }
            PageOp::Merge { tensor_id } => mgr.merge(*tensor_id).map(|m| serde_json::json!(m)),
        };
        outcomes.push(match res {
            Ok(detail) => OpOutcome {
                step,
                ok: true,
                detail,
            },
            Err(e) => OpOutcome {
                step,
                ok: false,
                detail: serde_json::Value::String(e.to_string()),
            },
        });
    }
    let fragmentation = mgr.pools().map(|p| (p.tier, p.fragmentation())).collect();
    ReplayReport {
        outcomes,
        fragmentation,
        state: mgr,
    }
}
