//! Instance generators and independent oracles shared by the property and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hiermem::footprint::{TensorKind, TensorSpec};
use hiermem::pagemem::{PageManager, PageRef, Tier, TierPool};
use hiermem::scheduler::{Operation, Schedule, ScheduleOptions, ShardingModel, Task};
use hiermem::tracer::TensorTrace;
use rand::Rng;

pub const MIB: u64 = 1 << 20;

pub fn param_trace(id: u64, layer: usize, bytes: u64, n: usize) -> TensorTrace {
    TensorTrace {
        tensor_id: id,
        name: format!("L{layer}.w{id}.param16"),
        kind: TensorKind::Param16,
        layer,
        bytes,
        first_id: layer,
        end_id: 2 * n - 1 - layer,
        cpu_time: 0.0,
        gpu_time: 0.0,
        recomputed: false,
    }
}

pub fn act_trace(id: u64, layer: usize, bytes: u64, n: usize, gpu_time: f64) -> TensorTrace {
    TensorTrace {
        tensor_id: id,
        name: format!("L{layer}.a{id}.act16"),
        kind: TensorKind::Activation16,
        layer,
        bytes,
        first_id: layer,
        end_id: 2 * n - 1 - layer,
        cpu_time: 0.0,
        gpu_time,
        recomputed: false,
    }
}

/// Small scheduling instance: per-layer owned pages and activation bytes.
#[derive(Debug, Clone)]
pub struct Instance {
    pub traces: Vec<TensorTrace>,
    pub sharding: ShardingModel,
    pub opts: ScheduleOptions,
}

impl Instance {
    /// `pages[l]` owned pages per rank for layer `l`, `acts[l]` activation
    /// bytes produced by layer `l`, `times[l]` its compute time.
    pub fn new(
        world: u32,
        page: u64,
        pages: &[u64],
        acts: &[u64],
        times: &[f64],
        full: bool,
    ) -> Self {
        let n = pages.len();
        let mut traces = Vec::new();
        let mut id = 0;
        for l in 0..n {
            traces.push(param_trace(id, l, world as u64 * page * pages[l], n));
            id += 1;
            traces.push(act_trace(id, l, acts[l], n, times[l]));
            id += 1;
        }
        Instance {
            traces,
            sharding: ShardingModel::new(world, 0, page).unwrap(),
            opts: ScheduleOptions {
                full_iteration: full,
            },
        }
    }

    pub fn steps(&self) -> Vec<usize> {
        let n = self.num_layers();
        let mut s: Vec<usize> = (0..n).collect();
        if self.opts.full_iteration {
            s.extend((0..n).rev());
        }
        s
    }

    pub fn num_layers(&self) -> usize {
        self.traces.iter().map(|t| t.layer + 1).max().unwrap_or(0)
    }

    /// Owned pages per rank for each layer, from first principles.
    pub fn owned_pages(&self) -> Vec<u64> {
        let n = self.num_layers();
        let world = self.sharding.world_size as u64;
        let page = self.sharding.page_bytes;
        let mut bytes = vec![0u64; n];
        for t in self.traces.iter().filter(|t| t.kind == TensorKind::Param16) {
            bytes[t.layer] += t.bytes;
        }
        bytes
            .iter()
            .map(|b| b.div_ceil(world).div_ceil(page))
            .collect()
    }

    pub fn gather_bytes(&self) -> u64 {
        (self.sharding.world_size as u64 - 1) * self.sharding.page_bytes
    }

    /// Smallest budget under which every step can hold its own pages,
    /// their gathered copies and the live activations at once.
    pub fn min_feasible_budget(&self) -> u64 {
        let base = self.base_profile();
        let owned = self.owned_pages();
        self.steps()
            .iter()
            .enumerate()
            .map(|(k, &l)| base[k] + owned[l] * (self.sharding.page_bytes + self.gather_bytes()))
            .max()
            .unwrap_or(0)
    }

    /// Live non-parameter bytes per step, by sweep line.
    pub fn base_profile(&self) -> Vec<u64> {
        let h = self.steps().len();
        let events = self
            .traces
            .iter()
            .filter(|t| t.kind != TensorKind::Param16)
            .map(|t| (t.first_id, t.end_id, t.bytes));
        sweep(events, h)
    }

    pub fn task_bytes(&self, t: &Task) -> u64 {
        match t.operation {
            Operation::MoveToGpu => self.sharding.page_bytes,
            Operation::AllGather => self.gather_bytes(),
            _ => 0,
        }
    }

    /// Resident bytes per step with `tasks` in flight, by sweep line.
    pub fn profile(&self, tasks: &[Task]) -> Vec<u64> {
        let h = self.steps().len();
        let base = self
            .traces
            .iter()
            .filter(|t| t.kind != TensorKind::Param16)
            .map(|t| (t.first_id, t.end_id, t.bytes));
        let tasks = tasks
            .iter()
            .map(|t| (t.trigger_id, t.consumer, self.task_bytes(t)));
        sweep(base.chain(tasks), h)
    }

    pub fn peak(&self, tasks: &[Task]) -> u64 {
        self.profile(tasks).into_iter().max().unwrap_or(0)
    }
}

/// Sum of inclusive `[start, end]` intervals over `0..horizon`.
pub fn sweep(intervals: impl Iterator<Item = (usize, usize, u64)>, horizon: usize) -> Vec<u64> {
    let mut events: Vec<(usize, i128)> = Vec::new();
    for (s, e, b) in intervals {
        if b == 0 || s >= horizon {
            continue;
        }
        events.push((s, b as i128));
        events.push((e + 1, -(b as i128)));
    }
    events.sort();
    let mut out = vec![0u64; horizon];
    let mut cur = 0i128;
    let mut i = 0;
    for (k, slot) in out.iter_mut().enumerate() {
        while i < events.len() && events[i].0 <= k {
            cur += events[i].1;
            i += 1;
        }
        *slot = cur as u64;
    }
    out
}

/// Exhaustive phase-2 reference: walk gathers in phase-1 order and try
/// every trigger from the earliest admissible one, keeping the first whose
/// full profile stays within budget.
pub fn oracle_gather_triggers(inst: &Instance, phase1: &Schedule) -> BTreeMap<(u64, usize), usize> {
    let mut tasks = phase1.tasks.clone();
    let order: Vec<usize> = (0..tasks.len())
        .filter(|&i| tasks[i].operation == Operation::AllGather)
        .collect();
    let mut floor = 0;
    let mut out = BTreeMap::new();
    for i in order {
        let g = tasks[i];
        let move_trigger = tasks
            .iter()
            .find(|t| {
                t.operation == Operation::MoveToGpu
                    && t.target == g.target
                    && t.consumer == g.consumer
            })
            .map_or(g.trigger_id, |m| m.trigger_id);
        let mut chosen = g.trigger_id;
        for t in move_trigger.max(floor)..=g.trigger_id {
            let mut cand = tasks.clone();
            cand[i].trigger_id = t;
            if inst.peak(&cand) <= phase1.gpu_budget {
                chosen = t;
                break;
            }
        }
        tasks[i].trigger_id = chosen;
        floor = floor.max(chosen);
        out.insert((g.target, g.consumer), chosen);
    }
    out
}

pub fn gather_triggers(s: &Schedule) -> BTreeMap<(u64, usize), usize> {
    s.tasks
        .iter()
        .filter(|t| t.operation == Operation::AllGather)
        .map(|t| ((t.target, t.consumer), t.trigger_id))
        .collect()
}

/// Random scheduling instance with a budget somewhere between the minimum
/// and comfortably roomy.
pub fn random_instance(rng: &mut impl Rng) -> (Instance, u64) {
    let n = rng.gen_range(1..=6);
    let world = rng.gen_range(1..=4);
    let page = MIB;
    let pages: Vec<u64> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
    let acts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..=4) * MIB / 2).collect();
    let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2e-4)).collect();
    let inst = Instance::new(world, page, &pages, &acts, &times, rng.gen_bool(0.5));
    let lo = inst.min_feasible_budget();
    let budget = lo + rng.gen_range(0..=32) * MIB;
    (inst, budget)
}

/// Shadow bookkeeping for randomized allocator runs.
pub struct AllocatorRun {
    pub mgr: PageManager,
    pub live: BTreeMap<u64, (TensorSpec, u64)>,
    pub next_id: u64,
    pub page: u64,
    pub ok_ops: u64,
    pub failed_ops: u64,
}

pub const KINDS: [TensorKind; 4] = [
    TensorKind::Param16,
    TensorKind::Grad16,
    TensorKind::Optim32,
    TensorKind::Activation16,
];

impl AllocatorRun {
    pub fn new(page: u64, pages_per_tier: u64) -> Self {
        let mgr = PageManager::with_pools(
            [Tier::Gpu, Tier::Cpu, Tier::Ssd]
                .map(|t| TierPool::new(t, page * pages_per_tier, page).unwrap()),
        )
        .unwrap();
        AllocatorRun {
            mgr,
            live: BTreeMap::new(),
            next_id: 0,
            page,
            ok_ops: 0,
            failed_ops: 0,
        }
    }

    fn tensor_bytes(&self, rng: &mut impl Rng, page_multiples: bool) -> u64 {
        if page_multiples {
            return self.page * rng.gen_range(1..=4);
        }
        match rng.gen_range(0..3) {
            0 => rng.gen_range(1..self.page),
            1 => self.page * rng.gen_range(1..=3),
            _ => self.page * rng.gen_range(1..=3) + rng.gen_range(1..self.page),
        }
    }

    /// One random allocate/release/move/complete step. Failed operations
    /// must leave the manager untouched.
    pub fn step(&mut self, rng: &mut impl Rng, page_multiples: bool) -> Result<(), String> {
        let before = self.mgr.clone();
        let roll = rng.gen_range(0..100);
        let res = if roll < 40 || self.live.is_empty() {
            let kind = KINDS[rng.gen_range(0..4)];
            let tier = [Tier::Gpu, Tier::Cpu, Tier::Ssd][rng.gen_range(0..3)];
            let spec = TensorSpec {
                id: self.next_id,
                name: format!("t{}", self.next_id),
                kind,
                bytes: self.tensor_bytes(rng, page_multiples),
                layer_index: 0,
            };
            self.next_id += 1;
            let r = self.mgr.allocate(tier, &spec).map(|_| ());
            if r.is_ok() {
                self.live.insert(spec.id, (spec.clone(), spec.bytes));
            }
            r
        } else if roll < 70 {
            let id = *self
                .live
                .keys()
                .nth(rng.gen_range(0..self.live.len()))
                .unwrap();
            let r = self.mgr.release(id).map(|_| ());
            if r.is_ok() {
                self.live.remove(&id);
            }
            r
        } else if roll < 90 {
            let id = *self
                .live
                .keys()
                .nth(rng.gen_range(0..self.live.len()))
                .unwrap();
            let pages = self.mgr.tensor(id).unwrap().page_list.clone();
            let p: PageRef = pages[rng.gen_range(0..pages.len())];
            let target = [Tier::Gpu, Tier::Cpu, Tier::Ssd][rng.gen_range(0..3)];
            self.mgr.move_page(p, target).map(|_| ())
        } else {
            self.mgr.complete_all_moves();
            Ok(())
        };
        match res {
            Ok(()) => self.ok_ops += 1,
            Err(_) => {
                self.failed_ops += 1;
                if self.mgr != before {
                    return Err("failed operation mutated the manager".into());
                }
            }
        }
        self.check()
    }

    /// Independent checks against the shadow table.
    pub fn check(&self) -> Result<(), String> {
        let internal = self.mgr.check_invariants();
        if !internal.is_empty() {
            return Err(internal.join("; "));
        }
        let mut occupied: BTreeMap<u64, u64> = BTreeMap::new();
        let mut seen_pages = std::collections::BTreeSet::new();
        for (id, (spec, bytes)) in &self.live {
            let t = self
                .mgr
                .tensor(*id)
                .ok_or(format!("live tensor {id} missing"))?;
            if t.bytes() != *bytes {
                return Err(format!(
                    "tensor {id} reports {} bytes, allocated {bytes}",
                    t.bytes()
                ));
            }
            if spec.kind != TensorKind::Optim32 && t.page_list.iter().any(|p| p.tier == Tier::Ssd) {
                return Err(format!("non-optimizer tensor {id} on SSD"));
            }
            for p in &t.page_list {
                let page = self.mgr.page(*p).ok_or(format!("dangling page {p:?}"))?;
                if page.occupants.len() > 2 {
                    return Err(format!("page {p:?} has {} occupants", page.occupants.len()));
                }
                if seen_pages.insert(*p) {
                    for o in &page.occupants {
                        *occupied.entry(o.tensor_id).or_default() += o.occupied_bytes;
                    }
                }
            }
        }
        for (id, (_, bytes)) in &self.live {
            if occupied.get(id).copied().unwrap_or(0) != *bytes {
                return Err(format!(
                    "tensor {id}: pages hold {:?} of {bytes} bytes",
                    occupied.get(id)
                ));
            }
        }
        if occupied.keys().any(|id| !self.live.contains_key(id)) {
            return Err("page occupied by a released tensor".into());
        }
        let in_use: u64 = self.mgr.pools().map(|p| p.allocated_pages()).sum();
        if in_use != seen_pages.len() as u64 {
            return Err(format!(
                "{in_use} pages allocated, {} referenced",
                seen_pages.len()
            ));
        }
        Ok(())
    }

    /// Release everything and confirm every page came back.
    pub fn drain(&mut self) -> Result<(), String> {
        self.mgr.complete_all_moves();
        let ids: Vec<u64> = self.live.keys().copied().collect();
        for id in ids {
            self.mgr.release(id).map_err(|e| e.to_string())?;
            self.live.remove(&id);
        }
        self.check()?;
        for p in self.mgr.pools() {
            if p.allocated_pages() != 0 {
                return Err(format!("{:?} leaked {} pages", p.tier, p.allocated_pages()));
            }
        }
        Ok(())
    }

    pub fn max_fragmentation(&self) -> f64 {
        self.mgr
            .pools()
            .map(|p| p.fragmentation())
            .fold(0.0, f64::max)
    }
}
