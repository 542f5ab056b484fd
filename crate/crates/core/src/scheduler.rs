//! Lifetime-driven page schedule for one data-parallel rank.
//!
//! Phase 1 sweeps the compute steps in order, moving owned parameter pages
//! to the GPU and gathering the remote shards right before each compute,
//! deferring moves onto a wait stack when memory is short. Phase 2 then
//! pulls every all_gather as early as the memory budget allows.
//!
//! Residency is tracked per compute step: a move holds one page on the GPU
//! from its trigger through its consuming step, a gather holds the
//! `(N - 1)` remote shards of one page over the same kind of interval, and
//! non-parameter traces (activations, gradients) add their live bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::TensorKind;
use crate::tracer::{num_layers_in, LogicalTimeline, TensorTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    MoveToGpu,
    AllGather,
    Compute,
    EvictToCpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub operation: Operation,
    /// Global page id, or the layer index for compute.
    pub target: u64,
    pub trigger_id: usize,
    /// Compute step whose execution needs (or produced) this task.
    pub consumer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingModel {
    pub world_size: u32,
    pub rank: u32,
    pub page_bytes: u64,
}

/// Page ids per layer: all ranks' pages and the ones this rank owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageLayout {
    pub pages_per_shard: Vec<u64>,
    pub first_page: Vec<u64>,
}

impl ShardingModel {
    pub fn new(world_size: u32, rank: u32, page_bytes: u64) -> Result<Self> {
        if world_size == 0 || rank >= world_size {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} not in world of {world_size}"
            )));
        }
        if page_bytes == 0 {
            return Err(Error::InvalidConfig("page size must be positive".into()));
        }
        Ok(ShardingModel {
            world_size,
            rank,
            page_bytes,
        })
    }

    pub fn pages_per_shard(&self, layer_bytes: u64) -> u64 {
        layer_bytes
            .div_ceil(self.world_size as u64)
            .div_ceil(self.page_bytes)
    }

    pub fn layout(&self, layer_param_bytes: &[u64]) -> PageLayout {
        let mut next = 0;
        let mut first_page = Vec::with_capacity(layer_param_bytes.len());
        let mut pages_per_shard = Vec::with_capacity(layer_param_bytes.len());
        for &b in layer_param_bytes {
            let pps = self.pages_per_shard(b);
            first_page.push(next);
            pages_per_shard.push(pps);
            next += pps * self.world_size as u64;
        }
        PageLayout {
            pages_per_shard,
            first_page,
        }
    }

    /// Bytes one gather brings in: the other ranks' copies of one page.
    pub fn gather_bytes(&self) -> u64 {
        (self.world_size as u64 - 1) * self.page_bytes
    }
}

impl PageLayout {
    pub fn owned(&self, sharding: &ShardingModel, layer: usize) -> Vec<u64> {
        let pps = self.pages_per_shard[layer];
        let base = self.first_page[layer] + sharding.rank as u64 * pps;
        (base..base + pps).collect()
    }

    pub fn owner(&self, sharding: &ShardingModel, page: u64) -> Option<u32> {
        let layer = self.first_page.iter().rposition(|&f| f <= page)?;
        let pps = self.pages_per_shard[layer];
        if pps == 0 {
            return None;
        }
        let r = (page - self.first_page[layer]) / pps;
        (r < sharding.world_size as u64).then_some(r as u32)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Also schedule the backward sweep, re-fetching pages per layer and
    /// offloading gradient shards after each backward compute.
    pub full_iteration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub phase: Phase,
    pub gpu_budget: u64,
    pub sharding: ShardingModel,
    /// Layer computed at each step.
    pub steps: Vec<usize>,
    pub tasks: Vec<Task>,
}

impl Schedule {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn count(&self, op: Operation) -> usize {
        self.tasks.iter().filter(|t| t.operation == op).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub phase1: Schedule,
    pub phase2: Schedule,
}

/// FP16 parameter bytes of each layer, from the traces.
pub fn layer_param_bytes(traces: &[TensorTrace]) -> Vec<u64> {
    let mut out = vec![0; num_layers_in(traces)];
    for t in traces
        .iter()
        .filter(|t| t.kind == TensorKind::Param16 && !t.recomputed)
    {
        out[t.layer] += t.bytes;
    }
    out
}

pub fn compute_steps(num_layers: usize, full_iteration: bool) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..num_layers).collect();
    if full_iteration {
        steps.extend((0..num_layers).rev());
    }
    steps
}

/// Residency bookkeeping over the compute steps of a schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryModel {
    pub budget: u64,
    pub page_bytes: u64,
    pub gather_bytes: u64,
    /// Live non-parameter bytes at each step.
    pub base: Vec<u64>,
}

impl MemoryModel {
    pub fn new(
        traces: &[TensorTrace],
        sharding: &ShardingModel,
        horizon: usize,
        budget: u64,
    ) -> Self {
        let mut base = vec![0u64; horizon];
        for t in traces.iter().filter(|t| t.kind != TensorKind::Param16) {
            for slot in base.iter_mut().take(t.end_id + 1).skip(t.first_id) {
                *slot += t.bytes;
            }
        }
        MemoryModel {
            budget,
            page_bytes: sharding.page_bytes,
            gather_bytes: sharding.gather_bytes(),
            base,
        }
    }

    pub fn for_schedule(schedule: &Schedule, traces: &[TensorTrace]) -> Self {
        Self::new(
            traces,
            &schedule.sharding,
            schedule.horizon(),
            schedule.gpu_budget,
        )
    }

    pub fn task_bytes(&self, task: &Task) -> u64 {
        match task.operation {
            Operation::MoveToGpu => self.page_bytes,
            Operation::AllGather => self.gather_bytes,
            Operation::Compute | Operation::EvictToCpu => 0,
        }
    }

    fn span(&self, task: &Task) -> std::ops::Range<usize> {
        let h = self.base.len();
        task.trigger_id.min(h)..(task.consumer + 1).min(h)
    }

    pub fn profile(&self, tasks: &[Task]) -> Vec<u64> {
        let mut res = self.base.clone();
        for t in tasks {
            let b = self.task_bytes(t);
            for slot in &mut res[self.span(t)] {
                *slot += b;
            }
        }
        res
    }

    pub fn available(&self, tasks: &[Task], at_id: usize) -> u64 {
        let res = self.profile(tasks);
        self.budget
            .saturating_sub(res.get(at_id).copied().unwrap_or(0))
    }

    pub fn peak(&self, tasks: &[Task]) -> u64 {
        self.profile(tasks).into_iter().max().unwrap_or(0)
    }

    fn apply(&self, res: &mut [u64], task: &Task, add: bool) {
        let b = self.task_bytes(task);
        for slot in &mut res[self.span(task)] {
            if add {
                *slot += b;
            } else {
                *slot -= b;
            }
        }
    }
}

pub fn available_memory(schedule: &Schedule, traces: &[TensorTrace], at_id: usize) -> u64 {
    MemoryModel::for_schedule(schedule, traces).available(&schedule.tasks, at_id)
}

pub fn peak_memory(schedule: &Schedule, traces: &[TensorTrace]) -> u64 {
    MemoryModel::for_schedule(schedule, traces).peak(&schedule.tasks)
}

fn check_traces(traces: &[TensorTrace]) -> Result<usize> {
    let n = num_layers_in(traces);
    if n == 0 {
        return Err(Error::InvalidConfig("no traces to schedule".into()));
    }
    let violations = crate::tracer::validate_trace(traces, &LogicalTimeline::new(n));
    if let Some(v) = violations.first() {
        return Err(Error::InvalidConfig(format!(
            "invalid traces: {}",
            v.message
        )));
    }
    Ok(n)
}

/// Phase 1 of the schedule.
pub fn schedule_phase1(
    traces: &[TensorTrace],
    gpu_budget: u64,
    sharding: &ShardingModel,
    opts: ScheduleOptions,
) -> Result<Schedule> {
    let n = check_traces(traces)?;
    let steps = compute_steps(n, opts.full_iteration);
    let layout = sharding.layout(&layer_param_bytes(traces));
    let mem = MemoryModel::new(traces, sharding, steps.len(), gpu_budget);
    let page = sharding.page_bytes;

    let mut tasks = Vec::new();
    for (k, &l) in steps.iter().enumerate() {
        for p in layout.owned(sharding, l) {
            tasks.push(Task {
                operation: Operation::MoveToGpu,
                target: p,
                trigger_id: 0,
                consumer: k,
            });
        }
    }
    let mut res = mem.profile(&tasks);
    let mut wait_stack: Vec<(u64, usize)> = Vec::new();

    for (k, &l) in steps.iter().enumerate() {
        let owned = layout.owned(sharding, l);
        let mine: Vec<u64> = wait_stack
            .iter()
            .filter(|w| w.1 == k)
            .map(|w| w.0)
            .collect();
        wait_stack.retain(|w| w.1 != k);
        let need = mem.gather_bytes * owned.len() as u64 + page * mine.len() as u64;

        while res[k].saturating_add(need) > gpu_budget {
            let pos = tasks
                .iter()
                .rposition(|t| t.operation == Operation::MoveToGpu && t.consumer > k)
                .ok_or_else(|| Error::Infeasible {
                    layer: l,
                    reason: format!(
                        "step {k} needs {need} bytes on top of {} resident with a budget of {gpu_budget}",
                        res[k]
                    ),
                })?;
            let popped = tasks.remove(pos);
            mem.apply(&mut res, &popped, false);
            wait_stack.push((popped.target, popped.consumer));
        }

        let push = |tasks: &mut Vec<Task>, res: &mut Vec<u64>, operation, target| {
            let t = Task {
                operation,
                target,
                trigger_id: k,
                consumer: k,
            };
            mem.apply(res, &t, true);
            tasks.push(t);
        };
        for p in mine {
            push(&mut tasks, &mut res, Operation::MoveToGpu, p);
        }
        for &p in &owned {
            push(&mut tasks, &mut res, Operation::AllGather, p);
        }
        push(&mut tasks, &mut res, Operation::Compute, l as u64);
        if k >= n {
            for &p in &owned {
                push(&mut tasks, &mut res, Operation::EvictToCpu, p);
            }
        }

        while let Some(&(p, c)) = wait_stack.last() {
            if res[k..=c].iter().any(|&r| r + page > gpu_budget) {
                break;
            }
            wait_stack.pop();
            let t = Task {
                operation: Operation::MoveToGpu,
                target: p,
                trigger_id: k,
                consumer: c,
            };
            mem.apply(&mut res, &t, true);
            tasks.push(t);
        }
    }
    debug_assert!(wait_stack.is_empty());

    Ok(Schedule {
        phase: Phase::Phase1,
        gpu_budget,
        sharding: *sharding,
        steps,
        tasks,
    })
}

/// Phase 2: advance each all_gather, in phase-1 order, to the smallest
/// trigger that keeps the peak within budget. A gather never precedes its
/// page's move, nor the gather scanned before it.
pub fn advance_gathers(phase1: &Schedule, traces: &[TensorTrace]) -> Schedule {
    let mem = MemoryModel::for_schedule(phase1, traces);
    let mut tasks = phase1.tasks.clone();
    let mut res = mem.profile(&tasks);
    let move_trigger: BTreeMap<(u64, usize), usize> = tasks
        .iter()
        .filter(|t| t.operation == Operation::MoveToGpu)
        .map(|t| ((t.target, t.consumer), t.trigger_id))
        .collect();
    let gathers: Vec<Task> = tasks
        .iter()
        .filter(|t| t.operation == Operation::AllGather)
        .copied()
        .collect();

    let mut floor = 0;
    for g in gathers {
        let lo = move_trigger
            .get(&(g.target, g.consumer))
            .copied()
            .unwrap_or(g.trigger_id)
            .max(floor);
        let best = (lo..g.trigger_id)
            .find(|&t| {
                res[t..g.trigger_id]
                    .iter()
                    .all(|&r| r + mem.gather_bytes <= phase1.gpu_budget)
            })
            .unwrap_or(g.trigger_id);
        if best < g.trigger_id {
            let pos = tasks.iter().position(|t| *t == g).expect("gather present");
            tasks.remove(pos);
            for slot in &mut res[best..g.trigger_id] {
                *slot += mem.gather_bytes;
            }
            let moved = Task {
                trigger_id: best,
                ..g
            };
            let at = tasks.partition_point(|t| t.trigger_id <= best);
            tasks.insert(at, moved);
        }
        floor = best.max(floor);
    }

    Schedule {
        phase: Phase::Phase2,
        tasks,
        ..phase1.clone()
    }
}

pub fn plan(
    traces: &[TensorTrace],
    gpu_budget: u64,
    sharding: &ShardingModel,
    opts: ScheduleOptions,
) -> Result<Plan> {
    let phase1 = schedule_phase1(traces, gpu_budget, sharding, opts)?;
    let phase2 = advance_gathers(&phase1, traces);
    Ok(Plan { phase1, phase2 })
}

/// Both phases; returns the phase-2 schedule.
pub fn schedule(
    traces: &[TensorTrace],
    gpu_budget: u64,
    sharding: &ShardingModel,
    opts: ScheduleOptions,
) -> Result<Schedule> {
    Ok(plan(traces, gpu_budget, sharding, opts)?.phase2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    OverBudget,
    GatherAfterCompute,
    GatherBeforeMove,
    ComputeOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleViolation {
    pub kind: ViolationKind,
    pub message: String,
}

pub fn validate_schedule(
    schedule: &Schedule,
    traces: &[TensorTrace],
    budget: u64,
) -> Vec<ScheduleViolation> {
    let mut out = Vec::new();
    let mut push = |kind, message| out.push(ScheduleViolation { kind, message });

    let mem = MemoryModel::for_schedule(schedule, traces);
    let peak = mem.peak(&schedule.tasks);
    if peak > budget {
        push(
            ViolationKind::OverBudget,
            format!("peak {peak} exceeds budget {budget}"),
        );
    }

    let layout = schedule.sharding.layout(&layer_param_bytes(traces));
    let find = |op: Operation, target: u64, consumer: usize| {
        schedule
            .tasks
            .iter()
            .filter(move |t| t.operation == op && t.target == target && t.consumer == consumer)
    };

    let mut last_compute: Option<usize> = None;
    for t in schedule
        .tasks
        .iter()
        .filter(|t| t.operation == Operation::Compute)
    {
        if last_compute.is_some_and(|prev| t.trigger_id <= prev) {
            push(
                ViolationKind::ComputeOrder,
                format!(
                    "compute of layer {} at trigger {} does not advance",
                    t.target, t.trigger_id
                ),
            );
        }
        last_compute = Some(t.trigger_id);
        let layer = t.target as usize;
        if layer >= layout.pages_per_shard.len() {
            continue;
        }
        for p in layout.owned(&schedule.sharding, layer) {
            let ok =
                find(Operation::AllGather, p, t.consumer).any(|g| g.trigger_id <= t.trigger_id);
            if !ok {
                push(
                    ViolationKind::GatherAfterCompute,
                    format!(
                        "page {p} is not gathered before compute of layer {layer} at step {}",
                        t.consumer
                    ),
                );
            }
        }
    }

    for g in schedule
        .tasks
        .iter()
        .filter(|t| t.operation == Operation::AllGather)
    {
        if layout.owner(&schedule.sharding, g.target) != Some(schedule.sharding.rank) {
            continue;
        }
        let ok =
            find(Operation::MoveToGpu, g.target, g.consumer).any(|m| m.trigger_id <= g.trigger_id);
        if !ok {
            push(
                ViolationKind::GatherBeforeMove,
                format!(
                    "page {} is gathered at trigger {} before it is moved",
                    g.target, g.trigger_id
                ),
            );
        }
    }
    out
}
