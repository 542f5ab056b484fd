//! Discrete-event replay of a page schedule on a hardware profile.
//!
//! Each resource (GPU compute, PCIe in each direction, the GPU interconnect,
//! SSD, CPU) serves its tasks one at a time in schedule order. A task with
//! trigger `k > 0` becomes eligible when compute step `k - 1` finishes;
//! trigger 0 tasks are eligible when the iteration starts. Gathers wait for
//! the move of their page, computes for all their gathers, evictions for the
//! compute that produced them.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::{Operation, Schedule};
use crate::tracer::{
    num_layers_in, op_compute_times, LogicalTimeline, TensorTrace, OPTIM_BYTES_PER_PARAM16_BYTE,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds added to every transfer.
    pub latency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    PcieH2d,
    PcieD2h,
    GpuInterconnect,
    SsdIo,
}

impl std::str::FromStr for LinkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcie_h2d" => Ok(LinkKind::PcieH2d),
            "pcie_d2h" => Ok(LinkKind::PcieD2h),
            "gpu_interconnect" => Ok(LinkKind::GpuInterconnect),
            "ssd_io" => Ok(LinkKind::SsdIo),
            other => Err(Error::InvalidConfig(format!("unknown link '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub pcie_h2d: Link,
    pub pcie_d2h: Link,
    pub gpu_interconnect: Link,
    pub ssd_io: Link,
    /// Activation bytes produced per second of GPU compute.
    pub gpu_rate: f64,
    /// Optimizer-state bytes updated per second by the whole host CPU.
    pub cpu_rate: f64,
    pub num_gpus: u32,
    /// GPUs that can drive PCIe transfers concurrently.
    pub pcie_lanes: u32,
    pub gpu_memory_bytes: u64,
    pub gpu_memory_bandwidth: f64,
}

pub const DEFAULT_LATENCY_S: f64 = 10e-6;

impl HardwareProfile {
    /// Eight 40 GiB A100s behind four PCIe switches, NVMe-backed host.
    pub fn a100_server() -> Self {
        let link = |bandwidth| Link {
            bandwidth,
            latency: DEFAULT_LATENCY_S,
        };
        HardwareProfile {
            name: "a100-server".into(),
            pcie_h2d: link(32e9),
            pcie_d2h: link(32e9),
            gpu_interconnect: link(200e9),
            ssd_io: link(3.5e9),
            gpu_rate: 160e9,
            cpu_rate: 200e9,
            num_gpus: 8,
            pcie_lanes: 4,
            gpu_memory_bytes: 40 << 30,
            gpu_memory_bandwidth: 600e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("pcie_h2d", self.pcie_h2d),
            ("pcie_d2h", self.pcie_d2h),
            ("gpu_interconnect", self.gpu_interconnect),
            ("ssd_io", self.ssd_io),
        ] {
            if !(l.bandwidth.is_finite() && l.bandwidth > 0.0)
                || !(l.latency.is_finite() && l.latency >= 0.0)
            {
                return Err(Error::InvalidConfig(format!(
                    "{name}: bandwidth must be > 0 and latency >= 0"
                )));
            }
        }
        for (name, r) in [
            ("gpu_rate", self.gpu_rate),
            ("cpu_rate", self.cpu_rate),
            ("gpu_memory_bandwidth", self.gpu_memory_bandwidth),
        ] {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_gpus == 0 || self.pcie_lanes == 0 {
            return Err(Error::InvalidConfig(
                "num_gpus and pcie_lanes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn link(&self, kind: LinkKind) -> Link {
        match kind {
            LinkKind::PcieH2d => self.pcie_h2d,
            LinkKind::PcieD2h => self.pcie_d2h,
            LinkKind::GpuInterconnect => self.gpu_interconnect,
            LinkKind::SsdIo => self.ssd_io,
        }
    }

    pub fn link_by_name(&self, name: &str) -> Result<Link> {
        Ok(self.link(name.parse()?))
    }

    /// Bandwidth one rank sees when all ranks transfer at once: PCIe is
    /// split over the lanes, SSD is one device for the whole host.
    pub fn per_rank_bandwidth(&self, kind: LinkKind) -> f64 {
        let n = self.num_gpus as f64;
        let l = self.link(kind);
        match kind {
            LinkKind::PcieH2d | LinkKind::PcieD2h => {
                l.bandwidth * self.num_gpus.min(self.pcie_lanes) as f64 / n
            }
            LinkKind::SsdIo => l.bandwidth / n,
            LinkKind::GpuInterconnect => l.bandwidth,
        }
    }

    fn per_rank_time(&self, bytes: u64, kind: LinkKind) -> f64 {
        self.link(kind).latency + bytes as f64 / self.per_rank_bandwidth(kind)
    }

    pub fn with_scaled_bandwidth(&self, kind: LinkKind, factor: f64) -> Self {
        let mut p = self.clone();
        let l = match kind {
            LinkKind::PcieH2d => &mut p.pcie_h2d,
            LinkKind::PcieD2h => &mut p.pcie_d2h,
            LinkKind::GpuInterconnect => &mut p.gpu_interconnect,
            LinkKind::SsdIo => &mut p.ssd_io,
        };
        l.bandwidth *= factor;
        p
    }
}

pub fn transfer_time(bytes: u64, link: &Link) -> f64 {
    link.latency + bytes as f64 / link.bandwidth
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Gpu,
    PcieH2d,
    PcieD2h,
    GpuInterconnect,
    Ssd,
    Cpu,
}

impl Resource {
    pub fn as_str(self) -> &'static str {
        match self {
            Resource::Gpu => "gpu",
            Resource::PcieH2d => "pcie_h2d",
            Resource::PcieD2h => "pcie_d2h",
            Resource::GpuInterconnect => "gpu_interconnect",
            Resource::Ssd => "ssd",
            Resource::Cpu => "cpu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOp {
    MoveToGpu,
    AllGather,
    Compute,
    EvictToCpu,
    SsdRead,
    CpuUpdate,
    SsdWrite,
}

impl SimOp {
    pub fn as_str(self) -> &'static str {
        match self {
            SimOp::MoveToGpu => "move_to_gpu",
            SimOp::AllGather => "all_gather",
            SimOp::Compute => "compute",
            SimOp::EvictToCpu => "evict_to_cpu",
            SimOp::SsdRead => "ssd_read",
            SimOp::CpuUpdate => "cpu_update",
            SimOp::SsdWrite => "ssd_write",
        }
    }
}

impl From<Operation> for SimOp {
    fn from(op: Operation) -> Self {
        match op {
            Operation::MoveToGpu => SimOp::MoveToGpu,
            Operation::AllGather => SimOp::AllGather,
            Operation::Compute => SimOp::Compute,
            Operation::EvictToCpu => SimOp::EvictToCpu,
        }
    }
}

/// Where the synchronous optimizer step runs, if modeled at all.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    #[default]
    None,
    /// States in host memory: CPU update only.
    SyncCpu,
    /// States on SSD: read, CPU update, write back.
    SyncSsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub iterations: usize,
    pub update: UpdateMode,
    pub samples_per_iteration: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            iterations: 1,
            update: UpdateMode::None,
            samples_per_iteration: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub task_id: usize,
    pub iteration: usize,
    pub operation: SimOp,
    pub target: u64,
    pub resource: Resource,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceStats {
    pub busy_s: f64,
    pub utilization: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan_s: f64,
    pub iterations: usize,
    pub resources: BTreeMap<Resource, ResourceStats>,
    pub gpu_idle_fraction: f64,
    pub samples_per_s: f64,
    pub timeline: Vec<TimelineEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl SimReport {
    pub fn utilization(&self, r: Resource) -> f64 {
        self.resources.get(&r).map_or(0.0, |s| s.utilization)
    }

    pub fn busy(&self, r: Resource) -> f64 {
        self.resources.get(&r).map_or(0.0, |s| s.busy_s)
    }
}

struct Job {
    op: SimOp,
    target: u64,
    iteration: usize,
    resource: Resource,
    duration: f64,
    deps: Vec<usize>,
}

fn resource_of(op: SimOp) -> Resource {
    match op {
        SimOp::MoveToGpu => Resource::PcieH2d,
        SimOp::AllGather => Resource::GpuInterconnect,
        SimOp::Compute => Resource::Gpu,
        SimOp::EvictToCpu => Resource::PcieD2h,
        SimOp::SsdRead | SimOp::SsdWrite => Resource::Ssd,
        SimOp::CpuUpdate => Resource::Cpu,
    }
}

fn build_jobs(
    schedule: &Schedule,
    traces: &[TensorTrace],
    profile: &HardwareProfile,
    opts: &SimOptions,
) -> Result<Vec<Job>> {
    let n = num_layers_in(traces);
    let op_times = op_compute_times(traces, &LogicalTimeline::new(n));
    let page = schedule.sharding.page_bytes;
    let gather_bytes = schedule.sharding.gather_bytes();
    let state_bytes = page * OPTIM_BYTES_PER_PARAM16_BYTE;
    let cpu_rate = profile.cpu_rate / profile.num_gpus as f64;

    let mut jobs: Vec<Job> = Vec::new();
    let mut gate: Vec<usize> = Vec::new();
    for it in 0..opts.iterations {
        let first = jobs.len();
        let mut compute_at: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, t) in schedule.tasks.iter().enumerate() {
            if t.operation == Operation::Compute
                && compute_at.insert(t.consumer, first + i).is_some()
            {
                return Err(Error::Simulation(format!(
                    "two computes for step {}",
                    t.consumer
                )));
            }
        }
        let mut move_at: BTreeMap<(u64, usize), usize> = BTreeMap::new();
        let mut gathers_for: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, t) in schedule.tasks.iter().enumerate() {
            match t.operation {
                Operation::MoveToGpu => {
                    move_at.insert((t.target, t.consumer), first + i);
                }
                Operation::AllGather => gathers_for.entry(t.consumer).or_default().push(first + i),
                _ => {}
            }
        }

        for t in &schedule.tasks {
            let op = SimOp::from(t.operation);
            let mut deps = if t.trigger_id == 0 {
                gate.clone()
            } else {
                let c = compute_at.get(&(t.trigger_id - 1)).ok_or_else(|| {
                    Error::Simulation(format!("no compute for trigger {}", t.trigger_id - 1))
                })?;
                vec![*c]
            };
            let duration = match t.operation {
                Operation::MoveToGpu => profile.per_rank_time(page, LinkKind::PcieH2d),
                Operation::AllGather => {
                    if let Some(&m) = move_at.get(&(t.target, t.consumer)) {
                        deps.push(m);
                    }
                    transfer_time(gather_bytes, &profile.gpu_interconnect)
                }
                Operation::Compute => {
                    deps.extend(gathers_for.get(&t.consumer).into_iter().flatten().copied());
                    if t.consumer > 0 {
                        if let Some(&c) = compute_at.get(&(t.consumer - 1)) {
                            deps.push(c);
                        }
                    }
                    *op_times.get(t.consumer).ok_or_else(|| {
                        Error::Simulation(format!(
                            "step {} has no compute time in the traces",
                            t.consumer
                        ))
                    })?
                }
                Operation::EvictToCpu => {
                    let c = compute_at.get(&t.consumer).ok_or_else(|| {
                        Error::Simulation(format!(
                            "eviction for step {} without compute",
                            t.consumer
                        ))
                    })?;
                    deps.push(*c);
                    profile.per_rank_time(page, LinkKind::PcieD2h)
                }
            };
            jobs.push(Job {
                op,
                target: t.target,
                iteration: it,
                resource: resource_of(op),
                duration,
                deps,
            });
        }

        let last_compute = compute_at.values().max().copied();
        let mut done: Vec<usize> = jobs[first..]
            .iter()
            .enumerate()
            .filter(|(_, j)| j.op == SimOp::EvictToCpu)
            .map(|(i, _)| first + i)
            .collect();
        done.extend(last_compute);

        let owned: Vec<u64> = {
            let mut v: Vec<u64> = schedule
                .tasks
                .iter()
                .filter(|t| t.operation == Operation::MoveToGpu)
                .map(|t| t.target)
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        gate = match opts.update {
            UpdateMode::None => done,
            UpdateMode::SyncCpu | UpdateMode::SyncSsd => {
                let ssd = opts.update == UpdateMode::SyncSsd;
                let mut reads = Vec::new();
                if ssd {
                    for &p in &owned {
                        reads.push(jobs.len());
                        jobs.push(Job {
                            op: SimOp::SsdRead,
                            target: p,
                            iteration: it,
                            resource: Resource::Ssd,
                            duration: profile.per_rank_time(state_bytes, LinkKind::SsdIo),
                            deps: done.clone(),
                        });
                    }
                }
                let mut updates = Vec::new();
                for (k, &p) in owned.iter().enumerate() {
                    let mut deps = done.clone();
                    deps.extend(reads.get(k));
                    updates.push(jobs.len());
                    jobs.push(Job {
                        op: SimOp::CpuUpdate,
                        target: p,
                        iteration: it,
                        resource: Resource::Cpu,
                        duration: state_bytes as f64 / cpu_rate,
                        deps,
                    });
                }
                let mut tail = updates.clone();
                if ssd {
                    for (k, &p) in owned.iter().enumerate() {
                        tail.push(jobs.len());
                        jobs.push(Job {
                            op: SimOp::SsdWrite,
                            target: p,
                            iteration: it,
                            resource: Resource::Ssd,
                            duration: profile.per_rank_time(state_bytes, LinkKind::SsdIo),
                            deps: vec![updates[k]],
                        });
                    }
                }
                // Fully blocking: the next iteration waits for the write-back.
                let mut g = done;
                g.extend(tail);
                g
            }
        };
    }
    Ok(jobs)
}

struct Ready(f64);

impl PartialEq for Ready {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for Ready {}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ready {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Replay the schedule. The report's timeline is in start-time order.
pub fn simulate(
    schedule: &Schedule,
    traces: &[TensorTrace],
    profile: &HardwareProfile,
    opts: &SimOptions,
) -> Result<SimReport> {
    profile.validate()?;
    if opts.iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be positive".into()));
    }
    let mut jobs = build_jobs(schedule, traces, profile, opts)?;

    // Each resource serves its jobs in list order.
    let mut last_on: BTreeMap<Resource, usize> = BTreeMap::new();
    for (i, job) in jobs.iter_mut().enumerate() {
        if let Some(prev) = last_on.insert(job.resource, i) {
            job.deps.push(prev);
        }
    }

    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); jobs.len()];
    let mut indeg = vec![0usize; jobs.len()];
    for (i, j) in jobs.iter().enumerate() {
        for &d in &j.deps {
            if d >= jobs.len() {
                return Err(Error::Simulation(format!(
                    "job {i} depends on missing job {d}"
                )));
            }
            succ[d].push(i);
            indeg[i] += 1;
        }
    }

    let mut ready_at = vec![0.0f64; jobs.len()];
    let mut start = vec![f64::NAN; jobs.len()];
    let mut end = vec![f64::NAN; jobs.len()];
    let mut heap: BinaryHeap<Reverse<(Ready, usize)>> = BinaryHeap::new();
    for (i, &d) in indeg.iter().enumerate() {
        if d == 0 {
            heap.push(Reverse((Ready(0.0), i)));
        }
    }
    let mut order = Vec::with_capacity(jobs.len());
    while let Some(Reverse((Ready(t), i))) = heap.pop() {
        start[i] = t;
        end[i] = t + jobs[i].duration;
        order.push(i);
        for &s in &succ[i] {
            ready_at[s] = ready_at[s].max(end[i]);
            indeg[s] -= 1;
            if indeg[s] == 0 {
                heap.push(Reverse((Ready(ready_at[s]), s)));
            }
        }
    }
    if order.len() != jobs.len() {
        return Err(Error::Simulation(format!(
            "dependency cycle: {} of {} tasks never became ready",
            jobs.len() - order.len(),
            jobs.len()
        )));
    }

    for (i, j) in jobs.iter().enumerate() {
        if j.deps.iter().any(|&d| start[i] < end[d]) {
            return Err(Error::Internal(format!(
                "task {i} started before a dependency finished"
            )));
        }
    }

    let makespan = end.iter().copied().fold(0.0, f64::max);
    let mut resources: BTreeMap<Resource, ResourceStats> = BTreeMap::new();
    resources.insert(
        Resource::Gpu,
        ResourceStats {
            busy_s: 0.0,
            utilization: 0.0,
            tasks: 0,
        },
    );
    for j in &jobs {
        let s = resources.entry(j.resource).or_insert(ResourceStats {
            busy_s: 0.0,
            utilization: 0.0,
            tasks: 0,
        });
        s.busy_s += j.duration;
        s.tasks += 1;
    }
    for s in resources.values_mut() {
        s.utilization = if makespan > 0.0 {
            s.busy_s / makespan
        } else {
            0.0
        };
    }
    let gpu_busy = resources[&Resource::Gpu].busy_s;
    let gpu_idle_fraction = if makespan > 0.0 {
        1.0 - gpu_busy / makespan
    } else {
        0.0
    };
    let samples_per_s = if makespan > 0.0 {
        opts.iterations as f64 * opts.samples_per_iteration / makespan
    } else {
        0.0
    };

    let timeline = order
        .iter()
        .map(|&i| TimelineEntry {
            task_id: i,
            iteration: jobs[i].iteration,
            operation: jobs[i].op,
            target: jobs[i].target,
            resource: jobs[i].resource,
            start_s: start[i],
            end_s: end[i],
        })
        .collect();

    let mut metadata = BTreeMap::new();
    metadata.insert("profile".into(), profile.name.clone());
    metadata.insert(
        "phase".into(),
        format!("{:?}", schedule.phase).to_lowercase(),
    );
    metadata.insert(
        "all_gather_cost".into(),
        "latency + (world_size - 1) * page_bytes / gpu_interconnect bandwidth, per owned page"
            .into(),
    );
    metadata.insert(
        "trigger_semantics".into(),
        "trigger k > 0 is eligible when compute k - 1 finishes".into(),
    );
    metadata.insert(
        "update_mode".into(),
        format!("{:?}", opts.update).to_lowercase(),
    );

    Ok(SimReport {
        makespan_s: makespan,
        iterations: opts.iterations,
        resources,
        gpu_idle_fraction,
        samples_per_s,
        timeline,
        metadata,
    })
}

/// Post-hoc checks: no overlap on any resource, busy time within makespan.
pub fn verify_report(report: &SimReport) -> Vec<String> {
    let mut out = Vec::new();
    let mut by_res: BTreeMap<Resource, Vec<(f64, f64)>> = BTreeMap::new();
    for e in &report.timeline {
        if e.end_s < e.start_s || e.start_s < 0.0 {
            out.push(format!("task {} has a negative span", e.task_id));
        }
        by_res
            .entry(e.resource)
            .or_default()
            .push((e.start_s, e.end_s));
    }
    let eps = 1e-12 * report.makespan_s.max(1.0);
    for (r, mut spans) in by_res {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for w in spans.windows(2) {
            if w[1].0 + eps < w[0].1 {
                out.push(format!("{} overlaps at {:.9}s", r.as_str(), w[1].0));
            }
        }
    }
    for (r, s) in &report.resources {
        if s.busy_s > report.makespan_s * (1.0 + 1e-12) + eps {
            out.push(format!(
                "{} busy {} exceeds makespan {}",
                r.as_str(),
                s.busy_s,
                report.makespan_s
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `a.makespan / b.makespan`.
    pub speedup: f64,
    /// `b - a` per resource.
    pub utilization_delta: BTreeMap<Resource, f64>,
    pub gpu_idle_delta: f64,
}

pub fn compare(a: &SimReport, b: &SimReport) -> Comparison {
    let mut utilization_delta = BTreeMap::new();
    for r in a.resources.keys().chain(b.resources.keys()) {
        utilization_delta.insert(*r, b.utilization(*r) - a.utilization(*r));
    }
    Comparison {
        speedup: if b.makespan_s > 0.0 {
            a.makespan_s / b.makespan_s
        } else {
            1.0
        },
        utilization_delta,
        gpu_idle_delta: b.gpu_idle_fraction - a.gpu_idle_fraction,
    }
}

pub fn timeline_csv(report: &SimReport) -> String {
    let mut s = String::from("task_id,operation,resource,start_s,end_s\n");
    for e in &report.timeline {
        let _ = writeln!(
            s,
            "{},{},{},{:.9},{:.9}",
            e.task_id,
            e.operation.as_str(),
            e.resource.as_str(),
            e.start_s,
            e.end_s
        );
    }
    s
}
