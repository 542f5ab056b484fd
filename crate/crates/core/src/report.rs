//! Versioned JSON reports and the end-to-end pipeline that fills them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::{
    closed_form_totals, ignored_terms, model_footprint, param_count, tensor_inventory,
    FootprintTotals, Granularity, TransformerConfig,
};
use crate::lockfree::{self, Delays, Mode, RunOptions, ToyProblem, TrainReport};
use crate::presets::{ExperimentConfig, PhaseSelection};
use crate::scheduler::{
    self, peak_memory, validate_schedule, Operation, Schedule, ScheduleOptions, ShardingModel,
};
use crate::simengine::{self, compare, Comparison, SimOptions, SimReport};
use crate::tracer::{build_trace, peak_live_bytes, LogicalTimeline, TensorTrace, TimingModel};

pub const SCHEMA_VERSION: &str = "hiermem.report.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub command: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<FootprintSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
}

impl Report {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Report {
            schema_version: SCHEMA_VERSION.into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
            footprint: None,
            trace: None,
            schedule: None,
            simulation: None,
            training: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parse and check the schema id.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Usage(format!(
                "report schema '{}' is not {SCHEMA_VERSION}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintSection {
    pub model: TransformerConfig,
    pub param_elements: u64,
    pub per_layer: FootprintTotals,
    /// Small terms dropped, as in the closed form.
    pub totals: FootprintTotals,
    pub exact_totals: FootprintTotals,
    pub ignored_per_layer: FootprintTotals,
}

impl FootprintSection {
    pub fn compute(cfg: &TransformerConfig) -> Result<Self> {
        Ok(FootprintSection {
            model: *cfg,
            param_elements: param_count(cfg)?,
            per_layer: closed_form_totals(cfg)?,
            totals: model_footprint(cfg, false)?,
            exact_totals: model_footprint(cfg, true)?,
            ignored_per_layer: ignored_terms(cfg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSection {
    pub tensors: usize,
    pub recomputed: usize,
    pub total_ops: usize,
    pub peak_live_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub tasks: usize,
    pub moves: usize,
    pub gathers: usize,
    pub computes: usize,
    pub evicts: usize,
    pub gpu_budget: u64,
    pub peak_bytes: u64,
    pub violations: usize,
}

impl ScheduleStats {
    pub fn of(s: &Schedule, traces: &[TensorTrace]) -> Self {
        ScheduleStats {
            tasks: s.tasks.len(),
            moves: s.count(Operation::MoveToGpu),
            gathers: s.count(Operation::AllGather),
            computes: s.count(Operation::Compute),
            evicts: s.count(Operation::EvictToCpu),
            gpu_budget: s.gpu_budget,
            peak_bytes: peak_memory(s, traces),
            violations: validate_schedule(s, traces, s.gpu_budget).len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub phase1: Option<ScheduleStats>,
    pub phase2: Option<ScheduleStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSection {
    pub phase1: Option<SimReport>,
    pub phase2: Option<SimReport>,
    /// Phase 1 against phase 2; `speedup` is makespan(1) / makespan(2).
    pub comparison: Option<Comparison>,
}

impl SimulationSection {
    /// The most optimized replay present.
    pub fn best(&self) -> Option<&SimReport> {
        self.phase2.as_ref().or(self.phase1.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub sync: Option<TrainReport>,
    pub lockfree: Option<TrainReport>,
    /// Lock-free over synchronous samples/s when both ran and took time.
    pub speedup: Option<f64>,
}

impl TrainingSection {
    pub fn new(sync: Option<TrainReport>, lockfree: Option<TrainReport>) -> Self {
        let speedup = match (&sync, &lockfree) {
            (Some(s), Some(l)) => match (s.samples_per_s, l.samples_per_s) {
                (Some(a), Some(b)) if a > 0.0 => Some(b / a),
                _ => None,
            },
            _ => None,
        };
        TrainingSection {
            sync,
            lockfree,
            speedup,
        }
    }
}

/// Everything the pipeline produces besides the report, for callers that
/// want to keep going (plots, further simulation).
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: Report,
    pub traces: Vec<TensorTrace>,
    pub phase1: Option<Schedule>,
    pub phase2: Option<Schedule>,
}

/// footprint -> inventory -> trace -> schedule -> simulate (-> toy trainer).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let model = cfg.model.resolve().map_err(|e| e.in_stage("config"))?;
    let hw = cfg.hardware.resolve().map_err(|e| e.in_stage("config"))?;
    let mut report = Report::new("pipeline", cfg)?;

    report.footprint =
        Some(FootprintSection::compute(&model).map_err(|e| e.in_stage("footprint"))?);

    let inventory = tensor_inventory(&model, Granularity::PerLogicalTensor)
        .map_err(|e| e.in_stage("inventory"))?;
    let timing = TimingModel::from_rates(hw.gpu_rate, hw.cpu_rate);
    let traces =
        build_trace(&inventory, &timing, cfg.recompute.into()).map_err(|e| e.in_stage("trace"))?;
    let timeline = LogicalTimeline::new(model.num_layers as usize);
    report.trace = Some(TraceSection {
        tensors: traces.len(),
        recomputed: traces.iter().filter(|t| t.recomputed).count(),
        total_ops: timeline.total_ops(),
        peak_live_bytes: peak_live_bytes(&traces, timeline.total_ops()),
    });

    let sharding = ShardingModel::new(cfg.world_size, cfg.rank, cfg.page_bytes)
        .map_err(|e| e.in_stage("schedule"))?;
    let opts = ScheduleOptions {
        full_iteration: cfg.full_iteration,
    };
    let plan = scheduler::plan(&traces, cfg.gpu_budget, &sharding, opts)
        .map_err(|e| e.in_stage("schedule"))?;
    let (phase1, phase2) = match cfg.phases {
        PhaseSelection::Both => (Some(plan.phase1), Some(plan.phase2)),
        PhaseSelection::Phase1 => (Some(plan.phase1), None),
        PhaseSelection::Phase2 => (None, Some(plan.phase2)),
    };
    report.schedule = Some(ScheduleSection {
        phase1: phase1.as_ref().map(|s| ScheduleStats::of(s, &traces)),
        phase2: phase2.as_ref().map(|s| ScheduleStats::of(s, &traces)),
    });

    let sim_opts = SimOptions {
        iterations: cfg.iterations,
        update: cfg.update,
        samples_per_iteration: model.batch_size as f64 * hw.num_gpus as f64,
    };
    let sim = |s: &Option<Schedule>| -> Result<Option<SimReport>> {
        s.as_ref()
            .map(|s| simengine::simulate(s, &traces, &hw, &sim_opts))
            .transpose()
            .map_err(|e| e.in_stage("simulate"))
    };
    let (r1, r2) = (sim(&phase1)?, sim(&phase2)?);
    let comparison = match (&r1, &r2) {
        (Some(a), Some(b)) => Some(compare(a, b)),
        _ => None,
    };
    report.simulation = Some(SimulationSection {
        phase1: r1,
        phase2: r2,
        comparison,
    });

    if let Some(toy) = &cfg.toy {
        let stage = |e: Error| e.in_stage("lockfree");
        let delays = Delays::preset(&toy.delays).map_err(stage)?;
        let problem = ToyProblem::new(&toy.config, cfg.seed).map_err(stage)?;
        let run = |mode| {
            lockfree::run(
                &problem,
                &delays,
                &RunOptions::new(mode, toy.iterations),
                cfg.seed,
            )
        };
        let sync = run(Mode::Sync).map_err(stage)?;
        let lf = run(Mode::Lockfree).map_err(stage)?;
        report.training = Some(TrainingSection::new(Some(sync), Some(lf)));
    }

    Ok(PipelineOutput {
        report,
        traces,
        phase1,
        phase2,
    })
}

pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    Ok(run_pipeline(cfg)?.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Timeline,
    Loss,
    Utilization,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timeline" => Ok(PlotKind::Timeline),
            "loss" => Ok(PlotKind::Loss),
            "utilization" => Ok(PlotKind::Utilization),
            other => Err(Error::Usage(format!(
                "unknown plot kind '{other}' (timeline, loss, utilization)"
            ))),
        }
    }
}

/// CSV series for external plotting.
pub fn cmd_plot(report: &Report, kind: PlotKind) -> Result<String> {
    use std::fmt::Write;

    let missing = |what: &str| Error::Usage(format!("report has no {what} section"));
    match kind {
        PlotKind::Timeline => {
            let sim = report
                .simulation
                .as_ref()
                .and_then(|s| s.best())
                .ok_or_else(|| missing("simulation"))?;
            Ok(simengine::timeline_csv(sim))
        }
        PlotKind::Loss => {
            let t = report
                .training
                .as_ref()
                .ok_or_else(|| missing("training"))?;
            let runs: Vec<&TrainReport> = t.sync.iter().chain(t.lockfree.iter()).collect();
            let mut s = String::new();
            if let [one] = runs[..] {
                s.push_str("iteration,loss\n");
                for p in &one.loss_curve {
                    let _ = writeln!(s, "{},{}", p.iteration, p.loss);
                }
            } else {
                s.push_str("mode,iteration,loss\n");
                for r in runs {
                    let mode = match r.mode {
                        Mode::Sync => "sync",
                        Mode::Lockfree => "lockfree",
                    };
                    for p in &r.loss_curve {
                        let _ = writeln!(s, "{mode},{},{}", p.iteration, p.loss);
                    }
                }
            }
            Ok(s)
        }
        PlotKind::Utilization => {
            let sim = report
                .simulation
                .as_ref()
                .ok_or_else(|| missing("simulation"))?;
            let mut s = String::from("phase,resource,busy_s,utilization\n");
            for (phase, r) in [("phase1", &sim.phase1), ("phase2", &sim.phase2)] {
                for (res, st) in r.iter().flat_map(|r| r.resources.iter()) {
                    let _ = writeln!(
                        s,
                        "{phase},{},{:.9},{:.6}",
                        res.as_str(),
                        st.busy_s,
                        st.utilization
                    );
                }
            }
            Ok(s)
        }
    }
}
