//! Command-line front end. The `hiermem` binary is a thin wrapper over
//! [`main_with_args`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::footprint::{
    layer_footprint, tensor_inventory, ByteUnit, FootprintTotals, Granularity, TransformerConfig,
};
use crate::lockfree::{self, Clock, Delays, Mode, RunOptions, ToyConfig, ToyProblem};
use crate::pagemem::{replay, PageOp, PoolSpec};
use crate::presets::{self, read_json, ExperimentConfig};
use crate::report::{
    cmd_pipeline, cmd_plot, FootprintSection, Report, SimulationSection, TrainingSection,
};
use crate::scheduler::{self, Schedule, ScheduleOptions, ShardingModel};
use crate::simengine::{self, HardwareProfile, SimOptions, UpdateMode};
use crate::tracer::{build_trace, TensorTrace, TimingModel};

#[derive(Debug, Parser)]
#[command(
    name = "hiermem",
    version,
    about = "Hierarchical memory planning and replay for Transformer training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Unit {
    #[value(name = "B")]
    B,
    #[value(name = "MiB")]
    MiB,
    #[value(name = "GiB")]
    GiB,
}

impl From<Unit> for ByteUnit {
    fn from(u: Unit) -> Self {
        match u {
            Unit::B => ByteUnit::B,
            Unit::MiB => ByteUnit::MiB,
            Unit::GiB => ByteUnit::GiB,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Update {
    None,
    SyncCpu,
    SyncSsd,
}

impl From<Update> for UpdateMode {
    fn from(u: Update) -> Self {
        match u {
            Update::None => UpdateMode::None,
            Update::SyncCpu => UpdateMode::SyncCpu,
            Update::SyncSsd => UpdateMode::SyncSsd,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Sync,
    Lockfree,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlotArg {
    Timeline,
    Loss,
    Utilization,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer and whole-model memory footprint.
    Footprint {
        /// Model JSON file or `preset:<name>`.
        #[arg(long)]
        config: String,
        /// Include the small terms the closed form drops.
        #[arg(long)]
        exact: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long, value_enum, default_value = "GiB")]
        unit: Unit,
    },
    /// Replay a page-manager operation script.
    PagememDemo {
        #[arg(long)]
        pool_spec: PathBuf,
        #[arg(long)]
        ops: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tensor lifetimes over one iteration, as a JSON array.
    Trace {
        #[arg(long)]
        config: String,
        /// Timing model JSON; defaults to the a100-server rates.
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(long)]
        recompute: bool,
        #[arg(long, default_value = "per_logical_tensor")]
        granularity: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lifetime-based task schedule; exits 2 when infeasible.
    Schedule {
        #[arg(long)]
        config: String,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        gpu_budget: u64,
        #[arg(long)]
        phase1_only: bool,
        /// Also schedule the backward sweep.
        #[arg(long)]
        full_iteration: bool,
        #[arg(long, default_value_t = 8)]
        world_size: u32,
        #[arg(long, default_value_t = 0)]
        rank: u32,
        #[arg(long, default_value_t = crate::pagemem::DEFAULT_PAGE_BYTES)]
        page_bytes: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a schedule on a hardware profile.
    Simulate {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        /// Profile JSON file or `preset:<name>`.
        #[arg(long, default_value = "preset:a100-server")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long, value_enum, default_value = "none")]
        update: Update,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-task timeline as CSV.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Toy trainer under synchronous or lock-free updating.
    Lockfree {
        /// Toy problem JSON; defaults to the built-in problem.
        #[arg(long)]
        toy_config: Option<PathBuf>,
        /// Delay JSON file or `preset:ssd|cpu|zero`.
        #[arg(long, default_value = "preset:ssd")]
        delays: String,
        #[arg(long, value_enum, default_value = "lockfree")]
        mode: ModeArg,
        #[arg(long, default_value_t = 200)]
        iters: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bound on staleness in lock-free mode.
        #[arg(long)]
        max_staleness: Option<u64>,
        /// Run on real threads, sleeping `scale` times each delay.
        #[arg(long)]
        wall_scale: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full footprint -> trace -> schedule -> simulate run from one config.
    Pipeline {
        /// Experiment JSON file or `preset:<name>`.
        #[arg(long)]
        config: String,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CSV series from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in presets.
    Presets,
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut String) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text)
            .map_err(|e| Error::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            stdout.push_str(text);
            Ok(())
        }
    }
}

/// Write through a sibling temp file so readers never see half a report.
fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn model_arg(arg: &str) -> Result<TransformerConfig> {
    let cfg = presets::load_or_preset(arg, presets::model)?;
    cfg.validate()?;
    Ok(cfg)
}

fn footprint_text(
    cfg: &TransformerConfig,
    exact: bool,
    format: Format,
    unit: ByteUnit,
) -> Result<String> {
    let layer = layer_footprint(cfg, exact)?;
    let model = crate::footprint::model_footprint(cfg, exact)?;
    let mut s = String::new();
    match format {
        Format::Json => {
            let mut section = FootprintSection::compute(cfg)?;
            if exact {
                section.totals = section.exact_totals;
            }
            let mut report = Report::new("footprint", cfg)?;
            report.footprint = Some(section);
            return report.to_json();
        }
        Format::Csv => {
            s.push_str("row,block,params_bytes,acts_bytes,optims_bytes\n");
            for r in &layer.rows {
                let _ = writeln!(
                    s,
                    "{},{:?},{},{},{}",
                    r.layer_name, r.block, r.params_bytes, r.acts_bytes, r.optims_bytes
                );
            }
            let t = layer.totals;
            let _ = writeln!(
                s,
                "layer_total,,{},{},{}",
                t.params_bytes, t.acts_bytes, t.optims_bytes
            );
            let _ = writeln!(
                s,
                "model_total,,{},{},{}",
                model.params_bytes, model.acts_bytes, model.optims_bytes
            );
        }
        Format::Table => {
            let unit_name = format!("{unit:?}");
            let line = |s: &mut String, name: &str, t: &FootprintTotals| {
                let _ = writeln!(
                    s,
                    "{name:<24} {:>16} {:>16} {:>16}",
                    unit.format(t.params_bytes),
                    unit.format(t.acts_bytes),
                    unit.format(t.optims_bytes)
                );
            };
            let _ = writeln!(
                s,
                "{:<24} {:>16} {:>16} {:>16}",
                "", "params", "acts", "optims"
            );
            for r in &layer.rows {
                let t = FootprintTotals {
                    params_bytes: r.params_bytes,
                    acts_bytes: r.acts_bytes,
                    optims_bytes: r.optims_bytes,
                };
                line(&mut s, &r.layer_name, &t);
            }
            line(&mut s, "per layer", &layer.totals);
            line(&mut s, &format!("x{} layers", cfg.num_layers), &model);
            let _ = writeln!(
                s,
                "(units: {unit_name}{})",
                if exact { ", exact" } else { "" }
            );
        }
    }
    Ok(s)
}

fn schedule_traces(path: &Path) -> Result<Vec<TensorTrace>> {
    let traces: Vec<TensorTrace> = read_json(path)?;
    if traces.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} holds no traces",
            path.display()
        )));
    }
    Ok(traces)
}

/// Run one parsed command; anything meant for stdout is returned.
pub fn execute(cli: Cli) -> Result<String> {
    let mut stdout = String::new();
    match cli.command {
        Command::Footprint {
            config,
            exact,
            format,
            unit,
        } => {
            let cfg = model_arg(&config)?;
            stdout = footprint_text(&cfg, exact, format, unit.into())?;
        }
        Command::PagememDemo {
            pool_spec,
            ops,
            out,
        } => {
            let spec: PoolSpec = read_json(&pool_spec)?;
            let ops: Vec<PageOp> = read_json(&ops)?;
            let r = replay(spec.build()?, &ops);
            emit(out.as_deref(), &json(&r)?, &mut stdout)?;
        }
        Command::Trace {
            config,
            timing,
            recompute,
            granularity,
            out,
        } => {
            let cfg = model_arg(&config)?;
            let gran: Granularity = granularity.parse()?;
            let timing: TimingModel = match timing {
                Some(p) => read_json(&p)?,
                None => TimingModel::default(),
            };
            let inv = tensor_inventory(&cfg, gran)?;
            let traces = build_trace(&inv, &timing, recompute.into())?;
            emit(out.as_deref(), &json(&traces)?, &mut stdout)?;
        }
        Command::Schedule {
            config,
            traces,
            gpu_budget,
            phase1_only,
            full_iteration,
            world_size,
            rank,
            page_bytes,
            out,
        } => {
            // The model file is checked for consistency with the traces.
            let cfg = model_arg(&config)?;
            let traces = schedule_traces(&traces)?;
            let layers = crate::tracer::num_layers_in(&traces);
            if layers as u64 != cfg.num_layers {
                return Err(Error::InvalidConfig(format!(
                    "traces cover {layers} layers, config has {}",
                    cfg.num_layers
                )));
            }
            let sharding = ShardingModel::new(world_size, rank, page_bytes)?;
            let opts = ScheduleOptions { full_iteration };
            let s = if phase1_only {
                scheduler::schedule_phase1(&traces, gpu_budget, &sharding, opts)?
            } else {
                scheduler::schedule(&traces, gpu_budget, &sharding, opts)?
            };
            emit(out.as_deref(), &json(&s)?, &mut stdout)?;
        }
        Command::Simulate {
            schedule,
            traces,
            profile,
            iterations,
            update,
            out,
            timeline,
        } => {
            let s: Schedule = read_json(&schedule)?;
            let traces = schedule_traces(&traces)?;
            let hw: HardwareProfile = presets::load_or_preset(&profile, presets::hardware)?;
            let opts = SimOptions {
                iterations,
                update: update.into(),
                ..SimOptions::default()
            };
            let r = simengine::simulate(&s, &traces, &hw, &opts)?;
            let problems = simengine::verify_report(&r);
            if !problems.is_empty() {
                return Err(Error::Internal(problems.join("; ")));
            }
            if let Some(p) = &timeline {
                emit(Some(p), &simengine::timeline_csv(&r), &mut stdout)?;
            }
            let mut report = Report::new(
                "simulate",
                &serde_json::json!({ "profile": hw.name, "iterations": iterations, "update": opts.update }),
            )?;
            let (phase1, phase2) = match s.phase {
                scheduler::Phase::Phase1 => (Some(r), None),
                scheduler::Phase::Phase2 => (None, Some(r)),
            };
            report.simulation = Some(SimulationSection {
                phase1,
                phase2,
                comparison: None,
            });
            emit(out.as_deref(), &report.to_json()?, &mut stdout)?;
        }
        Command::Lockfree {
            toy_config,
            delays,
            mode,
            iters,
            seed,
            max_staleness,
            wall_scale,
            out,
        } => {
            let toy: ToyConfig = match toy_config {
                Some(p) => read_json(&p)?,
                None => ToyConfig::default(),
            };
            let delays: Delays = presets::load_or_preset(&delays, Delays::preset)?;
            let problem = ToyProblem::new(&toy, seed)?;
            let mode = match mode {
                ModeArg::Sync => Mode::Sync,
                ModeArg::Lockfree => Mode::Lockfree,
            };
            let opts = RunOptions {
                mode,
                iterations: iters,
                clock: wall_scale.map_or(Clock::Virtual, |scale| Clock::Wall { scale }),
                max_staleness,
            };
            let r = lockfree::run(&problem, &delays, &opts, seed)?;
            let mut report = Report::new(
                "lockfree",
                &serde_json::json!({ "toy": toy, "delays": delays, "options": opts, "seed": seed }),
            )?;
            report.training = Some(match mode {
                Mode::Sync => TrainingSection::new(Some(r), None),
                Mode::Lockfree => TrainingSection::new(None, Some(r)),
            });
            emit(out.as_deref(), &report.to_json()?, &mut stdout)?;
        }
        Command::Pipeline { config, seed, out } => {
            let mut cfg: ExperimentConfig = presets::load_or_preset(&config, presets::experiment)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let report = cmd_pipeline(&cfg)?;
            emit(out.as_deref(), &report.to_json()?, &mut stdout)?;
        }
        Command::Plot { report, kind, out } => {
            let text = std::fs::read_to_string(&report)
                .map_err(|e| Error::Usage(format!("cannot read {}: {e}", report.display())))?;
            let r = Report::from_json(&text)?;
            let kind = match kind {
                PlotArg::Timeline => crate::report::PlotKind::Timeline,
                PlotArg::Loss => crate::report::PlotKind::Loss,
                PlotArg::Utilization => crate::report::PlotKind::Utilization,
            };
            emit(out.as_deref(), &cmd_plot(&r, kind)?, &mut stdout)?;
        }
        Command::Presets => {
            let _ = writeln!(stdout, "models: {}", presets::MODEL_PRESETS.join(", "));
            let _ = writeln!(stdout, "hardware: {}", presets::HARDWARE_PRESETS.join(", "));
            let _ = writeln!(
                stdout,
                "experiments: {}",
                presets::EXPERIMENT_PRESETS.join(", ")
            );
            let _ = writeln!(stdout, "delays: ssd, cpu, zero");
        }
    }
    Ok(stdout)
}

/// Parse, run and print; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
