//! Per-tensor lifetimes on the logical op timeline of one iteration.
//!
//! For `n` layers the timeline holds `2n` compute ops: forward `0..n` then
//! backward in reverse layer order, so `forward(i) = i` and
//! `backward(i) = 2n - 1 - i`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::{TensorKind, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalOp {
    pub id: usize,
    pub layer: usize,
    pub pass: Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalTimeline {
    pub num_layers: usize,
}

impl LogicalTimeline {
    pub fn new(num_layers: usize) -> Self {
        LogicalTimeline { num_layers }
    }

    pub fn total_ops(&self) -> usize {
        2 * self.num_layers
    }

    pub fn forward(&self, layer: usize) -> usize {
        layer
    }

    pub fn backward(&self, layer: usize) -> usize {
        2 * self.num_layers - 1 - layer
    }

    pub fn op(&self, id: usize) -> LogicalOp {
        let n = self.num_layers;
        if id < n {
            LogicalOp {
                id,
                layer: id,
                pass: Pass::Forward,
            }
        } else {
            LogicalOp {
                id,
                layer: 2 * n - 1 - id,
                pass: Pass::Backward,
            }
        }
    }

    pub fn ops(&self) -> Vec<LogicalOp> {
        (0..self.total_ops()).map(|id| self.op(id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorTrace {
    pub tensor_id: u64,
    pub name: String,
    pub kind: TensorKind,
    pub layer: usize,
    pub bytes: u64,
    pub first_id: usize,
    pub end_id: usize,
    pub cpu_time: f64,
    pub gpu_time: f64,
    /// Synthetic access that regenerates a discarded activation in backward.
    #[serde(default)]
    pub recomputed: bool,
}

impl TensorTrace {
    pub fn live_at(&self, id: usize) -> bool {
        self.first_id <= id && id <= self.end_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub gpu_time: f64,
    pub cpu_time: f64,
}

/// How per-tensor times are synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum TimingModel {
    /// Same times for every activation (gpu) and every parameter (cpu).
    Constant { gpu_time: f64, cpu_time: f64 },
    /// Activation bytes produced drive gpu time; the optimizer-state bytes
    /// behind a parameter drive its cpu time.
    Proportional {
        gpu_seconds_per_byte: f64,
        cpu_seconds_per_byte: f64,
    },
    /// Explicit times by tensor name, falling back to `default`.
    Table {
        entries: BTreeMap<String, TimingEntry>,
        default: TimingEntry,
    },
}

/// FP32 optimizer bytes per FP16 parameter byte (12 vs 2 bytes per element).
pub const OPTIM_BYTES_PER_PARAM16_BYTE: u64 = 6;

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel::from_rates(160e9, 200e9)
    }
}

impl TimingModel {
    /// Proportional model from throughput in bytes per second.
    pub fn from_rates(gpu_bytes_per_s: f64, cpu_bytes_per_s: f64) -> Self {
        TimingModel::Proportional {
            gpu_seconds_per_byte: 1.0 / gpu_bytes_per_s,
            cpu_seconds_per_byte: 1.0 / cpu_bytes_per_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        let good = match self {
            TimingModel::Constant { gpu_time, cpu_time } => ok(*gpu_time) && ok(*cpu_time),
            TimingModel::Proportional {
                gpu_seconds_per_byte,
                cpu_seconds_per_byte,
            } => ok(*gpu_seconds_per_byte) && ok(*cpu_seconds_per_byte),
            TimingModel::Table { entries, default } => entries
                .values()
                .chain(std::iter::once(default))
                .all(|e| ok(e.gpu_time) && ok(e.cpu_time)),
        };
        if good {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "timing model values must be finite and non-negative".into(),
            ))
        }
    }

    fn times(&self, spec: &TensorSpec) -> (f64, f64) {
        let act = spec.kind == TensorKind::Activation16;
        let param = spec.kind == TensorKind::Param16;
        match self {
            TimingModel::Constant { gpu_time, cpu_time } => (
                if act { *gpu_time } else { 0.0 },
                if param { *cpu_time } else { 0.0 },
            ),
            TimingModel::Proportional {
                gpu_seconds_per_byte,
                cpu_seconds_per_byte,
            } => (
                if act {
                    gpu_seconds_per_byte * spec.bytes as f64
                } else {
                    0.0
                },
                if param {
                    cpu_seconds_per_byte * (spec.bytes * OPTIM_BYTES_PER_PARAM16_BYTE) as f64
                } else {
                    0.0
                },
            ),
            TimingModel::Table { entries, default } => {
                let e = entries.get(&spec.name).unwrap_or(default);
                (e.gpu_time, e.cpu_time)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecomputePolicy {
    #[default]
    Off,
    On,
}

impl From<bool> for RecomputePolicy {
    fn from(on: bool) -> Self {
        if on {
            RecomputePolicy::On
        } else {
            RecomputePolicy::Off
        }
    }
}

/// The layer output (last LayerNorm) is kept as the recompute checkpoint.
pub fn is_checkpoint(name: &str) -> bool {
    name.contains(".ffn.ln.")
}

pub fn num_layers(inventory: &[TensorSpec]) -> usize {
    inventory
        .iter()
        .map(|t| t.layer_index + 1)
        .max()
        .unwrap_or(0)
}

pub fn num_layers_in(traces: &[TensorTrace]) -> usize {
    traces.iter().map(|t| t.layer + 1).max().unwrap_or(0)
}

/// Lifetimes for every GPU-side tensor. Optimizer states are left out; they
/// never live on the GPU timeline.
pub fn build_trace(
    inventory: &[TensorSpec],
    timing: &TimingModel,
    recompute: RecomputePolicy,
) -> Result<Vec<TensorTrace>> {
    if inventory.is_empty() {
        return Err(Error::InvalidConfig("empty tensor inventory".into()));
    }
    timing.validate()?;
    let tl = LogicalTimeline::new(num_layers(inventory));
    let mut next_id = inventory.iter().map(|t| t.id).max().unwrap_or(0) + 1;
    let mut out = Vec::with_capacity(inventory.len());
    let mut regenerated = Vec::new();

    for spec in inventory {
        let (f, b) = (tl.forward(spec.layer_index), tl.backward(spec.layer_index));
        let (gpu_time, cpu_time) = timing.times(spec);
        let mut trace = TensorTrace {
            tensor_id: spec.id,
            name: spec.name.clone(),
            kind: spec.kind,
            layer: spec.layer_index,
            bytes: spec.bytes,
            first_id: f,
            end_id: b,
            cpu_time,
            gpu_time,
            recomputed: false,
        };
        match spec.kind {
            TensorKind::Optim32 => continue,
            TensorKind::Grad16 => trace.first_id = b,
            TensorKind::Param16 => {}
            TensorKind::Activation16 => {
                if recompute == RecomputePolicy::On && !is_checkpoint(&spec.name) {
                    trace.end_id = f;
                    regenerated.push(TensorTrace {
                        tensor_id: next_id,
                        name: format!("{}.recompute", spec.name),
                        first_id: b,
                        end_id: b,
                        recomputed: true,
                        ..trace.clone()
                    });
                    next_id += 1;
                }
            }
        }
        out.push(trace);
    }
    out.extend(regenerated);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceViolation {
    pub tensor_id: u64,
    pub message: String,
}

pub fn validate_trace(traces: &[TensorTrace], timeline: &LogicalTimeline) -> Vec<TraceViolation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let total = timeline.total_ops();
    for t in traces {
        let mut bad = |message: String| {
            out.push(TraceViolation {
                tensor_id: t.tensor_id,
                message,
            })
        };
        if !seen.insert(t.tensor_id) {
            bad(format!("duplicate tensor_id {}", t.tensor_id));
        }
        if t.first_id > t.end_id {
            bad(format!(
                "tensor {}: first_id {} > end_id {}",
                t.tensor_id, t.first_id, t.end_id
            ));
        }
        if t.end_id >= total {
            bad(format!(
                "tensor {}: end_id {} outside {total} ops",
                t.tensor_id, t.end_id
            ));
        }
        if t.layer >= timeline.num_layers {
            bad(format!(
                "tensor {}: layer {} out of range",
                t.tensor_id, t.layer
            ));
        }
        for (what, x) in [("cpu_time", t.cpu_time), ("gpu_time", t.gpu_time)] {
            if !(x.is_finite() && x >= 0.0) {
                bad(format!(
                    "tensor {}: {what} {x} is not a non-negative number",
                    t.tensor_id
                ));
            }
        }
    }
    out
}

/// Live bytes per logical op id (inclusive intervals).
pub fn live_bytes_profile(traces: &[TensorTrace], total_ops: usize) -> Vec<u64> {
    let mut delta = vec![0i128; total_ops + 1];
    for t in traces {
        if t.first_id >= total_ops {
            continue;
        }
        delta[t.first_id] += t.bytes as i128;
        delta[(t.end_id + 1).min(total_ops)] -= t.bytes as i128;
    }
    let mut acc = 0i128;
    delta[..total_ops]
        .iter()
        .map(|d| {
            acc += d;
            acc as u64
        })
        .collect()
}

pub fn peak_live_bytes(traces: &[TensorTrace], total_ops: usize) -> u64 {
    live_bytes_profile(traces, total_ops)
        .into_iter()
        .max()
        .unwrap_or(0)
}

/// GPU seconds per logical op. Backward costs twice the forward plus any
/// regeneration of discarded activations.
pub fn op_compute_times(traces: &[TensorTrace], timeline: &LogicalTimeline) -> Vec<f64> {
    let n = timeline.num_layers;
    let mut fwd = vec![0.0; n];
    let mut regen = vec![0.0; n];
    for t in traces
        .iter()
        .filter(|t| t.kind == TensorKind::Activation16 && t.layer < n)
    {
        if t.recomputed {
            regen[t.layer] += t.gpu_time;
        } else {
            fwd[t.layer] += t.gpu_time;
        }
    }
    (0..timeline.total_ops())
        .map(|id| {
            let op = timeline.op(id);
            match op.pass {
                Pass::Forward => fwd[op.layer],
                Pass::Backward => 2.0 * fwd[op.layer] + regen[op.layer],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::footprint::{tensor_inventory, Granularity, TransformerConfig};

    fn small_cfg(layers: u64) -> TransformerConfig {
        TransformerConfig {
            batch_size: 2,
            seq_len: 16,
            d_model: 64,
            d_ffn: 256,
            num_layers: layers,
            num_heads: 4,
        }
    }

    fn traces(layers: u64, recompute: bool) -> Vec<TensorTrace> {
        let inv = tensor_inventory(&small_cfg(layers), Granularity::PerTableRow).unwrap();
        build_trace(&inv, &TimingModel::default(), recompute.into()).unwrap()
    }

    #[test]
    fn timeline_ids() {
        let tl = LogicalTimeline::new(2);
        assert_eq!(
            (tl.forward(0), tl.forward(1), tl.backward(1), tl.backward(0)),
            (0, 1, 2, 3)
        );
        assert_eq!(tl.op(2).layer, 1);
        assert_eq!(tl.op(2).pass, Pass::Backward);
    }

    #[test]
    fn two_layer_param_lifetime() {
        let t = traces(2, false);
        let p = t
            .iter()
            .find(|t| t.kind == TensorKind::Param16 && t.layer == 0)
            .unwrap();
        assert_eq!((p.first_id, p.end_id), (0, 3));
        let g = t
            .iter()
            .find(|t| t.kind == TensorKind::Grad16 && t.layer == 0)
            .unwrap();
        assert_eq!((g.first_id, g.end_id), (3, 3));
        assert!(t.iter().all(|t| t.kind != TensorKind::Optim32));
    }

    #[test]
    fn one_layer_within_two_ops() {
        assert!(traces(1, false).iter().all(|t| t.end_id <= 1));
        assert!(traces(1, true).iter().all(|t| t.end_id <= 1));
    }

    #[test]
    fn recompute_collapses_intermediates() {
        let t = traces(3, true);
        let tl = LogicalTimeline::new(3);
        for tr in t.iter().filter(|t| t.kind == TensorKind::Activation16) {
            if tr.recomputed {
                assert_eq!(
                    (tr.first_id, tr.end_id),
                    (tl.backward(tr.layer), tl.backward(tr.layer))
                );
            } else if is_checkpoint(&tr.name) {
                assert_eq!(
                    (tr.first_id, tr.end_id),
                    (tl.forward(tr.layer), tl.backward(tr.layer))
                );
            } else {
                assert_eq!(
                    (tr.first_id, tr.end_id),
                    (tl.forward(tr.layer), tl.forward(tr.layer))
                );
            }
        }
        assert!(validate_trace(&t, &tl).is_empty());
        assert!(peak_live_bytes(&t, 6) < peak_live_bytes(&traces(3, false), 6));
    }

    #[test]
    fn empty_inventory_rejected() {
        assert!(matches!(
            build_trace(&[], &TimingModel::default(), RecomputePolicy::Off),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn violations() {
        let tl = LogicalTimeline::new(2);
        let mut t = traces(2, false);
        assert!(validate_trace(&t, &tl).is_empty());
        t[0].first_id = 3;
        t[0].end_id = 1;
        let v = validate_trace(&t, &tl);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains(&format!("tensor {}", t[0].tensor_id)));
        t[0].first_id = 0;
        let dup = t[1].clone();
        t.push(dup);
        assert_eq!(validate_trace(&t, &tl).len(), 1);
    }

    #[test]
    fn compute_times() {
        let t = traces(2, true);
        let tl = LogicalTimeline::new(2);
        let c = op_compute_times(&t, &tl);
        assert_eq!(c.len(), 4);
        assert!(c[0] > 0.0);
        assert!(c[3] > 2.0 * c[0]);
        let no = op_compute_times(&traces(2, false), &tl);
        assert_eq!(no[3], 2.0 * no[0]);
    }

    #[test]
    fn table_timing() {
        let inv = tensor_inventory(&small_cfg(1), Granularity::PerTableRow).unwrap();
        let mut entries = BTreeMap::new();
        entries.insert(
            inv[0].name.clone(),
            TimingEntry {
                gpu_time: 0.5,
                cpu_time: 0.25,
            },
        );
        let model = TimingModel::Table {
            entries,
            default: TimingEntry {
                gpu_time: 0.0,
                cpu_time: 0.0,
            },
        };
        let t = build_trace(&inv, &model, RecomputePolicy::Off).unwrap();
        assert_eq!((t[0].gpu_time, t[0].cpu_time), (0.5, 0.25));
        assert_eq!(t[1].gpu_time, 0.0);
        let bad = TimingModel::Constant {
            gpu_time: -1.0,
            cpu_time: 0.0,
        };
        assert!(build_trace(&inv, &bad, RecomputePolicy::Off).is_err());
    }
}
