//! Analytical memory model of a decoder-style Transformer layer under
//! mixed-precision training with Adam.
//!
//! Every byte count is an exact integer. The per-layer totals follow the
//! closed-form expressions of the footprint table, which drop three small
//! terms (the `b*s` attention-score activations and the LayerNorm
//! parameters/optimizer states). Passing `exact = true` adds them back.

use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Page-size threshold below which a tensor counts as small.
pub const SMALL_TENSOR_BYTES: u64 = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub batch_size: u64,
    pub seq_len: u64,
    pub d_model: u64,
    pub d_ffn: u64,
    pub num_layers: u64,
    pub num_heads: u64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    /// Same model with a different layer count.
    pub fn with_layers(mut self, num_layers: u64) -> Self {
        self.num_layers = num_layers;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Attn,
    AttnResidual,
    Ffn,
    FfnResidual,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Block::Attn => "Attn",
            Block::AttnResidual => "Attn/Add&Norm",
            Block::Ffn => "FFN",
            Block::FfnResidual => "FFN/Add&Norm",
        };
        f.write_str(s)
    }
}

/// Which operator of the layer a table row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOp {
    QkvLinear,
    ScoreMatMul,
    ScaledMaskSoftmax,
    ContextMatMul,
    OutLinear,
    AttnAdd,
    AttnLayerNorm,
    FfnLinear1,
    Gelu,
    FfnLinear2,
    FfnAdd,
    FfnLayerNorm,
}

impl RowOp {
    pub const ALL: [RowOp; 12] = [
        RowOp::QkvLinear,
        RowOp::ScoreMatMul,
        RowOp::ScaledMaskSoftmax,
        RowOp::ContextMatMul,
        RowOp::OutLinear,
        RowOp::AttnAdd,
        RowOp::AttnLayerNorm,
        RowOp::FfnLinear1,
        RowOp::Gelu,
        RowOp::FfnLinear2,
        RowOp::FfnAdd,
        RowOp::FfnLayerNorm,
    ];

    pub fn block(self) -> Block {
        use RowOp::*;
        match self {
            QkvLinear | ScoreMatMul | ScaledMaskSoftmax | ContextMatMul | OutLinear => Block::Attn,
            AttnAdd | AttnLayerNorm => Block::AttnResidual,
            FfnLinear1 | Gelu | FfnLinear2 => Block::Ffn,
            FfnAdd | FfnLayerNorm => Block::FfnResidual,
        }
    }

    pub fn layer_name(self) -> &'static str {
        use RowOp::*;
        match self {
            QkvLinear => "Linear(Q,K,V)",
            ScoreMatMul | ContextMatMul => "MatMul",
            ScaledMaskSoftmax => "ScaledMaskSoftmax",
            OutLinear | FfnLinear1 | FfnLinear2 => "Linear",
            AttnAdd | FfnAdd => "Add",
            AttnLayerNorm | FfnLayerNorm => "LayerNorm",
            Gelu => "GeLU",
        }
    }

    /// Short identifier used in tensor names.
    pub fn slug(self) -> &'static str {
        use RowOp::*;
        match self {
            QkvLinear => "attn.qkv",
            ScoreMatMul => "attn.scores",
            ScaledMaskSoftmax => "attn.softmax",
            ContextMatMul => "attn.context",
            OutLinear => "attn.out",
            AttnAdd => "attn.add",
            AttnLayerNorm => "attn.ln",
            FfnLinear1 => "ffn.fc1",
            Gelu => "ffn.gelu",
            FfnLinear2 => "ffn.fc2",
            FfnAdd => "ffn.add",
            FfnLayerNorm => "ffn.ln",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub op: RowOp,
    pub block: Block,
    pub layer_name: String,
    pub params_bytes: u64,
    pub acts_bytes: u64,
    pub optims_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintTotals {
    pub params_bytes: u64,
    pub acts_bytes: u64,
    pub optims_bytes: u64,
}

impl FootprintTotals {
    pub fn checked_add(self, other: Self) -> Option<Self> {
        Some(Self {
            params_bytes: self.params_bytes.checked_add(other.params_bytes)?,
            acts_bytes: self.acts_bytes.checked_add(other.acts_bytes)?,
            optims_bytes: self.optims_bytes.checked_add(other.optims_bytes)?,
        })
    }

    pub fn checked_scale(self, factor: u64) -> Option<Self> {
        Some(Self {
            params_bytes: self.params_bytes.checked_mul(factor)?,
            acts_bytes: self.acts_bytes.checked_mul(factor)?,
            optims_bytes: self.optims_bytes.checked_mul(factor)?,
        })
    }
}

impl Add for FootprintTotals {
    type Output = FootprintTotals;

    fn add(self, rhs: Self) -> Self {
        self.checked_add(rhs).expect("footprint totals overflow")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub rows: Vec<FootprintRow>,
    pub totals: FootprintTotals,
    /// Whether the small ignored terms are part of `totals`.
    pub exact: bool,
}

impl LayerFootprint {
    pub fn row_sums(&self) -> FootprintTotals {
        self.rows.iter().fold(FootprintTotals::default(), |acc, r| {
            acc + FootprintTotals {
                params_bytes: r.params_bytes,
                acts_bytes: r.acts_bytes,
                optims_bytes: r.optims_bytes,
            }
        })
    }
}

/// Small wrapper so the table arithmetic reads like the formulas.
struct Dims {
    b: u64,
    s: u64,
    d: u64,
    f: u64,
}

impl Dims {
    fn of(cfg: &TransformerConfig) -> Self {
        Dims {
            b: cfg.batch_size,
            s: cfg.seq_len,
            d: cfg.d_model,
            f: cfg.d_ffn,
        }
    }
}

fn mul(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or(Error::Overflow("footprint"))
}

fn sum(terms: &[u64]) -> Result<u64> {
    terms
        .iter()
        .try_fold(0u64, |acc, &x| acc.checked_add(x))
        .ok_or(Error::Overflow("footprint"))
}

fn row_values(op: RowOp, x: &Dims) -> Result<(u64, u64, u64)> {
    let Dims { b, s, d, f } = *x;
    use RowOp::*;
    Ok(match op {
        QkvLinear => (mul(&[12, d, d])?, mul(&[12, b, s, d])?, mul(&[36, d, d])?),
        ScoreMatMul | ScaledMaskSoftmax => (0, mul(&[4, b, s])?, 0),
        ContextMatMul => (0, mul(&[4, b, s, d])?, 0),
        OutLinear => (mul(&[4, d, d])?, mul(&[4, b, s, d])?, mul(&[12, d, d])?),
        AttnAdd | FfnAdd => (0, mul(&[4, b, s, d])?, 0),
        AttnLayerNorm | FfnLayerNorm => (mul(&[4, d])?, mul(&[4, b, s, d])?, mul(&[12, d])?),
        FfnLinear1 => (mul(&[4, d, f])?, mul(&[4, b, s, f])?, mul(&[12, d, f])?),
        Gelu => (0, mul(&[4, b, s, f])?, 0),
        FfnLinear2 => (mul(&[4, d, f])?, mul(&[4, b, s, d])?, mul(&[12, d, f])?),
    })
}

/// Closed-form per-layer totals with the small terms dropped.
pub fn closed_form_totals(cfg: &TransformerConfig) -> Result<FootprintTotals> {
    let Dims { b, s, d, f } = Dims::of(cfg);
    Ok(FootprintTotals {
        params_bytes: sum(&[mul(&[16, d, d])?, mul(&[8, d, f])?])?,
        acts_bytes: sum(&[mul(&[40, b, s, d])?, mul(&[8, b, s, f])?])?,
        optims_bytes: sum(&[mul(&[48, d, d])?, mul(&[24, d, f])?])?,
    })
}

/// The per-layer terms the closed-form totals leave out:
/// `8bs` activations, `8d` parameters and `24d` optimizer bytes.
pub fn ignored_terms(cfg: &TransformerConfig) -> Result<FootprintTotals> {
    let Dims { b, s, d, .. } = Dims::of(cfg);
    Ok(FootprintTotals {
        params_bytes: mul(&[8, d])?,
        acts_bytes: mul(&[8, b, s])?,
        optims_bytes: mul(&[24, d])?,
    })
}

pub fn layer_footprint(cfg: &TransformerConfig, exact: bool) -> Result<LayerFootprint> {
    cfg.validate()?;
    let dims = Dims::of(cfg);
    let rows = RowOp::ALL
        .iter()
        .map(|&op| {
            let (params_bytes, acts_bytes, optims_bytes) = row_values(op, &dims)?;
            Ok(FootprintRow {
                op,
                block: op.block(),
                layer_name: op.layer_name().to_string(),
                params_bytes,
                acts_bytes,
                optims_bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut totals = closed_form_totals(cfg)?;
    if exact {
        totals = totals
            .checked_add(ignored_terms(cfg)?)
            .ok_or(Error::Overflow("footprint"))?;
    }
    Ok(LayerFootprint {
        rows,
        totals,
        exact,
    })
}

/// Whole-model totals: `num_layers` times the layer totals. Embedding
/// lookup and the loss are not part of the model.
pub fn model_footprint(cfg: &TransformerConfig, exact: bool) -> Result<FootprintTotals> {
    let layer = layer_footprint(cfg, exact)?;
    layer
        .totals
        .checked_scale(cfg.num_layers)
        .ok_or(Error::Overflow("model footprint"))
}

/// FP16 parameter elements in the whole model: `layers * (4d^2 + 2d*d_ffn)`.
pub fn param_count(cfg: &TransformerConfig) -> Result<u64> {
    cfg.validate()?;
    let Dims { d, f, .. } = Dims::of(cfg);
    let per_layer = sum(&[mul(&[4, d, d])?, mul(&[2, d, f])?])?;
    per_layer
        .checked_mul(cfg.num_layers)
        .ok_or(Error::Overflow("param count"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param16,
    Grad16,
    Optim32,
    Activation16,
}

impl TensorKind {
    pub fn element_bytes(self) -> u64 {
        match self {
            TensorKind::Optim32 => 4,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub id: u64,
    pub name: String,
    pub kind: TensorKind,
    pub bytes: u64,
    pub layer_index: usize,
}

impl TensorSpec {
    pub fn is_small(&self, page_bytes: u64) -> bool {
        self.bytes < page_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTableRow,
    PerLogicalTensor,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_table_row" => Ok(Granularity::PerTableRow),
            "per_logical_tensor" => Ok(Granularity::PerLogicalTensor),
            other => Err(Error::Usage(format!(
                "unknown granularity '{other}' (expected per_table_row or per_logical_tensor)"
            ))),
        }
    }
}

/// Deterministic tensor inventory for the whole model, layer-major and in
/// table-row order. Optimizer bytes are split into master/momentum/variance
/// at logical granularity; the row granularity keeps one FP32 tensor per row.
pub fn tensor_inventory(
    cfg: &TransformerConfig,
    granularity: Granularity,
) -> Result<Vec<TensorSpec>> {
    let layer = layer_footprint(cfg, true)?;
    let mut out = Vec::new();
    let mut next_id = 0u64;
    let mut push = |out: &mut Vec<TensorSpec>, name: String, kind, bytes, layer_index| {
        out.push(TensorSpec {
            id: next_id,
            name,
            kind,
            bytes,
            layer_index,
        });
        next_id += 1;
    };

    for l in 0..cfg.num_layers as usize {
        for row in &layer.rows {
            let base = format!("L{l}.{}", row.op.slug());
            match granularity {
                Granularity::PerTableRow => {
                    if row.params_bytes > 0 {
                        push(
                            &mut out,
                            format!("{base}.param16"),
                            TensorKind::Param16,
                            row.params_bytes / 2,
                            l,
                        );
                        push(
                            &mut out,
                            format!("{base}.grad16"),
                            TensorKind::Grad16,
                            row.params_bytes / 2,
                            l,
                        );
                        push(
                            &mut out,
                            format!("{base}.optim32"),
                            TensorKind::Optim32,
                            row.optims_bytes,
                            l,
                        );
                    }
                    if row.acts_bytes > 0 {
                        push(
                            &mut out,
                            format!("{base}.act16"),
                            TensorKind::Activation16,
                            row.acts_bytes,
                            l,
                        );
                    }
                }
                Granularity::PerLogicalTensor => {
                    let parts: &[&str] = match row.op {
                        RowOp::QkvLinear => &["q", "k", "v"],
                        RowOp::AttnLayerNorm | RowOp::FfnLayerNorm => &["weight", "bias"],
                        _ => &["weight"],
                    };
                    let n = parts.len() as u64;
                    if row.params_bytes > 0 {
                        for part in parts {
                            let half = row.params_bytes / n / 2;
                            push(
                                &mut out,
                                format!("{base}.{part}.param16"),
                                TensorKind::Param16,
                                half,
                                l,
                            );
                            push(
                                &mut out,
                                format!("{base}.{part}.grad16"),
                                TensorKind::Grad16,
                                half,
                                l,
                            );
                            for state in ["master", "momentum", "variance"] {
                                push(
                                    &mut out,
                                    format!("{base}.{part}.{state}32"),
                                    TensorKind::Optim32,
                                    row.optims_bytes / n / 3,
                                    l,
                                );
                            }
                        }
                    }
                    if row.acts_bytes > 0 {
                        if row.op == RowOp::QkvLinear {
                            for part in parts {
                                push(
                                    &mut out,
                                    format!("{base}.{part}.act16"),
                                    TensorKind::Activation16,
                                    row.acts_bytes / 3,
                                    l,
                                );
                            }
                        } else {
                            push(
                                &mut out,
                                format!("{base}.act16"),
                                TensorKind::Activation16,
                                row.acts_bytes,
                                l,
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Display unit for byte counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteUnit {
    B,
    MiB,
    GiB,
}

impl ByteUnit {
    pub fn divisor(self) -> u64 {
        match self {
            ByteUnit::B => 1,
            ByteUnit::MiB => 1 << 20,
            ByteUnit::GiB => 1 << 30,
        }
    }

    pub fn format(self, bytes: u64) -> String {
        match self {
            ByteUnit::B => bytes.to_string(),
            _ => {
                let v = bytes as f64 / self.divisor() as f64;
                format!("{v}")
            }
        }
    }
}

impl FromStr for ByteUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "b" => Ok(ByteUnit::B),
            "MiB" | "mib" => Ok(ByteUnit::MiB),
            "GiB" | "gib" => Ok(ByteUnit::GiB),
            other => Err(Error::Usage(format!("unknown unit '{other}'"))),
        }
    }
}
