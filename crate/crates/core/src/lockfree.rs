//! Lock-free parameter updating with three actors.
//!
//! * the compute actor runs forward/backward on published FP16 parameters
//!   and emits one FP16 gradient message per layer per iteration,
//! * the buffering actor accumulates those gradients and publishes new
//!   FP16 parameters,
//! * the updating actor sweeps layers in reverse, fetching the buffered
//!   gradient, running Adam on the FP32 master state and passing the result
//!   back to the buffering actor.
//!
//! In synchronous mode the compute actor waits for a complete sweep after
//! every iteration. Runs execute either as a deterministic virtual-time
//! event simulation or on real threads with wall-clock sleeps.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use half::f16;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction; `step` counts from 1.
pub fn adam_step(
    p: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    g: &[f32],
    hyper: &AdamHyper,
    step: u64,
) {
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
    }
}

pub fn to_f16(xs: &[f32]) -> Vec<f16> {
    xs.iter().map(|&x| f16::from_f32(x)).collect()
}

pub fn from_f16(xs: &[f16]) -> Vec<f32> {
    xs.iter().map(|x| x.to_f32()).collect()
}

/// Fixed-point checksum in units of 2^-24, the FP16 subnormal step. Exact
/// for any finite sum of FP16 values held in an `f64`.
pub fn checksum(xs: impl IntoIterator<Item = f64>) -> i128 {
    xs.into_iter()
        .map(|x| (x * (1u64 << 24) as f64) as i128)
        .sum()
}

/// Published FP16 parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub version: u64,
    /// Newest iteration whose gradients are folded into these values; -1
    /// before the first update.
    pub applied_through: i64,
    pub values: Vec<f16>,
}

/// Per-layer published parameters. Readers get a whole snapshot or the
/// next one, never a mix.
pub struct ParamBuffer {
    layers: Vec<ArcSwap<ParamSnapshot>>,
}

impl ParamBuffer {
    pub fn new(initial: &[Vec<f32>]) -> Self {
        ParamBuffer {
            layers: initial
                .iter()
                .map(|p| {
                    ArcSwap::from_pointee(ParamSnapshot {
                        version: 0,
                        applied_through: -1,
                        values: to_f16(p),
                    })
                })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn load(&self, layer: usize) -> Arc<ParamSnapshot> {
        self.layers[layer].load_full()
    }

    /// Replace the layer's parameters with `cast(p32)`; returns the new version.
    pub fn publish(&self, layer: usize, p32: &[f32], applied_through: i64) -> u64 {
        let version = self.layers[layer].load().version + 1;
        self.layers[layer].store(Arc::new(ParamSnapshot {
            version,
            applied_through,
            values: to_f16(p32),
        }));
        version
    }

    pub fn publish_values(&self, layer: usize, values: Vec<f16>, applied_through: i64) -> u64 {
        let version = self.layers[layer].load().version + 1;
        self.layers[layer].store(Arc::new(ParamSnapshot {
            version,
            applied_through,
            values,
        }));
        version
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradMessage {
    pub layer: usize,
    pub iteration: u64,
    pub grad: Vec<f32>,
}

impl GradMessage {
    /// Build a message whose payload is rounded to FP16.
    pub fn new(layer: usize, iteration: u64, grad: &[f32]) -> Self {
        GradMessage {
            layer,
            iteration,
            grad: grad.iter().map(|&g| f16::from_f32(g).to_f32()).collect(),
        }
    }
}

/// What the updating actor took from the buffer in one fetch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradView {
    pub layer: usize,
    pub sum: Vec<f64>,
    pub messages: u64,
    pub through: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConservation {
    pub layer: usize,
    pub messages_sent: u64,
    pub messages_accumulated: u64,
    pub messages_consumed: u64,
    pub sent_checksum: i128,
    pub consumed_checksum: i128,
    pub residual_checksum: i128,
    pub balanced: bool,
}

/// Buffered gradients, widened to `f64` so accumulation is exact.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    acc: Vec<Vec<f64>>,
    pending: Vec<u64>,
    through: Vec<i64>,
    stats: Vec<LayerConservation>,
}

impl GradBuffer {
    pub fn new(layer_lens: &[usize]) -> Self {
        GradBuffer {
            acc: layer_lens.iter().map(|&n| vec![0.0; n]).collect(),
            pending: vec![0; layer_lens.len()],
            through: vec![-1; layer_lens.len()],
            stats: (0..layer_lens.len())
                .map(|layer| LayerConservation {
                    layer,
                    ..Default::default()
                })
                .collect(),
        }
    }

    pub fn note_sent(&mut self, msg: &GradMessage) {
        if let Some(s) = self.stats.get_mut(msg.layer) {
            s.messages_sent += 1;
            s.sent_checksum += checksum(msg.grad.iter().map(|&g| g as f64));
        }
    }

    pub fn accumulate(&mut self, msg: &GradMessage) -> Result<()> {
        let acc = self
            .acc
            .get_mut(msg.layer)
            .ok_or_else(|| Error::Protocol(format!("gradient for unknown layer {}", msg.layer)))?;
        if acc.len() != msg.grad.len() {
            return Err(Error::Protocol(format!(
                "layer {} gradient has {} elements, buffer has {}",
                msg.layer,
                msg.grad.len(),
                acc.len()
            )));
        }
        for (a, &g) in acc.iter_mut().zip(&msg.grad) {
            *a += g as f64;
        }
        self.pending[msg.layer] += 1;
        self.through[msg.layer] = self.through[msg.layer].max(msg.iteration as i64);
        self.stats[msg.layer].messages_accumulated += 1;
        Ok(())
    }

    pub fn pending(&self, layer: usize) -> u64 {
        self.pending[layer]
    }

    pub fn view(&self, layer: usize) -> GradView {
        GradView {
            layer,
            sum: self.acc[layer].clone(),
            messages: self.pending[layer],
            through: self.through[layer],
        }
    }

    /// Remove exactly what a fetch took; later arrivals stay buffered.
    pub fn consume(&mut self, view: &GradView) {
        let l = view.layer;
        for (a, s) in self.acc[l].iter_mut().zip(&view.sum) {
            *a -= s;
        }
        self.pending[l] -= view.messages;
        self.stats[l].messages_consumed += view.messages;
        self.stats[l].consumed_checksum += checksum(view.sum.iter().copied());
    }

    pub fn conservation(&self) -> Vec<LayerConservation> {
        self.stats
            .iter()
            .zip(&self.acc)
            .map(|(s, acc)| {
                let residual = checksum(acc.iter().copied());
                LayerConservation {
                    residual_checksum: residual,
                    balanced: s.messages_sent == s.messages_accumulated
                        && s.sent_checksum == s.consumed_checksum + residual,
                    ..*s
                }
            })
            .collect()
    }
}

/// FP32 master parameters and Adam moments, owned by the updating actor.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterState {
    pub p: Vec<Vec<f32>>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub steps: Vec<u64>,
}

impl MasterState {
    pub fn new(params: Vec<Vec<f32>>) -> Self {
        MasterState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            steps: vec![0; params.len()],
            p: params,
        }
    }

    /// Adam on one layer. Non-finite gradients are rejected and leave the
    /// state untouched.
    pub fn apply_update(&mut self, layer: usize, grad: &[f64], hyper: &AdamHyper) -> Result<()> {
        if grad.len() != self.p[layer].len() {
            return Err(Error::Protocol(format!(
                "layer {layer} gradient shape mismatch"
            )));
        }
        let g: Vec<f32> = grad.iter().map(|&x| x as f32).collect();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite gradient for layer {layer}"
            )));
        }
        self.steps[layer] += 1;
        adam_step(
            &mut self.p[layer],
            &mut self.m[layer],
            &mut self.v[layer],
            &g,
            hyper,
            self.steps[layer],
        );
        Ok(())
    }
}

/// Per-layer costs in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delays {
    pub h2d: f64,
    pub d2h: f64,
    pub fwd: f64,
    pub bwd: f64,
    pub ssd_fetch: f64,
    pub ssd_store: f64,
    pub cpu_update: f64,
}

/// PCIe time of one layer's FP16 parameters in the delay presets.
pub const DELAY_UNIT_S: f64 = 1e-3;

impl Delays {
    pub fn zero() -> Self {
        Delays {
            h2d: 0.0,
            d2h: 0.0,
            fwd: 0.0,
            bwd: 0.0,
            ssd_fetch: 0.0,
            ssd_store: 0.0,
            cpu_update: 0.0,
        }
    }

    /// Optimizer states on SSD. With `u` the PCIe time of a layer's FP16
    /// parameters, the FP32 states (6x the bytes) cross a 3.5 GB/s SSD
    /// instead of 32 GB/s PCIe in each direction.
    pub fn ssd() -> Self {
        let u = DELAY_UNIT_S;
        Delays {
            ssd_fetch: 6.0 * 32.0 / 3.5 * u,
            ssd_store: 6.0 * 32.0 / 3.5 * u,
            ..Self::cpu()
        }
    }

    /// Optimizer states in host memory.
    pub fn cpu() -> Self {
        let u = DELAY_UNIT_S;
        Delays {
            h2d: u,
            d2h: u,
            fwd: 15.0 * u,
            bwd: 30.0 * u,
            ssd_fetch: 0.0,
            ssd_store: 0.0,
            // Adam reads and writes the FP32 states at 200 GB/s.
            cpu_update: 2.0 * 6.0 * 32.0 / 200.0 * u,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ssd" => Ok(Self::ssd()),
            "cpu" => Ok(Self::cpu()),
            "zero" => Ok(Self::zero()),
            other => Err(Error::Usage(format!(
                "unknown delay preset '{other}' (ssd, cpu, zero)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.h2d,
            self.d2h,
            self.fwd,
            self.bwd,
            self.ssd_fetch,
            self.ssd_store,
            self.cpu_update,
        ];
        if all.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "delays must be finite and non-negative".into(),
            ))
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Delays {
            h2d: self.h2d * k,
            d2h: self.d2h * k,
            fwd: self.fwd * k,
            bwd: self.bwd * k,
            ssd_fetch: self.ssd_fetch * k,
            ssd_store: self.ssd_store * k,
            cpu_update: self.cpu_update * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub width: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub noise_std: f32,
    #[serde(default)]
    pub adam: AdamHyper,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            layers: 4,
            width: 8,
            batch_size: 32,
            train_samples: 4096,
            val_samples: 2048,
            noise_std: 0.3,
            adam: AdamHyper::default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "layers, width and batch_size must be positive".into(),
            ));
        }
        if self.train_samples < self.batch_size || self.val_samples == 0 {
            return Err(Error::InvalidConfig(
                "need at least one training batch and one validation sample".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise_std must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `tanh` MLP with a scalar linear output. Layer `l` stores `W` (row-major,
/// `out x in`) followed by `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(layers: usize, width: usize) -> Self {
        let mut dims = vec![width; layers];
        dims.push(1);
        Mlp { dims }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layer_len(&self, l: usize) -> usize {
        self.dims[l + 1] * self.dims[l] + self.dims[l + 1]
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        (0..self.num_layers()).map(|l| self.layer_len(l)).collect()
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        (0..self.num_layers())
            .map(|l| {
                let (i, o) = (self.dims[l], self.dims[l + 1]);
                let w = Normal::new(0.0, (1.0 / i as f32).sqrt()).expect("positive std");
                let mut p: Vec<f32> = (0..o * i).map(|_| w.sample(rng)).collect();
                p.extend(std::iter::repeat_n(0.0, o));
                p
            })
            .collect()
    }

    /// Activations per layer boundary; `acts[0]` is the input.
    fn forward(&self, params: &[Vec<f32>], x: &[f32], n: usize) -> Vec<Vec<f32>> {
        let last = self.num_layers() - 1;
        let mut acts = vec![x.to_vec()];
        for (l, p) in params.iter().enumerate() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = p.split_at(o * i);
            let h = &acts[l];
            let mut out = vec![0.0f32; n * o];
            for s in 0..n {
                for r in 0..o {
                    let mut z = b[r];
                    for c in 0..i {
                        z += w[r * i + c] * h[s * i + c];
                    }
                    out[s * o + r] = if l == last { z } else { z.tanh() };
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn predict(&self, params: &[Vec<f32>], x: &[f32], n: usize) -> Vec<f32> {
        self.forward(params, x, n)
            .pop()
            .expect("at least one layer")
    }

    pub fn loss(&self, params: &[Vec<f32>], x: &[f32], y: &[f32], n: usize) -> f32 {
        let pred = self.predict(params, x, n);
        pred.iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f32>()
            / n as f32
    }

    /// Mean squared error and its gradient for every layer.
    pub fn loss_and_grads(
        &self,
        params: &[Vec<f32>],
        x: &[f32],
        y: &[f32],
        n: usize,
    ) -> (f32, Vec<Vec<f32>>) {
        let acts = self.forward(params, x, n);
        let last = self.num_layers() - 1;
        let pred = &acts[last + 1];
        let loss = pred
            .iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f32>()
            / n as f32;
        let mut delta: Vec<f32> = pred
            .iter()
            .zip(y)
            .map(|(p, t)| 2.0 * (p - t) / n as f32)
            .collect();
        let mut grads = vec![Vec::new(); self.num_layers()];
        for l in (0..=last).rev() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let h = &acts[l];
            let mut g = vec![0.0f32; o * i + o];
            for s in 0..n {
                for r in 0..o {
                    let d = delta[s * o + r];
                    for c in 0..i {
                        g[r * i + c] += d * h[s * i + c];
                    }
                    g[o * i + r] += d;
                }
            }
            if l > 0 {
                let w = &params[l][..o * i];
                let mut prev = vec![0.0f32; n * i];
                for s in 0..n {
                    for c in 0..i {
                        let mut acc = 0.0;
                        for r in 0..o {
                            acc += w[r * i + c] * delta[s * o + r];
                        }
                        let a = h[s * i + c];
                        prev[s * i + c] = acc * (1.0 - a * a);
                    }
                }
                delta = prev;
            }
            grads[l] = g;
        }
        (loss, grads)
    }
}

/// Synthetic regression data from a random teacher network plus noise.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub cfg: ToyConfig,
    pub mlp: Mlp,
    pub init: Vec<Vec<f32>>,
    pub train_x: Vec<f32>,
    pub train_y: Vec<f32>,
    pub val_x: Vec<f32>,
    pub val_y: Vec<f32>,
    order: Vec<usize>,
}

impl ToyProblem {
    pub fn new(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mlp = Mlp::new(cfg.layers, cfg.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = mlp.init(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7ea_c4e5));
        let init = mlp.init(&mut rng);
        let std = Normal::new(0.0f32, 1.0).expect("unit normal");
        let sample = |n: usize, rng: &mut ChaCha8Rng| {
            let x: Vec<f32> = (0..n * cfg.width).map(|_| std.sample(rng)).collect();
            let mut y = mlp.predict(&teacher, &x, n);
            for t in &mut y {
                *t += cfg.noise_std * std.sample(rng);
            }
            (x, y)
        };
        let (train_x, train_y) = sample(cfg.train_samples, &mut rng);
        let (val_x, val_y) = sample(cfg.val_samples, &mut rng);
        let mut order: Vec<usize> = (0..cfg.train_samples).collect();
        order.shuffle(&mut rng);
        Ok(ToyProblem {
            cfg: cfg.clone(),
            mlp,
            init,
            train_x,
            train_y,
            val_x,
            val_y,
            order,
        })
    }

    /// The training batch consumed by iteration `k`.
    pub fn batch(&self, k: u64) -> (Vec<f32>, Vec<f32>) {
        let b = self.cfg.batch_size;
        let w = self.cfg.width;
        let per_epoch = self.cfg.train_samples / b;
        let start = (k as usize % per_epoch) * b;
        let mut x = Vec::with_capacity(b * w);
        let mut y = Vec::with_capacity(b);
        for &s in &self.order[start..start + b] {
            x.extend_from_slice(&self.train_x[s * w..(s + 1) * w]);
            y.push(self.train_y[s]);
        }
        (x, y)
    }

    pub fn val_loss(&self, params: &[Vec<f32>]) -> f32 {
        self.mlp
            .loss(params, &self.val_x, &self.val_y, self.cfg.val_samples)
    }

    /// Validation loss as seen by the compute side (FP16 cast of masters).
    pub fn val_loss_fp16(&self, master: &[Vec<f32>]) -> f32 {
        let p: Vec<Vec<f32>> = master.iter().map(|l| from_f16(&to_f16(l))).collect();
        self.val_loss(&p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Lockfree,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(Mode::Sync),
            "lockfree" => Ok(Mode::Lockfree),
            other => Err(Error::Usage(format!(
                "unknown mode '{other}' (sync or lockfree)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clock {
    /// Delays are charged to a logical clock; fully deterministic.
    Virtual,
    /// Real threads; delays become sleeps multiplied by `scale`.
    Wall { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Mode,
    pub iterations: u64,
    pub clock: Clock,
    /// Block the compute actor when a layer's staleness would exceed this.
    pub max_staleness: Option<u64>,
}

impl RunOptions {
    pub fn new(mode: Mode, iterations: u64) -> Self {
        RunOptions {
            mode,
            iterations,
            clock: Clock::Virtual,
            max_staleness: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: u64,
    pub loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub clock: Clock,
    pub seed: u64,
    pub iterations: u64,
    pub loss_curve: Vec<LossPoint>,
    pub final_val_loss: f32,
    /// Time at which the compute actor finished its last iteration.
    pub gpu_finish_s: f64,
    pub updater_finish_s: f64,
    /// Undefined when the run took no time.
    pub samples_per_s: Option<f64>,
    pub gpu_idle_fraction: f64,
    pub staleness_histogram: BTreeMap<u64, u64>,
    pub updates_applied: u64,
    pub rejected_updates: u64,
    pub publishes: u64,
    pub conservation: Vec<LayerConservation>,
}

impl TrainReport {
    pub fn conserved(&self) -> bool {
        self.conservation.iter().all(|c| {
            c.balanced && c.residual_checksum == 0 && c.messages_consumed == c.messages_accumulated
        })
    }

    pub fn max_staleness(&self) -> u64 {
        self.staleness_histogram
            .keys()
            .next_back()
            .copied()
            .unwrap_or(0)
    }

    pub fn mean_staleness(&self) -> f64 {
        let n: u64 = self.staleness_histogram.values().sum();
        if n == 0 {
            return 0.0;
        }
        self.staleness_histogram
            .iter()
            .map(|(s, c)| (s * c) as f64)
            .sum::<f64>()
            / n as f64
    }
}

fn staleness(k: u64, applied_through: i64) -> Result<u64> {
    let s = k as i64 - 1 - applied_through;
    u64::try_from(s)
        .map_err(|_| Error::Protocol(format!("negative staleness {s} at iteration {k}")))
}

pub fn run(
    problem: &ToyProblem,
    delays: &Delays,
    opts: &RunOptions,
    seed: u64,
) -> Result<TrainReport> {
    delays.validate()?;
    if opts.iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be positive".into()));
    }
    match opts.clock {
        Clock::Virtual => VirtualRun::new(problem, delays, opts).run(seed),
        Clock::Wall { scale } => {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::InvalidConfig(
                    "wall clock scale must be non-negative".into(),
                ));
            }
            threaded::run(problem, &delays.scaled(scale), opts, seed)
        }
    }
}

pub fn run_lockfree(
    problem: &ToyProblem,
    delays: &Delays,
    iterations: u64,
    seed: u64,
) -> Result<TrainReport> {
    run(
        problem,
        delays,
        &RunOptions::new(Mode::Lockfree, iterations),
        seed,
    )
}

pub fn run_sync(
    problem: &ToyProblem,
    delays: &Delays,
    iterations: u64,
    seed: u64,
) -> Result<TrainReport> {
    run(
        problem,
        delays,
        &RunOptions::new(Mode::Sync, iterations),
        seed,
    )
}

#[derive(Debug, Clone)]
enum Ev {
    GpuForward { k: u64, layer: usize },
    GradArrive(GradMessage),
    UpdApply(GradView),
    UpdStoreDone,
}

impl Ev {
    /// Same-time ordering: deliveries, then the updater, then the GPU.
    fn priority(&self) -> u8 {
        match self {
            Ev::GradArrive(_) => 0,
            Ev::UpdApply(_) | Ev::UpdStoreDone => 1,
            Ev::GpuForward { .. } => 2,
        }
    }
}

#[derive(PartialEq)]
struct At(f64);

impl Eq for At {}

impl PartialOrd for At {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for At {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct VirtualRun<'a> {
    problem: &'a ToyProblem,
    delays: Delays,
    opts: RunOptions,
    layers: usize,
    params: ParamBuffer,
    grads: GradBuffer,
    master: MasterState,
    queue: BinaryHeap<Reverse<(At, u8, u64)>>,
    events: BTreeMap<u64, Ev>,
    seq: u64,
    // compute actor
    snaps: Vec<Option<Arc<ParamSnapshot>>>,
    blocked: Option<(u64, usize)>,
    gpu_done: Option<f64>,
    gpu_busy: f64,
    loss_curve: Vec<LossPoint>,
    hist: BTreeMap<u64, u64>,
    // updating actor
    busy: bool,
    cursor: Option<usize>,
    sweeps: u64,
    updates: u64,
    rejected: u64,
    publishes: u64,
    now: f64,
}

impl<'a> VirtualRun<'a> {
    fn new(problem: &'a ToyProblem, delays: &Delays, opts: &RunOptions) -> Self {
        let layers = problem.mlp.num_layers();
        VirtualRun {
            problem,
            delays: *delays,
            opts: *opts,
            layers,
            params: ParamBuffer::new(&problem.init),
            grads: GradBuffer::new(&problem.mlp.layer_lens()),
            master: MasterState::new(problem.init.clone()),
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            snaps: vec![None; layers],
            blocked: None,
            gpu_done: None,
            gpu_busy: 0.0,
            loss_curve: Vec::new(),
            hist: BTreeMap::new(),
            busy: false,
            cursor: None,
            sweeps: 0,
            updates: 0,
            rejected: 0,
            publishes: 0,
            now: 0.0,
        }
    }

    fn at(&mut self, t: f64, ev: Ev) {
        self.queue.push(Reverse((At(t), ev.priority(), self.seq)));
        self.events.insert(self.seq, ev);
        self.seq += 1;
    }

    fn run(mut self, seed: u64) -> Result<TrainReport> {
        self.at(0.0, Ev::GpuForward { k: 0, layer: 0 });
        while let Some(Reverse((At(t), _, id))) = self.queue.pop() {
            self.now = t;
            let ev = self.events.remove(&id).expect("event payload");
            match ev {
                Ev::GpuForward { k, layer } => self.gpu_forward(k, layer)?,
                Ev::GradArrive(msg) => {
                    self.grads.accumulate(&msg)?;
                    self.poll_updater();
                }
                Ev::UpdApply(view) => self.apply(view)?,
                Ev::UpdStoreDone => {
                    self.busy = false;
                    self.poll_updater();
                }
            }
        }
        let gpu_finish = self.gpu_done.ok_or_else(|| {
            Error::Protocol(format!(
                "deadlock: compute actor blocked at {:?}",
                self.blocked
            ))
        })?;
        let pending: u64 = (0..self.layers).map(|l| self.grads.pending(l)).sum();
        if pending != 0 {
            return Err(Error::Protocol(format!(
                "{pending} gradient messages never consumed"
            )));
        }
        Ok(self.report(seed, gpu_finish))
    }

    fn report(self, seed: u64, gpu_finish: f64) -> TrainReport {
        let samples = (self.opts.iterations * self.problem.cfg.batch_size as u64) as f64;
        TrainReport {
            mode: self.opts.mode,
            clock: self.opts.clock,
            seed,
            iterations: self.opts.iterations,
            loss_curve: self.loss_curve,
            final_val_loss: self.problem.val_loss_fp16(&self.master.p),
            gpu_finish_s: gpu_finish,
            updater_finish_s: self.now,
            samples_per_s: (gpu_finish > 0.0).then(|| samples / gpu_finish),
            gpu_idle_fraction: if gpu_finish > 0.0 {
                1.0 - self.gpu_busy / gpu_finish
            } else {
                0.0
            },
            staleness_histogram: self.hist,
            updates_applied: self.updates,
            rejected_updates: self.rejected,
            publishes: self.publishes,
            conservation: self.grads.conservation(),
        }
    }

    fn gpu_forward(&mut self, k: u64, layer: usize) -> Result<()> {
        if layer == 0 && k > 0 && self.opts.mode == Mode::Sync && self.sweeps < k {
            self.blocked = Some((k, 0));
            return Ok(());
        }
        let snap = self.params.load(layer);
        let s = staleness(k, snap.applied_through)?;
        let bound = match self.opts.mode {
            Mode::Sync => Some(0),
            Mode::Lockfree => self.opts.max_staleness,
        };
        if bound.is_some_and(|b| s > b) {
            self.blocked = Some((k, layer));
            return Ok(());
        }
        self.blocked = None;
        *self.hist.entry(s).or_default() += 1;
        self.snaps[layer] = Some(snap);
        let d = self.delays;
        let t = self.now + d.h2d + d.fwd;
        self.gpu_busy += d.fwd;
        if layer + 1 < self.layers {
            self.at(
                t,
                Ev::GpuForward {
                    k,
                    layer: layer + 1,
                },
            );
            return Ok(());
        }

        let params: Vec<Vec<f32>> = self
            .snaps
            .iter()
            .map(|s| from_f16(&s.as_ref().expect("forward snapshot").values))
            .collect();
        let (x, y) = self.problem.batch(k);
        let (loss, g) =
            self.problem
                .mlp
                .loss_and_grads(&params, &x, &y, self.problem.cfg.batch_size);
        self.loss_curve.push(LossPoint { iteration: k, loss });
        let mut t = t;
        for l in (0..self.layers).rev() {
            t += d.bwd + d.d2h;
            self.gpu_busy += d.bwd;
            let msg = GradMessage::new(l, k, &g[l]);
            self.grads.note_sent(&msg);
            self.at(t, Ev::GradArrive(msg));
        }
        if k + 1 < self.opts.iterations {
            self.at(t, Ev::GpuForward { k: k + 1, layer: 0 });
        } else {
            self.gpu_done = Some(t);
        }
        Ok(())
    }

    fn poll_updater(&mut self) {
        if self.busy {
            return;
        }
        loop {
            let top = match self.cursor {
                Some(c) => c,
                None => {
                    let start = match self.opts.mode {
                        Mode::Lockfree => (0..self.layers).any(|l| self.grads.pending(l) > 0),
                        Mode::Sync => (0..self.layers).all(|l| self.grads.pending(l) > 0),
                    };
                    if !start {
                        return;
                    }
                    self.layers
                }
            };
            if let Some(l) = (0..top).rev().find(|&l| self.grads.pending(l) > 0) {
                self.busy = true;
                self.cursor = Some(l);
                let view = self.grads.view(l);
                let t = self.now + self.delays.ssd_fetch + self.delays.cpu_update;
                self.at(t, Ev::UpdApply(view));
                return;
            }
            self.cursor = None;
            self.sweeps += 1;
            if let Some((k, 0)) = self.blocked {
                if self.opts.mode == Mode::Sync && self.sweeps >= k {
                    self.at(self.now, Ev::GpuForward { k, layer: 0 });
                }
            }
        }
    }

    fn apply(&mut self, view: GradView) -> Result<()> {
        let l = view.layer;
        match self
            .master
            .apply_update(l, &view.sum, &self.problem.cfg.adam)
        {
            Ok(()) => self.updates += 1,
            Err(Error::Precondition(_)) => self.rejected += 1,
            Err(e) => return Err(e),
        }
        self.grads.consume(&view);
        self.params.publish(l, &self.master.p[l], view.through);
        self.publishes += 1;
        if let Some((k, bl)) = self.blocked {
            if bl == l && self.opts.mode == Mode::Lockfree {
                self.at(self.now, Ev::GpuForward { k, layer: bl });
            }
        }
        self.at(self.now + self.delays.ssd_store, Ev::UpdStoreDone);
        Ok(())
    }
}

/// Real-thread execution of the same protocol.
mod threaded {
    use super::*;

    /// Loss curve, staleness histogram, busy seconds, elapsed seconds.
    type GpuOutcome = (Vec<LossPoint>, BTreeMap<u64, u64>, f64, f64);

    enum BufferMsg {
        Grad(GradMessage),
        Publish { view: GradView, p32: Vec<f32> },
    }

    struct Shared {
        params: ParamBuffer,
        views: Vec<ArcSwap<GradView>>,
        sweeps: AtomicU64,
        sent: AtomicU64,
        accumulated: AtomicU64,
        gpu_done: AtomicBool,
        failed: AtomicBool,
    }

    fn sleep(s: f64) {
        if s > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(s));
        }
    }

    const POLL: Duration = Duration::from_micros(50);

    pub(super) fn run(
        problem: &ToyProblem,
        delays: &Delays,
        opts: &RunOptions,
        seed: u64,
    ) -> Result<TrainReport> {
        let layers = problem.mlp.num_layers();
        let lens = problem.mlp.layer_lens();
        let shared = Arc::new(Shared {
            params: ParamBuffer::new(&problem.init),
            views: (0..layers)
                .map(|l| {
                    ArcSwap::from_pointee(GradView {
                        layer: l,
                        sum: vec![0.0; lens[l]],
                        messages: 0,
                        through: -1,
                    })
                })
                .collect(),
            sweeps: AtomicU64::new(0),
            sent: AtomicU64::new(0),
            accumulated: AtomicU64::new(0),
            gpu_done: AtomicBool::new(false),
            failed: AtomicBool::new(false),
        });
        let (tx, rx) = mpsc::channel::<BufferMsg>();
        let start = Instant::now();

        let buffer = {
            let shared = Arc::clone(&shared);
            let lens = lens.clone();
            std::thread::spawn(move || -> Result<(GradBuffer, u64)> {
                let mut grads = GradBuffer::new(&lens);
                let mut publishes = 0;
                for msg in rx {
                    match msg {
                        BufferMsg::Grad(m) => {
                            grads.note_sent(&m);
                            if let Err(e) = grads.accumulate(&m) {
                                shared.failed.store(true, Ordering::SeqCst);
                                return Err(e);
                            }
                            shared.views[m.layer].store(Arc::new(grads.view(m.layer)));
                            shared.accumulated.fetch_add(1, Ordering::SeqCst);
                        }
                        BufferMsg::Publish { view, p32 } => {
                            grads.consume(&view);
                            let l = view.layer;
                            shared.views[l].store(Arc::new(grads.view(l)));
                            shared.params.publish(l, &p32, view.through);
                            publishes += 1;
                        }
                    }
                }
                Ok((grads, publishes))
            })
        };

        let updater = {
            let shared = Arc::clone(&shared);
            let tx = tx.clone();
            let hyper = problem.cfg.adam;
            let init = problem.init.clone();
            let (d, mode) = (*delays, opts.mode);
            std::thread::spawn(move || -> Result<(MasterState, u64, u64, f64)> {
                let mut master = MasterState::new(init);
                let (mut updates, mut rejected) = (0, 0);
                let mut expected: Vec<u64> = vec![0; layers];
                loop {
                    if shared.failed.load(Ordering::SeqCst) {
                        return Err(Error::Protocol("peer actor failed".into()));
                    }
                    let pending: Vec<bool> = (0..layers)
                        .map(|l| shared.views[l].load().messages > 0)
                        .collect();
                    let start_sweep = match mode {
                        Mode::Lockfree => pending.iter().any(|&p| p),
                        Mode::Sync => pending.iter().all(|&p| p),
                    };
                    if !start_sweep {
                        let done = shared.gpu_done.load(Ordering::SeqCst)
                            && shared.accumulated.load(Ordering::SeqCst)
                                == shared.sent.load(Ordering::SeqCst)
                            && !pending.iter().any(|&p| p);
                        if done {
                            break;
                        }
                        std::thread::sleep(POLL);
                        continue;
                    }
                    for l in (0..layers).rev() {
                        // Wait for our previous publish of this layer to land.
                        while shared.params.load(l).version < expected[l] {
                            std::thread::sleep(POLL);
                        }
                        let view = shared.views[l].load_full();
                        if view.messages == 0 {
                            continue;
                        }
                        sleep(d.ssd_fetch + d.cpu_update);
                        match master.apply_update(l, &view.sum, &hyper) {
                            Ok(()) => updates += 1,
                            Err(Error::Precondition(_)) => rejected += 1,
                            Err(e) => return Err(e),
                        }
                        expected[l] += 1;
                        tx.send(BufferMsg::Publish {
                            view: (*view).clone(),
                            p32: master.p[l].clone(),
                        })
                        .map_err(|_| Error::Protocol("buffering actor exited early".into()))?;
                        sleep(d.ssd_store);
                    }
                    for (l, &want) in expected.iter().enumerate() {
                        while shared.params.load(l).version < want {
                            std::thread::sleep(POLL);
                        }
                    }
                    shared.sweeps.fetch_add(1, Ordering::SeqCst);
                }
                Ok((master, updates, rejected, start.elapsed().as_secs_f64()))
            })
        };

        let gpu = {
            let shared = Arc::clone(&shared);
            let problem = problem.clone();
            let tx = tx.clone();
            let (d, opts) = (*delays, *opts);
            std::thread::spawn(move || -> Result<GpuOutcome> {
                let mut hist = BTreeMap::new();
                let mut curve = Vec::new();
                let mut busy = 0.0;
                let bound = match opts.mode {
                    Mode::Sync => Some(0),
                    Mode::Lockfree => opts.max_staleness,
                };
                for k in 0..opts.iterations {
                    if opts.mode == Mode::Sync {
                        while shared.sweeps.load(Ordering::SeqCst) < k {
                            std::thread::sleep(POLL);
                        }
                    }
                    let mut params = Vec::with_capacity(layers);
                    for l in 0..layers {
                        let snap = loop {
                            let snap = shared.params.load(l);
                            let s = staleness(k, snap.applied_through)?;
                            if bound.is_none_or(|b| s <= b) {
                                *hist.entry(s).or_default() += 1;
                                break snap;
                            }
                            std::thread::sleep(POLL);
                        };
                        sleep(d.h2d + d.fwd);
                        busy += d.fwd;
                        params.push(from_f16(&snap.values));
                    }
                    let (x, y) = problem.batch(k);
                    let (loss, g) =
                        problem
                            .mlp
                            .loss_and_grads(&params, &x, &y, problem.cfg.batch_size);
                    curve.push(LossPoint { iteration: k, loss });
                    for l in (0..layers).rev() {
                        sleep(d.bwd + d.d2h);
                        busy += d.bwd;
                        shared.sent.fetch_add(1, Ordering::SeqCst);
                        tx.send(BufferMsg::Grad(GradMessage::new(l, k, &g[l])))
                            .map_err(|_| Error::Protocol("buffering actor exited early".into()))?;
                    }
                }
                let finish = start.elapsed().as_secs_f64();
                shared.gpu_done.store(true, Ordering::SeqCst);
                Ok((curve, hist, busy, finish))
            })
        };
        drop(tx);

        fn join<T>(name: &str, r: std::thread::Result<T>) -> Result<T> {
            r.map_err(|_| Error::Protocol(format!("{name} actor panicked")))
        }
        let gpu_res = join("compute", gpu.join())?;
        if gpu_res.is_err() {
            shared.failed.store(true, Ordering::SeqCst);
        }
        let upd_res = join("updating", updater.join())?;
        let buf_res = join("buffering", buffer.join())?;
        let (curve, hist, busy, gpu_finish) = gpu_res?;
        let (master, updates, rejected, upd_finish) = upd_res?;
        let (grads, publishes) = buf_res?;

        let samples = (opts.iterations * problem.cfg.batch_size as u64) as f64;
        Ok(TrainReport {
            mode: opts.mode,
            clock: opts.clock,
            seed,
            iterations: opts.iterations,
            loss_curve: curve,
            final_val_loss: problem.val_loss_fp16(&master.p),
            gpu_finish_s: gpu_finish,
            updater_finish_s: upd_finish,
            samples_per_s: (gpu_finish > 0.0).then(|| samples / gpu_finish),
            gpu_idle_fraction: if gpu_finish > 0.0 {
                (1.0 - busy / gpu_finish).max(0.0)
            } else {
                0.0
            },
            staleness_histogram: hist,
            updates_applied: updates,
            rejected_updates: rejected,
            publishes,
            conservation: grads.conservation(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressReport {
    pub publishes: u64,
    pub reads: u64,
    pub torn_reads: u64,
}

/// Sentinel for element `i` of version `v`: a checkerboard of signs whose
/// magnitude encodes the version, exactly representable in FP16.
pub fn sentinel(version: u64, i: usize) -> f16 {
    let mag = (version % 2000) as f32 + 1.0;
    let sign = if (i as u64 + version).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    };
    f16::from_f32(sign * mag)
}

/// Hammer [`ParamBuffer::publish_values`] from one writer while `readers`
/// threads check every snapshot they load for a consistent sentinel pattern.
pub fn publish_stress(
    duration: Duration,
    layers: usize,
    len: usize,
    readers: usize,
) -> StressReport {
    let init: Vec<Vec<f32>> = (0..layers)
        .map(|_| (0..len).map(|i| sentinel(0, i).to_f32()).collect())
        .collect();
    let buf = Arc::new(ParamBuffer::new(&init));
    let stop = Arc::new(AtomicBool::new(false));
    let reader_handles: Vec<_> = (0..readers)
        .map(|r| {
            let buf = Arc::clone(&buf);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                let (mut reads, mut torn) = (0u64, 0u64);
                let mut l = r % layers;
                while !stop.load(Ordering::Relaxed) {
                    let snap = buf.load(l);
                    let ok = snap.values.len() == len
                        && snap
                            .values
                            .iter()
                            .enumerate()
                            .all(|(i, &x)| x == sentinel(snap.version, i));
                    reads += 1;
                    torn += u64::from(!ok);
                    l = (l + 1) % layers;
                }
                (reads, torn)
            })
        })
        .collect();

    let start = Instant::now();
    let mut publishes = 0u64;
    let mut l = 0;
    while start.elapsed() < duration {
        let v = buf.load(l).version + 1;
        buf.publish_values(l, (0..len).map(|i| sentinel(v, i)).collect(), v as i64);
        publishes += 1;
        l = (l + 1) % layers;
    }
    stop.store(true, Ordering::Relaxed);
    let (mut reads, mut torn_reads) = (0, 0);
    for h in reader_handles {
        let (r, t) = h.join().expect("reader thread");
        reads += r;
        torn_reads += t;
    }
    StressReport {
        publishes,
        reads,
        torn_reads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            layers: 3,
            width: 8,
            batch_size: 16,
            train_samples: 256,
            val_samples: 128,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn adam_degenerate_cases() {
        let h = AdamHyper {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        };
        let (mut p, mut m, mut v) = ([1.0f32], [0.0f32], [0.0f32]);
        adam_step(&mut p, &mut m, &mut v, &[1.0], &h, 1);
        assert!((p[0] - 0.9).abs() < 1e-7);

        let (mut p, mut m, mut v) = ([0.5f32, -2.0], [0.0f32; 2], [0.0f32; 2]);
        adam_step(
            &mut p,
            &mut m,
            &mut v,
            &[0.0, 0.0],
            &AdamHyper::default(),
            1,
        );
        assert_eq!(p, [0.5, -2.0]);
        assert_eq!((m, v), ([0.0; 2], [0.0; 2]));
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = MasterState::new(vec![vec![1.0, 2.0]]);
        let before = s.clone();
        assert!(matches!(
            s.apply_update(0, &[f64::NAN, 0.0], &AdamHyper::default()),
            Err(Error::Precondition(_))
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn accumulate_and_clear() {
        let mut b = GradBuffer::new(&[3]);
        let m = GradMessage::new(0, 0, &[1.0, 1.0, 1.0]);
        b.note_sent(&m);
        b.accumulate(&m).unwrap();
        b.note_sent(&m);
        b.accumulate(&m).unwrap();
        let v = b.view(0);
        assert_eq!(v.sum, vec![2.0; 3]);
        b.consume(&v);
        assert_eq!(b.view(0).sum, vec![0.0; 3]);
        assert!(b.conservation()[0].balanced);
        assert!(matches!(
            b.accumulate(&GradMessage::new(0, 1, &[1.0])),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn publish_bumps_version() {
        let buf = ParamBuffer::new(&[vec![0.25, 0.5]]);
        buf.publish(0, &[0.25, 0.5], 0);
        buf.publish(0, &[0.25, 0.5], 1);
        let s = buf.load(0);
        assert_eq!(s.version, 2);
        assert_eq!(from_f16(&s.values), vec![0.25, 0.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = ToyProblem::new(&small(), 3).unwrap();
        let (x, y) = p.batch(0);
        let n = p.cfg.batch_size;
        let (_, g) = p.mlp.loss_and_grads(&p.init, &x, &y, n);
        for l in 0..p.mlp.num_layers() {
            for &i in &[0usize, p.mlp.layer_len(l) - 1] {
                let mut plus = p.init.clone();
                let mut minus = p.init.clone();
                plus[l][i] += 1e-2;
                minus[l][i] -= 1e-2;
                let fd = (p.mlp.loss(&plus, &x, &y, n) - p.mlp.loss(&minus, &x, &y, n)) / 2e-2;
                assert!(
                    (fd - g[l][i]).abs() < 2e-3 + 2e-2 * fd.abs(),
                    "layer {l} idx {i}: {fd} vs {}",
                    g[l][i]
                );
            }
        }
    }

    #[test]
    fn sync_is_stale_free_and_conserves() {
        let p = ToyProblem::new(&small(), 1).unwrap();
        let r = run_sync(&p, &Delays::ssd(), 20, 1).unwrap();
        assert_eq!(r.max_staleness(), 0);
        assert!(r.conserved());
        assert_eq!(r.updates_applied, 20 * 3);
        assert!(r.gpu_idle_fraction >= 0.7, "{}", r.gpu_idle_fraction);
        let c = run_sync(&p, &Delays::cpu(), 20, 1).unwrap();
        assert!(c.gpu_idle_fraction <= 0.2, "{}", c.gpu_idle_fraction);
    }

    #[test]
    fn sync_matches_sequential_reference() {
        let p = ToyProblem::new(&small(), 7).unwrap();
        let mut master = MasterState::new(p.init.clone());
        let mut curve = Vec::new();
        for k in 0..25 {
            let params: Vec<Vec<f32>> = master.p.iter().map(|l| from_f16(&to_f16(l))).collect();
            let (x, y) = p.batch(k);
            let (loss, g) = p.mlp.loss_and_grads(&params, &x, &y, p.cfg.batch_size);
            curve.push(LossPoint { iteration: k, loss });
            for l in (0..g.len()).rev() {
                let g16: Vec<f64> = GradMessage::new(l, k, &g[l])
                    .grad
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                master.apply_update(l, &g16, &p.cfg.adam).unwrap();
            }
        }
        for d in [Delays::zero(), Delays::ssd()] {
            let r = run_sync(&p, &d, 25, 7).unwrap();
            assert_eq!(r.loss_curve, curve);
            assert_eq!(r.final_val_loss, p.val_loss_fp16(&master.p));
        }
    }

    #[test]
    fn zero_delay_lockfree_equals_sync() {
        let p = ToyProblem::new(&small(), 2).unwrap();
        let a = run_sync(&p, &Delays::zero(), 30, 2).unwrap();
        let b = run_lockfree(&p, &Delays::zero(), 30, 2).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.final_val_loss, b.final_val_loss);
        assert_eq!(b.samples_per_s, None);
    }

    #[test]
    fn lockfree_is_faster_and_stale() {
        let p = ToyProblem::new(&small(), 4).unwrap();
        let s = run_sync(&p, &Delays::ssd(), 30, 4).unwrap();
        let l = run_lockfree(&p, &Delays::ssd(), 30, 4).unwrap();
        let speedup = l.samples_per_s.unwrap() / s.samples_per_s.unwrap();
        assert!(speedup > 2.0, "{speedup}");
        assert!(l.max_staleness() > 0);
        assert!(l.conserved());
        assert!(l.updates_applied < s.updates_applied);
    }

    #[test]
    fn staleness_bound_holds() {
        let p = ToyProblem::new(&small(), 5).unwrap();
        let mut o = RunOptions::new(Mode::Lockfree, 20);
        o.max_staleness = Some(1);
        let r = run(&p, &Delays::ssd(), &o, 5).unwrap();
        assert!(r.max_staleness() <= 1);
        assert!(r.conserved());
    }

    #[test]
    fn threaded_smoke() {
        let p = ToyProblem::new(&small(), 6).unwrap();
        for mode in [Mode::Sync, Mode::Lockfree] {
            let o = RunOptions {
                clock: Clock::Wall { scale: 0.02 },
                ..RunOptions::new(mode, 8)
            };
            let r = run(&p, &Delays::ssd(), &o, 6).unwrap();
            assert!(r.conserved(), "{mode:?}");
            assert_eq!(r.loss_curve.len(), 8);
            if mode == Mode::Sync {
                assert_eq!(r.max_staleness(), 0);
            }
        }
    }

    #[test]
    fn short_stress_has_no_torn_reads() {
        let r = publish_stress(Duration::from_millis(200), 2, 1024, 2);
        assert!(r.publishes > 0 && r.reads > 0);
        assert_eq!(r.torn_reads, 0);
    }
}
