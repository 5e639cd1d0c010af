//! Appended-poison evasion attack.
//!
//! A block of poison bytes is appended to the binary and refined by signed
//! gradient steps on the malicious probability. The original bytes are
//! never touched. The poison is kept as a continuous state in normalized
//! space and re-quantized to bytes after every step; the byte version is
//! what gets scored.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{classify, SeqNetModel, MALICIOUS};
use crate::parallel;
use crate::preprocess::{normalize_byte, normalize_bytes, quantize, resample_adjoint, resample_linear, Label};
use crate::tensor::Tensor;

/// Step size of one update in normalized space.
pub const STEP: f64 = 1.0 / 256.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub poison_bytes: usize,
    pub iterations: usize,
    pub step: f64,
    /// Initial value of every poison byte.
    pub fill: u8,
    /// Stop after this many consecutive all-zero poison gradients.
    pub stall_patience: usize,
    /// Stop at the first iteration whose quantized input evades.
    pub stop_on_evasion: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            poison_bytes: 32_000,
            iterations: 20,
            step: STEP,
            fill: 0,
            stall_patience: 5,
            stop_on_evasion: true,
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x - step * sign(grad)`, clamped to `[-1, 1]`.
pub fn poison_step(x: &[f64], grad: &[f64], step: f64) -> Vec<f64> {
    x.iter()
        .zip(grad)
        .map(|(&v, &g)| (v - step * sign(g)).clamp(-1.0, 1.0))
        .collect()
}

/// Malicious probability of the continuous sequence `original ++ poison`
/// and its gradient with respect to the poison entries.
pub fn poison_gradient(model: &SeqNetModel, original: &[f64], poison: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut full = Vec::with_capacity(original.len() + poison.len());
    full.extend_from_slice(original);
    full.extend_from_slice(poison);
    let (p, grad) = input_gradient(model, &full)?;
    Ok((p, grad[original.len()..].to_vec()))
}

/// Malicious probability of `seq` (any length) and its gradient with respect
/// to every entry of `seq`.
pub fn input_gradient(model: &SeqNetModel, seq: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = model.spec().input_length;
    let x = resample_linear(seq, m)?;
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(vec![1, 1, m], x)?, true);
    let f = model.forward_graph(&mut g, xv, Mode::Eval, false)?;
    let col = g.select_column(f.probs, MALICIOUS)?;
    let y = g.sum(col);
    let p = g.value(y).item()?;
    g.backward(y)?;
    let grad = g.grad_or_zeros(xv);
    Ok((p, resample_adjoint(grad.data(), seq.len())?))
}

/// Malicious probability of a byte string under `model` in eval mode.
pub fn score_bytes(model: &SeqNetModel, bytes: &[u8]) -> Result<f64> {
    score_normalized(model, &normalize_bytes(bytes)?)
}

/// Malicious probability of a normalized sequence of any length.
pub fn score_normalized(model: &SeqNetModel, seq: &[f64]) -> Result<f64> {
    let m = model.spec().input_length;
    let x = resample_linear(seq, m)?;
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, 1, m], x)?);
    let f = model.forward_graph(&mut g, xv, Mode::Eval, false)?;
    Ok(g.value(f.probs).data()[MALICIOUS])
}

fn evades(p: f64) -> bool {
    classify(p) != Label::Malicious
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    /// Prediction on the clean binary.
    pub initial: f64,
    /// `quantized[t]` scores the bytes after `t` steps; entry 0 is the
    /// untouched poison fill.
    pub quantized: Vec<f64>,
    /// `raw[t]` scores the continuous state after `t` steps.
    pub raw: Vec<f64>,
    /// Distinct poison updates per step, before clamping.
    pub updates: Vec<Vec<f64>>,
    /// First step whose quantized bytes evade.
    pub evaded_at: Option<usize>,
    pub stalled: bool,
    /// Original bytes followed by the final poison.
    pub bytes: Vec<u8>,
}

impl AttackTrace {
    pub fn final_prediction(&self) -> f64 {
        *self.quantized.last().unwrap_or(&self.initial)
    }

    pub fn evaded_within(&self, iterations: usize) -> bool {
        self.evaded_at.is_some_and(|t| t <= iterations)
    }

    /// The `t,y` series: `t = 0` is the clean binary, later rows the
    /// poisoned bytes after each step.
    pub fn series(&self) -> Vec<(usize, f64)> {
        std::iter::once((0, self.initial))
            .chain(self.quantized.iter().skip(1).enumerate().map(|(i, &y)| (i + 1, y)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "y"])?;
        for (t, y) in self.series() {
            out.write_record([t.to_string(), y.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }
}

/// Attacks one binary. Fails with [`Error::NothingToEvade`] when the clean
/// binary is not detected.
pub fn attack(model: &SeqNetModel, bytes: &[u8], config: &AttackConfig) -> Result<AttackTrace> {
    if config.poison_bytes == 0 {
        return Err(Error::InvalidConfig("poison length must be positive".into()));
    }
    if !(config.step > 0.0) {
        return Err(Error::InvalidConfig("step must be positive".into()));
    }
    let original = normalize_bytes(bytes)?;
    let initial = score_bytes(model, bytes)?;
    if evades(initial) {
        return Err(Error::NothingToEvade(initial));
    }

    let mut state = vec![normalize_byte(config.fill); config.poison_bytes];
    let mut poisoned = bytes.to_vec();
    poisoned.extend(std::iter::repeat(config.fill).take(config.poison_bytes));
    let start = score_bytes(model, &poisoned)?;
    let mut trace = AttackTrace {
        initial,
        quantized: vec![start],
        raw: vec![start],
        updates: Vec::new(),
        evaded_at: None,
        stalled: false,
        bytes: Vec::new(),
    };
    if evades(trace.quantized[0]) {
        trace.evaded_at = Some(0);
    }
    let mut zero_streak = 0;
    for t in 1..=config.iterations {
        if trace.evaded_at.is_some() && config.stop_on_evasion {
            break;
        }
        let (_, grad) = poison_gradient(model, &original, &state)?;
        let mut update: Vec<f64> = grad.iter().map(|&g| -config.step * sign(g)).collect();
        update.sort_by(f64::total_cmp);
        update.dedup();
        trace.updates.push(update);
        if grad.iter().all(|&g| g == 0.0) {
            zero_streak += 1;
        } else {
            zero_streak = 0;
        }
        state = poison_step(&state, &grad, config.step);
        for (b, &v) in poisoned[bytes.len()..].iter_mut().zip(&state) {
            *b = quantize(v);
        }
        let y = score_bytes(model, &poisoned)?;
        trace.quantized.push(y);
        let mut full = original.clone();
        full.extend_from_slice(&state);
        trace.raw.push(score_normalized(model, &full)?);
        if trace.evaded_at.is_none() && evades(y) {
            trace.evaded_at = Some(t);
        }
        if zero_streak >= config.stall_patience {
            log::warn!("attack stalled after {t} iterations with zero gradient");
            trace.stalled = true;
            break;
        }
    }
    trace.bytes = poisoned;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub iterations: usize,
    pub evaded_count: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignReport {
    pub rows: Vec<CampaignRow>,
    pub traces: Vec<AttackTrace>,
    /// Index into the input samples of each trace.
    pub sample_indices: Vec<usize>,
    /// Samples left out because they were not detected to begin with.
    pub skipped: usize,
}

impl CampaignReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iterations", "evaded_count", "total"])?;
        for r in &self.rows {
            out.write_record([r.iterations.to_string(), r.evaded_count.to_string(), r.total.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }
}

/// Attacks every detected sample once with the largest budget and reports
/// how many evade within each budget.
pub fn attack_campaign(
    model: &SeqNetModel,
    samples: &[Vec<u8>],
    config: &AttackConfig,
    budgets: &[usize],
) -> Result<CampaignReport> {
    parallel::tune_allocator();
    let max = budgets.iter().copied().max().unwrap_or(0);
    let cfg = AttackConfig {
        iterations: max,
        ..config.clone()
    };
    let results = parallel::map(samples, |s| attack(model, s, &cfg));
    let mut traces = Vec::new();
    let mut sample_indices = Vec::new();
    let mut skipped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => {
                traces.push(t);
                sample_indices.push(i);
            }
            Err(Error::NothingToEvade(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let rows = budgets
        .iter()
        .map(|&b| CampaignRow {
            iterations: b,
            evaded_count: traces.iter().filter(|t| t.evaded_within(b)).count(),
            total: traces.len(),
        })
        .collect();
    Ok(CampaignReport {
        rows,
        traces,
        sample_indices,
        skipped,
    })
}
