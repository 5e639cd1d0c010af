//! Layer kernels and their recorded graph operations.
//!
//! Every kernel here works on `[batch, channels, length]` sequences (or
//! `[batch, features]` for the classifier head) and has a matching backward
//! rule. The graph operations also tally executed multiply-adds so a forward
//! pass doubles as a cost measurement.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, VarId};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn output_length(
    op: &'static str,
    length: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = length + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(Error::InputTooShort {
            op,
            length,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Standard 1-D convolution: `c` input channels, `c′` output channels,
/// kernel length `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    /// Stride-1 convolution padded to preserve length for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv1dSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn output_length(&self, length: usize) -> Result<usize> {
        output_length("conv1d", length, self.kernel, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.bias as usize * self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel]
    }
}

/// Per-channel 1-D convolution; channels never mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthwiseConv1dSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl DepthwiseConv1dSpec {
    pub fn same(channels: usize, kernel: usize) -> Self {
        DepthwiseConv1dSpec {
            channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn output_length(&self, length: usize) -> Result<usize> {
        output_length("depthwise_conv1d", length, self.kernel, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.kernel + self.bias as usize * self.channels
    }
}

/// Kernel-length-1 channel mixing applied independently at every position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointwiseConv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl PointwiseConv1dSpec {
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels + self.bias as usize * self.out_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Standard,
    Residual,
}

/// Where batch normalization sits relative to the ReLU inside an SDSC block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// conv → BN → ReLU
    BeforeActivation,
    /// conv → ReLU → BN
    AfterActivation,
}

/// Block ordering used by every SDSC block unless a spec overrides it.
pub const SDSC_NORM_PLACEMENT: NormPlacement = NormPlacement::BeforeActivation;

/// Sequence depthwise separable convolution block: a `k×1` depthwise
/// convolution and a pointwise convolution, each followed by batch norm and
/// ReLU. The residual kind adds its input to the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdscBlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub norm: NormPlacement,
}

impl SdscBlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Result<Self> {
        let spec = SdscBlockSpec {
            kind,
            in_channels,
            out_channels,
            kernel: 3,
            norm: SDSC_NORM_PLACEMENT,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::InvalidSpec("SDSC block extents must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "SDSC kernel {} must be odd to preserve length",
                self.kernel
            )));
        }
        if self.kind == BlockKind::Residual && self.in_channels != self.out_channels {
            return Err(Error::InvalidSpec(format!(
                "residual SDSC block needs in_channels == out_channels, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn depthwise(&self) -> DepthwiseConv1dSpec {
        DepthwiseConv1dSpec::same(self.in_channels, self.kernel)
    }

    pub fn pointwise(&self) -> PointwiseConv1dSpec {
        PointwiseConv1dSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            bias: true,
        }
    }

    pub fn param_count(&self) -> usize {
        self.depthwise().param_count()
            + 2 * self.in_channels
            + self.pointwise().param_count()
            + 2 * self.out_channels
    }
}

// ---------------------------------------------------------------------------
// Forward kernels

fn check_weight(op: &'static str, w: &Tensor, want: &[usize]) -> Result<()> {
    if w.shape() != want {
        return Err(Error::ShapeMismatch {
            op,
            lhs: w.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    Ok(())
}

fn check_bias(op: &'static str, b: Option<&Tensor>, n: usize) -> Result<()> {
    match b {
        Some(b) => check_weight(op, b, &[n]),
        None => Ok(()),
    }
}

fn check_channels(op: &'static str, x: &Tensor, c: usize) -> Result<(usize, usize)> {
    let (b, xc, l) = x.dims3(op)?;
    if xc != c {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![b, c, l],
        });
    }
    Ok((b, l))
}

/// Unfolds one `[c, L]` sequence into `[c·k, L′]` patches.
fn im2col(x: &[f64], c: usize, l: usize, spec: &Conv1dSpec, lo: usize, cols: &mut [f64]) {
    let k = spec.kernel;
    for i in 0..c {
        let xs = &x[i * l..(i + 1) * l];
        for j in 0..k {
            let row = &mut cols[(i * k + j) * lo..(i * k + j + 1) * lo];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = t * spec.stride + j;
                *slot = if pos >= spec.padding && pos - spec.padding < l {
                    xs[pos - spec.padding]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, l: usize, spec: &Conv1dSpec, lo: usize, dx: &mut [f64]) {
    let k = spec.kernel;
    for i in 0..c {
        let xs = &mut dx[i * l..(i + 1) * l];
        for j in 0..k {
            let row = &cols[(i * k + j) * lo..(i * k + j + 1) * lo];
            for (t, v) in row.iter().enumerate() {
                let pos = t * spec.stride + j;
                if pos >= spec.padding && pos - spec.padding < l {
                    xs[pos - spec.padding] += v;
                }
            }
        }
    }
}

fn add_channel_bias(y: &mut [f64], bias: Option<&Tensor>, channels: usize, l: usize) {
    if let Some(bias) = bias {
        for (o, &bo) in bias.data().iter().enumerate().take(channels) {
            for v in &mut y[o * l..(o + 1) * l] {
                *v += bo;
            }
        }
    }
}

fn conv1d_impl(
    x: &Tensor,
    spec: &Conv1dSpec,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, u64)> {
    let (b, l) = check_channels("conv1d", x, spec.in_channels)?;
    check_weight("conv1d", w, &spec.weight_shape())?;
    check_bias("conv1d", bias, spec.out_channels)?;
    let lo = spec.output_length(l)?;
    let (c, co, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let mut y = vec![0.0; b * co * lo];
    let mut cols = vec![0.0; c * k * lo];
    for bi in 0..b {
        im2col(&x.data()[bi * c * l..(bi + 1) * c * l], c, l, spec, lo, &mut cols);
        let yb = &mut y[bi * co * lo..(bi + 1) * co * lo];
        gemm(Mat::new(w.data(), co, c * k), Mat::new(&cols, c * k, lo), 0.0, yb);
        add_channel_bias(yb, bias, co, lo);
    }
    let macs = (b * lo * co * c * k) as u64;
    Ok((Tensor::new(vec![b, co, lo], y)?, macs))
}

/// `y[b,o,t] = bias[o] + Σ_i Σ_j w[o,i,j]·x_padded[b,i,t·stride+j]`.
pub fn conv1d_forward(
    x: &Tensor,
    spec: &Conv1dSpec,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    conv1d_impl(x, spec, w, bias).map(|(y, _)| y)
}

fn depthwise_impl(
    x: &Tensor,
    spec: &DepthwiseConv1dSpec,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, u64)> {
    let (b, l) = check_channels("depthwise_conv1d", x, spec.channels)?;
    check_weight("depthwise_conv1d", w, &[spec.channels, spec.kernel])?;
    check_bias("depthwise_conv1d", bias, spec.channels)?;
    let lo = spec.output_length(l)?;
    let (c, k) = (spec.channels, spec.kernel);
    // Each channel is a one-channel convolution; sharing the im2col/GEMM path
    // keeps the c = 1 case bit-identical to `conv1d_forward`.
    let single = Conv1dSpec {
        in_channels: 1,
        out_channels: 1,
        kernel: k,
        stride: spec.stride,
        padding: spec.padding,
        bias: spec.bias,
    };
    let mut y = vec![0.0; b * c * lo];
    let mut cols = vec![0.0; k * lo];
    for bi in 0..b {
        for i in 0..c {
            let xs = &x.data()[(bi * c + i) * l..(bi * c + i + 1) * l];
            im2col(xs, 1, l, &single, lo, &mut cols);
            let ys = &mut y[(bi * c + i) * lo..(bi * c + i + 1) * lo];
            gemm(Mat::new(&w.data()[i * k..(i + 1) * k], 1, k), Mat::new(&cols, k, lo), 0.0, ys);
            if let Some(bias) = bias {
                let b0 = bias.data()[i];
                for v in ys.iter_mut() {
                    *v += b0;
                }
            }
        }
    }
    let macs = (b * lo * c * k) as u64;
    Ok((Tensor::new(vec![b, c, lo], y)?, macs))
}

/// `y[b,i,t] = bias[i] + Σ_j w[i,j]·x_padded[b,i,t·stride+j]`.
pub fn depthwise_conv1d_forward(
    x: &Tensor,
    spec: &DepthwiseConv1dSpec,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    depthwise_impl(x, spec, w, bias).map(|(y, _)| y)
}

fn pointwise_impl(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, u64)> {
    let (co, c) = w.dims2("pointwise_conv1d")?;
    let (b, l) = check_channels("pointwise_conv1d", x, c)?;
    check_bias("pointwise_conv1d", bias, co)?;
    let mut y = vec![0.0; b * co * l];
    for bi in 0..b {
        let yb = &mut y[bi * co * l..(bi + 1) * co * l];
        let xb = &x.data()[bi * c * l..(bi + 1) * c * l];
        gemm(Mat::new(w.data(), co, c), Mat::new(xb, c, l), 0.0, yb);
        add_channel_bias(yb, bias, co, l);
    }
    let macs = (b * l * co * c) as u64;
    Ok((Tensor::new(vec![b, co, l], y)?, macs))
}

/// `y[b,o,t] = bias[o] + Σ_i w[o,i]·x[b,i,t]` with `w` shaped `[c′, c]`.
pub fn pointwise_conv1d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    pointwise_impl(x, w, bias).map(|(y, _)| y)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let d = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), d).expect("same shape")
}

pub fn avg_pool1d_forward(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (b, c, l) = x.dims3("avg_pool1d")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig("pool window and stride must be positive".into()));
    }
    if window > l {
        return Err(Error::WindowTooLarge {
            op: "avg_pool1d",
            window,
            length: l,
        });
    }
    let lo = (l - window) / stride + 1;
    let inv = 1.0 / window as f64;
    let mut y = Vec::with_capacity(b * c * lo);
    for row in x.data().chunks_exact(l) {
        for t in 0..lo {
            let s: f64 = row[t * stride..t * stride + window].iter().sum();
            y.push(s * inv);
        }
    }
    Tensor::new(vec![b, c, lo], y)
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (b, c, l) = x.dims3("global_avg_pool")?;
    let y = x
        .data()
        .chunks_exact(l)
        .map(|row| row.iter().sum::<f64>() / l as f64)
        .collect();
    Tensor::new(vec![b, c], y)
}

fn dense_impl(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, u64)> {
    let (b, f) = x.dims2("dense")?;
    let (o, wf) = w.dims2("dense")?;
    if wf != f {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    check_bias("dense", bias, o)?;
    let mut y = vec![0.0; b * o];
    gemm(Mat::new(x.data(), b, f), Mat::t(w.data(), o, f), 0.0, &mut y);
    if let Some(bias) = bias {
        for row in y.chunks_exact_mut(o) {
            for (v, bo) in row.iter_mut().zip(bias.data()) {
                *v += bo;
            }
        }
    }
    Ok((Tensor::new(vec![b, o], y)?, (b * o * f) as u64))
}

/// Affine map `y = x·Wᵀ + bias` with `W` shaped `[out, in]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    dense_impl(x, w, bias).map(|(y, _)| y)
}

/// Row-wise softmax over the last axis, stabilized by max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2("softmax")?;
    let mut y = x.data().to_vec();
    for row in y.chunks_exact_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Two-class softmax `P_i = e^{x_i} / Σ_j e^{x_j}`.
pub fn softmax2(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2("softmax2")?;
    if n != 2 {
        return Err(Error::InvalidShape {
            op: "softmax2",
            shape: x.shape().to_vec(),
            reason: "expected two logits per row".into(),
        });
    }
    softmax_rows(x)
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, n) = logits.dims2("cross_entropy")?;
    check_labels(b, n, labels)?;
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks_exact(n).zip(labels) {
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / b as f64)
}

fn check_labels(b: usize, n: usize, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![b, n],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::InvalidShape {
            op: "cross_entropy",
            shape: vec![b, n],
            reason: format!("label {bad} out of range"),
        });
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Running mean and (unbiased) variance per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Stats `(0, 1)`, making eval mode the identity normalization.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Statistics observed on one training batch; `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

struct BnOut {
    y: Tensor,
    xhat: Tensor,
    inv_std: Vec<f64>,
    stats: Option<BatchStats>,
}

fn batch_norm_impl(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    running: &RunningStats,
    eps: f64,
) -> Result<BnOut> {
    let (b, c, l) = x.dims3("batch_norm")?;
    check_weight("batch_norm", gamma, &[c])?;
    check_weight("batch_norm", beta, &[c])?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: vec![c],
            rhs: vec![running.mean.len()],
        });
    }
    let n = b * l;
    let (mean, var_biased, stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::InvalidShape {
                    op: "batch_norm",
                    shape: x.shape().to_vec(),
                    reason: "training statistics need batch·length ≥ 2".into(),
                });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += x.data()[(bi * c + i) * l..(bi * c + i + 1) * l].iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    for v in &x.data()[(bi * c + i) * l..(bi * c + i + 1) * l] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[i] = m;
                var[i] = ss / n as f64;
            }
            let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running.mean.clone(), running.var.clone(), None),
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..c {
            let r = (bi * c + i) * l..(bi * c + i + 1) * l;
            let (g, bt, m, is) = (gamma.data()[i], beta.data()[i], mean[i], inv_std[i]);
            for ((xh, yv), xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x.data()[r]) {
                *xh = (xv - m) * is;
                *yv = g * *xh + bt;
            }
        }
    }
    Ok(BnOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        stats,
    })
}

/// Batch normalization over batch×length per channel.
/// Returns the normalized output and, in train mode, the batch statistics.
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    running: &RunningStats,
    eps: f64,
) -> Result<(Tensor, Option<BatchStats>)> {
    batch_norm_impl(x, gamma, beta, mode, running, eps).map(|o| (o.y, o.stats))
}

// ---------------------------------------------------------------------------
// Backward rules

struct Conv1dRule {
    spec: Conv1dSpec,
    has_bias: bool,
}

impl Function for Conv1dRule {
    fn name(&self) -> &'static str {
        "conv1d"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (b, c, l) = x.dims3("conv1d").expect("recorded shape");
        let (co, k) = (self.spec.out_channels, self.spec.kernel);
        let lo = up.shape()[2];
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        let mut cols = vec![0.0; c * k * lo];
        let mut dcols = vec![0.0; c * k * lo];
        for bi in 0..b {
            let dy = &up.data()[bi * co * lo..(bi + 1) * co * lo];
            if let Some(dw) = dw.as_mut() {
                im2col(&x.data()[bi * c * l..(bi + 1) * c * l], c, l, &self.spec, lo, &mut cols);
                gemm(Mat::new(dy, co, lo), Mat::t(&cols, c * k, lo), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(Mat::t(w.data(), co, c * k), Mat::new(dy, co, lo), 0.0, &mut dcols);
                col2im(&dcols, c, l, &self.spec, lo, &mut dx[bi * c * l..(bi + 1) * c * l]);
            }
        }
        let mut out = vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        ];
        if self.has_bias {
            out.push(needs[2].then(|| channel_sums(up)));
        }
        out
    }
}

/// Σ over batch and length per channel of a `[b, c, l]` tensor.
fn channel_sums(t: &Tensor) -> Tensor {
    let (b, c, l) = t.dims3("channel_sums").expect("rank 3");
    let mut s = vec![0.0; c];
    for bi in 0..b {
        for (i, si) in s.iter_mut().enumerate() {
            *si += t.data()[(bi * c + i) * l..(bi * c + i + 1) * l].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], s).unwrap()
}

struct DepthwiseRule {
    spec: DepthwiseConv1dSpec,
    has_bias: bool,
}

impl Function for DepthwiseRule {
    fn name(&self) -> &'static str {
        "depthwise_conv1d"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (b, c, l) = x.dims3("depthwise_conv1d").expect("recorded shape");
        let (k, s, pad) = (self.spec.kernel, self.spec.stride, self.spec.padding);
        let lo = up.shape()[2];
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            for i in 0..c {
                let xs = &x.data()[(bi * c + i) * l..(bi * c + i + 1) * l];
                let dy = &up.data()[(bi * c + i) * lo..(bi * c + i + 1) * lo];
                let ws = &w.data()[i * k..(i + 1) * k];
                for (t, &g) in dy.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let pos = t * s + j;
                        if pos < pad || pos - pad >= l {
                            continue;
                        }
                        let xi = pos - pad;
                        if let Some(dw) = dw.as_mut() {
                            dw[i * k + j] += g * xs[xi];
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[(bi * c + i) * l + xi] += g * ws[j];
                        }
                    }
                }
            }
        }
        let mut out = vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        ];
        if self.has_bias {
            out.push(needs[2].then(|| channel_sums(up)));
        }
        out
    }
}

struct PointwiseRule {
    has_bias: bool,
}

impl Function for PointwiseRule {
    fn name(&self) -> &'static str {
        "pointwise_conv1d"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (b, c, l) = x.dims3("pointwise_conv1d").expect("recorded shape");
        let co = w.shape()[0];
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for bi in 0..b {
            let dy = &up.data()[bi * co * l..(bi + 1) * co * l];
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[bi * c * l..(bi + 1) * c * l];
                gemm(Mat::t(w.data(), co, c), Mat::new(dy, co, l), 0.0, dxb);
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &x.data()[bi * c * l..(bi + 1) * c * l];
                gemm(Mat::new(dy, co, l), Mat::t(xb, c, l), 1.0, dw);
            }
        }
        let mut out = vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        ];
        if self.has_bias {
            out.push(needs[2].then(|| channel_sums(up)));
        }
        out
    }
}

struct BatchNormRule {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl Function for BatchNormRule {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let gamma = p[1];
        let (b, c, l) = up.dims3("batch_norm").expect("recorded shape");
        let n = (b * l) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for bi in 0..b {
            for i in 0..c {
                let r = (bi * c + i) * l..(bi * c + i + 1) * l;
                for (g, xh) in up.data()[r.clone()].iter().zip(&self.xhat.data()[r]) {
                    sum_dy[i] += g;
                    sum_dy_xhat[i] += g * xh;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; up.len()];
            for bi in 0..b {
                for i in 0..c {
                    let r = (bi * c + i) * l..(bi * c + i + 1) * l;
                    let scale = gamma.data()[i] * self.inv_std[i];
                    let out = dx[r.clone()].iter_mut();
                    let ins = up.data()[r.clone()].iter().zip(&self.xhat.data()[r]);
                    match self.mode {
                        Mode::Train => {
                            let (mdy, mdx) = (sum_dy[i] / n, sum_dy_xhat[i] / n);
                            for (d, (g, xh)) in out.zip(ins) {
                                *d = scale * (g - mdy - xh * mdx);
                            }
                        }
                        Mode::Eval => {
                            for (d, (g, _)) in out.zip(ins) {
                                *d = scale * g;
                            }
                        }
                    }
                }
            }
            Tensor::new(up.shape().to_vec(), dx).unwrap()
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new(vec![c], sum_dy_xhat).unwrap()),
            needs[2].then(|| Tensor::new(vec![c], sum_dy).unwrap()),
        ]
    }
}

struct ReluRule;

impl Function for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let d = up
            .data()
            .iter()
            .zip(p[0].data())
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(up.shape().to_vec(), d).unwrap())]
    }
}

struct AvgPoolRule {
    window: usize,
    stride: usize,
}

impl Function for AvgPoolRule {
    fn name(&self) -> &'static str {
        "avg_pool1d"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let l = p[0].shape()[2];
        let lo = up.shape()[2];
        let inv = 1.0 / self.window as f64;
        let mut dx = Tensor::zeros_like(p[0]);
        for (row_dx, row_up) in dx.data_mut().chunks_exact_mut(l).zip(up.data().chunks_exact(lo)) {
            for (t, g) in row_up.iter().enumerate() {
                for v in &mut row_dx[t * self.stride..t * self.stride + self.window] {
                    *v += g * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct GlobalAvgPoolRule;

impl Function for GlobalAvgPoolRule {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let l = p[0].shape()[2];
        let inv = 1.0 / l as f64;
        let mut dx = Tensor::zeros_like(p[0]);
        for (row, g) in dx.data_mut().chunks_exact_mut(l).zip(up.data()) {
            row.fill(g * inv);
        }
        vec![Some(dx)]
    }
}

struct DenseRule {
    has_bias: bool,
}

impl Function for DenseRule {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (p[0], p[1]);
        let (b, f) = x.dims2("dense").unwrap();
        let o = w.shape()[0];
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; b * f];
            gemm(Mat::new(up.data(), b, o), Mat::new(w.data(), o, f), 0.0, &mut d);
            Tensor::new(vec![b, f], d).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut d = vec![0.0; o * f];
            gemm(Mat::t(up.data(), b, o), Mat::new(x.data(), b, f), 0.0, &mut d);
            Tensor::new(vec![o, f], d).unwrap()
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut s = vec![0.0; o];
                for row in up.data().chunks_exact(o) {
                    for (si, g) in s.iter_mut().zip(row) {
                        *si += g;
                    }
                }
                Tensor::new(vec![o], s).unwrap()
            }));
        }
        out
    }
}

struct SoftmaxRule {
    y: Tensor,
}

impl Function for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, up: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let n = self.y.shape()[1];
        let mut dx = vec![0.0; up.len()];
        for ((d, g), y) in dx
            .chunks_exact_mut(n)
            .zip(up.data().chunks_exact(n))
            .zip(self.y.data().chunks_exact(n))
        {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                *di = yi * (gi - dot);
            }
        }
        vec![Some(Tensor::new(up.shape().to_vec(), dx).unwrap())]
    }
}

struct CrossEntropyRule {
    probs: Tensor,
    labels: Vec<usize>,
}

impl Function for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, up: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let (b, n) = self.probs.dims2("cross_entropy").unwrap();
        let scale = up.data()[0] / b as f64;
        let mut d = self.probs.data().to_vec();
        for (row, &y) in d.chunks_exact_mut(n).zip(&self.labels) {
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        vec![Some(Tensor::new(vec![b, n], d).unwrap())]
    }
}

// ---------------------------------------------------------------------------
// Graph operations

/// Parameter handles of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: VarId,
    pub beta: VarId,
}

/// Parameter handles of one SDSC block.
#[derive(Clone, Copy, Debug)]
pub struct SdscVars {
    pub dw_weight: VarId,
    pub dw_bias: VarId,
    pub norm1: NormVars,
    pub pw_weight: VarId,
    pub pw_bias: VarId,
    pub norm2: NormVars,
}

/// Result of running one SDSC block on a graph.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// Block output (after the skip addition for residual blocks).
    pub out: VarId,
    /// Output of the block's final normalization/activation stage.
    pub activation: VarId,
    /// Batch statistics of the two normalization layers (train mode only).
    pub stats: [Option<BatchStats>; 2],
}

impl Graph {
    fn with_bias(parents: &mut Vec<VarId>, bias: Option<VarId>) {
        if let Some(b) = bias {
            parents.push(b);
        }
    }

    pub fn conv1d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        spec: &Conv1dSpec,
    ) -> Result<VarId> {
        let (y, macs) = conv1d_impl(
            self.value(x),
            spec,
            self.value(w),
            bias.map(|b| self.value(b)),
        )?;
        self.add_macs(macs);
        let mut parents = vec![x, w];
        Self::with_bias(&mut parents, bias);
        let rule = Conv1dRule {
            spec: *spec,
            has_bias: bias.is_some(),
        };
        Ok(self.record(y, parents, Box::new(rule)))
    }

    pub fn depthwise_conv1d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        spec: &DepthwiseConv1dSpec,
    ) -> Result<VarId> {
        let (y, macs) = depthwise_impl(
            self.value(x),
            spec,
            self.value(w),
            bias.map(|b| self.value(b)),
        )?;
        self.add_macs(macs);
        let mut parents = vec![x, w];
        Self::with_bias(&mut parents, bias);
        let rule = DepthwiseRule {
            spec: *spec,
            has_bias: bias.is_some(),
        };
        Ok(self.record(y, parents, Box::new(rule)))
    }

    pub fn pointwise_conv1d(&mut self, x: VarId, w: VarId, bias: Option<VarId>) -> Result<VarId> {
        let (y, macs) = pointwise_impl(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        self.add_macs(macs);
        let mut parents = vec![x, w];
        Self::with_bias(&mut parents, bias);
        let rule = PointwiseRule {
            has_bias: bias.is_some(),
        };
        Ok(self.record(y, parents, Box::new(rule)))
    }

    pub fn batch_norm(
        &mut self,
        x: VarId,
        norm: NormVars,
        mode: Mode,
        running: &RunningStats,
    ) -> Result<(VarId, Option<BatchStats>)> {
        let out = batch_norm_impl(
            self.value(x),
            self.value(norm.gamma),
            self.value(norm.beta),
            mode,
            running,
            BN_EPS,
        )?;
        let rule = BatchNormRule {
            xhat: out.xhat,
            inv_std: out.inv_std,
            mode,
        };
        let id = self.record(out.y, vec![x, norm.gamma, norm.beta], Box::new(rule));
        Ok((id, out.stats))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = relu_forward(self.value(x));
        self.record(y, vec![x], Box::new(ReluRule))
    }

    pub fn avg_pool1d(&mut self, x: VarId, window: usize, stride: usize) -> Result<VarId> {
        let y = avg_pool1d_forward(self.value(x), window, stride)?;
        Ok(self.record(y, vec![x], Box::new(AvgPoolRule { window, stride })))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let y = global_avg_pool_forward(self.value(x))?;
        Ok(self.record(y, vec![x], Box::new(GlobalAvgPoolRule)))
    }

    pub fn dense(&mut self, x: VarId, w: VarId, bias: Option<VarId>) -> Result<VarId> {
        let (y, macs) = dense_impl(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        self.add_macs(macs);
        let mut parents = vec![x, w];
        Self::with_bias(&mut parents, bias);
        let rule = DenseRule {
            has_bias: bias.is_some(),
        };
        Ok(self.record(y, parents, Box::new(rule)))
    }

    pub fn softmax2(&mut self, x: VarId) -> Result<VarId> {
        let y = softmax2(self.value(x))?;
        Ok(self.record(y.clone(), vec![x], Box::new(SoftmaxRule { y })))
    }

    /// Fused log-softmax + negative log-likelihood, averaged over the batch.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let lv = self.value(logits);
        let loss = cross_entropy(lv, labels)?;
        let probs = softmax_rows(lv)?;
        let rule = CrossEntropyRule {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.record(Tensor::scalar(loss), vec![logits], Box::new(rule)))
    }

    fn norm_act(
        &mut self,
        x: VarId,
        norm: NormVars,
        placement: NormPlacement,
        mode: Mode,
        running: &RunningStats,
    ) -> Result<(VarId, Option<BatchStats>)> {
        match placement {
            NormPlacement::BeforeActivation => {
                let (h, s) = self.batch_norm(x, norm, mode, running)?;
                Ok((self.relu(h), s))
            }
            NormPlacement::AfterActivation => {
                let h = self.relu(x);
                self.batch_norm(h, norm, mode, running)
            }
        }
    }

    /// Runs an SDSC block: depthwise conv, norm/activation, pointwise conv,
    /// norm/activation, plus the identity skip for residual blocks.
    pub fn sdsc_block(
        &mut self,
        x: VarId,
        spec: &SdscBlockSpec,
        vars: &SdscVars,
        mode: Mode,
        running: [&RunningStats; 2],
    ) -> Result<BlockOutput> {
        spec.validate()?;
        let h = self.depthwise_conv1d(x, vars.dw_weight, Some(vars.dw_bias), &spec.depthwise())?;
        let (h, s1) = self.norm_act(h, vars.norm1, spec.norm, mode, running[0])?;
        let h = self.pointwise_conv1d(h, vars.pw_weight, Some(vars.pw_bias))?;
        let (act, s2) = self.norm_act(h, vars.norm2, spec.norm, mode, running[1])?;
        let out = match spec.kind {
            BlockKind::Standard => act,
            BlockKind::Residual => self.add(x, act)?,
        };
        Ok(BlockOutput {
            out,
            activation: act,
            stats: [s1, s2],
        })
    }
}
