//! The SeqNet architecture: a `k=3` stem convolution, downsampling stages of
//! standard SDSC blocks each followed by average pooling, a trunk of residual
//! SDSC blocks, global average pooling, one dense layer and a two-way
//! softmax.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, VarId};
use crate::error::{Error, Result};
use crate::layers::{
    BatchStats, BlockKind, Conv1dSpec, Mode, NormVars, RunningStats, SdscBlockSpec, SdscVars,
    BN_MOMENTUM,
};
use crate::preprocess::DEFAULT_TARGET_LENGTH;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const BENIGN: usize = 0;
pub const MALICIOUS: usize = 1;

/// One downsampling stage: a standard SDSC block then average pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block: SdscBlockSpec,
    pub pool_window: usize,
    pub pool_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_length: usize,
    pub stem: Conv1dSpec,
    pub stages: Vec<StageSpec>,
    pub trunk_blocks: usize,
    pub trunk_channels: usize,
}

impl Default for ModelSpec {
    /// Stem 1→16, stages 16→32→64→128→128 pooled by 32, 8, 4, 4
    /// (2^18 → 64 positions), five residual blocks at 128 channels.
    fn default() -> Self {
        ModelSpec::seqnet(DEFAULT_TARGET_LENGTH, [16, 32, 64, 128, 128], [32, 8, 4, 4], 5)
            .expect("default spec is valid")
    }
}

impl ModelSpec {
    /// Builds the SeqNet layout from a channel progression
    /// (stem output, then each stage's output) and per-stage pool windows.
    /// The trunk runs at the last channel count.
    pub fn seqnet(
        input_length: usize,
        channels: [usize; 5],
        pools: [usize; 4],
        trunk_blocks: usize,
    ) -> Result<Self> {
        let stages = (0..4)
            .map(|i| {
                Ok(StageSpec {
                    block: SdscBlockSpec::new(BlockKind::Standard, channels[i], channels[i + 1])?,
                    pool_window: pools[i],
                    pool_stride: pools[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            input_length,
            stem: Conv1dSpec::same(1, channels[0], 3),
            stages,
            trunk_blocks,
            trunk_channels: channels[4],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale variant: 2^14 inputs pooled by 8, 4, 4, 2 down to 64
    /// positions, same channels and trunk as the default.
    pub fn desk() -> Self {
        ModelSpec::seqnet(1 << 14, [16, 32, 64, 128, 128], [8, 4, 4, 2], 5).expect("valid")
    }

    /// Small geometry for gradient checks: 512 inputs, channels halved.
    pub fn toy() -> Self {
        ModelSpec::seqnet(512, [8, 16, 32, 64, 64], [4, 2, 2, 2], 5).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.input_length == 0 {
            return bad("input_length must be positive".into());
        }
        if self.stem.in_channels != 1 {
            return bad(format!("stem must read 1 channel, got {}", self.stem.in_channels));
        }
        if self.stem.kernel != 3 {
            return bad(format!("stem kernel length must be 3, got {}", self.stem.kernel));
        }
        let mut channels = self.stem.out_channels;
        let mut length = self
            .stem
            .output_length(self.input_length)
            .map_err(|e| Error::InvalidSpec(format!("stem: {e}")))?;
        for (i, st) in self.stages.iter().enumerate() {
            st.block.validate()?;
            if st.block.kind != BlockKind::Standard {
                return bad(format!("stage {} must be a standard SDSC block", i + 1));
            }
            if st.block.in_channels != channels {
                return bad(format!(
                    "stage {} expects {} channels, previous layer yields {channels}",
                    i + 1,
                    st.block.in_channels
                ));
            }
            if st.pool_window == 0 || st.pool_stride == 0 {
                return bad(format!("stage {} pool window/stride must be positive", i + 1));
            }
            if st.pool_window > length {
                return bad(format!(
                    "stage {} pool window {} exceeds length {length}",
                    i + 1,
                    st.pool_window
                ));
            }
            length = (length - st.pool_window) / st.pool_stride + 1;
            channels = st.block.out_channels;
        }
        if channels != self.trunk_channels {
            return bad(format!(
                "trunk expects {} channels, stages yield {channels}",
                self.trunk_channels
            ));
        }
        Ok(())
    }

    /// Feature length after each stage's pooling, starting from the stem.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut l = self.stem.output_length(self.input_length).unwrap_or(0);
        let mut out = vec![l];
        for st in &self.stages {
            l = (l - st.pool_window) / st.pool_stride + 1;
            out.push(l);
        }
        out
    }

    pub fn trunk_spec(&self) -> SdscBlockSpec {
        SdscBlockSpec::new(BlockKind::Residual, self.trunk_channels, self.trunk_channels)
            .expect("square residual block")
    }

    /// Tags of every convolution+activation stage, stem first.
    pub fn layer_tags(&self) -> Vec<String> {
        let mut tags = vec!["stem".to_string()];
        tags.extend((1..=self.stages.len()).map(|i| format!("stage{i}")));
        tags.extend((1..=self.trunk_blocks).map(|i| format!("res{i}")));
        tags
    }

    /// Feature length seen by the activation tagged `tag`.
    pub fn layer_length(&self, tag: &str) -> Result<usize> {
        let lengths = self.stage_lengths();
        let idx = self
            .layer_tags()
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::UnknownLayer(tag.into()))?;
        Ok(if idx <= self.stages.len() {
            // stem output and stage activations are measured before pooling
            lengths[idx.saturating_sub(1)]
        } else {
            *lengths.last().unwrap()
        })
    }
}

/// Strict 50% decision rule: malicious iff `p > 0.5`.
pub fn classify(prob_malicious: f64) -> crate::preprocess::Label {
    if prob_malicious > 0.5 {
        crate::preprocess::Label::Malicious
    } else {
        crate::preprocess::Label::Benign
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats {
    pub name: String,
    pub stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqNetModel {
    spec: ModelSpec,
    params: Vec<NamedTensor>,
    norms: Vec<NamedStats>,
    pub mode: Mode,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: VarId,
    pub logits: VarId,
    pub probs: VarId,
    /// One handle per parameter, in [`SeqNetModel::params`] order.
    pub params: Vec<VarId>,
    /// Activation of every convolution stage, keyed by layer tag.
    pub activations: Vec<(String, VarId)>,
    /// Batch statistics per normalization layer (train mode only).
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl Forward {
    pub fn activation(&self, tag: &str) -> Result<VarId> {
        self.activations
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownLayer(tag.into()))
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<NamedTensor>,
    norms: Vec<NamedStats>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let tensor = Tensor::new(shape.to_vec(), data).expect("shape");
        self.params.push(NamedTensor { name, tensor });
    }

    fn fill(&mut self, name: String, n: usize, v: f64) {
        self.params.push(NamedTensor {
            name,
            tensor: Tensor::full(&[n], v),
        });
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.fill(format!("{prefix}.gamma"), c, 1.0);
        self.fill(format!("{prefix}.beta"), c, 0.0);
        self.norms.push(NamedStats {
            name: prefix.to_string(),
            stats: RunningStats::new(c),
        });
    }

    fn block(&mut self, prefix: &str, spec: &SdscBlockSpec) {
        let (c, co, k) = (spec.in_channels, spec.out_channels, spec.kernel);
        self.uniform(format!("{prefix}.dw.weight"), &[c, k], k);
        self.fill(format!("{prefix}.dw.bias"), c, 0.0);
        self.norm(&format!("{prefix}.bn1"), c);
        self.uniform(format!("{prefix}.pw.weight"), &[co, c], c);
        self.fill(format!("{prefix}.pw.bias"), co, 0.0);
        self.norm(&format!("{prefix}.bn2"), co);
    }
}

impl SeqNetModel {
    /// Instantiates parameters: fan-in-scaled uniform weights, zero biases,
    /// unit/zero batch-norm affine terms. Deterministic in `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            params: Vec::new(),
            norms: Vec::new(),
        };
        let stem = spec.stem;
        init.uniform(
            "stem.weight".into(),
            &stem.weight_shape(),
            stem.in_channels * stem.kernel,
        );
        if stem.bias {
            init.fill("stem.bias".into(), stem.out_channels, 0.0);
        }
        init.norm("stem.bn", stem.out_channels);
        for (i, st) in spec.stages.iter().enumerate() {
            init.block(&format!("stage{}", i + 1), &st.block);
        }
        let trunk = spec.trunk_spec();
        for i in 0..spec.trunk_blocks {
            init.block(&format!("res{}", i + 1), &trunk);
        }
        init.uniform(
            "head.weight".into(),
            &[NUM_CLASSES, spec.trunk_channels],
            spec.trunk_channels,
        );
        init.fill("head.bias".into(), NUM_CLASSES, 0.0);
        let (params, norms) = (init.params, init.norms);
        Ok(SeqNetModel {
            spec,
            params,
            norms,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NamedStats] {
        &self.norms
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records a forward pass of `x` (`[batch, 1, input_length]`, already
    /// on `g`). Parameters are recorded as leaves that require gradients when
    /// `param_grads` is set.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: VarId,
        mode: Mode,
        param_grads: bool,
    ) -> Result<Forward> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.spec.input_length {
            return Err(Error::InvalidShape {
                op: "seqnet forward",
                shape,
                reason: format!("expected [batch, 1, {}]", self.spec.input_length),
            });
        }
        let params: Vec<VarId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), param_grads))
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter layout");
        let mut norms = self.norms.iter().map(|n| &n.stats);
        let mut batch_stats = Vec::with_capacity(self.norms.len());
        let mut activations = Vec::new();

        let stem = self.spec.stem;
        let w = take();
        let b = stem.bias.then(&mut take);
        let h = g.conv1d(x, w, b, &stem)?;
        let norm = NormVars {
            gamma: take(),
            beta: take(),
        };
        let (h, s) = g.batch_norm(h, norm, mode, norms.next().unwrap())?;
        batch_stats.push(s);
        let mut h = g.relu(h);
        activations.push(("stem".to_string(), h));

        let block_vars = |take: &mut dyn FnMut() -> VarId| SdscVars {
            dw_weight: take(),
            dw_bias: take(),
            norm1: NormVars {
                gamma: take(),
                beta: take(),
            },
            pw_weight: take(),
            pw_bias: take(),
            norm2: NormVars {
                gamma: take(),
                beta: take(),
            },
        };

        for (i, st) in self.spec.stages.iter().enumerate() {
            let vars = block_vars(&mut take);
            let running = [norms.next().unwrap(), norms.next().unwrap()];
            let out = g.sdsc_block(h, &st.block, &vars, mode, running)?;
            batch_stats.extend(out.stats);
            activations.push((format!("stage{}", i + 1), out.out));
            h = g.avg_pool1d(out.out, st.pool_window, st.pool_stride)?;
        }
        let trunk = self.spec.trunk_spec();
        for i in 0..self.spec.trunk_blocks {
            let vars = block_vars(&mut take);
            let running = [norms.next().unwrap(), norms.next().unwrap()];
            let out = g.sdsc_block(h, &trunk, &vars, mode, running)?;
            batch_stats.extend(out.stats);
            activations.push((format!("res{}", i + 1), out.out));
            h = out.out;
        }
        let pooled = g.global_avg_pool(h)?;
        let (w, b) = (take(), take());
        let logits = g.dense(pooled, w, Some(b))?;
        let probs = g.softmax2(logits)?;
        Ok(Forward {
            input: x,
            logits,
            probs,
            params,
            activations,
            batch_stats,
        })
    }

    /// Class probabilities `[batch, 2]` in the model's current mode, without
    /// recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward_graph(&mut g, xv, self.mode, false)?;
        Ok(g.value(f.probs).clone())
    }

    /// Malicious-class probability of each row of `x`.
    pub fn predict_malicious(&self, x: &Tensor) -> Result<Vec<f64>> {
        let p = self.predict(x)?;
        Ok(p.data().chunks_exact(NUM_CLASSES).map(|r| r[MALICIOUS]).collect())
    }

    /// Folds the batch statistics of a train-mode pass into the running stats.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        for (n, s) in self.norms.iter_mut().zip(&fwd.batch_stats) {
            if let Some(s) = s {
                n.stats.update(s, BN_MOMENTUM);
            }
        }
    }

    // Container format:
    //   magic "SEQNETMD", u32 version, u32 mode,
    //   u64 spec length + spec JSON,
    //   u32 tensor count, then per tensor:
    //     u32 name length + name, u32 rank, u64 dims…, f64 values…
    // All integers and floats little-endian. Running statistics are stored
    // as `<norm>.running_mean` / `<norm>.running_var` tensors.

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let mode: u32 = if self.mode == Mode::Train { 1 } else { 0 };
        out.extend_from_slice(&mode.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec)?;
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        out.extend_from_slice(&spec);
        let count = self.params.len() + 2 * self.norms.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut put = |name: &str, t: &Tensor| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            put(&p.name, &p.tensor);
        }
        for n in &self.norms {
            let c = n.stats.mean.len();
            put(
                &format!("{}.running_mean", n.name),
                &Tensor::new(vec![c], n.stats.mean.clone())?,
            );
            put(
                &format!("{}.running_var", n.name),
                &Tensor::new(vec![c], n.stats.var.clone())?,
            );
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mode = match r.u32()? {
            0 => Mode::Eval,
            1 => Mode::Train,
            m => return Err(Error::Format(format!("bad mode {m}"))),
        };
        let spec_len = r.u64()? as usize;
        let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| Error::Format(format!("spec: {e}")))?;
        let mut model = SeqNetModel::build(spec, 0)?;
        model.mode = mode;
        let count = r.u32()? as usize;
        if count != model.params.len() + 2 * model.norms.len() {
            return Err(Error::Format(format!("expected {} tensors, file has {count}", model.params.len() + 2 * model.norms.len())));
        }
        let mut read_into = |want_name: &str, want_shape: &[usize]| -> Result<Vec<f64>> {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("tensor name not UTF-8".into()))?
                .to_string();
            if name != want_name {
                return Err(Error::Format(format!("expected tensor {want_name}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            if shape != want_shape {
                return Err(Error::Format(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        for p in &mut model.params {
            let data = read_into(&p.name, p.tensor.shape())?;
            p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?;
        }
        for n in &mut model.norms {
            let c = n.stats.mean.len();
            n.stats.mean = read_into(&format!("{}.running_mean", n.name), &[c])?;
            n.stats.var = read_into(&format!("{}.running_var", n.name), &[c])?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        SeqNetModel::from_bytes(&bytes)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SEQNETMD";
const MODEL_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Label;

    #[test]
    fn classify_threshold() {
        assert_eq!(classify(0.51), Label::Malicious);
        assert_eq!(classify(0.5), Label::Benign);
        assert_eq!(classify(0.0), Label::Benign);
        assert_eq!(classify(1.0), Label::Malicious);
    }

    #[test]
    fn spec_invariants() {
        let spec = ModelSpec::default();
        assert_eq!(spec.stem.kernel, 3);
        assert_eq!(spec.trunk_blocks, 5);
        assert_eq!(spec.trunk_channels, 128);
        assert_eq!(spec.stage_lengths(), vec![1 << 18, 1 << 13, 1 << 10, 256, 64]);

        let mut bad = spec.clone();
        bad.stem.kernel = 5;
        assert!(bad.validate().unwrap_err().to_string().contains("kernel length must be 3"));

        let mut bad = spec.clone();
        bad.trunk_channels = 64;
        assert!(bad.validate().is_err());

        let mut bad = spec.clone();
        bad.input_length = 100;
        assert!(bad.validate().unwrap_err().to_string().contains("pool window"));
    }

    #[test]
    fn build_is_deterministic() {
        let a = SeqNetModel::build(ModelSpec::toy(), 7).unwrap();
        let b = SeqNetModel::build(ModelSpec::toy(), 7).unwrap();
        let c = SeqNetModel::build(ModelSpec::toy(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let m = SeqNetModel::build(ModelSpec::toy(), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 1, 100])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 2, 512])).is_err());
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let m = SeqNetModel::build(ModelSpec::toy(), 1).unwrap();
        let row: Vec<f64> = (0..512).map(|i| ((i * 31 % 255) as f64) / 127.5 - 1.0).collect();
        let x = Tensor::new(vec![3, 1, 512], [row.clone(), row.clone(), row].concat()).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.data()[0..2], p.data()[2..4]);
        assert_eq!(p.data()[0..2], p.data()[4..6]);
        for r in p.data().chunks(2) {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_lengths() {
        let spec = ModelSpec::default();
        assert_eq!(spec.layer_tags().len(), 10);
        assert_eq!(spec.layer_length("stem").unwrap(), 1 << 18);
        assert_eq!(spec.layer_length("stage1").unwrap(), 1 << 18);
        assert_eq!(spec.layer_length("stage2").unwrap(), 1 << 13);
        assert_eq!(spec.layer_length("res5").unwrap(), 64);
        assert!(spec.layer_length("fc").is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = SeqNetModel::build(ModelSpec::toy(), 3).unwrap();
        m.save(&p).unwrap();
        let loaded = SeqNetModel::load(&p).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.to_bytes().unwrap(), fs::read(&p).unwrap());

        let x = Tensor::full(&[1, 1, 512], 0.3);
        assert_eq!(m.predict(&x).unwrap(), loaded.predict(&x).unwrap());
    }

    #[test]
    fn load_rejects_corruption() {
        let m = SeqNetModel::build(ModelSpec::toy(), 3).unwrap();
        let bytes = m.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SeqNetModel::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(SeqNetModel::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let truncated = &bytes[..bytes.len() - 5];
        assert!(SeqNetModel::from_bytes(truncated).unwrap_err().to_string().contains("truncated"));
    }
}
