//! Dataset manifests, Adam, the training loop and detection metrics.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{classify, SeqNetModel, MALICIOUS, NUM_CLASSES};
use crate::parallel;
use crate::preprocess::{preprocess, Label, RawSample};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub digest: String,
}

/// One split of a dataset: `path<TAB>label<TAB>digest` per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { split, entries };
        m.validate(Path::new("<memory>"))?;
        Ok(m)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let err = |reason: String| Error::Manifest {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            if e.label == Label::Unknown {
                return Err(err("label must be benign or malicious".into()));
            }
            if !seen.insert(e.digest.as_str()) {
                return Err(err(format!("duplicate digest {}", e.digest)));
            }
        }
        Ok(())
    }

    /// Parses a manifest; relative paths resolve against the manifest's
    /// directory.
    pub fn read(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [p, label, digest] = fields[..] else {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            };
            let label: Label = label.parse().map_err(err)?;
            if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(err(format!("digest {digest:?} is not 64 hex digits")));
            }
            let p = PathBuf::from(p);
            entries.push(ManifestEntry {
                path: if p.is_absolute() { p } else { base.join(p) },
                label,
                digest: digest.to_ascii_lowercase(),
            });
        }
        let m = DatasetManifest { split, entries };
        m.validate(path)?;
        Ok(m)
    }

    /// Writes the manifest with paths relative to `root` where possible.
    pub fn write(&self, path: &Path, root: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(root).unwrap_or(&e.path);
            out.push_str(&format!("{}\t{}\t{}\n", p.display(), e.label, e.digest));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Errors when any digest appears in both manifests.
    pub fn check_disjoint(&self, other: &DatasetManifest) -> Result<()> {
        let ours: HashSet<&str> = self.entries.iter().map(|e| e.digest.as_str()).collect();
        if let Some((i, e)) = other
            .entries
            .iter()
            .enumerate()
            .find(|(_, e)| ours.contains(e.digest.as_str()))
        {
            return Err(Error::Manifest {
                path: e.path.clone(),
                line: i + 1,
                reason: format!("digest {} appears in both splits", e.digest),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Preprocessed datasets

/// Preprocessed sequences with their class indices.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub digests: Vec<String>,
    pub target_length: usize,
    /// Entries that could not be read.
    pub skipped: Vec<PathBuf>,
}

impl Dataset {
    /// Reads and preprocesses every entry. Unreadable files are skipped with
    /// a warning and listed in `skipped`.
    pub fn load(manifest: &DatasetManifest, target_length: usize) -> Result<Self> {
        let loaded = parallel::map(&manifest.entries, |e| {
            RawSample::read(&e.path, e.label).and_then(|s| preprocess(&s, target_length))
        });
        let mut ds = Dataset {
            target_length,
            ..Default::default()
        };
        for (e, r) in manifest.entries.iter().zip(loaded) {
            match r {
                Ok(seq) => {
                    ds.inputs.push(seq.values);
                    ds.labels.push(e.label.class_index().expect("validated label"));
                    ds.digests.push(e.digest.clone());
                }
                Err(err) => {
                    log::warn!("skipping {}: {err}", e.path.display());
                    ds.skipped.push(e.path.clone());
                }
            }
        }
        if !ds.skipped.is_empty() {
            log::warn!("{} of {} files skipped", ds.skipped.len(), manifest.entries.len());
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Stacks the selected samples into `[batch, 1, length]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.target_length);
        for &i in idx {
            data.extend_from_slice(&self.inputs[i]);
        }
        let x = Tensor::new(vec![idx.len(), 1, self.target_length], data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
            .unzip();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_shape(g, "adam_step")?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let mut degenerate = Vec::new();
        let mut ratio = |name: &str, num: u64, den: u64| {
            if den == 0 {
                log::warn!("{name}: zero denominator, reporting 0");
                degenerate.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio("precision", tp, tp + fp);
        let recall = ratio("recall", tp, tp + fn_);
        let accuracy = ratio("accuracy", tp + tn, tp + fp + fn_ + tn);
        let f1 = if precision + recall == 0.0 {
            degenerate.push("f1".into());
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricsReport {
            tp,
            fp,
            fn_,
            tn,
            accuracy,
            precision,
            recall,
            f1,
            loss: 0.0,
            degenerate,
        }
    }

    /// Confusion counts from malicious probabilities and class labels.
    pub fn from_predictions(prob_malicious: &[f64], labels: &[usize]) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &y) in prob_malicious.iter().zip(labels) {
            let predicted = classify(p) == Label::Malicious;
            match (predicted, y == MALICIOUS) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        MetricsReport::from_counts(tp, fp, fn_, tn)
    }
}

/// Eval-mode probabilities and mean cross-entropy over a dataset.
pub fn evaluate(model: &SeqNetModel, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    parallel::tune_allocator();
    const CHUNK: usize = 16;
    let batches: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let per_batch = parallel::map(&batches, |idx| -> Result<(Vec<f64>, f64)> {
        let (x, y) = data.batch(idx)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let f = model.forward_graph(&mut g, xv, Mode::Eval, false)?;
        let loss = crate::layers::cross_entropy(g.value(f.logits), &y)?;
        let p = g.value(f.probs).data().chunks_exact(NUM_CLASSES).map(|r| r[MALICIOUS]).collect();
        Ok((p, loss * idx.len() as f64))
    });
    let mut probs = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for r in per_batch {
        let (p, l) = r?;
        probs.extend(p);
        loss += l;
    }
    let mut report = MetricsReport::from_predictions(&probs, &data.labels);
    report.loss = loss / data.len() as f64;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be ≥ 1".into()));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: MetricsReport,
    pub seconds: f64,
}

/// Forward, loss, backward on one batch; returns the loss and the gradient
/// of every parameter. Running statistics are folded in when `update_stats`.
pub fn train_batch(
    model: &mut SeqNetModel,
    x: Tensor,
    labels: &[usize],
    update_stats: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let fwd = model.forward_graph(&mut g, xv, Mode::Train, true)?;
    let loss = g.cross_entropy(fwd.logits, labels)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    g.backward(loss)?;
    let grads = fwd.params.iter().map(|&p| g.grad_or_zeros(p)).collect();
    if update_stats {
        model.update_running_stats(&fwd);
    }
    Ok((value, grads))
}

/// Runs `config.epochs` epochs of shuffled mini-batch Adam over `train`,
/// evaluating on `validation` after each epoch. The model ends in eval mode.
///
/// A zero learning rate freezes the model entirely, batch-norm running
/// statistics included.
pub fn train<F>(
    model: &mut SeqNetModel,
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>>
where
    F: FnMut(&EpochReport),
{
    config.validate()?;
    parallel::tune_allocator();
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let frozen = config.adam.learning_rate == 0.0;
    let mut state = AdamState::new(model.params().iter().map(|p| &p.tensor));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = std::time::Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        model.mode = Mode::Train;
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let (x, y) = train.batch(idx)?;
            let (loss, grads) = train_batch(model, x, &y, !frozen)?;
            loss_sum += loss * idx.len() as f64;
            if !frozen {
                let mut params: Vec<&mut Tensor> =
                    model.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
                adam_step(&mut params, &grads, &mut state, &config.adam)?;
            }
        }
        model.mode = Mode::Eval;
        let validation = if validation.is_empty() {
            MetricsReport::default()
        } else {
            evaluate(model, validation)?
        };
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    model.mode = Mode::Eval;
    Ok(reports)
}

/// Per-epoch CSV: `epoch,train_loss,val_loss,accuracy,precision,recall,f1,tp,fp,fn,tn`.
pub fn write_epoch_csv<W: Write>(reports: &[EpochReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "epoch", "train_loss", "val_loss", "accuracy", "precision", "recall", "f1", "tp", "fp",
        "fn", "tn",
    ])?;
    for r in reports {
        let v = &r.validation;
        out.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            v.loss.to_string(),
            v.accuracy.to_string(),
            v.precision.to_string(),
            v.recall.to_string(),
            v.f1.to_string(),
            v.tp.to_string(),
            v.fp.to_string(),
            v.fn_.to_string(),
            v.tn.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("csv", e))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Mean and standard deviation of validation metrics over the final epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub epochs_averaged: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

/// Summarizes the last `last_n` epochs (all epochs when fewer exist).
pub fn summarize_last(reports: &[EpochReport], last_n: usize) -> Result<MetricsSummary> {
    if reports.is_empty() {
        return Err(Error::Empty("epoch list"));
    }
    let tail = &reports[reports.len().saturating_sub(last_n.max(1))..];
    let pick = |f: fn(&MetricsReport) -> f64| -> MeanStd {
        MeanStd::of(&tail.iter().map(|r| f(&r.validation)).collect::<Vec<_>>())
    };
    Ok(MetricsSummary {
        epochs_averaged: tail.len(),
        accuracy: pick(|m| m.accuracy),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        f1: pick(|m| m.f1),
    })
}
