//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints its verdict line and the checks run one after another.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqnet_core::adversarial::{attack, score_bytes, AttackConfig, STEP};
use seqnet_core::autodiff::{finite_difference_check, value_and_grad};
use seqnet_core::cost::{count_params, cal_common, cal_dsc, cal_sdsc, dsc_ratio, empirical_cost, sdsc_ratio, CostRow, LayerKind, REFERENCE_MFLOPS};
use seqnet_core::explain::{grad_cam, normalize_snippet, DEFAULT_LAYER};
use seqnet_core::layers::{
    BlockKind, Conv1dSpec, DepthwiseConv1dSpec, Mode, NormVars, RunningStats, SdscBlockSpec, SdscVars,
};
use seqnet_core::model::{ModelSpec, SeqNetModel, MALICIOUS};
use seqnet_core::preprocess::{preprocess_bytes, resample_adjoint, resample_linear, Label, RawSample};
use seqnet_core::synth::{read_truth, write_corpus, SyntheticCorpusConfig, TruthRow};
use seqnet_core::train::{evaluate, train, train_batch, Dataset, MetricsReport, TrainConfig};
use seqnet_core::{Graph, Result, Tensor, VarId};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random weighted sum, so upstream gradients are not uniform.
fn probe(g: &mut Graph, y: VarId, seed: u64) -> Result<VarId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------

fn layer_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let stride = 1 + seed as usize % 2;

    let x = rand_tensor(&mut rng, &[2, 2, 9]);
    let w = rand_tensor(&mut rng, &[3, 2, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let spec = Conv1dSpec { stride, ..Conv1dSpec::same(2, 3, 3) };
    let (w2, b2) = (w.clone(), b.clone());
    out.push(("conv1d", finite_difference_check(move |g, x| {
        let (w, b) = (g.constant(w2.clone()), g.constant(b2.clone()));
        let y = g.conv1d(x, w, Some(b), &spec)?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));
    let x2 = x.clone();
    out.push(("conv1d weight", finite_difference_check(move |g, w| {
        let (x, b) = (g.constant(x2.clone()), g.constant(b.clone()));
        let y = g.conv1d(x, w, Some(b), &spec)?;
        probe(g, y, seed)
    }, &w, FD_STEP).unwrap()));

    let x = rand_tensor(&mut rng, &[2, 3, 9]);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let dspec = DepthwiseConv1dSpec { stride, ..DepthwiseConv1dSpec::same(3, 3) };
    let w2 = w.clone();
    out.push(("depthwise", finite_difference_check(move |g, x| {
        let w = g.constant(w2.clone());
        let y = g.depthwise_conv1d(x, w, None, &dspec)?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));
    let x2 = x.clone();
    out.push(("depthwise weight", finite_difference_check(move |g, w| {
        let x = g.constant(x2.clone());
        let y = g.depthwise_conv1d(x, w, None, &dspec)?;
        probe(g, y, seed)
    }, &w, FD_STEP).unwrap()));

    let x = rand_tensor(&mut rng, &[2, 3, 6]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let w2 = w.clone();
    out.push(("pointwise", finite_difference_check(move |g, x| {
        let w = g.constant(w2.clone());
        let y = g.pointwise_conv1d(x, w, None)?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));
    let x2 = x.clone();
    out.push(("pointwise weight", finite_difference_check(move |g, w| {
        let x = g.constant(x2.clone());
        let y = g.pointwise_conv1d(x, w, None)?;
        probe(g, y, seed)
    }, &w, FD_STEP).unwrap()));

    for (name, mode) in [("batch_norm train", Mode::Train), ("batch_norm eval", Mode::Eval)] {
        let x = rand_tensor(&mut rng, &[2, 3, 5]);
        let gb = rand_tensor(&mut rng, &[6]);
        let rs = RunningStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        let (rs2, gb2) = (rs.clone(), gb.clone());
        out.push((name, finite_difference_check(move |g, x| {
            let gb = g.constant(gb2.clone());
            let norm = NormVars { gamma: g.slice(gb, 0, 3)?, beta: g.slice(gb, 3, 6)? };
            let (y, _) = g.batch_norm(x, norm, mode, &rs2)?;
            probe(g, y, seed)
        }, &x, FD_STEP).unwrap()));
        out.push((name, finite_difference_check(move |g, gb| {
            let x = g.constant(x.clone());
            let norm = NormVars { gamma: g.slice(gb, 0, 3)?, beta: g.slice(gb, 3, 6)? };
            let (y, _) = g.batch_norm(x, norm, mode, &rs)?;
            probe(g, y, seed)
        }, &gb, FD_STEP).unwrap()));
    }

    let mut x = rand_tensor(&mut rng, &[1, 2, 8]);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    out.push(("relu", finite_difference_check(|g, x| {
        let y = g.relu(x);
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));

    let x = rand_tensor(&mut rng, &[2, 2, 12]);
    let (win, s) = (2 + seed as usize % 3, 1 + seed as usize % 4);
    out.push(("avg_pool1d", finite_difference_check(|g, x| {
        let y = g.avg_pool1d(x, win, s)?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));
    out.push(("global_avg_pool", finite_difference_check(|g, x| {
        let y = g.global_avg_pool(x)?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));

    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[2, 4]);
    let b = rand_tensor(&mut rng, &[2]);
    let (w2, b2) = (w.clone(), b.clone());
    out.push(("dense", finite_difference_check(move |g, x| {
        let (w, b) = (g.constant(w2.clone()), g.constant(b2.clone()));
        let y = g.dense(x, w, Some(b))?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));
    out.push(("dense weight", finite_difference_check(move |g, w| {
        let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.dense(x, w, Some(b))?;
        probe(g, y, seed)
    }, &w, FD_STEP).unwrap()));

    let x = rand_tensor(&mut rng, &[3, 2]);
    out.push(("softmax", finite_difference_check(|g, x| {
        let y = g.softmax2(x)?;
        probe(g, y, seed)
    }, &x, FD_STEP).unwrap()));
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
    out.push(("cross_entropy", finite_difference_check(|g, x| g.cross_entropy(x, &labels), &x, FD_STEP).unwrap()));

    for (name, kind) in [("sdsc standard", BlockKind::Standard), ("sdsc residual", BlockKind::Residual)] {
        let spec = SdscBlockSpec::new(kind, 3, 3).unwrap();
        let x = rand_tensor(&mut rng, &[2, 3, 10]);
        let p: Vec<Tensor> = [vec![3, 3], vec![3], vec![3, 3], vec![3], vec![6], vec![6]]
            .iter()
            .map(|s| rand_tensor(&mut rng, s))
            .collect();
        let rs = RunningStats::new(3);
        out.push((name, finite_difference_check(|g, x| {
            let c: Vec<VarId> = p.iter().map(|t| g.constant(t.clone())).collect();
            let vars = SdscVars {
                dw_weight: c[0],
                dw_bias: c[1],
                norm1: NormVars { gamma: g.slice(c[4], 0, 3)?, beta: g.slice(c[4], 3, 6)? },
                pw_weight: c[2],
                pw_bias: c[3],
                norm2: NormVars { gamma: g.slice(c[5], 0, 3)?, beta: g.slice(c[5], 3, 6)? },
            };
            let o = g.sdsc_block(x, &spec, &vars, Mode::Train, [&rs, &rs])?;
            probe(g, o.out, seed)
        }, &x, FD_STEP).unwrap()));
    }
    out
}

/// Relative error of the toy model's loss gradient on sampled input and
/// parameter coordinates.
/// Compares one analytic derivative against central differences of `loss`.
/// A perturbation of 1e-5 can push a ReLU pre-activation across zero. When the
/// estimates at h and h/10 disagree the loss is not smooth within the step, so
/// the step shrinks (down to 1e-7) before judging. Derivatives that are zero by
/// construction (biases feeding batch norm) only carry roundoff and pass under
/// an absolute floor. Returns the error and whether a smaller step was needed.
fn coord_error(analytic: f64, loss: &mut dyn FnMut(f64) -> f64) -> (f64, bool) {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
    let mut fd = |h: f64| (loss(h) - loss(-h)) / (2.0 * h);
    let mut h = FD_STEP;
    let mut n = fd(h);
    if analytic.abs().max(n.abs()) < 1e-9 {
        return (0.0, false);
    }
    loop {
        let e = rel(analytic, n);
        if e <= FD_TOL || h <= 1e-7 {
            return (e, h < FD_STEP);
        }
        let finer = fd(h / 10.0);
        if rel(n, finer) <= FD_TOL {
            return (e, h < FD_STEP);
        }
        h /= 10.0;
        n = finer;
    }
}

/// Worst error and number of kink fallbacks over 96 coordinates of the toy model.
fn model_error(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let model = SeqNetModel::build(ModelSpec::toy(), seed).unwrap();
    let x = rand_tensor(&mut rng, &[2, 1, 512]);
    let labels = vec![0, 1];
    let loss_of = |m: &SeqNetModel, x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = m.forward_graph(&mut g, xv, Mode::Train, false).unwrap();
        let l = g.cross_entropy(f.logits, &labels).unwrap();
        g.value(l).item().unwrap()
    };
    let (mut worst, mut kinks) = (0.0f64, 0);
    let mut record = |(e, kink): (f64, bool)| {
        worst = worst.max(e);
        kinks += kink as usize;
    };

    let f = |g: &mut Graph, xv: VarId| -> Result<VarId> {
        let fwd = model.forward_graph(g, xv, Mode::Train, false)?;
        g.cross_entropy(fwd.logits, &labels)
    };
    let (_, gx) = value_and_grad(&f, &x).unwrap();
    assert!(gx.is_finite());
    for _ in 0..48 {
        let c = rng.gen_range(0..1024);
        record(coord_error(gx.data()[c], &mut |h| {
            let mut xp = x.clone();
            xp.data_mut()[c] += h;
            loss_of(&model, &xp)
        }));
    }

    let mut m = model.clone();
    let (_, grads) = train_batch(&mut m, x.clone(), &labels, false).unwrap();
    for _ in 0..48 {
        let t = rng.gen_range(0..model.params().len());
        let i = rng.gen_range(0..model.params()[t].tensor.len());
        let orig = model.params()[t].tensor.data()[i];
        record(coord_error(grads[t].data()[i], &mut |h| {
            m.params_mut()[t].tensor.data_mut()[i] = orig + h;
            let l = loss_of(&m, &x);
            m.params_mut()[t].tensor.data_mut()[i] = orig;
            l
        }));
    }
    (worst, kinks)
}

fn gradient_correctness() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for seed in 0..SEEDS {
        for (name, e) in layer_errors(seed) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    let (mut model_worst, mut kinks) = (0.0f64, 0);
    for seed in 0..SEEDS {
        let (e, k) = model_error(seed);
        model_worst = model_worst.max(e);
        kinks += k;
    }
    worst.push(("toy seqnet", model_worst));
    let (name, max) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let total = 96 * SEEDS as usize;
    verdict(
        worst.iter().all(|(_, e)| *e <= FD_TOL) && kinks * 4 <= total,
        format!(
            "{} checks x {SEEDS} seeds, worst {max:.2e} ({name}); {kinks}/{total} toy coordinates non-smooth at step 1e-5",
            worst.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn cost_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for i in 0..50 {
        let n = rng.gen_range(4..40);
        let c = rng.gen_range(1..9);
        let c_out = rng.gen_range(1..9);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let b = rng.gen_range(1..3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[b, c, n]));
        let (kind, row_n) = match i % 5 {
            0 => {
                let w = g.constant(Tensor::zeros(&[c_out, c, k]));
                g.conv1d(x, w, None, &Conv1dSpec::same(c, c_out, k)).unwrap();
                (LayerKind::Conv, n)
            }
            1 => {
                let w = g.constant(Tensor::zeros(&[c, k]));
                g.depthwise_conv1d(x, w, None, &DepthwiseConv1dSpec::same(c, k)).unwrap();
                (LayerKind::Depthwise, n)
            }
            2 => {
                let w = g.constant(Tensor::zeros(&[c_out, c]));
                g.pointwise_conv1d(x, w, None).unwrap();
                (LayerKind::Pointwise, n)
            }
            3 => {
                let x = g.constant(Tensor::zeros(&[b, c]));
                let w = g.constant(Tensor::zeros(&[c_out, c]));
                g.dense(x, w, None).unwrap();
                (LayerKind::Dense, 1)
            }
            _ => {
                // whole block: depthwise then pointwise
                let dw = g.constant(Tensor::zeros(&[c, k]));
                let h = g.depthwise_conv1d(x, dw, None, &DepthwiseConv1dSpec::same(c, k)).unwrap();
                let pw = g.constant(Tensor::zeros(&[c_out, c]));
                g.pointwise_conv1d(h, pw, None).unwrap();
                if g.macs() != b as u64 * cal_sdsc(n as u64, c as u64, c_out as u64, k as u64) {
                    mismatches += 1;
                }
                continue;
            }
        };
        let row = CostRow {
            name: String::new(),
            kind,
            n: row_n as u64,
            c: c as u64,
            c_out: c_out as u64,
            k: k as u64,
            params: 0,
            macs: 0,
        };
        if g.macs() != b as u64 * row.analytic_macs() {
            mismatches += 1;
        }
    }
    let mut ratio_bad = 0;
    for k in 1..=8u64 {
        for c_out in 1..=256u64 {
            let (n, c) = (7, 5);
            if sdsc_ratio(n, c, c_out, k) != Ratio::new(1, c_out * k) + Ratio::new(1, k * k) {
                ratio_bad += 1;
            }
            if dsc_ratio(n, c, c_out, k) != Ratio::new(1, c_out) + Ratio::new(1, k * k) {
                ratio_bad += 1;
            }
            if cal_dsc(n, c, c_out, k) > cal_common(n, c, c_out, k) && k > 1 && c_out > 1 {
                ratio_bad += 1;
            }
        }
    }
    verdict(
        mismatches == 0 && ratio_bad == 0,
        format!("50 geometries, {mismatches} count mismatches; 2048 (k, c') pairs, {ratio_bad} ratio mismatches"),
    )
}

// ---------------------------------------------------------------------------

const GOLDEN_PARAMS: u64 = 117_666;

fn parameter_budget() -> Outcome {
    let spec = ModelSpec::default();
    let report = count_params(&spec);
    let model = SeqNetModel::build(spec, 0).unwrap();
    let total = report.total_params();
    verdict(
        total == GOLDEN_PARAMS && (110_000..=160_000).contains(&total) && total == model.param_count() as u64,
        format!("report {total}, instantiated {}, golden {GOLDEN_PARAMS}", model.param_count()),
    )
}

fn flops_magnitude() -> Outcome {
    let spec = ModelSpec::default();
    let model = SeqNetModel::build(spec.clone(), 0).unwrap();
    let counted = empirical_cost(&model, &Tensor::zeros(&[1, 1, spec.input_length])).unwrap();
    let mflops = counted as f64 / 1e6;
    let dev = (mflops - REFERENCE_MFLOPS) / REFERENCE_MFLOPS;
    verdict(
        dev.abs() <= 0.25 && counted == count_params(&spec).total_macs(),
        format!("{mflops:.2} MFlops counted ({:+.1}% against {REFERENCE_MFLOPS})", dev * 100.0),
    )
}

// ---------------------------------------------------------------------------

fn preprocessing_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_lin: f64 = 0.0;
    let mut worst_adj: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100 {
        let l = rng.gen_range(1..3000);
        let m = rng.gen_range(1..3000);
        let u: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        if resample_linear(&u, l).unwrap() != u {
            failures += 1;
        }
        let ru = resample_linear(&u, m).unwrap();
        let rv = resample_linear(&v, m).unwrap();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let rmix = resample_linear(&mix, m).unwrap();
        for j in 0..m {
            worst_lin = worst_lin.max((rmix[j] - (a * ru[j] + b * rv[j])).abs());
        }
        let (lo, hi) = u.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if ru.iter().any(|&r| r < lo || r > hi) {
            failures += 1;
        }
        let g: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jt = resample_adjoint(&g, l).unwrap();
        let lhs: f64 = ru.iter().zip(&g).map(|(x, y)| x * y).sum();
        let rhs: f64 = u.iter().zip(&jt).map(|(x, y)| x * y).sum();
        worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    verdict(
        failures == 0 && worst_lin <= 1e-12 && worst_adj <= 1e-12,
        format!("100 geometries, linearity {worst_lin:.1e}, adjoint {worst_adj:.1e}, {failures} identity/range failures"),
    )
}

// ---------------------------------------------------------------------------
// Shared desk-scale corpus and model

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    truth: Vec<TruthRow>,
    model: SeqNetModel,
    report: MetricsReport,
    train_time: Duration,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = SyntheticCorpusConfig {
        per_class: 1000,
        seed: 2024,
        ..Default::default()
    };
    let summary = write_corpus(&cfg, &root).unwrap();
    let spec = ModelSpec::desk();
    let train_set = Dataset::load(&summary.train, spec.input_length).unwrap();
    let val_set = Dataset::load(&summary.validation, spec.input_length).unwrap();
    let mut model = SeqNetModel::build(spec, 7).unwrap();
    let config = TrainConfig {
        epochs: 10,
        seed: 7,
        ..Default::default()
    };
    let start = Instant::now();
    train(&mut model, &train_set, &val_set, &config, |r| {
        say(&format!(
            "    epoch {:>2}: loss {:.4}, val acc {:.4} ({:.0}s)",
            r.epoch, r.train_loss, r.validation.accuracy, r.seconds
        ))
    })
    .unwrap();
    let train_time = start.elapsed();
    let report = evaluate(&model, &val_set).unwrap();
    Trained {
        _dir: dir,
        truth: read_truth(&root.join(seqnet_core::synth::TRUTH_FILE)).unwrap(),
        root,
        model,
        report,
        train_time,
    }
}

fn learnability(t: &Trained) -> Outcome {
    let r = &t.report;
    verdict(
        r.accuracy >= 0.95 && r.precision >= 0.93 && r.recall >= 0.93,
        format!(
            "2000 samples, 10 epochs in {:.0}s: accuracy {:.4}, precision {:.4}, recall {:.4}",
            t.train_time.as_secs_f64(),
            r.accuracy,
            r.precision,
            r.recall
        ),
    )
}

fn malicious_validation(t: &Trained) -> impl Iterator<Item = &TruthRow> {
    t.truth
        .iter()
        .filter(|r| r.label == Label::Malicious && r.split == seqnet_core::train::Split::Validation)
}

fn read(root: &Path, row: &TruthRow) -> Vec<u8> {
    RawSample::read(&root.join(&row.path), row.label).unwrap().bytes
}

fn attack_behavior(t: &Trained) -> Outcome {
    let cfg = AttackConfig {
        poison_bytes: 32_000,
        iterations: 20,
        ..Default::default()
    };
    let mut initial = Vec::new();
    let mut finals = Vec::new();
    let mut invariant_breaks = 0;
    for row in malicious_validation(t) {
        if initial.len() == 50 {
            break;
        }
        let bytes = read(&t.root, row);
        if score_bytes(&t.model, &bytes).unwrap() <= 0.5 {
            continue;
        }
        let trace = attack(&t.model, &bytes, &cfg).unwrap();
        if trace.bytes[..bytes.len()] != bytes[..]
            || trace.updates.iter().flatten().any(|&d| d != 0.0 && d.abs() != STEP)
        {
            invariant_breaks += 1;
        }
        initial.push(trace.initial);
        finals.push(trace.final_prediction());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
    };
    let n = initial.len();
    let (mi, mf) = (median(&mut initial), median(&mut finals));
    verdict(
        n == 50 && mf < mi && invariant_breaks == 0,
        format!("{n} samples: median y0 {mi:.4}, median yT {mf:.4}, {invariant_breaks} invariant breaks"),
    )
}

fn explanation_localization(t: &Trained) -> Outcome {
    let n = t.model.spec().layer_length(DEFAULT_LAYER).unwrap();
    let m = t.model.spec().input_length;
    let (mut hits, mut total, mut bad_norm) = (0, 0, 0);
    for row in malicious_validation(t) {
        let bytes = read(&t.root, row);
        let seq = preprocess_bytes(&bytes, m).unwrap();
        let x = Tensor::new(vec![1, 1, m], seq.values).unwrap();
        let h = grad_cam(&t.model, &x, MALICIOUS, DEFAULT_LAYER, &[bytes.len()]).unwrap().remove(0);
        let norm = normalize_snippet(&h.values).unwrap();
        if !norm.degenerate && norm.values.iter().copied().fold(0.0, f64::max) != 1.0 {
            bad_norm += 1;
        }
        let (start, len) = (row.payload_offset.unwrap(), row.payload_length.unwrap());
        let lo = h.feature_position(start as u64);
        let hi = h.feature_position((start + len - 1) as u64);
        let a = h.argmax();
        let dist = if a < lo { lo - a } else { a.saturating_sub(hi) };
        total += 1;
        if dist <= 2 {
            hits += 1;
        }
    }
    let frac = hits as f64 / total as f64;
    verdict(
        frac >= 0.7 && bad_norm == 0,
        format!("{hits}/{total} argmax within 2 of the motif at {DEFAULT_LAYER} ({n} positions), {bad_norm} bad normalizations"),
    )
}

// ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = Dataset {
        target_length: 512,
        ..Default::default()
    };
    for i in 0..24 {
        let bytes: Vec<u8> = (0..rng.gen_range(600..3000)).map(|_| rng.gen()).collect();
        data.inputs.push(preprocess_bytes(&bytes, 512).unwrap().values);
        data.labels.push(i % 2);
        data.digests.push(i.to_string());
    }
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let mut model = SeqNetModel::build(ModelSpec::toy(), 5).unwrap();
        let r = train(&mut model, &data, &data, &config, |_| {}).unwrap();
        (model, r[0].train_loss)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    let bytes = m1.to_bytes().unwrap();
    let back = SeqNetModel::from_bytes(&bytes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    back.save(&path).unwrap();
    let reloaded = SeqNetModel::load(&path).unwrap();
    let round_trip = back.to_bytes().unwrap() == bytes
        && std::fs::read(&path).unwrap() == bytes
        && reloaded == m1
        && m2.to_bytes().unwrap() == bytes;
    verdict(
        (l1 - l2).abs() <= 1e-12 && round_trip,
        format!("epoch-0 loss {l1:.12} vs {l2:.12}; round trip byte-identical: {round_trip}"),
    )
}

// ---------------------------------------------------------------------------

fn say(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    say(&format!(
        "criterion {id} {name}: {} ({}; {:.1}s)",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        start.elapsed().as_secs_f64()
    ));
    outcome.pass
}

fn main() {
    // `cargo test -- --list` and filters expect a libtest-like binary.
    if std::env::args().any(|a| a == "--list") {
        say("acceptance: test");
        return;
    }
    let mut results = vec![
        run(1, "gradient correctness", gradient_correctness),
        run(2, "cost identities", cost_identities),
        run(3, "parameter budget", parameter_budget),
        run(4, "flops magnitude", flops_magnitude),
    ];
    say("criteria 5, 7, 8 share one desk-scale model; training it now");
    let shared = catch_unwind(trained);
    match &shared {
        Ok(t) => {
            results.push(run(5, "desk-scale learnability", || learnability(t)));
            results.push(run(6, "preprocessing laws", preprocessing_laws));
            results.push(run(7, "attack behavior", || attack_behavior(t)));
            results.push(run(8, "explanation localization", || explanation_localization(t)));
        }
        Err(_) => {
            for (id, name) in [(5, "desk-scale learnability"), (7, "attack behavior"), (8, "explanation localization")] {
                results.push(run(id, name, || verdict(false, "shared training run failed")));
            }
            results.push(run(6, "preprocessing laws", preprocessing_laws));
        }
    }
    results.push(run(9, "determinism and round trip", determinism));
    let passed = results.iter().filter(|&&p| p).count();
    say(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    if passed != results.len() {
        std::process::exit(1);
    }
}
