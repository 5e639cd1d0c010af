use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqnet_core::adversarial::{attack_campaign, AttackConfig, STEP};
use seqnet_core::cost::count_params;
use seqnet_core::explain::{average_heatmap, grad_cam, layer_sweep, write_pgm, DEFAULT_LAYER};
use seqnet_core::model::{classify, ModelSpec, SeqNetModel, MALICIOUS};
use seqnet_core::preprocess::{preprocess, write_cache, Label, RawSample, DEFAULT_TARGET_LENGTH};
use seqnet_core::synth::{write_corpus, SyntheticCorpusConfig};
use seqnet_core::train::{
    evaluate, summarize_last, train, write_epoch_csv, AdamConfig, Dataset, DatasetManifest, Split, TrainConfig,
};
use seqnet_core::{Error, Tensor};

const EXIT_TABLE: &str = "\
Exit codes:
  0  success
  1  internal or numeric failure
  2  usage error (unknown flag, bad value)
  3  missing or unreadable file
  4  malformed manifest
  5  malformed model file
  6  invalid configuration or model spec
  7  nothing to evade (sample not detected)

Environment:
  SEQNET_THREADS  maximum worker threads (default: all cores)";

#[derive(Parser)]
#[command(name = "seqnet", version, about = "Raw-binary malware detection pipeline", after_help = EXIT_TABLE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-motif synthetic corpus with train/validation manifests
    GenSynthetic(GenArgs),
    /// Normalize and resample every manifest entry into cache files
    Preprocess(PreprocessArgs),
    /// Train a model and write it with per-epoch metrics
    Train(TrainArgs),
    /// Evaluate a model on a manifest
    Eval(EvalArgs),
    /// Score one binary
    Predict(PredictArgs),
    /// Run the appended-poison evasion attack
    Attack(AttackArgs),
    /// Write Grad-CAM heatmaps
    Explain(ExplainArgs),
    /// Write the per-layer parameter and multiply-add report
    Flops(ArchArgs),
}

#[derive(Args)]
struct ArchArgs {
    /// Resampled input length
    #[arg(long, default_value_t = DEFAULT_TARGET_LENGTH)]
    target_length: usize,
    /// Channel widths: stem then the four stages
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,128")]
    channels: Vec<usize>,
    /// Average-pool window (= stride) after each stage
    #[arg(long, value_delimiter = ',', default_value = "32,8,4,4")]
    pools: Vec<usize>,
    /// Residual blocks after the last stage
    #[arg(long, default_value_t = 5)]
    trunk_blocks: usize,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ArchArgs {
    fn spec(&self) -> Result<ModelSpec, Error> {
        let channels: [usize; 5] = self
            .channels
            .clone()
            .try_into()
            .map_err(|_| Error::InvalidSpec("--channels needs 5 values".into()))?;
        let pools: [usize; 4] = self
            .pools
            .clone()
            .try_into()
            .map_err(|_| Error::InvalidSpec("--pools needs 4 values".into()))?;
        ModelSpec::seqnet(self.target_length, channels, pools, self.trunk_blocks)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Files per class
    #[arg(long, default_value_t = 1000)]
    per_class: usize,
    #[arg(long, default_value_t = 4 << 10)]
    min_length: usize,
    #[arg(long, default_value_t = 1 << 20)]
    max_length: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET_LENGTH)]
    target_length: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 70)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs averaged in the summary
    #[arg(long, default_value_t = 30)]
    summary_epochs: usize,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Binary to score
    file: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Manifest whose malicious entries are attacked
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32_000)]
    poison_bytes: usize,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    /// Step size in normalized space
    #[arg(long, default_value_t = STEP)]
    step: f64,
    /// Attack at most this many samples
    #[arg(long)]
    limit: Option<usize>,
    /// Keep attacking after the first evading iteration
    #[arg(long)]
    no_stop: bool,
    /// Also write the poisoned binaries
    #[arg(long)]
    save_poisoned: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Explain every entry of this manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    /// Target class: 0 benign, 1 malicious
    #[arg(long, default_value_t = MALICIOUS)]
    class: usize,
    /// One heatmap per layer instead of a single layer
    #[arg(long)]
    sweep: bool,
    /// Raster width of the PGM image
    #[arg(long, default_value_t = 512)]
    width: usize,
    /// Binaries to explain
    files: Vec<PathBuf>,
}

/// A failure with its exit code and a short machine-readable kind.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (3, "io"),
            Error::Manifest { .. } => (4, "manifest"),
            Error::Format(_) => (5, "model"),
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::UnknownLayer(_) => (6, "config"),
            Error::NothingToEvade(_) => (7, "nothing-to-evade"),
            Error::Csv(_) | Error::Json(_) => (3, "io"),
            _ => (1, "internal"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Preprocess(a) => run_preprocess(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Attack(a) => run_attack(a),
        Command::Explain(a) => run_explain(a),
        Command::Flops(a) => run_flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.replace('\n', " ");
            eprintln!("error kind={} code={}: {}", f.kind, f.code, msg);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_file(path: &Path) -> Result<fs::File, Error> {
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_model(path: &Path) -> Result<SeqNetModel, Error> {
    SeqNetModel::load(path)
}

fn gen_synthetic(a: GenArgs) -> Outcome {
    let cfg = SyntheticCorpusConfig {
        per_class: a.per_class,
        min_length: a.min_length,
        max_length: a.max_length,
        seed: a.seed,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let s = write_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} files: {} train, {} validation",
        s.truth.len(),
        s.train.entries.len(),
        s.validation.entries.len()
    );
    Ok(())
}

fn run_preprocess(a: PreprocessArgs) -> Outcome {
    let manifest = DatasetManifest::read(&a.manifest, Split::Train)?;
    create_dir(&a.out)?;
    let mut written = 0;
    for e in &manifest.entries {
        let seq = preprocess(&RawSample::read(&e.path, e.label)?, a.target_length)?;
        write_cache(&seq, &a.out.join(format!("{}.seqn", e.digest)))?;
        written += 1;
    }
    println!("wrote {written} cache files");
    Ok(())
}

fn run_train(a: TrainArgs) -> Outcome {
    let spec = a.arch.spec()?;
    let out = a.arch.out.clone().ok_or_else(|| Error::InvalidConfig("--out is required".into()))?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig {
            learning_rate: a.lr,
            ..Default::default()
        },
        seed: a.seed,
        shuffle: true,
    };
    config.validate()?;
    let train_manifest = DatasetManifest::read(&a.manifest, Split::Train)?;
    let val_manifest = a
        .validation
        .as_deref()
        .map(|p| DatasetManifest::read(p, Split::Validation))
        .transpose()?;
    if let Some(v) = &val_manifest {
        train_manifest.check_disjoint(v)?;
    }
    create_dir(&out)?;
    let train_set = Dataset::load(&train_manifest, spec.input_length)?;
    let val_set = match &val_manifest {
        Some(v) => Dataset::load(v, spec.input_length)?,
        None => Dataset::default(),
    };
    let mut model = SeqNetModel::build(spec, a.seed)?;
    let mut log_lines = String::new();
    let reports = train(&mut model, &train_set, &val_set, &config, |r| {
        let v = &r.validation;
        log::info!("epoch {} loss {:.5} val_acc {:.4}", r.epoch, r.train_loss, v.accuracy);
        log_lines.push_str(&format!(
            "epoch={} seconds={:.3} train_loss={} val_accuracy={}\n",
            r.epoch, r.seconds, r.train_loss, v.accuracy
        ));
    })?;
    model.save(&out.join("model.bin"))?;
    write_epoch_csv(&reports, create_file(&out.join("epochs.csv"))?)?;
    write_file(&out.join("train.log"), log_lines)?;
    let summary = summarize_last(&reports, a.summary_epochs)?;
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )?;
    let last = &reports.last().expect("at least one epoch").validation;
    println!(
        "accuracy={} precision={} recall={} f1={}",
        last.accuracy, last.precision, last.recall, last.f1
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let manifest = DatasetManifest::read(&a.manifest, Split::Validation)?;
    let data = Dataset::load(&manifest, model.spec().input_length)?;
    let report = evaluate(&model, &data)?;
    println!(
        "accuracy={} precision={} recall={} f1={} tp={} fp={} fn={} tn={}",
        report.accuracy, report.precision, report.recall, report.f1, report.tp, report.fp, report.fn_, report.tn
    );
    if let Some(out) = a.out {
        create_dir(&out)?;
        write_file(
            &out.join("metrics.json"),
            serde_json::to_string_pretty(&report).map_err(Error::from)?,
        )?;
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let sample = RawSample::read(&a.file, Label::Unknown)?;
    let seq = preprocess(&sample, model.spec().input_length)?;
    let x = Tensor::new(vec![1, 1, seq.target_length], seq.values)?;
    let p = model.predict_malicious(&x)?[0];
    println!("p_malicious={p}");
    println!("verdict={}", classify(p));
    Ok(())
}

fn run_attack(a: AttackArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let manifest = DatasetManifest::read(&a.manifest, Split::Validation)?;
    let mut entries: Vec<_> = manifest.entries.iter().filter(|e| e.label == Label::Malicious).collect();
    if let Some(n) = a.limit {
        entries.truncate(n);
    }
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        samples.push(RawSample::read(&e.path, e.label)?.bytes);
    }
    let config = AttackConfig {
        poison_bytes: a.poison_bytes,
        iterations: a.iterations,
        step: a.step,
        stop_on_evasion: !a.no_stop,
        ..Default::default()
    };
    let budgets: Vec<usize> = (0..=a.iterations).collect();
    let report = attack_campaign(&model, &samples, &config, &budgets)?;
    if report.traces.is_empty() {
        return Err(Error::NothingToEvade(f64::NAN).into());
    }
    create_dir(&a.out)?;
    report.write_csv(create_file(&a.out.join("campaign.csv"))?)?;
    let traces = a.out.join("traces");
    create_dir(&traces)?;
    for (&i, t) in report.sample_indices.iter().zip(&report.traces) {
        let e = entries[i];
        t.write_csv(create_file(&traces.join(format!("{}.csv", e.digest)))?)?;
        if a.save_poisoned {
            write_file(&traces.join(format!("{}.bin", e.digest)), &t.bytes)?;
        }
    }
    let last = report.rows.last().expect("budgets are non-empty");
    println!(
        "evaded={}/{} skipped={} iterations={}",
        last.evaded_count, last.total, report.skipped, last.iterations
    );
    Ok(())
}

fn run_explain(a: ExplainArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let mut files: Vec<(PathBuf, Option<String>)> = a.files.iter().map(|f| (f.clone(), None)).collect();
    if let Some(m) = &a.manifest {
        let manifest = DatasetManifest::read(m, Split::Validation)?;
        files.extend(manifest.entries.iter().map(|e| (e.path.clone(), Some(e.digest.clone()))));
    }
    if files.is_empty() {
        return Err(Error::InvalidConfig("give binaries or --manifest".into()).into());
    }
    create_dir(&a.out)?;
    let m = model.spec().input_length;
    let mut maps = Vec::new();
    let mut rows = Vec::new();
    for (path, digest) in &files {
        let sample = RawSample::read(path, Label::Unknown)?;
        let digest = digest.clone().unwrap_or_else(|| sample.digest.clone());
        let seq = preprocess(&sample, m)?;
        let x = Tensor::new(vec![1, 1, m], seq.values)?;
        if a.sweep {
            for mut h in layer_sweep(&model, &x, a.class, seq.original_length)? {
                h.digest = Some(digest.clone());
                h.write_csv(create_file(&a.out.join(format!("{digest}.{}.csv", h.layer)))?)?;
                rows.push(h.values.clone());
            }
        } else {
            let mut h = grad_cam(&model, &x, a.class, &a.layer, &[seq.original_length])?.remove(0);
            h.digest = Some(digest.clone());
            h.write_csv(create_file(&a.out.join(format!("{digest}.csv")))?)?;
            rows.push(h.values.clone());
            maps.push(h);
        }
    }
    if maps.len() > 1 {
        average_heatmap(&maps)?.write_csv(create_file(&a.out.join("average.csv"))?)?;
    }
    write_pgm(&rows, a.width, create_file(&a.out.join("heatmaps.pgm"))?)?;
    println!("wrote {} heatmaps", rows.len());
    Ok(())
}

fn run_flops(a: ArchArgs) -> Outcome {
    let spec = a.spec()?;
    let report = count_params(&spec);
    match &a.out {
        Some(out) => {
            create_dir(out)?;
            report.write_csv(create_file(&out.join("cost.csv"))?)?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    eprintln!(
        "params={} macs={} mflops={:.2}",
        report.total_params(),
        report.total_macs(),
        report.mflops()
    );
    Ok(())
}
