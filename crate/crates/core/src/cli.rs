//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::GrayImage as PngGray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_one, AugmentConfig};
use crate::data::{self, load_image, load_manifest, load_samples, split, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::graph::{
    build_classifier, export_weights, forward, group_thousands, init_random, layer_census, load_weights,
    load_with_graph, param_report, GraphSpec, TrainablePolicy, DEFAULT_DROPOUT_RATE, DEFAULT_INPUT_SIZE,
};
use crate::metrics::MetricsRecord;
use crate::report::{self, class_counts, emit_report, to_json, ReportBundle, RunReport};
use crate::train::{evaluate, fit, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "tumornet", version, about = "Brain MRI tumor classifier on a truncated Inception-v3 backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the layer table, endpoint shapes and parameter counts.
    Inspect {
        #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
        input_size: usize,
        #[arg(long, default_value_t = TrainablePolicy::FullFinetune)]
        policy: TrainablePolicy,
        /// Skip the per-layer table.
        #[arg(long)]
        summary: bool,
    },
    /// Train on a manifest and write weights plus reports into a directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate weights on a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
        /// Config whose seed and split settings select train/val.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write metrics and confusion files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a single image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write augmented copies of the first N manifest images.
    AugmentPreview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weight file utilities.
    #[command(subcommand)]
    Weights(WeightsCommand),
    /// Finite-difference gradient checks of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
enum WeightsCommand {
    /// Write a freshly initialized weight file.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        init: InitArgs,
    },
    /// Validate a weight file and optionally re-export it.
    Import {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    input_size: usize,
    #[arg(long, default_value_t = DEFAULT_DROPOUT_RATE)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zero the dense head so every prediction is uniform.
    #[arg(long)]
    zero_head: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    All,
    Train,
    Val,
}

/// Parse `args` (program name first) and run. Results go to `out`, progress
/// and errors to stderr. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Inspect {
            input_size,
            policy,
            summary,
        } => inspect(input_size, policy, summary, out),
        Command::Train { manifest, config, out: dir } => train(&manifest, config.as_deref(), &dir, out),
        Command::Evaluate {
            manifest,
            weights,
            split,
            config,
            out: dir,
        } => evaluate_cmd(&manifest, &weights, split, config.as_deref(), dir.as_deref(), out),
        Command::Predict { image, weights } => predict(&image, &weights, out),
        Command::AugmentPreview {
            manifest,
            config,
            n,
            out: dir,
        } => augment_preview(&manifest, config.as_deref(), n, &dir, out),
        Command::Weights(WeightsCommand::Export { out: path, init }) => {
            let graph = build_classifier(init.input_size, init.dropout)?;
            let mut store = init_random(&graph, init.seed);
            if init.zero_head {
                for name in ["dense_0/kernel", "dense_0/bias", "dense_1/kernel", "dense_1/bias"] {
                    store.tensor_mut(name)?.data_mut().fill(0.0);
                }
            }
            export_weights(&graph, &store, &path)?;
            writeln!(out, "wrote {} tensors ({} values) to {}", store.len(), group_thousands(store.numel() as u64), path.display())
                .map_err(io_out)?;
            Ok(EXIT_OK)
        }
        Command::Weights(WeightsCommand::Import { file, out: path }) => {
            let (graph, store) = load_with_graph(&file)?;
            let [h, w, _] = graph.input_size();
            writeln!(
                out,
                "{}: {} tensors, {} values, input {h}x{w}, head {}",
                file.display(),
                store.len(),
                group_thousands(store.numel() as u64),
                if graph.head().is_some() { "attached" } else { "absent" }
            )
            .map_err(io_out)?;
            if let Some(path) = path {
                export_weights(&graph, &store, &path)?;
                writeln!(out, "re-exported to {}", path.display()).map_err(io_out)?;
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { cases, seed } => {
            let reports = gradcheck::run_all(cases, seed)?;
            let mut failed = false;
            for r in &reports {
                failed |= !r.passed();
                writeln!(
                    out,
                    "{} {:<14} cases={:<3} max_rel_err={:.3e}{}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.op,
                    r.cases,
                    r.max_relative_error,
                    if r.passed() { String::new() } else { format!(" worst={}", r.worst_case) }
                )
                .map_err(io_out)?;
            }
            Ok(if failed { 3 } else { EXIT_OK })
        }
    }
}

fn inspect(input_size: usize, policy: TrainablePolicy, summary: bool, out: &mut dyn Write) -> Result<i32> {
    let graph = build_classifier(input_size, DEFAULT_DROPOUT_RATE)?;
    let mut text = String::new();
    if !summary {
        text.push_str(&graph.to_string());
        text.push('\n');
    }
    text.push_str(&format!("input: {input_size}x{input_size}x3\nendpoints:\n"));
    let mut endpoints: Vec<(&String, &usize)> = graph.endpoints().iter().collect();
    endpoints.sort_by_key(|(_, &i)| i);
    for (name, &i) in endpoints {
        text.push_str(&format!("  {name:<13} {:?}\n", graph.layer(i).output_shape));
    }
    text.push_str("layer census:\n");
    for (kind, n) in layer_census(&graph) {
        text.push_str(&format!("  {kind:<11} {n}\n"));
    }
    let report = param_report(&graph, policy);
    text.push_str(&format!(
        "policy: {policy}\nTotal params: {}\nTrainable params: {}\nNon-trainable params: {}\n",
        group_thousands(report.total),
        group_thousands(report.trainable),
        group_thousands(report.non_trainable)
    ));
    out.write_all(text.as_bytes()).map_err(io_out)?;
    Ok(EXIT_OK)
}

fn pick(ds: &data::Dataset, indices: &[usize]) -> Vec<data::ManifestEntry> {
    indices.iter().map(|&i| ds.entries[i].clone()).collect()
}

fn train(manifest: &Path, config: Option<&Path>, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(config)?;
    let ds = load_manifest(manifest)?;
    eprintln!("loaded {ds}");
    let parts = split(&ds, cfg.train_fraction, cfg.seed, cfg.stratified)?;
    for w in &parts.warnings {
        eprintln!("warning: {w}");
    }
    let train_entries = pick(&ds, &parts.train);
    let val_entries = pick(&ds, &parts.val);
    let train_set = load_samples(&train_entries, cfg.input_size)?;
    let val_set = load_samples(&val_entries, cfg.input_size)?;

    let graph = build_classifier(cfg.input_size, cfg.dropout_rate)?;
    let (mut weights, initial) = match &cfg.init_weights {
        Some(path) => (load_weights(&graph, path)?, path.display().to_string()),
        None => (init_random(&graph, cfg.seed), format!("glorot_uniform(seed={})", cfg.seed)),
    };
    let outcome = fit(&graph, &mut weights, &train_set, &val_set, &cfg, &mut |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val_loss {:.4}  acc {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.train_accuracy, r.val_accuracy
        )
    })?;
    let final_eval = evaluate(&graph, &weights, &val_set, cfg.batch_size)?;

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_weights(&graph, &weights, &dir.join(report::WEIGHTS_FILE))?;
    let bundle = ReportBundle::new(outcome.history.clone(), final_eval.confusion.clone());
    emit_report(&bundle, dir)?;

    let params = param_report(&graph, cfg.policy);
    let run = RunReport {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        preprocessing: Default::default(),
        dataset: report::DatasetSummary {
            manifest: manifest.display().to_string(),
            total: ds.len(),
            counts: class_counts(ds.labels()),
            train: train_entries.len(),
            val: val_entries.len(),
            train_counts: class_counts(train_entries.iter().map(|e| e.label)),
            val_counts: class_counts(val_entries.iter().map(|e| e.label)),
            warnings: parts.warnings.clone(),
        },
        model: report::ModelSummary {
            input_size: cfg.input_size,
            total_params: params.total,
            trainable_params: params.trainable,
            non_trainable_params: params.non_trainable,
            feature_cache: outcome.feature_cache,
            initial_weights: initial,
        },
        early_stopping: report::EarlyStopSummary {
            monitor: "val_loss",
            patience: cfg.patience,
            min_delta: cfg.min_delta,
            epochs_run: outcome.history.len(),
            stopped_early: outcome.stopped_early,
            optimizer_steps: outcome.steps,
        },
        history: outcome.history,
        final_validation: bundle.metrics.clone(),
        final_confusion: bundle.confusion.clone(),
    };
    let path = dir.join(report::RUN_REPORT_FILE);
    std::fs::write(&path, to_json(&run)).map_err(|e| Error::io(&path, e))?;
    write_metrics_summary(&bundle.metrics, out)?;
    writeln!(out, "wrote {}", dir.display()).map_err(io_out)?;
    Ok(EXIT_OK)
}

fn write_metrics_summary(m: &MetricsRecord, out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "accuracy {:.4}  macro precision {:.4}  macro recall {:.4}  macro F1 {:.2}%",
        m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
    )
    .map_err(io_out)
}

fn evaluate_cmd(
    manifest: &Path,
    weights: &Path,
    which: EvalSplit,
    config: Option<&Path>,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let (graph, store) = load_with_graph(weights)?;
    let ds = load_manifest(manifest)?;
    let entries = match which {
        EvalSplit::All => ds.entries.clone(),
        EvalSplit::Train | EvalSplit::Val => {
            let parts = split(&ds, cfg.train_fraction, cfg.seed, cfg.stratified)?;
            pick(&ds, if which == EvalSplit::Train { &parts.train } else { &parts.val })
        }
    };
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples = load_samples(&entries, graph.input_size()[0])?;
    let eval = evaluate(&graph, &store, &samples, cfg.batch_size)?;
    let bundle = ReportBundle::new(Vec::new(), eval.confusion);
    out.write_all(&to_json(&bundle.metrics)).map_err(io_out)?;
    writeln!(out, "loss {}", eval.loss).map_err(io_out)?;
    if let Some(dir) = dir {
        emit_report(&bundle, dir)?;
    }
    Ok(EXIT_OK)
}

/// Class name and probabilities for one image.
pub fn predict_image(graph: &GraphSpec, weights: &crate::graph::WeightStore, image: &Path) -> Result<(usize, [f32; 3])> {
    let [h, _, _] = graph.input_size();
    let x = load_image(image, h)?;
    let shape: Vec<usize> = std::iter::once(1).chain(x.shape().iter().copied()).collect();
    let batch = x.reshape(&shape)?;
    let probs = forward(graph, weights, &batch, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let p = [probs.data()[0], probs.data()[1], probs.data()[2]];
    Ok((probs.argmax_rows()[0], p))
}

fn predict(image: &Path, weights: &Path, out: &mut dyn Write) -> Result<i32> {
    let (graph, store) = load_with_graph(weights)?;
    let (class, p) = predict_image(&graph, &store, image)?;
    writeln!(out, "{}", CLASS_NAMES[class]).map_err(io_out)?;
    for (name, v) in CLASS_NAMES.iter().zip(p) {
        writeln!(out, "{name} {v:.6}").map_err(io_out)?;
    }
    Ok(EXIT_OK)
}

fn to_png(sample: &crate::tensor::Tensor) -> PngGray {
    let &[h, w, c] = sample.shape() else { unreachable!("model inputs are [H, W, C]") };
    let pixels = sample
        .data()
        .chunks(c)
        .map(|px| (((px[0] + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    PngGray::from_raw(w as u32, h as u32, pixels).expect("buffer matches size")
}

fn augment_preview(manifest: &Path, config: Option<&Path>, n: usize, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(config)?;
    let aug: &AugmentConfig = &cfg.augmentation;
    let ds = load_manifest(manifest)?;
    let entries: Vec<_> = ds.entries.iter().take(n).cloned().collect();
    let samples: Vec<Sample> = load_samples(&entries, cfg.input_size)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecar = String::from("file,label,theta,zoom,tx,ty,shear,flip\n");
    for (i, s) in samples.iter().enumerate() {
        let (img, p) = augment_one(&s.input, aug, cfg.seed, 0, i as u64)?;
        let name = format!("aug_{i:04}.png");
        let path = dir.join(&name);
        to_png(&img).save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        sidecar.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            CLASS_NAMES[s.label], p.theta, p.zoom, p.tx, p.ty, p.shear, p.flip
        ));
    }
    let path = dir.join("params.csv");
    std::fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))?;
    writeln!(out, "wrote {} augmented images to {}", samples.len(), dir.display()).map_err(io_out)?;
    Ok(EXIT_OK)
}
