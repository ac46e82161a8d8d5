//! glamor-kit: command-line frontend for scripted re-id experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 selftest failure.
//! Every randomized subcommand takes --seed and reruns byte-identically.
//! GLAMOR_KIT_THREADS caps internal parallelism (default 1).

use clap::{Parser, Subcommand};
use glamor_core::backbone::{sparsity_probe, Model};
use glamor_core::data::{lr_at, pk_sample, EraseConfig, PkSamplerConfig, ScheduleConfig, ScheduleKind};
use glamor_core::io::{
    read_checkpoint, read_embeddings, read_manifest, read_model_config, read_tensor,
    write_checkpoint, write_embeddings, write_tensor, ManifestEntry,
};
use glamor_core::losses::{batch_hard_mine, LossConfig, Smoothing};
use glamor_core::reid::{rank_with_threads, EmbeddingSet, Protocol, RankingReport};
use glamor_core::selftest::{run_suite, Suite};
use glamor_core::tensor::{Matrix, Tensor4};
use glamor_core::train::{train, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "glamor-kit", version, about = "Metric-learning re-id toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank a gallery against queries and report mAP / CMC.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// `plain` or `veri` (drop same-identity same-camera gallery entries).
        #[arg(long, default_value = "plain")]
        protocol: String,
        /// Also write the report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch-hard mine an embeddings file; one row per anchor.
    Mine {
        #[arg(long)]
        embeddings: PathBuf,
        /// Identities per sampled batch; omit to mine the whole file.
        #[arg(long)]
        p: Option<usize>,
        /// Instances per identity in the sampled batch.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the per-epoch learning-rate table for a schedule.
    Schedule {
        /// `warmup1`, `warmup2`, or `none`.
        #[arg(long)]
        kind: String,
        #[arg(long, value_name = "REAL")]
        base_lr: f64,
        #[arg(long)]
        epochs: usize,
    },
    /// Run a model forward and emit the feature embeddings as TSV.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Tensor file holding a batch of images.
        #[arg(long, conflicts_with = "manifest")]
        input: Option<PathBuf>,
        /// Manifest of per-sample tensor files with identity/camera metadata.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for probe activation tensor files.
        #[arg(long)]
        dump_activations: Option<PathBuf>,
    },
    /// Fraction of near-zero channels per probed layer.
    Sparsity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        samples: usize,
    },
    /// Run built-in verification suites.
    Selftest {
        /// `grads`, `oracles`, `protocol`, or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Train on a manifest and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Identities per batch.
        #[arg(long, default_value_t = 6)]
        p: usize,
        /// Instances per identity per batch.
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0.3)]
        margin: f64,
        /// `none`, `one-over-n`, or an explicit value in [0, 1).
        #[arg(long, default_value = "one-over-n")]
        smoothing: String,
        /// `warmup1`, `warmup2`, or `none`.
        #[arg(long, default_value = "warmup1")]
        schedule: String,
        #[arg(long, default_value_t = 1e-4)]
        base_lr: f64,
        /// Random-erasing probability; 0 disables augmentation.
        #[arg(long, default_value_t = 0.5)]
        erase: f64,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    SelftestFailed,
}

impl From<glamor_core::Error> for CliError {
    fn from(e: glamor_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (including --help/--version)
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::SelftestFailed) => ExitCode::from(3),
    }
}

fn threads_from_env() -> usize {
    std::env::var("GLAMOR_KIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Eval { query, gallery, protocol, out } => cmd_eval(&query, &gallery, &protocol, out.as_deref()),
        Command::Mine { embeddings, p, k, seed } => cmd_mine(&embeddings, p, k, seed),
        Command::Schedule { kind, base_lr, epochs } => cmd_schedule(&kind, base_lr, epochs),
        Command::Forward { config, params, input, manifest, dump_activations } => {
            cmd_forward(&config, &params, input.as_deref(), manifest.as_deref(), dump_activations.as_deref())
        }
        Command::Sparsity { config, params, images, tau, samples } => {
            cmd_sparsity(&config, &params, &images, tau, samples)
        }
        Command::Selftest { suite } => cmd_selftest(&suite),
        Command::Train {
            config,
            manifest,
            epochs,
            seed,
            out,
            p,
            k,
            margin,
            smoothing,
            schedule,
            base_lr,
            erase,
        } => cmd_train(TrainArgs {
            config,
            manifest,
            epochs,
            seed,
            out,
            p,
            k,
            margin,
            smoothing,
            schedule,
            base_lr,
            erase,
        }),
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_protocol(s: &str) -> Result<Protocol, CliError> {
    match s {
        "plain" => Ok(Protocol::Plain),
        "veri" => Ok(Protocol::Veri),
        other => Err(CliError::Usage(format!("unknown protocol `{other}` (plain|veri)"))),
    }
}

fn parse_schedule_kind(s: &str) -> Result<ScheduleKind, CliError> {
    match s {
        "warmup1" => Ok(ScheduleKind::Warmup1),
        "warmup2" => Ok(ScheduleKind::Warmup2),
        "none" => Ok(ScheduleKind::None),
        other => Err(CliError::Usage(format!(
            "unknown schedule `{other}` (warmup1|warmup2|none)"
        ))),
    }
}

fn render_report(report: &RankingReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>10}", "metric", "value");
    let _ = writeln!(out, "{:<10} {:>10.6}", "mAP", report.map);
    let _ = writeln!(out, "{:<10} {:>10.6}", "rank-1", report.rank1());
    let _ = writeln!(out, "{:<10} {:>10.6}", "rank-5", report.rank5());
    let _ = writeln!(out, "{:<10} {:>10}", "valid", report.num_valid_queries);
    let _ = writeln!(out, "{:<10} {:>10}", "skipped", report.num_skipped_queries);
    let _ = writeln!(
        out,
        "map={:.6} rank1={:.6} rank5={:.6}",
        report.map,
        report.rank1(),
        report.rank5()
    );
    out
}

fn cmd_eval(
    query_path: &Path,
    gallery_path: &Path,
    protocol: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let protocol = parse_protocol(protocol)?;
    let query = read_embeddings(&read_to_string(query_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", query_path.display())))?;
    let gallery = read_embeddings(&read_to_string(gallery_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", gallery_path.display())))?;
    let report = rank_with_threads(&query, &gallery, protocol, threads_from_env())?;
    let rendered = render_report(&report);
    print!("{rendered}");
    if let Some(path) = out {
        std::fs::write(path, rendered)?;
    }
    Ok(())
}

fn identity_indices(identities: &[String]) -> Vec<i64> {
    // class indices in first-appearance order
    let mut order: Vec<&String> = Vec::new();
    identities
        .iter()
        .map(|id| {
            match order.iter().position(|x| *x == id) {
                Some(pos) => pos as i64,
                None => {
                    order.push(id);
                    (order.len() - 1) as i64
                }
            }
        })
        .collect()
}

fn cmd_mine(
    embeddings_path: &Path,
    p: Option<usize>,
    k: Option<usize>,
    seed: u64,
) -> Result<(), CliError> {
    let set = read_embeddings(&read_to_string(embeddings_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", embeddings_path.display())))?;
    let labels = identity_indices(&set.identities);
    let (rows, ids): (Matrix, Vec<i64>) = match (p, k) {
        (Some(p), Some(k)) => {
            let config = PkSamplerConfig::new(p, k, seed).map_err(|e| CliError::Data(e.to_string()))?;
            let batches = pk_sample(&labels, &config, 0)?;
            let batch = batches
                .first()
                .ok_or_else(|| CliError::Data("sampler produced no batches".into()))?;
            let picked: Vec<Vec<f64>> = batch.iter().map(|&i| set.vectors.row(i).to_vec()).collect();
            let ids: Vec<i64> = batch.iter().map(|&i| labels[i]).collect();
            let matrix = Matrix::from_rows(&picked)?;
            // report original file row indices
            let mined = batch_hard_mine(&matrix, &ids)?;
            for t in &mined.triplets {
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    batch[t.anchor],
                    batch[t.hardest_positive],
                    batch[t.hardest_negative],
                    t.d_ap,
                    t.d_an
                );
            }
            return Ok(());
        }
        (None, None) => (set.vectors.clone(), labels),
        _ => {
            return Err(CliError::Usage(
                "--p and --k must be given together (or both omitted)".into(),
            ))
        }
    };
    let mined = batch_hard_mine(&rows, &ids)?;
    for t in &mined.triplets {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            t.anchor, t.hardest_positive, t.hardest_negative, t.d_ap, t.d_an
        );
    }
    Ok(())
}

fn cmd_schedule(kind: &str, base_lr: f64, epochs: usize) -> Result<(), CliError> {
    let kind = parse_schedule_kind(kind)?;
    let config = ScheduleConfig::new(base_lr, kind)?;
    println!("# epoch\tlr");
    for epoch in 0..epochs {
        println!("{epoch}\t{}", lr_at(&config, epoch));
    }
    Ok(())
}

fn load_model(config_path: &Path, params_path: &Path) -> Result<Model, CliError> {
    let config = read_model_config(&read_to_string(config_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", config_path.display())))?;
    // seed is irrelevant: the checkpoint overwrites every parameter
    let mut model = Model::init(config, 0)?;
    let entries = read_checkpoint(&read_to_string(params_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", params_path.display())))?;
    model.import_entries(&entries)?;
    Ok(model)
}

/// Load every sample named by a manifest; each tensor file must hold
/// exactly one image. Paths resolve relative to the manifest directory.
fn load_manifest_images(
    manifest_path: &Path,
) -> Result<(Vec<ManifestEntry>, Tensor4), CliError> {
    let entries = read_manifest(&read_to_string(manifest_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(entries.len());
    for entry in &entries {
        let path = base.join(&entry.path);
        let tensor = read_tensor(&read_to_string(&path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if tensor.batch() != 1 {
            return Err(CliError::Data(format!(
                "{}: manifest tensor files must hold exactly 1 sample, found {}",
                path.display(),
                tensor.batch()
            )));
        }
        samples.push(tensor);
    }
    let images = Tensor4::stack(&samples)?;
    Ok((entries, images))
}

fn cmd_forward(
    config_path: &Path,
    params_path: &Path,
    input: Option<&Path>,
    manifest: Option<&Path>,
    dump_activations: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(config_path, params_path)?;
    let (images, sample_ids, identities, cameras) = match (input, manifest) {
        (Some(path), None) => {
            let images = read_tensor(&read_to_string(path)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let n = images.batch();
            (
                images,
                (0..n).map(|i| format!("r{i}")).collect::<Vec<_>>(),
                vec!["-".to_string(); n],
                vec!["-".to_string(); n],
            )
        }
        (None, Some(path)) => {
            let (entries, images) = load_manifest_images(path)?;
            (
                images,
                entries.iter().map(|e| e.sample_id.clone()).collect(),
                entries.iter().map(|e| e.identity.clone()).collect(),
                entries.iter().map(|e| e.camera.clone()).collect(),
            )
        }
        _ => {
            return Err(CliError::Usage(
                "exactly one of --input or --manifest is required".into(),
            ))
        }
    };
    let pass = model.forward(&images, false)?;
    if let Some(dir) = dump_activations {
        std::fs::create_dir_all(dir)?;
        for (name, tensor) in &pass.activations {
            std::fs::write(dir.join(format!("{name}.tensor")), write_tensor(tensor))?;
        }
    }
    let set = EmbeddingSet::new(pass.triplet_features, sample_ids, identities, cameras)?;
    print!("{}", write_embeddings(&set));
    Ok(())
}

fn cmd_sparsity(
    config_path: &Path,
    params_path: &Path,
    images_manifest: &Path,
    tau: f64,
    samples: usize,
) -> Result<(), CliError> {
    let model = load_model(config_path, params_path)?;
    let (_, images) = load_manifest_images(images_manifest)?;
    let report = sparsity_probe(&model, &images, tau, samples)?;
    println!("# sparsity tau={} samples={}", report.tau, report.sample_count);
    for (layer, fraction) in &report.per_layer {
        println!("{layer}\t{fraction}");
    }
    Ok(())
}

fn cmd_selftest(suite: &str) -> Result<(), CliError> {
    let suite = Suite::parse(suite)
        .ok_or_else(|| CliError::Usage(format!("unknown suite `{suite}` (grads|oracles|protocol|all)")))?;
    let started = std::time::Instant::now();
    let results = run_suite(suite);
    let mut failed = 0usize;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed, {:.2}s",
        results.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::SelftestFailed);
    }
    Ok(())
}

struct TrainArgs {
    config: PathBuf,
    manifest: PathBuf,
    epochs: usize,
    seed: u64,
    out: PathBuf,
    p: usize,
    k: usize,
    margin: f64,
    smoothing: String,
    schedule: String,
    base_lr: f64,
    erase: f64,
}

fn parse_smoothing(s: &str) -> Result<Smoothing, CliError> {
    match s {
        "none" => Ok(Smoothing::None),
        "one-over-n" => Ok(Smoothing::OneOverN),
        other => other
            .parse::<f64>()
            .map(Smoothing::Explicit)
            .map_err(|_| CliError::Usage(format!("unknown smoothing `{other}` (none|one-over-n|REAL)"))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = read_model_config(&read_to_string(&args.config)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.config.display())))?;
    let (entries, images) = load_manifest_images(&args.manifest)?;
    let identities: Vec<String> = entries.iter().map(|e| e.identity.clone()).collect();
    let labels = identity_indices(&identities);
    let distinct = labels.iter().collect::<std::collections::HashSet<_>>().len();
    if distinct != config.num_classes {
        return Err(CliError::Data(format!(
            "manifest has {distinct} identities, config num_classes is {}",
            config.num_classes
        )));
    }
    let mut model = Model::init(config, args.seed)?;
    let train_config = TrainConfig {
        epochs: args.epochs,
        seed: args.seed,
        sampler: PkSamplerConfig::new(args.p, args.k, args.seed)?,
        loss: LossConfig::new(args.margin, parse_smoothing(&args.smoothing)?, model.config.num_classes)?,
        schedule: ScheduleConfig::new(args.base_lr, parse_schedule_kind(&args.schedule)?)?,
        erase: if args.erase > 0.0 {
            Some(EraseConfig::new(args.erase)?)
        } else {
            None
        },
    };
    println!("# epoch\tlr\tloss\ttriplet\tsoftmax");
    let logs = train(&mut model, &images, &labels, &train_config)?;
    for log in &logs {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            log.epoch, log.lr, log.total, log.triplet, log.softmax
        );
    }
    std::fs::write(&args.out, write_checkpoint(&model.export_entries()))?;
    Ok(())
}
