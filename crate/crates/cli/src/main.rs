//! Single entry point: dataset generation, training, evaluation,
//! reconstruction export, and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format/runtime error.
//! Every run prints the resolved configuration and seed before executing.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use echotwin::error::Error;
use echotwin::eval::{self, ProbeTask};
use echotwin::syndata::{self, AnomalyKind, ClipClass, Dataset, GeneratorConfig};
use echotwin::train::{
    self, inspect_checkpoint, load_checkpoint, Direction, ModelState, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "echotwin",
    about = "Bidirectional abnormality reconstruction on synthetic echo-like video",
    version
)]
struct Cli {
    /// Base RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force single-threaded numerics.
    #[arg(long, global = true)]
    deterministic: bool,
    /// JSON config file with TrainConfig fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap the worker thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenData(GenDataArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: linear-probe classification/regression or
    /// reconstruction quality.
    Eval(EvalArgs),
    /// Reconstruct one clip through a chosen direction and export frames.
    Reconstruct(ReconstructArgs),
    /// Print checkpoint tensors and the config echo.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 125)]
    n_normal: usize,
    #[arg(long, default_value_t = 125)]
    n_abnormal: usize,
    #[arg(long, value_enum, default_value_t = AnomalyArg::Structural)]
    anomaly: AnomalyArg,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnomalyArg {
    Structural,
    Motion,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Output directory for metrics.json, features.csv, embedding2d.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write the memory banks as CSV.
    #[arg(long)]
    dump_banks: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Reg,
    Recon,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// An .echoclip file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    direction: DirectionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    /// Normal-to-abnormal (phi_a).
    A2b,
    /// Abnormal-to-normal (phi_b).
    B2a,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn main() -> ExitCode {
    // usage problems exit 1; --help/--version print normally and exit 0
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// CLI flag > config file > built-in default.
fn resolve_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<TrainConfig, Error> {
    let mut config = match cli_config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn print_resolved(config: &TrainConfig) {
    let json = serde_json::to_string(config).expect("config encodes");
    println!("resolved-config {json}");
    println!("resolved-seed {}", config.seed);
}

fn run(cli: Cli) -> Result<(), Error> {
    let parallel = !cli.deterministic;
    match cli.command {
        Command::GenData(args) => {
            let anomaly = match args.anomaly {
                AnomalyArg::Structural => AnomalyKind::Structural,
                AnomalyArg::Motion => AnomalyKind::Motion,
            };
            let mut config = GeneratorConfig::desk_default(anomaly);
            config.n_normal = args.n_normal;
            config.n_abnormal = args.n_abnormal;
            config.frames = args.frames;
            config.size = args.size;
            config.beat_period = args.frames.min(config.beat_period.max(1));
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let json = serde_json::to_string(&config).expect("config encodes");
            println!("resolved-config {json}");
            println!("resolved-seed {}", config.seed);
            let manifest = syndata::generate_dataset(&config, &args.out)?;
            println!(
                "gen-data wrote {} clips to {} (train/val/test = {}/{}/{})",
                manifest.clips.len(),
                args.out.display(),
                manifest.split("train").len(),
                manifest.split("val").len(),
                manifest.split("test").len()
            );
            Ok(())
        }
        Command::Train(args) => {
            let mut config = resolve_config(&cli.config, cli.seed)?;
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            print_resolved(&config);
            let dataset = Dataset::load(&args.data)?;
            let outcome = train::train(
                &config,
                &dataset,
                &args.out,
                args.resume.as_deref(),
                parallel,
            )?;
            for (epoch, report) in outcome.epoch_reports.iter().enumerate() {
                println!(
                    "epoch {epoch}: total {:.6} recon {:.6}/{:.6}",
                    report.total, report.recon_x, report.recon_y
                );
            }
            println!("losses {}", outcome.losses_csv.display());
            println!("final-checkpoint {}", outcome.final_checkpoint.display());
            Ok(())
        }
        Command::Eval(args) => {
            let state = load_checkpoint(&args.ckpt)?;
            print_resolved(&state.config);
            let dataset = Dataset::load(&args.data)?;
            std::fs::create_dir_all(&args.out)?;
            run_eval(&state, &dataset, args.task, &args.out, args.dump_banks, parallel)
        }
        Command::Reconstruct(args) => {
            let state = load_checkpoint(&args.ckpt)?;
            print_resolved(&state.config);
            let (clip, masks) = syndata::read_clip(&args.input)?;
            let pre = eval::preprocess_eval(&state, &clip)?;
            let direction = match args.direction {
                DirectionArg::A2b => Direction::AtoB,
                DirectionArg::B2a => Direction::BtoA,
            };
            let fwd = train::forward_generator(&state, &pre, direction, parallel)?;
            std::fs::create_dir_all(&args.out)?;
            let recon = syndata::VideoClip { frames: fwd.recon };
            write_frames_png(&recon, &args.out)?;
            // keep the raw clip alongside the frames; reuse the input masks
            // cropped to the preprocessed geometry when shapes agree
            let mask_out = if masks.dim().1 == recon.n_frames()
                && masks.dim().2 == recon.height()
                && masks.dim().3 == recon.width()
            {
                masks
            } else {
                ndarray::Array4::<u8>::zeros((
                    4,
                    recon.n_frames(),
                    recon.height(),
                    recon.width(),
                ))
            };
            syndata::write_clip(&args.out.join("reconstruction.echoclip"), &recon, &mask_out)?;
            println!(
                "reconstruct wrote {} frames to {}",
                recon.n_frames(),
                args.out.display()
            );
            Ok(())
        }
        Command::Inspect(args) => {
            let (config, tensors) = inspect_checkpoint(&args.ckpt)?;
            print_resolved(&config);
            for t in &tensors {
                let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                println!("{} [{}]", t.name, dims.join("x"));
            }
            println!("{} tensors", tensors.len());
            Ok(())
        }
    }
}

fn abnormal_class(dataset: &Dataset) -> ClipClass {
    match dataset.manifest.config.anomaly {
        AnomalyKind::Structural => ClipClass::Structural,
        AnomalyKind::Motion => ClipClass::Motion,
    }
}

fn run_eval(
    state: &ModelState<f32>,
    dataset: &Dataset,
    task: TaskArg,
    out: &Path,
    dump_banks: bool,
    parallel: bool,
) -> Result<(), Error> {
    let all: Vec<usize> = (0..dataset.manifest.clips.len()).collect();
    let features = eval::extract_features(state, dataset, &all, parallel)?;
    write_features_csv(dataset, &features, &out.join("features.csv"))?;
    let embedding = eval::pca_2d(&features)?;
    write_embedding_csv(dataset, &embedding, &out.join("embedding2d.csv"))?;
    if dump_banks {
        write_bank_csv(&state.bank_a.valid_rows(), &out.join("bank_a.csv"))?;
        write_bank_csv(&state.bank_b.valid_rows(), &out.join("bank_b.csv"))?;
    }

    let train_idx = dataset.indices("train", None);
    let test_idx = dataset.indices("test", None);
    let rows_for = |idxs: &[usize]| -> ndarray::Array2<f64> {
        let mut m = ndarray::Array2::zeros((idxs.len(), features.ncols()));
        for (r, &i) in idxs.iter().enumerate() {
            m.row_mut(r).assign(&features.row(i));
        }
        m
    };
    let abn = abnormal_class(dataset);

    let metrics = match task {
        TaskArg::Cls => {
            let train_x = rows_for(&train_idx);
            let train_y: Vec<f64> = train_idx
                .iter()
                .map(|&i| (dataset.manifest.clips[i].class == abn) as u8 as f64)
                .collect();
            let probe = eval::probe_fit(&train_x, &train_y, ProbeTask::Classification)?;
            let test_x = rows_for(&test_idx);
            let scores = probe.predict(&test_x);
            let labels: Vec<bool> = test_idx
                .iter()
                .map(|&i| dataset.manifest.clips[i].class == abn)
                .collect();
            eval::metrics_classification(scores.as_slice().expect("layout"), &labels)?
        }
        TaskArg::Reg => {
            let train_x = rows_for(&train_idx);
            let train_y: Vec<f64> = train_idx
                .iter()
                .map(|&i| dataset.manifest.clips[i].ef_analog)
                .collect();
            let probe = eval::probe_fit(&train_x, &train_y, ProbeTask::Regression)?;
            let test_x = rows_for(&test_idx);
            let preds = probe.predict(&test_x);
            let targets: Vec<f64> = test_idx
                .iter()
                .map(|&i| dataset.manifest.clips[i].ef_analog)
                .collect();
            eval::metrics_regression(preds.as_slice().expect("layout"), &targets)?
        }
        TaskArg::Recon => {
            // reconstruct test clips through the direction that maps them
            // back toward their own population's counterpart
            let mut recon_features = ndarray::Array2::zeros((test_idx.len(), features.ncols()));
            let mut dice_acc = 0.0;
            let mut dice_count = 0usize;
            for (r, &i) in test_idx.iter().enumerate() {
                let clip = eval::preprocess_eval(state, dataset.clip(i))?;
                let dir = if dataset.manifest.clips[i].class == abn {
                    Direction::BtoA
                } else {
                    Direction::AtoB
                };
                let fwd = train::forward_generator(state, &clip, dir, parallel)?;
                let recon = syndata::VideoClip { frames: fwd.recon };
                let pooled = eval::extract_recon_features(state, &recon, parallel)?;
                for (j, v) in pooled.iter().enumerate() {
                    recon_features[[r, j]] = *v;
                }
                let masks = dataset.masks(i)?;
                if masks.dim().1 == recon.n_frames()
                    && masks.dim().2 == recon.height()
                    && masks.dim().3 == recon.width()
                {
                    dice_acc += eval::dice_against_gt(&recon, &masks)?;
                    dice_count += 1;
                }
            }
            let real_features = rows_for(&test_idx);
            let ffd = eval::frechet_feature_distance(&recon_features, &real_features)?;
            eval::MetricReport {
                auc: None,
                acc: None,
                mae: None,
                frechet: Some(ffd),
                dice: (dice_count > 0).then(|| dice_acc / dice_count as f64),
                n_samples: test_idx.len(),
            }
        }
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Format(format!("metrics encode: {e}")))?;
    std::fs::write(out.join("metrics.json"), &json)?;
    println!("metrics {json}");
    Ok(())
}

fn write_features_csv(
    dataset: &Dataset,
    features: &ndarray::Array2<f64>,
    path: &Path,
) -> Result<(), Error> {
    let d = features.ncols();
    let mut s = String::from("id,split,class,ef_analog");
    for j in 0..d {
        s.push_str(&format!(",f{j}"));
    }
    s.push('\n');
    for (i, entry) in dataset.manifest.clips.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{:.9}",
            entry.id, entry.split, entry.class, entry.ef_analog
        ));
        for j in 0..d {
            s.push_str(&format!(",{:.9e}", features[[i, j]]));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_embedding_csv(
    dataset: &Dataset,
    embedding: &ndarray::Array2<f64>,
    path: &Path,
) -> Result<(), Error> {
    let mut s = String::from("id,split,class,x,y\n");
    for (i, entry) in dataset.manifest.clips.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{:.9e},{:.9e}\n",
            entry.id,
            entry.split,
            entry.class,
            embedding[[i, 0]],
            embedding[[i, 1]]
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_bank_csv(rows: &ndarray::ArrayView2<f32>, path: &Path) -> Result<(), Error> {
    let mut s = String::new();
    for row in rows.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_frames_png(clip: &syndata::VideoClip, out: &Path) -> Result<(), Error> {
    let (n, h, w, _) = clip.frames.dim();
    for t in 0..n {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (clip.frames[[t, y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        img.save(out.join(format!("frame_{t:03}.png")))
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    }
    Ok(())
}
