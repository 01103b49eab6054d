//! `chimera`: zero-shot segmentation training, evaluation and analysis.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use chimera_core::pipeline::evaluate::evaluate_model;
use chimera_core::pipeline::{
    analyze_cka, export_heatmap, make_toy_dataset, train, Checkpoint, DatasetManifest, HeatmapReference,
    TrainConfig,
};
use chimera_core::{load_weight_bundle, make_mini_clip, save_weight_bundle, Error, Image, MiniClipSpec, NormKind, SplitMode};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Parser)]
#[command(name = "chimera", version, about = "Zero-shot semantic segmentation with a frozen vision-language head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    MakeToyData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n_images: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        n_seen: usize,
        #[arg(long, default_value_t = 2)]
        n_unseen: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic miniature CLIP-like weight bundle.
    MakeMiniClip {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        d_vis: usize,
        #[arg(long, default_value_t = 32)]
        d_emb: usize,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
        /// Text file with one class name per line.
        #[arg(long)]
        classes_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint with calibrated inference.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Weight bundle; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Per-class CSV report; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Layer-by-layer CKA similarity for one normalization variant.
    AnalyzeCka {
        #[arg(long, value_parser = parse_norm)]
        norm: NormKind,
        /// Analyze this checkpoint (its normalization must match `--norm`).
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        /// Otherwise train this configuration with `--norm` first.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        positions: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Output prefix; writes `<out>.csv` and `<out>.png`.
        #[arg(long, default_value = "cka")]
        out: PathBuf,
    },
    /// Similarity heatmap between dense features and a class (or the image CLS token).
    Heatmap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_name: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Compare against the image CLS token instead of the class text embedding.
        #[arg(long)]
        use_cls: bool,
        /// Output prefix; writes `<out>.png` and `<out>.csv`.
        #[arg(long, default_value = "heatmap")]
        out: PathBuf,
    },
}

fn parse_norm(s: &str) -> Result<NormKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

fn load_checkpoint(path: &Path, bundle: Option<&Path>) -> anyhow::Result<(Checkpoint, chimera_core::ClipWeightBundle)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let bundle_dir = bundle.map(Path::to_path_buf).unwrap_or_else(|| ckpt.config.bundle.clone());
    let bundle = load_weight_bundle(&bundle_dir).with_context(|| format!("loading bundle {}", bundle_dir.display()))?;
    Ok((ckpt, bundle))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::MakeToyData {
            seed,
            n_images,
            image_size,
            n_seen,
            n_unseen,
            out,
        } => {
            let m = make_toy_dataset(seed, n_images, image_size, n_seen, n_unseen, &out)?;
            println!("wrote {} images, classes {:?}, to {}", m.len(), m.classes, out.display());
        }
        Command::MakeMiniClip {
            seed,
            d_vis,
            d_emb,
            patch_size,
            classes_file,
            out,
        } => {
            let text = std::fs::read_to_string(&classes_file)
                .with_context(|| format!("reading {}", classes_file.display()))?;
            let class_names: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let bundle = make_mini_clip(&MiniClipSpec {
                seed,
                d_vis,
                d_emb,
                patch_size,
                class_names,
            })?;
            let manifest = save_weight_bundle(&bundle, &out)?;
            println!("wrote {} tensors to {}", manifest.tensors.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let manifest = DatasetManifest::load(&cfg.dataset)?;
            let bundle = load_weight_bundle(&cfg.bundle)?;
            let out = train(&cfg, &manifest, &bundle)?;
            let last = out.log.last();
            println!(
                "trained {} iterations; final total loss {}; checkpoint {}",
                out.checkpoint.iteration,
                last.map_or("n/a".into(), |r| format!("{:.6}", r.total)),
                out.checkpoint_paths.last().expect("final checkpoint").display()
            );
        }
        Command::Eval {
            checkpoint,
            gamma,
            dataset,
            bundle,
            report,
        } => {
            let (ckpt, bundle) = load_checkpoint(&checkpoint, bundle.as_deref())?;
            let dataset = dataset.unwrap_or_else(|| ckpt.config.dataset.clone());
            let manifest = DatasetManifest::load(&dataset)?;
            let model = ckpt.restore(&bundle)?;
            let split = manifest.split(SplitMode::Inductive)?;
            let samples = manifest.load_samples()?;
            let (metrics, _) = evaluate_model(&model, &bundle, &samples, &split, gamma)?;
            match report {
                Some(path) => metrics.save_csv(&path)?,
                None => metrics.write_csv(std::io::stdout())?,
            }
            println!("gamma={gamma} {}", metrics.summary_line());
        }
        Command::AnalyzeCka {
            norm,
            checkpoint,
            config,
            positions,
            images,
            dataset,
            bundle,
            out,
        } => {
            let (model, bundle, dataset_dir, seed) = match (checkpoint, config) {
                (Some(path), _) => {
                    let (ckpt, bundle) = load_checkpoint(&path, bundle.as_deref())?;
                    if ckpt.csh_config.norm != norm {
                        bail!(
                            "checkpoint uses normalization `{}`, not `{}`",
                            ckpt.csh_config.norm.as_str(),
                            norm.as_str()
                        );
                    }
                    let dir = dataset.unwrap_or_else(|| ckpt.config.dataset.clone());
                    (ckpt.restore(&bundle)?, bundle, dir, ckpt.config.seed)
                }
                (None, Some(path)) => {
                    let mut cfg = TrainConfig::load(&path)?;
                    cfg.csh.norm = norm;
                    cfg.output_dir = cfg.output_dir.join(format!("norm-{}", norm.as_str()));
                    if let Some(b) = &bundle {
                        cfg.bundle = b.clone();
                    }
                    let bundle = load_weight_bundle(&cfg.bundle)?;
                    let manifest = DatasetManifest::load(&cfg.dataset)?;
                    let trained = train(&cfg, &manifest, &bundle)?;
                    let dir = dataset.unwrap_or_else(|| cfg.dataset.clone());
                    (trained.checkpoint.restore(&bundle)?, bundle, dir, cfg.seed)
                }
                (None, None) => unreachable!("clap requires one of --checkpoint/--config"),
            };
            let manifest = DatasetManifest::load(&dataset_dir)?;
            let mut samples = manifest.load_samples()?;
            samples.truncate(images);
            let report = analyze_cka(&model, &bundle, &samples, positions, seed)?;
            let (csv, png) = (with_extension(&out, "csv"), with_extension(&out, "png"));
            report.save_csv(&csv)?;
            report.save_png(&png, 16)?;
            println!("{} layers; wrote {} and {}", report.layers.len(), csv.display(), png.display());
        }
        Command::Heatmap {
            image,
            class_name,
            checkpoint,
            bundle,
            use_cls,
            out,
        } => {
            let (ckpt, bundle) = load_checkpoint(&checkpoint, bundle.as_deref())?;
            let model = ckpt.restore(&bundle)?;
            let img = Image::load_png(&image)?;
            let reference = if use_cls {
                HeatmapReference::ImageCls
            } else {
                HeatmapReference::ClassText
            };
            let heat = export_heatmap(&model, &bundle, &img, &class_name, reference)?;
            let (csv, png) = (with_extension(&out, "csv"), with_extension(&out, "png"));
            heat.save_png(&png)?;
            heat.save_csv(&csv)?;
            println!("{}×{} heatmap; wrote {} and {}", heat.height, heat.width, png.display(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            let numeric = err
                .chain()
                .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::NonFiniteLoss { .. })));
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}
