//! Command-line front end for the vessel segmentation pipeline.

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use vesselseg::augment::AugmentConfig;
use vesselseg::compound::{self, CompoundConfig};
use vesselseg::error::Error;
use vesselseg::metrics;
use vesselseg::phantom::{self, PhantomConfig};
use vesselseg::train::{self, Manifest, ManifestEntry, TrainConfig};
use vesselseg::unet::{self, UNetConfig};
use vesselseg::volume::{self, PreprocessConfig};
use vesselseg::{parallel, Result};

#[derive(Parser)]
#[command(name = "vesselseg", version, about = "Hepatic vessel segmentation for 3D freehand ultrasound")]
struct Cli {
    /// JSON configuration file overriding built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Print the resolved configuration with value origins and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a voxel volume from a tracked 2D frame stream.
    Compound {
        /// Directory holding index.txt and the frame images.
        frames_dir: PathBuf,
        /// Output volume header (.mhd).
        output: PathBuf,
        /// Also write the binary coverage map here.
        #[arg(long)]
        coverage: Option<PathBuf>,
        /// Isotropic voxel spacing override.
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// Resample, median-filter, normalize and pad a volume.
    Preprocess {
        input: PathBuf,
        output: PathBuf,
        /// Resample factor override in (0, 1].
        #[arg(long)]
        factor: Option<f64>,
    },
    /// Generate synthetic vessel phantoms and a dataset manifest.
    Phantom {
        out_dir: PathBuf,
        /// Training volumes to generate.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Held-out validation volumes to generate.
        #[arg(long, default_value_t = 0)]
        val_count: usize,
    },
    /// Train the network on a dataset manifest.
    Train {
        manifest: PathBuf,
        out_dir: PathBuf,
    },
    /// Segment a volume with trained parameters.
    Infer {
        params: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Probability threshold override.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare predicted segmentations against ground truth. Accepts either
    /// two volumes or two directories paired by matching .mhd file names.
    Evaluate {
        pred: PathBuf,
        truth: PathBuf,
        /// Write TP/FP/FN overlay volumes here (a file for single-pair
        /// input, a directory for directory input).
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Write the report as CSV here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct AppConfig {
    compound: CompoundConfig,
    preprocess: PreprocessConfig,
    augment: AugmentConfig,
    unet: UNetConfig,
    train: TrainConfig,
    phantom: PhantomConfig,
}

/// Keys whose built-in defaults reproduce the published pipeline settings
/// rather than implementation choices of this crate.
const PAPER_KEYS: &[&str] = &[
    "preprocess.resample_factor",
    "preprocess.median_filter",
    "preprocess.normalize",
    "preprocess.pad_margin",
    "augment.rot_deg",
    "augment.scale_frac",
    "augment.elastic_sd",
    "augment.elastic_grid_spacing",
    "augment.patch_size",
    "augment.patches_per_volume",
    "unet.filter_divisor",
    "train.learning_rate",
    "train.l1_weight",
    "train.batch_size",
];

/// Emits the fully resolved configuration as canonical JSON; every leaf is
/// `{"value": ..., "origin": "paper" | "default" | "config"}`.
fn print_config(cfg: &AppConfig) -> Result<()> {
    let resolved = serde_json::to_value(cfg)?;
    let defaults = serde_json::to_value(AppConfig::default())?;
    let mut annotated = serde_json::Map::new();
    for (section, values) in resolved.as_object().unwrap() {
        let mut sec = serde_json::Map::new();
        for (key, value) in values.as_object().unwrap() {
            let path = format!("{section}.{key}");
            let origin = if defaults[section][key] != *value {
                "config"
            } else if PAPER_KEYS.contains(&path.as_str()) {
                "paper"
            } else {
                "default"
            };
            sec.insert(
                key.clone(),
                serde_json::json!({ "value": value, "origin": origin }),
            );
        }
        annotated.insert(section.clone(), serde_json::Value::Object(sec));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::Value::Object(annotated))?
    );
    Ok(())
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.augment.seed = seed;
        cfg.phantom.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.threads > 0 {
        parallel::set_threads(cli.threads);
    }
    if cli.print_config {
        return print_config(&cfg);
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidConfig(
            "a subcommand is required (see --help)".into(),
        ));
    };
    match command {
        Command::Compound {
            frames_dir,
            output,
            coverage,
            spacing,
        } => {
            if !frames_dir.join("index.txt").exists() {
                return Err(Error::InvalidConfig(format!(
                    "frame index not found: {}",
                    frames_dir.join("index.txt").display()
                )));
            }
            let frames = compound::read_frame_stream(&frames_dir)?;
            let mut ccfg = cfg.compound.clone();
            if let Some(s) = spacing {
                ccfg.voxel_spacing = s;
            }
            let out = compound::compound(&frames, &ccfg)?;
            volume::write_volume(&out.volume, &output)?;
            if let Some(cov) = coverage {
                volume::write_volume(&out.coverage, &cov)?;
            }
            println!(
                "compounded {} frames into {:?} voxels -> {}",
                frames.len(),
                out.volume.dims,
                output.display()
            );
        }
        Command::Preprocess { input, output, factor } => {
            let vol = volume::read_volume(&input)?;
            let mut pcfg = cfg.preprocess.clone();
            if let Some(f) = factor {
                pcfg.resample_factor = f;
            }
            let out = volume::preprocess(&vol, &pcfg)?;
            volume::write_volume(&out, &output)?;
            println!("preprocessed {:?} -> {:?} ({})", vol.dims, out.dims, output.display());
        }
        Command::Phantom {
            out_dir,
            count,
            val_count,
        } => {
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let mut entries = Vec::new();
            for i in 0..count + val_count {
                let pcfg = PhantomConfig {
                    seed: cfg.phantom.seed.wrapping_add(i as u64),
                    ..cfg.phantom.clone()
                };
                let (image, label) = phantom::generate(&pcfg)?;
                let (img_name, lbl_name) = (format!("p{i}_image.mhd"), format!("p{i}_label.mhd"));
                volume::write_volume(&image, &out_dir.join(&img_name))?;
                volume::write_volume(&label, &out_dir.join(&lbl_name))?;
                entries.push(ManifestEntry {
                    id: format!("p{i}"),
                    image: img_name,
                    label: lbl_name,
                    split: if i < count { "train" } else { "val" }.into(),
                });
            }
            let manifest = Manifest { entries };
            train::write_manifest(&manifest, &out_dir.join("manifest.json"))?;
            println!(
                "generated {count} train / {val_count} val phantoms in {}",
                out_dir.display()
            );
        }
        Command::Train { manifest, out_dir } => {
            let dataset = train::load_dataset(&manifest)?;
            let out = train::train(&dataset, &cfg.unet, &cfg.augment, &cfg.train, Some(&out_dir))?;
            let steps = out.history.len();
            let last_val = out.history.iter().rev().find_map(|r| r.val_dice);
            match last_val {
                Some(v) => println!("trained {steps} steps, final val dice {v:.4}"),
                None => println!("trained {steps} steps"),
            }
        }
        Command::Infer {
            params,
            input,
            output,
            threshold,
        } => {
            let net = unet::load_params(&params, &cfg.unet)?;
            let vol = volume::read_volume(&input)?;
            let tile = cfg.augment.patch_size;
            let overlap = cfg.train.val_overlap.min(tile.iter().copied().min().unwrap() - 8);
            let thr = threshold.unwrap_or(cfg.train.threshold);
            let seg = unet::infer_volume(&net, &vol, tile, overlap, thr)?;
            volume::write_volume(&seg, &output)?;
            let fg = seg.data.iter().filter(|&&v| v != 0.0).count();
            println!("segmented {:?}, {fg} foreground voxels -> {}", seg.dims, output.display());
        }
        Command::Evaluate {
            pred,
            truth,
            overlay,
            report,
        } => {
            let pairs: Vec<(PathBuf, PathBuf, String)> = if pred.is_dir() {
                if !truth.is_dir() {
                    return Err(Error::InvalidConfig(
                        "pred is a directory but truth is not".into(),
                    ));
                }
                let mut names: Vec<String> = fs::read_dir(&pred)
                    .map_err(|e| Error::io(&pred, e))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .filter(|n| n.ends_with(".mhd"))
                    .collect();
                names.sort();
                names
                    .into_iter()
                    .map(|n| {
                        let id = n.trim_end_matches(".mhd").to_string();
                        (pred.join(&n), truth.join(&n), id)
                    })
                    .collect()
            } else {
                let id = pred
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "volume".into());
                vec![(pred.clone(), truth.clone(), id)]
            };
            if pairs.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let multi = pairs.len() > 1 || pred.is_dir();
            if let (Some(dir), true) = (&overlay, multi) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut reports = Vec::new();
            for (ppath, tpath, id) in &pairs {
                let p = volume::read_volume(ppath)?;
                let t = volume::read_volume(tpath)?;
                reports.push(metrics::evaluate(&p, &t, id)?);
                if let Some(opath) = &overlay {
                    let target = if multi {
                        opath.join(format!("{id}.mhd"))
                    } else {
                        opath.clone()
                    };
                    volume::write_volume(&metrics::overlay(&p, &t)?, &target)?;
                }
            }
            if let Some(path) = report {
                volume::atomic_write(&path, metrics::reports_to_csv(&reports).as_bytes())?;
            }
            if multi {
                let agg = metrics::aggregate(&reports)?;
                println!("{}", serde_json::to_string(&agg)?);
            } else {
                println!("{}", serde_json::to_string(&reports[0])?);
            }
        }
    }
    Ok(())
}

/// 0 success, 1 runtime failure, 2 configuration or usage error (clap uses 2
/// for parse failures on its own).
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidResampleFactor(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

