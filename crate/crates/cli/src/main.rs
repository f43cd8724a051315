//! `padm`: dataset generation, training, sampling and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradkit::Tensor;
use padm_core::harness::checkpoint::Checkpoint;
use padm_core::harness::dataset::Dataset;
use padm_core::harness::manifest::{Split, MANIFEST_FILE};
use padm_core::harness::metrics::{ImageMetrics, MetricsReport};
use padm_core::harness::pgm::write_pgm;
use padm_core::harness::preprocess::normalize;
use padm_core::harness::stamp::Stamp;
use padm_core::harness::tensorfile::{read_f64, write_tensor};
use padm_core::image::Image;
use padm_core::phantom::{make_dataset, DatasetOptions, SpecRanges};
use padm_core::projector::NoiseModel;
use padm_core::trainer::{distill_student, predict, train_teacher, TrainConfig};
use padm_core::{PadmError, Result};
use rayon::prelude::*;

const STAMP_FILE: &str = "stamp.json";
/// Field of view of generated phantoms, cm.
const FOV_CM: f64 = 25.6;

#[derive(Parser)]
#[command(name = "padm", version, about = "Physics-aware diffusion for SPECT attenuation correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Gen {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        angles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        mlem_iters: usize,
        /// Poisson counts per unit projection; noise-free when omitted.
        #[arg(long)]
        counts_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher on a generated dataset.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; missing fields take desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distil a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample AC estimates for one split of a dataset.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory or manifest.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Directory of `<id>.padt` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>.padt` targets, or a dataset whose AC images are used.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "model")]
        label: String,
        /// Append rows to an existing report instead of replacing it.
        #[arg(long)]
        append: bool,
    },
    /// Write PADT images as 8-bit PGM, windowed to [-1, 1].
    ExportPgm {
        /// A `.padt` file or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalise raw intensities by `2v/vmax − 1` first.
        #[arg(long)]
        vmax: Option<f64>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}`")),
    }
}

fn exit_code(e: &PadmError) -> u8 {
    match e {
        PadmError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        PadmError::ConfigMismatch(_) | PadmError::MissingMu(_) => 4,
        _ => 1,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| PadmError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| PadmError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PadmError::Io {
            path: path.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        })
    }
}

/// Reads a square 2-D image, accepting `[n, n]` or `[1, 1, n, n]`.
fn read_square(path: &Path) -> Result<(usize, Vec<f64>)> {
    let t = read_f64(path)?;
    let side = match *t.shape() {
        [a, b] | [1, 1, a, b] if a == b => a,
        _ => {
            return Err(PadmError::Format {
                path: path.to_path_buf(),
                detail: format!("expected a square image, got shape {:?}", t.shape()),
            })
        }
    };
    Ok((side, t.into_data()))
}

fn padt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| PadmError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "padt"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            count,
            size,
            angles,
            seed,
            mlem_iters,
            counts_scale,
            out,
        } => {
            let ranges = SpecRanges::desk(size, FOV_CM / size as f64);
            let options = DatasetOptions {
                n_angles: angles,
                mlem_iters,
                noise: counts_scale.map(|counts_scale| NoiseModel { counts_scale }),
                ..DatasetOptions::default()
            };
            let manifest = make_dataset(count, &ranges, seed, &out, &options)?;
            let config = serde_json::json!({
                "count": count, "size": size, "angles": angles, "mlem_iters": mlem_iters,
                "counts_scale": counts_scale, "normalization": manifest.normalization,
            });
            Stamp::new("gen", Some(seed), config).write(&out.join(STAMP_FILE))
        }
        Command::TrainTeacher { data, config, out } => {
            let cfg = read_config(config.as_deref())?;
            let dataset = Dataset::load(&data, None, cfg.model.image_size)?;
            create_dir(&out)?;
            let outcome = train_teacher(&dataset, &cfg, Some(&out))?;
            eprintln!("best epoch {} val rmse {:.5}", outcome.best_epoch, outcome.best_val_rmse);
            Stamp::new("train-teacher", Some(cfg.seed), serde_json::to_value(&cfg)?).write(&out.join(STAMP_FILE))
        }
        Command::Distill {
            teacher,
            data,
            config,
            out,
        } => {
            let cfg = read_config(config.as_deref())?;
            let teacher = Checkpoint::read(&teacher)?;
            let dataset = Dataset::load(&data, None, cfg.model.image_size)?;
            create_dir(&out)?;
            let outcome = distill_student(&teacher, &dataset, &cfg, Some(&out))?;
            eprintln!("best epoch {} val rmse {:.5}", outcome.best_epoch, outcome.best_val_rmse);
            Stamp::new("distill", Some(cfg.seed), serde_json::to_value(&cfg)?).write(&out.join(STAMP_FILE))
        }
        Command::Sample {
            model,
            input,
            steps,
            split,
            out,
        } => {
            let ckpt = Checkpoint::read(&model)?;
            ckpt.verify()?;
            let side = ckpt.model.config.image_size;
            let dataset = Dataset::load(&input, None, side)?;
            let pairs = dataset.split(split);
            let sched = ckpt.schedule.build()?;
            let predictions = predict(&ckpt.model, &ckpt.params, &pairs, side, &sched, steps)?;
            create_dir(&out)?;
            for (pair, pred) in pairs.iter().zip(predictions.chunks(side * side)) {
                let t = Tensor::from_vec(vec![side, side], pred.to_vec())?;
                write_tensor(&out.join(format!("{}.padt", pair.id)), &t)?;
            }
            let config = serde_json::json!({
                "model": model, "input": input, "steps": steps, "split": split,
                "role": ckpt.model.role, "schedule": ckpt.schedule,
            });
            Stamp::new("sample", None, config).write(&out.join(STAMP_FILE))
        }
        Command::Eval {
            pred,
            gt,
            csv,
            label,
            append,
        } => {
            let preds = padt_files(&pred)?;
            if preds.is_empty() {
                return Err(PadmError::InvalidConfig(format!("no .padt files in {}", pred.display())));
            }
            let (side, _) = read_square(&preds[0])?;
            let targets: Option<BTreeMap<String, Vec<f32>>> = if gt.join(MANIFEST_FILE).exists() || gt.is_file() {
                let ds = Dataset::load(&gt, None, side)?;
                Some(ds.pairs.into_iter().map(|p| (p.id, p.x0)).collect())
            } else {
                require(&gt)?;
                None
            };
            let rows = preds
                .par_iter()
                .map(|path| {
                    let id = stem(path);
                    let (n, p) = read_square(path)?;
                    let g: Vec<f64> = match &targets {
                        Some(map) => map
                            .get(&id)
                            .ok_or_else(|| PadmError::ConfigMismatch(format!("no ground truth for `{id}`")))?
                            .iter()
                            .map(|&v| v as f64)
                            .collect(),
                        None => {
                            let target = gt.join(path.file_name().expect("file name"));
                            require(&target)?;
                            read_square(&target)?.1
                        }
                    };
                    if n != side || g.len() != p.len() {
                        return Err(PadmError::ConfigMismatch(format!("`{id}` does not match the {side}×{side} grid")));
                    }
                    ImageMetrics::compute(id, &p, &g, side)
                })
                .collect::<Result<Vec<_>>>()?;
            let config = serde_json::json!({ "pred": pred, "gt": gt });
            let report = MetricsReport::new(label.clone(), side, rows, config.clone());
            let fresh = !(append && csv.exists());
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&csv)
                .map_err(|source| PadmError::Io {
                    path: csv.clone(),
                    source,
                })?;
            let mut w = csv::Writer::from_writer(file);
            if fresh {
                w.write_record(MetricsReport::CSV_HEADER)?;
            }
            report.write_csv(&mut w)?;
            w.flush().map_err(|source| PadmError::Io {
                path: csv.clone(),
                source,
            })?;
            let a = report.aggregate;
            println!("{label}: rmse {:.5} ssim {:.4} psnr {:.2} ({} images)", a.rmse, a.ssim, a.psnr, report.count);
            let mut stamp_path = csv.clone().into_os_string();
            stamp_path.push(".stamp.json");
            Stamp::new("eval", None, config).write(Path::new(&stamp_path))
        }
        Command::ExportPgm { input, out, vmax } => {
            require(&input)?;
            let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
                create_dir(&out)?;
                padt_files(&input)?
                    .into_iter()
                    .map(|p| {
                        let target = out.join(format!("{}.pgm", stem(&p)));
                        (p, target)
                    })
                    .collect()
            } else {
                vec![(input.clone(), out.clone())]
            };
            for (src, dst) in &jobs {
                let (side, mut data) = read_square(src)?;
                if let Some(vmax) = vmax {
                    data = normalize(&Image::new(side, 1.0, data)?, vmax)?.into_data();
                }
                write_pgm(dst, side, side, &data)?;
            }
            let config = serde_json::json!({ "in": input, "out": out, "vmax": vmax, "files": jobs.len() });
            let stamp_path = if input.is_dir() {
                out.join(STAMP_FILE)
            } else {
                let mut p = out.clone().into_os_string();
                p.push(".stamp.json");
                PathBuf::from(p)
            };
            Stamp::new("export-pgm", None, config).write(&stamp_path)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("PADM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("padm: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
