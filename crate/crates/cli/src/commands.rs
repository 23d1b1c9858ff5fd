use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pss_core::data::{load_cifar10, synth_split, Dataset, Normalizer, SynthConfig};
use pss_core::eval::{bench_csv, bench_iteration_time, keep_frequency, render_masks, sweep, BenchOptions, SweepOptions};
use pss_core::sampling::KeepRate;
use pss_core::train::{Checkpoint, Trainer};
use pss_core::vit::ViT;

use crate::config::{ConfigError, DatasetKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] pss_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(pss_core::Error::Config { .. }) => 2,
            CliError::Core(pss_core::Error::Checkpoint(pss_core::CheckpointError::Mismatch(_))) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| CliError::Usage(format!("`{key}` is required for this command")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{key}: no such file or directory: {}", p.display())));
    }
    Ok(p)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(pss_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Train and validation splits for the configured dataset.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let m = &cfg.model;
    let (train, val) = match cfg.dataset {
        DatasetKind::Synthetic => synth_split(
            &SynthConfig {
                num_classes: m.num_classes,
                n: cfg.synth_n,
                image_size: m.image_size,
                patch_size: m.patch_size,
                channels: m.channels,
                seed: cfg.seed,
            },
            cfg.synth_val,
        )?,
        DatasetKind::Cifar10 => load_cifar10(require_path(&cfg.data_dir, "data_dir")?)?,
        DatasetKind::Pssd => (
            Dataset::load(require_path(&cfg.train_file, "train_file")?)?,
            Dataset::load(require_path(&cfg.val_file, "val_file")?)?,
        ),
    };
    for ds in [&train, &val] {
        if ds.channels() != m.channels || ds.image_size() != m.image_size {
            return Err(ConfigError::Invalid {
                key: "image_size".into(),
                msg: format!(
                    "dataset {} has {}x{}x{} images, model expects {}x{}x{}",
                    ds.name,
                    ds.channels(),
                    ds.image_size(),
                    ds.image_size(),
                    m.channels,
                    m.image_size,
                    m.image_size
                ),
            }
            .into());
        }
        if ds.num_classes > m.num_classes {
            return Err(ConfigError::Invalid {
                key: "num_classes".into(),
                msg: format!("dataset {} has {} classes", ds.name, ds.num_classes),
            }
            .into());
        }
    }
    Ok((train, val))
}

fn load_model(cfg: &RunConfig, required: bool) -> Result<ViT<f32>> {
    let mut model = ViT::<f32>::new(cfg.model.clone(), cfg.seed)?;
    if required || cfg.checkpoint.is_some() {
        let path = require_path(&cfg.checkpoint, "checkpoint")?;
        Checkpoint::load(path)?.restore_params(&mut model.params)?;
    }
    Ok(model)
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let line = |cells: Vec<&str>, s: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  "));
    };
    line(header.to_vec(), &mut s);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut s);
    }
    s
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (train_set, val_set) = load_data(cfg)?;
    let ckpt_dir = cfg.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&cfg.out.join("config.cfg"), cfg.to_text())?;
    if cfg.dump_data {
        train_set.save(&cfg.out.join("train.pssd"))?;
        val_set.save(&cfg.out.join("val.pssd"))?;
    }

    let model = ViT::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let metrics_path = cfg.out.join("metrics.csv");
    let file = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut trainer = Trainer::new(model, cfg.train_config(), &train_set, Some(&val_set))?.with_metrics_writer(BufWriter::new(file))?;
    let start = Instant::now();
    trainer.run()?;
    let wall = start.elapsed().as_secs_f64();
    trainer.save_checkpoint(&ckpt_dir.join("final.pssc"))?;

    let m = &trainer.metrics;
    let mut epochs = String::from("epoch,train_loss,val_accuracy\n");
    for e in &m.epochs {
        let _ = writeln!(
            epochs,
            "{},{},{}",
            e.epoch,
            e.train_loss,
            e.val_accuracy.map_or(String::new(), |a| a.to_string())
        );
    }
    write_file(&cfg.out.join("epochs.csv"), epochs)?;
    println!(
        "final_loss={:.6} val_accuracy={:.4} seconds={:.1} flops={:.4e}",
        m.final_loss().unwrap_or(f64::NAN),
        m.final_val_accuracy().unwrap_or(f64::NAN),
        wall,
        m.total_flops() as f64
    );
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg, true)?;
    let (train_set, val_set) = load_data(cfg)?;
    let norm = Normalizer::from_dataset(&train_set);
    let opts = SweepOptions {
        batch_size: cfg.eval_batch,
        timing_passes: cfg.timing_passes,
        timing_batches: 2,
        threads: cfg.threads,
    };
    let res = sweep(&model, &val_set, &norm, &cfg.rhos, cfg.sort_spec(), opts)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("sweep.csv"), res.to_csv())?;
    let rows: Vec<Vec<String>> = res
        .rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.2}", r.rho),
                r.k.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.1}", r.images_per_sec),
                format!("{:.3e}", r.flops as f64),
            ]
        })
        .collect();
    print!("{}", table(&["rho", "k", "accuracy", "images/s", "flops"], &rows));
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg, false)?;
    let (train_set, _) = load_data(cfg)?;
    let norm = Normalizer::from_dataset(&train_set);
    let opts = BenchOptions {
        batch_size: cfg.batch_size,
        warmup: cfg.bench_warmup,
        iterations: cfg.bench_iters,
        optim: cfg.optim,
        sort: cfg.sort_spec(),
    };
    let rows = bench_iteration_time(&model, &train_set, &norm, &cfg.rhos, opts)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("bench.csv"), bench_csv(&rows))?;
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.2}", r.rho),
                r.k.to_string(),
                if r.with_block { "yes" } else { "skip" }.to_string(),
                format!("{:.2}", 1e3 * r.median_seconds),
                format!("{:.2}", 1e3 * r.iqr()),
            ]
        })
        .collect();
    print!("{}", table(&["rho", "k", "block", "median ms", "iqr ms"], &cells));
    Ok(())
}

pub fn visualize(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg, true)?;
    let (train_set, val_set) = load_data(cfg)?;
    if let Some(&bad) = cfg.image_ids.iter().find(|&&i| i >= val_set.len()) {
        return Err(ConfigError::Invalid {
            key: "image_ids".into(),
            msg: format!("image {bad} out of range for {} validation images", val_set.len()),
        }
        .into());
    }
    let norm = Normalizer::from_dataset(&train_set);
    let mask_dir = cfg.out.join("masks");
    let paths = render_masks(&model, &val_set, &cfg.image_ids, &norm, &cfg.rhos, cfg.sort_spec(), &mask_dir)?;
    let freq_dir = cfg.out.join("keep_frequency");
    create_dir(&freq_dir)?;
    let mut rows = Vec::new();
    for &r in &cfg.rhos {
        let map = keep_frequency(&model, &val_set, &norm, KeepRate::new(r)?, cfg.sort_spec(), cfg.eval_batch)?;
        write_file(&freq_dir.join(format!("rho{r:.2}.csv")), map.to_csv())?;
        let (lo, hi) = map.freq.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &f| (lo.min(f), hi.max(f)));
        rows.push(vec![format!("{r:.2}"), format!("{:.4}", map.mean()), format!("{lo:.4}"), format!("{hi:.4}")]);
    }
    print!("{}", table(&["rho", "mean keep", "min cell", "max cell"], &rows));
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
