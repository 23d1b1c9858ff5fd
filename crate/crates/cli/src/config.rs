//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Later sources override earlier
//! ones: defaults, then the config file, then `--set` and the dedicated
//! flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pss_core::data::BatchPlan;
use pss_core::sampling::{KeepRate, SortKind, SortSpec};
use pss_core::schedule::{ScheduleKind, ScheduleSpec, DEFAULT_LEVELS};
use pss_core::train::{AdamWConfig, TrainConfig};
use pss_core::vit::ViTConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    Syntax { path: PathBuf, line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice in the config file")]
    Duplicate(String),
    #[error("invalid value {value:?} for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("invalid configuration `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Pssd,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "pssd" => Ok(DatasetKind::Pssd),
            _ => Err("expected synthetic, cifar10 or pssd".into()),
        }
    }
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Pssd => "pssd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,

    pub epochs: usize,
    pub batch_size: usize,
    pub drop_last: bool,
    pub optim: AdamWConfig,
    pub warmup_iters: Option<usize>,
    pub min_lr: f64,
    pub label_smoothing: f64,
    pub checkpoint_every: usize,
    pub eval_every_epoch: bool,
    pub sampling_block: bool,

    pub schedule: ScheduleKind,
    pub rho: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub num_levels: usize,
    pub sort: SortKind,

    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_file: Option<PathBuf>,
    pub val_file: Option<PathBuf>,
    pub synth_n: usize,
    pub synth_val: usize,
    pub dump_data: bool,

    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,

    pub checkpoint: Option<PathBuf>,
    pub rhos: Vec<f64>,
    pub image_ids: Vec<usize>,
    pub eval_batch: usize,
    pub timing_passes: usize,
    pub bench_warmup: usize,
    pub bench_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ViTConfig::default(),
            epochs: 10,
            batch_size: 64,
            drop_last: true,
            optim: AdamWConfig::default(),
            warmup_iters: None,
            min_lr: 1e-5,
            label_smoothing: 0.0,
            checkpoint_every: 0,
            eval_every_epoch: true,
            sampling_block: true,
            schedule: ScheduleKind::Cyclic,
            rho: 0.6,
            rho_min: 0.2,
            rho_max: 1.0,
            num_levels: DEFAULT_LEVELS,
            sort: SortKind::Magnitude,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            train_file: None,
            val_file: None,
            synth_n: 2000,
            synth_val: 500,
            dump_data: false,
            seed: 0,
            out: PathBuf::from("out"),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            checkpoint: None,
            rhos: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2],
            image_ids: vec![0, 1, 2, 3],
            eval_batch: 128,
            timing_passes: 3,
            bench_warmup: 3,
            bench_iters: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: ToString,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            msg: "expected true or false".into(),
        }),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Defaults, then `path` if given, then each `KEY=VALUE` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            cfg.apply_text(&text, path)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: PathBuf::from("--set"),
                line: 0,
                text: o.clone(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_path_buf(),
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = parse(key, v)?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "depth" => m.depth = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "rel_bias" => m.use_rel_bias = parse_bool(key, v)?,
            "abs_pos" => m.use_abs_pos = parse_bool(key, v)?,

            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "drop_last" => self.drop_last = parse_bool(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "eps" => self.optim.eps = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = if v == "auto" { None } else { Some(parse(key, v)?) },
            "min_lr" => self.min_lr = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval_every_epoch" => self.eval_every_epoch = parse_bool(key, v)?,
            "sampling_block" => self.sampling_block = parse_bool(key, v)?,

            "schedule" => self.schedule = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "rho_min" => self.rho_min = parse(key, v)?,
            "rho_max" => self.rho_max = parse(key, v)?,
            "num_levels" => self.num_levels = parse(key, v)?,
            "sort" => self.sort = parse(key, v)?,

            "dataset" => self.dataset = parse(key, v)?,
            "data_dir" => self.data_dir = optional_path(v),
            "train_file" => self.train_file = optional_path(v),
            "val_file" => self.val_file = optional_path(v),
            "synth_n" => self.synth_n = parse(key, v)?,
            "synth_val" => self.synth_val = parse(key, v)?,
            "dump_data" => self.dump_data = parse_bool(key, v)?,

            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,

            "checkpoint" => self.checkpoint = optional_path(v),
            "rhos" => self.rhos = parse_list(key, v)?,
            "image_ids" => self.image_ids = parse_list(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "timing_passes" => self.timing_passes = parse(key, v)?,
            "bench_warmup" => self.bench_warmup = parse(key, v)?,
            "bench_iters" => self.bench_iters = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Cross-field checks, re-run after every source has been applied.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(core_invalid)?;
        self.train_config().validate().map_err(core_invalid)?;
        self.schedule_spec().validate().map_err(core_invalid)?;
        if self.threads == 0 {
            return Err(invalid("threads", "must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(invalid("eval_batch", "must be positive"));
        }
        if self.timing_passes < 3 {
            return Err(invalid("timing_passes", "at least 3 timed passes are required"));
        }
        if self.bench_iters == 0 {
            return Err(invalid("bench_iters", "must be positive"));
        }
        if self.rhos.is_empty() {
            return Err(invalid("rhos", "empty list"));
        }
        if let Some(r) = self.rhos.iter().find(|&&r| KeepRate::new(r).is_err()) {
            return Err(invalid("rhos", format!("{r} is outside (0, 1]")));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.model.num_classes < 2 {
                    return Err(invalid("num_classes", "synthetic data needs at least 2 classes"));
                }
                if self.synth_n == 0 || self.synth_val == 0 {
                    return Err(invalid(if self.synth_n == 0 { "synth_n" } else { "synth_val" }, "must be positive"));
                }
            }
            DatasetKind::Cifar10 => {
                if self.data_dir.is_none() {
                    return Err(invalid("data_dir", "required for dataset = cifar10"));
                }
                let m = &self.model;
                if m.image_size != 32 || m.channels != 3 || m.num_classes < 10 {
                    return Err(invalid("image_size", "cifar10 needs image_size = 32, channels = 3, num_classes >= 10"));
                }
            }
            DatasetKind::Pssd => {
                if self.train_file.is_none() {
                    return Err(invalid("train_file", "required for dataset = pssd"));
                }
                if self.val_file.is_none() {
                    return Err(invalid("val_file", "required for dataset = pssd"));
                }
            }
        }
        Ok(())
    }

    pub fn sort_spec(&self) -> SortSpec {
        match self.sort {
            SortKind::Magnitude => SortSpec::magnitude(),
            SortKind::Random => SortSpec::random(self.seed),
        }
    }

    /// Schedule with placeholder iteration counts; the trainer fills them in.
    pub fn schedule_spec(&self) -> ScheduleSpec {
        match self.schedule {
            ScheduleKind::Baseline => ScheduleSpec::baseline(1, 1),
            ScheduleKind::Fixed => ScheduleSpec::fixed(self.rho, 1, 1),
            ScheduleKind::Linear => ScheduleSpec::linear(self.rho_min, self.rho_max, self.num_levels, 1, 1),
            ScheduleKind::Cyclic => ScheduleSpec::cyclic(self.rho_min, self.rho_max, self.num_levels, 1, 1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: BatchPlan {
                batch_size: self.batch_size,
                seed: self.seed,
                drop_last: self.drop_last,
            },
            optim: self.optim,
            warmup_iters: self.warmup_iters,
            min_lr: self.min_lr,
            label_smoothing: self.label_smoothing,
            schedule: self.schedule_spec(),
            sort: self.sort_spec(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: Some(self.out.join("checkpoints")),
            sampling_block: self.sampling_block,
            eval_every_epoch: self.eval_every_epoch,
        }
    }

    /// The fully resolved configuration in file form.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("image_size", m.image_size.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("channels", m.channels.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("heads", m.heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("rel_bias", m.use_rel_bias.to_string()),
            ("abs_pos", m.use_abs_pos.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("drop_last", self.drop_last.to_string()),
            ("lr", self.optim.lr.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("eps", self.optim.eps.to_string()),
            ("warmup_iters", self.warmup_iters.map_or("auto".into(), |w| w.to_string())),
            ("min_lr", self.min_lr.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every_epoch", self.eval_every_epoch.to_string()),
            ("sampling_block", self.sampling_block.to_string()),
            ("schedule", self.schedule.to_string()),
            ("rho", self.rho.to_string()),
            ("rho_min", self.rho_min.to_string()),
            ("rho_max", self.rho_max.to_string()),
            ("num_levels", self.num_levels.to_string()),
            ("sort", self.sort.to_string()),
            ("dataset", self.dataset.name().to_string()),
            ("data_dir", path(&self.data_dir)),
            ("train_file", path(&self.train_file)),
            ("val_file", path(&self.val_file)),
            ("synth_n", self.synth_n.to_string()),
            ("synth_val", self.synth_val.to_string()),
            ("dump_data", self.dump_data.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("rhos", join(&self.rhos)),
            ("image_ids", join(&self.image_ids)),
            ("eval_batch", self.eval_batch.to_string()),
            ("timing_passes", self.timing_passes.to_string()),
            ("bench_warmup", self.bench_warmup.to_string()),
            ("bench_iters", self.bench_iters.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn core_invalid(e: pss_core::Error) -> ConfigError {
    match e {
        pss_core::Error::Config { key, msg } => ConfigError::Invalid { key, msg },
        other => invalid("config", other.to_string()),
    }
}
