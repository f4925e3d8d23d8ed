//! Flat `key = value` run configuration and manifests.

use std::path::{Path, PathBuf};

use dynexec::nn::checkpoint::Precision;
use dynexec::trainer::TrainConfig;
use sha2::{Digest, Sha256};

/// Every recognised key, in manifest order.
pub const KEYS: &[&str] = &[
    "dataset",
    "arch",
    "p",
    "batch_size",
    "epochs",
    "finetune_epochs",
    "lr0",
    "momentum",
    "weight_decay",
    "seed",
    "selection",
    "pipeline",
    "freeze_epoch",
    "init_strategy",
    "precision",
    "min_per_layer",
    "train_per_class",
    "test_per_class",
    "augment",
    "flop_convention",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), ToString::to_string)
}

pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    let value = value.trim();
    match key {
        "dataset" => cfg.dataset = parse(key, value)?,
        "arch" => cfg.arch = value.to_string(),
        "p" => cfg.p = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "finetune_epochs" => cfg.finetune_epochs = parse_opt(key, value)?,
        "lr0" => cfg.lr0 = parse(key, value)?,
        "momentum" => cfg.momentum = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "selection" => cfg.selection = parse(key, value)?,
        "pipeline" => cfg.pipeline = parse(key, value)?,
        "freeze_epoch" => cfg.freeze_epoch = parse(key, value)?,
        "init_strategy" => cfg.init_strategy = parse(key, value)?,
        "precision" => {
            cfg.precision = match value {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(format!("precision: expected f32 or f64, got {other:?}")),
            }
        }
        "min_per_layer" => cfg.min_per_layer = parse(key, value)?,
        "train_per_class" => cfg.train_per_class = parse_opt(key, value)?,
        "test_per_class" => cfg.test_per_class = parse_opt(key, value)?,
        "augment" => cfg.augment = parse_opt(key, value)?,
        "flop_convention" => cfg.flop_convention = parse(key, value)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

/// All keys with materialized values, one `key=value` per line.
pub fn render(cfg: &TrainConfig) -> String {
    let flops = match cfg.flop_convention {
        dynexec::surgeon::FlopConvention::MacsOnly => "macs",
        dynexec::surgeon::FlopConvention::WithElementwise => "macs+elementwise",
    };
    let precision = match cfg.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    let values: Vec<String> = vec![
        cfg.dataset.to_string(),
        cfg.arch.clone(),
        cfg.p.to_string(),
        cfg.batch_size.to_string(),
        cfg.epochs.to_string(),
        opt(&cfg.finetune_epochs, "none"),
        cfg.lr0.to_string(),
        cfg.momentum.to_string(),
        cfg.weight_decay.to_string(),
        cfg.seed.to_string(),
        cfg.selection.to_string(),
        cfg.pipeline.to_string(),
        cfg.freeze_epoch.to_string(),
        cfg.init_strategy.to_string(),
        precision.to_string(),
        cfg.min_per_layer.to_string(),
        opt(&cfg.train_per_class, "none"),
        opt(&cfg.test_per_class, "none"),
        opt(&cfg.augment, "auto"),
        flops.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("{origin}:{}: expected key=value, got {raw:?}", i + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolved configuration plus run bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: TrainConfig,
    pub data_dir: PathBuf,
    pub run_id: String,
}

pub fn run_id(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(render(cfg).as_bytes());
    hex::encode(&digest[..6])
}

impl Manifest {
    pub fn new(config: TrainConfig, data_dir: PathBuf) -> Self {
        let run_id = run_id(&config);
        Self {
            config,
            data_dir,
            run_id,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "# dynexec run manifest\nrun_id={}\ndata_dir={}\n{}",
            self.run_id,
            self.data_dir.display(),
            render(&self.config)
        )
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, String> {
        let mut cfg = TrainConfig::default();
        let mut data_dir = None;
        for (k, v) in parse_pairs(text, origin)? {
            match k.as_str() {
                "run_id" => {}
                "data_dir" => data_dir = Some(PathBuf::from(v)),
                _ => apply(&mut cfg, &k, &v)?,
            }
        }
        let data_dir = data_dir.ok_or_else(|| format!("{origin}: manifest lacks data_dir"))?;
        Ok(Self::new(cfg, data_dir))
    }
}

/// `root/<run_id>`, or `root/<run_id>-N` for the first unused N.
pub fn fresh_run_dir(root: &Path, run_id: &str) -> PathBuf {
    let first = root.join(run_id);
    if !first.exists() {
        return first;
    }
    (2..)
        .map(|n| root.join(format!("{run_id}-{n}")))
        .find(|p| !p.exists())
        .unwrap()
}
