//! Run configuration: line-oriented `key = value` text with `#` comments.
//! Later assignments override earlier ones, so a config file can be
//! followed by command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::model::{Arch, TopKPlacement};
use crate::sparsity::{TopKConfig, Variant};
use crate::train::TrainConfig;
use crate::viz::{MaskMode, SynthesisMode};

/// Synthesis mode selection; `Both` runs each mode in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthModes {
    One(SynthesisMode),
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,

    pub n_train: usize,
    pub n_clean: usize,
    pub n_cueconflict: usize,
    pub n_stylized: usize,
    pub image_size: usize,

    pub widths: Vec<usize>,
    /// 1-based stage after which Top-K runs; `None` trains the baseline.
    pub topk_layer: Option<usize>,
    pub topk_rho: f64,
    pub topk_variant: Variant,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Clean-split index of the image whose masks are dumped every epoch.
    pub probe_index: usize,

    pub split: Split,

    pub layers: Vec<usize>,
    pub mode: SynthModes,
    pub steps: usize,
    pub viz_lr: f64,
    /// Ablation fraction for synthesis and reconstruction; for dump-masks it
    /// replaces the model's own fraction. Defaults to the model's fraction.
    pub rho: Option<f64>,
    pub masks: Vec<MaskMode>,
    pub asymmetric: bool,
    pub tag: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            out: None,
            data: None,
            checkpoint: None,
            image: None,
            n_train: d.train,
            n_clean: d.clean,
            n_cueconflict: d.cue_conflict,
            n_stylized: d.stylized,
            image_size: d.image_size,
            widths: Arch::default().widths,
            topk_layer: Some(2),
            topk_rho: 0.2,
            topk_variant: Variant::Hard,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            probe_index: 0,
            split: Split::CueConflict,
            layers: vec![1, 2],
            mode: SynthModes::One(SynthesisMode::WithTopK),
            steps: 100,
            viz_lr: 1.0,
            rho: None,
            masks: vec![MaskMode::TopK],
            asymmetric: false,
            tag: "probe".into(),
        }
    }
}

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "seed", "out", "data", "checkpoint", "image", "n_train", "n_clean", "n_cueconflict",
    "n_stylized", "image_size", "widths", "topk_layer", "topk_rho", "topk_variant", "epochs",
    "batch_size", "lr", "momentum", "weight_decay", "probe_index", "split", "layers", "mode",
    "steps", "viz_lr", "rho", "masks", "asymmetric", "tag",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::invalid(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse("seed", v)?,
            "out" => self.out = parse_path(v),
            "data" => self.data = parse_path(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            "image" => self.image = parse_path(v),
            "n_train" => self.n_train = parse("n_train", v)?,
            "n_clean" => self.n_clean = parse("n_clean", v)?,
            "n_cueconflict" => self.n_cueconflict = parse("n_cueconflict", v)?,
            "n_stylized" => self.n_stylized = parse("n_stylized", v)?,
            "image_size" => self.image_size = parse("image_size", v)?,
            "widths" => self.widths = parse_list("widths", v)?,
            "topk_layer" => {
                self.topk_layer = match v {
                    "none" | "0" => None,
                    _ => Some(parse("topk_layer", v)?),
                }
            }
            "topk_rho" => self.topk_rho = parse("topk_rho", v)?,
            "topk_variant" => self.topk_variant = v.parse()?,
            "epochs" => self.epochs = parse("epochs", v)?,
            "batch_size" => self.batch_size = parse("batch_size", v)?,
            "lr" => self.lr = parse("lr", v)?,
            "momentum" => self.momentum = parse("momentum", v)?,
            "weight_decay" => self.weight_decay = parse("weight_decay", v)?,
            "probe_index" => self.probe_index = parse("probe_index", v)?,
            "split" => self.split = v.parse()?,
            "layers" => self.layers = parse_list("layers", v)?,
            "mode" => {
                self.mode = match v {
                    "both" => SynthModes::Both,
                    _ => SynthModes::One(v.parse()?),
                }
            }
            "steps" => self.steps = parse("steps", v)?,
            "viz_lr" => self.viz_lr = parse("viz_lr", v)?,
            "rho" => {
                self.rho = match v {
                    "none" => None,
                    _ => Some(parse("rho", v)?),
                }
            }
            "masks" => {
                self.masks = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "asymmetric" => self.asymmetric = parse("asymmetric", v)?,
            "tag" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(Error::invalid(format!("bad tag {v:?}")));
                }
                self.tag = v.to_string()
            }
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Renders the full configuration, one `key = value` per line in
    /// [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "seed" => self.seed.to_string(),
                "out" => show_path(&self.out),
                "data" => show_path(&self.data),
                "checkpoint" => show_path(&self.checkpoint),
                "image" => show_path(&self.image),
                "n_train" => self.n_train.to_string(),
                "n_clean" => self.n_clean.to_string(),
                "n_cueconflict" => self.n_cueconflict.to_string(),
                "n_stylized" => self.n_stylized.to_string(),
                "image_size" => self.image_size.to_string(),
                "widths" => join(&self.widths),
                "topk_layer" => self.topk_layer.map_or("none".into(), |l| l.to_string()),
                "topk_rho" => self.topk_rho.to_string(),
                "topk_variant" => self.topk_variant.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "probe_index" => self.probe_index.to_string(),
                "split" => self.split.to_string(),
                "layers" => join(&self.layers),
                "mode" => match self.mode {
                    SynthModes::Both => "both".into(),
                    SynthModes::One(m) => m.to_string(),
                },
                "steps" => self.steps.to_string(),
                "viz_lr" => self.viz_lr.to_string(),
                "rho" => self.rho.map_or("none".into(), |r| r.to_string()),
                "masks" => join(&self.masks),
                "asymmetric" => self.asymmetric.to_string(),
                "tag" => self.tag.clone(),
                _ => unreachable!("every key is rendered"),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            train: self.n_train,
            clean: self.n_clean,
            cue_conflict: self.n_cueconflict,
            stylized: self.n_stylized,
            image_size: self.image_size,
        }
    }

    pub fn arch(&self) -> Result<Arch> {
        let topk = match self.topk_layer {
            Some(stage) => Some(TopKPlacement {
                stage,
                config: TopKConfig::new(self.topk_rho, self.topk_variant)?,
            }),
            None => None,
        };
        let arch = Arch {
            widths: self.widths.clone(),
            image_size: self.image_size,
            classes: crate::data::NUM_CLASSES,
            topk,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// One mask mode per entry of `layers`; a single mode applies to all.
    pub fn layer_masks(&self) -> Result<Vec<(usize, MaskMode)>> {
        let modes = match self.masks.len() {
            1 => vec![self.masks[0]; self.layers.len()],
            n if n == self.layers.len() => self.masks.clone(),
            n => {
                return Err(Error::invalid(format!(
                    "{n} mask modes for {} layers",
                    self.layers.len()
                )))
            }
        };
        Ok(self.layers.iter().copied().zip(modes).collect())
    }
}
