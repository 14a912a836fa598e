//! Command-line front end. Each command resolves its configuration
//! (defaults, then `--config` file, then `--set` pairs, then named flags),
//! writes it to `run.cfg` in the output directory and then does its work.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{RunConfig, SynthModes};
use crate::data::{self, Split};
use crate::error::Error;
use crate::eval;
use crate::imageio;
use crate::model::{DeskNet, TopKPlacement};
use crate::sparsity::TopKConfig;
use crate::tensor::Tensor;
use crate::train;
use crate::viz::{self, ReconstructionJob, SynthesisJob};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;

pub const RESOLVED_CONFIG: &str = "run.cfg";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::Io { .. }) => EXIT_IO,
            CliError::Run(Error::NonFinite { .. }) => EXIT_NUMERIC,
            CliError::Run(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "sslab", version, about = "Spatial Top-K sparsity laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural cue-conflict dataset.
    GenData(Common),
    /// Train a classifier on a generated dataset.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval(Common),
    /// Gram-matrix texture synthesis.
    Synth(Common),
    /// Masked-activation reconstruction.
    Reconstruct(Common),
    /// Write the Top-K masks of one image as PNGs.
    DumpMasks(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignment (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    topk_layer: Option<String>,
    #[arg(long)]
    topk_rho: Option<f64>,
    #[arg(long)]
    topk_variant: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    masks: Option<String>,
    #[arg(long)]
    asymmetric: bool,
    #[arg(long)]
    tag: Option<String>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path).map_err(|e| match e {
                Error::Io { .. } => CliError::Run(e),
                other => usage(other),
            })?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(k, v).map_err(usage)?;
        }
        let path_str = |p: &PathBuf| p.to_string_lossy().into_owned();
        let flags: [(&str, Option<String>); 17] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(path_str)),
            ("data", self.data.as_ref().map(path_str)),
            ("checkpoint", self.checkpoint.as_ref().map(path_str)),
            ("image", self.image.as_ref().map(path_str)),
            ("split", self.split.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("topk_layer", self.topk_layer.clone()),
            ("topk_rho", self.topk_rho.map(|v| v.to_string())),
            ("topk_variant", self.topk_variant.clone()),
            ("mode", self.mode.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("layers", self.layers.clone()),
            ("rho", self.rho.map(|v| v.to_string())),
            ("masks", self.masks.clone()),
            ("asymmetric", self.asymmetric.then(|| "true".to_string())),
            ("tag", self.tag.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(usage)?;
            }
        }
        Ok(cfg)
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Run(Error::io(path, e)))
}

/// Creates the output directory and echoes the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| CliError::Run(Error::io(&out, e)))?;
    write_file(&out.join(RESOLVED_CONFIG), &cfg.to_text())?;
    Ok(out)
}

fn load_model(cfg: &RunConfig) -> CliResult<DeskNet<f32>> {
    Ok(DeskNet::load(require(&cfg.checkpoint, "checkpoint")?)?)
}

fn load_image(cfg: &RunConfig, model: &DeskNet<f32>) -> CliResult<Tensor<f64>> {
    let img: Tensor<f64> = imageio::load_rgb(require(&cfg.image, "image")?)?;
    let s = model.arch().image_size;
    if img.shape() != [3, s, s] {
        return Err(CliError::Run(Error::invalid(format!(
            "image is {}x{}, model expects {s}x{s}",
            img.shape()[2],
            img.shape()[1]
        ))));
    }
    Ok(img)
}

/// Ablation fraction: explicit `rho`, else the model's Top-K fraction,
/// else 0.2.
fn viz_rho(cfg: &RunConfig, model: &DeskNet<f32>) -> f64 {
    cfg.rho
        .or_else(|| model.arch().topk.map(|p| p.config.fraction()))
        .unwrap_or(0.2)
}

fn cmd_gen_data(cfg: &RunConfig) -> CliResult<String> {
    let out = prepare_out(cfg)?;
    let manifest = data::generate_dataset(&cfg.dataset(), cfg.seed, &out)?;
    Ok(format!("{}", manifest.root.join(data::MANIFEST_FILE).display()))
}

fn write_masks(
    model: &DeskNet<f32>,
    probe: &Tensor<f32>,
    stage: usize,
    epoch: usize,
    tag: &str,
    out: &Path,
    csv: &mut String,
) -> crate::Result<()> {
    let dir = out.join("masks").join(format!("epoch{epoch:03}"));
    let dump = viz::dump_topk_masks(model, probe, stage, tag, &dir)?;
    for (c, v) in dump.connectivity.iter().enumerate() {
        let _ = writeln!(csv, "{epoch},{stage},{c},{},{v}", dump.k);
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let arch = cfg.arch().map_err(usage)?;
    let out = prepare_out(cfg)?;
    let root = require(&cfg.data, "data")?;
    let train_set = data::load_split(root, Split::Train)?;
    let clean = data::load_split(root, Split::Clean)?;
    if arch.image_size != train_set.images.first().map_or(arch.image_size, |t| t.shape()[1]) {
        return Err(CliError::Usage(format!(
            "image_size {} does not match the dataset",
            arch.image_size
        )));
    }
    let probe = clean
        .images
        .get(cfg.probe_index)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("probe_index {} outside the clean split", cfg.probe_index)))?;
    let mut model = DeskNet::<f32>::new(arch, cfg.seed)?;
    let mut metrics = String::from("epoch,train_loss,clean_acc\n");
    let mut conn = String::from("epoch,layer,channel,k,connectivity\n");
    let stage = model.arch().topk.map(|p| p.stage);
    if let Some(stage) = stage {
        write_masks(&model, &probe, stage, 0, &cfg.tag, &out, &mut conn)?;
    }
    train::train(&mut model, &train_set, &clean, &cfg.train(), |log, m| {
        let _ = writeln!(metrics, "{},{},{}", log.epoch, log.train_loss, log.clean_acc);
        eprintln!(
            "epoch {} loss {:.4} clean_acc {:.4}",
            log.epoch, log.train_loss, log.clean_acc
        );
        if let Some(stage) = stage {
            write_masks(m, &probe, stage, log.epoch, &cfg.tag, &out, &mut conn)?;
        }
        Ok(())
    })?;
    write_file(&out.join("metrics.csv"), &metrics)?;
    if stage.is_some() {
        write_file(&out.join("connectivity.csv"), &conn)?;
    }
    let ckpt = out.join("model.sslm");
    model.save(&ckpt)?;
    Ok(ckpt.display().to_string())
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<String> {
    let out = prepare_out(cfg)?;
    let model = load_model(cfg)?;
    let split = data::load_split(require(&cfg.data, "data")?, cfg.split)?;
    if split.is_empty() {
        return Err(CliError::Run(Error::invalid(format!("split {} is empty", cfg.split))));
    }
    let preds = eval::classify(&model, &split.images)?;
    let acc = eval::accuracy(&preds, &split.shape_labels)?;
    let mut txt = String::new();
    let _ = writeln!(txt, "split={}", cfg.split);
    let _ = writeln!(txt, "seed={}", cfg.seed);
    let _ = writeln!(txt, "checkpoint={}", require(&cfg.checkpoint, "checkpoint")?.display());
    let _ = writeln!(txt, "n_total={}", preds.len());
    let _ = writeln!(txt, "accuracy={acc}");
    let mut report = json!({
        "split": cfg.split.name(),
        "seed": cfg.seed,
        "checkpoint": require(&cfg.checkpoint, "checkpoint")?.display().to_string(),
        "n_total": preds.len(),
        "accuracy": acc,
        "config": cfg.to_text().lines().filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
            .collect::<serde_json::Map<_, _>>(),
    });
    if matches!(cfg.split, Split::CueConflict | Split::Stylized) {
        let (total, per_class) = eval::bias_counts(&preds, &split.shape_labels, &split.texture_labels)?;
        let biases = total.biases();
        let _ = writeln!(txt, "n_correct_shape={}", total.n_correct_shape);
        let _ = writeln!(txt, "n_correct_texture={}", total.n_correct_texture);
        let _ = writeln!(txt, "n_other={}", total.n_other);
        match biases {
            Some((s, t)) => {
                let _ = writeln!(txt, "shape_bias={s}\ntexture_bias={t}");
            }
            None => txt.push_str("shape_bias=undefined\ntexture_bias=undefined\n"),
        }
        for (c, pc) in per_class.iter().enumerate() {
            let _ = writeln!(
                txt,
                "class{c}.n_total={}\nclass{c}.n_correct_shape={}\nclass{c}.n_correct_texture={}\nclass{c}.n_other={}",
                pc.n_total, pc.n_correct_shape, pc.n_correct_texture, pc.n_other
            );
        }
        let obj = report.as_object_mut().expect("report is an object");
        obj.insert("n_correct_shape".into(), json!(total.n_correct_shape));
        obj.insert("n_correct_texture".into(), json!(total.n_correct_texture));
        obj.insert("n_other".into(), json!(total.n_other));
        obj.insert("shape_bias".into(), json!(biases.map(|b| b.0)));
        obj.insert("texture_bias".into(), json!(biases.map(|b| b.1)));
        obj.insert("per_class".into(), json!(per_class));
    }
    write_file(&out.join("report.txt"), &txt)?;
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("report.json"), &(body + "\n"))?;
    Ok(out.join("report.txt").display().to_string())
}

fn cmd_synth(cfg: &RunConfig) -> CliResult<String> {
    let out = prepare_out(cfg)?;
    let model = load_model(cfg)?;
    let target = load_image(cfg, &model)?;
    let rho = viz_rho(cfg, &model);
    let viz_model = model.cast::<f64>();
    let modes = match cfg.mode {
        SynthModes::One(m) => vec![m],
        SynthModes::Both => vec![viz::SynthesisMode::WithTopK, viz::SynthesisMode::WithoutTopK],
    };
    let mut lines = Vec::new();
    for mode in modes {
        let job = SynthesisJob {
            target: target.clone(),
            layers: cfg.layers.clone(),
            mode,
            steps: cfg.steps,
            lr: cfg.viz_lr,
            rho,
            seed: cfg.seed,
        };
        let r = viz::texture_synthesize(&viz_model, &job).map_err(|e| match e {
            Error::InvalidArgument(_) => usage(e),
            other => CliError::Run(other),
        })?;
        let img = out.join(format!("synth_{mode}.png"));
        imageio::save_rgb(&img, &r.image)?;
        viz::write_trace(out.join(format!("synth_{mode}_trace.csv")), &r.trace)?;
        lines.push(format!(
            "{} initial_loss={:e} final_loss={:e}",
            img.display(),
            r.initial_loss(),
            r.final_loss()
        ));
    }
    Ok(lines.join("\n"))
}

fn cmd_reconstruct(cfg: &RunConfig) -> CliResult<String> {
    let out = prepare_out(cfg)?;
    let model = load_model(cfg)?;
    let target = load_image(cfg, &model)?;
    let job = ReconstructionJob {
        target: target.clone(),
        layers: cfg.layer_masks().map_err(usage)?,
        steps: cfg.steps,
        lr: cfg.viz_lr,
        rho: viz_rho(cfg, &model),
        asymmetric: cfg.asymmetric,
        seed: cfg.seed,
    };
    let r = viz::reconstruct(&model.cast::<f64>(), &job).map_err(|e| match e {
        Error::InvalidArgument(_) => usage(e),
        other => CliError::Run(other),
    })?;
    let img = out.join("reconstruct.png");
    imageio::save_rgb(&img, &r.image)?;
    viz::write_trace(out.join("reconstruct_trace.csv"), &r.trace)?;
    let summary = format!(
        "initial_loss={:e}\nfinal_loss={:e}\nedge_energy={}\ntarget_edge_energy={}\n",
        r.initial_loss(),
        r.final_loss(),
        viz::sobel_energy(&r.image)?,
        viz::sobel_energy(&target)?
    );
    write_file(&out.join("reconstruct_summary.txt"), &summary)?;
    Ok(img.display().to_string())
}

fn cmd_dump_masks(cfg: &RunConfig) -> CliResult<String> {
    let out = prepare_out(cfg)?;
    let mut model = load_model(cfg)?;
    let image = load_image(cfg, &model)?.cast::<f32>();
    let stage = match model.arch().topk {
        Some(p) => p.stage,
        None => cfg.topk_layer.ok_or_else(|| {
            CliError::Usage("model has no Top-K layer; set topk_layer".into())
        })?,
    };
    let config = match (cfg.rho, model.arch().topk) {
        (Some(r), Some(p)) => TopKConfig::new(r, p.config.variant()).map_err(usage)?,
        (Some(r), None) => TopKConfig::hard(r).map_err(usage)?,
        (None, Some(p)) => p.config,
        (None, None) => TopKConfig::hard(cfg.topk_rho).map_err(usage)?,
    };
    model = model
        .with_topk(Some(TopKPlacement { stage, config }))
        .map_err(usage)?;
    let dump = viz::dump_topk_masks(&model, &image, stage, &cfg.tag, &out)?;
    let mut csv = String::from("layer,channel,k,connectivity\n");
    for (c, v) in dump.connectivity.iter().enumerate() {
        let _ = writeln!(csv, "{stage},{c},{},{v}", dump.k);
    }
    write_file(&out.join("connectivity.csv"), &csv)?;
    Ok(format!("{} masks in {}", dump.paths.len(), out.display()))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (common, f): (&Common, fn(&RunConfig) -> CliResult<String>) = match &cli.command {
        Command::GenData(c) => (c, cmd_gen_data),
        Command::Train(c) => (c, cmd_train),
        Command::Eval(c) => (c, cmd_eval),
        Command::Synth(c) => (c, cmd_synth),
        Command::Reconstruct(c) => (c, cmd_reconstruct),
        Command::DumpMasks(c) => (c, cmd_dump_masks),
    };
    match common.resolve().and_then(|cfg| f(&cfg)) {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("sslab: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 64);
        let io = Error::io("p", std::io::Error::other("x"));
        assert_eq!(CliError::Run(io).exit_code(), 2);
        assert_eq!(CliError::Run(Error::NonFinite { op: "x" }).exit_code(), 1);
        let decode = Error::ImageDecode {
            path: "p".into(),
            reason: "r".into(),
        };
        assert_eq!(CliError::Run(decode).exit_code(), 65);
    }

    #[test]
    fn missing_out_is_usage() {
        assert_eq!(run(["sslab", "gen-data", "--seed", "0"]), EXIT_USAGE);
        assert_eq!(run(["sslab", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["sslab", "eval", "--split", "holdout", "--out", "x"]), EXIT_USAGE);
    }
}
