//! The `cl2s` command line: train, eval, dehaze, synth, ablate.
//!
//! Configuration is layered, lowest precedence first: built-in defaults, the
//! `--config` TOML file, `CL2S_*` environment variables (`__` separates
//! path segments), `--set key=value` pairs and finally dedicated flags. The
//! resolved configuration is written to `resolved_config.toml` in the run
//! directory, and a `manifest.json` lists every output file with its digest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::load_checkpoint;
use crate::data::{load_dataset, make_synthetic_set, Dataset, Layout, LoadOptions, Split};
use crate::domain::Image;
use crate::error::Error;
use crate::metrics::{evaluate_pairs, list_images, MetricsReport};
use crate::trainer::{self, evaluate_identity, evaluate_model, train, TrainConfig, DEFAULT_CLIP_NORM};
use crate::variants::{resolve_variant, Dehazer, ModelConfig, PRESETS};
use crate::VariantSpec;

pub const ENV_PREFIX: &str = "CL2S_";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const MANIFEST: &str = "manifest.json";

/// Seed of the synthetic held-out set derived from the run seed.
pub fn holdout_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

#[derive(Debug, Parser)]
#[command(name = "cl2s", version, about = "Single-image dehazing with attention-fused elementary-function heads")]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file (flat dotted keys such as `trainer.lr0`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; every output goes under it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Compute device (only `cpu` is available).
    #[arg(long, global = true)]
    device: Option<String>,
    /// Preset name, e.g. CL2S, DM2F, FDNet, FD-J1,4.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Explicit head list, e.g. AS,MUL,ADD; overrides --variant.
    #[arg(long, global = true)]
    heads: Option<String>,
    /// Override any configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a variant and write checkpoints and a loss log.
    Train(TrainArgs),
    /// Score a checkpoint (or the hazy inputs) on a paired set.
    Eval(EvalArgs),
    /// Dehaze a directory of images.
    Dehaze(DehazeArgs),
    /// Write a seeded synthetic paired set.
    Synth(SynthArgs),
    /// Train and score every ablation preset under one budget.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Use N seeded synthetic images instead of a directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Side length of synthetic images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// reside_its, reside_sots, ohaze, hazerd or flat_pairs.
    #[arg(long)]
    layout: Option<String>,
    /// Regex with an `id` group mapping hazy stems to clear stems.
    #[arg(long)]
    pattern: Option<String>,
    /// all, train or test.
    #[arg(long)]
    split: Option<String>,
    /// Number of held-out images.
    #[arg(long)]
    holdout: Option<usize>,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    /// Clip gradients to global norm 5.
    #[arg(long)]
    clip_grad: bool,
    /// Model size: tiny or full.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Score the hazy inputs themselves.
    #[arg(long)]
    identity: bool,
    /// Score existing predictions in this directory against --gt-dir.
    #[arg(long, value_name = "DIR", requires = "gt_dir")]
    pred_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    gt_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DehazeArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    input: Option<PathBuf>,
    /// Also write one weight map per component.
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Comma-separated subset of presets.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: String,
    pub pattern: Option<String>,
    pub split: String,
    pub synthetic: Option<usize>,
    pub size: usize,
    pub holdout: usize,
    /// Separate held-out directory (same layout, all samples).
    pub test_root: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: "flat_pairs".into(),
            pattern: None,
            split: "all".into(),
            synthetic: None,
            size: 128,
            holdout: 16,
            test_root: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub identity: bool,
    pub pred_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DehazeConfig {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub dump_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 64, size: 128 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub only: Option<Vec<String>>,
}

/// Everything a command needs, after all layers are merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub device: String,
    pub variant: Option<String>,
    pub heads: Option<String>,
    pub model: ModelConfig,
    /// `trainer.seed` always mirrors `seed`.
    pub trainer: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub dehaze: DehazeConfig,
    pub synth: SynthConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            device: "cpu".into(),
            variant: None,
            heads: None,
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            dehaze: DehazeConfig::default(),
            synth: SynthConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn variant_spec(&self) -> crate::Result<VariantSpec> {
        resolve_variant(self.variant.as_deref(), self.heads.as_deref())
    }
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::UnknownVariant(_)
            | Error::EmptyVariant
            | Error::DuplicateKind(_)
            | Error::UnknownKind(_)
            | Error::ZeroSamples(_)
            | Error::NoPairs(_)
            | Error::IncompatibleCheckpoint(_)
            | Error::CheckpointParse(_)
            | Error::Output { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses a `--set`/environment value as a TOML literal, falling back to a
/// plain string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn insert_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("invalid configuration key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Merges defaults, file, environment, `--set` pairs and flag overrides.
pub fn resolve_config(
    file: Option<&Path>,
    env: &[(String, String)],
    sets: &[String],
    flags: Vec<(String, toml::Value)>,
) -> CliResult<RunConfig> {
    let mut table = toml::Table::try_from(RunConfig::default())
        .map_err(|e| CliError::runtime(format!("serializing defaults: {e}")))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: toml::Table = text
            .parse()
            .map_err(|e| CliError::usage(format!("config error in {}: {e}", path.display())))?;
        // Re-insert through dotted paths so `"a.b" = 1` and `[a] b = 1` agree.
        let mut flat = toml::Table::new();
        for (k, v) in parsed {
            insert_path(&mut flat, &k, v)?;
        }
        merge(&mut table, flat);
    }
    for (k, v) in env {
        if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
            let key = rest.to_ascii_lowercase().replace("__", ".");
            insert_path(&mut table, &key, parse_value(v))?;
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        insert_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in flags {
        insert_path(&mut table, &k, v)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::usage(format!("config error: {}", e.message())))?;
    cfg.trainer.seed = cfg.seed;
    if !cfg.device.eq_ignore_ascii_case("cpu") {
        return Err(CliError::usage(format!(
            "config error: device `{}` is not available; only `cpu` is supported",
            cfg.device
        )));
    }
    cfg.model.validate()?;
    cfg.trainer.validate()?;
    Ok(cfg)
}

fn v_int(n: usize) -> toml::Value {
    toml::Value::Integer(n as i64)
}

fn v_path(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn data_flags(d: &DataArgs, out: &mut Vec<(String, toml::Value)>) {
    if let Some(n) = d.synthetic {
        out.push(("data.synthetic".into(), v_int(n)));
    }
    if let Some(n) = d.size {
        out.push(("data.size".into(), v_int(n)));
    }
    if let Some(p) = &d.data_root {
        out.push(("data.root".into(), v_path(p)));
    }
    if let Some(s) = &d.layout {
        out.push(("data.layout".into(), s.clone().into()));
    }
    if let Some(s) = &d.pattern {
        out.push(("data.pattern".into(), s.clone().into()));
    }
    if let Some(s) = &d.split {
        out.push(("data.split".into(), s.clone().into()));
    }
    if let Some(n) = d.holdout {
        out.push(("data.holdout".into(), v_int(n)));
    }
}

fn optim_flags(o: &OptimArgs, out: &mut Vec<(String, toml::Value)>) -> CliResult<()> {
    if let Some(p) = &o.profile {
        let model = match p.to_ascii_lowercase().as_str() {
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::full(),
            other => return Err(CliError::usage(format!("config error: unknown profile `{other}`"))),
        };
        let v = toml::Value::try_from(model).map_err(|e| CliError::runtime(e.to_string()))?;
        out.push(("model".into(), v));
    }
    if let Some(n) = o.iters {
        out.push(("trainer.max_iters".into(), v_int(n)));
    }
    if let Some(n) = o.batch_size {
        out.push(("trainer.batch_size".into(), v_int(n)));
    }
    if let Some(n) = o.crop {
        out.push(("trainer.crop".into(), v_int(n)));
    }
    if let Some(x) = o.lr {
        out.push(("trainer.lr0".into(), x.into()));
    }
    if let Some(x) = o.aux_weight {
        out.push(("trainer.aux_weight".into(), x.into()));
    }
    if o.clip_grad {
        out.push(("trainer.clip_grad_norm".into(), DEFAULT_CLIP_NORM.into()));
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Dehaze(_) => "dehaze",
        Command::Synth(_) => "synth",
        Command::Ablate(_) => "ablate",
    }
}

fn flag_overrides(cli: &Cli) -> CliResult<Vec<(String, toml::Value)>> {
    let g = &cli.global;
    let mut f = Vec::new();
    if let Some(s) = g.seed {
        f.push(("seed".into(), toml::Value::Integer(s as i64)));
    }
    if let Some(p) = &g.out {
        f.push(("out".into(), v_path(p)));
    }
    if let Some(d) = &g.device {
        f.push(("device".into(), d.clone().into()));
    }
    if let Some(v) = &g.variant {
        f.push(("variant".into(), v.clone().into()));
    }
    if let Some(h) = &g.heads {
        f.push(("heads".into(), h.clone().into()));
    }
    match &cli.command {
        Command::Train(a) => {
            data_flags(&a.data, &mut f);
            optim_flags(&a.optim, &mut f)?;
        }
        Command::Eval(a) => {
            data_flags(&a.data, &mut f);
            if let Some(p) = &a.checkpoint {
                f.push(("eval.checkpoint".into(), v_path(p)));
            }
            if a.identity {
                f.push(("eval.identity".into(), true.into()));
            }
            if let Some(p) = &a.pred_dir {
                f.push(("eval.pred_dir".into(), v_path(p)));
            }
            if let Some(p) = &a.gt_dir {
                f.push(("eval.gt_dir".into(), v_path(p)));
            }
        }
        Command::Dehaze(a) => {
            if let Some(p) = &a.checkpoint {
                f.push(("dehaze.checkpoint".into(), v_path(p)));
            }
            if let Some(p) = &a.input {
                f.push(("dehaze.input".into(), v_path(p)));
            }
            if a.dump_attention {
                f.push(("dehaze.dump_attention".into(), true.into()));
            }
        }
        Command::Synth(a) => {
            if let Some(n) = a.n {
                f.push(("synth.n".into(), v_int(n)));
            }
            if let Some(n) = a.size {
                f.push(("synth.size".into(), v_int(n)));
            }
        }
        Command::Ablate(a) => {
            data_flags(&a.data, &mut f);
            optim_flags(&a.optim, &mut f)?;
            if let Some(only) = &a.only {
                let names = parse_only(only)?;
                f.push((
                    "ablate.only".into(),
                    toml::Value::Array(names.into_iter().map(toml::Value::String).collect()),
                ));
            }
        }
    }
    Ok(f)
}

/// Splits a preset list on commas, re-joining fragments such as `FD-J1` +
/// `4` that only name a preset together.
pub fn parse_only(list: &str) -> crate::Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some(prev) = out.last_mut() {
            let joined = format!("{prev},{tok}");
            if VariantSpec::preset(tok).is_err() && VariantSpec::preset(&joined).is_ok() {
                *prev = joined;
                continue;
            }
        }
        out.push(tok.to_string());
    }
    if out.is_empty() {
        return Err(Error::Config("--only needs at least one preset".into()));
    }
    out.iter()
        .map(|n| VariantSpec::preset(n).map(|s| s.name().to_string()))
        .collect()
}

fn load_options(d: &DataConfig) -> crate::Result<LoadOptions> {
    let mut o = LoadOptions::new(d.layout.parse::<Layout>()?).split(d.split.parse::<Split>()?);
    o.pattern = d.pattern.clone();
    Ok(o)
}

/// Training set and optional held-out set.
pub fn training_data(cfg: &RunConfig) -> crate::Result<(Dataset, Option<Dataset>)> {
    let d = &cfg.data;
    if let Some(n) = d.synthetic {
        let train_set = make_synthetic_set(n, d.size, cfg.seed)?;
        let hold = match d.holdout {
            0 => None,
            h => Some(make_synthetic_set(h, d.size, holdout_seed(cfg.seed))?),
        };
        return Ok((train_set, hold));
    }
    let root = d.root.as_ref().ok_or_else(|| {
        Error::ZeroSamples("no dataset configured (pass --synthetic N or --data-root DIR)".into())
    })?;
    let opts = load_options(d)?;
    let all = load_dataset(root, &opts)?;
    if let Some(test_root) = &d.test_root {
        let test = load_dataset(test_root, &LoadOptions { split: Split::All, ..opts })?;
        return Ok((all, Some(test)));
    }
    if d.holdout > 0 && all.len() > d.holdout {
        let cut = all.len() - d.holdout;
        return Ok((all.slice(0..cut), Some(all.slice(cut..all.len()))));
    }
    Ok((all, None))
}

fn eval_data(cfg: &RunConfig) -> crate::Result<Dataset> {
    let d = &cfg.data;
    if let Some(n) = d.synthetic {
        return make_synthetic_set(n, d.size, holdout_seed(cfg.seed));
    }
    let root = d.root.as_ref().ok_or_else(|| {
        Error::ZeroSamples("no dataset configured (pass --synthetic N or --data-root DIR)".into())
    })?;
    load_dataset(root, &load_options(d)?)
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::from(Error::output(p, e)))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(p, contents).map_err(|e| CliError::from(Error::output(p, e)))
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            let bytes = fs::read(&p)?;
            out.push(ManifestEntry {
                path: p.strip_prefix(root).unwrap_or(&p).display().to_string(),
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
    }
    Ok(())
}

fn write_manifest(out: &Path, command: &str, status: &str, extra: serde_json::Value) -> CliResult<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files).map_err(|e| CliError::from(Error::output(out, e)))?;
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "status": status,
        "config": RESOLVED_CONFIG,
        "details": extra,
        "files": files,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
    write_file(&out.join(MANIFEST), text)
}

fn cpu_model(spec: &VariantSpec, cfg: &RunConfig) -> crate::Result<Dehazer> {
    Dehazer::on_cpu(spec, &cfg.model, cfg.seed)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<serde_json::Value> {
    let spec = cfg.variant_spec()?;
    let (train_set, hold) = training_data(cfg)?;
    log::info!(
        "training {} on {} ({} samples), held-out {}",
        spec.name(),
        train_set.name(),
        train_set.len(),
        hold.as_ref().map_or(0, Dataset::len)
    );
    let model = cpu_model(&spec, cfg)?;
    let baseline = match &hold {
        Some(h) => Some(evaluate_identity(h)?.summary()),
        None => None,
    };
    let outcome = train(&model, &cfg.trainer, &train_set, hold.as_ref(), Some(out)).map_err(|e| match e {
        Error::NonFiniteLoss { .. } => CliError::runtime(format!("training aborted: {e}")),
        other => CliError::from(other),
    })?;
    let summary = serde_json::json!({
        "variant": spec.name(),
        "heads": spec.kinds().iter().map(|k| k.name()).collect::<Vec<_>>(),
        "iterations": outcome.losses.len(),
        "final_loss": outcome.losses.last(),
        "final_eval": outcome.final_eval,
        "hazy_baseline": baseline,
        "best": outcome.best.map(|(i, p)| serde_json::json!({ "iter": i, "psnr": p })),
        "final_checkpoint": outcome.final_checkpoint.as_ref().map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string()),
    });
    write_file(
        &out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::runtime(e.to_string()))?,
    )?;
    println!("final checkpoint: {}", trainer::final_checkpoint_path(out).display());
    Ok(summary)
}

fn load_model_for(cfg: &RunConfig, path: Option<&PathBuf>) -> CliResult<Dehazer> {
    let path = path.ok_or_else(|| CliError::usage("a checkpoint is required (--checkpoint FILE)"))?;
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", path.display())));
    }
    let loaded = load_checkpoint(path)?;
    if cfg.variant.is_some() || cfg.heads.is_some() {
        let wanted = cfg.variant_spec()?;
        if wanted.kinds() != loaded.model.spec().kinds() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} holds {}, but {} was requested",
                path.display(),
                loaded.model.spec().name(),
                wanted.name()
            ))
            .into());
        }
    }
    Ok(loaded.model)
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> CliResult<serde_json::Value> {
    let e = &cfg.eval;
    let report: MetricsReport = if let (Some(pred), Some(gt)) = (&e.pred_dir, &e.gt_dir) {
        evaluate_pairs(pred, gt)?
    } else if e.identity {
        evaluate_identity(&eval_data(cfg)?)?
    } else {
        let model = load_model_for(cfg, e.checkpoint.as_ref())?;
        let data = eval_data(cfg)?;
        let pred_dir = out.join("predictions");
        create_dir(&pred_dir)?;
        evaluate_model(&model, &data, |id, img| img.save_png(pred_dir.join(format!("{id}.png"))))?
    };
    for s in &report.skipped {
        log::warn!("skipped unpaired file {s}");
    }
    report.write(out, "report")?;
    println!("{}", report.to_table());
    Ok(serde_json::json!({ "summary": report.summary(), "skipped": report.skipped }))
}

fn cmd_dehaze(cfg: &RunConfig, out: &Path) -> CliResult<serde_json::Value> {
    let d = &cfg.dehaze;
    let input = d
        .input
        .as_ref()
        .ok_or_else(|| CliError::usage("an input directory is required (--input DIR)"))?;
    if !input.is_dir() {
        return Err(CliError::usage(format!("input directory not found: {}", input.display())));
    }
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("no images in {}", input.display())));
    }
    let model = load_model_for(cfg, d.checkpoint.as_ref())?;
    let dehazed = out.join("dehazed");
    create_dir(&dehazed)?;
    let attn_dir = out.join("attention");
    if d.dump_attention {
        create_dir(&attn_dir)?;
    }
    let mut failed = Vec::new();
    for (name, path) in &files {
        let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
        let result = Image::load(path).and_then(|img| model.dehaze(&img));
        match result {
            Ok(res) => {
                res.image.save_png(dehazed.join(format!("{stem}.png")))?;
                if d.dump_attention {
                    for (k, kind) in res.attention.kinds.iter().enumerate() {
                        res.attention_image(k)?
                            .save_gray_png(attn_dir.join(format!("{stem}_{}.png", kind.name())))?;
                    }
                }
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                failed.push(name.clone());
            }
        }
    }
    let details = serde_json::json!({ "inputs": files.len(), "failed": failed });
    if !failed.is_empty() {
        write_manifest(out, "dehaze", "partial", details)?;
        return Err(CliError::runtime(format!("{} of {} images could not be dehazed", failed.len(), files.len())));
    }
    println!("dehazed {} images into {}", files.len(), dehazed.display());
    Ok(details)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<serde_json::Value> {
    let set = make_synthetic_set(cfg.synth.n, cfg.synth.size, cfg.seed)?;
    set.write_flat_pairs(out)?;
    println!("wrote {} pairs to {}", set.len(), out.display());
    Ok(serde_json::json!({ "n": set.len(), "size": cfg.synth.size, "seed": cfg.seed }))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub heads: String,
    pub parameters: usize,
    pub final_loss: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ciede2000: Option<f64>,
    pub error: Option<String>,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn ablation_table(rows: &[AblationRow], baseline: f64) -> String {
    let mut s = String::from("| Variant | Heads | PSNR | SSIM | CIEDE2000 | Status |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.variant,
            r.heads,
            fmt_opt(r.psnr, 2),
            fmt_opt(r.ssim, 4),
            fmt_opt(r.ciede2000, 3),
            r.error.as_deref().unwrap_or("ok")
        ));
    }
    s.push_str(&format!("\nHazy input PSNR on the same set: {baseline:.2} dB\n"));
    s
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CliResult<serde_json::Value> {
    let names: Vec<String> = match &cfg.ablate.only {
        Some(list) => {
            let wanted = list
                .iter()
                .map(|n| VariantSpec::preset(n).map(|s| s.name().to_string()))
                .collect::<crate::Result<Vec<_>>>()?;
            PRESETS.iter().filter(|p| wanted.iter().any(|w| w == *p)).map(|p| p.to_string()).collect()
        }
        None => PRESETS.iter().map(|p| p.to_string()).collect(),
    };
    let (train_set, hold) = training_data(cfg)?;
    let hold = hold.ok_or_else(|| CliError::usage("config error: ablate needs a held-out set (data.holdout > 0)"))?;
    let baseline = evaluate_identity(&hold)?.summary().psnr;

    let mut rows = Vec::new();
    for name in &names {
        let spec = VariantSpec::preset(name)?;
        log::info!("ablation row {name}");
        let heads = spec.kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join(",");
        let mut row = AblationRow {
            variant: name.clone(),
            heads,
            parameters: 0,
            final_loss: None,
            psnr: None,
            ssim: None,
            ciede2000: None,
            error: None,
        };
        let run = || -> crate::Result<(usize, f64, crate::metrics::MetricsSummary)> {
            let model = cpu_model(&spec, cfg)?;
            let outcome = train(&model, &cfg.trainer, &train_set, None, None)?;
            let summary = evaluate_model(&model, &hold, |_, _| Ok(()))?.summary();
            Ok((model.parameter_count(), *outcome.losses.last().unwrap_or(&f64::NAN), summary))
        };
        match run() {
            Ok((params, loss, s)) => {
                row.parameters = params;
                row.final_loss = Some(loss);
                row.psnr = Some(s.psnr);
                row.ssim = Some(s.ssim);
                row.ciede2000 = Some(s.ciede2000);
            }
            Err(e) => {
                log::error!("{name} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }

    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| CliError::runtime(e.to_string()))?);
        jsonl.push('\n');
    }
    write_file(&out.join("ablation.jsonl"), jsonl)?;
    let table = ablation_table(&rows, baseline);
    write_file(&out.join("ablation.md"), &table)?;
    println!("{table}");
    let ok = rows.iter().filter(|r| r.error.is_none()).count();
    if ok == 0 {
        write_manifest(out, "ablate", "failed", serde_json::json!({ "rows": rows.len() }))?;
        return Err(CliError::runtime("every ablation variant failed"));
    }
    Ok(serde_json::json!({ "rows": rows.len(), "succeeded": ok, "hazy_psnr": baseline }))
}

/// Runs the CLI with explicit arguments and environment; returns the exit code.
pub fn run_with(args: impl IntoIterator<Item = OsString>, env: &[(String, String)]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Entry point used by the binary.
pub fn run() -> i32 {
    let env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    run_with(std::env::args_os(), &env)
}

fn execute(cli: &Cli, env: &[(String, String)]) -> CliResult<()> {
    let command = command_name(&cli.command);
    let cfg = resolve_config(cli.global.config.as_deref(), env, &cli.global.set, flag_overrides(cli)?)?;
    if let Command::Synth(_) = cli.command {
        if cfg.synth.n == 0 {
            return Err(Error::ZeroSamples("synth: --n must be at least 1".into()).into());
        }
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    create_dir(&out)?;
    let echoed = toml::to_string(&cfg).map_err(|e| CliError::runtime(format!("serializing config: {e}")))?;
    write_file(&out.join(RESOLVED_CONFIG), echoed)?;

    let details = match &cli.command {
        Command::Train(_) => cmd_train(&cfg, &out),
        Command::Eval(_) => cmd_eval(&cfg, &out),
        Command::Dehaze(_) => cmd_dehaze(&cfg, &out),
        Command::Synth(_) => cmd_synth(&cfg, &out),
        Command::Ablate(_) => cmd_ablate(&cfg, &out),
    }?;
    write_manifest(&out, command, "ok", details)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_rejoins_comma_preset() {
        assert_eq!(parse_only("CL2S,DM2F").unwrap(), vec!["CL2S", "DM2F"]);
        assert_eq!(parse_only("FD-J1,4,FDNet").unwrap(), vec!["FD-J1,4", "FDNet"]);
        assert_eq!(parse_only("FD-J1, FD-J1,4").unwrap(), vec!["FD-J1", "FD-J1,4"]);
        assert!(parse_only("NOPE").is_err());
    }

    #[test]
    fn values_parse_as_toml_literals() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("1e-4"), toml::Value::Float(1e-4));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("CL2S"), toml::Value::String("CL2S".into()));
    }

    #[test]
    fn layering_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        fs::write(&file, "seed = 1\n\"trainer.max_iters\" = 10\n[trainer]\nbatch_size = 3\n").unwrap();
        let env = vec![("CL2S_TRAINER__MAX_ITERS".to_string(), "20".to_string())];
        let cfg = resolve_config(Some(&file), &env, &["trainer.crop=64".into()], vec![("seed".into(), toml::Value::Integer(9))]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.trainer.seed, 9);
        assert_eq!(cfg.trainer.max_iters, 20);
        assert_eq!(cfg.trainer.batch_size, 3);
        assert_eq!(cfg.trainer.crop, 64);
    }

    #[test]
    fn echoed_config_round_trips() {
        let cfg = resolve_config(None, &[], &["variant=DM2F".into(), "data.synthetic=8".into()], vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("echo.toml");
        fs::write(&file, toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(resolve_config(Some(&file), &[], &[], vec![]).unwrap(), cfg);
    }

    #[test]
    fn bad_keys_and_devices_are_config_errors() {
        let e = resolve_config(None, &[], &["trainer.nope=1".into()], vec![]).unwrap_err();
        assert_eq!(e.code, 2);
        let e = resolve_config(None, &[], &["device=cuda".into()], vec![]).unwrap_err();
        assert_eq!(e.code, 2);
    }
}
