//! Run configuration: defaults, `key=value` files and `--key value` flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use semmae::mask_scheduler::Strategy;
use semmae::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenDataset,
    Partlearn,
    Pretrain,
    ExportPlans,
    Report,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::GenDataset,
        Command::Partlearn,
        Command::Pretrain,
        Command::ExportPlans,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenDataset => "gen-dataset",
            Command::Partlearn => "partlearn",
            Command::Pretrain => "pretrain",
            Command::ExportPlans => "export-plans",
            Command::Report => "report",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoBlobs,
    KParts,
    Checker,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoBlobs => "two-blobs",
            DatasetKind::KParts => "k-parts",
            DatasetKind::Checker => "checker",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-blobs" => Ok(DatasetKind::TwoBlobs),
            "k-parts" => Ok(DatasetKind::KParts),
            "checker" => Ok(DatasetKind::Checker),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

/// Where pretraining takes its part segmentation from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentationSource {
    None,
    /// Per-patch majority of the dataset's ground-truth label sidecar.
    GroundTruth,
    File(PathBuf),
}

/// Every tunable of every command. Unused keys are simply ignored by
/// commands that do not read them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,

    pub kind: DatasetKind,
    pub count: usize,
    pub k_parts: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,

    pub parts: usize,
    pub mask_ratio: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub blur_kernel: usize,
    pub keep_fraction: f64,

    pub epochs: usize,
    /// `None` means 5% of `epochs`, rounded.
    pub warmup_epochs: Option<usize>,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub reverse_schedule: bool,
    pub hflip: bool,

    pub strategy: Strategy,
    pub segmentation: SegmentationSource,
    pub init_checkpoint: Option<PathBuf>,
    pub eval_masks: usize,

    pub enc_width: usize,
    pub enc_heads: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,

    pub part_lr: f64,
    pub encoder_warm_epochs: usize,
    pub joint_encoder: bool,
    pub attn_bottleneck: usize,
    pub attn_embed: usize,
    pub decoder_blocks: usize,
    pub decoder_base: usize,
    pub decoder_kernel: usize,
    pub dump_recon: bool,

    pub plan_epochs: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            kind: DatasetKind::TwoBlobs,
            count: 64,
            k_parts: 4,
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            parts: 6,
            mask_ratio: 0.75,
            gamma: 2.0,
            lambda: 0.03,
            blur_kernel: 7,
            keep_fraction: 0.25,
            epochs: 100,
            warmup_epochs: None,
            peak_lr: 2.4e-3,
            weight_decay: 0.05,
            batch_size: 16,
            reverse_schedule: false,
            hflip: true,
            strategy: Strategy::Semantic,
            segmentation: SegmentationSource::None,
            init_checkpoint: None,
            eval_masks: 4,
            enc_width: 64,
            enc_heads: 4,
            enc_depth: 4,
            dec_width: 32,
            dec_heads: 2,
            dec_depth: 2,
            mlp_ratio: 2,
            part_lr: 5e-3,
            encoder_warm_epochs: 20,
            joint_encoder: false,
            attn_bottleneck: 16,
            attn_embed: 32,
            decoder_blocks: 3,
            decoder_base: 32,
            decoder_kernel: 3,
            dump_recon: false,
            plan_epochs: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "dataset" => self.dataset = optional_path(v),
            "kind" => self.kind = v.parse()?,
            "count" => self.count = parse(key, v)?,
            "k_parts" => self.k_parts = parse(key, v)?,
            "image_height" => self.image_height = parse(key, v)?,
            "image_width" => self.image_width = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "parts" => self.parts = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "blur_kernel" => self.blur_kernel = parse(key, v)?,
            "keep_fraction" => self.keep_fraction = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_epochs" => {
                self.warmup_epochs = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "reverse_schedule" => self.reverse_schedule = parse_bool(key, v)?,
            "hflip" => self.hflip = parse_bool(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "segmentation" => {
                self.segmentation = match v {
                    "" | "none" => SegmentationSource::None,
                    "ground-truth" => SegmentationSource::GroundTruth,
                    path => SegmentationSource::File(PathBuf::from(path)),
                }
            }
            "init_checkpoint" => self.init_checkpoint = optional_path(v),
            "eval_masks" => self.eval_masks = parse(key, v)?,
            "enc_width" => self.enc_width = parse(key, v)?,
            "enc_heads" => self.enc_heads = parse(key, v)?,
            "enc_depth" => self.enc_depth = parse(key, v)?,
            "dec_width" => self.dec_width = parse(key, v)?,
            "dec_heads" => self.dec_heads = parse(key, v)?,
            "dec_depth" => self.dec_depth = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "part_lr" => self.part_lr = parse(key, v)?,
            "encoder_warm_epochs" => self.encoder_warm_epochs = parse(key, v)?,
            "joint_encoder" => self.joint_encoder = parse_bool(key, v)?,
            "attn_bottleneck" => self.attn_bottleneck = parse(key, v)?,
            "attn_embed" => self.attn_embed = parse(key, v)?,
            "decoder_blocks" => self.decoder_blocks = parse(key, v)?,
            "decoder_base" => self.decoder_base = parse(key, v)?,
            "decoder_kernel" => self.decoder_kernel = parse(key, v)?,
            "dump_recon" => self.dump_recon = parse_bool(key, v)?,
            "plan_epochs" => {
                self.plan_epochs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn effective_warmup_epochs(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (0.05 * self.epochs as f64).round() as usize)
    }

    /// Every effective parameter as `key=value` lines, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let seg = match &self.segmentation {
            SegmentationSource::None => "none".to_string(),
            SegmentationSource::GroundTruth => "ground-truth".to_string(),
            SegmentationSource::File(p) => p.display().to_string(),
        };
        let plan_epochs = self.plan_epochs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("dataset", show_path(&self.dataset)),
            ("kind", self.kind.name().to_string()),
            ("count", self.count.to_string()),
            ("k_parts", self.k_parts.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("parts", self.parts.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda", self.lambda.to_string()),
            ("blur_kernel", self.blur_kernel.to_string()),
            ("keep_fraction", self.keep_fraction.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.effective_warmup_epochs().to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("reverse_schedule", self.reverse_schedule.to_string()),
            ("hflip", self.hflip.to_string()),
            ("strategy", self.strategy.name().to_string()),
            ("segmentation", seg),
            ("init_checkpoint", show_path(&self.init_checkpoint)),
            ("eval_masks", self.eval_masks.to_string()),
            ("enc_width", self.enc_width.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("dec_width", self.dec_width.to_string()),
            ("dec_heads", self.dec_heads.to_string()),
            ("dec_depth", self.dec_depth.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("part_lr", self.part_lr.to_string()),
            ("encoder_warm_epochs", self.encoder_warm_epochs.to_string()),
            ("joint_encoder", self.joint_encoder.to_string()),
            ("attn_bottleneck", self.attn_bottleneck.to_string()),
            ("attn_embed", self.attn_embed.to_string()),
            ("decoder_blocks", self.decoder_blocks.to_string()),
            ("decoder_base", self.decoder_base.to_string()),
            ("decoder_kernel", self.decoder_kernel.to_string()),
            ("dump_recon", self.dump_recon.to_string()),
            ("plan_epochs", plan_epochs),
        ]
    }

    pub fn resolved_text(&self, command: Command) -> String {
        let mut s = format!("# resolved configuration for `{}`\n", command.name());
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write_resolved(&self, command: Command) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join("config.resolved");
        std::fs::write(&path, self.resolved_text(command))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("count", self.count),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("parts", self.parts),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k_parts", self.k_parts),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch_size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config(format!("blur_kernel must be odd, got {}", self.blur_kernel)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction must be in (0, 1], got {}", self.keep_fraction)));
        }
        if self.effective_warmup_epochs() > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.effective_warmup_epochs(),
                self.epochs
            )));
        }
        for (k, v) in [("peak_lr", self.peak_lr), ("part_lr", self.part_lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be finite and >= 0, got {v}")));
            }
        }
        if self.kind == DatasetKind::KParts && self.k_parts > 8 {
            return Err(Error::Config(format!("k-parts supports at most 8 shapes, got {}", self.k_parts)));
        }
        Ok(())
    }
}

/// Parsed command line: the command plus its configuration.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
}

pub const USAGE: &str = "\
usage: semmae <command> [--config FILE] [--seed N] [--out DIR] [--key value]...

commands:
  gen-dataset    write a synthetic dataset and its ground-truth label sidecar
  partlearn      train the part-attention module and style decoder
  pretrain       masked-autoencoder pretraining with a masking strategy
  export-plans   write per-image mask plans for selected epochs
  report         summarize metrics CSVs found in --out

Flags override the config file regardless of order. Every run writes
DIR/config.resolved, which reproduces the run when passed to --config.";

/// Parses `args` (without the program name). A `--config` file is applied
/// first, then every other flag in order.
pub fn parse_args<S: AsRef<str>>(args: &[S]) -> Result<Invocation> {
    let args: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    let Some((cmd, rest)) = args.split_first() else {
        return Err(Error::Config(format!("missing command\n{USAGE}")));
    };
    let command: Command = cmd.parse()?;
    let mut pairs = Vec::new();
    let mut config_file = None;
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument {flag:?}\n{USAGE}")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k, v),
            None => (
                key,
                *it.next()
                    .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?,
            ),
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value.to_string()));
        }
    }
    let mut config = RunConfig::default();
    if let Some(path) = config_file {
        config.apply_file(&path)?;
    }
    for (k, v) in pairs {
        config.set(&k, &v)?;
    }
    config.validate()?;
    Ok(Invocation { command, config })
}
