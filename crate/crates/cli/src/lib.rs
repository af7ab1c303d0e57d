//! Argument resolution and command dispatch for the `tumorforge` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Arg, ArgAction};
use log::info;
use thiserror::Error;

use tumorforge::data::{DataError, DatasetManifest, MCSlice, SliceRecord};
use tumorforge::evaluation::{augmentation_experiment, evaluate_segmentation, fid_per_contrast, EvalError};
use tumorforge::geometry::ConcentricCircles;
use tumorforge::losses::{LossWeights, Reduction};
use tumorforge::nets::{build_feature_extractor, load_checkpoint, save_checkpoint, ExtractorMode, NetError, Network};
use tumorforge::phantom::{generate_phantom, PhantomConfig, PhantomError};
use tumorforge::synthesis::{synthesize_batch, synthesize_with_circles, ModelBundle, SynthesisConfig, SynthesisError};
use tumorforge::training::{
    train_g_binary, train_g_grade, train_inpaint, train_segmentation, TrainConfig, TrainError, TrainReport,
};

pub const DATA_ENV: &str = "TUMORFORGE_DATA";

#[derive(Debug, Error, PartialEq)]
pub enum UsageError {
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("unknown option {0:?}")]
    UnknownOption(String),
    #[error("missing required option {0:?}")]
    MissingRequired(String),
    #[error("invalid value {value:?} for {key:?}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("{0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] UsageError),
    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
}

const WRAPPERS: [&str; 9] = ["Usage", "Data", "Phantom", "Train", "Synthesis", "Eval", "Net", "Geometry", "Loss"];

const DATA_CATEGORIES: [&str; 16] = [
    "Io",
    "DegenerateStd",
    "CorruptRecord",
    "UnknownVersion",
    "InvalidGrade",
    "InvalidBinary",
    "DimensionMismatch",
    "InvalidManifest",
    "EmptyDataset",
    "Checkpoint",
    "BackboneUnavailable",
    "InputMismatch",
    "NoNormals",
    "NotNormalized",
    "SplitOverlap",
    "Empty",
];

impl CliError {
    /// Name of the innermost error variant, e.g. `CorruptRecord`.
    pub fn category(&self) -> String {
        let debug = format!("{self:?}");
        let mut s = debug.as_str();
        loop {
            let name: String = s.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
            let rest = &s[name.len()..];
            if WRAPPERS.contains(&name.as_str()) && rest.starts_with('(') {
                s = &rest[1..];
            } else {
                return name;
            }
        }
    }

    /// 2 usage, 3 data, 4 training or numeric.
    pub fn exit_code(&self) -> i32 {
        let cat = self.category();
        if matches!(self, CliError::Usage(_)) || cat == "InvalidConfig" {
            2
        } else if DATA_CATEGORIES.contains(&cat.as_str()) {
            3
        } else {
            4
        }
    }

    /// One line: `error[<category>]: <message>`.
    pub fn report_line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.category())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    PhantomGen,
    Preprocess,
    TrainMasks,
    TrainInpaint,
    TrainSeg,
    Synth,
    EvalFid,
    EvalSeg,
    Report,
}

const TRAIN_KEYS: [&str; 13] = [
    "data",
    "out",
    "seed",
    "learning_rate",
    "epochs",
    "batch_size",
    "checkpoint_every",
    "w_pix",
    "w_cont",
    "w_adv",
    "reduction",
    "beta1",
    "beta2",
];

impl Command {
    pub const ALL: [Command; 9] = [
        Command::PhantomGen,
        Command::Preprocess,
        Command::TrainMasks,
        Command::TrainInpaint,
        Command::TrainSeg,
        Command::Synth,
        Command::EvalFid,
        Command::EvalSeg,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::PhantomGen => "phantom-gen",
            Command::Preprocess => "preprocess",
            Command::TrainMasks => "train-masks",
            Command::TrainInpaint => "train-inpaint",
            Command::TrainSeg => "train-seg",
            Command::Synth => "synth",
            Command::EvalFid => "eval-fid",
            Command::EvalSeg => "eval-seg",
            Command::Report => "report",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Command::PhantomGen => "Generate a synthetic phantom dataset",
            Command::Preprocess => "Normalize every record of a dataset",
            Command::TrainMasks => "Train the binary and grade mask generators",
            Command::TrainInpaint => "Train the inpainting generator and discriminator",
            Command::TrainSeg => "Train the segmentation network",
            Command::Synth => "Synthesize tumor-bearing slices from normal ones",
            Command::EvalFid => "Per-contrast FID between two datasets",
            Command::EvalSeg => "Score a segmentation checkpoint on a dataset",
            Command::Report => "Run the augmentation experiment and print its table",
        }
    }

    /// Option keys accepted on the command line and in config files.
    pub fn keys(self) -> Vec<&'static str> {
        let mut keys = match self {
            Command::PhantomGen => vec!["size", "subjects", "slices", "tumor_probability", "seed", "out"],
            Command::Preprocess => vec!["data", "out"],
            Command::TrainMasks | Command::TrainInpaint | Command::TrainSeg => TRAIN_KEYS.to_vec(),
            Command::Synth => vec!["models", "normals", "n", "seed", "out", "circles", "max_attempts"],
            Command::EvalFid => vec!["set_a", "set_b", "seed", "backbone", "out"],
            Command::EvalSeg => vec!["model", "data", "split", "out"],
            Command::Report => {
                let mut k = TRAIN_KEYS.to_vec();
                k.retain(|k| *k != "data");
                k.extend(["experiment", "synth_ratio"]);
                k
            }
        };
        if self == Command::TrainInpaint {
            keys.push("backbone");
        }
        keys
    }

    pub fn required(self) -> &'static [&'static str] {
        match self {
            Command::PhantomGen | Command::Preprocess => &["out"],
            Command::TrainMasks | Command::TrainInpaint | Command::TrainSeg => &["data", "out"],
            Command::Synth => &["models", "normals", "out"],
            Command::EvalFid => &["set_a", "set_b"],
            Command::EvalSeg => &["model", "data"],
            Command::Report => &["experiment", "out"],
        }
    }

    fn defaults(self) -> Vec<(&'static str, String)> {
        let train = |c: TrainConfig| {
            vec![
                ("seed", c.seed.to_string()),
                ("learning_rate", c.learning_rate.to_string()),
                ("epochs", c.epochs.to_string()),
                ("batch_size", c.batch_size.to_string()),
                ("checkpoint_every", c.checkpoint_every.to_string()),
                ("w_pix", c.loss_weights.w_pix.to_string()),
                ("w_cont", c.loss_weights.w_cont.to_string()),
                ("w_adv", c.loss_weights.w_adv.to_string()),
                ("reduction", "mean".to_string()),
                ("beta1", c.adam_betas.0.to_string()),
                ("beta2", c.adam_betas.1.to_string()),
            ]
        };
        match self {
            Command::PhantomGen => {
                let p = PhantomConfig::default();
                vec![
                    ("size", p.size.to_string()),
                    ("subjects", p.n_subjects.to_string()),
                    ("slices", p.slices_per_subject.to_string()),
                    ("tumor_probability", p.tumor_probability.to_string()),
                    ("seed", p.seed.to_string()),
                ]
            }
            Command::Preprocess => vec![],
            Command::TrainMasks | Command::TrainInpaint => train(TrainConfig::default()),
            Command::TrainSeg | Command::Report => train(TrainConfig::segmentation()),
            Command::Synth => vec![("n", "64".into()), ("seed", "0".into()), ("max_attempts", "1000".into())],
            Command::EvalFid => vec![("seed", "0".into())],
            Command::EvalSeg => vec![("split", "test".into())],
        }
    }
}

impl FromStr for Command {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| UsageError::UnknownCommand(s.to_string()))
    }
}

/// Fully resolved invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub options: BTreeMap<String, String>,
    pub seed: u64,
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.options.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str, UsageError> {
        self.get(key).ok_or_else(|| UsageError::MissingRequired(key.to_string()))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, UsageError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.require(key)?;
        v.parse().map_err(|e: T::Err| UsageError::InvalidValue {
            key: key.to_string(),
            value: v.to_string(),
            reason: e.to_string(),
        })
    }

    fn path(&self, key: &str) -> Result<PathBuf, UsageError> {
        self.require(key).map(PathBuf::from)
    }

    /// Flat `key = value` text that reproduces this run via `--config`.
    pub fn manifest_text(&self) -> String {
        let mut s = format!("# tumorforge {}\n", self.command.name());
        for (k, v) in &self.options {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn clap_command() -> clap::Command {
    let mut root = clap::Command::new("tumorforge")
        .about("Concentric-circle brain tumor synthesis")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .disable_help_subcommand(true);
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config").long("config").value_name("FILE").help("flat key = value file").action(ArgAction::Set),
        );
        for key in cmd.keys() {
            sub = sub.arg(Arg::new(key).long(flag(key)).value_name(key.to_uppercase()).action(ArgAction::Set));
        }
        root = root.subcommand(sub);
    }
    root
}

fn context(e: &clap::Error, kind: ContextKind) -> String {
    match e.get(kind) {
        Some(ContextValue::String(s)) => s.clone(),
        Some(ContextValue::Strings(v)) => v.join(" "),
        _ => String::new(),
    }
}

/// Parse a flat `key = value` config file. Blank lines and `#` comments are
/// skipped; keys may use `-` or `_`.
pub fn parse_config_text(text: &str, command: Command) -> Result<BTreeMap<String, String>, UsageError> {
    let keys = command.keys();
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError::Malformed(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim().replace('-', "_");
        if !keys.contains(&k.as_str()) {
            return Err(UsageError::UnknownOption(k));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

/// Resolve argv with precedence flag > config file > `TUMORFORGE_DATA` >
/// built-in default.
pub fn parse_args<S: AsRef<str>>(argv: &[S]) -> Result<RunConfig, CliError> {
    parse_args_with_env(argv, std::env::var(DATA_ENV).ok())
}

pub fn parse_args_with_env<S: AsRef<str>>(argv: &[S], data_env: Option<String>) -> Result<RunConfig, CliError> {
    let args: Vec<&str> = argv.iter().map(AsRef::as_ref).collect();
    let matches = clap_command().try_get_matches_from(&args).map_err(|e| match e.kind() {
        ErrorKind::InvalidSubcommand => UsageError::UnknownCommand(context(&e, ContextKind::InvalidSubcommand)),
        ErrorKind::UnknownArgument => UsageError::UnknownOption(context(&e, ContextKind::InvalidArg)),
        ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            UsageError::MissingRequired("command".into())
        }
        _ => UsageError::Malformed(e.to_string().lines().next().unwrap_or_default().to_string()),
    });
    let matches = match matches {
        Ok(m) => m,
        Err(UsageError::Malformed(_)) => {
            // Help and version requests are not errors; let clap print them.
            let e = clap_command().try_get_matches_from(&args).unwrap_err();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            return Err(UsageError::Malformed(e.to_string().lines().next().unwrap_or_default().to_string()).into());
        }
        Err(e) => return Err(e.into()),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let command: Command = name.parse()?;

    let mut options: BTreeMap<String, String> =
        command.defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if let (Some(d), true) = (data_env, command.keys().contains(&"data")) {
        options.insert("data".into(), d);
    }
    if let Some(path) = sub.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(io_err(Path::new(path)))?;
        options.extend(parse_config_text(&text, command)?);
    }
    for key in command.keys() {
        if let Some(v) = sub.get_one::<String>(key) {
            options.insert(key.to_string(), v.clone());
        }
    }
    let seed = match options.get("seed") {
        Some(v) => v.parse().map_err(|_| UsageError::InvalidValue {
            key: "seed".into(),
            value: v.clone(),
            reason: "expected a non-negative integer".into(),
        })?,
        None => 0,
    };
    Ok(RunConfig { command, options, seed })
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, UsageError> {
    let reduction = match cfg.require("reduction")? {
        "mean" => Reduction::Mean,
        "sum" => Reduction::Sum,
        other => {
            return Err(UsageError::InvalidValue {
                key: "reduction".into(),
                value: other.into(),
                reason: "expected mean or sum".into(),
            })
        }
    };
    Ok(TrainConfig {
        learning_rate: cfg.parse("learning_rate")?,
        epochs: cfg.parse("epochs")?,
        batch_size: cfg.parse("batch_size")?,
        checkpoint_every: cfg.parse("checkpoint_every")?,
        seed: cfg.seed,
        loss_weights: LossWeights { w_pix: cfg.parse("w_pix")?, w_cont: cfg.parse("w_cont")?, w_adv: cfg.parse("w_adv")?, reduction },
        adam_betas: (cfg.parse("beta1")?, cfg.parse("beta2")?),
        backbone: cfg.get("backbone").map(PathBuf::from),
        checkpoint_dir: None,
    })
}

fn parse_circles(s: &str) -> Result<ConcentricCircles, UsageError> {
    let bad = |reason: String| UsageError::InvalidValue { key: "circles".into(), value: s.into(), reason };
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| bad(e.to_string()))?;
    let [cx, cy, r1, r2, r3] = v[..] else {
        return Err(bad("expected cx,cy,r1,r2,r3".into()));
    };
    ConcentricCircles::new(cx, cy, r1, r2, r3).map_err(|e| bad(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    write_text(path, &(text + "\n"))
}

fn save_trained(net: &Network, report: &TrainReport, dir: &Path, stem: &str) -> Result<(), CliError> {
    let epoch = report.chosen_epoch.unwrap_or(report.val_loss.len());
    let val = epoch.checked_sub(1).and_then(|i| report.val_loss.get(i)).copied();
    save_checkpoint(net, epoch, val, &dir.join(format!("{stem}.safetensors")))?;
    write_json(&dir.join(format!("report_{stem}.json")), report)?;
    println!("{stem}: epoch {epoch} validation loss {}", val.map_or("n/a".to_string(), |v| format!("{v:.6}")));
    Ok(())
}

fn images<'a>(records: impl IntoIterator<Item = &'a SliceRecord>) -> Result<Vec<MCSlice>, DataError> {
    records.into_iter().map(|r| if r.images.is_normalized() { Ok(r.images.clone()) } else { r.images.normalized() }).collect()
}

/// Check required keys, write the run manifest under `--out`, and dispatch.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    for key in cfg.command.required() {
        cfg.require(key)?;
    }
    let out = cfg.get("out").map(PathBuf::from);
    info!("{} seed={}", cfg.command.name(), cfg.seed);
    if let Some(dir) = &out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_text(&dir.join(format!("run_{}.txt", cfg.command.name())), &cfg.manifest_text())?;
    }
    match cfg.command {
        Command::PhantomGen => {
            let p = PhantomConfig {
                size: cfg.parse("size")?,
                n_subjects: cfg.parse("subjects")?,
                slices_per_subject: cfg.parse("slices")?,
                tumor_probability: cfg.parse("tumor_probability")?,
                seed: cfg.seed,
            };
            let m = generate_phantom(&p)?;
            m.save(out.as_deref().expect("required"))?;
            println!("phantom: {} records", m.len());
        }
        Command::Preprocess => {
            let m = DatasetManifest::load(&cfg.path("data")?)?.normalized()?;
            m.save(out.as_deref().expect("required"))?;
            println!("preprocess: {} records normalized", m.len());
        }
        Command::TrainMasks => {
            let data = DatasetManifest::load(&cfg.path("data")?)?;
            let tc = train_config(cfg)?;
            let dir = out.as_deref().expect("required");
            let (g, r) = train_g_binary(&data, &tc)?;
            save_trained(&g, &r, dir, "g_binary")?;
            let (g, r) = train_g_grade(&data, &tc)?;
            save_trained(&g, &r, dir, "g_grade")?;
        }
        Command::TrainInpaint => {
            let data = DatasetManifest::load(&cfg.path("data")?)?;
            let dir = out.as_deref().expect("required");
            let (g, d, r) = train_inpaint(&data, &train_config(cfg)?)?;
            save_trained(&g, &r, dir, "g_inpaint")?;
            let epoch = r.chosen_epoch.unwrap_or(r.val_loss.len());
            save_checkpoint(&d, epoch, None, &dir.join("d_inpaint.safetensors"))?;
        }
        Command::TrainSeg => {
            let data = DatasetManifest::load(&cfg.path("data")?)?;
            let (net, r) = train_segmentation(&data, &train_config(cfg)?)?;
            save_trained(&net, &r, out.as_deref().expect("required"), "unet_seg")?;
        }
        Command::Synth => {
            let models = ModelBundle::load(&cfg.path("models")?)?;
            let pool = DatasetManifest::load(&cfg.path("normals")?)?;
            let normals = DatasetManifest::new(pool.records.into_iter().filter(|r| !r.has_tumor()).collect());
            let n: usize = cfg.parse("n")?;
            let m = match cfg.get("circles") {
                Some(c) => synthesize_with_circles(&normals, &parse_circles(c)?, n, cfg.seed, &models)?,
                None => {
                    let size = normals.records.first().ok_or(SynthesisError::NoNormals)?.images.height();
                    let sc = SynthesisConfig {
                        max_attempts_per_image: cfg.parse("max_attempts")?,
                        ..SynthesisConfig::for_size(size, n, cfg.seed)
                    };
                    synthesize_batch(&normals, &sc, &models)?
                }
            };
            m.save(out.as_deref().expect("required"))?;
            println!("synth: {} records", m.len());
        }
        Command::EvalFid => {
            let a = images(&DatasetManifest::load(&cfg.path("set_a")?)?.records)?;
            let b = images(&DatasetManifest::load(&cfg.path("set_b")?)?.records)?;
            let psi = match cfg.get("backbone") {
                Some(p) => build_feature_extractor(ExtractorMode::Pretrained, cfg.seed, Some(Path::new(p)))?,
                None => build_feature_extractor(ExtractorMode::FixedRandom, cfg.seed, None)?,
            };
            let report = fid_per_contrast(&psi, &a.iter().collect::<Vec<_>>(), &b.iter().collect::<Vec<_>>())?;
            println!("{}", serde_json::to_string(&report).expect("serializable"));
            if let Some(dir) = &out {
                write_json(&dir.join("fid.json"), &report)?;
            }
        }
        Command::EvalSeg => {
            let (net, _) = load_checkpoint(&cfg.path("model")?)?;
            let data = DatasetManifest::load(&cfg.path("data")?)?;
            let split = cfg.require("split")?;
            let mut records = data.split(split);
            if records.is_empty() && !data.splits.contains_key(split) {
                records = data.records.iter().collect();
            }
            let scores = evaluate_segmentation(&net, &records)?;
            println!("{}", serde_json::to_string(&scores).expect("serializable"));
            if let Some(dir) = &out {
                write_json(&dir.join("eval_seg.json"), &scores)?;
            }
        }
        Command::Report => {
            let exp = cfg.path("experiment")?;
            let real = DatasetManifest::load(&exp.join("real"))?;
            let synth = DatasetManifest::load(&exp.join("synth"))?;
            let test = DatasetManifest::load(&exp.join("test"))?;
            let ratio = cfg.get("synth_ratio").map(|_| cfg.parse::<f64>("synth_ratio")).transpose()?;
            let report = augmentation_experiment(&real, &synth, &test, &train_config(cfg)?, ratio)?;
            let dir = out.as_deref().expect("required");
            write_text(&dir.join("report.txt"), &report.to_text())?;
            write_text(&dir.join("report.csv"), &report.to_csv())?;
            write_json(&dir.join("report.json"), &report)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}
