//! Command-line front end: dataset synthesis, training, generation and
//! evaluation, each writing a JSON run manifest next to its outputs.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use agrgan::data::{
    generate_synthetic, read_dataset, read_ppm, sha256_hex, split_by_identity, write_dataset, write_ppm, LabeledImage,
    SynthConfig, INDEX_FILE,
};
use agrgan::eval::{
    ablation_run, aging_model_eval, identity_preservation_eval, verification_gain_eval, write_json, AblationVariant,
    OracleModels,
};
use agrgan::nn::{AgrGan, ConditionVector, ScaleProfile, AGE_GROUPS, IMAGE_CHANNELS};
use agrgan::tensor::Tensor;
use agrgan::train::{train, TrainConfig, TrainManifest, CHECKPOINT_DIR, TRAIN_MANIFEST};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use config::ConfigFile;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const ORACLE_DIR: &str = "oracles";
pub const GRID_FILE: &str = "grid.ppm";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] agrgan::Error),
}

impl CliError {
    /// 2 for usage and input problems, 3 for numerical or threshold failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(agrgan::Error::NonFinite { .. } | agrgan::Error::Threshold { .. }) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "agrgan", version, about = "Age-gap reducing GAN: synthesize, train, generate, evaluate")]
pub struct Cli {
    /// `key=value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to P6 images plus an index CSV.
    Synth(SynthArgs),
    /// Train a model; writes per-epoch checkpoints and a loss CSV.
    Train(TrainArgs),
    /// Transform input images to the requested age groups.
    Generate(GenerateArgs),
    /// Run one evaluation experiment.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub per_identity: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOptions {
    /// `paper` or `desk`.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub d_steps: Option<usize>,
    /// Comma-separated loss weights, e.g. `w_id=1,w_agegap=0`.
    #[arg(long)]
    pub weights: Option<String>,
    /// Directory of pretrained oracles; trained from the data split when absent.
    #[arg(long)]
    pub oracles: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    /// P6 input image; repeat for several rows.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    /// `a..b` (inclusive), a comma list, or a single group.
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub gender: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Aging,
    Identity,
    Verification,
    Ablation,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
    /// Ablation variants to train, comma-separated (default: all four).
    #[arg(long)]
    pub variants: Option<String>,
    #[command(flatten)]
    pub opts: TrainOptions,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One per output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub dataset_index_sha256: Option<String>,
    pub checkpoints: Vec<String>,
    pub outputs: Vec<String>,
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainManifest>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn rel(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    Ok(write_json(&dir.join(RUN_MANIFEST), m)?)
}

fn dataset_hash(dir: &Path) -> Result<String> {
    let p = dir.join(INDEX_FILE);
    let bytes = fs::read(&p).map_err(|e| CliError::Usage(format!("dataset index {}: {e}", p.display())))?;
    Ok(sha256_hex(&bytes))
}

fn load_data(dir: &Path) -> Result<Vec<LabeledImage>> {
    if !dir.join(INDEX_FILE).is_file() {
        return Err(CliError::Usage(format!("no dataset at {} (missing {INDEX_FILE})", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

/// Parses `a..b` (inclusive), `a,b,c` or `a`.
pub fn parse_groups(spec: &str) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid --groups `{spec}`"));
    let groups: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if groups.is_empty() || groups.iter().any(|&g| g >= AGE_GROUPS) {
        return Err(CliError::Usage(format!("--groups `{spec}` must name groups in 0..{AGE_GROUPS}")));
    }
    Ok(groups)
}

/// Effective training configuration: flags, then config file, then the
/// profile's defaults.
pub fn train_config(opts: &TrainOptions, cfg: &ConfigFile) -> Result<TrainConfig> {
    let profile_name = cfg.resolve(opts.profile.clone(), "profile", "desk".to_string())?;
    let profile = ScaleProfile::by_name(&profile_name)?;
    let d = TrainConfig::for_profile(profile);
    let mut c = TrainConfig {
        epochs: cfg.resolve(opts.epochs, "epochs", d.epochs)?,
        seed: cfg.resolve(opts.seed, "seed", d.seed)?,
        batch_size: cfg.resolve(opts.batch_size, "batch_size", d.batch_size)?,
        lr: cfg.resolve(opts.lr, "lr", d.lr)?,
        beta1: cfg.resolve(opts.beta1, "beta1", d.beta1)?,
        d_steps: cfg.resolve(opts.d_steps, "d_steps", d.d_steps)?,
        ..d
    };
    let parse_w = |k: &str, v: &str| -> Result<f64> {
        v.trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("loss weight `{k}` = `{v}` is not a number")))
    };
    for (k, v) in cfg.weights() {
        c.weights.set(k, parse_w(k, v)?)?;
    }
    if let Some(list) = &opts.weights {
        for item in list.split(',').filter(|s| !s.trim().is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--weights entry `{item}` is not key=value")))?;
            c.weights.set(k.trim(), parse_w(k, v)?)?;
        }
    }
    c.validate()?;
    Ok(c)
}

/// Loads oracles from `dir`, or trains them on the identity split of
/// `data` and saves them under `save_to`.
fn oracles_for(
    dir: Option<&Path>,
    train_split: &[LabeledImage],
    heldout: &[LabeledImage],
    profile: ScaleProfile,
    seed: u64,
    save_to: &Path,
) -> Result<OracleModels> {
    if let Some(d) = dir {
        let o = OracleModels::load(d)?;
        if o.report.profile != profile {
            return Err(CliError::Usage(format!(
                "oracles in {} were trained for {:?}, not {profile:?}",
                d.display(),
                o.report.profile
            )));
        }
        o.check_thresholds()?;
        return Ok(o);
    }
    if heldout.is_empty() {
        return Err(CliError::Usage(
            "dataset has no held-out identities for oracle training (need at least 5 identities)".into(),
        ));
    }
    let o = OracleModels::pretrain(train_split, heldout, profile, seed)?;
    o.save(save_to)?;
    Ok(o)
}

pub fn cmd_synth(a: &SynthArgs, cfg: &ConfigFile) -> Result<()> {
    let started = now();
    let d = SynthConfig::default();
    let sc = SynthConfig {
        identities: cfg.resolve(a.identities, "identities", d.identities)?,
        per_identity: cfg.resolve(a.per_identity, "per_identity", d.per_identity)?,
        size: cfg.resolve(a.size, "size", d.size)?,
        seed: cfg.resolve(a.seed, "seed", d.seed)?,
    };
    let out = required(cfg.resolve_opt(a.out.clone(), "out")?, "out")?;
    let samples = generate_synthetic(&sc)?;
    create_dir(&out)?;
    let m = write_dataset(&out, &samples, Some(sc)).map_err(|e| match e {
        agrgan::Error::Io { path, source } => CliError::Usage(format!("cannot write {}: {source}", path.display())),
        e => e.into(),
    })?;
    write_manifest(
        &out,
        &RunManifest {
            command: "synth".into(),
            config: serde_json::to_value(m)?,
            seed: Some(sc.seed),
            dataset_index_sha256: Some(dataset_hash(&out)?),
            checkpoints: vec![],
            outputs: vec![INDEX_FILE.into()],
            status: "complete".into(),
            started_unix: started,
            finished_unix: now(),
            train: None,
        },
    )
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub fn cmd_train(a: &TrainArgs, cfg: &ConfigFile) -> Result<()> {
    let started = now();
    let data_dir = required(cfg.resolve_opt(a.data.clone(), "data")?, "data")?;
    let out = required(cfg.resolve_opt(a.out.clone(), "out")?, "out")?;
    let config = train_config(&a.opts, cfg)?;
    let oracle_dir = cfg.resolve_opt(a.opts.oracles.clone(), "oracles")?;
    let hash = dataset_hash(&data_dir)?;
    let (train_split, heldout) = split_by_identity(load_data(&data_dir)?);
    if train_split.is_empty() {
        return Err(CliError::Usage("dataset has no training identities".into()));
    }
    create_dir(&out)?;
    let oracles = oracles_for(
        oracle_dir.as_deref(),
        &train_split,
        &heldout,
        config.profile,
        config.seed,
        &out.join(ORACLE_DIR),
    )?;
    let result = train(config, &train_split, &oracles.phi, Some(&out));
    let mpath = out.join(TRAIN_MANIFEST);
    let tm: TrainManifest = serde_json::from_str(
        &fs::read_to_string(&mpath).map_err(|e| CliError::Core(agrgan::Error::Io { path: mpath.clone(), source: e }))?,
    )?;
    let m = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(config)?,
        seed: Some(config.seed),
        dataset_index_sha256: Some(hash),
        checkpoints: tm.checkpoints.clone(),
        outputs: vec![agrgan::train::LOSS_CSV.into()],
        status: tm.status.clone(),
        started_unix: started,
        finished_unix: now(),
        train: Some(tm),
    };
    write_manifest(&out, &m)?;
    result?;
    Ok(())
}

fn read_input(path: &Path, size: usize) -> Result<Tensor> {
    let img = read_ppm(path).map_err(|e| CliError::Usage(e.to_string()))?;
    if img.shape() != [IMAGE_CHANNELS, size, size] {
        return Err(CliError::Usage(format!(
            "{}: image is {:?}, the profile expects {IMAGE_CHANNELS}x{size}x{size}",
            path.display(),
            img.shape()
        )));
    }
    Ok(img)
}

/// Tiles `cells[row][col]` (each `3 × S × S`) into one image.
pub fn grid(cells: &[Vec<Tensor>], size: usize) -> Result<Tensor> {
    let rows = cells.len();
    let cols = cells.first().map_or(0, Vec::len);
    let (h, w) = (rows * size, cols * size);
    let mut out = Tensor::zeros(&[IMAGE_CHANNELS, h, w]);
    let data = out.data_mut();
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let src = cell.data();
            for ch in 0..IMAGE_CHANNELS {
                for y in 0..size {
                    let s = ch * size * size + y * size;
                    let d = ch * h * w + (r * size + y) * w + c * size;
                    data[d..d + size].copy_from_slice(&src[s..s + size]);
                }
            }
        }
    }
    Ok(out)
}

pub fn cmd_generate(a: &GenerateArgs, cfg: &ConfigFile) -> Result<()> {
    let started = now();
    let ckpt = required(cfg.resolve_opt(a.ckpt.clone(), "ckpt")?, "ckpt")?;
    let out = required(cfg.resolve_opt(a.out.clone(), "out")?, "out")?;
    let profile = ScaleProfile::by_name(&cfg.resolve(a.profile.clone(), "profile", "desk".to_string())?)?;
    let groups = parse_groups(&cfg.resolve(a.groups.clone(), "groups", format!("0..{}", AGE_GROUPS - 1))?)?;
    let gender = cfg.resolve(a.gender, "gender", 0)?;
    let inputs = if a.input.is_empty() {
        vec![required(cfg.resolve_opt(None::<PathBuf>, "input")?, "input")?]
    } else {
        a.input.clone()
    };
    let model = AgrGan::load(&ckpt, profile)?;
    let size = profile.image_size;
    let images = inputs
        .iter()
        .map(|p| read_input(p, size))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&out)?;
    let mut outputs = Vec::new();
    let mut cells = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let batch = Tensor::new(&[groups.len(), IMAGE_CHANNELS, size, size], img.data().repeat(groups.len()))?;
        let conds = groups
            .iter()
            .map(|&g| ConditionVector::new(g, gender))
            .collect::<agrgan::Result<Vec<_>>>()?;
        let gen = model.transform(&batch, &conds)?;
        let mut row = Vec::with_capacity(groups.len());
        for (i, &g) in groups.iter().enumerate() {
            let cell = Tensor::new(&[IMAGE_CHANNELS, size, size], gen.row(i).to_vec())?;
            let p = out.join(format!("input{k}_group{g}.ppm"));
            write_ppm(&p, &cell)?;
            outputs.push(rel(&out, &p));
            row.push(cell);
        }
        cells.push(row);
    }
    let grid_path = out.join(GRID_FILE);
    write_ppm(&grid_path, &grid(&cells, size)?)?;
    outputs.push(GRID_FILE.into());
    write_manifest(
        &out,
        &RunManifest {
            command: "generate".into(),
            config: serde_json::json!({
                "ckpt": ckpt,
                "profile": profile,
                "inputs": inputs,
                "groups": groups,
                "gender": gender,
            }),
            seed: None,
            dataset_index_sha256: None,
            checkpoints: vec![ckpt.display().to_string()],
            outputs,
            status: "complete".into(),
            started_unix: started,
            finished_unix: now(),
            train: None,
        },
    )
}

fn parse_variants(spec: Option<&str>) -> Result<Vec<AblationVariant>> {
    match spec {
        None => Ok(AblationVariant::ALL.to_vec()),
        Some(s) => {
            let mut v: Vec<AblationVariant> = s
                .split(',')
                .map(|x| AblationVariant::parse(x.trim()))
                .collect::<agrgan::Result<_>>()?;
            if !v.contains(&AblationVariant::Full) {
                v.insert(0, AblationVariant::Full);
            }
            Ok(v)
        }
    }
}

/// Oracle directory saved next to a training run's checkpoints, if any.
fn sibling_oracles(ckpt: &Path) -> Option<PathBuf> {
    let run = ckpt.parent()?;
    let run = if run.file_name().is_some_and(|n| n == CHECKPOINT_DIR) {
        run.parent()?
    } else {
        run
    };
    let dir = run.join(ORACLE_DIR);
    dir.join(agrgan::eval::ORACLE_REPORT).is_file().then_some(dir)
}

pub fn cmd_eval(a: &EvalArgs, cfg: &ConfigFile) -> Result<()> {
    let started = now();
    let data_dir = required(cfg.resolve_opt(a.data.clone(), "data")?, "data")?;
    let out = required(cfg.resolve_opt(a.out.clone(), "out")?, "out")?;
    let experiment = match a.experiment {
        Some(e) => e,
        None => {
            let s = required(cfg.get_str("experiment").map(str::to_string), "experiment")?;
            Experiment::from_str(&s, true).map_err(|_| CliError::Usage(format!("unknown experiment `{s}`")))?
        }
    };
    let ckpt = cfg.resolve_opt(a.ckpt.clone(), "ckpt")?;
    let config = train_config(&a.opts, cfg)?;
    let hash = dataset_hash(&data_dir)?;
    let (train_split, heldout) = split_by_identity(load_data(&data_dir)?);
    if heldout.is_empty() {
        return Err(CliError::Usage("dataset has no held-out identities to evaluate on".into()));
    }
    create_dir(&out)?;
    let oracle_dir = cfg
        .resolve_opt(a.opts.oracles.clone(), "oracles")?
        .or_else(|| ckpt.as_deref().and_then(sibling_oracles));
    let oracles = oracles_for(
        oracle_dir.as_deref(),
        &train_split,
        &heldout,
        config.profile,
        config.seed,
        &out.join(ORACLE_DIR),
    )?;
    let load_model = || -> Result<AgrGan> {
        let p = ckpt
            .as_deref()
            .ok_or_else(|| CliError::Usage("missing required flag --ckpt".into()))?;
        Ok(AgrGan::load(p, config.profile)?)
    };
    let summary = out.join("summary.json");
    let mut outputs = vec!["summary.json".to_string()];
    match experiment {
        Experiment::Aging => {
            let r = aging_model_eval(&load_model()?, &heldout, &oracles)?;
            r.write_csv(&out.join("aging.csv"))?;
            write_json(&summary, &r)?;
            outputs.push("aging.csv".into());
        }
        Experiment::Identity => {
            let r = identity_preservation_eval(&load_model()?, &heldout, &oracles)?;
            r.write_csv(&out.join("identity.csv"))?;
            write_json(&summary, &r)?;
            outputs.push("identity.csv".into());
        }
        Experiment::Verification => {
            let r = verification_gain_eval(&load_model()?, &heldout, &oracles)?;
            r.write_csv(
                &out.join("verification.csv"),
                &out.join("roc_baseline.csv"),
                &out.join("roc_agr.csv"),
            )?;
            write_json(&summary, &r)?;
            outputs.extend(["verification.csv", "roc_baseline.csv", "roc_agr.csv"].map(String::from));
        }
        Experiment::Ablation => {
            let variants = parse_variants(cfg.resolve_opt(a.variants.clone(), "variants")?.as_deref())?;
            let r = ablation_run(config, &train_split, &heldout, &oracles, &variants)?;
            r.write_csv(&out.join("ablation_aging.csv"), &out.join("ablation_identity.csv"))?;
            write_json(&summary, &r)?;
            outputs.extend(["ablation_aging.csv", "ablation_identity.csv"].map(String::from));
        }
    }
    write_manifest(
        &out,
        &RunManifest {
            command: "eval".into(),
            config: serde_json::json!({
                "experiment": experiment,
                "train": config,
                "oracles": oracle_dir,
                "oracle_checksum": oracles.checksum(),
            }),
            seed: Some(config.seed),
            dataset_index_sha256: Some(hash),
            checkpoints: ckpt.iter().map(|p| p.display().to_string()).collect(),
            outputs,
            status: "complete".into(),
            started_unix: started,
            finished_unix: now(),
            train: None,
        },
    )
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Generate(a) => cmd_generate(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
    }
}
