//! Command-line front end.
//!
//! Settings come from a flat `key = value` file with dotted keys. Precedence,
//! lowest first: built-in defaults, `SAMREC_SEED` / `SAMREC_THREADS`, the
//! `--config` file, then `--key=value` flags on the command line.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::augment::{AugmentSpec, ContrastiveConfig};
use crate::autodiff::ParamSet;
use crate::dataset::synthetic::{markov_log, SyntheticSpec};
use crate::dataset::{build_sequences, ingest, k_core_filter, SequenceDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, CandidateScheme, EvalReport, TSV_HEADER};
use crate::landscape::{
    evaluate_grid, linspace, model_loss, model_sharpness, probe_batches, sample_directions,
    Normalization,
};
use crate::model::{Checkpoint, SasrecConfig};
use crate::rng;
use crate::sam::{
    train, Objective, OptimizerConfig, OptimizerKind, SamConfig, TrainSettings, TrainState,
};

/// Comma-separated list value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

macro_rules! run_config {
    ($( $key:literal => $field:ident : $ty:ty = $default:expr, $doc:literal; )*) => {
        /// Every setting of a run. See [`KEYS`] for names, defaults and meaning.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        /// `(key, description)` of every configuration key, in file order.
        pub const KEYS: &[(&str, &str)] = &[ $( ($key, $doc), )* ];

        impl RunConfig {
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$field.to_string()), )*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$field = value
                            .trim()
                            .parse::<$ty>()
                            .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?;
                        Ok(())
                    } )*
                    _ => Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }
        }
    };
}

run_config! {
    "data.path" => data_path: String = String::new(), "interaction TSV or preprocessed dataset artifact";
    "data.min_count" => min_count: usize = 5, "k of the k-core filter applied to raw logs";
    "data.max_len" => max_len: usize = 50, "window length n";
    "output_dir" => output_dir: String = "samrec-out".into(), "directory receiving every output file";
    "seed" => seed: u64 = 0, "master seed";
    "threads" => threads: usize = 0, "worker threads, 0 for all cores";
    "model.dim" => dim: usize = 64, "hidden size d";
    "model.num_layers" => num_layers: usize = 2, "transformer blocks";
    "model.num_heads" => num_heads: usize = 1, "attention heads";
    "model.dropout" => dropout: f64 = 0.2, "dropout probability";
    "objective" => objective: Objective = Objective::Bce, "bce or bce+contrastive";
    "contrastive.weight" => cl_weight: f64 = 0.1, "weight of the contrastive term";
    "contrastive.temperature" => cl_temperature: f64 = 1.0, "softmax temperature";
    "contrastive.augmentations" => cl_augmentations: List<AugmentSpec> = List(ContrastiveConfig::default().augmentations), "augmentation pool, kind:ratio list";
    "optimizer.kind" => opt_kind: OptimizerKind = OptimizerKind::Adam, "sgd or adam";
    "optimizer.lr" => lr: f64 = 1e-3, "learning rate";
    "optimizer.beta1" => beta1: f64 = 0.9, "adam first-moment decay";
    "optimizer.beta2" => beta2: f64 = 0.999, "adam second-moment decay";
    "optimizer.eps" => eps: f64 = 1e-8, "adam denominator offset";
    "optimizer.weight_decay" => weight_decay: f64 = 0.0, "decoupled weight decay";
    "sam.enabled" => sam_enabled: bool = true, "wrap the optimizer in sharpness-aware minimization";
    "sam.rho" => rho: f64 = 0.5, "perturbation radius";
    "sam.ascent_period" => ascent_period: u64 = 1, "recompute the perturbation every k steps";
    "train.epochs" => epochs: usize = 50, "maximum epochs";
    "train.batch_size" => batch_size: usize = 128, "users per batch";
    "train.num_negatives" => num_negatives: usize = 1, "negatives per position";
    "train.patience" => patience: usize = 5, "early-stopping patience on valid NDCG@10, 0 disables";
    "eval.candidates" => candidates: CandidateScheme = CandidateScheme::FullCatalog, "full or sampled:<count>[:<seed>]";
    "eval.ks" => ks: List<usize> = List(vec![5, 10, 20]), "metric cutoffs";
    "synthetic.num_users" => syn_users: usize = 200, "generated users";
    "synthetic.num_items" => syn_items: usize = 50, "generated catalog size";
    "synthetic.seq_len" => syn_len: usize = 20, "interactions per generated user";
    "synthetic.noise" => syn_noise: f64 = 0.05, "probability of a random transition";
    "landscape.grid_size" => grid_size: usize = 41, "cells per axis";
    "landscape.range" => grid_range: f64 = 1.0, "coefficients span [-range, range]";
    "landscape.normalization" => normalization: Normalization = Normalization::Filter, "filter, global or none";
    "landscape.positions" => probe_positions: usize = 1024, "training interactions in the fixed probe subset";
    "landscape.sharpness_rho" => sharpness_rho: f64 = 0.05, "ascent radius of the sharpness proxy";
    "landscape.probes" => probes: usize = 8, "sharpness probes";
    "sweep.rhos" => sweep_rhos: List<f64> = List(vec![0.001, 0.01, 0.1, 1.0, 10.0]), "radii of sweep-rho";
    "efficiency.fractions" => fractions: List<f64> = List(vec![0.6, 0.8, 1.0]), "training fractions of data-efficiency";
}

impl RunConfig {
    /// Defaults with the environment fallbacks applied.
    pub fn from_env() -> Result<Self> {
        let mut cfg = Self::default();
        for (var, key) in [("SAMREC_SEED", "seed"), ("SAMREC_THREADS", "threads")] {
            if let Ok(v) = std::env::var(var) {
                cfg.set(key, &v)
                    .map_err(|e| Error::Config(format!("{var}: {e}")))?;
            }
        }
        Ok(cfg)
    }

    /// Apply `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, Path::new("<config>"))?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            s.push_str(&format!(
                "# {doc}\n{key} = {}\n",
                self.get(key).expect("listed key")
            ));
        }
        s
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }

    pub fn model_config(&self, num_items: usize) -> SasrecConfig {
        SasrecConfig {
            num_items,
            max_len: self.max_len,
            dim: self.dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            dropout: self.dropout,
        }
    }

    pub fn train_settings(&self, num_items: usize) -> Result<TrainSettings> {
        let s = TrainSettings {
            model: self.model_config(num_items),
            objective: self.objective,
            contrastive: ContrastiveConfig {
                temperature: self.cl_temperature,
                weight: self.cl_weight,
                augmentations: self.cl_augmentations.0.clone(),
            },
            optimizer: OptimizerConfig {
                kind: self.opt_kind,
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            sam: SamConfig {
                rho: self.rho,
                ascent_period: self.ascent_period,
                enabled: self.sam_enabled,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            num_negatives: self.num_negatives,
            patience: self.patience,
            candidates: self.candidates,
            seed: self.seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Short label of the trained variant used in result tables.
    pub fn variant(&self) -> &'static str {
        match (self.objective, self.sam_enabled) {
            (Objective::Bce, false) => "sasrec",
            (Objective::Bce, true) => "samrec",
            (Objective::BceContrastive, false) => "cl4srec",
            (Objective::BceContrastive, true) => "cl4srec+samrec",
        }
    }

    /// Dataset name for result tables: the file stem of `data.path`.
    pub fn dataset_name(&self) -> String {
        Path::new(&self.data_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "samrec",
    version,
    about = "Sharpness-aware training of self-attentive sequential recommenders"
)]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    list_keys: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and index a raw interaction log into a dataset artifact.
    Preprocess {
        /// Raw TSV (`user<TAB>item<TAB>timestamp`); defaults to data.path.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate a Markov-chain interaction log and its dataset artifact.
    Synthetic,
    /// Train a model, keep the best checkpoint and report test metrics.
    Train {
        /// Continue from the training state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train one model per perturbation radius.
    SweepRho,
    /// Loss surface around a checkpoint along two random directions.
    Landscape {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train plain and sharpness-aware models on fractions of the training data.
    DataEfficiency,
}

/// Split `args` into configuration overrides (`--key=value` or `--key value`
/// for a known key) and everything else.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let keys: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !keys.contains(&key.as_str()) {
            if key.contains('.') {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Run the command line and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: Vec<String>) -> Result<()> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                Err(Error::Config("invalid command line".into()))
            } else {
                Ok(())
            };
        }
    };
    let mut cfg = RunConfig::from_env()?;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, path)?;
    }
    for (k, v) in &overrides {
        cfg.set(k, v)?;
    }
    if cli.list_keys {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given; see --help".into()));
    };
    if cfg.threads > 0 {
        // only fails when a pool already exists, e.g. in-process repeated runs
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match command {
        Command::Preprocess { input } => cmd_preprocess(&cfg, input.as_deref()),
        Command::Synthetic => cmd_synthetic(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume).map(|_| ()),
        Command::Eval { checkpoint, split } => cmd_eval(&cfg, checkpoint.as_deref(), &split),
        Command::SweepRho => cmd_sweep_rho(&cfg),
        Command::Landscape { checkpoint } => cmd_landscape(&cfg, checkpoint.as_deref()),
        Command::DataEfficiency => cmd_data_efficiency(&cfg),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_dataset(cfg: &RunConfig, ds: &SequenceDataset) -> Result<()> {
    let out = cfg.output_dir();
    write_file(&out.join("dataset.bin"), ds.to_bytes())?;
    let summary = serde_json::to_string_pretty(&ds.summary()).expect("summary serializes");
    write_file(&out.join("dataset_summary.json"), summary + "\n")?;
    println!(
        "{}",
        serde_json::to_string(&ds.summary()).expect("summary serializes")
    );
    Ok(())
}

/// Raw logs are k-core filtered and indexed; artifacts are loaded as stored
/// (re-windowed when `data.max_len` differs).
pub fn load_dataset(cfg: &RunConfig) -> Result<SequenceDataset> {
    if cfg.data_path.is_empty() {
        return Err(Error::Config("data.path is not set".into()));
    }
    let path = Path::new(&cfg.data_path);
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if SequenceDataset::is_artifact(&bytes) {
        let ds = SequenceDataset::from_bytes(&bytes)?;
        if ds.max_len() == cfg.max_len {
            Ok(ds)
        } else {
            ds.with_max_len(cfg.max_len)
        }
    } else {
        let log = ingest(path)?;
        build_sequences(&k_core_filter(&log, cfg.min_count), cfg.max_len)
    }
}

pub fn cmd_preprocess(cfg: &RunConfig, input: Option<&Path>) -> Result<()> {
    let path = match input {
        Some(p) => p.to_path_buf(),
        None if !cfg.data_path.is_empty() => PathBuf::from(&cfg.data_path),
        None => {
            return Err(Error::Config(
                "preprocess needs --input or data.path".into(),
            ))
        }
    };
    let log = ingest(&path)?;
    let ds = build_sequences(&k_core_filter(&log, cfg.min_count), cfg.max_len)?;
    write_dataset(cfg, &ds)
}

pub fn cmd_synthetic(cfg: &RunConfig) -> Result<()> {
    let log = markov_log(&SyntheticSpec {
        num_users: cfg.syn_users,
        num_items: cfg.syn_items,
        seq_len: cfg.syn_len,
        noise: cfg.syn_noise,
        seed: cfg.seed,
    });
    log.write_tsv(&cfg.output_dir().join("synthetic.tsv"))?;
    write_dataset(cfg, &build_sequences(&log, cfg.max_len)?)
}

fn checkpoint_meta(cfg: &RunConfig, ck: &mut Checkpoint, best_epoch: usize) {
    ck.meta.insert("variant".into(), cfg.variant().into());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    ck.meta.insert("best_epoch".into(), best_epoch.to_string());
}

/// What a finished training run reports.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ParamSet,
    pub test: EvalReport,
}

/// Train into `dir` and evaluate the best parameters on the test split.
fn train_into(
    cfg: &RunConfig,
    ds: &SequenceDataset,
    dir: &Path,
    resume: bool,
) -> Result<TrainResult> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let settings = cfg.train_settings(ds.num_items())?;
    let state_path = dir.join("train_state.bin");
    let state = if resume {
        Some(TrainState::from_checkpoint(
            &Checkpoint::load(&state_path)?,
            &settings,
        )?)
    } else {
        None
    };
    let log_path = dir.join("train_log.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    let outcome = train(ds, &settings, Some(&mut log), state)?;

    outcome.state.to_checkpoint(&settings).save(&state_path)?;
    let mut best = Checkpoint::new(settings.model.clone(), outcome.state.best_params.clone());
    checkpoint_meta(cfg, &mut best, outcome.state.best_epoch);
    best.save(&dir.join("checkpoint.bin"))?;

    let test = evaluate_model(
        &best.params,
        &best.config,
        ds,
        Split::Test,
        &cfg.ks.0,
        cfg.candidates,
    )?;
    write_file(&dir.join("eval_test.json"), test.to_json() + "\n")?;
    Ok(TrainResult {
        params: best.params,
        test,
    })
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainResult> {
    let ds = load_dataset(cfg)?;
    let out = cfg.output_dir();
    let result = train_into(cfg, &ds, &out, resume)?;
    let line = result
        .test
        .tsv_line(&cfg.dataset_name(), cfg.variant(), cfg.seed);
    write_file(&out.join("results.tsv"), format!("{TSV_HEADER}\n{line}\n"))?;
    println!("{line}");
    Ok(result)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "test" => Ok(Split::Test),
        "valid" => Ok(Split::Valid),
        other => Err(Error::Config(format!(
            "unknown split {other:?} (valid|test)"
        ))),
    }
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir().join("checkpoint.bin"));
    Checkpoint::load(&path)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let ck = load_checkpoint(cfg, checkpoint)?;
    let ds = load_dataset(cfg)?.with_max_len(ck.config.max_len)?;
    let report = evaluate_model(
        &ck.params,
        &ck.config,
        &ds,
        split,
        &cfg.ks.0,
        cfg.candidates,
    )?;
    let name = match split {
        Split::Valid => "valid",
        _ => "test",
    };
    let out = cfg.output_dir();
    write_file(
        &out.join(format!("eval_{name}.json")),
        report.to_json() + "\n",
    )?;
    let variant = ck
        .meta
        .get("variant")
        .map(String::as_str)
        .unwrap_or("model");
    let line = report.tsv_line(&cfg.dataset_name(), variant, cfg.seed);
    write_file(
        &out.join(format!("eval_{name}.tsv")),
        format!("{TSV_HEADER}\n{line}\n"),
    )?;
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    rho: f64,
    report: Option<&'a EvalReport>,
    error: Option<String>,
}

pub fn cmd_sweep_rho(cfg: &RunConfig) -> Result<()> {
    if cfg.sweep_rhos.0.is_empty() {
        return Err(Error::Config("sweep.rhos is empty".into()));
    }
    let ds = load_dataset(cfg)?;
    let out = cfg.output_dir();
    let mut table = String::from("rho\tHR@10\tNDCG@10\tstatus\n");
    let mut records = String::new();
    for &rho in &cfg.sweep_rhos.0 {
        let mut run = cfg.clone();
        run.rho = rho;
        run.sam_enabled = true;
        let result = train_into(&run, &ds, &out.join(format!("rho_{rho}")), false);
        let (row, record) = match &result {
            Ok(r) => (
                format!(
                    "{rho}\t{:.6}\t{:.6}\tok\n",
                    r.test.hr_at(10),
                    r.test.ndcg_at(10)
                ),
                SweepRecord {
                    rho,
                    report: Some(&r.test),
                    error: None,
                },
            ),
            Err(e) => {
                eprintln!("rho {rho}: {e}");
                (
                    format!(
                        "{rho}\tNaN\tNaN\terror: {}\n",
                        e.to_string().replace(['\t', '\n'], " ")
                    ),
                    SweepRecord {
                        rho,
                        report: None,
                        error: Some(e.to_string()),
                    },
                )
            }
        };
        print!("{row}");
        table.push_str(&row);
        records.push_str(&serde_json::to_string(&record).expect("record serializes"));
        records.push('\n');
    }
    write_file(&out.join("sweep_rho.tsv"), table)?;
    write_file(&out.join("sweep_rho.jsonl"), records)
}

pub fn cmd_landscape(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir().join("checkpoint.bin"));
    let ck = Checkpoint::load(&ck_path)?;
    let ds = load_dataset(cfg)?.with_max_len(ck.config.max_len)?;
    if cfg.grid_size == 0 || !(cfg.grid_range > 0.0) {
        return Err(Error::Config(
            "landscape grid needs grid_size >= 1 and range > 0".into(),
        ));
    }
    let batches = probe_batches(
        &ds,
        cfg.probe_positions,
        cfg.batch_size,
        cfg.num_negatives,
        cfg.seed,
    )?;
    let dirs = sample_directions(&ck.params, cfg.normalization, cfg.seed);
    let mut axis = linspace(-cfg.grid_range, cfg.grid_range, cfg.grid_size);
    if !axis.contains(&0.0) {
        axis.push(0.0);
        axis.sort_by(f64::total_cmp);
    }
    let mut grid = evaluate_grid(&ck.params, &dirs, &axis, &axis, |p| {
        model_loss(p, &ck.config, &batches)
    })?;
    grid.meta.checkpoint = ck_path.display().to_string();
    grid.meta.batch_spec = format!(
        "positions={} batch_size={} negatives={} seed={}",
        cfg.probe_positions, cfg.batch_size, cfg.num_negatives, cfg.seed
    );
    let out = cfg.output_dir();
    write_file(&out.join("landscape.csv"), grid.to_csv())?;
    write_file(&out.join("landscape.json"), grid.metadata_json() + "\n")?;
    let sharp = model_sharpness(
        &ck.params,
        &ck.config,
        &batches,
        cfg.sharpness_rho,
        cfg.probes,
    )?;
    write_file(
        &out.join("sharpness.json"),
        serde_json::to_string(&sharp).expect("report serializes") + "\n",
    )?;
    println!(
        "center_loss\t{}\tflagged\t{}\tsharpness_max\t{}",
        grid.center(),
        grid.flagged.len(),
        sharp.max
    );
    Ok(())
}

pub fn cmd_data_efficiency(cfg: &RunConfig) -> Result<()> {
    if cfg.fractions.0.is_empty() {
        return Err(Error::Config("efficiency.fractions is empty".into()));
    }
    let ds = load_dataset(cfg)?;
    let out = cfg.output_dir();
    let mut table = String::from("variant\tfraction\tHR@10\tNDCG@10\ttest_hash\n");
    for &fraction in &cfg.fractions.0 {
        let mut r = rng::stream(cfg.seed, &[0xF4AC, fraction.to_bits()]);
        let subset = ds.subsample_training(fraction, &mut r)?;
        let hash = subset.split_hash(Split::Test);
        for sam in [false, true] {
            let mut run = cfg.clone();
            run.sam_enabled = sam;
            let dir = out.join(format!("{}_{fraction}", run.variant()));
            let result = train_into(&run, &subset, &dir, false)?;
            let row = format!(
                "{}\t{fraction}\t{:.6}\t{:.6}\t{hash:016x}\n",
                run.variant(),
                result.test.hr_at(10),
                result.test.ndcg_at(10)
            );
            print!("{row}");
            table.push_str(&row);
        }
    }
    write_file(&out.join("data_efficiency.tsv"), table)
}
