//! Command-line front end: `gen-data`, `pretrain`, `adapt`, `eval`, `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_loop, predict, write_history, AdaptConfig};
use crate::error::{Error, Result};
use crate::evalreport::{evaluate, fingerprint, project2d, run_ablation_suite, write_projection_csv, write_rows, TaskSpec, Variant};
use crate::geometry::GeometryMode;
use crate::model::{Mode, Stage, TargetModel};
use crate::numeric::derive_seed;
use crate::pretrain::train_source;
use crate::synthdata::{Domain, DomainDataset};

#[derive(Debug, Parser)]
#[command(name = "nnh-adapt", version, about = "Source-free domain adaptation by nearest-neighborhood clustering")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Neighborhood geometry.
    #[arg(long, global = true)]
    pub mode: Option<GeometryMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a source/target dataset pair.
    GenData,
    /// Train the source model.
    Pretrain {
        #[arg(long)]
        source_data: Option<PathBuf>,
    },
    /// Adapt a source model to the target data.
    Adapt {
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        #[arg(long)]
        target_data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint, or a prediction file, against labeled target data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target_data: Option<PathBuf>,
        /// CSV with a `prediction` column; replaces the checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the ablation suite over several seeds.
    Ablate {
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub source_data: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub seeds: usize,
    /// Defaults to every variant meaningful for the mode.
    pub variants: Option<Vec<Variant>>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            seeds: 10,
            variants: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskSpec,
    pub adapt: AdaptConfig,
    pub paths: Paths,
    pub ablation: AblationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 2020,
            out_dir: PathBuf::from("out"),
            task: TaskSpec::standard(),
            adapt: AdaptConfig::default(),
            paths: Paths::default(),
            ablation: AblationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Derives every phase seed from the master seed.
    pub fn resolve_seeds(&mut self) {
        self.task.shift.seed = derive_seed(self.seed, "data");
        self.task.pretrain.seed = derive_seed(self.seed, "pretrain");
        self.adapt.seed = derive_seed(self.seed, "adapt");
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn path_or(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out(default))
    }
}

/// Merges the config file and flags, validates, and prepares the output
/// directory.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = cli.common.mode {
        cfg.adapt.mode = m;
    }
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::Pretrain { source_data } => {
            set(&mut cfg.paths.source_data, source_data);
            "pretrain"
        }
        Command::Adapt {
            source_checkpoint,
            target_data,
            epochs,
        } => {
            set(&mut cfg.paths.source_checkpoint, source_checkpoint);
            set(&mut cfg.paths.target_data, target_data);
            if let Some(e) = epochs {
                cfg.adapt.epochs = *e;
            }
            "adapt"
        }
        Command::Eval {
            checkpoint,
            target_data,
            predictions,
        } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.target_data, target_data);
            set(&mut cfg.paths.predictions, predictions);
            "eval"
        }
        Command::Ablate { seeds } => {
            if let Some(s) = seeds {
                cfg.ablation.seeds = *s;
            }
            "ablate"
        }
    };
    cfg.command = Some(name.into());
    cfg.resolve_seeds();
    cfg.adapt.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(cfg)
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let (source, target) = cfg.task.generate()?;
    source.save_csv(cfg.out("source.csv"))?;
    target.save_csv(cfg.out("target.csv"))
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let path = cfg.path_or(&cfg.paths.source_data, "source.csv");
    require(&path)?;
    let source = DomainDataset::<f64>::load_csv(&path, Some(cfg.task.k), Domain::Source)?;
    let out = train_source(&source, &cfg.task.pretrain)?;
    out.model.save_checkpoint(cfg.out("source_model.json"))?;
    let mut rows = vec![["epoch", "loss", "accuracy"].map(String::from).to_vec()];
    rows.extend(out.log.iter().map(|e| vec![e.epoch.to_string(), e.loss.to_string(), e.accuracy.to_string()]));
    write_rows(&cfg.out("pretrain_log.csv"), &rows)
}

pub fn cmd_adapt(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.path_or(&cfg.paths.source_checkpoint, "source_model.json");
    let data = cfg.path_or(&cfg.paths.target_data, "target.csv");
    require(&ckpt)?;
    require(&data)?;
    let model = TargetModel::<f64>::load_checkpoint(&ckpt)?;
    let target = DomainDataset::<f64>::load_csv(&data, Some(model.dims().k), Domain::Target)?;
    let abort = cfg.out("last_good_model.json");
    let out = adapt_loop(&model, target.features(), Some(target.labels()), &cfg.adapt, Some(&abort))?;
    out.model.save_checkpoint(cfg.out("adapted_model.json"))?;
    write_history(cfg.out("history.csv"), &out.history)
}

fn read_predictions(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let col = r
        .headers()
        .map_err(|e| Error::io(path, e.into()))?
        .iter()
        .position(|h| h == "prediction")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing `prediction` column".into(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = rec.get(col).unwrap_or("");
        out.push(field.trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad prediction {field:?}"),
        })?);
    }
    if out.is_empty() {
        return Err(Error::NoRows);
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let data = cfg.path_or(&cfg.paths.target_data, "target.csv");
    require(&data)?;
    let target = DomainDataset::<f64>::load_csv(&data, Some(cfg.task.k), Domain::Target)?;
    let pred = match &cfg.paths.predictions {
        Some(p) => {
            require(p)?;
            read_predictions(p)?
        }
        None => {
            let ckpt = cfg.path_or(&cfg.paths.checkpoint, "adapted_model.json");
            require(&ckpt)?;
            let model = TargetModel::<f64>::load_checkpoint(&ckpt)?;
            let pred = predict(&model, target.features())?;
            let mut rows = vec![vec!["prediction".to_string(), "label".to_string()]];
            rows.extend(pred.iter().zip(target.labels()).map(|(p, y)| vec![p.to_string(), y.to_string()]));
            write_rows(&cfg.out("predictions.csv"), &rows)?;
            let b = model.with_mode(Mode::Eval).forward(target.features(), Stage::Full)?.b.expect("full stage");
            write_projection_csv(cfg.out("projection.csv"), &project2d(&b)?, target.labels(), "target")?;
            pred
        }
    };
    let mut report = evaluate(&pred, target.labels(), target.num_classes())?;
    report.seed = Some(cfg.seed);
    report.fingerprint = Some(fingerprint(&(cfg.seed, &cfg.task, &cfg.adapt)));
    report.write_csv(cfg.out("report.csv"))?;
    report.write_confusion_csv(cfg.out("confusion.csv"))
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let variants = cfg.ablation.variants.clone().unwrap_or_else(|| Variant::for_mode(cfg.adapt.mode));
    let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64).map(|i| derive_seed(cfg.seed, &format!("ablation-{i}"))).collect();
    let table = run_ablation_suite(&cfg.task, &cfg.adapt, &variants, &seeds)?;
    table.write_csv(cfg.out("ablation.csv"))
}

/// Resolves the configuration, writes its snapshot and runs the subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let mut snapshot = cfg.clone();
    snapshot.command = None;
    write_json(&cfg.out("resolved_config.json"), &snapshot)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Pretrain { .. } => cmd_pretrain(&cfg),
        Command::Adapt { .. } => cmd_adapt(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Ablate { .. } => cmd_ablate(&cfg),
    }
}
