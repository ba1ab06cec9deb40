//! Command-line entry point.
//!
//! Every failure ends with one stderr line `error: kind=<kind> msg=<text>`.
//! Usage and config problems exit with 2, everything else with 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datasets::{generate_toy_dataset, load_dataset, Dataset, Split, ToyConfig};
use crate::error::{Error, Result};
use crate::eval::{self, AblationMatrix};
use crate::nets::NetShape;
use crate::trainer::{self, ModelState, TrainConfig, RESOLVED_CONFIG_FILE};

/// Overrides the dataset root of every config.
pub const DATA_ROOT_ENV: &str = "EVADAPT_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "evadapt", version, about = "Frame-to-event domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic shapes dataset.
    GenToy(GenToyArgs),
    /// Train from a config, optionally resuming a checkpoint.
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Checkpoint manifest (`.json`) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Event accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the ablation matrix and write the results table.
    Ablate {
        #[command(flatten)]
        common: Overrides,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// `name:toggle=on,...;name2:...`; defaults to the loss ablation.
        #[arg(long)]
        cells: Option<String>,
    },
    /// Pooled pre-logit vectors of test frames and events as TSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fake events synthesized from test frames, as PNG strips.
    ExportFakes {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the frame-to-attribute pairing.
        #[arg(long, default_value_t = 0)]
        pairing_seed: u64,
    },
    /// Print the resolved config.
    InspectConfig {
        #[command(flatten)]
        common: Overrides,
    },
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub eval_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to the data root variable, then `data/toy`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags shared by the config-driven commands. Flags win over the file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset when no config file is given.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// NAME=on|off, repeatable.
    #[arg(long = "toggle")]
    pub toggles: Vec<String>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

impl Overrides {
    fn base(&self) -> Result<TrainConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => TrainConfig::load(p),
            (None, Some(name)) => TrainConfig::preset(name),
            (None, None) => Ok(TrainConfig::default()),
        }
    }

    /// Applies flags, then the data-root variable when no flag sets it.
    pub fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        for t in &self.toggles {
            let (k, v) = eval::parse_toggle(t)?;
            cfg.toggles.set(&k, v).map_err(|e| Error::Config(e.to_string()))?;
        }
        let w = &mut cfg.weights;
        for (slot, v) in [
            (&mut w.lambda1, self.lambda1),
            (&mut w.lambda2, self.lambda2),
            (&mut w.lambda3, self.lambda3),
            (&mut w.lambda4, self.lambda4),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(lr) = self.lr {
            cfg.optim.lr = lr;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        match (&self.data_root, std::env::var_os(DATA_ROOT_ENV)) {
            (Some(r), _) => cfg.data.root = r.clone(),
            (None, Some(r)) if !r.is_empty() => cfg.data.root = PathBuf::from(r),
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        self.apply(self.base()?)
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn error_line(kind: &str, msg: &str) -> String {
    format!("error: kind={kind} msg={}", msg.replace('\n', " "))
}

/// Parses `argv` (program name first), dispatches and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn write_resolved(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

/// Checkpoint config with flag overrides applied, its dataset and state.
fn open_checkpoint(common: &Overrides, checkpoint: &Path) -> Result<(TrainConfig, Dataset, ModelState)> {
    let cfg = common.apply(trainer::checkpoint_config(checkpoint)?)?;
    let data = load_dataset(&cfg.data)?;
    let shape = NetShape {
        height: cfg.data.height,
        width: cfg.data.width,
        bins: cfg.data.bins,
        classes: data.num_classes(),
    };
    let (state, _) = ModelState::load(checkpoint, shape)?;
    Ok((cfg, data, state))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy(a) => {
            let cfg = ToyConfig {
                classes: a.classes,
                per_class: a.per_class,
                eval_per_class: a.eval_per_class,
                size: a.size,
                ..ToyConfig::default()
            };
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
            let out = a
                .out
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data/toy"));
            let rows = generate_toy_dataset(&cfg, a.seed, &out)?;
            println!("wrote {} samples to {}", rows.len(), out.display());
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let s = trainer::train(&cfg, resume.as_deref())?;
            println!(
                "steps={} best_val_acc={} best_epoch={} test_acc={} checkpoint={}",
                s.steps,
                opt(s.best_val_acc),
                s.best_epoch.map_or("-".into(), |e| e.to_string()),
                opt(s.test_acc),
                s.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string())
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let (cfg, data, state) = open_checkpoint(&common, &checkpoint)?;
            let events = match Split::from_name(&split) {
                Some(Split::Val) => data.val_events(),
                Some(Split::Test) => data.test_events(),
                _ => return Err(Error::Config(format!("split must be val or test, got `{split}`"))),
            };
            let acc = eval::evaluate_accuracy(&state.nets, events)?;
            let mut text = format!("split\t{split}\naccuracy\t{:.6}\nsamples\t{}\n", acc.accuracy, acc.samples);
            for (c, a) in acc.per_class.iter().enumerate() {
                text.push_str(&format!("class_{c}\t{}\n", opt(*a)));
            }
            print!("{text}");
            if common.out.is_some() {
                write_resolved(&cfg, &cfg.output.dir)?;
                fs::write(cfg.output.dir.join(format!("eval_{split}.tsv")), text)?;
            }
        }
        Command::Ablate { common, seeds, cells } => {
            let cfg = common.resolve()?;
            let matrix = match cells {
                Some(spec) => AblationMatrix {
                    cells: AblationMatrix::parse_cells(&spec)?,
                    seeds,
                },
                None => AblationMatrix::loss_ablation(&seeds),
            };
            write_resolved(&cfg, &cfg.output.dir)?;
            let table = eval::run_ablation(&cfg, &matrix, &cfg.output.dir)?;
            print!("{}", table.to_tsv());
            print!("{}", table.summary_tsv());
        }
        Command::ExportEmbeddings { common, checkpoint } => {
            let (cfg, data, state) = open_checkpoint(&common, &checkpoint)?;
            write_resolved(&cfg, &cfg.output.dir)?;
            let path = cfg.output.dir.join("embeddings.tsv");
            let rows = eval::export_embeddings(&state.nets, data.frames(Split::Test), data.test_events(), &path)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::ExportFakes {
            common,
            checkpoint,
            pairing_seed,
        } => {
            let (cfg, data, state) = open_checkpoint(&common, &checkpoint)?;
            write_resolved(&cfg, &cfg.output.dir)?;
            let dir = cfg.output.dir.join("fakes");
            let paths = eval::export_fake_events(
                &state.nets,
                data.frames(Split::Test),
                data.train_events(),
                &dir,
                pairing_seed,
                cfg.toggles.attribute_encoder,
            )?;
            println!("wrote {} images to {}", paths.len(), dir.display());
        }
        Command::InspectConfig { common } => {
            print!("{}", common.resolve()?.to_toml()?);
        }
    }
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}
