// SPDX-License-Identifier: Apache-2.0

//! Commands behind the `entalign` binary.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a verification check that ran but did not pass.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use entalign_autodiff::{check_ops, DEFAULT_FD_EPS};
use entalign_core::checkpoint::Checkpoint;
use entalign_core::config::{Preset, RunConfig};
use entalign_core::dataset::{self, Dataset, Manifest};
use entalign_core::gradcheck::{model_gradcheck, ParamCheck};
use entalign_core::image::{Heatmap, Image};
use entalign_core::inference::{evaluate, export_heatmaps, EvalReport, Predictor};
use entalign_core::kb::{EntityQuery, KnowledgeBase, QueryText};
use entalign_core::model::Model;
use entalign_core::parser::parse_report;
use entalign_core::training::{targets_from_triplets, train, AdamW, EpochLog, Example, LocVariant};
use entalign_core::world::{generate_dataset, split, Sample};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "epochs.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<entalign_core::Error> for Failure {
    fn from(e: entalign_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "entalign", version, about = "Entity/image alignment from paired images and reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint, epoch log and config.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run under this configuration instead of the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a configuration whose fingerprint differs from the
        /// checkpoint's.
        #[arg(long)]
        allow_config_mismatch: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Metric records file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip entities outside the trained query set.
        #[arg(long)]
        seen_only: bool,
        /// Also write per-sample heatmaps here.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Write a grounding heatmap for one image.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run under this configuration instead of the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a configuration whose fingerprint differs from the
        /// checkpoint's.
        #[arg(long)]
        allow_config_mismatch: bool,
        /// Input image (binary PGM).
        #[arg(long)]
        image: PathBuf,
        /// Knowledge-base entity name.
        #[arg(long, conflicts_with = "query_description")]
        entity: Option<String>,
        /// Free description for an entity the model never saw.
        #[arg(long)]
        query_description: Option<String>,
        /// Output heatmap (binary PGM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every operation and the full loss.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Coordinates per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_tensor: usize,
        /// Samples in the checked batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Print the knowledge base as TOML.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum KbAction {
    Dump {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Log,
    Literal,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// TOML file layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of samples to generate.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory; not needed with --dry-run.
    #[arg(long, required_unless_present = "dry_run")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha_loc: Option<f64>,
    #[arg(long)]
    pub alpha_cls: Option<f64>,
    /// Embed bare entity names instead of descriptions.
    #[arg(long)]
    pub no_entity_translation: bool,
    #[arg(long, value_enum)]
    pub loc_variant: Option<VariantArg>,
    /// Also write `model.epochNNN.ckpt` after every epoch.
    #[arg(long)]
    pub checkpoint_every_epoch: bool,
    /// Print the effective run and exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let preset = match self.preset {
            Some(PresetArg::Paper) => Preset::Paper,
            _ => Preset::Desk,
        };
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let mut cfg = RunConfig::layered(preset, text.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.samples {
            cfg.dataset.samples = n;
        }
        Ok(cfg)
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = self.config.resolve()?;
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(a) = self.alpha_loc {
            cfg.train.alpha_loc = a;
        }
        if let Some(a) = self.alpha_cls {
            cfg.train.alpha_cls = a;
        }
        if self.no_entity_translation {
            cfg.train.entity_translation = false;
        }
        if let Some(v) = self.loc_variant {
            cfg.train.loc_variant = match v {
                VariantArg::Log => LocVariant::Log,
                VariantArg::Literal => LocVariant::Literal,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Samples involving an unseen entity, which the split keeps in test.
pub fn holdout(samples: &[Sample], cfg: &RunConfig) -> CliResult<Vec<bool>> {
    let kb = cfg.knowledge_base()?;
    Ok(samples.iter().map(|s| s.involves_unseen(&kb)).collect())
}

pub fn cmd_datagen(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    cfg.validate()?;
    let samples = generate_dataset(&cfg.world, cfg.dataset.samples, cfg.seed)?;
    let sp = split(samples.len(), &holdout(&samples, cfg)?, cfg.dataset.fractions, cfg.seed)?;
    let m = dataset::save(out, &cfg.world, cfg.seed, &samples, &sp)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(m)
}

pub fn query_text(cfg: &RunConfig) -> QueryText {
    if cfg.train.entity_translation {
        QueryText::Description
    } else {
        QueryText::Name
    }
}

/// Text printed by `train --dry-run`.
pub fn describe_run(cfg: &RunConfig) -> CliResult<String> {
    let kb = cfg.knowledge_base()?;
    let model = Model::new(&cfg.model, cfg.seed)?;
    let f = &cfg.model.fusion;
    let t = &cfg.train;
    let mut s = String::new();
    let mut line = |k: &str, v: String| writeln!(s, "{k:<22}{v}").expect("string");
    line("preset", format!("{:?}", cfg.preset).to_lowercase());
    line("queries |Q|", kb.num_queries().to_string());
    line("positions |P|", kb.num_positions().to_string());
    line("negatives M", t.negatives.to_string());
    line("visual width d", f.d.to_string());
    line("text width d'", f.d_text.to_string());
    line("decoder layers", f.layers.to_string());
    line("attention heads", f.heads.to_string());
    line("patches", f.patches.to_string());
    line("learning rate", format!("{:e}", t.lr));
    line("warm-up", format!("{:e} over {} epochs", t.warmup_lr, t.warmup_epochs));
    line("epochs", t.epochs.to_string());
    line("batch size", t.batch_size.to_string());
    line("alpha loc / cls", format!("{} / {}", t.alpha_loc, t.alpha_cls));
    line("position loss", format!("{:?}", t.loc_variant).to_lowercase());
    line("entity translation", t.entity_translation.to_string());
    line("parameters", model.store.num_scalars().to_string());
    line("trainable here", cfg.trainable().to_string());
    Ok(s)
}

fn load_matching_dataset(cfg: &RunConfig, data: &Path) -> CliResult<Dataset> {
    let ds = dataset::load(data)?;
    if ds.manifest.spec_hash != cfg.world.hash() {
        return Err(Failure::Validation(format!(
            "dataset world {} does not match the configured world {}",
            ds.manifest.spec_hash,
            cfg.world.hash()
        )));
    }
    Ok(ds)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
}

/// Trains on the dataset's train split and writes checkpoint, epoch log
/// and effective config under `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, every_epoch: bool) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    if !cfg.trainable() {
        return Err(Failure::Validation(
            "the placeholder knowledge base only sizes the model; use --dry-run".into(),
        ));
    }
    let ds = load_matching_dataset(cfg, data)?;
    let kb = cfg.knowledge_base()?;
    let grammar = cfg.grammar(&kb)?;
    let examples: Vec<Example> = ds
        .split
        .train
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            Example {
                index: s.index,
                image: s.image.clone(),
                targets: targets_from_triplets(&parse_report(&s.report, &grammar), &kb),
            }
        })
        .collect();
    let queries = cfg.embedder.query_matrix(&kb, query_text(cfg))?;
    let bank = cfg.embedder.position_bank(&kb)?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(&model.store);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let mut log = format!("{}\n", EpochLog::HEADER);
    std::fs::write(out.join(LOG_FILE), &log)?;
    let logs = train(&mut model, &mut opt, &examples, &queries, &bank, &cfg.train, cfg.seed, |l, m, o| {
        log.push_str(&l.csv_line());
        log.push('\n');
        std::fs::write(out.join(LOG_FILE), &log)?;
        if every_epoch {
            Checkpoint::capture(cfg, &kb, m, o, l.epoch as u64 + 1)
                .save(&out.join(format!("model.epoch{:03}.ckpt", l.epoch + 1)))?;
        }
        Ok(())
    })?;
    let checkpoint = Checkpoint::capture(cfg, &kb, &model, &opt, cfg.train.epochs as u64);
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome { checkpoint, logs })
}

/// Trained model with the configuration and knowledge base it runs under.
#[derive(Debug)]
pub struct Session {
    pub config: RunConfig,
    pub model: Model,
    pub kb: KnowledgeBase,
}

/// Restores a checkpoint under its stored configuration, or under `config`
/// when given. A differing fingerprint needs `allow_mismatch`.
pub fn open_checkpoint(ck: &Checkpoint, config: Option<RunConfig>, allow_mismatch: bool) -> CliResult<Session> {
    let config = match config {
        Some(c) => c,
        None => ck.config()?,
    };
    ck.check_fingerprint(&config, allow_mismatch)?;
    let (model, _) = ck.restore(&config)?;
    Ok(Session {
        config,
        model,
        kb: ck.knowledge_base()?,
    })
}

pub fn cmd_eval(
    session: &Session,
    data: &Path,
    which: SplitName,
    seen_only: bool,
    heatmaps: Option<&Path>,
) -> CliResult<EvalReport> {
    let Session { config: cfg, model, kb } = session;
    let ds = load_matching_dataset(cfg, data)?;
    let idx = match which {
        SplitName::Train => &ds.split.train,
        SplitName::Val => &ds.split.val,
        SplitName::Test => &ds.split.test,
    };
    let samples: Vec<&Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    if samples.is_empty() {
        return Err(Failure::Validation(format!("split {which:?} is empty")));
    }
    let p = Predictor::new(model, kb, &cfg.embedder, query_text(cfg))?;
    let mut opts = cfg.eval.clone();
    opts.zero_shot = opts.zero_shot && !seen_only;
    let report = evaluate(&p, &samples, &opts)?;
    if let Some(dir) = heatmaps {
        export_heatmaps(&p, &samples, dir)?;
    }
    Ok(report)
}

pub fn cmd_ground(
    session: &Session,
    image: &Image,
    entity: Option<&str>,
    description: Option<&str>,
) -> CliResult<Heatmap> {
    let Session { config: cfg, model, kb } = session;
    let query = match (entity, description) {
        (_, Some(d)) => EntityQuery::Described(d.to_string()),
        (Some(name), None) => EntityQuery::Known(
            kb.entity_id(name)
                .ok_or_else(|| Failure::Validation(format!("unknown entity {name:?}; pass --query-description")))?,
        ),
        (None, None) => return Err(Failure::Validation("pass --entity or --query-description".into())),
    };
    let p = Predictor::new(model, kb, &cfg.embedder, query_text(cfg))?;
    Ok(p.ground(image, &query)?)
}

#[derive(Debug)]
pub struct GradcheckReport {
    pub ops: Vec<(&'static str, f64)>,
    pub params: Vec<ParamCheck>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.ops
            .iter()
            .map(|o| o.1)
            .chain(self.params.iter().map(|p| p.max_rel_error))
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRADCHECK_TOLERANCE
    }

    pub fn render(&self) -> String {
        let mut s = String::from("kind,name,max_rel_error\n");
        for (n, e) in &self.ops {
            writeln!(s, "op,{n},{e:.3e}").expect("string");
        }
        for p in &self.params {
            writeln!(s, "param,{},{:.3e}", p.name, p.max_rel_error).expect("string");
        }
        writeln!(s, "# max {:.3e}, {:.1} s", self.max_error(), self.seconds).expect("string");
        s
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, batch: usize, per_tensor: usize) -> CliResult<GradcheckReport> {
    cfg.validate()?;
    let start = Instant::now();
    let ops = check_ops(DEFAULT_FD_EPS).map_err(|e| Failure::Runtime(e.to_string()))?;
    let params = model_gradcheck(cfg, batch, per_tensor, DEFAULT_FD_EPS)?;
    Ok(GradcheckReport {
        ops,
        params,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn load_config(path: Option<&Path>) -> CliResult<Option<RunConfig>> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
        Ok(RunConfig::from_toml(&text)?)
    })
    .transpose()
}

fn write_or_print(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Datagen { config, out } => {
            let cfg = config.resolve()?;
            let m = cmd_datagen(&cfg, &out)?;
            println!("wrote {} samples to {} (world {})", m.samples, out.display(), m.spec_hash);
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            if args.dry_run {
                print!("{}", describe_run(&cfg)?);
                return Ok(());
            }
            let (data, out) = (args.data.expect("clap"), args.out.expect("clap"));
            let r = cmd_train(&cfg, &data, &out, args.checkpoint_every_epoch)?;
            if let Some(l) = r.logs.last() {
                println!("{}\n{}", EpochLog::HEADER, l.csv_line());
            }
            println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval {
            checkpoint,
            config,
            allow_config_mismatch,
            data,
            split,
            out,
            seen_only,
            heatmaps,
        } => {
            let session = open_checkpoint(&Checkpoint::load(&checkpoint)?, load_config(config.as_deref())?, allow_config_mismatch)?;
            let report = cmd_eval(&session, &data, split, seen_only, heatmaps.as_deref())?;
            write_or_print(out.as_deref(), &report.to_records())?;
            eprint!("{}", report.summary());
        }
        Command::Ground {
            checkpoint,
            config,
            allow_config_mismatch,
            image,
            entity,
            query_description,
            out,
        } => {
            let session = open_checkpoint(&Checkpoint::load(&checkpoint)?, load_config(config.as_deref())?, allow_config_mismatch)?;
            let img = Image::load_pgm(&image)?;
            let h = cmd_ground(&session, &img, entity.as_deref(), query_description.as_deref())?;
            h.save_pgm(&out)?;
        }
        Command::Gradcheck {
            config,
            per_tensor,
            batch,
        } => {
            let cfg = config.resolve()?;
            let r = cmd_gradcheck(&cfg, batch, per_tensor)?;
            print!("{}", r.render());
            if !r.passed() {
                return Err(Failure::Check(format!(
                    "max relative error {:.3e} is not below {GRADCHECK_TOLERANCE:e}",
                    r.max_error()
                )));
            }
        }
        Command::Kb {
            action: KbAction::Dump { config },
        } => print!("{}", config.resolve()?.knowledge_base()?.to_toml()),
        Command::Config { config } => {
            let cfg = config.resolve()?;
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}
