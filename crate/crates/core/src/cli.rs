//! Command-line front end. Kept in the library so tests can drive it directly.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::metrics::Stratify;
use crate::pipeline::baselines::{density_floor_oracle, DirectRegressor, RuleBasedModel, VolumeSource};
use crate::pipeline::config::{parse_kv, RunConfig};
use crate::pipeline::model::{prepare_dataset, MassModel, PreparedSample};
use crate::pipeline::runs::{ablation_csv, ablation_summary, run_ablation_grid, run_baseline_rulebased};
use crate::pipeline::train::{
    fit_and_evaluate, mean_gate_weights, predict_all, read_predictions, report, write_predictions,
    PredictionRow, RunRecord,
};
use crate::pipeline::SavedModel;
use crate::synthbench::{generate_dataset, load_dataset, write_dataset, Split};

pub const DATA_DIR_ENV: &str = "PHYMASS_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "phymass", version, about = "Mass estimation as volume x density")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a benchmark dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and evaluate it on the train and test splits.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
        #[arg(long, value_enum, default_value = "factored")]
        model: ModelKind,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train every non-empty cue subset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
    },
    /// Run a reference baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: RunIo,
        #[arg(long, value_enum)]
        kind: BaselineKind,
        /// Volume source for the rule-based baseline.
        #[arg(long, value_enum, default_value = "trained")]
        volume: VolumeArg,
    },
    /// Recompute metrics from a predictions file.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "seen-unseen")]
        by: StratifyArg,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data generation, initialisation and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunIo {
    /// Dataset directory (default: $PHYMASS_DATA_DIR, else ./data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Factored,
    Direct,
    RuleBased,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineKind {
    Direct,
    RuleBased,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VolumeArg {
    Trained,
    Oracle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Seen,
    Unseen,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Test => vec![Split::TestSeen, Split::TestUnseen],
            SplitArg::Seen => vec![Split::TestSeen],
            SplitArg::Unseen => vec![Split::TestUnseen],
            SplitArg::All => vec![Split::Train, Split::TestSeen, Split::TestUnseen],
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::Seen => "seen",
            SplitArg::Unseen => "unseen",
            SplitArg::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StratifyArg {
    None,
    SeenUnseen,
    Category,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let map = parse_kv(o)?;
            if map.is_empty() {
                return Err(Error::Config(format!("empty override '{o}'")));
            }
            cfg.apply_map(&map)?;
        }
        if let Some(seed) = self.seed {
            cfg.model.seed = seed;
            cfg.train.shuffle_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

struct Loaded {
    data: Vec<PreparedSample>,
    vocab: crate::semantics::MaterialVocab,
}

fn load(io: &RunIo, cfg: &RunConfig) -> Result<Loaded> {
    let ds = load_dataset(&data_dir(&io.data))?;
    let data = prepare_dataset(&ds, cfg.model.n_points, cfg.model.seed)?;
    Ok(Loaded {
        data,
        vocab: ds.vocab,
    })
}

/// Writes run.json, metrics.csv (test split) and predictions.csv.
fn write_run(out: &Path, record: &RunRecord, rows: &[PredictionRow]) -> Result<()> {
    create_dir(out)?;
    record.write_json(&out.join("run.json"))?;
    if let Some(r) = record.test_report() {
        write_text(&out.join("metrics.csv"), &r.to_csv())?;
    }
    write_predictions(&out.join("predictions.csv"), rows)
}

fn config_snapshot(cfg: &RunConfig) -> std::collections::BTreeMap<String, String> {
    cfg.model
        .to_kv()
        .into_iter()
        .chain(cfg.train.to_kv())
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            Ok(e.to_string())
        }
        Err(e) => Err(Error::Usage(e.to_string())),
    }
}

/// Runs a parsed command and returns the text printed on success.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = common.resolve()?;
            let vocab = crate::semantics::MaterialVocab::default();
            let ds = generate_dataset(&cfg.data, &vocab, cfg.model.seed)?;
            write_dataset(&ds, &out)?;
            Ok(format!(
                "wrote {} samples ({} train) to {}\n",
                ds.samples.len(),
                ds.train().count(),
                out.display()
            ))
        }
        Command::Train { common, io, model } => {
            let cfg = common.resolve()?;
            let l = load(&io, &cfg)?;
            let snapshot = config_snapshot(&cfg);
            let (saved, mut record, rows) = match model {
                ModelKind::Factored => {
                    let f = fit_and_evaluate(
                        "factored",
                        MassModel::new(&cfg.model, l.vocab.len())?,
                        &l.data,
                        &cfg.train,
                        snapshot,
                    )?;
                    (SavedModel::Factored(f.model), f.record, f.test_predictions)
                }
                ModelKind::Direct => {
                    let f = fit_and_evaluate(
                        "direct",
                        DirectRegressor::from_config(&cfg.model),
                        &l.data,
                        &cfg.train,
                        snapshot,
                    )?;
                    (SavedModel::Direct(f.model), f.record, f.test_predictions)
                }
                ModelKind::RuleBased => {
                    let f = fit_and_evaluate(
                        "rule_based",
                        RuleBasedModel::new(&cfg.model, &l.vocab)?,
                        &l.data,
                        &cfg.train,
                        snapshot,
                    )?;
                    (SavedModel::RuleBased(f.model), f.record, f.test_predictions)
                }
            };
            create_dir(&io.out)?;
            let ck = io.out.join("model.phmc");
            saved.save(&ck, &cfg.model, l.vocab.len())?;
            record.checkpoint = Some(ck.display().to_string());
            write_run(&io.out, &record, &rows)?;
            Ok(summary(&record))
        }
        Command::Eval {
            common,
            io,
            checkpoint,
            split,
        } => {
            let (model, model_cfg) = SavedModel::load(&checkpoint)?;
            let mut cfg = common.resolve()?;
            cfg.model = model_cfg;
            let l = load(&io, &cfg)?;
            let rows = predict_all(&model, &l.data, &split.splits())?;
            let stratify = if matches!(split, SplitArg::Train) {
                Stratify::None
            } else {
                Stratify::SeenUnseen
            };
            let mut record = RunRecord {
                name: format!("eval:{}", model.kind()),
                config: config_snapshot(&cfg),
                epoch_losses: Vec::new(),
                reports: Default::default(),
                mean_gate_weights: mean_gate_weights(&rows),
                checkpoint: Some(checkpoint.display().to_string()),
                wall_clock_secs: 0.0,
                notes: Vec::new(),
            };
            record
                .reports
                .insert(split.name().to_string(), report(&rows, stratify)?);
            create_dir(&io.out)?;
            record.write_json(&io.out.join("run.json"))?;
            let r = &record.reports[split.name()];
            write_text(&io.out.join("metrics.csv"), &r.to_csv())?;
            write_predictions(&io.out.join("predictions.csv"), &rows)?;
            Ok(r.to_table())
        }
        Command::Ablate { common, io } => {
            let cfg = common.resolve()?;
            let l = load(&io, &cfg)?;
            let cells = run_ablation_grid(&l.data, &l.vocab, &cfg.model, &cfg.train)?;
            create_dir(&io.out)?;
            let csv = ablation_csv(&cells);
            write_text(&io.out.join("ablation.csv"), &csv)?;
            let summary = ablation_summary(&cells);
            write_text(
                &io.out.join("ablation.json"),
                &(serde_json::to_string_pretty(&summary)? + "\n"),
            )?;
            for c in &cells {
                let dir = io.out.join(c.cues.to_string().replace(',', "+"));
                write_run(&dir, &c.fitted.record, &c.fitted.test_predictions)?;
            }
            Ok(csv)
        }
        Command::Baseline {
            common,
            io,
            kind,
            volume,
        } => {
            let cfg = common.resolve()?;
            let l = load(&io, &cfg)?;
            match kind {
                BaselineKind::Direct => {
                    let f = crate::pipeline::runs::run_baseline_direct(&l.data, &cfg.model, &cfg.train)?;
                    write_run(&io.out, &f.record, &f.test_predictions)?;
                    Ok(summary(&f.record))
                }
                BaselineKind::RuleBased => {
                    let source = match volume {
                        VolumeArg::Trained => VolumeSource::Trained,
                        VolumeArg::Oracle => VolumeSource::Oracle,
                    };
                    let r = run_baseline_rulebased(&l.data, &l.vocab, &cfg.model, &cfg.train, source)?;
                    let mut record = RunRecord {
                        name: format!("rule_based:{}", if source == VolumeSource::Oracle { "oracle" } else { "trained" }),
                        config: config_snapshot(&cfg),
                        epoch_losses: Vec::new(),
                        reports: Default::default(),
                        mean_gate_weights: None,
                        checkpoint: None,
                        wall_clock_secs: 0.0,
                        notes: vec![
                            format!("excluded_unknown_material = {}", r.excluded_unknown),
                            format!("density_floor = {}", density_floor_oracle(&l.data)?),
                        ],
                    };
                    record.reports.insert("test".into(), r.report.clone());
                    write_run(&io.out, &record, &r.rows)?;
                    Ok(format!(
                        "{}excluded (unknown material): {}\n",
                        r.report.to_table(),
                        r.excluded_unknown
                    ))
                }
            }
        }
        Command::Report { predictions, by, out } => {
            let rows = read_predictions(&predictions)?;
            let stratify = match by {
                StratifyArg::None => Stratify::None,
                StratifyArg::SeenUnseen => Stratify::SeenUnseen,
                StratifyArg::Category => Stratify::Category,
            };
            let r = report(&rows, stratify)?;
            let mut text = r.to_csv();
            if let Some(w) = mean_gate_weights(&rows) {
                text.push_str(&format!(
                    "# mean gate weights image={:.2} geometry={:.2} text={:.2} (reference 0.13 / 0.49 / 0.36)\n",
                    w[0], w[1], w[2]
                ));
            }
            match out {
                Some(p) => {
                    write_text(&p, &text)?;
                    Ok(r.to_table())
                }
                None => Ok(text),
            }
        }
    }
}

fn summary(record: &RunRecord) -> String {
    let mut s = String::new();
    if let (Some(first), Some(last)) = (record.epoch_losses.first(), record.epoch_losses.last()) {
        s.push_str(&format!(
            "{}: {} epochs, train loss {first:.4} -> {last:.4}\n",
            record.name,
            record.epoch_losses.len()
        ));
    }
    if let Some(r) = record.test_report() {
        s.push_str(&r.to_table());
    }
    if let Some(w) = record.mean_gate_weights {
        s.push_str(&format!(
            "mean gate weights: image {:.2}, geometry {:.2}, text {:.2}\n",
            w[0], w[1], w[2]
        ));
    }
    s
}
