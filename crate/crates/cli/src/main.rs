use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hgcn_core::config::RunConfig;
use hgcn_core::data::io::write_dataset;
use hgcn_core::experiment::{
    self, write_csv, write_manifest, Datasets, EvalRow, TrainOptions, EVAL_CSV, ROBUSTNESS_CSV,
};

#[derive(Parser, Debug)]
#[command(name = "hgcn", version, about = "Hierarchical graph convolution for manipulation localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model; writes train.csv, best.ckpt and last.ckpt.
    Train(Common),
    /// Evaluate a checkpoint on its held-out set; writes eval.csv.
    Eval(Common),
    /// Train the eight ablation variants; writes ablation.csv.
    Ablate(Common),
    /// Compare the three down-sampling factor sets; writes sweep_downsample.csv.
    SweepDownsample(Common),
    /// Compare loss weights; writes sweep_alpha.csv.
    SweepAlpha(Common),
    /// Evaluate a checkpoint under every attack grid point; writes robustness.csv.
    Robustness(Common),
    /// Write the synthetic train and test sets as PPM/PGM files.
    GenData(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint to evaluate, or to resume training from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            out: Some(self.out.clone()),
            resume_from: self.checkpoint.clone(),
            verbose: !self.quiet,
        }
    }

    /// Model and evaluation config from `--checkpoint`; `--seed` picks a
    /// different held-out set.
    fn load_checkpoint(&self) -> anyhow::Result<(RunConfig, hgcn_core::model::HgcnNet)> {
        let Some(path) = &self.checkpoint else {
            bail!(hgcn_core::Error::Config("--checkpoint is required".into()));
        };
        if self.config.is_some() {
            bail!(hgcn_core::Error::Config(
                "--config cannot be combined with a checkpoint; its configuration is embedded".into()
            ));
        }
        let (mut cfg, net) = experiment::load_model(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok((cfg, net))
    }
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        println!("{}", msg.as_ref());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.config()?;
            let data = Datasets::generate(&cfg)?;
            let outcome = experiment::train(&cfg, &data, &c.train_options())?;
            say(c.quiet, format!("best f1 {:.4} -> {}", outcome.best_f1, c.out.display()));
        }
        Command::Eval(c) => {
            let (cfg, mut net) = c.load_checkpoint()?;
            let data = Datasets::generate(&cfg)?;
            let report = experiment::evaluate_model(&mut net, &data.test, None, cfg.batch_size)?;
            write_manifest(&c.out, "eval", &cfg)?;
            write_csv(&c.out.join(EVAL_CSV), &[EvalRow::from(report)])?;
            say(c.quiet, format!("f1 {:.4}  mcc {:.4}", report.f1, report.mcc));
        }
        Command::Ablate(c) => {
            let cfg = c.config()?;
            let data = Datasets::generate(&cfg)?;
            for row in experiment::ablate(&cfg, &data, &c.train_options())? {
                say(c.quiet, format!("{:<14} f1 {:.4}  mcc {:.4}", row.variant, row.f1, row.mcc));
            }
        }
        Command::SweepDownsample(c) => {
            let cfg = c.config()?;
            let data = Datasets::generate(&cfg)?;
            for row in experiment::sweep_downsample(&cfg, &data, &c.train_options())? {
                say(
                    c.quiet,
                    format!("{:<10} f1 {:.4}  mcc {:.4}  {:.3} ms/image", row.factors, row.f1, row.mcc, row.ms_per_image),
                );
            }
        }
        Command::SweepAlpha(c) => {
            let cfg = c.config()?;
            let data = Datasets::generate(&cfg)?;
            for row in experiment::sweep_alpha(&cfg, &data, &c.train_options())? {
                say(c.quiet, format!("alpha {:.1}  f1 {:.4}  mcc {:.4}", row.alpha, row.f1, row.mcc));
            }
        }
        Command::Robustness(c) => {
            let (cfg, mut net) = c.load_checkpoint()?;
            let data = Datasets::generate(&cfg)?;
            let (clean, rows) = experiment::robustness(&mut net, &data.test, cfg.batch_size)?;
            write_manifest(&c.out, "robustness", &cfg)?;
            write_csv(&c.out.join(EVAL_CSV), &[EvalRow::from(clean)])?;
            write_csv(&c.out.join(ROBUSTNESS_CSV), &rows)?;
            say(c.quiet, format!("clean f1 {:.4}", clean.f1));
            for row in rows {
                say(c.quiet, format!("{:<14} {:>5}  f1 {:.4}", row.kind, row.strength, row.f1));
            }
        }
        Command::GenData(c) => {
            let cfg = c.config()?;
            let data = Datasets::generate(&cfg)?;
            write_dataset(&c.out.join("train"), &data.train)?;
            write_dataset(&c.out.join("test"), &data.test)?;
            write_manifest(&c.out, "gen-data", &cfg)?;
            say(
                c.quiet,
                format!("{} train / {} test samples -> {}", data.train.len(), data.test.len(), c.out.display()),
            );
        }
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<hgcn_core::Error>())
        .map_or("internal", |e| e.kind());
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "message": msg.trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli).context("command failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

