use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use relcon::config::Config;
use relcon::doc::RelationKind;
use relcon::pipeline::{default_root, Pipeline, Stage};
use relcon::rcm::TaskSet;
use relcon::Error;

#[derive(Parser)]
#[command(name = "relcon", version, about = "Relation pre-training and decoding for synthetic documents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and its train/val/test splits.
    Gen(Common),
    /// Pre-train the encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Objectives, e.g. `mvlm+lrcm+grcm`.
        #[arg(long)]
        tasks: Option<TaskSet>,
    },
    /// Fine-tune one relation head.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        kind: RelationKind,
    },
    /// Fine-tune the configured heads and score the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Decision threshold on relation scores.
        #[arg(long)]
        threshold: Option<f64>,
        /// Print the per-document records as well as the summary.
        #[arg(long)]
        records: bool,
    },
    /// Write entity features and global relation distributions of the test
    /// split.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root for stage directories.
    #[arg(long, env = "RELCON_OUT")]
    out: Option<PathBuf>,
    /// Recompute stages even when their outputs exist.
    #[arg(long)]
    force: bool,
    /// Configuration override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Start from this checkpoint instead of the pre-training stage.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pre-training objectives, when pre-training runs as a dependency.
    #[arg(long)]
    tasks: Option<TaskSet>,
}

impl Common {
    fn pipeline(&self, extra: Vec<String>) -> anyhow::Result<Pipeline> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(extra);
        let cfg = match Config::load(self.config.as_deref(), &overrides) {
            Ok(c) => c,
            Err(Error::Config(errs)) => {
                for e in &errs {
                    eprintln!("config error: {e}");
                }
                bail!("{} configuration error(s)", errs.len());
            }
            Err(e) => return Err(e.into()),
        };
        let root = self.out.clone().unwrap_or_else(default_root);
        let mut p = Pipeline::new(cfg, root);
        p.force = self.force;
        p.verbose = !self.quiet;
        Ok(p)
    }
}

fn tasks_override(t: Option<TaskSet>) -> Vec<String> {
    t.map(|t| vec![format!("pretrain.tasks=\"{t}\"")]).unwrap_or_default()
}

fn report(stage: &Stage) {
    println!("{}", stage.dir.display());
}

fn check_checkpoint(p: Option<&Path>) -> anyhow::Result<()> {
    if let Some(p) = p {
        if !p.is_file() {
            bail!("checkpoint {} does not exist", p.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Gen(common) => report(&common.pipeline(vec![])?.gen()?),
        Cmd::Pretrain { common, tasks } => report(&common.pipeline(tasks_override(tasks))?.pretrain()?),
        Cmd::Finetune { common, model, kind } => {
            check_checkpoint(model.checkpoint.as_deref())?;
            let p = common.pipeline(tasks_override(model.tasks))?;
            report(&p.finetune(kind, model.checkpoint.as_deref())?)
        }
        Cmd::Eval { common, model, threshold, records } => {
            check_checkpoint(model.checkpoint.as_deref())?;
            let mut extra = tasks_override(model.tasks);
            if let Some(t) = threshold {
                extra.push(format!("eval.threshold={t}"));
            }
            let p = common.pipeline(extra)?;
            let (stage, _) = p.eval(model.checkpoint.as_deref())?;
            if records {
                let path = stage.file("records.jsonl");
                print!("{}", std::fs::read_to_string(&path).with_context(|| path.display().to_string())?);
            }
            let path = stage.file("summary.txt");
            print!("{}", std::fs::read_to_string(&path).with_context(|| path.display().to_string())?);
            report(&stage);
        }
        Cmd::DumpFeatures { common, model } => {
            check_checkpoint(model.checkpoint.as_deref())?;
            let p = common.pipeline(tasks_override(model.tasks))?;
            report(&p.dump_features(model.checkpoint.as_deref())?)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
