use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ssml::adapt::{ssml_finetune, supervised_finetune, write_adapt_csv, AdaptConfig};
use ssml::checkpoint::{self, Checkpoint};
use ssml::data::{export_labels_csv, few_shot_sample, loso_split, save_datasets, SubjectDataset};
use ssml::harness::{
    export_features, load_data, model_spec_for, read_rows_csv, run_loso_on, write_improvement_csv, write_rows_csv,
    write_summary_csv, write_tests_csv, DataSource, ExperimentConfig, ExperimentReport, Method,
};
use ssml::meta::{accuracy_of, pretrain, write_history_csv};

#[derive(Parser)]
#[command(name = "ssml", version, about = "Semi-supervised meta-learning for cross-subject signal classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set meta.beta=0.001`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Read subjects from an MSHD file instead of generating them.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        if let Some(d) = &self.data {
            cfg.data = DataSource::File(d.clone());
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject dataset as an MSHD file.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write `subject_id,index,label` rows.
        #[arg(long)]
        labels_csv: Option<PathBuf>,
    },
    /// Meta-train on every subject except `--target`.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint stem; writes `<stem>.manifest` and `<stem>.bin`.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the target subject.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value = "SSML")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on each subject (or one `--target`).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Full leave-one-subject-out grid.
    Loso {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for rows.csv, summary.csv, improvements.csv, tests.csv.
        #[arg(long, short)]
        out_dir: PathBuf,
    },
    /// Rebuild the tables from a rows CSV.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, short)]
        out_dir: PathBuf,
    },
    /// Export last-hidden-layer features as CSV.
    Features {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn pick_target(data: &[SubjectDataset], target: usize) -> Result<&SubjectDataset> {
    data.get(target)
        .with_context(|| format!("target {target} out of range for {} subjects", data.len()))
}

fn write_tables(dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_rows_csv(&dir.join("rows.csv"), report)?;
    write_summary_csv(&dir.join("summary.csv"), report)?;
    if report.rows.iter().any(|r| r.method == Method::WoMeta) {
        write_improvement_csv(&dir.join("improvements.csv"), &report.improvement_table()?)?;
    }
    write_tests_csv(&dir.join("tests.csv"), &report.paired_tests())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, labels_csv } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            save_datasets(&out, &data)?;
            if let Some(p) = labels_csv {
                export_labels_csv(&p, &data)?;
            }
            println!("wrote {} subjects to {}", data.len(), out.display());
        }
        Command::Pretrain {
            cfg,
            target,
            seed,
            out,
            history,
        } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let spec = model_spec_for(&cfg, &data)?;
            let split = loso_split(&data, target)?;
            let pre = pretrain(&spec, &split.sources, &cfg.meta, seed)?;
            checkpoint::save(
                &out,
                &Checkpoint {
                    params: pre.params,
                    centers: Some(pre.centers),
                    seed,
                },
            )?;
            if let Some(h) = history {
                write_history_csv(&h, &pre.history)?;
            }
            println!("best epoch {} of {}", pre.best_epoch, pre.history.len());
        }
        Command::Adapt {
            cfg,
            checkpoint: ckpt_path,
            target,
            shots,
            method,
            seed,
            out,
            report,
        } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let tgt = pick_target(&data, target)?;
            let ckpt = checkpoint::load(&ckpt_path)?;
            let centers = ckpt.centers.clone().unwrap_or_else(|| ckpt.params.zero_centers());
            let split = few_shot_sample(tgt, shots, cfg.eval_fraction, seed)?;
            let adapt = AdaptConfig {
                n_shot: shots,
                seed,
                ..cfg.adapt.clone()
            };
            let eval = split.eval.samples.is_some().then_some(&split.eval);
            let outcome = match method {
                Method::Ssml => ssml_finetune(&ckpt.params, &centers, &split.labeled, &split.unlabeled, &adapt, eval)?,
                Method::Maml => supervised_finetune(&ckpt.params, &centers, &split.labeled, &adapt, eval)?,
                Method::WoMeta => bail!("WOMETA does not adapt; use `eval`"),
            };
            if let Some(r) = report {
                write_adapt_csv(&r, &outcome.report)?;
            }
            checkpoint::save(
                &out,
                &Checkpoint {
                    params: outcome.params,
                    centers: Some(outcome.centers),
                    seed,
                },
            )?;
        }
        Command::Eval {
            cfg,
            checkpoint: ckpt_path,
            target,
            out,
        } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let ckpt = checkpoint::load(&ckpt_path)?;
            let subjects: Vec<&SubjectDataset> = match target {
                Some(t) => vec![pick_target(&data, t)?],
                None => data.iter().collect(),
            };
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["subject_id", "accuracy"])?;
            for d in subjects {
                let acc = accuracy_of(&ckpt.params, d.samples(), d.labels())?;
                w.write_record([d.subject_id.clone(), format!("{acc:.6}")])?;
            }
            w.flush()?;
        }
        Command::Loso { cfg, out_dir } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let report = run_loso_on(&cfg, &data)?;
            write_tables(&out_dir, &report)?;
            for s in report.summary() {
                println!("{:<7} {:>3}-shot {:.4}", s.method.as_str(), s.shot, s.mean_accuracy);
            }
        }
        Command::Report { rows, out_dir } => {
            let report = ExperimentReport::from_rows(read_rows_csv(&rows)?);
            write_tables(&out_dir, &report)?;
        }
        Command::Features {
            cfg,
            checkpoint: ckpt_path,
            out,
        } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let ckpt = checkpoint::load(&ckpt_path)?;
            export_features(&ckpt.params, &data, &out)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
