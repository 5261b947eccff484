use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tinyrec::data::generate_synthetic_corpus;
use tinyrec::eval::{BenchOptions, SeedSummary};
use tinyrec::par::Execution;
use tinyrec::recipes::{self, metrics_line, run_seeds, Pipeline, RECIPES};
use tinyrec::trainer::{
    evaluate_test, finetune_teacher, run_finetune_baseline, run_posttrain, run_stage1, run_stage2, validation_split,
    Checkpoint, Dataset, Logger, PipelineConfig, Stage,
};

/// Post-training, two-stage distillation and evaluation of transformer
/// news recommenders.
#[derive(Parser)]
#[command(name = "tinyrec", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as MIND TSV files plus a title/body corpus.
    SynthData {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Post-train a fresh teacher encoder on title-body matching.
    Posttrain {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: distil the post-trained teacher into a student on matching.
    DistillStage1 {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune M teachers with distinct seeds on click prediction.
    FinetuneTeachers {
        #[arg(long)]
        teacher: PathBuf,
        /// Directory receiving `teacher-<i>` checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2: multi-teacher distillation on click prediction.
    DistillStage2 {
        /// Finetuned teacher checkpoints.
        #[arg(long, num_args = 1.., required = true)]
        teachers: Vec<PathBuf>,
        /// Stage-1 student; omit with --skip-stage1.
        #[arg(long, required_unless_present = "skip_stage1")]
        student: Option<PathBuf>,
        /// Start from a freshly initialised student.
        #[arg(long)]
        skip_stage1: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finetune an encoder directly on click prediction.
    FinetuneBaseline {
        /// Starting encoder; a fresh one of --layers layers when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        freeze_below: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the test impressions.
    Eval {
        #[arg(required = true)]
        models: Vec<PathBuf>,
    },
    /// News-encoding throughput and parameter counts by depth.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,12")]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 500)]
        window_ms: u64,
        #[arg(long, default_value_t = 5)]
        windows: usize,
        /// Encode with all threads (reported separately from the default single thread).
        #[arg(long)]
        parallel: bool,
    },
    /// Run a named experiment over several seeds.
    Recipe {
        /// One of: teacher-count-sweep, stage-ablation, beta-sweep, loss-ablation, layer-sweep, efficiency.
        name: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Print the effective config.
    ShowConfig,
}

fn out_root() -> PathBuf {
    std::env::var_os("TINYREC_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("tinyrec-out"))
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    cfg.apply_overrides(&c.set)?;
    Ok(cfg)
}

fn logger(dir: &Path, phase: &str) -> Result<Logger> {
    Ok(Logger::create(&dir.join(format!("{phase}.jsonl")))?)
}

fn load_stage(dir: &Path, stages: &[Stage]) -> Result<Checkpoint> {
    let ck = Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    ck.expect_stage(stages)?;
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let root = out_root();
    let hash = cfg.short_hash();
    match cli.cmd {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::SynthData { dir } => {
            let dir = dir.unwrap_or_else(|| root.join("synth"));
            generate_synthetic_corpus(&cfg.synth)?.write(&dir)?;
            println!("wrote synthetic dataset to {}", dir.display());
        }
        Command::Posttrain { out } => {
            let out = out.unwrap_or_else(|| root.join("posttrained"));
            let data = Dataset::load(&cfg)?;
            let o = run_posttrain(&cfg, &data.corpus, &mut logger(&out, "posttrain")?)?;
            for e in &o.epochs {
                println!("epoch {}  loss {:.4}  accuracy {:.4}", e.epoch, e.loss, e.accuracy);
            }
            Checkpoint::news_only(Stage::Posttrained, cfg.seed, &hash, o.encoder).save(&out)?;
            println!("checkpoint: {}", out.display());
        }
        Command::DistillStage1 { teacher, out } => {
            let out = out.unwrap_or_else(|| root.join("stage1"));
            let t = load_stage(&teacher, &[Stage::Posttrained])?;
            let data = Dataset::load(&cfg)?;
            let o = run_stage1(&cfg, &t.news, &data.corpus, &mut logger(&out, "stage1")?)?;
            for e in &o.epochs {
                println!(
                    "epoch {}  loss {:.4}  distill {:.4}  emb {:.4}  target {:.4}  accuracy {:.4}",
                    e.epoch, e.loss, e.distill, e.emb, e.target, e.accuracy
                );
            }
            Checkpoint::news_only(Stage::Stage1, cfg.seed, &hash, o.encoder).save(&out)?;
            println!("checkpoint: {}", out.display());
        }
        Command::FinetuneTeachers { teacher, out } => {
            let out = out.unwrap_or_else(|| root.join("teachers"));
            let t = load_stage(&teacher, &[Stage::Posttrained])?;
            let data = Dataset::load(&cfg)?;
            let (train, val) = validation_split(&cfg, &data.train);
            for (i, seed) in cfg.teacher_seeds().into_iter().enumerate() {
                let dir = out.join(format!("teacher-{i}"));
                let o = finetune_teacher(&cfg, &t.news, seed, &train, &val, &data.news, &mut logger(&dir, "finetune")?)?;
                let report = evaluate_test(&cfg, &o.model, &data)?;
                println!("teacher {i} (seed {seed}): best epoch {}  test {}", o.best_epoch, metrics_line(&report.metrics));
                Checkpoint::model(Stage::Finetuned, seed, &hash, o.model).save(&dir)?;
            }
            println!("checkpoints: {}", out.display());
        }
        Command::DistillStage2 {
            teachers,
            student,
            skip_stage1,
            out,
        } => {
            let out = out.unwrap_or_else(|| root.join("stage2"));
            let models = teachers
                .iter()
                .map(|d| load_stage(d, &[Stage::Finetuned])?.into_model().map_err(Into::into))
                .collect::<Result<Vec<_>>>()?;
            let student = match (skip_stage1, student) {
                (true, _) => None,
                (false, Some(d)) => Some(load_stage(&d, &[Stage::Stage1])?.news),
                (false, None) => bail!("--student is required unless --skip-stage1 is given"),
            };
            let data = Dataset::load(&cfg)?;
            let (train, val) = validation_split(&cfg, &data.train);
            let o = run_stage2(&cfg, &models, student, &train, &val, &data.news, &mut logger(&out, "stage2")?)?;
            for e in &o.epochs {
                println!(
                    "epoch {}  loss {:.4}  distill {:.4}  emb {:.4}  target {:.4}  omega {:.4}  weights {:?}",
                    e.epoch,
                    e.loss,
                    e.distill,
                    e.emb,
                    e.target,
                    e.omega.unwrap_or(f64::NAN),
                    e.mean_weights
                );
            }
            let report = evaluate_test(&cfg, &o.model, &data)?;
            println!("test {}", metrics_line(&report.metrics));
            Checkpoint::model(Stage::Stage2, cfg.seed, &hash, o.model).save(&out)?;
            println!("checkpoint: {}", out.display());
        }
        Command::FinetuneBaseline {
            init,
            layers,
            freeze_below,
            out,
        } => {
            let out = out.unwrap_or_else(|| root.join("baseline"));
            let init = match init {
                Some(d) => Some(load_stage(&d, &[Stage::Posttrained, Stage::Stage1])?.news),
                None => None,
            };
            let layers = layers.unwrap_or(cfg.model.student_layers);
            let data = Dataset::load(&cfg)?;
            let (train, val) = validation_split(&cfg, &data.train);
            let o = run_finetune_baseline(
                &cfg,
                init,
                layers,
                &train,
                &val,
                &data.news,
                freeze_below,
                &mut logger(&out, "baseline")?,
            )?;
            let report = evaluate_test(&cfg, &o.model, &data)?;
            println!("test {}", metrics_line(&report.metrics));
            Checkpoint::model(Stage::Baseline, cfg.seed, &hash, o.model).save(&out)?;
            println!("checkpoint: {}", out.display());
        }
        Command::Eval { models } => {
            let data = Dataset::load(&cfg)?;
            let mut reports = Vec::new();
            for dir in &models {
                let ck = Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
                let model = ck.into_model()?;
                let report = evaluate_test(&cfg, &model, &data)?;
                let rec = recipes::report_record(&cfg, &dir.display().to_string(), &report);
                println!("{rec}");
                reports.push(report);
            }
            if reports.len() > 1 {
                let s = SeedSummary::new(reports);
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::Bench {
            layers,
            window_ms,
            windows,
            parallel,
        } => {
            let opts = BenchOptions {
                window: Duration::from_millis(window_ms),
                windows,
                exec: if parallel { Execution::Parallel } else { Execution::Sequential },
                ..BenchOptions::default()
            };
            let rows = recipes::run_efficiency(&cfg, &layers, &opts)?;
            print!("{}", recipes::efficiency_table(&rows));
        }
        Command::Recipe { name, seeds } => {
            if !RECIPES.contains(&name.as_str()) {
                bail!("unknown recipe `{name}`; available: {}", RECIPES.join(", "));
            }
            std::fs::create_dir_all(&root)?;
            if name == "efficiency" {
                let rows = recipes::run_efficiency(&cfg, &[1, 2, 4, 12], &BenchOptions::default())?;
                let table = recipes::efficiency_table(&rows);
                std::fs::write(root.join("efficiency.tsv"), &table)?;
                print!("{table}");
            } else {
                let mut pipe = Pipeline::new(Some(root.clone()));
                let r = recipes::run_recipe(&mut pipe, &name, &cfg, &run_seeds(cfg.seed, seeds))?;
                print!("{}", r.table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
