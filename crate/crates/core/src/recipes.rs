//! Named experiments: pipeline variants evaluated over several seeds.
//!
//! Trained artifacts are memoised by the config fields that determine
//! them, so cells that share a post-trained teacher, a stage-1 student or
//! finetuned teachers train each of them once.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::encoders::{NewsEncoder, RecModel};
use crate::error::{Error, Result};
use crate::eval::{bench_throughput, count_params, BenchOptions, BenchReport, EvalReport, Metrics, SeedSummary};
use crate::trainer::{
    finetune_teacher, rng_for, run_finetune_baseline, run_posttrain, run_stage1, run_stage2, validation_split,
    Dataset, Logger, MatchOutcome, PipelineConfig, RecOutcome, STREAM_TEACHER_INIT,
};

pub const RECIPES: [&str; 6] = [
    "teacher-count-sweep",
    "stage-ablation",
    "beta-sweep",
    "loss-ablation",
    "layer-sweep",
    "efficiency",
];

/// What gets trained and evaluated for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Stage 1 then stage 2.
    TinyNewsRec,
    /// Stage-1 student finetuned on clicks without teachers.
    Stage1Only,
    /// Stage 2 from a freshly initialised student.
    Stage2Only,
    /// Fresh student finetuned on clicks.
    Direct,
    /// The first finetuned teacher (post-trained).
    Teacher,
    /// A teacher finetuned from its initial weights, without post-training.
    TeacherNoPosttrain,
}

impl Variant {
    pub fn all() -> [Variant; 6] {
        use Variant::*;
        [TinyNewsRec, Stage1Only, Stage2Only, Direct, Teacher, TeacherNoPosttrain]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::TinyNewsRec => "tiny-newsrec",
            Variant::Stage1Only => "stage1-only",
            Variant::Stage2Only => "stage2-only",
            Variant::Direct => "direct",
            Variant::Teacher => "teacher",
            Variant::TeacherNoPosttrain => "teacher-no-posttrain",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// A trained variant and its test-set report.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub model: RecModel,
    pub report: EvalReport,
    /// Stage-2 statistics, for variants that run stage 2.
    pub stage2: Option<RecOutcome>,
}

fn digest_of(v: &impl Serialize) -> String {
    let json = serde_json::to_string(v).expect("serializable");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// Memoised pipeline artifacts for one output directory.
pub struct Pipeline {
    out: Option<PathBuf>,
    data: HashMap<String, Rc<Dataset>>,
    posttrained: HashMap<String, Rc<MatchOutcome>>,
    stage1: HashMap<String, Rc<MatchOutcome>>,
    teachers: HashMap<String, Rc<RecOutcome>>,
}

impl Pipeline {
    /// Logs go under `out` when given, otherwise stay in memory.
    pub fn new(out: Option<PathBuf>) -> Self {
        Pipeline {
            out,
            data: HashMap::new(),
            posttrained: HashMap::new(),
            stage1: HashMap::new(),
            teachers: HashMap::new(),
        }
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out.as_deref()
    }

    fn logger(&self, phase: &str, key: &str) -> Result<Logger> {
        match &self.out {
            Some(dir) => Logger::create(&dir.join("logs").join(format!("{phase}-{key}.jsonl"))),
            None => Ok(Logger::memory()),
        }
    }

    fn data_key(cfg: &PipelineConfig) -> String {
        let m = &cfg.model;
        digest_of(&(
            &cfg.data,
            &cfg.synth,
            m.vocab_size,
            m.title_len,
            m.posttrain_title_len,
            m.body_len,
        ))
    }

    pub fn dataset(&mut self, cfg: &PipelineConfig) -> Result<Rc<Dataset>> {
        let key = Self::data_key(cfg);
        if let Some(d) = self.data.get(&key) {
            return Ok(d.clone());
        }
        let d = Rc::new(Dataset::load(cfg)?);
        self.data.insert(key, d.clone());
        Ok(d)
    }

    fn posttrain_key(cfg: &PipelineConfig) -> String {
        let m = &cfg.model;
        digest_of(&(
            Self::data_key(cfg),
            cfg.seed,
            cfg.microbatch,
            (m.vocab_size, m.d_model, m.n_heads, m.d_ff, m.query_dim, m.repr_dim, m.teacher_layers),
            &cfg.posttrain,
            &cfg.adam,
        ))
    }

    pub fn posttrained(&mut self, cfg: &PipelineConfig) -> Result<Rc<MatchOutcome>> {
        let key = Self::posttrain_key(cfg);
        if let Some(p) = self.posttrained.get(&key) {
            return Ok(p.clone());
        }
        let data = self.dataset(cfg)?;
        let mut log = self.logger("posttrain", &key)?;
        let p = Rc::new(run_posttrain(cfg, &data.corpus, &mut log)?);
        self.posttrained.insert(key, p.clone());
        Ok(p)
    }

    fn stage1_key(cfg: &PipelineConfig) -> String {
        let d = &cfg.distill;
        digest_of(&(
            Self::posttrain_key(cfg),
            cfg.model.student_layers,
            (d.t1, d.beta1, d.beta2, d.stage1_lr, d.stage1_epochs, d.use_distill, d.use_emb),
        ))
    }

    pub fn stage1(&mut self, cfg: &PipelineConfig) -> Result<Rc<MatchOutcome>> {
        let key = Self::stage1_key(cfg);
        if let Some(s) = self.stage1.get(&key) {
            return Ok(s.clone());
        }
        let teacher = self.posttrained(cfg)?;
        let data = self.dataset(cfg)?;
        let mut log = self.logger("stage1", &key)?;
        let s = Rc::new(run_stage1(cfg, &teacher.encoder, &data.corpus, &mut log)?);
        self.stage1.insert(key, s.clone());
        Ok(s)
    }

    fn finetune_key(cfg: &PipelineConfig) -> String {
        let f = &cfg.finetune;
        let m = &cfg.model;
        digest_of(&(
            f.negatives,
            f.max_history,
            f.batch_size,
            f.lr,
            f.epochs,
            f.validation_fraction,
            m.freeze_below,
            m.reinit_head_on_finetune,
        ))
    }

    /// Teacher finetuned with `teacher_seed`, from the post-trained encoder
    /// or, with `posttrained = false`, from its initial weights.
    pub fn teacher(&mut self, cfg: &PipelineConfig, teacher_seed: u64, posttrained: bool) -> Result<Rc<RecOutcome>> {
        let base = if posttrained {
            Self::posttrain_key(cfg)
        } else {
            format!("init-{}", Self::posttrain_key(cfg))
        };
        let key = digest_of(&(base, Self::finetune_key(cfg), teacher_seed));
        if let Some(t) = self.teachers.get(&key) {
            return Ok(t.clone());
        }
        let init = if posttrained {
            self.posttrained(cfg)?.encoder.clone()
        } else {
            NewsEncoder::new(
                cfg.model.encoder(cfg.model.teacher_layers),
                &mut rng_for(cfg.seed, STREAM_TEACHER_INIT),
            )?
        };
        let data = self.dataset(cfg)?;
        let (train, val) = validation_split(cfg, &data.train);
        let mut log = self.logger("finetune", &key)?;
        let t = Rc::new(finetune_teacher(cfg, &init, teacher_seed, &train, &val, &data.news, &mut log)?);
        self.teachers.insert(key, t.clone());
        Ok(t)
    }

    /// The `M` post-trained, finetuned teachers of `cfg`.
    pub fn teachers(&mut self, cfg: &PipelineConfig) -> Result<Vec<RecModel>> {
        cfg.teacher_seeds()
            .into_iter()
            .map(|s| Ok(self.teacher(cfg, s, true)?.model.clone()))
            .collect()
    }

    pub fn stage2(&mut self, cfg: &PipelineConfig, from_stage1: bool) -> Result<RecOutcome> {
        let teachers = self.teachers(cfg)?;
        let student = if from_stage1 {
            Some(self.stage1(cfg)?.encoder.clone())
        } else {
            None
        };
        let data = self.dataset(cfg)?;
        let (train, val) = validation_split(cfg, &data.train);
        let key = digest_of(&(cfg.hash(), from_stage1));
        let mut log = self.logger("stage2", &key)?;
        run_stage2(cfg, &teachers, student, &train, &val, &data.news, &mut log)
    }

    fn baseline(&mut self, cfg: &PipelineConfig, init: Option<NewsEncoder>, tag: &str) -> Result<RecOutcome> {
        let data = self.dataset(cfg)?;
        let (train, val) = validation_split(cfg, &data.train);
        let key = digest_of(&(cfg.hash(), tag));
        let mut log = self.logger("baseline", &key)?;
        run_finetune_baseline(cfg, init, cfg.model.student_layers, &train, &val, &data.news, 0, &mut log)
    }

    /// Trains `variant` under `cfg` and evaluates it on the test impressions.
    pub fn run_variant(&mut self, cfg: &PipelineConfig, variant: Variant) -> Result<VariantResult> {
        let (model, stage2) = match variant {
            Variant::TinyNewsRec => {
                let o = self.stage2(cfg, true)?;
                (o.model.clone(), Some(o))
            }
            Variant::Stage2Only => {
                let o = self.stage2(cfg, false)?;
                (o.model.clone(), Some(o))
            }
            Variant::Stage1Only => {
                let init = self.stage1(cfg)?.encoder.clone();
                (self.baseline(cfg, Some(init), "stage1-only")?.model, None)
            }
            Variant::Direct => (self.baseline(cfg, None, "direct")?.model, None),
            Variant::Teacher => {
                let s = cfg.teacher_seeds()[0];
                (self.teacher(cfg, s, true)?.model.clone(), None)
            }
            Variant::TeacherNoPosttrain => {
                let s = cfg.teacher_seeds()[0];
                (self.teacher(cfg, s, false)?.model.clone(), None)
            }
        };
        let data = self.dataset(cfg)?;
        let report = crate::trainer::evaluate_test(cfg, &model, &data)?;
        Ok(VariantResult { model, report, stage2 })
    }
}

/// One trained cell on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub recipe: String,
    pub cell: String,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub report: EvalReport,
}

/// Seeds of a multi-seed experiment. Spaced apart so that derived teacher
/// seeds never collide across runs.
pub fn run_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(1000 * i)).collect()
}

/// A cell: overrides applied to the base config and a variant to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<String>,
    pub variant: Variant,
}

fn cell(name: impl Into<String>, overrides: &[String], variant: Variant) -> Cell {
    Cell {
        name: name.into(),
        overrides: overrides.to_vec(),
        variant,
    }
}

/// Cells of a named recipe. `efficiency` has none; it benchmarks instead.
pub fn recipe_cells(name: &str, base: &PipelineConfig) -> Result<Vec<Cell>> {
    let v = Variant::TinyNewsRec;
    let cells = match name {
        "teacher-count-sweep" => (1..=4)
            .map(|m| cell(format!("M={m}"), &[format!("finetune.teachers={m}")], v))
            .collect(),
        "stage-ablation" => vec![
            cell("both-stages", &[], Variant::TinyNewsRec),
            cell("stage1-only", &[], Variant::Stage1Only),
            cell("stage2-only", &[], Variant::Stage2Only),
            cell("neither", &[], Variant::Direct),
        ],
        "beta-sweep" => {
            let mut c: Vec<Cell> = [0.0, 0.05, 0.1, 0.15, 0.3]
                .iter()
                .map(|b2| {
                    cell(
                        format!("beta1=1,beta2={b2}"),
                        &["distill.beta1=1.0".into(), format!("distill.beta2={b2:?}")],
                        v,
                    )
                })
                .collect();
            c.extend([0.7, 1.0, 1.3].iter().map(|b1| {
                cell(
                    format!("beta1={b1},beta2=0.1"),
                    &[format!("distill.beta1={b1:?}"), "distill.beta2=0.1".into()],
                    v,
                )
            }));
            c
        }
        "loss-ablation" => {
            let sw = |d: bool, e: bool| vec![format!("distill.use_distill={d}"), format!("distill.use_emb={e}")];
            vec![
                cell("all-losses", &sw(true, true), v),
                cell("no-distill", &sw(false, true), v),
                cell("no-emb", &sw(true, false), v),
                cell("target-only", &sw(false, false), v),
            ]
        }
        "layer-sweep" => {
            let mut c = Vec::new();
            for l in [1, 2, 4] {
                let o = [format!("model.student_layers={l}")];
                c.push(cell(format!("tiny-newsrec-{l}"), &o, Variant::TinyNewsRec));
                c.push(cell(format!("direct-{l}"), &o, Variant::Direct));
            }
            c.push(cell(format!("teacher-{}", base.model.teacher_layers), &[], Variant::Teacher));
            c.push(cell(
                format!("teacher-{}-no-posttrain", base.model.teacher_layers),
                &[],
                Variant::TeacherNoPosttrain,
            ));
            c
        }
        "efficiency" => Vec::new(),
        _ => {
            return Err(Error::Config(format!(
                "unknown recipe `{name}`; available: {}",
                RECIPES.join(", ")
            )))
        }
    };
    Ok(cells)
}

/// Per-cell results of a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeResult {
    pub recipe: String,
    pub rows: Vec<CellRow>,
    pub summaries: Vec<(String, SeedSummary)>,
}

impl RecipeResult {
    pub fn summary(&self, cell: &str) -> Option<&SeedSummary> {
        self.summaries.iter().find(|(c, _)| c == cell).map(|(_, s)| s)
    }

    /// Tab-separated table: one row per cell with mean and std per metric.
    pub fn table(&self) -> String {
        let mut s = String::from("cell\tseeds\tauc\tauc_std\tmrr\tmrr_std\tndcg5\tndcg5_std\tndcg10\tndcg10_std\tconfig_hashes\n");
        for (cell, sum) in &self.summaries {
            let hashes: Vec<&str> = self
                .rows
                .iter()
                .filter(|r| &r.cell == cell)
                .map(|r| r.config_hash.as_str())
                .collect();
            let (m, d) = (sum.mean.fields(), sum.std.fields());
            let _ = write!(s, "{cell}\t{}", sum.per_seed.len());
            for i in 0..4 {
                let _ = write!(s, "\t{:.6}\t{:.6}", m[i], d[i]);
            }
            let _ = writeln!(s, "\t{}", hashes.join(","));
        }
        s
    }
}

/// Runs every cell of `name` over `seeds` and writes `<out>/<name>.tsv`
/// and `<out>/<name>.jsonl` when the pipeline has an output directory.
pub fn run_recipe(pipe: &mut Pipeline, name: &str, base: &PipelineConfig, seeds: &[u64]) -> Result<RecipeResult> {
    let cells = recipe_cells(name, base)?;
    if name == "efficiency" {
        return Err(Error::Config("`efficiency` is a benchmark; use run_efficiency".into()));
    }
    let mut rows = Vec::new();
    for seed in seeds {
        for c in &cells {
            let mut cfg = base.clone();
            cfg.seed = *seed;
            cfg.apply_overrides(&c.overrides)?;
            let r = pipe.run_variant(&cfg, c.variant)?;
            log::info!("{name} {} seed {seed}: auc {:.4}", c.name, r.report.metrics.auc);
            rows.push(CellRow {
                recipe: name.to_string(),
                cell: c.name.clone(),
                variant: c.variant,
                seed: *seed,
                config_hash: cfg.short_hash(),
                report: r.report,
            });
        }
    }
    let summaries = cells
        .iter()
        .map(|c| {
            let per: Vec<EvalReport> = rows.iter().filter(|r| r.cell == c.name).map(|r| r.report).collect();
            (c.name.clone(), SeedSummary::new(per))
        })
        .collect();
    let result = RecipeResult {
        recipe: name.to_string(),
        rows,
        summaries,
    };
    if let Some(dir) = pipe.out_dir() {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{name}.tsv")), result.table())?;
        let mut lines = String::new();
        for r in &result.rows {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        std::fs::write(dir.join(format!("{name}.jsonl")), lines)?;
    }
    Ok(result)
}

/// Throughput and size of news encoders at several depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub n_layers: usize,
    pub bench: BenchReport,
    /// Throughput relative to the deepest encoder.
    pub speedup: f64,
    pub config_hash: String,
}

/// Random titles of the configured length, shared by every depth.
pub fn bench_titles(cfg: &PipelineConfig, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..cfg.model.title_len)
                .map(|_| rng.random_range(1..cfg.model.vocab_size))
                .collect()
        })
        .collect()
}

pub fn run_efficiency(cfg: &PipelineConfig, layers: &[usize], opts: &BenchOptions) -> Result<Vec<EfficiencyRow>> {
    let titles = bench_titles(cfg, 256, cfg.seed);
    let mut reports = Vec::new();
    for &l in layers {
        let enc = NewsEncoder::new(cfg.model.encoder(l), &mut rng_for(cfg.seed, STREAM_TEACHER_INIT))?;
        let mut b = bench_throughput(&enc, &titles, opts)?;
        b.params = count_params(&enc.cfg);
        reports.push(b);
    }
    let reference = reports
        .iter()
        .max_by_key(|b| b.n_layers)
        .map(|b| b.news_per_sec)
        .unwrap_or(1.0);
    Ok(reports
        .into_iter()
        .map(|bench| EfficiencyRow {
            n_layers: bench.n_layers,
            speedup: bench.news_per_sec / reference,
            bench,
            config_hash: cfg.short_hash(),
        })
        .collect())
}

/// Table mirroring a model-size / speed figure: layers, parameters, news/sec, speedup.
pub fn efficiency_table(rows: &[EfficiencyRow]) -> String {
    let mut s = String::from("layers\tparams_total\tparams_layers\tnews_per_sec\tspeedup\tconfig_hash\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.1}\t{:.2}\t{}",
            r.n_layers, r.bench.params.total, r.bench.params.layers, r.bench.news_per_sec, r.speedup, r.config_hash
        );
    }
    s
}

/// JSON line for a report, tagged with the producing config.
pub fn report_record(cfg: &PipelineConfig, what: &str, report: &EvalReport) -> serde_json::Value {
    json!({"what": what, "seed": cfg.seed, "config_hash": cfg.short_hash(), "report": report})
}

pub fn metrics_line(m: &Metrics) -> String {
    format!("auc {:.4}  mrr {:.4}  ndcg@5 {:.4}  ndcg@10 {:.4}", m.auc, m.mrr, m.ndcg5, m.ndcg10)
}
