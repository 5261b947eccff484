//! The training phases: post-training, stage-1 distillation, teacher
//! finetuning, stage-2 distillation, and direct-finetune baselines.

mod checkpoint;
mod config;
mod data;
mod log;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{Checkpoint, ModelManifest, Stage};
pub use config::{
    AdamParams, DataConfig, DistillConfig, FinetuneConfig, ModelConfig, PipelineConfig, PosttrainConfig,
};
pub use data::Dataset;
pub use log::Logger;

use crate::data::{build_rec_samples, split_validation, CorpusArticle, Impression, NewsTable, RecSample};
use crate::distill::{
    per_teacher_losses, stage1_total_loss, stage2_total_loss, teacher_weights_node, MatchTargets, TeacherEnsemble,
    TeacherReprs,
};
use crate::encoders::{news_by_sample, NewsEncoder, RecModel};
use crate::error::{Error, Result};
use crate::eval::{encode_sequences, encode_table, evaluate, EvalReport, ENCODE_CHUNK};
use crate::par::{self, Execution};
use crate::posttrain::{
    epoch_samples, matching_accuracy, matching_forward, matching_loss, positive_first_targets, MatchSample,
};
use crate::tensor::{Adam, Gradients, Graph, ParamSet, Tensor};

// Every phase draws from its own stream of the run seed.
pub const STREAM_TEACHER_INIT: u64 = 1;
pub const STREAM_POSTTRAIN: u64 = 2;
pub const STREAM_STUDENT_INIT: u64 = 3;
pub const STREAM_STAGE1: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const STREAM_FINETUNE: u64 = 6;
pub const STREAM_STAGE2: u64 = 7;
pub const STREAM_BASELINE: u64 = 8;
pub const STREAM_EVAL: u64 = 9;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Output of one chunk: gradients, loss statistics already weighted by the
/// chunk's share of the batch, and free-form per-sample values.
type ChunkOut = (Gradients, Vec<f64>, Vec<f64>);

struct StepResult {
    grads: Gradients,
    stats: Vec<f64>,
    extra: Vec<f64>,
}

/// Splits `items` into fixed-size chunks, runs `f(chunk, share)` on each
/// (in parallel when enabled) and reduces in chunk order. `share` is the
/// chunk's fraction of the batch, so mean losses add up to the batch mean.
fn batch_step<T, F>(exec: Execution, microbatch: usize, items: &[T], f: F) -> Result<StepResult>
where
    T: Sync,
    F: Fn(&[T], f64) -> Result<ChunkOut> + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(microbatch).collect();
    let total = items.len() as f64;
    let outs = par::map(exec, &chunks, |c| f(c, c.len() as f64 / total));
    let mut parts = Vec::with_capacity(outs.len());
    let mut stats: Vec<f64> = Vec::new();
    let mut extra = Vec::new();
    for o in outs {
        let (g, s, e) = o?;
        if stats.is_empty() {
            stats = vec![0.0; s.len()];
        }
        for (a, b) in stats.iter_mut().zip(&s) {
            *a += b;
        }
        extra.extend(e);
        parts.push(g);
    }
    Ok(StepResult {
        grads: Gradients::sum_ordered(parts),
        stats,
        extra,
    })
}

/// Writes each group's gradients into its set and takes one Adam step.
fn apply(sets: &mut [(&mut ParamSet, &mut Adam, usize)], grads: &Gradients) -> Result<()> {
    for (p, opt, group) in sets.iter_mut() {
        p.accumulate(*group, grads)?;
        opt.step(p)?;
    }
    Ok(())
}

/// Turns numeric failures into [`Error::Diverged`] and dumps `dump` next
/// to the log file, if there is one.
fn on_failure(err: Error, step: usize, phase: &str, log: &Logger, dump: &[(&str, &ParamSet)]) -> Error {
    let err = match err {
        Error::NonFinite(op) => Error::Diverged {
            step,
            what: format!("{phase}: non-finite value in {op}"),
        },
        e => e,
    };
    if let (Error::Diverged { .. }, Some(dir)) = (&err, log.dir()) {
        let dump_dir = dir.join(format!("diverged-{phase}"));
        if std::fs::create_dir_all(&dump_dir).is_ok() {
            for (name, p) in dump {
                let _ = crate::tensor::save_tensors(
                    p,
                    &dump_dir.join(format!("{name}.manifest")),
                    &dump_dir.join(format!("{name}.bin")),
                );
            }
        }
    }
    err
}

fn check_finite(step: usize, phase: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: format!("{phase}: non-finite loss"),
        })
    }
}

// ---- matching task ----------------------------------------------------

/// Losses and accuracy of one matching epoch, averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub distill: f64,
    pub emb: f64,
    pub target: f64,
    /// Fraction of training samples whose own title scored highest.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub encoder: NewsEncoder,
    pub epochs: Vec<MatchEpoch>,
}

/// Matching accuracy against a fixed seeded draw of negatives.
pub fn matching_eval(
    enc: &NewsEncoder,
    corpus: &[CorpusArticle],
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    let samples = epoch_samples(corpus.len(), n, &mut rng_for(seed, STREAM_EVAL))?;
    let chunks: Vec<&[MatchSample]> = samples.chunks(ENCODE_CHUNK).collect();
    let hits = par::map(exec, &chunks, |c| -> Result<f64> {
        let mut g = Graph::new();
        let p = enc.bind(&mut g, None, 0);
        let refs: Vec<&MatchSample> = c.iter().collect();
        let out = matching_forward(enc, &mut g, &p, &refs, corpus)?;
        Ok(matching_accuracy(g.value(out.logits), n + 1) * c.len() as f64)
    });
    let mut total = 0.0;
    for h in hits {
        total += h?;
    }
    Ok(total / samples.len() as f64)
}

/// Domain-specific post-training of a freshly initialised teacher.
pub fn run_posttrain(cfg: &PipelineConfig, corpus: &[CorpusArticle], log: &mut Logger) -> Result<MatchOutcome> {
    let enc = NewsEncoder::new(
        cfg.model.encoder(cfg.model.teacher_layers),
        &mut rng_for(cfg.seed, STREAM_TEACHER_INIT),
    )?;
    train_matching(cfg, enc, corpus, log)
}

/// Plain matching training of `enc` with the post-training settings.
pub fn train_matching(
    cfg: &PipelineConfig,
    mut enc: NewsEncoder,
    corpus: &[CorpusArticle],
    log: &mut Logger,
) -> Result<MatchOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("post-training corpus is empty"));
    }
    let pc = &cfg.posttrain;
    let mut opt = Adam::new(cfg.adam.with_lr(pc.lr), &enc.params);
    let mut rng = rng_for(cfg.seed, STREAM_POSTTRAIN);
    let width = pc.negatives + 1;
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..pc.epochs {
        let samples = epoch_samples(corpus.len(), pc.negatives, &mut rng)?;
        let mut sums = [0.0; 2];
        for batch in samples.chunks(pc.batch_size) {
            let res = batch_step(cfg.execution, cfg.microbatch, batch, |chunk, share| {
                let mut g = Graph::new();
                let p = enc.bind(&mut g, Some(0), 0);
                let refs: Vec<&MatchSample> = chunk.iter().collect();
                let out = matching_forward(&enc, &mut g, &p, &refs, corpus)?;
                let acc = matching_accuracy(g.value(out.logits), width);
                let loss = matching_loss(&mut g, out.logits)?;
                let loss = g.scale(loss, share)?;
                let value = g.scalar(loss);
                Ok((g.backward(loss)?, vec![value, acc * share], vec![]))
            })
            .and_then(|r| check_finite(step, "posttrain", &r.stats).map(|_| r))
            .map_err(|e| on_failure(e, step, "posttrain", log, &[("news", &enc.params)]))?;
            apply(&mut [(&mut enc.params, &mut opt, 0)], &res.grads)?;
            log.write(json!({"phase": "posttrain", "epoch": epoch, "step": step,
                "loss": res.stats[0], "accuracy": res.stats[1]}))?;
            for (s, v) in sums.iter_mut().zip(&res.stats) {
                *s += v * batch.len() as f64;
            }
            step += 1;
        }
        let n = samples.len() as f64;
        let e = MatchEpoch {
            epoch,
            loss: sums[0] / n,
            distill: 0.0,
            emb: 0.0,
            target: sums[0] / n,
            accuracy: sums[1] / n,
        };
        log.write(json!({"phase": "posttrain", "epoch_end": epoch, "loss": e.loss, "accuracy": e.accuracy}))?;
        epochs.push(e);
    }
    log.flush()?;
    Ok(MatchOutcome { encoder: enc, epochs })
}

/// A fresh student for stage 1, initialised from the student stream.
pub fn init_student(cfg: &PipelineConfig) -> Result<NewsEncoder> {
    NewsEncoder::new(
        cfg.model.encoder(cfg.model.student_layers),
        &mut rng_for(cfg.seed, STREAM_STUDENT_INIT),
    )
}

/// Stage 1: the student learns the matching task while imitating the
/// post-trained teacher's scores and representations.
pub fn run_stage1(
    cfg: &PipelineConfig,
    teacher: &NewsEncoder,
    corpus: &[CorpusArticle],
    log: &mut Logger,
) -> Result<MatchOutcome> {
    train_stage1(cfg, teacher, init_student(cfg)?, corpus, log)
}

/// Stage-1 loop on an explicit initial student.
pub fn train_stage1(
    cfg: &PipelineConfig,
    teacher: &NewsEncoder,
    mut student: NewsEncoder,
    corpus: &[CorpusArticle],
    log: &mut Logger,
) -> Result<MatchOutcome> {
    if teacher.cfg.repr_dim != student.cfg.repr_dim {
        return Err(Error::ShapeMismatch {
            op: "stage 1 representation alignment",
            lhs: vec![teacher.cfg.repr_dim],
            rhs: vec![student.cfg.repr_dim],
        });
    }
    if corpus.is_empty() {
        return Err(Error::invalid("stage-1 corpus is empty"));
    }
    let kd = cfg.distill.kd();
    let switches = cfg.distill.switches();
    let pc = &cfg.posttrain;
    let width = pc.negatives + 1;
    let d = teacher.cfg.repr_dim;
    // The teacher is frozen: encode every title and body once.
    let titles: Vec<&[usize]> = corpus.iter().map(|a| a.title.as_slice()).collect();
    let bodies: Vec<&[usize]> = corpus.iter().map(|a| a.body.as_slice()).collect();
    let t_titles = encode_sequences(teacher, &titles, cfg.execution)?;
    let t_bodies = encode_sequences(teacher, &bodies, cfg.execution)?;

    let mut opt = Adam::new(cfg.adam.with_lr(cfg.distill.stage1_lr), &student.params);
    let mut rng = rng_for(cfg.seed, STREAM_STAGE1);
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.distill.stage1_epochs {
        let samples = epoch_samples(corpus.len(), pc.negatives, &mut rng)?;
        let mut sums = [0.0; 5];
        for batch in samples.chunks(pc.batch_size) {
            let res = batch_step(cfg.execution, cfg.microbatch, batch, |chunk, share| {
                let b = chunk.len();
                let mut tt = Vec::with_capacity(b * width * d);
                let mut tb = Vec::with_capacity(b * d);
                let mut tl = Vec::with_capacity(b * width);
                for s in chunk {
                    let body = &t_bodies[s.article];
                    tb.extend_from_slice(body);
                    for t in s.titles() {
                        tt.extend_from_slice(&t_titles[t]);
                        tl.push(t_titles[t].iter().zip(body).map(|(x, y)| x * y).sum());
                    }
                }
                let mut g = Graph::new();
                let teacher_out = MatchTargets {
                    logits: g.constant(Tensor::matrix(b, width, tl)?),
                    titles: g.constant(Tensor::matrix(b * width, d, tt)?),
                    bodies: g.constant(Tensor::matrix(b, d, tb)?),
                };
                let p = student.bind(&mut g, Some(0), 0);
                let refs: Vec<&MatchSample> = chunk.iter().collect();
                let out = matching_forward(&student, &mut g, &p, &refs, corpus)?;
                let acc = matching_accuracy(g.value(out.logits), width);
                let labels = g.constant(positive_first_targets(b, width));
                let student_out = MatchTargets {
                    logits: out.logits,
                    titles: out.titles,
                    bodies: out.bodies,
                };
                let parts = stage1_total_loss(&mut g, &kd, switches, teacher_out, student_out, labels)?;
                let loss = g.scale(parts.total, share)?;
                let stats = vec![
                    g.scalar(loss),
                    g.scalar(parts.distill) * share,
                    g.scalar(parts.emb) * share,
                    g.scalar(parts.target) * share,
                    acc * share,
                ];
                Ok((g.backward(loss)?, stats, vec![]))
            })
            .and_then(|r| check_finite(step, "stage1", &r.stats).map(|_| r))
            .map_err(|e| on_failure(e, step, "stage1", log, &[("student", &student.params)]))?;
            apply(&mut [(&mut student.params, &mut opt, 0)], &res.grads)?;
            let s = &res.stats;
            log.write(json!({"phase": "stage1", "epoch": epoch, "step": step, "loss": s[0],
                "distill": s[1], "emb": s[2], "target": s[3], "accuracy": s[4]}))?;
            for (acc, v) in sums.iter_mut().zip(s) {
                *acc += v * batch.len() as f64;
            }
            step += 1;
        }
        let n = samples.len() as f64;
        let e = MatchEpoch {
            epoch,
            loss: sums[0] / n,
            distill: sums[1] / n,
            emb: sums[2] / n,
            target: sums[3] / n,
            accuracy: sums[4] / n,
        };
        log.write(json!({"phase": "stage1", "epoch_end": epoch, "loss": e.loss, "distill": e.distill,
            "emb": e.emb, "target": e.target, "accuracy": e.accuracy}))?;
        epochs.push(e);
    }
    log.flush()?;
    Ok(MatchOutcome {
        encoder: student,
        epochs,
    })
}

// ---- recommendation task -------------------------------------------------

/// Training loss and validation AUC of one recommendation epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub distill: f64,
    pub emb: f64,
    pub target: f64,
    /// `None` without validation impressions.
    pub val_auc: Option<f64>,
    /// ω at the end of the epoch (stage 2 only).
    pub omega: Option<f64>,
    /// Mean weight of each teacher over the epoch (stage 2 only).
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RecOutcome {
    /// The epoch with the best validation AUC, or the last one.
    pub model: RecModel,
    pub epochs: Vec<RecEpoch>,
    pub best_epoch: usize,
    /// Largest `|Σ_i w_i − 1|` seen on any sample (stage 2 only).
    pub max_weight_sum_error: f64,
    /// Smallest ω after any step (stage 2 only).
    pub min_omega: Option<f64>,
}

/// Train/validation split of the training impressions, shared by every
/// recommendation phase of a run.
pub fn validation_split(cfg: &PipelineConfig, train: &[Impression]) -> (Vec<Impression>, Vec<Impression>) {
    split_validation(train, cfg.finetune.validation_fraction, &mut rng_for(cfg.seed, STREAM_SPLIT))
}

fn one_hot(samples: &[&RecSample]) -> Result<Tensor> {
    let width = samples[0].candidates.len();
    let mut y = vec![0.0; samples.len() * width];
    for (r, s) in samples.iter().enumerate() {
        y[r * width + s.label] = 1.0;
    }
    Tensor::matrix(samples.len(), width, y)
}

fn epoch_rec_samples(
    cfg: &PipelineConfig,
    train: &[Impression],
    table: &NewsTable,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RecSample>> {
    let mut samples = build_rec_samples(train, table, cfg.finetune.negatives, cfg.finetune.max_history, rng)?;
    samples.shuffle(rng);
    if samples.is_empty() {
        return Err(Error::invalid("no trainable impressions (need a click and a non-click)"));
    }
    Ok(samples)
}

fn validate_epoch(cfg: &PipelineConfig, model: &RecModel, val: &[Impression], table: &NewsTable) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let r = evaluate(model, val, table, cfg.finetune.max_history, cfg.execution)?;
    Ok((r.impressions > 0).then_some(r.metrics.auc))
}

fn keep_best(best: &mut Option<(f64, usize, RecModel)>, auc: Option<f64>, epoch: usize, model: &RecModel) {
    let score = auc.unwrap_or(f64::NEG_INFINITY);
    // Without validation the last epoch wins.
    if best.as_ref().is_none_or(|(b, _, _)| score > *b || auc.is_none()) {
        *best = Some((score, epoch, model.clone()));
    }
}

/// Click-prediction finetuning with cross-entropy over `K + 1` candidates.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &PipelineConfig,
    mut model: RecModel,
    train: &[Impression],
    val: &[Impression],
    table: &NewsTable,
    freeze_below: usize,
    rng: &mut ChaCha8Rng,
    log: &mut Logger,
    phase: &str,
) -> Result<RecOutcome> {
    let fc = &cfg.finetune;
    let mut opt_news = Adam::new(cfg.adam.with_lr(fc.lr), &model.news.params);
    let mut opt_user = Adam::new(cfg.adam.with_lr(fc.lr), &model.user.params);
    let mut epochs = Vec::new();
    let mut best = None;
    let mut step = 0;
    for epoch in 0..fc.epochs {
        let samples = epoch_rec_samples(cfg, train, table, rng)?;
        let mut sum = 0.0;
        for batch in samples.chunks(fc.batch_size) {
            let res = batch_step(cfg.execution, cfg.microbatch, batch, |chunk, share| {
                let refs: Vec<&RecSample> = chunk.iter().collect();
                let mut g = Graph::new();
                let v = model.bind(&mut g, Some((0, 1)), freeze_below);
                let out = model.forward(&mut g, &v, &refs, table)?;
                let y = g.constant(one_hot(&refs)?);
                let ce = g.cross_entropy(y, out.logits)?;
                let loss = g.scale(ce, share)?;
                let value = g.scalar(loss);
                Ok((g.backward(loss)?, vec![value], vec![]))
            })
            .and_then(|r| check_finite(step, phase, &r.stats).map(|_| r))
            .map_err(|e| {
                on_failure(e, step, phase, log, &[("news", &model.news.params), ("user", &model.user.params)])
            })?;
            apply(
                &mut [
                    (&mut model.news.params, &mut opt_news, 0),
                    (&mut model.user.params, &mut opt_user, 1),
                ],
                &res.grads,
            )?;
            log.write(json!({"phase": phase, "epoch": epoch, "step": step, "loss": res.stats[0]}))?;
            sum += res.stats[0] * batch.len() as f64;
            step += 1;
        }
        let val_auc = validate_epoch(cfg, &model, val, table)?;
        let loss = sum / samples.len() as f64;
        log.write(json!({"phase": phase, "epoch_end": epoch, "loss": loss, "val_auc": val_auc}))?;
        keep_best(&mut best, val_auc, epoch, &model);
        epochs.push(RecEpoch {
            epoch,
            loss,
            distill: 0.0,
            emb: 0.0,
            target: loss,
            val_auc,
            omega: None,
            mean_weights: Vec::new(),
        });
    }
    log.flush()?;
    let (_, best_epoch, best_model) = best.unwrap_or((f64::NEG_INFINITY, 0, model));
    Ok(RecOutcome {
        model: best_model,
        epochs,
        best_epoch,
        max_weight_sum_error: 0.0,
        min_omega: None,
    })
}

/// Finetunes one teacher from the post-trained encoder. The seed drives the
/// re-drawn pooling/output layers, the user encoder and the data order.
pub fn finetune_teacher(
    cfg: &PipelineConfig,
    posttrained: &NewsEncoder,
    teacher_seed: u64,
    train: &[Impression],
    val: &[Impression],
    table: &NewsTable,
    log: &mut Logger,
) -> Result<RecOutcome> {
    let mut rng = rng_for(teacher_seed, STREAM_FINETUNE);
    let mut news = posttrained.clone();
    if cfg.model.reinit_head_on_finetune {
        news.reinit_head(&mut rng);
    }
    let model = RecModel::from_news(news, &mut rng);
    finetune(cfg, model, train, val, table, cfg.model.freeze_below, &mut rng, log, "finetune")
}

/// `M` teachers finetuned from one post-trained encoder with distinct seeds.
pub fn run_teacher_ensemble(
    cfg: &PipelineConfig,
    posttrained: &NewsEncoder,
    train: &[Impression],
    val: &[Impression],
    table: &NewsTable,
    log: &mut Logger,
) -> Result<Vec<RecOutcome>> {
    cfg.teacher_seeds()
        .into_iter()
        .map(|s| finetune_teacher(cfg, posttrained, s, train, val, table, log))
        .collect()
}

/// Direct finetuning from `init`, or from a fresh `n_layers` encoder.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune_baseline(
    cfg: &PipelineConfig,
    init: Option<NewsEncoder>,
    n_layers: usize,
    train: &[Impression],
    val: &[Impression],
    table: &NewsTable,
    freeze_below: usize,
    log: &mut Logger,
) -> Result<RecOutcome> {
    let mut rng = rng_for(cfg.seed, STREAM_BASELINE);
    let news = match init {
        Some(n) => n,
        None => NewsEncoder::new(cfg.model.encoder(n_layers), &mut rng)?,
    };
    let model = RecModel::from_news(news, &mut rng);
    finetune(cfg, model, train, val, table, freeze_below, &mut rng, log, "baseline")
}

/// Frozen teacher outputs, computed once per news item.
struct TeacherCache<'a> {
    model: &'a RecModel,
    news: Vec<Vec<f64>>,
}

impl TeacherCache<'_> {
    /// News rows in `ids` order, user vectors and `[B, K+1]` scores.
    fn batch(&self, samples: &[&RecSample], ids: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.model.cfg().repr_dim;
        let width = samples[0].candidates.len();
        let mut news = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            news.extend_from_slice(&self.news[i]);
        }
        let mut users = Vec::with_capacity(samples.len() * d);
        let mut logits = Vec::with_capacity(samples.len() * width);
        for s in samples {
            let rows: Vec<Vec<f64>> = s.history.iter().map(|&i| self.news[i].clone()).collect();
            let (u, _) = self.model.user.encode_user(&rows, &vec![true; rows.len()])?;
            for &c in &s.candidates {
                logits.push(self.news[c].iter().zip(&u).map(|(a, b)| a * b).sum());
            }
            users.extend(u);
        }
        Ok((
            Tensor::matrix(ids.len(), d, news)?,
            Tensor::matrix(samples.len(), d, users)?,
            Tensor::matrix(samples.len(), width, logits)?,
        ))
    }
}

/// Stage 2: the student finetunes on clicks while imitating the weighted
/// ensemble's soft labels and projected representations. `student` is the
/// stage-1 encoder, or `None` to start from a fresh one.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    cfg: &PipelineConfig,
    teachers: &[RecModel],
    student: Option<NewsEncoder>,
    train: &[Impression],
    val: &[Impression],
    table: &NewsTable,
    log: &mut Logger,
) -> Result<RecOutcome> {
    if teachers.is_empty() {
        return Err(Error::invalid("stage 2 needs at least one teacher"));
    }
    let mut rng = rng_for(cfg.seed, STREAM_STAGE2);
    let student = match student {
        Some(s) => s,
        None => init_student(cfg)?,
    };
    let mut model = RecModel::from_news(student, &mut rng);
    let mut ensemble =
        TeacherEnsemble::new(teachers.to_vec(), model.cfg().repr_dim, cfg.distill.omega_init, &mut rng)?;
    let caches: Vec<TeacherCache> = teachers
        .iter()
        .map(|t| {
            Ok(TeacherCache {
                model: t,
                news: encode_table(&t.news, table, cfg.execution)?,
            })
        })
        .collect::<Result<_>>()?;
    let m = teachers.len();
    let kd = cfg.distill.kd();
    let switches = cfg.distill.switches();
    let lr = cfg.distill.stage2_lr.unwrap_or(cfg.finetune.lr);
    let adam = cfg.adam.with_lr(lr);
    let mut opt_news = Adam::new(adam, &model.news.params);
    let mut opt_user = Adam::new(adam, &model.user.params);
    let mut opt_proj = Adam::new(adam, &ensemble.projections);
    let mut opt_rho = Adam::new(adam, &ensemble.rho);

    let mut epochs = Vec::new();
    let mut best = None;
    let mut step = 0;
    let mut max_err: f64 = 0.0;
    let mut min_omega = f64::INFINITY;
    for epoch in 0..cfg.distill.stage2_epochs {
        let samples = epoch_rec_samples(cfg, train, table, &mut rng)?;
        let mut sums = [0.0; 4];
        let mut weight_sums = vec![0.0; m];
        for batch in samples.chunks(cfg.finetune.batch_size) {
            let (model_ref, ens) = (&model, &ensemble);
            let res = batch_step(cfg.execution, cfg.microbatch, batch, |chunk, share| {
                let refs: Vec<&RecSample> = chunk.iter().collect();
                let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
                let (perm, segs, ids) = news_by_sample(&refs);
                let mut g = Graph::new();
                let mut t_logits = Vec::with_capacity(m);
                let mut t_reprs = Vec::with_capacity(m);
                let mut raw_logits = Vec::with_capacity(m);
                for c in &caches {
                    let (news, users, logits) = c.batch(&refs, &ids)?;
                    raw_logits.push(logits.clone());
                    t_logits.push(g.constant(logits));
                    t_reprs.push(TeacherReprs {
                        news: g.constant(news),
                        users: g.constant(users),
                    });
                }
                let losses = g.constant(per_teacher_losses(&raw_logits, &labels)?);
                let v = model_ref.bind(&mut g, Some((0, 1)), 0);
                let (proj, omega) = ens.bind(&mut g, Some(2), Some(3))?;
                let w = teacher_weights_node(&mut g, losses, omega)?;
                let out = model_ref.forward(&mut g, &v, &refs, table)?;
                let s_news = g.gather(out.reprs, &perm)?;
                let y = g.constant(one_hot(&refs)?);
                let parts = stage2_total_loss(
                    &mut g,
                    &kd,
                    switches,
                    cfg.distill.combine,
                    w,
                    &t_logits,
                    &t_reprs,
                    &proj,
                    out.logits,
                    s_news,
                    out.users,
                    &segs,
                    y,
                )?;
                let loss = g.scale(parts.total, share)?;
                let stats = vec![
                    g.scalar(loss),
                    g.scalar(parts.distill) * share,
                    g.scalar(parts.emb) * share,
                    g.scalar(parts.target) * share,
                ];
                let weights = g.value(w).to_vec();
                Ok((g.backward(loss)?, stats, weights))
            })
            .and_then(|r| check_finite(step, "stage2", &r.stats).map(|_| r))
            .map_err(|e| {
                on_failure(e, step, "stage2", log, &[("news", &model.news.params), ("user", &model.user.params)])
            })?;
            apply(
                &mut [
                    (&mut model.news.params, &mut opt_news, 0),
                    (&mut model.user.params, &mut opt_user, 1),
                    (&mut ensemble.projections, &mut opt_proj, 2),
                    (&mut ensemble.rho, &mut opt_rho, 3),
                ],
                &res.grads,
            )?;
            let omega = ensemble.omega();
            if !(omega > 0.0) {
                return Err(Error::Diverged {
                    step,
                    what: format!("stage2: omega left the positive reals ({omega})"),
                });
            }
            min_omega = min_omega.min(omega);
            let mut batch_w = vec![0.0; m];
            for row in res.extra.chunks(m) {
                max_err = max_err.max((row.iter().sum::<f64>() - 1.0).abs());
                for (a, b) in batch_w.iter_mut().zip(row) {
                    *a += b / batch.len() as f64;
                }
            }
            for (a, b) in weight_sums.iter_mut().zip(&batch_w) {
                *a += b * batch.len() as f64;
            }
            let s = &res.stats;
            log.write(json!({"phase": "stage2", "epoch": epoch, "step": step, "loss": s[0],
                "distill": s[1], "emb": s[2], "target": s[3], "omega": omega, "weights": batch_w}))?;
            for (acc, v) in sums.iter_mut().zip(s) {
                *acc += v * batch.len() as f64;
            }
            step += 1;
        }
        let n = samples.len() as f64;
        let val_auc = validate_epoch(cfg, &model, val, table)?;
        let e = RecEpoch {
            epoch,
            loss: sums[0] / n,
            distill: sums[1] / n,
            emb: sums[2] / n,
            target: sums[3] / n,
            val_auc,
            omega: Some(ensemble.omega()),
            mean_weights: weight_sums.iter().map(|w| w / n).collect(),
        };
        log.write(json!({"phase": "stage2", "epoch_end": epoch, "loss": e.loss, "distill": e.distill,
            "emb": e.emb, "target": e.target, "val_auc": val_auc, "omega": e.omega,
            "mean_weights": e.mean_weights}))?;
        keep_best(&mut best, val_auc, epoch, &model);
        epochs.push(e);
    }
    log.flush()?;
    let (_, best_epoch, best_model) = best.unwrap_or((f64::NEG_INFINITY, 0, model));
    Ok(RecOutcome {
        model: best_model,
        epochs,
        best_epoch,
        max_weight_sum_error: max_err,
        min_omega: min_omega.is_finite().then_some(min_omega),
    })
}

/// Test-set report of a trained model.
pub fn evaluate_test(cfg: &PipelineConfig, model: &RecModel, data: &Dataset) -> Result<EvalReport> {
    evaluate(model, &data.test, &data.news, cfg.finetune.max_history, cfg.execution)
}
