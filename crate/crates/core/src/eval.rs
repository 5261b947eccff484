//! Impression-grouped ranking metrics, evaluation and the encoding
//! throughput benchmark.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{recent_history, Impression, NewsTable};
use crate::encoders::{score_click, EncoderConfig, NewsEncoder, RecModel};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Titles per encoding chunk. Fixed so that results do not depend on the
/// execution mode.
pub const ENCODE_CHUNK: usize = 64;

fn counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney: sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based ranks by descending score; ties keep input order.
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut r = vec![0; scores.len()];
    for (pos, &i) in idx.iter().enumerate() {
        r[i] = pos + 1;
    }
    r
}

/// Mean reciprocal rank over the positives.
pub fn mrr(scores: &[f64], labels: &[u8]) -> f64 {
    let r = ranks(scores);
    let (pos, _) = counts(labels);
    if pos == 0 {
        return 0.0;
    }
    let s: f64 = r
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&k, _)| 1.0 / k as f64)
        .sum();
    s / pos as f64
}

/// Binary-gain nDCG over the top `k` positions.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let r = ranks(scores);
    let (pos, _) = counts(labels);
    if pos == 0 || k == 0 {
        return 0.0;
    }
    let dcg: f64 = r
        .iter()
        .zip(labels)
        .filter(|(&rank, &l)| l == 1 && rank <= k)
        .map(|(&rank, _)| 1.0 / ((rank + 1) as f64).log2())
        .sum();
    let idcg: f64 = (1..=pos.min(k)).map(|rank| 1.0 / ((rank + 1) as f64).log2()).sum();
    dcg / idcg
}

/// The four ranking metrics of one impression or their average.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl Metrics {
    /// Metrics of one impression; `None` if it lacks a positive or a
    /// negative.
    pub fn of(scores: &[f64], labels: &[u8]) -> Option<Metrics> {
        Some(Metrics {
            auc: auc(scores, labels)?,
            mrr: mrr(scores, labels),
            ndcg5: ndcg_at_k(scores, labels, 5),
            ndcg10: ndcg_at_k(scores, labels, 10),
        })
    }

    pub fn fields(&self) -> [f64; 4] {
        [self.auc, self.mrr, self.ndcg5, self.ndcg10]
    }

    fn from_fields(f: [f64; 4]) -> Metrics {
        Metrics {
            auc: f[0],
            mrr: f[1],
            ndcg5: f[2],
            ndcg10: f[3],
        }
    }
}

/// Uniform average over scored impressions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub impressions: usize,
    /// Impressions without a positive or without a negative.
    pub skipped: usize,
}

impl EvalReport {
    /// Averages per-impression metrics. Values are summed in sorted order
    /// so the result does not depend on impression order.
    pub fn from_impressions(per: &[Option<Metrics>]) -> EvalReport {
        let scored: Vec<Metrics> = per.iter().flatten().copied().collect();
        let n = scored.len();
        let mut out = [0.0; 4];
        if n > 0 {
            for (f, slot) in out.iter_mut().enumerate() {
                let mut v: Vec<f64> = scored.iter().map(|m| m.fields()[f]).collect();
                v.sort_by(f64::total_cmp);
                *slot = v.iter().sum::<f64>() / n as f64;
            }
        }
        EvalReport {
            metrics: Metrics::from_fields(out),
            impressions: n,
            skipped: per.len() - n,
        }
    }
}

/// Mean and sample standard deviation of several seeds' reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub per_seed: Vec<EvalReport>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl SeedSummary {
    pub fn new(per_seed: Vec<EvalReport>) -> SeedSummary {
        let n = per_seed.len();
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        if n > 0 {
            for f in 0..4 {
                let v: Vec<f64> = per_seed.iter().map(|r| r.metrics.fields()[f]).collect();
                let m = v.iter().sum::<f64>() / n as f64;
                mean[f] = m;
                if n > 1 {
                    std[f] = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                }
            }
        }
        SeedSummary {
            per_seed,
            mean: Metrics::from_fields(mean),
            std: Metrics::from_fields(std),
        }
    }
}

/// Representations of `seqs`, encoded in fixed-size chunks.
pub fn encode_sequences<S: AsRef<[usize]> + Sync>(enc: &NewsEncoder, seqs: &[S], exec: Execution) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[S]> = seqs.chunks(ENCODE_CHUNK).collect();
    let mut out = Vec::with_capacity(seqs.len());
    for p in par::map(exec, &chunks, |c| enc.encode(c)) {
        out.extend(p?);
    }
    Ok(out)
}

/// Representation of every title in `table`.
pub fn encode_table(enc: &NewsEncoder, table: &NewsTable, exec: Execution) -> Result<Vec<Vec<f64>>> {
    encode_sequences(enc, table.titles(), exec)
}

/// Candidate scores of each impression, with news representations taken
/// from `cache` (one row per table entry).
pub fn score_impressions(
    model: &RecModel,
    cache: &[Vec<f64>],
    imps: &[Impression],
    table: &NewsTable,
    max_history: usize,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    par::map(exec, imps, |imp| {
        let hist = recent_history(imp, table, max_history)?;
        let rows: Vec<Vec<f64>> = hist.iter().map(|&i| cache[i].clone()).collect();
        let (u, _) = model.user.encode_user(&rows, &vec![true; rows.len()])?;
        imp.candidates
            .iter()
            .map(|(id, _)| score_click(&cache[table.lookup(id)?], &u))
            .collect()
    })
    .into_iter()
    .collect()
}

/// Scores every impression and averages its metrics.
pub fn evaluate(
    model: &RecModel,
    imps: &[Impression],
    table: &NewsTable,
    max_history: usize,
    exec: Execution,
) -> Result<EvalReport> {
    let cache = encode_table(&model.news, table, exec)?;
    let scores = score_impressions(model, &cache, imps, table, max_history, exec)?;
    Ok(report_from_scores(imps, &scores))
}

pub fn report_from_scores(imps: &[Impression], scores: &[Vec<f64>]) -> EvalReport {
    let per: Vec<Option<Metrics>> = imps
        .iter()
        .zip(scores)
        .map(|(imp, s)| {
            let labels: Vec<u8> = imp.candidates.iter().map(|c| c.1).collect();
            Metrics::of(s, &labels)
        })
        .collect();
    EvalReport::from_impressions(&per)
}

/// Scalar counts of learnable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub embeddings: usize,
    /// Transformer blocks only.
    pub layers: usize,
    pub head: usize,
    pub user: usize,
}

/// Exact parameter count of a news encoder plus user encoder.
pub fn count_params(cfg: &EncoderConfig) -> ParamCount {
    let user = cfg.repr_dim * cfg.query_dim + 2 * cfg.query_dim;
    ParamCount {
        total: cfg.total_params() + user,
        embeddings: cfg.embedding_params(),
        layers: cfg.layer_params(),
        head: cfg.head_params(),
        user,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub windows: usize,
    pub window: Duration,
    pub exec: Execution,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 2,
            windows: 5,
            window: Duration::from_millis(500),
            exec: Execution::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_layers: usize,
    /// Median news per second over the timed windows.
    pub news_per_sec: f64,
    pub params: ParamCount,
}

fn encode_all(enc: &NewsEncoder, news: &[Vec<usize>], exec: Execution) -> Result<usize> {
    encode_sequences(enc, news, exec)?;
    Ok(news.len())
}

/// News encoded per second: median over `opts.windows` windows, each
/// re-encoding `news` until `opts.window` has elapsed.
pub fn bench_throughput(enc: &NewsEncoder, news: &[Vec<usize>], opts: &BenchOptions) -> Result<BenchReport> {
    if opts.window.is_zero() {
        return Err(Error::invalid("benchmark window must be longer than zero"));
    }
    if opts.windows < 5 {
        return Err(Error::invalid("benchmark needs at least 5 windows"));
    }
    if news.is_empty() {
        return Err(Error::invalid("benchmark needs news to encode"));
    }
    for _ in 0..opts.warmup {
        encode_all(enc, news, opts.exec)?;
    }
    let mut rates = Vec::with_capacity(opts.windows);
    for _ in 0..opts.windows {
        let start = Instant::now();
        let mut done = 0;
        while start.elapsed() < opts.window {
            done += encode_all(enc, news, opts.exec)?;
        }
        rates.push(done as f64 / start.elapsed().as_secs_f64());
    }
    rates.sort_by(f64::total_cmp);
    Ok(BenchReport {
        n_layers: enc.cfg.n_layers,
        news_per_sec: rates[rates.len() / 2],
        params: count_params(&enc.cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auc(&[0.3; 4], &[1, 0, 0, 1]), Some(0.5));
        assert_eq!(auc(&[0.4, 0.6, 0.5], &[1, 0, 1]), Some(0.0));
        assert_eq!(auc(&[0.4, 0.6], &[1, 1]), None);
    }

    #[test]
    fn rank_metric_examples() {
        assert_eq!(mrr(&[0.9, 0.1, 0.2], &[1, 0, 0]), 1.0);
        assert_eq!(mrr(&[0.5, 0.9, 0.2], &[1, 0, 0]), 0.5);
        assert!((mrr(&[0.9, 0.5, 0.7], &[1, 1, 0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[0.9, 0.1], &[1, 0], 5), 1.0);
        assert!((ndcg_at_k(&[0.5, 0.9, 0.1], &[1, 0, 0], 5) - 1.0 / 3f64.log2()).abs() < 1e-15);
        let s: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        let mut l = vec![0; 8];
        l[6] = 1;
        assert_eq!(ndcg_at_k(&s, &l, 5), 0.0);
    }

    #[test]
    fn report_is_order_independent_and_counts_skips() {
        let a = Metrics::of(&[0.9, 0.1, 0.3], &[1, 0, 0]);
        let b = Metrics::of(&[0.2, 0.1, 0.3], &[1, 0, 0]);
        let r1 = EvalReport::from_impressions(&[a, None, b]);
        let r2 = EvalReport::from_impressions(&[b, a, None]);
        assert_eq!(r1, r2);
        assert_eq!(r1.skipped, 1);
        assert_eq!(r1.impressions, 2);
    }

    #[test]
    fn seed_summary_std() {
        let mk = |a| EvalReport {
            metrics: Metrics { auc: a, mrr: a, ndcg5: a, ndcg10: a },
            impressions: 1,
            skipped: 0,
        };
        let s = SeedSummary::new(vec![mk(0.5), mk(0.7)]);
        assert!((s.mean.auc - 0.6).abs() < 1e-15);
        assert!((s.std.auc - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(SeedSummary::new(vec![mk(0.5)]).std.auc, 0.0);
    }

    #[test]
    fn param_count_examples() {
        let cfg = EncoderConfig {
            vocab_size: 100,
            d_model: 8,
            n_layers: 0,
            max_len: 10,
            ..EncoderConfig::default()
        };
        assert_eq!(count_params(&cfg).embeddings, 100 * 8 + 10 * 8);
        let teacher = EncoderConfig::default();
        let student = EncoderConfig { n_layers: 4, ..teacher };
        assert!(count_params(&student).total < count_params(&teacher).total);
        assert!(count_params(&student).layers as f64 / count_params(&teacher).layers as f64 <= 0.5);
    }
}
