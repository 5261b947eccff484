//! Title–body matching: a body must pick its own title out of `N + 1`
//! candidates.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::CorpusArticle;
use crate::encoders::{row_dot, NewsEncoder, TokenBatch};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Body of article `article`, its own title first, then `negatives`
/// titles of other articles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSample {
    pub article: usize,
    pub negatives: Vec<usize>,
}

impl MatchSample {
    /// Title indices in logit order: positive, then negatives.
    pub fn titles(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.article).chain(self.negatives.iter().copied())
    }
}

/// Draws `n` distinct negatives for each positive in `positives`,
/// uniformly from the other `corpus_len - 1` articles.
pub fn sample_matching_batch<R: Rng>(
    corpus_len: usize,
    positives: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<MatchSample>> {
    if corpus_len < n + 1 {
        return Err(Error::invalid(format!(
            "corpus of {corpus_len} articles cannot supply {n} negatives"
        )));
    }
    positives
        .iter()
        .map(|&article| {
            if article >= corpus_len {
                return Err(Error::invalid(format!("article {article} out of range")));
            }
            let negatives = rand::seq::index::sample(rng, corpus_len - 1, n)
                .into_iter()
                .map(|j| if j >= article { j + 1 } else { j })
                .collect();
            Ok(MatchSample { article, negatives })
        })
        .collect()
}

/// All articles as positives in a fresh random order, each with freshly
/// drawn negatives.
pub fn epoch_samples<R: Rng>(corpus_len: usize, n: usize, rng: &mut R) -> Result<Vec<MatchSample>> {
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(rng);
    sample_matching_batch(corpus_len, &order, n, rng)
}

/// Nodes produced by [`matching_forward`].
#[derive(Debug, Clone, Copy)]
pub struct MatchOutputs {
    /// `[B, N+1]` scores, positive in column 0.
    pub logits: Var,
    /// `[B·(N+1), D]` title representations, sample-major.
    pub titles: Var,
    /// `[B, D]` body representations.
    pub bodies: Var,
}

/// Scores every sample's body against its candidate titles by dot product.
/// Bodies and titles share the one encoder and are encoded in one pass.
pub fn matching_forward(
    enc: &NewsEncoder,
    g: &mut Graph<'_>,
    p: &[Var],
    samples: &[&MatchSample],
    corpus: &[CorpusArticle],
) -> Result<MatchOutputs> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("empty matching batch"));
    };
    let width = first.negatives.len() + 1;
    if samples.iter().any(|s| s.negatives.len() + 1 != width) {
        return Err(Error::invalid("samples disagree on negative count"));
    }
    let article = |i: usize| {
        corpus
            .get(i)
            .ok_or_else(|| Error::invalid(format!("article {i} out of range")))
    };
    let mut seqs: Vec<&[usize]> = Vec::with_capacity(samples.len() * (width + 1));
    for s in samples {
        seqs.push(&article(s.article)?.body);
    }
    for s in samples {
        for t in s.titles() {
            seqs.push(&article(t)?.title);
        }
    }
    let batch = TokenBatch::new(&seqs, enc.cfg.max_len);
    let reprs = enc.forward(g, p, &batch)?;
    let b = samples.len();
    let bodies = g.slice_rows(reprs, 0, b)?;
    let titles = g.slice_rows(reprs, b, b * width)?;
    let owner: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, width)).collect();
    let expanded = g.gather(bodies, &owner)?;
    let scores = row_dot(g, titles, expanded)?;
    let logits = g.reshape(scores, &[b, width])?;
    Ok(MatchOutputs {
        logits,
        titles,
        bodies,
    })
}

/// One-hot targets on column 0 for a `[rows, width]` logit block.
pub fn positive_first_targets(rows: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        t.data_mut()[r * width] = 1.0;
    }
    t
}

/// Mean over rows of `−log softmax(logits)[0]`.
pub fn matching_loss(g: &mut Graph<'_>, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("matching logits must be [batch, N+1]"));
    }
    let target = g.constant(positive_first_targets(shape[0], shape[1]));
    g.cross_entropy(target, logits)
}

/// Fraction of rows whose positive (column 0) strictly beats every negative.
pub fn matching_accuracy(logits: &[f64], width: usize) -> f64 {
    let rows = logits.len() / width;
    if rows == 0 {
        return 0.0;
    }
    let hits = logits
        .chunks(width)
        .filter(|r| r[1..].iter().all(|&x| r[0] > x))
        .count();
    hits as f64 / rows as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine of (title, own body) minus mean cosine of (title, another
/// article's body), the other body chosen as the next article cyclically.
pub fn title_body_cosine_gap(enc: &NewsEncoder, corpus: &[CorpusArticle]) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::invalid("cosine gap needs at least two articles"));
    }
    let titles = enc.encode(&corpus.iter().map(|a| a.title.as_slice()).collect::<Vec<_>>())?;
    let bodies = enc.encode(&corpus.iter().map(|a| a.body.as_slice()).collect::<Vec<_>>())?;
    let n = corpus.len();
    let own: f64 = (0..n).map(|i| cosine(&titles[i], &bodies[i])).sum::<f64>() / n as f64;
    let other: f64 = (0..n).map(|i| cosine(&titles[i], &bodies[(i + 1) % n])).sum::<f64>() / n as f64;
    Ok(own - other)
}
