//! News and user encoders and the click model built from them.

mod news;
mod user;

use rand::Rng;

pub use news::{EncoderConfig, NewsEncoder, TokenBatch};
pub use user::UserEncoder;
pub(crate) use news::{normal_tensor, INIT_STD};

use crate::data::{NewsTable, RecSample};
use crate::error::{Error, Result};
use crate::tensor::{pack_segments, Graph, Segment, Tensor, Var};

/// Click score of candidate representation `h` for user vector `u`.
pub fn score_click(h: &[f64], u: &[f64]) -> Result<f64> {
    if h.len() != u.len() {
        return Err(Error::ShapeMismatch {
            op: "score_click",
            lhs: vec![h.len()],
            rhs: vec![u.len()],
        });
    }
    Ok(h.iter().zip(u).map(|(a, b)| a * b).sum())
}

/// Per-row dot products of two `[n, d]` nodes, as an `[n, 1]` node.
pub fn row_dot(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let d = *g.shape(a).last().unwrap_or(&0);
    let prod = g.mul(a, b)?;
    let ones = g.constant(Tensor::full(&[d, 1], 1.0));
    g.matmul(prod, ones)
}

/// Graph nodes produced by [`RecModel::forward`] for a batch of samples.
#[derive(Debug, Clone, Copy)]
pub struct RecOutputs {
    /// `[B, K+1]` click logits.
    pub logits: Var,
    /// `[B·(K+1), D]` candidate representations, sample-major.
    pub candidates: Var,
    /// `[B, D]` user vectors.
    pub users: Var,
    /// `[n_hist + B·(K+1), D]`: all history rows, then all candidate rows.
    pub reprs: Var,
}

/// Row order grouping each sample's history and candidates together, as a
/// permutation of [`RecOutputs::reprs`] rows, plus the matching segments
/// and the table index of every permuted row.
pub fn news_by_sample(samples: &[&RecSample]) -> (Vec<usize>, Vec<Segment>, Vec<usize>) {
    let n_hist: usize = samples.iter().map(|s| s.history.len()).sum();
    let (mut perm, mut ids) = (Vec::new(), Vec::new());
    let (mut h, mut c) = (0, n_hist);
    for s in samples {
        perm.extend(h..h + s.history.len());
        perm.extend(c..c + s.candidates.len());
        ids.extend_from_slice(&s.history);
        ids.extend_from_slice(&s.candidates);
        h += s.history.len();
        c += s.candidates.len();
    }
    let segs = pack_segments(samples.iter().map(|s| s.history.len() + s.candidates.len()));
    (perm, segs, ids)
}

/// News encoder plus user encoder: a complete click-prediction model.
#[derive(Debug, Clone, PartialEq)]
pub struct RecModel {
    pub news: NewsEncoder,
    pub user: UserEncoder,
}

/// Parameter groups of a [`RecModel`] bound into a graph.
#[derive(Debug, Clone)]
pub struct RecVars {
    pub news: Vec<Var>,
    pub user: Vec<Var>,
}

impl RecModel {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        let news = NewsEncoder::new(cfg, rng)?;
        let user = UserEncoder::new(cfg.repr_dim, cfg.query_dim, rng);
        Ok(RecModel { news, user })
    }

    /// Wraps a (post-trained) news encoder with a fresh user encoder.
    pub fn from_news<R: Rng>(news: NewsEncoder, rng: &mut R) -> Self {
        let user = UserEncoder::new(news.cfg.repr_dim, news.cfg.query_dim, rng);
        RecModel { news, user }
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.news.cfg
    }

    pub fn numel(&self) -> usize {
        self.news.params.numel() + self.user.params.numel()
    }

    /// Binds both parameter sets. With `groups = Some((n, u))` the news
    /// and user parameters become gradient leaves in groups `n` and `u`.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, groups: Option<(usize, usize)>, freeze_below: usize) -> RecVars {
        RecVars {
            news: self.news.bind(g, groups.map(|x| x.0), freeze_below),
            user: self.user.bind(g, groups.map(|x| x.1)),
        }
    }

    /// Encodes the histories and candidates of `samples` in one packed pass
    /// and scores every candidate against its user.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        v: &RecVars,
        samples: &[&RecSample],
        table: &NewsTable,
    ) -> Result<RecOutputs> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let width = first.candidates.len();
        if samples.iter().any(|s| s.candidates.len() != width) {
            return Err(Error::invalid("samples disagree on candidate count"));
        }
        let n_hist: usize = samples.iter().map(|s| s.history.len()).sum();
        let mut titles: Vec<&[usize]> = Vec::with_capacity(n_hist + samples.len() * width);
        for s in samples {
            titles.extend(s.history.iter().map(|&i| table.title(i)));
        }
        for s in samples {
            titles.extend(s.candidates.iter().map(|&i| table.title(i)));
        }
        let batch = TokenBatch::new(&titles, self.cfg().max_len);
        let reprs = self.news.forward(g, &v.news, &batch)?;
        let users = if n_hist == 0 {
            g.constant(Tensor::zeros(&[samples.len(), self.cfg().repr_dim]))
        } else {
            let hist = g.slice_rows(reprs, 0, n_hist)?;
            let segs = pack_segments(samples.iter().map(|s| s.history.len()));
            self.user.forward(g, &v.user, hist, &segs)?
        };
        let candidates = g.slice_rows(reprs, n_hist, samples.len() * width)?;
        let owner: Vec<usize> = (0..samples.len())
            .flat_map(|b| std::iter::repeat_n(b, width))
            .collect();
        let expanded = g.gather(users, &owner)?;
        let scores = row_dot(g, candidates, expanded)?;
        let logits = g.reshape(scores, &[samples.len(), width])?;
        Ok(RecOutputs {
            logits,
            candidates,
            users,
            reprs,
        })
    }
}
