//! News/behavior ingestion, synthetic data, and recommendation samples.

mod mind;
mod synth;
mod tokenizer;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

pub use mind::{
    format_mind_behaviors, format_mind_news, parse_corpus, parse_corpus_str, parse_mind_behaviors,
    parse_mind_behaviors_str, parse_mind_news, parse_mind_news_str, CorpusArticle, Impression,
    NewsArticle,
};
pub use synth::{generate_synthetic_corpus, SynthData, SynthSpec};
pub use tokenizer::{HashTokenizer, PAD_ID};

use crate::error::{Error, Result};

/// Tokenized titles indexed by position, with id lookup.
#[derive(Debug, Clone, Default)]
pub struct NewsTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    titles: Vec<Vec<usize>>,
}

impl NewsTable {
    pub fn new(news: &[NewsArticle]) -> Self {
        let mut t = NewsTable::default();
        for a in news {
            t.index.insert(a.id.clone(), t.ids.len());
            t.ids.push(a.id.clone());
            t.titles.push(a.title_tokens.clone());
        }
        t
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNews(id.to_string()))
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn title(&self, i: usize) -> &[usize] {
        &self.titles[i]
    }

    pub fn titles(&self) -> &[Vec<usize>] {
        &self.titles
    }
}

/// One recommendation training instance: the user's most recent clicks and
/// `K + 1` candidates, exactly one of which (at `label`) was clicked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecSample {
    pub impression: usize,
    pub history: Vec<usize>,
    pub candidates: Vec<usize>,
    pub label: usize,
}

/// Last `max_len` history entries of an impression as table indices.
pub fn recent_history(imp: &Impression, table: &NewsTable, max_len: usize) -> Result<Vec<usize>> {
    let skip = imp.history.len().saturating_sub(max_len);
    imp.history[skip..].iter().map(|id| table.lookup(id)).collect()
}

/// One sample per clicked candidate. Negatives are `k` non-clicked
/// candidates of the same impression, drawn without replacement when
/// enough exist and with replacement otherwise. Impressions without a
/// positive or without any negative yield nothing.
pub fn build_rec_samples<R: Rng>(
    imps: &[Impression],
    table: &NewsTable,
    k: usize,
    max_history: usize,
    rng: &mut R,
) -> Result<Vec<RecSample>> {
    if k == 0 {
        return Err(Error::invalid("negative sampling ratio must be at least 1"));
    }
    let mut out = Vec::new();
    for (ii, imp) in imps.iter().enumerate() {
        let history = recent_history(imp, table, max_history)?;
        let negs: Vec<usize> = imp.negatives().map(|id| table.lookup(id)).collect::<Result<_>>()?;
        for pos in imp.positives() {
            let pos = table.lookup(pos)?;
            if negs.is_empty() {
                continue;
            }
            let mut cands: Vec<usize> = if negs.len() >= k {
                rand::seq::index::sample(rng, negs.len(), k)
                    .into_iter()
                    .map(|i| negs[i])
                    .collect()
            } else {
                (0..k).map(|_| negs[rng.random_range(0..negs.len())]).collect()
            };
            cands.shuffle(rng);
            let label = rng.random_range(0..=k);
            cands.insert(label, pos);
            out.push(RecSample {
                impression: ii,
                history: history.clone(),
                candidates: cands,
                label,
            });
        }
    }
    Ok(out)
}

/// Seeded split into `(train, validation)` with `fraction` of impressions
/// held out.
pub fn split_validation<R: Rng>(
    imps: &[Impression],
    fraction: f64,
    rng: &mut R,
) -> (Vec<Impression>, Vec<Impression>) {
    let mut idx: Vec<usize> = (0..imps.len()).collect();
    idx.shuffle(rng);
    let n_val = ((imps.len() as f64) * fraction).round() as usize;
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| imps[i].clone()).collect(),
        val.into_iter().map(|i| imps[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> NewsTable {
        let tok = HashTokenizer::new(100);
        let text: String = (0..n).map(|i| format!("N{i}\tc\ts\tword{i}\n")).collect();
        NewsTable::new(&parse_mind_news_str(&text, std::path::Path::new("t"), &tok, 30, 30).unwrap())
    }

    fn imp(history: &[&str], cands: &[(&str, u8)]) -> Impression {
        Impression {
            id: "1".into(),
            user: "U".into(),
            time: String::new(),
            history: history.iter().map(|s| s.to_string()).collect(),
            candidates: cands.iter().map(|(a, b)| (a.to_string(), *b)).collect(),
        }
    }

    #[test]
    fn exact_negatives_in_random_order() {
        let t = table(10);
        let i = imp(&["N0"], &[("N1", 1), ("N2", 0), ("N3", 0), ("N4", 0), ("N5", 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_rec_samples(&[i], &t, 4, 50, &mut rng).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].candidates[s[0].label], 1);
        let mut negs: Vec<usize> = s[0].candidates.iter().copied().filter(|&c| c != 1).collect();
        negs.sort();
        assert_eq!(negs, vec![2, 3, 4, 5]);
    }

    #[test]
    fn two_positives_share_history_and_few_negatives_repeat() {
        let t = table(10);
        let i = imp(&["N0", "N9"], &[("N1", 1), ("N2", 1), ("N3", 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_rec_samples(&[i], &t, 4, 50, &mut rng).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].history, s[1].history);
        assert_eq!(s[0].history, vec![0, 9]);
        for x in &s {
            assert_eq!(x.candidates.len(), 5);
            assert_eq!(x.candidates.iter().filter(|&&c| c == 3).count(), 4);
        }
    }

    #[test]
    fn history_truncated_to_most_recent_and_no_positive_skipped() {
        let t = table(10);
        let i = imp(&["N0", "N1", "N2"], &[("N3", 1), ("N4", 0)]);
        let none = imp(&["N0"], &[("N4", 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_rec_samples(&[none, i], &t, 1, 2, &mut rng).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].history, vec![1, 2]);
        assert_eq!(s[0].impression, 1);
    }

    #[test]
    fn fixed_seed_reproduces_stream() {
        let t = table(10);
        let imps: Vec<Impression> = (0..5)
            .map(|_| imp(&["N0"], &[("N1", 1), ("N2", 0), ("N3", 0), ("N4", 0), ("N5", 0), ("N6", 0)]))
            .collect();
        let a = build_rec_samples(&imps, &t, 4, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = build_rec_samples(&imps, &t, 4, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_news_is_an_error() {
        let t = table(2);
        let i = imp(&["N7"], &[("N1", 1), ("N0", 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_rec_samples(&[i], &t, 1, 50, &mut rng),
            Err(Error::UnknownNews(_))
        ));
    }
}
