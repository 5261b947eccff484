//! Synthetic topic-structured news corpus and click logs.
//!
//! Every article belongs to one topic. Titles draw mostly from their topic's
//! vocabulary, and bodies repeat the title words plus more topic words, so a
//! body identifies its own title. Users prefer a few topics and click
//! preferred-topic candidates far more often, so clicks are predictable from
//! title content. Test impressions only show articles that never appear as
//! training candidates, so word knowledge picked up from bodies pays off.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mind::{format_mind_behaviors, format_mind_news, Impression, NewsArticle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub articles: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub general_words: usize,
    /// Zipf exponent of word frequencies inside a topic.
    pub zipf_exponent: f64,
    pub title_len: usize,
    pub body_len: usize,
    pub title_topic_prob: f64,
    pub body_topic_prob: f64,
    pub title_in_body: bool,
    /// Fraction of articles reserved for test-impression candidates.
    pub test_news_fraction: f64,
    pub users: usize,
    pub prefs_per_user: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub train_impressions_per_user: usize,
    pub test_impressions_per_user: usize,
    pub candidates_per_impression: usize,
    /// Candidates per impression drawn from the user's preferred topics.
    pub preferred_candidates: usize,
    pub click_pref: f64,
    pub click_other: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            articles: 2400,
            topics: 20,
            words_per_topic: 150,
            general_words: 300,
            zipf_exponent: 0.8,
            title_len: 6,
            body_len: 40,
            title_topic_prob: 0.8,
            body_topic_prob: 0.6,
            title_in_body: true,
            test_news_fraction: 0.3,
            users: 400,
            prefs_per_user: 2,
            history_min: 3,
            history_max: 10,
            train_impressions_per_user: 2,
            test_impressions_per_user: 2,
            candidates_per_impression: 10,
            preferred_candidates: 3,
            click_pref: 0.7,
            click_other: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthArticle {
    pub id: String,
    pub topic: usize,
    pub title: String,
    pub body: String,
    pub test_pool: bool,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub articles: Vec<SynthArticle>,
    pub train: Vec<Impression>,
    pub test: Vec<Impression>,
}

fn topic_word(t: usize, j: usize) -> String {
    format!("t{t}w{j}")
}

fn general_word(j: usize) -> String {
    format!("g{j}")
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.topics == 0 || self.words_per_topic == 0 || self.general_words == 0 {
            return bad("topics, words_per_topic and general_words must be positive");
        }
        if self.articles < self.topics * 2 {
            return bad("need at least two articles per topic");
        }
        if self.title_len == 0 || self.body_len < self.title_len {
            return bad("body_len must be >= title_len > 0");
        }
        if self.history_min > self.history_max || self.candidates_per_impression == 0 {
            return bad("invalid history/candidate counts");
        }
        if self.prefs_per_user == 0 || self.prefs_per_user > self.topics {
            return bad("prefs_per_user must be in 1..=topics");
        }
        if !(0.0..1.0).contains(&self.test_news_fraction) {
            return bad("test_news_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// Draws articles and click logs from `spec`. Deterministic in `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zipf = WeightedIndex::new(
        (0..spec.words_per_topic).map(|j| 1.0 / ((j + 1) as f64).powf(spec.zipf_exponent)),
    )
    .map_err(|e| Error::Config(format!("synth: {e}")))?;

    let mut articles = Vec::with_capacity(spec.articles);
    for i in 0..spec.articles {
        let topic = i % spec.topics;
        let draw = |rng: &mut ChaCha8Rng, p_topic: f64| {
            if rng.random::<f64>() < p_topic {
                topic_word(topic, zipf.sample(rng))
            } else {
                general_word(rng.random_range(0..spec.general_words))
            }
        };
        let title: Vec<String> = (0..spec.title_len).map(|_| draw(&mut rng, spec.title_topic_prob)).collect();
        let mut body: Vec<String> = if spec.title_in_body { title.clone() } else { Vec::new() };
        while body.len() < spec.body_len {
            body.push(draw(&mut rng, spec.body_topic_prob));
        }
        body.shuffle(&mut rng);
        articles.push(SynthArticle {
            id: format!("N{i}"),
            topic,
            title: title.join(" "),
            body: body.join(" "),
            test_pool: rng.random::<f64>() < spec.test_news_fraction,
        });
    }

    // Pools indexed [topic] -> article indices.
    let mut train_pool = vec![Vec::new(); spec.topics];
    let mut test_pool = vec![Vec::new(); spec.topics];
    for (i, a) in articles.iter().enumerate() {
        if a.test_pool {
            test_pool[a.topic].push(i);
        } else {
            train_pool[a.topic].push(i);
        }
    }
    let train_all: Vec<usize> = (0..articles.len()).filter(|&i| !articles[i].test_pool).collect();
    let test_all: Vec<usize> = (0..articles.len()).filter(|&i| articles[i].test_pool).collect();
    if train_all.is_empty() || (spec.test_impressions_per_user > 0 && test_all.is_empty()) {
        return Err(Error::Config("synth: empty train or test news pool".into()));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut imp_id = 0usize;
    for u in 0..spec.users {
        let mut topics: Vec<usize> = (0..spec.topics).collect();
        topics.shuffle(&mut rng);
        let prefs = &topics[..spec.prefs_per_user];
        let pick = |rng: &mut ChaCha8Rng, pool: &[Vec<usize>], all: &[usize], preferred: bool| {
            if preferred {
                let t = prefs[rng.random_range(0..prefs.len())];
                if !pool[t].is_empty() {
                    return pool[t][rng.random_range(0..pool[t].len())];
                }
            }
            all[rng.random_range(0..all.len())]
        };

        let h_len = rng.random_range(spec.history_min..=spec.history_max);
        let mut history: Vec<usize> = Vec::new();
        let mut guard = 0;
        while history.len() < h_len && guard < 100 * (h_len + 1) {
            guard += 1;
            let pref = rng.random::<f64>() < 0.9;
            let c = pick(&mut rng, &train_pool, &train_all, pref);
            if !history.contains(&c) {
                history.push(c);
            }
        }
        let history_ids: Vec<String> = history.iter().map(|&i| articles[i].id.clone()).collect();

        let n_imps = spec.train_impressions_per_user + spec.test_impressions_per_user;
        for k in 0..n_imps {
            let is_test = k >= spec.train_impressions_per_user;
            let (pool, all) = if is_test {
                (&test_pool, &test_all)
            } else {
                (&train_pool, &train_all)
            };
            let n_cand = spec.candidates_per_impression.min(all.len());
            let mut cands: Vec<usize> = Vec::new();
            let mut guard = 0;
            while cands.len() < n_cand && guard < 100 * (n_cand + 1) {
                guard += 1;
                let pref = cands.len() < spec.preferred_candidates;
                let c = pick(&mut rng, pool, all, pref);
                if !cands.contains(&c) && !history.contains(&c) {
                    cands.push(c);
                }
            }
            cands.shuffle(&mut rng);
            let candidates = cands
                .iter()
                .map(|&c| {
                    let p = if prefs.contains(&articles[c].topic) {
                        spec.click_pref
                    } else {
                        spec.click_other
                    };
                    (articles[c].id.clone(), u8::from(rng.random::<f64>() < p))
                })
                .collect();
            let imp = Impression {
                id: imp_id.to_string(),
                user: format!("U{u}"),
                time: format!("t{imp_id}"),
                history: history_ids.clone(),
                candidates,
            };
            imp_id += 1;
            if is_test {
                test.push(imp);
            } else {
                train.push(imp);
            }
        }
    }
    Ok(SynthData {
        spec: spec.clone(),
        articles,
        train,
        test,
    })
}

impl SynthData {
    /// Articles in MIND news form; the body doubles as the abstract column.
    pub fn news(&self, tok: &super::HashTokenizer, title_len: usize, body_len: usize) -> Vec<NewsArticle> {
        self.articles
            .iter()
            .map(|a| NewsArticle {
                id: a.id.clone(),
                category: format!("topic{}", a.topic),
                subcategory: if a.test_pool { "test".into() } else { "train".into() },
                title: a.title.clone(),
                abstract_text: a.body.clone(),
                url: String::new(),
                title_entities: "[]".into(),
                abstract_entities: "[]".into(),
                title_tokens: tok.encode(&a.title, title_len),
                body_tokens: tok.encode(&a.body, body_len),
            })
            .collect()
    }

    pub fn corpus_text(&self) -> String {
        self.articles
            .iter()
            .map(|a| format!("{}\t{}\n", a.title, a.body))
            .collect()
    }

    /// Writes `corpus.tsv`, `news.tsv`, `train_behaviors.tsv`,
    /// `test_behaviors.tsv` and `synth.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tok = super::HashTokenizer::new(2);
        fs::write(dir.join("corpus.tsv"), self.corpus_text())?;
        fs::write(dir.join("news.tsv"), format_mind_news(&self.news(&tok, 0, 0)))?;
        fs::write(dir.join("train_behaviors.tsv"), format_mind_behaviors(&self.train))?;
        fs::write(dir.join("test_behaviors.tsv"), format_mind_behaviors(&self.test))?;
        let spec = toml::to_string(&self.spec).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("synth.toml"), spec)?;
        Ok(())
    }
}
