use crate::data::{
    generate_synthetic_corpus, parse_corpus, parse_corpus_str, parse_mind_behaviors, parse_mind_news, CorpusArticle,
    HashTokenizer, Impression, NewsTable, SynthData,
};
use crate::error::{Error, Result};

use super::config::{ModelConfig, PipelineConfig};

/// Everything a pipeline run reads: the post-training corpus, the news
/// table for recommendation, and train/test impressions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Vec<CorpusArticle>,
    pub news: NewsTable,
    pub train: Vec<Impression>,
    pub test: Vec<Impression>,
}

impl Dataset {
    /// Loads the files named in `cfg.data`, or generates the synthetic
    /// dataset described by `cfg.synth` when no news file is given.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let Some(news_path) = &cfg.data.news else {
            return Ok(Dataset::from_synth(&generate_synthetic_corpus(&cfg.synth)?, &cfg.model));
        };
        let m = &cfg.model;
        let tok = HashTokenizer::new(m.vocab_size);
        let articles = parse_mind_news(news_path, &tok, m.title_len, m.body_len)?;
        let train_path = cfg
            .data
            .train_behaviors
            .as_ref()
            .ok_or_else(|| Error::Config("data.train_behaviors is required with data.news".into()))?;
        let train = parse_mind_behaviors(train_path)?;
        let test = match &cfg.data.test_behaviors {
            Some(p) => parse_mind_behaviors(p)?,
            None => Vec::new(),
        };
        let corpus = match &cfg.data.corpus {
            Some(p) => parse_corpus(p, &tok, m.posttrain_title_len, m.body_len)?,
            None => {
                // Abstracts stand in for bodies.
                let text: String = articles
                    .iter()
                    .filter(|a| !a.title.trim().is_empty() && !a.abstract_text.trim().is_empty())
                    .map(|a| format!("{}\t{}\n", a.title.replace('\t', " "), a.abstract_text.replace('\t', " ")))
                    .collect();
                parse_corpus_str(&text, news_path, &tok, m.posttrain_title_len, m.body_len)?
            }
        };
        Ok(Dataset {
            corpus,
            news: NewsTable::new(&articles),
            train,
            test,
        })
    }

    pub fn from_synth(data: &SynthData, m: &ModelConfig) -> Self {
        let tok = HashTokenizer::new(m.vocab_size);
        let corpus = parse_corpus_str(
            &data.corpus_text(),
            std::path::Path::new("<synthetic>"),
            &tok,
            m.posttrain_title_len,
            m.body_len,
        )
        .expect("synthetic corpus is well formed");
        Dataset {
            corpus,
            news: NewsTable::new(&data.news(&tok, m.title_len, m.body_len)),
            train: data.train.clone(),
            test: data.test.clone(),
        }
    }
}
