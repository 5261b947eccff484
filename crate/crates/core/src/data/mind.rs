//! MIND-format readers and writers, plus the `title<TAB>body` corpus format.
//!
//! news.tsv:      id, category, subcategory, title, abstract, url,
//!                title_entities, abstract_entities
//! behaviors.tsv: impression_id, user_id, time, history (space separated),
//!                impressions (`<news>-1` / `<news>-0`, space separated)

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::tokenizer::HashTokenizer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NewsArticle {
    pub id: String,
    pub category: String,
    pub subcategory: String,
    pub title: String,
    pub abstract_text: String,
    pub url: String,
    pub title_entities: String,
    pub abstract_entities: String,
    pub title_tokens: Vec<usize>,
    /// Body tokens; MIND has no bodies, so the abstract stands in.
    pub body_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    pub id: String,
    pub user: String,
    pub time: String,
    pub history: Vec<String>,
    pub candidates: Vec<(String, u8)>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().filter(|c| c.1 == 1).map(|c| c.0.as_str())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().filter(|c| c.1 == 0).map(|c| c.0.as_str())
    }

    pub fn has_positive(&self) -> bool {
        self.candidates.iter().any(|c| c.1 == 1)
    }
}

/// Article of a `title<TAB>body` corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusArticle {
    pub title: Vec<usize>,
    pub body: Vec<usize>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_mind_news_str(
    text: &str,
    path: &Path,
    tok: &HashTokenizer,
    title_len: usize,
    body_len: usize,
) -> Result<Vec<NewsArticle>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in lines(text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if !(4..=8).contains(&cols.len()) {
            return Err(parse_err(path, n, format!("expected 4-8 columns, got {}", cols.len())));
        }
        let col = |i: usize| cols.get(i).copied().unwrap_or("").to_string();
        let id = col(0);
        if id.is_empty() {
            return Err(parse_err(path, n, "empty news id"));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, n, format!("duplicate news id `{id}`")));
        }
        let title = col(3);
        let abstract_text = col(4);
        out.push(NewsArticle {
            title_tokens: tok.encode(&title, title_len),
            body_tokens: tok.encode(&abstract_text, body_len),
            id,
            category: col(1),
            subcategory: col(2),
            title,
            abstract_text,
            url: col(5),
            title_entities: col(6),
            abstract_entities: col(7),
        });
    }
    Ok(out)
}

pub fn parse_mind_news(
    path: &Path,
    tok: &HashTokenizer,
    title_len: usize,
    body_len: usize,
) -> Result<Vec<NewsArticle>> {
    let text = fs::read_to_string(path)?;
    parse_mind_news_str(&text, path, tok, title_len, body_len)
}

/// Serializes articles as 8-column news.tsv text.
pub fn format_mind_news(news: &[NewsArticle]) -> String {
    let mut s = String::new();
    for a in news {
        s.push_str(&[
            a.id.as_str(),
            &a.category,
            &a.subcategory,
            &a.title,
            &a.abstract_text,
            &a.url,
            &a.title_entities,
            &a.abstract_entities,
        ]
        .join("\t"));
        s.push('\n');
    }
    s
}

pub fn parse_mind_behaviors_str(text: &str, path: &Path) -> Result<Vec<Impression>> {
    let mut out = Vec::new();
    for (n, line) in lines(text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(path, n, format!("expected 5 columns, got {}", cols.len())));
        }
        let history = cols[3].split_whitespace().map(str::to_string).collect();
        let mut candidates = Vec::new();
        for item in cols[4].split_whitespace() {
            let (id, label) = item
                .rsplit_once('-')
                .ok_or_else(|| parse_err(path, n, format!("candidate `{item}` lacks a label")))?;
            let label = match label {
                "1" => 1,
                "0" => 0,
                other => {
                    return Err(parse_err(path, n, format!("unknown label suffix `-{other}`")))
                }
            };
            if id.is_empty() {
                return Err(parse_err(path, n, "empty candidate id"));
            }
            candidates.push((id.to_string(), label));
        }
        if candidates.is_empty() {
            return Err(parse_err(path, n, "impression without candidates"));
        }
        out.push(Impression {
            id: cols[0].to_string(),
            user: cols[1].to_string(),
            time: cols[2].to_string(),
            history,
            candidates,
        });
    }
    Ok(out)
}

pub fn parse_mind_behaviors(path: &Path) -> Result<Vec<Impression>> {
    let text = fs::read_to_string(path)?;
    parse_mind_behaviors_str(&text, path)
}

pub fn format_mind_behaviors(imps: &[Impression]) -> String {
    let mut s = String::new();
    for imp in imps {
        let cands: Vec<String> = imp
            .candidates
            .iter()
            .map(|(id, l)| format!("{id}-{l}"))
            .collect();
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            imp.id,
            imp.user,
            imp.time,
            imp.history.join(" "),
            cands.join(" ")
        ));
    }
    s
}

pub fn parse_corpus_str(
    text: &str,
    path: &Path,
    tok: &HashTokenizer,
    title_len: usize,
    body_len: usize,
) -> Result<Vec<CorpusArticle>> {
    let mut out = Vec::new();
    for (n, line) in lines(text) {
        let (title, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, n, "expected `title<TAB>body`"))?;
        if body.contains('\t') {
            return Err(parse_err(path, n, "more than one tab"));
        }
        let title = tok.encode(title, title_len);
        let body = tok.encode(body, body_len);
        if title.is_empty() || body.is_empty() {
            return Err(parse_err(path, n, "empty title or body"));
        }
        out.push(CorpusArticle { title, body });
    }
    Ok(out)
}

pub fn parse_corpus(
    path: &Path,
    tok: &HashTokenizer,
    title_len: usize,
    body_len: usize,
) -> Result<Vec<CorpusArticle>> {
    let text = fs::read_to_string(path)?;
    parse_corpus_str(&text, path, tok, title_len, body_len)
}
