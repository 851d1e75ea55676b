//! Caption preprocessing for semantic information, question tokenization and
//! the vocabulary / answer-set builders.
//!
//! Semantic information for an image is built in three steps:
//!
//! 1. near-duplicate captions are dropped in generation order: a sentence is
//!    discarded when its token-level LCS similarity
//!    `2·LCS(a, b) / (|a| + |b|)` with any already selected sentence is at
//!    least the threshold (0.8);
//! 2. the first [`MAX_SELECTED_SENTENCES`] survivors are kept;
//! 3. stopwords, prepositions and auxiliary verbs are removed using the
//!    wordlists shipped under `data/wordlists/`, and the result is truncated to
//!    [`MAX_SI_WORDS`] tokens.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEDUP_THRESHOLD: f64 = 0.8;
pub const MAX_SELECTED_SENTENCES: usize = 10;
pub const MAX_SI_WORDS: usize = 40;
pub const MAX_QUESTION_TOKENS: usize = 14;
pub const MIN_ANSWER_OCCURRENCES: usize = 9;

pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const STOPWORDS: &str = include_str!("../data/wordlists/stopwords.txt");
const PREPOSITIONS: &str = include_str!("../data/wordlists/prepositions.txt");
const AUXILIARY_VERBS: &str = include_str!("../data/wordlists/auxiliary_verbs.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("question {0:?} has no tokens")]
    EmptyQuestion(String),
    #[error("no answer occurs at least {min_occurrences} times")]
    EmptyAnswerSet { min_occurrences: usize },
}

/// Lowercases, strips punctuation (apostrophes inside words survive) and
/// splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut cleaned = String::with_capacity(lower.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        } else if c == '\'' {
            let inner = i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if inner {
                cleaned.push(c);
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `2·LCS(a, b) / (|a| + |b|)`; 1.0 for two empty sequences.
pub fn similarity<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

/// Greedy near-duplicate suppression in input order, returning at most the
/// first [`MAX_SELECTED_SENTENCES`] survivors. Sentences that are blank after
/// trimming are ignored.
pub fn dedup_captions<S: AsRef<str>>(captions: &[S], threshold: f64) -> Vec<String> {
    let mut selected: Vec<(String, Vec<String>)> = Vec::new();
    for caption in captions {
        if selected.len() == MAX_SELECTED_SENTENCES {
            break;
        }
        let sentence = caption.as_ref().trim();
        if sentence.is_empty() {
            continue;
        }
        let tokens = normalize_tokens(sentence);
        let duplicate = selected
            .iter()
            .any(|(_, kept)| similarity(&tokens, kept) >= threshold);
        if !duplicate {
            selected.push((sentence.to_owned(), tokens));
        }
    }
    selected.into_iter().map(|(s, _)| s).collect()
}

/// The three filter lists (stopwords, prepositions, auxiliary verbs).
#[derive(Clone, Debug)]
pub struct Wordlists {
    words: HashSet<String>,
}

impl Wordlists {
    /// Lists compiled into the crate from `data/wordlists/`.
    pub fn shipped() -> Self {
        Self::from_texts(&[STOPWORDS, PREPOSITIONS, AUXILIARY_VERBS])
    }

    /// One token per line; blank lines and `#` comments are skipped.
    pub fn from_texts(texts: &[&str]) -> Self {
        let words = texts
            .iter()
            .flat_map(|t| t.lines())
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { words }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }
}

/// Concatenated tokens of `sentences` minus wordlist entries, in order,
/// truncated to [`MAX_SI_WORDS`].
pub fn filter_content_words<S: AsRef<str>>(sentences: &[S], lists: &Wordlists) -> Vec<String> {
    sentences
        .iter()
        .flat_map(|s| normalize_tokens(s.as_ref()))
        .filter(|t| !lists.contains(t))
        .take(MAX_SI_WORDS)
        .collect()
}

/// Dedup, first-10 cut and content-word filtering for one image's captions.
pub fn semantic_info<S: AsRef<str>>(captions: &[S], lists: &Wordlists) -> Vec<String> {
    filter_content_words(&dedup_captions(captions, DEDUP_THRESHOLD), lists)
}

/// Runs [`semantic_info`] over an `image_id → captions` map.
pub fn prep_caption_map(captions: &BTreeMap<String, Vec<String>>, lists: &Wordlists) -> BTreeMap<String, Vec<String>> {
    captions
        .iter()
        .map(|(id, caps)| (id.clone(), semantic_info(caps, lists)))
        .collect()
}

/// Question tokens truncated to `max_len`.
pub fn tokenize_question(question: &str, max_len: usize) -> Result<Vec<String>, TextError> {
    let mut tokens = normalize_tokens(question);
    tokens.truncate(max_len);
    if tokens.is_empty() {
        return Err(TextError::EmptyQuestion(question.to_owned()));
    }
    Ok(tokens)
}

/// Lowercase, punctuation and articles removed, whitespace collapsed.
/// Used for both answer-set construction and accuracy matching.
pub fn normalize_answer(answer: &str) -> String {
    normalize_tokens(answer)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sorts by count descending, then lexicographically.
fn rank_by_frequency(counts: HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Token ↔ id map. Id 0 is padding and id 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build<I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq.as_ref() {
                if tok != PAD_TOKEN && tok != UNK_TOKEN {
                    *counts.entry(tok.clone()).or_default() += 1;
                }
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        tokens.extend(rank_by_frequency(counts).into_iter().map(|(t, _)| t));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Closed set of candidate answers, each a classifier output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerSet {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for AnswerSet {
    fn from(answers: Vec<String>) -> Self {
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { answers, index }
    }
}

impl From<AnswerSet> for Vec<String> {
    fn from(a: AnswerSet) -> Self {
        a.answers
    }
}

impl AnswerSet {
    /// Keeps normalized canonical answers occurring at least `min_occurrences` times.
    pub fn build<S: AsRef<str>>(canonical_answers: &[S], min_occurrences: usize) -> Result<Self, TextError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for a in canonical_answers {
            *counts.entry(normalize_answer(a.as_ref())).or_default() += 1;
        }
        let answers: Vec<String> = rank_by_frequency(counts)
            .into_iter()
            .filter(|(_, c)| *c >= min_occurrences)
            .map(|(a, _)| a)
            .collect();
        if answers.is_empty() {
            return Err(TextError::EmptyAnswerSet { min_occurrences });
        }
        Ok(Self::from(answers))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Class id of an already normalized answer.
    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }
}
