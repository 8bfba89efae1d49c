//! Rule-based valence-lexicon sentiment scoring and sentiment feature tokens.
//!
//! Each token takes its lexicon valence (0 when absent), adjusted in order by
//! an all-caps emphasis bonus, a preceding booster word and a negator within
//! the three preceding tokens. The summed valence, amplified by exclamation
//! marks, is squashed into (-1, 1) by `s / sqrt(s^2 + 15)`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgclient::EnrichedSample;

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon_starter.tsv");

pub const NORMALIZATION_ALPHA: f64 = 15.0;
pub const NEGATION_SCALAR: f64 = -0.74;
pub const BOOSTER_INCREMENT: f64 = 0.293;
pub const CAPS_INCREMENT: f64 = 0.733;
pub const EXCLAMATION_INCREMENT: f64 = 0.292;
pub const MAX_EXCLAMATIONS: usize = 3;
pub const NEGATION_WINDOW: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

pub const BOOSTERS: &[&str] = &[
    "absolutely",
    "amazingly",
    "awfully",
    "completely",
    "considerably",
    "decidedly",
    "deeply",
    "enormously",
    "entirely",
    "especially",
    "exceptionally",
    "extremely",
    "fabulously",
    "greatly",
    "highly",
    "hugely",
    "incredibly",
    "intensely",
    "majorly",
    "more",
    "most",
    "particularly",
    "purely",
    "quite",
    "really",
    "remarkably",
    "so",
    "substantially",
    "thoroughly",
    "totally",
    "tremendously",
    "uber",
    "unbelievably",
    "unusually",
    "utterly",
    "very",
];

pub const NEGATIONS: &[&str] = &[
    "aint", "arent", "cannot", "cant", "couldnt", "darent", "didnt", "doesnt", "dont", "hadnt",
    "hasnt", "havent", "isnt", "mightnt", "mustnt", "neither", "never", "none", "nope", "nor",
    "not", "nothing", "nowhere", "shant", "shouldnt", "wasnt", "werent", "without", "wont",
    "wouldnt", "rarely", "seldom", "despite",
];

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Word valences in [-4, 4], keyed case-insensitively.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon(HashMap<String, f64>);

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    /// `word<TAB>valence` per line; blank lines and `#` comments ignored.
    pub fn parse(contents: &str) -> Result<Self, LexiconError> {
        let mut map = HashMap::new();
        for (i, line) in contents.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(word), Some(val)) = (parts.next(), parts.next()) else {
                return Err(LexiconError::Parse {
                    line: line_no,
                    message: "expected word<TAB>valence".into(),
                });
            };
            let valence: f64 = val.trim().parse().map_err(|e| LexiconError::Parse {
                line: line_no,
                message: format!("bad valence {val:?}: {e}"),
            })?;
            if !valence.is_finite() || !(-4.0..=4.0).contains(&valence) {
                return Err(LexiconError::Parse {
                    line: line_no,
                    message: format!("valence {valence} outside [-4, 4]"),
                });
            }
            map.insert(word.trim().to_lowercase(), valence);
        }
        Ok(Lexicon(map))
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let s = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&s)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Lexicon(
            pairs
                .into_iter()
                .map(|(w, v)| (w.to_lowercase(), v.clamp(-4.0, 4.0)))
                .collect(),
        )
    }

    pub fn valence(&self, word: &str) -> f64 {
        self.0.get(&word.to_lowercase()).copied().unwrap_or(0.0)
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(w, &v)| (w.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// File form, sorted by word so output is stable.
    pub fn to_file_string(&self) -> String {
        let mut rows: Vec<_> = self.0.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        rows.into_iter()
            .map(|(w, v)| format!("{w}\t{v}\n"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentScores {
    pub neg: f64,
    pub neu: f64,
    pub pos: f64,
    pub compound: f64,
}

impl SentimentScores {
    pub const NEUTRAL: SentimentScores = SentimentScores {
        neg: 0.0,
        neu: 1.0,
        pos: 0.0,
        compound: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentimentClass {
    Positive,
    Negative,
    Neutral,
}

impl SentimentClass {
    pub fn feature_token(self) -> &'static str {
        match self {
            SentimentClass::Positive => "SENTPOS",
            SentimentClass::Negative => "SENTNEG",
            SentimentClass::Neutral => "SENTNEU",
        }
    }
}

pub fn normalize_compound(raw: f64) -> f64 {
    raw / (raw * raw + NORMALIZATION_ALPHA).sqrt()
}

fn strip_edges(token: &str) -> &str {
    token.trim_matches(|c: char| c.is_ascii_punctuation())
}

fn is_negation(word: &str) -> bool {
    let w: String = word.chars().filter(|c| *c != '\'').collect();
    NEGATIONS.contains(&w.as_str()) || word.ends_with("n't")
}

fn is_all_caps(token: &str) -> bool {
    token.chars().any(char::is_alphabetic) && !token.chars().any(char::is_lowercase)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-token valences after the caps, booster and negation rules.
pub fn token_valences(text: &str, lex: &Lexicon) -> Vec<f64> {
    let tokens: Vec<&str> = text
        .split_whitespace()
        .map(strip_edges)
        .filter(|t| !t.is_empty())
        .collect();
    let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let caps = tokens.iter().filter(|t| is_all_caps(t)).count();
    let mixed_case = caps > 0 && caps < tokens.len();
    (0..tokens.len())
        .map(|i| {
            let mut v = lex.valence(&lower[i]);
            if v == 0.0 {
                return 0.0;
            }
            let s = sign(v);
            if mixed_case && is_all_caps(tokens[i]) {
                v += s * CAPS_INCREMENT;
            }
            if i > 0 && BOOSTERS.contains(&lower[i - 1].as_str()) {
                v += s * BOOSTER_INCREMENT;
            }
            if lower[i.saturating_sub(NEGATION_WINDOW)..i]
                .iter()
                .any(|w| is_negation(w))
            {
                v *= NEGATION_SCALAR;
            }
            v
        })
        .collect()
}

pub fn score_sentence(text: &str, lex: &Lexicon) -> SentimentScores {
    let valences = token_valences(text, lex);
    if valences.is_empty() {
        return SentimentScores::NEUTRAL;
    }
    let mut raw: f64 = valences.iter().sum();
    let bangs = text.matches('!').count().min(MAX_EXCLAMATIONS);
    raw += sign(raw) * EXCLAMATION_INCREMENT * bangs as f64;

    let pos: f64 = valences.iter().filter(|v| **v > 0.0).sum();
    let neg: f64 = valences.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let neu = valences.iter().filter(|v| **v == 0.0).count() as f64;
    let total = pos + neg + neu;
    SentimentScores {
        neg: neg / total,
        neu: neu / total,
        pos: pos / total,
        compound: normalize_compound(raw),
    }
}

/// Boundaries are inclusive: `compound == threshold` is positive.
pub fn classify_sentiment(scores: &SentimentScores, threshold: f64) -> SentimentClass {
    if scores.compound >= threshold {
        SentimentClass::Positive
    } else if scores.compound <= -threshold {
        SentimentClass::Negative
    } else {
        SentimentClass::Neutral
    }
}

/// Index of the 0.25-wide compound bin, 0..=7.
pub fn compound_bucket(compound: f64) -> u8 {
    ((compound + 1.0) / 0.25).floor().clamp(0.0, 7.0) as u8
}

/// Suffix appended to a sample's text, e.g. `" SENTPOS COMP6"`.
pub fn feature_suffix(scores: &SentimentScores, threshold: f64) -> String {
    format!(
        " {} COMP{}",
        classify_sentiment(scores, threshold).feature_token(),
        compound_bucket(scores.compound)
    )
}

pub fn add_sentiment_features(
    samples: Vec<EnrichedSample>,
    lex: &Lexicon,
    threshold: f64,
) -> Vec<EnrichedSample> {
    samples
        .into_iter()
        .map(|mut s| {
            let scores = score_sentence(&s.text, lex);
            s.text.push_str(&feature_suffix(&scores, threshold));
            s
        })
        .collect()
}
