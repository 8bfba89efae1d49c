//! Knowledge-graph lookups and sentence augmentation by related-term
//! substitution.
//!
//! Lookups go cache first, then to either a local fixture or the HTTP API.
//! Network failures never abort a run: after the configured retries the term
//! is treated as having no related terms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmotionLabel, SpeakerId, Utterance};
use crate::textprep::{content_tokens, Stoplist, WordToken};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_VARIANTS: usize = 3;
pub const DEFAULT_BASE_URL: &str = "http://api.conceptnet.io";

/// Relations whose end points are close enough in meaning to substitute.
pub const ACCEPTED_RELATIONS: [&str; 5] = ["RelatedTo", "SynonymOf", "SimilarTo", "FormOf", "IsA"];

#[derive(Debug, Error)]
pub enum KgError {
    #[error("malformed knowledge-graph response for {term:?}: {message}")]
    Protocol { term: String, message: String },
    #[error("invalid fixture: {0}")]
    Fixture(String),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelatedTerm {
    pub term: String,
    pub weight: f64,
    pub relation: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    KgAugmented(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedSample {
    pub conversation_id: String,
    pub turn_index: u32,
    pub speaker: SpeakerId,
    pub text: String,
    pub label: Option<EmotionLabel>,
    pub provenance: Provenance,
}

impl EnrichedSample {
    pub fn original(u: &Utterance) -> Self {
        EnrichedSample {
            conversation_id: u.conversation_id.clone(),
            turn_index: u.turn_index,
            speaker: u.speaker,
            text: u.text.clone(),
            label: u.label,
            provenance: Provenance::Original,
        }
    }
}

fn normalize_relation(rel: &str) -> Option<&'static str> {
    // The public graph calls the synonym relation "Synonym".
    let rel = if rel == "Synonym" { "SynonymOf" } else { rel };
    ACCEPTED_RELATIONS.iter().copied().find(|r| *r == rel)
}

/// Filters to accepted relations, drops the query itself and duplicate
/// terms, and orders by descending weight then term.
fn rank_terms(query: &str, terms: impl IntoIterator<Item = RelatedTerm>) -> Vec<RelatedTerm> {
    let mut out: Vec<RelatedTerm> = terms
        .into_iter()
        .filter_map(|mut t| {
            t.relation = normalize_relation(&t.relation)?.to_string();
            let trimmed = t.term.trim();
            if trimmed.is_empty() || trimmed.eq_ignore_ascii_case(query) || !t.weight.is_finite() {
                return None;
            }
            t.term = trimmed.to_string();
            t.weight = t.weight.max(0.0);
            Some(t)
        })
        .collect();
    out.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.term.cmp(&b.term))
    });
    let mut seen = BTreeSet::new();
    out.retain(|t| seen.insert(t.term.to_lowercase()));
    out
}

/// Term -> related terms, read from a JSON object.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fixture(BTreeMap<String, Vec<RelatedTerm>>);

impl Fixture {
    pub fn parse(json: &str) -> Result<Self, KgError> {
        let map: BTreeMap<String, Vec<RelatedTerm>> =
            serde_json::from_str(json).map_err(|e| KgError::Fixture(e.to_string()))?;
        Ok(Fixture(
            map.into_iter()
                .map(|(k, v)| (k.to_lowercase(), v))
                .collect(),
        ))
    }

    pub fn load(path: &Path) -> Result<Self, KgError> {
        let s = std::fs::read_to_string(path).map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&s)
    }

    pub fn from_map(map: BTreeMap<String, Vec<RelatedTerm>>) -> Self {
        Fixture(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("fixture serialises")
    }

    pub fn get(&self, term: &str) -> Option<&[RelatedTerm]> {
        self.0.get(term).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    term: String,
    results: Vec<RelatedTerm>,
}

/// Append-only JSON-lines cache of lookups. Readers share the map; appends
/// are serialized through the writer lock.
pub struct KgCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, Vec<RelatedTerm>>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl KgCache {
    pub fn in_memory() -> Self {
        KgCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (creating if needed) a cache file. Later lines override earlier
    /// ones for the same term.
    pub fn open(path: &Path) -> Result<Self, KgError> {
        let io = |source| KgError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| KgError::Cache {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?;
                entries.insert(entry.term, entry.results);
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(KgCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn get(&self, term: &str) -> Option<Vec<RelatedTerm>> {
        self.entries.read().expect("cache lock").get(term).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, term: &str, results: Vec<RelatedTerm>) -> Result<(), KgError> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                term: term.to_string(),
                results: results.clone(),
            })
            .expect("cache line serialises");
            let io = |source| KgError::Io {
                path: self
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                source,
            };
            writeln!(w, "{line}").map_err(io)?;
            w.flush().map_err(io)?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(term.to_string(), results);
        Ok(())
    }
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Minimal GET abstraction so tests can substitute the network.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str, timeout: Duration) -> Result<String, TransportError>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn get(&self, url: &str, timeout: Duration) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut resp = agent
            .get(url)
            .call()
            .map_err(|e| TransportError(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct HttpConfig {
    pub base_url: String,
    pub retries: u32,
    pub timeout: Duration,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: DEFAULT_BASE_URL.to_string(),
            retries: 3,
            timeout: Duration::from_secs(10),
            backoff: Duration::from_millis(500),
        }
    }
}

pub enum KgSource {
    Http(HttpConfig),
    Fixture(Fixture),
    /// Only previously cached lookups are answered.
    CacheOnly,
}

pub struct KgClient {
    source: KgSource,
    cache: KgCache,
    transport: Arc<dyn Transport>,
}

impl KgClient {
    pub fn new(source: KgSource, cache: KgCache) -> Self {
        Self::with_transport(source, cache, Arc::new(UreqTransport))
    }

    pub fn with_transport(source: KgSource, cache: KgCache, transport: Arc<dyn Transport>) -> Self {
        KgClient {
            source,
            cache,
            transport,
        }
    }

    pub fn fixture(fixture: Fixture) -> Self {
        Self::new(KgSource::Fixture(fixture), KgCache::in_memory())
    }

    pub fn cache(&self) -> &KgCache {
        &self.cache
    }

    /// Up to `k` related terms for `term`, best first.
    pub fn fetch_related(&self, term: &str, k: usize) -> Result<Vec<RelatedTerm>, KgError> {
        let term = term.to_lowercase();
        if term.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        if let Some(hit) = self.cache.get(&term) {
            return Ok(truncated(hit, k));
        }
        let ranked = match &self.source {
            KgSource::CacheOnly => return Ok(Vec::new()),
            KgSource::Fixture(f) => rank_terms(&term, f.get(&term).unwrap_or_default().to_vec()),
            KgSource::Http(cfg) => match self.fetch_http(cfg, &term, k)? {
                Some(ranked) => {
                    self.cache.insert(&term, ranked.clone())?;
                    ranked
                }
                None => return Ok(Vec::new()),
            },
        };
        Ok(truncated(ranked, k))
    }

    fn fetch_http(
        &self,
        cfg: &HttpConfig,
        term: &str,
        k: usize,
    ) -> Result<Option<Vec<RelatedTerm>>, KgError> {
        let url = format!(
            "{}/c/en/{}?limit={}",
            cfg.base_url.trim_end_matches('/'),
            utf8_percent_encode(term, NON_ALPHANUMERIC),
            k * 4
        );
        let mut delay = cfg.backoff;
        for attempt in 0..=cfg.retries {
            match self.transport.get(&url, cfg.timeout) {
                Ok(body) => return parse_edges(term, &body).map(Some),
                Err(e) if attempt < cfg.retries => {
                    log::debug!("lookup {url} failed ({e}), retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err(e) => {
                    log::warn!(
                        "lookup of {term:?} failed after {} retries: {e}; continuing without related terms",
                        cfg.retries
                    );
                }
            }
        }
        Ok(None)
    }

    /// Warms the cache for many terms at once. Only HTTP mode benefits.
    pub fn prefetch<'a>(
        &self,
        terms: impl IntoIterator<Item = &'a str>,
        k: usize,
    ) -> Result<(), KgError> {
        if !matches!(self.source, KgSource::Http(_)) {
            return Ok(());
        }
        let unique: BTreeSet<String> = terms.into_iter().map(str::to_lowercase).collect();
        unique
            .into_par_iter()
            .try_for_each(|t| self.fetch_related(&t, k).map(|_| ()))
    }

    /// Variant sentences for `original`; see [`substitute_variants`].
    pub fn augment_sentence(
        &self,
        original: &str,
        content_tokens: &[WordToken],
        k: usize,
        variants: usize,
    ) -> Result<Vec<String>, KgError> {
        let related = content_tokens
            .iter()
            .map(|t| self.fetch_related(&t.surface, k))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(substitute_variants(
            original,
            content_tokens,
            &related,
            variants,
        ))
    }
}

fn truncated(mut v: Vec<RelatedTerm>, k: usize) -> Vec<RelatedTerm> {
    v.truncate(k);
    v
}

#[derive(Deserialize)]
struct ApiNode {
    label: String,
    #[serde(default)]
    language: Option<String>,
    #[serde(default)]
    term: Option<String>,
}

#[derive(Deserialize)]
struct ApiRel {
    label: String,
}

#[derive(Deserialize)]
struct ApiEdge {
    start: ApiNode,
    end: ApiNode,
    rel: ApiRel,
    weight: f64,
}

#[derive(Deserialize)]
struct ApiResponse {
    edges: Vec<ApiEdge>,
}

fn is_english(node: &ApiNode) -> bool {
    match (&node.language, &node.term) {
        (Some(lang), _) => lang == "en",
        (None, Some(term)) => term.starts_with("/c/en/"),
        (None, None) => true,
    }
}

/// Parses an edge-list response into ranked terms. The far end of each edge
/// (the node that is not the query) supplies the term.
pub fn parse_edges(query: &str, body: &str) -> Result<Vec<RelatedTerm>, KgError> {
    let resp: ApiResponse = serde_json::from_str(body).map_err(|e| KgError::Protocol {
        term: query.to_string(),
        message: e.to_string(),
    })?;
    let terms = resp.edges.into_iter().filter_map(|edge| {
        let node = if edge.end.label.eq_ignore_ascii_case(query) {
            edge.start
        } else {
            edge.end
        };
        is_english(&node).then(|| RelatedTerm {
            term: node.label.to_lowercase(),
            weight: edge.weight,
            relation: edge.rel.label,
        })
    });
    Ok(rank_terms(query, terms))
}

/// Builds up to `variants` sentences. Variant `i` replaces every content
/// token that has at least `i` related terms with its `i`-th term, in place
/// at the token's span. Variants equal to the original are dropped.
pub fn substitute_variants(
    original: &str,
    content_tokens: &[WordToken],
    related: &[Vec<RelatedTerm>],
    variants: usize,
) -> Vec<String> {
    let mut order: Vec<usize> = (0..content_tokens.len().min(related.len())).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(content_tokens[i].char_span.0));
    (0..variants)
        .filter_map(|rank| {
            let mut text = original.to_string();
            for &i in &order {
                if let Some(rt) = related[i].get(rank) {
                    let (s, e) = content_tokens[i].char_span;
                    text.replace_range(s..e, &rt.term);
                }
            }
            (text != original).then_some(text)
        })
        .collect()
}

/// Every utterance followed by its augmented variants, in input order.
pub fn enrich_corpus(
    samples: &[Utterance],
    k: usize,
    variants: usize,
    client: &KgClient,
    stoplist: &Stoplist,
) -> Result<Vec<EnrichedSample>, KgError> {
    let tokens: Vec<Vec<WordToken>> = samples
        .iter()
        .map(|u| content_tokens(&u.text, stoplist))
        .collect();
    if variants > 0 {
        client.prefetch(tokens.iter().flatten().map(|t| t.surface.as_str()), k)?;
    }
    let mut out = Vec::with_capacity(samples.len());
    for (u, toks) in samples.iter().zip(&tokens) {
        out.push(EnrichedSample::original(u));
        if variants == 0 {
            continue;
        }
        for (i, text) in client
            .augment_sentence(&u.text, toks, k, variants)?
            .into_iter()
            .enumerate()
        {
            out.push(EnrichedSample {
                text,
                provenance: Provenance::KgAugmented(i as u32 + 1),
                ..EnrichedSample::original(u)
            });
        }
    }
    Ok(out)
}
