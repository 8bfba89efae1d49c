//! Dyadic conversation data model, corpus ingestion and splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("duplicate record for conversation {conversation_id:?} turn {turn_index}")]
    Duplicate {
        conversation_id: String,
        turn_index: u32,
    },
    #[error("need at least 2 conversations to split, got {0}")]
    TooFewConversations(usize),
    #[error("test fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("unknown corpus format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
}

/// One of the two participants of a dyadic conversation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeakerId {
    P1,
    P2,
}

impl SpeakerId {
    pub fn other(self) -> Self {
        match self {
            SpeakerId::P1 => SpeakerId::P2,
            SpeakerId::P2 => SpeakerId::P1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerId::P1 => "P1",
            SpeakerId::P2 => "P2",
        }
    }
}

impl FromStr for SpeakerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "P1" | "p1" => Ok(SpeakerId::P1),
            "P2" | "p2" => Ok(SpeakerId::P2),
            other => Err(format!("invalid speaker {other:?} (expected P1 or P2)")),
        }
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The six emotion classes with their fixed integer codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Happy = 0,
    Sad = 1,
    Neutral = 2,
    Angry = 3,
    Excited = 4,
    Frustrated = 5,
}

impl EmotionLabel {
    pub const COUNT: usize = 6;

    pub const ALL: [EmotionLabel; 6] = [
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Neutral,
        EmotionLabel::Angry,
        EmotionLabel::Excited,
        EmotionLabel::Frustrated,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "Happy",
            EmotionLabel::Sad => "Sad",
            EmotionLabel::Neutral => "Neutral",
            EmotionLabel::Angry => "Angry",
            EmotionLabel::Excited => "Excited",
            EmotionLabel::Frustrated => "Frustrated",
        }
    }

    /// Accepts a class name (any case) or an integer code. `None` means the
    /// value names something outside the six-class set.
    pub fn parse(raw: &str) -> Option<Self> {
        let raw = raw.trim();
        if let Ok(code) = raw.parse::<usize>() {
            return Self::from_code(code);
        }
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(raw))
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub conversation_id: String,
    pub turn_index: u32,
    pub speaker: SpeakerId,
    pub text: String,
    pub label: Option<EmotionLabel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// A maximal run of consecutive utterances by one speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeakerBatch<'a> {
    pub speaker: SpeakerId,
    pub utterances: &'a [Utterance],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        ext.parse()
    }
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(CorpusFormat::Csv),
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedCorpus {
    pub conversations: Vec<Conversation>,
    /// Records whose label fell outside the six-class set.
    pub dropped_count: usize,
}

impl LoadedCorpus {
    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }
}

/// Raw record shared by both on-disk formats. Loosely typed fields let CSV
/// strings and JSON numbers go through the same validation.
#[derive(Debug, Deserialize)]
struct RawRecord {
    conversation_id: String,
    turn_index: serde_json::Value,
    speaker: String,
    text: String,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

enum RawLabel {
    Missing,
    Known(EmotionLabel),
    Outside,
}

fn parse_record(raw: RawRecord, line: u64) -> Result<(Utterance, RawLabel), CorpusError> {
    let err = |message: String| CorpusError::Parse { line, message };
    let turn_index = match &raw.turn_index {
        serde_json::Value::Number(n) => n.as_u64(),
        serde_json::Value::String(s) => s.trim().parse::<u64>().ok(),
        _ => None,
    }
    .and_then(|v| u32::try_from(v).ok())
    .ok_or_else(|| err(format!("invalid turn_index {}", raw.turn_index)))?;
    let speaker = raw.speaker.parse::<SpeakerId>().map_err(err)?;
    if raw.text.trim().is_empty() {
        return Err(err("empty text".to_string()));
    }
    let label = match raw.label {
        None | Some(serde_json::Value::Null) => RawLabel::Missing,
        Some(serde_json::Value::String(s)) if s.trim().is_empty() => RawLabel::Missing,
        Some(serde_json::Value::String(s)) => match EmotionLabel::parse(&s) {
            Some(l) => RawLabel::Known(l),
            None => RawLabel::Outside,
        },
        Some(serde_json::Value::Number(n)) => {
            match n.as_u64().and_then(|c| EmotionLabel::from_code(c as usize)) {
                Some(l) => RawLabel::Known(l),
                None => RawLabel::Outside,
            }
        }
        Some(other) => return Err(err(format!("invalid label {other}"))),
    };
    let utt = Utterance {
        conversation_id: raw.conversation_id,
        turn_index,
        speaker,
        text: raw.text,
        label: None,
    };
    Ok((utt, label))
}

/// Loads a corpus, grouping records by conversation (ordered by first
/// appearance) and sorting each conversation by turn index.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    match format {
        CorpusFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(false)
                .from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| CorpusError::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            for result in reader.records() {
                let parse_err = |e: csv::Error| CorpusError::Parse {
                    line: e.position().map(|p| p.line()).unwrap_or(0),
                    message: e.to_string(),
                };
                let record = result.map_err(parse_err)?;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let raw: RawRecord =
                    record
                        .deserialize(Some(&headers))
                        .map_err(|e| CorpusError::Parse {
                            line,
                            message: e.to_string(),
                        })?;
                records.push((line, raw));
            }
        }
        CorpusFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line_no = i as u64 + 1;
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                records.push((line_no, raw));
            }
        }
    }
    assemble(records.into_iter())
}

fn assemble(records: impl Iterator<Item = (u64, RawRecord)>) -> Result<LoadedCorpus, CorpusError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, BTreeMap<u32, Utterance>> = BTreeMap::new();
    // Keys of every parsed record, dropped or not, for duplicate detection.
    let mut seen: BTreeMap<String, std::collections::BTreeSet<u32>> = BTreeMap::new();
    let mut dropped_count = 0;
    for (line, raw) in records {
        let (mut utt, label) = parse_record(raw, line)?;
        if !seen
            .entry(utt.conversation_id.clone())
            .or_default()
            .insert(utt.turn_index)
        {
            return Err(CorpusError::Duplicate {
                conversation_id: utt.conversation_id,
                turn_index: utt.turn_index,
            });
        }
        match label {
            RawLabel::Outside => {
                dropped_count += 1;
                continue;
            }
            RawLabel::Known(l) => utt.label = Some(l),
            RawLabel::Missing => {}
        }
        if !groups.contains_key(&utt.conversation_id) {
            order.push(utt.conversation_id.clone());
        }
        groups
            .entry(utt.conversation_id.clone())
            .or_default()
            .insert(utt.turn_index, utt);
    }
    let conversations = order
        .into_iter()
        .map(|id| {
            let utterances = groups
                .remove(&id)
                .unwrap_or_default()
                .into_values()
                .collect();
            Conversation { id, utterances }
        })
        .collect();
    Ok(LoadedCorpus {
        conversations,
        dropped_count,
    })
}

/// Writes conversations in either format; `load_corpus` reads the result
/// back unchanged.
pub fn write_corpus(
    path: &Path,
    format: CorpusFormat,
    conversations: &[Conversation],
) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let utterances = conversations.iter().flat_map(|c| c.utterances.iter());
    match format {
        CorpusFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["conversation_id", "turn_index", "speaker", "text", "label"])
                .map_err(|e| io_err(e.into()))?;
            for u in utterances {
                let turn = u.turn_index.to_string();
                w.write_record([
                    u.conversation_id.as_str(),
                    turn.as_str(),
                    u.speaker.as_str(),
                    u.text.as_str(),
                    u.label.map(EmotionLabel::name).unwrap_or(""),
                ])
                .map_err(|e| io_err(e.into()))?;
            }
            w.flush().map_err(io_err)?;
        }
        CorpusFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for u in utterances {
                let line = serde_json::json!({
                    "conversation_id": u.conversation_id,
                    "turn_index": u.turn_index,
                    "speaker": u.speaker.as_str(),
                    "text": u.text,
                    "label": u.label.map(EmotionLabel::name),
                });
                writeln!(w, "{line}").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
    }
    Ok(())
}

/// Splits a conversation into maximal same-speaker runs.
pub fn arrange_sentences(conversation: &Conversation) -> Vec<SpeakerBatch<'_>> {
    conversation
        .utterances
        .chunk_by(|a, b| a.speaker == b.speaker)
        .map(|run| SpeakerBatch {
            speaker: run[0].speaker,
            utterances: run,
        })
        .collect()
}

/// Deterministic conversation-level train/test split. Both halves keep the
/// input order.
pub fn split_corpus(
    conversations: &[Conversation],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Conversation>, Vec<Conversation>), CorpusError> {
    let n = conversations.len();
    if n < 2 {
        return Err(CorpusError::TooFewConversations(n));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::BadFraction(test_fraction));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = conversations
        .iter()
        .cloned()
        .zip(is_test)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(c, _)| c).collect(),
        test.into_iter().map(|(c, _)| c).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(conv: &str, turn: u32, speaker: SpeakerId, text: &str) -> Utterance {
        Utterance {
            conversation_id: conv.to_string(),
            turn_index: turn,
            speaker,
            text: text.to_string(),
            label: Some(EmotionLabel::Neutral),
        }
    }

    fn conv_from_speakers(speakers: &[SpeakerId]) -> Conversation {
        Conversation {
            id: "c".into(),
            utterances: speakers
                .iter()
                .enumerate()
                .map(|(i, &s)| utt("c", i as u32, s, &format!("t{i}")))
                .collect(),
        }
    }

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn label_codes_are_a_bijection() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(EmotionLabel::from_code(i), Some(*l));
            assert_eq!(EmotionLabel::parse(&l.name().to_uppercase()), Some(*l));
            assert_eq!(EmotionLabel::parse(&i.to_string()), Some(*l));
        }
        assert_eq!(EmotionLabel::parse("6"), None);
        assert_eq!(EmotionLabel::parse("other"), None);
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_tmp("", ".jsonl");
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert!(c.conversations.is_empty());
        let f = write_tmp("conversation_id,turn_index,speaker,text,label\n", ".csv");
        let c = load_corpus(f.path(), CorpusFormat::Csv).unwrap();
        assert!(c.conversations.is_empty());
    }

    #[test]
    fn groups_and_sorts_turns() {
        let f = write_tmp(
            "conversation_id,turn_index,speaker,text,label\n\
             c1,2,P1,third,Sad\n\
             c1,0,P1,first,happy\n\
             c1,1,P2,second,4\n",
            ".csv",
        );
        let c = load_corpus(f.path(), CorpusFormat::Csv).unwrap();
        assert_eq!(c.conversations.len(), 1);
        let texts: Vec<_> = c.conversations[0]
            .utterances
            .iter()
            .map(|u| u.text.as_str())
            .collect();
        assert_eq!(texts, ["first", "second", "third"]);
        assert_eq!(
            c.conversations[0].utterances[1].label,
            Some(EmotionLabel::Excited)
        );
    }

    #[test]
    fn out_of_set_labels_are_dropped_and_counted() {
        let f = write_tmp(
            r#"{"conversation_id":"c","turn_index":0,"speaker":"P1","text":"a","label":"happy"}
{"conversation_id":"c","turn_index":1,"speaker":"P2","text":"b","label":"other"}
{"conversation_id":"c","turn_index":2,"speaker":"P1","text":"c","label":2}
{"conversation_id":"c","turn_index":3,"speaker":"P2","text":"d","label":"other"}
{"conversation_id":"c","turn_index":4,"speaker":"P1","text":"e","label":"Frustrated"}
"#,
            ".jsonl",
        );
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.conversations.len(), 1);
        assert_eq!(c.conversations[0].utterances.len(), 3);
        assert_eq!(c.dropped_count, 2);
    }

    #[test]
    fn malformed_record_reports_line() {
        let f = write_tmp(
            "{\"conversation_id\":\"c\",\"turn_index\":0,\"speaker\":\"P1\",\"text\":\"a\"}\n\
             {\"conversation_id\":\"c\",\"turn_index\":1,\"speaker\":\"P3\",\"text\":\"b\"}\n",
            ".jsonl",
        );
        match load_corpus(f.path(), CorpusFormat::Jsonl) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp(
            "conversation_id,turn_index,speaker,text,label\nc,0,P1,a,Sad\nc,x,P1,b,Sad\n",
            ".csv",
        );
        match load_corpus(f.path(), CorpusFormat::Csv) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_turn_is_integrity_error() {
        let f = write_tmp(
            "conversation_id,turn_index,speaker,text,label\nc,0,P1,a,Sad\nc,0,P2,b,Sad\n",
            ".csv",
        );
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Csv),
            Err(CorpusError::Duplicate { turn_index: 0, .. })
        ));
    }

    #[test]
    fn arrange_examples() {
        use SpeakerId::*;
        assert!(arrange_sentences(&conv_from_speakers(&[])).is_empty());
        let c = conv_from_speakers(&[P1, P1, P2]);
        let b = arrange_sentences(&c);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].utterances.len(), 2);
        assert_eq!(b[1].speaker, P2);
        let c = conv_from_speakers(&[P1, P2, P1, P2, P1, P2]);
        assert_eq!(arrange_sentences(&c).len(), 6);
    }

    fn convs(n: usize) -> Vec<Conversation> {
        (0..n)
            .map(|i| Conversation {
                id: format!("c{i}"),
                utterances: vec![utt(&format!("c{i}"), 0, SpeakerId::P1, "x")],
            })
            .collect()
    }

    #[test]
    fn split_examples() {
        let all = convs(10);
        let (train, test) = split_corpus(&all, 0.2, 7).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(split_corpus(&all, 0.2, 7).unwrap(), (train, test));
        let (train, test) = split_corpus(&all, 0.05, 7).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        assert!(matches!(
            split_corpus(&convs(1), 0.2, 7),
            Err(CorpusError::TooFewConversations(1))
        ));
    }

    fn speaker_seq() -> impl Strategy<Value = Vec<SpeakerId>> {
        prop::collection::vec(prop_oneof![Just(SpeakerId::P1), Just(SpeakerId::P2)], 0..40)
    }

    proptest! {
        #[test]
        fn batches_partition_the_conversation(speakers in speaker_seq()) {
            let c = conv_from_speakers(&speakers);
            let batches = arrange_sentences(&c);
            let flat: Vec<&Utterance> = batches.iter().flat_map(|b| b.utterances.iter()).collect();
            prop_assert_eq!(flat, c.utterances.iter().collect::<Vec<_>>());
            let changes = speakers.windows(2).filter(|w| w[0] != w[1]).count();
            let expected = if speakers.is_empty() { 0 } else { 1 + changes };
            prop_assert_eq!(batches.len(), expected);
            for w in batches.windows(2) {
                prop_assert_ne!(w[0].speaker, w[1].speaker);
            }
        }

        #[test]
        fn split_is_a_partition(n in 2usize..30, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let all = convs(n);
            let (train, test) = split_corpus(&all, frac, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(!test.is_empty() && !train.is_empty());
            let mut ids: Vec<_> = train.iter().chain(&test).map(|c| c.id.clone()).collect();
            ids.sort();
            let mut expect: Vec<_> = all.iter().map(|c| c.id.clone()).collect();
            expect.sort();
            prop_assert_eq!(ids, expect);
        }

        #[test]
        fn write_then_load_round_trips(
            texts in prop::collection::vec("[a-zA-Z ,\"!']{1,12}", 1..12),
            csv_format in any::<bool>(),
        ) {
            let texts: Vec<String> = texts.into_iter().filter(|t| !t.trim().is_empty()).collect();
            prop_assume!(!texts.is_empty());
            let convs = vec![Conversation {
                id: "conv,1".into(),
                utterances: texts.iter().enumerate().map(|(i, t)| Utterance {
                    conversation_id: "conv,1".into(),
                    turn_index: i as u32,
                    speaker: if i % 3 == 0 { SpeakerId::P1 } else { SpeakerId::P2 },
                    text: t.clone(),
                    label: EmotionLabel::from_code(i % 7),
                }).collect(),
            }];
            let (format, ext) = if csv_format { (CorpusFormat::Csv, ".csv") } else { (CorpusFormat::Jsonl, ".jsonl") };
            let f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
            write_corpus(f.path(), format, &convs).unwrap();
            let loaded = load_corpus(f.path(), format).unwrap();
            prop_assert_eq!(loaded.conversations, convs);
            prop_assert_eq!(loaded.dropped_count, 0);
        }
    }
}
