//! Text cleaning, word tokenization and the subword vocabulary used by the
//! encoder.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const SPECIAL_PIECES: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {0} is smaller than the 4 special pieces")]
    VocabTooSmall(usize),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("no texts to encode")]
    NoTexts,
    #[error("malformed vocab file: {0}")]
    BadVocabFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A lowercase, punctuation-free word together with its byte span in the
/// text it was taken from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordToken {
    pub surface: String,
    pub char_span: (usize, usize),
}

/// Removes ASCII punctuation and collapses whitespace runs into one space.
pub fn remove_punctuation(text: &str) -> String {
    remove_punctuation_with_offsets(text).0
}

/// Like [`remove_punctuation`], additionally returning for every byte of the
/// cleaned text the byte offset it came from in `text`.
pub fn remove_punctuation_with_offsets(text: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(text.len());
    let mut offsets = Vec::with_capacity(text.len());
    let mut pending_space: Option<usize> = None;
    for (pos, ch) in text.char_indices() {
        if ch.is_ascii_punctuation() {
            continue;
        }
        if ch.is_whitespace() {
            if !out.is_empty() && pending_space.is_none() {
                pending_space = Some(pos);
            }
            continue;
        }
        if let Some(space_pos) = pending_space.take() {
            out.push(' ');
            offsets.push(space_pos);
        }
        let start = out.len();
        out.push(ch);
        offsets.extend(std::iter::repeat_n(pos, out.len() - start));
    }
    (out, offsets)
}

pub fn tokenize_words(text: &str) -> Vec<WordToken> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (pos, ch) in text
        .char_indices()
        .chain(std::iter::once((text.len(), ' ')))
    {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(WordToken {
                    surface: text[s..pos].to_lowercase(),
                    char_span: (s, pos),
                });
                start = None;
            }
            (false, None) => start = Some(pos),
            _ => {}
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

impl Stoplist {
    /// The pinned English list shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    pub fn parse(contents: &str) -> Self {
        Stoplist(
            contents
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self, TextError> {
        let contents = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&contents))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Drops stopwords. When every token is a stopword the longest one (first on
/// ties) is kept so downstream lookups always get a query term.
pub fn remove_stopwords(tokens: &[WordToken], stoplist: &Stoplist) -> Vec<WordToken> {
    let kept: Vec<WordToken> = tokens
        .iter()
        .filter(|t| !stoplist.contains(&t.surface))
        .cloned()
        .collect();
    if !kept.is_empty() || tokens.is_empty() {
        return kept;
    }
    let longest = tokens
        .iter()
        .rev()
        .max_by_key(|t| t.surface.chars().count())
        .expect("non-empty");
    vec![longest.clone()]
}

/// Content words of `original` with spans pointing into `original` itself,
/// so substitutions can be made in place without disturbing punctuation.
pub fn content_tokens(original: &str, stoplist: &Stoplist) -> Vec<WordToken> {
    let (cleaned, offsets) = remove_punctuation_with_offsets(original);
    let tokens: Vec<WordToken> = tokenize_words(&cleaned)
        .into_iter()
        .map(|t| {
            let (s, e) = t.char_span;
            let start = offsets[s];
            let last = offsets[e - 1];
            let end = last + original[last..].chars().next().map_or(1, char::len_utf8);
            WordToken {
                surface: t.surface,
                char_span: (start, end),
            }
        })
        .collect();
    remove_stopwords(&tokens, stoplist)
}

/// Encoder-side word splitting: lowercase, whitespace separated, with each
/// ASCII punctuation character standing as its own word.
pub fn encoder_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            if ch.is_ascii_punctuation() {
                words.push(ch.to_string());
            }
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Piece vocabulary: four specials, frequent whole words, then single
/// characters as a fallback for unseen words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>) -> Result<Self, TextError> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(TextError::BadVocabFile(format!("duplicate piece {p:?}")));
            }
        }
        let max_piece_chars = pieces[SPECIAL_PIECES.len()..]
            .iter()
            .map(|p| p.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocab {
            pieces,
            index,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        // Specials are only reachable through their fixed ids.
        self.index
            .get(piece)
            .copied()
            .filter(|&id| id as usize >= SPECIAL_PIECES.len())
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Greedy longest-match segmentation of every encoder word in `text`.
    pub fn piece_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in encoder_words(text) {
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let longest = (1..=self.max_piece_chars.min(chars.len() - i))
                    .rev()
                    .find_map(|n| {
                        let start = chars[i].0;
                        let end = chars.get(i + n).map_or(word.len(), |c| c.0);
                        self.id(&word[start..end]).map(|id| (id, n))
                    });
                match longest {
                    Some((id, n)) => {
                        ids.push(id);
                        i += n;
                    }
                    None => {
                        ids.push(UNK_ID);
                        i += 1;
                    }
                }
            }
        }
        ids
    }

    /// Joins the non-special pieces of `ids` with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= SPECIAL_PIECES.len())
            .filter_map(|&id| self.piece(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Vocab file: four comment lines for the specials, then one piece per
    /// line in id order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, name) in SPECIAL_PIECES.iter().enumerate() {
            out.push_str(&format!("# {id} {name}\n"));
        }
        for p in &self.pieces[SPECIAL_PIECES.len()..] {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(contents: &str) -> Result<Self, TextError> {
        let lines: Vec<&str> = contents.lines().collect();
        if lines.len() < SPECIAL_PIECES.len() || !lines[..4].iter().all(|l| l.starts_with('#')) {
            return Err(TextError::BadVocabFile(
                "expected four leading comment lines".into(),
            ));
        }
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        for (i, l) in lines[4..].iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(TextError::BadVocabFile(format!(
                    "line {}: invalid piece {l:?}",
                    i + 5
                )));
            }
            pieces.push(l.to_string());
        }
        Self::from_pieces(pieces)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let io = |source| TextError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_file_string().as_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let contents = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_file_string(&contents)
    }
}

fn by_count_then_lex<K: Ord + Clone>(counts: BTreeMap<K, usize>) -> Vec<K> {
    let mut v: Vec<(K, usize)> = counts.into_iter().collect();
    // BTreeMap iteration is already lexicographic; stable sort keeps it for ties.
    v.sort_by_key(|e| std::cmp::Reverse(e.1));
    v.into_iter().map(|(k, _)| k).collect()
}

/// Builds a deterministic vocabulary of at most `max_size` pieces. Room for
/// the single-character fallback pieces is reserved before whole words are
/// admitted.
pub fn build_vocab<S: AsRef<str>>(corpus_texts: &[S], max_size: usize) -> Result<Vocab, TextError> {
    if max_size < SPECIAL_PIECES.len() {
        return Err(TextError::VocabTooSmall(max_size));
    }
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut char_counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus_texts {
        for word in encoder_words(text.as_ref()) {
            for ch in word.chars() {
                *char_counts.entry(ch.to_string()).or_default() += 1;
            }
            if word.chars().count() > 1 {
                *word_counts.entry(word).or_default() += 1;
            }
        }
    }
    if char_counts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let room = max_size - SPECIAL_PIECES.len();
    let chars: Vec<String> = by_count_then_lex(char_counts)
        .into_iter()
        .take(room)
        .collect();
    let words: Vec<String> = by_count_then_lex(word_counts)
        .into_iter()
        .filter(|w| !SPECIAL_PIECES.contains(&w.as_str()))
        .take(room - chars.len())
        .collect();
    let pieces = SPECIAL_PIECES
        .iter()
        .map(|s| s.to_string())
        .chain(words)
        .chain(chars)
        .collect();
    Vocab::from_pieces(pieces)
}

/// Encoder input: token ids with attention mask and segment ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub input_ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub segment_ids: Vec<u32>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    /// Drops trailing padding.
    pub fn trimmed(&self) -> EncodedSequence {
        let n = self.real_len();
        EncodedSequence {
            input_ids: self.input_ids[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
        }
    }
}

/// Lays out `[CLS] text1 [SEP] text2 [SEP] ...`, truncated to `max_len`
/// (the last kept token becomes `[SEP]`) and padded with `[PAD]`.
pub fn encode_sequence<S: AsRef<str>>(
    texts: &[S],
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence, TextError> {
    if max_len < 3 {
        return Err(TextError::MaxLenTooSmall(max_len));
    }
    if texts.is_empty() {
        return Err(TextError::NoTexts);
    }
    let mut ids = vec![CLS_ID];
    let mut segments = vec![0u32];
    for (seg, text) in texts.iter().enumerate() {
        let pieces = vocab.piece_ids(text.as_ref());
        segments.extend(std::iter::repeat_n(seg as u32, pieces.len() + 1));
        ids.extend(pieces);
        ids.push(SEP_ID);
    }
    if ids.len() > max_len {
        ids.truncate(max_len);
        segments.truncate(max_len);
        ids[max_len - 1] = SEP_ID;
    }
    let real = ids.len();
    let mut mask = vec![1u8; real];
    ids.resize(max_len, PAD_ID);
    segments.resize(max_len, 0);
    mask.resize(max_len, 0);
    Ok(EncodedSequence {
        input_ids: ids,
        mask,
        segment_ids: segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surfaces(tokens: &[WordToken]) -> Vec<&str> {
        tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    #[test]
    fn punctuation_examples() {
        assert_eq!(
            remove_punctuation("This weather is the best!"),
            "This weather is the best"
        );
        assert_eq!(remove_punctuation(""), "");
        assert_eq!(remove_punctuation("a--b ,, c"), "ab c");
    }

    #[test]
    fn offsets_point_back_into_source() {
        let src = "  Héllo, wo-rld!";
        let (clean, offs) = remove_punctuation_with_offsets(src);
        assert_eq!(clean, "Héllo world");
        assert_eq!(offs.len(), clean.len());
        for (i, ch) in clean.char_indices() {
            if ch != ' ' {
                assert!(src[offs[i]..].starts_with(ch));
            }
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            surfaces(&tokenize_words("This weather")),
            ["this", "weather"]
        );
        assert!(tokenize_words("").is_empty());
        let t = tokenize_words("  A  b ");
        assert_eq!(surfaces(&t), ["a", "b"]);
        assert_eq!(t[0].char_span, (2, 3));
        assert_eq!(t[1].char_span, (5, 6));
    }

    #[test]
    fn stopword_examples() {
        let sl = Stoplist::bundled();
        let toks = tokenize_words("this weather is the best");
        assert_eq!(surfaces(&remove_stopwords(&toks, &sl)), ["weather", "best"]);
        assert!(remove_stopwords(&[], &sl).is_empty());
        let toks = tokenize_words("the is");
        assert_eq!(surfaces(&remove_stopwords(&toks, &sl)), ["the"]);
    }

    #[test]
    fn bundled_stoplist_is_pinned() {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(BUNDLED_STOPWORDS.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex,
            "019f104ba2ed07436d05f9cdd3383034ad66014edc27fc651f837e1a038b6451"
        );
        assert_eq!(Stoplist::bundled().len(), 179);
    }

    #[test]
    fn content_tokens_span_the_original() {
        let original = "This weather is the best!";
        let toks = content_tokens(original, &Stoplist::bundled());
        assert_eq!(surfaces(&toks), ["weather", "best"]);
        for t in &toks {
            assert_eq!(&original[t.char_span.0..t.char_span.1], t.surface);
        }
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&["a a b"], 8).unwrap();
        assert_eq!(v.pieces(), ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b"]);
        assert_eq!(build_vocab(&["a a b"], 8).unwrap(), v);

        let v = build_vocab(&["hello world hello"], 4).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.piece_ids("hello").iter().all(|&id| id == UNK_ID));

        assert!(matches!(
            build_vocab::<&str>(&[], 8),
            Err(TextError::EmptyCorpus)
        ));
        assert!(matches!(
            build_vocab(&["  "], 8),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_prefers_frequent_words_and_keeps_chars() {
        let v = build_vocab(&["ab ab ab cd cd ef"], 4 + 6 + 2).unwrap();
        // six distinct characters, then the two most frequent words
        assert_eq!(&v.pieces()[4..6], ["ab", "cd"]);
        assert_eq!(
            v.piece_ids("ef"),
            vec![v.id("e").unwrap(), v.id("f").unwrap()]
        );
        assert_eq!(v.piece_ids("abx"), vec![v.id("ab").unwrap(), UNK_ID]);
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&["ab ab"], 16).unwrap();
        let ab = v.id("ab").unwrap();
        let e = encode_sequence(&["ab"], &v, 6).unwrap();
        assert_eq!(e.input_ids, [CLS_ID, ab, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.mask, [1, 1, 1, 0, 0, 0]);

        let e = encode_sequence(&["ab", "ab ab"], &v, 10).unwrap();
        assert_eq!(e.input_ids.iter().filter(|&&i| i == SEP_ID).count(), 2);
        assert_eq!(e.segment_ids[..7], [0, 0, 0, 1, 1, 1, 0]);
        assert_eq!(e.input_ids[6], PAD_ID);

        let e = encode_sequence(&["ab ab ab ab ab ab"], &v, 4).unwrap();
        assert_eq!(e.len(), 4);
        assert_eq!(e.input_ids, [CLS_ID, ab, ab, SEP_ID]);
        assert_eq!(e.real_len(), 4);

        assert!(encode_sequence(&["ab"], &v, 2).is_err());
        assert!(encode_sequence::<&str>(&[], &v, 8).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(&["the # weather, is #1!"], 64).unwrap();
        let s = v.to_file_string();
        assert!(s.lines().take(4).all(|l| l.starts_with('#')));
        let back = Vocab::from_file_string(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), s);
    }

    proptest! {
        #[test]
        fn remove_punctuation_is_idempotent(s in "\\PC{0,40}") {
            let once = remove_punctuation(&s);
            prop_assert_eq!(remove_punctuation(&once), once.clone());
        }

        #[test]
        fn mask_is_a_prefix_of_ones(
            texts in prop::collection::vec("[a-z !?]{0,20}", 1..4),
            max_len in 3usize..40,
        ) {
            let v = build_vocab(&["abc def ghi"], 32).unwrap();
            let e = encode_sequence(&texts, &v, max_len).unwrap();
            prop_assert_eq!(e.len(), max_len);
            prop_assert_eq!(e.mask.len(), max_len);
            prop_assert_eq!(e.segment_ids.len(), max_len);
            let n = e.real_len();
            prop_assert!(e.mask[n..].iter().all(|&m| m == 0));
            prop_assert_eq!(e.input_ids[0], CLS_ID);
            prop_assert_eq!(e.input_ids[n - 1], SEP_ID);
        }

        #[test]
        fn in_vocab_texts_decode_back(words in prop::collection::vec("[a-z]{1,6}", 1..10)) {
            let text = words.join(" ");
            let v = build_vocab(&[text.as_str()], 1000).unwrap();
            let e = encode_sequence(&[text.as_str()], &v, 64).unwrap();
            prop_assert_eq!(v.decode(&e.input_ids), text);
        }

        #[test]
        fn vocab_is_deterministic(texts in prop::collection::vec("[a-e ]{1,30}", 1..6), size in 4usize..30) {
            prop_assume!(texts.iter().any(|t| !t.trim().is_empty()));
            let a = build_vocab(&texts, size).unwrap();
            let b = build_vocab(&texts, size).unwrap();
            prop_assert!(a.len() <= size);
            prop_assert_eq!(a.to_file_string(), b.to_file_string());
        }
    }
}
