//! Deterministic synthetic corpora for desk-scale experiments.
//!
//! Emotion corpus: every utterance holds one keyword, a few noise words and,
//! for polar classes, one sentiment word. The keyword comes from the
//! utterance's own class with probability [`OWN_KEYWORD_RATE`] and from
//! another class otherwise. Keywords are organised in groups of four
//! interchangeable words, and only the first group of each class is drawn
//! from. The companion knowledge-graph fixture links each group member to
//! the other three, and the companion lexicon gives sentiment
//! words a valence whose sign matches the class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Conversation, EmotionLabel, SpeakerId, Utterance};
use crate::kgclient::{Fixture, RelatedTerm};
use crate::sentlex::Lexicon;

pub const OWN_KEYWORD_RATE: f64 = 0.8;
/// Chance that the keyword is its group's first (most common) member.
pub const HEAD_WORD_RATE: f64 = 0.7;
pub const CONVERSATION_LEN: usize = 10;
const NOISE_PER_UTTERANCE: usize = 2;
const SPEAKER_SWITCH_RATE: f64 = 0.6;

type Group = [&'static str; 4];
const ACTIVE_GROUPS: usize = 1;

const KEYWORD_GROUPS: [[Group; 4]; 6] = [
    // Happy
    [
        ["joyful", "glad", "cheerful", "merry"],
        ["smile", "grin", "beam", "chuckle"],
        ["sunshine", "daylight", "sunbeam", "brightness"],
        ["delight", "pleasure", "bliss", "gladness"],
    ],
    // Sad
    [
        ["tears", "weeping", "sobbing", "crying"],
        ["lonely", "alone", "isolated", "forlorn"],
        ["gloomy", "dreary", "bleak", "somber"],
        ["grief", "sorrow", "mourning", "heartache"],
    ],
    // Neutral
    [
        ["schedule", "agenda", "timetable", "calendar"],
        ["report", "document", "memo", "summary"],
        ["meeting", "session", "appointment", "gathering"],
        ["parcel", "package", "delivery", "shipment"],
    ],
    // Angry
    [
        ["furious", "enraged", "livid", "irate"],
        ["shout", "yell", "scream", "holler"],
        ["outrage", "fury", "wrath", "rage"],
        ["hostile", "aggressive", "belligerent", "combative"],
    ],
    // Excited
    [
        ["thrilled", "ecstatic", "elated", "exhilarated"],
        ["adventure", "expedition", "journey", "quest"],
        ["party", "celebration", "festival", "gala"],
        ["wow", "amazing", "incredible", "awesome"],
    ],
    // Frustrated
    [
        ["stuck", "trapped", "jammed", "blocked"],
        ["annoyed", "irritated", "exasperated", "bothered"],
        ["delay", "holdup", "setback", "lag"],
        ["broken", "busted", "faulty", "defective"],
    ],
];

const POSITIVE_WORDS: [&str; 20] = [
    "nice",
    "good",
    "lovely",
    "fine",
    "sweet",
    "pleasant",
    "wonderful",
    "great",
    "superb",
    "charming",
    "kind",
    "warm",
    "cozy",
    "fantastic",
    "splendid",
    "terrific",
    "brilliant",
    "gentle",
    "neat",
    "pretty",
];

const NEGATIVE_WORDS: [&str; 20] = [
    "bad",
    "awful",
    "terrible",
    "nasty",
    "poor",
    "horrid",
    "dreadful",
    "ugly",
    "grim",
    "miserable",
    "lousy",
    "rotten",
    "vile",
    "gross",
    "harsh",
    "bitter",
    "painful",
    "sour",
    "dismal",
    "wretched",
];

const NOISE_WORDS: [&str; 30] = [
    "table", "window", "paper", "street", "coffee", "river", "chair", "phone", "garden", "morning",
    "train", "door", "music", "bread", "letter", "city", "car", "book", "lamp", "shoe", "cloud",
    "stone", "pencil", "basket", "bottle", "carpet", "mirror", "ladder", "ticket", "wallet",
];

/// Marker words for order-prediction corpora; utterance `i` carries
/// `ORDER_MARKERS[i % 4]`.
pub const ORDER_MARKERS: [&str; 4] = ["north", "east", "south", "west"];

/// -1, 0 or +1 for the class's sentiment polarity.
pub fn class_polarity(label: EmotionLabel) -> i8 {
    match label {
        EmotionLabel::Happy | EmotionLabel::Excited => 1,
        EmotionLabel::Neutral => 0,
        EmotionLabel::Sad | EmotionLabel::Angry | EmotionLabel::Frustrated => -1,
    }
}

/// Every keyword of `label`, group by group.
pub fn class_keywords(label: EmotionLabel) -> impl Iterator<Item = &'static str> {
    KEYWORD_GROUPS[label.code()].iter().flatten().copied()
}

/// Knowledge-graph fixture linking each keyword to the rest of its group.
pub fn keyword_fixture() -> Fixture {
    let mut map = BTreeMap::new();
    for group in KEYWORD_GROUPS.iter().flatten() {
        for (i, &word) in group.iter().enumerate() {
            let related = group
                .iter()
                .cycle()
                .skip(i + 1)
                .take(group.len() - 1)
                .zip([2.0, 1.5, 1.0])
                .map(|(&term, weight)| RelatedTerm {
                    term: term.to_string(),
                    weight,
                    relation: "SimilarTo".to_string(),
                })
                .collect();
            map.insert(word.to_string(), related);
        }
    }
    Fixture::from_map(map)
}

/// Valences spread over 1.5..=3.4 so sentiment words differ in strength.
pub fn sentiment_lexicon() -> Lexicon {
    let strength = |i: usize| 1.5 + 0.1 * i as f64;
    Lexicon::from_pairs(
        POSITIVE_WORDS
            .iter()
            .enumerate()
            .map(|(i, &w)| (w, strength(i)))
            .chain(
                NEGATIVE_WORDS
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| (w, -strength(i))),
            ),
    )
}

pub struct SynthCorpus {
    pub conversations: Vec<Conversation>,
    pub fixture: Fixture,
    pub lexicon: Lexicon,
}

fn sentence(mut words: Vec<&str>, rng: &mut ChaCha8Rng) -> String {
    words.shuffle(rng);
    let mut text = words.join(" ");
    if let Some(first) = text.get(..1) {
        let upper = first.to_uppercase();
        text.replace_range(..1, &upper);
    }
    text.push('.');
    text
}

fn emotion_text(label: EmotionLabel, rng: &mut ChaCha8Rng) -> String {
    let keyword_class = if rng.gen_bool(OWN_KEYWORD_RATE) {
        label
    } else {
        let others: Vec<EmotionLabel> = EmotionLabel::ALL
            .into_iter()
            .filter(|&l| l != label)
            .collect();
        *others.choose(rng).expect("five other classes")
    };
    let group = &KEYWORD_GROUPS[keyword_class.code()][..ACTIVE_GROUPS]
        .choose(rng)
        .expect("groups");
    let keyword = if rng.gen_bool(HEAD_WORD_RATE) {
        group[0]
    } else {
        group[1..].choose(rng).expect("group members")
    };
    let mut words = vec![keyword];
    words.extend(NOISE_WORDS.choose_multiple(rng, NOISE_PER_UTTERANCE));
    match class_polarity(label) {
        1 => words.push(POSITIVE_WORDS.choose(rng).expect("words")),
        -1 => words.push(NEGATIVE_WORDS.choose(rng).expect("words")),
        _ => {}
    }
    sentence(words, rng)
}

fn conversations_from(
    texts: Vec<(String, Option<EmotionLabel>)>,
    turns: usize,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Vec<Conversation> {
    texts
        .chunks(turns)
        .enumerate()
        .map(|(c, chunk)| {
            let id = format!("{prefix}{c:04}");
            let mut speaker = SpeakerId::P1;
            let utterances = chunk
                .iter()
                .enumerate()
                .map(|(t, (text, label))| {
                    if t > 0 && rng.gen_bool(SPEAKER_SWITCH_RATE) {
                        speaker = speaker.other();
                    }
                    Utterance {
                        conversation_id: id.clone(),
                        turn_index: t as u32,
                        speaker,
                        text: text.clone(),
                        label: *label,
                    }
                })
                .collect();
            Conversation { id, utterances }
        })
        .collect()
}

/// `per_class` labeled utterances for each of the six classes, shuffled and
/// cut into dyadic conversations of [`CONVERSATION_LEN`] turns.
pub fn emotion_corpus(per_class: usize, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<EmotionLabel> = EmotionLabel::ALL
        .into_iter()
        .flat_map(|l| std::iter::repeat_n(l, per_class))
        .collect();
    labels.shuffle(&mut rng);
    let texts = labels
        .into_iter()
        .map(|l| (emotion_text(l, &mut rng), Some(l)))
        .collect();
    SynthCorpus {
        conversations: conversations_from(texts, CONVERSATION_LEN, "syn", &mut rng),
        fixture: keyword_fixture(),
        lexicon: sentiment_lexicon(),
    }
}

/// Unlabeled conversations in which turn `i` contains `ORDER_MARKERS[i % 4]`
/// among noise words, so consecutive turns have a recoverable order.
pub fn ordered_corpus(conversations: usize, turns: usize, seed: u64) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = turns.max(1);
    let texts = (0..conversations * turns)
        .map(|j| {
            let mut words = vec![ORDER_MARKERS[(j % turns) % ORDER_MARKERS.len()]];
            words.extend(NOISE_WORDS.choose_multiple(&mut rng, NOISE_PER_UTTERANCE));
            (sentence(words, &mut rng), None)
        })
        .collect();
    conversations_from(texts, turns, "ord", &mut rng)
}
