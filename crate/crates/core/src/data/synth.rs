//! Synthetic stand-ins for the dialogue and emotion corpora.
//!
//! Every fine (12-way) emotion owns a disjoint keyword family. A text's label
//! is decided by the single emotion keyword planted in it, so each
//! granularity is separable by keyword lookup, and the 12 → 6 → 2 projection
//! is a function. Replies are chosen by the 6-way emotion of the utterance
//! and copy its topic noun.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassificationExample, Examples, GenerationExample};
use crate::error::{Error, Result};

pub const E2_LABELS: [&str; 2] = ["positive", "negative"];
pub const E6_LABELS: [&str; 6] = ["anger", "disgust", "fear", "joy", "sadness", "surprise"];
pub const E12_LABELS: [&str; 12] = [
    "anger",
    "boredom",
    "enthusiasm",
    "fun",
    "happiness",
    "hate",
    "love",
    "neutral",
    "relief",
    "sadness",
    "surprise",
    "worry",
];

/// Fine label, its 6-way parent, and its keyword family.
const HIERARCHY: [(&str, &str, [&str; 4]); 12] = [
    ("anger", "anger", ["furious", "enraged", "irate", "livid"]),
    ("boredom", "disgust", ["bored", "dull", "tedious", "monotonous"]),
    ("enthusiasm", "joy", ["eager", "pumped", "keen", "fired"]),
    ("fun", "joy", ["playful", "silly", "amused", "goofy"]),
    ("happiness", "joy", ["happy", "glad", "cheerful", "joyful"]),
    ("hate", "anger", ["hateful", "loathing", "spiteful", "bitter"]),
    ("love", "joy", ["adoring", "smitten", "devoted", "tender"]),
    ("neutral", "disgust", ["indifferent", "meh", "blank", "unmoved"]),
    ("relief", "joy", ["relieved", "calmer", "unburdened", "soothed"]),
    ("sadness", "sadness", ["sad", "gloomy", "heartbroken", "miserable"]),
    ("surprise", "surprise", ["shocked", "astonished", "stunned", "amazed"]),
    ("worry", "fear", ["anxious", "nervous", "uneasy", "scared"]),
];

const TOPICS: [&str; 20] = [
    "job",
    "exam",
    "trip",
    "dog",
    "party",
    "game",
    "movie",
    "garden",
    "car",
    "phone",
    "class",
    "dinner",
    "concert",
    "house",
    "project",
    "book",
    "team",
    "weekend",
    "wedding",
    "interview",
];

const UTTERANCES: [&str; 5] = [
    "i feel {kw} about the {topic}",
    "the {topic} made me {kw}",
    "honestly my {topic} left me {kw} today",
    "{kw} is how i feel about my {topic}",
    "after the {topic} i was so {kw}",
];

const FILLERS: [&str; 6] = ["well", "so", "um", "really", "you know", "anyway"];

fn reply_template(standard: &str) -> &'static str {
    match standard {
        "anger" => "calm down , the {topic} is not worth it",
        "disgust" => "that {topic} sounds really unpleasant",
        "fear" => "do not worry , the {topic} will be fine",
        "joy" => "that is great news about your {topic}",
        "sadness" => "i am sorry about your {topic}",
        _ => "wow , i did not expect that {topic}",
    }
}

/// The 6-way parent of a 12-way label.
pub fn fine_to_standard(fine: &str) -> Option<&'static str> {
    HIERARCHY.iter().find(|(f, _, _)| *f == fine).map(|(_, s, _)| *s)
}

/// The 2-way polarity of a 6-way label.
pub fn standard_to_coarse(standard: &str) -> Option<&'static str> {
    match standard {
        "joy" | "surprise" => Some("positive"),
        "anger" | "disgust" | "fear" | "sadness" => Some("negative"),
        _ => None,
    }
}

/// Keyword family of a 12-way label.
pub fn keywords(fine: &str) -> Option<&'static [&'static str]> {
    HIERARCHY
        .iter()
        .find(|(f, _, _)| *f == fine)
        .map(|(_, _, k)| k.as_slice())
}

pub fn topics() -> &'static [&'static str] {
    &TOPICS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Generation,
    E2,
    E6,
    E12,
}

impl SynthKind {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            SynthKind::Generation => &[],
            SynthKind::E2 => &E2_LABELS,
            SynthKind::E6 => &E6_LABELS,
            SynthKind::E12 => &E12_LABELS,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "r" | "gen" | "generation" => Some(SynthKind::Generation),
            "e2" => Some(SynthKind::E2),
            "e6" => Some(SynthKind::E6),
            "e12" => Some(SynthKind::E12),
            _ => None,
        }
    }
}

fn fine_labels_under(kind: SynthKind, label: &str) -> Vec<&'static str> {
    HIERARCHY
        .iter()
        .filter(|(fine, standard, _)| match kind {
            SynthKind::E12 => *fine == label,
            SynthKind::E6 | SynthKind::Generation => *standard == label,
            SynthKind::E2 => standard_to_coarse(standard) == Some(label),
        })
        .map(|(fine, _, _)| *fine)
        .collect()
}

fn utterance(rng: &mut ChaCha8Rng, fine: &str, topic: &str) -> String {
    let kw = keywords(fine).expect("fine label").choose(rng).expect("non-empty");
    let body = UTTERANCES
        .choose(rng)
        .expect("non-empty")
        .replace("{kw}", kw)
        .replace("{topic}", topic);
    if rng.gen_bool(0.5) {
        format!("{} {body}", FILLERS.choose(rng).expect("non-empty"))
    } else {
        body
    }
}

/// Seeded synthetic corpus of `size` examples with balanced labels.
pub fn gen_synthetic(kind: SynthKind, size: usize, seed: u64) -> Result<Examples> {
    if size < 10 {
        return Err(Error::Data(format!(
            "synthetic corpora need at least 10 examples, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: &[&str] = if kind == SynthKind::Generation {
        &E6_LABELS
    } else {
        kind.labels()
    };
    let mut order: Vec<&str> = (0..size).map(|i| classes[i % classes.len()]).collect();
    order.shuffle(&mut rng);
    let mut gen = Vec::new();
    let mut cls = Vec::new();
    for label in order {
        let fine = *fine_labels_under(kind, label)
            .choose(&mut rng)
            .expect("every label has a fine child");
        let topic = *TOPICS.choose(&mut rng).expect("non-empty");
        let text = utterance(&mut rng, fine, topic);
        match kind {
            SynthKind::Generation => gen.push(GenerationExample {
                utterance: text,
                response: reply_template(label).replace("{topic}", topic),
            }),
            _ => cls.push(ClassificationExample {
                text,
                label: label.to_string(),
            }),
        }
    }
    Ok(match kind {
        SynthKind::Generation => Examples::Generation(gen),
        _ => Examples::Classification(cls),
    })
}
