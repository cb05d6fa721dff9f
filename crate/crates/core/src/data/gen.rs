//! Synthetic corpora with a controlled fusion signal. Frames are 8-channel
//! feature rows at a nominal 10 ms step: channels 0-5 carry per-word noise
//! signatures aligned to token spans (the content-based alignment target),
//! channel 6 a prosody/arousal cue, channel 7 speaker timbre. Each task
//! plants part of its labels in the audio channels so a text-only model has
//! a provable ceiling while a fused model does not.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::codec::{concat_nbest, encode_rich_text, RichTag, ROLE_AGENT, ROLE_CLIENT};
use crate::error::{Error, Result};
use crate::metrics::{segment_turns, Turn};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Utterance;

pub const D_IN: usize = 8;
pub const SIGNATURE_CHANNELS: usize = 6;
/// Prosody (punct) / arousal (sentiment) / intent-cue channel.
pub const AROUSAL_CHANNEL: usize = 6;
/// Speaker-timbre channel (roles).
pub const TIMBRE_CHANNEL: usize = 7;

pub const SENTIMENT_CLASSES: usize = 7;
pub const N_INTENTS: usize = 6;
pub const N_ENTITIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Punct,
    Roles,
    Sentiment,
    Intent,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "punct" => Ok(Task::Punct),
            "roles" => Ok(Task::Roles),
            "sentiment" => Ok(Task::Sentiment),
            "intent" => Ok(Task::Intent),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Punct => "punct",
            Task::Roles => "roles",
            Task::Sentiment => "sentiment",
            Task::Intent => "intent",
        }
    }

    pub fn is_tagging(&self) -> bool {
        matches!(self, Task::Punct | Task::Roles)
    }

    pub fn n_tags(&self) -> Option<usize> {
        match self {
            Task::Punct => Some(RichTag::COUNT),
            Task::Roles => Some(2),
            _ => None,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Task::Sentiment => Some(SENTIMENT_CLASSES),
            Task::Intent => Some(N_INTENTS),
            _ => None,
        }
    }

    pub fn n_classes2(&self) -> Option<usize> {
        match self {
            Task::Intent => Some(N_ENTITIES),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusMeta {
    /// Ids of utterances whose gold mark is only recoverable acoustically.
    pub ambiguous_ids: BTreeSet<String>,
    /// Generator turn lists for the roles task, keyed by id.
    pub turns: BTreeMap<String, Vec<Turn>>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn fnv64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-word feature signature on channels 0-5.
fn word_signature(word: &str) -> [f64; SIGNATURE_CHANNELS] {
    let mut rng = Rng::new(fnv64(word));
    let mut sig = [0.0; SIGNATURE_CHANNELS];
    for v in sig.iter_mut() {
        *v = rng.normal();
    }
    sig
}

/// Per-token acoustic cue: prosody value at a relative position within the
/// token span, plus a constant timbre value.
#[derive(Debug, Clone, Copy, Default)]
struct TokenCue {
    /// Prosody endpoint: channel 6 ramps linearly from 0 to this value
    /// across the token's frames.
    prosody: f64,
    /// Constant channel 6 offset over the whole token (arousal/intent cues).
    level: f64,
    /// Constant channel 7 value (speaker timbre).
    timbre: f64,
}

/// Render a token sequence into frames: min_f..=max_f frames per token,
/// signatures on channels 0-5, cue channels per token.
fn render_frames(
    tokens: &[String],
    cues: &[TokenCue],
    rng: &mut Rng,
    min_f: usize,
    max_f: usize,
) -> Tensor {
    debug_assert_eq!(tokens.len(), cues.len());
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for (word, cue) in tokens.iter().zip(cues) {
        let n = rng.range(min_f, max_f);
        let sig = word_signature(word);
        for f in 0..n {
            let mut row = [0.0; D_IN];
            for (c, s) in sig.iter().enumerate() {
                row[c] = s + 0.3 * rng.normal();
            }
            let ramp = if n > 1 { f as f64 / (n - 1) as f64 } else { 1.0 };
            row[AROUSAL_CHANNEL] = cue.prosody * ramp + cue.level + 0.05 * rng.normal();
            row[TIMBRE_CHANNEL] = cue.timbre + 0.12 * rng.normal();
            rows.extend_from_slice(&row);
            t += 1;
        }
    }
    Tensor::new(vec![t, D_IN], rows).expect("frame tensor shape")
}

// ---------------------------------------------------------------------------
// punct: template sentences; a designated subset is lexically ambiguous
// between '.' and '?' and the mark lives only in the terminal-rise channel.
// ---------------------------------------------------------------------------

const SUBJECTS: &[&str] = &["we", "they", "i", "you", "people", "customers"];
const VERBS: &[&str] = &["like", "want", "need", "see", "have", "tried", "found", "ordered"];
const OBJECTS: &[&str] = &[
    "the box",
    "the red apple",
    "a new phone",
    "the large order",
    "some fresh bread",
    "the old car",
    "a small gift",
    "the blue shirt",
];
const TIMES: &[&str] = &["today", "now", "again", "yesterday", "sometimes"];
const QWORDS: &[&str] = &["do", "did", "can", "will", "should"];
const LIST_NOUNS: &[&str] = &["apples", "pears", "plums", "grapes", "mangoes", "lemons"];
const INTERJECTIONS: &[&str] = &["yes", "no", "well", "okay"];
const SINGLE_STATEMENTS: &[&str] = &["stop", "wait", "agreed", "done"];
const SINGLE_QUESTIONS: &[&str] = &["really", "right", "sure", "ready"];

/// Word sequences that read equally well as a statement or a question; the
/// terminal mark for these is decided by the prosody channel alone.
const AMBIGUOUS_TEMPLATES: &[&str] = &[
    "you like the red one",
    "they want more time",
    "we start again soon",
    "it works now",
    "he took the last seat",
    "she called back",
    "they open on sundays",
    "you remember the name",
    "it fits in the bag",
    "we meet at noon",
];

struct PunctGen {
    /// Per-template counters for stratified '.'/'?' assignment.
    amb_counters: Vec<usize>,
    amb_phase: Vec<bool>,
    /// Per-interjection counters for the stratified comma coin; the comma
    /// after an interjection is lexically invisible (token sequences match)
    /// and only the pause cue on channel 6 tells.
    comma_counters: Vec<usize>,
    comma_phase: Vec<bool>,
}

impl PunctGen {
    fn new(rng: &mut Rng) -> Self {
        let amb_phase = (0..AMBIGUOUS_TEMPLATES.len()).map(|_| rng.chance(0.5)).collect();
        let comma_phase = (0..INTERJECTIONS.len()).map(|_| rng.chance(0.5)).collect();
        PunctGen {
            amb_counters: vec![0; AMBIGUOUS_TEMPLATES.len()],
            amb_phase,
            comma_counters: vec![0; INTERJECTIONS.len()],
            comma_phase,
        }
    }

    fn capitalize(s: &str) -> String {
        let mut chars = s.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
            None => String::new(),
        }
    }

    fn unambiguous_sentence(&mut self, rng: &mut Rng) -> String {
        let kind = rng.uniform();
        let body = if kind < 0.50 {
            let mut s = format!(
                "{} {} {}",
                rng.pick(SUBJECTS),
                rng.pick(VERBS),
                rng.pick(OBJECTS)
            );
            if rng.chance(0.4) {
                s.push(' ');
                s.push_str(rng.pick(TIMES));
            }
            s.push('.');
            s
        } else if kind < 0.58 {
            format!(
                "{} {} {} {}?",
                rng.pick(QWORDS),
                rng.pick(SUBJECTS),
                rng.pick(VERBS),
                rng.pick(OBJECTS)
            )
        } else if kind < 0.72 {
            // list sentence with commas
            let mut nouns: Vec<&str> = LIST_NOUNS.to_vec();
            rng.shuffle(&mut nouns);
            format!(
                "{} bought {}, {} and {}.",
                rng.pick(SUBJECTS),
                nouns[0],
                nouns[1],
                nouns[2]
            )
        } else if kind < 0.87 {
            let i = rng.below(INTERJECTIONS.len());
            let comma = (self.comma_counters[i] % 2 == 0) ^ self.comma_phase[i];
            self.comma_counters[i] += 1;
            format!(
                "{}{} {} {} {}.",
                INTERJECTIONS[i],
                if comma { "," } else { "" },
                rng.pick(SUBJECTS),
                rng.pick(VERBS),
                rng.pick(OBJECTS)
            )
        } else if rng.chance(0.5) {
            format!("{}.", rng.pick(SINGLE_STATEMENTS))
        } else {
            format!("{}?", rng.pick(SINGLE_QUESTIONS))
        };
        Self::capitalize(&body)
    }

    /// Returns (rich text, ambiguous).
    fn utterance(&mut self, rng: &mut Rng) -> (String, bool) {
        if rng.chance(0.55) {
            let t = rng.below(AMBIGUOUS_TEMPLATES.len());
            // stratified: each template alternates '.' and '?' so the mark is
            // statistically independent of the token sequence
            let qus = (self.amb_counters[t] % 2 == 0) ^ self.amb_phase[t];
            self.amb_counters[t] += 1;
            let mark = if qus { '?' } else { '.' };
            let rich = format!("{}{}", Self::capitalize(AMBIGUOUS_TEMPLATES[t]), mark);
            (rich, true)
        } else {
            let n_sentences = rng.range(1, 3);
            let parts: Vec<String> = (0..n_sentences)
                .map(|_| self.unambiguous_sentence(rng))
                .collect();
            (parts.join(" "), false)
        }
    }
}

fn gen_punct_utterance(gen: &mut PunctGen, id: String, rng: &mut Rng) -> Result<(Utterance, bool)> {
    let (rich, ambiguous) = gen.utterance(rng);
    let (tokens, tags) = encode_rich_text(&rich)?;
    // prosody: terminal fall for '.', terminal rise for '?', nothing else
    let cues: Vec<TokenCue> = tags
        .iter()
        .map(|tag| match tag.punct {
            crate::data::codec::Punct::Period => TokenCue {
                prosody: -1.0,
                ..Default::default()
            },
            crate::data::codec::Punct::Question => TokenCue {
                prosody: 1.0,
                ..Default::default()
            },
            // the comma reads as a pause level; after an interjection this
            // is the only trace of it
            crate::data::codec::Punct::Comma => TokenCue {
                level: 0.7,
                ..Default::default()
            },
            crate::data::codec::Punct::None => TokenCue::default(),
        })
        .collect();
    let frames = render_frames(&tokens, &cues, rng, 4, 7);
    let tag_ids: Vec<usize> = tags.iter().map(|t| t.id()).collect();
    Ok((
        Utterance {
            id,
            frames: Some(frames),
            tokens,
            tags: Some(tag_ids),
            label: None,
            label2: None,
        },
        ambiguous,
    ))
}

// ---------------------------------------------------------------------------
// roles: two-role dialogs; neutral boundary segments are only resolvable
// from the speaker-timbre channel.
// ---------------------------------------------------------------------------

const AGENT_WORDS: &[&str] = &[
    "welcome", "assist", "account", "policy", "confirm", "reference", "ticket", "transfer",
    "department", "apologies", "certainly", "available",
];
const CLIENT_WORDS: &[&str] = &[
    "my", "broken", "refund", "angry", "waiting", "charged", "bill", "cancel", "please",
    "yesterday", "problem", "nothing",
];
const NEUTRAL_WORDS: &[&str] = &[
    "yes", "okay", "um", "uh", "the", "number", "five", "one", "nine", "so", "right", "that",
    "two", "three", "four", "six", "seven", "eight", "zero", "oh", "well", "hm", "sure", "see",
    "ten", "eleven", "twelve", "twenty", "thirty", "forty", "fifty", "sixty", "hundred", "dash",
    "point", "area", "code", "extension", "pound", "star",
];

fn role_word(role: usize, rng: &mut Rng) -> String {
    let bank = if rng.chance(0.85) {
        if role == ROLE_AGENT {
            AGENT_WORDS
        } else {
            CLIENT_WORDS
        }
    } else {
        NEUTRAL_WORDS
    };
    rng.pick(bank).to_string()
}

const TIMBRE_AGENT: f64 = 0.8;
const TIMBRE_CLIENT: f64 = -0.8;

fn gen_roles_utterance(id: String, rng: &mut Rng) -> (Utterance, Vec<Turn>) {
    let n_turns = rng.range(3, 7);
    let mut role = if rng.chance(0.5) { ROLE_AGENT } else { ROLE_CLIENT };

    let mut tokens: Vec<String> = Vec::new();
    let mut roles: Vec<usize> = Vec::new();
    for i in 0..n_turns {
        let body = rng.range(3, 5);
        for _ in 0..body {
            tokens.push(role_word(role, rng));
            roles.push(role);
        }
        let next = 1 - role;
        if i + 1 < n_turns && rng.chance(0.6) {
            // a lexically neutral boundary segment, split between the two
            // turns at a random point; only channel 7 knows the truth
            let len = rng.range(2, 4);
            let k = rng.below(len + 1);
            for j in 0..len {
                tokens.push(rng.pick(NEUTRAL_WORDS).to_string());
                roles.push(if j < k { role } else { next });
            }
        }
        role = next;
    }

    let cues: Vec<TokenCue> = roles
        .iter()
        .map(|&r| TokenCue {
            timbre: if r == ROLE_AGENT { TIMBRE_AGENT } else { TIMBRE_CLIENT },
            ..Default::default()
        })
        .collect();
    // longer token spans keep per-token resolution through the 4x conv
    // downsampling, so the timbre of a single token stays readable
    let frames = render_frames(&tokens, &cues, rng, 6, 9);
    let turns = segment_turns(&roles);
    (
        Utterance {
            id,
            frames: Some(frames),
            tokens,
            tags: Some(roles),
            label: None,
            label2: None,
        },
        turns,
    )
}

// ---------------------------------------------------------------------------
// sentiment: 7 classes from signed text polarity times an audio-only
// magnitude; 10% of samples are text-only with a fixed magnitude.
// ---------------------------------------------------------------------------

const OPENERS: &[&str] = &["the service was", "i found it", "this is", "it felt", "overall it was"];
const POSITIVE: &[&str] = &["good", "great", "lovely", "pleasant", "delightful"];
const NEGATIVE: &[&str] = &["bad", "awful", "terrible", "poor", "dreadful"];
const NEUTRAL_POL: &[&str] = &["okay", "fine", "average", "ordinary", "plain"];
const TAILS: &[&str] = &["for us", "in the end", "all along", "this time", "as expected"];

const AROUSAL_LEVELS: [f64; 3] = [0.25, 0.6, 1.0];

fn gen_sentiment_utterance(id: String, rng: &mut Rng) -> Utterance {
    let polarity: i64 = rng.below(3) as i64 - 1;
    let text_only = rng.chance(0.10);
    // text-only samples carry a fixed magnitude so their label stays
    // recoverable without audio
    let magnitude: i64 = if text_only { 2 } else { rng.range(1, 3) as i64 };
    let label = (polarity * magnitude + 3) as usize;

    let bank = match polarity {
        1 => POSITIVE,
        -1 => NEGATIVE,
        _ => NEUTRAL_POL,
    };
    let mut text = format!("{} {}", rng.pick(OPENERS), rng.pick(bank));
    if rng.chance(0.6) {
        text.push(' ');
        text.push_str(rng.pick(TAILS));
    }
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();

    let frames = if text_only {
        None
    } else {
        let level = AROUSAL_LEVELS[(magnitude - 1) as usize];
        let cues: Vec<TokenCue> = tokens
            .iter()
            .map(|_| TokenCue {
                level,
                ..Default::default()
            })
            .collect();
        Some(render_frames(&tokens, &cues, rng, 4, 7))
    };

    Utterance {
        id,
        frames,
        tokens,
        tags: None,
        label: Some(label),
        label2: None,
    }
}

// ---------------------------------------------------------------------------
// intent: intent+entity pairs over 2-best noisy hypotheses joined by [EOU];
// 15% of samples garble the intent word and channel 6 disambiguates.
// ---------------------------------------------------------------------------

const INTENT_PHRASES: [&str; N_INTENTS] = [
    "place an order for",
    "track the order of",
    "cancel the order of",
    "pay the bill for",
    "opening hours for",
    "complain about",
];
const ENTITY_WORDS: [&str; N_ENTITIES] = ["pizza", "burger", "drink", "account", "store"];
const FILLERS: &[&str] = &["please", "thanks", "now", "again", "for me"];
const GARBLE: &str = "mumble";
/// The lexically confusable pair when the intent word is garbled.
const CONFUSABLE: (usize, usize) = (0, 2); // place vs cancel

fn noisy_hypothesis(true_tokens: &[String], rng: &mut Rng) -> Vec<String> {
    let mut out = Vec::new();
    for t in true_tokens {
        let r = rng.uniform();
        if r < 0.10 && true_tokens.len() > 2 {
            continue; // dropped word
        }
        if r < 0.15 {
            out.push(rng.pick(NEUTRAL_WORDS).to_string());
        } else {
            out.push(t.clone());
        }
    }
    if out.is_empty() {
        out.push(true_tokens[0].clone());
    }
    out
}

fn gen_intent_utterance(id: String, rng: &mut Rng) -> (Utterance, bool) {
    let ambiguous = rng.chance(0.15);
    let intent = if ambiguous {
        if rng.chance(0.5) {
            CONFUSABLE.0
        } else {
            CONFUSABLE.1
        }
    } else {
        rng.below(N_INTENTS)
    };
    let entity = rng.below(N_ENTITIES);

    let mut spoken: Vec<String> = INTENT_PHRASES[intent]
        .split_whitespace()
        .map(str::to_string)
        .collect();
    spoken.push(ENTITY_WORDS[entity].to_string());
    if rng.chance(0.5) {
        for w in rng.pick(FILLERS).split_whitespace() {
            spoken.push(w.to_string());
        }
    }

    // frames follow the spoken utterance; channel 6 resolves the confusable
    // pair when the text is garbled
    let cue_level = if ambiguous {
        if intent == CONFUSABLE.0 {
            0.9
        } else {
            -0.9
        }
    } else {
        0.0
    };
    let cues: Vec<TokenCue> = spoken
        .iter()
        .map(|_| TokenCue {
            level: cue_level,
            ..Default::default()
        })
        .collect();
    let frames = render_frames(&spoken, &cues, rng, 4, 7);

    // the text stream is 2 noisy hypotheses; garbling erases the intent cue
    let mut visible = spoken.clone();
    if ambiguous {
        // the confusable pair differs only in the leading verb
        visible[0] = GARBLE.to_string();
    }
    let hyp1 = noisy_hypothesis(&visible, rng);
    let hyp2 = noisy_hypothesis(&visible, rng);
    let tokens = concat_nbest(&[hyp1, hyp2]).expect("nonempty n-best");

    (
        Utterance {
            id,
            frames: Some(frames),
            tokens,
            tags: None,
            label: Some(intent),
            label2: Some(entity),
        },
        ambiguous,
    )
}

// ---------------------------------------------------------------------------

/// Deterministic synthetic corpus with an 80/10/10 split.
pub fn gen_corpus(task: Task, n: usize, seed: u64) -> Result<Corpus> {
    if n < 30 {
        return Err(Error::Config(format!("corpus size {n} below minimum 30")));
    }
    let mut rng = Rng::new(seed ^ fnv64(task.as_str()));
    let mut meta = CorpusMeta::default();
    let mut all = Vec::with_capacity(n);

    let mut punct_gen = PunctGen::new(&mut rng);
    for i in 0..n {
        let base_id = format!("{}-{i:06}", task.as_str());
        match task {
            Task::Punct => {
                let (mut utt, ambiguous) = gen_punct_utterance(&mut punct_gen, base_id, &mut rng)?;
                if ambiguous {
                    utt.id.push_str("-amb");
                    meta.ambiguous_ids.insert(utt.id.clone());
                }
                all.push(utt);
            }
            Task::Roles => {
                let (utt, turns) = gen_roles_utterance(base_id, &mut rng);
                meta.turns.insert(utt.id.clone(), turns);
                all.push(utt);
            }
            Task::Sentiment => all.push(gen_sentiment_utterance(base_id, &mut rng)),
            Task::Intent => {
                let (mut utt, ambiguous) = gen_intent_utterance(base_id, &mut rng);
                if ambiguous {
                    utt.id.push_str("-amb");
                    meta.ambiguous_ids.insert(utt.id.clone());
                }
                all.push(utt);
            }
        }
    }

    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Corpus {
        train: all,
        val,
        test,
        meta,
    })
}
