//! Rich-text tag codec: lowercased, punctuation-stripped tokens plus one tag
//! per token carrying first-letter capitalization and trailing punctuation.

use crate::encoders::EOU_TOKEN;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Punct {
    None,
    Comma,
    Period,
    Question,
}

impl Punct {
    pub fn mark(&self) -> Option<char> {
        match self {
            Punct::None => None,
            Punct::Comma => Some(','),
            Punct::Period => Some('.'),
            Punct::Question => Some('?'),
        }
    }

    fn index(&self) -> usize {
        match self {
            Punct::None => 0,
            Punct::Comma => 1,
            Punct::Period => 2,
            Punct::Question => 3,
        }
    }

    fn from_index(i: usize) -> Punct {
        match i {
            0 => Punct::None,
            1 => Punct::Comma,
            2 => Punct::Period,
            _ => Punct::Question,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Punct::None => "0",
            Punct::Comma => "Cm",
            Punct::Period => "Pr",
            Punct::Question => "Qus",
        }
    }
}

/// Capitalization x punctuation, 8 combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RichTag {
    pub cap: bool,
    pub punct: Punct,
}

impl RichTag {
    pub const COUNT: usize = 8;

    pub fn new(cap: bool, punct: Punct) -> Self {
        RichTag { cap, punct }
    }

    pub fn id(&self) -> usize {
        self.punct.index() * 2 + self.cap as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id >= Self::COUNT {
            return Err(Error::Data(format!("tag id {id} out of range")));
        }
        Ok(RichTag {
            cap: id % 2 == 1,
            punct: Punct::from_index(id / 2),
        })
    }

    /// "Cp:Pr"-style label: capitalization part then punctuation part.
    pub fn label(&self) -> String {
        format!("{}:{}", if self.cap { "Cp" } else { "0" }, self.punct.label())
    }

    pub fn label_of_id(id: usize) -> String {
        RichTag::from_id(id)
            .map(|t| t.label())
            .unwrap_or_else(|_| id.to_string())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Split a rich sentence into normalized tokens and tags. Supported input:
/// whitespace-separated words of letters/digits/apostrophes, optionally
/// carrying one trailing ',', '.' or '?', capitalized only on the first
/// letter. Anything else is an unsupported-punctuation error.
pub fn encode_rich_text(rich: &str) -> Result<(Vec<String>, Vec<RichTag>)> {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for word in rich.split_whitespace() {
        let mut chars: Vec<char> = word.chars().collect();
        let punct = match chars.last() {
            Some(',') => Punct::Comma,
            Some('.') => Punct::Period,
            Some('?') => Punct::Question,
            _ => Punct::None,
        };
        if punct != Punct::None {
            chars.pop();
        }
        if chars.is_empty() {
            return Err(Error::Data(format!("bare punctuation token {word:?}")));
        }
        if let Some(&bad) = chars.iter().find(|c| !is_word_char(**c)) {
            return Err(Error::UnsupportedPunct(bad));
        }
        let cap = chars[0].is_uppercase();
        let normalized: String = chars.iter().flat_map(|c| c.to_lowercase()).collect();
        tokens.push(normalized);
        tags.push(RichTag { cap, punct });
    }
    Ok((tokens, tags))
}

/// Inverse of encode_rich_text: apply capitalization, append punctuation,
/// join with single spaces.
pub fn decode_tags(tokens: &[String], tags: &[RichTag]) -> Result<String> {
    if tokens.len() != tags.len() {
        return Err(Error::LengthMismatch {
            left: tokens.len(),
            right: tags.len(),
        });
    }
    let mut out = String::new();
    for (i, (token, tag)) in tokens.iter().zip(tags).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        if tag.cap {
            let mut chars = token.chars();
            if let Some(first) = chars.next() {
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            }
        } else {
            out.push_str(token);
        }
        if let Some(mark) = tag.punct.mark() {
            out.push(mark);
        }
    }
    Ok(out)
}

/// Join N-best hypotheses with the end-of-utterance token, no trailing [EOU].
pub fn concat_nbest(hypotheses: &[Vec<String>]) -> Result<Vec<String>> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("n-best list"));
    }
    let mut out = Vec::new();
    for (i, hyp) in hypotheses.iter().enumerate() {
        if i > 0 {
            out.push(EOU_TOKEN.to_string());
        }
        out.extend(hyp.iter().cloned());
    }
    Ok(out)
}

/// Speaker roles for two-party dialogs.
pub const ROLE_CLIENT: usize = 0;
pub const ROLE_AGENT: usize = 1;

pub fn role_label(role: usize) -> &'static str {
    if role == ROLE_AGENT {
        "agent"
    } else {
        "client"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn encodes_the_reference_sample() {
        let (tokens, tags) = encode_rich_text("Thank you. I understand. Do you?").unwrap();
        assert_eq!(tokens, strs(&["thank", "you", "i", "understand", "do", "you"]));
        let labels: Vec<String> = tags.iter().map(|t| t.label()).collect();
        assert_eq!(labels, ["Cp:0", "0:Pr", "Cp:0", "0:Pr", "Cp:0", "0:Qus"]);
    }

    #[test]
    fn decodes_the_reference_sample() {
        let tokens = strs(&["thank", "you", "i", "understand", "do", "you"]);
        let tags = vec![
            RichTag::new(true, Punct::None),
            RichTag::new(false, Punct::Period),
            RichTag::new(true, Punct::None),
            RichTag::new(false, Punct::Period),
            RichTag::new(true, Punct::None),
            RichTag::new(false, Punct::Question),
        ];
        assert_eq!(
            decode_tags(&tokens, &tags).unwrap(),
            "Thank you. I understand. Do you?"
        );
    }

    #[test]
    fn plain_word_gets_null_tag() {
        let (tokens, tags) = encode_rich_text("hello").unwrap();
        assert_eq!(tokens, strs(&["hello"]));
        assert_eq!(tags[0].label(), "0:0");
    }

    #[test]
    fn all_null_tags_decode_to_lowercase_join() {
        let tokens = strs(&["one", "two", "three"]);
        let tags = vec![RichTag::new(false, Punct::None); 3];
        assert_eq!(decode_tags(&tokens, &tags).unwrap(), "one two three");
    }

    #[test]
    fn single_capitalized_question_token() {
        let tokens = strs(&["token"]);
        let tags = vec![RichTag::new(true, Punct::Question)];
        assert_eq!(decode_tags(&tokens, &tags).unwrap(), "Token?");
    }

    #[test]
    fn unsupported_punctuation_names_the_character() {
        match encode_rich_text("hello!") {
            Err(Error::UnsupportedPunct(c)) => assert_eq!(c, '!'),
            other => panic!("unexpected {other:?}"),
        }
        assert!(encode_rich_text("semi;colon").is_err());
    }

    #[test]
    fn apostrophes_are_word_characters() {
        let (tokens, tags) = encode_rich_text("I don't know.").unwrap();
        assert_eq!(tokens, strs(&["i", "don't", "know"]));
        assert_eq!(tags[2].label(), "0:Pr");
    }

    #[test]
    fn tag_ids_cover_all_eight_combinations() {
        let mut seen = std::collections::HashSet::new();
        for cap in [false, true] {
            for punct in [Punct::None, Punct::Comma, Punct::Period, Punct::Question] {
                let tag = RichTag::new(cap, punct);
                assert_eq!(RichTag::from_id(tag.id()).unwrap(), tag);
                seen.insert(tag.id());
            }
        }
        assert_eq!(seen.len(), RichTag::COUNT);
        assert!(RichTag::from_id(8).is_err());
    }

    #[test]
    fn round_trip_on_supported_sentences() {
        for s in [
            "Plain words only",
            "Yes, we can.",
            "Really?",
            "We bought apples, pears and plums.",
            "Stop.",
            "thank you. I understand. Do you?",
        ] {
            let (tokens, tags) = encode_rich_text(s).unwrap();
            assert_eq!(decode_tags(&tokens, &tags).unwrap(), s, "sentence {s:?}");
        }
    }

    #[test]
    fn concat_nbest_cases() {
        let one = vec![strs(&["a", "b"])];
        assert_eq!(concat_nbest(&one).unwrap(), strs(&["a", "b"]));
        let two = vec![strs(&["a", "b"]), strs(&["c"])];
        assert_eq!(concat_nbest(&two).unwrap(), strs(&["a", "b", "[EOU]", "c"]));
        let swapped = vec![strs(&["c"]), strs(&["a", "b"])];
        assert_ne!(concat_nbest(&two).unwrap(), concat_nbest(&swapped).unwrap());
        assert!(concat_nbest(&[]).is_err());
    }
}
