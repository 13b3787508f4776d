//! Toy vocabulary, lexicon tagger, and prompt token encoding.

use crate::error::{Error, Result};

pub const NULL_TOKEN: usize = 0;
pub const NOUNS: [&str; 8] = ["circle", "square", "triangle", "stripe", "grid", "dot", "ring", "cross"];
pub const VOCAB_SIZE: usize = NOUNS.len() + 1;
/// Token slots per prompt: the leading null token plus up to three nouns.
pub const PROMPT_LEN: usize = 4;

const ADJECTIVES: [&str; 14] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "shiny", "small", "large",
    "bright", "dark", "striped",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Noun,
    #[serde(rename = "adj")]
    Adjective,
    Other,
}

/// Fixed-lexicon part-of-speech tagger over the toy vocabulary.
pub fn tag_word(word: &str) -> Tag {
    let w = word.to_ascii_lowercase();
    if NOUNS.contains(&w.as_str()) {
        Tag::Noun
    } else if ADJECTIVES.contains(&w.as_str()) {
        Tag::Adjective
    } else {
        Tag::Other
    }
}

pub fn tag_prompt(text: &str) -> Vec<(String, Tag)> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (w.to_ascii_lowercase(), tag_word(w)))
        .collect()
}

pub fn token_id(noun: &str) -> Result<usize> {
    NOUNS
        .iter()
        .position(|&n| n == noun)
        .map(|i| i + 1)
        .ok_or_else(|| Error::Vocabulary(noun.to_string()))
}

pub fn token_word(id: usize) -> Option<&'static str> {
    match id {
        0 => Some("<null>"),
        i if i <= NOUNS.len() => Some(NOUNS[i - 1]),
        _ => None,
    }
}

/// `[null, noun ids…]` padded with null to [`PROMPT_LEN`].
pub fn encode_nouns<S: AsRef<str>>(nouns: &[S]) -> Result<Vec<usize>> {
    if nouns.len() >= PROMPT_LEN {
        return Err(Error::Config(format!(
            "at most {} nouns per prompt, got {}",
            PROMPT_LEN - 1,
            nouns.len()
        )));
    }
    let mut ids = vec![NULL_TOKEN];
    for n in nouns {
        ids.push(token_id(n.as_ref())?);
    }
    ids.resize(PROMPT_LEN, NULL_TOKEN);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_pads_with_null() {
        assert_eq!(encode_nouns(&["ring", "circle"]).unwrap(), vec![0, 7, 1, 0]);
        assert_eq!(encode_nouns::<&str>(&[]).unwrap(), vec![0; 4]);
        assert!(matches!(encode_nouns(&["cat"]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn tagger() {
        let t = tag_prompt("a shiny Circle, and a red ring");
        let nouns: Vec<_> = t.iter().filter(|(_, g)| *g == Tag::Noun).map(|(w, _)| w.as_str()).collect();
        assert_eq!(nouns, ["circle", "ring"]);
        assert_eq!(tag_word("red"), Tag::Adjective);
        assert_eq!(tag_word("and"), Tag::Other);
    }
}
