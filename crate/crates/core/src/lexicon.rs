//! Closed vocabulary shared by every module.
//!
//! Text is split on whitespace, and trailing `.`, `:` and `?` are peeled off
//! as their own tokens. Detokenizing glues `.` and `:` back onto the previous
//! word, so canonical templated text round-trips exactly.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::LexiconError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

pub const OBJECT_NAMES: [&str; 12] = [
    "fork", "knife", "plate", "cup", "spoon", "bowl", "apple", "banana", "dog", "cat", "ball",
    "book",
];

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "black", "white"];

pub const RELATION_WORDS: [&str; 4] = ["left", "right", "above", "below"];

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

const FUNCTION_WORDS: &[&str] = &[
    "in", "the", "image", "there", "is", "are", "a", "and", "at", "empty", "describe", "how",
    "many", "objects", "where", "relative", "to", "of", "yes", "no", "reason", "result", "?",
    ".", ":", "left", "right", "above", "below",
];

/// Words that attach to the preceding token when detokenizing.
const GLUED: [&str; 2] = [".", ":"];

/// Bijective word <-> id table, frozen after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// The standard lexicon: reserved ids, objects, colors, cells, digits and
    /// template words.
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
            words.extend(OBJECT_NAMES.iter().map(|s| s.to_string()));
            words.extend(COLOR_NAMES.iter().map(|s| s.to_string()));
            for r in 0..4 {
                for c in 0..4 {
                    words.push(cell_word(r, c));
                }
            }
            words.extend((0..10).map(|d| d.to_string()));
            words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
            Vocabulary::from_words(words).expect("standard lexicon is well formed")
        })
    }

    /// Builds a vocabulary from words in id order. The first four entries are
    /// the reserved PAD/BOS/EOS/SEP markers.
    pub fn from_words(words: Vec<String>) -> Result<Self, LexiconError> {
        if words.len() > 256 {
            return Err(LexiconError::TooLarge(words.len()));
        }
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(LexiconError::MissingReserved);
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(LexiconError::Duplicate(w.clone()));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Id of a word that is known to be in the lexicon.
    pub fn expect_id(&self, word: &str) -> TokenId {
        self.id(word)
            .unwrap_or_else(|| panic!("`{word}` is not in the lexicon"))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LexiconError> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let mut word = raw;
            let mut tail = Vec::new();
            while word.len() > 1 {
                match word.chars().last() {
                    Some(ch @ ('.' | ':' | '?')) => {
                        tail.push(ch);
                        word = &word[..word.len() - 1];
                    }
                    _ => break,
                }
            }
            out.push(self.lookup(word)?);
            for ch in tail.into_iter().rev() {
                let mut buf = [0u8; 4];
                out.push(self.lookup(ch.encode_utf8(&mut buf))?);
            }
        }
        Ok(out)
    }

    fn lookup(&self, word: &str) -> Result<TokenId, LexiconError> {
        self.id(word)
            .ok_or_else(|| LexiconError::UnknownWord(word.to_string()))
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, LexiconError> {
        let mut text = String::new();
        for &id in ids {
            let word = self.word(id).ok_or(LexiconError::UnknownId(id))?;
            if !text.is_empty() && !GLUED.contains(&word) {
                text.push(' ');
            }
            text.push_str(word);
        }
        Ok(text)
    }

    /// Serialized form: a JSON array of words in id order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.words).expect("string array serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, LexiconError> {
        let words: Vec<String> =
            serde_json::from_str(json).map_err(|e| LexiconError::Parse(e.to_string()))?;
        Self::from_words(words)
    }

    pub fn object_kind(&self, id: TokenId) -> Option<ObjectKind> {
        let w = self.word(id)?;
        OBJECT_NAMES
            .iter()
            .position(|&n| n == w)
            .map(|i| ObjectKind(i as u8))
    }

    pub fn color(&self, id: TokenId) -> Option<Color> {
        let w = self.word(id)?;
        COLOR_NAMES
            .iter()
            .position(|&n| n == w)
            .map(|i| Color(i as u8))
    }

    pub fn cell(&self, id: TokenId) -> Option<(u8, u8)> {
        parse_cell(self.word(id)?)
    }

    pub fn number(&self, id: TokenId) -> Option<u32> {
        let w = self.word(id)?;
        if w.len() == 1 {
            w.parse().ok()
        } else {
            None
        }
    }

    pub fn object_id(&self, kind: ObjectKind) -> TokenId {
        self.expect_id(kind.name())
    }

    pub fn color_id(&self, color: Color) -> TokenId {
        self.expect_id(color.name())
    }

    pub fn cell_id(&self, row: u8, col: u8) -> TokenId {
        self.expect_id(&cell_word(row, col))
    }

    pub fn number_id(&self, n: u32) -> Option<TokenId> {
        self.id(&n.to_string())
    }
}

/// One of the twelve object kinds. Serialized by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ObjectKind(pub u8);

impl ObjectKind {
    pub const COUNT: usize = OBJECT_NAMES.len();

    pub fn all() -> impl Iterator<Item = ObjectKind> {
        (0..Self::COUNT as u8).map(ObjectKind)
    }

    pub fn name(self) -> &'static str {
        OBJECT_NAMES[self.0 as usize]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OBJECT_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| ObjectKind(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Color(pub u8);

impl Color {
    pub const COUNT: usize = COLOR_NAMES.len();

    pub fn all() -> impl Iterator<Item = Color> {
        (0..Self::COUNT as u8).map(Color)
    }

    pub fn name(self) -> &'static str {
        COLOR_NAMES[self.0 as usize]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        COLOR_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| Color(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<ObjectKind> for String {
    fn from(k: ObjectKind) -> String {
        k.name().to_string()
    }
}

impl TryFrom<String> for ObjectKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        ObjectKind::from_name(&s).ok_or_else(|| format!("unknown object `{s}`"))
    }
}

impl From<Color> for String {
    fn from(c: Color) -> String {
        c.name().to_string()
    }
}

impl TryFrom<String> for Color {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Color::from_name(&s).ok_or_else(|| format!("unknown color `{s}`"))
    }
}

pub fn cell_word(row: u8, col: u8) -> String {
    format!("({row},{col})")
}

pub fn parse_cell(word: &str) -> Option<(u8, u8)> {
    let inner = word.strip_prefix('(')?.strip_suffix(')')?;
    let (r, c) = inner.split_once(',')?;
    let (r, c): (u8, u8) = (r.parse().ok()?, c.parse().ok()?);
    (r < 4 && c < 4).then_some((r, c))
}

/// Every object-lexicon token in `tokens`, with multiplicity, in order of
/// appearance. PAD tokens are ignored.
pub fn extract_objects(vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<ObjectKind> {
    tokens
        .iter()
        .filter(|&&t| t != PAD)
        .filter_map(|&t| vocab.object_kind(t))
        .collect()
}

/// Per-kind mention counts.
pub fn object_histogram(vocab: &Vocabulary, tokens: &[TokenId]) -> [usize; ObjectKind::COUNT] {
    let mut hist = [0; ObjectKind::COUNT];
    for k in extract_objects(vocab, tokens) {
        hist[k.index()] += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocabulary_shape() {
        let v = Vocabulary::standard();
        assert!(v.len() <= 256);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<sep>"), Some(SEP));
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.id(w), Some(i as TokenId));
        }
    }

    #[test]
    fn round_trip_simple_phrase() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("a blue cup").unwrap();
        assert_eq!(ids, vec![v.expect_id("a"), v.expect_id("blue"), v.expect_id("cup")]);
        assert_eq!(v.detokenize(&ids).unwrap(), "a blue cup");
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(Vocabulary::standard().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn unknown_word_is_reported() {
        let err = Vocabulary::standard().tokenize("zebra").unwrap_err();
        assert_eq!(err, LexiconError::UnknownWord("zebra".into()));
    }

    #[test]
    fn punctuation_splits_and_rejoins() {
        let v = Vocabulary::standard();
        let text = "reason: there is a cup at (0,1) and a cup at (2,3). result: 2";
        let ids = v.tokenize(text).unwrap();
        assert_eq!(v.word(ids[1]), Some(":"));
        assert_eq!(v.detokenize(&ids).unwrap(), text);
        let q = "is there a fork in the image ?";
        assert_eq!(v.detokenize(&v.tokenize(q).unwrap()).unwrap(), q);
    }

    #[test]
    fn extraction_counts_multiplicity() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("a fork and a fork").unwrap();
        assert_eq!(extract_objects(v, &ids), vec![ObjectKind(0), ObjectKind(0)]);
        assert!(extract_objects(v, &v.tokenize("the image is empty").unwrap()).is_empty());
    }

    #[test]
    fn extraction_ignores_padding() {
        let v = Vocabulary::standard();
        let mut ids = v.tokenize("a fork and a cup").unwrap();
        let plain = extract_objects(v, &ids);
        ids.extend([PAD, PAD]);
        ids.insert(0, PAD);
        assert_eq!(extract_objects(v, &ids), plain);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::standard();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(&back, v);
    }

    #[test]
    fn rejects_duplicates_and_missing_reserved() {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.push("a".into());
        words.push("a".into());
        assert!(matches!(
            Vocabulary::from_words(words),
            Err(LexiconError::Duplicate(_))
        ));
        assert_eq!(
            Vocabulary::from_words(vec!["a".into()]),
            Err(LexiconError::MissingReserved)
        );
    }

    #[test]
    fn cell_words_parse() {
        assert_eq!(parse_cell("(2,3)"), Some((2, 3)));
        assert_eq!(parse_cell("(4,0)"), None);
        assert_eq!(parse_cell("cup"), None);
    }
}
