//! Uncased WordPiece tokenization into fixed-length model inputs.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

const CONTINUATION: &str = "##";
const MAX_CHARS_PER_WORD: usize = 100;

/// Token ↔ id mapping with the five special tokens at ids 0–4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// One sentence ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub token_type_ids: Vec<u8>,
    pub label: Option<usize>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn token_count(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Lowercases, splits on whitespace, and splits ASCII punctuation into
/// standalone words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut words = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn sort_by_count(counts: HashMap<String, usize>) -> Vec<String> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(t, _)| t).collect()
}

impl Vocabulary {
    /// Builds a vocabulary that can encode every corpus sentence without `[UNK]`.
    ///
    /// Single characters (word-initial and `##` continuation forms) are always
    /// kept; the remaining budget goes to whole words and then to `##` suffix
    /// pieces, each by descending frequency with lexicographic tie-breaks.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut word_counts: HashMap<String, usize> = HashMap::new();
        for sentence in corpus {
            for w in pre_tokenize(sentence.as_ref()) {
                *word_counts.entry(w).or_default() += 1;
            }
        }

        let mut initial_chars = BTreeSet::new();
        let mut cont_chars = BTreeSet::new();
        let mut suffix_counts: HashMap<String, usize> = HashMap::new();
        for (w, &n) in &word_counts {
            let chars: Vec<char> = w.chars().collect();
            initial_chars.insert(chars[0].to_string());
            for (i, c) in chars.iter().enumerate().skip(1) {
                cont_chars.insert(format!("{CONTINUATION}{c}"));
                if i + 1 < chars.len() {
                    let piece: String = chars[i..].iter().collect();
                    *suffix_counts.entry(format!("{CONTINUATION}{piece}")).or_default() += n;
                }
            }
        }
        let alphabet = initial_chars.len() + cont_chars.len();
        let required = SPECIAL_TOKENS.len() + alphabet;
        if max_size < required {
            return Err(Error::Input(format!(
                "max_size {max_size} is below the {} special tokens plus {alphabet} alphabet pieces",
                SPECIAL_TOKENS.len()
            )));
        }

        let mut budget = max_size - required;
        let mut words = Vec::new();
        for w in sort_by_count(word_counts) {
            if initial_chars.contains(&w) {
                words.push(w);
            } else if budget > 0 {
                budget -= 1;
                words.push(w);
            }
        }
        let mut suffixes = Vec::new();
        for s in sort_by_count(suffix_counts) {
            if budget == 0 {
                break;
            }
            budget -= 1;
            suffixes.push(s);
        }

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        tokens.extend(initial_chars);
        tokens.extend(suffixes);
        tokens.extend(cont_chars);
        let mut seen = BTreeSet::new();
        tokens.retain(|t| seen.insert(t.clone()));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Format(format!("id {i} must be {special}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Format(format!("invalid token at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate token {t:?} at id {i}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match WordPiece for one pre-tokenized word.
    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(UNK_ID);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let prefix = if start > 0 { CONTINUATION } else { "" };
            let found = (start + 1..=chars.len()).rev().find_map(|end| {
                let piece: String = prefix.chars().chain(chars[start..end].iter().copied()).collect();
                self.id(&piece).map(|id| (id, end))
            });
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK_ID);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// WordPiece ids of `text` without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for w in pre_tokenize(text) {
            self.word_pieces(&w, &mut ids);
        }
        ids
    }

    /// `[CLS] pieces [SEP]`, head-truncated and padded to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenizedExample> {
        if max_len < 2 {
            return Err(Error::Input(format!("max_len must be at least 2, got {max_len}")));
        }
        let mut pieces = self.tokenize(text);
        pieces.truncate(max_len - 2);
        let mut input_ids = Vec::with_capacity(max_len);
        input_ids.push(CLS_ID);
        input_ids.extend(pieces);
        input_ids.push(SEP_ID);
        let used = input_ids.len();
        input_ids.resize(max_len, PAD_ID);
        let mut attention_mask = vec![1u8; used];
        attention_mask.resize(max_len, 0);
        Ok(TokenizedExample {
            input_ids,
            attention_mask,
            token_type_ids: vec![0; max_len],
            label: None,
        })
    }

    pub fn encode_labeled(&self, text: &str, label: usize, max_len: usize) -> Result<TokenizedExample> {
        let mut ex = self.encode(text, max_len)?;
        ex.label = Some(label);
        Ok(ex)
    }

    /// Joins non-special ids back into text, gluing `##` pieces to the
    /// preceding word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < SPECIAL_TOKENS.len() && id != UNK_ID {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Vocabulary {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(["the", "dog", "##s"].map(String::from));
        Vocabulary::from_tokens(tokens).unwrap()
    }

    #[test]
    fn encode_with_continuation() {
        let ex = toy().encode("the dogs", 8).unwrap();
        assert_eq!(ex.input_ids, vec![2, 5, 6, 7, 3, 0, 0, 0]);
        assert_eq!(ex.attention_mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(ex.token_type_ids, vec![0; 8]);
    }

    #[test]
    fn encode_empty() {
        let ex = toy().encode("", 8).unwrap();
        assert_eq!(ex.input_ids, vec![2, 3, 0, 0, 0, 0, 0, 0]);
        assert_eq!(ex.attention_mask, vec![1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn encode_truncates_head() {
        let text = vec!["dog"; 100].join(" ");
        let ex = toy().encode(&text, 64).unwrap();
        assert_eq!(ex.len(), 64);
        assert_eq!(ex.input_ids[63], SEP_ID);
        assert!(ex.attention_mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn unknown_word_becomes_single_unk() {
        let ex = toy().encode("the cat", 6).unwrap();
        assert_eq!(ex.input_ids, vec![2, 5, 1, 3, 0, 0]);
        assert!(toy().encode("x", 1).is_err());
    }

    #[test]
    fn frequency_ordered_vocab() {
        let v = Vocabulary::build(&["a a b"], 10).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert!(a < b);
        assert_eq!(&v.tokens()[..5], &SPECIAL_TOKENS.map(String::from));
        assert!(v.len() <= 10);
    }

    #[test]
    fn vocab_budget_and_errors() {
        assert!(matches!(Vocabulary::build(&["abc"], 6), Err(Error::Input(_))));
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 100), Err(Error::Input(_))));
        let corpus = ["the dogs barked.", "a dog barks"];
        let v1 = Vocabulary::build(&corpus, 40).unwrap();
        let v2 = Vocabulary::build(&corpus, 40).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(pre_tokenize("The dog, barked."), vec!["the", "dog", ",", "barked", "."]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&["hello world", "world peace"], 30).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        std::fs::write(&path, "[PAD]\n[CLS]\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Format(_))));
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-e]{1,7}", 0..12)
    }

    proptest! {
        #[test]
        fn no_unk_and_round_trip(corpus in prop::collection::vec(sentence(), 1..6), extra in 0usize..40) {
            let texts: Vec<String> = corpus.iter().map(|w| w.join(" ")).collect();
            let floor = {
                let words: Vec<String> = texts.iter().flat_map(|t| pre_tokenize(t)).collect();
                let init: BTreeSet<char> = words.iter().filter_map(|w| w.chars().next()).collect();
                let cont: BTreeSet<char> = words.iter().flat_map(|w| w.chars().skip(1)).collect();
                5 + init.len() + cont.len()
            };
            let vocab = Vocabulary::build(&texts, floor + extra).unwrap();
            prop_assert!(vocab.len() <= floor + extra);
            for t in &texts {
                let ex = vocab.encode(t, 128).unwrap();
                prop_assert!(!ex.input_ids.contains(&UNK_ID));
                prop_assert_eq!(ex.len(), 128);
                let used = ex.token_count();
                prop_assert!(ex.attention_mask[..used].iter().all(|&m| m == 1));
                prop_assert_eq!(ex.input_ids[used - 1], SEP_ID);
                prop_assert_eq!(vocab.decode(&ex.input_ids[..used]), pre_tokenize(t).join(" "));
            }
        }

        #[test]
        fn truncation_is_monotone(words in sentence(), m in 2usize..10, extra in 1usize..10) {
            let text = words.join(" ");
            let vocab = Vocabulary::build(&[text.as_str(), "abcde"], 200).unwrap();
            let short = vocab.encode(&text, m).unwrap();
            let long = vocab.encode(&text, m + extra).unwrap();
            prop_assert_eq!(&short.input_ids[..m - 1], &long.input_ids[..m - 1]);
        }
    }
}
