//! A small context-free toy language for smoke-testing the whole pipeline.
//!
//! ```text
//! S  → NP VP [PP] [Adv]
//! NP → Det Adj{0,2} Noun
//! VP → Vi | Vt NP
//! PP → Prep NP
//! ```
//!
//! Every word belongs to exactly one category, so recognition is a single
//! left-to-right pass.

use rand::Rng;

use crate::data::LabeledSentence;
use crate::rng;

const DET: &[&str] = &["the", "a", "every", "some"];
const ADJ: &[&str] = &["big", "small", "red", "old", "happy", "quiet", "green", "young"];
const NOUN: &[&str] = &[
    "dog", "cat", "bird", "house", "tree", "car", "child", "teacher", "river", "book", "garden", "city",
];
const VI: &[&str] = &["sleeps", "runs", "waits", "sings", "falls", "smiles"];
const VT: &[&str] = &["sees", "chases", "likes", "finds", "holds", "follows", "watches"];
const PREP: &[&str] = &["near", "under", "behind", "with", "over"];
const ADV: &[&str] = &["slowly", "quickly", "today", "again"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cat {
    Det,
    Adj,
    Noun,
    Vi,
    Vt,
    Prep,
    Adv,
}

fn category(word: &str) -> Option<Cat> {
    [
        (DET, Cat::Det),
        (ADJ, Cat::Adj),
        (NOUN, Cat::Noun),
        (VI, Cat::Vi),
        (VT, Cat::Vt),
        (PREP, Cat::Prep),
        (ADV, Cat::Adv),
    ]
    .into_iter()
    .find(|(words, _)| words.contains(&word))
    .map(|(_, c)| c)
}

fn pick<R: Rng + ?Sized>(rng: &mut R, words: &[&'static str]) -> &'static str {
    words[rng.random_range(0..words.len())]
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<&'static str>) {
    out.push(pick(rng, DET));
    let r: f64 = rng.random();
    let adjectives = if r < 0.6 { 0 } else if r < 0.9 { 1 } else { 2 };
    for _ in 0..adjectives {
        out.push(pick(rng, ADJ));
    }
    out.push(pick(rng, NOUN));
}

/// Draws one grammatical sentence as a word list.
pub fn sentence<R: Rng + ?Sized>(rng: &mut R) -> Vec<&'static str> {
    let mut out = Vec::new();
    noun_phrase(rng, &mut out);
    if rng.random_bool(0.5) {
        out.push(pick(rng, VI));
    } else {
        out.push(pick(rng, VT));
        noun_phrase(rng, &mut out);
    }
    if rng.random_bool(0.3) {
        out.push(pick(rng, PREP));
        noun_phrase(rng, &mut out);
    }
    if rng.random_bool(0.3) {
        out.push(pick(rng, ADV));
    }
    out
}

fn parse_np(cats: &[Cat], mut i: usize) -> Option<usize> {
    if cats.get(i) != Some(&Cat::Det) {
        return None;
    }
    i += 1;
    let mut adjectives = 0;
    while cats.get(i) == Some(&Cat::Adj) {
        adjectives += 1;
        i += 1;
    }
    (adjectives <= 2 && cats.get(i) == Some(&Cat::Noun)).then_some(i + 1)
}

/// Whether `words` is a sentence of the language.
pub fn is_grammatical<S: AsRef<str>>(words: &[S]) -> bool {
    let Some(cats) = words.iter().map(|w| category(w.as_ref())).collect::<Option<Vec<Cat>>>() else {
        return false;
    };
    let Some(mut i) = parse_np(&cats, 0) else {
        return false;
    };
    match cats.get(i) {
        Some(Cat::Vi) => i += 1,
        Some(Cat::Vt) => match parse_np(&cats, i + 1) {
            Some(j) => i = j,
            None => return false,
        },
        _ => return false,
    }
    if cats.get(i) == Some(&Cat::Prep) {
        match parse_np(&cats, i + 1) {
            Some(j) => i = j,
            None => return false,
        }
    }
    if cats.get(i) == Some(&Cat::Adv) {
        i += 1;
    }
    i == cats.len()
}

/// `n` grammatical sentences.
pub fn grammar_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::stream(seed);
    (0..n).map(|_| sentence(&mut rng).join(" ")).collect()
}

/// Alternating grammatical (label 1) and word-shuffled ungrammatical
/// (label 0) sentences. A shuffle that happens to stay grammatical is redrawn.
pub fn acceptability_dataset(n: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = rng::stream(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let words = sentence(&mut rng);
        let label = out.len() % 2 == 0;
        let text = if label {
            words.join(" ")
        } else {
            let mut shuffled = words.clone();
            let mut tries = 0;
            loop {
                rng::shuffle(&mut shuffled, &mut rng);
                if !is_grammatical(&shuffled) || tries == 20 {
                    break;
                }
                tries += 1;
            }
            if is_grammatical(&shuffled) {
                continue;
            }
            shuffled.join(" ")
        };
        out.push(LabeledSentence {
            source_code: "synth".into(),
            label: usize::from(label),
            author_annotation: if label { String::new() } else { "*".into() },
            text,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_sentences_are_grammatical() {
        let mut rng = rng::stream(3);
        for _ in 0..500 {
            let s = sentence(&mut rng);
            assert!(is_grammatical(&s), "{s:?}");
        }
    }

    #[test]
    fn recognizer_rejects_bad_orders() {
        assert!(is_grammatical(&["the", "dog", "sleeps"]));
        assert!(is_grammatical(&["a", "big", "red", "cat", "sees", "the", "bird", "near", "a", "tree", "again"]));
        assert!(!is_grammatical(&["dog", "the", "sleeps"]));
        assert!(!is_grammatical(&["the", "big", "red", "old", "cat", "sleeps"]));
        assert!(!is_grammatical(&["the", "dog", "sees"]));
        assert!(!is_grammatical(&["the", "dog", "sleeps", "zebra"]));
        assert!(!is_grammatical::<&str>(&[]));
    }

    #[test]
    fn dataset_is_balanced_and_labels_match_grammar() {
        let data = acceptability_dataset(400, 9);
        assert_eq!(data.len(), 400);
        assert_eq!(data.iter().filter(|r| r.label == 1).count(), 200);
        for r in &data {
            let words: Vec<&str> = r.text.split(' ').collect();
            assert_eq!(is_grammatical(&words), r.label == 1, "{}", r.text);
        }
        assert_eq!(data, acceptability_dataset(400, 9));
    }
}
