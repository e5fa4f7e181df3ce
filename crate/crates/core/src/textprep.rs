//! Tokenization, spelling correction and lemmatization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Review};
use crate::error::{Error, Result};

pub const DEFAULT_SPELL_THRESHOLD: f64 = 0.85;

/// Lowercase tokens of one review.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub source_id: String,
}

impl TokenSeq {
    pub fn new(source_id: impl Into<String>, tokens: Vec<String>) -> Self {
        TokenSeq {
            tokens,
            source_id: source_id.into(),
        }
    }

    pub fn from_strs(source_id: impl Into<String>, tokens: &[&str]) -> Self {
        Self::new(source_id, tokens.iter().map(|t| t.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-joined form; re-tokenizing it yields the same tokens.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Splits on whitespace, lowercases, and emits every character that is
/// neither alphanumeric nor whitespace as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn tokenize_review(r: &Review) -> TokenSeq {
    TokenSeq::new(r.id.clone(), tokenize(&r.text))
}

fn is_punctuation(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

/// Reference vocabulary for spelling correction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    frequency: HashMap<String, u64>,
    /// Words sorted by (length, word) so candidate scans can skip by length.
    by_len: Vec<String>,
}

impl Lexicon {
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut frequency = HashMap::new();
        for (w, c) in counts {
            if c > 0 && !w.is_empty() && !is_punctuation(&w) {
                *frequency.entry(w).or_insert(0) += c;
            }
        }
        let mut lex = Lexicon {
            frequency,
            by_len: Vec::new(),
        };
        lex.reindex();
        lex
    }

    /// Words occurring at least `min_count` times in the token sequences.
    pub fn from_corpus<'a>(seqs: impl IntoIterator<Item = &'a [String]>, min_count: u64) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for seq in seqs {
            for t in seq {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
        Self::from_counts(counts.into_iter().filter(|(_, c)| *c >= min_count))
    }

    /// Adds one word per line; existing words keep their counts.
    pub fn add_wordlist(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines() {
            let w = line.trim().to_lowercase();
            if !w.is_empty() && !is_punctuation(&w) && !w.contains(char::is_whitespace) {
                self.frequency.entry(w).or_insert(1);
            }
        }
        self.reindex();
        Ok(())
    }

    fn reindex(&mut self) {
        let mut words: Vec<String> = self.frequency.keys().cloned().collect();
        words.sort_by(|a, b| a.chars().count().cmp(&b.chars().count()).then_with(|| a.cmp(b)));
        self.by_len = words;
    }

    pub fn contains(&self, word: &str) -> bool {
        self.frequency.contains_key(word)
    }

    pub fn frequency(&self, word: &str) -> u64 {
        self.frequency.get(word).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.by_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_len.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.by_len.iter().map(String::as_str)
    }
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over characters.
pub fn similarity(a: &str, b: &str) -> f64 {
    let max = a.chars().count().max(b.chars().count());
    if max == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / max as f64
}

/// Replaces an out-of-lexicon token by its most similar lexicon word when the
/// similarity reaches `threshold`. Ties go to the more frequent word, then the
/// lexicographically smaller one. Tokens of at most two characters and pure
/// punctuation are left alone.
pub fn correct_spelling(token: &str, lex: &Lexicon, threshold: f64) -> String {
    let len = token.chars().count();
    if len <= 2 || is_punctuation(token) || lex.contains(token) {
        return token.to_string();
    }
    let mut best: Option<(f64, u64, &str)> = None;
    for word in lex.words() {
        let wlen = word.chars().count();
        let max = len.max(wlen) as f64;
        // length difference is a lower bound on edit distance
        if 1.0 - (len.abs_diff(wlen) as f64) / max < threshold {
            if wlen > len {
                break;
            }
            continue;
        }
        let sim = similarity(token, word);
        if sim < threshold {
            continue;
        }
        let freq = lex.frequency(word);
        let better = match best {
            None => true,
            Some((bs, bf, bw)) => sim > bs || (sim == bs && (freq > bf || (freq == bf && word < bw))),
        };
        if better {
            best = Some((sim, freq, word));
        }
    }
    best.map_or_else(|| token.to_string(), |(_, _, w)| w.to_string())
}

const IRREGULAR: &[(&str, &str)] = &[
    ("was", "be"),
    ("is", "be"),
    ("am", "be"),
    ("been", "be"),
    ("better", "good"),
    ("best", "good"),
    ("worse", "bad"),
    ("worst", "bad"),
    ("has", "have"),
    ("had", "have"),
    ("does", "do"),
    ("did", "do"),
    ("done", "do"),
    ("goes", "go"),
    ("went", "go"),
    ("gone", "go"),
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("shoes", "shoe"),
    ("made", "make"),
    ("took", "take"),
    ("came", "come"),
];

/// Words the suffix rules would mangle.
const PROTECTED: &[&str] = &[
    "always", "perhaps", "news", "series", "species", "physics", "during", "nothing",
    "something", "anything", "everything", "morning", "evening", "ceiling", "king", "hundred",
    "bed", "red", "need", "speed", "indeed", "towards", "was", "this", "thus", "yes", "less",
];

const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u', 'y'];

fn has_vowel(s: &str) -> bool {
    s.contains(VOWELS)
}

/// `runn` -> `run`, `stopp` -> `stop`; keeps `ll`, `ss`, `zz`, `ff` and short stems.
fn undouble(stem: &str) -> String {
    let chars: Vec<char> = stem.chars().collect();
    let n = chars.len();
    if n >= 4 {
        let (a, b) = (chars[n - 2], chars[n - 1]);
        if a == b && !VOWELS.contains(&a) && !matches!(a, 'l' | 's' | 'z' | 'f') {
            return chars[..n - 1].iter().collect();
        }
    }
    stem.to_string()
}

fn lemma_step(w: &str) -> Option<String> {
    if let Some((_, lemma)) = IRREGULAR.iter().find(|(form, _)| *form == w) {
        return Some(lemma.to_string());
    }
    if PROTECTED.contains(&w) || !w.chars().all(|c| c.is_ascii_lowercase()) {
        return None;
    }
    let n = w.len();
    if let Some(stem) = w.strip_suffix("ies") {
        if stem.len() >= 2 {
            return Some(format!("{stem}y"));
        }
    }
    if let Some(stem) = w.strip_suffix("sses") {
        return Some(format!("{stem}ss"));
    }
    if let Some(stem) = w.strip_suffix("es") {
        if stem.len() >= 2 && ["sh", "ch", "x", "z"].iter().any(|s| stem.ends_with(s)) {
            return Some(stem.to_string());
        }
    }
    if w.ends_with('s') && n >= 4 && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return Some(w[..n - 1].to_string());
    }
    if let Some(stem) = w.strip_suffix("ing") {
        if stem.len() >= 3 && has_vowel(stem) {
            return Some(undouble(stem));
        }
    }
    if let Some(stem) = w.strip_suffix("ed") {
        if !w.ends_with("eed") && stem.len() >= 3 && has_vowel(stem) {
            return Some(undouble(stem));
        }
    }
    None
}

/// Rule-based lemma: irregular-form table first, then ordered suffix rules,
/// applied until nothing changes. Idempotent by construction.
pub fn lemmatize(token: &str) -> String {
    let mut current = token.to_string();
    // suffix rules shorten the word; irregular lemmas are fixed points
    for _ in 0..64 {
        match lemma_step(&current) {
            Some(next) if next != current => current = next,
            _ => break,
        }
    }
    current
}

/// tokenize -> correct spelling -> lemmatize.
pub fn preprocess_text(text: &str, lex: &Lexicon, threshold: f64) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .map(|t| lemmatize(&correct_spelling(&t, lex, threshold)))
        .collect()
}

pub fn preprocess_review(r: &Review, lex: &Lexicon, threshold: f64) -> TokenSeq {
    TokenSeq::new(r.id.clone(), preprocess_text(&r.text, lex, threshold))
}

/// Preprocesses every review and stores the space-joined tokens back as text.
///
/// Reviews whose text becomes empty keep a single `<empty>` token so the
/// dataset invariants still hold.
pub fn preprocess_dataset(d: &Dataset, lex: &Lexicon, threshold: f64) -> Result<Dataset> {
    let reviews: Vec<Review> = d
        .reviews()
        .par_iter()
        .map(|r| {
            let seq = preprocess_review(r, lex, threshold);
            let text = if seq.is_empty() { "<empty>".to_string() } else { seq.joined() };
            Review { text, ..r.clone() }
        })
        .collect();
    Dataset::new(reviews)
}

/// Lexicon from the raw-tokenized training split, optionally extended by a wordlist.
pub fn build_lexicon(train: &Dataset, min_count: u64, wordlist: Option<&Path>) -> Result<Lexicon> {
    let seqs: Vec<Vec<String>> = train.iter().map(|r| tokenize(&r.text)).collect();
    let mut lex = Lexicon::from_corpus(seqs.iter().map(Vec::as_slice), min_count);
    if let Some(p) = wordlist {
        lex.add_wordlist(p)?;
    }
    Ok(lex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn lex(words: &[(&str, u64)]) -> Lexicon {
        Lexicon::from_counts(words.iter().map(|(w, c)| (w.to_string(), *c)))
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Great hotel, but noisy!"),
            toks(&["great", "hotel", ",", "but", "noisy", "!"])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Wi-Fi was down"), toks(&["wi", "-", "fi", "was", "down"]));
        assert_eq!(tokenize("  a \t\n b  "), toks(&["a", "b"]));
    }

    #[test]
    fn spelling_examples() {
        let l = lex(&[("hotel", 3), ("service", 2)]);
        assert_eq!(correct_spelling("hotel", &l, 0.85), "hotel");
        // distance 1 over length 7: similarity 6/7
        assert!((similarity("servise", "service") - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(correct_spelling("servise", &l, 0.85), "service");
        assert_eq!(correct_spelling("xqzt", &l, 0.85), "xqzt");
        // short and punctuation tokens are skipped
        assert_eq!(correct_spelling("ho", &lex(&[("hi", 1)]), 0.1), "ho");
        assert_eq!(correct_spelling("!!!", &l, 0.1), "!!!");
    }

    #[test]
    fn spelling_tie_breaks() {
        // "cart" is one edit from both; higher frequency wins, then lexicographic
        let l = lex(&[("card", 1), ("care", 5)]);
        assert_eq!(correct_spelling("cart", &l, 0.7), "care");
        let l = lex(&[("care", 2), ("card", 2)]);
        assert_eq!(correct_spelling("cart", &l, 0.7), "card");
    }

    #[test]
    fn lemma_examples() {
        assert_eq!(lemmatize("rooms"), "room");
        assert_eq!(lemmatize("running"), "run");
        assert_eq!(lemmatize("address"), "address");
        assert_eq!(lemmatize("was"), "be");
        assert_eq!(lemmatize("better"), "good");
        assert_eq!(lemmatize("cities"), "city");
        assert_eq!(lemmatize("addresses"), "address");
        assert_eq!(lemmatize("boxes"), "box");
        assert_eq!(lemmatize("booked"), "book");
        assert_eq!(lemmatize("stopped"), "stop");
        assert_eq!(lemmatize("needed"), "need");
        assert_eq!(lemmatize("were"), "were");
        assert_eq!(lemmatize("called"), "call");
        assert_eq!(lemmatize("bus"), "bus");
    }

    #[test]
    fn preprocess_examples() {
        let l = lex(&[("great", 4)]);
        let r = Review::new(
            "r1",
            "The rooms were grat",
            crate::Domain::Hotel,
            crate::Label::NonSuggestion,
            crate::Split::Train,
        );
        // "grat" -> "great" is one edit over five characters (similarity 0.8)
        assert_eq!(preprocess_review(&r, &l, 0.8).tokens, toks(&["the", "room", "were", "great"]));
        assert!(preprocess_text("", &l, 0.85).is_empty());
        assert_eq!(preprocess_text("staff helpful", &l, 0.85), toks(&["staff", "helpful"]));
    }

    const TEST_VOCAB: &[&str] = &[
        "rooms", "running", "address", "addresses", "cities", "flies", "boxes", "watches", "booked",
        "stopped", "planned", "needed", "feeding", "speeding", "meetings", "things", "sings",
        "beings", "dresses", "buses", "was", "better", "goes", "shoes", "called", "stuffed",
        "added", "tired", "used", "always", "guests", "staff", "helpful", "wifi", "should",
        "because", "suggestions", "installing", "updates", "crashes", "batteries", "charging",
    ];

    #[test]
    fn lemmatize_idempotent_on_test_vocabulary() {
        for w in TEST_VOCAB {
            let once = lemmatize(w);
            assert_eq!(lemmatize(&once), once, "{w}");
        }
    }

    proptest! {
        #[test]
        fn tokenize_join_is_fixed_point(s in "\\PC{0,60}") {
            let t = tokenize(&s);
            prop_assert_eq!(tokenize(&t.join(" ")), t.clone());
            for tok in &t {
                prop_assert!(!tok.is_empty());
                prop_assert!(!tok.contains(char::is_whitespace));
            }
        }

        #[test]
        fn lemmatize_idempotent(w in "[a-z]{1,14}") {
            let once = lemmatize(&w);
            prop_assert_eq!(lemmatize(&once), once);
        }

        #[test]
        fn correction_stays_in_lexicon(w in "[a-z]{1,10}", thr in 0.5f64..1.0) {
            let l = lex(&[("service", 3), ("staff", 2), ("breakfast", 1), ("location", 4), ("stuff", 2)]);
            let out = correct_spelling(&w, &l, thr);
            prop_assert!(out == w || l.contains(&out));
        }

        #[test]
        fn preprocess_is_lowercase(s in "[A-Za-z ,.!]{0,50}") {
            let l = lex(&[("great", 1)]);
            for t in preprocess_text(&s, &l, 0.85) {
                prop_assert!(!t.chars().any(char::is_uppercase));
            }
        }
    }
}
