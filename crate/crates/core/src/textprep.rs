//! Text normalization, vocabulary building, and fixed-length word and
//! character encoding.
//!
//! Normalization lowercases, strips URLs/@mentions/non-alphanumerics,
//! drops stopwords, and applies a rule-based suffix-stripping stemmer.
//! All operations are pure and deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Padding id in every vocabulary.
pub const PAD_ID: usize = 0;
/// Unknown-token id in every vocabulary.
pub const UNK_ID: usize = 1;

pub const DEFAULT_MAX_WORDS: usize = 64;
/// Platform post limit.
pub const DEFAULT_MAX_CHARS: usize = 280;

const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords_en.txt");

/// Normalization settings.
#[derive(Debug, Clone)]
pub struct NormalizeOpts {
    pub max_words: usize,
    pub stem: bool,
    pub stopwords: BTreeSet<String>,
}

impl Default for NormalizeOpts {
    fn default() -> Self {
        NormalizeOpts {
            max_words: DEFAULT_MAX_WORDS,
            stem: true,
            stopwords: default_stopwords(),
        }
    }
}

/// The English stopword list shipped with the crate.
pub fn default_stopwords() -> BTreeSet<String> {
    DEFAULT_STOPWORDS
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// A normalized tweet: word tokens plus the character sequence of the
/// normalized text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedTweet {
    pub tokens: Vec<String>,
    pub char_seq: Vec<char>,
}

/// Lowercase, strip URLs/mentions/punctuation, drop stopwords, stem,
/// and truncate to `max_words`.
pub fn normalize(text: &str, opts: &NormalizeOpts) -> TokenizedTweet {
    let mut words: Vec<String> = Vec::new();
    let mut normalized_text = String::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
        {
            continue;
        }
        if lower.starts_with('@') {
            continue;
        }
        let word: String = lower.chars().filter(|c| c.is_alphanumeric()).collect();
        if word.is_empty() {
            continue;
        }
        if !normalized_text.is_empty() {
            normalized_text.push(' ');
        }
        normalized_text.push_str(&word);
        if opts.stopwords.contains(&word) {
            continue;
        }
        let word = if opts.stem { stem(&word) } else { word };
        if word.is_empty() || opts.stopwords.contains(&word) {
            continue;
        }
        words.push(word);
    }
    words.truncate(opts.max_words);
    TokenizedTweet {
        tokens: words,
        char_seq: normalized_text.chars().collect(),
    }
}

fn has_vowel(s: &str) -> bool {
    s.chars().any(|c| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u'))
}

fn undouble(s: &mut String) {
    let bytes = s.as_bytes();
    if bytes.len() >= 2 {
        let last = bytes[bytes.len() - 1];
        if last == bytes[bytes.len() - 2]
            && !matches!(last, b'a' | b'e' | b'i' | b'o' | b'u' | b'l' | b's' | b'z')
        {
            s.pop();
        }
    }
}

/// Suffix-stripping stemmer handling -ing, -ed, -tion, -ly, and -s.
/// Rules apply repeatedly until a fixpoint, so stemming is idempotent.
pub fn stem(word: &str) -> String {
    let mut w = word.to_string();
    for _ in 0..5 {
        let before = w.clone();
        if w.len() >= 6 && w.ends_with("ing") {
            let stripped = &w[..w.len() - 3];
            if has_vowel(stripped) {
                w = stripped.to_string();
                undouble(&mut w);
            }
        } else if w.len() >= 5 && w.ends_with("ed") {
            let stripped = &w[..w.len() - 2];
            if has_vowel(stripped) {
                w = stripped.to_string();
                undouble(&mut w);
            }
        } else if w.len() >= 6 && w.ends_with("tion") {
            w.truncate(w.len() - 4);
            w.push('t');
        } else if w.len() >= 5 && w.ends_with("ly") {
            w.truncate(w.len() - 2);
        } else if w.len() >= 5
            && w.ends_with("es")
            && matches!(w.as_bytes()[w.len() - 3], b's' | b'x' | b'z')
        {
            w.truncate(w.len() - 2);
        } else if w.len() >= 4
            && w.ends_with('s')
            && !w.ends_with("ss")
            && !w.ends_with("us")
            && !w.ends_with("is")
        {
            w.pop();
        }
        if w == before {
            break;
        }
    }
    w
}

/// Word vocabulary with dense ids; 0 is padding, 1 is unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
    freqs: BTreeMap<String, u64>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token.iter().map(|s| s.as_str())
    }

    pub fn freq(&self, token: &str) -> u64 {
        self.freqs.get(token).copied().unwrap_or(0)
    }
}

/// Build a vocabulary from tokenized tweets: frequency threshold, rank
/// by (freq desc, token asc), truncate to `max_size` total entries.
pub fn build_vocab(tweets: &[TokenizedTweet], min_freq: u64, max_size: usize) -> Vocab {
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
    for t in tweets {
        for tok in &t.tokens {
            *freqs.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&String, &u64)> = freqs.iter().filter(|(_, &f)| f >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));

    let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
    for (tok, _) in ranked {
        if id_to_token.len() >= max_size.max(2) {
            break;
        }
        id_to_token.push(tok.clone());
    }
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Vocab {
        id_to_token,
        token_to_id,
        freqs,
    }
}

/// Encode tokens as ids, right-padded with `PAD_ID` to `max_words`.
pub fn encode_words(tweet: &TokenizedTweet, vocab: &Vocab, max_words: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tweet
        .tokens
        .iter()
        .take(max_words)
        .map(|t| vocab.id(t))
        .collect();
    ids.resize(max_words, PAD_ID);
    ids
}

/// Fixed, corpus-independent character vocabulary: 26 letters, 10
/// digits, space, and 12 punctuation marks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Default for CharVocab {
    fn default() -> Self {
        let mut chars: Vec<char> = vec!['\0', '\u{1}']; // pad, unk placeholders
        chars.extend('a'..='z');
        chars.extend('0'..='9');
        chars.push(' ');
        chars.extend(".,!?'\":;-_#@".chars());
        let index = chars
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, &c)| (c, i))
            .collect();
        CharVocab { chars, index }
    }
}

impl CharVocab {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }
}

/// Encode characters as ids, right-padded with `PAD_ID` to `max_chars`.
pub fn encode_chars(chars: &[char], vocab: &CharVocab, max_chars: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = chars.iter().take(max_chars).map(|&c| vocab.id(c)).collect();
    ids.resize(max_chars, PAD_ID);
    ids
}
