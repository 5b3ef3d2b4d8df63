//! Flesch Reading Ease, Flesch-Kincaid Grade Level and the Dale-Chall
//! readability score.
//!
//! Counting rules:
//! - a sentence ends at a run of `.`, `?` or `!` followed by whitespace or end of text;
//! - a word is a maximal run of letters, digits and apostrophes;
//! - syllables are vowel groups (`aeiouy`), minus one for a silent final `e`
//!   (not after a consonant + `l`), with at least one per word.
//!
//! The syllable heuristic miscounts some words ("create" → 1, "being" → 1).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TextStats {
    pub sentences: usize,
    pub words: usize,
    pub syllables: usize,
    pub difficult_words: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '\u{2019}'
}

/// Words under the counting rule above, in order, original case.
pub fn words(text: &str) -> Vec<&str> {
    text.split(|c: char| !is_word_char(c))
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .collect()
}

/// Number of sentences containing at least one word.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut has_word = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '?' | '!') {
            let mut j = i;
            while j < chars.len() && matches!(chars[j], '.' | '?' | '!') {
                j += 1;
            }
            if (j == chars.len() || chars[j].is_whitespace()) && has_word {
                count += 1;
                has_word = false;
            }
            i = j;
            continue;
        }
        if c.is_alphanumeric() {
            has_word = true;
        }
        i += 1;
    }
    if has_word {
        count += 1;
    }
    count
}

pub fn count_syllables(word: &str) -> usize {
    let w: Vec<char> = word
        .chars()
        .filter(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut groups = 0;
    let mut prev_vowel = false;
    for &c in &w {
        let v = is_vowel(c);
        if v && !prev_vowel {
            groups += 1;
        }
        prev_vowel = v;
    }
    let n = w.len();
    if groups > 1 && n >= 2 && w[n - 1] == 'e' && !is_vowel(w[n - 2]) {
        let consonant_le = w[n - 2] == 'l' && n >= 3 && !is_vowel(w[n - 3]);
        if !consonant_le {
            groups -= 1;
        }
    }
    groups.max(1)
}

pub fn text_stats(text: &str) -> TextStats {
    compute_stats(text, None)
}

pub fn text_stats_with_list(text: &str, list: &DaleChallList) -> TextStats {
    compute_stats(text, Some(list))
}

fn compute_stats(text: &str, list: Option<&DaleChallList>) -> TextStats {
    let ws = words(text);
    if ws.is_empty() {
        return TextStats::default();
    }
    TextStats {
        sentences: count_sentences(text).max(1),
        words: ws.len(),
        syllables: ws.iter().map(|w| count_syllables(w)).sum(),
        difficult_words: list.map_or(0, |l| ws.iter().filter(|w| !l.is_familiar(w)).count()),
    }
}

/// Flesch Reading Ease from counts. Zero words give 0.
pub fn fres_from_stats(s: &TextStats) -> f64 {
    if s.words == 0 {
        return 0.0;
    }
    206.835 - 1.015 * (s.words as f64 / s.sentences as f64) - 84.6 * (s.syllables as f64 / s.words as f64)
}

/// Flesch-Kincaid grade level from counts. Zero words give 0.
pub fn fkgl_from_stats(s: &TextStats) -> f64 {
    if s.words == 0 {
        return 0.0;
    }
    0.39 * (s.words as f64 / s.sentences as f64) + 11.8 * (s.syllables as f64 / s.words as f64) - 15.59
}

/// Dale-Chall score from counts: `0.1579·pct + 0.0496·wps`, plus 3.6365 when
/// more than 5% of words are difficult. Zero words give 0.
pub fn dcrs_from_stats(s: &TextStats) -> f64 {
    if s.words == 0 {
        return 0.0;
    }
    let pct = 100.0 * s.difficult_words as f64 / s.words as f64;
    let mut score = 0.1579 * pct + 0.0496 * (s.words as f64 / s.sentences as f64);
    if pct > 5.0 {
        score += 3.6365;
    }
    score
}

pub fn fres(text: &str) -> f64 {
    fres_from_stats(&text_stats(text))
}

pub fn fkgl(text: &str) -> f64 {
    fkgl_from_stats(&text_stats(text))
}

pub fn dcrs(text: &str, list: &DaleChallList) -> f64 {
    dcrs_from_stats(&text_stats_with_list(text, list))
}

/// Familiar-word list, case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaleChallList {
    words: HashSet<String>,
}

impl DaleChallList {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: HashSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Data("familiar-word list is empty".into()));
        }
        Ok(Self { words })
    }

    /// UTF-8, one word per line; lines starting with `#` are comments.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(text.lines().filter(|l| !l.trim_start().starts_with('#')))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn is_familiar(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }
}
