//! N-gram overlap metrics: ROUGE-N F1, BLEU (sentence and document mode) and
//! single-reference SARI. Texts are tokenised with the readability word rule
//! and lower-cased.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::readability::words;

pub fn tokenize(text: &str) -> Vec<String> {
    words(text).into_iter().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(cand: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    cand.iter()
        .map(|(g, c)| (*c).min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 over clipped n-gram counts. If neither side has an n-gram of
/// order `n` the score is 1 for identical token sequences and 0 otherwise.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("ROUGE order must be >= 1".into()));
    }
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let c_total: usize = cc.values().sum();
    let r_total: usize = rc.values().sum();
    if c_total == 0 && r_total == 0 {
        return Ok(if c == r { 1.0 } else { 0.0 });
    }
    if c_total == 0 || r_total == 0 {
        return Ok(0.0);
    }
    let m = clipped_matches(&cc, &rc) as f64;
    Ok(f1(m / c_total as f64, m / r_total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleuMode {
    /// Mean of per-pair scores; orders 2 to 4 use add-one smoothing.
    Sentence,
    /// Counts summed over all pairs, then combined once, unsmoothed.
    Document,
}

const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Default)]
struct BleuCounts {
    matches: [usize; BLEU_ORDER],
    totals: [usize; BLEU_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl BleuCounts {
    fn of(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        let mut out = BleuCounts {
            cand_len: c.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=BLEU_ORDER {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            out.matches[n - 1] = clipped_matches(&cc, &rc);
            out.totals[n - 1] = c.len().saturating_sub(n - 1);
        }
        out
    }

    fn add(&mut self, other: &BleuCounts) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        }
    }

    /// Add-one smoothing on orders 2..=4.
    fn smoothed_score(&self) -> f64 {
        if self.cand_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..BLEU_ORDER {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        self.brevity_penalty() * (log_sum / BLEU_ORDER as f64).exp()
    }

    /// Orders with no candidate n-grams are left out of the geometric mean.
    fn unsmoothed_score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut used = 0;
        for n in 0..BLEU_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            used += 1;
        }
        self.brevity_penalty() * (log_sum / used as f64).exp()
    }
}

pub fn bleu(candidates: &[&str], references: &[&str], mode: BleuMode) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape("bleu", candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("BLEU over zero pairs".into()));
    }
    let pairs = candidates.iter().zip(references).map(|(c, r)| BleuCounts::of(c, r));
    Ok(match mode {
        BleuMode::Sentence => pairs.map(|b| b.smoothed_score()).sum::<f64>() / candidates.len() as f64,
        BleuMode::Document => {
            let mut total = BleuCounts::default();
            pairs.for_each(|b| total.add(&b));
            total.unsmoothed_score()
        }
    })
}

pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    BleuCounts::of(candidate, reference).smoothed_score()
}

pub fn document_bleu(candidate: &str, reference: &str) -> f64 {
    BleuCounts::of(candidate, reference).unsmoothed_score()
}

/// SARI components averaged over orders 1..=4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SariBreakdown {
    pub keep_f1: f64,
    pub add_f1: f64,
    pub del_precision: f64,
    pub score: f64,
}

fn ngram_set(tokens: &[String], n: usize) -> HashSet<&[String]> {
    tokens.windows(n).collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Single-reference SARI on n-gram sets. Any component whose denominator is
/// empty counts as 0 and still takes part in the averages.
pub fn sari_breakdown(source: &str, candidate: &str, reference: &str) -> SariBreakdown {
    let s_tok = tokenize(source);
    let c_tok = tokenize(candidate);
    let r_tok = tokenize(reference);
    let (mut keep, mut add, mut del) = (0.0, 0.0, 0.0);
    for n in 1..=BLEU_ORDER {
        let s = ngram_set(&s_tok, n);
        let c = ngram_set(&c_tok, n);
        let r = ngram_set(&r_tok, n);

        let added: HashSet<_> = c.difference(&s).copied().collect();
        let add_good = added.intersection(&r).count();
        let ref_added = r.difference(&s).count();
        add += f1(ratio(add_good, added.len()), ratio(add_good, ref_added));

        let kept: HashSet<_> = c.intersection(&s).copied().collect();
        let keep_good = kept.intersection(&r).count();
        let ref_kept = s.intersection(&r).count();
        keep += f1(ratio(keep_good, kept.len()), ratio(keep_good, ref_kept));

        let deleted: HashSet<_> = s.difference(&c).copied().collect();
        let del_good = deleted.difference(&r).count();
        del += ratio(del_good, deleted.len());
    }
    let k = BLEU_ORDER as f64;
    let (keep_f1, add_f1, del_precision) = (keep / k, add / k, del / k);
    SariBreakdown {
        keep_f1,
        add_f1,
        del_precision,
        score: (keep_f1 + add_f1 + del_precision) / 3.0,
    }
}

pub fn sari(source: &str, candidate: &str, reference: &str) -> f64 {
    sari_breakdown(source, candidate, reference).score
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_n("a b c", "a b c", 1).unwrap(), 1.0);
        assert_eq!(rouge_n("a b c", "a b c", 2).unwrap(), 1.0);
        assert_eq!(rouge_n("a b c", "x y z", 1).unwrap(), 0.0);
        assert!((rouge_n("a b c", "a b d", 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // bigrams {ab, bc} vs {ab, bd}: P = R = 1/2
        assert!((rouge_n("a b c", "a b d", 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(rouge_n("a", "a", 2).unwrap(), 1.0);
        assert!(rouge_n("a", "a", 0).is_err());
    }

    #[test]
    fn bleu_examples() {
        for mode in [BleuMode::Sentence, BleuMode::Document] {
            assert!((bleu(&["a b c d e"], &["a b c d e"], mode).unwrap() - 1.0).abs() < 1e-15);
            assert!((bleu(&["a b"], &["a b"], mode).unwrap() - 1.0).abs() < 1e-15);
            assert_eq!(bleu(&[""], &["a b"], mode).unwrap(), 0.0);
            assert_eq!(bleu(&["x y z"], &["a b c"], mode).unwrap(), 0.0);
        }
        assert!(bleu(&["a"], &[], BleuMode::Sentence).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        // candidate of 2 tokens, reference of 4: BP = e^{1-2}
        let s = sentence_bleu("a b", "a b c d");
        let p: f64 = 1.0 * ((1.0 + 1.0) / (1.0 + 1.0)) * 1.0 * 1.0;
        assert!((s - (1.0f64 - 2.0).exp() * p.powf(0.25)).abs() < 1e-15);
    }

    #[test]
    fn sari_conventions() {
        let src = "the cat sat on the mat";
        let b = sari_breakdown(src, src, src);
        assert_eq!((b.keep_f1, b.add_f1, b.del_precision), (1.0, 0.0, 0.0));
        assert!((b.score - 1.0 / 3.0).abs() < 1e-15);

        let tgt = "a dog ran far away";
        let b = sari_breakdown(src, tgt, tgt);
        assert_eq!((b.keep_f1, b.add_f1, b.del_precision), (0.0, 1.0, 1.0));

        let b = sari_breakdown(src, src, tgt);
        assert_eq!((b.keep_f1, b.add_f1, b.del_precision), (0.0, 0.0, 0.0));
    }
}
