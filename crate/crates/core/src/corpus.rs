//! Paired technical/lay corpora: JSONL ingestion, a seeded synthetic
//! multi-domain generator, and stratified splitting.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub domain: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRecords {
    pub id: String,
    pub records: Vec<PairRecord>,
}

/// Records grouped by domain, domains in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub domains: Vec<DomainRecords>,
}

impl Corpus {
    pub fn from_records<I: IntoIterator<Item = PairRecord>>(records: I) -> Self {
        let mut corpus = Corpus::default();
        for r in records {
            corpus.push(r);
        }
        corpus
    }

    pub fn push(&mut self, record: PairRecord) {
        match self.domains.iter_mut().find(|d| d.id == record.domain) {
            Some(d) => d.records.push(record),
            None => self.domains.push(DomainRecords {
                id: record.domain.clone(),
                records: vec![record],
            }),
        }
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn domain(&self, id: &str) -> Option<&DomainRecords> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(|d| d.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &PairRecord> {
        self.domains.iter().flat_map(|d| d.records.iter())
    }

    /// Source texts per domain, in domain order.
    pub fn sources(&self) -> Vec<Vec<String>> {
        self.domains
            .iter()
            .map(|d| d.records.iter().map(|r| r.source.clone()).collect())
            .collect()
    }

    /// Re-orders domains to follow `order`; domains missing from `self` come out empty.
    pub fn aligned_to(&self, order: &[&str]) -> Corpus {
        Corpus {
            domains: order
                .iter()
                .map(|id| DomainRecords {
                    id: id.to_string(),
                    records: self.domain(id).map(|d| d.records.clone()).unwrap_or_default(),
                })
                .collect(),
        }
    }
}

const REQUIRED_KEYS: [&str; 3] = ["domain", "source", "target"];

/// One JSON object per line with string keys `domain`, `source`, `target`.
/// Blank lines are skipped; unknown keys are ignored.
pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Corpus::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_err(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err("expected a JSON object".into()))?;
        let mut fields = Vec::with_capacity(3);
        for key in REQUIRED_KEYS {
            let v = obj
                .get(key)
                .ok_or_else(|| parse_err(format!("missing key `{key}`")))?
                .as_str()
                .ok_or_else(|| parse_err(format!("key `{key}` must be a string")))?;
            fields.push(v.to_string());
        }
        let extras: Vec<&String> = obj.keys().filter(|k| !REQUIRED_KEYS.contains(&k.as_str())).collect();
        if !extras.is_empty() {
            log::warn!("{}:{line_no}: ignoring extra keys {extras:?}", path.display());
        }
        let [domain, source, target]: [String; 3] = fields.try_into().expect("three keys");
        if domain.is_empty() {
            return Err(parse_err("empty `domain`".into()));
        }
        if source.trim().is_empty() {
            return Err(parse_err("empty `source`".into()));
        }
        corpus.push(PairRecord { domain, source, target });
    }
    Ok(corpus)
}

pub fn write_jsonl(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = Vec::new();
    for r in corpus.records() {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic generator.
///
/// Each domain owns `jargon_vocab_per_domain` private tokens and shares
/// `function_vocab` function words with every other domain. Sources follow a
/// domain-specific first-order chain: with probability `follow_prob` the next
/// token is the current token's fixed successor, otherwise a fresh draw
/// (jargon with probability `jargon_prob`). Targets copy the source and
/// replace jargon token `j` of domain `d` by lay token
/// `lay[(j + d·⌊L/n⌋) mod L]`, `L = shared_lay_vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub docs_per_domain: usize,
    pub jargon_vocab_per_domain: usize,
    pub shared_lay_vocab: usize,
    pub function_vocab: usize,
    pub doc_len_range: (usize, usize),
    pub follow_prob: f64,
    pub jargon_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            docs_per_domain: 200,
            jargon_vocab_per_domain: 24,
            shared_lay_vocab: 24,
            function_vocab: 8,
            doc_len_range: (10, 20),
            follow_prob: 0.8,
            jargon_prob: 0.4,
            seed: 0,
        }
    }
}

pub const FUNCTION_WORDS: [&str; 16] = [
    "the", "of", "and", "in", "to", "is", "for", "with", "on", "by", "as", "at", "from", "that", "this", "was",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 {
            return Err(Error::Config("synthetic corpus needs n_domains >= 2".into()));
        }
        if self.jargon_vocab_per_domain == 0 || self.shared_lay_vocab == 0 {
            return Err(Error::Config("jargon and lay vocabularies must be non-empty".into()));
        }
        if self.function_vocab == 0 || self.function_vocab > FUNCTION_WORDS.len() {
            return Err(Error::Config(format!(
                "function_vocab must be in 1..={}",
                FUNCTION_WORDS.len()
            )));
        }
        let (lo, hi) = self.doc_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid doc_len_range ({lo}, {hi})")));
        }
        for (name, p) in [("follow_prob", self.follow_prob), ("jargon_prob", self.jargon_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn domain_id(d: usize) -> String {
        format!("domain{d}")
    }

    pub fn jargon_token(d: usize, j: usize) -> String {
        format!("d{d}j{j}")
    }

    pub fn lay_token(i: usize) -> String {
        format!("lay{i}")
    }

    /// Lay index substituted for jargon `j` of domain `d`.
    pub fn lay_index(&self, d: usize, j: usize) -> usize {
        let stride = (self.shared_lay_vocab / self.n_domains).max(1);
        (j + d * stride) % self.shared_lay_vocab
    }
}

#[derive(Clone, Copy)]
enum SynthToken {
    Jargon(usize),
    Function(usize),
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_j = spec.jargon_vocab_per_domain;
    let n_f = spec.function_vocab;
    let mut corpus = Corpus::default();
    for d in 0..spec.n_domains {
        let draw = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < spec.jargon_prob {
                SynthToken::Jargon(rng.random_range(0..n_j))
            } else {
                SynthToken::Function(rng.random_range(0..n_f))
            }
        };
        // fixed successor for every token of this domain: jargon first, then function words
        let successors: Vec<SynthToken> = (0..n_j + n_f).map(|_| draw(&mut rng)).collect();
        let succ_of = |t: SynthToken| match t {
            SynthToken::Jargon(j) => successors[j],
            SynthToken::Function(f) => successors[n_j + f],
        };
        let id = SynthSpec::domain_id(d);
        for _ in 0..spec.docs_per_domain {
            let len = rng.random_range(spec.doc_len_range.0..=spec.doc_len_range.1);
            let mut tokens = Vec::with_capacity(len);
            let mut cur = draw(&mut rng);
            tokens.push(cur);
            while tokens.len() < len {
                cur = if rng.random::<f64>() < spec.follow_prob {
                    succ_of(cur)
                } else {
                    draw(&mut rng)
                };
                tokens.push(cur);
            }
            let source: Vec<String> = tokens
                .iter()
                .map(|t| match *t {
                    SynthToken::Jargon(j) => SynthSpec::jargon_token(d, j),
                    SynthToken::Function(f) => FUNCTION_WORDS[f].to_string(),
                })
                .collect();
            let target: Vec<String> = tokens
                .iter()
                .map(|t| match *t {
                    SynthToken::Jargon(j) => SynthSpec::lay_token(spec.lay_index(d, j)),
                    SynthToken::Function(f) => FUNCTION_WORDS[f].to_string(),
                })
                .collect();
            corpus.push(PairRecord {
                domain: id.clone(),
                source: source.join(" "),
                target: target.join(" "),
            });
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Sizes of the three parts for `n` records. Rounds the train and valid
/// shares; when `n >= 3` no part is left empty.
pub fn split_sizes(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    let mut train = ((n as f64) * spec.train).round() as usize;
    let mut valid = ((n as f64) * spec.valid).round() as usize;
    train = train.min(n);
    valid = valid.min(n - train);
    let mut test = n - train - valid;
    if n >= 3 {
        if valid == 0 && spec.valid > 0.0 {
            valid = 1;
            train -= 1;
        }
        if test == 0 && spec.test > 0.0 {
            test = 1;
            if train > valid {
                train -= 1;
            } else {
                valid -= 1;
            }
        }
    }
    (train, valid, test)
}

/// Seeded shuffle and ratio cut inside each domain.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Splits> {
    let sum = spec.train + spec.valid + spec.test;
    if (sum - 1.0).abs() > 1e-9 || [spec.train, spec.valid, spec.test].iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {} + {} + {}",
            spec.train, spec.valid, spec.test
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Splits {
        train: Corpus::default(),
        valid: Corpus::default(),
        test: Corpus::default(),
    };
    for d in &corpus.domains {
        let mut records = d.records.clone();
        records.shuffle(&mut rng);
        let (n_train, n_valid, _) = split_sizes(records.len(), spec);
        let rest = records.split_off(n_train);
        let (valid, test) = rest.split_at(n_valid);
        for (target, part) in [
            (&mut out.train, records),
            (&mut out.valid, valid.to_vec()),
            (&mut out.test, test.to_vec()),
        ] {
            target.domains.push(DomainRecords {
                id: d.id.clone(),
                records: part,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_singleton_domains() {
        let spec = SynthSpec {
            n_domains: 2,
            docs_per_domain: 1,
            ..Default::default()
        };
        let c = synth_corpus(&spec).unwrap();
        assert_eq!(c.len(), 2);
        let jargon = |r: &PairRecord| -> Vec<String> {
            r.source
                .split_whitespace()
                .filter(|t| t.starts_with('d'))
                .map(String::from)
                .collect()
        };
        let a = jargon(&c.domains[0].records[0]);
        let b = jargon(&c.domains[1].records[0]);
        assert!(a.iter().all(|t| !b.contains(t)));
    }

    #[test]
    fn targets_substitute_jargon_only() {
        let spec = SynthSpec::default();
        let c = synth_corpus(&SynthSpec {
            docs_per_domain: 5,
            ..spec.clone()
        })
        .unwrap();
        for (d, dom) in c.domains.iter().enumerate() {
            for r in &dom.records {
                let src: Vec<&str> = r.source.split_whitespace().collect();
                let tgt: Vec<&str> = r.target.split_whitespace().collect();
                assert_eq!(src.len(), tgt.len());
                for (s, t) in src.iter().zip(&tgt) {
                    if let Some(j) = s.strip_prefix(&format!("d{d}j")) {
                        let j: usize = j.parse().unwrap();
                        assert_eq!(*t, SynthSpec::lay_token(spec.lay_index(d, j)));
                    } else {
                        assert_eq!(s, t);
                    }
                }
            }
        }
    }

    #[test]
    fn split_sizes_ten_records() {
        assert_eq!(split_sizes(10, &SplitSpec::default()), (8, 1, 1));
        assert_eq!(split_sizes(200, &SplitSpec::default()), (160, 20, 20));
        assert_eq!(split_sizes(3, &SplitSpec::default()), (1, 1, 1));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let c = Corpus::default();
        assert!(split(
            &c,
            &SplitSpec {
                train: 0.8,
                valid: 0.1,
                test: 0.2,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn invalid_synth_specs() {
        assert!(synth_corpus(&SynthSpec {
            n_domains: 1,
            ..Default::default()
        })
        .is_err());
        assert!(synth_corpus(&SynthSpec {
            doc_len_range: (5, 2),
            ..Default::default()
        })
        .is_err());
    }
}
