use std::collections::HashSet;
use std::fs;
use std::path::Path;

use lorafuse::corpus::{load_jsonl, split, synth_corpus, SplitSpec, SynthSpec};
use lorafuse::Error;

#[test]
fn fixture_with_extra_keys_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pairs.jsonl");
    let corpus = load_jsonl(&path).unwrap();
    assert_eq!(corpus.domain_ids(), ["medicine", "law"]);
    assert_eq!(corpus.domain("medicine").unwrap().records.len(), 2);
    assert_eq!(
        corpus.domain("law").unwrap().records[0].target,
        "the person sued for harm"
    );
}

#[test]
fn malformed_lines_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(
        &path,
        "{\"domain\":\"a\",\"source\":\"x\",\"target\":\"y\"}\n{not json\n",
    )
    .unwrap();
    assert!(matches!(load_jsonl(&path), Err(Error::Parse { line: 2, .. })));

    fs::write(&path, "{\"domain\":\"a\",\"target\":\"y\"}\n").unwrap();
    let err = load_jsonl(&path).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    assert!(err.to_string().contains("source"));

    fs::write(&path, "").unwrap();
    assert!(load_jsonl(&path).unwrap().domains.is_empty());
}

fn jaccard(a: &HashSet<&str>, b: &HashSet<&str>) -> f64 {
    a.intersection(b).count() as f64 / a.union(b).count() as f64
}

#[test]
fn synthetic_domains_barely_share_source_tokens() {
    let corpus = synth_corpus(&SynthSpec::default()).unwrap();
    let vocabs: Vec<HashSet<&str>> = corpus
        .domains
        .iter()
        .map(|d| d.records.iter().flat_map(|r| r.source.split_whitespace()).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..vocabs.len() {
        for j in i + 1..vocabs.len() {
            total += jaccard(&vocabs[i], &vocabs[j]);
            pairs += 1;
        }
    }
    let mean = total / pairs as f64;
    assert!(mean < 0.2, "mean Jaccard {mean}");
    assert_eq!(synth_corpus(&SynthSpec::default()).unwrap(), corpus);
}

#[test]
fn stratified_split_of_the_default_corpus() {
    let corpus = synth_corpus(&SynthSpec::default()).unwrap();
    let splits = split(&corpus, &SplitSpec::default()).unwrap();
    for part in [&splits.train, &splits.valid, &splits.test] {
        assert_eq!(part.domain_ids(), corpus.domain_ids());
    }
    for id in corpus.domain_ids() {
        let sizes = [&splits.train, &splits.valid, &splits.test].map(|p| p.domain(id).unwrap().records.len());
        assert_eq!(sizes, [160, 20, 20]);
    }
    let mut parts: Vec<_> = splits
        .train
        .records()
        .chain(splits.valid.records())
        .chain(splits.test.records())
        .collect();
    let mut whole: Vec<_> = corpus.records().collect();
    parts.sort_by(|a, b| (&a.domain, &a.source, &a.target).cmp(&(&b.domain, &b.source, &b.target)));
    whole.sort_by(|a, b| (&a.domain, &a.source, &a.target).cmp(&(&b.domain, &b.source, &b.target)));
    assert_eq!(parts, whole);
    assert_eq!(split(&corpus, &SplitSpec::default()).unwrap(), splits);
}
