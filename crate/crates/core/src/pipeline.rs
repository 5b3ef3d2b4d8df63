//! End-to-end runs over a [`RunConfig`]: data preparation, the training
//! stages, artifact layout, fused generation, the ablation table and
//! embedding export.
//!
//! Artifact layout under `model_dir`:
//!
//! ```text
//! domains.json            ordered domain ids
//! base.json  base.bin     toy model
//! adapters/<domain>.*     one adapter per domain
//! unified.json unified.bin
//! encoder/encoder.*       (or the `encoder` path)
//! signatures/<domain>.*   (or the `signatures` path)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::awg::{alpha_entropy, build_random_signature, build_signature, AwgModel, DomainSignature};
use crate::config::{sub_seed, RunConfig, Stage};
use crate::corpus::{load_jsonl, split, synth_corpus, write_jsonl, Corpus, PairRecord, Splits};
use crate::encoder::{train_encoder, Encoder, FeatureExtractor};
use crate::error::{Error, Result};
use crate::fusion::{FusedGenerator, FusionConfig};
use crate::lora::{AdapterRegistry, LoraAdapter};
use crate::matrix::Matrix;
use crate::model::{argmax, train_adapter, train_full, Example, ToyModel, Vocab};
use crate::store;

pub const UNIFIED_ID: &str = "unified";

/// The corpus, its splits and the domain order every artifact follows.
#[derive(Debug, Clone)]
pub struct Data {
    pub corpus: Corpus,
    pub splits: Splits,
    pub domains: Vec<String>,
}

impl Data {
    pub fn domain_refs(&self) -> Vec<&str> {
        self.domains.iter().map(String::as_str).collect()
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus {
        Some(path) => load_jsonl(path),
        None => synth_corpus(&cfg.synth_spec()),
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Data> {
    let corpus = load_corpus(cfg)?;
    if corpus.domains.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two domains, found {}",
            corpus.domains.len()
        )));
    }
    let splits = split(&corpus, &cfg.split_spec())?;
    for d in &splits.train.domains {
        if d.records.len() < 2 {
            return Err(Error::Data(format!(
                "domain {:?} has {} training records; at least 2 are needed",
                d.id,
                d.records.len()
            )));
        }
    }
    let domains = corpus.domain_ids().iter().map(|s| s.to_string()).collect();
    Ok(Data {
        corpus,
        splits,
        domains,
    })
}

/// Writes `corpus.jsonl`, `train/valid/test.jsonl` and `splits.json` (record
/// counts per domain) into `data_dir`.
pub fn write_corpus_files(cfg: &RunConfig, data: &Data) -> Result<Vec<PathBuf>> {
    let dir = &cfg.data_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, corpus) in [
        ("corpus", &data.corpus),
        ("train", &data.splits.train),
        ("valid", &data.splits.valid),
        ("test", &data.splits.test),
    ] {
        let path = dir.join(format!("{name}.jsonl"));
        write_jsonl(&path, corpus)?;
        written.push(path);
    }
    let mut manifest = serde_json::Map::new();
    for (name, corpus) in [
        ("train", &data.splits.train),
        ("valid", &data.splits.valid),
        ("test", &data.splits.test),
    ] {
        let counts: serde_json::Map<String, serde_json::Value> = corpus
            .domains
            .iter()
            .map(|d| (d.id.clone(), d.records.len().into()))
            .collect();
        manifest.insert(name.into(), counts.into());
    }
    let path = dir.join("splits.json");
    let text = serde_json::to_string_pretty(&manifest).expect("counts serialise") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Vocabulary over the training split's sources and targets.
pub fn build_vocab(train: &Corpus) -> Vocab {
    Vocab::from_texts(train.records().flat_map(|r| [r.source.as_str(), r.target.as_str()]))
}

/// Next-token problems on the target side of `<bos> source <sep> target <eos>`.
pub fn target_examples<'a>(
    vocab: &Vocab,
    records: impl IntoIterator<Item = &'a PairRecord>,
    window: usize,
    max_len: usize,
) -> Vec<Example> {
    records
        .into_iter()
        .flat_map(|r| {
            let (mut seq, start) = vocab.paired_sequence(&r.source, &r.target);
            seq.truncate(max_len.max(start + 1));
            Example::from_sequence(&seq, start, window)
        })
        .collect()
}

/// Next-token problems over `<bos> source <eos>`, the base model's data.
pub fn source_examples<'a>(
    vocab: &Vocab,
    records: impl IntoIterator<Item = &'a PairRecord>,
    window: usize,
    max_len: usize,
) -> Vec<Example> {
    records
        .into_iter()
        .flat_map(|r| {
            let mut seq = vec![Vocab::BOS];
            seq.extend(vocab.encode(&r.source));
            seq.push(Vocab::EOS);
            seq.truncate(max_len.max(2));
            Example::from_sequence(&seq, 1, window)
        })
        .collect()
}

/// Loss before and after one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLoss {
    pub name: String,
    pub initial: f64,
    pub final_loss: f64,
}

impl StageLoss {
    fn check(self, epochs: usize) -> Result<Self> {
        if epochs > 0 && self.final_loss.partial_cmp(&self.initial) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Contract(format!(
                "{}: training loss did not decrease ({:.6} -> {:.6})",
                self.name, self.initial, self.final_loss
            )));
        }
        Ok(self)
    }
}

/// Full-scope training of the toy model on the source side of the training
/// split.
pub fn train_base(cfg: &RunConfig, data: &Data) -> Result<(ToyModel, StageLoss)> {
    let vocab = build_vocab(&data.splits.train);
    let mut model = ToyModel::init(
        vocab,
        cfg.model_dim,
        cfg.context_window,
        sub_seed(cfg.seed, Stage::BaseInit),
    )?;
    let examples = source_examples(
        model.vocab(),
        data.splits.train.records(),
        cfg.context_window,
        cfg.doc_max_len,
    );
    let initial = model.evaluate(None, &examples)?.cross_entropy;
    let train_cfg = cfg.base_train_config();
    train_full(&mut model, &examples, &train_cfg)?;
    let final_loss = model.evaluate(None, &examples)?.cross_entropy;
    let loss = StageLoss {
        name: "base".into(),
        initial,
        final_loss,
    }
    .check(train_cfg.epochs)?;
    Ok((model, loss))
}

fn fit_adapter(
    cfg: &RunConfig,
    model: &ToyModel,
    name: &str,
    train: Vec<Example>,
    valid: Vec<Example>,
) -> Result<(LoraAdapter, StageLoss)> {
    let train_cfg = cfg.lora_train_config();
    let valid = (!valid.is_empty()).then_some(valid.as_slice());
    let run = train_adapter(model, &train, valid, &train_cfg, name)?;
    let initial = model.evaluate(None, &train)?.cross_entropy;
    let final_loss = model.evaluate(Some(&run.adapter.dense_delta()), &train)?.cross_entropy;
    let loss = StageLoss {
        name: format!("adapter {name}"),
        initial,
        final_loss,
    }
    .check(train_cfg.epochs)?;
    Ok((run.adapter, loss))
}

/// One adapter per domain, each trained on that domain's target side only.
pub fn train_domain_adapters(
    cfg: &RunConfig,
    model: &ToyModel,
    data: &Data,
) -> Result<(Vec<LoraAdapter>, Vec<StageLoss>)> {
    let mut adapters = Vec::with_capacity(data.domains.len());
    let mut losses = Vec::with_capacity(data.domains.len());
    for id in &data.domains {
        let records = |c: &Corpus| c.domain(id).map(|d| d.records.clone()).unwrap_or_default();
        let train = target_examples(
            model.vocab(),
            &records(&data.splits.train),
            cfg.context_window,
            cfg.doc_max_len,
        );
        let valid = target_examples(
            model.vocab(),
            &records(&data.splits.valid),
            cfg.context_window,
            cfg.doc_max_len,
        );
        let (adapter, loss) = fit_adapter(cfg, model, id, train, valid)?;
        log::info!("{}: {:.4} -> {:.4}", loss.name, loss.initial, loss.final_loss);
        adapters.push(adapter);
        losses.push(loss);
    }
    Ok((adapters, losses))
}

/// The all-domain adapter.
pub fn train_unified_adapter(cfg: &RunConfig, model: &ToyModel, data: &Data) -> Result<(LoraAdapter, StageLoss)> {
    let train = target_examples(
        model.vocab(),
        data.splits.train.records(),
        cfg.context_window,
        cfg.doc_max_len,
    );
    let valid = target_examples(
        model.vocab(),
        data.splits.valid.records(),
        cfg.context_window,
        cfg.doc_max_len,
    );
    let (adapter, loss) = fit_adapter(cfg, model, UNIFIED_ID, train, valid)?;
    log::info!("{}: {:.4} -> {:.4}", loss.name, loss.initial, loss.final_loss);
    Ok((adapter, loss))
}

/// The encoder before contrastive training.
pub fn initial_encoder(cfg: &RunConfig) -> Result<Encoder> {
    Encoder::init(
        FeatureExtractor::new(cfg.feature_dim, cfg.hash_seed)?,
        cfg.encoder_dim,
        sub_seed(cfg.seed, Stage::EncoderInit),
        cfg.normalize_embeddings,
    )
}

/// Source texts of a split, one list per domain in `domains` order.
pub fn sources_by_domain(corpus: &Corpus, domains: &[String]) -> Vec<Vec<String>> {
    domains
        .iter()
        .map(|id| {
            corpus
                .domain(id)
                .map(|d| d.records.iter().map(|r| r.source.clone()).collect())
                .unwrap_or_default()
        })
        .collect()
}

pub fn train_encoder_stage(cfg: &RunConfig, data: &Data) -> Result<(Encoder, StageLoss)> {
    let corpora = sources_by_domain(&data.splits.train, &data.domains);
    let contrastive = cfg.contrastive_config();
    let run = train_encoder(&initial_encoder(cfg)?, &corpora, &contrastive)?;
    let loss = StageLoss {
        name: "encoder".into(),
        initial: run.initial_loss,
        final_loss: run.final_loss,
    }
    .check(contrastive.epochs)?;
    Ok((run.encoder, loss))
}

/// k-means medoid signatures over each domain's training sources.
pub fn build_signatures(cfg: &RunConfig, encoder: &Encoder, data: &Data) -> Result<Vec<DomainSignature>> {
    let corpora = sources_by_domain(&data.splits.train, &data.domains);
    let kmeans = cfg.kmeans_config();
    data.domains
        .iter()
        .zip(&corpora)
        .map(|(id, texts)| build_signature(id, texts, encoder, cfg.clusters, &kmeans))
        .collect()
}

/// Signatures from uniformly sampled training sources instead of medoids.
pub fn build_random_signatures(cfg: &RunConfig, encoder: &Encoder, data: &Data) -> Result<Vec<DomainSignature>> {
    let corpora = sources_by_domain(&data.splits.train, &data.domains);
    let seed = sub_seed(cfg.seed, Stage::RandomSignature);
    data.domains
        .iter()
        .zip(&corpora)
        .enumerate()
        .map(|(i, (id, texts))| build_random_signature(id, texts, encoder, cfg.clusters, seed.wrapping_add(i as u64)))
        .collect()
}

/// Every trained component.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub model: ToyModel,
    pub registry: AdapterRegistry,
    pub encoder: Encoder,
    pub signatures: Vec<DomainSignature>,
}

/// Runs every training stage in order.
pub fn train_all(cfg: &RunConfig, data: &Data) -> Result<(Artifacts, Vec<StageLoss>)> {
    let (model, base_loss) = train_base(cfg, data)?;
    let (adapters, mut losses) = train_domain_adapters(cfg, &model, data)?;
    let (unified, unified_loss) = train_unified_adapter(cfg, &model, data)?;
    let (encoder, encoder_loss) = train_encoder_stage(cfg, data)?;
    let signatures = build_signatures(cfg, &encoder, data)?;
    losses.insert(0, base_loss);
    losses.push(unified_loss);
    losses.push(encoder_loss);
    let registry = AdapterRegistry::new(adapters, Some(unified))?;
    Ok((
        Artifacts {
            model,
            registry,
            encoder,
            signatures,
        },
        losses,
    ))
}

/// Paths of every artifact for a configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    pub model_dir: PathBuf,
    pub encoder_dir: PathBuf,
    pub signatures_dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            model_dir: cfg.model_dir.clone(),
            encoder_dir: cfg.encoder_dir(),
            signatures_dir: cfg.signatures_dir(),
        }
    }

    pub fn domains(&self) -> PathBuf {
        self.model_dir.join("domains.json")
    }

    pub fn base(&self) -> PathBuf {
        self.model_dir.join("base.json")
    }

    pub fn adapters_dir(&self) -> PathBuf {
        self.model_dir.join("adapters")
    }

    pub fn adapter(&self, domain: &str) -> PathBuf {
        self.adapters_dir().join(format!("{}.json", store::file_stem(domain)))
    }

    pub fn unified(&self) -> PathBuf {
        self.model_dir.join(format!("{UNIFIED_ID}.json"))
    }

    pub fn encoder(&self) -> PathBuf {
        self.encoder_dir.join("encoder.json")
    }

    pub fn signature(&self, domain: &str) -> PathBuf {
        self.signatures_dir.join(format!("{}.json", store::file_stem(domain)))
    }

    fn check_stems(domains: &[String]) -> Result<()> {
        let mut stems: Vec<String> = domains.iter().map(|d| store::file_stem(d)).collect();
        stems.push(UNIFIED_ID.into());
        stems.sort();
        if let Some(w) = stems.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("domain ids map to the same file name {:?}", w[0])));
        }
        Ok(())
    }

    pub fn save_domains(&self, domains: &[String]) -> Result<()> {
        Self::check_stems(domains)?;
        let refs: Vec<&str> = domains.iter().map(String::as_str).collect();
        store::save_domains(&self.domains(), &refs)
    }

    pub fn load_domains(&self) -> Result<Vec<String>> {
        store::load_domains(&self.domains())
    }

    pub fn save_base(&self, model: &ToyModel) -> Result<()> {
        store::save_model(&self.model_dir, "base", model).map(drop)
    }

    pub fn load_base(&self) -> Result<ToyModel> {
        store::load_model(&self.base())
    }

    pub fn save_adapters(&self, adapters: &[LoraAdapter]) -> Result<()> {
        for a in adapters {
            store::save_adapter(&self.adapters_dir(), &store::file_stem(a.domain_id()), a)?;
        }
        Ok(())
    }

    pub fn load_adapters(&self, domains: &[String]) -> Result<Vec<LoraAdapter>> {
        domains.iter().map(|d| store::load_adapter(&self.adapter(d))).collect()
    }

    pub fn save_unified(&self, adapter: &LoraAdapter) -> Result<()> {
        store::save_adapter(&self.model_dir, UNIFIED_ID, adapter).map(drop)
    }

    pub fn load_unified(&self) -> Result<LoraAdapter> {
        store::load_adapter(&self.unified())
    }

    pub fn save_encoder(&self, encoder: &Encoder) -> Result<()> {
        store::save_encoder(&self.encoder_dir, "encoder", encoder).map(drop)
    }

    pub fn load_encoder(&self) -> Result<Encoder> {
        store::load_encoder(&self.encoder())
    }

    pub fn save_signatures(&self, signatures: &[DomainSignature]) -> Result<()> {
        for s in signatures {
            store::save_signature(&self.signatures_dir, &store::file_stem(&s.domain_id), s)?;
        }
        Ok(())
    }

    pub fn load_signatures(&self, domains: &[String]) -> Result<Vec<DomainSignature>> {
        domains
            .iter()
            .map(|d| store::load_signature(&self.signature(d)))
            .collect()
    }

    pub fn save_all(&self, domains: &[String], artifacts: &Artifacts) -> Result<()> {
        self.save_domains(domains)?;
        self.save_base(&artifacts.model)?;
        self.save_adapters(artifacts.registry.adapters())?;
        if let Some(u) = artifacts.registry.unified() {
            self.save_unified(u)?;
        }
        self.save_encoder(&artifacts.encoder)?;
        self.save_signatures(&artifacts.signatures)
    }

    pub fn load_all(&self) -> Result<Artifacts> {
        let domains = self.load_domains()?;
        let registry = AdapterRegistry::new(self.load_adapters(&domains)?, Some(self.load_unified()?))?;
        Ok(Artifacts {
            model: self.load_base()?,
            registry,
            encoder: self.load_encoder()?,
            signatures: self.load_signatures(&domains)?,
        })
    }
}

/// The generator that `paraphrase` and the `full` ablation row both use.
pub fn fused_generator(cfg: &RunConfig, artifacts: &Artifacts) -> Result<FusedGenerator> {
    generator_with(
        artifacts,
        artifacts.encoder.clone(),
        artifacts.signatures.clone(),
        cfg.fusion_config(),
    )
}

fn generator_with(
    artifacts: &Artifacts,
    encoder: Encoder,
    signatures: Vec<DomainSignature>,
    config: FusionConfig,
) -> Result<FusedGenerator> {
    let awg = AwgModel::new(encoder, signatures, config.normalize_weights)?;
    FusedGenerator::new(artifacts.model.clone(), artifacts.registry.clone(), awg, config)
}

/// One paraphrase per non-empty input line.
pub fn paraphrase_lines(generator: &FusedGenerator, input: &str) -> Result<Vec<String>> {
    input
        .lines()
        .enumerate()
        .map(|(i, line)| {
            if line.trim().is_empty() {
                return Err(Error::Data(format!("input line {}: empty source text", i + 1)));
            }
            generator.paraphrase_text(line)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    /// Base model, no adapter.
    Pretrained,
    /// Unified adapter only.
    SingleLora,
    /// The true domain's adapter.
    MultiLorasOracle,
    /// Untrained encoder, signatures from random samples, specialised path.
    AwgRandom,
    /// Untrained encoder, k-means signatures, specialised path.
    AwgKmeans,
    /// Trained encoder, k-means signatures, specialised path.
    AwgContrastive,
    /// Uniform average of every domain adapter's logits.
    NoFusion,
    /// The fused generator.
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        Self::Pretrained,
        Self::SingleLora,
        Self::MultiLorasOracle,
        Self::AwgRandom,
        Self::AwgKmeans,
        Self::AwgContrastive,
        Self::NoFusion,
        Self::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrained => "pretrained",
            Self::SingleLora => "single_lora",
            Self::MultiLorasOracle => "multi_loras_oracle",
            Self::AwgRandom => "awg_random",
            Self::AwgKmeans => "awg_kmeans",
            Self::AwgContrastive => "awg_contrastive",
            Self::NoFusion => "no_fusion",
            Self::Full => "full",
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// Percent of held-out target tokens predicted exactly.
    pub token_accuracy: f64,
    /// Percent of held-out sources routed to their own domain.
    pub routing_accuracy: Option<f64>,
    /// Mean entropy (nats) of the normalised adapter weights.
    pub alpha_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn token_accuracy(&self, variant: AblationVariant) -> Option<f64> {
        self.row(variant).map(|r| r.token_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,token_accuracy,routing_accuracy,alpha_entropy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.4},{},{}",
                r.variant.name(),
                r.token_accuracy,
                cell(r.routing_accuracy),
                cell(r.alpha_entropy)
            );
        }
        s
    }

    /// Fixed-width rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<20}{:>16}{:>18}{:>15}\n",
            "variant", "token_acc(%)", "routing_acc(%)", "alpha_entropy"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20}{:>16.2}{:>18}{:>15}",
                r.variant.name(),
                r.token_accuracy,
                r.routing_accuracy
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "-".into()),
                r.alpha_entropy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            );
        }
        s
    }
}

/// Held-out record with its domain index.
struct Item<'a> {
    domain: usize,
    record: &'a PairRecord,
    examples: Vec<Example>,
}

#[derive(Default)]
struct Tally {
    correct: usize,
    tokens: usize,
    routed: usize,
    entropy: f64,
    docs: usize,
}

impl Tally {
    fn score<F>(&mut self, examples: &[Example], mut logits_for: F) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<Vec<f64>>,
    {
        for ex in examples {
            if argmax(&logits_for(&ex.context)?) == ex.target {
                self.correct += 1;
            }
            self.tokens += 1;
        }
        Ok(())
    }

    fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.tokens as f64
        }
    }

    fn routing(&self) -> f64 {
        100.0 * self.routed as f64 / self.docs.max(1) as f64
    }

    fn mean_entropy(&self) -> f64 {
        self.entropy / self.docs.max(1) as f64
    }
}

fn awg_row(variant: AblationVariant, generator: &FusedGenerator, items: &[Item<'_>]) -> Result<AblationRow> {
    let mut t = Tally::default();
    for item in items {
        let input = generator.prepare(&item.record.source)?;
        t.docs += 1;
        if argmax(&input.alpha) == item.domain {
            t.routed += 1;
        }
        t.entropy += alpha_entropy(&input.alpha);
        t.score(&item.examples, |ctx| generator.step_logits(&input, ctx))?;
    }
    Ok(AblationRow {
        variant,
        token_accuracy: t.accuracy(),
        routing_accuracy: Some(t.routing()),
        alpha_entropy: Some(t.mean_entropy()),
    })
}

fn plain_row<F>(
    variant: AblationVariant,
    items: &[Item<'_>],
    entropy: Option<f64>,
    mut logits_for: F,
) -> Result<AblationRow>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    let mut t = Tally::default();
    for item in items {
        t.score(&item.examples, |ctx| logits_for(item.domain, ctx))?;
    }
    Ok(AblationRow {
        variant,
        token_accuracy: t.accuracy(),
        routing_accuracy: None,
        alpha_entropy: entropy,
    })
}

/// Teacher-forced next-token accuracy on the target side of the test split
/// for every [`AblationVariant`].
pub fn run_ablation(cfg: &RunConfig, data: &Data, artifacts: &Artifacts) -> Result<AblationTable> {
    let model = &artifacts.model;
    let registry = &artifacts.registry;
    let unified = registry
        .unified()
        .ok_or_else(|| Error::InvalidArgument("ablation needs the unified adapter".into()))?
        .dense_delta();
    let deltas: Vec<Matrix> = registry.adapters().iter().map(LoraAdapter::dense_delta).collect();
    let n = deltas.len();

    let mut items = Vec::new();
    for (d, id) in data.domains.iter().enumerate() {
        if let Some(dom) = data.splits.test.domain(id) {
            for record in &dom.records {
                let examples = target_examples(model.vocab(), [record], cfg.context_window, cfg.doc_max_len);
                items.push(Item {
                    domain: d,
                    record,
                    examples,
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }

    let untrained = initial_encoder(cfg)?;
    let specialised = FusionConfig {
        beta: 1.0,
        ..cfg.fusion_config()
    };

    let mut rows = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let row = match variant {
            AblationVariant::Pretrained => plain_row(variant, &items, None, |_, ctx| model.forward(None, ctx))?,
            AblationVariant::SingleLora => {
                plain_row(variant, &items, None, |_, ctx| model.forward(Some(&unified), ctx))?
            }
            AblationVariant::MultiLorasOracle => plain_row(variant, &items, Some(0.0), |d, ctx| {
                model.forward(Some(&deltas[d]), ctx)
            })?,
            AblationVariant::AwgRandom => {
                let sigs = build_random_signatures(cfg, &untrained, data)?;
                awg_row(
                    variant,
                    &generator_with(artifacts, untrained.clone(), sigs, specialised.clone())?,
                    &items,
                )?
            }
            AblationVariant::AwgKmeans => {
                let sigs = build_signatures(cfg, &untrained, data)?;
                awg_row(
                    variant,
                    &generator_with(artifacts, untrained.clone(), sigs, specialised.clone())?,
                    &items,
                )?
            }
            AblationVariant::AwgContrastive => {
                let g = generator_with(
                    artifacts,
                    artifacts.encoder.clone(),
                    artifacts.signatures.clone(),
                    specialised.clone(),
                )?;
                awg_row(variant, &g, &items)?
            }
            AblationVariant::NoFusion => plain_row(variant, &items, Some((n as f64).ln()), |_, ctx| {
                let mut acc = vec![0.0; model.vocab_size()];
                for delta in &deltas {
                    let l = model.forward(Some(delta), ctx)?;
                    acc.iter_mut().zip(&l).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
                Ok(acc)
            })?,
            AblationVariant::Full => awg_row(variant, &fused_generator(cfg, artifacts)?, &items)?,
        };
        log::info!("ablation {}: {:.2}%", row.variant.name(), row.token_accuracy);
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

/// Routing accuracy (percent) of `awg` on the sources of `corpus`.
pub fn routing_accuracy(awg: &AwgModel, corpus: &Corpus, domains: &[String]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (d, id) in domains.iter().enumerate() {
        if let Some(dom) = corpus.domain(id) {
            for r in &dom.records {
                total += 1;
                if awg.route_index(&r.source) == d {
                    hits += 1;
                }
            }
        }
    }
    100.0 * hits as f64 / total.max(1) as f64
}

/// Embeddings of every source in `corpus` with their domain labels.
pub fn embed_corpus(encoder: &Encoder, corpus: &Corpus, domains: &[String]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (d, id) in domains.iter().enumerate() {
        if let Some(dom) = corpus.domain(id) {
            for r in &dom.records {
                points.push(encoder.embed(&r.source));
                labels.push(d);
            }
        }
    }
    (points, labels)
}

/// CSV with a header and rows `domain_id,text_index,e_1,…,e_d`.
pub fn export_embeddings(encoder: &Encoder, corpus: &Corpus) -> String {
    let mut s = String::from("domain_id,text_index");
    for i in 1..=encoder.embed_dim() {
        let _ = write!(s, ",e_{i}");
    }
    s.push('\n');
    for dom in &corpus.domains {
        for (i, r) in dom.records.iter().enumerate() {
            let _ = write!(s, "{},{i}", csv_field(&dom.id));
            for v in encoder.embed(&r.source) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
