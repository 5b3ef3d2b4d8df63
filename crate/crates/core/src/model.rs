//! A deliberately small next-token model with a single LoRA site.
//!
//! ```text
//! h0     = mean(embed[t] for t in last `context_window` tokens)
//! h1     = tanh(h0 · (hidden + delta))
//! logits = h1 · out
//! ```
//!
//! Gradients are written out by hand so they can be checked against finite
//! differences.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;

/// Name under which adapters for the hidden projection are registered.
pub const LORA_SITE: &str = "hidden";

/// Token inventory. The first four ids are reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SEP: usize = 3;
    pub const RESERVED: [&'static str; 4] = ["<unk>", "<bos>", "<eos>", "<sep>"];

    /// Reserved tokens followed by `tokens` in the given order; duplicates
    /// and reserved names are skipped.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in Self::RESERVED {
            vocab.push(t.to_string());
        }
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    /// Whitespace tokens of `texts`, sorted, so the id assignment does not
    /// depend on text order.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let set: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        Self::new(set)
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// `<bos> source <sep>`, the decoding prompt for a source text.
    pub fn prompt(&self, source: &str) -> Vec<usize> {
        let mut ids = vec![Self::BOS];
        ids.extend(self.encode(source));
        ids.push(Self::SEP);
        ids
    }

    /// `<bos> source <sep> target <eos>` together with the index of the first
    /// target position (the one right after `<sep>`).
    pub fn paired_sequence(&self, source: &str, target: &str) -> (Vec<usize>, usize) {
        let mut ids = self.prompt(source);
        let start = ids.len();
        ids.extend(self.encode(target));
        ids.push(Self::EOS);
        (ids, start)
    }
}

/// One next-token prediction problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub context: Vec<usize>,
    pub target: usize,
}

impl Example {
    /// One example per position `t >= start` of `seq`, each seeing at most
    /// `window` preceding tokens.
    pub fn from_sequence(seq: &[usize], start: usize, window: usize) -> Vec<Example> {
        (start.max(1)..seq.len())
            .map(|t| Example {
                context: seq[t.saturating_sub(window)..t].to_vec(),
                target: seq[t],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableScope {
    /// Only the adapter factors `A` and `B`; the base model stays frozen.
    LoraOnly,
    /// Every base-model matrix.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rank: usize,
    pub trainable_scope: TrainableScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 3,
            batch_size: 4,
            seed: 0,
            rank: 8,
            trainable_scope: TrainableScope::LoraOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vocab,
    dim: usize,
    context_window: usize,
    embed: Matrix,
    hidden: Matrix,
    out: Matrix,
}

/// Intermediate activations kept for the backward pass.
struct Activations {
    h0: Vec<f64>,
    low: Option<Vec<f64>>,
    h1: Vec<f64>,
    logits: Vec<f64>,
}

impl ToyModel {
    /// Uniform initialisation in `±1/sqrt(fan_in)`.
    pub fn init(vocab: Vocab, dim: usize, context_window: usize, seed: u64) -> Result<Self> {
        if dim == 0 || context_window == 0 {
            return Err(Error::Config("dim and context_window must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.len();
        let scale = 1.0 / (dim as f64).sqrt();
        let embed = Matrix::random_uniform(v, dim, 1.0, &mut rng);
        let hidden = Matrix::random_uniform(dim, dim, scale, &mut rng);
        let out = Matrix::random_uniform(dim, v, scale, &mut rng);
        Self::from_parts(vocab, context_window, embed, hidden, out)
    }

    pub fn from_parts(vocab: Vocab, context_window: usize, embed: Matrix, hidden: Matrix, out: Matrix) -> Result<Self> {
        let v = vocab.len();
        let dim = embed.cols();
        if embed.rows() != v || out.cols() != v {
            return Err(Error::shape(
                "ToyModel::from_parts",
                format!("embed {v}xd and out dx{v}"),
                format!(
                    "embed {}x{}, out {}x{}",
                    embed.rows(),
                    embed.cols(),
                    out.rows(),
                    out.cols()
                ),
            ));
        }
        if hidden.shape() != (dim, dim) || out.rows() != dim {
            return Err(Error::shape(
                "ToyModel::from_parts",
                format!("hidden {dim}x{dim}, out {dim}x{v}"),
                format!(
                    "hidden {}x{}, out {}x{}",
                    hidden.rows(),
                    hidden.cols(),
                    out.rows(),
                    out.cols()
                ),
            ));
        }
        if context_window == 0 {
            return Err(Error::Config("context_window must be >= 1".into()));
        }
        Ok(Self {
            vocab,
            dim,
            context_window,
            embed,
            hidden,
            out,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn out(&self) -> &Matrix {
        &self.out
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn window<'c>(&self, context: &'c [usize]) -> Result<&'c [usize]> {
        if context.is_empty() {
            return Err(Error::InvalidArgument("empty context".into()));
        }
        let v = self.vocab_size();
        if let Some(&bad) = context.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        Ok(&context[context.len().saturating_sub(self.context_window)..])
    }

    fn pooled(&self, window: &[usize]) -> Vec<f64> {
        let mut h0 = vec![0.0; self.dim];
        for &t in window {
            for (h, e) in h0.iter_mut().zip(self.embed.row(t)) {
                *h += e;
            }
        }
        let n = window.len() as f64;
        h0.iter_mut().for_each(|h| *h /= n);
        h0
    }

    fn activations(
        &self,
        delta: Option<&Matrix>,
        adapter: Option<&LoraAdapter>,
        context: &[usize],
    ) -> Result<Activations> {
        let window = self.window(context)?;
        let h0 = self.pooled(window);
        let mut z = self.hidden.left_mul_unchecked(&h0);
        if let Some(d) = delta {
            if d.shape() != (self.dim, self.dim) {
                return Err(Error::shape(
                    "forward",
                    format!("delta {}x{}", self.dim, self.dim),
                    format!("{}x{}", d.rows(), d.cols()),
                ));
            }
            if !d.is_zero() {
                let dz = d.left_mul_unchecked(&h0);
                z.iter_mut().zip(dz).for_each(|(a, b)| *a += b);
            }
        }
        let mut low = None;
        if let Some(ad) = adapter {
            let u = ad.a().left_mul(&h0)?;
            let dz = ad.b().left_mul(&u)?;
            if dz.len() != self.dim {
                return Err(Error::shape("forward", self.dim, dz.len()));
            }
            z.iter_mut().zip(dz).for_each(|(a, b)| *a += b);
            low = Some(u);
        }
        let h1: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let logits = self.out.left_mul_unchecked(&h1);
        Ok(Activations { h0, low, h1, logits })
    }

    /// Next-token logits for `context`, with an optional dense delta on the
    /// hidden projection.
    pub fn forward(&self, delta: Option<&Matrix>, context: &[usize]) -> Result<Vec<f64>> {
        Ok(self.activations(delta, None, context)?.logits)
    }

    /// Forward pass with the adapter applied in factored form.
    pub fn forward_with_adapter(&self, adapter: Option<&LoraAdapter>, context: &[usize]) -> Result<Vec<f64>> {
        Ok(self.activations(None, adapter, context)?.logits)
    }

    /// Mean cross-entropy over `batch` and its gradient for `scope`.
    ///
    /// With [`TrainableScope::LoraOnly`] an adapter is required and only its
    /// factors receive gradients. With [`TrainableScope::Full`] an adapter,
    /// if given, is held fixed.
    pub fn loss_and_grads(
        &self,
        adapter: Option<&LoraAdapter>,
        batch: &[Example],
        scope: TrainableScope,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grads = match scope {
            TrainableScope::LoraOnly => {
                let ad = adapter.ok_or_else(|| Error::InvalidArgument("lora_only scope needs an adapter".into()))?;
                Gradients::Lora {
                    a: Matrix::zeros(ad.a().rows(), ad.a().cols()),
                    b: Matrix::zeros(ad.b().rows(), ad.b().cols()),
                }
            }
            TrainableScope::Full => Gradients::Full {
                embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
                hidden: Matrix::zeros(self.dim, self.dim),
                out: Matrix::zeros(self.out.rows(), self.out.cols()),
            },
        };
        let v = self.vocab_size();
        let inv_n = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            if ex.target >= v {
                return Err(Error::InvalidArgument(format!(
                    "target id {} out of range for vocabulary of {v}",
                    ex.target
                )));
            }
            let act = self.activations(None, adapter, &ex.context)?;
            let (loss, mut dlogits) = softmax_cross_entropy(&act.logits, ex.target);
            total += loss;
            dlogits.iter_mut().for_each(|g| *g *= inv_n);

            let dh1 = self.out.mul_transposed_unchecked(&dlogits);
            let dz: Vec<f64> = dh1.iter().zip(&act.h1).map(|(g, h)| g * (1.0 - h * h)).collect();

            match &mut grads {
                Gradients::Lora { a: ga, b: gb } => {
                    let ad = adapter.expect("checked above");
                    let u = act.low.as_ref().expect("adapter forward keeps x·A");
                    outer_accumulate(gb, u, &dz);
                    let du = ad.b().mul_transposed_unchecked(&dz);
                    outer_accumulate(ga, &act.h0, &du);
                }
                Gradients::Full {
                    embed: ge,
                    hidden: gh,
                    out: go,
                } => {
                    outer_accumulate(go, &act.h1, &dlogits);
                    outer_accumulate(gh, &act.h0, &dz);
                    let mut dh0 = self.hidden.mul_transposed_unchecked(&dz);
                    if let Some(ad) = adapter {
                        let du = ad.b().mul_transposed_unchecked(&dz);
                        let extra = ad.a().mul_transposed_unchecked(&du);
                        dh0.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                    }
                    let window = self.window(&ex.context)?;
                    let share = 1.0 / window.len() as f64;
                    for &t in window {
                        for (g, d) in ge.row_mut(t).iter_mut().zip(&dh0) {
                            *g += d * share;
                        }
                    }
                }
            }
        }
        Ok((total * inv_n, grads))
    }

    /// Mean cross-entropy and next-token accuracy under `delta`.
    pub fn evaluate(&self, delta: Option<&Matrix>, examples: &[Example]) -> Result<EvalStats> {
        evaluate_with(examples, |ctx| self.forward(delta, ctx))
    }

    pub(crate) fn apply_full_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        match grads {
            Gradients::Full { embed, hidden, out } => {
                self.embed.add_scaled_in_place(embed, -lr)?;
                self.hidden.add_scaled_in_place(hidden, -lr)?;
                self.out.add_scaled_in_place(out, -lr)?;
                Ok(())
            }
            Gradients::Lora { .. } => Err(Error::InvalidArgument(
                "adapter gradients cannot update the base model".into(),
            )),
        }
    }

    /// Flat views of the trainable base matrices, for finite-difference checks.
    pub fn parameters_mut(&mut self) -> [&mut [f64]; 3] {
        [self.embed.values_mut(), self.hidden.values_mut(), self.out.values_mut()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradients {
    Lora { a: Matrix, b: Matrix },
    Full { embed: Matrix, hidden: Matrix, out: Matrix },
}

fn outer_accumulate(target: &mut Matrix, left: &[f64], right: &[f64]) {
    for (r, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (t, x) in target.row_mut(r).iter_mut().zip(right) {
            *t += l * x;
        }
    }
}

/// Loss `-log softmax(logits)[target]` and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Cross-entropy and argmax accuracy of any logit function over `examples`.
pub fn evaluate_with<F>(examples: &[Example], mut logits_for: F) -> Result<EvalStats>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation examples".into()));
    }
    let mut ce = 0.0;
    let mut hits = 0usize;
    for ex in examples {
        let logits = logits_for(&ex.context)?;
        ce += softmax_cross_entropy(&logits, ex.target).0;
        if argmax(&logits) == ex.target {
            hits += 1;
        }
    }
    let n = examples.len();
    Ok(EvalStats {
        cross_entropy: ce / n as f64,
        accuracy: hits as f64 / n as f64,
        count: n,
    })
}

/// Greedy decoding from an arbitrary logit function: appends the argmax token
/// until `<eos>` or `max_len` emitted tokens. Returns only the emitted tokens.
pub fn greedy_decode_with<F>(prompt: &[usize], max_len: usize, mut logits_for: F) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let mut context = prompt.to_vec();
    let mut emitted = Vec::new();
    while emitted.len() < max_len {
        let next = argmax(&logits_for(&context)?);
        emitted.push(next);
        context.push(next);
        if next == Vocab::EOS {
            break;
        }
    }
    Ok(emitted)
}

pub fn greedy_decode(model: &ToyModel, delta: Option<&Matrix>, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
    greedy_decode_with(prompt, max_len, |ctx| model.forward(delta, ctx))
}

#[derive(Debug, Clone)]
pub struct AdapterTraining {
    pub adapter: LoraAdapter,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation cross-entropy after each epoch, when a validation set was given.
    pub valid_losses: Vec<f64>,
    /// Epoch (1-based) whose adapter was kept; 0 means the initial adapter.
    pub selected_epoch: usize,
}

/// Mini-batch SGD on the adapter factors with the base model frozen.
///
/// With a validation set the adapter from the epoch with the lowest
/// validation cross-entropy is returned.
pub fn train_adapter(
    model: &ToyModel,
    train: &[Example],
    valid: Option<&[Example]>,
    config: &TrainConfig,
    domain_id: &str,
) -> Result<AdapterTraining> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("no training examples for {domain_id:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adapter = LoraAdapter::init(
        domain_id,
        LORA_SITE,
        model.dim(),
        model.dim(),
        config.rank.min(model.dim()),
        &mut rng,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut valid_losses = Vec::new();
    let mut best: Option<(f64, LoraAdapter, usize)> = None;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (loss, grads) = model.loss_and_grads(Some(&adapter), &batch, TrainableScope::LoraOnly)?;
            let Gradients::Lora { a: ga, b: gb } = grads else {
                unreachable!("lora scope yields lora gradients")
            };
            let (a, b) = adapter.factors_mut();
            a.add_scaled_in_place(&ga, -config.learning_rate)?;
            b.add_scaled_in_place(&gb, -config.learning_rate)?;
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        if let Some(valid) = valid {
            let ce = model.evaluate(Some(&adapter.dense_delta()), valid)?.cross_entropy;
            valid_losses.push(ce);
            if best.as_ref().is_none_or(|(b, _, _)| ce < *b) {
                best = Some((ce, adapter.clone(), epoch));
            }
        }
    }
    let (adapter, selected_epoch) = match best {
        Some((_, ad, epoch)) => (ad, epoch),
        None => (adapter, config.epochs),
    };
    Ok(AdapterTraining {
        adapter,
        epoch_losses,
        valid_losses,
        selected_epoch,
    })
}

/// Mini-batch SGD over every base-model matrix. Returns per-epoch mean losses.
pub fn train_full(model: &mut ToyModel, train: &[Example], config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples for the base model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (loss, grads) = model.loss_and_grads(None, &batch, TrainableScope::Full)?;
            model.apply_full_step(&grads, config.learning_rate)?;
            sum += loss;
            batches += 1;
        }
        losses.push(sum / batches as f64);
    }
    Ok(losses)
}
