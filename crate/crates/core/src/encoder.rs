//! Text encoder used by the adapter weight generator.
//!
//! Texts are turned into signed, hashed unigram and bigram counts
//! (L2-normalised), then mapped through a trainable `F×d_e` projection. The
//! projection is trained with a distance-based InfoNCE objective over
//! same-domain positives and other-domain negatives.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{l2_norm, squared_distance, Matrix};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded FNV-1a over the n-gram's tokens, finished with a splitmix step.
pub fn hash_ngram(seed: u64, tokens: &[&str]) -> u64 {
    let mut h = FNV_OFFSET ^ mix64(seed);
    h = (h ^ tokens.len() as u64).wrapping_mul(FNV_PRIME);
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            h = (h ^ 0x1f).wrapping_mul(FNV_PRIME);
        }
        for byte in tok.bytes() {
            h = (h ^ u64::from(byte)).wrapping_mul(FNV_PRIME);
        }
    }
    mix64(h)
}

/// Frozen hashed n-gram featurizer (orders 1 and 2).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    feature_dim: usize,
    hash_seed: u64,
}

impl FeatureExtractor {
    pub fn new(feature_dim: usize, hash_seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        Ok(Self { feature_dim, hash_seed })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    /// Bucket and sign of one n-gram.
    pub fn slot(&self, ngram: &[&str]) -> (usize, f64) {
        let h = hash_ngram(self.hash_seed, ngram);
        let bucket = (h % self.feature_dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    /// Sparse L2-normalised features as `(bucket, value)` pairs sorted by
    /// bucket. Empty text yields no features.
    pub fn features(&self, text: &str) -> Vec<(usize, f64)> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        let mut dense = vec![0.0; self.feature_dim];
        for tok in &tokens {
            let (b, s) = self.slot(std::slice::from_ref(tok));
            dense[b] += s;
        }
        for pair in tokens.windows(2) {
            let (b, s) = self.slot(pair);
            dense[b] += s;
        }
        let norm = l2_norm(&dense);
        if norm == 0.0 {
            return Vec::new();
        }
        dense
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .map(|(i, v)| (i, v / norm))
            .collect()
    }

    pub fn dense_features(&self, text: &str) -> Vec<f64> {
        let mut dense = vec![0.0; self.feature_dim];
        for (i, v) in self.features(text) {
            dense[i] = v;
        }
        dense
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    extractor: FeatureExtractor,
    projection: Matrix,
    normalize_output: bool,
}

impl Encoder {
    pub fn new(extractor: FeatureExtractor, projection: Matrix, normalize_output: bool) -> Result<Self> {
        if projection.rows() != extractor.feature_dim() || projection.cols() == 0 {
            return Err(Error::shape(
                "Encoder::new",
                format!("{}xd_e projection", extractor.feature_dim()),
                format!("{}x{}", projection.rows(), projection.cols()),
            ));
        }
        Ok(Self {
            extractor,
            projection,
            normalize_output,
        })
    }

    /// Random projection with entries uniform in `±sqrt(3/d_e)`, which keeps
    /// unnormalised output norms near one.
    pub fn init(extractor: FeatureExtractor, embed_dim: usize, seed: u64, normalize_output: bool) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / embed_dim as f64).sqrt();
        let projection = Matrix::random_uniform(extractor.feature_dim(), embed_dim, scale, &mut rng);
        Self::new(extractor, projection, normalize_output)
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut Matrix {
        &mut self.projection
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.cols()
    }

    fn project(&self, features: &[(usize, f64)]) -> Vec<f64> {
        let mut u = vec![0.0; self.embed_dim()];
        for &(i, f) in features {
            for (o, p) in u.iter_mut().zip(self.projection.row(i)) {
                *o += f * p;
            }
        }
        u
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let u = self.project(&self.extractor.features(text));
        if self.normalize_output {
            normalize(u).0
        } else {
            u
        }
    }

    /// Pushes `d loss / d embedding` for `text` back onto the projection.
    fn backprop_text(&self, features: &[(usize, f64)], d_embed: &[f64], grad: &mut Matrix) {
        let du: Vec<f64> = if self.normalize_output {
            let (e, norm) = normalize(self.project(features));
            if norm == 0.0 {
                return;
            }
            let along: f64 = e.iter().zip(d_embed).map(|(a, b)| a * b).sum();
            d_embed.iter().zip(&e).map(|(g, ei)| (g - ei * along) / norm).collect()
        } else {
            d_embed.to_vec()
        };
        for &(i, f) in features {
            for (g, d) in grad.row_mut(i).iter_mut().zip(&du) {
                *g += f * d;
            }
        }
    }

    /// Adds `scale · ∂loss/∂projection` for one tuple into `grad` and returns the loss.
    fn accumulate_tuple_grad(
        &self,
        anchor: &str,
        positive: &str,
        negatives: &[&str],
        temperature: f64,
        scale: f64,
        grad: &mut Matrix,
    ) -> Result<f64> {
        let fa = self.extractor.features(anchor);
        let fp = self.extractor.features(positive);
        let fns: Vec<_> = negatives.iter().map(|t| self.extractor.features(t)).collect();
        let ea = self.embed_features(&fa);
        let ep = self.embed_features(&fp);
        let ens: Vec<Vec<f64>> = fns.iter().map(|f| self.embed_features(f)).collect();
        let neg_refs: Vec<&[f64]> = ens.iter().map(Vec::as_slice).collect();
        let out = contrastive_loss_with_grads(&ea, &ep, &neg_refs, temperature)?;
        let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
        self.backprop_text(&fa, &sc(&out.d_anchor), grad);
        self.backprop_text(&fp, &sc(&out.d_positive), grad);
        for (f, d) in fns.iter().zip(&out.d_negatives) {
            self.backprop_text(f, &sc(d), grad);
        }
        Ok(out.loss)
    }

    fn embed_features(&self, features: &[(usize, f64)]) -> Vec<f64> {
        let u = self.project(features);
        if self.normalize_output {
            normalize(u).0
        } else {
            u
        }
    }

    /// Contrastive loss of one tuple and its gradient w.r.t. the projection.
    pub fn contrastive_grads(
        &self,
        anchor: &str,
        positive: &str,
        negatives: &[&str],
        temperature: f64,
    ) -> Result<(f64, Matrix)> {
        let mut grad = Matrix::zeros(self.projection.rows(), self.projection.cols());
        let loss = self.accumulate_tuple_grad(anchor, positive, negatives, temperature, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    pub fn tuple_loss(&self, anchor: &str, positive: &str, negatives: &[&str], temperature: f64) -> Result<f64> {
        let ea = self.embed(anchor);
        let ep = self.embed(positive);
        let ens: Vec<Vec<f64>> = negatives.iter().map(|t| self.embed(t)).collect();
        let refs: Vec<&[f64]> = ens.iter().map(Vec::as_slice).collect();
        contrastive_loss(&ea, &ep, &refs, temperature)
    }
}

fn normalize(mut u: Vec<f64>) -> (Vec<f64>, f64) {
    let n = l2_norm(&u);
    if n > 0.0 {
        u.iter_mut().for_each(|x| *x /= n);
    }
    (u, n)
}

/// `-log( e^{-‖a-p‖²/τ} / (e^{-‖a-p‖²/τ} + Σ_k e^{-‖a-n_k‖²/τ}) )`.
pub fn contrastive_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    Ok(contrastive_loss_with_grads(anchor, positive, negatives, temperature)?.loss)
}

/// Loss value plus its gradient with respect to every input embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

pub fn contrastive_loss_with_grads(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<ContrastiveOutput> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("at least one negative is required".into()));
    }
    let width = anchor.len();
    for v in std::iter::once(positive).chain(negatives.iter().copied()) {
        if v.len() != width {
            return Err(Error::shape("contrastive_loss", width, v.len()));
        }
    }
    // logits[0] is the positive pair
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|v| -squared_distance(anchor, v) / temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (sum.ln() + max - logits[0]).max(0.0);

    // dL/dlogit_j = softmax_j - [j == 0];  dlogit/dv = 2(a - v)/τ, dlogit/da = -2(a - v)/τ
    let mut d_anchor = vec![0.0; width];
    let mut d_others = Vec::with_capacity(logits.len());
    for (j, v) in std::iter::once(positive).chain(negatives.iter().copied()).enumerate() {
        let coeff = exps[j] / sum - if j == 0 { 1.0 } else { 0.0 };
        let factor = 2.0 * coeff / temperature;
        let dv: Vec<f64> = anchor.iter().zip(v).map(|(a, x)| factor * (a - x)).collect();
        d_anchor.iter_mut().zip(&dv).for_each(|(da, d)| *da -= d);
        d_others.push(dv);
    }
    let d_positive = d_others.remove(0);
    Ok(ContrastiveOutput {
        loss,
        d_anchor,
        d_positive,
        d_negatives: d_others,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub negatives_per_positive: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            negatives_per_positive: 5,
            learning_rate: 1e-5,
            epochs: 1,
            batch_size: 16,
            sample_size: 500,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("encoder learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("encoder batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Reference to a text by `(domain index, text index)`.
pub type TextRef = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub anchor: TextRef,
    pub positive: TextRef,
    pub negatives: Vec<TextRef>,
}

/// Draws anchor/positive/negative tuples.
///
/// `sample_size` anchors, stratified evenly across domains. Within a domain
/// anchors run through shuffled passes over its texts, so no text repeats
/// before every text has been used. The positive is
/// another text of the anchor's domain; each negative comes from a uniformly
/// chosen other domain.
pub fn sample_pairs(corpora: &[Vec<String>], config: &ContrastiveConfig) -> Result<Vec<PairSample>> {
    config.validate()?;
    let n = corpora.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "contrastive sampling needs at least 2 domains, got {n}"
        )));
    }
    if let Some(d) = corpora.iter().position(|c| c.len() < 2) {
        return Err(Error::Data(format!(
            "domain {d} has fewer than 2 texts; no positive pair possible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = config.sample_size / n;
    let extra = config.sample_size % n;
    let mut samples = Vec::with_capacity(config.sample_size);
    for (d, texts) in corpora.iter().enumerate() {
        let quota = base + usize::from(d < extra);
        let mut anchors = Vec::with_capacity(quota);
        let mut idx: Vec<usize> = (0..texts.len()).collect();
        while anchors.len() < quota {
            idx.shuffle(&mut rng);
            anchors.extend(idx.iter().take(quota - anchors.len()));
        }
        for anchor in anchors {
            let mut positive = rng.random_range(0..texts.len() - 1);
            if positive >= anchor {
                positive += 1;
            }
            let others: Vec<usize> = (0..n).filter(|&o| o != d).collect();
            let negatives = (0..config.negatives_per_positive)
                .map(|_| {
                    let od = *others.choose(&mut rng).expect("n >= 2");
                    (od, rng.random_range(0..corpora[od].len()))
                })
                .collect();
            samples.push(PairSample {
                anchor: (d, anchor),
                positive: (d, positive),
                negatives,
            });
        }
    }
    Ok(samples)
}

fn text(corpora: &[Vec<String>], r: TextRef) -> &str {
    &corpora[r.0][r.1]
}

/// Mean contrastive loss of `encoder` over `samples`.
pub fn mean_tuple_loss(
    encoder: &Encoder,
    corpora: &[Vec<String>],
    samples: &[PairSample],
    temperature: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let negs: Vec<&str> = s.negatives.iter().map(|&r| text(corpora, r)).collect();
        total += encoder.tuple_loss(text(corpora, s.anchor), text(corpora, s.positive), &negs, temperature)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EncoderTraining {
    pub encoder: Encoder,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// False when the mean tuple loss did not go down; training still returns
    /// the encoder.
    pub improved: bool,
}

/// Mini-batch gradient descent on the projection over sampled tuples.
pub fn train_encoder(
    initial: &Encoder,
    corpora: &[Vec<String>],
    config: &ContrastiveConfig,
) -> Result<EncoderTraining> {
    let samples = sample_pairs(corpora, config)?;
    let mut encoder = initial.clone();
    let initial_loss = mean_tuple_loss(&encoder, corpora, &samples, config.temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e4c0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = Matrix::zeros(encoder.projection.rows(), encoder.projection.cols());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grad.values_mut().iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &samples[i];
                let negs: Vec<&str> = s.negatives.iter().map(|&r| text(corpora, r)).collect();
                sum += encoder.accumulate_tuple_grad(
                    text(corpora, s.anchor),
                    text(corpora, s.positive),
                    &negs,
                    config.temperature,
                    scale,
                    &mut grad,
                )?;
            }
            encoder.projection.add_scaled_in_place(&grad, -config.learning_rate)?;
        }
        epoch_losses.push(sum / samples.len().max(1) as f64);
    }
    let final_loss = mean_tuple_loss(&encoder, corpora, &samples, config.temperature)?;
    let improved = config.epochs == 0 || final_loss < initial_loss;
    if !improved {
        log::warn!("encoder training did not reduce the contrastive loss ({initial_loss:.6} -> {final_loss:.6})");
    }
    Ok(EncoderTraining {
        encoder,
        initial_loss,
        final_loss,
        epoch_losses,
        improved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_encoder() -> Encoder {
        Encoder::init(FeatureExtractor::new(64, 7).unwrap(), 8, 3, true).unwrap()
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        let enc = small_encoder();
        assert_eq!(enc.embed(""), vec![0.0; 8]);
        assert_eq!(enc.embed("   "), vec![0.0; 8]);
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let enc = small_encoder();
        let a = enc.embed("gene expression in cells");
        assert_eq!(a, enc.embed("gene expression in cells"));
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        let f = enc.extractor().dense_features("gene expression in cells");
        assert!((l2_norm(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_losses() {
        let a = [0.3, -0.2];
        let loss = contrastive_loss(&a, &a, &[&a], 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);

        // five negatives each at squared distance 10·τ
        let tau: f64 = 0.5;
        let far = [a[0] + (10.0 * tau).sqrt(), a[1]];
        let negs: Vec<&[f64]> = vec![&far; 5];
        let loss = contrastive_loss(&a, &a, &negs, tau).unwrap();
        let expected = (1.0 + 5.0 * (-10f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 2.2700e-4).abs() < 1e-7);
    }

    #[test]
    fn loss_input_errors() {
        let a = [0.0, 1.0];
        assert!(contrastive_loss(&a, &a, &[], 1.0).is_err());
        assert!(contrastive_loss(&a, &[0.0], &[&a], 1.0).is_err());
        assert!(contrastive_loss(&a, &a, &[&[1.0, 2.0, 3.0]], 1.0).is_err());
        assert!(contrastive_loss(&a, &a, &[&a], 0.0).is_err());
    }

    #[test]
    fn sampling_contract() {
        let corpora = vec![
            vec!["a b".to_string(), "a c".to_string()],
            vec!["x y".to_string(), "x z".to_string()],
        ];
        let cfg = ContrastiveConfig {
            negatives_per_positive: 1,
            sample_size: 4,
            ..Default::default()
        };
        let samples = sample_pairs(&corpora, &cfg).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.anchor.0, s.positive.0);
            assert_ne!(s.anchor.1, s.positive.1);
            assert!(s.negatives.iter().all(|n| n.0 != s.anchor.0));
        }
        assert_eq!(samples, sample_pairs(&corpora, &cfg).unwrap());
        assert!(sample_pairs(&corpora[..1], &cfg).is_err());
    }

    #[test]
    fn zero_epochs_leave_encoder_unchanged() {
        let corpora = vec![
            vec!["a b".to_string(), "a c".to_string()],
            vec!["x y".to_string(), "x z".to_string()],
        ];
        let enc = small_encoder();
        let cfg = ContrastiveConfig {
            epochs: 0,
            sample_size: 4,
            ..Default::default()
        };
        let out = train_encoder(&enc, &corpora, &cfg).unwrap();
        assert_eq!(out.encoder, enc);
        assert_eq!(out.initial_loss, out.final_loss);
    }
}
