//! Adapter weight generator: per-domain signatures built from k-means medoids
//! of encoder embeddings, and per-input adapter weights
//! `α_i = 1 / (1 + ‖E(x) − r_i‖₂)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::kmeans::{distinct_count, kmeans, medoids, KMeansConfig};
use crate::matrix::squared_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSignature {
    pub domain_id: String,
    pub representation: Vec<f64>,
    pub k_used: usize,
    /// Indices into the domain's text list of the points that were averaged.
    pub medoid_indices: Vec<usize>,
}

fn mean_of(points: &[Vec<f64>], indices: &[usize]) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; dim];
    for &i in indices {
        acc.iter_mut().zip(&points[i]).for_each(|(a, v)| *a += v);
    }
    let n = indices.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Embeds the domain's texts, clusters them into `min(k, distinct)` groups and
/// averages the medoid embeddings.
pub fn build_signature(
    domain_id: &str,
    texts: &[String],
    encoder: &Encoder,
    k: usize,
    kmeans_config: &KMeansConfig,
) -> Result<DomainSignature> {
    if texts.is_empty() {
        return Err(Error::Data(format!("domain {domain_id:?} has no texts")));
    }
    if k == 0 {
        return Err(Error::Config("clusters must be >= 1".into()));
    }
    let embeddings: Vec<Vec<f64>> = texts.iter().map(|t| encoder.embed(t)).collect();
    let k_eff = k.min(distinct_count(&embeddings));
    if k_eff < k {
        log::info!("domain {domain_id:?}: only {k_eff} distinct embeddings, using k = {k_eff}");
    }
    let clusters = kmeans(&embeddings, k_eff, kmeans_config)?;
    let medoid_indices = medoids(&clusters, &embeddings);
    Ok(DomainSignature {
        domain_id: domain_id.to_string(),
        representation: mean_of(&embeddings, &medoid_indices),
        k_used: medoid_indices.len(),
        medoid_indices,
    })
}

/// Signature from the mean embedding of `min(k, len)` uniformly sampled texts
/// instead of k-means medoids.
pub fn build_random_signature(
    domain_id: &str,
    texts: &[String],
    encoder: &Encoder,
    k: usize,
    seed: u64,
) -> Result<DomainSignature> {
    if texts.is_empty() {
        return Err(Error::Data(format!("domain {domain_id:?} has no texts")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k.clamp(1, texts.len());
    let mut picked = sample(&mut rng, texts.len(), n).into_vec();
    picked.sort_unstable();
    let embeddings: Vec<Vec<f64>> = texts.iter().map(|t| encoder.embed(t)).collect();
    Ok(DomainSignature {
        domain_id: domain_id.to_string(),
        representation: mean_of(&embeddings, &picked),
        k_used: n,
        medoid_indices: picked,
    })
}

/// Weight for an embedding at distance `d` from a signature.
#[inline]
pub fn alpha_from_distance(d: f64) -> f64 {
    1.0 / (1.0 + d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwgModel {
    encoder: Encoder,
    signatures: Vec<DomainSignature>,
    normalize_weights: bool,
}

impl AwgModel {
    pub fn new(encoder: Encoder, signatures: Vec<DomainSignature>, normalize_weights: bool) -> Result<Self> {
        if signatures.is_empty() {
            return Err(Error::InvalidArgument(
                "weight generator needs at least one signature".into(),
            ));
        }
        let dim = encoder.embed_dim();
        if let Some(s) = signatures.iter().find(|s| s.representation.len() != dim) {
            return Err(Error::shape(
                "AwgModel::new",
                format!("signature width {dim}"),
                format!("{} for {:?}", s.representation.len(), s.domain_id),
            ));
        }
        Ok(Self {
            encoder,
            signatures,
            normalize_weights,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn signatures(&self) -> &[DomainSignature] {
        &self.signatures
    }

    pub fn normalize_weights(&self) -> bool {
        self.normalize_weights
    }

    pub fn with_normalize_weights(mut self, on: bool) -> Self {
        self.normalize_weights = on;
        self
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.signatures.iter().map(|s| s.domain_id.as_str()).collect()
    }

    pub fn weights_for_embedding(&self, embedding: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self
            .signatures
            .iter()
            .map(|s| alpha_from_distance(squared_distance(embedding, &s.representation).sqrt()))
            .collect();
        if self.normalize_weights {
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|a| a / sum).collect()
        } else {
            raw
        }
    }

    pub fn weights(&self, text: &str) -> Vec<f64> {
        self.weights_for_embedding(&self.encoder.embed(text))
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn route_index(&self, text: &str) -> usize {
        crate::model::argmax(&self.weights(text))
    }

    pub fn route(&self, text: &str) -> &str {
        &self.signatures[self.route_index(text)].domain_id
    }
}

/// Shannon entropy (nats) of the weights after L1 normalisation.
pub fn alpha_entropy(alpha: &[f64]) -> f64 {
    let sum: f64 = alpha.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    -alpha
        .iter()
        .map(|a| a / sum)
        .filter(|p| *p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}
