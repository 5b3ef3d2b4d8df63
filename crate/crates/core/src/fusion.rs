//! Dynamic fusion of the specialised path (domain adapters merged with the
//! generator's weights) and the generalised path (the all-domain adapter).
//!
//! By default the two paths are combined per decoding step at the logit
//! level: `β·s + (1−β)·g`. [`FusionLevel::Params`] instead averages the two
//! deltas and runs a single forward pass.

use std::str::FromStr;

use crate::awg::AwgModel;
use crate::error::{Error, Result};
use crate::lora::AdapterRegistry;
use crate::matrix::Matrix;
use crate::model::{greedy_decode_with, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionLevel {
    #[default]
    Logits,
    Params,
}

impl FromStr for FusionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(Self::Logits),
            "params" => Ok(Self::Params),
            other => Err(Error::Config(format!(
                "fusion level must be `logits` or `params`, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for FusionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Logits => "logits",
            Self::Params => "params",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub beta: f64,
    pub max_len: usize,
    pub normalize_weights: bool,
    pub level: FusionLevel,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            max_len: 64,
            normalize_weights: false,
            level: FusionLevel::Logits,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `β·s + (1−β)·g`; the endpoints return one input unchanged.
pub fn fuse_step(config: &FusionConfig, specialized: &[f64], generalized: &[f64]) -> Result<Vec<f64>> {
    if specialized.len() != generalized.len() {
        return Err(Error::shape("fuse_step", specialized.len(), generalized.len()));
    }
    let beta = config.beta;
    if beta == 1.0 {
        return Ok(specialized.to_vec());
    }
    if beta == 0.0 {
        return Ok(generalized.to_vec());
    }
    Ok(specialized
        .iter()
        .zip(generalized)
        .map(|(s, g)| beta * s + (1.0 - beta) * g)
        .collect())
}

/// Per-input state: the weights and the deltas they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub alpha: Vec<f64>,
    pub specialized_delta: Matrix,
}

#[derive(Debug, Clone)]
pub struct FusedGenerator {
    model: ToyModel,
    registry: AdapterRegistry,
    awg: AwgModel,
    config: FusionConfig,
    unified_delta: Matrix,
}

impl FusedGenerator {
    pub fn new(model: ToyModel, registry: AdapterRegistry, awg: AwgModel, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let unified = registry
            .unified()
            .ok_or_else(|| Error::InvalidArgument("fusion needs the unified adapter".into()))?;
        if registry.domain_ids() != awg.domain_ids() {
            return Err(Error::InvalidArgument(format!(
                "adapter order {:?} does not match signature order {:?}",
                registry.domain_ids(),
                awg.domain_ids()
            )));
        }
        if (unified.d_in(), unified.d_out()) != (model.dim(), model.dim()) {
            return Err(Error::shape(
                "FusedGenerator::new",
                format!("{0}x{0} adapters", model.dim()),
                format!("{}x{}", unified.d_in(), unified.d_out()),
            ));
        }
        let unified_delta = unified.dense_delta();
        let awg = awg.with_normalize_weights(config.normalize_weights);
        Ok(Self {
            model,
            registry,
            awg,
            config,
            unified_delta,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn registry(&self) -> &AdapterRegistry {
        &self.registry
    }

    pub fn awg(&self) -> &AwgModel {
        &self.awg
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn alpha(&self, source_text: &str) -> Vec<f64> {
        self.awg.weights(source_text)
    }

    pub fn prepare_with_alpha(&self, alpha: Vec<f64>) -> Result<PreparedInput> {
        let specialized_delta = self.registry.merge(&alpha)?;
        Ok(PreparedInput {
            alpha,
            specialized_delta,
        })
    }

    pub fn prepare(&self, source_text: &str) -> Result<PreparedInput> {
        self.prepare_with_alpha(self.alpha(source_text))
    }

    /// Forward pass with `θ + Σ α_i Δθ_i`.
    pub fn specialized_logits(&self, alpha: &[f64], context: &[usize]) -> Result<Vec<f64>> {
        let delta = self.registry.merge(alpha)?;
        self.model.forward(Some(&delta), context)
    }

    /// Forward pass with `θ + Δθ_0`.
    pub fn generalized_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        self.model.forward(Some(&self.unified_delta), context)
    }

    /// Fused logits for one decoding step.
    pub fn step_logits(&self, input: &PreparedInput, context: &[usize]) -> Result<Vec<f64>> {
        match self.config.level {
            FusionLevel::Logits => {
                let s = self.model.forward(Some(&input.specialized_delta), context)?;
                let g = self.model.forward(Some(&self.unified_delta), context)?;
                fuse_step(&self.config, &s, &g)
            }
            FusionLevel::Params => {
                let beta = self.config.beta;
                let delta = if beta == 1.0 {
                    input.specialized_delta.clone()
                } else if beta == 0.0 {
                    self.unified_delta.clone()
                } else {
                    let mut d = input.specialized_delta.scale(beta);
                    d.add_scaled_in_place(&self.unified_delta, 1.0 - beta)?;
                    d
                };
                self.model.forward(Some(&delta), context)
            }
        }
    }

    pub fn decode_prepared(&self, input: &PreparedInput, source_text: &str) -> Result<Vec<usize>> {
        if source_text.split_whitespace().next().is_none() {
            return Err(Error::InvalidArgument("empty source text".into()));
        }
        let prompt = self.model.vocab().prompt(source_text);
        greedy_decode_with(&prompt, self.config.max_len, |ctx| self.step_logits(input, ctx))
    }

    /// Greedy fused decode. The weights are computed once from the source.
    pub fn paraphrase(&self, source_text: &str) -> Result<Vec<usize>> {
        if source_text.split_whitespace().next().is_none() {
            return Err(Error::InvalidArgument("empty source text".into()));
        }
        let input = self.prepare(source_text)?;
        self.decode_prepared(&input, source_text)
    }

    /// Paraphrase rendered as text, without the trailing `<eos>`.
    pub fn paraphrase_text(&self, source_text: &str) -> Result<String> {
        let ids = self.paraphrase(source_text)?;
        Ok(render(&self.model, &ids))
    }
}

/// Decoded ids as whitespace-joined tokens, dropping a final `<eos>`.
pub fn render(model: &ToyModel, ids: &[usize]) -> String {
    let ids = match ids.last() {
        Some(&crate::model::Vocab::EOS) => &ids[..ids.len() - 1],
        _ => ids,
    };
    model.vocab().decode(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_step_examples() {
        let mut cfg = FusionConfig::default();
        let s = [2.0, 0.0];
        let g = [0.0, 2.0];
        assert_eq!(fuse_step(&cfg, &s, &g).unwrap(), vec![1.0, 1.0]);
        cfg.beta = 1.0;
        assert_eq!(fuse_step(&cfg, &s, &g).unwrap(), s.to_vec());
        cfg.beta = 0.0;
        assert_eq!(fuse_step(&cfg, &s, &g).unwrap(), g.to_vec());
        assert!(fuse_step(&cfg, &s, &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig {
            beta: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            beta: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            max_len: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!("params".parse::<FusionLevel>().unwrap(), FusionLevel::Params);
        assert!("hidden".parse::<FusionLevel>().is_err());
    }
}
