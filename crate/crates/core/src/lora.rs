//! Low-rank adapters and weighted adapter merging.
//!
//! An adapter contributes `x·A·B` on top of a frozen layer `x·W`, with
//! `A: d_in×r` and `B: r×d_out`. No `alpha/r` scaling is applied; whatever
//! scale the delta needs is learned into `A` and `B`.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    domain_id: String,
    layer_name: String,
    a: Matrix,
    b: Matrix,
}

impl LoraAdapter {
    pub fn new(domain_id: impl Into<String>, layer_name: impl Into<String>, a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.cols();
        if a.cols() != b.rows() {
            return Err(Error::shape(
                "LoraAdapter::new",
                format!("b with {} rows", a.cols()),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
        let max_rank = a.rows().min(b.cols());
        if rank == 0 || rank > max_rank {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..={max_rank} for a {}x{} layer",
                a.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            domain_id: domain_id.into(),
            layer_name: layer_name.into(),
            a,
            b,
        })
    }

    /// Standard LoRA initialisation: `A` small uniform, `B` zero, so the
    /// initial delta is exactly zero.
    pub fn init<R: Rng>(
        domain_id: impl Into<String>,
        layer_name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / (d_in as f64).sqrt();
        let a = Matrix::random_uniform(d_in, rank, scale, rng);
        Self::new(domain_id, layer_name, a, Matrix::zeros(rank, d_out))
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    pub fn with_domain_id(mut self, domain_id: impl Into<String>) -> Self {
        self.domain_id = domain_id.into();
        self
    }

    /// Dense `A·B`.
    pub fn dense_delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("adapter factors agree on rank")
    }

    /// `(x·A)·B`, evaluated in factored order.
    pub fn delta_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let low = self.a.left_mul(x)?;
        Ok(self.b.left_mul_unchecked(&low))
    }
}

/// Domain adapters in domain-index order plus the optional all-domain adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterRegistry {
    adapters: Vec<LoraAdapter>,
    unified: Option<LoraAdapter>,
}

impl AdapterRegistry {
    pub fn new(adapters: Vec<LoraAdapter>, unified: Option<LoraAdapter>) -> Result<Self> {
        let mut seen = HashSet::new();
        for ad in &adapters {
            if !seen.insert(ad.domain_id()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate adapter domain_id {:?}",
                    ad.domain_id()
                )));
            }
        }
        let reference = adapters.first().or(unified.as_ref());
        if let Some(first) = reference {
            for ad in adapters.iter().chain(unified.iter()) {
                if ad.layer_name() != first.layer_name() || ad.d_in() != first.d_in() || ad.d_out() != first.d_out() {
                    return Err(Error::shape(
                        "AdapterRegistry::new",
                        format!("{} {}x{}", first.layer_name(), first.d_in(), first.d_out()),
                        format!("{} {}x{}", ad.layer_name(), ad.d_in(), ad.d_out()),
                    ));
                }
            }
        }
        Ok(Self { adapters, unified })
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn unified(&self) -> Option<&LoraAdapter> {
        self.unified.as_ref()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.adapters.iter().map(LoraAdapter::domain_id).collect()
    }

    fn layer_shape(&self) -> Option<(usize, usize)> {
        self.adapters
            .first()
            .or(self.unified.as_ref())
            .map(|a| (a.d_in(), a.d_out()))
    }

    /// Dense `Σ wᵢ·Aᵢ·Bᵢ` over the domain adapters.
    pub fn merge(&self, weights: &[f64]) -> Result<Matrix> {
        if weights.len() != self.adapters.len() {
            return Err(Error::shape(
                "merge",
                format!("{} weights", self.adapters.len()),
                weights.len(),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adapter weights must be finite and non-negative, got {w}"
            )));
        }
        let (d_in, d_out) = self.layer_shape().unwrap_or((0, 0));
        let mut merged = Matrix::zeros(d_in, d_out);
        for (ad, &w) in self.adapters.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            merged.add_scaled_in_place(&ad.dense_delta(), w)?;
        }
        Ok(merged)
    }
}

/// `x·(W + ΔW)`.
pub fn apply_merged(base: &Matrix, delta: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if base.shape() != delta.shape() {
        return Err(Error::shape(
            "apply_merged",
            format!("delta {}x{}", base.rows(), base.cols()),
            format!("{}x{}", delta.rows(), delta.cols()),
        ));
    }
    base.add(delta)?.left_mul(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_b_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_uniform(4, 2, 1.0, &mut rng);
        let ad = LoraAdapter::new("d", "hidden", a, Matrix::zeros(2, 3)).unwrap();
        assert_eq!(ad.delta_apply(&[0.3, -1.0, 2.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn rank_one_example_matches_dense_oracle() {
        let ad = LoraAdapter::new("d", "hidden", m(&[vec![1.0], vec![0.0]]), m(&[vec![2.0, 3.0]])).unwrap();
        // ΔW = [[2,3],[0,0]]; [1,1]·ΔW = [2,3]
        assert_eq!(ad.delta_apply(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(ad.delta_apply(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ad = LoraAdapter::new("d", "hidden", m(&[vec![1.0], vec![0.0]]), m(&[vec![2.0, 3.0]])).unwrap();
        let err = ad.delta_apply(&[1.0, 1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("width 2"), "{err}");
    }

    #[test]
    fn rank_bounds() {
        assert!(LoraAdapter::new("d", "h", Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
        assert!(LoraAdapter::new("d", "h", Matrix::zeros(2, 0), Matrix::zeros(0, 2)).is_err());
        assert!(LoraAdapter::new("d", "h", Matrix::zeros(2, 1), Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn merge_examples() {
        let a1 = LoraAdapter::new("x", "h", m(&[vec![1.0], vec![2.0]]), m(&[vec![3.0, -1.0]])).unwrap();
        let a2 = LoraAdapter::new("y", "h", m(&[vec![0.5], vec![-1.0]]), m(&[vec![4.0, 2.0]])).unwrap();
        let one = AdapterRegistry::new(vec![a1.clone()], None).unwrap();
        assert_eq!(one.merge(&[1.0]).unwrap(), a1.dense_delta());

        let reg = AdapterRegistry::new(vec![a1, a2], None).unwrap();
        assert!(reg.merge(&[0.0, 0.0]).unwrap().is_zero());
        // Dense products worked by hand:
        //   A1B1 = [[3,-1],[6,-2]], A2B2 = [[2,1],[-4,-2]]
        //   0.5·A1B1 + 0.25·A2B2 = [[2,-0.25],[2,-1.5]]
        let merged = reg.merge(&[0.5, 0.25]).unwrap();
        assert_eq!(merged, m(&[vec![2.0, -0.25], vec![2.0, -1.5]]));

        assert!(reg.merge(&[1.0]).is_err());
        assert!(reg.merge(&[1.0, -0.1]).is_err());
        assert!(reg.merge(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn registry_validation() {
        let a = LoraAdapter::new("x", "h", Matrix::zeros(2, 1), Matrix::zeros(1, 2)).unwrap();
        assert!(AdapterRegistry::new(vec![a.clone(), a.clone()], None).is_err());
        let other = LoraAdapter::new("y", "h", Matrix::zeros(3, 1), Matrix::zeros(1, 2)).unwrap();
        assert!(AdapterRegistry::new(vec![a.clone(), other], None).is_err());
        let renamed = LoraAdapter::new("z", "out", Matrix::zeros(2, 1), Matrix::zeros(1, 2)).unwrap();
        assert!(AdapterRegistry::new(vec![a], Some(renamed)).is_err());
    }

    #[test]
    fn apply_merged_reductions() {
        let w = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let x = [0.5, -2.0];
        assert_eq!(
            apply_merged(&w, &Matrix::zeros(2, 2), &x).unwrap(),
            w.left_mul(&x).unwrap()
        );
        let ad = LoraAdapter::new("d", "h", m(&[vec![1.0], vec![0.0]]), m(&[vec![2.0, 3.0]])).unwrap();
        assert_eq!(
            apply_merged(&Matrix::zeros(2, 2), &ad.dense_delta(), &x).unwrap(),
            ad.delta_apply(&x).unwrap()
        );
        assert!(apply_merged(&w, &Matrix::zeros(2, 3), &x).is_err());
    }
}
