use proptest::prelude::*;

use lorafuse::lora::{apply_merged, AdapterRegistry, LoraAdapter};
use lorafuse::matrix::Matrix;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn adapter(d_in: usize, d_out: usize, rank: usize) -> impl Strategy<Value = LoraAdapter> {
    (matrix(d_in, rank), matrix(rank, d_out)).prop_map(|(a, b)| LoraAdapter::new("d", "hidden", a, b).unwrap())
}

fn setup() -> impl Strategy<Value = (Matrix, Vec<LoraAdapter>, Vec<f64>, Vec<f64>)> {
    (1usize..=8, 1usize..=8, 1usize..=4).prop_flat_map(|(d_in, d_out, n)| {
        let rank = d_in.min(d_out);
        (
            matrix(d_in, d_out),
            prop::collection::vec(adapter(d_in, d_out, rank), n),
            prop::collection::vec(0.0f64..3.0, n),
            prop::collection::vec(-1.0f64..1.0, d_in),
        )
    })
}

fn dense(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn naive_product(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    let (a, b) = (dense(a), dense(b));
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(&b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn merged_forward_is_linear_in_adapters((base, adapters, weights, x) in setup()) {
        let ids: Vec<LoraAdapter> =
            adapters.iter().enumerate().map(|(i, a)| a.clone().with_domain_id(format!("d{i}"))).collect();
        let registry = AdapterRegistry::new(ids, None).unwrap();
        let got = apply_merged(&base, &registry.merge(&weights).unwrap(), &x).unwrap();
        let mut want = base.left_mul(&x).unwrap();
        for (ad, w) in adapters.iter().zip(&weights) {
            for (o, v) in want.iter_mut().zip(ad.delta_apply(&x).unwrap()) {
                *o += w * v;
            }
        }
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn factored_path_matches_dense_product((_, adapters, _, x) in setup(), s in 0.0f64..4.0) {
        let ad = &adapters[0];
        let delta = naive_product(ad.a(), ad.b());
        let factored = ad.delta_apply(&x).unwrap();
        for (j, f) in factored.iter().enumerate() {
            let d: f64 = x.iter().zip(&delta).map(|(xi, row)| xi * row[j]).sum();
            prop_assert!((f - d).abs() < 1e-10);
        }
        let registry = AdapterRegistry::new(vec![ad.clone()], None).unwrap();
        let scaled = registry.merge(&[s]).unwrap();
        prop_assert!(scaled.max_abs_diff(&ad.dense_delta().scale(s)) < 1e-12);
    }
}
