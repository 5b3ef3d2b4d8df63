use proptest::prelude::*;

use lorafuse::config::RunConfig;
use lorafuse::encoder::{
    contrastive_loss, contrastive_loss_with_grads, hash_ngram, sample_pairs, ContrastiveConfig, Encoder,
    FeatureExtractor,
};
use lorafuse::matrix::squared_distance;
use lorafuse::pipeline::{embed_corpus, prepare_data, train_encoder_stage};

fn scalar_loss(pos: f64, negs: &[f64], tau: f64) -> f64 {
    let num = (-pos / tau).exp();
    let den = num + negs.iter().map(|d| (-d / tau).exp()).sum::<f64>();
    -(num / den).ln()
}

#[test]
fn loss_matches_scalar_oracle() {
    // squared distances 0.5, 1.0, 2.0 along orthogonal axes
    let a = [0.0, 0.0, 0.0];
    let p = [0.5f64.sqrt(), 0.0, 0.0];
    let n1 = [0.0, 1.0, 0.0];
    let n2 = [0.0, 0.0, 2.0f64.sqrt()];
    let got = contrastive_loss(&a, &p, &[&n1, &n2], 0.5).unwrap();
    let want = scalar_loss(0.5, &[1.0, 2.0], 0.5);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((want - (1.0 + (-1.0f64).exp() + (-3.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn temperature_rescales_exponents() {
    let a = [0.1, -0.3];
    let p = [0.4, 0.2];
    let n = [-0.5, 0.9];
    let (dp, dn) = (squared_distance(&a, &p), squared_distance(&a, &n));
    for tau in [0.25, 0.5, 2.0] {
        let out = contrastive_loss_with_grads(&a, &p, &[&n], tau).unwrap();
        assert!((out.loss - scalar_loss(dp, &[dn], tau)).abs() < 1e-12);
        // d loss / d p = -(2/τ)(1 - softmax_p)(a - p)
        let sp = (-dp / tau).exp() / ((-dp / tau).exp() + (-dn / tau).exp());
        for j in 0..2 {
            let want = -(2.0 / tau) * (1.0 - sp) * (a[j] - p[j]);
            assert!((out.d_positive[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn symmetric_configuration_has_finite_gradient() {
    let a = [0.3, 0.3];
    let out = contrastive_loss_with_grads(&a, &a, &[&a, &a], 1.0).unwrap();
    assert!((out.loss - 3.0f64.ln()).abs() < 1e-12);
    assert!(out
        .d_anchor
        .iter()
        .chain(&out.d_positive)
        .all(|g| g.is_finite() && *g == 0.0));
}

proptest! {
    #[test]
    fn loss_positive_and_monotone_in_positive_distance(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        n in prop::collection::vec(-1.0f64..1.0, 3),
        dir in prop::collection::vec(-1.0f64..1.0, 3),
        tau in 0.2f64..2.0,
    ) {
        let near: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + 0.1 * d).collect();
        let far: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + 0.5 * d).collect();
        let l_near = contrastive_loss(&a, &near, &[&n], tau).unwrap();
        let l_far = contrastive_loss(&a, &far, &[&n], tau).unwrap();
        prop_assert!(l_near > 0.0);
        prop_assert!(l_far >= l_near);
    }
}

#[test]
fn bigrams_distinguish_token_order() {
    let fx = FeatureExtractor::new(4096, 7).unwrap();
    let encoder = Encoder::init(fx.clone(), 8, 1, false).unwrap();
    let (x, y) = ("cell gene dose", "dose gene cell");
    let slots = |t: &str| {
        let mut s: Vec<usize> = fx.features(t).into_iter().map(|(i, _)| i).collect();
        s.sort_unstable();
        s
    };
    let bigram = |l: &str, r: &str| (hash_ngram(7, &[l, r]) % 4096) as usize;
    assert!(slots(x).contains(&bigram("cell", "gene")));
    assert!(!slots(y).contains(&bigram("cell", "gene")) || bigram("cell", "gene") == bigram("dose", "gene"));
    assert_ne!(encoder.embed(x), encoder.embed(y));
}

#[test]
fn normalized_embeddings_have_unit_norm() {
    let encoder = Encoder::init(FeatureExtractor::new(256, 3).unwrap(), 6, 2, true).unwrap();
    let e = encoder.embed("law court bond rate");
    let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn sampled_negatives_cover_every_other_domain() {
    let corpora: Vec<Vec<String>> = (0..4)
        .map(|d| (0..100).map(|i| format!("d{d} text {i}")).collect())
        .collect();
    let config = ContrastiveConfig::default();
    let samples = sample_pairs(&corpora, &config).unwrap();
    assert_eq!(samples.len(), 500);
    let mut seen = [[0usize; 4]; 4];
    for s in &samples {
        let d = s.anchor.0;
        assert_eq!(s.positive.0, d);
        assert_ne!(s.positive.1, s.anchor.1);
        assert_eq!(s.negatives.len(), 5);
        for n in &s.negatives {
            assert_ne!(n.0, d);
            seen[d][n.0] += 1;
        }
    }
    for (d, row) in seen.iter().enumerate() {
        for (o, &count) in row.iter().enumerate() {
            assert_eq!(count > 0, o != d, "anchor domain {d}, negative domain {o}");
        }
    }
    assert_eq!(sample_pairs(&corpora, &config).unwrap(), samples);
}

fn mean_distances(points: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = squared_distance(&points[i], &points[j]).sqrt();
            let slot = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            slot.0 += d;
            slot.1 += 1;
        }
    }
    (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64)
}

#[test]
fn trained_encoder_separates_held_out_domains() {
    let cfg = RunConfig::default();
    let data = prepare_data(&cfg).unwrap();
    let (encoder, loss) = train_encoder_stage(&cfg, &data).unwrap();
    assert!(loss.final_loss < loss.initial);
    let (points, labels) = embed_corpus(&encoder, &data.splits.test, &data.domains);
    let (intra, inter) = mean_distances(&points, &labels);
    assert!(intra < inter, "intra {intra} inter {inter}");
    let (again, _) = train_encoder_stage(&cfg, &data).unwrap();
    assert_eq!(again.projection(), encoder.projection());
}
