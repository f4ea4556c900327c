#![cfg(not(feature = "f32"))]

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaanet::loss::{
    classify, cross_entropy, pcce, pcce_weights, polarity_gate, weighted_nll_loss, EmotionTaxonomy,
    LossConfig, Polarity, Prediction,
};
use vaanet::numerics::{gradcheck, Graph, Tensor};

fn head_probs(e: &[f64], w: &Tensor, b: &[f64]) -> Prediction {
    let mut g = Graph::new();
    let ev = g.constant(Tensor::new(&[1, e.len()], e.to_vec()).unwrap());
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap());
    let z = classify(&mut g, ev, wv, bv).unwrap();
    Prediction::batch(g.value(z)).remove(0)
}

#[test]
fn classify_examples() {
    let p = head_probs(&[0.3, -1.0, 2.0], &Tensor::zeros(&[8, 3]), &[0.0; 8]);
    assert!(p.probs.iter().all(|v| (v - 0.125).abs() < 1e-15));
    assert_eq!(p.predicted, 0);

    let mut bias = [0.0; 8];
    bias[0] = 10.0;
    let p = head_probs(&[0.3, -1.0, 2.0], &Tensor::zeros(&[8, 3]), &bias);
    assert_eq!(p.predicted, 0);
    assert!(p.probs[0] > 0.99);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
    let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = head_probs(&e, &w, &b);
    let logits: Vec<f64> = (0..6)
        .map(|c| b[c] + (0..5).map(|j| w.get(&[c, j]) * e[j]).sum::<f64>())
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (c, l) in logits.iter().enumerate() {
        assert!((p.probs[c] - l.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let uniform: Vec<Prediction> = (0..5).map(|_| Prediction::from_logits(&[0.0; 8])).collect();
    let ce = cross_entropy(&uniform, &[0, 3, 7, 2, 2]).unwrap();
    assert!((ce - 8f64.ln()).abs() < 1e-12);
    assert!((ce - 2.0794).abs() < 1e-4);

    let perfect = vec![Prediction::from_logits(&[1000.0, 0.0, 0.0])];
    assert_eq!(cross_entropy(&perfect, &[0]).unwrap(), 0.0);

    let a = Prediction::from_logits(&[0.2, 1.1, -0.4]);
    let b = Prediction::from_logits(&[2.0, 0.0, 0.5]);
    let want = -(a.probs[1].ln() + b.probs[2].ln()) / 2.0;
    let got = cross_entropy(&[a, b], &[1, 2]).unwrap();
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn polarity_gate_examples() {
    let ve8 = EmotionTaxonomy::ve8();
    let idx = |n: &str| ve8.index_of(n).unwrap();
    assert_eq!(polarity_gate(idx("joy"), idx("anger"), &ve8).unwrap(), 1);
    assert_eq!(polarity_gate(idx("fear"), idx("sadness"), &ve8).unwrap(), 0);
    for y in 0..ve8.len() {
        assert_eq!(polarity_gate(y, y, &ve8).unwrap(), 0);
    }
}

#[test]
fn polarity_gate_is_symmetric() {
    for tax in [EmotionTaxonomy::ve8(), EmotionTaxonomy::e6()] {
        for a in 0..tax.len() {
            for b in 0..tax.len() {
                assert_eq!(polarity_gate(a, b, &tax).unwrap(), polarity_gate(b, a, &tax).unwrap());
            }
        }
    }
}

fn two_class_taxonomy() -> EmotionTaxonomy {
    let mut pol = BTreeMap::new();
    pol.insert("a".to_string(), Polarity::Positive);
    pol.insert("b".to_string(), Polarity::Negative);
    EmotionTaxonomy::new(vec!["a".into(), "b".into()], &pol).unwrap()
}

#[test]
fn pcce_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<Prediction> = (0..6)
        .map(|_| Prediction::from_logits(&(0..8).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()))
        .collect();
    let labels = [0, 1, 2, 3, 4, 5];
    let cfg0 = LossConfig::new(0.0, EmotionTaxonomy::ve8()).unwrap();
    assert_eq!(pcce(&batch, &labels, &cfg0).unwrap(), cross_entropy(&batch, &labels).unwrap());

    // predictions that agree in polarity with their labels
    let consistent: Vec<usize> = batch.iter().map(|p| p.predicted).collect();
    let cfg = LossConfig::new(3.0, EmotionTaxonomy::ve8()).unwrap();
    assert_eq!(
        pcce(&batch, &consistent, &cfg).unwrap(),
        cross_entropy(&batch, &consistent).unwrap()
    );

    let p = Prediction::from_logits(&[0.8f64.ln(), 0.2f64.ln()]);
    assert_eq!(p.predicted, 0);
    let cfg = LossConfig::new(1.0, two_class_taxonomy()).unwrap();
    let got = pcce(&[p], &[1], &cfg).unwrap();
    assert!((got - 2.0 * -(0.2f64.ln())).abs() < 1e-12, "{got}");
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<Prediction>, Vec<usize>) {
    let batch = (0..n)
        .map(|_| Prediction::from_logits(&(0..c).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>()))
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
    (batch, labels)
}

proptest! {
    #[test]
    fn pcce_dominates_ce_and_is_monotone(seed in any::<u64>(), l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, labels) = random_batch(&mut rng, 7, 8);
        let ce = cross_entropy(&batch, &labels).unwrap();
        let (lo, hi) = (l1.min(l2), l1.max(l2));
        let p_lo = pcce(&batch, &labels, &LossConfig::new(lo, EmotionTaxonomy::ve8()).unwrap()).unwrap();
        let p_hi = pcce(&batch, &labels, &LossConfig::new(hi, EmotionTaxonomy::ve8()).unwrap()).unwrap();
        prop_assert!(p_lo >= ce);
        prop_assert!(p_hi >= p_lo);
        let violating = batch.iter().zip(&labels)
            .any(|(p, &y)| polarity_gate(p.predicted, y, &EmotionTaxonomy::ve8()).unwrap() == 1);
        if lo > 0.0 && violating {
            prop_assert!(p_lo > ce);
        }
    }
}

#[test]
fn pcce_gradient_is_weighted_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c) = (5, 6);
    let logits = Tensor::from_fn(&[n, c], |_| rng.gen_range(-2.0..2.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let cfg = LossConfig::new(1.5, EmotionTaxonomy::e6()).unwrap();
    let preds = Prediction::batch(&logits);
    let weights = pcce_weights(&preds, &labels, &cfg).unwrap();
    assert!(weights.iter().any(|w| *w > 1.0), "want at least one gated sample");

    let reports = gradcheck::check(&[logits.clone()], 1e-6, |g, v| weighted_nll_loss(g, v[0], &labels, &weights)).unwrap();
    assert!(reports[0].max_rel_err < 1e-6, "{}", reports[0].max_rel_err);

    for i in 0..n {
        for k in 0..c {
            let onehot = if k == labels[i] { 1.0 } else { 0.0 };
            let want = weights[i] / n as f64 * (preds[i].probs[k] - onehot);
            assert!((reports[0].analytic.get(&[i, k]) - want).abs() < 1e-15);
        }
    }

    // the graph value equals the value-level pcce
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = weighted_nll_loss(&mut g, l, &labels, &weights).unwrap();
    assert!((g.value(loss).item() - pcce(&preds, &labels, &cfg).unwrap()).abs() < 1e-15);
}
