use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaanet::attention::AttentionBundle;
use vaanet::model::{AttentionFlags, Batch, ChannelInput, ModelConfig, Vaanet};
use vaanet::numerics::{Real, Tensor};
use vaanet::Error;

fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let visual = Tensor::from_fn(&[n, cfg.t, cfg.k, cfg.crop, cfg.crop, 3], |_| rng.gen_range(0.0..1.0));
    let audio = Tensor::from_fn(&[n, cfg.t, cfg.n_mfcc, cfg.segment_frames], |_| rng.gen_range(-1.0..1.0));
    Batch {
        visual: Some(visual),
        audio: Some(audio),
        labels: (0..n).map(|i| i % cfg.classes).collect(),
    }
}

#[test]
fn attention_presets_parse() {
    let rows = AttentionFlags::ablation_rows();
    let names: Vec<String> = rows.iter().map(|f| f.to_string()).collect();
    assert_eq!(names, ["AT", "VS", "VS+VCW", "VS+VCW+VT", "VS+VCW+VT+AT"]);
    assert_eq!("all".parse::<AttentionFlags>().unwrap(), AttentionFlags::ALL);
    assert!(matches!("vcw".parse::<AttentionFlags>(), Err(Error::Config(_))));
    assert!(matches!("vs+xyz".parse::<AttentionFlags>(), Err(Error::Config(_))));
}

#[test]
fn parameter_counts_follow_the_flags() {
    let base = ModelConfig::micro(4);
    let count = |flags: &str| Vaanet::new(base.clone().with_attention(flags.parse().unwrap()), 0).unwrap();
    let at = count("at");
    assert_eq!(at.count_params("visual/"), 0);
    assert_eq!(at.count_params("attention/spatial"), 0);
    assert_eq!(at.count_params("attention/channel"), 0);
    assert_eq!(at.count_params("attention/temporal"), 0);
    assert!(at.count_params("attention/audio") > 0);

    let vs = count("vs");
    assert_eq!(vs.count_params("audio/"), 0);
    assert_eq!(vs.count_params("attention/channel"), 0);
    let [h, w, n] = base.visual_shape().unwrap();
    assert_eq!(vs.count_params("attention/spatial"), (h * w) * (h * w) + n);
    let vcw = count("vs+vcw");
    assert_eq!(vcw.count_params("attention/channel"), n * n + h * w);
    let vt = count("vs+vcw+vt");
    assert_eq!(vt.count_params("attention/temporal"), base.t * base.t + n);
    let all = count("all");
    assert_eq!(all.count_params("head/w"), base.classes * (n + base.audio_shape().unwrap()[2]));
}

#[test]
fn forward_shapes_and_bundles() {
    let cfg = ModelConfig::micro(3);
    let model = Vaanet::new(cfg.clone(), 1).unwrap();
    let batch = random_batch(&cfg, 3, 2);
    let (logits, bundles) = model.predict(&batch).unwrap();
    assert_eq!(logits.shape(), &[3, 3]);
    let [h, w, n] = cfg.visual_shape().unwrap();
    for b in &bundles {
        let s = b.spatial.as_ref().unwrap();
        assert_eq!(s.shape, vec![cfg.t, h * w, 1]);
        for i in 0..cfg.t {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e3 * Real::EPSILON as f64);
        }
        let c = b.channel.as_ref().unwrap();
        assert_eq!(c.shape, vec![cfg.t, n, 1]);
        assert_eq!(b.temporal.as_ref().unwrap().shape, vec![cfg.t, 1]);
        assert!(b.audio.as_ref().unwrap().data.iter().all(|v| *v >= 0.0));
        assert_eq!(b.grid, Some([h, w]));
        assert_eq!(&AttentionBundle::from_json(&b.to_json().unwrap()).unwrap(), b);
    }
}

#[test]
fn single_stream_configs_run() {
    for flags in AttentionFlags::ablation_rows() {
        let cfg = ModelConfig::micro(4).with_attention(flags);
        let model = Vaanet::new(cfg.clone(), 3).unwrap();
        let mut batch = random_batch(&cfg, 2, 4);
        if !cfg.uses_visual() {
            batch.visual = None;
        }
        if !cfg.uses_audio() {
            batch.audio = None;
        }
        let (logits, bundles) = model.predict(&batch).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert_eq!(bundles[0].spatial.is_some(), flags.vs);
        assert_eq!(bundles[0].channel.is_some(), flags.vcw);
        assert_eq!(bundles[0].temporal.is_some(), flags.vt);
        assert_eq!(bundles[0].audio.is_some(), flags.at);
    }
}

#[test]
fn raw_backbone_channel_input_is_supported() {
    let mut cfg = ModelConfig::micro(2);
    cfg.channel_input = ChannelInput::RawBackbone;
    let model = Vaanet::new(cfg.clone(), 5).unwrap();
    let (logits, _) = model.predict(&random_batch(&cfg, 2, 6)).unwrap();
    assert!(logits.is_finite());
}

#[test]
fn checkpoint_round_trip_restores_the_model() {
    let cfg = ModelConfig::micro(4);
    let model = Vaanet::new(cfg, 7).unwrap();
    let ck = model.to_checkpoint(serde_json::json!({"epoch": 3})).unwrap();
    let bytes = ck.to_bytes().unwrap();
    let (back, extra) = Vaanet::from_checkpoint(&vaanet::numerics::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, model);
    assert_eq!(extra["epoch"], 3);
}

#[test]
fn missing_stream_input_is_input_error() {
    let cfg = ModelConfig::micro(2);
    let model = Vaanet::new(cfg.clone(), 0).unwrap();
    let mut batch = random_batch(&cfg, 2, 0);
    batch.audio = None;
    assert!(matches!(model.predict(&batch), Err(Error::Input(_))));
}

/// Finite differences through the whole micro network in training mode,
/// against the analytic gradient of every parameter.
#[cfg(not(feature = "f32"))]
#[test]
fn end_to_end_gradients_match_finite_differences() {
    use std::collections::BTreeMap;
    use vaanet::loss::{pcce_weights, weighted_nll_loss, EmotionTaxonomy, LossConfig, Prediction};
    use vaanet::numerics::{gradcheck, Graph};
    use vaanet::params::Binder;

    let cfg = ModelConfig::micro(4);
    let model = Vaanet::new(cfg.clone(), 11).unwrap();
    let batch = random_batch(&cfg, 1, 12);
    let names: Vec<String> = model.store.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.store.params[n].clone()).collect();

    let preds = {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.store, true);
        let out = model.forward(&mut g, &mut b, &batch).unwrap();
        Prediction::batch(g.value(out.logits))
    };
    let tax = EmotionTaxonomy::from_json(
        r#"{"classes":["a","b","c","d"],"polarity":{"a":"pos","b":"neg","c":"pos","d":"neg"}}"#,
    )
    .unwrap();
    let loss_cfg = LossConfig::new(1.0, tax).unwrap();
    let weights = pcce_weights(&preds, &batch.labels, &loss_cfg).unwrap();

    let reports = gradcheck::check_with(&inputs, 1e-4, gradcheck::Stencil::FivePoint, |g, vars| {
        let bound: BTreeMap<_, _> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let mut b = Binder::prebound(&model.store, true, bound);
        let out = model.forward(g, &mut b, &batch)?;
        weighted_nll_loss(g, out.logits, &batch.labels, &weights)
    })
    .unwrap();
    let mut worst = (0.0, String::new());
    for (name, r) in names.iter().zip(&reports) {
        assert!(r.analytic.data().iter().any(|v| *v != 0.0), "{name} receives no gradient");
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name.clone());
        }
    }
    assert!(worst.0 < 1e-3, "worst relative error {} in {}", worst.0, worst.1);
}
