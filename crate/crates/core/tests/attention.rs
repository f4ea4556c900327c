#![cfg(not(feature = "f32"))]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaanet::attention::{
    channel_attention, fuse, spatial_attention, temporal_attention_audio, temporal_attention_visual,
    AttentionBundle, ShapedArray,
};
use vaanet::numerics::{gradcheck, Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn spatial_zero_projection_gives_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random(&[3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let w1 = g.constant(Tensor::eye(4));
    let w2 = g.constant(Tensor::zeros(&[1, 5]));
    let (fs, a) = spatial_attention(&mut g, fv, w1, w2).unwrap();
    assert!(g.value(a).data().iter().all(|v| *v == 0.25));
    for (x, y) in g.value(fs).data().iter().zip(f.data()) {
        assert_eq!(*x, y / 4.0);
    }
}

#[test]
fn spatial_two_location_case() {
    let mut g = Graph::new();
    let f = g.constant(t(&[1, 2, 1], &[1.0, 3.0]));
    let w1 = g.constant(Tensor::eye(2));
    let w2 = g.constant(t(&[1, 1], &[1.0]));
    let (fs, a) = spatial_attention(&mut g, f, w1, w2).unwrap();
    let (e1, e3) = (1f64.exp(), 3f64.exp());
    let expect = [e1 / (e1 + e3), e3 / (e1 + e3)];
    for (got, want) in g.value(a).data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-15);
    }
    let fsv = g.value(fs).data();
    assert!((fsv[0] - expect[0]).abs() < 1e-15);
    assert!((fsv[1] - 3.0 * expect[1]).abs() < 1e-15);
}

#[test]
fn spatial_extreme_logits_select_one_location() {
    // Logits of ±50 drive the softmax to a numerical one-hot.
    let mut g = Graph::new();
    let f = g.constant(t(&[2, 3, 2], &[-50.0, 1.0, 50.0, 2.0, -50.0, 3.0, 50.0, 4.0, -50.0, 5.0, -50.0, 6.0]));
    let w1 = g.constant(Tensor::eye(3));
    let w2 = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let (fs, _) = spatial_attention(&mut g, f, w1, w2).unwrap();
    let v = g.value(fs);
    for frame in 0..2 {
        let live: Vec<usize> = (0..3)
            .filter(|&j| v.get(&[frame, j, 1]).abs() > 1e-30)
            .collect();
        assert_eq!(live.len(), 1, "frame {frame}");
    }
    assert!((v.get(&[0, 1, 1]) - 2.0).abs() < 1e-12);
    assert!((v.get(&[1, 0, 1]) - 4.0).abs() < 1e-12);
}

#[test]
fn channel_zero_projection_gives_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w1 = g.constant(Tensor::eye(4));
    let w2 = g.constant(Tensor::zeros(&[1, 3]));
    let (gc, a) = channel_attention(&mut g, xv, w1, w2).unwrap();
    assert!(g.value(a).data().iter().all(|v| *v == 0.25));
    assert_eq!(g.shape(gc), &[2, 4, 3]);
    for i in 0..2 {
        for c in 0..4 {
            for j in 0..3 {
                assert_eq!(g.value(gc).get(&[i, c, j]), x.get(&[i, j, c]) / 4.0);
            }
        }
    }
}

#[test]
fn channel_two_channel_case() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2], &[2.0, 4.0]));
    let w1 = g.constant(Tensor::eye(2));
    let w2 = g.constant(t(&[1, 1], &[1.0]));
    let (_, a) = channel_attention(&mut g, x, w1, w2).unwrap();
    let (e2, e4) = (2f64.exp(), 4f64.exp());
    let av = g.value(a).data();
    assert!((av[0] - e2 / (e2 + e4)).abs() < 1e-15);
    assert!((av[1] - e4 / (e2 + e4)).abs() < 1e-15);
}

#[test]
fn channel_attention_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(random(&[5, 6, 7], &mut rng));
    let w1 = g.constant(random(&[7, 7], &mut rng));
    let w2 = g.constant(random(&[1, 6], &mut rng));
    let (_, a) = channel_attention(&mut g, x, w1, w2).unwrap();
    for row in g.value(a).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn temporal_all_negative_logits_give_zero_embedding() {
    let mut g = Graph::new();
    let gc = g.constant(Tensor::full(&[3, 2, 4], 0.5)); // B=1, t=3
    let w1 = g.constant(Tensor::eye(3).map(|v| -v));
    let w2 = g.constant(Tensor::ones(&[1, 2]));
    let (e, a, _) = temporal_attention_visual(&mut g, gc, 3, w1, w2).unwrap();
    assert!(g.value(a).data().iter().all(|v| *v == 0.0));
    assert_eq!(g.value(e), &Tensor::zeros(&[1, 2]));
}

#[test]
fn temporal_weights_are_not_normalized() {
    let mut g = Graph::new();
    let gc = g.constant(Tensor::full(&[2, 2, 3], 0.5));
    let w1 = g.constant(Tensor::eye(2));
    let w2 = g.constant(Tensor::ones(&[1, 2]));
    let (e, a, p) = temporal_attention_visual(&mut g, gc, 2, w1, w2).unwrap();
    assert_eq!(g.value(a).data(), &[1.0, 1.0]);
    assert_eq!(g.value(p).data(), &[0.5; 4]);
    assert_eq!(g.value(e).data(), &[1.0, 1.0]);
}

/// Independent evaluation of the temporal sub-network for one video.
fn temporal_oracle(p: &[Vec<f64>], w1: &Tensor, w2: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let t = p.len();
    let d = p[0].len();
    let z: Vec<f64> = (0..t)
        .map(|j| (0..d).map(|c| w2.get(&[0, c]) * p[j][c]).sum())
        .collect();
    let a: Vec<f64> = (0..t)
        .map(|i| (0..t).map(|j| w1.get(&[i, j]) * z[j]).sum::<f64>().max(0.0))
        .collect();
    let mut e = vec![0.0; d];
    for j in 0..t {
        for c in 0..d {
            e[c] += p[j][c] * a[j];
        }
    }
    (e, a)
}

#[test]
fn temporal_visual_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t_seg, n, m) = (3, 4, 5);
    let gc = random(&[t_seg, n, m], &mut rng);
    let w1 = random(&[t_seg, t_seg], &mut rng);
    let w2 = random(&[1, n], &mut rng);
    let mut g = Graph::new();
    let (gv, w1v, w2v) = (g.constant(gc.clone()), g.constant(w1.clone()), g.constant(w2.clone()));
    let (e, a, p) = temporal_attention_visual(&mut g, gv, t_seg, w1v, w2v).unwrap();

    let pooled: Vec<Vec<f64>> = (0..t_seg)
        .map(|i| (0..n).map(|c| (0..m).map(|j| gc.get(&[i, c, j])).sum::<f64>() / m as f64).collect())
        .collect();
    let (e_ref, a_ref) = temporal_oracle(&pooled, &w1, &w2);
    for (x, y) in g.value(a).data().iter().zip(&a_ref) {
        assert!((x - y).abs() < 1e-14);
    }
    for (x, y) in g.value(e).data().iter().zip(&e_ref) {
        assert!((x - y).abs() < 1e-14);
    }
    // The weighted sum itself, over the graph's own P and A_T, is exact.
    let (pv, av) = (g.value(p).clone(), g.value(a).clone());
    for c in 0..n {
        let mut acc = 0.0;
        for j in 0..t_seg {
            acc += pv.get(&[0, j, c]) * av.get(&[0, j]);
        }
        assert_eq!(acc, g.value(e).get(&[0, c]));
    }
}

#[test]
fn audio_temporal_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // zero parameters -> zero attention and embedding
    let mut g = Graph::new();
    let f = g.constant(random(&[1, 4, 3], &mut rng));
    let w1 = g.constant(Tensor::zeros(&[4, 4]));
    let w2 = g.constant(Tensor::zeros(&[1, 3]));
    let (e, a) = temporal_attention_audio(&mut g, f, w1, w2).unwrap();
    assert!(g.value(a).data().iter().all(|v| *v == 0.0));
    assert!(g.value(e).data().iter().all(|v| *v == 0.0));

    // single segment
    let fa = random(&[1, 1, 3], &mut rng).map(|v| v.abs());
    let mut g = Graph::new();
    let f = g.constant(fa.clone());
    let w1 = g.constant(t(&[1, 1], &[0.7]));
    let w2 = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
    let (e, a) = temporal_attention_audio(&mut g, f, w1, w2).unwrap();
    let a0 = g.value(a).data()[0];
    assert!(a0 > 0.0);
    for c in 0..3 {
        assert_eq!(g.value(e).data()[c], fa.data()[c] * a0);
    }

    // random t = 4 against the loop oracle
    let fa = random(&[1, 4, 6], &mut rng);
    let (w1t, w2t) = (random(&[4, 4], &mut rng), random(&[1, 6], &mut rng));
    let mut g = Graph::new();
    let (f, w1, w2) = (g.constant(fa.clone()), g.constant(w1t.clone()), g.constant(w2t.clone()));
    let (e, a) = temporal_attention_audio(&mut g, f, w1, w2).unwrap();
    let rows: Vec<Vec<f64>> = (0..4).map(|j| fa.index_axis0(0).index_axis0(j).into_data()).collect();
    let (e_ref, a_ref) = temporal_oracle(&rows, &w1t, &w2t);
    assert_eq!(g.value(a).data(), a_ref.as_slice());
    assert_eq!(g.value(e).data(), e_ref.as_slice());
}

#[test]
fn fuse_orders_visual_first() {
    let mut g = Graph::new();
    let v = g.constant(t(&[2], &[1.0, 2.0]));
    let a = g.constant(t(&[1], &[3.0]));
    let e = fuse(&mut g, v, a).unwrap();
    assert_eq!(g.value(e).data(), &[1.0, 2.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let (b, n, n2) = (rng.gen_range(1..4), rng.gen_range(1..9), rng.gen_range(1..9));
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[b, n]));
        let a = g.constant(Tensor::zeros(&[b, n2]));
        let e = fuse(&mut g, v, a).unwrap();
        assert_eq!(g.shape(e), &[b, n + n2]);
    }
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::zeros(&[2, 4, 3]));
    let w1 = g.constant(Tensor::eye(3));
    let w2 = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        spatial_attention(&mut g, f, w1, w2),
        Err(vaanet::Error::Dimension { .. })
    ));
}

/// Full stacked chain: spatial -> channel -> temporal, projected to a scalar.
fn stacked_chain(g: &mut Graph, v: &[Var], segments: usize) -> vaanet::Result<Var> {
    let (fs, _) = spatial_attention(g, v[0], v[1], v[2])?;
    let (gc, _) = channel_attention(g, fs, v[3], v[4])?;
    let (e, _, _) = temporal_attention_visual(g, gc, segments, v[5], v[6])?;
    let sq = g.mul(e, e)?;
    let r = g.sum(sq)?;
    let lin = g.sum(e)?;
    g.add(r, lin)
}

#[test]
fn stacked_chain_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, t_seg, m, n) = (2, 3, 4, 5);
    let mut inputs = vec![random(&[b * t_seg, m, n], &mut rng).map(|v| 2.0 * v)];
    inputs.push(random(&[m, m], &mut rng));
    inputs.push(random(&[1, n], &mut rng));
    inputs.push(random(&[n, n], &mut rng));
    inputs.push(random(&[1, m], &mut rng));
    // keep temporal logits away from the ReLU kink
    inputs.push(Tensor::eye(t_seg).map(|v| v * 2.0 + 0.3));
    inputs.push(random(&[1, n], &mut rng).map(|v| v.abs() + 0.5));
    inputs[0] = inputs[0].map(|v| v.abs() + 0.1);
    let reports = gradcheck::check(&inputs, 1e-6, |g, v| stacked_chain(g, v, t_seg)).unwrap();
    for (i, r) in reports.iter().enumerate() {
        assert!(r.max_rel_err < 1e-4, "input {i}: {}", r.max_rel_err);
    }
}

#[test]
fn every_attention_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, t_seg, m, n) = (2, 4, 6, 5);
    let mut g = Graph::new();
    let f = g.constant(random(&[b * t_seg, m, n], &mut rng).map(|v| v.abs()));
    let params: Vec<Var> = [[m, m], [1, n], [n, n], [1, m], [t_seg, t_seg], [1, n]]
        .iter()
        .map(|s| g.param(vaanet::attention::init_uniform(s[0], s[1], &mut rng)))
        .collect();
    let (fs, _) = spatial_attention(&mut g, f, params[0], params[1]).unwrap();
    let (gc, _) = channel_attention(&mut g, fs, params[2], params[3]).unwrap();
    let (e, _, _) = temporal_attention_visual(&mut g, gc, t_seg, params[4], params[5]).unwrap();
    let r = g.constant(random(g.shape(e), &mut rng));
    let y = g.mul(e, r).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    for (i, p) in params.iter().enumerate() {
        let grad = g.grad(*p).expect("gradient recorded");
        assert!(grad.data().iter().any(|v| v.abs() > 1e-12), "parameter {i} is dead");
    }
}

#[test]
fn bundle_json_round_trip() {
    let b = AttentionBundle {
        spatial: Some(ShapedArray {
            shape: vec![2, 2, 1],
            data: vec![0.25, 0.75, 0.5, 0.5],
        }),
        channel: None,
        temporal: Some(ShapedArray {
            shape: vec![2, 1],
            data: vec![0.0, 1.5],
        }),
        audio: None,
        grid: Some([1, 2]),
    };
    let back = AttentionBundle::from_json(&b.to_json().unwrap()).unwrap();
    assert_eq!(back, b);
    assert!(AttentionBundle::from_json(r#"{"A_T":{"shape":[3,1],"data":[1.0]}}"#).is_err());
}
