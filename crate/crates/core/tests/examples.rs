//! Per-operation examples with independent oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovu_core::decoder::gaussian;
use ovu_core::gradcheck;
use ovu_core::nn::{Init, SelfAttention};
use ovu_core::ops::{packed_attention, PackedSequence};
use ovu_core::world::eval::noise_image;
use ovu_core::world::tasks::random_scene;
use ovu_core::world::{parse, render};
use ovu_core::{AttnLayout, Graph, ParamStore, Tensor};

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", gaussian(&[5, 7], &mut rng), true).unwrap();
    let b = store.add("b", gaussian(&[7, 3], &mut rng), true).unwrap();
    let r = gradcheck::check(&store, 1e-5, None, 0, |g| {
        let (a, b) = (g.param(a), g.param(b));
        let y = g.matmul(a, b)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
}

#[test]
fn softmax_matches_direct_formula() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, got) in g.value(y).data().iter().enumerate() {
        assert!((got - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

/// Naive masked multi-head attention over one segment.
fn attention_loop(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, causal: bool) -> Vec<f64> {
    let (n, d) = (q.rows(), q.shape()[1]);
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let keys = if causal { i + 1 } else { n };
            let s: Vec<f64> = (0..keys)
                .map(|j| (0..dh).map(|c| q.row(i)[h * dh + c] * k.row(j)[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for j in 0..keys {
                let w = (s[j] - m).exp() / z;
                for c in 0..dh {
                    out[i * d + h * dh + c] += w * v.row(j)[h * dh + c];
                }
            }
        }
    }
    out
}

#[test]
fn causal_attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, k, v): (Tensor<f64>, Tensor<f64>, Tensor<f64>) =
        (gaussian(&[3, 4], &mut rng), gaussian(&[3, 4], &mut rng), gaussian(&[3, 4], &mut rng));
    let want = attention_loop(&q, &k, &v, 2, true);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    let y = g.attention(qv, kv, vv, 2, &AttnLayout::single(3, true)).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn attention_weights() -> (ParamStore<f64>, SelfAttention) {
    let mut store = ParamStore::<f64>::new();
    let attn = SelfAttention::new(&mut Init::new(&mut store, 4), "attn", 8, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in store.iter_mut() {
        let noise: Tensor<f64> = gaussian(p.tensor.shape(), &mut rng);
        p.tensor = p.tensor.zip_map(&noise, |a, n| a + 0.2 * n).unwrap();
    }
    (store, attn)
}

fn solo(store: &ParamStore<f64>, attn: &SelfAttention, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let y = attn.forward(&mut g, xv, &AttnLayout::single(x.rows(), false), None).unwrap();
    g.value(y).clone()
}

#[test]
fn single_item_packing_equals_unpacked_attention() {
    let (store, attn) = attention_weights();
    let x: Tensor<f64> = gaussian(&[5, 8], &mut ChaCha8Rng::seed_from_u64(5));
    let packed = packed_attention(&store, &attn, &PackedSequence::pack(&[x.clone()]).unwrap()).unwrap();
    assert_eq!(packed.data, solo(&store, &attn, &x));
}

#[test]
fn two_items_match_separate_attention_and_permute_with_their_order() {
    let (store, attn) = attention_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a: Tensor<f64> = gaussian(&[3, 8], &mut rng);
    let b: Tensor<f64> = gaussian(&[5, 8], &mut rng);
    let ab = packed_attention(&store, &attn, &PackedSequence::pack(&[a.clone(), b.clone()]).unwrap()).unwrap();
    assert_eq!(ab.lengths, vec![3, 5]);
    assert!(ab.item(0).unwrap().max_abs_diff(&solo(&store, &attn, &a)) < 1e-5);
    assert!(ab.item(1).unwrap().max_abs_diff(&solo(&store, &attn, &b)) < 1e-5);
    let ba = packed_attention(&store, &attn, &PackedSequence::pack(&[b, a]).unwrap()).unwrap();
    assert_eq!(ba.item(0).unwrap(), ab.item(1).unwrap());
    assert_eq!(ba.item(1).unwrap(), ab.item(0).unwrap());
}

#[test]
fn rendered_scenes_parse_back_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let s = random_scene(&mut rng, 4);
        assert_eq!(parse(&render(&s)).confident_spec().canonical(), s.canonical(), "sample {i}");
    }
}

#[test]
fn noise_images_yield_no_confident_objects() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trials = 1000;
    let clean = (0..trials)
        .filter(|_| {
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            parse(&noise_image(&mut r)).confident_spec().objects.is_empty()
        })
        .count();
    assert!(clean as f64 >= 0.99 * trials as f64, "{clean}/{trials}");
}

#[test]
fn time_sampling_stays_in_the_unit_interval_and_parses_from_config() {
    use ovu_core::config::RunConfig;
    use ovu_core::decoder::TimeSampling;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ln = TimeSampling::default();
    let mut ts: Vec<f64> = (0..4001).map(|_| ln.sample(&mut rng)).collect();
    assert!(ts.iter().all(|&t| t > 0.0 && t < 1.0));
    ts.sort_by(f64::total_cmp);
    assert!((ts[2000] - 0.5).abs() < 0.03);
    let run = RunConfig::from_json(r#"{"train": {"time_sampling": "uniform"}}"#).unwrap();
    assert_eq!(run.train.time_sampling, TimeSampling::Uniform);
    let run = RunConfig::from_json(r#"{"train": {"time_sampling": {"logit_normal": {"mean": 0.5, "std": 1.0}}}}"#).unwrap();
    assert_eq!(run.train.time_sampling, TimeSampling::LogitNormal { mean: 0.5, std: 1.0 });
}

#[test]
fn warmup_ramps_the_learning_rate_linearly() {
    use ovu_core::optim::{AdamW, AdamWConfig};
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(&[1], vec![0.0]).unwrap(), true).unwrap();
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, warmup_steps: 4, weight_decay: 0.0, clip_norm: 0.0, ..Default::default() });
    let mut moved = Vec::new();
    for _ in 0..6 {
        let before = store.get(p).tensor.data()[0];
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(p);
            let l = g.sum(v).unwrap();
            g.backward(l).unwrap()
        };
        opt.step(&mut store, &grads);
        moved.push(before - store.get(p).tensor.data()[0]);
    }
    // constant gradient: each Adam update is exactly 1, so steps scale with the ramp
    for (k, m) in moved.iter().enumerate() {
        let want = 0.1 * ((k + 1) as f64 / 4.0).min(1.0);
        assert!((m - want).abs() < 1e-6, "step {k}: {m} vs {want}");
    }
}
