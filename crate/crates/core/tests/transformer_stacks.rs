//! Encoder and decoder stacks against the straight-line reference.

mod common;

use avalign::autograd::Graph;
use avalign::config::ModelConfig;
use avalign::params::ParamStore;
use avalign::rng::Rng;
use avalign::tensor::Tensor;
use avalign::transformer::{AttentionMask, Decoder, Encoder};
use avalign::Error;
use common::*;

fn small(d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        d_ff: 2 * d,
        ..ModelConfig::tiny()
    }
}

fn encode(enc: &Encoder, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::eval(store);
    let xv = g.input(x.clone());
    let out = enc.forward(&mut g, xv, None).unwrap();
    g.value(out.out).clone()
}

#[test]
fn full_scale_encoder_preserves_shape_with_six_layers() {
    let cfg = ModelConfig::full_scale(40);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut Rng::new(1));
    assert_eq!(enc.layers.len(), 6);
    let mut rng = Rng::new(2);
    let x = Tensor::from_fn(vec![7, 256], |_| rng.normal());
    assert_eq!(encode(&enc, &store, &x).shape(), &[7, 256]);
}

#[test]
fn encoder_matches_reference() {
    let cfg = small(8);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut Rng::new(3));
    let x = random_mat(5, 8, &mut Rng::new(4));
    let got = to_mat(&encode(&enc, &store, &tensor(&x)));
    let want = Oracle { store: &store, eps: cfg.layer_norm_eps }.encoder(&x, "enc", 2);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn zeroed_sublayers_leave_layer_normed_input() {
    let cfg = small(8);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut Rng::new(5));
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.ends_with(".gain"))).collect();
    for (id, is_gain) in ids {
        let fill = if is_gain { 1.0 } else { 0.0 };
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let x = random_mat(6, 8, &mut Rng::new(6));
    let got = to_mat(&encode(&enc, &store, &tensor(&x)));
    // Every sublayer contributes zero, so each layer is LN(LN(...)) of x.
    let normed: Mat = x
        .iter()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            r.iter().map(|v| (v - mean) / var.sqrt()).collect()
        })
        .collect();
    assert!(max_abs_diff(&got, &normed) < 1e-5);
}

#[test]
fn encoder_rejects_sequences_over_max_len() {
    let cfg = ModelConfig { max_len: 4, ..small(8) };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", &cfg, &mut Rng::new(7));
    let mut g = Graph::eval(&store);
    let x = g.input(Tensor::zeros(vec![5, 8]));
    assert!(matches!(enc.forward(&mut g, x, None), Err(Error::Contract(_))));
}

fn decode(dec: &Decoder, store: &ParamStore<f64>, tokens: &[usize], memory: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::eval(store);
    let m = g.input(memory.clone());
    let out = dec.forward(&mut g, tokens, m).unwrap();
    g.value(out.out).clone()
}

#[test]
fn decoder_matches_reference_and_shape() {
    let cfg = small(8);
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut store, "dec", &cfg, &mut Rng::new(8));
    let memory = random_mat(4, 8, &mut Rng::new(9));
    let tokens = [1, 3, 4, 3];
    let got = decode(&dec, &store, &tokens, &tensor(&memory));
    assert_eq!(got.shape(), &[4, cfg.vocab_size]);
    let want = Oracle { store: &store, eps: cfg.layer_norm_eps }.decoder(&tokens, &memory, "dec", 2);
    assert!(max_abs_diff(&to_mat(&got), &want) < 1e-12);
}

/// Identity projections, zero feed-forward, one layer, one target token and
/// a two-step memory, evaluated by hand.
#[test]
fn single_layer_hand_trace() {
    let d = 4;
    let cfg = ModelConfig {
        n_decoder_layers: 1,
        vocab_size: 4,
        layer_norm_eps: 0.0,
        ..small(d)
    };
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut store, "dec", &cfg, &mut Rng::new(10));
    let eye = |n: usize| Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let t = store.get_mut(id);
        if (name.contains("attn") && name.ends_with(".w")) || name == "dec.output.w" {
            *t = eye(d);
        } else if name.ends_with(".gain") {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        } else if name == "dec.embedding" {
            *t = Tensor::new(vec![4, d], (0..16).map(|i| i as f64 / 8.0 - 1.0).collect()).unwrap();
        } else {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let memory = [[1.0, 0.0, -1.0, 0.5], [0.0, 2.0, 0.0, -1.0]];
    let mem = Tensor::new(vec![2, d], memory.concat()).unwrap();
    let logits = decode(&dec, &store, &[1], &mem);

    let ln = |x: [f64; 4]| {
        let m = x.iter().sum::<f64>() / 4.0;
        let s = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0).sqrt();
        x.map(|v| (v - m) / s)
    };
    // Token 1 embeds to row 1 of the table, scaled by sqrt(4), at position 0.
    let row1 = [-0.5, -0.375, -0.25, -0.125];
    let x = [2.0 * row1[0], 2.0 * row1[1] + 1.0, 2.0 * row1[2], 2.0 * row1[3] + 1.0];
    // A lone query attends to itself with weight 1.
    let h1 = ln([2.0 * x[0], 2.0 * x[1], 2.0 * x[2], 2.0 * x[3]]);
    let s: Vec<f64> = memory.iter().map(|m| (0..4).map(|j| h1[j] * m[j]).sum::<f64>() / 2.0).collect();
    let w0 = 1.0 / (1.0 + (s[1] - s[0]).exp());
    let c: Vec<f64> = (0..4).map(|j| w0 * memory[0][j] + (1.0 - w0) * memory[1][j]).collect();
    let h2 = ln([h1[0] + c[0], h1[1] + c[1], h1[2] + c[2], h1[3] + c[3]]);
    let h3 = ln(h2);
    for j in 0..4 {
        assert!((logits.data()[j] - h3[j]).abs() < 1e-12, "{j}: {} vs {}", logits.data()[j], h3[j]);
    }
}

#[test]
fn perturbing_a_later_token_leaves_earlier_logits_bitwise() {
    let cfg = small(8);
    let mut rng = Rng::new(11);
    for case in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, "dec", &cfg, &mut Rng::new(100 + case));
        let len = 2 + rng.below(6);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
        let memory = tensor(&random_mat(3, 8, &mut rng));
        let t = 1 + rng.below(len - 1);
        let mut changed = tokens.clone();
        changed[t] = (changed[t] + 1 + rng.below(cfg.vocab_size - 1)) % cfg.vocab_size;
        let a = decode(&dec, &store, &tokens, &memory);
        let b = decode(&dec, &store, &changed, &memory);
        let v = cfg.vocab_size;
        assert_eq!(&a.data()[..t * v], &b.data()[..t * v], "case {case}");
        assert_ne!(&a.data()[t * v..], &b.data()[t * v..], "case {case}");
    }
}

#[test]
fn decoder_refuses_missing_or_leaky_masks() {
    let cfg = small(8);
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut store, "dec", &cfg, &mut Rng::new(12));
    let mut g = Graph::eval(&store);
    let mem = g.input(Tensor::zeros(vec![2, 8]));
    let x = dec.embed(&mut g, &[1, 3]).unwrap();
    assert!(matches!(dec.forward_embedded(&mut g, x, mem, None, None), Err(Error::Contract(_))));
    let full = AttentionMask::from_fn(2, 2, |_, _| true);
    assert!(matches!(dec.forward_embedded(&mut g, x, mem, Some(&full), None), Err(Error::Contract(_))));
}
