//! Optimizer, training loop, decoding and the evaluation metrics.

use avalign::align::AlignmentMatrix;
use avalign::autograd::Graph;
use avalign::config::{Mode, ModelConfig};
use avalign::model::Model;
use avalign::params::{Grads, ParamStore};
use avalign::rng::Rng;
use avalign::tensor::Tensor;
use avalign::training::{
    corpus_cer, evaluate, generate_corpus, monotonicity_score, prepare, train, transcribe, Adam, OptimizerConfig,
    TrainConfig,
};
use avalign::vocab::{GraphemeSequence, Vocab};
use avalign::Error;
use proptest::prelude::*;

fn linear_loss_grads(store: &ParamStore<f32>, coeff: &[f32]) -> Grads<f32> {
    let mut g = Graph::eval(store);
    let w = g.param(store.id("w").unwrap());
    let c = g.input(Tensor::new(vec![coeff.len()], coeff.to_vec()).unwrap());
    let p = g.mul(w, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap().into_grads(store)
}

/// Three steps of a constant gradient against the update rule written out
/// in double precision.
#[test]
fn adam_matches_hand_rolled_update() {
    let coeff = [0.3f32, -0.05, 0.0, 0.2];
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 0.0]).unwrap());
    let cfg = OptimizerConfig {
        warmup: 2,
        ..OptimizerConfig::default()
    };
    let mut adam = Adam::new(cfg.clone(), &store, 16);
    let mut want: Vec<f64> = vec![1.0, -2.0, 0.5, 0.0];
    let (mut m, mut v) = (vec![0.0f64; 4], vec![0.0f64; 4]);
    for step in 1..=3 {
        let mut grads = linear_loss_grads(&store, &coeff);
        let info = adam.step(&mut store, &mut grads).unwrap();
        let lr = 16f64.powf(-0.5) * (step as f64).powf(-0.5).min(step as f64 * 2f64.powf(-1.5));
        assert!((info.learning_rate - lr).abs() < 1e-15);
        for k in 0..4 {
            let g = coeff[k] as f64;
            m[k] = 0.9 * m[k] + 0.1 * g;
            v[k] = 0.98 * v[k] + 0.02 * g * g;
            let mh = m[k] / (1.0 - 0.9f64.powi(step));
            let vh = v[k] / (1.0 - 0.98f64.powi(step));
            want[k] -= lr * mh / (vh.sqrt() + 1e-9);
        }
    }
    let got = store.get(store.id("w").unwrap()).data();
    for k in 0..4 {
        assert!((got[k] as f64 - want[k]).abs() < 1e-5, "{k}: {} vs {}", got[k], want[k]);
    }
    assert_eq!(got[2], 0.5, "zero gradient leaves the coordinate alone");
}

#[test]
fn clipping_bounds_the_applied_gradient() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::zeros(vec![2]));
    let mut adam = Adam::new(OptimizerConfig::default(), &store, 4);
    let mut grads = linear_loss_grads(&store, &[30.0, 40.0]);
    let info = adam.step(&mut store, &mut grads).unwrap();
    assert!((info.grad_norm - 50.0).abs() < 1e-4);
    assert!((grads.global_norm() - 1.0).abs() < 1e-6);
}

fn tiny_audio_run(steps: usize, lr_scale: f64, seed: u64) -> (Model<f32>, Vec<f64>) {
    let corpus = prepare(&generate_corpus(2, 5, None).unwrap()).unwrap();
    let cfg = ModelConfig {
        vocab_size: Vocab::default().size(),
        ..ModelConfig::tiny()
    };
    let mut model = Model::<f32>::new(cfg, Mode::Audio, 3).unwrap();
    let train_cfg = TrainConfig {
        steps,
        batch_size: 2,
        seed,
        log_every: 1,
        optimizer: OptimizerConfig {
            lr_scale,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let curve = train(&mut model, &corpus, &train_cfg, |_| {}).unwrap();
    (model, curve.points.iter().map(|p| p.loss).collect())
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (model, losses) = tiny_audio_run(3, 0.0, 0);
    let init = Model::<f32>::new(model.config.clone(), Mode::Audio, 3).unwrap();
    for ((_, name, a), (_, _, b)) in model.store.iter().zip(init.store.iter()) {
        assert_eq!(a, b, "{name} moved");
    }
    assert_eq!(losses.len(), 3);
}

#[test]
fn identical_seeds_reproduce_to_the_bit() {
    let (a, la) = tiny_audio_run(4, 1.0, 9);
    let (b, lb) = tiny_audio_run(4, 1.0, 9);
    assert_eq!(la.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), lb.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    for ((_, _, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x, y);
    }
    let (_, lc) = tiny_audio_run(4, 1.0, 10);
    assert_ne!(la, lc, "a different seed draws different batches and noise");
}

/// One short utterance, clean audio only: the loss must collapse and the
/// greedy transcript must come out exact.
#[test]
fn overfits_a_single_utterance() {
    let corpus = prepare(&generate_corpus(1, 21, None).unwrap()).unwrap();
    let cfg = ModelConfig {
        d_model: 32,
        d_ff: 64,
        dropout: 0.0,
        cnn_widths: [4, 4, 4, 4],
        cnn_out: 8,
        ..ModelConfig::desk(Vocab::default().size())
    };
    let mut model = Model::<f32>::new(cfg, Mode::Audio, 1).unwrap();
    let train_cfg = TrainConfig {
        steps: 250,
        batch_size: 1,
        noise: vec![None],
        span_prob: 0.0,
        log_every: 50,
        optimizer: OptimizerConfig {
            lr_scale: 1.0,
            warmup: 50,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let curve = train(&mut model, &corpus, &train_cfg, |_| {}).unwrap();
    let (first, last) = (curve.points[0].loss, curve.points.last().unwrap().loss);
    assert!(last < 0.05 * first, "loss {first} -> {last}");
    let out = transcribe(&model, &corpus, None, 0).unwrap();
    assert_eq!(out[0].hypothesis, out[0].reference);
    let report = evaluate(&model, &corpus, &[None], 0).unwrap();
    assert_eq!(report.cer, 0.0);
    assert!(report.monotonicity.is_empty(), "audio-only models have no alignment");
}

#[test]
fn training_guards() {
    let cfg = ModelConfig {
        vocab_size: Vocab::default().size(),
        ..ModelConfig::tiny()
    };
    let mut model = Model::<f32>::new(cfg.clone(), Mode::AvAu, 0).unwrap();
    let mut corpus = prepare(&generate_corpus(1, 2, None).unwrap()).unwrap();
    assert!(matches!(train(&mut model, &[], &TrainConfig::default(), |_| {}), Err(Error::Input(_))));
    let zero_batch = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut model, &corpus, &zero_batch, |_| {}), Err(Error::Config(_))));
    corpus[0].au = None;
    let one = TrainConfig {
        steps: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut model, &corpus, &one, |_| {}), Err(Error::Config(_))));
    let no_au = TrainConfig {
        lambda_au: 0.0,
        ..one
    };
    assert!(train(&mut model, &corpus, &no_au, |_| {}).is_ok());
}

fn matrix(rows: Vec<Vec<f64>>) -> AlignmentMatrix {
    AlignmentMatrix::new(Tensor::from_rows(&rows).unwrap()).unwrap()
}

#[test]
fn monotonicity_reference_cases() {
    let n = 6;
    let eye = matrix((0..n).map(|i| (0..n).map(|j| if i == j { 0.9 } else { 0.1 / 5.0 }).collect()).collect());
    assert!((monotonicity_score(&eye).unwrap().score - 1.0).abs() < 1e-12);
    let anti = matrix((0..n).map(|i| (0..n).map(|j| if i + j == n - 1 { 0.9 } else { 0.1 / 5.0 }).collect()).collect());
    assert!((monotonicity_score(&anti).unwrap().score + 1.0).abs() < 1e-12);
    let flat = matrix(vec![vec![0.7, 0.3]; 4]);
    let m = monotonicity_score(&flat).unwrap();
    assert!(m.degenerate && m.score == 0.0);
    assert!(matches!(monotonicity_score(&matrix(vec![vec![1.0]; 3])), Err(Error::Contract(_))));
}

/// Tie-free argmax sequences: Spearman reduces to `1 - 6 Σd² / (n(n²-1))`.
#[test]
fn monotonicity_matches_rank_difference_formula() {
    let mut rng = Rng::new(40);
    for _ in 0..50 {
        let n = 3 + rng.below(8);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let rows = perm
            .iter()
            .map(|&p| (0..n).map(|j| if j == p { 0.5 } else { 0.5 / (n - 1) as f64 }).collect())
            .collect();
        let d2: f64 = perm.iter().enumerate().map(|(i, &p)| (i as f64 - p as f64).powi(2)).sum();
        let want = 1.0 - 6.0 * d2 / (n * (n * n - 1)) as f64;
        let got = monotonicity_score(&matrix(rows)).unwrap();
        if got.degenerate {
            continue;
        }
        assert!((got.score - want).abs() < 1e-12, "{perm:?}");
    }
}

/// Random row-stochastic 20x20 matrices carry no order.
#[test]
fn random_alignments_score_near_zero() {
    let mut rng = Rng::new(2024);
    let draws = 1000;
    let small = (0..draws)
        .filter(|_| {
            let rows = (0..20)
                .map(|_| {
                    let r: Vec<f64> = (0..20).map(|_| rng.uniform(0.0, 1.0)).collect();
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            monotonicity_score(&matrix(rows)).unwrap().score.abs() < 0.5
        })
        .count();
    assert!(small as f64 >= 0.95 * draws as f64, "{small}/{draws}");
}

fn seq(ids: &[usize]) -> GraphemeSequence {
    let vocab = Vocab::default();
    let text: String = ids.iter().map(|&i| vocab.chars()[i % vocab.chars().len()]).collect();
    GraphemeSequence::from_text(&vocab, &text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_cer_ignores_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0usize..38, 0..8), prop::collection::vec(0usize..38, 1..8)),
            1..10,
        ),
        seed in any::<u64>(),
    ) {
        let seqs: Vec<(GraphemeSequence, GraphemeSequence)> = pairs.iter().map(|(h, r)| (seq(h), seq(r))).collect();
        let forward = corpus_cer(seqs.iter().map(|(h, r)| (h, r))).unwrap();
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let shuffled = corpus_cer(order.iter().map(|&i| (&seqs[i].0, &seqs[i].1))).unwrap();
        prop_assert_eq!(forward, shuffled);
        prop_assert!(forward >= 0.0);
    }

    #[test]
    fn monotonicity_stays_in_range(rows in 2usize..12, cols in 2usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = matrix((0..rows).map(|_| {
            let r: Vec<f64> = (0..cols).map(|_| rng.uniform(0.01, 1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        }).collect());
        let score = monotonicity_score(&m).unwrap().score;
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&score));
    }
}
