use lrlb::adapters::{AdapterSpec, AdapterWeights, BoundAdapters, Target};
use lrlb::datasets::{GenConfig, TaskSpec};
use lrlb::model::{forward, ModelConfig, TransformerWeights};
use lrlb::tokenizer::{Vocab, VOCAB_SIZE};
use lrlb::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        ..Default::default()
    }
}

fn specs() -> [AdapterSpec; 2] {
    [
        AdapterSpec {
            targets: Target::ALL.to_vec(),
            ..AdapterSpec::lora(4)
        },
        AdapterSpec {
            targets: Target::ALL.to_vec(),
            ..AdapterSpec::elora(4)
        },
    ]
}

fn jitter<T: lrlb::Scalar>(ad: &mut AdapterWeights<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in ad.named_mut() {
        for x in t.data_mut() {
            *x = *x + T::of(rng.gen_range(-0.3..0.3));
        }
    }
}

fn rel(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(1e-30)).sqrt()
}

#[test]
fn fresh_adapters_leave_the_forward_bitwise_unchanged() {
    let w = TransformerWeights::<f32>::init(&config(), 3).unwrap();
    let ids: Vec<u32> = (0..20).map(|i| (i * 7 % 67 + 3) as u32).collect();
    let plain = forward(&w, None, &ids).unwrap();
    for spec in specs() {
        let ad = AdapterWeights::<f32>::init(&spec, &config(), 11).unwrap();
        let adapted = forward(&w, Some(&ad), &ids).unwrap();
        let same = plain
            .data()
            .iter()
            .zip(adapted.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{:?} changed the output at init", spec.variant);
    }
}

#[test]
fn merged_layer_matches_adapted_layer_on_random_probes() {
    let cfg = config();
    let w = TransformerWeights::<f32>::init(&cfg, 5).unwrap();
    for (k, spec) in specs().into_iter().enumerate() {
        let mut ad = AdapterWeights::<f32>::init(&spec, &cfg, 6).unwrap();
        jitter(&mut ad, 40 + k as u64);
        let merged = ad.merge_into(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for layer in 0..cfg.n_layers {
            for target in Target::ALL {
                let base_w = w.layers[layer].target(target);
                let merged_w = merged.layers[layer].target(target);
                let d_in = base_w.shape()[0];
                for probe in 0..100 {
                    let x: Vec<f32> = (0..d_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let x = Tensor::new(vec![1, d_in], x).unwrap();
                    let mut tape = Tape::<f32>::new();
                    let bound = BoundAdapters::bind(&mut tape, &ad);
                    let xv = tape.leaf(&x);
                    let wv = tape.leaf(base_w);
                    let (y, _) = bound
                        .get(layer, target)
                        .unwrap()
                        .forward(&mut tape, xv, wv)
                        .unwrap();
                    let want = x.matmul(merged_w).unwrap();
                    let err = rel(tape.value(y), want.data());
                    assert!(err <= 1e-5, "{layer}.{target} probe {probe}: {err}");
                }
            }
        }
        let ids: Vec<u32> = (0..24).map(|_| rng.gen_range(3..70)).collect();
        let a = forward(&w, Some(&ad), &ids).unwrap();
        let m = forward(&merged, None, &ids).unwrap();
        assert!(rel(a.data(), m.data()) <= 1e-5);
    }
}

#[test]
fn delta_matrix_matches_explicit_triple_sum() {
    let cfg = config();
    for (k, spec) in specs().into_iter().enumerate() {
        let mut ad = AdapterWeights::<f64>::init(&spec, &cfg, 9).unwrap();
        jitter(&mut ad, 70 + k as u64);
        let s = spec.alpha / spec.rank as f64;
        for (&(layer, target), l) in &ad.layers {
            let (n, r) = l.a.dims2();
            let m = l.b.dims2().1;
            let e = |i: usize, j: usize| {
                l.e.as_ref()
                    .map_or(if i == j { 1.0 } else { 0.0 }, |e| e.at(i, j))
            };
            let got = ad.delta_matrix(layer, target).unwrap();
            for i in 0..n {
                for j in 0..m {
                    let mut want = 0.0;
                    for p in 0..n {
                        for q in 0..r {
                            want += e(i, p) * l.a.at(p, q) * l.b.at(q, j);
                        }
                    }
                    want *= s;
                    assert!((got.at(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn generated_text_stays_inside_the_vocabulary() {
    let vocab = Vocab::new();
    let cfg = GenConfig::default();
    let tasks = [
        TaskSpec::HashHop {
            hops: (1, 8),
            chain_length: 10,
        },
        TaskSpec::HashChain {
            chains: vec![1, 2, 3, 4],
            lengths: (1, 5),
        },
    ];
    for task in &tasks {
        for i in 0..1000 {
            let s = task.nth(17, i, &cfg).unwrap();
            for text in [s.rendered(), s.target().as_str()] {
                let ids = vocab.encode(text).unwrap();
                assert!(ids.iter().all(|&t| (t as usize) < VOCAB_SIZE));
                assert_eq!(vocab.decode(&ids).unwrap(), text);
            }
        }
    }
}
