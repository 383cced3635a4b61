use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

use super::*;
use crate::error::Error;
use crate::models::{build_preset, ActScheme, Network, Preset, PresetOptions, QuantPolicy};
use crate::numerics::{Rng, Tape, Tensor};
use crate::quant::{fake_quant, ClipBounds, LevelMode, QuantSpec, Scheme, Symmetry};
use crate::train::{
    train_qat, Checkpoint, GrammarTask, LrSchedule, Optimizer, OptimizerSpec, TrainConfig,
};

fn int4() -> QuantSpec {
    QuantSpec::symmetric(Scheme::BacFixed, 4, LevelMode::Odd)
}

fn random_codes(rng: &mut Rng, n: usize, max: i32) -> Vec<i8> {
    (0..n)
        .map(|_| (rng.below(2 * max as usize + 1) as i32 - max) as i8)
        .collect()
}

#[test]
fn pack_examples() {
    let z = PackedNibbleMatrix::pack(&Tensor::zeros(&[3, 3]), &ClipBounds::symmetric(1.0)).unwrap();
    assert!(z.codes().iter().all(|&c| c == 0));
    assert_eq!(z.bytes, vec![0; 5]);

    for alpha in [1.0, 0.37, 1.25, 3.0e-3] {
        let w = Tensor::from_f64(&[1, 1], &[alpha]).unwrap();
        let p = PackedNibbleMatrix::pack(&w, &ClipBounds::symmetric(alpha)).unwrap();
        assert_eq!(p.codes(), vec![7]);
        let back = p.unpack().item();
        let a = alpha as f32;
        assert!((back - a).abs() <= f32::EPSILON * a, "{back} vs {a}");
    }
}

#[test]
fn nibble_order_test_vector() {
    let p = PackedNibbleMatrix::from_codes(1, 5, 0.5, &[1, -1, 7, -7, 0]);
    // element 2i in the low nibble, two's complement
    assert_eq!(p.bytes, vec![0xF1, 0x97, 0x00]);
    assert_eq!(p.codes(), vec![1, -1, 7, -7, 0]);
    assert_eq!(p.unpack().data(), &[0.5, -0.5, 3.5, -3.5, 0.0]);
}

#[test]
fn footprint_is_half_a_byte_per_weight() {
    let mut rng = Rng::new(3);
    for (r, c) in [(1, 1), (3, 5), (4, 4), (7, 9), (640, 2560)] {
        let w = Tensor::randn(&[r, c], 0.1, &mut rng);
        let p = PackedNibbleMatrix::pack(&w, &ClipBounds::symmetric(0.2)).unwrap();
        assert_eq!(p.byte_len(), (r * c).div_ceil(2));
        p.validate().unwrap();
    }
}

#[test]
fn corrupt_packed_payloads_are_rejected() {
    let mut p = PackedNibbleMatrix::from_codes(2, 2, 1.0, &[1, 2, 3, 4]);
    p.bytes[1] = 0x80;
    assert!(matches!(p.validate(), Err(Error::Checkpoint(_))));
    p.bytes = vec![0];
    assert!(p.validate().is_err());
}

#[test]
fn asymmetric_bounds_cannot_be_packed() {
    let w = Tensor::zeros(&[2, 2]);
    assert!(matches!(
        PackedNibbleMatrix::pack(&w, &ClipBounds::asymmetric(-0.5, 1.0)),
        Err(Error::PolicyMismatch(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn pack_round_trip_equals_fake_quant(seed in 0u64..u64::MAX, rows in 1usize..9, cols in 1usize..9, alpha in 1e-3f64..4.0) {
        let mut rng = Rng::new(seed);
        let w = Tensor::<f32>::randn(&[rows, cols], alpha, &mut rng);
        let b = ClipBounds::symmetric(alpha);
        let p = PackedNibbleMatrix::pack(&w, &b).unwrap();
        prop_assert!(p.codes().iter().all(|c| c.abs() <= MAX_CODE));
        prop_assert_eq!(p.byte_len(), (rows * cols).div_ceil(2));
        let tape = Tape::<f32>::new();
        let x = tape.constant(w);
        let fq = fake_quant(&tape, x, &int4(), Some(&b), None).unwrap();
        prop_assert!(p.unpack().bit_eq(&tape.value(fq.var)));
    }
}

#[test]
fn activation_codes_dequantize_to_fake_quant() {
    let mut rng = Rng::new(4);
    let x = Tensor::<f32>::randn(&[6, 10], 0.8, &mut rng);
    for bits in [2, 4, 8] {
        let spec = QuantSpec::symmetric(Scheme::BacFixed, bits, LevelMode::Odd);
        let b = ClipBounds::symmetric(1.25);
        let a = QuantizedActivation::quantize(&x, &b, &spec).unwrap();
        assert!(a.codes.iter().all(|&c| (c as i32).abs() <= a.max_code()));
        let fq = crate::quant::quantize_linear(&x, &b, &spec).unwrap().values;
        assert!(a.dequantize().bit_eq(&fq));
    }
    let full = QuantSpec::symmetric(Scheme::BacFixed, 4, LevelMode::Full);
    assert!(matches!(
        QuantizedActivation::quantize(&x, &ClipBounds::symmetric(1.0), &full),
        Err(Error::PolicyMismatch(_))
    ));
}

fn activation(
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scale: f32,
    levels: usize,
) -> QuantizedActivation {
    QuantizedActivation {
        rows,
        cols,
        codes,
        scale,
        levels,
    }
}

#[test]
fn int_gemm_examples() {
    // identity activation selects rows of the dequantized weights
    let k = 5;
    let mut eye = vec![0i8; k * k];
    for i in 0..k {
        eye[i * k + i] = 1;
    }
    let mut rng = Rng::new(5);
    let w = PackedNibbleMatrix::from_codes(k, 3, 0.125, &random_codes(&mut rng, k * 3, 7));
    let y = int_gemm(&activation(k, k, eye, 1.0, 15), &w).unwrap();
    assert!(y.bit_eq(&w.unpack()));

    let ones = activation(2, 9, vec![1; 18], 1.0, 15);
    let wo = PackedNibbleMatrix::from_codes(9, 4, 1.0, &[1; 36]);
    assert_eq!(int_gemm(&ones, &wo).unwrap().data(), &[9.0; 8]);

    assert!(matches!(int_gemm(&ones, &w), Err(Error::Shape { .. })));
}

#[test]
fn int_gemm_matches_wide_integer_reference() {
    let mut rng = Rng::new(6);
    for _ in 0..1000 {
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(40), 1 + rng.below(6));
        let levels = [3usize, 15, 255][rng.below(3)];
        let amax = (levels as i32 - 1) / 2;
        let a = activation(
            m,
            k,
            random_codes(&mut rng, m * k, amax),
            rng.uniform(1e-3, 1.0) as f32,
            levels,
        );
        let wc = random_codes(&mut rng, k * n, 7);
        let w = PackedNibbleMatrix::from_codes(k, n, rng.uniform(1e-3, 1.0) as f32, &wc);
        let acc = int_gemm_acc(&a, &w.codes(), k, n).unwrap();
        let y = int_gemm(&a, &w).unwrap();
        for i in 0..m {
            for j in 0..n {
                let exact: i128 = (0..k)
                    .map(|p| a.codes[i * k + p] as i128 * wc[p * n + j] as i128)
                    .sum();
                assert_eq!(acc[i * n + j] as i128, exact);
                let real = exact as f64 * a.scale as f64 * w.scale as f64;
                let got = y.data()[i * n + j] as f64;
                let ulp = (real.abs() as f32).max(f32::MIN_POSITIVE) as f64 * f32::EPSILON as f64;
                assert!((got - real).abs() <= ulp, "{got} vs {real}");
            }
        }
    }
}

#[test]
fn int_gemm_is_distributive_over_k() {
    let mut rng = Rng::new(7);
    for _ in 0..100 {
        let (m, k, n) = (1 + rng.below(3), 2 + rng.below(30), 1 + rng.below(5));
        let split = 1 + rng.below(k - 1);
        let a = activation(m, k, random_codes(&mut rng, m * k, 7), 0.1, 15);
        let w = random_codes(&mut rng, k * n, 7);
        let whole = int_gemm_acc(&a, &w, k, n).unwrap();
        let cols = |lo: usize, hi: usize| {
            let codes = (0..m)
                .flat_map(|i| a.codes[i * k + lo..i * k + hi].to_vec())
                .collect();
            activation(m, hi - lo, codes, 0.1, 15)
        };
        let left = int_gemm_acc(&cols(0, split), &w[..split * n], split, n).unwrap();
        let right = int_gemm_acc(&cols(split, k), &w[split * n..], k - split, n).unwrap();
        let sum: Vec<i32> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
        assert_eq!(sum, whole);
    }
}

#[test]
fn int_gemm_refuses_overflowing_depth() {
    let k = 2_500_000;
    let a = activation(1, k, vec![0; k], 1.0, 255);
    assert!(int_gemm_acc(&a, &vec![0; k], k, 1).is_err());
    // 4-bit activations fit a 2^24-deep product
    let a4 = activation(1, 1 << 10, vec![7; 1 << 10], 1.0, 15);
    assert!(int_gemm_acc(&a4, &vec![7; 1 << 10], 1 << 10, 1).is_ok());
}

fn framewise_net(policy: &QuantPolicy, seed: u64) -> Network<f32> {
    let opts = PresetOptions {
        input_dim: Some(24 * 16),
        output_dim: Some(12),
        layers: Some(3),
        ..PresetOptions::default()
    };
    let spec = build_preset(Preset::Hmm300, 1.0 / 16.0, policy, &opts).unwrap();
    Network::init(spec, &mut Rng::new(seed))
}

fn frames(t: usize, batch: usize, dim: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = Rng::new(seed);
    (0..t)
        .map(|_| Tensor::randn(&[batch, dim], 1.0, &mut rng))
        .collect()
}

#[test]
fn none_policy_runtime_is_the_float_forward() {
    let net = framewise_net(&QuantPolicy::fp32(), 1);
    let model = PackedModel::pack(&net).unwrap();
    assert!(model.packed.is_empty());
    let xs = frames(6, 3, net.spec.input_dim, 2);
    let got = model.runtime().unwrap().framewise(&xs).unwrap();
    let want = reference::framewise(&net, &xs).unwrap();
    assert!(got.iter().zip(&want).all(|(a, b)| a.bit_eq(b)));

    let spec = build_preset(
        Preset::Rnnt,
        0.0625,
        &QuantPolicy::fp32(),
        &PresetOptions::default(),
    )
    .unwrap();
    let lm = Network::init(spec, &mut Rng::new(3));
    let tokens = vec![vec![0, 0], vec![5, 9], vec![3, 1]];
    let got = PackedModel::pack(&lm)
        .unwrap()
        .runtime()
        .unwrap()
        .lm_logits(&tokens)
        .unwrap();
    let want = reference::lm_logits(&lm, &tokens).unwrap();
    assert!(got.iter().zip(&want).all(|(a, b)| a.bit_eq(b)));
}

fn max_abs_dev(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f32::max)
}

#[test]
fn quantized_framewise_tracks_fake_quant() {
    let policy = QuantPolicy::uniform(4, Scheme::Sawb, ActScheme::Bac);
    let net = framewise_net(&policy, 4);
    let model = PackedModel::pack(&net).unwrap();
    assert!(!model.packed.is_empty());
    let xs = frames(8, 2, net.spec.input_dim, 5);
    let got = model.runtime().unwrap().framewise(&xs).unwrap();
    let want = reference::framewise(&net, &xs).unwrap();
    let dev = max_abs_dev(&got, &want);
    assert!(dev < 1e-4, "{dev}");
}

#[test]
fn scaled_rnnt_encoder_tracks_fake_quant() {
    let spec = build_preset(
        Preset::Rnnt,
        0.125,
        &QuantPolicy::int4_bac(true),
        &PresetOptions::default(),
    )
    .unwrap();
    let net = Network::init(spec, &mut Rng::new(8));
    let model = PackedModel::pack(&net).unwrap();
    // first layer and joint stay in float
    assert!(!model.packed.contains_key("enc.0.fwd.W") && !model.packed.contains_key("joint.out.W"));
    assert!(model.packed.contains_key("enc.1.fwd.W") && model.packed.contains_key("pred.fwd.R"));
    let xs = frames(12, 2, net.spec.input_dim, 9);
    let got = model.runtime().unwrap().encoder(&xs).unwrap();
    let want = reference::encoder(&net, &xs).unwrap();
    let dev = max_abs_dev(&got, &want);
    assert!(dev < 1e-4, "{dev}");
}

#[test]
fn packed_model_file_round_trip() {
    let spec = build_preset(
        Preset::Rnnt,
        0.0625,
        &QuantPolicy::int4_bac(true),
        &PresetOptions::default(),
    )
    .unwrap();
    let net = Network::init(spec.clone(), &mut Rng::new(10));
    let model = PackedModel::pack(&net).unwrap();
    let bytes = model.to_checkpoint().to_bytes();
    let back = PackedModel::from_checkpoint(spec.clone(), &Checkpoint::from_bytes(&bytes).unwrap())
        .unwrap();
    assert_eq!(back, model);
    let expect: usize = model
        .packed
        .values()
        .map(|p| (p.rows * p.cols).div_ceil(2))
        .sum();
    assert_eq!(back.packed_bytes(), expect);

    let mut ck = model.to_checkpoint();
    ck.packed.remove("enc.1.fwd.W");
    assert!(matches!(
        PackedModel::from_checkpoint(spec.clone(), &ck),
        Err(Error::Checkpoint(_))
    ));
    let mut ck = model.to_checkpoint();
    ck.spec_hash ^= 1;
    assert!(PackedModel::from_checkpoint(spec, &ck).is_err());
}

#[test]
fn unsupported_policies_are_policy_mismatches() {
    let cases = [
        QuantPolicy::uniform(8, Scheme::Max, ActScheme::Max),
        QuantPolicy {
            weight_levels: LevelMode::Full,
            ..QuantPolicy::uniform(4, Scheme::Max, ActScheme::Max)
        },
        QuantPolicy {
            act_levels: LevelMode::Full,
            ..QuantPolicy::uniform(4, Scheme::Sawb, ActScheme::Bac)
        },
        QuantPolicy {
            act_symmetry: Symmetry::Asymmetric,
            ..QuantPolicy::uniform(4, Scheme::Sawb, ActScheme::Pact)
        },
    ];
    for p in cases {
        let net = framewise_net(&p, 11);
        assert!(
            matches!(PackedModel::pack(&net), Err(Error::PolicyMismatch(_))),
            "{p:?}"
        );
    }
}

#[test]
fn toy_prediction_network_greedy_decode_agrees() {
    let task = GrammarTask {
        train_batches: 10,
        holdout_batches: 2,
        ..GrammarTask::default()
    };
    let data = task.generate(12).unwrap();
    let spec = build_preset(
        Preset::Rnnt,
        0.0625,
        &QuantPolicy::int4_bac(true),
        &PresetOptions::default(),
    )
    .unwrap();
    let net = Network::init(spec, &mut Rng::new(13));
    let opt = Optimizer::new(OptimizerSpec::adamw()).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        seed: 14,
        start_epoch: 0,
    };
    let out = train_qat(net, &data, opt, &LrSchedule::Constant { lr0: 3e-3 }, &cfg).unwrap();
    let net = out.network;
    let model = PackedModel::pack(&net).unwrap();
    let rt = model.runtime().unwrap();

    let start: Vec<usize> = (0..task.vocab).collect();
    let got = rt.greedy_lm(&start, task.seq_len).unwrap();
    let want = reference::greedy_lm(&net, &start, task.seq_len).unwrap();
    let total = start.len() * task.seq_len;
    let same: usize = got
        .iter()
        .zip(&want)
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count())
        .sum();
    assert!(same as f64 >= 0.99 * total as f64, "{same}/{total}");
}
