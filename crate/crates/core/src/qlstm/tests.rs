use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

use super::*;
use crate::numerics::{kernels, Tensor};
use crate::quant::{LevelMode, QuantSpec, Scheme};

fn layer_spec(d: usize, h: usize, direction: Direction) -> QLayerSpec {
    QLayerSpec {
        layer_index: 1,
        input_dim: d,
        hidden: h,
        direction,
        dropout_p: 0.0,
        weight_q: TensorQuantizer::NONE,
        input_q: TensorQuantizer::NONE,
        hidden_q: TensorQuantizer::NONE,
    }
}

fn int4_bac(spec: &mut QLayerSpec, dropout: f64) {
    let odd = QuantSpec::symmetric(Scheme::Sawb, 4, LevelMode::Odd);
    spec.dropout_p = dropout;
    spec.weight_q = TensorQuantizer::dynamic(odd);
    spec.input_q = TensorQuantizer::fixed(odd, ClipBounds::symmetric(1.0 / (1.0 - dropout)));
    spec.hidden_q = TensorQuantizer::fixed(odd, ClipBounds::symmetric(1.0));
}

struct RawCell<T: Real> {
    w: Tensor<T>,
    r: Tensor<T>,
    b: Tensor<T>,
}

fn raw_cell<T: Real>(d: usize, h: usize, scale: f64, rng: &mut Rng) -> RawCell<T> {
    RawCell {
        w: Tensor::uniform(&[4 * h, d], scale, rng),
        r: Tensor::uniform(&[4 * h, h], scale, rng),
        b: Tensor::uniform(&[4 * h], scale, rng),
    }
}

fn bind<T: Real>(tape: &Tape<T>, c: &RawCell<T>) -> CellParams {
    CellParams {
        w: tape.leaf(c.w.clone(), true),
        r: tape.leaf(c.r.clone(), true),
        b: tape.leaf(c.b.clone(), true),
    }
}

fn binding(cells: Vec<CellParams>) -> LayerBinding {
    LayerBinding {
        cells,
        input: None,
        hidden: None,
    }
}

/// Straight-line reference cell on plain slices.
fn reference_step(
    c: &RawCell<f32>,
    x: &[f32],
    h: &[f32],
    cs: &[f32],
    batch: usize,
) -> (Vec<f32>, Vec<f32>) {
    let hid = c.r.shape()[1];
    let d = c.w.shape()[1];
    let a = kernels::matmul_nt(x, c.w.data(), batch, d, 4 * hid);
    let bpart = kernels::matmul_nt(h, c.r.data(), batch, hid, 4 * hid);
    let mut gates: Vec<f32> = a.iter().zip(&bpart).map(|(p, q)| p + q).collect();
    kernels::add_row(&mut gates, c.b.data());
    kernels::lstm_pointwise(&gates, cs, hid)
}

#[test]
fn zero_params_and_state_give_zero() {
    let tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let spec = layer_spec(3, 2, Direction::Forward);
    let zero = RawCell {
        w: Tensor::zeros(&[8, 3]),
        r: Tensor::zeros(&[8, 2]),
        b: Tensor::zeros(&[8]),
    };
    let cell = bind(&tape, &zero);
    let b = binding(vec![cell]);
    let q = quantize_cell(&mut ctx, "l", &cell, &spec).unwrap();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let s = tape.constant(Tensor::zeros(&[1, 2]));
    let (h, c) = lstm_cell_step(&mut ctx, "l", x, s, s, &q, &spec, &b).unwrap();
    assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
    assert_eq!(tape.value(c).data(), &[0.0, 0.0]);
}

#[test]
fn none_quantizers_match_reference_bit_exactly() {
    let mut rng = Rng::new(1);
    let raw = raw_cell::<f32>(5, 4, 0.6, &mut rng);
    let x0 = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
    let h0 = Tensor::<f32>::uniform(&[3, 4], 0.9, &mut rng);
    let c0 = Tensor::<f32>::randn(&[3, 4], 1.0, &mut rng);

    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let spec = layer_spec(5, 4, Direction::Forward);
    let cell = bind(&tape, &raw);
    let q = quantize_cell(&mut ctx, "l", &cell, &spec).unwrap();
    let (x, h, c) = (
        tape.constant(x0.clone()),
        tape.constant(h0.clone()),
        tape.constant(c0.clone()),
    );
    let (h1, c1) = lstm_cell_step(&mut ctx, "l", x, h, c, &q, &spec, &binding(vec![cell])).unwrap();

    let (rh, rc) = reference_step(&raw, x0.data(), h0.data(), c0.data(), 3);
    assert!(tape.value(h1).bit_eq(&Tensor::new(&[3, 4], rh).unwrap()));
    assert!(tape.value(c1).bit_eq(&Tensor::new(&[3, 4], rc).unwrap()));
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let spec = layer_spec(5, 4, Direction::Forward);
    let raw = raw_cell::<f32>(5, 4, 0.5, &mut Rng::new(1));
    let cell = bind(&tape, &raw);
    let q = quantize_cell(&mut ctx, "l", &cell, &spec).unwrap();
    let x = tape.constant(Tensor::zeros(&[2, 6]));
    let s = tape.constant(Tensor::zeros(&[2, 4]));
    let err = lstm_cell_step(&mut ctx, "l", x, s, s, &q, &spec, &binding(vec![cell]));
    assert!(matches!(err, Err(crate::Error::Shape { .. })));
}

#[test]
fn single_step_layer_equals_cell_step() {
    let mut rng = Rng::new(2);
    let raw = raw_cell::<f32>(3, 4, 0.5, &mut rng);
    let x0 = Tensor::<f32>::randn(&[2, 3], 1.0, &mut rng);
    let mut spec = layer_spec(3, 4, Direction::Forward);
    int4_bac(&mut spec, 0.0);

    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let cell = bind(&tape, &raw);
    let b = binding(vec![cell]);
    let x = tape.constant(x0);
    let out = run_layer(&mut ctx, "l", &[x], &spec, &b).unwrap();

    let q = quantize_cell(&mut ctx, "m", &cell, &spec).unwrap();
    let z = tape.constant(Tensor::zeros(&[2, 4]));
    let (h, _) = lstm_cell_step(&mut ctx, "m", x, z, z, &q, &spec, &b).unwrap();
    assert!(tape.value(out[0]).bit_eq(&tape.value(h)));
}

#[test]
fn bidirectional_halves_equal_independent_runs() {
    let mut rng = Rng::new(3);
    let fwd = raw_cell::<f32>(3, 4, 0.5, &mut rng);
    let bwd = raw_cell::<f32>(3, 4, 0.5, &mut rng);
    let xs0: Vec<Tensor<f32>> = (0..5)
        .map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng))
        .collect();
    let mut bi = layer_spec(3, 4, Direction::Bidirectional);
    int4_bac(&mut bi, 0.0);

    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let xs: Vec<Var> = xs0.iter().map(|x| tape.constant(x.clone())).collect();
    let (cf, cb) = (bind(&tape, &fwd), bind(&tape, &bwd));
    let both = run_layer(&mut ctx, "bi", &xs, &bi, &binding(vec![cf, cb])).unwrap();

    let f_spec = QLayerSpec {
        direction: Direction::Forward,
        ..bi.clone()
    };
    let f_out = run_layer(&mut ctx, "f", &xs, &f_spec, &binding(vec![cf])).unwrap();
    // the backward direction is a forward run over the reversed sequence
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let b_out = run_layer(&mut ctx, "b", &rev, &f_spec, &binding(vec![cb])).unwrap();

    for t in 0..5 {
        let v = tape.value(both[t]);
        let (f, b) = (tape.value(f_out[t]), tape.value(b_out[4 - t]));
        for r in 0..2 {
            assert_eq!(&v.row(r)[..4], f.row(r));
            assert_eq!(&v.row(r)[4..], b.row(r));
        }
    }
}

#[test]
fn bac_inputs_never_exceed_dropout_bound_and_hidden_never_clips() {
    let mut rng = Rng::new(4);
    let mut spec = layer_spec(6, 6, Direction::Bidirectional);
    int4_bac(&mut spec, 0.2);
    let fwd = raw_cell::<f32>(6, 6, 2.0, &mut rng);
    let bwd = raw_cell::<f32>(6, 6, 2.0, &mut rng);

    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Rng::new(9), true);
    // upstream hidden states lie in (-1, 1)
    let xs: Vec<Var> = (0..8)
        .map(|_| tape.constant(Tensor::uniform(&[4, 6], 0.999, &mut rng)))
        .collect();
    let b = binding(vec![bind(&tape, &fwd), bind(&tape, &bwd)]);
    run_layer(&mut ctx, "l", &xs, &spec, &b).unwrap();

    let input = &ctx.probes["l.input"];
    assert!(input.max_abs_out <= 1.25, "{}", input.max_abs_out);
    assert_eq!(input.clipped, 0);
    let hidden = &ctx.probes["l.hidden"];
    assert_eq!(hidden.clipped, 0);
    assert!(hidden.total > 0);
}

#[test]
fn fc_identity_and_zero_weights() {
    let tape = Tape::<f32>::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let spec = QFCSpec {
        in_dim: 3,
        out_dim: 3,
        weight_q: TensorQuantizer::NONE,
        act_q: TensorQuantizer::NONE,
    };
    let x0 = Tensor::<f32>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
    let x = tape.constant(x0.clone());
    let eye = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let fb = FcBinding {
        w: tape.constant(eye),
        b: tape.constant(Tensor::zeros(&[3])),
        act: None,
    };
    let y = run_fc(&mut ctx, "fc", x, &spec, &fb).unwrap();
    assert!(tape.value(y).bit_eq(&x0));

    let fb = FcBinding {
        w: tape.constant(Tensor::zeros(&[3, 3])),
        b: tape.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()),
        act: None,
    };
    let y = run_fc(&mut ctx, "fc", x, &spec, &fb).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 1., 2., 3.]);
}

fn fc_loss(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &QFCSpec) -> f64 {
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let fb = FcBinding {
        w: tape.constant(w.clone()),
        b: tape.constant(b.clone()),
        act: None,
    };
    let xv = tape.constant(x.clone());
    let y = run_fc(&mut ctx, "fc", xv, spec, &fb).unwrap();
    let l = tape.cross_entropy(y, &[1, 0, 2]).unwrap();
    let v = tape.value(l).item();
    v
}

fn fd(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += 1e-5;
            m.data_mut()[i] -= 1e-5;
            (f(&p) - f(&m)) / 2e-5
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], rel: f64) {
    for (x, y) in a.iter().zip(b) {
        let s = x.abs().max(y.abs()).max(1e-7);
        assert!((x - y).abs() / s <= rel, "{x} vs {y}");
    }
}

#[test]
fn fc_gradients_match_finite_differences() {
    let mut rng = Rng::new(5);
    let x0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let w0 = Tensor::<f64>::randn(&[3, 4], 0.5, &mut rng);
    let b0 = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
    let plain = QFCSpec {
        in_dim: 4,
        out_dim: 3,
        weight_q: TensorQuantizer::NONE,
        act_q: TensorQuantizer::NONE,
    };
    let odd = QuantSpec::symmetric(Scheme::Max, 4, LevelMode::Odd);
    let quantized = QFCSpec {
        weight_q: TensorQuantizer::dynamic(odd),
        act_q: TensorQuantizer::dynamic(odd),
        ..plain.clone()
    };
    for (spec, check_all) in [(&plain, true), (&quantized, false)] {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, Rng::new(0), false);
        let fb = FcBinding {
            w: tape.leaf(w0.clone(), true),
            b: tape.leaf(b0.clone(), true),
            act: None,
        };
        let x = tape.leaf(x0.clone(), true);
        let y = run_fc(&mut ctx, "fc", x, spec, &fb).unwrap();
        let l = tape.cross_entropy(y, &[1, 0, 2]).unwrap();
        let g = tape.backward(l).unwrap();
        // bias is never quantized, so its gradient is exact in both cases
        close(
            g.get(fb.b).unwrap().data(),
            &fd(&b0, |b| fc_loss(&x0, &w0, b, spec)),
            1e-4,
        );
        if check_all {
            close(
                g.get(x).unwrap().data(),
                &fd(&x0, |v| fc_loss(v, &w0, &b0, spec)),
                1e-4,
            );
            close(
                g.get(fb.w).unwrap().data(),
                &fd(&w0, |v| fc_loss(&x0, v, &b0, spec)),
                1e-4,
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hidden_state_strictly_bounded(seed in any::<u64>(), scale in 0.1f64..4.0, use_quant in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let mut spec = layer_spec(4, 5, Direction::Forward);
        if use_quant {
            int4_bac(&mut spec, 0.0);
        }
        let raw = raw_cell::<f32>(4, 5, scale, &mut rng);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, Rng::new(0), false);
        let xs: Vec<Var> = (0..6).map(|_| tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng))).collect();
        let out = run_layer(&mut ctx, "l", &xs, &spec, &binding(vec![bind(&tape, &raw)])).unwrap();
        for h in out {
            prop_assert!(tape.value(h).max_abs() < 1.0);
        }
    }
}
