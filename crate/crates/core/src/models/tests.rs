use super::*;
use crate::numerics::{kernels, Rng, Tape, Tensor};
use crate::qlstm::Ctx;
use crate::quant::FirstLayerPolicy;

fn build(p: Preset, scale: f64, policy: &QuantPolicy) -> ModelSpec {
    build_preset(p, scale, policy, &PresetOptions::default()).unwrap()
}

#[test]
fn preset_dimensions() {
    let fp = QuantPolicy::fp32();
    let rnnt = build(Preset::Rnnt, 1.0, &fp);
    assert_eq!(rnnt.lstm_stack()[0].input_dim, 340);
    assert_eq!(rnnt.lstm_stack().len(), 6);
    assert!(rnnt.lstm_stack().iter().all(|l| l.hidden == 640));
    let Arch::Transducer {
        prediction, joint, ..
    } = &rnnt.arch
    else {
        panic!()
    };
    assert_eq!(
        (prediction.hidden, prediction.direction),
        (768, Direction::Forward)
    );
    assert_eq!(joint.out.out_dim, 46);

    let hmm = build(Preset::Hmm300, 1.0, &fp);
    assert_eq!(hmm.lstm_stack().len(), 4);
    assert!(hmm
        .lstm_stack()
        .iter()
        .all(|l| l.hidden == 512 && l.direction == Direction::Bidirectional));
    assert_eq!(hmm.input_dim, 140);
    assert_eq!(hmm.output_dim, 32000);

    let hmm2 = build(Preset::Hmm2000, 1.0, &fp);
    assert_eq!((hmm2.lstm_stack().len(), hmm2.input_dim), (6, 260));

    assert!(matches!(
        "lstm9".parse::<Preset>(),
        Err(Error::UnknownPreset(_))
    ));
}

#[test]
fn scale_divides_hidden_dims() {
    let fp = QuantPolicy::fp32();
    for p in [Preset::Hmm300, Preset::Hmm2000, Preset::Rnnt] {
        let (full, small) = (build(p, 1.0, &fp), build(p, 0.125, &fp));
        let (a, b) = (full.lstm_layers(), small.lstm_layers());
        assert_eq!(a.len(), b.len());
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            assert_eq!(x.hidden, y.hidden * 8);
            if name != "pred" {
                assert_eq!(y.input_dim % 8, 0);
            }
        }
    }
    assert!(build_preset(Preset::Rnnt, 0.0, &fp, &PresetOptions::default()).is_err());
    assert!(build_preset(Preset::Rnnt, 1.5, &fp, &PresetOptions::default()).is_err());
}

#[test]
fn rnnt_fractions() {
    let spec = build(Preset::Rnnt, 1.0, &QuantPolicy::int4_bac(true));
    let r = param_report(&spec, 152, 16);
    assert!(
        (r.first_layer_fraction - 0.088).abs() <= 0.005,
        "{}",
        r.first_layer_fraction
    );
    let pred = r.by_component[&Component::Prediction] as f64 / r.total as f64;
    assert!((pred - 0.041).abs() <= 0.005, "{pred}");
    assert!(
        (r.fractions["int4"] - 0.902).abs() <= 0.008,
        "{}",
        r.fractions["int4"]
    );
    assert!(
        (r.first_layer_compute_fraction - 0.048).abs() <= 0.01,
        "{}",
        r.first_layer_compute_fraction
    );
    let sum: f64 = r.fractions.values().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn dblstm_quantized_fraction() {
    for p in [Preset::Hmm300, Preset::Hmm2000] {
        let spec = build(p, 1.0, &QuantPolicy::int4_bac(false));
        let r = param_report(&spec, 21, 1);
        assert!(
            r.quantized_fraction >= 0.995,
            "{p}: {}",
            r.quantized_fraction
        );
    }
}

#[test]
fn report_agrees_with_introspection() {
    for p in [Preset::Hmm300, Preset::Rnnt] {
        let spec = build(p, 0.125, &QuantPolicy::int4_bac(p == Preset::Rnnt));
        let r = param_report(&spec, 10, 4);
        let enumerated: usize = spec
            .tensors()
            .iter()
            .filter(|t| t.kind != TensorKind::Bound)
            .map(|t| t.len())
            .sum();
        assert_eq!(r.total, enumerated);
        let net = Network::<f32>::init(spec, &mut Rng::new(0));
        let stored: usize = net
            .params
            .iter()
            .filter(|(k, _)| !is_bound_param(k))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(r.total, stored);
    }
}

#[test]
fn fractions_are_scale_stable() {
    for p in [Preset::Hmm300, Preset::Hmm2000, Preset::Rnnt] {
        let policy = QuantPolicy::int4_bac(p == Preset::Rnnt);
        let a = param_report(&build(p, 1.0, &policy), 152, 16);
        let b = param_report(&build(p, 0.25, &policy), 152, 16);
        assert!(
            (a.quantized_fraction - b.quantized_fraction).abs() < 0.01,
            "{p}"
        );
    }
}

#[test]
fn placement_audit_dblstm() {
    let spec = build(Preset::Hmm300, 0.125, &QuantPolicy::int4_bac(false));
    for t in spec.tensors() {
        let quantized = !t.quantizer.is_none();
        match t.kind {
            TensorKind::Weight => assert!(quantized, "{}", t.name),
            _ => assert!(!quantized, "{}", t.name),
        }
    }
    for a in spec.activations() {
        let quantized = !a.quantizer.is_none();
        match a.role {
            ActivationRole::CellState | ActivationRole::Softmax => {
                assert!(!quantized, "{}", a.name)
            }
            _ => assert!(quantized, "{}", a.name),
        }
    }
}

#[test]
fn bac_bounds_by_layer() {
    let spec = build(Preset::Hmm300, 0.125, &QuantPolicy::int4_bac(false));
    let l = spec.lstm_stack();
    assert!(l[0].input_q.is_learnable());
    for layer in &l[1..] {
        assert_eq!(layer.input_q.bounds.unwrap().alpha_pos, 1.0 / 0.75);
        assert!(!layer.input_q.is_learnable());
    }
    // layer 0 follows the first-layer policy for both roles
    assert!(l[0].hidden_q.is_learnable());
    assert!(l[1..]
        .iter()
        .all(|x| x.hidden_q.bounds.unwrap().alpha_pos == 1.0 && !x.hidden_q.is_learnable()));
    let Arch::Framewise { fc, .. } = &spec.arch else {
        panic!()
    };
    assert_eq!(fc[0].act_q.bounds.unwrap().alpha_pos, 1.0);
    assert!(fc[1].act_q.is_learnable());

    let rnnt = build(Preset::Rnnt, 0.125, &QuantPolicy::int4_bac(true));
    let e = rnnt.lstm_stack();
    assert!(e[0].weight_q.is_none() && e[0].input_q.is_none());
    assert_eq!(e[1].input_q.bounds.unwrap().alpha_pos, 1.25);
    let p = QuantPolicy {
        first_layer: FirstLayerPolicy::Learnable,
        ..QuantPolicy::int4_bac(true)
    };
    assert!(build(Preset::Rnnt, 0.125, &p).lstm_stack()[0]
        .input_q
        .is_learnable());
}

#[test]
fn spec_hash_ignores_quantizers() {
    let a = build(Preset::Rnnt, 0.125, &QuantPolicy::fp32());
    let b = build(Preset::Rnnt, 0.125, &QuantPolicy::int4_bac(true));
    let c = build(Preset::Rnnt, 0.25, &QuantPolicy::fp32());
    assert_eq!(a.spec_hash(), b.spec_hash());
    assert_ne!(a.spec_hash(), c.spec_hash());
}

#[test]
fn fp32_params_load_into_quantized_spec() {
    let fp = build(Preset::Hmm300, 0.125, &QuantPolicy::fp32());
    let net = Network::<f32>::init(fp, &mut Rng::new(1));
    let q = build(
        Preset::Hmm300,
        0.125,
        &QuantPolicy::uniform(4, crate::quant::Scheme::Sawb, ActScheme::Pact),
    );
    let loaded = Network::from_params(q, net.params.clone()).unwrap();
    assert_eq!(loaded.params["lstm.0.input.pos"].item(), 4.0);
    assert!(loaded.params["lstm.1.fwd.W"].bit_eq(&net.params["lstm.1.fwd.W"]));

    let mut broken = net.params.clone();
    broken.remove("fc.1.b");
    assert!(Network::from_params(net.spec.clone(), broken).is_err());
}

/// Plain framewise forward on raw slices, no tape.
fn reference_framewise(net: &Network<f32>, xs: &[Tensor<f32>]) -> Vec<Vec<f32>> {
    let batch = xs[0].shape()[0];
    let mut seq: Vec<Vec<f32>> = xs.iter().map(|x| x.data().to_vec()).collect();
    for (i, l) in net.spec.lstm_stack().iter().enumerate() {
        let h = l.hidden;
        let mut dirs = Vec::new();
        for d in l.direction.names() {
            let p = |s: &str| net.params[&format!("lstm.{i}.{d}.{s}")].data().to_vec();
            let (w, r, b) = (p("W"), p("R"), p("b"));
            let mut hs = vec![0.0; batch * h];
            let mut cs = vec![0.0; batch * h];
            let mut out = vec![Vec::new(); seq.len()];
            let order: Vec<usize> = if *d == "bwd" {
                (0..seq.len()).rev().collect()
            } else {
                (0..seq.len()).collect()
            };
            for t in order {
                let a = kernels::matmul_nt(&seq[t], &w, batch, l.input_dim, 4 * h);
                let bb = kernels::matmul_nt(&hs, &r, batch, h, 4 * h);
                let mut g: Vec<f32> = a.iter().zip(&bb).map(|(x, y)| x + y).collect();
                kernels::add_row(&mut g, &b);
                (hs, cs) = kernels::lstm_pointwise(&g, &cs, h);
                out[t] = hs.clone();
            }
            dirs.push(out);
        }
        seq = (0..seq.len())
            .map(|t| {
                let mut row = Vec::new();
                for bi in 0..batch {
                    for d in &dirs {
                        row.extend_from_slice(&d[t][bi * h..(bi + 1) * h]);
                    }
                }
                row
            })
            .collect();
    }
    let Arch::Framewise { fc, .. } = &net.spec.arch else {
        panic!()
    };
    seq.into_iter()
        .map(|mut y| {
            for (i, f) in fc.iter().enumerate() {
                y = kernels::matmul_nt(
                    &y,
                    net.params[&format!("fc.{i}.W")].data(),
                    batch,
                    f.in_dim,
                    f.out_dim,
                );
                kernels::add_row(&mut y, net.params[&format!("fc.{i}.b")].data());
            }
            y
        })
        .collect()
}

#[test]
fn none_policy_stack_matches_reference_bit_exactly() {
    let opts = PresetOptions {
        output_dim: Some(12),
        ..PresetOptions::default()
    };
    let spec = build_preset(Preset::Hmm300, 0.0625, &QuantPolicy::fp32(), &opts).unwrap();
    let mut rng = Rng::new(3);
    let net = Network::<f32>::init(spec, &mut rng);
    let xs: Vec<Tensor<f32>> = (0..5)
        .map(|_| Tensor::randn(&[2, net.spec.input_dim], 1.0, &mut rng))
        .collect();

    let tape = Tape::new();
    let b = net.bind(&tape, false);
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = net.framewise(&mut ctx, &b, &vars).unwrap();
    let reference = reference_framewise(&net, &xs);
    for (v, r) in out.iter().zip(&reference) {
        assert_eq!(tape.value(*v).data(), r.as_slice());
    }
}

#[test]
fn transducer_forward_shapes() {
    let spec = build(Preset::Rnnt, 0.0625, &QuantPolicy::int4_bac(true));
    let net = Network::<f32>::init(spec, &mut Rng::new(4));
    let tape = Tape::new();
    let b = net.bind(&tape, false);
    let mut ctx = Ctx::new(&tape, Rng::new(0), false);
    let xs: Vec<_> = (0..3)
        .map(|_| {
            tape.constant(Tensor::randn(
                &[2, net.spec.input_dim],
                1.0,
                &mut Rng::new(5),
            ))
        })
        .collect();
    let enc = net.encoder(&mut ctx, &b, &xs).unwrap();
    let pred = net
        .prediction(&mut ctx, &b, &[vec![0, 3], vec![45, 1]])
        .unwrap();
    let z = net.joint(&mut ctx, &b, enc[0], pred[1]).unwrap();
    assert_eq!(tape.shape(z), vec![2, 46]);
    let lm = net.lm_logits(&mut ctx, &b, &[vec![0, 3]]).unwrap();
    assert_eq!(tape.shape(lm[0]), vec![2, 46]);
    assert!(net.prediction(&mut ctx, &b, &[vec![46, 0]]).is_err());
    assert!(net.framewise(&mut ctx, &b, &xs).is_err());
}
