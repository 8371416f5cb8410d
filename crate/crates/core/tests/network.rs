use acacr::network::{
    racab, residual_block, BlockVariant, ForwardOptions, LayerKind, Network, NetworkConfig, Params, RACAB_POSITIONS,
};
use acacr::attention::{AttentionConfig, AttentionParams, AttentionVariant};
use acacr::trainer::sample_gradients;
use acacr::{Error, RngStream, Tape, Tensor};

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Replaces every parameter, including the zero-initialized ones, with
/// small random values.
fn randomize(net: &mut Network<f64>, rng: &mut RngStream) {
    for t in net.params_mut().tensors_mut() {
        *t = Tensor::from_fn(t.shape(), |_| 0.2 * rng.normal());
    }
}

#[test]
fn layout_has_eighteen_layers() {
    let layout = NetworkConfig::new(3, 8, BlockVariant::Ac).layout();
    assert_eq!(layout.len(), 18);
    assert_eq!(layout[0], LayerKind::Stem);
    assert_eq!(layout[17], LayerKind::Refine);
    for (i, kind) in layout.iter().enumerate() {
        let racab = RACAB_POSITIONS.contains(&(i + 1));
        assert_eq!(*kind == LayerKind::Racab, racab, "layer {}", i + 1);
    }
    assert_eq!(layout.iter().filter(|k| **k == LayerKind::Residual).count(), 14);
    let base = NetworkConfig::new(3, 8, BlockVariant::Base).layout();
    assert_eq!(base.iter().filter(|k| **k == LayerKind::Residual).count(), 16);
}

#[test]
fn config_validation() {
    assert!(NetworkConfig::new(3, 6, BlockVariant::Base).validate().is_err());
    assert!(NetworkConfig::new(0, 8, BlockVariant::Ac).validate().is_err());
    let cfg: NetworkConfig = serde_json::from_str(r#"{"c_in": 4}"#).unwrap();
    assert_eq!((cfg.channels, cfg.alpha, cfg.variant, cfg.patch_size), (32, 0.1, BlockVariant::Ac, 2));
    assert!(serde_json::from_str::<NetworkConfig>(r#"{"c_in": 4, "depth": 3}"#).is_err());
    assert_eq!("ca".parse::<BlockVariant>().unwrap(), BlockVariant::Ca);
    assert!("transformer".parse::<BlockVariant>().is_err());
}

#[test]
fn parameter_count_matches_closed_form() {
    let (c_in, c) = (3, 16);
    let conv3 = |a: usize, b: usize| 9 * a * b;
    let conv1 = |a: usize, b: usize| a * b;
    let stem_refine = conv3(c_in, c) + conv3(c, c_in);
    let body = 16 * 2 * conv3(c, c);
    let embed = 3 * conv1(c, c);
    let selection = 2 * (conv1(c, c / 4) + conv1(c / 4, 1));
    let output = conv3(c, c);
    let want = |attention: usize| stem_refine + body + 2 * attention;
    for (variant, attention) in [
        (BlockVariant::Base, 0),
        (BlockVariant::Ca, embed + output),
        (BlockVariant::Ac, embed + selection + output),
    ] {
        let net = Network::<f64>::build(NetworkConfig::new(c_in, c, variant), &mut RngStream::new(1)).unwrap();
        assert_eq!(net.params().scalar_count(), want(attention), "{variant}");
        assert_eq!(net.attention_scalar_count(), 2 * attention, "{variant}");
    }
    assert_eq!(want(embed + selection + output), 81_008);
}

#[test]
fn builds_are_deterministic() {
    let cfg = NetworkConfig::new(3, 8, BlockVariant::Ac);
    let a = Network::<f32>::build(cfg.clone(), &mut RngStream::new(5)).unwrap();
    let b = Network::<f32>::build(cfg.clone(), &mut RngStream::new(5)).unwrap();
    let c = Network::<f32>::build(cfg, &mut RngStream::new(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn he_normal_scale() {
    let cfg = NetworkConfig::new(3, 32, BlockVariant::Base);
    let net = Network::<f64>::build(cfg, &mut RngStream::new(2)).unwrap();
    let w = net.params().get("l05.conv1").unwrap();
    let n = w.len() as f64;
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / n;
    let want = 2.0 / (9.0 * 32.0);
    assert!((var / want - 1.0).abs() < 0.05, "variance {var} vs {want}");
    assert!(net.params().get("l18.refine").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_at_init() {
    for variant in BlockVariant::ALL {
        let cfg = NetworkConfig::new(3, 8, variant);
        let net = Network::<f32>::build(cfg, &mut RngStream::new(3)).unwrap();
        let mut rng = RngStream::new(4);
        for _ in 0..20 {
            let x = Tensor::<f32>::from_fn(&[8, 12, 3], |_| rng.uniform() as f32);
            assert_eq!(net.forward(&x).unwrap(), x, "{variant}");
        }
    }
}

#[test]
fn shape_preservation() {
    let cfg = NetworkConfig::new(4, 16, BlockVariant::Ac);
    let mut net = Network::<f64>::build(cfg, &mut RngStream::new(0)).unwrap();
    let mut rng = RngStream::new(1);
    randomize(&mut net, &mut rng);
    let x = random(&[32, 32, 4], &mut rng);
    let y = net.forward(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.max_abs_diff(&x) > 0.0);
}

#[test]
fn input_checks() {
    let ac = Network::<f32>::build(NetworkConfig::new(3, 8, BlockVariant::Ac), &mut RngStream::new(0)).unwrap();
    let err = ac.forward(&Tensor::zeros(&[10, 12, 3])).unwrap_err();
    assert!(matches!(err, Error::Divisibility { extent: 10, multiple: 4, .. }), "{err}");
    assert!(matches!(ac.forward(&Tensor::zeros(&[8, 8, 4])), Err(Error::Shape { .. })));
    let base = Network::<f32>::build(NetworkConfig::new(3, 8, BlockVariant::Base), &mut RngStream::new(0)).unwrap();
    assert_eq!(base.forward(&Tensor::zeros(&[10, 7, 3])).unwrap().shape(), &[10, 7, 3]);
}

#[test]
fn from_params_checks_names_and_shapes() {
    let cfg = NetworkConfig::new(3, 8, BlockVariant::Ac);
    let net = Network::<f32>::build(cfg.clone(), &mut RngStream::new(0)).unwrap();
    let params = net.params().clone();
    assert_eq!(Network::from_params(cfg.clone(), params.clone()).unwrap(), net);

    let wider = NetworkConfig::new(3, 12, BlockVariant::Ac);
    assert!(matches!(Network::from_params(wider, params.clone()), Err(Error::Incompatible(_))));
    let base = NetworkConfig::new(3, 8, BlockVariant::Base);
    assert!(matches!(Network::from_params(base, params.clone()), Err(Error::Incompatible(_))));

    let mut renamed = Params::new();
    for (i, (_, t)) in params.iter().enumerate() {
        renamed.insert(format!("p{i}"), t.clone());
    }
    assert!(matches!(Network::from_params(cfg, renamed), Err(Error::Incompatible(_))));
}

#[test]
fn zero_alpha_racabs_equal_skipped_racabs() {
    let cfg = NetworkConfig::new(3, 8, BlockVariant::Ac);
    let mut net = Network::<f64>::build(cfg, &mut RngStream::new(0)).unwrap();
    let mut rng = RngStream::new(9);
    randomize(&mut net, &mut rng);
    let x = random(&[8, 8, 3], &mut rng);
    let zero = net.forward_with(&x, &ForwardOptions { racab_alpha: Some(0.0), skip_racabs: false }).unwrap();
    let skipped = net.forward_with(&x, &ForwardOptions { racab_alpha: None, skip_racabs: true }).unwrap();
    assert_eq!(zero, skipped);
    assert_ne!(net.forward(&x).unwrap(), skipped);
}

/// Zero-padded 3×3 stride-1 convolution, one output at a time.
fn naive_conv3(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let [h, w, ci] = x.shape()[..] else { panic!() };
    let co = k.shape()[3];
    Tensor::from_fn(&[h, w, co], |i| {
        let (y, xx, o) = (i / (w * co), i / co % w, i % co);
        let mut acc = 0.0;
        for dy in 0..3 {
            for dx in 0..3 {
                let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                for c in 0..ci {
                    acc += x.data()[(sy as usize * w + sx as usize) * ci + c] * k.data()[((dy * 3 + dx) * ci + c) * co + o];
                }
            }
        }
        acc
    })
}

#[test]
fn residual_block_examples() {
    let mut rng = RngStream::new(11);
    let tape = Tape::new();
    let x = tape.constant(random(&[5, 6, 4], &mut rng));
    let c1 = tape.constant(random(&[3, 3, 4, 4], &mut rng));
    let c2 = tape.constant(random(&[3, 3, 4, 4], &mut rng));
    let zero = tape.constant(Tensor::zeros(&[3, 3, 4, 4]));
    assert_eq!(*residual_block(x, &c1, &c2, 0.0).unwrap().value(), *x.value());
    assert_eq!(*residual_block(x, &zero, &zero, 0.1).unwrap().value(), *x.value());

    let delta = |alpha: f64| {
        let y = residual_block(x, &c1, &c2, alpha).unwrap().value();
        Tensor::from_fn(y.shape(), |i| y.data()[i] - x.value().data()[i])
    };
    let (d1, d3) = (delta(0.1), delta(0.3));
    for (a, b) in d1.data().iter().zip(d3.data()) {
        assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }

    // Direct evaluation of x + α·ReLU(conv(ReLU(conv(x)))).
    let inner = naive_conv3(&x.value(), &c1.value()).map(|v| v.max(0.0));
    let outer = naive_conv3(&inner, &c2.value()).map(|v| v.max(0.0));
    let want = Tensor::from_fn(outer.shape(), |i| x.value().data()[i] + 0.1 * outer.data()[i]);
    assert!(residual_block(x, &c1, &c2, 0.1).unwrap().value().max_abs_diff(&want) < 1e-12);

    let bad = tape.constant(random(&[3, 3, 3, 4], &mut rng));
    assert!(residual_block(x, &bad, &c2, 0.1).is_err());
}

#[test]
fn racab_examples() {
    let cfg = AttentionConfig::new(AttentionVariant::Ac, 8);
    let mut rng = RngStream::new(12);
    let tape = Tape::new();
    let x = tape.constant(random(&[16, 16, 8], &mut rng));
    let zero = tape.constant(Tensor::zeros(&[3, 3, 8, 8]));
    let mut p = AttentionParams::<f64>::init(&cfg, &mut rng).unwrap();
    p.wq = Tensor::zeros(p.wq.shape());
    p.wk = Tensor::zeros(p.wk.shape());
    p.wv = Tensor::zeros(p.wv.shape());
    let attn = p.on_tape(&tape, false);
    let (y, _) = racab(x, &zero, &zero, &attn, &cfg, 0.1).unwrap();
    assert_eq!(*y.value(), *x.value());

    let attn = AttentionParams::<f64>::init(&cfg, &mut rng).unwrap();
    let c1 = tape.constant(random(&[3, 3, 8, 8], &mut rng));
    let c2 = tape.constant(random(&[3, 3, 8, 8], &mut rng));
    let (y, att) = racab(x, &c1, &c2, &attn.on_tape(&tape, false), &cfg, 0.1).unwrap();
    assert_eq!(y.shape(), vec![16, 16, 8]);
    assert_eq!(att.grid, (4, 4));
    let odd = tape.constant(random(&[10, 10, 8], &mut rng));
    assert!(matches!(
        racab(odd, &c1, &c2, &attn.on_tape(&tape, false), &cfg, 0.1),
        Err(Error::Divisibility { .. })
    ));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = NetworkConfig::new(3, 8, BlockVariant::Ac);
    let mut net = Network::<f64>::build(cfg, &mut RngStream::new(0)).unwrap();
    let mut rng = RngStream::new(13);
    let x = random(&[8, 8, 3], &mut rng);
    let target = random(&[8, 8, 3], &mut rng);

    // At init only the refine conv sits on a live path.
    let (_, grads) = sample_gradients(&net, &x, &target).unwrap();
    for ((name, _), g) in net.params().iter().zip(&grads) {
        let live = g.data().iter().any(|&v| v != 0.0);
        assert_eq!(live, name.ends_with("refine"), "{name}");
    }

    randomize(&mut net, &mut rng);
    let (_, grads) = sample_gradients(&net, &x, &target).unwrap();
    for ((name, _), g) in net.params().iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn traced_forward_reports_both_racabs() {
    let cfg = NetworkConfig::new(3, 8, BlockVariant::Ac);
    let net = Network::<f32>::build(cfg, &mut RngStream::new(0)).unwrap();
    let x = Tensor::<f32>::full(&[16, 16, 3], 0.5);
    let (y, records) = net.forward_traced(&x, (0.3, 0.6)).unwrap();
    assert_eq!(y, x);
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].grid, (4, 4));
    assert_eq!(records[0].query_index, 4 + 2);
    let base = Network::<f32>::build(NetworkConfig::new(3, 8, BlockVariant::Base), &mut RngStream::new(0)).unwrap();
    assert!(base.forward_traced(&x, (0.3, 0.6)).unwrap().1.is_empty());
}
