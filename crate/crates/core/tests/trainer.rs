use acacr::data::{CloudSettings, Dataset, DatasetManifest, Split};
use acacr::metrics::{evaluate_pair, SsimMode};
use acacr::network::{BlockVariant, NetworkConfig, Params};
use acacr::trainer::{
    adam_step, evaluate, initial_network, l1_loss, load_checkpoint, read_checkpoint_header, save_checkpoint,
    OptimState, TrainConfig, Trainer, CHECKPOINT_VERSION,
};
use acacr::{Error, RngStream, Tape, Tensor};

fn small_data(coverage: f64) -> Dataset {
    let cloud = CloudSettings { coverage, ..Default::default() };
    Dataset::generate(DatasetManifest::with_count(3, 16, 3, 6, cloud)).unwrap()
}

fn small_config() -> NetworkConfig {
    NetworkConfig::new(3, 8, BlockVariant::Ac)
}

fn train_config(steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 2,
        steps,
        seed: 5,
        crop: Some(8),
        ..Default::default()
    }
}

fn trainer(steps: u64, lr: f64) -> Trainer<f32> {
    Trainer::new(initial_network(small_config(), 1).unwrap(), train_config(steps, lr)).unwrap()
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.batch_size, c.beta1, c.beta2, c.eps), (7e-5, 12, 0.9, 0.999, 1e-8));
    assert_eq!(c.ssim_mode, SsimMode::Global);
    for bad in [
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { steps: 0, ..Default::default() },
        TrainConfig { eval_interval: 0, ..Default::default() },
        TrainConfig { crop: Some(0), ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.001, "momentum": 0.9}"#).is_err());
}

#[test]
fn l1_examples() {
    let tape = Tape::new();
    let mut rng = RngStream::new(0);
    let target = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
    let t = tape.constant(target.clone());
    assert_eq!(l1_loss(t, t).unwrap().value().data(), &[0.0]);
    let shifted = tape.constant(target.map(|v| v + 0.5));
    assert!((l1_loss(shifted, t).unwrap().value().data()[0] - 0.5).abs() < 1e-15);
    assert!(l1_loss(t, tape.constant(Tensor::zeros(&[4, 3]))).is_err());

    let pred = Tensor::<f64>::from_fn(&[3, 4], |_| rng.normal());
    let p = tape.param(pred.clone());
    let loss = l1_loss(p, t).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(p);
    let h = 1e-6;
    for i in 0..pred.len() {
        let want = (pred.data()[i] - target.data()[i]).signum() / 12.0;
        assert!((g.data()[i] - want).abs() < 1e-15);
        let eval = |d: f64| {
            let q = Tensor::from_fn(pred.shape(), |j| pred.data()[j] + if j == i { d } else { 0.0 });
            q.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0
        };
        assert!(((eval(h) - eval(-h)) / (2.0 * h) - want).abs() < 1e-6);
    }
    let tape = Tape::new();
    let t = tape.constant(target.clone());
    let tied = tape.param(target.clone());
    let grads = tape.backward(l1_loss(tied, t).unwrap()).unwrap();
    assert!(grads.wrt(tied).data().iter().all(|&v| v == 0.0));
}

fn scalar_params(value: f64) -> Params<f64> {
    let mut p = Params::new();
    p.insert("theta".into(), Tensor::from_f64(&[1], &[value]).unwrap());
    p
}

#[test]
fn adam_examples() {
    let mut p = scalar_params(0.7);
    let mut state = OptimState::new(&p, 0.01, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut state).unwrap();
        assert_eq!(p.get("theta").unwrap().data(), &[0.7]);
    }
    assert_eq!(state.t, 5);

    for g in [3.0, -0.02, 1e-3] {
        let mut p = scalar_params(0.7);
        let mut state = OptimState::new(&p, 0.01, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[g]).unwrap()], &mut state).unwrap();
        let moved = 0.7 - p.get("theta").unwrap().data()[0];
        let want = 0.01 * g / (g.abs() + 1e-8);
        assert!((moved - want).abs() < 1e-12, "g={g}: {moved} vs {want}");
    }

    // Reference recurrence written out by hand.
    let mut p = scalar_params(1.0);
    let mut state = OptimState::new(&p, 0.1, 0.9, 0.999, 1e-8);
    let (mut theta, mut m, mut v) = (1.0f64, 0.0, 0.0);
    let mut reached = None;
    for t in 1..=200 {
        let g = 2.0 * p.get("theta").unwrap().data()[0];
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[g]).unwrap()], &mut state).unwrap();
        let gr = 2.0 * theta;
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        theta -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((p.get("theta").unwrap().data()[0] - theta).abs() < 1e-12);
        if theta.abs() < 0.1 && reached.is_none() {
            reached = Some(t);
        }
    }
    assert!(reached.is_some());

    let mut p = scalar_params(1.0);
    let mut state = OptimState::new(&p, 0.1, 0.9, 0.999, 1e-8);
    assert!(matches!(
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], &mut state),
        Err(Error::NonFinite { .. })
    ));
    assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut state).is_err());
    assert!(adam_step(&mut p, &[], &mut state).is_err());
    assert_eq!(state.t, 0);
}

#[test]
fn zero_lr_leaves_parameters_bitwise() {
    let data = small_data(0.4);
    let mut tr = trainer(6, 0.0);
    let before = tr.network().clone();
    let log = tr.run(&data, |_, _, _| Ok(())).unwrap();
    assert_eq!(log.losses.len(), 6);
    assert_eq!(tr.step_count(), 6);
    assert_eq!(tr.network(), &before);
    assert_eq!(tr.optimizer().t, 6);
}

#[test]
fn run_logs_losses_and_evals() {
    let data = small_data(0.4);
    let mut tr = trainer(5, 1e-3);
    let mut seen = Vec::new();
    let log = tr
        .run(&data, |t, step, loss| {
            seen.push((step, loss, t.step_count()));
            Ok(())
        })
        .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert!(seen.iter().all(|(s, _, c)| s == c));
    assert_eq!(log.evals.len(), 1);
    assert_eq!(log.evals[0].0, 5);
    assert_eq!(log.evals[0].1.samples.len(), 2);
    let csv = log.loss_csv();
    assert!(csv.starts_with("step,loss\n1,"));
    assert_eq!(csv.lines().count(), 6);
    assert!(log.losses.iter().all(|(_, l)| l.is_finite() && *l > 0.0));
}

#[test]
fn training_is_deterministic() {
    let data = small_data(0.4);
    let run = || {
        let mut tr = trainer(4, 1e-3);
        let log = tr.run(&data, |_, _, _| Ok(())).unwrap();
        (tr.into_network(), log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn divergence_guard() {
    let data = small_data(0.4);
    let mut net = initial_network::<f32>(small_config(), 1).unwrap();
    for t in net.params_mut().tensors_mut() {
        *t = Tensor::from_fn(t.shape(), |j| if j == 0 { f32::NAN } else { t.data()[j] });
    }
    let mut tr = Trainer::new(net, train_config(3, 1e-3)).unwrap();
    assert!(matches!(tr.step(&data.train), Err(Error::Divergence { step: 1, .. })));
    assert!(tr.step(&[]).is_err());
}

#[test]
fn evaluate_examples() {
    let clean = small_data(0.0);
    let net = initial_network::<f32>(small_config(), 1).unwrap();
    let report = evaluate(&net, &clean.test, &clean.sample_ids(Split::Test), SsimMode::Global).unwrap();
    assert_eq!((report.mean.mae, report.mean.sam_deg), (0.0, 0.0));
    assert!((report.mean.ssim - 1.0).abs() < 1e-12);
    assert_eq!(report.to_csv().lines().count(), 1 + clean.test.len() + 1);

    let data = small_data(0.4);
    let mut net = initial_network::<f32>(small_config(), 1).unwrap();
    let mut rng = RngStream::new(4);
    for t in net.params_mut().tensors_mut() {
        *t = Tensor::from_fn(t.shape(), |_| 0.05 * rng.normal() as f32);
    }
    let ids = data.sample_ids(Split::Test);
    let report = evaluate(&net, &data.test, &ids, SsimMode::Windowed).unwrap();
    for ((pair, id), row) in data.test.iter().zip(&ids).zip(&report.samples) {
        let manual = evaluate_pair(id.as_str(), &net.forward(&pair.cloudy).unwrap(), &pair.clear, SsimMode::Windowed).unwrap();
        assert_eq!(&manual, row);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ackp");
    let data = small_data(0.4);
    let mut tr = trainer(3, 1e-3);
    tr.run(&data, |_, _, _| Ok(())).unwrap();
    save_checkpoint(&path, &tr).unwrap();

    let (header, back) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(header.version, CHECKPOINT_VERSION);
    assert_eq!(header.step, 3);
    assert_eq!(header.seed, 5);
    assert_eq!(back.network(), tr.network());
    assert_eq!(back.optimizer(), tr.optimizer());
    assert_eq!(back.config(), tr.config());
    assert_eq!(read_checkpoint_header(&path).unwrap(), header);
    header.ensure_compatible(&small_config()).unwrap();
    let other = NetworkConfig::new(3, 12, BlockVariant::Ac);
    assert!(matches!(header.ensure_compatible(&other), Err(Error::Incompatible(_))));

    let wide = load_checkpoint::<f64>(&path).unwrap().1;
    assert_eq!(wide.network().params().cast::<f32>(), *tr.network().params());
}

#[test]
fn resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ackp");
    let data = small_data(0.4);

    let mut straight = trainer(6, 1e-3);
    let full = straight.run(&data, |_, _, _| Ok(())).unwrap();

    let mut first = trainer(3, 1e-3);
    first.run(&data, |_, _, _| Ok(())).unwrap();
    save_checkpoint(&path, &first).unwrap();
    let (_, mut resumed) = load_checkpoint::<f32>(&path).unwrap();
    resumed.set_total_steps(6);
    let rest = resumed.run(&data, |_, _, _| Ok(())).unwrap();

    assert_eq!(resumed.network(), straight.network());
    assert_eq!(resumed.optimizer(), straight.optimizer());
    assert_eq!(&full.losses[3..], &rest.losses[..]);
}

#[test]
fn corrupted_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ackp");
    save_checkpoint(&path, &trainer(1, 1e-3)).unwrap();
    let good = std::fs::read(&path).unwrap();
    let write = |bytes: &[u8]| {
        std::fs::write(&path, bytes).unwrap();
        load_checkpoint::<f32>(&path).map(|_| ())
    };

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(write(&bad), Err(Error::Format { offset: 0, .. })));

    assert!(matches!(write(&good[..good.len() - 3]), Err(Error::Format { .. })));
    let mut extra = good.clone();
    extra.push(0);
    assert!(matches!(write(&extra), Err(Error::Format { .. })));

    let len = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
    let json = std::str::from_utf8(&good[8..8 + len]).unwrap();
    let bumped = json.replacen("\"version\":1", "\"version\":2", 1);
    assert_ne!(bumped, json);
    let mut v2 = good[..4].to_vec();
    v2.extend_from_slice(&(bumped.len() as u32).to_le_bytes());
    v2.extend_from_slice(bumped.as_bytes());
    v2.extend_from_slice(&good[8 + len..]);
    assert!(matches!(write(&v2), Err(Error::Incompatible(_))));

    let wider = json.replacen("\"channels\":8", "\"channels\":12", 1);
    let mut mism = good[..4].to_vec();
    mism.extend_from_slice(&(wider.len() as u32).to_le_bytes());
    mism.extend_from_slice(wider.as_bytes());
    mism.extend_from_slice(&good[8 + len..]);
    assert!(write(&mism).is_err());

    assert!(matches!(
        load_checkpoint::<f32>(&dir.path().join("missing.ackp")),
        Err(Error::Io { .. })
    ));
}
