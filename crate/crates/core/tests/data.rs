use acacr::data::{
    composite, load_pair, load_png, random_crop, save_pair, save_png, synth_clear, synth_mask, CloudSettings, Dataset,
    DatasetManifest, SamplePair, Split,
};
use acacr::tensor::io as tnsr;
use acacr::{Error, RngStream, Tensor};
use proptest::prelude::*;

fn compositing_error(pair: &SamplePair, color: f32) -> f32 {
    let c = pair.clear.shape()[2];
    let mut worst = 0.0f32;
    for (i, &v) in pair.cloudy.data().iter().enumerate() {
        let m = pair.mask.data()[i / c];
        worst = worst.max((v - (m * color + (1.0 - m) * pair.clear.data()[i])).abs());
    }
    worst
}

fn manifest(count: usize, coverage: f64) -> DatasetManifest {
    DatasetManifest::with_count(7, 32, 3, count, CloudSettings { coverage, ..Default::default() })
}

#[test]
fn clear_scenes_are_deterministic_and_bounded() {
    let a = synth_clear(1, 32, 24, 4).unwrap();
    assert_eq!(a, synth_clear(1, 32, 24, 4).unwrap());
    assert_eq!(a.shape(), &[32, 24, 4]);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for seed in 0..10u64 {
        let x = synth_clear(2 * seed, 32, 32, 3).unwrap();
        let y = synth_clear(2 * seed + 1, 32, 32, 3).unwrap();
        let differ = x.data().iter().zip(y.data()).filter(|(p, q)| p != q).count();
        assert!(differ * 100 >= x.len(), "seeds {} and {}: {differ} differ", 2 * seed, 2 * seed + 1);
    }
    assert!(synth_clear(0, 7, 32, 3).is_err());
    assert!(synth_clear(0, 32, 32, 0).is_err());
}

#[test]
fn mask_coverage() {
    for seed in 0..10 {
        let empty = synth_mask(seed, 32, 32, 0.0, 0.5).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
        let full = synth_mask(seed, 32, 32, 1.0, 0.5).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
        for softness in [0.0, 0.5, 1.0] {
            let m = synth_mask(seed, 32, 32, 0.4, softness).unwrap();
            assert_eq!(m.shape(), &[32, 32, 1]);
            let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64;
            assert!((0.3..=0.5).contains(&mean), "seed {seed} softness {softness}: {mean}");
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert!(synth_mask(0, 32, 32, 1.5, 0.5).is_err());
    assert!(synth_mask(0, 32, 32, 0.5, -0.1).is_err());
}

#[test]
fn composite_examples() {
    let clear = Tensor::<f32>::full(&[2, 2, 3], 0.3);
    let color = [0.95f32; 3];
    let half = composite(&clear, &Tensor::full(&[2, 2, 1], 0.5), &color).unwrap();
    assert!(half.data().iter().all(|&v| (v - 0.625).abs() < 1e-6));
    assert_eq!(composite(&clear, &Tensor::zeros(&[2, 2, 1]), &color).unwrap(), clear);
    let cloud = composite(&clear, &Tensor::full(&[2, 2, 1], 1.0), &color).unwrap();
    assert!(cloud.data().iter().all(|&v| v == 0.95));
    assert!(composite(&clear, &Tensor::zeros(&[2, 3, 1]), &color).is_err());
    assert!(composite(&clear, &Tensor::zeros(&[2, 2, 1]), &[0.95; 2]).is_err());
}

#[test]
fn generated_samples_obey_compositing_law() {
    let m = manifest(12, 0.4);
    let data = Dataset::generate(m.clone()).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (8, 4));
    for pair in data.train.iter().chain(&data.test) {
        assert!(compositing_error(pair, 0.95) <= 1e-6);
        for t in [&pair.clear, &pair.cloudy, &pair.mask] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    assert_eq!(m.generate(10).unwrap(), data.test[2]);
    let train: Vec<_> = m.indices(Split::Train).collect();
    let test: Vec<_> = m.indices(Split::Test).collect();
    assert!(train.iter().all(|i| !test.contains(i)));
    assert_eq!(data.sample_ids(Split::Test)[0], "test/00008");
}

#[test]
fn manifest_validation() {
    assert!(manifest(12, 1.2).validate().is_err());
    let mut m = manifest(12, 0.4);
    m.version = 9;
    assert!(m.validate().is_err());
    let json = serde_json::to_value(manifest(3, 0.4)).unwrap();
    let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
    for k in ["version", "seed", "h", "w", "c_in", "train_count", "test_count", "cloud"] {
        assert!(keys.iter().any(|x| x == k), "{k}");
    }
    assert_eq!((json["train_count"].as_u64(), json["test_count"].as_u64()), (Some(2), Some(1)));
}

#[test]
fn crop_examples() {
    let pair = manifest(1, 0.4).generate(0).unwrap();
    let mut rng = RngStream::new(0);
    assert_eq!(random_crop(&pair, 32, 4, &mut rng).unwrap(), pair);
    let a = random_crop(&pair, 16, 4, &mut RngStream::new(3)).unwrap();
    let b = random_crop(&pair, 16, 4, &mut RngStream::new(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.clear.shape(), &[16, 16, 3]);
    assert_eq!(a.mask.shape(), &[16, 16, 1]);
    assert!(compositing_error(&a, 0.95) <= 1e-6);
    assert!(random_crop(&pair, 40, 4, &mut rng).is_err());
    assert!(matches!(random_crop(&pair, 18, 4, &mut rng), Err(Error::Divisibility { .. })));
}

#[test]
fn crop_window_is_shared() {
    let pair = manifest(1, 0.4).generate(0).unwrap();
    let crop = random_crop(&pair, 8, 4, &mut RngStream::new(11)).unwrap();
    let (w, c) = (32, 3);
    let found = (0..=24).flat_map(|y| (0..=24).map(move |x| (y, x))).find(|&(y0, x0)| {
        (0..8).all(|y| (0..8).all(|x| (0..c).all(|b| {
            pair.clear.data()[((y0 + y) * w + x0 + x) * c + b] == crop.clear.data()[(y * 8 + x) * c + b]
                && pair.mask.data()[(y0 + y) * w + x0 + x] == crop.mask.data()[y * 8 + x]
                && pair.cloudy.data()[((y0 + y) * w + x0 + x) * c + b] == crop.cloudy.data()[(y * 8 + x) * c + b]
        })))
    });
    assert!(found.is_some());
}

#[test]
fn pair_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = manifest(1, 0.4).generate(0).unwrap();
    save_pair(dir.path(), Split::Train, 0, &pair, true).unwrap();
    assert!(dir.path().join("train/00000.clear.tnsr").exists());
    assert!(dir.path().join("train/00000.cloudy.png").exists());
    assert_eq!(load_pair(dir.path(), Split::Train, 0, pair.seed).unwrap(), pair);

    let preview = load_png(&dir.path().join("train/00000.clear.png")).unwrap();
    assert!(preview.max_abs_diff(&pair.clear) <= 1.0 / 255.0);
    let mask = load_png(&dir.path().join("train/00000.mask.png")).unwrap();
    let gray = Tensor::from_fn(pair.mask.shape(), |i| mask.data()[3 * i]);
    assert!(gray.max_abs_diff(&pair.mask) <= 1.0 / 255.0);
    assert!(save_png(&dir.path().join("x.png"), &Tensor::zeros(&[8, 8, 4])).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(manifest(6, 0.4)).unwrap();
    data.save(dir.path(), false).unwrap();
    assert!(!dir.path().join("train/00000.clear.png").exists());
    assert_eq!(Dataset::load(dir.path()).unwrap(), data);
    std::fs::remove_file(dir.path().join("test/00005.mask.tnsr")).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn corrupted_magic_names_offset() {
    let t = Tensor::<f32>::full(&[2, 3], 0.5);
    let mut bytes = tnsr::encode(&t);
    assert_eq!(tnsr::decode(&bytes).unwrap(), tnsr::AnyTensor::F32(t));
    bytes[1] = b'X';
    match tnsr::decode(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected format error, got {other:?}"),
    }
    let err = tnsr::decode(&bytes).unwrap_err().to_string();
    assert!(err.contains("offset 0"), "{err}");
}

proptest! {
    #[test]
    fn regeneration_is_bitwise(seed in any::<u64>(), index in 0usize..20) {
        let m = DatasetManifest::with_count(seed, 16, 2, 20, CloudSettings::default());
        prop_assert_eq!(m.generate(index).unwrap(), m.generate(index).unwrap());
    }

    #[test]
    fn compositing_law_for_any_mask(seed in any::<u64>(), coverage in 0.0f64..=1.0, softness in 0.0f64..=1.0) {
        let clear = synth_clear(seed, 16, 16, 3).unwrap();
        let mask = synth_mask(seed ^ 1, 16, 16, coverage, softness).unwrap();
        let cloudy = composite(&clear, &mask, &[0.95; 3]).unwrap();
        let pair = SamplePair { clear, cloudy, mask, seed };
        prop_assert!(compositing_error(&pair, 0.95) <= 1e-6);
    }
}
