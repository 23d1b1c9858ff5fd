use std::fs;

use pss_core::data::{batch_indices, batches, load_cifar10, parse_cifar_file, synth_generate, BatchPlan, Dataset, Normalizer, SynthConfig, CIFAR_RECORD_BYTES};
use pss_core::{Error, LoadError, Tensor};
use proptest::prelude::*;

fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(fill));
    r
}

#[test]
fn cifar_record_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.bin");
    let mut bytes = record(0, |_| 0);
    // red plane 255, green plane ramp, blue plane 0
    bytes.extend(record(7, |i| if i < 1024 { 255 } else if i < 2048 { (i % 256) as u8 } else { 0 }));
    fs::write(&path, &bytes).unwrap();
    let (pixels, labels) = parse_cifar_file(&path).unwrap();
    assert_eq!(labels, vec![0, 7]);
    assert_eq!(pixels.len(), 2 * 3072);
    assert!(pixels[..3072].iter().all(|&p| p == 0.0));
    let second = &pixels[3072..];
    assert!(second[..1024].iter().all(|&p| p == 1.0));
    assert_eq!(second[1024 + 3], 3.0 / 255.0);
    assert!(second[2048..].iter().all(|&p| p == 0.0));
    assert_eq!(CIFAR_RECORD_BYTES, 3073);
}

#[test]
fn cifar_record_count_follows_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("many.bin");
    fs::write(&path, vec![3u8; 3073 * 25]).unwrap();
    let (_, labels) = parse_cifar_file(&path).unwrap();
    assert_eq!(labels.len(), 25);
}

#[test]
fn cifar_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let e = parse_cifar_file(&missing).unwrap_err();
    assert!(matches!(e, LoadError::MissingFile(_)));
    assert!(e.to_string().contains("nope.bin"));

    let short = dir.path().join("short.bin");
    fs::write(&short, vec![0u8; 3073 + 5]).unwrap();
    let e = parse_cifar_file(&short).unwrap_err();
    assert!(matches!(e, LoadError::BadSize { .. }));
    assert!(e.to_string().contains("short.bin"));

    let label = dir.path().join("label.bin");
    let mut bytes = record(1, |_| 0);
    bytes.extend(record(10, |_| 0));
    fs::write(&label, bytes).unwrap();
    let e = parse_cifar_file(&label).unwrap_err();
    assert!(matches!(e, LoadError::BadLabel { record: 1, label: 10, .. }), "{e:?}");
    assert!(e.to_string().contains("label.bin"));
}

#[test]
fn cifar_directory_loader() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5 {
        fs::write(dir.path().join(format!("data_batch_{i}.bin")), record(i as u8, |j| (j % 256) as u8).repeat(2)).unwrap();
    }
    assert!(matches!(load_cifar10(dir.path()), Err(Error::Load(LoadError::MissingFile(_)))));
    fs::write(dir.path().join("test_batch.bin"), record(9, |_| 128).repeat(3)).unwrap();
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!(train.len(), 10);
    assert_eq!(test.len(), 3);
    assert_eq!(train.images.shape(), &[10, 3, 32, 32]);
    assert_eq!(train.num_classes, 10);
    assert_eq!(&train.labels[..4], &[1, 1, 2, 2]);
    assert!(test.labels.iter().all(|&l| l == 9));
}

fn small_synth(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        num_classes: 4,
        n: 40,
        image_size: 16,
        patch_size: 4,
        channels: 3,
        seed,
    })
    .unwrap()
}

#[test]
fn synth_properties() {
    let a = small_synth(3);
    let b = small_synth(3);
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    assert_ne!(small_synth(4).images, a.images);
    assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let cells = a.salient_cells.as_ref().unwrap();
    assert!(cells.iter().all(|c| (2..=4).contains(&c.len()) && c.iter().all(|&x| x < 16)));

    let big = synth_generate(&SynthConfig {
        num_classes: 4,
        n: 1000,
        image_size: 16,
        patch_size: 4,
        channels: 3,
        seed: 1,
    })
    .unwrap();
    for c in 0..4 {
        assert_eq!(big.labels.iter().filter(|&&l| l == c).count(), 250);
    }
    let bad = SynthConfig {
        patch_size: 5,
        ..SynthConfig {
            num_classes: 4,
            n: 10,
            image_size: 16,
            patch_size: 4,
            channels: 3,
            seed: 1,
        }
    };
    assert!(matches!(synth_generate(&bad), Err(Error::Config { .. })));
}

#[test]
fn pssd_round_trip_and_errors() {
    let ds = small_synth(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.pssd");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.num_classes, 4);

    let bytes = fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(Dataset::load(&path), Err(Error::Load(LoadError::BadMagic { .. }))));
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Dataset::load(&path), Err(Error::Load(LoadError::Truncated { .. }))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    fs::write(&path, &bad).unwrap();
    assert!(matches!(Dataset::load(&path), Err(Error::Load(LoadError::BadVersion { version: 2, .. }))));
}

#[test]
fn normalizer_standardizes_channels() {
    let ds = small_synth(2);
    let norm = Normalizer::from_dataset(&ds);
    let x: Tensor<f64> = norm.apply(&ds.images);
    let plane = 16 * 16;
    for c in 0..3 {
        let vals: Vec<f64> = (0..ds.len()).flat_map(|n| x.data()[(n * 3 + c) * plane..(n * 3 + c + 1) * plane].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "{mean}");
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn batch_size_equal_to_n_gives_one_batch() {
    let ds = small_synth(1);
    let plan = BatchPlan {
        batch_size: ds.len(),
        seed: 3,
        drop_last: true,
    };
    let all: Vec<_> = batches(&ds, &plan, 0).collect();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0].0.shape()[0], ds.len());
}

proptest! {
    #[test]
    fn batches_cover_each_record_once(n in 1usize..200, b in 1usize..64, seed in any::<u64>(), epoch in 0usize..5) {
        let plan = BatchPlan { batch_size: b, seed, drop_last: false };
        let idx = batch_indices(n, &plan, epoch);
        prop_assert_eq!(idx.len(), n.div_ceil(b));
        let mut flat: Vec<usize> = idx.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&idx, &batch_indices(n, &plan, epoch));
    }

    #[test]
    fn drop_last_gives_full_batches(n in 1usize..200, b in 1usize..64, seed in any::<u64>()) {
        let plan = BatchPlan { batch_size: b, seed, drop_last: true };
        let idx = batch_indices(n, &plan, 1);
        prop_assert_eq!(idx.len(), n / b);
        prop_assert!(idx.iter().all(|x| x.len() == b));
    }
}
