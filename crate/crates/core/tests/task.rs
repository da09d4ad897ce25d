use proptest::prelude::*;
use tcp_core::config::RunConfig;
use tcp_core::error::Error;
use tcp_core::eval::{evaluate_accuracy, zero_shot_accuracy};
use tcp_core::rng::SplitMix64;
use tcp_core::task::{
    gap_rotation, generate_task_from_embeddings, load_dataset, sample_batch, save_dataset, BatchSampler,
    FewShotDataset, Split, TaskConfig, DATASET_VERSION,
};
use tcp_core::tensor::Tensor;
use tcp_core::train::Experiment;

fn unit_rows(seed: u64, n: usize, d: usize) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let mut data = rng.normal_vec(n * d, 1.0);
    for row in data.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn small_config() -> TaskConfig {
    TaskConfig {
        num_classes: 6,
        shots_per_class: 3,
        test_per_class: 4,
        ..TaskConfig::default()
    }
}

#[test]
fn noiseless_samples_equal_prototypes() {
    let cfg = TaskConfig {
        noise_sigma: 0.0,
        ..small_config()
    };
    let task = generate_task_from_embeddings(&cfg, &unit_rows(1, 6, 5)).unwrap();
    for ds in [&task.train_base, &task.test_base, &task.test_new] {
        for i in 0..ds.len() {
            let class = ds.classes[ds.labels()[i]];
            assert_eq!(ds.feature(i), task.prototypes.row(class));
        }
    }
}

#[test]
fn identity_gap_without_noise_is_solved_zero_shot() {
    let cfg = TaskConfig {
        noise_sigma: 0.0,
        gap_strength: 0.0,
        ..small_config()
    };
    let w = unit_rows(2, 6, 5);
    let task = generate_task_from_embeddings(&cfg, &w).unwrap();
    assert!(task.rotation.max_abs_diff(&Tensor::new(vec![5, 5], identity(5)).unwrap()) < 1e-15);
    let base = evaluate_accuracy(&task.test_base, &w.select_rows(&task.base_classes).unwrap()).unwrap();
    let new = evaluate_accuracy(&task.test_new, &w.select_rows(&task.new_classes).unwrap()).unwrap();
    assert_eq!((base, new), (1.0, 1.0));
}

fn identity(d: usize) -> Vec<f64> {
    (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect()
}

#[test]
fn splits_are_disjoint_and_cover_classes() {
    let cfg = small_config();
    let task = generate_task_from_embeddings(&cfg, &unit_rows(3, 6, 5)).unwrap();
    let mut all: Vec<usize> = task.base_classes.iter().chain(&task.new_classes).copied().collect();
    all.sort();
    assert_eq!(all, (0..6).collect::<Vec<_>>());
    assert_eq!(task.train_base.label_histogram(), vec![3; task.base_classes.len()]);
    assert_eq!(task.test_new.label_histogram(), vec![4; task.new_classes.len()]);
    assert_eq!(task.train_base.classes, task.base_classes);
    assert_eq!(task.test_new.classes, task.new_classes);
}

#[test]
fn generation_is_deterministic() {
    let cfg = small_config();
    let w = unit_rows(4, 6, 5);
    let a = generate_task_from_embeddings(&cfg, &w).unwrap();
    let b = generate_task_from_embeddings(&cfg, &w).unwrap();
    assert_eq!(a.train_base.to_bytes(), b.train_base.to_bytes());
    assert_eq!(a.test_new.to_bytes(), b.test_new.to_bytes());
}

#[test]
fn negative_sigma_is_rejected() {
    let cfg = TaskConfig {
        noise_sigma: -0.1,
        ..small_config()
    };
    assert!(generate_task_from_embeddings(&cfg, &unit_rows(5, 6, 5)).is_err());
}

#[test]
fn rotation_is_orthonormal() {
    for d in [1, 2, 7, 32] {
        let r = gap_rotation(d, 0.7, d as u64);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| r.data()[k * d + i] * r.data()[k * d + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batches_cover_each_epoch() {
    let cfg = small_config();
    let task = generate_task_from_embeddings(&cfg, &unit_rows(6, 6, 5)).unwrap();
    let ds = &task.train_base;
    let (x, y) = sample_batch(ds, ds.len(), 7, 0).unwrap();
    assert_eq!(x.shape(), &[ds.len(), 5]);
    let mut sorted = y.clone();
    sorted.sort();
    let mut want = ds.labels().to_vec();
    want.sort();
    assert_eq!(sorted, want);

    let sampler = BatchSampler::new(ds.len(), 4, 7).unwrap();
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (0..sampler.steps_per_epoch())
            .flat_map(|s| sampler.batch(epoch * sampler.steps_per_epoch() + s))
            .collect();
        let mut hist = vec![0; ds.classes.len()];
        for &i in &seen {
            hist[ds.labels()[i]] += 1;
        }
        assert_eq!(hist, ds.label_histogram());
        seen.sort();
        assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }
    let again = BatchSampler::new(ds.len(), 4, 7).unwrap();
    assert_eq!(sampler.batch(5), again.batch(5));
    assert!(BatchSampler::new(0, 4, 7).is_err());
    assert!(BatchSampler::new(4, 0, 7).is_err());
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let task = generate_task_from_embeddings(&small_config(), &unit_rows(8, 6, 5)).unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    save_dataset(&task.test_base, &p1).unwrap();
    let loaded = load_dataset(&p1).unwrap();
    assert_eq!(loaded, task.test_base);
    save_dataset(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let empty = FewShotDataset::new(Split::TestNew, vec![], 3, vec![], vec![]).unwrap();
    assert_eq!(FewShotDataset::from_bytes(&empty.to_bytes()).unwrap(), empty);
    assert!(matches!(load_dataset(dir.path().join("missing.bin")), Err(Error::Io { .. })));
}

#[test]
fn dataset_load_errors_are_distinct() {
    let task = generate_task_from_embeddings(&small_config(), &unit_rows(9, 6, 5)).unwrap();
    let bytes = task.train_base.to_bytes();

    let mut v = bytes.clone();
    v[8..12].copy_from_slice(&(DATASET_VERSION + 1).to_le_bytes());
    assert!(matches!(FewShotDataset::from_bytes(&v), Err(Error::Version { .. })));

    let mut v = bytes.clone();
    let meta_len = u64::from_le_bytes(v[12..20].try_into().unwrap());
    v[12..20].copy_from_slice(&(meta_len + 1_000_000).to_le_bytes());
    assert!(matches!(FewShotDataset::from_bytes(&v), Err(Error::Truncated(_))));

    assert!(matches!(FewShotDataset::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));

    let mut v = bytes.clone();
    let last = v.len() - 8;
    v[last..].copy_from_slice(&3.0f64.to_le_bytes());
    assert!(matches!(FewShotDataset::from_bytes(&v), Err(Error::NonUnit { .. })));

    let mut v = bytes.clone();
    v[0] = b'X';
    assert!(matches!(FewShotDataset::from_bytes(&v), Err(Error::Format(_))));
}

#[test]
fn zero_shot_is_mid_range_on_default_task() {
    let mut total = 0.0;
    for seed in 1..=5 {
        let exp = Experiment::prepare(&RunConfig::default().for_seed(seed)).unwrap();
        total += zero_shot_accuracy(&exp).unwrap().0;
    }
    let mean = total / 5.0;
    let chance = 1.0 / RunConfig::default().task.num_classes as f64;
    assert!(mean > chance && mean < 1.0, "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_bytes_round_trip(seed in any::<u64>(), n in 2usize..6, d in 1usize..6, shots in 1usize..4) {
        let cfg = TaskConfig {
            num_classes: n,
            shots_per_class: shots,
            test_per_class: 1,
            task_seed: seed,
            ..TaskConfig::default()
        };
        let task = generate_task_from_embeddings(&cfg, &unit_rows(seed, n, d)).unwrap();
        for ds in [&task.train_base, &task.test_base, &task.test_new] {
            let back = FewShotDataset::from_bytes(&ds.to_bytes()).unwrap();
            prop_assert_eq!(&back, ds);
            for i in 0..back.len() {
                let norm = back.feature(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }
}
