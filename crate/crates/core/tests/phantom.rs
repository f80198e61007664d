mod common;

use common::{dataset, read_tree};
use dosepet::metrics::nmse;
use dosepet::phantom::{
    build_dataset, drf_class, drf_of_class, generate_activity, mix_seed, simulate_pair,
    thin_counts, DatasetManifest, DatasetSpec, FileKind, Split, DEFAULT_TOTAL_COUNTS, DRFS,
};
use proptest::prelude::*;
use tempfile::TempDir;

#[test]
fn thinning_is_unbiased_before_clamping() {
    let values = [0.02, 0.1, 0.35, 0.7, 1.0];
    let n = 4000;
    for drf in DRFS {
        let mut sums = [0.0f64; 5];
        for seed in 0..n {
            let lpet = thin_counts(&values, drf, DEFAULT_TOTAL_COUNTS, seed).unwrap();
            for (s, v) in sums.iter_mut().zip(lpet) {
                *s += v;
            }
        }
        for (v, s) in values.iter().zip(sums) {
            let mean = s / n as f64;
            let sigma = (v * drf as f64 / DEFAULT_TOTAL_COUNTS).sqrt();
            let bound = 4.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean - v).abs() < bound,
                "drf {drf}, v {v}: mean {mean}, bound {bound}"
            );
        }
    }
}

#[test]
fn noise_grows_with_drf() {
    let seeds = 120;
    let mut mean_nmse = [0.0f64; 3];
    for seed in 0..seeds {
        let act = generate_activity(seed, 32).unwrap();
        for (k, drf) in DRFS.into_iter().enumerate() {
            let s = simulate_pair(&act, drf, DEFAULT_TOTAL_COUNTS, mix_seed(seed, 1000 + drf as u64)).unwrap();
            mean_nmse[k] += nmse(&s.lpet, &s.spet).unwrap() / seeds as f64;
        }
    }
    assert!(
        mean_nmse[0] < mean_nmse[1] && mean_nmse[1] < mean_nmse[2],
        "{mean_nmse:?}"
    );
}

#[test]
fn large_count_budget_leaves_lpet_close_to_spet() {
    let act = generate_activity(4, 32).unwrap();
    for drf in DRFS {
        let s = simulate_pair(&act, drf, 1e9, 11).unwrap();
        let worst = s
            .lpet
            .iter()
            .zip(&s.spet)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 0.01, "drf {drf}: {worst}");
    }
}

#[test]
fn generator_rejects_sizes_off_the_grid() {
    assert!(generate_activity(1, 20).is_err());
    assert!(generate_activity(1, 0).is_err());
    assert!(generate_activity(1, 48).is_ok());
}

#[test]
fn dataset_layout_matches_contract() {
    let dir = TempDir::new().unwrap();
    let spec = DatasetSpec {
        seed: 3,
        train_subjects: 2,
        test_subjects: 1,
        slices_per_subject: 4,
        size: 32,
        ..DatasetSpec::default()
    };
    let manifest = build_dataset(&spec, dir.path()).unwrap();
    assert_eq!(manifest.subjects.len(), 3);
    let count = |k: FileKind| manifest.files.iter().filter(|f| f.kind == k).count();
    assert_eq!(count(FileKind::Lpet), 36);
    assert_eq!(count(FileKind::Spet), 12);
    for f in &manifest.files {
        let len = std::fs::metadata(dir.path().join(&f.path)).unwrap().len();
        assert_eq!(len as usize, f.shape.iter().product::<usize>() * 4, "{}", f.path);
    }
    let split = |s: Split| -> Vec<u32> {
        manifest.subjects.iter().filter(|r| r.split == s).map(|r| r.id).collect()
    };
    let (train, test) = (split(Split::Train), split(Split::Test));
    assert!(train.iter().all(|id| !test.contains(id)));
    assert_eq!(DatasetManifest::read(dir.path()).unwrap(), manifest);
    manifest.validate(dir.path()).unwrap();
}

#[test]
fn dataset_is_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let spec = DatasetSpec {
        train_subjects: 1,
        test_subjects: 1,
        slices_per_subject: 2,
        size: 16,
        ..DatasetSpec::default()
    };
    build_dataset(&spec, a.path()).unwrap();
    build_dataset(&spec, b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));

    let c = TempDir::new().unwrap();
    build_dataset(&DatasetSpec { seed: 1, ..spec }, c.path()).unwrap();
    assert_ne!(read_tree(a.path()), read_tree(c.path()));
}

#[test]
fn zero_subjects_rejected() {
    let dir = TempDir::new().unwrap();
    let spec = DatasetSpec {
        train_subjects: 0,
        ..DatasetSpec::default()
    };
    assert!(build_dataset(&spec, dir.path()).is_err());
}

#[test]
fn loaded_samples_share_spet_across_drfs() {
    let dir = TempDir::new().unwrap();
    let data = dataset(
        dir.path(),
        &DatasetSpec {
            train_subjects: 1,
            test_subjects: 1,
            slices_per_subject: 2,
            size: 16,
            ..DatasetSpec::default()
        },
    );
    assert_eq!(data.train.len(), 6);
    assert_eq!(data.test.len(), 6);
    for group in data.train.chunks(3) {
        assert!(group.iter().all(|s| s.spet == group[0].spet && s.slice_index == group[0].slice_index));
        let drfs: Vec<u32> = group.iter().map(|s| s.drf).collect();
        assert_eq!(drfs, DRFS.to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_stay_in_unit_range(seed in any::<u64>(), k in 0usize..3, counts in 10.0f64..1e6) {
        let act = generate_activity(seed, 16).unwrap();
        let s = simulate_pair(&act, DRFS[k], counts, seed ^ 0x5a5a).unwrap();
        prop_assert_eq!(s.lpet.len(), s.spet.len());
        prop_assert!(s.lpet.iter().chain(&s.spet).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.spet.iter().any(|&v| v == 1.0));
        prop_assert_eq!(s.drf_class, k);
        prop_assert_eq!(drf_of_class(drf_class(s.drf).unwrap()).unwrap(), s.drf);
    }

    #[test]
    fn activity_is_nonnegative_and_seeded(seed in any::<u64>()) {
        let a = generate_activity(seed, 16).unwrap();
        prop_assert!(a.pixels().iter().all(|&v| v >= 0.0));
        prop_assert!(a.max() > 0.0);
        prop_assert_eq!(generate_activity(seed, 16).unwrap(), a);
    }
}
