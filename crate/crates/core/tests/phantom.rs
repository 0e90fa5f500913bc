mod common;

use common::*;
use hvae_core::phantom::*;
use proptest::prelude::*;

#[test]
fn lesions_stay_in_white_matter_outside_ventricles() {
    let with_lesions = phantom_exact_check(2024, 10_000, 64).unwrap();
    assert!(with_lesions > 9000, "only {with_lesions} samples carry lesions");
}

#[test]
fn lesion_area_tracks_lesion_count() {
    let ranges = FactorRanges::default();
    let (mut a, mut c) = (Vec::new(), Vec::new());
    for i in 0..1000 {
        let f = generate_sample(5, i, 64, &ranges).unwrap().factors;
        a.push(f.lesion_area as f64);
        c.push(f.lesion_count as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mc) = (mean(&a), mean(&c));
    let cov: f64 = a.iter().zip(&c).map(|(x, y)| (x - ma) * (y - mc)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vc: f64 = c.iter().map(|y| (y - mc).powi(2)).sum();
    let r = cov / (va * vc).sqrt();
    assert!(r > 0.8, "Pearson r = {r}");
}

#[test]
fn dataset_generation_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    make_dataset(60, 17, 32, &a).unwrap();
    make_dataset(60, 17, 32, &b).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    pool.install(|| make_dataset(60, 17, 32, &c)).unwrap();
    let (da, db, dc) = (dir_bytes(&a), dir_bytes(&b), dir_bytes(&c));
    assert_eq!(da.len(), 121);
    assert!(da == db, "serial runs differ");
    assert!(da == dc, "parallel run differs from serial");

    let d = tmp.path().join("d");
    make_dataset(60, 18, 32, &d).unwrap();
    assert!(dir_bytes(&d) != da);
}

#[test]
fn stored_dataset_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let m = make_dataset(25, 3, 32, tmp.path()).unwrap();
    let ds = Dataset::open(tmp.path()).unwrap();
    assert_eq!(ds.resolution(), 32);
    let test = ds.test().unwrap();
    assert_eq!(test.indices, m.splits.test);
    for (k, &i) in test.indices.iter().enumerate() {
        let s = generate_sample(3, i, 32, &FactorRanges::default()).unwrap();
        assert_eq!(test.images.item(k), &s.image[..]);
        let mask: Vec<f32> = s.mask.iter().map(|&v| v as f32).collect();
        assert_eq!(test.masks.item(k), &mask[..]);
        assert_eq!(test.factors[k], s.factors);
    }
}

proptest! {
    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 5usize..3000, seed in any::<u64>()) {
        let s = split_indices(n, seed);
        prop_assert_eq!(s.val.len(), n / 5);
        prop_assert_eq!(s.test.len(), n / 5);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
