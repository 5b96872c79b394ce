use proptest::prelude::*;
use selfevo::data::synth::{synthesize_pairs, SynthSpec};
use selfevo::data::{LabelSpace, Labels, NoisyDataset};
use selfevo::metrics;
use selfevo::noise::{inject, inject_symmetric, NoiseSpec};
use selfevo::Tensor;

fn uniform_digits(n: usize, classes: usize) -> NoisyDataset {
    NoisyDataset::new(
        (0..n).map(|_| Tensor::zeros(&[1])).collect(),
        Labels::Categorical((0..n).map(|i| (i * 7 + i / 3) % classes).collect()),
        LabelSpace::Categorical { classes },
        (0..n as u64).collect(),
        (0..n as u64).collect(),
    )
    .unwrap()
}

#[test]
fn flip_count_is_binomial() {
    let ds = uniform_digits(51_000, 10);
    for eta in [0.5, 0.8] {
        let (_, mask) = inject_symmetric(&ds, &NoiseSpec::symmetric(eta, 11)).unwrap();
        let n = ds.len() as f64;
        let sd = (n * eta * (1.0 - eta)).sqrt();
        let dev = (mask.count() as f64 - n * eta).abs();
        assert!(dev <= 3.0 * sd, "eta {eta}: {} flips, {dev:.1} > 3σ {:.1}", mask.count(), 3.0 * sd);
    }
}

#[test]
fn wrong_classes_are_uniform() {
    // among flipped samples of one clean class, each of the 9 others is equally likely
    let ds = uniform_digits(30_000, 10);
    let (out, mask) = inject_symmetric(&ds, &NoiseSpec::symmetric(0.8, 3)).unwrap();
    let noisy = out.labels.as_categorical().unwrap();
    let clean = ds.labels.as_categorical().unwrap();
    let mut counts = [[0usize; 10]; 10];
    for i in 0..ds.len() {
        if mask.0[i] {
            counts[clean[i]][noisy[i]] += 1;
        }
    }
    for (c, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        let expect = total as f64 / 9.0;
        let chi2: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != c)
            .map(|(_, &k)| (k as f64 - expect).powi(2) / expect)
            .sum();
        assert_eq!(row[c], 0);
        // 8 degrees of freedom, p ≈ 1e-4
        assert!(chi2 < 31.8, "class {c}: chi2 {chi2:.2}");
    }
}

#[test]
fn same_seed_same_noise() {
    let ds = uniform_digits(500, 10);
    let a = inject(&ds, &NoiseSpec::symmetric(0.5, 9)).unwrap();
    let b = inject(&ds, &NoiseSpec::symmetric(0.5, 9)).unwrap();
    let c = inject(&ds, &NoiseSpec::symmetric(0.5, 10)).unwrap();
    assert_eq!(a.0.labels, b.0.labels);
    assert_eq!(a.1, b.1);
    assert_ne!(a.1, c.1);
}

#[test]
fn blanking_touches_only_object_bearing_targets() {
    let ds = synthesize_pairs(&SynthSpec::default(), 120, 4).unwrap();
    let (out, mask) = inject(&ds, &NoiseSpec::blanking(0.5, 1)).unwrap();
    let clean = ds.labels.as_maps().unwrap();
    let noisy = out.labels.as_maps().unwrap();
    for i in 0..ds.len() {
        if mask.0[i] {
            assert!(clean[i].max() > 0.0);
            assert_eq!(noisy[i].max(), 0.0);
        } else {
            assert_eq!(noisy[i], clean[i]);
        }
    }
    assert_eq!(out.inputs, ds.inputs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_invariants(n in 1usize..400, classes in 2usize..12, eta in 0.0f64..=1.0, seed: u64) {
        let ds = uniform_digits(n, classes);
        let (out, mask) = inject_symmetric(&ds, &NoiseSpec::symmetric(eta, seed)).unwrap();
        let noisy = out.labels.as_categorical().unwrap();
        let clean = out.clean_labels().as_categorical().unwrap();
        prop_assert_eq!(clean, ds.labels.as_categorical().unwrap());
        for i in 0..n {
            prop_assert!(noisy[i] < classes);
            prop_assert_eq!(mask.0[i], noisy[i] != clean[i]);
        }
        let level = metrics::noise_level(&out.labels, out.clean_labels()).unwrap();
        prop_assert_eq!(level, mask.count() as f64 / n as f64);
        let pct = metrics::clean_percentage(&out.labels, out.clean_labels()).unwrap();
        prop_assert!((pct + 100.0 * level - 100.0).abs() < 1e-9);
        if eta == 0.0 {
            prop_assert_eq!(mask.count(), 0);
        }
    }
}
