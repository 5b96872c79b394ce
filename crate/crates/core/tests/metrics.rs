use proptest::prelude::*;
use selfevo::data::Labels;
use selfevo::metrics::{
    clean_percentage, cosine_similarity, discovery_count, hard_similarity, histogram, noise_level,
    region_centroids, tensor_cosine,
};
use selfevo::Tensor;

fn map(h: usize, w: usize, on: &[(usize, usize, f64)]) -> Tensor {
    let mut t = Tensor::zeros(&[1, h, w]);
    for &(y, x, v) in on {
        t.data_mut()[y * w + x] = v;
    }
    t
}

#[test]
fn cosine_conventions() {
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    assert_eq!(cosine_similarity(&[3.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    // 45 degrees
    let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn hard_similarity_binarizes_first() {
    let a = map(3, 3, &[(1, 1, 0.9), (0, 0, 0.4)]);
    let b = map(3, 3, &[(1, 1, 0.6), (2, 2, 0.7)]);
    // binary a = {(1,1)}, binary b = {(1,1),(2,2)} -> 1/sqrt(2)
    let h = hard_similarity(&a, &b, 0.5).unwrap();
    assert!((h - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(hard_similarity(&a, &b, 1.0).is_err());
    let s = tensor_cosine(&a, &b).unwrap();
    assert!(s > 0.0 && s < 1.0);
}

#[test]
fn regions_are_eight_connected() {
    // a diagonal run is one region, a separate pixel another
    let m = map(6, 6, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (5, 0, 0.8)]);
    let mut c = region_centroids(&m, 0.5);
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(c, vec![(0.0, 5.0), (1.0, 1.0)]);
    assert!(region_centroids(&map(4, 4, &[(1, 1, 0.3)]), 0.5).is_empty());
}

#[test]
fn discovery_needs_a_blanked_object_and_a_nearby_region() {
    let clean = vec![
        map(10, 10, &[(5, 5, 1.0)]),
        map(10, 10, &[(2, 2, 1.0)]),
        map(10, 10, &[(7, 7, 1.0)]),
        Tensor::zeros(&[1, 10, 10]),
    ];
    let corrected = vec![
        map(10, 10, &[(6, 7, 0.9)]),             // distance sqrt(5) -> found
        map(10, 10, &[(2, 6, 0.9)]),             // distance 4 -> missed
        map(10, 10, &[(7, 7, 0.9)]),             // not blanked -> ignored
        map(10, 10, &[(1, 1, 0.9)]),             // no object -> ignored
    ];
    let mask = [true, true, false, true];
    assert_eq!(discovery_count(&corrected, &clean, &mask, 0.5, 3.0).unwrap(), 1);
    assert_eq!(discovery_count(&corrected, &clean, &mask, 0.5, 4.0).unwrap(), 2);
}

#[test]
fn heat_map_noise_uses_the_cosine_threshold() {
    let clean = Labels::HeatMap(vec![map(2, 2, &[(0, 0, 1.0)]), Tensor::zeros(&[1, 2, 2])]);
    let labels = Labels::HeatMap(vec![
        map(2, 2, &[(0, 0, 1.0), (1, 1, 1.0)]), // cosine 0.707
        map(2, 2, &[(0, 1, 0.2)]),              // one-zero -> 0
    ]);
    assert_eq!(noise_level(&labels, &clean).unwrap(), 0.5);
    assert_eq!(clean_percentage(&labels, &clean).unwrap(), 50.0);
    assert!(noise_level(&Labels::Categorical(vec![0, 1]), &clean).is_err());
}

proptest! {
    #[test]
    fn histogram_conserves_counts(values in prop::collection::vec(-2.0f64..3.0, 0..200), bins in 1usize..20) {
        let h = histogram(&values, bins, 0.0, 1.0).unwrap();
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().sum::<usize>(), values.len());
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16)) {
        let ab = cosine_similarity(&a, &b).unwrap();
        let ba = cosine_similarity(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12 || a.iter().all(|&v| v == 0.0));
    }
}
