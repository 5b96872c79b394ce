//! Label-quality metrics.

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sample noisiness threshold for heat maps.
pub const NOISY_COSINE: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_RADIUS: f64 = 3.0;

/// Cosine of two equal-length vectors. Two zero vectors agree (1.0); a zero
/// against a non-zero vector scores 0.0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    Ok(match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0),
    })
}

pub fn tensor_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "cosine of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    cosine_similarity(a.data(), b.data())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("threshold {tau} outside (0, 1)")))
    }
}

/// Cosine of the two maps binarized at `tau`.
pub fn hard_similarity(a: &Tensor, b: &Tensor, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let bin = |t: &Tensor| -> Vec<f64> {
        t.data()
            .iter()
            .map(|&v| if v >= tau { 1.0 } else { 0.0 })
            .collect()
    };
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "hard similarity of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    cosine_similarity(&bin(a), &bin(b))
}

/// Centroids `(x, y)` of the 8-connected regions of `map` at or above `tau`.
pub fn region_centroids(map: &Tensor, tau: f64) -> Vec<(f64, f64)> {
    let shape = map.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = &map.data()[..h * w];
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start] < tau {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            sx += x as f64;
            sy += y as f64;
            n += 1.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && data[q] >= tau {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push((sx / n, sy / n));
    }
    out
}

/// Blanked object-bearing samples whose corrected map has an above-`tau`
/// region centered within `radius` pixels of the clean peak.
pub fn discovery_count(
    corrected: &[Tensor],
    clean: &[Tensor],
    blank_mask: &[bool],
    tau: f64,
    radius: f64,
) -> Result<usize> {
    check_tau(tau)?;
    if corrected.len() != clean.len() || blank_mask.len() != clean.len() {
        return Err(Error::Dimension("discovery inputs disagree in length".into()));
    }
    let mut found = 0;
    for ((c, t), &blanked) in corrected.iter().zip(clean).zip(blank_mask) {
        if !blanked || t.max() <= 0.0 {
            continue;
        }
        let w = t.shape()[t.rank() - 1];
        let peak = t.argmax();
        let (px, py) = ((peak % w) as f64, (peak / w) as f64);
        let hit = region_centroids(c, tau)
            .iter()
            .any(|&(x, y)| ((x - px).powi(2) + (y - py).powi(2)).sqrt() <= radius);
        if hit {
            found += 1;
        }
    }
    Ok(found)
}

/// Per-sample "label is wrong" flags: class mismatch, or heat-map cosine
/// below 0.5 against the clean map.
pub fn noisy_flags(labels: &Labels, clean: &Labels) -> Result<Vec<bool>> {
    match (labels, clean) {
        (Labels::Categorical(a), Labels::Categorical(b)) if a.len() == b.len() => {
            Ok(a.iter().zip(b).map(|(x, y)| x != y).collect())
        }
        (Labels::HeatMap(a), Labels::HeatMap(b)) if a.len() == b.len() => a
            .iter()
            .zip(b)
            .map(|(x, y)| Ok(tensor_cosine(x, y)? < NOISY_COSINE))
            .collect(),
        (Labels::Categorical(_), Labels::Categorical(_))
        | (Labels::HeatMap(_), Labels::HeatMap(_)) => Err(Error::Dimension(format!(
            "{} labels against {} clean labels",
            labels.len(),
            clean.len()
        ))),
        _ => Err(Error::KindMismatch("labels and clean labels differ in kind".into())),
    }
}

/// Fraction of noisy labels in [0, 1].
pub fn noise_level(labels: &Labels, clean: &Labels) -> Result<f64> {
    let flags = noisy_flags(labels, clean)?;
    if flags.is_empty() {
        return Ok(0.0);
    }
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// `100 − 100 · noise_level`.
pub fn clean_percentage(labels: &Labels, clean: &Labels) -> Result<f64> {
    Ok(100.0 - 100.0 * noise_level(labels, clean)?)
}

pub fn cosines(labels: &[Tensor], clean: &[Tensor]) -> Result<Vec<f64>> {
    if labels.len() != clean.len() {
        return Err(Error::Dimension("cosine inputs disagree in length".into()));
    }
    labels.iter().zip(clean).map(|(a, b)| tensor_cosine(a, b)).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside are clamped into the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if bins == 0 || hi <= lo {
        return Err(Error::Argument(format!(
            "histogram needs bins > 0 and lo < hi, got {bins} over [{lo}, {hi}]"
        )));
    }
    let mut counts = vec![0; bins];
    for &v in values {
        let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
        let i = if pos.is_nan() { 0 } else { (pos.max(0.0) as usize).min(bins - 1) };
        counts[i] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(vals: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn cosine_conventions() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hard_similarity_binarizes() {
        let a = map(&[0.9, 0.6, 0.1]);
        let b = map(&[0.7, 0.8, 0.4]);
        assert_eq!(hard_similarity(&a, &b, 0.5).unwrap(), 1.0);
        assert_eq!(hard_similarity(&map(&[0.1]), &map(&[0.2]), 0.5).unwrap(), 1.0);
        assert!(hard_similarity(&a, &b, 1.0).is_err());
    }

    #[test]
    fn regions_are_eight_connected() {
        // diagonal pixels join, a far pixel is separate
        let mut t = Tensor::zeros(&[1, 5, 5]);
        t.data_mut()[0] = 1.0;
        t.data_mut()[6] = 1.0;
        t.data_mut()[24] = 1.0;
        let c = region_centroids(&t, 0.5);
        assert_eq!(c, vec![(0.5, 0.5), (4.0, 4.0)]);
    }

    #[test]
    fn discovery_counts_only_blanked_hits() {
        let mut clean = Tensor::zeros(&[1, 8, 8]);
        clean.data_mut()[3 * 8 + 3] = 1.0;
        let mut near = Tensor::zeros(&[1, 8, 8]);
        near.data_mut()[4 * 8 + 5] = 0.8;
        let far = {
            let mut t = Tensor::zeros(&[1, 8, 8]);
            t.data_mut()[63] = 0.9;
            t
        };
        let corrected = vec![near.clone(), far, near];
        let cleans = vec![clean.clone(), clean.clone(), clean];
        assert_eq!(
            discovery_count(&corrected, &cleans, &[true, true, false], 0.5, 3.0).unwrap(),
            1
        );
    }

    #[test]
    fn noise_level_categorical() {
        let a = Labels::Categorical(vec![1, 2, 3, 4]);
        let b = Labels::Categorical(vec![1, 0, 3, 0]);
        assert_eq!(noise_level(&a, &b).unwrap(), 0.5);
        assert_eq!(clean_percentage(&a, &a).unwrap(), 100.0);
        assert!(noise_level(&a, &Labels::HeatMap(vec![])).is_err());
    }

    #[test]
    fn histogram_conserves_count() {
        let v = [-0.5, 0.0, 0.2, 0.5, 0.99, 1.0, 3.0];
        let h = histogram(&v, 4, 0.0, 1.0).unwrap();
        assert_eq!(h.iter().sum::<usize>(), v.len());
        assert_eq!(h, vec![3, 0, 1, 3]);
    }
}
