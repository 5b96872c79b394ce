//! Synthetic template/science image pairs with point-source transients.
//!
//! Samples are grouped into objects: every cutout of an object shows the
//! same galaxy field, translated by a small integer offset. Each cutout
//! independently contains one Gaussian transient in the science image with
//! probability `p_obj`. The clean target is the transient profile normalized
//! to peak 1, or an all-zero map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, Labels, NoisyDataset};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub size: usize,
    pub galaxies_min: usize,
    pub galaxies_max: usize,
    /// Range of each galaxy axis sigma, pixels.
    pub galaxy_sigma: (f64, f64),
    pub galaxy_amplitude: (f64, f64),
    pub transient_sigma: f64,
    pub transient_amplitude: (f64, f64),
    pub p_obj: f64,
    /// Pixel noise sigma as a fraction of the largest galaxy amplitude.
    pub noise_sigma: f64,
    pub cutouts_per_object: usize,
    /// Largest per-cutout translation of the galaxy field, pixels.
    pub max_offset: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 32,
            galaxies_min: 3,
            galaxies_max: 8,
            galaxy_sigma: (1.0, 4.0),
            galaxy_amplitude: (0.3, 1.0),
            transient_sigma: 1.2,
            transient_amplitude: (0.4, 1.0),
            p_obj: 0.8,
            noise_sigma: 0.02,
            cutouts_per_object: 4,
            max_offset: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive_range = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo;
        let ok = self.size >= 8
            && self.galaxies_min <= self.galaxies_max
            && positive_range(self.galaxy_sigma)
            && positive_range(self.galaxy_amplitude)
            && positive_range(self.transient_amplitude)
            && self.transient_sigma > 0.0
            && (0.0..=1.0).contains(&self.p_obj)
            && self.noise_sigma >= 0.0
            && self.cutouts_per_object >= 1
            && self.max_offset >= 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("invalid synthetic spec {self:?}")))
        }
    }

    fn pixel_noise(&self) -> f64 {
        self.noise_sigma * self.galaxy_amplitude.1
    }
}

#[derive(Clone, Debug)]
struct Galaxy {
    cx: f64,
    cy: f64,
    sigma_major: f64,
    sigma_minor: f64,
    angle: f64,
    amplitude: f64,
}

impl Galaxy {
    fn value(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.amplitude
            * (-0.5 * (u * u / (self.sigma_major * self.sigma_major)
                + v * v / (self.sigma_minor * self.sigma_minor)))
                .exp()
    }
}

fn galaxy_field(spec: &SynthSpec, seed: u64, object: u64) -> Vec<Galaxy> {
    let mut rng = rng::rng_for(seed, &[stream::SYNTH, 0, object]);
    let count = rng.random_range(spec.galaxies_min..=spec.galaxies_max);
    let margin = 4.0;
    let side = spec.size as f64;
    (0..count)
        .map(|_| {
            let a = rng.random_range(spec.galaxy_sigma.0..=spec.galaxy_sigma.1);
            let b = rng.random_range(spec.galaxy_sigma.0..=spec.galaxy_sigma.1);
            Galaxy {
                cx: rng.random_range(-margin..side + margin),
                cy: rng.random_range(-margin..side + margin),
                sigma_major: a.max(b),
                sigma_minor: a.min(b),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                amplitude: rng.random_range(spec.galaxy_amplitude.0..=spec.galaxy_amplitude.1),
            }
        })
        .collect()
}

/// Unnormalized transient profile `amplitude * exp(-r² / 2σ²)` at pixel centers.
pub fn transient_profile(size: usize, cx: f64, cy: f64, sigma: f64, amplitude: f64) -> Tensor {
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
    })
}

/// One generated sample with its construction details.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub template: Tensor,
    pub science: Tensor,
    pub target: Tensor,
    /// Sub-pixel transient center `(x, y)`, if present.
    pub transient: Option<(f64, f64)>,
    pub transient_amplitude: f64,
    pub object_id: u64,
}

pub fn synthesize_sample(spec: &SynthSpec, seed: u64, index: u64) -> SynthSample {
    let object_id = index / spec.cutouts_per_object as u64;
    let field = galaxy_field(spec, seed, object_id);
    let mut rng = rng::rng_for(seed, &[stream::SYNTH, 1, index]);
    let size = spec.size;
    let ox = rng.random_range(-spec.max_offset..=spec.max_offset) as f64;
    let oy = rng.random_range(-spec.max_offset..=spec.max_offset) as f64;

    let clean = Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as f64 + oy, (i % size) as f64 + ox);
        field.iter().map(|g| g.value(x, y)).sum()
    });

    let present = rng.random_bool(spec.p_obj);
    let edge = 2.0;
    let hi = size as f64 - 1.0 - edge;
    let transient = present.then(|| (rng.random_range(edge..hi), rng.random_range(edge..hi)));
    let amplitude = rng.random_range(spec.transient_amplitude.0..=spec.transient_amplitude.1);

    let noise = Normal::new(0.0, spec.pixel_noise()).expect("non-negative sigma");
    let mut noisy = |img: &Tensor| -> Tensor {
        let mut out = img.clone();
        if spec.pixel_noise() > 0.0 {
            for v in out.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        out
    };
    let template = noisy(&clean);
    let (science, target) = match transient {
        Some((cx, cy)) => {
            let profile = transient_profile(size, cx, cy, spec.transient_sigma, amplitude);
            let mut sci = clean.clone();
            for (s, p) in sci.data_mut().iter_mut().zip(profile.data()) {
                *s += p;
            }
            let peak = profile.max();
            let mut target = profile;
            target.data_mut().iter_mut().for_each(|v| *v /= peak);
            (noisy(&sci), target)
        }
        None => (noisy(&clean), Tensor::zeros(&[1, size, size])),
    };
    SynthSample {
        template,
        science,
        target,
        transient,
        transient_amplitude: amplitude,
        object_id,
    }
}

/// Generates `n` samples; inputs are `[2, size, size]` (template, science).
pub fn synthesize_pairs(spec: &SynthSpec, n: usize, seed: u64) -> Result<NoisyDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut objects = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let s = synthesize_sample(spec, seed, i);
        let mut data = s.template.into_data();
        data.extend_from_slice(s.science.data());
        inputs.push(Tensor::new(vec![2, spec.size, spec.size], data)?);
        targets.push(s.target);
        objects.push(s.object_id);
    }
    NoisyDataset::new(
        inputs,
        Labels::HeatMap(targets),
        LabelSpace::HeatMap {
            height: spec.size,
            width: spec.size,
        },
        (0..n as u64).collect(),
        objects,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_objects_means_blank_targets() {
        let spec = SynthSpec {
            p_obj: 0.0,
            ..SynthSpec::default()
        };
        let ds = synthesize_pairs(&spec, 20, 1).unwrap();
        for m in ds.clean_labels().as_maps().unwrap() {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn difference_image_is_the_transient() {
        let spec = SynthSpec {
            p_obj: 1.0,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        for i in 0..10 {
            let s = synthesize_sample(&spec, 4, i);
            let (cx, cy) = s.transient.unwrap();
            let profile =
                transient_profile(spec.size, cx, cy, spec.transient_sigma, s.transient_amplitude);
            for ((sci, tpl), p) in s
                .science
                .data()
                .iter()
                .zip(s.template.data())
                .zip(profile.data())
            {
                assert!((sci - tpl - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn targets_are_peak_normalized() {
        let ds = synthesize_pairs(&SynthSpec::default(), 50, 2).unwrap();
        for m in ds.clean_labels().as_maps().unwrap() {
            let max = m.max();
            assert!(max == 0.0 || (0.99..=1.0).contains(&max), "max {max}");
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let a = synthesize_pairs(&SynthSpec::default(), 8, 3).unwrap();
        let b = synthesize_pairs(&SynthSpec::default(), 8, 3).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.object_ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }
}
