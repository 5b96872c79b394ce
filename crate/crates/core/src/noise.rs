//! Label-noise injection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, Labels, NoisyDataset};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Symmetric,
    Blanking,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(eta: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            eta,
            seed,
        }
    }

    pub fn blanking(eta: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Blanking,
            eta,
            seed,
        }
    }

    /// η = 1 is accepted: the fully noised gold corpus needs it.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Spec(format!("noise rate {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Which samples were corrupted. Evaluation bookkeeping only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipMask(pub Vec<bool>);

impl FlipMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }
}

/// Draws a class uniformly from the `classes - 1` classes other than `keep`.
pub fn other_class<R: Rng>(rng: &mut R, keep: usize, classes: usize) -> usize {
    let r = rng.random_range(0..classes - 1);
    if r >= keep {
        r + 1
    } else {
        r
    }
}

/// Each label survives with probability `1 - η`; otherwise it becomes a
/// uniformly drawn wrong class.
pub fn inject_symmetric(dataset: &NoisyDataset, spec: &NoiseSpec) -> Result<(NoisyDataset, FlipMask)> {
    spec.validate()?;
    let classes = match dataset.label_space {
        LabelSpace::Categorical { classes } => classes,
        LabelSpace::HeatMap { .. } => {
            return Err(Error::KindMismatch(
                "symmetric noise needs a categorical label space".into(),
            ))
        }
    };
    if classes < 2 {
        return Err(Error::Spec("symmetric noise needs at least 2 classes".into()));
    }
    let clean = dataset.clean_labels().as_categorical().expect("checked kind");
    let mut rng = rng::rng_for(spec.seed, &[stream::NOISE]);
    let mut mask = Vec::with_capacity(clean.len());
    let labels: Vec<usize> = clean
        .iter()
        .map(|&y| {
            let flip = rng.random_bool(spec.eta);
            mask.push(flip);
            if flip {
                other_class(&mut rng, y, classes)
            } else {
                y
            }
        })
        .collect();
    Ok((
        dataset.clone().with_labels(Labels::Categorical(labels))?,
        FlipMask(mask),
    ))
}

/// Blanks exactly `⌊η K⌋` of the `K` samples whose clean map holds an object.
pub fn inject_blanking(dataset: &NoisyDataset, spec: &NoiseSpec) -> Result<(NoisyDataset, FlipMask)> {
    spec.validate()?;
    if !matches!(dataset.label_space, LabelSpace::HeatMap { .. }) {
        return Err(Error::KindMismatch(
            "blanking noise needs a heat-map label space".into(),
        ));
    }
    let clean = dataset.clean_labels().as_maps().expect("checked kind");
    let mut bearing: Vec<usize> = (0..clean.len()).filter(|&i| clean[i].max() > 0.0).collect();
    bearing.shuffle(&mut rng::rng_for(spec.seed, &[stream::NOISE]));
    let k = (spec.eta * bearing.len() as f64).floor() as usize;
    let mut mask = vec![false; clean.len()];
    for &i in &bearing[..k] {
        mask[i] = true;
    }
    let labels = clean
        .iter()
        .zip(&mask)
        .map(|(m, &blank)| if blank { Tensor::zeros(m.shape()) } else { m.clone() })
        .collect();
    Ok((dataset.clone().with_labels(Labels::HeatMap(labels))?, FlipMask(mask)))
}

/// Dispatches on the noise kind.
pub fn inject(dataset: &NoisyDataset, spec: &NoiseSpec) -> Result<(NoisyDataset, FlipMask)> {
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(dataset, spec),
        NoiseKind::Blanking => inject_blanking(dataset, spec),
    }
}

/// Fraction of current labels that are wrong relative to the clean ones.
pub fn noise_level(dataset: &NoisyDataset) -> Result<f64> {
    crate::metrics::noise_level(&dataset.labels, dataset.clean_labels())
}
