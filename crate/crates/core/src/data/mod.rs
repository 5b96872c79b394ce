//! Datasets, splits, evolution cubes and their on-disk forms.

pub mod cube;
pub mod cube_store;
pub mod idx;
pub mod manifest;
pub mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Target;
use crate::rng;
use crate::tensor::Tensor;

pub use cube::{downsample_cube, Downsample, EvolutionCube};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelSpace {
    Categorical { classes: usize },
    HeatMap { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Categorical(Vec<usize>),
    HeatMap(Vec<Tensor>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Categorical(v) => v.len(),
            Labels::HeatMap(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        match self {
            Labels::Categorical(v) => Target::Class(v[i]),
            Labels::HeatMap(v) => Target::Map(&v[i]),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Categorical(v) => Labels::Categorical(indices.iter().map(|&i| v[i]).collect()),
            Labels::HeatMap(v) => Labels::HeatMap(indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    pub fn as_categorical(&self) -> Option<&[usize]> {
        match self {
            Labels::Categorical(v) => Some(v),
            Labels::HeatMap(_) => None,
        }
    }

    pub fn as_maps(&self) -> Option<&[Tensor]> {
        match self {
            Labels::HeatMap(v) => Some(v),
            Labels::Categorical(_) => None,
        }
    }

    /// Short SHA-256 digest of label `i`, used in manifests.
    pub fn digest(&self, i: usize) -> String {
        let bytes = match self {
            Labels::Categorical(v) => (v[i] as u64).to_le_bytes().to_vec(),
            Labels::HeatMap(v) => v[i].to_le_bytes(),
        };
        Sha256::digest(bytes)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Inputs with their current (possibly noisy) labels. The clean labels ride
/// along for evaluation only; nothing in the correction path reads them.
#[derive(Clone, Debug)]
pub struct NoisyDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Labels,
    clean: Labels,
    pub label_space: LabelSpace,
    pub sample_ids: Vec<u64>,
    pub object_ids: Vec<u64>,
}

impl NoisyDataset {
    /// A dataset whose current labels equal the clean ones.
    pub fn new(
        inputs: Vec<Tensor>,
        clean: Labels,
        label_space: LabelSpace,
        sample_ids: Vec<u64>,
        object_ids: Vec<u64>,
    ) -> Result<Self> {
        let n = inputs.len();
        if clean.len() != n || sample_ids.len() != n || object_ids.len() != n {
            return Err(Error::Dimension(format!(
                "dataset parts disagree: {n} inputs, {} labels, {} sample ids, {} object ids",
                clean.len(),
                sample_ids.len(),
                object_ids.len()
            )));
        }
        match (&clean, label_space) {
            (Labels::Categorical(v), LabelSpace::Categorical { classes }) => {
                if let Some(bad) = v.iter().find(|&&c| c >= classes) {
                    return Err(Error::Index(format!("label {bad} outside [0, {classes})")));
                }
            }
            (Labels::HeatMap(v), LabelSpace::HeatMap { height, width }) => {
                for m in v {
                    if m.shape() != [1, height, width] {
                        return Err(Error::Dimension(format!(
                            "heat map of shape {:?}, expected [1, {height}, {width}]",
                            m.shape()
                        )));
                    }
                }
            }
            _ => {
                return Err(Error::KindMismatch(
                    "labels do not match the label space".into(),
                ))
            }
        }
        Ok(NoisyDataset {
            inputs,
            labels: clean.clone(),
            clean,
            label_space,
            sample_ids,
            object_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Ground-truth labels, for evaluation.
    pub fn clean_labels(&self) -> &Labels {
        &self.clean
    }

    /// Replaces the current labels; clean labels are untouched.
    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> NoisyDataset {
        NoisyDataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: self.labels.subset(indices),
            clean: self.clean.subset(indices),
            label_space: self.label_space,
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
            object_ids: indices.iter().map(|&i| self.object_ids[i]).collect(),
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> NoisyDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: NoisyDataset,
    pub gold: NoisyDataset,
}

/// Splits off a clean gold subset. Categorical datasets split positionally
/// (first `N - gold_count` train, last `gold_count` gold). Heat-map datasets
/// split by object id so no object lands in both subsets; whole objects are
/// drawn into gold in a seeded order until `gold_count` samples are reached
/// without exceeding it.
pub fn split(dataset: &NoisyDataset, gold_count: usize, seed: u64) -> Result<SplitPair> {
    let n = dataset.len();
    if gold_count >= n {
        return Err(Error::Argument(format!(
            "gold count {gold_count} must be below the dataset size {n}"
        )));
    }
    match dataset.label_space {
        LabelSpace::Categorical { .. } => {
            let cut = n - gold_count;
            let train: Vec<usize> = (0..cut).collect();
            let gold: Vec<usize> = (cut..n).collect();
            Ok(SplitPair {
                train: dataset.subset(&train),
                gold: dataset.subset(&gold),
            })
        }
        LabelSpace::HeatMap { .. } => {
            let mut objects: Vec<u64> = dataset.object_ids.clone();
            objects.sort_unstable();
            objects.dedup();
            objects.shuffle(&mut rng::rng_for(seed, &[rng::stream::SPLIT]));
            let mut gold_objects = std::collections::HashSet::new();
            let mut taken = 0;
            for obj in objects {
                if taken == gold_count {
                    break;
                }
                let size = dataset.object_ids.iter().filter(|&&o| o == obj).count();
                if taken + size <= gold_count {
                    gold_objects.insert(obj);
                    taken += size;
                }
            }
            let (gold, train): (Vec<usize>, Vec<usize>) =
                (0..n).partition(|&i| gold_objects.contains(&dataset.object_ids[i]));
            Ok(SplitPair {
                train: dataset.subset(&train),
                gold: dataset.subset(&gold),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> NoisyDataset {
        NoisyDataset::new(
            (0..n).map(|i| Tensor::full(&[1, 2, 2], i as f64)).collect(),
            Labels::Categorical((0..n).map(|i| i % 3).collect()),
            LabelSpace::Categorical { classes: 3 },
            (0..n as u64).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn positional_split() {
        let pair = split(&toy(10), 3, 0).unwrap();
        assert_eq!(pair.train.len(), 7);
        assert_eq!(pair.gold.sample_ids, vec![7, 8, 9]);
        assert!(split(&toy(10), 10, 0).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let err = NoisyDataset::new(
            vec![Tensor::zeros(&[1])],
            Labels::Categorical(vec![4]),
            LabelSpace::Categorical { classes: 3 },
            vec![0],
            vec![0],
        );
        assert!(err.is_err());
    }
}
