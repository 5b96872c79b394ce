//! Label manifests: one JSON record per line, in sample order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub object_id: u64,
    pub label_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    /// Non-zero heat-map pixels as `(flat index, value)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Vec<(usize, f64)>>,
    pub changed: bool,
}

/// Builds one record per sample. `changed` flags labels that differ from the previous round.
pub fn records(
    labels: &Labels,
    sample_ids: &[u64],
    object_ids: &[u64],
    changed: &[bool],
) -> Result<Vec<ManifestRecord>> {
    let n = labels.len();
    if sample_ids.len() != n || object_ids.len() != n || changed.len() != n {
        return Err(Error::Dimension(format!(
            "manifest parts disagree for {n} labels"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let (class, map) = match labels {
                Labels::Categorical(v) => (Some(v[i]), None),
                Labels::HeatMap(v) => (
                    None,
                    Some(
                        v[i].data()
                            .iter()
                            .enumerate()
                            .filter(|(_, &x)| x != 0.0)
                            .map(|(j, &x)| (j, x))
                            .collect(),
                    ),
                ),
            };
            ManifestRecord {
                sample_id: sample_ids[i],
                object_id: object_ids[i],
                label_digest: labels.digest(i),
                class,
                map,
                changed: changed[i],
            }
        })
        .collect())
}

pub fn save(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Rebuilds labels from records and checks every digest.
pub fn labels_from(records: &[ManifestRecord], space: LabelSpace) -> Result<Labels> {
    let labels = match space {
        LabelSpace::Categorical { classes } => Labels::Categorical(
            records
                .iter()
                .map(|r| match r.class {
                    Some(c) if c < classes => Ok(c),
                    Some(c) => Err(Error::Index(format!(
                        "sample {}: class {c} outside [0, {classes})",
                        r.sample_id
                    ))),
                    None => Err(Error::KindMismatch(format!(
                        "sample {} has no class label",
                        r.sample_id
                    ))),
                })
                .collect::<Result<_>>()?,
        ),
        LabelSpace::HeatMap { height, width } => Labels::HeatMap(
            records
                .iter()
                .map(|r| {
                    let entries = r.map.as_ref().ok_or_else(|| {
                        Error::KindMismatch(format!("sample {} has no heat map", r.sample_id))
                    })?;
                    let mut t = Tensor::zeros(&[1, height, width]);
                    for &(j, v) in entries {
                        *t.data_mut().get_mut(j).ok_or_else(|| {
                            Error::Index(format!("sample {}: pixel {j} out of range", r.sample_id))
                        })? = v;
                    }
                    Ok(t)
                })
                .collect::<Result<_>>()?,
        ),
    };
    for (i, r) in records.iter().enumerate() {
        if labels.digest(i) != r.label_digest {
            return Err(Error::Corruption(format!(
                "label digest mismatch for sample {}",
                r.sample_id
            )));
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let labels = Labels::Categorical(vec![3, 1, 4]);
        let recs = records(&labels, &[0, 1, 2], &[0, 1, 2], &[false, true, false]).unwrap();
        save(&p, &recs).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, recs);
        let space = LabelSpace::Categorical { classes: 10 };
        assert_eq!(labels_from(&back, space).unwrap(), labels);
    }

    #[test]
    fn heat_map_round_trip_is_exact() {
        let m = Tensor::from_fn(&[1, 4, 4], |i| if i % 5 == 0 { 0.1 * i as f64 / 3.0 } else { 0.0 });
        let labels = Labels::HeatMap(vec![m, Tensor::zeros(&[1, 4, 4])]);
        let recs = records(&labels, &[5, 6], &[1, 1], &[true, false]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        save(&p, &recs).unwrap();
        let space = LabelSpace::HeatMap { height: 4, width: 4 };
        assert_eq!(labels_from(&load(&p).unwrap(), space).unwrap(), labels);
    }

    #[test]
    fn tampered_label_is_detected() {
        let labels = Labels::Categorical(vec![3]);
        let mut recs = records(&labels, &[0], &[0], &[false]).unwrap();
        recs[0].class = Some(4);
        let space = LabelSpace::Categorical { classes: 10 };
        assert!(matches!(labels_from(&recs, space), Err(Error::Corruption(_))));
    }
}
