//! Evolution-to-label model: corpus building, training and correction.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{downsample_cube, Downsample, EvolutionCube, LabelSpace, Labels, NoisyDataset};
use crate::error::{Error, Result};
use crate::evolution::{
    batch_of, check_failures, evolve_map, EvolutionSchedule, EvolveJob, SupportSource,
};
use crate::metrics::{tensor_cosine, NOISY_COSINE};
use crate::model::{Model, ModelSpec, Target};
use crate::noise::other_class;
use crate::optim::{AdamState, SolverConfig};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    CleanGold,
    NoisedGold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusMode {
    Mixed,
    CleanOnly,
    NoisedOnly,
}

/// E2L inputs (cubes laid out for the E2L model) with clean targets.
#[derive(Clone, Debug)]
pub struct E2LCorpus {
    pub inputs: Vec<Tensor>,
    pub targets: Labels,
    pub provenance: Vec<Provenance>,
    pub sample_ids: Vec<u64>,
    pub depth: usize,
}

impl E2LCorpus {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Lays a cube out as one E2L sample: `[1, T, C]` for class
/// probabilities, `[T, H, W]` for heat maps.
pub fn cube_input(cube: &EvolutionCube) -> Result<Tensor> {
    let t = cube.depth();
    let stacked = cube.stacked()?;
    match cube.slice_shape() {
        [c] => stacked.reshape(&[1, t, *c]),
        [1, h, w] => stacked.reshape(&[t, *h, *w]),
        other => Err(Error::Dimension(format!("no E2L layout for slices {other:?}"))),
    }
}

/// The E2L architecture matching a primary model and cube depth.
pub fn e2l_spec(primary: &ModelSpec, depth: usize) -> Result<ModelSpec> {
    if primary.is_classification() {
        Ok(ModelSpec::e2l_classifier(depth, primary.classes))
    } else {
        ModelSpec::e2l_image(primary, depth)
    }
}

/// Fully noised version of gold labels: a random wrong class for every
/// categorical label, an all-zero map for every heat map.
pub fn fully_noised(labels: &Labels, space: LabelSpace, seed: u64) -> Labels {
    match (labels, space) {
        (Labels::Categorical(v), LabelSpace::Categorical { classes }) => {
            let mut rng = rng::rng_for(seed, &[stream::GOLD_NOISE]);
            Labels::Categorical(v.iter().map(|&y| other_class(&mut rng, y, classes)).collect())
        }
        (Labels::HeatMap(v), _) => {
            Labels::HeatMap(v.iter().map(|m| Tensor::zeros(m.shape())).collect())
        }
        (Labels::Categorical(v), LabelSpace::HeatMap { .. }) => Labels::Categorical(v.clone()),
    }
}

/// Evolution settings shared by corpus building and correction.
#[derive(Clone, Copy)]
pub struct EvolveContext<'a> {
    pub primary: &'a Model,
    pub theta: &'a Checkpoint,
    pub schedule: &'a EvolutionSchedule,
    pub support: &'a SupportSource<'a>,
    pub downsample: Downsample,
    pub workers: usize,
}

/// Evolves every gold sample towards `labels` and down-samples the cubes.
/// Samples whose evolution diverged come back as `None`.
pub fn gold_cubes(
    ctx: &EvolveContext,
    gold: &NoisyDataset,
    labels: &Labels,
) -> Result<Vec<Option<EvolutionCube>>> {
    let job = EvolveJob {
        inputs: &gold.inputs,
        labels,
        sample_ids: &gold.sample_ids,
    };
    evolve_map(
        ctx.primary,
        ctx.theta,
        job,
        ctx.schedule,
        ctx.support,
        ctx.workers,
        |i, r| match r {
            Ok(cube) => Ok(Some(downsample_cube(&cube, ctx.downsample)?)),
            Err(e @ Error::NonFinite { .. }) => {
                log::warn!("gold sample {} dropped from corpus: {e}", gold.sample_ids[i]);
                Ok(None)
            }
            Err(e) => Err(e),
        },
    )
}

/// Pairs gold cubes with the clean gold labels.
pub fn assemble_corpus(
    gold: &NoisyDataset,
    versions: &[(Provenance, Vec<Option<EvolutionCube>>)],
) -> Result<E2LCorpus> {
    let mut inputs = Vec::new();
    let mut kept = Vec::new();
    let mut provenance = Vec::new();
    let mut failures = 0;
    let mut depth = 0;
    for (tag, cubes) in versions {
        if cubes.len() != gold.len() {
            return Err(Error::Dimension(format!(
                "{} cubes for {} gold samples",
                cubes.len(),
                gold.len()
            )));
        }
        for (i, c) in cubes.iter().enumerate() {
            match c {
                Some(c) => {
                    depth = c.depth();
                    inputs.push(cube_input(c)?);
                    kept.push(i);
                    provenance.push(*tag);
                }
                None => failures += 1,
            }
        }
    }
    check_failures(failures, inputs.len() + failures)?;
    if inputs.is_empty() {
        return Err(Error::Argument("E2L corpus is empty".into()));
    }
    Ok(E2LCorpus {
        targets: gold.labels.subset(&kept),
        sample_ids: kept.iter().map(|&i| gold.sample_ids[i]).collect(),
        inputs,
        provenance,
        depth,
    })
}

/// Evolves every gold sample under its clean label and/or its fully noised
/// label, pairing each cube with the clean label. Failed cubes are dropped.
pub fn build_corpus(
    ctx: &EvolveContext,
    gold: &NoisyDataset,
    mode: CorpusMode,
    seed: u64,
) -> Result<E2LCorpus> {
    let mut versions = Vec::new();
    if mode != CorpusMode::NoisedOnly {
        versions.push((Provenance::CleanGold, gold_cubes(ctx, gold, &gold.labels)?));
    }
    if mode != CorpusMode::CleanOnly {
        let noised = fully_noised(&gold.labels, gold.label_space, seed);
        versions.push((Provenance::NoisedGold, gold_cubes(ctx, gold, &noised)?));
    }
    assemble_corpus(gold, &versions)
}

/// Spatial augmentation for image cubes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of mirroring, per spatial axis.
    pub flip_prob: f64,
    /// Largest translation per axis, pixels, zero filled.
    pub max_shift: usize,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Spec(format!("flip probability {}", self.flip_prob)));
        }
        Ok(())
    }
}

/// One drawn augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip_y: bool,
    pub flip_x: bool,
    pub shift_y: i64,
    pub shift_x: i64,
}

impl Augment {
    pub fn draw<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let s = cfg.max_shift as i64;
        Augment {
            flip_y: rng.random_bool(cfg.flip_prob),
            flip_x: rng.random_bool(cfg.flip_prob),
            shift_y: rng.random_range(-s..=s),
            shift_x: rng.random_range(-s..=s),
        }
    }

    /// Applies to every channel of a `[C, H, W]` tensor: flips first,
    /// then the shift.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        let shape = t.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut out = Tensor::zeros(shape);
        let src = t.data();
        let dst = out.data_mut();
        for c in 0..shape[0] {
            for y in 0..h {
                let ty = y as i64 + self.shift_y;
                if ty < 0 || ty >= h as i64 {
                    continue;
                }
                let sy = if self.flip_y { h - 1 - y } else { y };
                for x in 0..w {
                    let tx = x as i64 + self.shift_x;
                    if tx < 0 || tx >= w as i64 {
                        continue;
                    }
                    let sx = if self.flip_x { w - 1 - x } else { x };
                    dst[(c * h + ty as usize) * w + tx as usize] = src[(c * h + sy) * w + sx];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2LTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Image corpora only; ignored for classification cubes.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

impl E2LTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Spec("E2L training needs epochs and a batch size".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.solver.validate()
    }
}

/// Trains a freshly initialized E2L model. Returns it with per-epoch mean losses.
pub fn train_e2l(
    corpus: &E2LCorpus,
    spec: &ModelSpec,
    cfg: &E2LTrainConfig,
) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("E2L corpus is empty".into()));
    }
    let mut model = Model::new(spec.clone(), rng::derive_seed(cfg.seed, &[stream::E2L_INIT]))?;
    let augment = match (&corpus.targets, cfg.augment) {
        (Labels::HeatMap(_), Some(a)) => Some(a),
        _ => None,
    };
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs as u64 {
        order.shuffle(&mut rng::rng_for(cfg.seed, &[stream::E2L_TRAIN, epoch]));
        let mut aug_rng = rng::rng_for(cfg.seed, &[stream::E2L_TRAIN, epoch, 1]);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let pass = match (&corpus.targets, augment) {
                (Labels::HeatMap(maps), Some(a)) => {
                    let mut xs = Vec::with_capacity(chunk.len());
                    let mut ys = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let aug = Augment::draw(&a, &mut aug_rng);
                        xs.push(aug.apply(&corpus.inputs[i]));
                        ys.push(aug.apply(&maps[i]));
                    }
                    let refs: Vec<&Tensor> = xs.iter().collect();
                    let input = Tensor::stack(&refs)?;
                    let targets: Vec<Target> = ys.iter().map(Target::Map).collect();
                    model.train_step(&input, &targets, &mut state, &cfg.solver)?
                }
                _ => {
                    let input = batch_of(&corpus.inputs, chunk)?;
                    let targets: Vec<Target> =
                        chunk.iter().map(|&i| corpus.targets.target(i)).collect();
                    model.train_step(&input, &targets, &mut state, &cfg.solver)?
                }
            };
            total += pass.loss * chunk.len() as f64;
        }
        let mean = total / corpus.len() as f64;
        log::info!("E2L epoch {}: mean loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    /// Replace a class label only when the top E2L probability reaches this.
    pub gate: f64,
    /// Heat-map entries below this are zeroed.
    pub floor: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            gate: 0.0,
            floor: 0.05,
        }
    }
}

/// What E2L says about one sample. `None` keeps the current class label.
pub fn e2l_label(e2l: &Model, input: &Tensor, cfg: &CorrectionConfig) -> Result<Option<LabelValue>> {
    let out = e2l.predict_one(input)?;
    if e2l.spec().is_classification() {
        let best = out.argmax();
        Ok((out.data()[best] >= cfg.gate).then_some(LabelValue::Class(best)))
    } else {
        Ok(Some(LabelValue::Map(finish_map(out, cfg.floor))))
    }
}

/// Scales a predicted map down to peak 1 when it overshoots and zeroes
/// entries below `floor`.
pub fn finish_map(mut map: Tensor, floor: f64) -> Tensor {
    let max = map.max();
    if max > 1.0 {
        map.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    map.data_mut()
        .iter_mut()
        .for_each(|v| if *v < floor { *v = 0.0 });
    map
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelValue {
    Class(usize),
    Map(Tensor),
}

/// New labels for a dataset with the per-sample change flags.
#[derive(Clone, Debug)]
pub struct Correction {
    pub labels: Labels,
    pub changed: Vec<bool>,
    /// Samples whose cube failed; their labels are unchanged.
    pub failed: Vec<u64>,
}

/// Whether a label counts as changed: a different class, or a heat map
/// whose cosine to the old one falls below 0.5.
pub fn label_changed(old: &Labels, new: &Labels, i: usize) -> Result<bool> {
    match (old, new) {
        (Labels::Categorical(a), Labels::Categorical(b)) => Ok(a[i] != b[i]),
        (Labels::HeatMap(a), Labels::HeatMap(b)) => Ok(tensor_cosine(&a[i], &b[i])? < NOISY_COSINE),
        _ => Err(Error::KindMismatch("label kinds differ".into())),
    }
}

/// Evolves each sample of `job` under its current label and replaces the
/// label with the E2L answer. Clean labels are never consulted.
pub fn correct_labels(
    e2l: &Model,
    ctx: &EvolveContext,
    job: EvolveJob,
    cfg: &CorrectionConfig,
) -> Result<Correction> {
    let answers = evolve_map(
        ctx.primary,
        ctx.theta,
        job,
        ctx.schedule,
        ctx.support,
        ctx.workers,
        |i, r| match r {
            Ok(cube) => {
                let x = cube_input(&downsample_cube(&cube, ctx.downsample)?)?;
                e2l_label(e2l, &x, cfg).map(Ok)
            }
            Err(e @ Error::NonFinite { .. }) => {
                log::warn!("sample {} left uncorrected: {e}", job.sample_ids[i]);
                Ok(Err(job.sample_ids[i]))
            }
            Err(e) => Err(e),
        },
    )?;
    let mut failed = Vec::new();
    let labels = match job.labels {
        Labels::Categorical(old) => Labels::Categorical(
            answers
                .into_iter()
                .zip(old)
                .map(|(a, &y)| match a {
                    Ok(Some(LabelValue::Class(c))) => c,
                    Ok(_) => y,
                    Err(id) => {
                        failed.push(id);
                        y
                    }
                })
                .collect(),
        ),
        Labels::HeatMap(old) => Labels::HeatMap(
            answers
                .into_iter()
                .zip(old)
                .map(|(a, m)| match a {
                    Ok(Some(LabelValue::Map(new))) => new,
                    Ok(_) => m.clone(),
                    Err(id) => {
                        failed.push(id);
                        m.clone()
                    }
                })
                .collect(),
        ),
    };
    check_failures(failed.len(), job.len())?;
    let changed = (0..labels.len())
        .map(|i| label_changed(job.labels, &labels, i))
        .collect::<Result<_>>()?;
    Ok(Correction {
        labels,
        changed,
        failed,
    })
}
