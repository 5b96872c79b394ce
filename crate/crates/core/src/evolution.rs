//! Primary training and per-sample evolution.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{restore, snapshot, Checkpoint};
use crate::data::{EvolutionCube, Labels, NoisyDataset};
use crate::error::{Error, Result};
use crate::model::{Model, Target};
use crate::optim::{AdamState, SolverConfig};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvolutionMode {
    SelfishOnly,
    SupportThenSelfish,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSchedule {
    pub mode: EvolutionMode,
    pub t_support: usize,
    pub t_selfish: usize,
    pub support_solver: SolverConfig,
    pub selfish_solver: SolverConfig,
    pub support_batch_size: usize,
    /// Draw a fresh support batch for every sample instead of once per run.
    #[serde(default)]
    pub support_per_sample: bool,
}

impl EvolutionSchedule {
    pub fn selfish_only(t: usize) -> Self {
        EvolutionSchedule {
            mode: EvolutionMode::SelfishOnly,
            t_support: 0,
            t_selfish: t,
            support_solver: SolverConfig::SUPPORT,
            selfish_solver: SolverConfig::SELFISH,
            support_batch_size: 0,
            support_per_sample: false,
        }
    }

    pub fn support_then_selfish(t_support: usize, t_selfish: usize, batch: usize) -> Self {
        EvolutionSchedule {
            mode: EvolutionMode::SupportThenSelfish,
            t_support,
            t_selfish,
            support_solver: SolverConfig::SUPPORT,
            selfish_solver: SolverConfig::SELFISH,
            support_batch_size: batch,
            support_per_sample: false,
        }
    }

    pub fn depth(&self) -> usize {
        self.t_support + self.t_selfish
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() == 0 {
            return Err(Error::Spec("evolution needs at least one step".into()));
        }
        match self.mode {
            EvolutionMode::SelfishOnly if self.t_support != 0 => {
                return Err(Error::Spec("selfish-only schedule with support steps".into()))
            }
            EvolutionMode::SupportThenSelfish if self.t_support > 0 && self.support_batch_size == 0 => {
                return Err(Error::Spec("support phase needs a non-empty batch".into()))
            }
            _ => {}
        }
        self.support_solver.validate()?;
        self.selfish_solver.validate()
    }

    fn uses_support(&self) -> bool {
        self.mode == EvolutionMode::SupportThenSelfish && self.t_support > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimaryTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl PrimaryTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Spec("primary training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Spec("batch size must be positive".into()));
        }
        self.solver.validate()
    }
}

/// Stacks samples `indices` of `inputs` into one batch tensor.
pub fn batch_of(inputs: &[Tensor], indices: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = indices.iter().map(|&i| &inputs[i]).collect();
    Tensor::stack(&refs)
}

fn targets_of<'a>(labels: &'a Labels, indices: &[usize]) -> Vec<Target<'a>> {
    indices.iter().map(|&i| labels.target(i)).collect()
}

/// Mini-batch ADAM on the current labels. Returns θ̇ and the mean loss of
/// every epoch.
pub fn train_primary(
    model: &mut Model,
    dataset: &NoisyDataset,
    cfg: &PrimaryTrainConfig,
) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng_for(
            cfg.seed,
            &[stream::PRIMARY_SHUFFLE, epoch as u64],
        ));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let input = batch_of(&dataset.inputs, chunk)?;
            let targets = targets_of(&dataset.labels, chunk);
            let pass = model
                .train_step(&input, &targets, &mut state, &cfg.solver)
                .map_err(|e| match e {
                    Error::NonFinite { what, .. } => {
                        log::error!("primary training diverged in epoch {epoch}, batch {b}");
                        Error::NonFinite {
                            what,
                            sample: None,
                            step: epoch,
                        }
                    }
                    other => other,
                })?;
            total += pass.loss * chunk.len() as f64;
        }
        let mean = total / dataset.len() as f64;
        log::info!("primary epoch {}: mean loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    Ok((snapshot(model), history))
}

/// Clean samples used to pull the model during the support phase.
#[derive(Clone, Debug)]
pub struct SupportBatch {
    pub inputs: Tensor,
    pub labels: Labels,
}

impl SupportBatch {
    /// `size` distinct samples of `gold`, drawn with the given stream tags.
    pub fn draw(gold: &NoisyDataset, size: usize, seed: u64, tags: &[u64]) -> Result<Self> {
        if size == 0 || size > gold.len() {
            return Err(Error::Argument(format!(
                "support batch of {size} from {} gold samples",
                gold.len()
            )));
        }
        let mut idx: Vec<usize> = (0..gold.len()).collect();
        idx.shuffle(&mut rng::rng_for(seed, tags));
        idx.truncate(size);
        idx.sort_unstable();
        Ok(SupportBatch {
            inputs: batch_of(&gold.inputs, &idx)?,
            labels: gold.labels.subset(&idx),
        })
    }
}

/// Where support batches come from during an evolution run.
#[derive(Clone, Debug)]
pub enum SupportSource<'a> {
    None,
    /// One batch shared by every sample.
    Fixed(SupportBatch),
    /// A batch per sample, drawn from the gold set with the sample id.
    PerSample { gold: &'a NoisyDataset, seed: u64 },
}

impl SupportSource<'_> {
    /// The conventional source for a schedule: fixed batch drawn once with
    /// the run seed, or per sample when the schedule asks for it.
    pub fn for_schedule<'g>(
        schedule: &EvolutionSchedule,
        gold: &'g NoisyDataset,
        seed: u64,
    ) -> Result<SupportSource<'g>> {
        if !schedule.uses_support() {
            return Ok(SupportSource::None);
        }
        if schedule.support_per_sample {
            return Ok(SupportSource::PerSample { gold, seed });
        }
        Ok(SupportSource::Fixed(SupportBatch::draw(
            gold,
            schedule.support_batch_size,
            seed,
            &[stream::SUPPORT],
        )?))
    }

    fn batch_for(&self, schedule: &EvolutionSchedule, sample_id: u64) -> Result<Option<SupportBatch>> {
        Ok(match self {
            SupportSource::None => None,
            SupportSource::Fixed(b) => Some(b.clone()),
            SupportSource::PerSample { gold, seed } => Some(SupportBatch::draw(
                gold,
                schedule.support_batch_size,
                *seed,
                &[stream::SUPPORT, sample_id],
            )?),
        })
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

fn sample_error(e: Error, sample_id: u64, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite {
            what,
            sample: Some(sample_id),
            step,
        },
        other => other,
    }
}

/// Overfits `model` (already holding θ̇) on one sample and records the
/// output after every step.
///
/// Selfish steps reuse the forward pass of step `t + 1` as the recorded
/// output of step `t`, so only one extra forward pass is spent at the end.
pub fn evolve_loaded(
    model: &mut Model,
    theta: &Checkpoint,
    sample_id: u64,
    input: &Tensor,
    label: Target,
    support: Option<&SupportBatch>,
    schedule: &EvolutionSchedule,
) -> Result<EvolutionCube> {
    let out_shape = model.spec().output_shape();
    let mut slices = Vec::with_capacity(schedule.depth());
    let x = as_batch(input)?;

    if schedule.uses_support() {
        let batch = support.ok_or_else(|| Error::Argument("support phase without a batch".into()))?;
        let n = batch.labels.len();
        let all: Vec<usize> = (0..n).collect();
        let targets = targets_of(&batch.labels, &all);
        let mut state = AdamState::new(model.params());
        for step in 0..schedule.t_support {
            model
                .train_step(&batch.inputs, &targets, &mut state, &schedule.support_solver)
                .map_err(|e| sample_error(e, sample_id, step))?;
            let y = model.predict(&x)?;
            if !y.all_finite() {
                return Err(sample_error(
                    Error::NonFinite {
                        what: "output",
                        sample: None,
                        step: 0,
                    },
                    sample_id,
                    step,
                ));
            }
            slices.push(y.reshape(&out_shape)?);
        }
    }

    let boundary = slices.len();
    let targets = [label];
    let mut state = AdamState::new(model.params());
    for step in 0..schedule.t_selfish {
        let pass = model
            .train_step(&x, &targets, &mut state, &schedule.selfish_solver)
            .map_err(|e| sample_error(e, sample_id, boundary + step))?;
        if step > 0 {
            slices.push(pass.outputs.reshape(&out_shape)?);
        }
    }
    if schedule.t_selfish > 0 {
        let y = model.predict(&x)?;
        if !y.all_finite() {
            return Err(Error::NonFinite {
                what: "output",
                sample: Some(sample_id),
                step: schedule.depth() - 1,
            });
        }
        slices.push(y.reshape(&out_shape)?);
    }
    Ok(EvolutionCube {
        sample_id,
        slices,
        phase_boundary: boundary,
        checkpoint_hash: *theta.hash(),
        support_solver: schedule.support_solver,
        selfish_solver: schedule.selfish_solver,
    })
}

/// Restores θ̇ into `model` and evolves one sample.
pub fn evolve_sample(
    model: &mut Model,
    theta: &Checkpoint,
    sample_id: u64,
    input: &Tensor,
    label: Target,
    support: Option<&SupportBatch>,
    schedule: &EvolutionSchedule,
) -> Result<EvolutionCube> {
    schedule.validate()?;
    restore(model, theta)?;
    evolve_loaded(model, theta, sample_id, input, label, support, schedule)
}

/// Samples to evolve: inputs with the labels they are overfitted towards.
#[derive(Clone, Copy)]
pub struct EvolveJob<'a> {
    pub inputs: &'a [Tensor],
    pub labels: &'a Labels,
    pub sample_ids: &'a [u64],
}

impl<'a> EvolveJob<'a> {
    pub fn of(dataset: &'a NoisyDataset) -> Self {
        EvolveJob {
            inputs: &dataset.inputs,
            labels: &dataset.labels,
            sample_ids: &dataset.sample_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Largest tolerated share of failed evolutions in one run.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Evolves every sample of `job` on `workers` threads and maps each outcome
/// through `f`. Results come back in sample order whatever the scheduling;
/// each sample's evolution depends only on θ̇, the sample, its support batch
/// and the schedule.
pub fn evolve_map<T, F>(
    template: &Model,
    theta: &Checkpoint,
    job: EvolveJob,
    schedule: &EvolutionSchedule,
    support: &SupportSource,
    workers: usize,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Result<EvolutionCube>) -> Result<T> + Sync,
{
    schedule.validate()?;
    let n = job.len();
    if job.labels.len() != n || job.sample_ids.len() != n {
        return Err(Error::Dimension("evolution job parts disagree".into()));
    }
    let workers = workers.max(1).min(n.max(1));
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, T)>> = Mutex::new(Vec::with_capacity(n));
    let first_error: Mutex<Option<Error>> = Mutex::new(None);

    let work = || {
        let mut model = template.clone();
        loop {
            if first_error.lock().unwrap().is_some() {
                return;
            }
            let i = next.fetch_add(1, Ordering::Relaxed);
            if i >= n {
                return;
            }
            let id = job.sample_ids[i];
            let cube = schedule_one(&mut model, theta, &job, i, id, schedule, support);
            match f(i, cube) {
                Ok(v) => done.lock().unwrap().push((i, v)),
                Err(e) => {
                    first_error.lock().unwrap().get_or_insert(e);
                    return;
                }
            }
        }
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut done = done.into_inner().unwrap();
    done.sort_by_key(|(i, _)| *i);
    Ok(done.into_iter().map(|(_, v)| v).collect())
}

fn schedule_one(
    model: &mut Model,
    theta: &Checkpoint,
    job: &EvolveJob,
    i: usize,
    id: u64,
    schedule: &EvolutionSchedule,
    support: &SupportSource,
) -> Result<EvolutionCube> {
    let batch = support.batch_for(schedule, id)?;
    restore(model, theta)?;
    evolve_loaded(
        model,
        theta,
        id,
        &job.inputs[i],
        job.labels.target(i),
        batch.as_ref(),
        schedule,
    )
}

/// Outcome of evolving a subset.
#[derive(Debug)]
pub struct EvolveReport {
    /// Successful cubes, in sample order.
    pub cubes: Vec<EvolutionCube>,
    /// Failed sample ids with the reason.
    pub failed: Vec<(u64, String)>,
}

/// Checks the failure share of a run.
pub fn check_failures(failed: usize, total: usize) -> Result<()> {
    if total > 0 && failed as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::Argument(format!(
            "{failed} of {total} evolutions failed, above the {:.0}% limit",
            MAX_FAILURE_RATE * 100.0
        )));
    }
    Ok(())
}

/// Evolves every sample. Numerical failures are reported per sample and
/// only fail the run above `MAX_FAILURE_RATE`.
pub fn evolve_subset(
    template: &Model,
    theta: &Checkpoint,
    job: EvolveJob,
    schedule: &EvolutionSchedule,
    support: &SupportSource,
    workers: usize,
) -> Result<EvolveReport> {
    let outcomes = evolve_map(template, theta, job, schedule, support, workers, |i, r| {
        Ok(match r {
            Ok(c) => Ok(c),
            Err(e @ Error::NonFinite { .. }) => {
                log::warn!("evolution of sample {} failed: {e}", job.sample_ids[i]);
                Err((job.sample_ids[i], e.to_string()))
            }
            Err(e) => return Err(e),
        })
    })?;
    let mut cubes = Vec::with_capacity(outcomes.len());
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(c) => cubes.push(c),
            Err(f) => failed.push(f),
        }
    }
    check_failures(failed.len(), job.len())?;
    Ok(EvolveReport { cubes, failed })
}
