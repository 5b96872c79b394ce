//! The closed correction loop and its reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{restore, Checkpoint};
use crate::config::{RunConfig, TaskKind};
use crate::data::cube_store::{CubeStoreWriter, Precision};
use crate::data::synth::synthesize_pairs;
use crate::data::{idx, manifest, split, Downsample, EvolutionCube, Labels, NoisyDataset};
use crate::e2l::{
    assemble_corpus, correct_labels, e2l_spec, finish_map, fully_noised, gold_cubes, train_e2l,
    CorpusMode, E2LTrainConfig, EvolveContext, Provenance,
};
use crate::error::{Error, Result};
use crate::evolution::{train_primary, EvolveJob, PrimaryTrainConfig, SupportSource};
use crate::metrics::{self, DEFAULT_RADIUS, DEFAULT_TAU};
use crate::model::{Model, ModelSpec};
use crate::noise::{inject, FlipMask};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Seed tags of the loop stages, combined with the super-epoch index.
pub mod stage {
    pub const PRIMARY_INIT: u64 = 100;
    pub const PRIMARY_TRAIN: u64 = 101;
    pub const SUPPORT: u64 = 102;
    pub const GOLD_NOISE: u64 = 103;
    pub const E2L: u64 = 104;
    pub const SYNTH: u64 = 105;
    pub const SPLIT: u64 = 106;
    pub const STORE: u64 = 107;
}

pub const HISTOGRAM_BINS: usize = 10;
pub const REPORT_HEADER: &str =
    "super_epoch,clean_pct,noise_level,mean_cosine,hard_sim,discovered,labels_changed";

/// Noisy training subset, clean gold subset and the corruption record.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub train: NoisyDataset,
    pub gold: NoisyDataset,
    pub flips: FlipMask,
    pub primary_spec: ModelSpec,
    pub e2l_spec: ModelSpec,
    pub downsample: Downsample,
}

pub fn prepare(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let total = cfg.task.train + cfg.task.gold;
    let full = match cfg.task.kind {
        TaskKind::Mnist => {
            let (images, labels) = (
                cfg.task.images.as_ref().expect("validated"),
                cfg.task.labels.as_ref().expect("validated"),
            );
            let ds = idx::load_idx(images, labels)?;
            if ds.len() < total {
                return Err(Error::Config(format!(
                    "[task] asks for {total} samples, {} holds {}",
                    images.display(),
                    ds.len()
                )));
            }
            ds.take(total)
        }
        TaskKind::Synthetic => synthesize_pairs(
            &cfg.task.synth,
            total,
            derive_seed(cfg.run.seed, &[stage::SYNTH]),
        )?,
    };
    let pair = split(&full, cfg.task.gold, derive_seed(cfg.run.seed, &[stage::SPLIT]))?;
    let (train, flips) = inject(&pair.train, &cfg.noise.spec())?;
    let primary_spec = cfg.primary_spec();
    let depth = cfg.e2l_depth();
    Ok(Experiment {
        e2l_spec: e2l_spec(&primary_spec, depth)?,
        downsample: Downsample::Depth(depth),
        train,
        gold: pair.gold,
        flips,
        primary_spec,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub super_epoch: usize,
    pub clean_pct: f64,
    /// Fraction in [0, 1].
    pub noise_level: f64,
    /// Percent.
    pub mean_cosine: f64,
    /// Percent.
    pub hard_sim: f64,
    /// Corrupted samples whose label is recovered: objects found for heat
    /// maps, clean class restored for categorical labels.
    pub discovered: usize,
    pub labels_changed: usize,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.super_epoch,
            self.clean_pct,
            self.noise_level,
            self.mean_cosine,
            self.hard_sim,
            self.discovered,
            self.labels_changed
        )
    }
}

/// Per-sample similarity of labels to the clean ones (cosine; one-hot
/// cosine for classes).
pub fn similarities(labels: &Labels, clean: &Labels) -> Result<Vec<f64>> {
    match (labels, clean) {
        (Labels::Categorical(a), Labels::Categorical(b)) => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| if x == y { 1.0 } else { 0.0 })
            .collect()),
        (Labels::HeatMap(a), Labels::HeatMap(b)) => metrics::cosines(a, b),
        _ => Err(Error::KindMismatch("labels and clean labels differ in kind".into())),
    }
}

pub fn evaluate(
    labels: &Labels,
    clean: &Labels,
    flips: &FlipMask,
    super_epoch: usize,
    labels_changed: usize,
) -> Result<MetricsRow> {
    let noise_level = metrics::noise_level(labels, clean)?;
    let sims = similarities(labels, clean)?;
    let (hard_sim, discovered) = match (labels, clean) {
        (Labels::HeatMap(a), Labels::HeatMap(b)) => {
            let hard = a
                .iter()
                .zip(b)
                .map(|(x, y)| metrics::hard_similarity(x, y, DEFAULT_TAU))
                .collect::<Result<Vec<_>>>()?;
            (
                100.0 * metrics::mean(&hard),
                metrics::discovery_count(a, b, &flips.0, DEFAULT_TAU, DEFAULT_RADIUS)?,
            )
        }
        _ => (
            100.0 * metrics::mean(&sims),
            sims.iter().zip(&flips.0).filter(|(&s, &f)| f && s == 1.0).count(),
        ),
    };
    Ok(MetricsRow {
        super_epoch,
        clean_pct: 100.0 - 100.0 * noise_level,
        noise_level,
        mean_cosine: 100.0 * metrics::mean(&sims),
        hard_sim,
        discovered,
        labels_changed,
    })
}

/// Loop state after `k` completed super-epochs.
#[derive(Clone, Debug)]
pub struct SuperEpochState {
    pub k: usize,
    pub labels: Labels,
    pub checkpoint: Option<Checkpoint>,
    /// One row per super-epoch, starting with the initial labels at 0.
    pub history: Vec<MetricsRow>,
    /// Primary-model predictions scored like corrected labels, one row per
    /// completed super-epoch.
    pub baseline: Vec<MetricsRow>,
    /// Similarity histograms, aligned with `history`.
    pub histograms: Vec<Vec<usize>>,
}

pub fn initial_state(exp: &Experiment) -> Result<SuperEpochState> {
    let labels = exp.train.labels.clone();
    let row = evaluate(&labels, exp.train.clean_labels(), &exp.flips, 0, 0)?;
    let hist = histogram_of(&labels, exp.train.clean_labels())?;
    Ok(SuperEpochState {
        k: 0,
        labels,
        checkpoint: None,
        history: vec![row],
        baseline: Vec::new(),
        histograms: vec![hist],
    })
}

fn histogram_of(labels: &Labels, clean: &Labels) -> Result<Vec<usize>> {
    metrics::histogram(&similarities(labels, clean)?, HISTOGRAM_BINS, 0.0, 1.0)
}

/// Primary predictions turned into labels.
pub fn predicted_labels(model: &Model, inputs: &[Tensor], floor: f64) -> Result<Labels> {
    let mut classes = Vec::new();
    let mut maps = Vec::new();
    for chunk in inputs.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let out = model.predict(&Tensor::stack(&refs)?)?;
        for one in out.unstack() {
            if model.spec().is_classification() {
                classes.push(one.argmax());
            } else {
                maps.push(finish_map(one, floor));
            }
        }
    }
    Ok(if model.spec().is_classification() {
        Labels::Categorical(classes)
    } else {
        Labels::HeatMap(maps)
    })
}

fn count_changed(old: &Labels, new: &Labels) -> Result<usize> {
    let mut n = 0;
    for i in 0..old.len() {
        if crate::e2l::label_changed(old, new, i)? {
            n += 1;
        }
    }
    Ok(n)
}

pub fn super_epoch_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("se-{k:02}"))
}

fn write_store(
    path: &Path,
    run_id: u64,
    precision: Precision,
    cubes: &[Option<EvolutionCube>],
) -> Result<()> {
    let mut w = CubeStoreWriter::create(path, run_id, precision)?;
    for c in cubes.iter().flatten() {
        w.write(c)?;
    }
    w.finish()
}

/// One super-epoch: fresh primary model on the current labels, gold cubes,
/// E2L from scratch, correction of the training labels. When `out` is
/// given, the stage artifacts are written under `se-<k>/`.
pub fn run_super_epoch(
    exp: &Experiment,
    state: &SuperEpochState,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<SuperEpochState> {
    let k = state.k + 1;
    let seed = cfg.run.seed;
    let kk = k as u64;
    let dir = out.map(|o| super_epoch_dir(o, k));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let clock = Instant::now();
    let mut model = Model::new(
        exp.primary_spec.clone(),
        derive_seed(seed, &[stage::PRIMARY_INIT, kk]),
    )?;
    if let (true, Some(prev)) = (cfg.run.warm_start, &state.checkpoint) {
        restore(&mut model, prev)?;
    }
    let dataset = exp.train.clone().with_labels(state.labels.clone())?;
    let primary_cfg = PrimaryTrainConfig {
        epochs: cfg.primary.epochs,
        batch_size: cfg.primary.batch_size,
        solver: cfg.primary.solver,
        seed: derive_seed(seed, &[stage::PRIMARY_TRAIN, kk]),
    };
    let (theta, _) = train_primary(&mut model, &dataset, &primary_cfg)?;
    log::info!("super-epoch {k}: primary trained in {:.1?}", clock.elapsed());

    let predicted = predicted_labels(&model, &exp.train.inputs, cfg.e2l.floor)?;
    let baseline = evaluate(
        &predicted,
        exp.train.clean_labels(),
        &exp.flips,
        k,
        count_changed(&state.labels, &predicted)?,
    )?;

    let clock = Instant::now();
    let schedule = cfg.schedule.schedule();
    let support =
        SupportSource::for_schedule(&schedule, &exp.gold, derive_seed(seed, &[stage::SUPPORT, kk]))?;
    let ctx = EvolveContext {
        primary: &model,
        theta: &theta,
        schedule: &schedule,
        support: &support,
        downsample: exp.downsample,
        workers: cfg.schedule.workers,
    };
    let mut versions = Vec::new();
    if cfg.e2l.corpus != CorpusMode::NoisedOnly {
        versions.push((Provenance::CleanGold, gold_cubes(&ctx, &exp.gold, &exp.gold.labels)?));
    }
    if cfg.e2l.corpus != CorpusMode::CleanOnly {
        let noised = fully_noised(
            &exp.gold.labels,
            exp.gold.label_space,
            derive_seed(seed, &[stage::GOLD_NOISE, kk]),
        );
        versions.push((Provenance::NoisedGold, gold_cubes(&ctx, &exp.gold, &noised)?));
    }
    log::info!("super-epoch {k}: gold cubes in {:.1?}", clock.elapsed());
    if let Some(d) = &dir {
        theta.save(&d.join("primary.seck"))?;
        let run_id = derive_seed(seed, &[stage::STORE, kk]);
        for (tag, cubes) in &versions {
            let name = match tag {
                Provenance::CleanGold => "gold-clean.evoc",
                Provenance::NoisedGold => "gold-noised.evoc",
            };
            write_store(&d.join(name), run_id, cfg.precision(), cubes)?;
        }
    }
    let corpus = assemble_corpus(&exp.gold, &versions)?;
    drop(versions);

    let clock = Instant::now();
    let e2l_cfg = E2LTrainConfig {
        epochs: cfg.e2l.epochs,
        batch_size: cfg.e2l.batch_size,
        solver: cfg.e2l.solver,
        seed: derive_seed(seed, &[stage::E2L, kk]),
        augment: cfg.e2l.augment,
    };
    let (e2l, _) = train_e2l(&corpus, &exp.e2l_spec, &e2l_cfg)?;
    drop(corpus);
    log::info!("super-epoch {k}: E2L trained in {:.1?}", clock.elapsed());

    let clock = Instant::now();
    let job = EvolveJob {
        inputs: &exp.train.inputs,
        labels: &state.labels,
        sample_ids: &exp.train.sample_ids,
    };
    let correction = correct_labels(&e2l, &ctx, job, &cfg.e2l.correction())?;
    log::info!("super-epoch {k}: corrected in {:.1?}", clock.elapsed());

    let changed = correction.changed.iter().filter(|&&c| c).count();
    let row = evaluate(
        &correction.labels,
        exp.train.clean_labels(),
        &exp.flips,
        k,
        changed,
    )?;
    log::info!(
        "super-epoch {k}: clean {:.2}%, noise {:.4}, cosine {:.2}, changed {changed}",
        row.clean_pct,
        row.noise_level,
        row.mean_cosine
    );
    let mut next = state.clone();
    next.k = k;
    next.histograms
        .push(histogram_of(&correction.labels, exp.train.clean_labels())?);
    next.labels = correction.labels;
    next.checkpoint = Some(theta);
    next.history.push(row);
    next.baseline.push(baseline);

    if let (Some(d), Some(o)) = (&dir, out) {
        let recs = manifest::records(
            &next.labels,
            &exp.train.sample_ids,
            &exp.train.object_ids,
            &correction.changed,
        )?;
        manifest::save(&d.join("labels.jsonl"), &recs)?;
        emit_report(&next, o)?;
        save_progress(&next, cfg, o)?;
    }
    Ok(next)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `baseline.csv`, `noise_curve.csv` and
/// `similarity_hist.csv` into `dir`.
pub fn emit_report(state: &SuperEpochState, dir: &Path) -> Result<()> {
    if state.history.is_empty() {
        return Err(Error::Argument("no metric rows to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = |rows: &[MetricsRow]| {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    };
    write_file(&dir.join("metrics.csv"), &table(&state.history))?;
    write_file(&dir.join("baseline.csv"), &table(&state.baseline))?;

    let mut curve = String::from("super_epoch,noise_level\n");
    for r in &state.history {
        let _ = writeln!(curve, "{},{}", r.super_epoch, r.noise_level);
    }
    write_file(&dir.join("noise_curve.csv"), &curve)?;

    let mut hist = String::from("super_epoch,bin_lo,bin_hi,count\n");
    let width = 1.0 / HISTOGRAM_BINS as f64;
    for (k, bins) in state.histograms.iter().enumerate() {
        for (b, count) in bins.iter().enumerate() {
            let _ = writeln!(
                hist,
                "{k},{},{},{count}",
                b as f64 * width,
                (b + 1) as f64 * width
            );
        }
    }
    write_file(&dir.join("similarity_hist.csv"), &hist)
}

#[derive(Serialize, Deserialize)]
struct Progress {
    k: usize,
    config_sha256: String,
    history: Vec<MetricsRow>,
    baseline: Vec<MetricsRow>,
    histograms: Vec<Vec<usize>>,
}

fn config_digest(cfg: &RunConfig) -> Result<String> {
    // the output directory does not affect results
    let mut c = cfg.clone();
    c.run.out_dir = None;
    c.run.super_epochs = 0;
    Ok(Sha256::digest(c.to_toml()?.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn save_progress(state: &SuperEpochState, cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = Progress {
        k: state.k,
        config_sha256: config_digest(cfg)?,
        history: state.history.clone(),
        baseline: state.baseline.clone(),
        histograms: state.histograms.clone(),
    };
    let text = serde_json::to_string_pretty(&p)
        .map_err(|e| Error::Config(format!("progress encode: {e}")))?;
    let tmp = out.join("progress.json.tmp");
    write_file(&tmp, &text)?;
    let dst = out.join("progress.json");
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

/// Reloads the state of the last completed super-epoch under `out`, if any.
pub fn load_progress(exp: &Experiment, cfg: &RunConfig, out: &Path) -> Result<Option<SuperEpochState>> {
    let path = out.join("progress.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let p: Progress = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if p.config_sha256 != config_digest(cfg)? {
        return Err(Error::Config(format!(
            "{} was written by a different configuration",
            out.display()
        )));
    }
    let dir = super_epoch_dir(out, p.k);
    let checkpoint = if p.k > 0 {
        Some(Checkpoint::load(&dir.join("primary.seck"))?)
    } else {
        None
    };
    let labels = if p.k > 0 {
        let recs = manifest::load(&dir.join("labels.jsonl"))?;
        manifest::labels_from(&recs, exp.train.label_space)?
    } else {
        exp.train.labels.clone()
    };
    if labels.len() != exp.train.len() {
        return Err(Error::Corruption(format!(
            "{} labels saved for {} samples",
            labels.len(),
            exp.train.len()
        )));
    }
    Ok(Some(SuperEpochState {
        k: p.k,
        labels,
        checkpoint,
        history: p.history,
        baseline: p.baseline,
        histograms: p.histograms,
    }))
}

/// Runs the configured number of super-epochs, resuming from `out` when
/// it holds progress from an earlier run of the same configuration.
pub fn run_loop(cfg: &RunConfig, out: Option<&Path>) -> Result<SuperEpochState> {
    let exp = prepare(cfg)?;
    let mut state = match out {
        Some(o) => match load_progress(&exp, cfg, o)? {
            Some(s) => {
                log::info!("resuming after super-epoch {}", s.k);
                s
            }
            None => initial_state(&exp)?,
        },
        None => initial_state(&exp)?,
    };
    if let Some(o) = out {
        if state.k == 0 {
            emit_report(&state, o)?;
            save_progress(&state, cfg, o)?;
        }
    }
    while state.k < cfg.run.super_epochs {
        state = run_super_epoch(&exp, &state, cfg, out)?;
    }
    Ok(state)
}
