use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use selfevo::checkpoint::{restore, snapshot, Checkpoint};
use selfevo::config::RunConfig;
use selfevo::data::cube_store::{CubeStoreReader, CubeStoreWriter};
use selfevo::data::{downsample_cube, manifest, Labels};
use selfevo::e2l::{
    correct_labels, cube_input, fully_noised, train_e2l, AugmentConfig, E2LCorpus,
    E2LTrainConfig, EvolveContext, Provenance,
};
use selfevo::evolution::{
    evolve_subset, train_primary, EvolutionMode, EvolveJob, PrimaryTrainConfig, SupportSource,
};
use selfevo::model::Model;
use selfevo::pipeline::{self, stage, Experiment, REPORT_HEADER};
use selfevo::rng::derive_seed;

#[derive(Parser)]
#[command(name = "selfevo", version, about = "Label-noise correction by selfish evolution")]
struct Cli {
    /// Run configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides [loop] seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides [loop] out_dir
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Gold,
    GoldNoised,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SelfishOnly,
    SupportThenSelfish,
}

#[derive(Subcommand)]
enum Command {
    /// Inject label noise into the training subset and write its labels
    Noise,
    /// Train the primary model on the training subset
    Train {
        /// Label manifest to train on (default: the noisy labels)
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record evolution cubes for a subset
    Evolve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        subset: Subset,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        t_support: Option<usize>,
        #[arg(long)]
        t_selfish: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Label manifest for the train subset (default: the noisy labels)
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the evolution-to-label model on gold cube stores
    TrainE2l {
        #[arg(long, num_args = 1.., required = true)]
        cubes: Vec<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Flip/shift augmentation for image cubes
        #[arg(long)]
        aug: Option<bool>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct the training labels with a trained E2L model
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        e2l: PathBuf,
        #[arg(long)]
        gate: Option<f64>,
        /// Current labels (default: the noisy labels)
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full super-epoch loop, resuming from the output directory
    Loop,
    /// Score a label manifest against the clean training labels
    Eval {
        #[arg(long)]
        labels: PathBuf,
    },
}

struct Run {
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl Run {
    fn load(cli: &Cli) -> Result<Self> {
        let path = cli.config.as_ref().context("--config is required")?;
        let mut cfg = RunConfig::load(path)
            .with_context(|| format!("reading {}", path.display()))?;
        if let Some(s) = cli.seed {
            cfg.run.seed = s;
        }
        if let Some(d) = &cli.out_dir {
            cfg.run.out_dir = Some(d.clone());
        }
        let out_dir = cfg.run.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run { cfg, out_dir })
    }

    fn seed(&self, tag: u64) -> u64 {
        derive_seed(self.cfg.run.seed, &[tag, 1])
    }

    fn out(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(default))
    }
}

fn train_labels(exp: &Experiment, path: &Option<PathBuf>) -> Result<Labels> {
    match path {
        None => Ok(exp.train.labels.clone()),
        Some(p) => {
            let recs = manifest::load(p)?;
            let labels = manifest::labels_from(&recs, exp.train.label_space)?;
            if labels.len() != exp.train.len() {
                bail!("{} holds {} labels for {} samples", p.display(), labels.len(), exp.train.len());
            }
            Ok(labels)
        }
    }
}

fn load_model(spec: &selfevo::model::ModelSpec, path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::new(spec.clone(), 0)?;
    restore(&mut model, &ckpt)?;
    Ok((model, ckpt))
}

fn print_row(row: &pipeline::MetricsRow) {
    println!("{REPORT_HEADER}");
    println!("{}", row.csv());
}

fn noise(run: &Run) -> Result<()> {
    let exp = pipeline::prepare(&run.cfg)?;
    let recs = manifest::records(
        &exp.train.labels,
        &exp.train.sample_ids,
        &exp.train.object_ids,
        &exp.flips.0,
    )?;
    let labels_path = run.out_dir.join("noisy-labels.jsonl");
    manifest::save(&labels_path, &recs)?;
    let flips_path = run.out_dir.join("flips.json");
    std::fs::write(&flips_path, serde_json::to_string(&exp.flips)?)
        .with_context(|| format!("writing {}", flips_path.display()))?;
    let level = selfevo::noise::noise_level(&exp.train)?;
    println!(
        "{} of {} labels corrupted, noise level {level:.4}; wrote {}",
        exp.flips.count(),
        exp.train.len(),
        labels_path.display()
    );
    Ok(())
}

fn train(run: &Run, labels: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let exp = pipeline::prepare(&run.cfg)?;
    let labels = train_labels(&exp, labels)?;
    let dataset = exp.train.clone().with_labels(labels)?;
    let mut model = Model::new(exp.primary_spec.clone(), run.seed(stage::PRIMARY_INIT))?;
    let cfg = PrimaryTrainConfig {
        epochs: run.cfg.primary.epochs,
        batch_size: run.cfg.primary.batch_size,
        solver: run.cfg.primary.solver,
        seed: run.seed(stage::PRIMARY_TRAIN),
    };
    let (theta, losses) = train_primary(&mut model, &dataset, &cfg)?;
    let path = run.out(out, "primary.seck");
    theta.save(&path)?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {}: mean loss {l:.6}", e + 1);
    }
    println!("checkpoint {} -> {}", theta.hash_hex(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evolve(
    run: &Run,
    checkpoint: &Path,
    subset: Subset,
    mode: Option<Mode>,
    t_support: Option<usize>,
    t_selfish: Option<usize>,
    workers: Option<usize>,
    labels: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let exp = pipeline::prepare(&run.cfg)?;
    let (model, theta) = load_model(&exp.primary_spec, checkpoint)?;
    let mut schedule = run.cfg.schedule.schedule();
    if let Some(m) = mode {
        schedule.mode = match m {
            Mode::SelfishOnly => EvolutionMode::SelfishOnly,
            Mode::SupportThenSelfish => EvolutionMode::SupportThenSelfish,
        };
        if schedule.mode == EvolutionMode::SelfishOnly {
            schedule.t_support = 0;
        }
    }
    if let Some(t) = t_support {
        schedule.t_support = t;
    }
    if let Some(t) = t_selfish {
        schedule.t_selfish = t;
    }
    let support = SupportSource::for_schedule(&schedule, &exp.gold, run.seed(stage::SUPPORT))?;
    let noised;
    let current;
    let job = match subset {
        Subset::Train => {
            current = train_labels(&exp, labels)?;
            EvolveJob {
                inputs: &exp.train.inputs,
                labels: &current,
                sample_ids: &exp.train.sample_ids,
            }
        }
        Subset::Gold => EvolveJob::of(&exp.gold),
        Subset::GoldNoised => {
            noised = fully_noised(&exp.gold.labels, exp.gold.label_space, run.seed(stage::GOLD_NOISE));
            EvolveJob {
                inputs: &exp.gold.inputs,
                labels: &noised,
                sample_ids: &exp.gold.sample_ids,
            }
        }
    };
    let workers = workers.unwrap_or(run.cfg.schedule.workers);
    let report = evolve_subset(&model, &theta, job, &schedule, &support, workers)?;
    let mut w = CubeStoreWriter::create(out, run.seed(stage::STORE), run.cfg.precision())?;
    for c in &report.cubes {
        w.write(c)?;
    }
    w.finish()?;
    println!(
        "{} cubes of depth {} -> {} ({} failed)",
        report.cubes.len(),
        schedule.depth(),
        out.display(),
        report.failed.len()
    );
    for (id, why) in &report.failed {
        println!("failed sample {id}: {why}");
    }
    Ok(())
}

fn train_e2l_cmd(
    run: &Run,
    cubes: &[PathBuf],
    epochs: Option<usize>,
    aug: Option<bool>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let exp = pipeline::prepare(&run.cfg)?;
    let index: HashMap<u64, usize> = exp
        .gold
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut inputs = Vec::new();
    let mut rows = Vec::new();
    let mut sample_ids = Vec::new();
    for path in cubes {
        let mut reader = CubeStoreReader::open(path)?;
        for cube in reader.read_all()? {
            let Some(&row) = index.get(&cube.sample_id) else {
                bail!("{}: sample {} is not in the gold subset", path.display(), cube.sample_id);
            };
            inputs.push(cube_input(&downsample_cube(&cube, exp.downsample)?)?);
            rows.push(row);
            sample_ids.push(cube.sample_id);
        }
    }
    let corpus = E2LCorpus {
        targets: exp.gold.labels.subset(&rows),
        provenance: vec![Provenance::CleanGold; inputs.len()],
        depth: run.cfg.e2l_depth(),
        inputs,
        sample_ids,
    };
    let augment = match aug {
        Some(false) => None,
        Some(true) => Some(run.cfg.e2l.augment.unwrap_or(AugmentConfig {
            flip_prob: 0.5,
            max_shift: 2,
        })),
        None => run.cfg.e2l.augment,
    };
    let cfg = E2LTrainConfig {
        epochs: epochs.unwrap_or(run.cfg.e2l.epochs),
        batch_size: run.cfg.e2l.batch_size,
        solver: run.cfg.e2l.solver,
        seed: run.seed(stage::E2L),
        augment,
    };
    let (e2l, losses) = train_e2l(&corpus, &exp.e2l_spec, &cfg)?;
    let path = run.out(out, "e2l.seck");
    let ckpt = snapshot(&e2l);
    ckpt.save(&path)?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {}: mean loss {l:.6}", e + 1);
    }
    println!("E2L on {} cubes {} -> {}", corpus.len(), ckpt.hash_hex(), path.display());
    Ok(())
}

fn correct(
    run: &Run,
    checkpoint: &Path,
    e2l_path: &Path,
    gate: Option<f64>,
    labels: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let exp = pipeline::prepare(&run.cfg)?;
    let (model, theta) = load_model(&exp.primary_spec, checkpoint)?;
    let (e2l, _) = load_model(&exp.e2l_spec, e2l_path)?;
    let current = train_labels(&exp, labels)?;
    let schedule = run.cfg.schedule.schedule();
    let support = SupportSource::for_schedule(&schedule, &exp.gold, run.seed(stage::SUPPORT))?;
    let ctx = EvolveContext {
        primary: &model,
        theta: &theta,
        schedule: &schedule,
        support: &support,
        downsample: exp.downsample,
        workers: run.cfg.schedule.workers,
    };
    let mut cc = run.cfg.e2l.correction();
    if let Some(g) = gate {
        cc.gate = g;
    }
    let job = EvolveJob {
        inputs: &exp.train.inputs,
        labels: &current,
        sample_ids: &exp.train.sample_ids,
    };
    let fixed = correct_labels(&e2l, &ctx, job, &cc)?;
    let recs = manifest::records(
        &fixed.labels,
        &exp.train.sample_ids,
        &exp.train.object_ids,
        &fixed.changed,
    )?;
    let path = run.out(out, "corrected-labels.jsonl");
    manifest::save(&path, &recs)?;
    let changed = fixed.changed.iter().filter(|&&c| c).count();
    let row = pipeline::evaluate(&fixed.labels, exp.train.clean_labels(), &exp.flips, 1, changed)?;
    print_row(&row);
    println!("wrote {}", path.display());
    Ok(())
}

fn run_loop(run: &Run) -> Result<()> {
    let state = pipeline::run_loop(&run.cfg, Some(&run.out_dir))?;
    println!("{REPORT_HEADER}");
    for r in &state.history {
        println!("{}", r.csv());
    }
    println!("reports in {}", run.out_dir.display());
    Ok(())
}

fn eval(run: &Run, labels: &Path) -> Result<()> {
    let exp = pipeline::prepare(&run.cfg)?;
    let current = train_labels(&exp, &Some(labels.to_path_buf()))?;
    let changed = (0..current.len())
        .map(|i| selfevo::e2l::label_changed(&exp.train.labels, &current, i))
        .collect::<selfevo::Result<Vec<_>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    let row = pipeline::evaluate(&current, exp.train.clean_labels(), &exp.flips, 0, changed)?;
    print_row(&row);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let run = Run::load(cli).context("config")?;
    match &cli.command {
        Command::Noise => noise(&run).context("noise"),
        Command::Train { labels, out } => train(&run, labels, out).context("train"),
        Command::Evolve {
            checkpoint,
            subset,
            mode,
            t_support,
            t_selfish,
            workers,
            labels,
            out,
        } => evolve(
            &run, checkpoint, *subset, *mode, *t_support, *t_selfish, *workers, labels, out,
        )
        .context("evolve"),
        Command::TrainE2l {
            cubes,
            epochs,
            aug,
            out,
        } => train_e2l_cmd(&run, cubes, *epochs, *aug, out).context("train-e2l"),
        Command::Correct {
            checkpoint,
            e2l,
            gate,
            labels,
            out,
        } => correct(&run, checkpoint, e2l, *gate, labels, out).context("correct"),
        Command::Loop => run_loop(&run).context("loop"),
        Command::Eval { labels } => eval(&run, labels).context("eval"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("selfevo: {e:#}");
            ExitCode::FAILURE
        }
    }
}
