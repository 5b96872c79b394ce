//! Run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::cube_store::Precision;
use crate::data::synth::SynthSpec;
use crate::e2l::{AugmentConfig, CorpusMode, CorrectionConfig};
use crate::error::{Error, Result};
use crate::evolution::{EvolutionMode, EvolutionSchedule};
use crate::model::ModelSpec;
use crate::noise::{NoiseKind, NoiseSpec};
use crate::optim::SolverConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// IDX image file (MNIST task).
    #[serde(default)]
    pub images: Option<PathBuf>,
    /// IDX label file (MNIST task).
    #[serde(default)]
    pub labels: Option<PathBuf>,
    pub train: usize,
    pub gold: usize,
    #[serde(default)]
    pub synth: SynthSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseConfig {
    pub fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            eta: self.eta,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Primary architecture; the task default when absent.
    #[serde(default)]
    pub primary: Option<ModelSpec>,
    /// Cube depth fed to E2L; the full evolution depth when absent.
    #[serde(default)]
    pub e2l_depth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimaryConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub solver: SolverConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: EvolutionMode,
    #[serde(default)]
    pub t_support: usize,
    pub t_selfish: usize,
    #[serde(default = "support_solver")]
    pub support_solver: SolverConfig,
    #[serde(default = "selfish_solver")]
    pub selfish_solver: SolverConfig,
    #[serde(default)]
    pub support_batch_size: usize,
    #[serde(default)]
    pub support_per_sample: bool,
    #[serde(default = "one")]
    pub workers: usize,
}

fn support_solver() -> SolverConfig {
    SolverConfig::SUPPORT
}

fn selfish_solver() -> SolverConfig {
    SolverConfig::SELFISH
}

fn one() -> usize {
    1
}

impl ScheduleConfig {
    pub fn schedule(&self) -> EvolutionSchedule {
        EvolutionSchedule {
            mode: self.mode,
            t_support: self.t_support,
            t_selfish: self.t_selfish,
            support_solver: self.support_solver,
            selfish_solver: self.selfish_solver,
            support_batch_size: self.support_batch_size,
            support_per_sample: self.support_per_sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2LConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub solver: SolverConfig,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default = "mixed")]
    pub corpus: CorpusMode,
    #[serde(default)]
    pub gate: f64,
    #[serde(default = "floor")]
    pub floor: f64,
}

fn mixed() -> CorpusMode {
    CorpusMode::Mixed
}

fn floor() -> f64 {
    0.05
}

impl E2LConfig {
    pub fn correction(&self) -> CorrectionConfig {
        CorrectionConfig {
            gate: self.gate,
            floor: self.floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub super_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Start each primary model from the previous θ̇ instead of scratch.
    #[serde(default)]
    pub warm_start: bool,
    /// Store cubes in single precision.
    #[serde(default)]
    pub f32_cubes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub noise: NoiseConfig,
    #[serde(default = "no_model")]
    pub model: ModelConfig,
    pub primary: PrimaryConfig,
    pub schedule: ScheduleConfig,
    pub e2l: E2LConfig,
    #[serde(rename = "loop")]
    pub run: LoopConfig,
}

fn no_model() -> ModelConfig {
    ModelConfig {
        primary: None,
        e2l_depth: None,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.task.images, &mut cfg.task.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if let Ok(abs) = std::fs::canonicalize(&*p) {
                *p = abs;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn primary_spec(&self) -> ModelSpec {
        self.model.primary.clone().unwrap_or_else(|| match self.task.kind {
            TaskKind::Mnist => ModelSpec::classifier(10),
            TaskKind::Synthetic => {
                ModelSpec::encoder_decoder(self.task.synth.size, self.task.synth.size)
            }
        })
    }

    pub fn e2l_depth(&self) -> usize {
        self.model
            .e2l_depth
            .unwrap_or(self.schedule.t_support + self.schedule.t_selfish)
    }

    pub fn precision(&self) -> Precision {
        if self.run.f32_cubes {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.train == 0 || t.gold == 0 {
            return Err(Error::Config("[task] train and gold must be positive".into()));
        }
        match t.kind {
            TaskKind::Mnist => {
                if t.images.is_none() || t.labels.is_none() {
                    return Err(Error::Config("[task] mnist needs images and labels".into()));
                }
                if self.noise.kind != NoiseKind::Symmetric {
                    return Err(Error::Config("[noise] mnist uses symmetric noise".into()));
                }
            }
            TaskKind::Synthetic => {
                t.synth.validate()?;
                if self.noise.kind != NoiseKind::Blanking {
                    return Err(Error::Config("[noise] synthetic task uses blanking noise".into()));
                }
            }
        }
        self.noise.spec().validate()?;
        let spec = self.primary_spec();
        spec.validate()?;
        if spec.is_classification() != (t.kind == TaskKind::Mnist) {
            return Err(Error::Config("[model] primary kind does not fit the task".into()));
        }
        if self.primary.epochs == 0 || self.primary.batch_size == 0 {
            return Err(Error::Config("[primary] epochs and batch_size must be positive".into()));
        }
        self.primary.solver.validate()?;
        let schedule = self.schedule.schedule();
        schedule.validate()?;
        if schedule.mode == EvolutionMode::SupportThenSelfish
            && schedule.support_batch_size > t.gold
        {
            return Err(Error::Config("[schedule] support batch exceeds the gold set".into()));
        }
        let depth = self.e2l_depth();
        if depth > schedule.depth() || (depth < 2 && schedule.depth() >= 2) {
            return Err(Error::Config(format!(
                "[model] e2l_depth {depth} does not fit an evolution of {}",
                schedule.depth()
            )));
        }
        if self.e2l.epochs == 0 || self.e2l.batch_size == 0 {
            return Err(Error::Config("[e2l] epochs and batch_size must be positive".into()));
        }
        self.e2l.solver.validate()?;
        if let Some(a) = &self.e2l.augment {
            a.validate()?;
        }
        if !(0.0..1.0).contains(&self.e2l.floor) {
            return Err(Error::Config("[e2l] floor must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
