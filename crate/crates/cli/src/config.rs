//! The TOML run configuration and command-line overrides.
//!
//! ```toml
//! [generator]   # synthetic corpus: n_utterances, class_probs, n_speakers, ...
//! [model]       # hidden_dim, lstm_hidden, attn_dim, dropout
//! [objective]   # alpha, beta
//! [swfc]        # tau, gamma, variant, weight_mode
//! [train]       # lr, batch_size, epochs, seed, use_mtl, use_coattention,
//!               # use_swfc, fusion_mode, tasks = ["asr", "gender", "speaker"]
//! [ablate]      # seeds = [0, 1, 2], grids = ["components"]
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use emomtl_core::data::GeneratorConfig;
use emomtl_core::evalkit::TableKind;
use emomtl_core::losses::{ObjectiveConfig, SwfcConfig, SwfcVariant, TaskMask};
use emomtl_core::model::{FusionMode, ModelConfig};
use emomtl_core::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Asr,
    Gender,
    Speaker,
}

pub fn task_mask(tasks: &[Task]) -> TaskMask {
    TaskMask {
        asr: tasks.contains(&Task::Asr),
        gender: tasks.contains(&Task::Gender),
        speaker: tasks.contains(&Task::Speaker),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub use_mtl: bool,
    pub use_coattention: bool,
    pub use_swfc: bool,
    pub fusion_mode: FusionMode,
    pub tasks: Vec<Task>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            batch_size: d.batch_size,
            epochs: d.epochs,
            seed: d.seed,
            use_mtl: d.use_mtl,
            use_coattention: d.use_coattention,
            use_swfc: d.use_swfc,
            fusion_mode: d.fusion_mode,
            tasks: vec![Task::Asr, Task::Gender, Task::Speaker],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub grids: Vec<TableKind>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![0, 1, 2],
            grids: vec![TableKind::Components],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub swfc: SwfcConfig,
    pub train: TrainSection,
    pub ablate: AblateSection,
}

/// Overrides shared by the subcommands that build a run configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<SwfcVariant>,
    pub fusion: Option<FusionMode>,
    pub tasks: Option<Vec<Task>>,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Reads `path`, or returns defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Validation(m) => CliError::Validation(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// Applies flag overrides. The seed flag is handled per subcommand.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.variant {
            self.swfc.variant = v;
        }
        if let Some(f) = o.fusion {
            self.train.fusion_mode = f;
        }
        if let Some(t) = &o.tasks {
            self.train.tasks = t.clone();
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            objective: self.objective,
            swfc: self.swfc,
            model: self.model,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            use_mtl: t.use_mtl,
            use_coattention: t.use_coattention,
            use_swfc: t.use_swfc,
            fusion_mode: t.fusion_mode,
            tasks: task_mask(&t.tasks),
        }
    }

    /// Checks every embedded invariant up front.
    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.train_config().validate()?;
        if self.ablate.seeds.is_empty() {
            return Err(CliError::Validation("invalid config `ablate.seeds`: need at least one seed".into()));
        }
        if self.ablate.grids.is_empty() {
            return Err(CliError::Validation("invalid config `ablate.grids`: need at least one grid".into()));
        }
        Ok(())
    }
}
