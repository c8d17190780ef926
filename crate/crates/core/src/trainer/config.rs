//! Experiment configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetConfig;
use crate::error::{ensure, io_err, Result};
use crate::metrics::LossConfig;
use crate::remixer::PairPlacement;
use crate::separator::{Architecture, MaskActivation, StftConfig};
use crate::teacher_student::{UpdateProtocol, ALPHA_SEMI_SUPERVISED, ALPHA_UNSUPERVISED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pit,
    Mixit,
    Remixit,
    Rccl,
    SelfRemixingPair,
    SelfRemixingBatch,
    RemixitPlusSelfRemixing,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Pit,
        Method::Mixit,
        Method::Remixit,
        Method::Rccl,
        Method::SelfRemixingPair,
        Method::SelfRemixingBatch,
        Method::RemixitPlusSelfRemixing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pit => "pit",
            Method::Mixit => "mixit",
            Method::Remixit => "remixit",
            Method::Rccl => "rccl",
            Method::SelfRemixingPair => "self_remixing_pair",
            Method::SelfRemixingBatch => "self_remixing_batch",
            Method::RemixitPlusSelfRemixing => "remixit_plus_self_remixing",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        let norm = s.replace('-', "_");
        Self::ALL.into_iter().find(|m| m.name() == norm)
    }

    /// Methods that separate with a teacher and train a student.
    pub fn uses_teacher(self) -> bool {
        matches!(
            self,
            Method::Remixit
                | Method::SelfRemixingPair
                | Method::SelfRemixingBatch
                | Method::RemixitPlusSelfRemixing
        )
    }

    pub fn remixes_in_batch(self) -> bool {
        matches!(
            self,
            Method::Remixit | Method::SelfRemixingBatch | Method::RemixitPlusSelfRemixing
        )
    }

    pub fn remixes_pairs(self) -> bool {
        matches!(self, Method::Rccl | Method::SelfRemixingPair)
    }

    /// Pretraining methods that start from scratch.
    pub fn is_pretraining(self) -> bool {
        matches!(self, Method::Pit | Method::Mixit)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mixture consistency switches per role. `solver = None` picks the method
/// default: off for RemixIT, on otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McFlags {
    pub shuffler: bool,
    pub solver: Option<bool>,
}

impl Default for McFlags {
    fn default() -> Self {
        Self {
            shuffler: true,
            solver: None,
        }
    }
}

impl McFlags {
    pub fn solver_for(&self, method: Method) -> bool {
        self.solver.unwrap_or(method != Method::Remixit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_n_epochs: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.98,
            every_n_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemixMode {
    Pair,
    InBatch,
}

/// Switches that only exist to reproduce failure modes in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebugConfig {
    /// Lets RCCL remix within the batch (it collapses; see the trainer tests).
    pub allow_rccl_in_batch: bool,
    /// RCCL without gradients through the first separation pass.
    pub rccl_detach_first_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub lr_decay: LrDecay,
    pub epochs: usize,
    /// Stops after this many optimizer updates even mid-epoch.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before each update.
    pub grad_clip: Option<f64>,
    /// EMA coefficient; defaults to 0.8, or 0.9 when semi-supervised.
    pub alpha: Option<f64>,
    pub protocol: UpdateProtocol,
    pub loss: LossConfig,
    /// Sources per mixture (`K`), speech and noise.
    pub n_sources: usize,
    pub n_teacher: usize,
    pub n_student: usize,
    pub n_remix: usize,
    pub mc: McFlags,
    pub placement: PairPlacement,
    /// Remixing scheme; fixed by the method except for RCCL, where in-batch
    /// remixing is refused unless `debug.allow_rccl_in_batch` is set.
    pub remix_mode: Option<RemixMode>,
    pub seed: u64,
    pub semi_supervised: bool,
    /// Weight of the unsupervised term in semi-supervised training.
    pub unsup_weight: f64,
    /// Apply mixture consistency to the top outputs at validation time.
    pub eval_mc: bool,
    pub debug: DebugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Mixit,
            batch_size: 8,
            grad_accum_steps: 1,
            peak_lr: 1e-3,
            warmup_steps: 500,
            lr_decay: LrDecay::default(),
            epochs: 10,
            max_steps: None,
            weight_decay: 1e-2,
            grad_clip: Some(5.0),
            alpha: None,
            protocol: UpdateProtocol::EmaEpochEnd,
            loss: LossConfig::default(),
            n_sources: 3,
            n_teacher: 6,
            n_student: 6,
            n_remix: 3,
            mc: McFlags::default(),
            placement: PairPlacement::default(),
            remix_mode: None,
            seed: 0,
            semi_supervised: false,
            unsup_weight: 1.0,
            eval_mc: false,
            debug: DebugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(if self.semi_supervised {
            ALPHA_SEMI_SUPERVISED
        } else {
            ALPHA_UNSUPERVISED
        })
    }

    pub fn solver_mc(&self) -> bool {
        self.mc.solver_for(self.method)
    }

    /// The remixing scheme in effect, if the method remixes at all.
    pub fn remix_mode(&self) -> Option<RemixMode> {
        let m = self.method;
        if m.remixes_pairs() {
            Some(self.remix_mode.unwrap_or(RemixMode::Pair))
        } else if m.remixes_in_batch() {
            Some(RemixMode::InBatch)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let m = self.method;
        if let Some(requested) = self.remix_mode {
            match (m, requested) {
                (Method::Rccl, RemixMode::InBatch) => ensure!(
                    self.debug.allow_rccl_in_batch,
                    InvalidConfig,
                    "RCCL with in-batch remixing collapses to the trivial solution; \
                     only debug.allow_rccl_in_batch enables it"
                ),
                _ => ensure!(
                    self.remix_mode() == Some(requested),
                    InvalidConfig,
                    "{m} does not support {requested:?} remixing"
                ),
            }
        }
        ensure!(self.batch_size >= 1, InvalidConfig, "batch_size must be positive");
        ensure!(self.grad_accum_steps >= 1, InvalidConfig, "grad_accum_steps must be positive");
        ensure!(
            self.peak_lr > 0.0 && self.peak_lr.is_finite(),
            InvalidConfig,
            "peak_lr must be positive"
        );
        ensure!(
            self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0 && self.lr_decay.every_n_epochs >= 1,
            InvalidConfig,
            "lr_decay needs a factor in (0, 1] and every_n_epochs >= 1"
        );
        ensure!(self.weight_decay >= 0.0, InvalidConfig, "weight_decay must be non-negative");
        ensure!(
            (0.0..=1.0).contains(&self.alpha()),
            InvalidConfig,
            "alpha must lie in [0, 1]"
        );
        ensure!(self.n_sources >= 1, InvalidConfig, "n_sources must be positive");
        ensure!(self.unsup_weight >= 0.0, InvalidConfig, "unsup_weight must be non-negative");
        if m == Method::Mixit {
            ensure!(
                self.n_student >= 2 * self.n_sources,
                InvalidConfig,
                "MixIT needs at least 2K = {} outputs, got {}",
                2 * self.n_sources,
                self.n_student
            );
        }
        if m == Method::Pit {
            ensure!(
                self.n_student >= self.n_sources,
                InvalidConfig,
                "PIT needs at least K = {} outputs",
                self.n_sources
            );
        }
        if m.uses_teacher() || m == Method::Rccl {
            ensure!(
                self.n_remix >= 1 && self.n_remix <= self.n_teacher && self.n_remix <= self.n_student,
                InvalidConfig,
                "n_remix {} must not exceed the teacher ({}) or student ({}) outputs",
                self.n_remix,
                self.n_teacher,
                self.n_student
            );
        }
        if self.remix_mode() == Some(RemixMode::Pair) {
            ensure!(
                self.n_remix.is_multiple_of(2),
                InvalidConfig,
                "{m} needs an even n_remix, got {}",
                self.n_remix
            );
            ensure!(self.batch_size >= 2, InvalidConfig, "{m} needs at least one mixture pair");
        }
        if self.remix_mode() == Some(RemixMode::InBatch) {
            ensure!(
                self.batch_size >= self.n_remix,
                InvalidConfig,
                "{m} needs batch_size >= n_remix ({} < {})",
                self.batch_size,
                self.n_remix
            );
        }
        if m == Method::Rccl {
            ensure!(
                self.n_teacher == self.n_student,
                InvalidConfig,
                "RCCL uses one separator for both roles"
            );
        }
        if self.protocol == UpdateProtocol::EmaEpochEnd && m.uses_teacher() {
            ensure!(
                self.n_teacher == self.n_student,
                InvalidConfig,
                "EMA teacher updates need equal teacher and student outputs"
            );
        }
        if self.semi_supervised {
            ensure!(
                !m.is_pretraining(),
                InvalidConfig,
                "semi-supervised training pairs PIT with an unsupervised method, not {m}"
            );
        }
        Ok(())
    }
}

/// Separator layout shared by all roles (output counts come from the
/// training config).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub context: usize,
    pub mask: MaskActivation,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            hidden: a.hidden,
            context: a.context,
            mask: a.mask,
            stft: a.stft,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, n_outputs: usize) -> Architecture {
        Architecture {
            n_outputs,
            hidden: self.hidden,
            context: self.context,
            mask: self.mask,
            stft: self.stft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.architecture(self.train.n_student).validate()?;
        self.train.validate()
    }
}
