//! Run configuration read from JSON.
//!
//! Every section has defaults, so `{}` is a complete config. Unknown keys are
//! rejected at every level. The published schema lives in
//! `schema/run_config.schema.json`.

use std::path::{Path, PathBuf};

use attnlab_core::attention::{resolve_targets, ArchMode, ScalingPosition};
use attnlab_core::calibration::{
    BlockFixture, FixtureModel, SyntheticCalibration, DEFAULT_HIGH_QUANTILE, DEFAULT_TAU,
};
use attnlab_core::schedule::{BlockGateTable, ScalingMode, ScheduleConfig, StepWindow, WindowPreset};
use attnlab_core::sim::{ConflictConfig, StepCoefficients, ToyDims, SHARPENING_GRID};
use attnlab_core::verify::VerifyConfig;
use attnlab_core::{Seed, ScheduleConfig64, StepCoefficients64};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ATTNLAB_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: OutputConfig,
    pub schedule: ScheduleSection,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub calibrate: CalibrateSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Defaults to JSON for `calibrate` and CSV elsewhere.
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    #[default]
    Scalar,
    Energy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    /// First half of the blocks, rounded up.
    #[default]
    FirstHalf,
    All,
    None,
    /// `schedule.block_indices`.
    Indices,
    /// A published block table, `schedule.fixture`.
    Fixture,
    /// Synthetic calibration run with the `calibrate` section.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub gamma: f64,
    pub mode: ModeKind,
    pub gamma_max: f64,
    pub kappa: f64,
    pub preset: WindowPreset,
    /// Explicit `[low, high]` step fractions; overrides `preset`.
    pub window: Option<[f64; 2]>,
    pub position: ScalingPosition,
    pub arch: ArchMode,
    pub gates: GateSource,
    pub block_indices: Option<Vec<usize>>,
    pub fixture: Option<FixtureModel>,
    pub blocks: usize,
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            gamma: 1.35,
            mode: ModeKind::Scalar,
            gamma_max: attnlab_core::attention::DEFAULT_GAMMA_MAX,
            kappa: attnlab_core::attention::DEFAULT_KAPPA,
            preset: WindowPreset::Early,
            window: None,
            position: ScalingPosition::KeyImageKeyText,
            arch: ArchMode::JointSelfAttention,
            gates: GateSource::FirstHalf,
            block_indices: None,
            fixture: None,
            blocks: 12,
            steps: 25,
        }
    }
}

impl ScheduleSection {
    pub fn window(&self) -> Result<StepWindow, CliError> {
        match self.window {
            Some([low, high]) => Ok(StepWindow::new(low, high)?),
            None => Ok(self.preset.window()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub lemma1_draws: usize,
    pub lemma2_draws: usize,
    pub curvature_draws: usize,
    pub lipschitz_draws: usize,
    pub deviation_probes: usize,
    pub max_queries: usize,
    pub max_keys: usize,
    pub max_dim: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub inject_sign_flip: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        let c = VerifyConfig::default();
        Self {
            lemma1_draws: c.lemma1_draws,
            lemma2_draws: c.lemma2_draws,
            curvature_draws: c.curvature_draws,
            lipschitz_draws: c.lipschitz_draws,
            deviation_probes: c.deviation_probes,
            max_queries: c.max_queries,
            max_keys: c.max_keys,
            max_dim: c.max_dim,
            alpha_low: c.alpha_low,
            alpha_high: c.alpha_high,
            inject_sign_flip: c.inject_sign_flip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Fixed logit vector; random draws when absent.
    pub logits: Option<Vec<f64>>,
    /// Fixed alpha grid; otherwise geometric from `alpha_min` to
    /// `collapse_multiple / gap` per draw.
    pub grid: Option<Vec<f64>>,
    pub draws: usize,
    pub max_keys: usize,
    pub logit_std: f64,
    pub grid_points: usize,
    pub alpha_min: f64,
    pub collapse_multiple: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            logits: None,
            grid: None,
            draws: 32,
            max_keys: 16,
            logit_std: 1.0,
            grid_points: 48,
            alpha_min: 0.25,
            collapse_multiple: 50.0,
        }
    }
}

/// One calibration sample on disk: an ATNB latent `[B, D, T, H, W]`, one
/// ATNB attention matrix per block, and an optional ATNB boolean mask
/// `[T, H, W]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub latent: PathBuf,
    pub attention: Vec<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub tau: f64,
    pub high_quantile: f64,
    pub synthetic: SyntheticCalibration,
    /// File inputs; the synthetic generator is used when empty.
    pub inputs: Vec<SampleFiles>,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, high_quantile: DEFAULT_HIGH_QUANTILE, synthetic: SyntheticCalibration::default(), inputs: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientTable {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictSection {
    pub n_text: usize,
    pub n_img: usize,
    pub n_vid: usize,
    pub boost: f64,
    pub base_std: f64,
    pub sharpening_grid: Vec<f64>,
}

impl Default for ConflictSection {
    fn default() -> Self {
        let c = ConflictConfig::default();
        Self {
            n_text: c.n_text,
            n_img: c.n_img,
            n_vid: c.n_vid,
            boost: c.boost,
            base_std: c.base_std,
            sharpening_grid: SHARPENING_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub dims: ToyDims,
    /// Explicit `a_t`, `b_t`; `a_t = 1`, `b_t = 1/T` when absent.
    pub coefficients: Option<CoefficientTable>,
    pub conflict: ConflictSection,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub preset: Option<WindowPreset>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A preset given on the command line replaces any explicit window in the
    /// file, since it is the later choice.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(g) = o.gamma {
            self.schedule.gamma = g;
        }
        if let Some(t) = o.tau {
            self.calibrate.tau = t;
        }
        if let Some(p) = o.preset {
            self.schedule.preset = p;
            self.schedule.window = None;
        }
        if let Some(d) = &o.out {
            self.output.dir = Some(d.clone());
        }
        if let Some(f) = o.format {
            self.output.format = Some(f);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.schedule;
        if !(s.gamma > 0.0 && s.gamma.is_finite()) {
            return Err(CliError::Config(format!("schedule.gamma must be > 0, got {}", s.gamma)));
        }
        if s.mode == ModeKind::Energy && !(s.gamma_max >= 1.0 && s.kappa > 0.0) {
            return Err(CliError::Config("energy mode needs gamma_max >= 1 and kappa > 0".into()));
        }
        if s.blocks == 0 || s.steps == 0 {
            return Err(CliError::Config("schedule needs blocks >= 1 and steps >= 1".into()));
        }
        s.window()?;
        resolve_targets(s.arch, s.position)?;
        match s.gates {
            GateSource::Indices if s.block_indices.is_none() => {
                return Err(CliError::Config("gates = \"indices\" needs schedule.block_indices".into()))
            }
            GateSource::Fixture if s.fixture.is_none() => {
                return Err(CliError::Config("gates = \"fixture\" needs schedule.fixture".into()))
            }
            GateSource::Calibrated if self.calibrate.synthetic.blocks != s.blocks => {
                return Err(CliError::Config(format!(
                    "calibrated gates need calibrate.synthetic.blocks ({}) == schedule.blocks ({})",
                    self.calibrate.synthetic.blocks, s.blocks
                )))
            }
            _ => {}
        }
        self.verify_config().validate()?;
        let w = &self.sweep;
        if w.grid.as_ref().is_some_and(|g| g.is_empty() || g.iter().any(|&a| !(a > 0.0 && a.is_finite()))) {
            return Err(CliError::Config("sweep.grid must be nonempty with entries > 0".into()));
        }
        if w.logits.as_ref().is_some_and(|z| z.is_empty() || z.iter().any(|x| !x.is_finite())) {
            return Err(CliError::Config("sweep.logits must be nonempty and finite".into()));
        }
        if w.draws == 0 || w.max_keys < 2 || w.grid_points == 0 || !(w.alpha_min > 0.0) || !(w.collapse_multiple > 0.0) {
            return Err(CliError::Config("sweep needs draws >= 1, max_keys >= 2, grid_points >= 1, alpha_min > 0, collapse_multiple > 0".into()));
        }
        if !(w.logit_std > 0.0 && w.logit_std.is_finite()) {
            return Err(CliError::Config("sweep.logit_std must be > 0".into()));
        }
        let c = &self.calibrate;
        if !(0.0..=1.0).contains(&c.tau) || !(c.high_quantile > 0.0 && c.high_quantile <= 1.0) {
            return Err(CliError::Config("calibrate needs tau in [0, 1] and high_quantile in (0, 1]".into()));
        }
        if c.inputs.is_empty() {
            c.synthetic.validate()?;
        }
        self.coefficients()?;
        Ok(())
    }

    pub fn verify_config(&self) -> VerifyConfig {
        let v = &self.verify;
        VerifyConfig {
            seed: self.seed,
            lemma1_draws: v.lemma1_draws,
            lemma2_draws: v.lemma2_draws,
            curvature_draws: v.curvature_draws,
            lipschitz_draws: v.lipschitz_draws,
            deviation_probes: v.deviation_probes,
            max_queries: v.max_queries,
            max_keys: v.max_keys,
            max_dim: v.max_dim,
            alpha_low: v.alpha_low,
            alpha_high: v.alpha_high,
            inject_sign_flip: v.inject_sign_flip,
        }
    }

    pub fn conflict_config(&self) -> ConflictConfig {
        let c = &self.simulate.conflict;
        ConflictConfig {
            n_text: c.n_text,
            n_img: c.n_img,
            n_vid: c.n_vid,
            boost: c.boost,
            base_std: c.base_std,
            gamma: self.schedule.gamma,
            position: self.schedule.position,
            arch: self.schedule.arch,
            sharpening_grid: c.sharpening_grid.clone(),
        }
    }

    pub fn coefficients(&self) -> Result<StepCoefficients64, CliError> {
        let c = match &self.simulate.coefficients {
            Some(t) => StepCoefficients::new(t.a.clone(), t.b.clone())?,
            None => StepCoefficients::linear(self.schedule.steps)?,
        };
        if c.steps() != self.schedule.steps {
            return Err(CliError::Config(format!(
                "simulate.coefficients cover {} steps, schedule.steps is {}",
                c.steps(),
                self.schedule.steps
            )));
        }
        Ok(c)
    }

    pub fn gates(&self) -> Result<BlockGateTable, CliError> {
        let s = &self.schedule;
        Ok(match s.gates {
            GateSource::FirstHalf => BlockGateTable::first_half(s.blocks),
            GateSource::All => BlockGateTable::all(s.blocks),
            GateSource::None => BlockGateTable::none(s.blocks),
            GateSource::Indices => BlockGateTable::from_indices(s.block_indices.as_deref().unwrap_or(&[]), s.blocks)?,
            GateSource::Fixture => {
                let f: BlockFixture = s.fixture.ok_or_else(|| CliError::Config("missing schedule.fixture".into()))?.load()?;
                f.validate(s.blocks).map_err(|e| CliError::Config(e.to_string()))?;
                BlockGateTable::from_indices(&f.blocks, s.blocks)?
            }
            GateSource::Calibrated => {
                let c = &self.calibrate;
                let out = c.synthetic.run(Seed(self.seed), c.tau, c.high_quantile)?;
                BlockGateTable::from_ratios(&out.table, c.tau)?
            }
        })
    }

    pub fn schedule(&self) -> Result<ScheduleConfig64, CliError> {
        let s = &self.schedule;
        let mode = match s.mode {
            ModeKind::Scalar => ScalingMode::Scalar,
            ModeKind::Energy => ScalingMode::Energy { gamma_max: s.gamma_max, kappa: s.kappa },
        };
        let targets = resolve_targets(s.arch, s.position)?;
        Ok(ScheduleConfig::new(s.window()?, self.gates()?, s.gamma, targets, s.steps, s.arch, mode)?)
    }
}
