//! Guidance scheduling: step windows, block gates, and the combined gate that
//! decides how strongly each `(block, step)` cell is modulated.
//!
//! Steps are numbered `1..=T` with `t = 1` the first, highest-noise update.
//! A step's position in the trajectory is `phi(t) = (t - 1) / (T - 1)`
//! (`phi(1) = 0` when `T = 1`), so the window `[0, 1]` covers every step and
//! `[0, 0]` exactly the first. Both window endpoints are inclusive.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_group_scaling, attend, attend_plain, energy_gamma, ArchMode, BlockAttention, KeyPartition, ScalingTargets,
};
use crate::calibration::{select_blocks, BlockRatioTable};
use crate::error::{invalid, Result};
use crate::numkernel::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepWindow {
    low: f64,
    high: f64,
}

impl StepWindow {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
            return Err(invalid(format!("step window needs 0 <= low <= high <= 1, got [{low}, {high}]")));
        }
        Ok(Self { low, high })
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn contains(&self, phi: f64) -> bool {
        phi >= self.low && phi <= self.high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPreset {
    Early,
    Middle,
    Late,
    All,
}

impl WindowPreset {
    pub const ALL: [WindowPreset; 4] = [WindowPreset::Early, WindowPreset::Middle, WindowPreset::Late, WindowPreset::All];

    pub fn window(self) -> StepWindow {
        let (low, high) = match self {
            WindowPreset::Early => (0.00, 0.30),
            WindowPreset::Middle => (0.35, 0.65),
            WindowPreset::Late => (0.70, 1.00),
            WindowPreset::All => (0.0, 1.0),
        };
        StepWindow { low, high }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowPreset::Early => "early",
            WindowPreset::Middle => "middle",
            WindowPreset::Late => "late",
            WindowPreset::All => "all",
        }
    }
}

impl Default for WindowPreset {
    fn default() -> Self {
        WindowPreset::Early
    }
}

impl fmt::Display for WindowPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WindowPreset {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        WindowPreset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown window preset {s:?} (expected early, middle, late or all)")))
    }
}

/// Trajectory position of step `t` out of `total`.
pub fn step_fraction(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t == 0 || t > total {
        return Err(invalid(format!("step {t} outside 1..={total}")));
    }
    if total == 1 {
        return Ok(0.0);
    }
    Ok((t - 1) as f64 / (total - 1) as f64)
}

/// Whether guidance is active at step `t`.
pub fn step_mask(t: usize, total: usize, window: StepWindow) -> Result<bool> {
    Ok(window.contains(step_fraction(t, total)?))
}

/// Active steps of a window, ascending.
pub fn active_steps(total: usize, window: StepWindow) -> Vec<usize> {
    (1..=total).filter(|&t| step_mask(t, total, window).unwrap_or(false)).collect()
}

/// `gamma` when the block's foreground ratio exceeds `tau`, otherwise 1.
pub fn block_gate<T: Scalar>(ratio: f64, tau: f64, gamma: T) -> T {
    if ratio > tau {
        gamma
    } else {
        T::one()
    }
}

/// `m * b * (gamma - 1)`; the embedding factor is `1 + g`.
pub fn combined_gate<T: Scalar>(step_active: bool, block_active: bool, gamma: T) -> T {
    if step_active && block_active {
        gamma - T::one()
    } else {
        T::zero()
    }
}

/// One binary gate per transformer block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGateTable {
    gates: Vec<bool>,
}

impl BlockGateTable {
    pub fn new(gates: Vec<bool>) -> Self {
        Self { gates }
    }

    pub fn all(blocks: usize) -> Self {
        Self { gates: vec![true; blocks] }
    }

    pub fn none(blocks: usize) -> Self {
        Self { gates: vec![false; blocks] }
    }

    /// The first half of the blocks, rounded up.
    pub fn first_half(blocks: usize) -> Self {
        let cut = blocks.div_ceil(2);
        Self { gates: (0..blocks).map(|l| l < cut).collect() }
    }

    pub fn from_indices(indices: &[usize], blocks: usize) -> Result<Self> {
        let mut gates = vec![false; blocks];
        for &i in indices {
            if i >= blocks {
                return Err(invalid(format!("block index {i} out of range for {blocks} blocks")));
            }
            gates[i] = true;
        }
        Ok(Self { gates })
    }

    pub fn from_ratios(table: &BlockRatioTable, tau: f64) -> Result<Self> {
        let selected = select_blocks(table, tau)?;
        Self::from_indices(&selected, table.ratios().len())
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn is_open(&self, block: usize) -> bool {
        self.gates.get(block).copied().unwrap_or(false)
    }

    pub fn open_count(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.gates.len()).filter(|&l| self.gates[l]).collect()
    }
}

/// How the per-call coefficient is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingMode<T> {
    /// Fixed `gamma` from the schedule.
    Scalar,
    /// Coefficient recomputed per attention call from the unscaled logits.
    Energy { gamma_max: T, kappa: T },
}

#[derive(Debug, Clone)]
pub struct ScheduleConfig<T> {
    pub window: StepWindow,
    pub gates: BlockGateTable,
    pub gamma: T,
    pub targets: ScalingTargets,
    pub total_steps: usize,
    pub arch: ArchMode,
    pub mode: ScalingMode<T>,
}

impl<T: Scalar> ScheduleConfig<T> {
    pub fn new(
        window: StepWindow,
        gates: BlockGateTable,
        gamma: T,
        targets: ScalingTargets,
        total_steps: usize,
        arch: ArchMode,
        mode: ScalingMode<T>,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return Err(invalid(format!("gamma must be > 0, got {gamma}")));
        }
        targets.validate(arch)?;
        Ok(Self { window, gates, gamma, targets, total_steps, arch, mode })
    }

    /// Schedule that never modulates.
    pub fn identity(blocks: usize, total_steps: usize, arch: ArchMode) -> Result<Self> {
        Self::new(
            WindowPreset::All.window(),
            BlockGateTable::none(blocks),
            T::one(),
            ScalingTargets::default(),
            total_steps,
            arch,
            ScalingMode::Scalar,
        )
    }

    pub fn blocks(&self) -> usize {
        self.gates.len()
    }

    pub fn step_active(&self, t: usize) -> Result<bool> {
        step_mask(t, self.total_steps, self.window)
    }

    /// Scalar-mode gate `g` for a cell.
    pub fn gate(&self, block: usize, t: usize) -> Result<T> {
        self.check_cell(block, t)?;
        Ok(combined_gate(self.step_active(t)?, self.gates.is_open(block), self.gamma))
    }

    /// Whether the schedule can change anything: it targets some group and,
    /// in scalar mode, `gamma != 1`.
    pub fn modulates(&self) -> bool {
        self.targets.affected().any() && !(matches!(self.mode, ScalingMode::Scalar) && self.gamma == T::one())
    }

    /// Whether a cell is modulated at all.
    pub fn cell_active(&self, block: usize, t: usize) -> Result<bool> {
        self.check_cell(block, t)?;
        Ok(self.step_active(t)? && self.gates.is_open(block) && self.modulates())
    }

    fn check_cell(&self, block: usize, t: usize) -> Result<()> {
        if block >= self.gates.len() {
            return Err(invalid(format!("block {block} outside 0..{}", self.gates.len())));
        }
        if t == 0 || t > self.total_steps {
            return Err(invalid(format!("step {t} outside 1..={}", self.total_steps)));
        }
        Ok(())
    }

    pub fn active_steps(&self) -> Vec<usize> {
        active_steps(self.total_steps, self.window)
    }
}

#[derive(Debug, Clone)]
pub struct ScheduledAttention<T> {
    pub attention: BlockAttention<T>,
    /// Embedding factor applied to the targeted groups (1 when inactive).
    pub factor: T,
    /// Extra multiplications spent on scaling in this call.
    pub scale_multiplications: u64,
}

/// Attention for block `block` at step `t` under the schedule.
///
/// Computes `g = m(t) b(block) (gamma - 1)`, scales the targeted groups by
/// `1 + g` and attends. A zero gate returns plain attention untouched.
pub fn scheduled_attention<T: Scalar>(
    block: usize,
    t: usize,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    partition: &KeyPartition,
    config: &ScheduleConfig<T>,
) -> Result<ScheduledAttention<T>> {
    let d_k = q.cols();
    let step_on = {
        config.check_cell(block, t)?;
        config.step_active(t)?
    };
    let block_on = config.gates.is_open(block);

    let gate = match config.mode {
        ScalingMode::Scalar => combined_gate(step_on, block_on, config.gamma),
        ScalingMode::Energy { gamma_max, kappa } => {
            if step_on && block_on {
                let logits = q.matmul_transposed(k)?.scale(T::one() / T::count(d_k).sqrt());
                combined_gate(true, true, energy_gamma(&logits, gamma_max, kappa)?)
            } else {
                T::zero()
            }
        }
    };

    if gate == T::zero() || !config.targets.affected().any() {
        let attention = attend_plain(q, k, v, partition, d_k, config.arch)?;
        return Ok(ScheduledAttention { attention, factor: T::one(), scale_multiplications: 0 });
    }
    let factor = T::one() + gate;
    let scaled = apply_group_scaling(q, k, partition, &config.targets, factor, config.arch)?;
    let attention = attend(&scaled, v, partition, d_k, config.arch)?;
    Ok(ScheduledAttention { attention, factor, scale_multiplications: scaled.multiplications })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_forward, build_partition, GroupFlags};
    use crate::numkernel::{sample_gaussian, Seed};
    use proptest::prelude::*;

    fn w(low: f64, high: f64) -> StepWindow {
        StepWindow::new(low, high).unwrap()
    }

    #[test]
    fn early_window_at_25_steps() {
        assert_eq!(active_steps(25, WindowPreset::Early.window()), (1..=8).collect::<Vec<_>>());
        assert!(step_mask(8, 25, WindowPreset::Early.window()).unwrap());
        assert!(!step_mask(9, 25, WindowPreset::Early.window()).unwrap());
    }

    #[test]
    fn full_window_and_middle_first_step() {
        assert!((1..=25).all(|t| step_mask(t, 25, w(0.0, 1.0)).unwrap()));
        assert!(!step_mask(1, 25, w(0.35, 0.65)).unwrap());
        assert_eq!(active_steps(1, w(0.0, 0.0)), vec![1]);
        assert_eq!(active_steps(5, w(0.0, 0.0)), vec![1]);
    }

    #[test]
    fn step_out_of_range() {
        assert!(step_mask(0, 10, w(0.0, 1.0)).is_err());
        assert!(step_mask(11, 10, w(0.0, 1.0)).is_err());
    }

    #[test]
    fn window_validation_and_presets() {
        assert!(StepWindow::new(0.5, 0.4).is_err());
        assert!(StepWindow::new(-0.1, 0.4).is_err());
        assert!(StepWindow::new(0.1, 1.2).is_err());
        assert_eq!("Middle".parse::<WindowPreset>().unwrap(), WindowPreset::Middle);
        assert!("sometimes".parse::<WindowPreset>().is_err());
        assert_eq!(WindowPreset::default(), WindowPreset::Early);
    }

    #[test]
    fn block_gate_examples() {
        assert_eq!(block_gate(0.6, 0.5, 1.35), 1.35);
        assert_eq!(block_gate(0.5, 0.5, 1.35), 1.0);
        assert_eq!(block_gate(0.9, 0.5, 1.0), 1.0);
        assert_eq!(block_gate(0.1, 0.5, 1.0), 1.0);
    }

    #[test]
    fn combined_gate_examples() {
        assert!((combined_gate(true, true, 1.35f64) - 0.35).abs() < 1e-15);
        assert_eq!(combined_gate(false, true, 1.35f64), 0.0);
        assert_eq!(combined_gate(true, false, 2.0f64), 0.0);
    }

    #[test]
    fn gate_tables() {
        assert_eq!(BlockGateTable::first_half(8).indices(), vec![0, 1, 2, 3]);
        assert_eq!(BlockGateTable::first_half(5).indices(), vec![0, 1, 2]);
        assert!(BlockGateTable::from_indices(&[0, 9], 8).is_err());
        let t = BlockRatioTable::new(vec![0.7, 0.4, 0.51], 1).unwrap();
        assert_eq!(BlockGateTable::from_ratios(&t, 0.5).unwrap().indices(), vec![0, 2]);
    }

    fn inputs(seed: u64) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>, KeyPartition) {
        let s = Seed(seed);
        let p = build_partition(3, 4, 5).unwrap();
        (
            sample_gaussian(5, 4, s.derive(0), 0.0, 1.0).unwrap(),
            sample_gaussian(12, 4, s.derive(1), 0.0, 1.0).unwrap(),
            sample_gaussian(12, 3, s.derive(2), 0.0, 1.0).unwrap(),
            p,
        )
    }

    fn config(gamma: f64, window: StepWindow, gates: BlockGateTable) -> ScheduleConfig<f64> {
        ScheduleConfig::new(
            window,
            gates,
            gamma,
            ScalingTargets::keys(GroupFlags::CONDITIONING),
            25,
            ArchMode::JointSelfAttention,
            ScalingMode::Scalar,
        )
        .unwrap()
    }

    fn bits(m: &Matrix<f64>) -> Vec<u64> {
        m.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn inactive_step_is_plain_attention() {
        let (q, k, v, p) = inputs(1);
        let cfg = config(1.35, WindowPreset::Early.window(), BlockGateTable::all(4));
        let r = scheduled_attention(0, 20, &q, &k, &v, &p, &cfg).unwrap();
        let plain = attention_forward(&q, &k, &v, 4).unwrap();
        assert_eq!(bits(r.attention.output()), bits(&plain.output));
        assert_eq!(r.scale_multiplications, 0);
    }

    #[test]
    fn active_cell_scales_conditioning_logits() {
        let (q, k, v, p) = inputs(2);
        let cfg = config(1.35, WindowPreset::Early.window(), BlockGateTable::all(4));
        let r = scheduled_attention(1, 3, &q, &k, &v, &p, &cfg).unwrap();
        assert!((r.factor - 1.35).abs() < 1e-15);
        let BlockAttention::Joint(res) = &r.attention else { panic!("joint expected") };
        let plain = attention_forward(&q, &k, &v, 4).unwrap();
        for i in 0..5 {
            for j in 0..12 {
                let want = if p.group_of(j).is_conditioning() { r.factor * plain.logits.get(i, j) } else { plain.logits.get(i, j) };
                assert!((res.logits.get(i, j) - want).abs() <= 1e-13);
            }
        }
        assert_eq!(r.scale_multiplications, 7 * 4);
    }

    #[test]
    fn energy_mode_uses_logit_mean() {
        let (q, k, v, p) = inputs(3);
        let mut cfg = config(1.35, WindowPreset::All.window(), BlockGateTable::all(2));
        cfg.mode = ScalingMode::Energy { gamma_max: 1.5, kappa: 1.0 };
        let r = scheduled_attention(0, 1, &q, &k, &v, &p, &cfg).unwrap();
        let plain = attention_forward(&q, &k, &v, 4).unwrap();
        let want = energy_gamma(&plain.logits, 1.5, 1.0).unwrap();
        assert!((r.factor - want).abs() < 1e-14);
        assert!(r.factor > 1.0 && r.factor < 1.5);
    }

    #[test]
    fn cell_range_checked() {
        let (q, k, v, p) = inputs(4);
        let cfg = config(1.35, WindowPreset::Early.window(), BlockGateTable::all(2));
        assert!(scheduled_attention(2, 1, &q, &k, &v, &p, &cfg).is_err());
        assert!(scheduled_attention(0, 26, &q, &k, &v, &p, &cfg).is_err());
    }

    #[test]
    fn sharpening_within_conditioning_block() {
        let (q, k, v, p) = inputs(5);
        let cond = p.conditioning();
        let cfg_one = config(1.0, WindowPreset::All.window(), BlockGateTable::all(1));
        let cfg_up = config(1.6, WindowPreset::All.window(), BlockGateTable::all(1));
        let base = scheduled_attention(0, 1, &q, &k, &v, &p, &cfg_one).unwrap().attention.effective_probabilities(&p);
        let up = scheduled_attention(0, 1, &q, &k, &v, &p, &cfg_up).unwrap().attention.effective_probabilities(&p);
        for i in 0..5 {
            let restricted_max = |m: &Matrix<f64>| {
                let tot: f64 = cond.iter().map(|&j| m.get(i, j)).sum();
                cond.iter().map(|&j| m.get(i, j) / tot).fold(0.0, f64::max)
            };
            assert!(restricted_max(&up) > restricted_max(&base));
        }
    }

    /// Brute-force oracle: exact rational comparison (t-1)/(T-1) <= num/den.
    fn oracle_count(total: usize, num: usize, den: usize) -> usize {
        (1..=total)
            .filter(|&t| if total == 1 { true } else { (t - 1) * den <= num * (total - 1) })
            .count()
    }

    #[test]
    fn active_step_count_matches_enumeration() {
        for total in 1..=100 {
            for (num, den) in [(0, 10), (3, 10), (1, 2), (65, 100), (7, 10), (1, 1), (1, 3), (2, 7)] {
                let wnd = w(0.0, num as f64 / den as f64);
                assert_eq!(active_steps(total, wnd).len(), oracle_count(total, num, den), "T={total} w={num}/{den}");
            }
        }
    }

    proptest! {
        #[test]
        fn identity_schedules_are_bit_exact(seed in 0u64..5000, block in 0usize..4, t in 1usize..=25, which in 0usize..3) {
            let (q, k, v, p) = inputs(seed);
            let cfg = match which {
                0 => config(1.0, WindowPreset::All.window(), BlockGateTable::all(4)),
                1 => config(1.35, WindowPreset::All.window(), BlockGateTable::none(4)),
                _ => {
                    // Window containing no step of a 25-step grid.
                    config(1.35, w(0.01, 0.02), BlockGateTable::all(4))
                }
            };
            let r = scheduled_attention(block, t, &q, &k, &v, &p, &cfg).unwrap();
            let plain = attention_forward(&q, &k, &v, 4).unwrap();
            prop_assert_eq!(bits(r.attention.output()), bits(&plain.output));
        }

        #[test]
        fn widening_never_deactivates(total in 1usize..60, lo in 0.0f64..1.0, hi in 0.0f64..1.0, dl in 0.0f64..0.5, dh in 0.0f64..0.5) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let narrow = w(lo, hi);
            let wide = w((lo - dl).max(0.0), (hi + dh).min(1.0));
            for t in active_steps(total, narrow) {
                prop_assert!(step_mask(t, total, wide).unwrap());
            }
        }
    }
}
