//! Toy denoising pipeline over a stack of attention blocks.
//!
//! The denoiser state is the video token matrix `x` (`n_vid x d_v`). Every
//! block attends from `x` to the concatenation of fixed text embeddings, fixed
//! image embeddings and `x` itself; its output `y_l` feeds a linear chain
//! `u_l = (u_{l-1} + y_l) W_o^(l)`, and the noise estimate is `u_L`.
//! Sampling applies `x <- a_t x + b_t eps(x, t)` for `t = 1..=T`, where `t = 1`
//! is the first (noisiest) step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{entropy, group_mass_report, within, GroupMassReport};
use crate::attention::{
    apply_group_scaling, attend, attend_plain, build_partition, resolve_targets, ArchMode, BlockAttention,
    GroupFlags, KeyPartition, ScalingPosition, ScalingTargets, TokenGroup,
};
use crate::error::{invalid, Error, Result};
use crate::numkernel::{fill_gaussian, spectral_norm, Matrix, Seed};
use crate::scalar::{norm2, Scalar};
use crate::schedule::{scheduled_attention, ScheduleConfig};

/// Restricted log-probability spread below which a query's conditioning
/// logits count as flat.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDims {
    pub n_text: usize,
    pub n_img: usize,
    pub n_vid: usize,
    pub d_k: usize,
    /// Value and model width.
    pub d_v: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self { n_text: 4, n_img: 6, n_vid: 6, d_k: 8, d_v: 8 }
    }
}

impl ToyDims {
    pub fn keys(&self) -> usize {
        self.n_text + self.n_img + self.n_vid
    }

    fn validate(&self) -> Result<()> {
        if self.n_vid == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(invalid(format!("toy dims need n_vid, d_k, d_v >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    /// Post-attention map.
    pub w_o: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<T> {
    dims: ToyDims,
    blocks: Vec<ToyBlock<T>>,
    text: Matrix<T>,
    image: Matrix<T>,
    partition: KeyPartition,
    lipschitz_upper: T,
}

pub fn make_toy_denoiser<T: Scalar>(seed: Seed, blocks: usize, dims: ToyDims) -> Result<ToyDenoiser<T>> {
    if blocks == 0 {
        return Err(invalid("toy denoiser needs at least one block"));
    }
    dims.validate()?;
    let mut rng = seed.rng();
    let std = T::one() / T::count(dims.d_k).sqrt();
    let mut gaussian = |rows: usize, cols: usize| fill_gaussian(rows, cols, &mut rng, T::zero(), std);
    let text = gaussian(dims.n_text, dims.d_v)?;
    let image = gaussian(dims.n_img, dims.d_v)?;
    let mut stack = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        stack.push(ToyBlock {
            w_q: gaussian(dims.d_v, dims.d_k)?,
            w_k: gaussian(dims.d_v, dims.d_k)?,
            w_v: gaussian(dims.d_v, dims.d_v)?,
            w_o: gaussian(dims.d_v, dims.d_v)?,
        });
    }
    ToyDenoiser::from_parts(dims, stack, text, image)
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn from_parts(dims: ToyDims, blocks: Vec<ToyBlock<T>>, text: Matrix<T>, image: Matrix<T>) -> Result<Self> {
        dims.validate()?;
        if blocks.is_empty() {
            return Err(invalid("toy denoiser needs at least one block"));
        }
        if text.shape() != (dims.n_text, dims.d_v) || image.shape() != (dims.n_img, dims.d_v) {
            return Err(Error::DimensionMismatch {
                context: "ToyDenoiser",
                expected: format!("text {}x{}, image {}x{}", dims.n_text, dims.d_v, dims.n_img, dims.d_v),
                found: format!("text {:?}, image {:?}", text.shape(), image.shape()),
            });
        }
        let mut lipschitz_upper = T::one();
        for (l, b) in blocks.iter().enumerate() {
            let shapes = [b.w_q.shape(), b.w_k.shape(), b.w_v.shape(), b.w_o.shape()];
            let want = [(dims.d_v, dims.d_k), (dims.d_v, dims.d_k), (dims.d_v, dims.d_v), (dims.d_v, dims.d_v)];
            if shapes != want {
                return Err(Error::DimensionMismatch {
                    context: "ToyDenoiser block",
                    expected: format!("{want:?}"),
                    found: format!("block {l}: {shapes:?}"),
                });
            }
            lipschitz_upper *= spectral_norm(&b.w_o)?.max(T::one());
        }
        let partition = build_partition(dims.n_text, dims.n_img, dims.n_vid)?;
        Ok(Self { dims, blocks, text, image, partition, lipschitz_upper })
    }

    pub fn dims(&self) -> ToyDims {
        self.dims
    }

    pub fn blocks(&self) -> &[ToyBlock<T>] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn partition(&self) -> &KeyPartition {
        &self.partition
    }

    /// `prod_l max(1, ||W_o^(l)||_2)`, a Lipschitz constant of the noise
    /// estimate in any single block's attention output.
    pub fn lipschitz_upper(&self) -> T {
        self.lipschitz_upper
    }

    /// `(Q, K, V)` of block `l` for state `x`.
    pub fn projections(&self, l: usize, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        if x.shape() != (self.dims.n_vid, self.dims.d_v) {
            return Err(Error::DimensionMismatch {
                context: "ToyDenoiser state",
                expected: format!("{}x{}", self.dims.n_vid, self.dims.d_v),
                found: format!("{}x{}", x.rows(), x.cols()),
            });
        }
        let b = &self.blocks[l];
        let tokens = Matrix::vstack(&[&self.text, &self.image, x])?;
        Ok((x.matmul(&b.w_q)?, tokens.matmul(&b.w_k)?, tokens.matmul(&b.w_v)?))
    }

    /// Noise estimate from per-block attention outputs.
    pub fn head(&self, ys: &[Matrix<T>]) -> Result<Matrix<T>> {
        if ys.len() != self.blocks.len() {
            return Err(invalid(format!("head needs {} block outputs, got {}", self.blocks.len(), ys.len())));
        }
        let mut u = Matrix::zeros(self.dims.n_vid, self.dims.d_v);
        for (y, b) in ys.iter().zip(&self.blocks) {
            u = u.add(y)?.matmul(&b.w_o)?;
        }
        Ok(u)
    }

    /// Seeded Gaussian starting state.
    pub fn initial_state(&self, seed: Seed) -> Result<Matrix<T>> {
        fill_gaussian(self.dims.n_vid, self.dims.d_v, &mut seed.rng(), T::zero(), T::one())
    }

    fn attention_multiplications(&self) -> u64 {
        (self.dims.n_vid * self.dims.keys() * (self.dims.d_k + self.dims.d_v)) as u64
    }

    fn forward(&self, x: &Matrix<T>, t: usize, schedule: &ScheduleConfig<T>, probe: Option<(Probe, T)>) -> Result<Forward<T>> {
        if schedule.blocks() != self.blocks.len() {
            return Err(invalid(format!(
                "schedule gates {} blocks but the denoiser has {}",
                schedule.blocks(),
                self.blocks.len()
            )));
        }
        let mut cells = Vec::with_capacity(self.blocks.len());
        let mut ys = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let (mut q, k, v) = self.projections(l, x)?;
            if let Some((p, alpha)) = probe.filter(|(p, _)| p.block == l) {
                q = scale_row(&q, p.query, alpha)?;
            }
            let run = scheduled_attention(l, t, &q, &k, &v, &self.partition, schedule)?;
            let baseline = if run.scale_multiplications > 0 {
                Some(attend_plain(&q, &k, &v, &self.partition, q.cols(), schedule.arch)?)
            } else {
                None
            };
            ys.push(run.attention.output().clone());
            cells.push(CellTrace {
                attention: run.attention,
                baseline,
                factor: run.factor,
                scale_multiplications: run.scale_multiplications,
                attention_multiplications: self.attention_multiplications(),
                values: v,
            });
        }
        Ok(Forward { eps: self.head(&ys)?, cells })
    }

    /// Measured `||eps(y1) - eps(y2)|| / ||y1 - y2||` for seeded pairs that
    /// differ in one block's output, with that block's analytic constant.
    pub fn lipschitz_samples(&self, seed: Seed, pairs: usize) -> Result<Vec<LipschitzSample<T>>> {
        let mut rng = seed.rng();
        let (n, d) = (self.dims.n_vid, self.dims.d_v);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| fill_gaussian(n, d, rng, T::zero(), T::one());
        let mut out = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let ys: Vec<Matrix<T>> = (0..self.blocks.len()).map(|_| draw(&mut rng)).collect::<Result<_>>()?;
            let block = rng.random_range(0..self.blocks.len());
            let mut alt = ys.clone();
            alt[block] = draw(&mut rng)?;
            let num = self.head(&ys)?.sub(&self.head(&alt)?)?.frobenius_norm();
            let den = ys[block].sub(&alt[block])?.frobenius_norm();
            out.push(LipschitzSample { block, ratio: num / den, bound: self.lipschitz_upper });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzSample<T> {
    pub block: usize,
    pub ratio: T,
    pub bound: T,
}

fn scale_row<T: Scalar>(m: &Matrix<T>, row: usize, alpha: T) -> Result<Matrix<T>> {
    if row >= m.rows() {
        return Err(invalid(format!("probe query {row} outside 0..{}", m.rows())));
    }
    let mut out = m.clone();
    for x in out.row_mut(row) {
        *x *= alpha;
    }
    Ok(out)
}

struct Forward<T> {
    eps: Matrix<T>,
    cells: Vec<CellTrace<T>>,
}

struct CellTrace<T> {
    attention: BlockAttention<T>,
    /// Unmodulated attention, kept for cells that were modulated.
    baseline: Option<BlockAttention<T>>,
    factor: T,
    scale_multiplications: u64,
    attention_multiplications: u64,
    values: Matrix<T>,
}

/// `x_{t-1} = a_t x_t + b_t eps` coefficients, indexed by step `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepCoefficients<T> {
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> StepCoefficients<T> {
    pub fn new(a: Vec<T>, b: Vec<T>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(invalid(format!("step coefficients need equal nonzero lengths, got {} and {}", a.len(), b.len())));
        }
        if a.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("step coefficients"));
        }
        Ok(Self { a, b })
    }

    /// `a_t = 1`, `b_t = 1/T`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("need at least one step"));
        }
        let b = T::one() / T::count(steps);
        Self::new(vec![T::one(); steps], vec![b; steps])
    }

    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self, t: usize) -> Result<T> {
        self.check(t).map(|_| self.a[t - 1])
    }

    pub fn b(&self, t: usize) -> Result<T> {
        self.check(t).map(|_| self.b[t - 1])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.a.len() {
            return Err(invalid(format!("step {t} outside 1..={}", self.a.len())));
        }
        Ok(())
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord<T> {
    pub t: usize,
    pub step_active: bool,
    /// Group masses and conditioning entropy averaged over blocks and queries.
    pub masses: GroupMassReport<T>,
    /// `H_mod / H_base` over the scaled conditioning keys, across modulated
    /// cells and non-degenerate queries; `None` when nothing was modulated.
    pub entropy_ratio_max: Option<T>,
    pub entropy_ratio_mean: Option<T>,
    pub nondegenerate_queries: usize,
    pub degenerate_queries: usize,
    pub scale_multiplications: Vec<u64>,
    pub attention_multiplications: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// `states[0]` is the initial state; `states[t]` follows step `t`.
    pub states: Vec<Matrix<T>>,
    pub steps: Vec<StepRecord<T>>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub next: Matrix<T>,
    pub record: StepRecord<T>,
}

/// Conditioning groups whose logits the schedule scales.
fn scaled_conditioning(targets: &ScalingTargets, arch: ArchMode) -> GroupFlags {
    let n = targets.normalized(arch);
    let mut flags = match arch {
        ArchMode::JointSelfAttention => n.key,
        ArchMode::FactorizedCrossAttention => n.key.union(n.query),
    };
    flags.video = false;
    flags
}

/// Spread of query `i`'s conditioning logits over the given groups, per
/// softmax they enter: joint attention pools them, factorized attention keeps
/// one softmax per stream.
fn conditioning_spread<T: Scalar>(att: &BlockAttention<T>, partition: &KeyPartition, groups: GroupFlags, i: usize) -> T {
    let spread = |vals: &mut dyn Iterator<Item = T>| {
        let (lo, hi) = vals.fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi >= lo { hi - lo } else { T::zero() }
    };
    match att {
        BlockAttention::Joint(r) => {
            let keys = partition.union(groups);
            spread(&mut keys.iter().map(|&j| r.logits.get(i, j)))
        }
        BlockAttention::Factorized(s) => s
            .streams
            .iter()
            .filter(|(g, _)| groups.get(*g))
            .map(|(_, r)| spread(&mut r.logits.row(i).iter().copied()))
            .fold(T::zero(), T::max),
    }
}

/// Attention of query `i` renormalised over `keys`.
fn restricted_row<T: Scalar>(p: &Matrix<T>, i: usize, keys: &[usize]) -> Vec<T> {
    let total: T = keys.iter().map(|&j| p.get(i, j)).sum();
    keys.iter().map(|&j| p.get(i, j) / total).collect()
}

fn mean_masses<T: Scalar>(reports: &[GroupMassReport<T>]) -> GroupMassReport<T> {
    let n = T::count(reports.len().max(1));
    let avg = |f: fn(&GroupMassReport<T>) -> T| reports.iter().map(f).sum::<T>() / n;
    GroupMassReport {
        mass_text: avg(|r| r.mass_text),
        mass_image: avg(|r| r.mass_image),
        mass_video: avg(|r| r.mass_video),
        entropy_cond: avg(|r| r.entropy_cond),
    }
}

pub fn ddim_step<T: Scalar>(
    x_t: &Matrix<T>,
    t: usize,
    coeffs: &StepCoefficients<T>,
    denoiser: &ToyDenoiser<T>,
    schedule: &ScheduleConfig<T>,
) -> Result<StepOutcome<T>> {
    let (a, b) = (coeffs.a(t)?, coeffs.b(t)?);
    let fwd = denoiser.forward(x_t, t, schedule, None)?;
    let next = x_t.scale(a).add(&fwd.eps.scale(b))?;
    if !next.all_finite() {
        return Err(Error::NonFinite("denoiser state"));
    }

    let partition = denoiser.partition();
    let groups = scaled_conditioning(&schedule.targets, schedule.arch);
    let scaled_keys = partition.union(groups);
    let mut masses = Vec::new();
    let mut ratios = Vec::new();
    let mut degenerate = 0;
    for cell in &fwd.cells {
        let p = cell.attention.effective_probabilities(partition);
        for i in 0..p.rows() {
            masses.push(group_mass_report(p.row(i), partition)?);
        }
        let Some(base) = &cell.baseline else { continue };
        if scaled_keys.len() < 2 || cell.factor == T::one() {
            continue;
        }
        let pb = base.effective_probabilities(partition);
        for i in 0..p.rows() {
            if conditioning_spread(base, partition, groups, i) <= T::lit(DEGENERATE_SPREAD) {
                degenerate += 1;
                continue;
            }
            let h_mod = entropy(&restricted_row(&p, i, &scaled_keys))?;
            let h_base = entropy(&restricted_row(&pb, i, &scaled_keys))?;
            ratios.push(h_mod / h_base);
        }
    }
    let record = StepRecord {
        t,
        step_active: schedule.step_active(t)?,
        masses: mean_masses(&masses),
        entropy_ratio_max: ratios.iter().copied().reduce(T::max),
        entropy_ratio_mean: (!ratios.is_empty()).then(|| ratios.iter().copied().sum::<T>() / T::count(ratios.len())),
        nondegenerate_queries: ratios.len(),
        degenerate_queries: degenerate,
        scale_multiplications: fwd.cells.iter().map(|c| c.scale_multiplications).collect(),
        attention_multiplications: fwd.cells.iter().map(|c| c.attention_multiplications).collect(),
    };
    Ok(StepOutcome { next, record })
}

pub fn run_trajectory<T: Scalar>(
    denoiser: &ToyDenoiser<T>,
    coeffs: &StepCoefficients<T>,
    schedule: &ScheduleConfig<T>,
    initial: Matrix<T>,
) -> Result<Trajectory<T>> {
    if coeffs.steps() != schedule.total_steps {
        return Err(invalid(format!(
            "coefficients cover {} steps, schedule {}",
            coeffs.steps(),
            schedule.total_steps
        )));
    }
    let mut states = Vec::with_capacity(coeffs.steps() + 1);
    let mut steps = Vec::with_capacity(coeffs.steps());
    states.push(initial);
    for t in 1..=coeffs.steps() {
        let out = ddim_step(&states[t - 1], t, coeffs, denoiser, schedule)?;
        states.push(out.next);
        steps.push(out.record);
    }
    Ok(Trajectory { states, steps })
}

/// Single block/query at which uniform logit scaling is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub block: usize,
    pub query: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationReport<T> {
    pub t: usize,
    pub alpha: T,
    pub probe: Probe,
    /// `||x'_{t-1} - x_{t-1}||_F`.
    pub deviation: T,
    /// `|b_t| L_y 1/2 ||V||_2 ||z||_2 |alpha - 1|`.
    pub bound: T,
    pub margin: T,
    pub holds: bool,
    pub b_t: T,
    pub lipschitz_upper: T,
    pub value_norm: T,
    pub logit_norm: T,
}

/// Compares one step run plainly and with the probe query's logits scaled by
/// `alpha` (its query row multiplied by `alpha`) in joint attention.
pub fn deviation_bound_check<T: Scalar>(
    denoiser: &ToyDenoiser<T>,
    coeffs: &StepCoefficients<T>,
    t: usize,
    x_t: &Matrix<T>,
    alpha: T,
    probe: Probe,
) -> Result<DeviationReport<T>> {
    deviation_check_inner(denoiser, coeffs, t, x_t, alpha, probe, false)
}

/// `flip` negates the probe's scaling, a fault the bound must catch.
pub(crate) fn deviation_check_inner<T: Scalar>(
    denoiser: &ToyDenoiser<T>,
    coeffs: &StepCoefficients<T>,
    t: usize,
    x_t: &Matrix<T>,
    alpha: T,
    probe: Probe,
    flip: bool,
) -> Result<DeviationReport<T>> {
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be > 0, got {alpha}")));
    }
    if probe.block >= denoiser.block_count() || probe.query >= denoiser.dims().n_vid {
        return Err(invalid(format!("probe {probe:?} outside the denoiser")));
    }
    let schedule = ScheduleConfig::identity(denoiser.block_count(), coeffs.steps(), ArchMode::JointSelfAttention)?;
    let (a, b) = (coeffs.a(t)?, coeffs.b(t)?);
    let base = denoiser.forward(x_t, t, &schedule, None)?;
    let applied = if flip { -alpha } else { alpha };
    let moved = denoiser.forward(x_t, t, &schedule, Some((probe, applied)))?;
    let x0 = x_t.scale(a).add(&base.eps.scale(b))?;
    let x1 = x_t.scale(a).add(&moved.eps.scale(b))?;
    let deviation = x1.sub(&x0)?.frobenius_norm();

    let cell = &base.cells[probe.block];
    let BlockAttention::Joint(r) = &cell.attention else {
        return Err(invalid("deviation probe expects joint attention"));
    };
    let value_norm = spectral_norm(&cell.values)?;
    let logit_norm = norm2(r.logits.row(probe.query));
    let bound = b.abs() * denoiser.lipschitz_upper() * T::lit(0.5) * value_norm * logit_norm * (alpha - T::one()).abs();
    Ok(DeviationReport {
        t,
        alpha,
        probe,
        deviation,
        bound,
        margin: bound - deviation,
        holds: within(deviation, bound),
        b_t: b,
        lipschitz_upper: denoiser.lipschitz_upper(),
        value_norm,
        logit_norm,
    })
}

/// Default `gamma` grid of the sharpening check.
pub const SHARPENING_GRID: [f64; 4] = [1.0, 1.15, 1.25, 1.35];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictConfig {
    pub n_text: usize,
    pub n_img: usize,
    pub n_vid: usize,
    /// Added to every image-key logit; a proxy for prompt/image conflict.
    pub boost: f64,
    pub base_std: f64,
    pub gamma: f64,
    pub position: ScalingPosition,
    pub arch: ArchMode,
    pub sharpening_grid: Vec<f64>,
}

impl Default for ConflictConfig {
    fn default() -> Self {
        Self {
            n_text: 8,
            n_img: 16,
            n_vid: 8,
            boost: 2.0,
            base_std: 1.0,
            gamma: 1.35,
            position: ScalingPosition::KeyImageKeyText,
            arch: ArchMode::JointSelfAttention,
            sharpening_grid: SHARPENING_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConflictQuery<T> {
    pub query: usize,
    pub base: GroupMassReport<T>,
    pub modulated: GroupMassReport<T>,
    /// Entropy over the scaled conditioning keys before and after scaling.
    pub entropy_base: T,
    pub entropy_mod: T,
    pub degenerate: bool,
    pub argmax_base: TokenGroup,
    pub argmax_mod: TokenGroup,
    /// Largest restricted probability over the scaled conditioning keys at each
    /// grid coefficient.
    pub sharpening: Vec<T>,
    pub sharpening_monotone: bool,
}

impl<T: Scalar> ConflictQuery<T> {
    pub fn entropy_ratio(&self) -> T {
        if self.entropy_base > T::zero() { self.entropy_mod / self.entropy_base } else { T::one() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConflictReport<T> {
    pub config: ConflictConfig,
    pub targets: ScalingTargets,
    pub queries: Vec<ConflictQuery<T>>,
    pub baseline_image_mass: T,
    pub delta_text_mass: T,
    pub delta_image_mass: T,
    pub mean_entropy_ratio: T,
    pub nondegenerate: usize,
    /// Every non-degenerate query's entropy ratio is below 1.
    pub entropy_decreased: bool,
    pub argmax_image_to_text: T,
    pub sharpening_monotone: bool,
}

/// Synthetic conflict: video queries whose logits favour image keys by
/// `boost`, with and without ASM at `config.position`.
///
/// The logits `Z` go through the real embedding path as `Q = Z`,
/// `K = sqrt(m) I`, so `Q K^T / sqrt(m) = Z` and scaling acts on embeddings.
pub fn conflict_experiment<T: Scalar>(seed: Seed, config: &ConflictConfig) -> Result<ConflictReport<T>> {
    if config.n_text == 0 || config.n_img == 0 || config.n_vid == 0 {
        return Err(invalid("conflict experiment needs text, image and video tokens"));
    }
    if !(config.gamma > 0.0) || !(config.base_std >= 0.0) || !config.boost.is_finite() {
        return Err(invalid("conflict experiment needs gamma > 0, base_std >= 0 and a finite boost"));
    }
    if config.sharpening_grid.iter().any(|&g| !(g > 0.0)) {
        return Err(invalid("sharpening grid entries must be > 0"));
    }
    let partition = build_partition(config.n_text, config.n_img, config.n_vid)?;
    let targets = resolve_targets(config.arch, config.position)?;
    let m = partition.len();
    let n = config.n_vid;

    let boost = T::lit(config.boost);
    let base_logits = fill_gaussian(n, m, &mut seed.rng(), T::zero(), T::lit(config.base_std))?;
    let q = Matrix::from_fn(n, m, |i, j| {
        let z = base_logits.get(i, j);
        if partition.group_of(j) == TokenGroup::Image { z + boost } else { z }
    });
    let k = Matrix::identity(m).scale(T::count(m).sqrt());
    let v = Matrix::identity(m);

    let run = |gamma: T| -> Result<BlockAttention<T>> {
        let scaled = apply_group_scaling(&q, &k, &partition, &targets, gamma, config.arch)?;
        attend(&scaled, &v, &partition, m, config.arch)
    };
    let base = run(T::one())?;
    let modded = run(T::lit(config.gamma))?;
    let grid = config
        .sharpening_grid
        .iter()
        .map(|&g| run(T::lit(g)).map(|a| a.effective_probabilities(&partition)))
        .collect::<Result<Vec<_>>>()?;

    let groups = scaled_conditioning(&targets, config.arch);
    let scaled_keys = partition.union(groups);
    let cond = partition.conditioning();
    let pb = base.effective_probabilities(&partition);
    let pm = modded.effective_probabilities(&partition);
    let argmax_group = |p: &Matrix<T>, i: usize| {
        let j = cond.iter().copied().fold(cond[0], |b, j| if p.get(i, j) > p.get(i, b) { j } else { b });
        partition.group_of(j)
    };

    let mut queries = Vec::with_capacity(n);
    for i in 0..n {
        let degenerate =
            scaled_keys.len() < 2 || conditioning_spread(&base, &partition, groups, i) <= T::lit(DEGENERATE_SPREAD);
        let (entropy_base, entropy_mod) = if scaled_keys.is_empty() {
            (T::zero(), T::zero())
        } else {
            (entropy(&restricted_row(&pb, i, &scaled_keys))?, entropy(&restricted_row(&pm, i, &scaled_keys))?)
        };
        let sharpening: Vec<T> = if scaled_keys.is_empty() {
            Vec::new()
        } else {
            grid.iter()
                .map(|p| restricted_row(p, i, &scaled_keys).into_iter().fold(T::zero(), T::max))
                .collect()
        };
        let mut order: Vec<usize> = (0..sharpening.len()).collect();
        order.sort_by(|&a, &b| config.sharpening_grid[a].total_cmp(&config.sharpening_grid[b]));
        let sharpening_monotone = order.windows(2).all(|w| sharpening[w[1]] >= sharpening[w[0]]);
        queries.push(ConflictQuery {
            query: i,
            base: group_mass_report(pb.row(i), &partition)?,
            modulated: group_mass_report(pm.row(i), &partition)?,
            entropy_base,
            entropy_mod,
            degenerate,
            argmax_base: argmax_group(&pb, i),
            argmax_mod: argmax_group(&pm, i),
            sharpening,
            sharpening_monotone,
        });
    }

    let nf = T::count(n);
    let mean = |f: &dyn Fn(&ConflictQuery<T>) -> T| queries.iter().map(f).sum::<T>() / nf;
    let live: Vec<&ConflictQuery<T>> = queries.iter().filter(|q| !q.degenerate).collect();
    let moved = queries
        .iter()
        .filter(|q| q.argmax_base == TokenGroup::Image && q.argmax_mod == TokenGroup::Text)
        .count();
    Ok(ConflictReport {
        config: config.clone(),
        targets,
        baseline_image_mass: mean(&|q| q.base.mass_image),
        delta_text_mass: mean(&|q| q.modulated.mass_text - q.base.mass_text),
        delta_image_mass: mean(&|q| q.modulated.mass_image - q.base.mass_image),
        mean_entropy_ratio: mean(&|q| q.entropy_ratio()),
        nondegenerate: live.len(),
        entropy_decreased: live.iter().all(|q| q.entropy_ratio() < T::one()),
        argmax_image_to_text: T::count(moved) / nf,
        sharpening_monotone: live.iter().all(|q| q.sharpening_monotone),
        queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsAudit {
    pub blocks: usize,
    pub steps: usize,
    /// Gated blocks, counted only when the schedule can modulate at all.
    pub selected_blocks: usize,
    pub active_steps: usize,
    pub predicted_cells: usize,
    pub measured_cells: usize,
    /// Cells with scaling work are exactly the predicted cells.
    pub cells_match: bool,
    pub extra_multiplications: u64,
    pub attention_multiplications: u64,
    /// Scaling work per active cell, if every active cell did the same work.
    pub per_cell_extra: Option<u64>,
    /// `extra / (per_cell_extra * L * T)`.
    pub measured_fraction: f64,
    /// `(L_s / L)(T_s / T)`.
    pub model_fraction: f64,
    /// `extra == per_cell_extra * L_s * T_s` in integers, so the measured
    /// fraction is exactly the model's.
    pub exact: bool,
    pub relative_error: f64,
    /// Extra multiplications over baseline attention multiplications.
    pub overhead_vs_attention: f64,
}

pub fn flops_audit<T: Scalar>(trajectory: &Trajectory<T>, schedule: &ScheduleConfig<T>) -> Result<FlopsAudit> {
    let blocks = schedule.blocks();
    let steps = schedule.total_steps;
    if trajectory.steps.len() != steps || trajectory.steps.iter().any(|s| s.scale_multiplications.len() != blocks) {
        return Err(invalid("trajectory counters do not match the schedule's blocks and steps"));
    }
    let mut predicted = Vec::new();
    let mut measured = Vec::new();
    let mut extra = 0u64;
    let mut attn = 0u64;
    let mut per_cell: Option<u64> = None;
    let mut uniform = true;
    for rec in &trajectory.steps {
        for l in 0..blocks {
            if schedule.cell_active(l, rec.t)? {
                predicted.push((l, rec.t));
            }
            let c = rec.scale_multiplications[l];
            attn += rec.attention_multiplications[l];
            if c > 0 {
                measured.push((l, rec.t));
                extra += c;
                match per_cell {
                    None => per_cell = Some(c),
                    Some(p) if p != c => uniform = false,
                    Some(_) => {}
                }
            }
        }
    }
    let targets_any = schedule.modulates();
    let selected_blocks = if targets_any { schedule.gates.open_count() } else { 0 };
    let active_steps = if targets_any { schedule.active_steps().len() } else { 0 };
    let model_fraction = crate::analysis::flops_overhead(selected_blocks, blocks, active_steps, steps)?;
    let per_cell_extra = per_cell.filter(|_| uniform);
    let (measured_fraction, exact) = match per_cell_extra {
        Some(p) => (
            extra as f64 / (p as f64 * blocks as f64 * steps as f64),
            u128::from(extra) == u128::from(p) * (selected_blocks * active_steps) as u128,
        ),
        None => (if extra == 0 { 0.0 } else { f64::NAN }, extra == 0 && predicted.is_empty()),
    };
    let relative_error = if model_fraction == 0.0 {
        measured_fraction.abs()
    } else {
        (measured_fraction - model_fraction).abs() / model_fraction
    };
    Ok(FlopsAudit {
        blocks,
        steps,
        selected_blocks,
        active_steps,
        predicted_cells: predicted.len(),
        measured_cells: measured.len(),
        cells_match: predicted == measured,
        extra_multiplications: extra,
        attention_multiplications: attn,
        per_cell_extra,
        measured_fraction,
        model_fraction,
        exact,
        relative_error,
        overhead_vs_attention: if attn == 0 { 0.0 } else { extra as f64 / attn as f64 },
    })
}
