//! Block-level foreground analysis used to pick which transformer blocks get
//! modulated.
//!
//! The pipeline runs PCA over latent channels to get a pseudo-RGB image and
//! thresholds it into a foreground mask. Each token gets an attention score,
//! and each block a foreground ratio: the share of its high-attention tokens
//! that lie on the foreground. Blocks whose mean ratio exceeds `tau` are
//! selected.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkernel::{pca_top_k, row_softmax, Matrix, Seed};
use crate::scalar::Scalar;

/// Default fraction of tokens treated as high-attention.
pub const DEFAULT_HIGH_QUANTILE: f64 = 0.2;
/// Default selection threshold on the foreground ratio.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default number of calibration samples.
pub const DEFAULT_SAMPLES: usize = 50;

/// `(batch, channels, frames, height, width)` latent, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<T> {
    dims: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> LatentTensor<T> {
    pub fn new(dims: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                context: "LatentTensor::new",
                expected: format!("{n} values for dims {dims:?}"),
                found: format!("{}", data.len()),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, b: usize, d: usize, t: usize, h: usize, w: usize) -> T {
        let [_, dd, tt, hh, ww] = self.dims;
        self.data[(((b * dd + d) * tt + t) * hh + h) * ww + w]
    }

    pub fn positions(&self) -> usize {
        self.dims[2] * self.dims[3] * self.dims[4]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Average the batch before PCA.
    #[default]
    Average,
    /// Use one batch entry.
    Sample(usize),
}

/// Three-channel PCA projection of a latent.
#[derive(Debug, Clone)]
pub struct PseudoRgb<T> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `positions x 3` centred projections before normalisation.
    pub raw: Matrix<T>,
    /// Channel-major `(3, T, H, W)` values, each channel min-max scaled to
    /// `[0, 1]`; a constant channel maps to 0.
    pub channels: Vec<T>,
}

impl<T: Scalar> PseudoRgb<T> {
    pub fn positions(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.positions();
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn frame(&self, c: usize, t: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.channel(c)[t * hw..(t + 1) * hw]
    }
}

/// Projects every spatio-temporal position's channel vector on the top three
/// principal components.
pub fn pca_pseudo_rgb<T: Scalar>(latent: &LatentTensor<T>, batch: BatchMode) -> Result<PseudoRgb<T>> {
    let [b, d, t, h, w] = latent.dims();
    if d < 3 {
        return Err(invalid(format!("pseudo-RGB needs at least 3 channels, got {d}")));
    }
    if b == 0 {
        return Err(invalid("latent has an empty batch"));
    }
    let batches: Vec<usize> = match batch {
        BatchMode::Average => (0..b).collect(),
        BatchMode::Sample(i) if i < b => vec![i],
        BatchMode::Sample(i) => return Err(invalid(format!("batch index {i} out of range for batch {b}"))),
    };
    let n = latent.positions();
    let inv = T::one() / T::count(batches.len());
    let x = Matrix::from_fn(n, d, |pos, c| {
        let (ti, rem) = (pos / (h * w), pos % (h * w));
        let (hi, wi) = (rem / w, rem % w);
        batches.iter().map(|&bi| latent.get(bi, c, ti, hi, wi)).sum::<T>() * inv
    });
    let pca = pca_top_k(&x, 3)?;
    let mut channels = Vec::with_capacity(3 * n);
    for c in 0..3 {
        let col = pca.projections.column(c);
        let lo = col.iter().copied().fold(T::infinity(), T::min);
        let hi = col.iter().copied().fold(T::neg_infinity(), T::max);
        let span = hi - lo;
        channels.extend(col.iter().map(|&v| if span > T::zero() { (v - lo) / span } else { T::zero() }));
    }
    Ok(PseudoRgb { frames: t, height: h, width: w, raw: pca.projections, channels })
}

/// Boolean `(frames, height, width)` mask; `true` marks foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                context: "ForegroundMask::new",
                expected: format!("{n} cells for dims {dims:?}"),
                found: format!("{}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cells(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn is_foreground(&self, cell: usize) -> bool {
        self.data[cell]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&x| x).count()
    }
}

#[derive(Debug, Clone)]
pub enum MaskMethod {
    /// Per-frame Otsu threshold on the first pseudo-RGB channel.
    Threshold,
    /// Precomputed mask, used as is after a shape check.
    External(ForegroundMask),
}

/// Otsu threshold: the value `v` maximising between-class variance for the
/// split `{x <= v} | {x > v}`. `None` when all values are equal.
pub fn otsu_threshold<T: Scalar>(values: &[T]) -> Option<T> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    if n < 2 || sorted[0] == sorted[n - 1] {
        return None;
    }
    let total: T = sorted.iter().copied().sum();
    let nt = T::count(n);
    let mut prefix = T::zero();
    let mut best: Option<(T, T)> = None;
    for k in 0..n - 1 {
        prefix += sorted[k];
        if sorted[k] == sorted[k + 1] {
            continue;
        }
        let n0 = T::count(k + 1);
        let n1 = nt - n0;
        let mu0 = prefix / n0;
        let mu1 = (total - prefix) / n1;
        let between = n0 * n1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, sorted[k]));
        }
    }
    best.map(|(_, v)| v)
}

pub fn foreground_mask<T: Scalar>(pseudo: &PseudoRgb<T>, method: &MaskMethod) -> Result<ForegroundMask> {
    let dims = [pseudo.frames, pseudo.height, pseudo.width];
    match method {
        MaskMethod::External(mask) => {
            if mask.dims() != dims {
                return Err(Error::DimensionMismatch {
                    context: "foreground_mask",
                    expected: format!("mask dims {dims:?}"),
                    found: format!("{:?}", mask.dims()),
                });
            }
            Ok(mask.clone())
        }
        MaskMethod::Threshold => {
            let mut data = Vec::with_capacity(pseudo.positions());
            for t in 0..pseudo.frames {
                let frame = pseudo.frame(0, t);
                match otsu_threshold(frame) {
                    Some(th) => data.extend(frame.iter().map(|&v| v > th)),
                    None => data.extend(std::iter::repeat_n(false, frame.len())),
                }
            }
            ForegroundMask::new(dims, data)
        }
    }
}

/// Row means `s_u = (1/L) sum_v M_uv`.
pub fn token_scores<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    if !m.is_square() {
        return Err(Error::NotSquare { rows: m.rows(), cols: m.cols() });
    }
    if m.data().iter().any(|&x| x < T::zero()) {
        return Err(invalid("attention matrix has negative entries"));
    }
    let l = T::count(m.cols());
    Ok((0..m.rows()).map(|u| m.row(u).iter().copied().sum::<T>() / l).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioOutcome {
    /// `|high ∩ foreground| / |high|`; 0 when degenerate.
    pub ratio: f64,
    pub high_count: usize,
    /// No token scored above the quantile (all scores tied).
    pub degenerate: bool,
}

/// High-attention tokens are those scoring strictly above the linearly
/// interpolated `(1 - high_quantile)` empirical quantile.
///
/// With ascending order statistics `s_(0..L)` and `h = (L - 1)(1 - q)`, that
/// quantile lies in `[s_(floor h), s_(floor h + 1))`, so the set is exactly the
/// tokens above `s_(floor h)`. It is evaluated in that form, which depends only
/// on the score order.
pub fn high_attention_tokens<T: Scalar>(scores: &[T], high_quantile: f64) -> Result<Vec<usize>> {
    if !(high_quantile > 0.0 && high_quantile < 1.0) {
        return Err(invalid(format!("high_quantile must lie in (0, 1), got {high_quantile}")));
    }
    if scores.is_empty() {
        return Err(Error::Empty("token scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let h = (scores.len() - 1) as f64 * (1.0 - high_quantile);
    let cut = sorted[(h.floor() as usize).min(scores.len() - 1)];
    Ok((0..scores.len()).filter(|&u| scores[u] > cut).collect())
}

pub fn foreground_ratio<T: Scalar>(m: &Matrix<T>, mask: &ForegroundMask, high_quantile: f64) -> Result<RatioOutcome> {
    if m.rows() != mask.cells() {
        return Err(Error::DimensionMismatch {
            context: "foreground_ratio",
            expected: format!("{} tokens (mask cells)", mask.cells()),
            found: format!("{} tokens", m.rows()),
        });
    }
    let scores = token_scores(m)?;
    let high = high_attention_tokens(&scores, high_quantile)?;
    if high.is_empty() {
        return Ok(RatioOutcome { ratio: 0.0, high_count: 0, degenerate: true });
    }
    let inside = high.iter().filter(|&&u| mask.is_foreground(u)).count();
    Ok(RatioOutcome { ratio: inside as f64 / high.len() as f64, high_count: high.len(), degenerate: false })
}

/// Mean foreground ratio per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRatioTable {
    ratios: Vec<f64>,
    sample_count: usize,
}

impl BlockRatioTable {
    pub fn new(ratios: Vec<f64>, sample_count: usize) -> Result<Self> {
        if let Some(bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(invalid(format!("foreground ratio {bad} outside [0, 1]")));
        }
        Ok(Self { ratios, sample_count })
    }

    /// Averages per-sample ratio rows (`samples x blocks`).
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let blocks = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != blocks) {
            return Err(invalid("calibration samples disagree on block count"));
        }
        let n = rows.len() as f64;
        let ratios = (0..blocks).map(|b| rows.iter().map(|r| r[b]).sum::<f64>() / n).collect();
        Self::new(ratios, rows.len())
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Blocks with mean ratio strictly above `tau`.
pub fn select_blocks(table: &BlockRatioTable, tau: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    if table.ratios.is_empty() {
        return Err(Error::Empty("block ratio table"));
    }
    Ok((0..table.ratios.len()).filter(|&l| table.ratios[l] > tau).collect())
}

/// Published foreground-sensitive block sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureModel {
    #[serde(rename = "framepack")]
    FramePack,
    #[serde(rename = "framepack_f1")]
    FramePackF1,
    #[serde(rename = "wan2_1")]
    Wan21,
}

impl FixtureModel {
    pub const ALL: [FixtureModel; 3] = [FixtureModel::FramePack, FixtureModel::FramePackF1, FixtureModel::Wan21];

    pub fn key(self) -> &'static str {
        match self {
            FixtureModel::FramePack => "framepack",
            FixtureModel::FramePackF1 => "framepack_f1",
            FixtureModel::Wan21 => "wan2_1",
        }
    }

    fn source(self) -> &'static str {
        match self {
            FixtureModel::FramePack => include_str!("../fixtures/framepack.json"),
            FixtureModel::FramePackF1 => include_str!("../fixtures/framepack_f1.json"),
            FixtureModel::Wan21 => include_str!("../fixtures/wan2_1.json"),
        }
    }

    pub fn load(self) -> Result<BlockFixture> {
        BlockFixture::parse(self.source())
    }
}

impl std::str::FromStr for FixtureModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace(['-', ' ', '.'], "_");
        FixtureModel::ALL
            .into_iter()
            .find(|m| m.key() == k || m.key().replace('_', "") == k.replace('_', ""))
            .ok_or_else(|| invalid(format!("unknown fixture {s:?} (expected framepack, framepack_f1 or wan2_1)")))
    }
}

pub const FIXTURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFixture {
    pub format_version: u32,
    pub model: String,
    #[serde(default)]
    pub note: String,
    pub blocks: Vec<usize>,
}

impl BlockFixture {
    pub fn parse(json: &str) -> Result<Self> {
        let f: BlockFixture = serde_json::from_str(json).map_err(|e| invalid(format!("bad block fixture: {e}")))?;
        if f.format_version != FIXTURE_FORMAT_VERSION {
            return Err(invalid(format!("unsupported fixture version {}", f.format_version)));
        }
        if f.blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("fixture {} block indices must be strictly increasing", f.model)));
        }
        Ok(f)
    }

    /// Smallest block count the fixture fits in.
    pub fn min_blocks(&self) -> usize {
        self.blocks.last().map_or(0, |&b| b + 1)
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        match self.blocks.iter().find(|&&b| b >= blocks) {
            Some(b) => Err(invalid(format!("fixture {} lists block {b}, outside 0..{blocks}", self.model))),
            None => Ok(()),
        }
    }
}

/// One calibration sample: a latent plus one attention map per block.
///
/// Rows of each map are the tokens being scored, in `(frame, row, col)` order.
#[derive(Debug, Clone)]
pub struct CalibrationSample<T> {
    pub latent: LatentTensor<T>,
    pub attention: Vec<Matrix<T>>,
    pub mask: Option<ForegroundMask>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationOutcome {
    pub table: BlockRatioTable,
    pub selected: Vec<usize>,
    pub tau: f64,
    pub high_quantile: f64,
    /// `(sample, block)` cells whose ratio was degenerate.
    pub degenerate_cells: usize,
    pub per_sample: Vec<Vec<f64>>,
}

pub fn calibrate<T: Scalar>(samples: &[CalibrationSample<T>], tau: f64, high_quantile: f64) -> Result<CalibrationOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    let rows: Vec<Result<(Vec<f64>, usize)>> = samples
        .par_iter()
        .map(|s| {
            let mask = match &s.mask {
                Some(m) => m.clone(),
                None => foreground_mask(&pca_pseudo_rgb(&s.latent, BatchMode::Average)?, &MaskMethod::Threshold)?,
            };
            let mut degenerate = 0;
            let mut ratios = Vec::with_capacity(s.attention.len());
            for m in &s.attention {
                let r = foreground_ratio(m, &mask, high_quantile)?;
                degenerate += usize::from(r.degenerate);
                ratios.push(r.ratio);
            }
            Ok((ratios, degenerate))
        })
        .collect();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut degenerate_cells = 0;
    for r in rows {
        let (ratios, d) = r?;
        per_sample.push(ratios);
        degenerate_cells += d;
    }
    let table = BlockRatioTable::from_samples(&per_sample)?;
    let selected = select_blocks(&table, tau)?;
    Ok(CalibrationOutcome { table, selected, tau, high_quantile, degenerate_cells, per_sample })
}

/// Generator for seeded synthetic calibration data.
///
/// Every sample places a rectangular foreground object on the latent grid and
/// writes it along a fixed channel direction. Block `b` has a seeded bias
/// `beta_b` in `[-bias_range, bias_range]` added to the logits of foreground
/// keys, so positive-bias blocks attend to the object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCalibration {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blocks: usize,
    pub samples: usize,
    pub foreground_amplitude: f64,
    pub noise_std: f64,
    pub bias_range: f64,
}

impl Default for SyntheticCalibration {
    fn default() -> Self {
        Self {
            frames: 2,
            height: 6,
            width: 6,
            channels: 8,
            blocks: 12,
            samples: DEFAULT_SAMPLES,
            foreground_amplitude: 3.0,
            noise_std: 0.3,
            bias_range: 2.0,
        }
    }
}

impl SyntheticCalibration {
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 2 || self.width < 2 || self.blocks == 0 || self.samples == 0 {
            return Err(invalid("synthetic calibration needs frames, blocks, samples >= 1 and a grid of at least 2x2"));
        }
        if self.channels < 3 {
            return Err(invalid("synthetic calibration needs at least 3 channels"));
        }
        Ok(())
    }

    /// Per-block foreground bias.
    pub fn block_biases(&self, seed: Seed) -> Vec<f64> {
        let mut rng = seed.derive(u64::MAX).rng();
        (0..self.blocks).map(|_| rng.random_range(-self.bias_range..=self.bias_range)).collect()
    }

    /// Builds sample `index`; the attention maps are key-major (row `u` holds
    /// the attention token `u` receives), so their row means score tokens.
    pub fn sample(&self, seed: Seed, index: usize) -> Result<CalibrationSample<f64>> {
        self.validate()?;
        let mut rng = seed.derive(index as u64).rng();
        let (t, h, w, d) = (self.frames, self.height, self.width, self.channels);

        let oh = rng.random_range(1..=h.div_ceil(2));
        let ow = rng.random_range(1..=w.div_ceil(2));
        let top = rng.random_range(0..=h - oh);
        let left = rng.random_range(0..=w - ow);
        let fg = |ti: usize, hi: usize, wi: usize| {
            let shift = ti % 2;
            let l = (left + shift).min(w - ow);
            hi >= top && hi < top + oh && wi >= l && wi < l + ow
        };

        // Object direction with its largest entry positive.
        let mut dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pivot = (0..d).max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs())).unwrap_or(0);
        if dir[pivot] < 0.0 {
            dir.iter_mut().for_each(|x| *x = -*x);
        }
        let nd = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= nd);

        let noise = rand_distr::Normal::new(0.0, self.noise_std).map_err(|e| invalid(e.to_string()))?;
        let mut data = Vec::with_capacity(d * t * h * w);
        for c in 0..d {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let obj = if fg(ti, hi, wi) { self.foreground_amplitude * dir[c] } else { 0.0 };
                        data.push(obj + rng.sample(noise));
                    }
                }
            }
        }
        let latent = LatentTensor::new([1, d, t, h, w], data)?;

        let tokens = self.tokens();
        let is_fg: Vec<f64> = (0..tokens)
            .map(|u| {
                let (ti, rem) = (u / (h * w), u % (h * w));
                if fg(ti, rem / w, rem % w) { 1.0 } else { 0.0 }
            })
            .collect();
        let unit = rand_distr::StandardNormal;
        let mut attention = Vec::with_capacity(self.blocks);
        for beta in self.block_biases(seed) {
            let logits = Matrix::from_fn(tokens, tokens, |_, key| {
                let z: f64 = rng.sample(unit);
                z + beta * is_fg[key]
            });
            attention.push(row_softmax(&logits)?.transpose());
        }
        Ok(CalibrationSample { latent, attention, mask: None })
    }

    pub fn run(&self, seed: Seed, tau: f64, high_quantile: f64) -> Result<CalibrationOutcome> {
        let samples = (0..self.samples).map(|i| self.sample(seed, i)).collect::<Result<Vec<_>>>()?;
        calibrate(&samples, tau, high_quantile)
    }
}
