//! Seeded property suites over the temperature theory.
//!
//! Every suite draws independent cases from per-draw seeds, runs them in
//! parallel and reports one [`MarginRow`] per (draw, check). A row passes when
//! its left side does not exceed its right side (up to
//! [`crate::analysis::BOUND_SLACK`] relative rounding room); the margin is `rhs - lhs`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    curvature_report, decay_envelope, entropy_alpha_report, lipschitz_report, logit_gap, restricted_entropy, within,
    DEFAULT_FD_STEP,
};
use crate::attention::attention_forward;
use crate::error::{invalid, Error, Result};
use crate::numkernel::{fill_gaussian, softmax, spectral_norm_sym, tempered_softmax, Matrix, Seed};
use crate::sim::{make_toy_denoiser, Probe, StepCoefficients, ToyDims};

/// Pairwise agreement required between the three tempering routes.
pub const LEMMA1_TOL: f64 = 1e-12;
/// Allowed gap between `-alpha Var` and the central difference of `H`.
pub const LEMMA2_TOL: f64 = 1e-5;
/// Spectral norm required once `alpha = 50 / gap`.
pub const COLLAPSE_TOL: f64 = 1e-6;
/// Curvature draws with a smaller top gap are redrawn.
pub const MIN_GAP: f64 = 1e-3;
/// Coefficients from the published scaling ablation.
pub const ABLATION_ALPHAS: [f64; 3] = [1.15, 1.25, 1.35];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemma1,
    Lemma2,
    Curvature,
    Lipschitz,
    Deviation,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Lemma1, Suite::Lemma2, Suite::Curvature, Suite::Lipschitz, Suite::Deviation];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Lemma2 => "lemma2",
            Suite::Curvature => "curvature",
            Suite::Lipschitz => "lipschitz",
            Suite::Deviation => "deviation",
            Suite::All => "all",
        }
    }

    pub fn members(self) -> Vec<Suite> {
        match self {
            Suite::All => Suite::EACH.to_vec(),
            s => vec![s],
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase();
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == k)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub lemma1_draws: usize,
    pub lemma2_draws: usize,
    pub curvature_draws: usize,
    pub lipschitz_draws: usize,
    /// Each probe configuration is checked at the ablation coefficients and
    /// one continuous draw.
    pub deviation_probes: usize,
    pub max_queries: usize,
    pub max_keys: usize,
    pub max_dim: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Test hook: flips a sign inside every suite's kernel so that the
    /// harness must report violations.
    pub inject_sign_flip: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma1_draws: 1000,
            lemma2_draws: 1000,
            curvature_draws: 1000,
            lipschitz_draws: 1000,
            deviation_probes: 100,
            max_queries: 16,
            max_keys: 16,
            max_dim: 8,
            alpha_low: 0.5,
            alpha_high: 3.0,
            inject_sign_flip: false,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_queries == 0 || self.max_keys < 2 || self.max_dim == 0 {
            return Err(invalid("verify needs max_queries >= 1, max_keys >= 2, max_dim >= 1"));
        }
        if !(self.alpha_low > 0.0 && self.alpha_low < self.alpha_high && self.alpha_high.is_finite()) {
            return Err(invalid(format!("alpha range [{}, {}] must satisfy 0 < low < high", self.alpha_low, self.alpha_high)));
        }
        if self.alpha_low <= DEFAULT_FD_STEP {
            return Err(invalid("alpha_low must exceed the finite-difference step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginRow {
    pub suite: Suite,
    pub draw: usize,
    pub check: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

impl MarginRow {
    fn new(suite: Suite, draw: usize, check: &'static str, lhs: f64, rhs: f64) -> Self {
        Self { suite, draw, check, lhs, rhs, margin: rhs - lhs, pass: within(lhs, rhs) }
    }

    /// Strict `lhs < rhs` with no slack.
    fn strict(suite: Suite, draw: usize, check: &'static str, lhs: f64, rhs: f64) -> Self {
        Self { suite, draw, check, lhs, rhs, margin: rhs - lhs, pass: lhs < rhs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub draws: usize,
    pub rows: Vec<MarginRow>,
    pub violations: usize,
}

impl SuiteReport {
    fn new(suite: Suite, draws: usize, rows: Vec<MarginRow>) -> Self {
        let violations = rows.iter().filter(|r| !r.pass).count();
        Self { suite, draws, rows, violations }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn first_failure(&self) -> Option<&MarginRow> {
        self.rows.iter().find(|r| !r.pass)
    }

    pub fn min_margin(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.margin).reduce(f64::min)
    }
}

pub fn run(suite: Suite, config: &VerifyConfig) -> Result<Vec<SuiteReport>> {
    config.validate()?;
    suite.members().into_iter().map(|s| run_one(s, config)).collect()
}

fn run_one(suite: Suite, cfg: &VerifyConfig) -> Result<SuiteReport> {
    let (draws, f): (usize, fn(&VerifyConfig, usize, Seed) -> Result<Vec<MarginRow>>) = match suite {
        Suite::Lemma1 => (cfg.lemma1_draws, lemma1_draw),
        Suite::Lemma2 => (cfg.lemma2_draws, lemma2_draw),
        Suite::Curvature => (cfg.curvature_draws, curvature_draw),
        Suite::Lipschitz => (cfg.lipschitz_draws, lipschitz_draw),
        Suite::Deviation => (cfg.deviation_probes, deviation_draw),
        Suite::All => return Err(invalid("run_one takes a single suite")),
    };
    let root = Seed(cfg.seed).derive(suite.tag());
    let rows: Vec<Vec<MarginRow>> =
        (0..draws).into_par_iter().map(|i| f(cfg, i, root.derive(i as u64))).collect::<Result<_>>()?;
    Ok(SuiteReport::new(suite, draws, rows.into_iter().flatten().collect()))
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Matrix<f64>> {
    fill_gaussian(rows, cols, rng, 0.0, 1.0)
}

fn logits(m: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let scale = rng.random_range(0.5..3.0);
    Ok(gaussian(1, m, rng)?.into_data().into_iter().map(|x| x * scale).collect())
}

fn lemma1_draw(cfg: &VerifyConfig, draw: usize, seed: Seed) -> Result<Vec<MarginRow>> {
    let mut rng = seed.rng();
    let n = rng.random_range(1..=cfg.max_queries);
    let m = rng.random_range(1..=cfg.max_keys);
    let d = rng.random_range(1..=cfg.max_dim);
    let q = gaussian(n, d, &mut rng)?;
    let k = gaussian(m, d, &mut rng)?;
    let v = gaussian(m, d, &mut rng)?;
    let gamma = rng.random_range(cfg.alpha_low..=cfg.alpha_high);

    let base = attention_forward(&q, &k, &v, d)?;
    let by_q = attention_forward(&q.scale(gamma), &k, &v, d)?.probabilities;
    let by_k = attention_forward(&q, &k.scale(gamma), &v, d)?.probabilities;
    let tempered = {
        let alpha = if cfg.inject_sign_flip { -gamma } else { gamma };
        let rows = (0..n)
            .map(|i| softmax(&base.logits.row(i).iter().map(|&z| alpha * z).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)?
    };
    let gap = |a: &Matrix<f64>, b: &Matrix<f64>| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(vec![
        MarginRow::new(Suite::Lemma1, draw, "query_vs_key", gap(&by_q, &by_k), LEMMA1_TOL),
        MarginRow::new(Suite::Lemma1, draw, "query_vs_tempered", gap(&by_q, &tempered), LEMMA1_TOL),
        MarginRow::new(Suite::Lemma1, draw, "key_vs_tempered", gap(&by_k, &tempered), LEMMA1_TOL),
    ])
}

fn lemma2_draw(cfg: &VerifyConfig, draw: usize, seed: Seed) -> Result<Vec<MarginRow>> {
    let mut rng = seed.rng();
    let m = rng.random_range(2..=cfg.max_keys);
    let z = logits(m, &mut rng)?;
    let alpha = rng.random_range(cfg.alpha_low..=cfg.alpha_high);
    let full: Vec<usize> = (0..m).collect();
    let mut subset: Vec<usize> = full.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
    if subset.is_empty() {
        subset.push(rng.random_range(0..m));
    }
    let sign = if cfg.inject_sign_flip { -1.0 } else { 1.0 };

    let mut rows = Vec::with_capacity(4);
    for (check, s) in [("derivative_full", &full), ("derivative_restricted", &subset)] {
        let r = entropy_alpha_report(&z, s, alpha, DEFAULT_FD_STEP)?;
        let gap = (sign * r.analytic_derivative - r.numeric_derivative).abs();
        rows.push(MarginRow::strict(Suite::Lemma2, draw, check, gap, LEMMA2_TOL));
    }
    // Largest rise of H along an increasing alpha grid.
    let mut grid: Vec<f64> = (0..12).map(|_| rng.random_range(cfg.alpha_low..=cfg.alpha_high)).collect();
    grid.sort_by(f64::total_cmp);
    for (check, s) in [("monotone_full", &full), ("monotone_restricted", &subset)] {
        let hs = grid.iter().map(|&a| restricted_entropy(&z, s, a)).collect::<Result<Vec<_>>>()?;
        let hs: Vec<f64> = if cfg.inject_sign_flip { hs.into_iter().rev().collect() } else { hs };
        let (worst_next, worst_prev) = hs
            .windows(2)
            .map(|w| (w[1], w[0]))
            .max_by(|a, b| (a.0 - a.1).total_cmp(&(b.0 - b.1)))
            .unwrap_or((0.0, 0.0));
        rows.push(MarginRow::new(Suite::Lemma2, draw, check, worst_next, worst_prev));
    }
    Ok(rows)
}

fn curvature_draw(cfg: &VerifyConfig, draw: usize, seed: Seed) -> Result<Vec<MarginRow>> {
    let mut rng = seed.rng();
    let m = rng.random_range(2..=cfg.max_keys);
    let z = loop {
        let z = logits(m, &mut rng)?;
        if logit_gap(&z).1 >= MIN_GAP {
            break z;
        }
    };
    let gap = logit_gap(&z).1;
    let mut alphas: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..20.0)).collect();
    alphas.extend([2.0 / gap, 10.0 / gap]);

    let norm = |alpha: f64| -> Result<f64> {
        if cfg.inject_sign_flip {
            // Diag(p) + p p^T in place of the covariance.
            let p = tempered_softmax(&z, alpha)?;
            let h = Matrix::from_fn(m, m, |i, j| alpha * alpha * (if i == j { p[i] } else { 0.0 } + p[i] * p[j]));
            spectral_norm_sym(&h)
        } else {
            Ok(curvature_report(&z, alpha)?.spectral_norm)
        }
    };

    let mut worst: [(f64, f64); 3] = [(0.0, 0.0); 3];
    let mut keep = |slot: usize, lhs: f64, rhs: f64| {
        let (l, r) = worst[slot];
        if lhs - rhs > l - r || (l, r) == (0.0, 0.0) {
            worst[slot] = (lhs, rhs);
        }
    };
    for &alpha in &alphas {
        let r = curvature_report(&z, alpha)?;
        let sn = norm(alpha)?;
        keep(0, sn, alpha * alpha * r.gershgorin_bound);
        if let (Some(tb), Some(db)) = (r.tail_bound, r.decay_bound) {
            keep(1, r.tail_mass, tb);
            keep(2, sn, db);
        }
    }
    let mut rows = vec![
        MarginRow::new(Suite::Curvature, draw, "gershgorin", worst[0].0, worst[0].1),
        MarginRow::new(Suite::Curvature, draw, "tail_mass", worst[1].0, worst[1].1),
        MarginRow::new(Suite::Curvature, draw, "decay", worst[2].0, worst[2].1),
    ];

    // Envelope along alpha in [2/gap, 50/gap]: largest rise between neighbours.
    let env: Vec<f64> = (0..=48).map(|k| decay_envelope(2.0 / gap + k as f64 / gap, m, gap)).collect();
    let (rise_next, rise_prev) = env
        .windows(2)
        .map(|w| (w[1], w[0]))
        .max_by(|a, b| (a.0 - a.1).total_cmp(&(b.0 - b.1)))
        .unwrap_or((0.0, 0.0));
    rows.push(MarginRow::new(Suite::Curvature, draw, "envelope_monotone", rise_next, rise_prev));
    rows.push(MarginRow::strict(Suite::Curvature, draw, "collapse", norm(50.0 / gap)?, COLLAPSE_TOL));
    Ok(rows)
}

fn lipschitz_draw(cfg: &VerifyConfig, draw: usize, seed: Seed) -> Result<Vec<MarginRow>> {
    let mut rng = seed.rng();
    let m = rng.random_range(2..=cfg.max_keys);
    let d_v = rng.random_range(1..=cfg.max_dim);
    let z = logits(m, &mut rng)?;
    let v = gaussian(m, d_v, &mut rng)?;
    let a1 = rng.random_range(cfg.alpha_low..=cfg.alpha_high);
    let a2 = rng.random_range(cfg.alpha_low..=cfg.alpha_high);
    let r = lipschitz_report(&z, &v, a1, a2)?;
    let change = if cfg.inject_sign_flip {
        let y = |p: Vec<f64>| (0..d_v).map(|c| (0..m).map(|j| p[j] * v.get(j, c)).sum::<f64>()).collect::<Vec<_>>();
        let flipped: Vec<f64> = z.iter().map(|x| -x).collect();
        let (y1, y2) = (y(tempered_softmax(&z, a1)?), y(tempered_softmax(&flipped, a2)?));
        y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    } else {
        r.output_change
    };
    Ok(vec![MarginRow::new(Suite::Lipschitz, draw, "output_change", change, r.bound)])
}

fn deviation_draw(cfg: &VerifyConfig, draw: usize, seed: Seed) -> Result<Vec<MarginRow>> {
    let mut rng = seed.rng();
    let dims = ToyDims {
        n_text: rng.random_range(1..=4),
        n_img: rng.random_range(1..=6),
        n_vid: rng.random_range(1..=6),
        d_k: rng.random_range(2..=cfg.max_dim.max(2)),
        d_v: rng.random_range(2..=cfg.max_dim.max(2)),
    };
    let blocks = rng.random_range(1..=4);
    let steps = rng.random_range(1..=25);
    let denoiser = make_toy_denoiser::<f64>(seed.derive(1), blocks, dims)?;
    let coeffs = StepCoefficients::linear(steps)?;
    let x = denoiser.initial_state(seed.derive(2))?;
    let t = rng.random_range(1..=steps);
    let probe = Probe { block: rng.random_range(0..blocks), query: rng.random_range(0..dims.n_vid) };
    let continuous = rng.random_range(cfg.alpha_low..=cfg.alpha_high);

    const CHECKS: [&str; 4] = ["ablation_1.15", "ablation_1.25", "ablation_1.35", "continuous"];
    let alphas = ABLATION_ALPHAS.into_iter().chain([continuous]);
    CHECKS
        .into_iter()
        .zip(alphas)
        .map(|(check, alpha)| {
            let r = crate::sim::deviation_check_inner(&denoiser, &coeffs, t, &x, alpha, probe, cfg.inject_sign_flip)?;
            Ok(MarginRow::new(Suite::Deviation, draw, check, r.deviation, r.bound))
        })
        .collect()
}
