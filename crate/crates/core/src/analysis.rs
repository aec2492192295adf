//! Certification of the temperature-scaling theory: entropy and its
//! derivative identity, the log-partition Hessian and its decay, tail-mass and
//! Gershgorin bounds, attention-output Lipschitz continuity, and the group
//! mass statistics used to read attention maps.
//!
//! Entropies are in nats.

use serde::Serialize;

use crate::attention::{KeyPartition, TokenGroup};
use crate::error::{invalid, Error, Result};
use crate::numkernel::{log_sum_exp, softmax, spectral_norm, spectral_norm_sym, Matrix};
use crate::scalar::{norm2, Scalar};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Shannon entropy `-sum p ln p`, with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        return Err(Error::Empty("probability vector"));
    }
    if p.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(Error::InvalidDistribution("entries must be finite and >= 0".into()));
    }
    let total: T = p.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-8) {
        return Err(Error::InvalidDistribution(format!("entries sum to {total}, not 1")));
    }
    let h: T = p.iter().filter(|&&x| x > T::zero()).map(|&x| -x * x.ln()).sum();
    Ok(h.max(T::zero()))
}

fn check_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(invalid(format!("inverse temperature must be > 0, got {alpha}")));
    }
    Ok(())
}

fn gather<T: Scalar>(z: &[T], subset: &[usize]) -> Result<Vec<T>> {
    if subset.is_empty() {
        return Err(Error::Empty("key subset"));
    }
    subset
        .iter()
        .map(|&j| z.get(j).copied().ok_or_else(|| invalid(format!("subset index {j} outside 0..{}", z.len()))))
        .collect()
}

/// Softmax of `alpha * z` restricted to and renormalised over `subset`,
/// returned in subset order.
pub fn restricted_softmax<T: Scalar>(z: &[T], subset: &[usize], alpha: T) -> Result<Vec<T>> {
    check_alpha(alpha)?;
    let zs = gather(z, subset)?;
    softmax(&zs.iter().map(|&x| alpha * x).collect::<Vec<_>>())
}

/// Entropy of the restricted softmax, evaluated as `Phi(alpha z_S) - alpha E[z_S]`
/// so that vanishing probabilities never reach a logarithm.
pub fn restricted_entropy<T: Scalar>(z: &[T], subset: &[usize], alpha: T) -> Result<T> {
    check_alpha(alpha)?;
    let zs = gather(z, subset)?;
    Ok(entropy_of_logits(&zs, alpha)?.0)
}

/// `(H, E[z], Var[z])` under `softmax(alpha z)`.
fn entropy_of_logits<T: Scalar>(z: &[T], alpha: T) -> Result<(T, T, T)> {
    let scaled: Vec<T> = z.iter().map(|&x| alpha * x).collect();
    let lse = log_sum_exp(&scaled)?;
    let p = softmax(&scaled)?;
    let mean: T = p.iter().zip(z).map(|(&pi, &zi)| pi * zi).sum();
    let var: T = p.iter().zip(z).map(|(&pi, &zi)| pi * (zi - mean) * (zi - mean)).sum();
    let h = lse - alpha * mean;
    Ok((h.max(T::zero()), mean, var))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport<T> {
    pub alpha: T,
    pub entropy: T,
    pub variance: T,
    pub analytic_derivative: T,
    pub numeric_derivative: T,
    pub abs_gap: T,
}

/// Entropy derivative at `alpha`, analytically as `-alpha Var` and by central
/// difference with step `fd_step`.
pub fn entropy_alpha_report<T: Scalar>(z: &[T], subset: &[usize], alpha: T, fd_step: T) -> Result<EntropyReport<T>> {
    check_alpha(alpha)?;
    if !(fd_step > T::zero()) || fd_step >= alpha {
        return Err(invalid(format!("finite-difference step {fd_step} must lie in (0, alpha)")));
    }
    let zs = gather(z, subset)?;
    let (entropy, _, variance) = entropy_of_logits(&zs, alpha)?;
    let analytic_derivative = -alpha * variance;
    let (h_plus, _, _) = entropy_of_logits(&zs, alpha + fd_step)?;
    let (h_minus, _, _) = entropy_of_logits(&zs, alpha - fd_step)?;
    let numeric_derivative = (h_plus - h_minus) / (T::lit(2.0) * fd_step);
    Ok(EntropyReport {
        alpha,
        entropy,
        variance,
        analytic_derivative,
        numeric_derivative,
        abs_gap: (analytic_derivative - numeric_derivative).abs(),
    })
}

/// `alpha^2 (Diag(p) - p p^T)` with `p = softmax(alpha z)`.
///
/// Diagonal entries are formed as `p_i * sum_{j != i} p_j`, which keeps the
/// row sums at rounding level and stays accurate when `p_i` is close to 1.
pub fn attention_hessian<T: Scalar>(z: &[T], alpha: T) -> Result<Matrix<T>> {
    check_alpha(alpha)?;
    let p = crate::numkernel::tempered_softmax(z, alpha)?;
    Ok(covariance_hessian(&p, alpha))
}

fn covariance_hessian<T: Scalar>(p: &[T], alpha: T) -> Matrix<T> {
    let m = p.len();
    let a2 = alpha * alpha;
    Matrix::from_fn(m, m, |i, j| {
        if i == j {
            let others: T = p.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &x)| x).sum();
            a2 * p[i] * others
        } else {
            -a2 * p[i] * p[j]
        }
    })
}

/// Largest logit minus the runner-up, with the argmax. Zero gap for ties or
/// singletons.
pub fn logit_gap<T: Scalar>(z: &[T]) -> (usize, T) {
    let mut best = 0;
    for (j, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = j;
        }
    }
    let runner_up = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != best)
        .map(|(_, &x)| x)
        .fold(T::neg_infinity(), T::max);
    if runner_up == T::neg_infinity() {
        return (best, T::zero());
    }
    (best, z[best] - runner_up)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvatureReport<T> {
    pub alpha: T,
    pub spectral_norm: T,
    /// `max_i 2 p_i (1 - p_i)`; bounds the covariance before the `alpha^2` factor.
    pub gershgorin_bound: T,
    pub tail_mass: T,
    /// `(m - 1) e^{-alpha gap}`, `None` without a unique maximum.
    pub tail_bound: Option<T>,
    /// `2 alpha^2 (m - 1) e^{-alpha gap}`, `None` without a unique maximum.
    pub decay_bound: Option<T>,
    pub logit_gap_delta: T,
    /// Whether `alpha >= 2 / gap`, where the decay envelope is nonincreasing.
    pub in_decay_regime: bool,
    pub violations: Violations,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Violations {
    pub gershgorin: bool,
    pub tail: bool,
    pub decay: bool,
}

impl Violations {
    pub fn any(&self) -> bool {
        self.gershgorin || self.tail || self.decay
    }
}

/// Relative slack allowed in bound comparisons. The decay bound becomes tight
/// to within `e^{-alpha gap}` for two keys, which drops below f64 resolution at
/// large `alpha`.
pub const BOUND_SLACK: f64 = 1e-12;

pub(crate) fn within<T: Scalar>(lhs: T, rhs: T) -> bool {
    lhs <= rhs + T::lit(BOUND_SLACK) * rhs.abs() + T::min_positive_value()
}

pub fn curvature_report<T: Scalar>(z: &[T], alpha: T) -> Result<CurvatureReport<T>> {
    check_alpha(alpha)?;
    let m = z.len();
    let p = crate::numkernel::tempered_softmax(z, alpha)?;
    let (star, gap) = logit_gap(z);
    // Sum of the other entries, not 1 - p*, so tiny tails survive.
    let tail_mass: T = p.iter().enumerate().filter(|&(j, _)| j != star).map(|(_, &x)| x).sum();
    let gershgorin_bound = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            let others: T = p.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &x)| x).sum();
            T::lit(2.0) * pi * others
        })
        .fold(T::zero(), T::max);
    let spectral = spectral_norm_sym(&covariance_hessian(&p, alpha))?;

    let unique = gap > T::zero();
    let envelope = (T::count(m) - T::one()) * (-alpha * gap).exp();
    let tail_bound = unique.then_some(envelope);
    let decay_bound = unique.then(|| T::lit(2.0) * alpha * alpha * envelope);

    let violations = Violations {
        gershgorin: !within(spectral, gershgorin_bound * alpha * alpha),
        tail: tail_bound.is_some_and(|b| !within(tail_mass, b)),
        decay: decay_bound.is_some_and(|b| !within(spectral, b)),
    };
    Ok(CurvatureReport {
        alpha,
        spectral_norm: spectral,
        gershgorin_bound,
        tail_mass,
        tail_bound,
        decay_bound,
        logit_gap_delta: gap,
        in_decay_regime: unique && alpha * gap >= T::lit(2.0),
        violations,
    })
}

/// `2 alpha^2 (m - 1) e^{-alpha gap}`.
pub fn decay_envelope<T: Scalar>(alpha: T, m: usize, gap: T) -> T {
    T::lit(2.0) * alpha * alpha * (T::count(m) - T::one()) * (-alpha * gap).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzReport<T> {
    pub alpha1: T,
    pub alpha2: T,
    /// `||y(alpha1) - y(alpha2)||_2`.
    pub output_change: T,
    /// `1/2 ||V||_2 ||z||_2 |alpha1 - alpha2|`.
    pub bound: T,
    pub margin: T,
    pub holds: bool,
}

/// Lipschitz bound for one query's attention output `y(alpha) = p(alpha)^T V`
/// (row orientation, `V` is `m x d_v`).
pub fn lipschitz_report<T: Scalar>(z: &[T], v: &Matrix<T>, alpha1: T, alpha2: T) -> Result<LipschitzReport<T>> {
    check_alpha(alpha1)?;
    check_alpha(alpha2)?;
    if v.rows() != z.len() {
        return Err(Error::DimensionMismatch {
            context: "lipschitz_report",
            expected: format!("V with {} rows", z.len()),
            found: format!("V {}x{}", v.rows(), v.cols()),
        });
    }
    let y = |alpha: T| -> Result<Vec<T>> {
        let p = crate::numkernel::tempered_softmax(z, alpha)?;
        Ok((0..v.cols()).map(|c| (0..v.rows()).map(|j| p[j] * v.get(j, c)).sum()).collect())
    };
    let (y1, y2) = (y(alpha1)?, y(alpha2)?);
    let diff: Vec<T> = y1.iter().zip(&y2).map(|(a, b)| *a - *b).collect();
    let output_change = norm2(&diff);
    let bound = T::lit(0.5) * spectral_norm(v)? * norm2(z) * (alpha1 - alpha2).abs();
    Ok(LipschitzReport {
        alpha1,
        alpha2,
        output_change,
        bound,
        margin: bound - output_change,
        holds: within(output_change, bound),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupMassReport<T> {
    pub mass_text: T,
    pub mass_image: T,
    pub mass_video: T,
    /// Entropy of the attention renormalised over text and image keys; 0 if
    /// that block is empty or carries no mass.
    pub entropy_cond: T,
}

impl<T: Scalar> GroupMassReport<T> {
    pub fn mass(&self, group: TokenGroup) -> T {
        match group {
            TokenGroup::Text => self.mass_text,
            TokenGroup::Image => self.mass_image,
            TokenGroup::Video => self.mass_video,
        }
    }
}

pub fn group_mass_report<T: Scalar>(p: &[T], partition: &KeyPartition) -> Result<GroupMassReport<T>> {
    if p.len() != partition.len() {
        return Err(Error::DimensionMismatch {
            context: "group_mass_report",
            expected: format!("{} probabilities", partition.len()),
            found: format!("{}", p.len()),
        });
    }
    let mass = |g: TokenGroup| partition.indices(g).iter().map(|&j| p[j]).sum::<T>();
    let cond = partition.conditioning();
    let cond_mass: T = cond.iter().map(|&j| p[j]).sum();
    let entropy_cond = if cond.is_empty() || !(cond_mass > T::zero()) {
        T::zero()
    } else {
        let renorm: Vec<T> = cond.iter().map(|&j| p[j] / cond_mass).collect();
        entropy(&renorm)?
    };
    Ok(GroupMassReport {
        mass_text: mass(TokenGroup::Text),
        mass_image: mass(TokenGroup::Image),
        mass_video: mass(TokenGroup::Video),
        entropy_cond,
    })
}

/// Fraction of attention work touched by modulation: `(L_s / L) (T_s / T)`.
pub fn flops_overhead(selected_blocks: usize, blocks: usize, active_steps: usize, steps: usize) -> Result<f64> {
    if blocks == 0 || steps == 0 || selected_blocks > blocks || active_steps > steps {
        return Err(invalid(format!(
            "flops_overhead needs L_s <= L, T_s <= T, L, T >= 1; got ({selected_blocks}, {blocks}, {active_steps}, {steps})"
        )));
    }
    Ok((selected_blocks as f64 / blocks as f64) * (active_steps as f64 / steps as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow<T> {
    pub alpha: T,
    pub entropy: T,
    pub variance: T,
    pub spectral_norm: T,
    pub gershgorin_bound: T,
    pub tail_mass: T,
    pub tail_bound: Option<T>,
    pub decay_bound: Option<T>,
    /// Entropy did not increase from the previous grid point.
    pub entropy_monotone: bool,
    /// Spectral norm did not increase from the previous grid point; only
    /// meaningful inside the decay regime.
    pub spectral_monotone: bool,
    pub in_decay_regime: bool,
}

/// Entropy and curvature quantities over an inverse-temperature grid.
///
/// The grid is sorted ascending before evaluation.
pub fn alpha_sweep<T: Scalar>(z: &[T], grid: &[T]) -> Result<Vec<SweepRow<T>>> {
    if grid.is_empty() {
        return Err(Error::Empty("alpha grid"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let all: Vec<usize> = (0..z.len()).collect();
    let mut rows: Vec<SweepRow<T>> = Vec::with_capacity(grid.len());
    for alpha in grid {
        let (h, _, var) = {
            check_alpha(alpha)?;
            entropy_of_logits(&gather(z, &all)?, alpha)?
        };
        let c = curvature_report(z, alpha)?;
        let (entropy_monotone, spectral_monotone) = match rows.last() {
            Some(prev) => (h <= prev.entropy + T::lit(1e-12), c.spectral_norm <= prev.spectral_norm * (T::one() + T::lit(BOUND_SLACK))),
            None => (true, true),
        };
        rows.push(SweepRow {
            alpha,
            entropy: h,
            variance: var,
            spectral_norm: c.spectral_norm,
            gershgorin_bound: c.gershgorin_bound,
            tail_mass: c.tail_mass,
            tail_bound: c.tail_bound,
            decay_bound: c.decay_bound,
            entropy_monotone,
            spectral_monotone,
            in_decay_regime: c.in_decay_regime,
        });
    }
    Ok(rows)
}
