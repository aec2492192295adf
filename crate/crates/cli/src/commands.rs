use std::path::{Path, PathBuf};

use attnlab_core::analysis::{alpha_sweep, curvature_report, logit_gap, BOUND_SLACK};
use attnlab_core::calibration::{calibrate, CalibrationOutcome, CalibrationSample, FixtureModel};
use attnlab_core::io::{TensorData, TensorFile};
use attnlab_core::numkernel::{sample_gaussian, Matrix};
use attnlab_core::schedule::step_fraction;
use attnlab_core::sim::{conflict_experiment, flops_audit, make_toy_denoiser, run_trajectory, FlopsAudit};
use attnlab_core::verify::{self, Suite, COLLAPSE_TOL, MIN_GAP};
use attnlab_core::{ConflictReport64, Seed, Trajectory64};
use serde::Serialize;

use crate::config::{Format, ModeKind, RunConfig};
use crate::error::CliError;
use crate::report::{Field, Output, Table};

/// Seed streams, so commands sharing a seed do not share draws.
const SWEEP_STREAM: u64 = 0x5357;
const DENOISER_STREAM: u64 = 1;
const STATE_STREAM: u64 = 2;
const CONFLICT_STREAM: u64 = 3;
const TENSOR_STREAM: u64 = 4;

/// What a command produced and what it found wrong.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub outputs: Vec<Output>,
    /// One line per failed property, first failure first.
    pub violations: Vec<String>,
    /// Human-readable lines for stderr.
    pub summary: Vec<String>,
    /// Format used when neither the config nor the flags pick one.
    pub default_format: Option<Format>,
}

impl Outcome {
    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(msg());
        }
    }
}

pub fn verify(cfg: &RunConfig, suite: Suite) -> Result<Outcome, CliError> {
    let reports = verify::run(suite, &cfg.verify_config())?;
    let mut table = Table::new(format!("verify_{}", suite.name()), &["suite", "draw", "check", "lhs", "rhs", "margin", "pass"]);
    let mut out = Outcome::default();
    for r in &reports {
        for row in &r.rows {
            table.push(vec![
                Field::text(row.suite.name()),
                row.draw.into(),
                Field::text(row.check),
                row.lhs.into(),
                row.rhs.into(),
                row.margin.into(),
                row.pass.into(),
            ]);
        }
        out.summary.push(format!(
            "{}: {} draws, {} checks, {} violations, min margin {}",
            r.suite,
            r.draws,
            r.rows.len(),
            r.violations,
            r.min_margin().map_or("n/a".into(), |m| format!("{m:e}"))
        ));
        if let Some(f) = r.first_failure() {
            out.violations.push(format!(
                "{} draw {} check {}: lhs {:e} > rhs {:e} ({} violations in suite)",
                f.suite, f.draw, f.check, f.lhs, f.rhs, r.violations
            ));
        }
    }
    out.outputs.push(Output::Table(table));
    Ok(out)
}

/// `n` points from `lo` to `hi`, geometric, with `hi` exact.
fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo >= hi {
        return vec![hi];
    }
    let ratio = (hi / lo).ln();
    let mut g: Vec<f64> = (0..n).map(|i| lo * (ratio * i as f64 / (n - 1) as f64).exp()).collect();
    g[n - 1] = hi;
    g
}

fn random_logits(seed: Seed, max_keys: usize, std: f64) -> Result<Vec<f64>, CliError> {
    for attempt in 0..1000u64 {
        let s = seed.derive(attempt);
        let m = 2 + (s.0 % (max_keys as u64 - 1)) as usize;
        let z = sample_gaussian(1, m, s.derive(0), 0.0, std)?.into_data();
        if logit_gap(&z).1 >= MIN_GAP {
            return Ok(z);
        }
    }
    Err(CliError::Violation("no logit draw with a unique maximum in 1000 attempts".into()))
}

pub fn sweep(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let w = &cfg.sweep;
    let draws: Vec<Vec<f64>> = match &w.logits {
        Some(z) => vec![z.clone()],
        None => (0..w.draws)
            .map(|d| random_logits(Seed(cfg.seed).derive(SWEEP_STREAM).derive(d as u64), w.max_keys, w.logit_std))
            .collect::<Result<_, _>>()?,
    };
    let mut table = Table::new(
        "sweep",
        &[
            "draw",
            "keys",
            "gap",
            "alpha",
            "entropy",
            "variance",
            "spectral_norm",
            "gershgorin_bound",
            "tail_mass",
            "tail_bound",
            "decay_bound",
            "in_decay_regime",
            "entropy_monotone",
            "spectral_monotone",
            "envelope_monotone",
            "bounds_hold",
        ],
    );
    let mut out = Outcome::default();
    for (d, z) in draws.iter().enumerate() {
        let (_, gap) = logit_gap(z);
        let grid = match &w.grid {
            Some(g) => g.clone(),
            None if gap > 0.0 => geometric_grid(w.alpha_min, w.collapse_multiple / gap, w.grid_points),
            None => return Err(CliError::Config("logits without a unique maximum need an explicit sweep.grid".into())),
        };
        let rows = alpha_sweep(z, &grid)?;
        let mut prev_envelope: Option<f64> = None;
        for r in &rows {
            let c = curvature_report(z, r.alpha)?;
            let envelope_monotone = match (prev_envelope, r.decay_bound, r.in_decay_regime) {
                (Some(p), Some(e), true) => e <= p * (1.0 + BOUND_SLACK),
                _ => true,
            };
            prev_envelope = if r.in_decay_regime { r.decay_bound } else { None };
            let bounds_hold = !c.violations.any();
            table.push(vec![
                d.into(),
                z.len().into(),
                gap.into(),
                r.alpha.into(),
                r.entropy.into(),
                r.variance.into(),
                r.spectral_norm.into(),
                (r.alpha * r.alpha * r.gershgorin_bound).into(),
                r.tail_mass.into(),
                r.tail_bound.into(),
                r.decay_bound.into(),
                r.in_decay_regime.into(),
                r.entropy_monotone.into(),
                r.spectral_monotone.into(),
                envelope_monotone.into(),
                bounds_hold.into(),
            ]);
            out.check(r.entropy_monotone, || format!("draw {d}: entropy increased at alpha {:e}", r.alpha));
            out.check(envelope_monotone, || format!("draw {d}: decay envelope increased at alpha {:e}", r.alpha));
            out.check(bounds_hold, || format!("draw {d}: curvature bound violated at alpha {:e}: {:?}", r.alpha, c.violations));
        }
        let last = rows.last().expect("grid is nonempty");
        if w.grid.is_none() && gap > 0.0 && w.collapse_multiple >= 50.0 {
            out.check(last.spectral_norm < COLLAPSE_TOL, || {
                format!("draw {d}: spectral norm {:e} at alpha {:e} is not below {COLLAPSE_TOL:e}", last.spectral_norm, last.alpha)
            });
        }
    }
    out.summary.push(format!("sweep: {} draws, {} rows", draws.len(), table.rows.len()));
    out.outputs.push(Output::Table(table));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockTableReport {
    pub source: &'static str,
    pub seed: Option<u64>,
    pub tau: f64,
    pub high_quantile: f64,
    pub blocks: usize,
    pub sample_count: usize,
    pub ratios: Vec<f64>,
    pub selected: Vec<usize>,
    pub degenerate_cells: usize,
}

fn read_tensor(path: &Path) -> Result<TensorFile, CliError> {
    TensorFile::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn in_file<T>(path: &Path, r: attnlab_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Violation(m) => CliError::Violation(format!("{}: {m}", path.display())),
    })
}

fn load_samples(cfg: &RunConfig, base: &Path) -> Result<Vec<CalibrationSample<f64>>, CliError> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    cfg.calibrate
        .inputs
        .iter()
        .map(|s| {
            let lp = resolve(&s.latent);
            let latent = in_file(&lp, read_tensor(&lp)?.to_latent())?;
            let attention = s
                .attention
                .iter()
                .map(|p| {
                    let p = resolve(p);
                    in_file(&p, read_tensor(&p)?.to_matrix())
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mask = match &s.mask {
                Some(p) => {
                    let p = resolve(p);
                    Some(in_file(&p, read_tensor(&p)?.to_mask())?)
                }
                None => None,
            };
            Ok(CalibrationSample { latent, attention, mask })
        })
        .collect()
}

/// Relative input paths resolve against `base`, the config file's directory.
pub fn calibrate_cmd(cfg: &RunConfig, base: &Path) -> Result<Outcome, CliError> {
    let c = &cfg.calibrate;
    let (source, seed, res): (_, _, CalibrationOutcome) = if c.inputs.is_empty() {
        ("synthetic", Some(cfg.seed), c.synthetic.run(Seed(cfg.seed), c.tau, c.high_quantile)?)
    } else {
        let samples = load_samples(cfg, base)?;
        ("files", None, calibrate(&samples, c.tau, c.high_quantile)?)
    };
    let report = BlockTableReport {
        source,
        seed,
        tau: res.tau,
        high_quantile: res.high_quantile,
        blocks: res.table.ratios().len(),
        sample_count: res.table.sample_count(),
        ratios: res.table.ratios().to_vec(),
        selected: res.selected.clone(),
        degenerate_cells: res.degenerate_cells,
    };
    let mut table = Table::new("block_ratios", &["block", "ratio", "selected"]);
    for (l, &r) in report.ratios.iter().enumerate() {
        table.push(vec![l.into(), r.into(), report.selected.contains(&l).into()]);
    }
    let mut out = Outcome { default_format: Some(Format::Json), ..Outcome::default() };
    out.summary.push(format!(
        "calibrate: {} blocks, {} samples, selected {:?} at tau {}",
        report.blocks, report.sample_count, report.selected, report.tau
    ));
    out.outputs.push(block_output(&report, table, cfg.output.format));
    Ok(out)
}

fn block_output(report: &BlockTableReport, table: Table, format: Option<Format>) -> Output {
    match format {
        Some(Format::Csv) => Output::Table(table),
        _ => Output::Document { name: "block_table".into(), value: serde_json::to_value(report).expect("report serializes") },
    }
}

pub fn validate_fixture(model: FixtureModel, blocks: usize) -> Result<Outcome, CliError> {
    let f = model.load()?;
    let check = f.validate(blocks);
    let mut out = Outcome { default_format: Some(Format::Json), ..Outcome::default() };
    out.summary.push(format!("fixture {}: {} blocks listed, checked against L = {blocks}", f.model, f.blocks.len()));
    out.check(check.is_ok(), || check.as_ref().unwrap_err().to_string());
    out.outputs.push(Output::Document {
        name: format!("fixture_{}", model.key()),
        value: serde_json::json!({
            "fixture": model.key(),
            "model": f.model,
            "blocks": blocks,
            "indices": f.blocks,
            "valid": check.is_ok(),
        }),
    });
    Ok(out)
}

/// Everything `simulate` computes.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub trajectory: Trajectory64,
    pub audit: FlopsAudit,
    pub conflict: ConflictReport64,
}

pub fn run_simulation(cfg: &RunConfig) -> Result<Simulation, CliError> {
    let schedule = cfg.schedule()?;
    let coeffs = cfg.coefficients()?;
    let seed = Seed(cfg.seed);
    let denoiser = make_toy_denoiser::<f64>(seed.derive(DENOISER_STREAM), cfg.schedule.blocks, cfg.simulate.dims)?;
    let initial = denoiser.initial_state(seed.derive(STATE_STREAM))?;
    let trajectory = run_trajectory(&denoiser, &coeffs, &schedule, initial)?;
    let audit = flops_audit(&trajectory, &schedule)?;
    let conflict = conflict_experiment::<f64>(seed.derive(CONFLICT_STREAM), &cfg.conflict_config())?;
    Ok(Simulation { trajectory, audit, conflict })
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let sim = run_simulation(cfg)?;
    let steps = cfg.schedule.steps;
    let mut traj = Table::new(
        "trajectory",
        &[
            "t",
            "phi",
            "step_active",
            "modulated_blocks",
            "mass_text",
            "mass_image",
            "mass_video",
            "entropy_cond",
            "entropy_ratio_max",
            "entropy_ratio_mean",
            "nondegenerate_queries",
            "degenerate_queries",
            "scale_multiplications",
            "attention_multiplications",
            "state_norm",
        ],
    );
    let mut out = Outcome::default();
    let gamma = cfg.schedule.gamma;
    let sharpening_expected = cfg.schedule.mode == ModeKind::Energy || gamma > 1.0;
    for (rec, state) in sim.trajectory.steps.iter().zip(&sim.trajectory.states[1..]) {
        traj.push(vec![
            rec.t.into(),
            step_fraction(rec.t, steps)?.into(),
            rec.step_active.into(),
            rec.scale_multiplications.iter().filter(|&&c| c > 0).count().into(),
            rec.masses.mass_text.into(),
            rec.masses.mass_image.into(),
            rec.masses.mass_video.into(),
            rec.masses.entropy_cond.into(),
            rec.entropy_ratio_max.into(),
            rec.entropy_ratio_mean.into(),
            rec.nondegenerate_queries.into(),
            rec.degenerate_queries.into(),
            rec.scale_multiplications.iter().sum::<u64>().into(),
            rec.attention_multiplications.iter().sum::<u64>().into(),
            state.frobenius_norm().into(),
        ]);
        if let (true, Some(r)) = (sharpening_expected, rec.entropy_ratio_max) {
            out.check(r < 1.0, || format!("step {}: conditioning entropy ratio {r:e} is not below 1", rec.t));
        }
        out.check(rec.step_active || rec.scale_multiplications.iter().all(|&c| c == 0), || {
            format!("step {}: scaling work outside the step window", rec.t)
        });
    }

    let a = &sim.audit;
    let c = &sim.conflict;
    out.check(a.cells_match, || "scaling work does not occur at exactly the gated cells".into());
    out.check(a.exact, || format!("measured overhead {} differs from the model {}", a.measured_fraction, a.model_fraction));
    if gamma > 1.0 {
        out.check(c.entropy_decreased, || "conflict: a non-degenerate query's entropy did not decrease".into());
    }
    out.check(c.sharpening_monotone, || "conflict: restricted max probability decreased along the gamma grid".into());

    let mut summary = Table::new(
        "summary",
        &[
            "gamma",
            "selected_blocks",
            "active_steps",
            "predicted_cells",
            "measured_cells",
            "cells_match",
            "extra_multiplications",
            "attention_multiplications",
            "measured_fraction",
            "model_fraction",
            "flops_exact",
            "overhead_vs_attention",
            "conflict_queries",
            "conflict_nondegenerate",
            "conflict_mean_entropy_ratio",
            "conflict_entropy_decreased",
            "conflict_sharpening_monotone",
            "baseline_image_mass",
            "delta_text_mass",
            "delta_image_mass",
            "argmax_image_to_text",
        ],
    );
    summary.push(vec![
        gamma.into(),
        a.selected_blocks.into(),
        a.active_steps.into(),
        a.predicted_cells.into(),
        a.measured_cells.into(),
        a.cells_match.into(),
        a.extra_multiplications.into(),
        a.attention_multiplications.into(),
        a.measured_fraction.into(),
        a.model_fraction.into(),
        a.exact.into(),
        a.overhead_vs_attention.into(),
        c.queries.len().into(),
        c.nondegenerate.into(),
        c.mean_entropy_ratio.into(),
        c.entropy_decreased.into(),
        c.sharpening_monotone.into(),
        c.baseline_image_mass.into(),
        c.delta_text_mass.into(),
        c.delta_image_mass.into(),
        c.argmax_image_to_text.into(),
    ]);
    out.summary.push(format!(
        "simulate: {} steps x {} blocks, {} modulated cells, overhead {} (model {}), conflict text mass {:+e}, image mass {:+e}",
        steps, cfg.schedule.blocks, a.measured_cells, a.measured_fraction, a.model_fraction, c.delta_text_mass, c.delta_image_mass
    ));
    out.outputs.push(Output::Table(traj));
    out.outputs.push(Output::Table(summary));
    Ok(out)
}

fn tensor_table(path: &Path, t: &TensorFile) -> Table {
    let mut table = Table::new("tensor", &["path", "dtype", "dims", "elements", "min", "max", "true_count"]);
    let dims = t.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
    let (min, max, trues) = match t.data() {
        TensorData::Real(v) => {
            let lo = v.iter().copied().reduce(f64::min);
            let hi = v.iter().copied().reduce(f64::max);
            (lo, hi, None)
        }
        TensorData::Bool(v) => (None, None, Some(v.iter().filter(|&&b| b).count())),
    };
    table.push(vec![
        Field::text(path.display().to_string()),
        Field::text(t.data().dtype_name()),
        Field::text(dims),
        t.data().len().into(),
        min.into(),
        max.into(),
        trues.map_or(Field::text(""), Field::from),
    ]);
    table
}

pub fn tensor_info(path: &Path) -> Result<Outcome, CliError> {
    let t = read_tensor(path)?;
    Ok(Outcome { outputs: vec![Output::Table(tensor_table(path, &t))], ..Outcome::default() })
}

/// Writes a seeded Gaussian tensor, or a mask with `N(0,1) > 0` entries.
pub fn tensor_random(cfg: &RunConfig, path: &Path, dims: &[usize], mask: bool) -> Result<Outcome, CliError> {
    let n: usize = dims.iter().product();
    let draws: Matrix<f64> = sample_gaussian(1, n, Seed(cfg.seed).derive(TENSOR_STREAM), 0.0, 1.0)?;
    let data = if mask {
        TensorData::Bool(draws.data().iter().map(|&x| x > 0.0).collect())
    } else {
        TensorData::Real(draws.into_data())
    };
    let t = TensorFile::new(dims.to_vec(), data)?;
    t.write(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let back = read_tensor(path)?;
    let mut out = Outcome::default();
    out.check(back == t, || format!("{}: read-back differs from the written tensor", path.display()));
    out.outputs.push(Output::Table(tensor_table(path, &back)));
    Ok(out)
}
