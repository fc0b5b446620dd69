//! Closed-form convergence predictions for the rank-1 linear model and the
//! estimators used to check them: alternating minimization with a gradient
//! step on `a` (Alt-min-GD), contraction bounds, and FFA-LoRA loss floors.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{angle_distance, check_unit, mix_seed, unit_normalize, SeededRng, Vector};
use crate::sim::{csv_num, opt_field, TRACE_HEADER};
use crate::task::{
    client_variance, gen_linear_shard, grad_a_linear, local_loss_linear, solve_b_exact, LinearShard, LinearTask, SampleMode,
};

/// Below this angle, per-iteration ratios are numerically meaningless.
pub const RATIO_FLOOR: f64 = 1e-12;

/// Additive slack on finite-sample ratio checks.
pub const RATIO_SLACK: f64 = 0.05;

/// Relative tolerance when checking `η` against a step-size ceiling.
const STEP_RTOL: f64 = 1e-12;

/// Per-iteration record of an Alt-min-GD run.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport {
    /// `δ⁰, …, δ^T` (length `T + 1`).
    pub deltas: Vec<f64>,
    /// `δᵗ⁺¹/δᵗ`, present only while `δᵗ > RATIO_FLOOR` (length `T`).
    pub ratios: Vec<Option<f64>>,
    /// Mean client loss at `(aᵗ, b̄ᵗ⁺¹)` for each iteration (length `T`).
    pub losses: Vec<f64>,
    /// `√(1 − η(1−δ₀²)‖b*‖²)` with `‖b̄*‖` in place of `‖b*‖`; `None` if `η` exceeds its ceiling.
    pub bound: Option<f64>,
    /// Ratios above `bound + RATIO_SLACK`.
    pub violations: usize,
    pub a_final: Vector,
    /// Averaged exact `b` at `a_final`.
    pub b_next: Vector,
}

impl ContractionReport {
    pub fn iterations(&self) -> usize {
        self.ratios.len()
    }

    pub fn final_delta(&self) -> f64 {
        *self.deltas.last().expect("deltas holds at least δ⁰")
    }

    /// First iteration count `t` with `δᵗ ≤ eps`.
    pub fn first_below(&self, eps: f64) -> Option<usize> {
        self.deltas.iter().position(|&d| d <= eps)
    }

    pub fn recorded_ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.ratios.iter().flatten().copied()
    }

    /// One row per iteration: angle after the step, its ratio, and the bound.
    pub fn rows(&self) -> Vec<TheoryRow> {
        (0..self.iterations())
            .map(|t| TheoryRow {
                round: t,
                trained_factor: "AB",
                global_loss: self.losses[t],
                angle_distance: Some(self.deltas[t + 1]),
                ratio: self.ratios[t],
                bound: self.bound,
                ..TheoryRow::default()
            })
            .collect()
    }
}

/// Row of a theory report CSV: the trace columns plus oracle columns.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TheoryRow {
    pub round: usize,
    pub trained_factor: &'static str,
    pub global_loss: f64,
    pub angle_distance: Option<f64>,
    pub ratio: Option<f64>,
    pub bound: Option<f64>,
    pub predicted_loss: Option<f64>,
    pub empirical_loss: Option<f64>,
    pub std_err: Option<f64>,
}

pub const THEORY_HEADER_EXTRA: &str = "ratio,bound,predicted_loss,empirical_loss,std_err";

pub fn write_theory_csv<W: Write>(rows: &[TheoryRow], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER},{THEORY_HEADER_EXTRA}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},,,{},{},{},{},{}",
            r.round,
            r.trained_factor,
            csv_num(r.global_loss),
            opt_field(r.angle_distance),
            opt_field(r.ratio),
            opt_field(r.bound),
            opt_field(r.predicted_loss),
            opt_field(r.empirical_loss),
            opt_field(r.std_err)
        )?;
    }
    Ok(())
}

fn check_open_angle(delta0: f64) -> Result<()> {
    if delta0 > 0.0 && delta0 < 1.0 {
        Ok(())
    } else {
        Err(Error::BadAngle(delta0))
    }
}

/// Shards for one iteration: the population shards, or fresh Gaussian designs
/// drawn from streams derived from `(base, iteration, client)`.
fn iteration_shards(task: &LinearTask, base: u64, iteration: usize, fresh: bool) -> Result<Vec<LinearShard>> {
    match task.mode {
        SampleMode::Population => Ok((0..task.n_clients()).map(|i| task.population_shard(i)).collect()),
        SampleMode::FiniteSample => {
            let it = if fresh { iteration as u64 } else { 0 };
            (0..task.n_clients())
                .into_par_iter()
                .map(|i| gen_linear_shard(task, i, &mut SeededRng::derive(base, &[it, i as u64])))
                .collect()
        }
    }
}

fn mean_exact_b(shards: &[LinearShard], a: &Vector) -> Result<Vector> {
    let bs = shards.iter().map(|s| solve_b_exact(s, a)).collect::<Result<Vec<_>>>()?;
    Ok(Vector::mean(&bs))
}

/// Options for [`altmin_gd_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AltMinOptions {
    /// Draw fresh designs every iteration. Reusing one draw is outside the
    /// regime the contraction bound covers and is meant for exploration only.
    pub fresh_samples: bool,
}

impl Default for AltMinOptions {
    fn default() -> Self {
        Self { fresh_samples: true }
    }
}

/// Alt-min-GD for the rank-1 model, `T` iterations from unit `a0`.
///
/// Each iteration: every client solves for its exact `bᵢ` at the current `a`,
/// the server averages to `b̄`, takes `a ← a − (η/N) Σ ∇ₐ lᵢ(a, b̄)` and
/// renormalizes.
pub fn altmin_gd(task: &LinearTask, a0: &Vector, eta: f64, iterations: usize, rng: &mut SeededRng) -> Result<ContractionReport> {
    altmin_gd_with(task, a0, eta, iterations, rng, AltMinOptions::default())
}

pub fn altmin_gd_with(
    task: &LinearTask,
    a0: &Vector,
    eta: f64,
    iterations: usize,
    rng: &mut SeededRng,
    opts: AltMinOptions,
) -> Result<ContractionReport> {
    check_unit(a0)?;
    if a0.dim() != task.d {
        return Err(Error::ShapeMismatch { op: "altmin_gd", detail: format!("a0 has length {}, task d={}", a0.dim(), task.d) });
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::BadRange(format!("eta must be positive, got {eta}")));
    }
    let delta0 = angle_distance(a0, &task.a_star)?;
    let base = rng.next_u64();
    let n = task.n_clients() as f64;
    let mut a = a0.clone();
    let mut deltas = vec![delta0];
    let mut ratios = Vec::with_capacity(iterations);
    let mut losses = Vec::with_capacity(iterations);

    for t in 0..iterations {
        let shards = iteration_shards(task, base, t, opts.fresh_samples)?;
        let b_bar = mean_exact_b(&shards, &a)?;
        let mut loss = 0.0;
        let mut grad = Vector::zeros(task.d);
        for s in &shards {
            loss += local_loss_linear(s, &a, &b_bar)?;
            grad = grad.add(&grad_a_linear(s, &a, &b_bar)?);
        }
        losses.push(loss / n);
        a = unit_normalize(&a.add_scaled(-eta / n, &grad))?;
        let prev = *deltas.last().expect("nonempty");
        let next = angle_distance(&a, &task.a_star)?;
        ratios.push((prev > RATIO_FLOOR).then(|| next / prev));
        deltas.push(next);
    }

    let final_shards = iteration_shards(task, base, iterations, opts.fresh_samples)?;
    let b_next = mean_exact_b(&final_shards, &a)?;
    let bound = if delta0 > 0.0 && delta0 < 1.0 { contraction_bound(delta0, eta, task.b_bar().norm()).ok() } else { None };
    let violations = match bound {
        Some(b) => ratios.iter().flatten().filter(|&&r| r > b + RATIO_SLACK).count(),
        None => 0,
    };
    Ok(ContractionReport { deltas, ratios, losses, bound, violations, a_final: a, b_next })
}

/// `√(1 − η(1−δ₀²)‖b*‖²)`, valid for `η ≤ 1/‖b*‖²`.
pub fn contraction_bound(delta0: f64, eta: f64, b_star_norm: f64) -> Result<f64> {
    check_open_angle(delta0)?;
    let l2 = b_star_norm * b_star_norm;
    if eta.is_nan() || eta <= 0.0 || eta * l2 > 1.0 + STEP_RTOL {
        return Err(Error::StepTooLarge { eta, max: 1.0 / l2 });
    }
    Ok((1.0 - eta * (1.0 - delta0 * delta0) * l2).max(0.0).sqrt())
}

/// `⌈(2/(c(1−δ₀²))) ln(δ₀/ε)⌉` iterations to reach angle `ε`.
pub fn iterations_needed(delta0: f64, eps: f64, c: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= delta0 && delta0 < 1.0) {
        return Err(Error::BadRange(format!("need 0 < eps <= delta0 < 1, got eps={eps}, delta0={delta0}")));
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::BadRange(format!("need 0 < c < 1, got {c}")));
    }
    let t = 2.0 / (c * (1.0 - delta0 * delta0)) * (delta0 / eps).ln();
    Ok(t.ceil() as usize)
}

/// Expected FFA-LoRA loss for a homogeneous task with `A` frozen at angle `δ₀`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfaLossPrediction {
    /// `(1 + c̃)‖b*‖²δ₀²`.
    pub predicted: f64,
    /// `(N(4−m) − 2) / (N²m(m−2))`.
    pub c_tilde: f64,
    pub n: usize,
    pub m: usize,
    pub delta0: f64,
    pub b_star_norm: f64,
}

pub fn c_tilde(n: usize, m: usize) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    (nf * (4.0 - mf) - 2.0) / (nf * nf * mf * (mf - 2.0))
}

pub fn ffa_homog_predicted_loss(n: usize, m: usize, delta0: f64, b_star_norm: f64) -> Result<FfaLossPrediction> {
    if m < 3 || n < 1 {
        return Err(Error::BadRange(format!("need m >= 3 and N >= 1, got m={m}, N={n}")));
    }
    check_open_angle(delta0)?;
    let c = c_tilde(n, m);
    Ok(FfaLossPrediction {
        predicted: (1.0 + c) * b_star_norm * b_star_norm * delta0 * delta0,
        c_tilde: c,
        n,
        m,
        delta0,
        b_star_norm,
    })
}

/// Monte Carlo estimate of the FFA-LoRA loss: mean and standard error over trials.
///
/// Each trial draws fresh designs, fits every `bᵢ` exactly at the frozen
/// `a0`, averages them, and evaluates the mean client loss of `(a0, b̄)`.
pub fn ffa_homog_empirical_loss(task: &LinearTask, a0: &Vector, trials: usize, rng: &mut SeededRng) -> Result<(f64, f64)> {
    if !task.is_homogeneous() {
        return Err(Error::BadRange("FFA Monte Carlo needs a homogeneous task".into()));
    }
    if task.mode == SampleMode::Population {
        return Err(Error::PopulationMode);
    }
    if trials < 100 {
        return Err(Error::BadRange(format!("need at least 100 trials, got {trials}")));
    }
    check_unit(a0)?;
    let base = rng.next_u64();
    let n = task.n_clients() as f64;
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut trng = SeededRng::new(mix_seed(base, &[trial as u64]));
            let shards = (0..task.n_clients()).map(|i| gen_linear_shard(task, i, &mut trng)).collect::<Result<Vec<_>>>()?;
            let b_ffa = mean_exact_b(&shards, a0)?;
            let total = shards.iter().map(|s| local_loss_linear(s, a0, &b_ffa)).sum::<Result<f64>>()?;
            Ok(total / n)
        })
        .collect::<Result<Vec<_>>>()?;
    let t = trials as f64;
    let mean = samples.iter().sum::<f64>() / t;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (t - 1.0);
    Ok((mean, (var / t).sqrt()))
}

/// Population FFA-LoRA loss with `A` frozen at `a0`: `b = b̄*(a*ᵀa0)`, then
/// the mean client loss.
pub fn ffa_heter_loss_exact(task: &LinearTask, a0: &Vector) -> Result<f64> {
    if task.mode != SampleMode::Population {
        return Err(Error::FiniteSampleMode);
    }
    check_unit(a0)?;
    let b_ffa = task.b_bar().scale(task.a_star.dot(a0));
    let total = (0..task.n_clients())
        .map(|i| local_loss_linear(&task.population_shard(i), a0, &b_ffa))
        .sum::<Result<f64>>()?;
    Ok(total / task.n_clients() as f64)
}

/// Closed form `γ² + ‖b̄*‖²δ₀²` for the same quantity.
pub fn ffa_heter_loss_formula(task: &LinearTask, a0: &Vector) -> Result<f64> {
    let delta0 = angle_distance(a0, &task.a_star)?;
    let bb = task.b_bar();
    Ok(client_variance(task).gamma_sq + bb.dot(&bb) * delta0 * delta0)
}

/// `L_max`: the recorded bound if any, else `max ‖bᵢ*‖`.
pub fn l_max(task: &LinearTask) -> f64 {
    task.l_max.unwrap_or_else(|| task.b_stars.iter().map(Vector::norm).fold(0.0, f64::max))
}

/// One population Alt-min-GD round on a heterogeneous task.
///
/// `b̄ = b̄*(a*ᵀa)`, `â⁺ = a − 2η(a b̄ᵀb̄ − a* b̄*ᵀb̄)`, `a⁺ = â⁺/‖â⁺‖`.
pub fn heter_population_round(a: &Vector, task: &LinearTask, eta: f64) -> Result<(Vector, Vector)> {
    if task.mode != SampleMode::Population {
        return Err(Error::FiniteSampleMode);
    }
    check_unit(a)?;
    let l = l_max(task);
    let max = 1.0 / (2.0 * l * l);
    if eta.is_nan() || eta <= 0.0 || eta > max * (1.0 + STEP_RTOL) {
        return Err(Error::StepTooLarge { eta, max });
    }
    let b_bar_star = task.b_bar();
    let b_bar = b_bar_star.scale(task.a_star.dot(a));
    let step = a.scale(b_bar.dot(&b_bar)).add_scaled(-b_bar_star.dot(&b_bar), &task.a_star);
    let a_next = unit_normalize(&a.add_scaled(-2.0 * eta, &step))?;
    Ok((a_next, b_bar))
}

/// `δₜ(1 − 2η(1−δ₀²)‖b̄*‖²)`, the per-round heterogeneous contraction bound.
pub fn heter_contraction_bound(delta_t: f64, delta0: f64, eta: f64, b_bar_norm: f64) -> f64 {
    delta_t * (1.0 - 2.0 * eta * (1.0 - delta0 * delta0) * b_bar_norm * b_bar_norm)
}
