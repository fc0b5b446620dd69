//! Self-check suite for the theory oracles, run by `fedlora verify`.

use std::fmt;

use crate::error::Result;
use crate::linalg::{angle_distance, Mat, SeededRng};
use crate::lora::init_with_angle;
use crate::task::{client_variance, LinearTask, SampleMode};
use crate::theory::{
    altmin_gd, c_tilde, contraction_bound, ffa_heter_loss_exact, ffa_heter_loss_formula, ffa_homog_empirical_loss,
    ffa_homog_predicted_loss, heter_contraction_bound, heter_population_round, iterations_needed, l_max, RATIO_SLACK,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Pooled statistics of Alt-min-GD over seeds on the homogeneous task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogContraction {
    pub ratios: usize,
    pub non_increasing: usize,
    pub within_bound: usize,
    pub seeds: usize,
    pub seeds_reached: usize,
    pub iterations: usize,
    pub bound: f64,
}

impl HomogContraction {
    pub fn non_increasing_frac(&self) -> f64 {
        self.non_increasing as f64 / self.ratios.max(1) as f64
    }

    pub fn within_frac(&self) -> f64 {
        self.within_bound as f64 / self.ratios.max(1) as f64
    }
}

/// d=20, m=1000, N=10, δ₀=0.5, ‖b*‖=1, `eta_scale/‖b*‖²` step, run for
/// `iterations_needed(0.5, eps, 0.5)` iterations per seed.
pub fn homog_contraction(eta_scale: f64, seeds: u64, eps: f64) -> Result<HomogContraction> {
    let (d, m, n, delta0, b_norm) = (20, 1000, 10, 0.5, 1.0);
    let eta = eta_scale / (b_norm * b_norm);
    let iterations = iterations_needed(delta0, eps, 0.5)?;
    let bound = contraction_bound(delta0, eta, b_norm)?;
    let mut out = HomogContraction { ratios: 0, non_increasing: 0, within_bound: 0, seeds: seeds as usize, seeds_reached: 0, iterations, bound };
    for seed in 0..seeds {
        let mut rng = SeededRng::new(seed);
        let task = LinearTask::homogeneous(d, m, n, b_norm, SampleMode::FiniteSample, &mut rng)?;
        let a0 = init_with_angle(&task.a_star, delta0, &mut rng)?;
        let rep = altmin_gd(&task, &a0, eta, iterations, &mut rng)?;
        for r in rep.recorded_ratios() {
            out.ratios += 1;
            out.non_increasing += usize::from(r <= 1.0);
            out.within_bound += usize::from(r <= bound + RATIO_SLACK);
        }
        out.seeds_reached += usize::from(rep.first_below(eps).is_some());
    }
    Ok(out)
}

fn random_heter_task(rng: &mut SeededRng) -> Result<LinearTask> {
    let d = 2 + rng.below(31);
    let n = 1 + rng.below(20);
    let gamma = if n == 1 { 0.0 } else { 2.0 * rng.uniform() };
    let b_norm = 0.2 + 2.0 * rng.uniform();
    LinearTask::heterogeneous(d, 0, n, b_norm, gamma, SampleMode::Population, rng)
}

fn ffa_monte_carlo() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (i, delta0) in [0.3, 0.5, 0.8].into_iter().enumerate() {
        let mut rng = SeededRng::derive(2024, &[i as u64]);
        let task = LinearTask::homogeneous(20, 50, 10, 2.0, SampleMode::FiniteSample, &mut rng)?;
        let a0 = init_with_angle(&task.a_star, delta0, &mut rng)?;
        let (mean, se) = ffa_homog_empirical_loss(&task, &a0, 2000, &mut rng)?;
        let pred = ffa_homog_predicted_loss(10, 50, delta0, 2.0)?.predicted;
        worst = worst.max((mean - pred).abs() / se);
    }
    Ok((worst <= 4.0, format!("max |mean - prediction| = {worst:.2} standard errors (limit 4)")))
}

fn heter_identities() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(77);
    let (mut b_err, mut loss_err, mut excess): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);
    for _ in 0..100 {
        let task = random_heter_task(&mut rng)?;
        let delta0 = 0.05 + 0.9 * rng.uniform();
        let a0 = init_with_angle(&task.a_star, delta0, &mut rng)?;
        loss_err = loss_err.max((ffa_heter_loss_exact(&task, &a0)? - ffa_heter_loss_formula(&task, &a0)?).abs());
        let l = l_max(&task);
        let eta = 1.0 / (2.0 * l * l);
        let bb = task.b_bar();
        let mut a = a0;
        let mut delta = delta0;
        for _ in 0..50 {
            let (next, b_bar) = heter_population_round(&a, &task, eta)?;
            b_err = b_err.max(b_bar.sub(&bb.scale(task.a_star.dot(&a))).norm());
            let next_delta = angle_distance(&next, &task.a_star)?;
            excess = excess.max(next_delta - heter_contraction_bound(delta, delta0, eta, bb.norm()));
            a = next;
            delta = next_delta;
        }
    }
    let ok = b_err <= 1e-12 && loss_err <= 1e-10 && excess <= 1e-10;
    Ok((ok, format!("b-bar error {b_err:.1e}, FFA loss error {loss_err:.1e}, worst contraction excess {excess:.1e}")))
}

fn heter_recovery_and_escape() -> Result<(bool, String)> {
    let mut rng = SeededRng::new(91);
    let eps = 1e-4;
    let (mut worst_recovery, mut worst_gap, mut ffa_min_gap): (f64, f64, f64) = (f64::NEG_INFINITY, 0.0, f64::INFINITY);
    for _ in 0..100 {
        let task = random_heter_task(&mut rng)?;
        let delta0 = 0.05 + 0.9 * rng.uniform();
        let a0 = init_with_angle(&task.a_star, delta0, &mut rng)?;
        let l = l_max(&task);
        let eta = 1.0 / (4.0 * l * l);
        let bb = task.b_bar();
        let c = (4.0 * eta * bb.dot(&bb)).min(0.99);
        let iters = iterations_needed(delta0, eps, c)?;
        let rep = altmin_gd(&task, &a0, eta, iters, &mut rng)?;
        let target = Mat::outer(&task.a_star, &bb);
        let err = Mat::outer(&rep.a_final, &rep.b_next).sub(&target)?.frob_norm();
        worst_recovery = worst_recovery.max(err - (eps * target.frob_norm() + 1e-9));
        let gamma_sq = client_variance(&task).gamma_sq;
        let rolora_loss = ffa_heter_loss_exact(&task, &rep.a_final)?;
        worst_gap = worst_gap.max(rolora_loss - gamma_sq);
        ffa_min_gap = ffa_min_gap.min(ffa_heter_loss_exact(&task, &a0)? - gamma_sq - bb.dot(&bb) * delta0 * delta0);
    }
    let ok = worst_recovery <= 0.0 && worst_gap <= 1e-6 && ffa_min_gap.abs() <= 1e-10;
    Ok((
        ok,
        format!("recovery slack {worst_recovery:.1e} (<= 0), RoLoRA loss - gamma^2 <= {worst_gap:.1e}, FFA floor deviation {ffa_min_gap:.1e}"),
    ))
}

fn homog_check(eta_scale: f64) -> Result<(bool, String)> {
    let s = homog_contraction(eta_scale, 20, 1e-3)?;
    let ok = s.non_increasing_frac() >= 0.95 && s.within_frac() >= 0.90 && s.seeds_reached == s.seeds;
    Ok((
        ok,
        format!(
            "non-increasing {:.1}% (>= 95%), ratio <= {:.4}+{RATIO_SLACK} in {:.1}% (>= 90%), {}/{} seeds reach 1e-3 within {} iterations",
            100.0 * s.non_increasing_frac(),
            s.bound,
            100.0 * s.within_frac(),
            s.seeds_reached,
            s.seeds,
            s.iterations
        ),
    ))
}

/// Runs every check; order is stable.
pub fn theory_suite() -> Vec<Check> {
    vec![
        check("contraction bound arithmetic", contraction_bound(0.6, 0.5, 1.0).map(|b| {
            ((b - 0.68f64.sqrt()).abs() < 1e-15, format!("bound(0.6, 0.5, 1) = {b:.6}"))
        })),
        check("iterations needed arithmetic", iterations_needed(0.5, 0.005, 0.5).map(|t| (t == 25, format!("T = {t} (expected 25)")))),
        check("c-tilde arithmetic", Ok({
            let c = c_tilde(10, 50);
            ((c + 0.001925).abs() < 1e-15, format!("c~(10, 50) = {c}"))
        })),
        check("FFA homogeneous Monte Carlo", ffa_monte_carlo()),
        check("heterogeneous population identities", heter_identities()),
        check("heterogeneous recovery and FFA floor", heter_recovery_and_escape()),
        check("homogeneous contraction, eta = 1/|b*|^2", homog_check(1.0)),
        check("homogeneous contraction, eta = 1/(2|b*|^2)", homog_check(0.5)),
    ]
}
