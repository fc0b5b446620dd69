//! Low-rank adapter factors, initialization, and per-round freeze schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{check_unit, gaussian_matrix, unit_normalize, Mat, SeededRng, Vector};

/// Which factor(s) clients train in a communication round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMask {
    /// `A` frozen, `B` trained.
    TrainB,
    /// `B` frozen, `A` trained.
    TrainA,
    TrainBoth,
}

impl TrainMask {
    pub fn trains_a(self) -> bool {
        matches!(self, TrainMask::TrainA | TrainMask::TrainBoth)
    }

    pub fn trains_b(self) -> bool {
        matches!(self, TrainMask::TrainB | TrainMask::TrainBoth)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMask::TrainB => "B",
            TrainMask::TrainA => "A",
            TrainMask::TrainBoth => "AB",
        }
    }
}

impl fmt::Display for TrainMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B" => Ok(TrainMask::TrainB),
            "A" => Ok(TrainMask::TrainA),
            "AB" | "BA" | "BOTH" => Ok(TrainMask::TrainBoth),
            other => Err(Error::Validation {
                field: "schedule".into(),
                msg: format!("unknown factor `{other}` (expected A, B or AB)"),
            }),
        }
    }
}

/// Ordered freeze pattern over communication rounds.
///
/// With `repeat` the pattern cycles; otherwise rounds past the end reuse the
/// last entry, which is how "alternate for k rounds, then freeze A" mixes are
/// expressed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateSchedule {
    pattern: Vec<TrainMask>,
    repeat: bool,
}

impl UpdateSchedule {
    pub fn new(pattern: Vec<TrainMask>, repeat: bool) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::Validation { field: "schedule".into(), msg: "empty pattern".into() });
        }
        Ok(Self { pattern, repeat })
    }

    /// `[B, A]` repeating.
    pub fn rolora() -> Self {
        Self { pattern: vec![TrainMask::TrainB, TrainMask::TrainA], repeat: true }
    }

    /// `[B]`: `A` frozen at initialization forever.
    pub fn ffa() -> Self {
        Self { pattern: vec![TrainMask::TrainB], repeat: true }
    }

    pub fn both() -> Self {
        Self { pattern: vec![TrainMask::TrainBoth], repeat: true }
    }

    pub fn pattern(&self) -> &[TrainMask] {
        &self.pattern
    }

    pub fn repeats(&self) -> bool {
        self.repeat
    }

    pub fn mask(&self, round: usize) -> TrainMask {
        if self.repeat {
            self.pattern[round % self.pattern.len()]
        } else {
            self.pattern[round.min(self.pattern.len() - 1)]
        }
    }
}

impl fmt::Display for UpdateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.pattern.iter().map(|m| m.as_str()).collect();
        write!(f, "{}", parts.join(","))?;
        if !self.repeat {
            write!(f, ";once")?;
        }
        Ok(())
    }
}

impl FromStr for UpdateSchedule {
    type Err = Error;

    /// `B,A` (repeating) or `B,A,B;once`.
    fn from_str(s: &str) -> Result<Self> {
        let (body, repeat) = match s.split_once(';') {
            Some((body, flag)) if flag.trim().eq_ignore_ascii_case("once") => (body, false),
            Some((_, flag)) => {
                return Err(Error::Validation {
                    field: "schedule".into(),
                    msg: format!("unknown schedule flag `{}`", flag.trim()),
                })
            }
            None => (s, true),
        };
        let pattern = body
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(TrainMask::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(pattern, repeat)
    }
}

pub fn trainable_mask(sched: &UpdateSchedule, round: usize) -> TrainMask {
    sched.mask(round)
}

/// Factor pair `(A: d×r, B: r×d)` with scaling `alpha`; the update is `alpha·A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Mat,
    pub b: Mat,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Mat, b: Mat, alpha: f64) -> Result<Self> {
        let ad = Self { a, b, alpha };
        ad.check_shapes()?;
        Ok(ad)
    }

    /// Rank-1 adapter `(a, b)` with `A = a` as a column and `B = bᵀ` as a row.
    pub fn rank1(a: &Vector, b: &Vector) -> Self {
        Self { a: Mat::column(a), b: Mat::row_matrix(b), alpha: 1.0 }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (d, r) = self.a.shape();
        if self.b.shape() != (r, d) {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter",
                detail: format!("A is {d}x{r} but B is {}x{}", self.b.rows(), self.b.cols()),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `alpha·A·B`.
    pub fn effective_update(&self) -> Result<Mat> {
        self.check_shapes()?;
        Ok(self.a.matmul(&self.b)?.scale(self.alpha))
    }

    /// Column of `A` and row of `B` for a rank-1 adapter.
    pub fn rank1_parts(&self) -> Result<(Vector, Vector)> {
        if self.rank() != 1 {
            return Err(Error::ShapeMismatch { op: "rank1_parts", detail: format!("rank {}", self.rank()) });
        }
        Ok((self.a.col(0), Vector::from(self.b.row(0).to_vec())))
    }
}

pub fn effective_update(ad: &LoraAdapter) -> Result<Mat> {
    ad.effective_update()
}

/// How the down-projection `A` is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum AInit {
    /// Gaussian columns normalized to unit length (rank-1 theory path).
    GaussianUnit,
    /// i.i.d. N(0, std²).
    Gaussian { std: f64 },
    /// i.i.d. N(0, 1/d).
    FanIn,
    Given(Mat),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BInit {
    Zero,
    /// i.i.d. N(0, std²); needed when the model has no base weight and a
    /// zero product would leave every ReLU unit at its kink.
    Gaussian { std: f64 },
    Given(Mat),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitSpec {
    pub a_init: AInit,
    pub b_init: BInit,
    pub alpha: f64,
    pub seed: u64,
}

impl InitSpec {
    /// Random `A` with fan-in scaling, zero `B`, `alpha = 1`.
    pub fn standard(seed: u64) -> Self {
        Self { a_init: AInit::FanIn, b_init: BInit::Zero, alpha: 1.0, seed }
    }

    /// Fixed rank-1 start `(a0, 0)`.
    pub fn rank1_given(a0: &Vector) -> Self {
        Self { a_init: AInit::Given(Mat::column(a0)), b_init: BInit::Zero, alpha: 1.0, seed: 0 }
    }
}

pub fn init_adapter(spec: &InitSpec, d: usize, r: usize) -> Result<LoraAdapter> {
    if r == 0 || r > d {
        return Err(Error::BadSpec(format!("need d >= r >= 1, got d={d}, r={r}")));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::BadSpec(format!("alpha must be positive, got {}", spec.alpha)));
    }
    let mut rng = SeededRng::new(spec.seed);
    let a = match &spec.a_init {
        AInit::GaussianUnit => {
            let mut a = Mat::zeros(d, r);
            for j in 0..r {
                a.set_col(j, &rng.unit_vector(d));
            }
            a
        }
        AInit::Gaussian { std } => {
            if std.is_nan() || *std <= 0.0 {
                return Err(Error::BadSpec(format!("A std must be positive, got {std}")));
            }
            gaussian_matrix(&mut rng, d, r)?.scale(*std)
        }
        AInit::FanIn => gaussian_matrix(&mut rng, d, r)?.scale(1.0 / (d as f64).sqrt()),
        AInit::Given(a) => {
            if a.shape() != (d, r) {
                return Err(Error::BadSpec(format!("given A is {}x{}, expected {d}x{r}", a.rows(), a.cols())));
            }
            a.clone()
        }
    };
    let b = match &spec.b_init {
        BInit::Zero => Mat::zeros(r, d),
        BInit::Gaussian { std } => {
            if std.is_nan() || *std <= 0.0 {
                return Err(Error::BadSpec(format!("B std must be positive, got {std}")));
            }
            gaussian_matrix(&mut rng, r, d)?.scale(*std)
        }
        BInit::Given(b) => {
            if b.shape() != (r, d) {
                return Err(Error::BadSpec(format!("given B is {}x{}, expected {r}x{d}", b.rows(), b.cols())));
            }
            b.clone()
        }
    };
    Ok(LoraAdapter { a, b, alpha: spec.alpha })
}

/// Unit `a⁰ = √(1−δ₀²)·a* + δ₀·w`, with `w` a uniform unit vector orthogonal to `a*`.
pub fn init_with_angle(a_star: &Vector, delta0: f64, rng: &mut SeededRng) -> Result<Vector> {
    check_unit(a_star)?;
    if !(delta0 > 0.0 && delta0 < 1.0) {
        return Err(Error::BadAngle(delta0));
    }
    if a_star.dim() < 2 {
        return Err(Error::BadRange("angle initialization needs d >= 2".into()));
    }
    let w = loop {
        let g = rng.gaussian_vector(a_star.dim());
        let perp = g.add_scaled(-a_star.dot(&g), a_star);
        if let Ok(w) = unit_normalize(&perp) {
            // one re-projection pass removes residual a* component from rounding
            let w = w.add_scaled(-a_star.dot(&w), a_star);
            break unit_normalize(&w)?;
        }
    };
    let a0 = a_star.scale((1.0 - delta0 * delta0).sqrt()).add_scaled(delta0, &w);
    unit_normalize(&a0)
}
