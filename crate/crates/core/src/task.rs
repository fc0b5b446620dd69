//! Task models: the rank-1 linear regression setting and the two-layer ReLU
//! classifier, with their data generators, losses and analytic gradients.

use crate::error::{Error, Result};
use crate::linalg::{check_unit, gaussian_matrix, unit_normalize, Mat, SeededRng, Vector};
use crate::lora::{LoraAdapter, TrainMask};

/// `aᵀXᵀXa ≤ DEGENERATE_REL · m` is rejected by [`solve_b_exact`].
pub const DEGENERATE_REL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Gaussian design matrices `Xᵢ` with `m` rows.
    FiniteSample,
    /// Infinite-sample limit: `lᵢ(a, b) = ‖a* bᵢ*ᵀ − a bᵀ‖²`.
    Population,
}

/// Ground truth `(a*, {bᵢ*})` for the linear model `Yᵢ = Xᵢ a* bᵢ*ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask {
    pub d: usize,
    pub m: usize,
    pub a_star: Vector,
    pub b_stars: Vec<Vector>,
    pub mode: SampleMode,
    pub l_max: Option<f64>,
}

impl LinearTask {
    pub fn new(m: usize, a_star: Vector, b_stars: Vec<Vector>, mode: SampleMode) -> Result<Self> {
        check_unit(&a_star)?;
        let d = a_star.dim();
        if b_stars.is_empty() {
            return Err(Error::BadRange("linear task needs at least one client".into()));
        }
        if b_stars.iter().any(|b| b.dim() != d) {
            return Err(Error::ShapeMismatch { op: "LinearTask::new", detail: "b* dimension differs from a*".into() });
        }
        if mode == SampleMode::FiniteSample && m == 0 {
            return Err(Error::BadRange("finite-sample task needs m >= 1".into()));
        }
        Ok(Self { d, m, a_star, b_stars, mode, l_max: None })
    }

    /// Records `L_max` after checking `max ‖bᵢ*‖ ≤ L_max`.
    pub fn with_l_max(mut self, l_max: f64) -> Result<Self> {
        let worst = self.b_stars.iter().map(Vector::norm).fold(0.0, f64::max);
        if worst > l_max {
            return Err(Error::BadRange(format!("max ||b_i*|| = {worst} exceeds L_max = {l_max}")));
        }
        self.l_max = Some(l_max);
        Ok(self)
    }

    /// Every client shares one random `b*` with `‖b*‖ = b_norm`; `a*` is uniform on the sphere.
    pub fn homogeneous(d: usize, m: usize, n_clients: usize, b_norm: f64, mode: SampleMode, rng: &mut SeededRng) -> Result<Self> {
        let a_star = rng.unit_vector(d);
        let b_star = rng.unit_vector(d).scale(b_norm);
        Self::new(m, a_star, vec![b_star; n_clients], mode)
    }

    /// `bᵢ* = b̄* + γ zᵢ`, where the `zᵢ` are Gaussian, centered to mean zero
    /// and rescaled so that `(1/N) Σ ‖zᵢ‖² = 1`. The client variance is then
    /// exactly `γ²` and the mean exactly `b̄*`.
    pub fn heterogeneous(
        d: usize,
        m: usize,
        n_clients: usize,
        b_bar_norm: f64,
        gamma: f64,
        mode: SampleMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_clients == 1 && gamma != 0.0 {
            return Err(Error::BadRange("a single client cannot have nonzero client variance".into()));
        }
        let a_star = rng.unit_vector(d);
        let b_bar = rng.unit_vector(d).scale(b_bar_norm);
        let z: Vec<Vector> = (0..n_clients).map(|_| rng.gaussian_vector(d)).collect();
        let z_mean = Vector::mean(&z);
        let centered: Vec<Vector> = z.iter().map(|zi| zi.sub(&z_mean)).collect();
        let spread = (centered.iter().map(|c| c.dot(c)).sum::<f64>() / n_clients as f64).sqrt();
        let b_stars = centered
            .iter()
            .map(|c| if spread > 0.0 { b_bar.add_scaled(gamma / spread, c) } else { b_bar.clone() })
            .collect();
        Self::new(m, a_star, b_stars, mode)
    }

    pub fn n_clients(&self) -> usize {
        self.b_stars.len()
    }

    pub fn is_homogeneous(&self) -> bool {
        self.b_stars.windows(2).all(|w| w[0] == w[1])
    }

    /// `b̄* = (1/N) Σ bᵢ*`.
    pub fn b_bar(&self) -> Vector {
        Vector::mean(&self.b_stars)
    }

    /// Population shard for one client (no design matrix).
    pub fn population_shard(&self, client: usize) -> LinearShard {
        LinearShard { a_star: self.a_star.clone(), b_star: self.b_stars[client].clone(), x: None, y: None }
    }
}

/// One client's data: a design `X` with targets `Y = X a* b*ᵀ`, or just the
/// ground truth in population mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearShard {
    pub a_star: Vector,
    pub b_star: Vector,
    pub x: Option<Mat>,
    pub y: Option<Mat>,
}

impl LinearShard {
    pub fn dim(&self) -> usize {
        self.a_star.dim()
    }

    pub fn is_population(&self) -> bool {
        self.x.is_none()
    }

    /// `(1/m)‖Y − X W‖²`, or `‖a* b*ᵀ − W‖²` in population mode.
    pub fn loss_weight(&self, w: &Mat) -> Result<f64> {
        let d = self.dim();
        if w.shape() != (d, d) {
            return Err(shape_err("loss_weight", d, w));
        }
        match (&self.x, &self.y) {
            (Some(x), Some(y)) => {
                let resid = x.matmul(w)?.sub(y)?;
                Ok(resid.as_slice().iter().map(|v| v * v).sum::<f64>() / x.rows() as f64)
            }
            _ => {
                let target = Mat::outer(&self.a_star, &self.b_star);
                let r = target.sub(w)?;
                Ok(r.as_slice().iter().map(|v| v * v).sum())
            }
        }
    }

    /// `∇_W` of [`LinearShard::loss_weight`]: `(2/m) Xᵀ(XW − Y)` or `2(W − a* b*ᵀ)`.
    pub fn weight_gradient(&self, w: &Mat) -> Result<Mat> {
        let d = self.dim();
        if w.shape() != (d, d) {
            return Err(shape_err("weight_gradient", d, w));
        }
        match (&self.x, &self.y) {
            (Some(x), Some(y)) => {
                let resid = x.matmul(w)?.sub(y)?;
                Ok(x.t_matmul(&resid)?.scale(2.0 / x.rows() as f64))
            }
            _ => Ok(w.sub(&Mat::outer(&self.a_star, &self.b_star))?.scale(2.0)),
        }
    }
}

fn shape_err(op: &'static str, d: usize, w: &Mat) -> Error {
    Error::ShapeMismatch { op, detail: format!("expected {d}x{d}, got {}x{}", w.rows(), w.cols()) }
}

fn check_dims(op: &'static str, shard: &LinearShard, vs: &[&Vector]) -> Result<()> {
    let d = shard.dim();
    if let Some(v) = vs.iter().find(|v| v.dim() != d) {
        return Err(Error::ShapeMismatch { op, detail: format!("vector of length {} for d={d}", v.dim()) });
    }
    Ok(())
}

/// Samples `X ~ N(0,1)^{m×d}` and sets `Y = X a* bᵢ*ᵀ`.
pub fn gen_linear_shard(task: &LinearTask, client: usize, rng: &mut SeededRng) -> Result<LinearShard> {
    if task.mode == SampleMode::Population {
        return Err(Error::PopulationMode);
    }
    let b_star = task
        .b_stars
        .get(client)
        .ok_or_else(|| Error::BadRange(format!("client {client} out of range")))?
        .clone();
    let x = gaussian_matrix(rng, task.m, task.d)?;
    let xa = x.mul_vec(&task.a_star)?;
    let y = Mat::outer(&xa, &b_star);
    Ok(LinearShard { a_star: task.a_star.clone(), b_star, x: Some(x), y: Some(y) })
}

/// `lᵢ(a, b) = (1/m)‖Y − X a bᵀ‖²` (population: `‖a* b*ᵀ − a bᵀ‖²`).
pub fn local_loss_linear(shard: &LinearShard, a: &Vector, b: &Vector) -> Result<f64> {
    check_dims("local_loss_linear", shard, &[a, b])?;
    match (&shard.x, &shard.y) {
        (Some(x), Some(y)) => {
            let xa = x.mul_vec(a)?;
            let mut total = 0.0;
            for i in 0..x.rows() {
                for (j, yij) in y.row(i).iter().enumerate() {
                    let r = yij - xa[i] * b[j];
                    total += r * r;
                }
            }
            Ok(total / x.rows() as f64)
        }
        _ => {
            // ‖a*b*ᵀ − abᵀ‖² = ‖a*‖²‖b*‖² − 2(a*ᵀa)(b*ᵀb) + ‖a‖²‖b‖²
            let (sa, sb) = (&shard.a_star, &shard.b_star);
            let v = sa.dot(sa) * sb.dot(sb) - 2.0 * sa.dot(a) * sb.dot(b) + a.dot(a) * b.dot(b);
            Ok(v.max(0.0))
        }
    }
}

/// Exact minimizer `argmin_b lᵢ(a, b)` for fixed `a`.
///
/// Finite-sample: `bᵀ = (Xa)ᵀ Y / ‖Xa‖²`. Population: `b = b* (a*ᵀa) / ‖a‖²`.
pub fn solve_b_exact(shard: &LinearShard, a: &Vector) -> Result<Vector> {
    check_dims("solve_b_exact", shard, &[a])?;
    match (&shard.x, &shard.y) {
        (Some(x), Some(y)) => {
            let xa = x.mul_vec(a)?;
            let denom = xa.dot(&xa);
            let threshold = DEGENERATE_REL * x.rows() as f64;
            if denom <= threshold {
                return Err(Error::DegenerateDesign { value: denom, threshold });
            }
            Ok(y.vec_mul(&xa)?.scale(1.0 / denom))
        }
        _ => {
            let aa = a.dot(a);
            if aa <= DEGENERATE_REL {
                return Err(Error::DegenerateDesign { value: aa, threshold: DEGENERATE_REL });
            }
            Ok(shard.b_star.scale(shard.a_star.dot(a) / aa))
        }
    }
}

/// `∇ₐ lᵢ = (2/m)(XᵀX a bᵀb − XᵀY b)`; population `2(a bᵀ − a* b*ᵀ) b`.
pub fn grad_a_linear(shard: &LinearShard, a: &Vector, b: &Vector) -> Result<Vector> {
    check_dims("grad_a_linear", shard, &[a, b])?;
    match (&shard.x, &shard.y) {
        (Some(x), Some(y)) => {
            let m = x.rows() as f64;
            let xa = x.mul_vec(a)?;
            let yb = y.mul_vec(b)?;
            let resid = xa.scale(b.dot(b)).sub(&yb);
            Ok(x.vec_mul(&resid)?.scale(2.0 / m))
        }
        _ => {
            let (sa, sb) = (&shard.a_star, &shard.b_star);
            Ok(a.scale(2.0 * b.dot(b)).add_scaled(-2.0 * sb.dot(b), sa))
        }
    }
}

/// `∇_b lᵢ = (2/m)(b aᵀXᵀXa − YᵀX a)`; population `2(b aᵀ − b* a*ᵀ) a`.
pub fn grad_b_linear(shard: &LinearShard, a: &Vector, b: &Vector) -> Result<Vector> {
    check_dims("grad_b_linear", shard, &[a, b])?;
    match (&shard.x, &shard.y) {
        (Some(x), Some(y)) => {
            let m = x.rows() as f64;
            let xa = x.mul_vec(a)?;
            let yt_xa = y.vec_mul(&xa)?;
            Ok(b.scale(2.0 * xa.dot(&xa) / m).add_scaled(-2.0 / m, &yt_xa))
        }
        _ => {
            let (sa, sb) = (&shard.a_star, &shard.b_star);
            Ok(b.scale(2.0 * a.dot(a)).add_scaled(-2.0 * sa.dot(a), sb))
        }
    }
}

/// `γ² = (1/N) Σ ‖bᵢ* − b̄*‖²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientVariance {
    pub gamma_sq: f64,
}

pub fn client_variance(task: &LinearTask) -> ClientVariance {
    let mean = task.b_bar();
    let n = task.n_clients() as f64;
    let gamma_sq = task.b_stars.iter().map(|b| b.sub(&mean)).map(|dv| dv.dot(&dv)).sum::<f64>() / n;
    ClientVariance { gamma_sq }
}

/// Labeled feature rows for a classification client.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledShard {
    /// n×d.
    pub features: Mat,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledShard {
    pub fn new(features: Mat, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "LabeledShard::new",
                detail: format!("{} rows vs {} labels", features.rows(), labels.len()),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::BadRange(format!("label {l} not below {n_classes}")));
        }
        Ok(Self { features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledShard {
        LabeledShard {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// `logits = ReLU(x (W_base + αAB)) W_out`, with `W_out` frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerNet {
    /// d×c, never trained.
    pub w_out: Mat,
    pub adapter: LoraAdapter,
    /// Adapter updates already merged into the hidden weight (FLoRA restarts).
    pub base: Option<Mat>,
}

/// Gradients for the unfrozen factor(s); the frozen one is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrads {
    pub a: Option<Mat>,
    pub b: Option<Mat>,
}

impl TwoLayerNet {
    pub fn new(w_out: Mat, adapter: LoraAdapter) -> Result<Self> {
        if w_out.rows() != adapter.dim() {
            return Err(Error::ShapeMismatch {
                op: "TwoLayerNet::new",
                detail: format!("W_out has {} rows, adapter dim is {}", w_out.rows(), adapter.dim()),
            });
        }
        Ok(Self { w_out, adapter, base: None })
    }

    pub fn n_classes(&self) -> usize {
        self.w_out.cols()
    }

    /// `W_base + αAB`.
    pub fn hidden_weight(&self) -> Result<Mat> {
        let delta = self.adapter.effective_update()?;
        match &self.base {
            Some(base) => base.add(&delta),
            None => Ok(delta),
        }
    }

    /// Pre-activations `H = X W` (n×d) for a batch.
    fn pre_activation(&self, x: &Mat) -> Result<(Mat, Mat)> {
        if x.cols() != self.adapter.dim() {
            return Err(Error::ShapeMismatch {
                op: "two_layer",
                detail: format!("input width {} vs d={}", x.cols(), self.adapter.dim()),
            });
        }
        let xa = x.matmul(&self.adapter.a)?;
        let mut h = xa.matmul(&self.adapter.b)?.scale(self.adapter.alpha);
        if let Some(base) = &self.base {
            h.axpy(1.0, &x.matmul(base)?)?;
        }
        Ok((xa, h))
    }

    /// Logits (n×c) for a batch.
    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        let (_, h) = self.pre_activation(x)?;
        h.map(relu).matmul(&self.w_out)
    }

    /// Mean softmax cross-entropy over the shard.
    pub fn loss(&self, shard: &LabeledShard) -> Result<f64> {
        let logits = self.logits(&shard.features)?;
        let mut total = 0.0;
        for (i, &y) in shard.labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[y];
        }
        Ok(total / shard.len().max(1) as f64)
    }

    pub fn accuracy(&self, shard: &LabeledShard) -> Result<f64> {
        let logits = self.logits(&shard.features)?;
        let correct = shard
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(logits.row(*i)) == y)
            .count();
        Ok(correct as f64 / shard.len().max(1) as f64)
    }

    /// Analytic gradient of [`TwoLayerNet::loss`] for the factors selected by `mask`.
    pub fn gradients(&self, batch: &LabeledShard, mask: TrainMask) -> Result<FactorGrads> {
        let x = &batch.features;
        let n = batch.len().max(1) as f64;
        let (xa, h) = self.pre_activation(x)?;
        let z = h.map(relu);
        let logits = z.matmul(&self.w_out)?;
        let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = log_sum_exp(row);
            for (j, l) in row.iter().enumerate() {
                let p = (l - lse).exp();
                dlogits[(i, j)] = (p - if j == y { 1.0 } else { 0.0 }) / n;
            }
        }
        // dH = (dlogits W_outᵀ) ⊙ 1[H > 0]
        let mut dh = dlogits.matmul(&self.w_out.transpose())?;
        for (g, pre) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
            if *pre <= 0.0 {
                *g = 0.0;
            }
        }
        let alpha = self.adapter.alpha;
        let a = if mask.trains_a() {
            // ∂/∂A = α Xᵀ dH Bᵀ
            Some(x.t_matmul(&dh)?.matmul(&self.adapter.b.transpose())?.scale(alpha))
        } else {
            None
        };
        let b = if mask.trains_b() {
            // ∂/∂B = α (XA)ᵀ dH
            Some(xa.t_matmul(&dh)?.scale(alpha))
        } else {
            None
        };
        Ok(FactorGrads { a, b })
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Logits for one input vector.
pub fn forward_two_layer(net: &TwoLayerNet, x: &Vector) -> Result<Vector> {
    net.logits(&Mat::row_matrix(x))?.to_vector()
}

pub fn grad_two_layer(net: &TwoLayerNet, batch: &LabeledShard, mask: TrainMask) -> Result<FactorGrads> {
    net.gradients(batch, mask)
}

/// Synthetic class-cluster data: `c` Gaussian blobs in ℝᵈ.
///
/// Class means are random directions of length `margin` inside a random
/// `signal_dim`-dimensional subspace; every sample adds isotropic N(0, noise²)
/// noise in all `d` coordinates. Only a learned projection onto the signal
/// subspace separates the classes well, while a random rank-`r` projection
/// keeps roughly `r / d` of the signal energy.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub d: usize,
    pub n_classes: usize,
    pub signal_dim: usize,
    pub margin: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.signal_dim > self.d || self.signal_dim == 0 {
            return Err(Error::BadRange(format!("signal_dim {} must be in [1, d={}]", self.signal_dim, self.d)));
        }
        if self.n_classes < 2 || self.train_per_class == 0 {
            return Err(Error::BadRange("need at least 2 classes and 1 sample per class".into()));
        }
        Ok(())
    }
}

/// Returns `(train, test)` shards; samples are ordered by class.
pub fn gen_class_clusters(spec: &ClusterSpec, rng: &mut SeededRng) -> Result<(LabeledShard, LabeledShard)> {
    spec.validate()?;
    // random orthonormal basis of the signal subspace (Gram–Schmidt)
    let mut basis: Vec<Vector> = Vec::with_capacity(spec.signal_dim);
    while basis.len() < spec.signal_dim {
        let mut v = rng.gaussian_vector(spec.d);
        for _ in 0..2 {
            for q in &basis {
                v = v.add_scaled(-q.dot(&v), q);
            }
        }
        if let Ok(u) = unit_normalize(&v) {
            basis.push(u);
        }
    }
    // class means: random unit combinations of the basis, scaled to `margin`
    let means: Vec<Vector> = (0..spec.n_classes)
        .map(|_| {
            let coeffs = rng.unit_vector(spec.signal_dim);
            basis
                .iter()
                .zip(coeffs.iter())
                .fold(Vector::zeros(spec.d), |acc, (q, c)| acc.add_scaled(*c * spec.margin, q))
        })
        .collect();
    let mut draw = |per_class: usize| -> Result<LabeledShard> {
        let n = per_class * spec.n_classes;
        let mut feats = Vec::with_capacity(n * spec.d);
        let mut labels = Vec::with_capacity(n);
        for (k, mu) in means.iter().enumerate() {
            for _ in 0..per_class {
                feats.extend(mu.iter().map(|m| m + spec.noise * rng.gaussian()));
                labels.push(k);
            }
        }
        LabeledShard::new(Mat::from_vec(n, spec.d, feats)?, labels, spec.n_classes)
    };
    let train = draw(spec.train_per_class)?;
    let test = draw(spec.test_per_class)?;
    Ok((train, test))
}

/// Index sets for a label-based split: client `k` receives every sample whose
/// label lies in `[k·L, (k+1)·L)` with `L = labels_per_client`.
pub fn label_split_indices(labels: &[usize], n_classes: usize, n_clients: usize, labels_per_client: usize) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 || labels_per_client == 0 || n_clients * labels_per_client != n_classes {
        return Err(Error::BadPartition(format!(
            "{n_clients} clients x {labels_per_client} labels != {n_classes} classes"
        )));
    }
    let mut parts = vec![Vec::new(); n_clients];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::BadPartition(format!("label {l} not below {n_classes}")));
        }
        parts[l / labels_per_client].push(i);
    }
    Ok(parts)
}

pub fn split_by_label(data: &LabeledShard, n_clients: usize, labels_per_client: usize) -> Result<Vec<LabeledShard>> {
    let parts = label_split_indices(&data.labels, data.n_classes, n_clients, labels_per_client)?;
    Ok(parts.iter().map(|idx| data.subset(idx)).collect())
}

/// Index sets for a Dirichlet(α) split: for every class, client proportions
/// are drawn from Dirichlet(α) and that class's (shuffled) samples are cut
/// at the cumulative proportions.
pub fn dirichlet_split_indices(labels: &[usize], n_classes: usize, n_clients: usize, alpha: f64, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if alpha.is_nan() || alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::BadRange(format!("Dirichlet alpha must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::BadPartition("no clients".into()));
    }
    let mut parts = vec![Vec::new(); n_clients];
    for class in 0..n_classes {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
        rng.shuffle(&mut members);
        let mut weights: Vec<f64> = (0..n_clients).map(|_| rng.gamma(alpha)).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            // every gamma draw underflowed: hand the class to one client
            weights = vec![0.0; n_clients];
            weights[rng.below(n_clients)] = 1.0;
        }
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, w) in weights.iter().enumerate() {
            cum += w;
            let end = if k + 1 == n_clients { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
            parts[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn split_dirichlet(data: &LabeledShard, n_clients: usize, alpha: f64, rng: &mut SeededRng) -> Result<Vec<LabeledShard>> {
    let parts = dirichlet_split_indices(&data.labels, data.n_classes, n_clients, alpha, rng)?;
    Ok(parts.iter().map(|idx| data.subset(idx)).collect())
}
