//! Round engine: broadcast, local training under a freeze mask, server
//! aggregation, and per-round trace recording.
//!
//! Every client's randomness comes from `SeededRng::derive(seed, [client, round])`
//! and aggregation sums run in client-index order, so a trace is bitwise
//! identical for any worker count.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{angle_distance, truncated_svd, unit_normalize, Mat, SeededRng};
use crate::lora::{init_adapter, InitSpec, LoraAdapter, TrainMask, UpdateSchedule};
use crate::task::{solve_b_exact, FactorGrads, LabeledShard, LinearShard, LinearTask, SampleMode, TwoLayerNet};

/// Loss above which a run aborts with [`Error::DivergenceDetected`].
pub const DIVERGENCE_LOSS: f64 = 1e8;

/// Tolerance on "identical" frozen factors across clients.
pub const FROZEN_TOL: f64 = 1e-15;

/// Server-side aggregation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregationStrategy {
    /// Alternating freeze; only the trained factor is averaged.
    RoLoRA,
    /// `A` frozen forever; `B` averaged.
    FfaLoRA,
    /// Both factors trained and averaged independently.
    FedAvgLoRA,
    /// Average of client products, truncated back to rank `r` by SVD.
    FlexLoRA,
    /// Stacked factors (product-exact, rank `N·r`), merged into the base weight.
    FLoRA,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 5] = [
        AggregationStrategy::RoLoRA,
        AggregationStrategy::FfaLoRA,
        AggregationStrategy::FedAvgLoRA,
        AggregationStrategy::FlexLoRA,
        AggregationStrategy::FLoRA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationStrategy::RoLoRA => "rolora",
            AggregationStrategy::FfaLoRA => "ffa-lora",
            AggregationStrategy::FedAvgLoRA => "fedavg-lora",
            AggregationStrategy::FlexLoRA => "flexlora",
            AggregationStrategy::FLoRA => "flora",
        }
    }

    pub fn default_schedule(self) -> UpdateSchedule {
        match self {
            AggregationStrategy::RoLoRA => UpdateSchedule::rolora(),
            AggregationStrategy::FfaLoRA => UpdateSchedule::ffa(),
            _ => UpdateSchedule::both(),
        }
    }

    /// RoLoRA accepts any single-factor pattern (ablation cadences included),
    /// FFA-LoRA only `[B]`, the product-based baselines only `TrainBoth`.
    pub fn check_schedule(self, sched: &UpdateSchedule) -> Result<()> {
        let p = sched.pattern();
        let ok = match self {
            AggregationStrategy::RoLoRA => p.iter().all(|m| *m != TrainMask::TrainBoth),
            AggregationStrategy::FfaLoRA => p.iter().all(|m| *m == TrainMask::TrainB),
            _ => p.iter().all(|m| *m == TrainMask::TrainBoth),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation {
                field: "schedule".into(),
                msg: format!("schedule `{sched}` is not valid for strategy {}", self.name()),
            })
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.trim().to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.as_str() {
            "rolora" => Ok(AggregationStrategy::RoLoRA),
            "ffalora" | "ffa" => Ok(AggregationStrategy::FfaLoRA),
            "fedavglora" | "fedavg" | "lora" => Ok(AggregationStrategy::FedAvgLoRA),
            "flexlora" => Ok(AggregationStrategy::FlexLoRA),
            "flora" => Ok(AggregationStrategy::FLoRA),
            _ => Err(Error::Validation { field: "strategy".into(), msg: format!("unknown strategy `{}`", s.trim()) }),
        }
    }
}

/// Run parameters. Full participation: every client trains every round.
#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    /// Local epochs per round (one full-batch step per epoch for linear tasks).
    pub local_steps: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub rank: usize,
    pub strategy: AggregationStrategy,
    pub schedule: UpdateSchedule,
    pub init: InitSpec,
    pub seed: u64,
    pub workers: usize,
    /// Wall-clock column; off by default so traces stay byte-reproducible.
    pub record_timing: bool,
}

impl FedConfig {
    pub fn new(strategy: AggregationStrategy, rounds: usize, rank: usize, seed: u64) -> Self {
        Self {
            rounds,
            local_steps: 1,
            batch_size: 64,
            eta: 0.01,
            rank,
            strategy,
            schedule: strategy.default_schedule(),
            init: InitSpec::standard(seed),
            seed,
            workers: 1,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("local_steps", self.local_steps), ("batch_size", self.batch_size), ("rank", self.rank), ("workers", self.workers)];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation { field: (*field).into(), msg: "must be at least 1".into() });
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Validation { field: "eta".into(), msg: format!("must be positive, got {}", self.eta) });
        }
        self.strategy.check_schedule(&self.schedule)
    }

    pub fn mask(&self, round: usize) -> TrainMask {
        self.schedule.mask(round)
    }
}

/// Global model held by the server: adapter plus any merged updates.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub adapter: LoraAdapter,
    pub base: Option<Mat>,
}

impl GlobalModel {
    /// `W_base + αAB`.
    pub fn weight(&self) -> Result<Mat> {
        let delta = self.adapter.effective_update()?;
        match &self.base {
            Some(b) => b.add(&delta),
            None => Ok(delta),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub angle: Option<f64>,
}

/// Gradient oracle for one client's local objective.
pub trait ClientObjective: Sync {
    /// Minibatch index sets for one local epoch; `None` means one full-batch step.
    fn epoch_batches(&self, batch_size: usize, rng: &mut SeededRng) -> Vec<Option<Vec<usize>>>;

    fn grads(&self, model: &GlobalModel, batch: Option<&[usize]>, mask: TrainMask) -> Result<FactorGrads>;
}

impl ClientObjective for LinearShard {
    fn epoch_batches(&self, _batch_size: usize, _rng: &mut SeededRng) -> Vec<Option<Vec<usize>>> {
        vec![None]
    }

    fn grads(&self, model: &GlobalModel, _batch: Option<&[usize]>, mask: TrainMask) -> Result<FactorGrads> {
        let gw = self.weight_gradient(&model.weight()?)?;
        let ad = &model.adapter;
        let a = if mask.trains_a() { Some(gw.matmul(&ad.b.transpose())?.scale(ad.alpha)) } else { None };
        let b = if mask.trains_b() { Some(ad.a.t_matmul(&gw)?.scale(ad.alpha)) } else { None };
        Ok(FactorGrads { a, b })
    }
}

/// Classification client: its shard and the shared frozen output layer.
pub struct ClassifierClient<'a> {
    pub shard: &'a LabeledShard,
    pub w_out: &'a Mat,
}

impl ClientObjective for ClassifierClient<'_> {
    fn epoch_batches(&self, batch_size: usize, rng: &mut SeededRng) -> Vec<Option<Vec<usize>>> {
        let mut order: Vec<usize> = (0..self.shard.len()).collect();
        rng.shuffle(&mut order);
        order.chunks(batch_size).map(|c| Some(c.to_vec())).collect()
    }

    fn grads(&self, model: &GlobalModel, batch: Option<&[usize]>, mask: TrainMask) -> Result<FactorGrads> {
        let net = TwoLayerNet { w_out: self.w_out.clone(), adapter: model.adapter.clone(), base: model.base.clone() };
        match batch {
            Some(idx) => net.gradients(&self.shard.subset(idx), mask),
            None => net.gradients(self.shard, mask),
        }
    }
}

/// Local gradient descent on the unfrozen factor(s).
///
/// Runs `steps` epochs; the frozen factor is returned bitwise unchanged.
pub fn local_train(
    client: &dyn ClientObjective,
    global: &GlobalModel,
    mask: TrainMask,
    steps: usize,
    eta: f64,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<LoraAdapter> {
    let mut model = global.clone();
    for _ in 0..steps {
        for batch in client.epoch_batches(batch_size, rng) {
            let g = client.grads(&model, batch.as_deref(), mask)?;
            if let Some(ga) = &g.a {
                model.adapter.a.axpy(-eta, ga)?;
            }
            if let Some(gb) = &g.b {
                model.adapter.b.axpy(-eta, gb)?;
            }
        }
    }
    Ok(model.adapter)
}

fn check_alpha(locals: &[LoraAdapter]) -> Result<f64> {
    let first = locals.first().ok_or_else(|| Error::BadRange("no client adapters to aggregate".into()))?;
    for ad in locals {
        ad.check_shapes()?;
        if ad.a.shape() != first.a.shape() || ad.alpha != first.alpha {
            return Err(Error::ShapeMismatch { op: "aggregate", detail: "client adapters differ in shape or alpha".into() });
        }
    }
    Ok(first.alpha)
}

/// Averages the trained factor and passes the (shared) frozen one through.
///
/// With a shared frozen factor the average of the products equals the
/// product of the averages, so this aggregation is exact.
pub fn aggregate_rolora(locals: &[LoraAdapter], mask: TrainMask) -> Result<LoraAdapter> {
    let alpha = check_alpha(locals)?;
    let first = &locals[0];
    let frozen_of = |ad: &LoraAdapter| -> Mat {
        if mask == TrainMask::TrainB { ad.a.clone() } else { ad.b.clone() }
    };
    if mask == TrainMask::TrainBoth {
        return Err(Error::BadRange("alternating aggregation needs exactly one trained factor".into()));
    }
    let frozen = frozen_of(first);
    for (client, ad) in locals.iter().enumerate().skip(1) {
        let diff = frozen_of(ad).max_abs_diff(&frozen);
        if diff > FROZEN_TOL {
            return Err(Error::FrozenFactorMismatch { client, diff });
        }
    }
    Ok(match mask {
        TrainMask::TrainB => {
            let bs: Vec<&Mat> = locals.iter().map(|l| &l.b).collect();
            LoraAdapter { a: frozen, b: Mat::mean(&bs)?, alpha }
        }
        _ => {
            let as_: Vec<&Mat> = locals.iter().map(|l| &l.a).collect();
            LoraAdapter { a: Mat::mean(&as_)?, b: frozen, alpha }
        }
    })
}

/// Factor-wise mean `(mean Aᵢ, mean Bᵢ)`; not product-exact in general.
pub fn aggregate_fedavg(locals: &[LoraAdapter]) -> Result<LoraAdapter> {
    let alpha = check_alpha(locals)?;
    let as_: Vec<&Mat> = locals.iter().map(|l| &l.a).collect();
    let bs: Vec<&Mat> = locals.iter().map(|l| &l.b).collect();
    Ok(LoraAdapter { a: Mat::mean(&as_)?, b: Mat::mean(&bs)?, alpha })
}

/// Mean of client updates `(1/N) Σ αAᵢBᵢ`.
pub fn mean_update(locals: &[LoraAdapter]) -> Result<Mat> {
    check_alpha(locals)?;
    let updates = locals.iter().map(LoraAdapter::effective_update).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Mat> = updates.iter().collect();
    Mat::mean(&refs)
}

/// `‖mean(αAᵢBᵢ) − α·mean(Aᵢ)·mean(Bᵢ)‖_F`. Exactly zero when every client
/// equals the first, where averaging would otherwise leave rounding noise.
pub fn interference_gap(locals: &[LoraAdapter]) -> Result<f64> {
    let exact = mean_update(locals)?;
    if locals.iter().all(|l| l == &locals[0]) {
        return Ok(0.0);
    }
    let naive = aggregate_fedavg(locals)?.effective_update()?;
    Ok(exact.sub(&naive)?.frob_norm())
}

/// Best rank-`r` factorization of the averaged product: `A' = U·diag(S)/α`, `B' = Vᵀ`.
pub fn aggregate_flexlora(locals: &[LoraAdapter], r: usize) -> Result<LoraAdapter> {
    let alpha = check_alpha(locals)?;
    let m = mean_update(locals)?;
    let svd = truncated_svd(&m, r)?;
    let a = Mat::from_fn(svd.u.rows(), r, |i, j| svd.u[(i, j)] * svd.s[j] / alpha);
    Ok(LoraAdapter { a, b: svd.v.transpose(), alpha })
}

/// Stacking: `A' = [A₁ … A_N]`, `B' = [B₁; …; B_N] / N`, rank `N·r`.
pub fn aggregate_flora(locals: &[LoraAdapter]) -> Result<LoraAdapter> {
    let alpha = check_alpha(locals)?;
    let as_: Vec<&Mat> = locals.iter().map(|l| &l.a).collect();
    let bs: Vec<&Mat> = locals.iter().map(|l| &l.b).collect();
    let b = Mat::vstack(&bs)?.scale(1.0 / locals.len() as f64);
    Ok(LoraAdapter { a: Mat::hstack(&as_)?, b, alpha })
}

/// A federated workload: per-client local updates plus global evaluation.
pub trait FederatedTask: Sync {
    fn dim(&self) -> usize;
    fn n_clients(&self) -> usize;

    fn local_update(&self, client: usize, model: &GlobalModel, mask: TrainMask, cfg: &FedConfig, rng: &mut SeededRng) -> Result<LoraAdapter>;

    fn evaluate(&self, model: &GlobalModel) -> Result<Evaluation>;

    /// Whether `angle_distance` is meaningful (rank-1 linear tasks).
    fn tracks_angle(&self) -> bool {
        false
    }
}

/// Rank-1 (or rank-r) linear regression across clients with fixed shards.
#[derive(Clone, Debug)]
pub struct LinearFedTask {
    pub task: LinearTask,
    pub shards: Vec<LinearShard>,
    /// In `TrainB` rounds, replace gradient steps by the exact minimizer over `b`.
    pub exact_b: bool,
}

impl LinearFedTask {
    /// Finite-sample shards are drawn once from `data_seed` (one stream per client).
    pub fn new(task: LinearTask, data_seed: u64, exact_b: bool) -> Result<Self> {
        let shards = (0..task.n_clients())
            .map(|i| match task.mode {
                SampleMode::Population => Ok(task.population_shard(i)),
                SampleMode::FiniteSample => {
                    crate::task::gen_linear_shard(&task, i, &mut SeededRng::derive(data_seed, &[i as u64]))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task, shards, exact_b })
    }
}

impl FederatedTask for LinearFedTask {
    fn dim(&self) -> usize {
        self.task.d
    }

    fn n_clients(&self) -> usize {
        self.shards.len()
    }

    fn local_update(&self, client: usize, model: &GlobalModel, mask: TrainMask, cfg: &FedConfig, rng: &mut SeededRng) -> Result<LoraAdapter> {
        let shard = &self.shards[client];
        let rank1_plain = model.adapter.rank() == 1 && model.base.is_none() && model.adapter.alpha == 1.0;
        if self.exact_b && mask == TrainMask::TrainB && rank1_plain && cfg.local_steps > 0 {
            let a = model.adapter.a.col(0);
            let b = solve_b_exact(shard, &a)?;
            return Ok(LoraAdapter { a: model.adapter.a.clone(), b: Mat::row_matrix(&b), alpha: 1.0 });
        }
        local_train(shard, model, mask, cfg.local_steps, cfg.eta, cfg.batch_size, rng)
    }

    fn evaluate(&self, model: &GlobalModel) -> Result<Evaluation> {
        let w = model.weight()?;
        let loss = self.shards.iter().map(|s| s.loss_weight(&w)).sum::<Result<f64>>()? / self.shards.len() as f64;
        let angle = if self.tracks_angle() && model.adapter.rank() == 1 && model.base.is_none() {
            match unit_normalize(&model.adapter.a.col(0)) {
                Ok(a) => Some(angle_distance(&a, &self.task.a_star)?),
                Err(_) => None,
            }
        } else {
            None
        };
        Ok(Evaluation { loss, accuracy: None, angle })
    }

    fn tracks_angle(&self) -> bool {
        true
    }
}

/// Two-layer ReLU classifier with a frozen output layer, one shard per client.
#[derive(Clone, Debug)]
pub struct ClassifierFedTask {
    pub w_out: Mat,
    pub clients: Vec<LabeledShard>,
    pub test: LabeledShard,
}

impl ClassifierFedTask {
    pub fn net(&self, model: &GlobalModel) -> TwoLayerNet {
        TwoLayerNet { w_out: self.w_out.clone(), adapter: model.adapter.clone(), base: model.base.clone() }
    }
}

impl FederatedTask for ClassifierFedTask {
    fn dim(&self) -> usize {
        self.w_out.rows()
    }

    fn n_clients(&self) -> usize {
        self.clients.len()
    }

    fn local_update(&self, client: usize, model: &GlobalModel, mask: TrainMask, cfg: &FedConfig, rng: &mut SeededRng) -> Result<LoraAdapter> {
        let obj = ClassifierClient { shard: &self.clients[client], w_out: &self.w_out };
        local_train(&obj, model, mask, cfg.local_steps, cfg.eta, cfg.batch_size, rng)
    }

    /// Sample-weighted training loss over all clients, accuracy on the test set.
    fn evaluate(&self, model: &GlobalModel) -> Result<Evaluation> {
        let net = self.net(model);
        let mut total = 0.0;
        let mut count = 0usize;
        for shard in self.clients.iter().filter(|s| !s.is_empty()) {
            total += net.loss(shard)? * shard.len() as f64;
            count += shard.len();
        }
        Ok(Evaluation { loss: total / count.max(1) as f64, accuracy: Some(net.accuracy(&self.test)?), angle: None })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub trained: TrainMask,
    pub global_loss: f64,
    pub angle_distance: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub elapsed_ms: Option<f64>,
    /// `‖ΔW(aggregate) − mean ΔWᵢ‖_F / ‖mean ΔWᵢ‖_F` for this round (0 when the mean is 0).
    pub aggregation_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTrace {
    pub strategy: AggregationStrategy,
    pub records: Vec<RoundRecord>,
    pub final_model: GlobalModel,
}

pub const TRACE_HEADER: &str = "round,trained_factor,global_loss,angle_distance,test_accuracy,elapsed_ms";

/// Shortest round-trip form; switches to exponent notation for tiny or huge values.
pub fn csv_num(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn opt_field(v: Option<f64>) -> String {
    v.map(csv_num).unwrap_or_default()
}

impl TrainingTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                r.trained,
                csv_num(r.global_loss),
                opt_field(r.angle_distance),
                opt_field(r.test_accuracy),
                opt_field(r.elapsed_ms)
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        // writing to a Vec cannot fail
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn relative_residual(agg: &LoraAdapter, locals: &[LoraAdapter]) -> Result<f64> {
    let mean = mean_update(locals)?;
    let diff = agg.effective_update()?.sub(&mean)?.frob_norm();
    let scale = mean.frob_norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Executes `cfg.rounds` communication rounds of the configured protocol.
pub fn run_federated(cfg: &FedConfig, task: &dyn FederatedTask) -> Result<TrainingTrace> {
    cfg.validate()?;
    let d = task.dim();
    let mut model = GlobalModel { adapter: init_adapter(&cfg.init, d, cfg.rank)?, base: None };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Io(format!("worker pool: {e}")))?;
    let n = task.n_clients();
    let mut records = Vec::with_capacity(cfg.rounds);
    let start = Instant::now();

    for round in 0..cfg.rounds {
        let mask = cfg.mask(round);
        let broadcast = &model;
        let locals: Vec<LoraAdapter> = pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|client| {
                    let mut rng = SeededRng::derive(cfg.seed, &[client as u64, round as u64]);
                    task.local_update(client, broadcast, mask, cfg, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        // frozen factors must come back exactly as broadcast
        for (client, ad) in locals.iter().enumerate() {
            let (frozen, sent) = match mask {
                TrainMask::TrainB => (&ad.a, &model.adapter.a),
                TrainMask::TrainA => (&ad.b, &model.adapter.b),
                TrainMask::TrainBoth => continue,
            };
            if frozen.as_slice() != sent.as_slice() {
                return Err(Error::FrozenFactorMismatch { client, diff: frozen.max_abs_diff(sent) });
            }
        }

        let (aggregate, residual) = match cfg.strategy {
            AggregationStrategy::RoLoRA | AggregationStrategy::FfaLoRA => {
                let agg = aggregate_rolora(&locals, mask)?;
                let res = relative_residual(&agg, &locals)?;
                (agg, res)
            }
            AggregationStrategy::FedAvgLoRA => {
                let agg = aggregate_fedavg(&locals)?;
                let res = relative_residual(&agg, &locals)?;
                (agg, res)
            }
            AggregationStrategy::FlexLoRA => {
                let agg = aggregate_flexlora(&locals, cfg.rank)?;
                let res = relative_residual(&agg, &locals)?;
                (agg, res)
            }
            AggregationStrategy::FLoRA => {
                let stacked = aggregate_flora(&locals)?;
                let res = relative_residual(&stacked, &locals)?;
                // fold the stacked product into the base and restart the adapter
                let merged = model.weight()?;
                let delta = stacked.effective_update()?.sub(&model.adapter.effective_update()?)?;
                model.base = Some(merged.add(&delta)?);
                let fresh = InitSpec { seed: crate::linalg::mix_seed(cfg.init.seed, &[round as u64 + 1]), ..cfg.init.clone() };
                (init_adapter(&fresh, d, cfg.rank)?, res)
            }
        };
        model.adapter = aggregate;

        let eval = task.evaluate(&model)?;
        if !eval.loss.is_finite() || eval.loss > DIVERGENCE_LOSS {
            return Err(Error::DivergenceDetected { round, loss: eval.loss });
        }
        records.push(RoundRecord {
            round,
            trained: mask,
            global_loss: eval.loss,
            angle_distance: eval.angle,
            test_accuracy: eval.accuracy,
            elapsed_ms: cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
            aggregation_residual: residual,
        });
    }
    Ok(TrainingTrace { strategy: cfg.strategy, records, final_model: model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, Vector};
    use crate::lora::{AInit, BInit};
    use crate::task::{gen_linear_shard, grad_a_linear};

    fn random_adapters(seed: u64, n: usize, d: usize, r: usize) -> Vec<LoraAdapter> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| {
                let a = gaussian_matrix(&mut rng, d, r).unwrap();
                let b = gaussian_matrix(&mut rng, r, d).unwrap();
                LoraAdapter::new(a, b, 1.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in AggregationStrategy::ALL {
            assert_eq!(s.name().parse::<AggregationStrategy>().unwrap(), s);
        }
        assert_eq!("FFA-LoRA".parse::<AggregationStrategy>().unwrap(), AggregationStrategy::FfaLoRA);
        assert!(matches!("sgd".parse::<AggregationStrategy>(), Err(Error::Validation { .. })));
    }

    #[test]
    fn schedule_compatibility() {
        assert!(AggregationStrategy::RoLoRA.check_schedule(&"B,B,B,A".parse().unwrap()).is_ok());
        assert!(AggregationStrategy::FfaLoRA.check_schedule(&UpdateSchedule::rolora()).is_err());
        assert!(AggregationStrategy::FedAvgLoRA.check_schedule(&UpdateSchedule::ffa()).is_err());
    }

    #[test]
    fn rolora_aggregation_single_client_is_identity() {
        let one = random_adapters(1, 1, 5, 2);
        assert_eq!(aggregate_rolora(&one, TrainMask::TrainB).unwrap(), one[0]);
        assert_eq!(aggregate_rolora(&one, TrainMask::TrainA).unwrap(), one[0]);
    }

    #[test]
    fn rolora_aggregation_is_product_exact() {
        let mut locals = random_adapters(2, 6, 7, 3);
        let shared = locals[0].a.clone();
        locals.iter_mut().for_each(|l| l.a = shared.clone());
        let agg = aggregate_rolora(&locals, TrainMask::TrainB).unwrap();
        let mean = mean_update(&locals).unwrap();
        assert!(agg.effective_update().unwrap().sub(&mean).unwrap().frob_norm() <= 1e-12 * mean.frob_norm());
    }

    #[test]
    fn rolora_aggregation_detects_frozen_mismatch() {
        let mut locals = random_adapters(3, 3, 4, 1);
        let shared = locals[0].a.clone();
        locals.iter_mut().for_each(|l| l.a = shared.clone());
        locals[2].a[(1, 0)] += 1e-9;
        assert!(matches!(
            aggregate_rolora(&locals, TrainMask::TrainB),
            Err(Error::FrozenFactorMismatch { client: 2, .. })
        ));
    }

    #[test]
    fn fedavg_interference_examples() {
        let same = vec![random_adapters(4, 1, 5, 2)[0].clone(); 4];
        assert!(interference_gap(&same).unwrap() < 1e-15);
        assert!(interference_gap(&random_adapters(5, 1, 5, 2)).unwrap() < 1e-15);

        let e1 = Vector::basis(2, 0);
        let e2 = Vector::basis(2, 1);
        let pair = vec![LoraAdapter::rank1(&e1, &e1), LoraAdapter::rank1(&e2, &e2)];
        // ½(e₁e₁ᵀ + e₂e₂ᵀ) − ¼(e₁+e₂)(e₁+e₂)ᵀ = ¼[[1,−1],[−1,1]] → Frobenius ½
        assert!((interference_gap(&pair).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn flexlora_examples() {
        // shared A, rank-r mean product: no truncation loss
        let mut locals = random_adapters(6, 4, 8, 2);
        let shared = locals[0].a.clone();
        locals.iter_mut().for_each(|l| l.a = shared.clone());
        let mean = mean_update(&locals).unwrap();
        let flex = aggregate_flexlora(&locals, 2).unwrap();
        assert!(flex.effective_update().unwrap().max_abs_diff(&mean) < 1e-8);

        let one = random_adapters(7, 1, 8, 3);
        let flex = aggregate_flexlora(&one, 3).unwrap();
        assert!(flex.effective_update().unwrap().max_abs_diff(&one[0].effective_update().unwrap()) < 1e-8);
    }

    #[test]
    fn flora_is_product_exact_with_stacked_rank() {
        let locals = random_adapters(8, 3, 10, 2);
        let flora = aggregate_flora(&locals).unwrap();
        assert_eq!(flora.rank(), 6);
        let mean = mean_update(&locals).unwrap();
        assert!(flora.effective_update().unwrap().sub(&mean).unwrap().frob_norm() <= 1e-12 * mean.frob_norm());
        let one = random_adapters(9, 1, 4, 1);
        assert!(aggregate_flora(&one).unwrap().effective_update().unwrap().max_abs_diff(&one[0].effective_update().unwrap()) < 1e-15);
    }

    fn linear_setup(seed: u64) -> (LinearTask, LinearShard) {
        let mut rng = SeededRng::new(seed);
        let task = LinearTask::homogeneous(6, 40, 1, 1.0, SampleMode::FiniteSample, &mut rng).unwrap();
        let shard = gen_linear_shard(&task, 0, &mut rng).unwrap();
        (task, shard)
    }

    #[test]
    fn local_train_zero_steps_and_frozen_factor() {
        let (_, shard) = linear_setup(1);
        let mut rng = SeededRng::new(2);
        let a = rng.unit_vector(6);
        let b = rng.gaussian_vector(6);
        let global = GlobalModel { adapter: LoraAdapter::rank1(&a, &b), base: None };
        let same = local_train(&shard, &global, TrainMask::TrainB, 0, 0.1, 8, &mut rng).unwrap();
        assert_eq!(same, global.adapter);
        let trained = local_train(&shard, &global, TrainMask::TrainB, 3, 0.1, 8, &mut rng).unwrap();
        assert_eq!(trained.a.as_slice(), global.adapter.a.as_slice());
        assert_ne!(trained.b, global.adapter.b);
    }

    #[test]
    fn local_train_single_step_matches_hand_update() {
        let (_, shard) = linear_setup(3);
        let mut rng = SeededRng::new(4);
        let a = rng.unit_vector(6);
        let b = rng.gaussian_vector(6);
        let global = GlobalModel { adapter: LoraAdapter::rank1(&a, &b), base: None };
        let eta = 0.05;
        let out = local_train(&shard, &global, TrainMask::TrainA, 1, eta, 8, &mut rng).unwrap();
        let expected = a.add_scaled(-eta, &grad_a_linear(&shard, &a, &b).unwrap());
        assert!(out.a.col(0).sub(&expected).norm() < 1e-12);
    }

    fn rank1_run(strategy: AggregationStrategy, rounds: usize, workers: usize) -> TrainingTrace {
        let mut rng = SeededRng::new(10);
        let task = LinearTask::homogeneous(8, 60, 5, 1.0, SampleMode::FiniteSample, &mut rng).unwrap();
        let a0 = crate::lora::init_with_angle(&task.a_star, 0.6, &mut rng).unwrap();
        let fed = LinearFedTask::new(task, 11, true).unwrap();
        let mut cfg = FedConfig::new(strategy, rounds, 1, 5);
        cfg.init = InitSpec::rank1_given(&a0);
        cfg.eta = 0.25;
        cfg.workers = workers;
        run_federated(&cfg, &fed).unwrap()
    }

    #[test]
    fn zero_rounds_returns_init() {
        let trace = rank1_run(AggregationStrategy::RoLoRA, 0, 1);
        assert!(trace.records.is_empty());
        assert_eq!(trace.final_model.adapter.b.frob_norm(), 0.0);
    }

    #[test]
    fn rolora_exact_b_angle_strictly_decreases() {
        let trace = rank1_run(AggregationStrategy::RoLoRA, 40, 1);
        let a_rounds: Vec<f64> = trace
            .records
            .iter()
            .filter(|r| r.trained == TrainMask::TrainA)
            .map(|r| r.angle_distance.unwrap())
            .collect();
        assert_eq!(a_rounds.len(), 20);
        assert!(a_rounds.windows(2).all(|w| w[1] < w[0]), "{a_rounds:?}");
        assert!(trace.records.windows(2).all(|w| w[1].angle_distance <= w[0].angle_distance));
        assert!(trace.records.iter().all(|r| r.aggregation_residual <= 1e-12));
    }

    #[test]
    fn worker_count_does_not_change_trace() {
        let one = rank1_run(AggregationStrategy::RoLoRA, 12, 1);
        let eight = rank1_run(AggregationStrategy::RoLoRA, 12, 8);
        assert_eq!(one, eight);
        assert_eq!(one.to_csv_string(), eight.to_csv_string());
    }

    #[test]
    fn ffa_equals_rolora_with_b_only_schedule() {
        let mut rng = SeededRng::new(3);
        let task = LinearTask::homogeneous(6, 30, 4, 1.0, SampleMode::FiniteSample, &mut rng).unwrap();
        let fed = LinearFedTask::new(task, 1, false).unwrap();
        let mut ffa = FedConfig::new(AggregationStrategy::FfaLoRA, 10, 2, 9);
        ffa.eta = 0.05;
        let mut ro = ffa.clone();
        ro.strategy = AggregationStrategy::RoLoRA;
        ro.schedule = UpdateSchedule::ffa();
        let a = run_federated(&ffa, &fed).unwrap();
        let b = run_federated(&ro, &fed).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn flora_run_keeps_mean_product() {
        let mut rng = SeededRng::new(4);
        let task = LinearTask::homogeneous(6, 30, 3, 1.0, SampleMode::FiniteSample, &mut rng).unwrap();
        let fed = LinearFedTask::new(task, 2, false).unwrap();
        let mut cfg = FedConfig::new(AggregationStrategy::FLoRA, 5, 2, 1);
        cfg.eta = 0.05;
        let trace = run_federated(&cfg, &fed).unwrap();
        assert!(trace.final_model.base.is_some());
        assert!(trace.records.iter().all(|r| r.aggregation_residual <= 1e-12));
        assert!(trace.records.last().unwrap().global_loss < trace.records[0].global_loss);
    }

    #[test]
    fn runaway_step_reports_divergence() {
        let mut rng = SeededRng::new(4);
        let task = LinearTask::homogeneous(6, 30, 2, 3.0, SampleMode::FiniteSample, &mut rng).unwrap();
        let fed = LinearFedTask::new(task, 2, false).unwrap();
        let mut cfg = FedConfig::new(AggregationStrategy::FedAvgLoRA, 200, 2, 1);
        cfg.eta = 5.0;
        cfg.init = InitSpec { a_init: AInit::Gaussian { std: 1.0 }, b_init: BInit::Zero, alpha: 1.0, seed: 1 };
        assert!(matches!(run_federated(&cfg, &fed), Err(Error::DivergenceDetected { .. })));
    }

    #[test]
    fn csv_has_empty_fields_for_missing_values() {
        let trace = rank1_run(AggregationStrategy::RoLoRA, 2, 1);
        let csv = trace.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 6);
        assert_eq!(first[0], "0");
        assert_eq!(first[1], "B");
        assert!(first[4].is_empty() && first[5].is_empty());
        assert!(!first[3].is_empty());
    }
}
