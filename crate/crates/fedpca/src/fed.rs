//! Federated orchestration: warm-up, reliable-data selection, the τ
//! schedule, aggregation rules, and the per-round experiment loop.
//!
//! Every experiment runs `total_rounds` communication rounds. The first
//! `warmup_rounds` use plain size-weighted averaging on full local data for
//! every method. Afterwards the baselines keep their own weighting rules,
//! while the performance–capacity method re-examines all clients each round:
//! it clusters their (loss, dispersion) pairs, splits them into common /
//! rare / noisy sets with temporal smoothing, rebuilds each noisy client's
//! data per the selection strategy, and aggregates with reliability- and
//! dispersion-adjusted weights.
//!
//! Determinism contract: every random choice inside a round is drawn from a
//! stream derived from `(seed, round, client)`, so serial and parallel
//! client schedules produce bit-identical results.

use crate::analysis::{
    assign_sets, client_vector, select_noisy_component, smooth_identification, ClientPartition,
    LossDispersionPair, SetLabel, SmoothingState, DEFAULT_ID_SMOOTHING_BETA,
};
use crate::cluster::fit_gmm3;
use crate::data::{ClientDataset, Partition, Scenario};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, summarize, weight_diagnostic, DistributionMetrics, MetricSummary,
};
use crate::matrix::DenseMatrix;
use crate::nn::{backward, cross_entropy, forward, predict, sgd_step, MlpParams, SgdState};
use crate::rng::{derive_seed, rng_for, rng_from_seed, stream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Confidence-threshold floor used when no strategy-specific value applies.
pub const DEFAULT_TAU_MIN: f64 = 0.9;

/// How a noisy-flagged client's local data is handled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionStrategy {
    /// Exclude all of the client's local data this round.
    Drop,
    /// Keep pseudo-labeled samples whose predicted-class probability
    /// strictly exceeds the round's threshold τ.
    HighConfidence { tau_min: f64 },
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<()> {
        if let SelectionStrategy::HighConfidence { tau_min } = self {
            if !(tau_min.is_finite() && *tau_min > 0.0 && *tau_min < 1.0) {
                return Err(Error::Config(format!(
                    "tau_min must lie strictly between 0 and 1, got {tau_min}"
                )));
            }
        }
        Ok(())
    }

    /// The τ floor this strategy applies; Drop has no selection threshold,
    /// so it reports the default floor for diagnostics.
    pub fn tau_min(&self) -> f64 {
        match self {
            SelectionStrategy::Drop => DEFAULT_TAU_MIN,
            SelectionStrategy::HighConfidence { tau_min } => *tau_min,
        }
    }
}

/// Aggregation method under test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Performance–capacity analysis with the given noisy-data strategy.
    FedPca(SelectionStrategy),
    /// Plain size-weighted averaging on full local data.
    FedAvg,
    /// Size-and-loss weighting `w ∝ N · loss^q` on full local data.
    LossWeighted { q: f64 },
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        match self {
            Method::FedPca(strategy) => strategy.validate(),
            Method::FedAvg => Ok(()),
            Method::LossWeighted { q } => {
                if !(q.is_finite() && *q >= 0.0) {
                    return Err(Error::Config(format!(
                        "loss exponent q must be nonnegative and finite, got {q}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Short filename-safe identifier.
    pub fn token(&self) -> String {
        match self {
            Method::FedPca(SelectionStrategy::Drop) => "fedpca_d".into(),
            Method::FedPca(SelectionStrategy::HighConfidence { .. }) => "fedpca_hs".into(),
            Method::FedAvg => "fedavg".into(),
            Method::LossWeighted { q } => format!("loss_weighted_q{q}"),
        }
    }
}

/// Local-model hyperparameters shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            hidden_dim: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Round-schedule parameters shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// Total communication rounds T.
    pub total_rounds: usize,
    /// Leading rounds that always use size-weighted averaging.
    #[serde(default = "default_warmup_rounds")]
    pub warmup_rounds: usize,
    /// Full passes over local data per round.
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// Fairness exponent in the dispersion-adjusted weights.
    #[serde(default = "default_q")]
    pub q: f64,
    /// EMA coefficient β_w on the previous round's weights.
    #[serde(default = "default_weight_smoothing")]
    pub weight_smoothing: f64,
    /// Trailing rounds averaged into the final summary.
    #[serde(default = "default_final_window")]
    pub final_window: usize,
}

fn default_warmup_rounds() -> usize {
    10
}
fn default_local_epochs() -> usize {
    1
}
fn default_q() -> f64 {
    1.0
}
fn default_weight_smoothing() -> f64 {
    0.5
}
fn default_final_window() -> usize {
    5
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(Error::Config("total_rounds must be positive".into()));
        }
        if self.warmup_rounds >= self.total_rounds {
            return Err(Error::Config(format!(
                "warmup_rounds ({}) must be smaller than total_rounds ({})",
                self.warmup_rounds, self.total_rounds
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be positive".into()));
        }
        if !(self.q.is_finite() && self.q >= 0.0) {
            return Err(Error::Config(format!("q must be nonnegative, got {}", self.q)));
        }
        if !(self.weight_smoothing.is_finite() && (0.0..1.0).contains(&self.weight_smoothing)) {
            return Err(Error::Config(format!(
                "weight_smoothing must lie in [0, 1), got {}",
                self.weight_smoothing
            )));
        }
        if self.final_window == 0 {
            return Err(Error::Config("final_window must be positive".into()));
        }
        Ok(())
    }
}

/// The data a client actually trains on this round.
#[derive(Debug, Clone)]
pub struct ReliableDataset {
    pub features: DenseMatrix,
    /// Observed labels for trusted clients, pseudo-labels for noisy ones.
    pub labels: Vec<usize>,
    /// 1 for trusted clients; mean selected confidence for noisy ones.
    pub reliability: f64,
}

impl ReliableDataset {
    pub fn size(&self) -> usize {
        self.features.rows()
    }

    fn empty(input_dim: usize) -> Self {
        ReliableDataset {
            features: DenseMatrix::zeros(0, input_dim),
            labels: Vec::new(),
            reliability: 0.0,
        }
    }
}

/// Per-client top-quantile average of correct-sample confidences, combined
/// across clients by mean and floored at `tau_min`.
fn tau_from_confidences(
    round: usize,
    total_rounds: usize,
    per_client_correct: &[Vec<f64>],
    tau_min: f64,
) -> f64 {
    let fraction = round as f64 / total_rounds as f64;
    let mut sum = 0.0;
    let mut contributors = 0usize;
    for confidences in per_client_correct {
        if confidences.is_empty() {
            continue;
        }
        let mut sorted = confidences.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("confidences are finite"));
        let take = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sum += sorted[..take].iter().sum::<f64>() / take as f64;
        contributors += 1;
    }
    if contributors == 0 {
        return tau_min;
    }
    (sum / contributors as f64).max(tau_min)
}

/// Confidence threshold for round `round` of `total_rounds`: per common
/// client, the mean of the top `ceil((round/total)·n)` predicted-class
/// probabilities over its correctly classified samples; client values are
/// averaged and floored at `tau_min`. Clients without a correct sample do
/// not contribute; with no contributors τ = `tau_min`.
pub fn compute_tau(
    round: usize,
    total_rounds: usize,
    common_clients: &[&ClientDataset],
    params: &MlpParams,
    tau_min: f64,
) -> Result<f64> {
    if round == 0 || round > total_rounds {
        return Err(Error::InvalidArgument(format!(
            "round {round} outside schedule of {total_rounds}"
        )));
    }
    let mut per_client = Vec::with_capacity(common_clients.len());
    for client in common_clients {
        let (predicted, confidence) = predict(params, &client.features)?;
        let correct: Vec<f64> = predicted
            .iter()
            .zip(&client.observed_labels)
            .zip(&confidence)
            .filter(|((p, y), _)| p == y)
            .map(|(_, &c)| c)
            .collect();
        per_client.push(correct);
    }
    Ok(tau_from_confidences(round, total_rounds, &per_client, tau_min))
}

/// Builds the dataset a client trains on given its effective set membership.
///
/// Common and rare clients keep their data untouched with reliability 1.
/// Noisy clients either drop everything, or keep the samples whose
/// predicted-class probability strictly exceeds τ, relabeled with the
/// predicted class; reliability is the mean confidence of the kept samples.
pub fn build_reliable_dataset(
    client: &ClientDataset,
    membership: SetLabel,
    params: &MlpParams,
    tau: f64,
    strategy: SelectionStrategy,
) -> Result<ReliableDataset> {
    match membership {
        SetLabel::Common | SetLabel::Rare => Ok(ReliableDataset {
            features: client.features.clone(),
            labels: client.observed_labels.clone(),
            reliability: 1.0,
        }),
        SetLabel::Noisy => match strategy {
            SelectionStrategy::Drop => Ok(ReliableDataset::empty(client.features.cols())),
            SelectionStrategy::HighConfidence { .. } => {
                let (predicted, confidence) = predict(params, &client.features)?;
                let keep: Vec<usize> =
                    (0..client.len()).filter(|&i| confidence[i] > tau).collect();
                if keep.is_empty() {
                    return Ok(ReliableDataset::empty(client.features.cols()));
                }
                let reliability =
                    keep.iter().map(|&i| confidence[i]).sum::<f64>() / keep.len() as f64;
                Ok(ReliableDataset {
                    features: client.features.select_rows(&keep)?,
                    labels: keep.iter().map(|&i| predicted[i]).collect(),
                    reliability,
                })
            }
        },
    }
}

/// Normalizes nonnegative numerators into a weight simplex.
fn normalize_weights(mut numerators: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = numerators.iter().sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("aggregation weight numerators overflow".into()));
    }
    if total <= 0.0 {
        return Err(Error::NoTrainableData("all aggregation numerators are zero".into()));
    }
    for v in &mut numerators {
        *v /= total;
    }
    Ok(numerators)
}

/// Reliability- and dispersion-adjusted weights `w_k ∝ N̂_k·r_k·exp(−q·S_k)`.
///
/// If every numerator vanishes, falls back to uniform weights over clients
/// with data; if no client has data, the round is untrainable.
pub fn fedpca_weights(
    sizes: &[usize],
    reliabilities: &[f64],
    dispersions: &[f64],
    q: f64,
) -> Result<Vec<f64>> {
    if sizes.len() != reliabilities.len() || sizes.len() != dispersions.len() {
        return Err(Error::Shape(format!(
            "weight inputs disagree: {} sizes, {} reliabilities, {} dispersions",
            sizes.len(),
            reliabilities.len(),
            dispersions.len()
        )));
    }
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no clients to weight".into()));
    }
    if !(q.is_finite() && q >= 0.0) {
        return Err(Error::InvalidArgument(format!("q must be nonnegative, got {q}")));
    }
    for (k, &r) in reliabilities.iter().enumerate() {
        if !(r.is_finite() && (0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidArgument(format!(
                "reliability of client {k} must lie in [0, 1], got {r}"
            )));
        }
    }
    let numerators: Vec<f64> = sizes
        .iter()
        .zip(reliabilities)
        .zip(dispersions)
        .map(|((&n, &r), &s)| n as f64 * r * (-q * s).exp())
        .collect();
    if numerators.iter().all(|&v| v == 0.0) {
        if sizes.iter().all(|&n| n == 0) {
            return Err(Error::NoTrainableData(
                "every client contributed an empty reliable dataset".into(),
            ));
        }
        let with_data = sizes.iter().filter(|&&n| n > 0).count() as f64;
        return Ok(sizes
            .iter()
            .map(|&n| if n > 0 { 1.0 / with_data } else { 0.0 })
            .collect());
    }
    normalize_weights(numerators)
}

/// Size-proportional weights `w_k = N_k / ΣN`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no clients to weight".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::NoTrainableData("all clients are empty".into()));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Loss-amplified size weights `w_k ∝ N_k · loss_k^q`; `q = 0` reduces to
/// size-proportional weights, and all-zero numerators fall back to uniform
/// weights over clients with data.
pub fn loss_weighted_baseline(sizes: &[usize], losses: &[f64], q: f64) -> Result<Vec<f64>> {
    if sizes.len() != losses.len() {
        return Err(Error::Shape(format!(
            "{} sizes against {} losses",
            sizes.len(),
            losses.len()
        )));
    }
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no clients to weight".into()));
    }
    if !(q.is_finite() && q >= 0.0) {
        return Err(Error::InvalidArgument(format!("q must be nonnegative, got {q}")));
    }
    if let Some(&bad) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "losses must be nonnegative and finite, got {bad}"
        )));
    }
    if sizes.iter().all(|&n| n == 0) {
        return Err(Error::NoTrainableData("all clients are empty".into()));
    }
    let numerators: Vec<f64> =
        sizes.iter().zip(losses).map(|(&n, &l)| n as f64 * l.powf(q)).collect();
    if numerators.iter().all(|&v| v == 0.0) {
        let with_data = sizes.iter().filter(|&&n| n > 0).count() as f64;
        return Ok(sizes
            .iter()
            .map(|&n| if n > 0 { 1.0 / with_data } else { 0.0 })
            .collect());
    }
    normalize_weights(numerators)
}

/// Parameter-wise weighted sum of local models.
pub fn aggregate(models: &[MlpParams], weights: &[f64]) -> Result<MlpParams> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} models against {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "weights must be nonnegative and finite, got {bad}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "weights must sum to 1 within 1e-9, got {total}"
        )));
    }
    let first = &models[0];
    for (k, model) in models.iter().enumerate() {
        if model.input_dim() != first.input_dim()
            || model.hidden_dim() != first.hidden_dim()
            || model.num_classes() != first.num_classes()
        {
            return Err(Error::Shape(format!("model {k} has a different architecture")));
        }
    }
    let mut out = first.clone();
    let scale_into = |dst: &mut [f64]| {
        for v in dst.iter_mut() {
            *v *= weights[0];
        }
    };
    scale_into(out.w1.values_mut());
    scale_into(&mut out.b1);
    scale_into(out.w2.values_mut());
    scale_into(&mut out.b2);
    for (model, &w) in models.iter().zip(weights).skip(1) {
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        };
        add_into(out.w1.values_mut(), model.w1.values());
        add_into(&mut out.b1, model.b1.as_slice());
        add_into(out.w2.values_mut(), model.w2.values());
        add_into(&mut out.b2, model.b2.as_slice());
    }
    out.w1.check_finite("aggregated first-layer weights")?;
    out.w2.check_finite("aggregated second-layer weights")?;
    Ok(out)
}

/// Mini-batch SGD on an explicit (features, labels) pair.
fn train_on(
    global: &MlpParams,
    features: &DenseMatrix,
    labels: &[usize],
    epochs: usize,
    training: &TrainingConfig,
    seed: u64,
) -> Result<MlpParams> {
    if features.rows() == 0 {
        return Ok(global.clone());
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} training rows",
            labels.len(),
            features.rows()
        )));
    }
    let mut params = global.clone();
    let mut sgd = SgdState::new(
        training.learning_rate,
        training.momentum,
        training.weight_decay,
        &params,
    )?;
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..features.rows()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(training.batch_size) {
            let batch = features.select_rows(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = forward(&params, &batch)?;
            let grads = backward(&params, &trace, &batch_labels)?;
            sgd_step(&mut params, &grads, &mut sgd)?;
        }
    }
    Ok(params)
}

/// Local training pass over a reliable dataset, starting from the global
/// model. Empty datasets return the model unchanged.
pub fn local_train(
    global: &MlpParams,
    data: &ReliableDataset,
    epochs: usize,
    training: &TrainingConfig,
    seed: u64,
) -> Result<MlpParams> {
    train_on(global, &data.features, &data.labels, epochs, training, seed)
}

/// Per-client diagnostics recorded on analysis rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundAnalysis {
    pub client: usize,
    pub loss: f64,
    pub dispersion: f64,
    /// Mixture responsibilities; all zero when the fit failed.
    pub responsibilities: [f64; 3],
    /// Instantaneous set from this round's mixture.
    pub assigned: SetLabel,
    /// Set after temporal smoothing — the one that drives selection.
    pub effective: SetLabel,
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub metrics: DistributionMetrics,
    pub summary: MetricSummary,
    /// Aggregation weights used this round; all zero on a skipped round.
    pub weights: Vec<f64>,
    /// Confidence threshold, on rounds that compute one.
    pub tau: Option<f64>,
    /// Effective client partition, on rounds that compute one.
    pub partition: Option<ClientPartition>,
    /// Per-client diagnostics, on rounds that compute them.
    pub analysis: Vec<ClientRoundAnalysis>,
    pub warning: Option<String>,
}

/// Full record of one experiment run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rounds: Vec<RoundRecord>,
    /// Each summary field averaged over the final window of rounds.
    pub final_summary: MetricSummary,
    /// Mean of `w_rare·(1 − w_mislabeled)` over post-warm-up rounds,
    /// against the scenario's ground truth.
    pub weight_diagnostic: f64,
}

/// Field-wise mean of round summaries.
fn mean_summary(records: &[&RoundRecord]) -> MetricSummary {
    let n = records.len() as f64;
    let mut acc = MetricSummary {
        worst_acc: 0.0,
        avg_acc: 0.0,
        std_acc: 0.0,
        worst_auc: 0.0,
        avg_auc: 0.0,
        std_auc: 0.0,
    };
    for r in records {
        acc.worst_acc += r.summary.worst_acc / n;
        acc.avg_acc += r.summary.avg_acc / n;
        acc.std_acc += r.summary.std_acc / n;
        acc.worst_auc += r.summary.worst_auc / n;
        acc.avg_auc += r.summary.avg_auc / n;
        acc.std_auc += r.summary.std_auc / n;
    }
    acc
}

/// Runs one full experiment: `total_rounds` rounds of the given method on a
/// built scenario, evaluating on both test distributions every round.
pub fn run_experiment(
    scenario: &Scenario,
    rounds: &RoundConfig,
    training: &TrainingConfig,
    method: Method,
    seed: u64,
) -> Result<RunReport> {
    rounds.validate()?;
    training.validate()?;
    method.validate()?;
    let cfg = &scenario.config;
    let k = scenario.clients.len();
    let sizes: Vec<usize> = scenario.clients.iter().map(|c| c.len()).collect();
    let normalize_by_size = matches!(cfg.partition, Partition::Dirichlet { .. });

    let mut global = MlpParams::init(
        cfg.input_dim,
        training.hidden_dim,
        cfg.num_classes,
        &mut rng_for(seed, &[stream::MODEL_INIT]),
    )?;
    let mut smoothing = SmoothingState::new(k, DEFAULT_ID_SMOOTHING_BETA)?;
    let mut prev_weights: Option<Vec<f64>> = None;
    let mut records: Vec<RoundRecord> = Vec::with_capacity(rounds.total_rounds);

    for t in 1..=rounds.total_rounds {
        let analysis_round = matches!(method, Method::FedPca(_)) && t > rounds.warmup_rounds;
        let record = if analysis_round {
            let strategy = match method {
                Method::FedPca(s) => s,
                _ => unreachable!("analysis rounds only run for the analysis method"),
            };
            analysis_step(
                scenario,
                rounds,
                training,
                strategy,
                seed,
                t,
                normalize_by_size,
                &mut global,
                &mut smoothing,
                &mut prev_weights,
            )?
        } else {
            baseline_step(
                scenario,
                rounds,
                training,
                method,
                seed,
                t,
                &sizes,
                &mut global,
                &mut prev_weights,
            )?
        };
        records.push(record);
    }

    let window = rounds.final_window.min(records.len());
    let tail: Vec<&RoundRecord> = records[records.len() - window..].iter().collect();
    let final_summary = mean_summary(&tail);
    let post_warmup: Vec<Vec<f64>> = records[rounds.warmup_rounds..]
        .iter()
        .map(|r| r.weights.clone())
        .collect();
    let diagnostic = weight_diagnostic(
        &post_warmup,
        &scenario.rare_client_ids(),
        &scenario.mislabeled_client_ids(),
    )?;

    Ok(RunReport { rounds: records, final_summary, weight_diagnostic: diagnostic })
}

/// One warm-up / baseline round: full local data, method-specific weights.
#[allow(clippy::too_many_arguments)]
fn baseline_step(
    scenario: &Scenario,
    rounds: &RoundConfig,
    training: &TrainingConfig,
    method: Method,
    seed: u64,
    t: usize,
    sizes: &[usize],
    global: &mut MlpParams,
    prev_weights: &mut Option<Vec<f64>>,
) -> Result<RoundRecord> {
    let weights = match method {
        Method::LossWeighted { q } if t > rounds.warmup_rounds => {
            let mut losses = Vec::with_capacity(scenario.clients.len());
            for client in &scenario.clients {
                let trace = forward(global, &client.features)?;
                losses.push(cross_entropy(&trace, &client.observed_labels)?);
            }
            loss_weighted_baseline(sizes, &losses, q)?
        }
        _ => fedavg_weights(sizes)?,
    };

    let mut locals = Vec::with_capacity(scenario.clients.len());
    for (idx, client) in scenario.clients.iter().enumerate() {
        locals.push(train_on(
            global,
            &client.features,
            &client.observed_labels,
            rounds.local_epochs,
            training,
            derive_seed(seed, &[stream::LOCAL_TRAIN, t as u64, idx as u64]),
        )?);
    }
    *global = aggregate(&locals, &weights)?;
    *prev_weights = Some(weights.clone());

    let metrics = evaluate_model(global, &scenario.test)?;
    Ok(RoundRecord {
        round: t,
        metrics,
        summary: summarize(&metrics),
        weights,
        tau: None,
        partition: None,
        analysis: Vec::new(),
        warning: None,
    })
}

/// One performance–capacity round: identify sets, rebuild reliable data,
/// train, and aggregate with smoothed adjusted weights.
#[allow(clippy::too_many_arguments)]
fn analysis_step(
    scenario: &Scenario,
    rounds: &RoundConfig,
    training: &TrainingConfig,
    strategy: SelectionStrategy,
    seed: u64,
    t: usize,
    normalize_by_size: bool,
    global: &mut MlpParams,
    smoothing: &mut SmoothingState,
    prev_weights: &mut Option<Vec<f64>>,
) -> Result<RoundRecord> {
    let k = scenario.clients.len();
    let c = scenario.config.num_classes;
    let mut warning = None;

    let mut pairs: Vec<LossDispersionPair> = Vec::with_capacity(k);
    for (idx, client) in scenario.clients.iter().enumerate() {
        pairs.push(client_vector(
            global,
            client,
            c,
            normalize_by_size,
            derive_seed(seed, &[stream::CLIENT_VECTOR, t as u64, idx as u64]),
        )?);
    }
    let points: Vec<[f64; 2]> = pairs.iter().map(|p| [p.loss, p.dispersion]).collect();

    let (instant, responsibilities) =
        match fit_gmm3(&points, derive_seed(seed, &[stream::GMM, t as u64])) {
            Ok(gmm) => {
                let noisy = select_noisy_component(&gmm);
                let partition = assign_sets(&gmm, noisy);
                (partition, gmm.responsibilities)
            }
            Err(err) => {
                warning = Some(format!(
                    "round {t}: mixture fit failed ({err}); treating all clients as common"
                ));
                (ClientPartition::all_common(k), vec![[0.0; 3]; k])
            }
        };
    let effective = smooth_identification(smoothing, &instant)?;

    let common_clients: Vec<&ClientDataset> =
        effective.s_common.iter().map(|&i| &scenario.clients[i]).collect();
    let tau = compute_tau(t, rounds.total_rounds, &common_clients, global, strategy.tau_min())?;

    let mut reliable = Vec::with_capacity(k);
    for (idx, client) in scenario.clients.iter().enumerate() {
        reliable.push(build_reliable_dataset(
            client,
            effective.label_of(idx),
            global,
            tau,
            strategy,
        )?);
    }
    let n_hat: Vec<usize> = reliable.iter().map(|d| d.size()).collect();
    let reliabilities: Vec<f64> = reliable.iter().map(|d| d.reliability).collect();
    let dispersions: Vec<f64> = pairs.iter().map(|p| p.dispersion).collect();

    let analysis: Vec<ClientRoundAnalysis> = (0..k)
        .map(|i| ClientRoundAnalysis {
            client: i,
            loss: pairs[i].loss,
            dispersion: pairs[i].dispersion,
            responsibilities: responsibilities[i],
            assigned: instant.label_of(i),
            effective: effective.label_of(i),
        })
        .collect();

    let weights = match fedpca_weights(&n_hat, &reliabilities, &dispersions, rounds.q) {
        Ok(now) => {
            // Smooth against the previous round, then pin clients with a
            // zero instantaneous numerator to exactly zero so excluded
            // clients cannot leak weight through the moving average.
            let beta = rounds.weight_smoothing;
            let mut effective_w = match prev_weights.as_ref() {
                Some(prev) if beta > 0.0 => prev
                    .iter()
                    .zip(&now)
                    .map(|(p, n)| beta * p + (1.0 - beta) * n)
                    .collect(),
                _ => now.clone(),
            };
            for i in 0..k {
                if now[i] == 0.0 {
                    effective_w[i] = 0.0;
                }
            }
            Some(normalize_weights(effective_w)?)
        }
        Err(Error::NoTrainableData(_)) => None,
        Err(other) => return Err(other),
    };

    let weights = match weights {
        Some(w) => {
            let mut locals = Vec::with_capacity(k);
            for (idx, data) in reliable.iter().enumerate() {
                locals.push(local_train(
                    global,
                    data,
                    rounds.local_epochs,
                    training,
                    derive_seed(seed, &[stream::LOCAL_TRAIN, t as u64, idx as u64]),
                )?);
            }
            *global = aggregate(&locals, &w)?;
            *prev_weights = Some(w.clone());
            w
        }
        None => {
            warning = Some(format!(
                "round {t}: no trainable data; keeping the previous global model"
            ));
            vec![0.0; k]
        }
    };

    let metrics = evaluate_model(global, &scenario.test)?;
    Ok(RoundRecord {
        round: t,
        metrics,
        summary: summarize(&metrics),
        weights,
        tau: Some(tau),
        partition: Some(effective),
        analysis,
        warning,
    })
}
