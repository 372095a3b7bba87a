//! Synthetic federated scenarios.
//!
//! The base distribution places one isotropic unit-variance Gaussian per
//! class at the vertices of a scaled simplex (pairwise distance
//! [`CLASS_SEPARATION`]). From that common distribution the generator
//! derives:
//!
//! - **rare** clients: every feature gets additive Gaussian corruption with
//!   `corruption_sigma`, simulating an underrepresented capacity-limited
//!   group;
//! - **mislabeled** clients: a fraction `eta` of observed labels is flipped
//!   to a uniformly random *different* class;
//! - **partitions**: equally sized iid clients, a Dirichlet split of a
//!   common pool (heterogeneous sizes and class mixes), or per-client
//!   mixtures that blend common and corrupted samples.
//!
//! Every draw is keyed by the scenario seed plus purpose tags, so a scenario
//! is a pure function of its config. Rare clients occupy the highest client
//! indices; under `common_only` noise placement the mislabeled clients are
//! the lowest-indexed common clients. Both choices make scenarios
//! reproducible by construction.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{derive_seed, rng_from_seed, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

/// Pairwise Euclidean distance between class means.
pub const CLASS_SEPARATION: f64 = 6.0;

/// How client datasets are carved out of the base distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    /// Every client draws `samples_per_client` class-balanced iid samples.
    Iid,
    /// A shared pool is split by per-class Dirichlet(beta) proportions,
    /// giving heterogeneous client sizes and class mixes.
    Dirichlet { beta: f64 },
    /// The designated minority clients hold `alpha`-mixtures: a fraction
    /// `round((1 − alpha)·N)` of their samples is corrupted, the rest stays
    /// common. One alpha per designated client.
    Mixed { alphas: Vec<f64> },
}

/// Which clients may receive label noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// Only common-distribution clients, lowest indices first.
    CommonOnly,
    /// Any client, drawn uniformly without replacement.
    Uniform,
}

/// Full description of a synthetic scenario; a pure function of this struct
/// (including its seed) determines every byte of the generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of clients, at least 3.
    pub num_clients: usize,
    /// Number of classes, at least 2.
    pub num_classes: usize,
    /// Feature dimension; must be at least `num_classes` so the simplex
    /// embedding exists.
    pub input_dim: usize,
    /// Per-client sample count (iid / mixed) or pool share (dirichlet).
    pub samples_per_client: usize,
    /// Fraction of clients carrying the rare distribution, in [0, 1].
    pub rare_client_fraction: f64,
    /// Std of the additive feature corruption for rare samples.
    pub corruption_sigma: f64,
    /// Fraction of clients that receive label noise, in [0, 1].
    pub rho: f64,
    /// Within-client label flip rate, in [0, 1].
    pub eta: f64,
    pub partition: Partition,
    pub noise_placement: NoisePlacement,
    pub seed: u64,
    /// Per-distribution test set size.
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

fn default_test_samples() -> usize {
    1000
}

/// Ground-truth provenance of a client's features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributionTag {
    Common,
    Rare,
    /// Mixture weight alpha on the common component.
    Mixed(f64),
}

/// One client's local data plus ground truth used only for evaluation.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    /// `N_k × input_dim` feature matrix.
    pub features: DenseMatrix,
    /// Labels as the client sees them (possibly flipped).
    pub observed_labels: Vec<usize>,
    /// Uncorrupted labels, for evaluation only.
    pub true_labels: Vec<usize>,
    pub tag: DistributionTag,
    /// True exactly when label flipping changed at least one position.
    pub truly_mislabeled: bool,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Held-out evaluation sets, one per distribution.
#[derive(Debug, Clone)]
pub struct TestSets {
    pub common_features: DenseMatrix,
    pub common_labels: Vec<usize>,
    pub rare_features: DenseMatrix,
    pub rare_labels: Vec<usize>,
}

/// A fully materialized scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub clients: Vec<ClientDataset>,
    pub test: TestSets,
}

impl Scenario {
    /// Clients whose features carry (some) corruption: tags `Rare` or
    /// `Mixed`.
    pub fn rare_client_ids(&self) -> Vec<usize> {
        self.clients
            .iter()
            .enumerate()
            .filter(|(_, c)| !matches!(c.tag, DistributionTag::Common))
            .map(|(k, _)| k)
            .collect()
    }

    /// Clients whose observed labels were actually flipped.
    pub fn mislabeled_client_ids(&self) -> Vec<usize> {
        self.clients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.truly_mislabeled)
            .map(|(k, _)| k)
            .collect()
    }
}

impl ScenarioConfig {
    /// Checks every range constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_clients < 3 {
            return fail(format!("num_clients must be at least 3, got {}", self.num_clients));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_dim < self.num_classes {
            return fail(format!(
                "input_dim must be at least num_classes ({}) for the simplex embedding, got {}",
                self.num_classes, self.input_dim
            ));
        }
        if self.samples_per_client < self.num_classes {
            return fail(format!(
                "samples_per_client must be at least num_classes, got {}",
                self.samples_per_client
            ));
        }
        for (name, v) in [
            ("rare_client_fraction", self.rare_client_fraction),
            ("rho", self.rho),
            ("eta", self.eta),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.corruption_sigma.is_finite() && self.corruption_sigma >= 0.0) {
            return fail(format!(
                "corruption_sigma must be non-negative, got {}",
                self.corruption_sigma
            ));
        }
        if self.test_samples < self.num_classes {
            return fail(format!(
                "test_samples must be at least num_classes, got {}",
                self.test_samples
            ));
        }
        match &self.partition {
            Partition::Iid => {}
            Partition::Dirichlet { beta } => {
                if !(beta.is_finite() && *beta > 0.0) {
                    return fail(format!("partition.beta must be positive, got {beta}"));
                }
            }
            Partition::Mixed { alphas } => {
                if alphas.iter().any(|a| !(0.0..=1.0).contains(a) || !a.is_finite()) {
                    return fail(format!("partition.alphas must all be in [0, 1], got {alphas:?}"));
                }
                let designated = round_half_up(self.rare_client_fraction * self.num_clients as f64);
                if alphas.len() != designated {
                    return fail(format!(
                        "partition.alphas has {} entries but rare_client_fraction designates {designated} clients",
                        alphas.len()
                    ));
                }
            }
        }
        let n_rare = round_half_up(self.rare_client_fraction * self.num_clients as f64);
        let n_noisy = round_half_up(self.rho * self.num_clients as f64);
        if self.noise_placement == NoisePlacement::CommonOnly
            && n_noisy > self.num_clients - n_rare
        {
            return fail(format!(
                "rho designates {n_noisy} mislabeled clients but only {} are common",
                self.num_clients - n_rare
            ));
        }
        Ok(())
    }
}

/// Rounds to the nearest integer with ties going up (`0.5 → 1`).
pub fn round_half_up(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    // f64::round ties away from zero, which equals ties-up for non-negatives.
    x.round() as usize
}

/// Class means: vertices of a regular simplex scaled so every pair is
/// [`CLASS_SEPARATION`] apart, embedded in the first `num_classes`
/// coordinates of R^`input_dim`.
pub fn class_means(num_classes: usize, input_dim: usize) -> Result<DenseMatrix> {
    if input_dim < num_classes {
        return Err(Error::InvalidArgument(format!(
            "input_dim {input_dim} cannot embed a {num_classes}-vertex simplex"
        )));
    }
    // Unit basis vectors are sqrt(2) apart; scale to the target separation.
    let scale = CLASS_SEPARATION / 2.0f64.sqrt();
    let mut means = DenseMatrix::zeros(num_classes, input_dim);
    for c in 0..num_classes {
        means.set(c, c, scale);
    }
    Ok(means)
}

/// Draws `n` class-balanced samples from the common distribution. Labels
/// interleave (`label_i = i mod C`), so any prefix or suffix is as balanced
/// as possible and `n = C` yields exactly one sample per class.
pub fn generate_base(
    num_classes: usize,
    input_dim: usize,
    n: usize,
    seed: u64,
) -> Result<(DenseMatrix, Vec<usize>)> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let means = class_means(num_classes, input_dim)?;
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let mut values = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        labels.push(label);
        let mean = means.row(label);
        for &m in mean {
            values.push(m + normal.sample(&mut rng));
        }
    }
    Ok((DenseMatrix::new(n, input_dim, values)?, labels))
}

/// Adds iid `N(0, sigma²)` noise to every feature. `sigma = 0` returns the
/// input unchanged.
pub fn corrupt(features: &DenseMatrix, sigma: f64, seed: u64) -> Result<DenseMatrix> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "corruption sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    let mut out = features.clone();
    for v in out.values_mut() {
        *v += normal.sample(&mut rng);
    }
    out.check_finite("corrupted features")?;
    Ok(out)
}

/// Flips exactly `round_half_up(eta · N)` labels, chosen uniformly without
/// replacement, each to a uniformly random *different* class.
pub fn flip_labels(
    labels: &[usize],
    eta: f64,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&eta) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("eta must be in [0, 1], got {eta}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "cannot flip labels with fewer than 2 classes".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let n = labels.len();
    let flip_count = round_half_up(eta * n as f64);
    let mut rng = rng_from_seed(seed);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    positions.truncate(flip_count);
    let mut flipped = labels.to_vec();
    for &pos in &positions {
        // Uniform over the C−1 classes that differ from the original.
        let draw = rng.random_range(0..num_classes - 1);
        flipped[pos] = if draw < labels[pos] { draw } else { draw + 1 };
    }
    Ok(flipped)
}

/// Splits sample indices across clients with per-class Dirichlet(beta)
/// proportions. Every client is guaranteed at least `num_classes` samples
/// covering at least two classes; the whole allocation is redrawn up to 100
/// times to satisfy that, then the split fails.
pub fn partition_dirichlet(
    labels: &[usize],
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(beta, 1.0).expect("beta validated above");
    let mut rng = rng_from_seed(seed);

    const MAX_ATTEMPTS: usize = 100;
    for _ in 0..MAX_ATTEMPTS {
        let mut allocation: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            let mut indices = class_indices.clone();
            indices.shuffle(&mut rng);
            // Dirichlet proportions via normalized Gamma draws.
            let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total.is_finite() && total > 0.0) {
                draws = vec![1.0; num_clients];
            }
            let total: f64 = draws.iter().sum();
            let n_c = indices.len();
            let mut start = 0usize;
            let mut cum = 0.0;
            for (k, d) in draws.iter().enumerate() {
                cum += d / total;
                let end = if k + 1 == num_clients {
                    n_c
                } else {
                    round_half_up(cum * n_c as f64).min(n_c)
                };
                let end = end.max(start);
                allocation[k].extend_from_slice(&indices[start..end]);
                start = end;
            }
        }
        let ok = allocation.iter().all(|idx| {
            if idx.len() < num_classes.max(1) {
                return false;
            }
            let mut classes: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            classes.len() >= 2
        });
        if ok {
            for idx in &mut allocation {
                idx.sort_unstable();
            }
            return Ok(allocation);
        }
    }
    Err(Error::InsufficientData(format!(
        "dirichlet partition failed to give every client {num_classes}+ samples across 2+ classes within {MAX_ATTEMPTS} attempts"
    )))
}

/// Materializes a scenario from its config: client datasets (with rare
/// corruption, label flipping, and the chosen partition) plus fresh test
/// sets for both distributions.
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let k = config.num_clients;
    let c = config.num_classes;
    let d = config.input_dim;
    let n_rare = round_half_up(config.rare_client_fraction * k as f64);
    let first_rare = k - n_rare; // rare clients occupy the highest indices

    // Raw per-client data before label noise.
    let mut raw: Vec<(DenseMatrix, Vec<usize>, DistributionTag)> = Vec::with_capacity(k);
    match &config.partition {
        Partition::Iid | Partition::Mixed { .. } => {
            let alphas = match &config.partition {
                Partition::Mixed { alphas } => Some(alphas),
                _ => None,
            };
            for client in 0..k {
                let base_seed = derive_seed(config.seed, &[stream::BASE_DATA, client as u64]);
                let (mut features, labels) =
                    generate_base(c, d, config.samples_per_client, base_seed)?;
                let tag = if client < first_rare {
                    DistributionTag::Common
                } else {
                    match alphas {
                        None => DistributionTag::Rare,
                        Some(a) => DistributionTag::Mixed(a[client - first_rare]),
                    }
                };
                let corrupt_rows = match tag {
                    DistributionTag::Common => 0,
                    DistributionTag::Rare => features.rows(),
                    DistributionTag::Mixed(alpha) => {
                        round_half_up((1.0 - alpha) * features.rows() as f64)
                    }
                };
                if corrupt_rows > 0 {
                    let seed = derive_seed(config.seed, &[stream::CORRUPT, client as u64]);
                    let n = features.rows();
                    let tail = features.select_rows(&(n - corrupt_rows..n).collect::<Vec<_>>())?;
                    let corrupted = corrupt(&tail, config.corruption_sigma, seed)?;
                    for (offset, row) in (n - corrupt_rows..n).enumerate() {
                        features.row_mut(row).copy_from_slice(corrupted.row(offset));
                    }
                }
                raw.push((features, labels, tag));
            }
        }
        Partition::Dirichlet { beta } => {
            let pool_seed = derive_seed(config.seed, &[stream::BASE_DATA]);
            let (pool_features, pool_labels) =
                generate_base(c, d, k * config.samples_per_client, pool_seed)?;
            let part_seed = derive_seed(config.seed, &[stream::PARTITION]);
            let allocation = partition_dirichlet(&pool_labels, k, *beta, part_seed)?;
            for (client, indices) in allocation.iter().enumerate() {
                let mut features = pool_features.select_rows(indices)?;
                let labels: Vec<usize> = indices.iter().map(|&i| pool_labels[i]).collect();
                let tag = if client < first_rare {
                    DistributionTag::Common
                } else {
                    DistributionTag::Rare
                };
                if tag == DistributionTag::Rare {
                    let seed = derive_seed(config.seed, &[stream::CORRUPT, client as u64]);
                    features = corrupt(&features, config.corruption_sigma, seed)?;
                }
                raw.push((features, labels, tag));
            }
        }
    }

    // Pick which clients receive label noise.
    let n_noisy = round_half_up(config.rho * k as f64);
    let noisy_clients: Vec<usize> = match config.noise_placement {
        NoisePlacement::CommonOnly => (0..n_noisy).collect(),
        NoisePlacement::Uniform => {
            let mut ids: Vec<usize> = (0..k).collect();
            let mut rng = rng_from_seed(derive_seed(config.seed, &[stream::NOISE_PICK]));
            ids.shuffle(&mut rng);
            let mut picked: Vec<usize> = ids.into_iter().take(n_noisy).collect();
            picked.sort_unstable();
            picked
        }
    };

    let mut clients = Vec::with_capacity(k);
    for (client, (features, true_labels, tag)) in raw.into_iter().enumerate() {
        let observed_labels = if noisy_clients.contains(&client) {
            let seed = derive_seed(config.seed, &[stream::FLIP, client as u64]);
            flip_labels(&true_labels, config.eta, c, seed)?
        } else {
            true_labels.clone()
        };
        let truly_mislabeled = observed_labels != true_labels;
        clients.push(ClientDataset {
            features,
            observed_labels,
            true_labels,
            tag,
            truly_mislabeled,
        });
    }

    // Fresh held-out draws for both distributions.
    let (common_features, common_labels) =
        generate_base(c, d, config.test_samples, derive_seed(config.seed, &[stream::TEST_COMMON]))?;
    let (rare_base, rare_labels) =
        generate_base(c, d, config.test_samples, derive_seed(config.seed, &[stream::TEST_RARE, 0]))?;
    let rare_features = corrupt(
        &rare_base,
        config.corruption_sigma,
        derive_seed(config.seed, &[stream::TEST_RARE, 1]),
    )?;

    Ok(Scenario {
        config: config.clone(),
        clients,
        test: TestSets { common_features, common_labels, rare_features, rare_labels },
    })
}
