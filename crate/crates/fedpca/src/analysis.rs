//! Performance–capacity analysis of clients.
//!
//! Each round every client is summarized by a 2-D point: the global model's
//! mean cross-entropy on its local data (performance) and a dispersion score
//! of its hidden-layer features (capacity). Mislabeled clients tend to show
//! high loss *and* ordinary-to-high dispersion, rare-distribution clients
//! high loss but *low* dispersion, so a three-component Gaussian mixture over
//! the (loss, dispersion) pairs separates reliable, rare, and mislabeled
//! clients.
//!
//! Dispersion of one client: run label-free k-means (k = number of classes)
//! over the hidden features and score
//!
//! ```text
//! S = log( Σ_j n_j · ||global_mean − centroid_j||² / (C − 1) )
//! ```
//!
//! with the argument floored at 1e-12. When client sizes are heterogeneous
//! the counts can be normalized by the client size so large clients are not
//! structurally favored.
//!
//! The mislabeled ("noisy") component is picked geometrically: in the
//! (x = dispersion, y = loss) plane, the component with the strictly highest
//! loss mean qualifies when it deviates above the line through the other two
//! means without sitting clearly left of the low-loss mean — the group whose
//! loss is higher than its dispersion predicts. Identification is smoothed
//! over rounds with an exponential moving average so one flickering round
//! cannot drop a client.

use crate::cluster::{kmeans, Gmm3, KMeansResult};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::matrix::squared_distance;
use crate::nn::{cross_entropy, forward, MlpParams};

/// Floor of the dispersion log argument.
pub const DISPERSION_FLOOR: f64 = 1e-12;
/// EMA coefficient on the previous identification score.
pub const DEFAULT_ID_SMOOTHING_BETA: f64 = 0.7;
/// A smoothed score at or above this marks the client as noisy.
pub const ID_THRESHOLD: f64 = 0.5;
/// Standardized-space tolerance under which all three mixture means are
/// considered coincident (no geometry to read).
const DEGENERATE_MEANS_TOL: f64 = 1e-6;
/// How many dispersion-axis standard deviations a qualifying component may
/// sit below the dispersion of the low-loss reference mean. Keeps estimation
/// noise in near-tied dispersions from vetoing an otherwise clear pick while
/// still rejecting components that sit clearly leftward.
const DISPERSION_SLACK: f64 = 0.5;
/// Minimum cross-entropy excess (in nats) of a qualifying component's loss
/// mean over the low-loss reference mean. A model that never fits a group's
/// contradictory labels scores at least a full random-guess loss above the
/// common group, while data the model merely finds hard (corrupted features,
/// correct labels) converges well below one nat of excess.
const LOSS_GAP_MIN: f64 = 0.8;

/// One client's per-round summary point. Both values are finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDispersionPair {
    pub loss: f64,
    pub dispersion: f64,
}

/// Which reliability set a client belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetLabel {
    Common,
    Rare,
    Noisy,
}

impl SetLabel {
    /// Single-character token used in CSV artifacts.
    pub fn token(self) -> &'static str {
        match self {
            SetLabel::Common => "c",
            SetLabel::Rare => "r",
            SetLabel::Noisy => "n",
        }
    }
}

/// Disjoint split of clients into common / rare / noisy sets, covering every
/// client index exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub s_common: Vec<usize>,
    pub s_rare: Vec<usize>,
    pub s_noisy: Vec<usize>,
}

impl ClientPartition {
    /// Builds a partition from one label per client.
    pub fn from_labels(labels: &[SetLabel]) -> Self {
        let mut p = ClientPartition { s_common: vec![], s_rare: vec![], s_noisy: vec![] };
        for (k, &label) in labels.iter().enumerate() {
            match label {
                SetLabel::Common => p.s_common.push(k),
                SetLabel::Rare => p.s_rare.push(k),
                SetLabel::Noisy => p.s_noisy.push(k),
            }
        }
        p
    }

    /// Everyone in the common set; used when analysis is unavailable.
    pub fn all_common(num_clients: usize) -> Self {
        ClientPartition {
            s_common: (0..num_clients).collect(),
            s_rare: vec![],
            s_noisy: vec![],
        }
    }

    pub fn num_clients(&self) -> usize {
        self.s_common.len() + self.s_rare.len() + self.s_noisy.len()
    }

    /// One label per client index.
    pub fn labels(&self) -> Vec<SetLabel> {
        let mut labels = vec![SetLabel::Common; self.num_clients()];
        for &k in &self.s_rare {
            labels[k] = SetLabel::Rare;
        }
        for &k in &self.s_noisy {
            labels[k] = SetLabel::Noisy;
        }
        labels
    }

    pub fn label_of(&self, client: usize) -> SetLabel {
        if self.s_noisy.contains(&client) {
            SetLabel::Noisy
        } else if self.s_rare.contains(&client) {
            SetLabel::Rare
        } else {
            SetLabel::Common
        }
    }
}

/// Dispersion score of a fitted k-means clustering: log of the count-weighted
/// squared centroid spread around the global mean, divided by `C − 1`.
///
/// `normalize_by_size` divides each count by the total sample count, which
/// removes the client-size term when clients differ in size.
pub fn dispersion_score(
    km: &KMeansResult,
    num_classes: usize,
    normalize_by_size: bool,
) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "dispersion needs at least 2 classes, got {num_classes}"
        )));
    }
    let total: usize = km.counts.iter().sum();
    let mut sum = 0.0;
    for (j, &count) in km.counts.iter().enumerate() {
        let weight = if normalize_by_size {
            count as f64 / total as f64
        } else {
            count as f64
        };
        sum += weight * squared_distance(km.centroids.row(j), &km.global_mean);
    }
    let arg = (sum / (num_classes as f64 - 1.0)).max(DISPERSION_FLOOR);
    Ok(arg.ln())
}

/// Computes one client's (loss, dispersion) pair against the current global
/// model: mean cross-entropy on the observed labels, and the dispersion of
/// the hidden-layer features under label-free k-means with `k = num_classes`.
pub fn client_vector(
    params: &MlpParams,
    client: &ClientDataset,
    num_classes: usize,
    normalize_by_size: bool,
    seed: u64,
) -> Result<LossDispersionPair> {
    if client.is_empty() {
        return Err(Error::InsufficientData("client_vector needs a nonempty client".into()));
    }
    let trace = forward(params, &client.features)?;
    let loss = cross_entropy(&trace, &client.observed_labels)?;
    let km = kmeans(&trace.features, num_classes, seed)?;
    let dispersion = dispersion_score(&km, num_classes, normalize_by_size)?;
    Ok(LossDispersionPair { loss, dispersion })
}

/// Picks the mixture component that most plausibly holds mislabeled clients.
///
/// A mislabeled group deviates upward without retreating leftward:
/// unexpectedly high loss at a dispersion befitting common data. In the
/// (x = dispersion, y = loss) plane of the means in original units, a
/// component qualifies only when all three conditions hold:
///
/// - its loss mean is strictly the highest of the three — mislabeled data
///   announces itself by loss, and a loss tie leaves no component standing
///   out;
/// - its loss mean exceeds the lower-loss non-candidate mean by more than
///   [`LOSS_GAP_MIN`] nats: an excess under one random-guess loss marks data
///   the model merely finds hard, not labels it refuses to fit;
/// - its dispersion is no more than [`DISPERSION_SLACK`] dispersion-axis
///   standard deviations below the dispersion of the lower-loss non-candidate
///   mean (loss ties broken toward higher dispersion): that mean is the best
///   stand-in for well-labeled common data, and a high-loss group sitting
///   clearly left of it is rare data under stress, not mislabeled data;
/// - its dispersion also does not exceed both non-candidate dispersions by
///   more than the same slack: mislabeled data masquerades as common data in
///   capacity, so a component that out-disperses every other group is genuine
///   capacity structure, not label noise;
/// - its perpendicular offset from the line through the other two means —
///   normal oriented toward higher loss — is strictly positive.
///
/// Degenerate configurations:
///
/// - the two non-candidate means coincide: the line degenerates, so the
///   candidate qualifies only if it has strictly higher loss and no lower
///   dispersion than the pair;
/// - the non-candidate pair differs only in loss (a vertical line in this
///   plane): the normal cannot point toward higher loss, so it is oriented
///   toward higher dispersion instead;
/// - all three means within 1e-6 of each other in standardized units: no
///   geometry to read, returns `None`.
pub fn select_noisy_component(gmm: &Gmm3) -> Option<usize> {
    let m = &gmm.means; // standardized fit space
    let all_close = squared_distance(&m[0], &m[1]).sqrt() < DEGENERATE_MEANS_TOL
        && squared_distance(&m[0], &m[2]).sqrt() < DEGENERATE_MEANS_TOL
        && squared_distance(&m[1], &m[2]).sqrt() < DEGENERATE_MEANS_TOL;
    if all_close {
        return None;
    }

    // Original units, reordered to (x = dispersion, y = loss).
    let pts: Vec<[f64; 2]> = gmm
        .means_original
        .iter()
        .map(|&[loss, dispersion]| [dispersion, loss])
        .collect();
    let dispersion_std = gmm.axis_scaling[1].1;

    for cand in 0..3 {
        let a = pts[(cand + 1) % 3];
        let b = pts[(cand + 2) % 3];
        let c = pts[cand];
        // Strict loss maximum; unique, so at most one candidate survives.
        if !(c[1] > a[1] && c[1] > b[1]) {
            continue;
        }
        // The lower-loss non-candidate stands in for common data.
        let reference = if a[1] < b[1] || (a[1] == b[1] && a[0] >= b[0]) { a } else { b };
        if c[1] - reference[1] <= LOSS_GAP_MIN {
            continue;
        }
        if c[0] < reference[0] - DISPERSION_SLACK * dispersion_std {
            continue;
        }
        // Out-dispersing both others means capacity structure, not noise.
        if c[0] > a[0].max(b[0]) + DISPERSION_SLACK * dispersion_std {
            continue;
        }

        let scale = 1.0 + a.iter().chain(&b).fold(0.0f64, |acc, v| acc.max(v.abs()));
        let pair_coincides = squared_distance(&a, &b).sqrt() <= 1e-9 * scale;
        let offset = if pair_coincides {
            // The loss check already passed; demand no dispersion deficit.
            if c[0] - (a[0] + b[0]) / 2.0 >= 0.0 {
                c[1] - (a[1] + b[1]) / 2.0
            } else {
                continue;
            }
        } else {
            let d = [b[0] - a[0], b[1] - a[1]];
            let mut n = [-d[1], d[0]];
            if n[1].abs() <= 1e-12 * (d[0].abs() + d[1].abs()) {
                // Vertical non-candidate line: orient toward higher dispersion.
                if n[0] < 0.0 {
                    n = [-n[0], -n[1]];
                }
            } else if n[1] < 0.0 {
                n = [-n[0], -n[1]];
            }
            let norm = (n[0] * n[0] + n[1] * n[1]).sqrt();
            (n[0] * (c[0] - a[0]) + n[1] * (c[1] - a[1])) / norm
        };

        if offset > 0.0 {
            return Some(cand);
        }
    }
    None
}

/// Assigns every client to a set by its maximal responsibility (ties to the
/// lowest component index). Of the two non-noisy components, the one with
/// the higher-dispersion mean plays common and the other rare (equal
/// dispersion: the lower loss mean is common). Without a noisy component,
/// the highest-loss-mean component merges into the rare set and the noisy
/// set stays empty.
pub fn assign_sets(gmm: &Gmm3, noisy_component: Option<usize>) -> ClientPartition {
    let roles = component_roles(gmm, noisy_component);
    let labels: Vec<SetLabel> = gmm
        .responsibilities
        .iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..3 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            roles[best]
        })
        .collect();
    ClientPartition::from_labels(&labels)
}

/// Maps each mixture component to the set it represents.
fn component_roles(gmm: &Gmm3, noisy_component: Option<usize>) -> [SetLabel; 3] {
    let loss = |j: usize| gmm.means_original[j][0];
    let dispersion = |j: usize| gmm.means_original[j][1];
    // Prefer the higher-dispersion mean as common; break ties toward lower
    // loss, then the lower index, so the mapping is fully deterministic.
    let common_over = |a: usize, b: usize| -> bool {
        if dispersion(a) != dispersion(b) {
            dispersion(a) > dispersion(b)
        } else if loss(a) != loss(b) {
            loss(a) < loss(b)
        } else {
            a < b
        }
    };
    let mut roles = [SetLabel::Common; 3];
    match noisy_component {
        Some(noisy) => {
            roles[noisy] = SetLabel::Noisy;
            let others: Vec<usize> = (0..3).filter(|&j| j != noisy).collect();
            let (a, b) = (others[0], others[1]);
            if common_over(a, b) {
                roles[b] = SetLabel::Rare;
            } else {
                roles[a] = SetLabel::Rare;
            }
        }
        None => {
            // Highest loss mean (lowest index on ties) merges into rare.
            let mut worst = 0;
            for j in 1..3 {
                if loss(j) > loss(worst) {
                    worst = j;
                }
            }
            roles[worst] = SetLabel::Rare;
            let others: Vec<usize> = (0..3).filter(|&j| j != worst).collect();
            let (a, b) = (others[0], others[1]);
            if common_over(a, b) {
                roles[b] = SetLabel::Rare;
            } else {
                roles[a] = SetLabel::Rare;
            }
        }
    }
    roles
}

/// Per-client exponential moving average of noisy-identification indicators.
#[derive(Debug, Clone)]
pub struct SmoothingState {
    /// One score in [0, 1] per client.
    pub scores: Vec<f64>,
    /// Weight on the previous score.
    pub beta: f64,
}

impl SmoothingState {
    pub fn new(num_clients: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!(
                "smoothing beta must be in [0, 1), got {beta}"
            )));
        }
        Ok(Self { scores: vec![0.0; num_clients], beta })
    }
}

/// Applies temporal smoothing to an instantaneous partition.
///
/// Every score moves by `score ← beta·score + (1 − beta)·flagged`, and the
/// effective noisy set is exactly the clients with `score ≥ 0.5`. Clients
/// below the threshold keep their instantaneous common/rare assignment; a
/// client flagged this round but still below the threshold is treated as
/// rare until the flag persists.
pub fn smooth_identification(
    state: &mut SmoothingState,
    partition: &ClientPartition,
) -> Result<ClientPartition> {
    let k = partition.num_clients();
    if state.scores.len() != k {
        return Err(Error::InvalidArgument(format!(
            "smoothing state tracks {} clients but the partition has {k}",
            state.scores.len()
        )));
    }
    let instant = partition.labels();
    let mut labels = Vec::with_capacity(k);
    for client in 0..k {
        let flagged = instant[client] == SetLabel::Noisy;
        let score = &mut state.scores[client];
        *score = state.beta * *score + (1.0 - state.beta) * if flagged { 1.0 } else { 0.0 };
        let label = if *score >= ID_THRESHOLD {
            SetLabel::Noisy
        } else if flagged {
            SetLabel::Rare
        } else {
            instant[client]
        };
        labels.push(label);
    }
    Ok(ClientPartition::from_labels(&labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DistributionTag, ClientDataset};
    use crate::matrix::DenseMatrix;
    use crate::nn::MlpParams;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    /// Hand-built clustering result: two singleton clusters at (0,0), (2,0).
    fn two_singletons() -> KMeansResult {
        KMeansResult {
            centroids: DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap(),
            assignments: vec![0, 1],
            counts: vec![1, 1],
            global_mean: vec![1.0, 0.0],
        }
    }

    #[test]
    fn dispersion_matches_hand_value() {
        // Each centroid is 1 away from the mean: Σ n_j·d² = 2, / (C−1) = 2.
        let s = dispersion_score(&two_singletons(), 2, false).unwrap();
        assert!((s - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalized_dispersion_matches_hand_value() {
        // Counts become 1/2 each: Σ = 1, log 1 = 0.
        let s = dispersion_score(&two_singletons(), 2, true).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn identical_features_hit_the_floor() {
        let features = DenseMatrix::from_rows(&vec![vec![3.0, 3.0]; 8]).unwrap();
        let km = kmeans(&features, 2, 5).unwrap();
        let s = dispersion_score(&km, 2, false).unwrap();
        assert!((s - DISPERSION_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn dispersion_is_rotation_invariant() {
        let km = two_singletons();
        let theta: f64 = 0.73;
        let rot = |p: &[f64]| {
            vec![
                theta.cos() * p[0] - theta.sin() * p[1],
                theta.sin() * p[0] + theta.cos() * p[1],
            ]
        };
        let rotated = KMeansResult {
            centroids: DenseMatrix::from_rows(&[
                rot(km.centroids.row(0)),
                rot(km.centroids.row(1)),
            ])
            .unwrap(),
            assignments: km.assignments.clone(),
            counts: km.counts.clone(),
            global_mean: rot(&km.global_mean),
        };
        let a = dispersion_score(&km, 2, false).unwrap();
        let b = dispersion_score(&rotated, 2, false).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    proptest! {
        /// Scaling all features by c adds exactly 2·log c (above the floor).
        #[test]
        fn scaling_features_shifts_dispersion_by_two_log_c(
            cx in -3.0f64..3.0,
            cy in 0.5f64..4.0,
            n1 in 1usize..20,
            n2 in 1usize..20,
            c in 0.5f64..2.0,
        ) {
            let centroids = vec![vec![cx, 0.0], vec![cx + cy, 1.0]];
            let total = (n1 + n2) as f64;
            let mean = vec![
                (n1 as f64 * centroids[0][0] + n2 as f64 * centroids[1][0]) / total,
                (n1 as f64 * centroids[0][1] + n2 as f64 * centroids[1][1]) / total,
            ];
            let km = KMeansResult {
                centroids: DenseMatrix::from_rows(&centroids).unwrap(),
                assignments: vec![],
                counts: vec![n1, n2],
                global_mean: mean.clone(),
            };
            let scaled = KMeansResult {
                centroids: DenseMatrix::from_rows(&[
                    centroids[0].iter().map(|v| v * c).collect(),
                    centroids[1].iter().map(|v| v * c).collect(),
                ]).unwrap(),
                assignments: vec![],
                counts: vec![n1, n2],
                global_mean: mean.iter().map(|v| v * c).collect(),
            };
            let base = dispersion_score(&km, 2, false).unwrap();
            // Stay clear of the floor so the shift law applies exactly.
            prop_assume!(base > (10.0 * DISPERSION_FLOOR).ln());
            let shifted = dispersion_score(&scaled, 2, false).unwrap();
            prop_assert!((shifted - base - 2.0 * c.ln()).abs() < 1e-9);
        }
    }

    fn toy_client(seed: u64, n: usize) -> ClientDataset {
        let mut rng = rng_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let features = DenseMatrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        ClientDataset {
            features,
            observed_labels: labels.clone(),
            true_labels: labels,
            tag: DistributionTag::Common,
            truly_mislabeled: false,
        }
    }

    #[test]
    fn client_vector_is_finite_and_deterministic() {
        let mut rng = rng_from_seed(2);
        let params = MlpParams::init(4, 8, 3, &mut rng).unwrap();
        let client = toy_client(5, 30);
        let a = client_vector(&params, &client, 3, false, 77).unwrap();
        let b = client_vector(&params, &client, 3, false, 77).unwrap();
        assert!(a.loss.is_finite() && a.dispersion.is_finite());
        assert_eq!(a, b);
        // Loss equals a direct forward + cross-entropy computation.
        let trace = forward(&params, &client.features).unwrap();
        let direct = cross_entropy(&trace, &client.observed_labels).unwrap();
        assert_eq!(a.loss, direct);
    }

    #[test]
    fn client_vector_rejects_empty_clients() {
        let mut rng = rng_from_seed(3);
        let params = MlpParams::init(4, 8, 3, &mut rng).unwrap();
        let mut client = toy_client(6, 9);
        client.features = DenseMatrix::zeros(0, 4);
        client.observed_labels.clear();
        client.true_labels.clear();
        assert!(client_vector(&params, &client, 3, false, 0).is_err());
    }

    /// Gmm3 with identity scaling so original and standardized means agree.
    /// Means are given as (loss, dispersion).
    fn gmm_with_means(means: [[f64; 2]; 3], resp: Vec<[f64; 3]>) -> Gmm3 {
        Gmm3 {
            mixing_weights: [1.0 / 3.0; 3],
            means,
            covariances: [[[1.0, 0.0], [0.0, 1.0]]; 3],
            means_original: means,
            log_likelihood: 0.0,
            log_likelihood_trace: vec![0.0],
            responsibilities: resp,
            axis_scaling: [(0.0, 1.0); 2],
        }
    }

    #[test]
    fn noisy_component_sits_above_the_line() {
        // (x=dispersion, y=loss): A=(1.0,0.2), B=(3.0,0.6), C=(2.2,1.4).
        // Stored as (loss, dispersion).
        let gmm = gmm_with_means(
            [[0.2, 1.0], [0.6, 3.0], [1.4, 2.2]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&gmm), Some(2));
    }

    #[test]
    fn collinear_candidate_is_not_selected() {
        // All three means on one rising line: the loss maximum (1.1, at
        // dispersion 2.0) clears the loss-gap and both dispersion checks,
        // but its offset is exactly 0, not strictly positive → none.
        let gmm = gmm_with_means(
            [[0.1, 1.0], [0.6, 1.5], [1.1, 2.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&gmm), None);
    }

    #[test]
    fn only_the_loss_maximum_can_qualify() {
        // (x=dispersion, y=loss): A=(1.0,1.0), B=(2.3,1.2), C=(2.0,0.2).
        // A and B are both above their counterpart lines (offsets ≈ 1.188
        // and ≈ 0.968), but only B carries the strictly highest loss mean;
        // it also clears both dispersion checks (2.0 − 0.5 ≤ 2.3 ≤ 2.0 + 0.5)
        // and wins.
        let gmm = gmm_with_means(
            [[1.0, 1.0], [1.2, 2.3], [0.2, 2.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&gmm), Some(1));
    }

    #[test]
    fn no_fallback_when_the_loss_maximum_fails_the_dispersion_check() {
        // The strict loss maximum (3.0, at dispersion 0.0) sits far left of
        // the low-loss reference (dispersion 5.0) and is rejected. The
        // second-highest-loss component (2.0, dispersion 5.2) would pass
        // every geometric check, but selection never falls back to it.
        let gmm = gmm_with_means(
            [[0.2, 5.0], [3.0, 0.0], [2.0, 5.2]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&gmm), None);
    }

    #[test]
    fn upward_rightward_component_is_selected() {
        // (x=dispersion, y=loss): common (1.0, 0.2), rare (0.2, 1.0), and a
        // candidate (1.0, 1.2) with the highest loss, above the line
        // x + y = 1.2 on the high-loss side, with dispersion matching the
        // low-loss reference (1.0 ≥ 1.0 − 0.5).
        let gmm = gmm_with_means(
            [[0.2, 1.0], [1.0, 0.2], [1.2, 1.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&gmm), Some(2));
    }

    #[test]
    fn mirrored_low_dispersion_triangle_selects_nothing() {
        // Mirror of the previous triangle: the third mean drops to
        // (0.0, 0.2), below the line through the other two. The remaining
        // high-loss vertex (0.2, 1.0) is above its counterpart line, but its
        // loss excess over the pair is not more than 0.8, and it also sits
        // clearly left of the loss-tied pair's higher-dispersion reference
        // (0.2 < 1.0 − 0.5): rare-looking, not mislabeled-looking, so
        // nothing qualifies.
        let gmm = gmm_with_means(
            [[0.2, 1.0], [1.0, 0.2], [0.2, 0.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&gmm), None);
    }

    #[test]
    fn coincident_pair_requires_higher_loss_and_dispersion() {
        // Non-candidate means coincide; candidate must win on loss with no
        // dispersion deficit at all — the slack tolerance does not apply.
        let up = gmm_with_means(
            [[0.5, 1.0], [0.5, 1.0], [1.5, 1.2]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&up), Some(2));
        let slightly_left = gmm_with_means(
            [[0.5, 1.0], [0.5, 1.0], [1.5, 0.7]], // within slack, still a deficit
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&slightly_left), None);
        let far_left = gmm_with_means(
            [[0.5, 1.0], [0.5, 1.0], [1.5, 0.2]], // higher loss, lower dispersion
            vec![[1.0, 0.0, 0.0]],
        );
        assert_eq!(select_noisy_component(&far_left), None);
    }

    #[test]
    fn dispersion_slack_scales_with_the_axis_std() {
        // A candidate 0.01 below the reference dispersion. With an axis std
        // of 0.05 the slack is 0.025 and the candidate qualifies; with an
        // axis std of 0.001 the slack is 0.0005 and it does not.
        let build = |dispersion_std: f64| {
            let mut gmm = gmm_with_means(
                [[0.1, 7.01], [0.4, 7.09], [3.5, 7.00]],
                vec![[1.0, 0.0, 0.0]],
            );
            gmm.axis_scaling = [(0.0, 1.0), (7.03, dispersion_std)];
            gmm
        };
        assert_eq!(select_noisy_component(&build(0.05)), Some(2));
        assert_eq!(select_noisy_component(&build(0.001)), None);
    }

    #[test]
    fn component_out_dispersing_both_others_is_rejected() {
        // Two low-loss groups at dispersions 7.00 and 7.01, and the loss
        // maximum at 7.09 — right of both. With a tight dispersion axis
        // (std 0.02, slack 0.01) it is capacity structure and rejected;
        // with a loose axis (std 1.0) the same layout is within slack and
        // qualifies.
        let build = |dispersion_std: f64| {
            let mut gmm = gmm_with_means(
                [[0.09, 7.00], [0.11, 7.01], [1.39, 7.09]],
                vec![[1.0, 0.0, 0.0]],
            );
            gmm.axis_scaling = [(0.0, 1.0), (7.03, dispersion_std)];
            gmm
        };
        assert_eq!(select_noisy_component(&build(0.02)), None);
        assert_eq!(select_noisy_component(&build(1.0)), Some(2));
    }

    #[test]
    fn small_loss_excess_is_rejected_as_hard_data() {
        // A corrupted-but-correctly-labeled group: highest loss, but only
        // 0.594 nats above the low-loss reference — under the minimum gap,
        // so nothing qualifies. Raising the excess to 0.894 nats with the
        // same geometry qualifies it.
        let build = |loss: f64| {
            gmm_with_means(
                [[0.006, 7.5], [0.01, 7.6], [loss, 7.7]],
                vec![[1.0, 0.0, 0.0]],
            )
        };
        assert_eq!(select_noisy_component(&build(0.6)), None);
        assert_eq!(select_noisy_component(&build(0.9)), Some(2));
    }

    #[test]
    fn fully_degenerate_means_return_none() {
        let mut gmm = gmm_with_means(
            [[0.5, 1.0], [0.5, 1.0], [0.5, 1.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        // Standardized means coincide exactly.
        gmm.means = [[0.0, 0.0]; 3];
        assert_eq!(select_noisy_component(&gmm), None);
    }

    #[test]
    fn selection_is_invariant_under_component_relabeling() {
        let means = [[0.2, 1.0], [0.6, 3.0], [1.4, 2.2]];
        let base = gmm_with_means(means, vec![[1.0, 0.0, 0.0]]);
        let picked = select_noisy_component(&base).unwrap();
        // Swap components 0 and 2 everywhere.
        let perm = [2usize, 1, 0];
        let swapped = gmm_with_means(
            [means[perm[0]], means[perm[1]], means[perm[2]]],
            vec![[0.0, 0.0, 1.0]],
        );
        let picked_swapped = select_noisy_component(&swapped).unwrap();
        assert_eq!(perm[picked_swapped], picked);
    }

    #[test]
    fn assign_sets_follows_responsibilities_and_roles() {
        // Component 0: high dispersion (common); 1: low dispersion (rare);
        // 2: noisy.
        let gmm = gmm_with_means(
            [[0.3, 2.0], [1.0, 0.5], [1.4, 1.8]],
            vec![
                [0.8, 0.1, 0.1], // → common
                [0.1, 0.7, 0.2], // → rare
                [0.2, 0.2, 0.6], // → noisy
                [0.5, 0.5, 0.0], // tie → lowest index → common
            ],
        );
        let p = assign_sets(&gmm, Some(2));
        assert_eq!(p.s_common, vec![0, 3]);
        assert_eq!(p.s_rare, vec![1]);
        assert_eq!(p.s_noisy, vec![2]);
    }

    #[test]
    fn without_noisy_component_highest_loss_merges_into_rare() {
        let gmm = gmm_with_means(
            [[0.3, 2.0], [1.0, 0.5], [1.4, 1.8]],
            vec![[0.8, 0.1, 0.1], [0.1, 0.7, 0.2], [0.2, 0.2, 0.6]],
        );
        let p = assign_sets(&gmm, None);
        assert!(p.s_noisy.is_empty());
        // Component 2 (loss 1.4) joins rare; of 0 and 1, the higher-dispersion
        // component 0 is common.
        assert_eq!(p.s_common, vec![0]);
        assert_eq!(p.s_rare, vec![1, 2]);
        assert_eq!(p.num_clients(), 3);
    }

    #[test]
    fn partition_covers_all_clients_disjointly() {
        let gmm = gmm_with_means(
            [[0.3, 2.0], [1.0, 0.5], [1.4, 1.8]],
            (0..9)
                .map(|i| {
                    let mut row = [0.1, 0.1, 0.1];
                    row[i % 3] = 0.8;
                    row
                })
                .collect(),
        );
        for noisy in [None, Some(0), Some(1), Some(2)] {
            let p = assign_sets(&gmm, noisy);
            let mut all: Vec<usize> = p
                .s_common
                .iter()
                .chain(&p.s_rare)
                .chain(&p.s_noisy)
                .cloned()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..9).collect::<Vec<_>>());
        }
    }

    #[test]
    fn smoothing_crosses_threshold_after_two_flagged_rounds() {
        let mut state = SmoothingState::new(1, DEFAULT_ID_SMOOTHING_BETA).unwrap();
        let flagged = ClientPartition::from_labels(&[SetLabel::Noisy]);

        let round1 = smooth_identification(&mut state, &flagged).unwrap();
        assert!((state.scores[0] - 0.3).abs() < 1e-12);
        // Below threshold: the freshly flagged client is parked in rare.
        assert_eq!(round1.labels(), vec![SetLabel::Rare]);

        let round2 = smooth_identification(&mut state, &flagged).unwrap();
        assert!((state.scores[0] - 0.51).abs() < 1e-12);
        assert_eq!(round2.labels(), vec![SetLabel::Noisy]);
    }

    #[test]
    fn smoothing_releases_clients_when_flags_stop() {
        let mut state = SmoothingState::new(1, DEFAULT_ID_SMOOTHING_BETA).unwrap();
        state.scores[0] = 0.51;
        let calm = ClientPartition::from_labels(&[SetLabel::Common]);
        let out = smooth_identification(&mut state, &calm).unwrap();
        // 0.7·0.51 = 0.357 < 0.5 → back to the instantaneous label.
        assert_eq!(out.labels(), vec![SetLabel::Common]);
        assert!((state.scores[0] - 0.357).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_unflagged_assignments() {
        let mut state = SmoothingState::new(3, DEFAULT_ID_SMOOTHING_BETA).unwrap();
        state.scores = vec![0.9, 0.0, 0.0];
        let instant = ClientPartition::from_labels(&[
            SetLabel::Common, // score stays high → effectively noisy
            SetLabel::Rare,
            SetLabel::Common,
        ]);
        let out = smooth_identification(&mut state, &instant).unwrap();
        assert_eq!(
            out.labels(),
            vec![SetLabel::Noisy, SetLabel::Rare, SetLabel::Common]
        );
    }

    #[test]
    fn smoothing_scores_stay_in_unit_interval() {
        let mut state = SmoothingState::new(2, 0.7).unwrap();
        let partitions = [
            ClientPartition::from_labels(&[SetLabel::Noisy, SetLabel::Common]),
            ClientPartition::from_labels(&[SetLabel::Noisy, SetLabel::Noisy]),
            ClientPartition::from_labels(&[SetLabel::Common, SetLabel::Noisy]),
        ];
        for p in &partitions {
            smooth_identification(&mut state, p).unwrap();
            assert!(state.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn scripted_groups_are_identified_with_high_precision_and_recall() {
        // Full identification stack on scripted per-round points: 12 common
        // clients near (loss 0.1, dispersion 7.0), 4 rare near (0.4, 7.1),
        // 4 mislabeled near (3.5, 7.0) — the mislabeled group offset upward
        // at common-level dispersion. Effective-noisy precision and recall
        // against the scripted membership, averaged over rounds and then
        // over 5 seeds, must both reach 0.9.
        use crate::cluster::fit_gmm3;
        use crate::rng::rng_from_seed;
        use rand::Rng;

        let rounds = 20;
        let mislabeled: Vec<usize> = (12..16).collect();
        let mut precisions = Vec::new();
        let mut recalls = Vec::new();
        for seed in 1..=5u64 {
            let mut rng = rng_from_seed(9000 + seed);
            let mut state = SmoothingState::new(20, DEFAULT_ID_SMOOTHING_BETA).unwrap();
            let (mut p_sum, mut r_sum) = (0.0, 0.0);
            for round in 0..rounds {
                let mut points = Vec::new();
                for client in 0..20 {
                    let (loss, dispersion) = match client {
                        0..=11 => (0.1, 7.0),
                        16..=19 => (0.4, 7.1),
                        _ => (3.5, 7.0),
                    };
                    points.push([
                        loss * (1.0 + 0.2 * rng.random_range(-1.0..1.0)),
                        dispersion + 0.03 * rng.random_range(-1.0..1.0),
                    ]);
                }
                let gmm = fit_gmm3(&points, seed * 1000 + round).unwrap();
                let noisy = select_noisy_component(&gmm);
                let instant = assign_sets(&gmm, noisy);
                let effective = smooth_identification(&mut state, &instant).unwrap();
                let flagged = &effective.s_noisy;
                let true_pos = flagged.iter().filter(|c| mislabeled.contains(c)).count();
                p_sum += if flagged.is_empty() {
                    1.0
                } else {
                    true_pos as f64 / flagged.len() as f64
                };
                r_sum += true_pos as f64 / mislabeled.len() as f64;
            }
            precisions.push(p_sum / rounds as f64);
            recalls.push(r_sum / rounds as f64);
        }
        let precision = precisions.iter().sum::<f64>() / 5.0;
        let recall = recalls.iter().sum::<f64>() / 5.0;
        assert!(precision >= 0.9, "precision {precision} under 0.9");
        assert!(recall >= 0.9, "recall {recall} under 0.9");
    }
}
