//! Unsupervised fitting: k-means and a three-component 2-D Gaussian mixture.
//!
//! Both fitters are fully deterministic given their seed. Ties always break
//! to the lowest index so results are independent of iteration order.
//!
//! k-means uses k-means++ seeding and Lloyd iterations. An empty cluster is
//! repaired by stealing the point farthest from that cluster's centroid
//! (among points whose current cluster keeps at least one other member), so
//! every returned cluster is nonempty even on degenerate inputs.
//!
//! The mixture is fit by EM on axis-standardized points: means initialized
//! from k-means, covariances from the data covariance, uniform mixing
//! weights. Every M-step adds a small diagonal regularizer so covariances
//! stay positive definite; the per-iteration log-likelihood trace is kept so
//! callers can audit EM's monotonicity.

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, DenseMatrix};
use crate::rng::{rng_from_seed, stream};
use rand::Rng;

/// Lloyd iterations stop when no centroid moves more than this.
pub const KMEANS_TOL: f64 = 1e-6;
/// Upper bound on Lloyd iterations.
pub const KMEANS_MAX_ITERS: usize = 100;
/// EM stops when the log-likelihood improves by less than this.
pub const GMM_TOL: f64 = 1e-8;
/// Upper bound on EM iterations.
pub const GMM_MAX_ITERS: usize = 200;
/// Diagonal regularizer added to every covariance update.
pub const GMM_COV_REG: f64 = 1e-6;

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster centers, `k × dim`; centroid `j` is the exact mean of its
    /// members.
    pub centroids: DenseMatrix,
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    /// Members per cluster; sums to the sample count and every entry is > 0.
    pub counts: Vec<usize>,
    /// Mean of all input rows.
    pub global_mean: Vec<f64>,
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(features: &DenseMatrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.rows();
    let dim = features.cols();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} samples cannot fill {k} clusters"
        )));
    }

    let mut rng = rng_from_seed(seed);
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut counts = vec![0usize; k];

    for _ in 0..KMEANS_MAX_ITERS {
        assign(features, &centroids, &mut assignments, &mut counts);
        repair_empty_clusters(features, &centroids, &mut assignments, &mut counts);

        let new_centroids = cluster_means(features, &assignments, &counts, k, dim);
        let shift = (0..k)
            .map(|j| squared_distance(new_centroids.row(j), centroids.row(j)).sqrt())
            .fold(0.0f64, f64::max);
        centroids = new_centroids;
        if shift < KMEANS_TOL {
            break;
        }
    }

    let mut global_mean = vec![0.0; dim];
    for i in 0..n {
        for (g, v) in global_mean.iter_mut().zip(features.row(i)) {
            *g += v;
        }
    }
    for g in &mut global_mean {
        *g /= n as f64;
    }

    Ok(KMeansResult { centroids, assignments, counts, global_mean })
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center. If every remaining point
/// coincides with a chosen center, fall back to the lowest unused row.
fn plus_plus_init<R: Rng>(features: &DenseMatrix, k: usize, rng: &mut R) -> DenseMatrix {
    let n = features.rows();
    let mut chosen: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), features.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // Degenerate: all mass at chosen centers. Take the lowest row not
            // already chosen; duplicates are repaired during Lloyd iterations.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..n {
            let d = squared_distance(features.row(i), features.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| features.row(i).to_vec()).collect();
    DenseMatrix::from_rows(&rows).expect("centroid rows share the feature width")
}

fn assign(
    features: &DenseMatrix,
    centroids: &DenseMatrix,
    assignments: &mut [usize],
    counts: &mut [usize],
) {
    counts.fill(0);
    for i in 0..features.rows() {
        let row = features.row(i);
        let mut best = 0usize;
        let mut best_d = squared_distance(row, centroids.row(0));
        for j in 1..centroids.rows() {
            let d = squared_distance(row, centroids.row(j));
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        assignments[i] = best;
        counts[best] += 1;
    }
}

/// Moves the point farthest from an empty cluster's centroid into it. Only
/// points whose cluster keeps another member are candidates, so the repair
/// never creates a new empty cluster. Such a candidate always exists: if an
/// empty cluster exists, the points outnumber the nonempty clusters.
fn repair_empty_clusters(
    features: &DenseMatrix,
    centroids: &DenseMatrix,
    assignments: &mut [usize],
    counts: &mut [usize],
) {
    for j in 0..counts.len() {
        if counts[j] > 0 {
            continue;
        }
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..features.rows() {
            if counts[assignments[i]] < 2 {
                continue;
            }
            let d = squared_distance(features.row(i), centroids.row(j));
            let better = match pick {
                None => true,
                Some((_, best)) => d > best,
            };
            if better {
                pick = Some((i, d));
            }
        }
        let (i, _) = pick.expect("a donor cluster with >= 2 members exists");
        counts[assignments[i]] -= 1;
        assignments[i] = j;
        counts[j] += 1;
    }
}

fn cluster_means(
    features: &DenseMatrix,
    assignments: &[usize],
    counts: &[usize],
    k: usize,
    dim: usize,
) -> DenseMatrix {
    let mut sums = DenseMatrix::zeros(k, dim);
    for (i, &j) in assignments.iter().enumerate() {
        let row = features.row(i);
        let acc = sums.row_mut(j);
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    for j in 0..k {
        let c = counts[j] as f64;
        for v in sums.row_mut(j) {
            *v /= c;
        }
    }
    sums
}

/// Three-component full-covariance Gaussian mixture over 2-D points.
///
/// The model is fit in axis-standardized coordinates; `means` and
/// `covariances` live in that fit space, while `means_original` maps the
/// component means back to the caller's units for interpretation.
#[derive(Debug, Clone)]
pub struct Gmm3 {
    /// Mixing proportions; a simplex within 1e-9.
    pub mixing_weights: [f64; 3],
    /// Component means in standardized fit space.
    pub means: [[f64; 2]; 3],
    /// Symmetric positive-definite covariances in fit space, each entry
    /// `[[xx, xy], [xy, yy]]` with eigenvalues at least [`GMM_COV_REG`].
    pub covariances: [[[f64; 2]; 2]; 3],
    /// Component means mapped back to the input units.
    pub means_original: [[f64; 2]; 3],
    /// Final log-likelihood of the fit (last entry of the trace).
    pub log_likelihood: f64,
    /// Per-iteration log-likelihood values; non-decreasing.
    pub log_likelihood_trace: Vec<f64>,
    /// Per-point component responsibilities; each row is a simplex.
    pub responsibilities: Vec<[f64; 3]>,
    /// Per-axis (mean, std) used for standardization.
    pub axis_scaling: [(f64, f64); 2],
}

impl Gmm3 {
    /// Standardizes a point with the scaling used during the fit.
    pub fn standardize(&self, point: [f64; 2]) -> [f64; 2] {
        [
            (point[0] - self.axis_scaling[0].0) / self.axis_scaling[0].1,
            (point[1] - self.axis_scaling[1].0) / self.axis_scaling[1].1,
        ]
    }
}

/// Fits the three-component mixture to `points` (rows of `(x, y)` pairs).
///
/// Requires at least three points. Initialization: k-means centroids for the
/// means, the standardized data covariance for every component, uniform
/// mixing weights. EM runs until the log-likelihood improves by less than
/// [`GMM_TOL`] or [`GMM_MAX_ITERS`] iterations; an iteration that fails to
/// improve is rolled back, so the recorded trace is non-decreasing.
pub fn fit_gmm3(points: &[[f64; 2]], seed: u64) -> Result<Gmm3> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "gmm needs at least 3 points, got {n}"
        )));
    }
    if let Some(p) = points.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::NonFinite(format!("gmm input point ({}, {})", p[0], p[1])));
    }

    // Standardize each axis; a constant axis keeps scale 1 so the transform
    // stays well-defined.
    let mut scaling = [(0.0f64, 1.0f64); 2];
    for axis in 0..2 {
        let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        scaling[axis] = (mean, if std > 1e-12 { std } else { 1.0 });
    }
    let std_points: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            [
                (p[0] - scaling[0].0) / scaling[0].1,
                (p[1] - scaling[1].0) / scaling[1].1,
            ]
        })
        .collect();

    // Init from k-means on the standardized points.
    let feature_rows: Vec<Vec<f64>> = std_points.iter().map(|p| p.to_vec()).collect();
    let features = DenseMatrix::from_rows(&feature_rows)?;
    let km = kmeans(&features, 3, crate::rng::derive_seed(seed, &[stream::GMM]))?;
    let mut means = [[0.0; 2]; 3];
    for j in 0..3 {
        means[j] = [km.centroids.get(j, 0), km.centroids.get(j, 1)];
    }
    let data_cov = covariance_2d(&std_points);
    let mut covariances = [add_reg(data_cov); 3];
    let mut weights = [1.0 / 3.0; 3];

    let mut trace = Vec::new();
    let (mut resp, mut ll) = e_step(&std_points, &weights, &means, &covariances);
    trace.push(ll);
    for _ in 0..GMM_MAX_ITERS {
        let snapshot = (weights, means, covariances);
        m_step(&std_points, &resp, &mut weights, &mut means, &mut covariances);
        let (next_resp, next_ll) = e_step(&std_points, &weights, &means, &covariances);
        // The covariance floor makes the M-step a constrained update, so an
        // iteration can fail to improve the likelihood; roll it back and
        // keep the better previous state rather than record a decrease.
        if next_ll < ll {
            (weights, means, covariances) = snapshot;
            break;
        }
        trace.push(next_ll);
        let delta = next_ll - ll;
        resp = next_resp;
        ll = next_ll;
        if delta < GMM_TOL {
            break;
        }
    }

    let means_original = [
        unstandardize(means[0], &scaling),
        unstandardize(means[1], &scaling),
        unstandardize(means[2], &scaling),
    ];

    Ok(Gmm3 {
        mixing_weights: weights,
        means,
        covariances,
        means_original,
        log_likelihood: ll,
        log_likelihood_trace: trace,
        responsibilities: resp,
        axis_scaling: scaling,
    })
}

fn unstandardize(p: [f64; 2], scaling: &[(f64, f64); 2]) -> [f64; 2] {
    [p[0] * scaling[0].1 + scaling[0].0, p[1] * scaling[1].1 + scaling[1].0]
}

fn covariance_2d(points: &[[f64; 2]]) -> [[f64; 2]; 2] {
    let n = points.len() as f64;
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / n,
        points.iter().map(|p| p[1]).sum::<f64>() / n,
    ];
    let mut xx = 0.0;
    let mut xy = 0.0;
    let mut yy = 0.0;
    for p in points {
        let dx = p[0] - mean[0];
        let dy = p[1] - mean[1];
        xx += dx * dx;
        xy += dx * dy;
        yy += dy * dy;
    }
    [[xx / n, xy / n], [xy / n, yy / n]]
}

fn add_reg(mut cov: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    cov[0][0] += GMM_COV_REG;
    cov[1][1] += GMM_COV_REG;
    cov
}

/// Log-density of a 2-D Gaussian with explicit 2×2 inverse and determinant.
fn log_gaussian_2d(p: [f64; 2], mean: [f64; 2], cov: &[[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let dx = p[0] - mean[0];
    let dy = p[1] - mean[1];
    let quad =
        (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad
}

fn e_step(
    points: &[[f64; 2]],
    weights: &[f64; 3],
    means: &[[f64; 2]; 3],
    covariances: &[[[f64; 2]; 2]; 3],
) -> (Vec<[f64; 3]>, f64) {
    let mut resp = Vec::with_capacity(points.len());
    let mut ll = 0.0;
    for &p in points {
        let mut logs = [0.0f64; 3];
        for j in 0..3 {
            logs[j] = weights[j].ln() + log_gaussian_2d(p, means[j], &covariances[j]);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut row = [0.0f64; 3];
        for j in 0..3 {
            row[j] = (logs[j] - max).exp();
            sum += row[j];
        }
        for v in &mut row {
            *v /= sum;
        }
        resp.push(row);
        ll += max + sum.ln();
    }
    (resp, ll)
}

fn m_step(
    points: &[[f64; 2]],
    resp: &[[f64; 3]],
    weights: &mut [f64; 3],
    means: &mut [[f64; 2]; 3],
    covariances: &mut [[[f64; 2]; 2]; 3],
) {
    let n = points.len() as f64;
    for j in 0..3 {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        weights[j] = nk / n;
        let mut mx = 0.0;
        let mut my = 0.0;
        for (p, r) in points.iter().zip(resp) {
            mx += r[j] * p[0];
            my += r[j] * p[1];
        }
        means[j] = [mx / nk, my / nk];
        let mut xx = 0.0;
        let mut xy = 0.0;
        let mut yy = 0.0;
        for (p, r) in points.iter().zip(resp) {
            let dx = p[0] - means[j][0];
            let dy = p[1] - means[j][1];
            xx += r[j] * dx * dx;
            xy += r[j] * dx * dy;
            yy += r[j] * dy * dy;
        }
        covariances[j] = add_reg([[xx / nk, xy / nk], [xy / nk, yy / nk]]);
    }
    // Guard the simplex against accumulated rounding.
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
}
