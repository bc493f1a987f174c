//! Measurement clustering by Gramian-factor similarity.
//!
//! Each output `y_i = c_i x` gets a coefficient row `φ_i = c_i Ū W̄_L` whose
//! norm is the stable-part energy of that output for unit disturbances. Two
//! outputs whose rows are (anti-)parallel carry the same information up to a
//! scalar, so one can stand in for the other. Complete-linkage agglomeration
//! on the direction distance groups the outputs; each group `I_k` gets unit
//! similarity coefficients `p_{I_k}` (leading left singular vector of
//! `Φ_{I_k}`), from which surrogate measurements are formed.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lti::GramianSide;
use crate::lti::{psd_factor, semistable_gramian, LtiError, LtiSystem, SubspaceDecomposition};
use crate::par::map_indexed;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("requested {requested} clusters but only {available} outputs")]
    TooManyClusters { requested: usize, available: usize },
    #[error("cluster {0} contains attacked outputs but no trusted member")]
    UncoveredCluster(usize),
    #[error("every measurement is attacked; no trusted rows remain")]
    AllMeasurementsAttacked,
    #[error("no outputs to cluster")]
    Empty,
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Relative magnitude below which a Φ row counts as invisible on the stable
/// subspace.
const ZERO_ROW_RTOL: f64 = 1e-12;

/// Coefficient matrix `Φ = C Ū W̄_L` (one row per output).
#[derive(Debug, Clone)]
pub struct SimilarityFactor {
    pub phi: DMatrix<f64>,
    /// Row norms `‖φ_i‖` — the stable-part output energies.
    pub magnitudes: Vec<f64>,
    /// Unit rows; zero rows stay zero.
    pub directions: DMatrix<f64>,
}

impl SimilarityFactor {
    pub fn m(&self) -> usize {
        self.phi.nrows()
    }

    /// Outputs whose Φ row is numerically zero (invisible on the stable
    /// subspace); they form a dedicated cluster excluded from surrogacy.
    pub fn zero_rows(&self) -> Vec<usize> {
        let max = self.magnitudes.iter().cloned().fold(0.0f64, f64::max);
        (0..self.m())
            .filter(|&i| self.magnitudes[i] <= ZERO_ROW_RTOL * max)
            .collect()
    }
}

/// Build `Φ` from the stable-subspace controllability Gramian of `sys` with
/// unit disturbances on every state.
pub fn compute_phi(sys: &LtiSystem, dec: &SubspaceDecomposition) -> Result<SimilarityFactor> {
    let g = semistable_gramian(sys, GramianSide::Controllability, dec)?;
    let wl = psd_factor(&g.w_bar)?;
    let phi = sys.c() * &dec.u_bar * wl;
    Ok(similarity_from_phi(phi))
}

fn similarity_from_phi(phi: DMatrix<f64>) -> SimilarityFactor {
    let m = phi.nrows();
    let magnitudes: Vec<f64> = (0..m).map(|i| phi.row(i).norm()).collect();
    let mut directions = phi.clone();
    for i in 0..m {
        if magnitudes[i] > 0.0 {
            let scaled = phi.row(i) / magnitudes[i];
            directions.set_row(i, &scaled);
        }
    }
    SimilarityFactor {
        phi,
        magnitudes,
        directions,
    }
}

/// Direction distance between outputs `i` and `j`:
/// `min(‖φ̂_i - φ̂_j‖, ‖φ̂_i + φ̂_j‖)` on the normalized rows. Zero when the
/// rows are parallel or anti-parallel; at most `√2`.
pub fn dissimilarity(factor: &SimilarityFactor, i: usize, j: usize) -> f64 {
    let a = factor.directions.row(i);
    let b = factor.directions.row(j);
    let d_minus = (a - b).norm();
    let d_plus = (a + b).norm();
    d_minus.min(d_plus)
}

/// Full `m x m` dissimilarity matrix (parallel over rows).
pub fn dissimilarity_matrix(factor: &SimilarityFactor) -> DMatrix<f64> {
    let m = factor.m();
    let rows = map_indexed(m, |i| {
        let mut row = vec![0.0f64; m];
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = dissimilarity(factor, i, j);
            }
        }
        row
    });
    DMatrix::from_fn(m, m, |i, j| rows[i][j])
}

/// A grouping of the `m` outputs into `k` disjoint clusters.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    /// Member output indices per cluster, each ascending; clusters ordered by
    /// their smallest member.
    pub members: Vec<Vec<usize>>,
    /// `assignment[i]` = cluster of output `i`.
    pub assignment: Vec<usize>,
    /// Threshold the clustering was cut at.
    pub theta: f64,
    /// Outputs invisible on the stable subspace (ascending); they sit in one
    /// dedicated cluster and never act as surrogates.
    pub zero_outputs: Vec<usize>,
}

impl ClusterSet {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn m(&self) -> usize {
        self.assignment.len()
    }

    /// Clusters that contain no trusted output (by cluster index). The
    /// zero-row cluster is never reported: it takes no surrogates. Uncovered
    /// clusters are diagnostics for the caller, who may raise `theta`.
    pub fn uncovered_clusters(&self, trusted: &[usize]) -> Vec<usize> {
        let zero_cluster = self.zero_outputs.first().map(|&i| self.assignment[i]);
        (0..self.k())
            .filter(|&k| {
                Some(k) != zero_cluster
                    && !self.members[k].iter().any(|i| trusted.contains(i))
            })
            .collect()
    }

    /// Largest pairwise dissimilarity inside each cluster (the complete-
    /// linkage certificate; all entries are `<= theta` by construction).
    pub fn max_intra_dissimilarity(&self, factor: &SimilarityFactor) -> Vec<f64> {
        self.members
            .iter()
            .map(|c| {
                let mut worst = 0.0f64;
                for (a, &i) in c.iter().enumerate() {
                    for &j in &c[a + 1..] {
                        worst = worst.max(dissimilarity(factor, i, j));
                    }
                }
                worst
            })
            .collect()
    }
}

/// Merge heights of the complete-linkage dendrogram on the visible outputs,
/// ascending. Cutting at `theta` keeps exactly the merges with height
/// `<= theta`.
pub fn merge_heights(factor: &SimilarityFactor) -> Vec<f64> {
    let (visible, _) = split_visible(factor);
    let d = sub_dissimilarity(factor, &visible);
    let mut heights = agglomerate(&d, f64::INFINITY, 1).1;
    heights.sort_by(|a, b| a.partial_cmp(b).unwrap());
    heights
}

fn split_visible(factor: &SimilarityFactor) -> (Vec<usize>, Vec<usize>) {
    let zeros = factor.zero_rows();
    let visible = (0..factor.m()).filter(|i| !zeros.contains(i)).collect();
    (visible, zeros)
}

fn sub_dissimilarity(factor: &SimilarityFactor, idx: &[usize]) -> DMatrix<f64> {
    let s = idx.len();
    let rows = map_indexed(s, |a| {
        let mut row = vec![0.0f64; s];
        for (b, slot) in row.iter_mut().enumerate() {
            if b != a {
                *slot = dissimilarity(factor, idx[a], idx[b]);
            }
        }
        row
    });
    DMatrix::from_fn(s, s, |a, b| rows[a][b])
}

/// Complete-linkage agglomeration on a dissimilarity matrix. Stops when the
/// cheapest merge exceeds `theta` or the cluster count reaches `k_stop`.
/// Ties go to the pair with the lowest indices. Returns the clusters (over
/// local indices `0..d.nrows()`) and the merge heights actually taken.
fn agglomerate(d: &DMatrix<f64>, theta: f64, k_stop: usize) -> (Vec<Vec<usize>>, Vec<f64>) {
    let m = d.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    // inter-cluster distance (complete linkage = max pairwise)
    let mut dist = d.clone();
    let mut alive: Vec<bool> = vec![true; m];
    let mut n_alive = m;
    let mut heights = Vec::new();

    while n_alive > k_stop.max(1) {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..m {
            if !alive[i] {
                continue;
            }
            for j in (i + 1)..m {
                if !alive[j] {
                    continue;
                }
                if dist[(i, j)] < best.0 {
                    best = (dist[(i, j)], i, j);
                }
            }
        }
        let (h, i, j) = best;
        if h > theta {
            break;
        }
        heights.push(h);
        // merge j into i (Lance-Williams, complete linkage: new = max)
        for l in 0..m {
            if alive[l] && l != i && l != j {
                let nd = dist[(i, l)].max(dist[(j, l)]);
                dist[(i, l)] = nd;
                dist[(l, i)] = nd;
            }
        }
        let moved = std::mem::take(&mut clusters[j]);
        clusters[i].extend(moved);
        alive[j] = false;
        n_alive -= 1;
    }

    let mut out: Vec<Vec<usize>> = clusters
        .into_iter()
        .zip(alive)
        .filter_map(|(c, a)| a.then_some(c))
        .collect();
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort_by_key(|c| c[0]);
    (out, heights)
}

fn finish_clusters(
    m: usize,
    mut members: Vec<Vec<usize>>,
    zero_outputs: Vec<usize>,
    theta: f64,
) -> ClusterSet {
    if !zero_outputs.is_empty() {
        members.push(zero_outputs.clone());
        members.sort_by_key(|c| c[0]);
    }
    let mut assignment = vec![0usize; m];
    for (k, c) in members.iter().enumerate() {
        for &i in c {
            assignment[i] = k;
        }
    }
    ClusterSet {
        members,
        assignment,
        theta,
        zero_outputs,
    }
}

/// Cluster outputs whose directions agree within `theta`.
pub fn form_clusters(factor: &SimilarityFactor, theta: f64) -> Result<ClusterSet> {
    if factor.m() == 0 {
        return Err(ClusterError::Empty);
    }
    let (visible, zeros) = split_visible(factor);
    let d = sub_dissimilarity(factor, &visible);
    let (local, _) = agglomerate(&d, theta, 1);
    let members = local
        .into_iter()
        .map(|c| c.into_iter().map(|a| visible[a]).collect())
        .collect();
    Ok(finish_clusters(factor.m(), members, zeros, theta))
}

/// Cluster into exactly `k` groups (cut the dendrogram at `k` clusters; the
/// dedicated zero-row cluster, when present, counts toward `k`).
pub fn form_clusters_target_k(factor: &SimilarityFactor, k: usize) -> Result<ClusterSet> {
    let m = factor.m();
    if m == 0 {
        return Err(ClusterError::Empty);
    }
    let (visible, zeros) = split_visible(factor);
    let extra = usize::from(!zeros.is_empty());
    if k <= extra || k > visible.len() + extra {
        return Err(ClusterError::TooManyClusters {
            requested: k,
            available: m,
        });
    }
    let d = sub_dissimilarity(factor, &visible);
    let (local, heights) = agglomerate(&d, f64::INFINITY, k - extra);
    let theta = heights.last().copied().unwrap_or(0.0);
    let members = local
        .into_iter()
        .map(|c| c.into_iter().map(|a| visible[a]).collect())
        .collect();
    Ok(finish_clusters(m, members, zeros, theta))
}

/// Smallest threshold (on the grid of dendrogram merge heights) at which
/// every cluster contains at least one trusted output. Always feasible:
/// at the top of the dendrogram everything shares one cluster.
pub fn min_theta_for_coverage(factor: &SimilarityFactor, trusted: &[usize]) -> Result<f64> {
    let m = factor.m();
    if m == 0 {
        return Err(ClusterError::Empty);
    }
    if trusted.is_empty() {
        return Err(ClusterError::AllMeasurementsAttacked);
    }
    let mut candidates = vec![0.0f64];
    candidates.extend(merge_heights(factor));
    for theta in candidates {
        let cs = form_clusters(factor, theta)?;
        if cs.uncovered_clusters(trusted).is_empty() {
            return Ok(theta);
        }
    }
    unreachable!("one global cluster always contains a trusted output");
}

/// Smallest threshold at which the clustering has at most `k_max` clusters
/// (the dendrogram cut used by the K-sweep).
pub fn theta_for_cluster_count(factor: &SimilarityFactor, k_max: usize) -> Result<f64> {
    let m = factor.m();
    if m == 0 {
        return Err(ClusterError::Empty);
    }
    let (visible, zeros) = split_visible(factor);
    let extra = usize::from(!zeros.is_empty());
    if k_max <= extra {
        return Err(ClusterError::TooManyClusters {
            requested: k_max,
            available: m,
        });
    }
    let k_vis = k_max - extra;
    if k_vis >= visible.len() {
        return Ok(0.0);
    }
    let heights = merge_heights(factor);
    Ok(heights[visible.len() - k_vis - 1])
}

/// Unit similarity coefficients per cluster: `p_{I_k}` is the leading left
/// singular vector of `Φ_{I_k}` (sign fixed so the first nonzero entry is
/// positive). Returned as a length-`m` vector in output order. The zero-row
/// cluster gets `e_1` so `Π` keeps unit rows.
pub fn cluster_coefficients(factor: &SimilarityFactor, clusters: &ClusterSet) -> DVector<f64> {
    let m = factor.m();
    let cols = factor.phi.ncols();
    let per_cluster: Vec<Vec<f64>> = map_indexed(clusters.k(), |k| {
        let idx = &clusters.members[k];
        if idx.len() == 1 {
            return vec![1.0];
        }
        if !clusters.zero_outputs.is_empty() && idx[0] == clusters.zero_outputs[0] {
            let mut p = vec![0.0; idx.len()];
            p[0] = 1.0;
            return p;
        }
        let mut block = DMatrix::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            block.set_row(r, &factor.phi.row(i));
        }
        let svd = block.svd(true, false);
        let u = svd.u.as_ref().expect("svd with u");
        let mut p: Vec<f64> = (0..idx.len()).map(|r| u[(r, 0)]).collect();
        if let Some(first) = p.iter().find(|v| v.abs() > 0.0) {
            if *first < 0.0 {
                for v in &mut p {
                    *v = -*v;
                }
            }
        }
        p
    });
    let mut out = DVector::zeros(m);
    for (k, idx) in clusters.members.iter().enumerate() {
        for (r, &i) in idx.iter().enumerate() {
            out[i] = per_cluster[k][r];
        }
    }
    out
}

/// Row-orthonormal `K x m` aggregation matrix `Π` with `Π[k, i] = p_i` for
/// `i ∈ I_k` (each row is a unit vector since `‖p_{I_k}‖ = 1`).
pub fn build_pi(clusters: &ClusterSet, p: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = clusters.m();
    if p.len() != m {
        return Err(ClusterError::DimensionMismatch(format!(
            "p has {} entries for {} outputs",
            p.len(),
            m
        )));
    }
    let mut pi = DMatrix::zeros(clusters.k(), m);
    for (k, idx) in clusters.members.iter().enumerate() {
        for &i in idx {
            pi[(k, i)] = p[i];
        }
    }
    Ok(pi)
}

/// Project every output onto its cluster's coefficient direction:
/// `ȳ = Πᵀ Π y`. Lossless for exactly proportional cluster members.
pub fn project_outputs(pi: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if pi.ncols() != y.len() {
        return Err(ClusterError::DimensionMismatch(format!(
            "Pi has {} columns but y has {} entries",
            pi.ncols(),
            y.len()
        )));
    }
    Ok(pi.transpose() * (pi * y))
}

/// Runtime surrogates for attacked outputs from trusted data only.
///
/// For attacked output `i` in cluster `k` with trusted members `T_k`:
/// `z_k = Σ_{j∈T_k} p_j ỹ_j / Σ_{j∈T_k} p_j²` and `ȳ_i = p_i z_k`. This is
/// the least-squares estimate of the cluster variable from the trusted
/// members; with all members exactly proportional (`y_j = p_j z`) it equals
/// the true `y_i`. `y_trusted` is ordered by ascending trusted index.
/// Outputs in the zero-row cluster get surrogate 0 (no stable-part content).
pub fn surrogate_outputs(
    clusters: &ClusterSet,
    p: &DVector<f64>,
    y_trusted: &DVector<f64>,
    attacked: &[usize],
) -> Result<DVector<f64>> {
    let m = clusters.m();
    let mut is_attacked = vec![false; m];
    for &i in attacked {
        if i >= m {
            return Err(ClusterError::DimensionMismatch(format!(
                "attacked output {i} out of range (m = {m})"
            )));
        }
        is_attacked[i] = true;
    }
    let trusted: Vec<usize> = (0..m).filter(|&i| !is_attacked[i]).collect();
    if y_trusted.len() != trusted.len() {
        return Err(ClusterError::DimensionMismatch(format!(
            "{} trusted values for {} trusted outputs",
            y_trusted.len(),
            trusted.len()
        )));
    }
    let mut trusted_value = vec![0.0f64; m];
    for (r, &i) in trusted.iter().enumerate() {
        trusted_value[i] = y_trusted[r];
    }

    // cluster variable from trusted members
    let mut z = vec![0.0f64; clusters.k()];
    let mut has_trusted = vec![false; clusters.k()];
    for (k, idx) in clusters.members.iter().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for &i in idx {
            if !is_attacked[i] {
                num += p[i] * trusted_value[i];
                den += p[i] * p[i];
                has_trusted[k] = true;
            }
        }
        if den > 0.0 {
            z[k] = num / den;
        }
    }

    let zero_cluster = clusters
        .zero_outputs
        .first()
        .map(|&i| clusters.assignment[i]);
    let mut attacked_sorted: Vec<usize> = (0..m).filter(|&i| is_attacked[i]).collect();
    attacked_sorted.sort_unstable();
    let mut out = DVector::zeros(attacked_sorted.len());
    for (r, &i) in attacked_sorted.iter().enumerate() {
        let k = clusters.assignment[i];
        if Some(k) == zero_cluster {
            out[r] = 0.0;
            continue;
        }
        if !has_trusted[k] {
            return Err(ClusterError::UncoveredCluster(k));
        }
        out[r] = p[i] * z[k];
    }
    Ok(out)
}

/// Per-measurement and aggregate surrogate approximation error over sampled
/// outputs (columns of `ys` are time samples). Per-measurement entries are
/// relative RMS `‖ȳ_i - y_i‖₂ / ‖y_i‖₂`; measurements with `‖y_i‖₂` below
/// `1e-12` are not applicable (`None`) and excluded from the aggregate mean.
#[derive(Debug, Clone)]
pub struct ApproxError {
    pub per_measurement: Vec<Option<f64>>,
    pub aggregate: f64,
}

pub fn approximation_error(pi: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<ApproxError> {
    if pi.ncols() != ys.nrows() {
        return Err(ClusterError::DimensionMismatch(format!(
            "Pi has {} columns but samples have {} rows",
            pi.ncols(),
            ys.nrows()
        )));
    }
    let recon = pi.transpose() * (pi * ys);
    let m = ys.nrows();
    let mut per = Vec::with_capacity(m);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..m {
        let denom = ys.row(i).norm();
        if denom < 1e-12 {
            per.push(None);
            continue;
        }
        let e = (recon.row(i) - ys.row(i)).norm() / denom;
        per.push(Some(e));
        sum += e;
        count += 1;
    }
    let aggregate = if count > 0 { sum / count as f64 } else { 0.0 };
    Ok(ApproxError {
        per_measurement: per,
        aggregate,
    })
}

/// Replace the rows of attacked outputs by their cluster-projected
/// counterparts: trusted rows of `C` are kept verbatim (ascending index),
/// followed by rows of `Πᵀ Π C` at the attacked indices (ascending index).
/// Returns the stacked matrix and the output indices in row order.
pub fn augment_measurement_matrix(
    c: &DMatrix<f64>,
    pi: &DMatrix<f64>,
    attacked: &[usize],
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let m = c.nrows();
    if pi.ncols() != m {
        return Err(ClusterError::DimensionMismatch(format!(
            "Pi has {} columns but C has {} rows",
            pi.ncols(),
            m
        )));
    }
    if let Some(&bad) = attacked.iter().find(|&&i| i >= m) {
        return Err(ClusterError::DimensionMismatch(format!(
            "attacked output {bad} out of range (m = {m})"
        )));
    }
    let mut is_attacked = vec![false; m];
    for &i in attacked {
        is_attacked[i] = true;
    }
    let trusted: Vec<usize> = (0..m).filter(|&i| !is_attacked[i]).collect();
    if trusted.is_empty() && m > 0 {
        return Err(ClusterError::AllMeasurementsAttacked);
    }
    let attacked_sorted: Vec<usize> = (0..m).filter(|&i| is_attacked[i]).collect();

    let surrogate_c = pi.transpose() * (pi * c);
    let mut rows = DMatrix::zeros(m, c.ncols());
    let mut order = Vec::with_capacity(m);
    for (r, &i) in trusted.iter().enumerate() {
        rows.set_row(r, &c.row(i));
        order.push(i);
    }
    for (r, &i) in attacked_sorted.iter().enumerate() {
        rows.set_row(trusted.len() + r, &surrogate_c.row(i));
        order.push(i);
    }
    Ok((rows, order))
}
