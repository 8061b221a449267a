//! Server-side aggregation rules: plain and oracle averaging, Multi-Krum,
//! geometric-median (smoothed Weiszfeld), Foolsgold, sign-voting learning-rate
//! inversion, a lite cosine-clustering filter with noise, and the batch-norm
//! statistics defense with pluggable clustering.
//!
//! Every rule is a pure function of the update set. Updates are canonically
//! ordered by client id before any computation, so the output is invariant to
//! input ordering.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attack::ClientUpdate;
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, l2_distance, l2_norm, mean, population_variance};
use crate::nn::ModelState;

/// Outcome of one aggregation step.
#[derive(Debug, Clone)]
pub struct DefenseOutcome {
    /// Client ids kept by a filtering rule; `None` for weight-based rules.
    pub selected: Option<Vec<usize>>,
    /// Per-client weights `(client_id, weight)` for weight-based rules.
    pub weights: Option<Vec<(usize, f64)>>,
    /// Aggregated flat update.
    pub delta: Vec<f64>,
    /// Cross-channel feature matrix, one row per client (sorted by id).
    pub features: Option<Vec<[f64; 4]>>,
    /// Cluster assignment aligned with `features`.
    pub assignment: Option<Vec<usize>>,
    /// Per-client scores (meaning depends on the rule), sorted by id.
    pub scores: Option<Vec<f64>>,
}

impl DefenseOutcome {
    fn plain(delta: Vec<f64>) -> Self {
        DefenseOutcome {
            selected: None,
            weights: None,
            delta,
            features: None,
            assignment: None,
            scores: None,
        }
    }
}

fn sorted_by_id<'a>(updates: &'a [ClientUpdate]) -> Result<Vec<&'a ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::InvalidData("no updates to aggregate".into()));
    }
    let len = updates[0].delta.len();
    for u in updates {
        if u.delta.len() != len {
            return Err(Error::LengthMismatch { expected: len, got: u.delta.len() });
        }
        if u.delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("update from client {}", u.client_id)));
        }
    }
    let mut refs: Vec<&ClientUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    Ok(refs)
}

fn mean_of(updates: &[&ClientUpdate]) -> Vec<f64> {
    let vs: Vec<&[f64]> = updates.iter().map(|u| u.delta.as_slice()).collect();
    crate::linalg::mean_vector(&vs)
}

/// Plain averaging over all received updates.
pub fn agg_fedavg(updates: &[ClientUpdate]) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let ids = sorted.iter().map(|u| u.client_id).collect();
    Ok(DefenseOutcome {
        selected: Some(ids),
        ..DefenseOutcome::plain(mean_of(&sorted))
    })
}

/// Oracle filter: averages benign updates only, using ground-truth labels.
pub fn agg_fedavg_star(updates: &[ClientUpdate]) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let benign: Vec<&ClientUpdate> = sorted.iter().filter(|u| !u.is_malicious).copied().collect();
    if benign.is_empty() {
        return Err(Error::InvalidData("oracle filter removed every update".into()));
    }
    let ids = benign.iter().map(|u| u.client_id).collect();
    Ok(DefenseOutcome {
        selected: Some(ids),
        ..DefenseOutcome::plain(mean_of(&benign))
    })
}

/// Multi-Krum scores: sum of squared distances to the `n - f_hat - 2`
/// nearest neighbors. Distances are computed over the first `metric_len`
/// coordinates of each delta — the trainable block when called from the
/// engine. BN running statistics are excluded from the metric (they live on
/// the scale of activation variances, orders of magnitude above weight
/// deltas, and would otherwise dominate every pairwise distance); they are
/// still carried through aggregation.
pub fn mkrum_scores(
    updates: &[&ClientUpdate],
    f_hat: usize,
    metric_len: usize,
) -> Result<Vec<f64>> {
    let n = updates.len();
    if n < f_hat + 3 {
        return Err(Error::InvalidConfig(format!(
            "multi-krum needs n >= f_hat + 3 (n={n}, f_hat={f_hat})"
        )));
    }
    let keep = n - f_hat - 2;
    // Squared distances summed directly (no sqrt round-trip) so scores match
    // a brute-force oracle bit for bit.
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let len = metric_len.min(updates[i].delta.len());
        let mut d2: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq(&updates[i].delta[..len], &updates[j].delta[..len]))
            .collect();
        d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.push(d2[..keep].iter().sum());
    }
    Ok(scores)
}

/// Keep the `m_select` updates with the lowest Multi-Krum scores
/// (ties broken by lower client id) and average them. Scores use the
/// trainable block (`metric_len` coordinates) of each delta.
pub fn agg_mkrum(
    updates: &[ClientUpdate],
    f_hat: usize,
    m_select: usize,
    metric_len: usize,
) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let n = sorted.len();
    if m_select == 0 || m_select > n {
        return Err(Error::InvalidConfig(format!(
            "m_select must be in [1, {n}] (got {m_select})"
        )));
    }
    let scores = mkrum_scores(&sorted, f_hat, metric_len)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(sorted[a].client_id.cmp(&sorted[b].client_id))
    });
    let mut chosen: Vec<usize> = order[..m_select].to_vec();
    chosen.sort_unstable();
    let kept: Vec<&ClientUpdate> = chosen.iter().map(|&i| sorted[i]).collect();
    let ids = kept.iter().map(|u| u.client_id).collect();
    Ok(DefenseOutcome {
        selected: Some(ids),
        scores: Some(scores),
        ..DefenseOutcome::plain(mean_of(&kept))
    })
}

/// Geometric median via smoothed Weiszfeld iteration, starting from the mean.
pub fn agg_rfa(updates: &[ClientUpdate], iters: usize, smooth_eps: f64) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let mut v = mean_of(&sorted);
    let mut weights = vec![1.0 / sorted.len() as f64; sorted.len()];
    for _ in 0..iters {
        let mut total = 0.0;
        for (w, u) in weights.iter_mut().zip(&sorted) {
            let d = l2_distance(&u.delta, &v)?;
            *w = 1.0 / d.max(smooth_eps);
            total += *w;
        }
        let mut next = vec![0.0; v.len()];
        for (w, u) in weights.iter().zip(&sorted) {
            for (o, x) in next.iter_mut().zip(&u.delta) {
                *o += w * x;
            }
        }
        for o in next.iter_mut() {
            *o /= total;
        }
        v = next;
    }
    let total: f64 = weights.iter().sum();
    let reported = sorted
        .iter()
        .zip(&weights)
        .map(|(u, w)| (u.client_id, w / total))
        .collect();
    Ok(DefenseOutcome {
        weights: Some(reported),
        ..DefenseOutcome::plain(v)
    })
}

/// The objective the geometric median minimizes.
pub fn rfa_objective(updates: &[ClientUpdate], v: &[f64]) -> f64 {
    updates
        .iter()
        .map(|u| l2_distance(&u.delta, v).unwrap())
        .sum()
}

/// Similarity-penalizing weighted aggregation over historical updates.
/// `histories[i]` is the cumulative delta sum of the client at `updates`'
/// sorted position `i`.
pub fn agg_foolsgold(updates: &[ClientUpdate], histories: &[Vec<f64>]) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let n = sorted.len();
    if histories.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: histories.len() });
    }
    let mut max_sim = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        if l2_norm(&histories[i]) == 0.0 {
            // Degenerate history: treat as dissimilar to everyone.
            max_sim[i] = 0.0;
            continue;
        }
        for j in 0..n {
            if i == j || l2_norm(&histories[j]) == 0.0 {
                continue;
            }
            let cs = cosine_similarity(&histories[i], &histories[j])?;
            if cs > max_sim[i] {
                max_sim[i] = cs;
            }
        }
        if max_sim[i] == f64::NEG_INFINITY {
            max_sim[i] = 0.0;
        }
    }
    let mut w: Vec<f64> = max_sim.iter().map(|m| (1.0 - m).clamp(0.0, 1.0)).collect();
    let max_w = w.iter().cloned().fold(0.0, f64::max);
    if max_w > 0.0 {
        for v in w.iter_mut() {
            *v /= max_w;
        }
    }
    // Logit re-weighting, clipped back into [0, 1].
    for v in w.iter_mut() {
        let x = v.clamp(1e-9, 1.0 - 1e-9);
        *v = ((x / (1.0 - x)).ln() / 2.0 + 0.5).clamp(0.0, 1.0);
    }
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        // Everyone maximally similar; fall back to uniform weights.
        w = vec![1.0; n];
    }
    let total: f64 = w.iter().sum();
    let mut delta = vec![0.0; sorted[0].delta.len()];
    for (wi, u) in w.iter().zip(&sorted) {
        for (o, x) in delta.iter_mut().zip(&u.delta) {
            *o += wi * x;
        }
    }
    for o in delta.iter_mut() {
        *o /= total;
    }
    let reported = sorted.iter().zip(&w).map(|(u, wi)| (u.client_id, *wi)).collect();
    Ok(DefenseOutcome {
        weights: Some(reported),
        scores: Some(max_sim),
        ..DefenseOutcome::plain(delta)
    })
}

/// Sign-voting learning-rate inversion over trainable coordinates; buffer
/// coordinates are aggregated by plain mean (sign voting over running
/// statistics is meaningless).
pub fn agg_rlr(
    updates: &[ClientUpdate],
    threshold: f64,
    server_lr: f64,
    trainable_len: usize,
) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let n = sorted.len();
    if !(0.0..=n as f64).contains(&threshold) {
        return Err(Error::InvalidConfig(format!(
            "rlr threshold must be in [0, {n}] (got {threshold})"
        )));
    }
    let mut delta = mean_of(&sorted);
    for (j, d) in delta.iter_mut().enumerate().take(trainable_len) {
        let vote: f64 = sorted.iter().map(|u| u.delta[j].signum()).sum();
        let lr = if vote.abs() >= threshold { server_lr } else { -server_lr };
        *d *= lr;
    }
    Ok(DefenseOutcome::plain(delta))
}

/// Column-wise standardization (zero mean, unit population variance);
/// constant columns are left at zero.
pub fn standardize_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let m = mean(&col);
        let std = population_variance(&col).sqrt();
        if std > 0.0 {
            for (o, v) in out.iter_mut().zip(&col) {
                o[j] = (v - m) / std;
            }
        }
    }
    out
}

/// Pluggable two-way clustering over feature rows.
pub trait Clusterer {
    /// Returns a 0/1 assignment per row.
    fn cluster2(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>>;
}

/// Lloyd's algorithm with k = 2, k-means++ seeding, and column
/// standardization of the inputs.
#[derive(Debug, Clone)]
pub struct KMeans2 {
    pub seed: u64,
    pub iters: usize,
    pub tol: f64,
}

impl Default for KMeans2 {
    fn default() -> Self {
        KMeans2 { seed: 0, iters: 100, tol: 1e-8 }
    }
}

impl Clusterer for KMeans2 {
    fn cluster2(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
        kmeans2(rows, self.seed, self.iters, self.tol)
    }
}

/// Above this size, exhaustive 2-partition search is replaced by restarted
/// Lloyd iteration.
const KMEANS_EXACT_LIMIT: usize = 10;
/// Restart count for the Lloyd path.
const KMEANS_RESTARTS: usize = 8;

fn cluster_sse(data: &[Vec<f64>], assignment: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..2 {
        let members: Vec<&[f64]> = data
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == c)
            .map(|(r, _)| r.as_slice())
            .collect();
        if members.is_empty() {
            continue;
        }
        let cent = crate::linalg::mean_vector(&members);
        for m in &members {
            total += l2_distance(m, &cent).unwrap().powi(2);
        }
    }
    total
}

/// Two-means clustering on column-standardized rows. Small instances are
/// solved exactly by enumerating every 2-partition (the optimum Lloyd would
/// converge to); larger ones run Lloyd's algorithm from several k-means++
/// seedings and keep the lowest-SSE result. Deterministic given `seed`.
pub fn kmeans2(rows: &[Vec<f64>], seed: u64, iters: usize, tol: f64) -> Result<Vec<usize>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidData("kmeans2 needs at least 2 rows".into()));
    }
    let data = standardize_columns(rows);

    if n <= KMEANS_EXACT_LIMIT {
        // Fix row 0 in cluster 0 to halve the search space; the first mask
        // (everything in one cluster) wins SSE ties, keeping degenerate
        // inputs in a single cluster.
        let mut best_mask = 0u32;
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << (n - 1)) {
            let assignment: Vec<usize> =
                std::iter::once(0).chain((0..n - 1).map(|i| ((mask >> i) & 1) as usize)).collect();
            let sse = cluster_sse(&data, &assignment);
            if sse < best {
                best = sse;
                best_mask = mask;
            }
        }
        return Ok(std::iter::once(0)
            .chain((0..n - 1).map(|i| ((best_mask >> i) & 1) as usize))
            .collect());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_assignment = vec![0; n];
    let mut best_sse = f64::INFINITY;
    for _ in 0..KMEANS_RESTARTS {
        let assignment = lloyd_once(&data, &mut rng, iters, tol);
        let sse = cluster_sse(&data, &assignment);
        if sse < best_sse {
            best_sse = sse;
            best_assignment = assignment;
        }
    }
    Ok(best_assignment)
}

/// One Lloyd run with k-means++ seeding.
fn lloyd_once(data: &[Vec<f64>], rng: &mut ChaCha8Rng, iters: usize, tol: f64) -> Vec<usize> {
    let n = data.len();
    let first = rng.random_range(0..n);
    let d2: Vec<f64> = data
        .iter()
        .map(|r| l2_distance(r, &data[first]).unwrap().powi(2))
        .collect();
    let total: f64 = d2.iter().sum();
    let second = if total == 0.0 {
        (first + 1) % n
    } else {
        let u: f64 = rng.random_range(0.0..total);
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    let mut centroids = [data[first].clone(), data[second].clone()];

    let assign = |cent: &[Vec<f64>; 2]| -> Vec<usize> {
        data.iter()
            .map(|r| {
                let d0 = l2_distance(r, &cent[0]).unwrap();
                let d1 = l2_distance(r, &cent[1]).unwrap();
                usize::from(d1 < d0)
            })
            .collect()
    };

    let mut assignment = assign(&centroids);
    let mut prev_sse = cluster_sse(data, &assignment);
    for _ in 0..iters {
        let mut shift = 0.0;
        for c in 0..2 {
            let members: Vec<&[f64]> = data
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(r, _)| r.as_slice())
                .collect();
            if members.is_empty() {
                continue; // empty cluster permitted; centroid stays put
            }
            let next = crate::linalg::mean_vector(&members);
            shift += l2_distance(&next, &centroids[c]).unwrap();
            centroids[c] = next;
        }
        assignment = assign(&centroids);
        let cur = cluster_sse(data, &assignment);
        debug_assert!(cur <= prev_sse + 1e-9, "kmeans SSE increased: {prev_sse} -> {cur}");
        prev_sse = cur;
        if shift < tol {
            break;
        }
    }
    assignment
}

/// Which batch-norm layer feeds the feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelect {
    First,
    Mid,
    Last,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnguardConfig {
    pub layer_select: LayerSelect,
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for BnguardConfig {
    fn default() -> Self {
        BnguardConfig {
            layer_select: LayerSelect::First,
            kmeans_seed: 0,
            kmeans_iters: 100,
            kmeans_tol: 1e-8,
        }
    }
}

/// Cross-channel statistics of the selected batch-norm layer's running
/// buffers: `[mean(mu), var(mu), mean(sigma), var(sigma)]` with population
/// variance. `All` concatenates every layer's buffers first.
pub fn extract_bn_features(model: &ModelState, layer_select: LayerSelect) -> Result<[f64; 4]> {
    let n_bn = model.buffers.len();
    if n_bn == 0 {
        return Err(Error::InvalidConfig("model has no batchnorm layer".into()));
    }
    // The second statistic pair is computed over per-channel standard
    // deviations sigma = sqrt(running_var), not raw variances: sigma lives on
    // the same scale as the activations and keeps a handful of high-variance
    // channels from dominating the cross-channel spread.
    let to_sigma = |vars: &[f64]| vars.iter().map(|v| v.max(0.0).sqrt()).collect::<Vec<f64>>();
    let (mu, sigma): (Vec<f64>, Vec<f64>) = match layer_select {
        LayerSelect::First => (
            model.buffers[0].mean.clone(),
            to_sigma(&model.buffers[0].var),
        ),
        LayerSelect::Mid => {
            let i = n_bn / 2;
            (model.buffers[i].mean.clone(), to_sigma(&model.buffers[i].var))
        }
        LayerSelect::Last => (
            model.buffers[n_bn - 1].mean.clone(),
            to_sigma(&model.buffers[n_bn - 1].var),
        ),
        LayerSelect::All => {
            let mut mu = Vec::new();
            let mut sigma = Vec::new();
            for b in &model.buffers {
                mu.extend_from_slice(&b.mean);
                sigma.extend(to_sigma(&b.var));
            }
            (mu, sigma)
        }
    };
    Ok([
        mean(&mu),
        population_variance(&mu),
        mean(&sigma),
        population_variance(&sigma),
    ])
}

/// Coordinate-wise median of the rows.
fn column_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d)
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect()
}

/// Majority cluster under the assignment; equal sizes are broken toward the
/// cluster containing the row closest to the coordinate-wise median of all
/// standardized rows.
fn majority_cluster(assignment: &[usize], standardized: &[Vec<f64>]) -> usize {
    let c1 = assignment.iter().filter(|&&a| a == 1).count();
    let c0 = assignment.len() - c1;
    match c0.cmp(&c1) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => {
            let med = column_median(standardized);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, row) in standardized.iter().enumerate() {
                let d = l2_distance(row, &med).unwrap();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assignment[best]
        }
    }
}

/// Batch-norm statistics defense: recover each local model, extract the
/// cross-channel feature row, cluster into two groups, and average the
/// majority cluster's updates.
pub fn bnguard(
    updates: &[ClientUpdate],
    global: &ModelState,
    cfg: &BnguardConfig,
) -> Result<DefenseOutcome> {
    let clusterer = KMeans2 {
        seed: cfg.kmeans_seed,
        iters: cfg.kmeans_iters,
        tol: cfg.kmeans_tol,
    };
    bnguard_with(updates, global, cfg.layer_select, &clusterer)
}

/// [`bnguard`] with a caller-supplied clustering method.
pub fn bnguard_with(
    updates: &[ClientUpdate],
    global: &ModelState,
    layer_select: LayerSelect,
    clusterer: &dyn Clusterer,
) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    if sorted.len() < 2 {
        return Err(Error::InvalidData("bnguard needs at least 2 updates".into()));
    }
    let mut features = Vec::with_capacity(sorted.len());
    for u in &sorted {
        let local = global.apply_delta(&u.delta)?;
        features.push(extract_bn_features(&local, layer_select)?);
    }
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    let assignment = clusterer.cluster2(&rows)?;
    let standardized = standardize_columns(&rows);
    let majority = majority_cluster(&assignment, &standardized);
    let kept: Vec<&ClientUpdate> = sorted
        .iter()
        .zip(&assignment)
        .filter(|(_, &a)| a == majority)
        .map(|(u, _)| *u)
        .collect();
    let ids = kept.iter().map(|u| u.client_id).collect();
    Ok(DefenseOutcome {
        selected: Some(ids),
        features: Some(features),
        assignment: Some(assignment),
        ..DefenseOutcome::plain(mean_of(&kept))
    })
}

/// Cosine-clustering filter: cluster recovered local models on the rows of
/// their pairwise cosine-distance matrix, clip the kept updates to the median
/// norm, and perturb the averaged trainables with scaled Gaussian noise.
pub fn agg_flame_lite(
    updates: &[ClientUpdate],
    global_trainable: &[f64],
    trainable_len: usize,
    lambda_noise: f64,
    seed: u64,
) -> Result<DefenseOutcome> {
    let sorted = sorted_by_id(updates)?;
    let n = sorted.len();
    if n < 2 {
        return Err(Error::InvalidData("flame needs at least 2 updates".into()));
    }
    // Recovered local model trainables.
    let thetas: Vec<Vec<f64>> = sorted
        .iter()
        .map(|u| {
            global_trainable
                .iter()
                .zip(&u.delta[..trainable_len])
                .map(|(g, d)| g + d)
                .collect()
        })
        .collect();
    let mut dist_rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = 1.0 - cosine_similarity(&thetas[i], &thetas[j])?;
            if d.abs() < 1e-12 {
                d = 0.0; // snap rounding residue so identical models cluster together
            }
            dist_rows[i][j] = d;
            dist_rows[j][i] = d;
        }
    }
    let assignment = kmeans2(&dist_rows, seed, 100, 1e-8)?;
    let standardized = standardize_columns(&dist_rows);
    let majority = majority_cluster(&assignment, &standardized);
    let kept: Vec<&ClientUpdate> = sorted
        .iter()
        .zip(&assignment)
        .filter(|(_, &a)| a == majority)
        .map(|(u, _)| *u)
        .collect();
    // Clip each kept update's trainables to the median kept norm.
    let mut norms: Vec<f64> = kept.iter().map(|u| l2_norm(&u.delta[..trainable_len])).collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_norm = norms[norms.len() / 2];
    let flat_len = sorted[0].delta.len();
    let mut delta = vec![0.0; flat_len];
    for u in &kept {
        let norm = l2_norm(&u.delta[..trainable_len]);
        let scale = if norm > median_norm && norm > 0.0 { median_norm / norm } else { 1.0 };
        for (j, o) in delta.iter_mut().enumerate() {
            let v = if j < trainable_len { u.delta[j] * scale } else { u.delta[j] };
            *o += v;
        }
    }
    for o in delta.iter_mut() {
        *o /= kept.len() as f64;
    }
    if lambda_noise > 0.0 {
        let std = lambda_noise * median_norm;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in delta.iter_mut().take(trainable_len) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *d += std * z;
        }
    }
    let ids = kept.iter().map(|u| u.client_id).collect();
    Ok(DefenseOutcome {
        selected: Some(ids),
        assignment: Some(assignment),
        ..DefenseOutcome::plain(delta)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn up(id: usize, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate { client_id: id, delta, is_malicious: false }
    }

    fn mal(id: usize, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate { client_id: id, delta, is_malicious: true }
    }

    #[test]
    fn fedavg_basics() {
        let one = agg_fedavg(&[up(0, vec![1.0, 1.0])]).unwrap();
        assert_eq!(one.delta, vec![1.0, 1.0]);
        let two = agg_fedavg(&[up(0, vec![1.0, 1.0]), up(1, vec![3.0, 3.0])]).unwrap();
        assert_eq!(two.delta, vec![2.0, 2.0]);
        // Permutation invariance.
        let rev = agg_fedavg(&[up(1, vec![3.0, 3.0]), up(0, vec![1.0, 1.0])]).unwrap();
        assert_eq!(two.delta, rev.delta);
    }

    #[test]
    fn fedavg_star_filters_by_truth() {
        let ups = vec![mal(0, vec![100.0]), mal(1, vec![100.0]), up(2, vec![4.0])];
        let out = agg_fedavg_star(&ups).unwrap();
        assert_eq!(out.delta, vec![4.0]);
        assert_eq!(out.selected.unwrap(), vec![2]);
        // No malicious: identical to fedavg.
        let clean = vec![up(0, vec![1.0]), up(1, vec![3.0])];
        assert_eq!(
            agg_fedavg_star(&clean).unwrap().delta,
            agg_fedavg(&clean).unwrap().delta
        );
    }

    #[test]
    fn mkrum_excludes_outlier() {
        let ups = vec![
            up(0, vec![0.0, 0.1]),
            up(1, vec![0.1, 0.0]),
            up(2, vec![-0.05, 0.02]),
            mal(3, vec![100.0, 100.0]),
        ];
        let out = agg_mkrum(&ups, 1, 3, ups[0].delta.len()).unwrap();
        assert_eq!(out.selected.unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn mkrum_tie_break_by_id() {
        let ups: Vec<ClientUpdate> = (0..5).map(|i| up(i, vec![1.0, 2.0])).collect();
        let out = agg_mkrum(&ups, 1, 2, ups[0].delta.len()).unwrap();
        assert_eq!(out.selected.unwrap(), vec![0, 1]);
    }

    #[test]
    fn mkrum_matches_brute_force() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.random_range(4..=8);
            let f_hat = rng.random_range(0..=(n - 3));
            let ups: Vec<ClientUpdate> = (0..n)
                .map(|i| up(i, (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()))
                .collect();
            let refs: Vec<&ClientUpdate> = ups.iter().collect();
            let scores = mkrum_scores(&refs, f_hat, 5).unwrap();
            // O(n^2) oracle.
            for i in 0..n {
                let mut d2: Vec<f64> = Vec::new();
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut s = 0.0;
                    for (a, b) in ups[i].delta.iter().zip(&ups[j].delta) {
                        s += (a - b) * (a - b);
                    }
                    d2.push(s);
                }
                d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let expect: f64 = d2[..n - f_hat - 2].iter().sum();
                assert_eq!(scores[i], expect);
            }
        }
    }

    #[test]
    fn rfa_single_and_collinear() {
        let one = agg_rfa(&[up(0, vec![5.0])], 10, 1e-6).unwrap();
        assert_eq!(one.delta, vec![5.0]);
        let ups = vec![up(0, vec![0.0]), up(1, vec![1.0]), up(2, vec![10.0])];
        let out = agg_rfa(&ups, 100, 1e-6).unwrap();
        assert!((out.delta[0] - 1.0).abs() < 1e-3, "got {}", out.delta[0]);
    }

    #[test]
    fn rfa_beats_mean_and_inputs() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ups: Vec<ClientUpdate> = (0..7)
            .map(|i| up(i, (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let out = agg_rfa(&ups, 50, 1e-6).unwrap();
        let obj = rfa_objective(&ups, &out.delta);
        let refs: Vec<&ClientUpdate> = ups.iter().collect();
        let mean_v = mean_of(&refs);
        assert!(obj <= rfa_objective(&ups, &mean_v) + 1e-9);
        for u in &ups {
            assert!(obj <= rfa_objective(&ups, &u.delta) + 1e-9);
        }
    }

    #[test]
    fn foolsgold_orthogonal_histories_equal_weights() {
        let ups = vec![up(0, vec![1.0, 0.0]), up(1, vec![0.0, 1.0])];
        let hist = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let out = agg_foolsgold(&ups, &hist).unwrap();
        let w = out.weights.unwrap();
        assert_eq!(w[0].1, w[1].1);
        // Equal weights: weighted mean equals plain mean.
        assert_eq!(out.delta, vec![0.5, 0.5]);
    }

    #[test]
    fn foolsgold_penalizes_sybils() {
        let ups = vec![
            up(0, vec![1.0]),
            up(1, vec![1.0]),
            up(2, vec![1.0]),
            up(3, vec![1.0]),
        ];
        let hist = vec![
            vec![1.0, 1.0, 0.0], // sybil pair
            vec![2.0, 2.0, 0.0], // same direction as 0
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ];
        let out = agg_foolsgold(&ups, &hist).unwrap();
        let w = out.weights.clone().unwrap();
        assert!(w[0].1 <= w[2].1 && w[0].1 <= w[3].1);
        assert!(w[1].1 <= w[2].1 && w[1].1 <= w[3].1);
        // Cosine scale invariance: rescaling one history changes nothing.
        let mut hist2 = hist.clone();
        for v in hist2[2].iter_mut() {
            *v *= 7.5;
        }
        let out2 = agg_foolsgold(&ups, &hist2).unwrap();
        assert_eq!(out.weights, out2.weights);
    }

    #[test]
    fn rlr_agreement_and_inversion() {
        // All agree in sign: identical to server_lr * fedavg.
        let ups = vec![up(0, vec![1.0, -1.0]), up(1, vec![2.0, -3.0])];
        let out = agg_rlr(&ups, 2.0, 1.0, 2).unwrap();
        assert_eq!(out.delta, vec![1.5, -2.0]);
        // Threshold 0 never inverts.
        let mixed = vec![
            up(0, vec![1.0]),
            up(1, vec![1.0]),
            up(2, vec![-1.0]),
            up(3, vec![-1.0]),
        ];
        let never = agg_rlr(&mixed, 0.0, 1.0, 1).unwrap();
        assert_eq!(never.delta, vec![0.0]);
        // Split votes (+,+,-,-) with threshold 1: |vote| = 0 < 1, inverted.
        let split = vec![
            up(0, vec![2.0]),
            up(1, vec![2.0]),
            up(2, vec![-1.0]),
            up(3, vec![-1.0]),
        ];
        let inv = agg_rlr(&split, 1.0, 1.0, 1).unwrap();
        assert_eq!(inv.delta, vec![-0.5]);
    }

    #[test]
    fn rlr_matches_per_coordinate_oracle() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.random_range(3..=7);
            let dim = 6;
            let ups: Vec<ClientUpdate> = (0..n)
                .map(|i| up(i, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let threshold = rng.random_range(0.0..n as f64);
            let out = agg_rlr(&ups, threshold, 1.0, dim).unwrap();
            for j in 0..dim {
                let vote: f64 = ups.iter().map(|u| u.delta[j].signum()).sum();
                let m: f64 = ups.iter().map(|u| u.delta[j]).sum::<f64>() / n as f64;
                let expect = if vote.abs() >= threshold { m } else { -m };
                assert_eq!(out.delta[j], expect, "coord {j}");
            }
        }
    }

    #[test]
    fn kmeans_separated_clusters() {
        let rows = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let asg = kmeans2(&rows, 1, 100, 1e-8).unwrap();
        assert_eq!(asg[0], asg[1]);
        assert_eq!(asg[2], asg[3]);
        assert_ne!(asg[0], asg[2]);
    }

    #[test]
    fn kmeans_degenerate_identical_points() {
        let rows = vec![vec![2.0, 2.0]; 5];
        let asg = kmeans2(&rows, 1, 100, 1e-8).unwrap();
        let first = asg[0];
        assert!(asg.iter().all(|&a| a == first));
    }

    #[test]
    fn kmeans_matches_exhaustive_sse_minimum() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let n = rng.random_range(4..=8usize);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let asg = kmeans2(&rows, trial, 200, 1e-10).unwrap();
            let data = standardize_columns(&rows);
            let sse_of = |labels: &[usize]| -> f64 {
                let mut total = 0.0;
                for c in 0..2 {
                    let members: Vec<&[f64]> = data
                        .iter()
                        .zip(labels)
                        .filter(|(_, &l)| l == c)
                        .map(|(r, _)| r.as_slice())
                        .collect();
                    if members.is_empty() {
                        continue;
                    }
                    let cent = crate::linalg::mean_vector(&members);
                    for m in &members {
                        total += l2_distance(m, &cent).unwrap().powi(2);
                    }
                }
                total
            };
            let got = sse_of(&asg);
            let mut best = f64::INFINITY;
            for mask in 0..(1u32 << n) {
                let labels: Vec<usize> =
                    (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
                best = best.min(sse_of(&labels));
            }
            assert!(
                got <= best + 1e-6,
                "trial {trial}: kmeans SSE {got} vs exhaustive best {best}"
            );
        }
    }

    #[test]
    fn bn_feature_hand_arithmetic() {
        use crate::nn::{BnBuffers, Layer, ModelSpec};
        let spec = ModelSpec::new(
            3,
            2,
            vec![
                Layer::Dense { in_dim: 3, out_dim: 3 },
                Layer::BatchNorm { channels: 3 },
                Layer::Dense { in_dim: 3, out_dim: 2 },
            ],
        )
        .unwrap();
        let mut model = ModelState::init(spec, 0);
        model.buffers[0] = BnBuffers {
            mean: vec![1.0, 2.0, 3.0],
            var: vec![16.0, 25.0, 36.0],
        };
        let f = extract_bn_features(&model, LayerSelect::First).unwrap();
        assert!((f[0] - 2.0).abs() < 1e-15);
        assert!((f[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f[2] - 5.0).abs() < 1e-15);
        assert!((f[3] - 2.0 / 3.0).abs() < 1e-15);
        // Channel permutation invariance.
        model.buffers[0] = BnBuffers {
            mean: vec![3.0, 1.0, 2.0],
            var: vec![36.0, 16.0, 25.0],
        };
        let g = extract_bn_features(&model, LayerSelect::First).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn bn_feature_single_channel_zero_variance() {
        use crate::nn::{Layer, ModelSpec};
        let spec = ModelSpec::new(
            2,
            2,
            vec![
                Layer::Dense { in_dim: 2, out_dim: 1 },
                Layer::BatchNorm { channels: 1 },
                Layer::Dense { in_dim: 1, out_dim: 2 },
            ],
        )
        .unwrap();
        let model = ModelState::init(spec, 0);
        let f = extract_bn_features(&model, LayerSelect::First).unwrap();
        assert_eq!(f[1], 0.0);
        assert_eq!(f[3], 0.0);
    }

    #[test]
    fn bnguard_identical_clients_selects_all() {
        use crate::nn::ModelSpec;
        let spec = ModelSpec::mlp(4, 2);
        let global = ModelState::init(spec.clone(), 0);
        let flat_len = spec.flat_len();
        let ups: Vec<ClientUpdate> = (0..6).map(|i| up(i, vec![0.01; flat_len])).collect();
        let out = bnguard(&ups, &global, &BnguardConfig::default()).unwrap();
        assert_eq!(out.selected.unwrap().len(), 6);
        let avg = agg_fedavg(&ups).unwrap();
        assert_eq!(out.delta, avg.delta);
    }

    #[test]
    fn bnguard_order_invariant() {
        use crate::nn::ModelSpec;
        let spec = ModelSpec::mlp(4, 2);
        let global = ModelState::init(spec.clone(), 0);
        let flat_len = spec.flat_len();
        let t_len = spec.trainable_len();
        let mut ups: Vec<ClientUpdate> = (0..6)
            .map(|i| {
                let mut d = vec![0.001 * (i as f64 + 1.0); flat_len];
                if i >= 4 {
                    // Shift the buffer region strongly for two clients.
                    for v in d[t_len..].iter_mut() {
                        *v += 5.0;
                    }
                }
                up(i, d)
            })
            .collect();
        let a = bnguard(&ups, &global, &BnguardConfig::default()).unwrap();
        ups.reverse();
        let b = bnguard(&ups, &global, &BnguardConfig::default()).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.delta, b.delta);
        // The two buffer-shifted clients are excluded.
        assert_eq!(a.selected.unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn flame_excludes_flipped_update() {
        let dim = 8;
        let global = vec![0.0; dim];
        let base: Vec<f64> = (0..dim).map(|i| 0.1 + 0.01 * i as f64).collect();
        let mut ups: Vec<ClientUpdate> = (0..5)
            .map(|i| {
                let d: Vec<f64> = base.iter().map(|v| v * (1.0 + 0.01 * i as f64)).collect();
                up(i, d)
            })
            .collect();
        ups.push(mal(5, base.iter().map(|v| -v).collect()));
        let out = agg_flame_lite(&ups, &global, dim, 0.0, 7).unwrap();
        let sel = out.selected.unwrap();
        assert!(!sel.contains(&5), "flipped update was kept: {sel:?}");
        assert_eq!(sel.len(), 5);
    }

    #[test]
    fn flame_identical_updates_with_zero_noise_is_deterministic() {
        let ups: Vec<ClientUpdate> = (0..4).map(|i| up(i, vec![1.0, 2.0])).collect();
        let a = agg_flame_lite(&ups, &[0.0, 0.0], 2, 0.0, 1).unwrap();
        let b = agg_flame_lite(&ups, &[0.0, 0.0], 2, 0.0, 1).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.delta, vec![1.0, 2.0]);
        assert_eq!(a.selected.unwrap().len(), 4);
    }
}
