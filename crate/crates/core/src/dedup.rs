//! Mini-batch k-means with Bradley-Fayyad seeding and periodic maintenance
//! of dead and oversized clusters, for embedding deduplication.
//!
//! Nearest-centroid search uses `‖x‖² + ‖c‖² − 2x·c` clamped at zero, with
//! ties going to the lowest cluster index. Rows are assigned in parallel but
//! every reduction runs in a fixed order, so results do not depend on the
//! thread count.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    /// Number of subsamples `J` clustered during seeding.
    pub subsamples: usize,
    pub subsample_fraction: f64,
    /// Lloyd iterations per subsample and per pooled restart.
    pub sample_iters: usize,
    pub batch_size: usize,
    pub maintenance_period: usize,
    /// A cluster with `n_k < factor · max(n)` is dead.
    pub dead_threshold_factor: f64,
    /// A cluster with `n_k > factor · mean(n)` is split.
    pub split_factor: f64,
    /// Mini-batch iterations; `None` means three epochs.
    pub iters: Option<usize>,
}

impl KmeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            subsamples: 10,
            subsample_fraction: 0.01,
            sample_iters: 20,
            batch_size: 1024,
            maintenance_period: 10,
            dead_threshold_factor: 0.01,
            split_factor: 12.0,
            iters: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.subsamples == 0
            || self.batch_size == 0
            || self.maintenance_period == 0
        {
            return Err(Error::Config(
                "k, subsamples, batch_size and maintenance_period must be >= 1".into(),
            ));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if !(self.dead_threshold_factor > 0.0 && self.split_factor > 0.0) {
            return Err(Error::Config("maintenance thresholds must be > 0".into()));
        }
        Ok(())
    }

    /// Iteration budget for `n` points.
    pub fn iterations(&self, n: usize) -> usize {
        self.iters
            .unwrap_or_else(|| (3 * n).div_ceil(self.batch_size))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub centroids: Matrix,
    /// Historical number of points absorbed by each cluster.
    pub counts: Vec<f64>,
    pub iteration: usize,
}

impl ClusterState {
    pub fn new(centroids: Matrix) -> Self {
        let k = centroids.rows();
        Self {
            centroids,
            counts: vec![0.0; k],
            iteration: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ClusterEvent {
    Reseed {
        iteration: usize,
        cluster: usize,
    },
    Split {
        iteration: usize,
        donor: usize,
        target: usize,
    },
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(|r| dot(r, r)).collect()
}

fn check_dims(x: &Matrix, centroids: &Matrix) -> Result<()> {
    if x.cols() != centroids.cols() {
        return Err(Error::shape("point dimension", centroids.cols(), x.cols()));
    }
    if centroids.rows() == 0 {
        return Err(Error::contract("need at least one centroid"));
    }
    Ok(())
}

/// Nearest centroid of every row of `x` and the (expanded) squared distance.
pub fn assign(x: &Matrix, centroids: &Matrix) -> Result<Vec<(usize, f64)>> {
    check_dims(x, centroids)?;
    let c_norms = row_norms(centroids);
    Ok((0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let xn = dot(row, row);
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.row_iter().enumerate() {
                let d = (xn + c_norms[k] - 2.0 * dot(row, c)).max(0.0);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect())
}

/// Sum over points of the squared distance to the nearest centroid.
pub fn inertia(x: &Matrix, centroids: &Matrix) -> Result<f64> {
    let a = assign(x, centroids)?;
    Ok(exact_inertia(x, centroids, &a))
}

fn exact_inertia(x: &Matrix, centroids: &Matrix, assignment: &[(usize, f64)]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &(k, _))| sq_dist(x.row(i), centroids.row(k)))
        .sum()
}

/// Greedy k-means++ seeding: each step draws `2 + ⌊ln k⌋` candidates by
/// D² sampling and keeps the one giving the lowest potential. Fails when `x`
/// has fewer than `k` distinct rows.
pub fn kmeans_pp(x: &Matrix, k: usize, rng: &mut RngStream) -> Result<Matrix> {
    let n = x.rows();
    if k == 0 || n < k {
        return Err(Error::Init(format!(
            "k-means++ needs k >= 1 and at least k points, got k={k}, n={n}"
        )));
    }
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.below(n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Init(format!(
                "only {c} distinct points, fewer than k={k}"
            )));
        }
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let pick = d2_sample(&d2, rng.uniform() * total);
            let cand: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| d2[i].min(sq_dist(x.row(i), x.row(pick))))
                .collect();
            let potential: f64 = cand.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, pick));
            }
        }
        let (_, next, pick) = best.expect("trials >= 2");
        centers.row_mut(c).copy_from_slice(x.row(pick));
        d2 = next;
    }
    Ok(centers)
}

/// Index whose cumulative weight first exceeds `target`, restricted to
/// positive weights.
fn d2_sample(d2: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    let mut last = None;
    for (i, &d) in d2.iter().enumerate() {
        if d > 0.0 {
            acc += d;
            last = Some(i);
            if acc > target {
                return i;
            }
        }
    }
    last.expect("positive total")
}

/// Full-batch Lloyd iterations from `init`; clusters that lose all points
/// keep their centroid. Stops early once assignments repeat.
pub fn lloyd(x: &Matrix, init: &Matrix, iters: usize) -> Result<(Matrix, f64)> {
    let mut c = init.clone();
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..iters {
        let a: Vec<usize> = assign(x, &c)?.into_iter().map(|(k, _)| k).collect();
        if prev.as_ref() == Some(&a) {
            break;
        }
        let mut sums = Matrix::zeros(c.rows(), c.cols());
        let mut counts = vec![0usize; c.rows()];
        for (i, &k) in a.iter().enumerate() {
            counts[k] += 1;
            for (s, v) in sums.row_mut(k).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                for (dst, s) in c.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *dst = s / n as f64;
                }
            }
        }
        prev = Some(a);
    }
    let inertia = inertia(x, &c)?;
    Ok((c, inertia))
}

fn gather(x: &Matrix, rows: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(rows.len(), x.cols());
    for (dst, &src) in rows.iter().enumerate() {
        m.row_mut(dst).copy_from_slice(x.row(src));
    }
    m
}

/// Bradley-Fayyad seeding.
///
/// A k-means++ seed on `x` warm-starts Lloyd runs on `J` random subsamples.
/// Their `J·K` centroids form a pool, which is re-clustered `J` times from
/// k-means++ restarts on the pool; the restart with the lowest pooled inertia
/// wins. A pool with fewer than `K` distinct rows restarts from the subsample
/// solutions instead.
pub fn bf_init(x: &Matrix, cfg: &KmeansConfig, rng: &mut RngStream) -> Result<Matrix> {
    cfg.validate()?;
    let n = x.rows();
    let k = cfg.k;
    let seed = kmeans_pp(x, k, rng)?;
    let m = ((cfg.subsample_fraction * n as f64).ceil() as usize)
        .max(k)
        .min(n);
    let mut candidates = Vec::with_capacity(cfg.subsamples);
    for _ in 0..cfg.subsamples {
        let (c, _) = if m >= n {
            lloyd(x, &seed, cfg.sample_iters)?
        } else {
            let mut idx = index::sample(rng, n, m).into_vec();
            idx.sort_unstable();
            lloyd(&gather(x, &idx), &seed, cfg.sample_iters)?
        };
        candidates.push(c);
    }
    let mut pool = Matrix::zeros(k * cfg.subsamples, x.cols());
    for (j, c) in candidates.iter().enumerate() {
        for r in 0..k {
            pool.row_mut(j * k + r).copy_from_slice(c.row(r));
        }
    }
    let mut best: Option<(Matrix, f64)> = None;
    for c in &candidates {
        let init = match kmeans_pp(&pool, k, rng) {
            Ok(init) => init,
            Err(Error::Init(_)) => c.clone(),
            Err(e) => return Err(e),
        };
        let (f, inertia) = lloyd(&pool, &init, cfg.sample_iters)?;
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((f, inertia));
        }
    }
    Ok(best.expect("subsamples >= 1").0)
}

/// Moves every cluster touched by `batch` toward its batch mean with rate
/// `η = n_batch / (n_k + n_batch)`.
pub fn minibatch_step(state: &mut ClusterState, batch: &Matrix) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::contract("mini-batch must be nonempty"));
    }
    let a = assign(batch, &state.centroids)?;
    let k = state.k();
    let mut sums = Matrix::zeros(k, batch.cols());
    let mut nb = vec![0usize; k];
    for (i, &(c, _)) in a.iter().enumerate() {
        nb[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(batch.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if nb[c] == 0 {
            continue;
        }
        let n_b = nb[c] as f64;
        let eta = n_b / (state.counts[c] + n_b);
        let mean: Vec<f64> = sums.row(c).iter().map(|s| s / n_b).collect();
        for (x, m) in state.centroids.row_mut(c).iter_mut().zip(&mean) {
            *x += eta * (m - *x);
        }
        state.counts[c] += n_b;
    }
    state.iteration += 1;
    Ok(())
}

/// Reseeds dead clusters and splits oversized ones. `K` never changes.
///
/// A dead cluster moves to the batch point farthest from every centroid
/// (recomputed after each reseed) and restarts its count. A split seeds a
/// random batch member of the donor into the most recently reseeded slot,
/// or else into the smallest non-donor cluster, and halves the donor's
/// count between the two.
pub fn maintain(
    state: &mut ClusterState,
    batch: &Matrix,
    cfg: &KmeansConfig,
    rng: &mut RngStream,
) -> Result<Vec<ClusterEvent>> {
    check_dims(batch, &state.centroids)?;
    let k = state.k();
    let it = state.iteration;
    let mut events = Vec::new();
    let max_n = state.counts.iter().cloned().fold(0.0, f64::max);
    let dead: Vec<usize> = (0..k)
        .filter(|&c| state.counts[c] < cfg.dead_threshold_factor * max_n)
        .collect();
    let mut reseeded: Vec<usize> = Vec::new();
    for &c in &dead {
        if batch.rows() == 0 {
            break;
        }
        let a = assign(batch, &state.centroids)?;
        let far = a
            .iter()
            .enumerate()
            .fold(
                (0, -1.0),
                |best, (i, &(_, d))| if d > best.1 { (i, d) } else { best },
            )
            .0;
        state.centroids.row_mut(c).copy_from_slice(batch.row(far));
        state.counts[c] = 0.0;
        reseeded.push(c);
        events.push(ClusterEvent::Reseed {
            iteration: it,
            cluster: c,
        });
    }

    let mean_n = state.counts.iter().sum::<f64>() / k as f64;
    let donors: Vec<usize> = (0..k)
        .filter(|&c| state.counts[c] > cfg.split_factor * mean_n)
        .collect();
    for &donor in &donors {
        let members: Vec<usize> = assign(batch, &state.centroids)?
            .into_iter()
            .enumerate()
            .filter(|&(_, (c, _))| c == donor)
            .map(|(i, _)| i)
            .collect();
        let Some(&member) = members.choose(rng) else {
            continue;
        };
        let target = match reseeded.pop() {
            Some(t) => t,
            None => match (0..k)
                .filter(|c| !donors.contains(c))
                .min_by(|&a, &b| state.counts[a].total_cmp(&state.counts[b]))
            {
                Some(t) => t,
                None => continue,
            },
        };
        state
            .centroids
            .row_mut(target)
            .copy_from_slice(batch.row(member));
        let half = state.counts[donor] / 2.0;
        state.counts[donor] = half;
        state.counts[target] = half;
        events.push(ClusterEvent::Split {
            iteration: it,
            donor,
            target,
        });
    }
    Ok(events)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub counts: Vec<f64>,
    pub iterations: usize,
    pub events: Vec<ClusterEvent>,
}

/// Seeds with [`bf_init`] and runs the mini-batch loop.
pub fn fit(x: &Matrix, cfg: &KmeansConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    let root = RngStream::new(seed);
    let centroids = bf_init(x, cfg, &mut root.derive(0))?;
    fit_from(x, ClusterState::new(centroids), cfg, &mut root.derive(1))
}

/// Mini-batch loop from an explicit starting state. Each epoch visits the
/// points in a fresh random order; maintenance runs whenever the iteration
/// count is a multiple of the period.
pub fn fit_from(
    x: &Matrix,
    mut state: ClusterState,
    cfg: &KmeansConfig,
    rng: &mut RngStream,
) -> Result<FitResult> {
    cfg.validate()?;
    check_dims(x, &state.centroids)?;
    let n = x.rows();
    if n < state.k() {
        return Err(Error::Init(format!(
            "{n} points cannot fill k={} clusters",
            state.k()
        )));
    }
    let total = cfg.iterations(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut events = Vec::new();
    for _ in 0..total {
        if cursor >= n {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = gather(x, &order[cursor..end]);
        cursor = end;
        minibatch_step(&mut state, &batch)?;
        if state.iteration % cfg.maintenance_period == 0 {
            events.extend(maintain(&mut state, &batch, cfg, rng)?);
        }
    }
    let a = assign(x, &state.centroids)?;
    Ok(FitResult {
        inertia: exact_inertia(x, &state.centroids, &a),
        assignments: a.into_iter().map(|(k, _)| k).collect(),
        centroids: state.centroids,
        counts: state.counts,
        iterations: state.iteration,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `k` tight blobs with centers far apart, `per` points each.
    pub(crate) fn blobs(k: usize, per: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        let centers = Matrix::from_fn(k, dim, |_, _| 20.0 * rng.normal());
        Matrix::from_fn(k * per, dim, |i, j| {
            centers[(i / per, j)] + 0.3 * rng.normal()
        })
    }

    fn naive_inertia(x: &Matrix, c: &Matrix) -> f64 {
        x.row_iter()
            .map(|r| {
                c.row_iter()
                    .map(|cr| sq_dist(r, cr))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    #[test]
    fn inertia_examples() {
        let c = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            inertia(&Matrix::from_rows(&[vec![0.0, 2.0]]).unwrap(), &c).unwrap(),
            4.0
        );
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(inertia(&x, &x).unwrap(), 0.0);
        let mut rng = RngStream::new(9);
        let x = Matrix::from_fn(200, 7, |_, _| rng.normal());
        let c = Matrix::from_fn(6, 7, |_, _| rng.normal());
        let (a, b) = (inertia(&x, &c).unwrap(), naive_inertia(&x, &c));
        assert!((a - b).abs() <= 1e-9 * b);
    }

    #[test]
    fn batched_distances_match_pairwise_loop() {
        let mut rng = RngStream::new(3);
        let x = Matrix::from_fn(300, 16, |_, _| rng.normal() * 3.0);
        let c = Matrix::from_fn(9, 16, |_, _| rng.normal() * 3.0);
        for (i, (k, d)) in assign(&x, &c).unwrap().into_iter().enumerate() {
            let exact: Vec<f64> = c.row_iter().map(|cr| sq_dist(x.row(i), cr)).collect();
            let best = exact.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((d - exact[k]).abs() <= 1e-9 * exact[k].max(1.0));
            assert!((exact[k] - best).abs() <= 1e-9 * best.max(1.0));
        }
    }

    #[test]
    fn eta_cases() {
        let mut s = ClusterState::new(Matrix::from_rows(&[vec![10.0, 10.0]]).unwrap());
        let batch = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        minibatch_step(&mut s, &batch).unwrap();
        assert_eq!(s.centroids.row(0), &[2.0, 3.0]);
        assert_eq!(s.counts, vec![2.0]);

        let mut s = ClusterState::new(Matrix::from_rows(&[vec![0.0]]).unwrap());
        s.counts[0] = 90.0;
        let batch = Matrix::filled(10, 1, 5.0);
        minibatch_step(&mut s, &batch).unwrap();
        assert!((s.centroids[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s.iteration, 1);
    }

    /// Scalar replay of the update rule.
    #[test]
    fn replay_matches_scalar_reference() {
        let mut rng = RngStream::new(11);
        let init = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let batches: Vec<Matrix> = (0..20)
            .map(|_| Matrix::from_fn(7, 2, |_, _| 2.0 * rng.normal()))
            .collect();
        let mut s = ClusterState::new(init.clone());
        let mut c: Vec<[f64; 2]> = init.row_iter().map(|r| [r[0], r[1]]).collect();
        let mut n = [0.0f64; 3];
        for b in &batches {
            minibatch_step(&mut s, b).unwrap();
            let mut sum = [[0.0; 2]; 3];
            let mut cnt = [0.0; 3];
            for r in b.row_iter() {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (k, ck) in c.iter().enumerate() {
                    let d = (r[0] - ck[0]).powi(2) + (r[1] - ck[1]).powi(2);
                    if d < bd {
                        bd = d;
                        best = k;
                    }
                }
                sum[best][0] += r[0];
                sum[best][1] += r[1];
                cnt[best] += 1.0;
            }
            for k in 0..3 {
                if cnt[k] > 0.0 {
                    let eta = cnt[k] / (n[k] + cnt[k]);
                    for j in 0..2 {
                        c[k][j] += eta * (sum[k][j] / cnt[k] - c[k][j]);
                    }
                    n[k] += cnt[k];
                }
            }
        }
        for k in 0..3 {
            for j in 0..2 {
                assert!((s.centroids[(k, j)] - c[k][j]).abs() <= 1e-12);
            }
        }
        assert_eq!(s.counts.to_vec(), n.to_vec());
    }

    fn state_with_counts(counts: &[f64]) -> ClusterState {
        let k = counts.len();
        let mut s = ClusterState::new(Matrix::from_fn(k, 2, |i, j| (i * 10 + j) as f64));
        s.counts = counts.to_vec();
        s.iteration = 10;
        s
    }

    #[test]
    fn maintenance_thresholds() {
        let cfg = KmeansConfig::new(3);
        let batch = Matrix::from_fn(12, 2, |i, j| (i + j) as f64);
        let mut rng = RngStream::new(1);

        let mut s = state_with_counts(&[50.0, 50.0, 50.0]);
        assert!(maintain(&mut s, &batch, &cfg, &mut rng).unwrap().is_empty());

        let mut s = state_with_counts(&[1000.0, 1.0]);
        let ev = maintain(&mut s, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(
            ev,
            [ClusterEvent::Reseed {
                iteration: 10,
                cluster: 1
            }]
        );
        assert_eq!(s.counts[1], 0.0);

        for counts in [[130.0, 10.0, 10.0], [1300.0, 10.0, 10.0]] {
            let mut s = state_with_counts(&counts);
            let ev = maintain(&mut s, &batch, &cfg, &mut rng).unwrap();
            assert!(
                !ev.iter().any(|e| matches!(e, ClusterEvent::Split { .. })),
                "{counts:?}"
            );
        }
    }

    #[test]
    fn engineered_split_fires() {
        // 20 clusters: donor at 1000, rest at 20 → mean 69, 12·mean 828
        let mut counts = vec![20.0; 20];
        counts[0] = 1000.0;
        counts[7] = 15.0;
        let mut s = state_with_counts(&counts);
        // every batch point is nearest to centroid 0
        let batch = Matrix::from_fn(8, 2, |i, _| -1.0 - i as f64);
        let before = s.centroids.clone();
        let ev = maintain(
            &mut s,
            &batch,
            &KmeansConfig::new(20),
            &mut RngStream::new(2),
        )
        .unwrap();
        assert_eq!(
            ev,
            [ClusterEvent::Split {
                iteration: 10,
                donor: 0,
                target: 7
            }]
        );
        assert_eq!((s.counts[0], s.counts[7]), (500.0, 500.0));
        assert!(batch.row_iter().any(|r| r == s.centroids.row(7)));
        assert_ne!(before.row(7), s.centroids.row(7));
    }

    #[test]
    fn split_prefers_freshly_reseeded_slot() {
        let mut counts = vec![100.0; 20];
        counts[0] = 10_000.0;
        counts[5] = 1.0;
        let mut s = state_with_counts(&counts);
        let batch = Matrix::from_fn(8, 2, |i, _| -1.0 - i as f64);
        let ev = maintain(
            &mut s,
            &batch,
            &KmeansConfig::new(20),
            &mut RngStream::new(2),
        )
        .unwrap();
        assert_eq!(
            ev[0],
            ClusterEvent::Reseed {
                iteration: 10,
                cluster: 5
            }
        );
        assert_eq!(
            ev[1],
            ClusterEvent::Split {
                iteration: 10,
                donor: 0,
                target: 5
            }
        );
    }

    #[test]
    fn kmeans_pp_needs_distinct_points() {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(kmeans_pp(&x, 2, &mut RngStream::new(0)).is_ok());
        assert!(matches!(
            kmeans_pp(&x, 3, &mut RngStream::new(0)),
            Err(Error::Init(_))
        ));
        let cfg = KmeansConfig::new(3);
        assert!(matches!(fit(&x, &cfg, 0), Err(Error::Init(_))));
    }

    #[test]
    fn single_cluster_is_pool_mean() {
        let x = blobs(3, 50, 4, 5);
        let mut cfg = KmeansConfig::new(1);
        cfg.subsamples = 4;
        cfg.subsample_fraction = 0.2;
        let c = bf_init(&x, &cfg, &mut RngStream::new(3)).unwrap();
        // recompute the pool to compare against its mean
        let mut rng = RngStream::new(3);
        let seed = kmeans_pp(&x, 1, &mut rng).unwrap();
        let mut pool_sum = vec![0.0; 4];
        for _ in 0..4 {
            let mut idx = index::sample(&mut rng, 150, 30).into_vec();
            idx.sort_unstable();
            let (cj, _) = lloyd(&gather(&x, &idx), &seed, 20).unwrap();
            for (s, v) in pool_sum.iter_mut().zip(cj.row(0)) {
                *s += v / 4.0;
            }
        }
        for (a, b) in c.row(0).iter().zip(&pool_sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_get_one_centroid_each() {
        let x = blobs(5, 40, 3, 8);
        let mut cfg = KmeansConfig::new(5);
        cfg.subsample_fraction = 0.5;
        let c = bf_init(&x, &cfg, &mut RngStream::new(4)).unwrap();
        let owners: std::collections::BTreeSet<usize> = (0..5)
            .map(|b| assign(&gather(&x, &[b * 40]), &c).unwrap()[0].0)
            .collect();
        assert_eq!(owners.len(), 5);
    }

    #[test]
    fn degenerate_config_is_plain_kmeans() {
        let x = blobs(4, 30, 3, 12);
        let mut cfg = KmeansConfig::new(4);
        cfg.subsamples = 1;
        cfg.subsample_fraction = 1.0;
        let c = bf_init(&x, &cfg, &mut RngStream::new(6)).unwrap();
        let seed = kmeans_pp(&x, 4, &mut RngStream::new(6)).unwrap();
        let (direct, _) = lloyd(&x, &seed, 20).unwrap();
        let sorted = |m: &Matrix| {
            let mut rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.to_vec()).collect();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows
        };
        assert_eq!(sorted(&c), sorted(&direct));
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let mut rng = RngStream::new(2);
        let x = Matrix::from_fn(6, 3, |_, _| rng.normal());
        let mut cfg = KmeansConfig::new(6);
        cfg.subsamples = 2;
        cfg.batch_size = 6;
        let r = fit(&x, &cfg, 1).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn fit_is_deterministic() {
        let x = blobs(4, 100, 5, 2);
        let mut cfg = KmeansConfig::new(4);
        cfg.batch_size = 64;
        cfg.subsample_fraction = 0.1;
        assert_eq!(fit(&x, &cfg, 7).unwrap(), fit(&x, &cfg, 7).unwrap());
    }

    #[test]
    fn coincident_start_triggers_reseed() {
        let x = blobs(4, 100, 5, 2);
        let mut cfg = KmeansConfig::new(4);
        cfg.batch_size = 50;
        let mean = x.column_sums();
        let start = ClusterState::new(Matrix::from_fn(4, 5, |_, j| mean[j] / x.rows() as f64));
        let r = fit_from(&x, start, &cfg, &mut RngStream::new(0)).unwrap();
        assert!(r
            .events
            .iter()
            .any(|e| matches!(e, ClusterEvent::Reseed { .. })));
    }

    proptest! {
        #[test]
        fn update_contracts_toward_batch_mean(seed in 0u64..500, n_prev in 0.0f64..100.0, n_b in 1usize..20) {
            let mut rng = RngStream::new(seed);
            let c0: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let mut s = ClusterState::new(Matrix::from_rows(std::slice::from_ref(&c0)).unwrap());
            s.counts[0] = n_prev;
            let batch = Matrix::from_fn(n_b, 3, |_, _| rng.normal());
            let mean: Vec<f64> = batch.column_sums().iter().map(|v| v / n_b as f64).collect();
            minibatch_step(&mut s, &batch).unwrap();
            let eta = n_b as f64 / (n_prev + n_b as f64);
            prop_assert!(eta > 0.0 && eta <= 1.0);
            let before = sq_dist(&c0, &mean).sqrt();
            let after = sq_dist(s.centroids.row(0), &mean).sqrt();
            prop_assert!((after - (1.0 - eta) * before).abs() <= 1e-12 * before.max(1.0));
        }

        #[test]
        fn counts_grow_between_maintenance(seed in 0u64..200) {
            let mut rng = RngStream::new(seed);
            let mut s = ClusterState::new(Matrix::from_fn(4, 2, |_, _| rng.normal()));
            for _ in 0..5 {
                let before = s.counts.clone();
                minibatch_step(&mut s, &Matrix::from_fn(9, 2, |_, _| rng.normal())).unwrap();
                prop_assert!(s.counts.iter().zip(&before).all(|(a, b)| a >= b));
            }
        }
    }
}
