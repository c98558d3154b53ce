//! Ward agglomerative clustering with the nearest-neighbor-chain algorithm.
//!
//! Points may carry weights (multiplicities), so exact duplicates can be
//! collapsed before clustering without changing the result.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Ids of the merged clusters. Leaves are `0..n`; the cluster created by
    /// the `i`-th merge of the chain has id `n + i`.
    pub a: usize,
    pub b: usize,
    /// Increase in within-cluster sum of squares caused by the merge.
    pub cost: f64,
    /// Id of the created cluster.
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub dim: usize,
    /// `k x dim` row-major weighted member means.
    pub centroids: Vec<f64>,
    /// Cluster of each input point. Clusters are numbered by their smallest
    /// member index.
    pub labels: Vec<usize>,
}

fn ward_cost(na: f64, ca: &[f64], nb: f64, cb: &[f64]) -> f64 {
    let d2: f64 = ca.iter().zip(cb).map(|(a, b)| (a - b) * (a - b)).sum();
    na * nb / (na + nb) * d2
}

/// Full merge sequence, sorted by cost with ties in creation order.
pub fn ward_linkage(points: &[f64], dim: usize, weights: &[f64]) -> Result<Vec<Merge>> {
    let n = weights.len();
    if points.len() != n * dim {
        return Err(Error::shape(format!(
            "{} coordinates for {n} points of dimension {dim}",
            points.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::input("point weights must be positive"));
    }
    let mut centroid = points.to_vec();
    let mut size = weights.to_vec();
    let mut id: Vec<usize> = (0..n).collect();
    let mut active = vec![true; n];
    let mut chain: Vec<usize> = Vec::new();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));

    while merges.len() + 1 < n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let a = *chain.last().unwrap();
        let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
        let ca = &centroid[a * dim..(a + 1) * dim];
        let mut best = prev;
        let mut best_cost = prev
            .map(|p| ward_cost(size[a], ca, size[p], &centroid[p * dim..(p + 1) * dim]))
            .unwrap_or(f64::INFINITY);
        for j in 0..n {
            if !active[j] || j == a || Some(j) == prev {
                continue;
            }
            let c = ward_cost(size[a], ca, size[j], &centroid[j * dim..(j + 1) * dim]);
            if c < best_cost {
                best_cost = c;
                best = Some(j);
            }
        }
        let b = best.expect("at least two active clusters");
        if Some(b) == prev {
            chain.pop();
            chain.pop();
            let (lo, hi) = (a.min(b), a.max(b));
            merges.push(Merge {
                a: id[lo],
                b: id[hi],
                cost: best_cost,
                id: n + merges.len(),
            });
            let (nl, nh) = (size[lo], size[hi]);
            for d in 0..dim {
                centroid[lo * dim + d] =
                    (nl * centroid[lo * dim + d] + nh * centroid[hi * dim + d]) / (nl + nh);
            }
            size[lo] = nl + nh;
            id[lo] = n + merges.len() - 1;
            active[hi] = false;
        } else {
            chain.push(b);
        }
    }

    let mut order: Vec<usize> = (0..merges.len()).collect();
    order.sort_by(|&x, &y| merges[x].cost.total_cmp(&merges[y].cost).then(x.cmp(&y)));
    Ok(order.into_iter().map(|i| merges[i]).collect())
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Applies the `n - k` cheapest merges and returns per-leaf labels numbered
/// by smallest member index.
pub fn cut(merges: &[Merge], n: usize, k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..2 * n).collect();
    for m in merges.iter().take(n.saturating_sub(k)) {
        let ra = find(&mut parent, m.a);
        let rb = find(&mut parent, m.b);
        parent[ra] = m.id;
        parent[rb] = m.id;
    }
    let mut labels = vec![0; n];
    let mut root_label = std::collections::HashMap::new();
    for (leaf, label) in labels.iter_mut().enumerate() {
        let r = find(&mut parent, leaf);
        let next = root_label.len();
        *label = *root_label.entry(r).or_insert(next);
    }
    labels
}

/// Ward clustering of weighted points into `k` clusters.
pub fn fit_points(points: &[f64], dim: usize, weights: &[f64], k: usize) -> Result<Clustering> {
    let n = weights.len();
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if k > n {
        return Err(Error::input(format!("k = {k} exceeds the {n} available points")));
    }
    let merges = ward_linkage(points, dim, weights)?;
    let labels = cut(&merges, n, k);
    let mut centroids = vec![0.0; k * dim];
    let mut mass = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        mass[l] += weights[i];
        for d in 0..dim {
            centroids[l * dim + d] += weights[i] * points[i * dim + d];
        }
    }
    for l in 0..k {
        for d in 0..dim {
            centroids[l * dim + d] /= mass[l];
        }
    }
    Ok(Clustering {
        k,
        dim,
        centroids,
        labels,
    })
}
