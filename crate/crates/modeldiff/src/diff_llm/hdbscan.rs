//! HDBSCAN clustering over Euclidean points.
//!
//! The usual pipeline: core distances with neighborhood size `min_samples`,
//! mutual-reachability distances, a minimum spanning tree (Prim, ties broken
//! by lower point index), a single-linkage hierarchy, a condensed tree at
//! `min_cluster_size`, and excess-of-mass cluster extraction. The hierarchy
//! root competes in the extraction, so data forming one tight clump yields
//! one cluster instead of all-noise.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("non-finite coordinate at point {point}, dimension {dim}")]
    NonFinite { point: usize, dim: usize },
    #[error("point {point} has {len} dimensions, expected {expected}")]
    RaggedPoints {
        point: usize,
        len: usize,
        expected: usize,
    },
    #[error("min_cluster_size must be >= 2, got {0}")]
    MinClusterSizeTooSmall(usize),
    #[error("min_samples must be >= 1")]
    MinSamplesTooSmall,
}

const NOISE: i64 = -1;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct MstEdge {
    a: usize,
    b: usize,
    dist: f64,
}

/// Child reference inside the condensed tree.
enum Child {
    Point(usize),
    Cluster(usize),
}

struct CondensedEntry {
    parent: usize,
    child: Child,
    lambda: f64,
    size: usize,
}

/// Assigns a cluster label to every point; `-1` marks noise. Deterministic
/// given input order: ties in tree construction break on lower point index.
pub fn hdbscan(
    points: &[Vec<f64>],
    min_cluster_size: usize,
    min_samples: usize,
) -> Result<Vec<i64>, ClusterError> {
    if min_cluster_size < 2 {
        return Err(ClusterError::MinClusterSizeTooSmall(min_cluster_size));
    }
    if min_samples == 0 {
        return Err(ClusterError::MinSamplesTooSmall);
    }
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ClusterError::RaggedPoints {
                point: i,
                len: p.len(),
                expected: dim,
            });
        }
        for (j, v) in p.iter().enumerate() {
            if !v.is_finite() {
                return Err(ClusterError::NonFinite { point: i, dim: j });
            }
        }
    }
    // Undersized inputs are all noise, not an error.
    if n < min_cluster_size {
        return Ok(vec![NOISE; n]);
    }

    let core = core_distances(points, min_samples);
    let edges = minimum_spanning_tree(points, &core);
    let (tree_children, tree_dist, tree_size) = single_linkage(&edges, n);
    let (entries, births, n_clusters) =
        condense(&tree_children, &tree_dist, &tree_size, n, min_cluster_size);
    let selected = extract_excess_of_mass(&entries, &births, n_clusters);
    Ok(label_points(&entries, &selected, n_clusters, n))
}

/// Distance to the `min_samples`-th nearest neighbor, counting the point
/// itself.
fn core_distances(points: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let k = min_samples.min(n);
    (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n).map(|j| euclidean(&points[i], &points[j])).collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[k - 1]
        })
        .collect()
}

fn mutual_reachability(points: &[Vec<f64>], core: &[f64], a: usize, b: usize) -> f64 {
    euclidean(&points[a], &points[b]).max(core[a]).max(core[b])
}

/// Prim's algorithm over the complete mutual-reachability graph. When two
/// candidate edges tie on distance the lower point index wins.
fn minimum_spanning_tree(points: &[Vec<f64>], core: &[f64]) -> Vec<MstEdge> {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best_dist = vec![f64::INFINITY; n];
    let mut best_parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));

    in_tree[0] = true;
    for (j, slot) in best_dist.iter_mut().enumerate().skip(1) {
        *slot = mutual_reachability(points, core, 0, j);
    }

    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            if next == usize::MAX || best_dist[j] < best_dist[next] {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: best_parent[next].min(next),
            b: best_parent[next].max(next),
            dist: best_dist[next],
        });
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = mutual_reachability(points, core, next, j);
            if d < best_dist[j] {
                best_dist[j] = d;
                best_parent[j] = next;
            }
        }
    }

    edges.sort_by(|x, y| {
        x.dist
            .partial_cmp(&y.dist)
            .unwrap()
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    edges
}

/// Builds the single-linkage dendrogram. Internal node `t` (0-based) is
/// tree id `n + t`; leaves are ids `0..n`. Returns per-internal-node
/// children, merge distance, and subtree size.
fn single_linkage(edges: &[MstEdge], n: usize) -> (Vec<(usize, usize)>, Vec<f64>, Vec<usize>) {
    let total = 2 * n - 1;
    let mut parent: Vec<usize> = (0..total).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let mut children = Vec::with_capacity(n - 1);
    let mut dists = Vec::with_capacity(n - 1);
    let mut sizes_out = Vec::with_capacity(n - 1);
    let mut sizes = vec![1usize; total];
    // current tree id of each union-find root
    let mut root_node: Vec<usize> = (0..total).collect();

    for (t, edge) in edges.iter().enumerate() {
        let ra = find(&mut parent, edge.a);
        let rb = find(&mut parent, edge.b);
        let (na, nb) = (root_node[ra], root_node[rb]);
        let node = n + t;
        children.push((na.min(nb), na.max(nb)));
        dists.push(edge.dist);
        let size = sizes[na] + sizes[nb];
        sizes_out.push(size);
        sizes[node] = size;
        parent[ra] = rb;
        let rb = find(&mut parent, rb);
        root_node[rb] = node;
    }
    (children, dists, sizes_out)
}

fn lambda_of(dist: f64) -> f64 {
    if dist > 0.0 {
        1.0 / dist
    } else {
        f64::INFINITY
    }
}

/// Collects the leaf points under a tree node.
fn leaves_under(node: usize, n: usize, children: &[(usize, usize)]) -> Vec<usize> {
    let mut stack = vec![node];
    let mut leaves = Vec::new();
    while let Some(v) = stack.pop() {
        if v < n {
            leaves.push(v);
        } else {
            let (l, r) = children[v - n];
            stack.push(l);
            stack.push(r);
        }
    }
    leaves.sort_unstable();
    leaves
}

/// Walks the dendrogram top-down, keeping only splits where both sides have
/// at least `min_cluster_size` points. Returns the condensed entries, the
/// birth lambda of each condensed cluster, and the cluster count. Cluster 0
/// is the root (born at lambda 0).
fn condense(
    children: &[(usize, usize)],
    dists: &[f64],
    sizes: &[usize],
    n: usize,
    min_cluster_size: usize,
) -> (Vec<CondensedEntry>, Vec<f64>, usize) {
    let mut entries = Vec::new();
    let mut births = vec![0.0f64];
    let root = n + children.len() - 1;
    let mut stack = vec![(root, 0usize)];

    let node_size = |v: usize| if v < n { 1 } else { sizes[v - n] };

    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            // A bare leaf reached the top of a condensed cluster: it falls
            // out at infinite density (zero distance).
            entries.push(CondensedEntry {
                parent: cluster,
                child: Child::Point(node),
                lambda: f64::INFINITY,
                size: 1,
            });
            continue;
        }
        let (left, right) = children[node - n];
        let lambda = lambda_of(dists[node - n]);
        let left_big = node_size(left) >= min_cluster_size;
        let right_big = node_size(right) >= min_cluster_size;

        match (left_big, right_big) {
            (true, true) => {
                for side in [left, right] {
                    let id = births.len();
                    births.push(lambda);
                    entries.push(CondensedEntry {
                        parent: cluster,
                        child: Child::Cluster(id),
                        lambda,
                        size: node_size(side),
                    });
                    stack.push((side, id));
                }
            }
            (true, false) => {
                for p in leaves_under(right, n, children) {
                    entries.push(CondensedEntry {
                        parent: cluster,
                        child: Child::Point(p),
                        lambda,
                        size: 1,
                    });
                }
                stack.push((left, cluster));
            }
            (false, true) => {
                for p in leaves_under(left, n, children) {
                    entries.push(CondensedEntry {
                        parent: cluster,
                        child: Child::Point(p),
                        lambda,
                        size: 1,
                    });
                }
                stack.push((right, cluster));
            }
            (false, false) => {
                for side in [left, right] {
                    for p in leaves_under(side, n, children) {
                        entries.push(CondensedEntry {
                            parent: cluster,
                            child: Child::Point(p),
                            lambda,
                            size: 1,
                        });
                    }
                }
            }
        }
    }
    let n_clusters = births.len();
    (entries, births, n_clusters)
}

/// Excess-of-mass stability: points (and child clusters) contribute their
/// persistence above the cluster's birth density.
fn stability(entries: &[CondensedEntry], births: &[f64], cluster: usize) -> f64 {
    entries
        .iter()
        .filter(|e| e.parent == cluster)
        .map(|e| {
            let birth = births[cluster];
            if birth.is_infinite() {
                0.0
            } else {
                (e.lambda - birth) * e.size as f64
            }
        })
        .sum()
}

/// Bottom-up excess-of-mass selection. Children were created after their
/// parents, so descending id order visits children first. The root (id 0)
/// competes like any other cluster.
fn extract_excess_of_mass(
    entries: &[CondensedEntry],
    births: &[f64],
    n_clusters: usize,
) -> Vec<bool> {
    let mut child_clusters: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for e in entries {
        if let Child::Cluster(c) = e.child {
            child_clusters[e.parent].push(c);
        }
    }
    let own: Vec<f64> = (0..n_clusters).map(|c| stability(entries, births, c)).collect();
    let mut adjusted = own.clone();
    let mut selected = vec![false; n_clusters];

    for c in (0..n_clusters).rev() {
        if child_clusters[c].is_empty() {
            selected[c] = true;
            continue;
        }
        let child_sum: f64 = child_clusters[c].iter().map(|&k| adjusted[k]).sum();
        if own[c] > child_sum {
            selected[c] = true;
            // deselect every descendant
            let mut stack = child_clusters[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(child_clusters[k].iter().copied());
            }
        } else {
            adjusted[c] = child_sum;
        }
    }
    selected
}

/// Labels every point with its selected ancestor cluster, renumbering
/// selected clusters 0..k in id order; unclaimed points are noise.
fn label_points(
    entries: &[CondensedEntry],
    selected: &[bool],
    n_clusters: usize,
    n: usize,
) -> Vec<i64> {
    let mut label_of_cluster = vec![NOISE; n_clusters];
    let mut next = 0i64;
    for c in 0..n_clusters {
        if selected[c] {
            label_of_cluster[c] = next;
            next += 1;
        }
    }
    // Propagate labels down to unselected descendants of selected clusters.
    let mut cluster_parent = vec![usize::MAX; n_clusters];
    for e in entries {
        if let Child::Cluster(c) = e.child {
            cluster_parent[c] = e.parent;
        }
    }
    let resolved_label = |mut c: usize| -> i64 {
        loop {
            if selected[c] {
                return label_of_cluster[c];
            }
            if cluster_parent[c] == usize::MAX {
                return NOISE;
            }
            c = cluster_parent[c];
        }
    };

    let mut labels = vec![NOISE; n];
    for e in entries {
        if let Child::Point(p) = e.child {
            labels[p] = resolved_label(e.parent);
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_blob(
        rng: &mut ChaCha8Rng,
        center: &[f64],
        spread: f64,
        count: usize,
    ) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                center
                    .iter()
                    .map(|c| {
                        // Box-Muller
                        let u1: f64 = rng.gen::<f64>().max(1e-12);
                        let u2: f64 = rng.gen();
                        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                        c + spread * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_blobs_and_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = gaussian_blob(&mut rng, &[0.0, 0.0, 0.0], 1.0, 50);
        points.extend(gaussian_blob(&mut rng, &[40.0, 0.0, 0.0], 1.0, 50));
        points.push(vec![500.0, 500.0, 500.0]);
        points.push(vec![-500.0, 500.0, -500.0]);

        let labels = hdbscan(&points, 10, 10).unwrap();
        let blob_a = &labels[..50];
        let blob_b = &labels[50..100];
        assert!(blob_a.iter().all(|&l| l == blob_a[0] && l != NOISE));
        assert!(blob_b.iter().all(|&l| l == blob_b[0] && l != NOISE));
        assert_ne!(blob_a[0], blob_b[0]);
        assert_eq!(labels[100], NOISE);
        assert_eq!(labels[101], NOISE);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let points = vec![vec![1.0, 2.0]; 5];
        let labels = hdbscan(&points, 5, 5).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn undersized_input_is_all_noise() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0]];
        let labels = hdbscan(&points, 10, 2).unwrap();
        assert_eq!(labels, vec![NOISE, NOISE, NOISE]);
    }

    #[test]
    fn nan_coordinates_error() {
        let points = vec![vec![0.0, 1.0], vec![f64::NAN, 0.0], vec![1.0, 1.0]];
        assert!(matches!(
            hdbscan(&points, 2, 2),
            Err(ClusterError::NonFinite { point: 1, dim: 0 })
        ));
    }

    #[test]
    fn translation_leaves_assignment_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut points = gaussian_blob(&mut rng, &[0.0, 0.0], 0.5, 30);
        points.extend(gaussian_blob(&mut rng, &[20.0, 20.0], 0.5, 30));
        let shifted: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|v| v + 1000.0).collect())
            .collect();
        let labels = hdbscan(&points, 8, 8).unwrap();
        let labels_shifted = hdbscan(&shifted, 8, 8).unwrap();
        assert_eq!(labels, labels_shifted);
    }

    #[test]
    fn non_noise_clusters_meet_min_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0])
            .collect();
        let labels = hdbscan(&points, 6, 6).unwrap();
        let max_label = labels.iter().copied().max().unwrap_or(NOISE);
        for l in 0..=max_label.max(0) {
            let count = labels.iter().filter(|&&x| x == l).count();
            if labels.contains(&l) {
                assert!(count >= 6, "cluster {l} has only {count} members");
            }
        }
    }
}
