//! HDBSCAN*-style density clustering of unit embeddings.
//!
//! Core distances → mutual-reachability graph → minimum spanning tree →
//! single-linkage hierarchy → condensed tree (components smaller than
//! `min_cluster_size` fall out as points) → excess-of-mass selection. The
//! root is eligible, so a single dense group comes back as one cluster.
//! Items are processed in id order, which makes the result independent of
//! the caller's ordering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::embedding::{dot, EmbeddingTable};
use crate::error::{Error, Result};

/// Distances are floored here before inversion so duplicates get a finite λ.
const DIST_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 10,
            min_samples: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster index per item, `None` for noise.
    pub assignment: BTreeMap<String, Option<usize>>,
    /// Unit-renormalised member means, one per cluster.
    pub means: Vec<Vec<f32>>,
    pub sizes: Vec<usize>,
    /// Largest cluster, lowest index on ties.
    pub representative: usize,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, c)| **c == Some(cluster))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn noise(&self) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, c)| c.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn cluster_count(&self) -> usize {
        self.sizes.len()
    }

    /// Overrides the representative cluster.
    pub fn with_representative(mut self, cluster: usize) -> Result<Self> {
        if cluster >= self.sizes.len() {
            return Err(Error::InvalidInput(format!(
                "cluster {cluster} does not exist ({} clusters)",
                self.sizes.len()
            )));
        }
        self.representative = cluster;
        Ok(self)
    }

    pub fn representative_mean(&self) -> &[f32] {
        &self.means[self.representative]
    }
}

struct Dendrogram {
    /// Internal node `n + i` merges `children[i]` at `heights[i]`.
    children: Vec<(usize, usize)>,
    heights: Vec<f64>,
    sizes: Vec<usize>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Prim's algorithm on the dense mutual-reachability graph, ties broken by
/// lowest vertex index.
fn mst(mrd: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let n = mrd.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if !in_tree[j] && mrd[current][j] < best[j] {
                best[j] = mrd[current][j];
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next].min(next), from[next].max(next), best[next]));
        current = next;
    }
    edges
}

fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Dendrogram {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    let mut children = Vec::with_capacity(n - 1);
    let mut heights = Vec::with_capacity(n - 1);
    for (a, b, w) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + children.len();
        children.push((node_of[ra], node_of[rb]));
        heights.push(w);
        sizes.push(sizes[node_of[ra]] + sizes[node_of[rb]]);
        parent[rb] = ra;
        node_of[ra] = node;
    }
    Dendrogram {
        children,
        heights,
        sizes,
    }
}

struct CondensedCluster {
    parent: Option<usize>,
    birth_lambda: f64,
    children: Vec<usize>,
    stability: f64,
}

/// Condensed tree: clusters plus, for each point, the cluster it fell out of.
struct Condensed {
    clusters: Vec<CondensedCluster>,
    point_cluster: Vec<usize>,
}

fn lambda(height: f64) -> f64 {
    1.0 / height.max(DIST_FLOOR)
}

fn condense(n: usize, tree: &Dendrogram, min_cluster_size: usize) -> Condensed {
    let root = 2 * n - 2;
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth_lambda: 0.0,
        children: Vec::new(),
        stability: 0.0,
    }];
    let mut point_cluster = vec![0usize; n];

    let leaves = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let (l, r) = tree.children[x - n];
                stack.push(r);
                stack.push(l);
            }
        }
        out
    };

    // (dendrogram node, owning condensed cluster)
    let mut stack = vec![(root, 0usize)];
    while let Some((node, cluster)) = stack.pop() {
        // only nodes of size ≥ min_cluster_size ≥ 2 are pushed
        debug_assert!(node >= n);
        let (left, right) = tree.children[node - n];
        let lam = lambda(tree.heights[node - n]);
        let (ls, rs) = (tree.sizes[left], tree.sizes[right]);
        let birth = clusters[cluster].birth_lambda;
        match (ls >= min_cluster_size, rs >= min_cluster_size) {
            (true, true) => {
                clusters[cluster].stability += (lam - birth) * (ls + rs) as f64;
                for child in [left, right] {
                    let id = clusters.len();
                    clusters.push(CondensedCluster {
                        parent: Some(cluster),
                        birth_lambda: lam,
                        children: Vec::new(),
                        stability: 0.0,
                    });
                    clusters[cluster].children.push(id);
                    stack.push((child, id));
                }
            }
            (true, false) | (false, true) => {
                let (big, small) = if ls >= min_cluster_size {
                    (left, right)
                } else {
                    (right, left)
                };
                for p in leaves(small) {
                    point_cluster[p] = cluster;
                }
                clusters[cluster].stability += (lam - birth) * tree.sizes[small] as f64;
                stack.push((big, cluster));
            }
            (false, false) => {
                for p in leaves(node) {
                    point_cluster[p] = cluster;
                }
                clusters[cluster].stability += (lam - birth) * (ls + rs) as f64;
            }
        }
    }
    Condensed {
        clusters,
        point_cluster,
    }
}

/// Excess-of-mass selection with the root eligible.
fn select(condensed: &Condensed) -> Vec<bool> {
    let k = condensed.clusters.len();
    let mut selected = vec![false; k];
    let mut best = vec![0.0f64; k];
    // children always carry larger ids than their parent
    for c in (0..k).rev() {
        let cluster = &condensed.clusters[c];
        let subtree: f64 = cluster.children.iter().map(|&ch| best[ch]).sum();
        if cluster.children.is_empty() || cluster.stability >= subtree {
            selected[c] = true;
            best[c] = cluster.stability;
            let mut stack = cluster.children.clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend(condensed.clusters[d].children.iter().copied());
            }
        } else {
            best[c] = subtree;
        }
    }
    selected
}

pub fn cluster_embeddings(table: &EmbeddingTable, params: &ClusterParams) -> Result<ClusterResult> {
    let n = table.len();
    if params.min_cluster_size < 2 || params.min_samples < 1 {
        return Err(Error::InvalidInput(
            "min_cluster_size must be ≥ 2 and min_samples ≥ 1".into(),
        ));
    }
    if n < params.min_cluster_size || n < 2 {
        return Err(Error::TooFewItems {
            needed: params.min_cluster_size.max(2),
            got: n,
        });
    }
    let items: Vec<(&str, &[f32])> = table.iter().collect();

    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = items[i]
                .1
                .iter()
                .zip(items[j].1)
                .map(|(&a, &b)| {
                    let diff = a as f64 - b as f64;
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // core distance: distance to the min_samples-th neighbour, counting self
    let kth = (params.min_samples - 1).min(n - 1);
    let core: Vec<f64> = dist
        .iter()
        .map(|row| {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[kth]
        })
        .collect();
    let mrd: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        dist[i][j].max(core[i]).max(core[j])
                    }
                })
                .collect()
        })
        .collect();

    let tree = single_linkage(n, mst(&mrd));
    let condensed = condense(n, &tree, params.min_cluster_size);
    let selected = select(&condensed);

    // nearest selected ancestor-or-self of every condensed cluster
    let mut owner: Vec<Option<usize>> = vec![None; condensed.clusters.len()];
    for (c, slot) in owner.iter_mut().enumerate() {
        let mut x = Some(c);
        while let Some(cur) = x {
            if selected[cur] {
                *slot = Some(cur);
                break;
            }
            x = condensed.clusters[cur].parent;
        }
    }
    let raw: Vec<Option<usize>> = condensed.point_cluster.iter().map(|&c| owner[c]).collect();

    // renumber clusters by their first member in id order
    let mut renumber: BTreeMap<usize, usize> = BTreeMap::new();
    let mut order = Vec::new();
    for r in raw.iter().flatten() {
        if !renumber.contains_key(r) {
            renumber.insert(*r, order.len());
            order.push(*r);
        }
    }
    if order.is_empty() {
        return Err(Error::AllNoise);
    }
    let dim = table.dim().unwrap_or(0);
    let mut sums = vec![vec![0.0f64; dim]; order.len()];
    let mut sizes = vec![0usize; order.len()];
    let mut assignment = BTreeMap::new();
    for ((id, v), r) in items.iter().zip(&raw) {
        let label = r.map(|r| renumber[&r]);
        if let Some(c) = label {
            sizes[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(v.iter()) {
                *s += x as f64;
            }
        }
        assignment.insert(id.to_string(), label);
    }
    let means = sums
        .into_iter()
        .map(|s| {
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            s.into_iter()
                .map(|x| if norm > 0.0 { (x / norm) as f32 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut representative = 0;
    for (c, &size) in sizes.iter().enumerate() {
        if size > sizes[representative] {
            representative = c;
        }
    }
    Ok(ClusterResult {
        assignment,
        means,
        sizes,
        representative,
    })
}

/// Up to `k` members of the representative cluster closest (by cosine) to
/// its mean, descending; ties by id.
pub fn select_representatives(result: &ClusterResult, table: &EmbeddingTable, k: usize) -> Vec<String> {
    let mean = result.representative_mean();
    let mut scored: Vec<(&str, f64)> = result
        .members(result.representative)
        .into_iter()
        .filter_map(|id| table.get(id).map(|v| (id, dot(v, mean))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    scored.into_iter().take(k).map(|(id, _)| id.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preference::Modality;

    #[test]
    fn identical_points_form_one_cluster() {
        let table = EmbeddingTable::from_pairs(
            Modality::Image,
            "t",
            (0..20).map(|i| (format!("p{i:02}"), vec![0.3, 0.4, 0.5])),
        )
        .unwrap();
        let r = cluster_embeddings(&table, &ClusterParams::default()).unwrap();
        assert_eq!(r.cluster_count(), 1);
        assert!(r.noise().is_empty());
        assert_eq!(r.sizes, vec![20]);
    }

    #[test]
    fn too_few_items() {
        let table = EmbeddingTable::from_pairs(
            Modality::Image,
            "t",
            (0..5).map(|i| (format!("p{i}"), vec![1.0, i as f32])),
        )
        .unwrap();
        assert!(matches!(
            cluster_embeddings(
                &table,
                &ClusterParams {
                    min_cluster_size: 10,
                    min_samples: 5
                }
            ),
            Err(Error::TooFewItems { needed: 10, got: 5 })
        ));
    }

    #[test]
    fn small_representative_cluster_returns_all() {
        let table = EmbeddingTable::from_pairs(
            Modality::Image,
            "t",
            (0..5).map(|i| (format!("p{i}"), vec![1.0, 0.01 * i as f32])),
        )
        .unwrap();
        let r = cluster_embeddings(
            &table,
            &ClusterParams {
                min_cluster_size: 2,
                min_samples: 1,
            },
        )
        .unwrap();
        let mut reps = select_representatives(&r, &table, 9);
        assert_eq!(reps.len(), r.sizes[r.representative]);
        reps.sort();
        assert!(reps.iter().all(|id| r.assignment[id] == Some(r.representative)));
    }

    #[test]
    fn symmetric_pair_tie_broken_by_id() {
        let mut assignment = BTreeMap::new();
        assignment.insert("b".to_string(), Some(0));
        assignment.insert("a".to_string(), Some(0));
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let result = ClusterResult {
            assignment,
            means: vec![vec![1.0, 0.0]],
            sizes: vec![2],
            representative: 0,
        };
        let table = EmbeddingTable::from_pairs(Modality::Image, "t", [("b", vec![s, -s]), ("a", vec![s, s])]).unwrap();
        assert_eq!(select_representatives(&result, &table, 9), vec!["a", "b"]);
    }
}
