//! Agglomerative clustering of vehicles on `1 − similarity` distances.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::similarity::SimilarityMatrix;

/// Linkage criterion. Declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Ward,
    Average,
    Complete,
    Single,
}

impl Linkage {
    pub const ALL: [Linkage; 4] = [Linkage::Ward, Linkage::Average, Linkage::Complete, Linkage::Single];

    pub fn as_str(self) -> &'static str {
        match self {
            Linkage::Ward => "ward",
            Linkage::Average => "average",
            Linkage::Complete => "complete",
            Linkage::Single => "single",
        }
    }
}

/// One merge. Leaves are `0..n`; the cluster created by merge `s` has id `n + s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    /// Size of the merged cluster.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHierarchy {
    pub n: usize,
    pub linkage: Linkage,
    pub merges: Vec<Merge>,
}

impl ClusterHierarchy {
    /// Flat cut with `k` clusters, labelled `0..k` in order of first
    /// appearance over vehicle index.
    pub fn assignments_at(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::config(format!(
                "cannot cut {} vehicles into {k} clusters",
                self.n
            )));
        }
        let mut parent: Vec<usize> = (0..2 * self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (s, m) in self.merges.iter().take(self.n - k).enumerate() {
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = self.n + s;
            parent[rb] = self.n + s;
        }
        let mut map: Vec<Option<usize>> = vec![None; 2 * self.n];
        let mut next = 0;
        let mut labels = Vec::with_capacity(self.n);
        for v in 0..self.n {
            let r = find(&mut parent, v);
            let l = *map[r].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            labels.push(l);
        }
        Ok(labels)
    }

    /// Cut one merge coarser than `k` (floor 2, or 1 when `k` is 1).
    pub fn coarser_assignments(&self, k: usize) -> Result<Vec<usize>> {
        self.assignments_at(coarser_k(k))
    }
}

pub fn coarser_k(k: usize) -> usize {
    if k <= 2 {
        k
    } else {
        k - 1
    }
}

/// Agglomerate on `1 − sim`.
pub fn agglomerate(sim: &SimilarityMatrix, linkage: Linkage) -> Result<ClusterHierarchy> {
    let n = sim.n;
    let d: Vec<f64> = sim.values.iter().map(|s| 1.0 - s).collect();
    agglomerate_distances(n, &d, linkage)
}

/// Agglomerate on an explicit symmetric `n × n` dissimilarity matrix using
/// Lance–Williams updates. Ties go to the lowest slot pair.
pub fn agglomerate_distances(n: usize, dist: &[f64], linkage: Linkage) -> Result<ClusterHierarchy> {
    if n < 2 {
        return Err(Error::config("agglomeration needs at least two vehicles"));
    }
    if dist.len() != n * n || dist.iter().any(|v| !v.is_finite()) {
        return Err(Error::Tensor(format!("distance matrix must be {n}×{n} and finite")));
    }
    let mut d = dist.to_vec();
    let mut active = vec![true; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let v = d[i * n + j];
                if best.is_none_or(|(_, _, b)| v < b) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, h) = best.expect("two active clusters");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let (dki, dkj) = (d[k * n + i], d[k * n + j]);
            let nk = size[k] as f64;
            let v = match linkage {
                Linkage::Single => dki.min(dkj),
                Linkage::Complete => dki.max(dkj),
                Linkage::Average => (ni * dki + nj * dkj) / (ni + nj),
                Linkage::Ward => ((ni + nk) * dki + (nj + nk) * dkj - nk * h) / (ni + nj + nk),
            };
            d[k * n + i] = v;
            d[i * n + k] = v;
        }
        merges.push(Merge {
            a: id[i].min(id[j]),
            b: id[i].max(id[j]),
            height: h,
            size: size[i] + size[j],
        });
        active[j] = false;
        size[i] += size[j];
        id[i] = n + step;
    }
    Ok(ClusterHierarchy { n, linkage, merges })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub silhouette: f64,
    pub calinski_harabasz: f64,
}

fn check_labels(n: usize, labels: &[usize]) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::Tensor(format!("{} labels for {n} vehicles", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::config("cluster labels must be contiguous from 0"));
    }
    Ok(k)
}

/// Mean silhouette on `1 − sim`. Singleton clusters score 0.
pub fn silhouette(sim: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    let n = sim.n;
    let k = check_labels(n, labels)?;
    if k < 2 {
        return Err(Error::config("silhouette needs at least two clusters"));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let li = labels[i];
        if counts[li] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sim.distance(i, j);
            }
        }
        let a = sums[li] / (counts[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Classical MDS coordinates of `1 − sim`, one row per vehicle. Only
/// positive-eigenvalue axes are kept.
pub fn mds_embedding(sim: &SimilarityMatrix) -> Vec<Vec<f64>> {
    let n = sim.n;
    let mut b: Vec<f64> = (0..n * n)
        .map(|ix| {
            let d = sim.distance(ix / n, ix % n);
            -0.5 * d * d
        })
        .collect();
    let row: Vec<f64> = (0..n)
        .map(|a| b[a * n..(a + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for a in 0..n {
        for c in 0..n {
            b[a * n + c] += grand - row[a] - row[c];
        }
    }
    let (vals, vecs) = symmetric_eigen(&b, n);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(*v));
    let axes: Vec<usize> = (0..n).filter(|&k| vals[k] > 1e-12 * top.max(1e-300)).collect();
    (0..n)
        .map(|i| axes.iter().map(|&k| vecs[i * n + k] * libm::sqrt(vals[k])).collect())
        .collect()
}

/// Calinski–Harabasz index in the MDS embedding. Zero when `K == n` or all
/// dispersion vanishes; infinite when only the within-cluster part vanishes.
pub fn calinski_harabasz(sim: &SimilarityMatrix, labels: &[usize]) -> Result<f64> {
    let n = sim.n;
    let k = check_labels(n, labels)?;
    if k < 2 {
        return Err(Error::config("Calinski-Harabasz needs at least two clusters"));
    }
    if k == n {
        return Ok(0.0);
    }
    let x = mds_embedding(sim);
    let dim = x.first().map_or(0, Vec::len);
    let mut centroid = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    let mut overall = vec![0.0; dim];
    for (xi, &l) in x.iter().zip(labels) {
        counts[l] += 1;
        for t in 0..dim {
            centroid[l][t] += xi[t];
            overall[t] += xi[t];
        }
    }
    for (c, &m) in centroid.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= m as f64);
    }
    overall.iter_mut().for_each(|v| *v /= n as f64);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let between: f64 = (0..k).map(|c| counts[c] as f64 * sq(&centroid[c], &overall)).sum();
    let within: f64 = x.iter().zip(labels).map(|(xi, &l)| sq(xi, &centroid[l])).sum();
    if within <= 1e-15 * (between + within).max(1e-300) {
        return Ok(if between > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

pub fn score_partition(sim: &SimilarityMatrix, labels: &[usize]) -> Result<PartitionScore> {
    Ok(PartitionScore {
        silhouette: silhouette(sim, labels)?,
        calinski_harabasz: calinski_harabasz(sim, labels)?,
    })
}

/// Inclusive range of candidate cluster counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn single() -> Self {
        Self { min: 1, max: 1 }
    }

    pub fn is_single(&self) -> bool {
        self.min == 1 && self.max == 1
    }
}

/// Chosen partition with its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub linkage: Option<Linkage>,
    pub k: usize,
    pub labels: Vec<usize>,
    /// Labels one merge coarser.
    pub coarser_labels: Vec<usize>,
    pub silhouette: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub hierarchy: Option<ClusterHierarchy>,
}

impl Clustering {
    /// Everyone in one cluster.
    pub fn single(n: usize) -> Self {
        Self {
            linkage: None,
            k: 1,
            labels: vec![0; n],
            coarser_labels: vec![0; n],
            silhouette: None,
            calinski_harabasz: None,
            hierarchy: None,
        }
    }

    /// Members of each cluster, in vehicle order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        groups(&self.labels)
    }
}

pub fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut g = vec![Vec::new(); k];
    for (v, &l) in labels.iter().enumerate() {
        g[l].push(v);
    }
    g
}

fn cmp_desc(a: f64, b: f64) -> Ordering {
    const TOL: f64 = 1e-12;
    if a == b || (a.is_finite() && b.is_finite() && (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)) {
        Ordering::Equal
    } else {
        b.partial_cmp(&a).unwrap_or(Ordering::Equal)
    }
}

/// Score every linkage and every `K` in range; keep the best by silhouette,
/// then CH, then smaller `K`, then linkage order.
pub fn select_clustering(sim: &SimilarityMatrix, k_range: KRange) -> Result<Clustering> {
    if k_range.min > k_range.max {
        return Err(Error::config("empty cluster-count range"));
    }
    if k_range.is_single() || sim.n == 1 {
        return Ok(Clustering::single(sim.n));
    }
    if k_range.min < 2 || k_range.max > sim.n {
        return Err(Error::config(format!(
            "cluster-count range {}..={} outside 2..={}",
            k_range.min, k_range.max, sim.n
        )));
    }
    let mut best: Option<(PartitionScore, usize, Linkage, ClusterHierarchy, Vec<usize>)> = None;
    for linkage in Linkage::ALL {
        let h = agglomerate(sim, linkage)?;
        for k in k_range.min..=k_range.max {
            let labels = h.assignments_at(k)?;
            let s = score_partition(sim, &labels)?;
            let better = match &best {
                None => true,
                Some((bs, bk, bl, _, _)) => {
                    cmp_desc(s.silhouette, bs.silhouette)
                        .then(cmp_desc(s.calinski_harabasz, bs.calinski_harabasz))
                        .then(k.cmp(bk))
                        .then(linkage.cmp(bl))
                        == Ordering::Less
                }
            };
            if better {
                best = Some((s, k, linkage, h.clone(), labels));
            }
        }
    }
    let (s, k, linkage, h, labels) = best.expect("non-empty range");
    Ok(Clustering {
        linkage: Some(linkage),
        k,
        coarser_labels: h.coarser_assignments(k)?,
        labels,
        silhouette: Some(s.silhouette),
        calinski_harabasz: Some(s.calinski_harabasz),
        hierarchy: Some(h),
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Tensor("labelings differ in length".into()));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&m| c2(m)).sum();
    let rows: f64 = (0..ka).map(|x| c2(table[x * kb..(x + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|y| c2((0..ka).map(|x| table[x * kb + y]).sum())).sum();
    let total = c2(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
