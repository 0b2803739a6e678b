//! Alternative large-quasi-clique heuristics used to contrast the merging
//! search on nested graph sequences.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_gamma, is_quasi_clique, Bits, HypothesisGraph};
use crate::error::{Error, Result};
use crate::rng::{self, stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RivalMethod {
    Spectral,
    LocalSearch,
    DenseSplit,
}

impl fmt::Display for RivalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RivalMethod::Spectral => "spectral",
            RivalMethod::LocalSearch => "localsearch",
            RivalMethod::DenseSplit => "densesplit",
        })
    }
}

impl FromStr for RivalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(RivalMethod::Spectral),
            "localsearch" => Ok(RivalMethod::LocalSearch),
            "densesplit" => Ok(RivalMethod::DenseSplit),
            other => Err(Error::Config(format!("unknown selection method {other:?}"))),
        }
    }
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 100;
const LOCAL_SEARCH_PASSES: usize = 50;
const SPECTRAL_SEED: u64 = 0;

pub fn rival_select(g: &HypothesisGraph, gamma: f64, method: RivalMethod) -> Result<Vec<usize>> {
    check_gamma(gamma)?;
    if g.r() == 0 {
        return Ok(Vec::new());
    }
    Ok(match method {
        RivalMethod::Spectral => spectral(g, gamma),
        RivalMethod::LocalSearch => local_search(g, gamma, LOCAL_SEARCH_PASSES),
        RivalMethod::DenseSplit => dense_split(g, gamma),
    })
}

fn keep_best(best: &mut Vec<usize>, candidate: Vec<usize>) {
    if candidate.len() > best.len() || (candidate.len() == best.len() && candidate < *best) {
        *best = candidate;
    }
}

fn adjacency(g: &HypothesisGraph) -> DMatrix<f64> {
    DMatrix::from_fn(g.r(), g.r(), |i, j| if g.has_edge(i, j) { 1.0 } else { 0.0 })
}

fn spectral(g: &HypothesisGraph, gamma: f64) -> Vec<usize> {
    let r = g.r();
    let eig = SymmetricEigen::new(adjacency(g));
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let mut best = vec![0];
    let everything: Vec<usize> = (0..r).collect();
    if is_quasi_clique(g, &everything, gamma) {
        keep_best(&mut best, everything);
    }
    for k in 2..=5usize.min(r) {
        let points: Vec<Vec<f64>> = (0..r)
            .map(|v| order[..k].iter().map(|&c| eig.eigenvectors[(v, c)]).collect())
            .collect();
        let labels = kmeans(&points, k, rng::derive(SPECTRAL_SEED, &[stage::SPECTRAL, k as u64]));
        for c in 0..k {
            let cluster: Vec<usize> = (0..r).filter(|&v| labels[v] == c).collect();
            if !cluster.is_empty() && is_quasi_clique(g, &cluster, gamma) {
                keep_best(&mut best, cluster);
            }
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; best of several restarts by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng::stream(seed, &[restart as u64]);
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                d2.iter()
                    .position(|&w| {
                        u -= w;
                        u < 0.0
                    })
                    .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
        }
        let mut labels = vec![0; n];
        for _ in 0..KMEANS_ITERS {
            let new: Vec<usize> = points
                .iter()
                .map(|p| {
                    (0..k)
                        .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                        .unwrap()
                })
                .collect();
            let changed = new != labels;
            labels = new;
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    for (t, x) in center.iter_mut().enumerate() {
                        *x = members.iter().map(|m| m[t]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

fn local_search(g: &HypothesisGraph, gamma: f64, passes: usize) -> Vec<usize> {
    let r = g.r();
    let triangles = |v: usize| -> usize {
        let nb = g.neighbors(v);
        nb.iter().map(|u| g.neighbors(u).intersection_count(nb)).sum::<usize>() / 2
    };
    let start = (0..r)
        .max_by(|&a, &b| {
            let score = |v: usize| {
                let d = g.degree(v);
                if d == 0 { 0.0 } else { triangles(v) as f64 / d as f64 }
            };
            score(a).total_cmp(&score(b)).then(b.cmp(&a))
        })
        .unwrap();
    let mut set = g.neighbors(start).clone();
    set.insert(start);
    let mut best = vec![start];
    let record = |set: &Bits, best: &mut Vec<usize>| {
        let members: Vec<usize> = set.iter().collect();
        if is_quasi_clique(g, &members, gamma) {
            keep_best(best, members);
        }
    };
    record(&set, &mut best);
    for _ in 0..passes {
        let mut moved = false;
        loop {
            let size = set.count() as f64;
            let gain = |v: usize| g.neighbors(v).intersection_count(&set) as f64 - gamma * size;
            let add = (0..r)
                .filter(|&v| !set.contains(v) && g.neighbors(v).intersection_count(&set) > 0)
                .map(|v| (gain(v), v))
                .filter(|&(gain, _)| gain > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            match add {
                Some((_, v)) => {
                    set.insert(v);
                    moved = true;
                    record(&set, &mut best);
                }
                None => break,
            }
        }
        let size = set.count() as f64;
        let remove = set
            .iter()
            .map(|v| (gamma * (size - 1.0) - g.neighbors(v).intersection_count(&set) as f64, v))
            .filter(|&(gain, _)| gain > 0.0)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, v)) = remove {
            if set.count() > 1 {
                set.remove(v);
                moved = true;
                record(&set, &mut best);
            }
        }
        if !moved {
            break;
        }
    }
    best
}

/// Shared-neighbor similarity on closed neighborhoods, normalized by size.
fn similarity(g: &HypothesisGraph) -> DMatrix<f64> {
    let r = g.r();
    let closed: Vec<Bits> = (0..r)
        .map(|v| {
            let mut b = g.neighbors(v).clone();
            b.insert(v);
            b
        })
        .collect();
    DMatrix::from_fn(r, r, |i, j| {
        if i == j {
            0.0
        } else {
            closed[i].intersection_count(&closed[j]) as f64
                / ((closed[i].count() * closed[j].count()) as f64).sqrt()
        }
    })
}

/// Splits `nodes` by the sign of the Fiedler vector of the normalized
/// Laplacian of `w` restricted to them; falls back to a median split.
fn bisect(w: &DMatrix<f64>, nodes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let m = nodes.len();
    let sub = DMatrix::from_fn(m, m, |a, b| w[(nodes[a], nodes[b])]);
    let deg: Vec<f64> = (0..m).map(|a| sub.row(a).sum()).collect();
    let lap = DMatrix::from_fn(m, m, |a, b| {
        let norm = if deg[a] > 0.0 && deg[b] > 0.0 { (deg[a] * deg[b]).sqrt() } else { 1.0 };
        let id = if a == b && deg[a] > 0.0 { 1.0 } else { 0.0 };
        id - sub[(a, b)] / norm
    });
    let eig = SymmetricEigen::new(lap);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let fiedler: Vec<f64> = (0..m).map(|a| eig.eigenvectors[(a, idx[1])]).collect();
    // fix the sign so the first node always lands in the left part
    let sign = if fiedler[0] < 0.0 { -1.0 } else { 1.0 };
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (a, &v) in nodes.iter().enumerate() {
        if sign * fiedler[a] >= 0.0 {
            left.push(v);
        } else {
            right.push(v);
        }
    }
    if left.is_empty() || right.is_empty() {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| fiedler[a].total_cmp(&fiedler[b]).then(a.cmp(&b)));
        let (l, r) = order.split_at(m / 2);
        left = l.iter().map(|&a| nodes[a]).collect();
        right = r.iter().map(|&a| nodes[a]).collect();
        left.sort_unstable();
        right.sort_unstable();
    }
    (left, right)
}

fn dense_split(g: &HypothesisGraph, gamma: f64) -> Vec<usize> {
    let w = similarity(g);
    let mut best = vec![0];
    let mut queue = VecDeque::from([(0..g.r()).collect::<Vec<usize>>()]);
    while let Some(nodes) = queue.pop_front() {
        if is_quasi_clique(g, &nodes, gamma) {
            keep_best(&mut best, nodes.clone());
        }
        if nodes.len() > 1 {
            let (l, r) = bisect(&w, &nodes);
            queue.push_back(l);
            queue.push_back(r);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_graph;
    use super::*;
    use crate::stepdown::HypothesisList;

    fn two_blocks() -> HypothesisGraph {
        let mut edges = Vec::new();
        for base in [0, 5] {
            for (i, j) in HypothesisList::all(5).pairs {
                edges.push((base + i, base + j));
            }
        }
        edges.push((4, 5));
        HypothesisGraph::from_edges(10, &edges).unwrap()
    }

    #[test]
    fn complete_graph_all_methods() {
        let g = HypothesisGraph::from_edges(5, &HypothesisList::all(5).pairs).unwrap();
        for m in [RivalMethod::Spectral, RivalMethod::LocalSearch, RivalMethod::DenseSplit] {
            assert_eq!(rival_select(&g, 1.0, m).unwrap(), vec![0, 1, 2, 3, 4], "{m}");
        }
    }

    #[test]
    fn spectral_separates_two_blocks() {
        let g = two_blocks();
        let s = rival_select(&g, 0.95, RivalMethod::Spectral).unwrap();
        assert!(s == vec![0, 1, 2, 3, 4] || s == vec![5, 6, 7, 8, 9], "{s:?}");
        let pts: Vec<Vec<f64>> = (0..10).map(|v| vec![if v < 5 { 0.0 } else { 1.0 }]).collect();
        let labels = kmeans(&pts, 2, 0);
        assert!(labels[..5].iter().all(|&l| l == labels[0]));
        assert!(labels[5..].iter().all(|&l| l == labels[5] && l != labels[0]));
    }

    #[test]
    fn rival_outputs_are_quasi_cliques() {
        for seed in 0..15 {
            let g = random_graph(12, 0.6, seed);
            for m in [RivalMethod::Spectral, RivalMethod::LocalSearch, RivalMethod::DenseSplit] {
                let s = rival_select(&g, 0.8, m).unwrap();
                assert!(!s.is_empty() && is_quasi_clique(&g, &s, 0.8), "{m} seed {seed}");
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [RivalMethod::Spectral, RivalMethod::LocalSearch, RivalMethod::DenseSplit] {
            assert_eq!(m.to_string().parse::<RivalMethod>().unwrap(), m);
        }
        assert!("cobs".parse::<RivalMethod>().is_err());
    }
}
