//! Hypothesis-acceptance graphs and partition selection by merging
//! maximal cliques into ever larger γ-quasi-cliques.

mod bits;
pub mod rivals;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stepdown::HypothesisList;

pub use bits::Bits;
pub use rivals::{rival_select, RivalMethod};

/// Undirected graph on `0..r` with an edge per accepted hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypothesisGraph {
    r: usize,
    adj: Vec<Bits>,
}

impl HypothesisGraph {
    pub fn empty(r: usize) -> Self {
        Self {
            r,
            adj: vec![Bits::new(r); r],
        }
    }

    pub fn from_edges(r: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(r);
        for &(i, j) in edges {
            if i >= r || j >= r || i == j {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i}, {j}) is not a pair of distinct vertices in 0..{r}"
                )));
            }
            g.adj[i].insert(j);
            g.adj[j].insert(i);
        }
        Ok(g)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].contains(j)
    }

    pub fn neighbors(&self, v: usize) -> &Bits {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.r)
            .flat_map(|i| self.adj[i].iter().filter(move |&j| j > i).map(move |j| (i, j)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Bits::count).sum::<usize>() / 2
    }

    /// Number of edges with both endpoints in `set`.
    pub fn internal_edges(&self, set: &[usize]) -> usize {
        let mask = Bits::from_members(self.r, set);
        set.iter()
            .map(|&v| self.adj[v].intersection_count(&mask))
            .sum::<usize>()
            / 2
    }

    /// Subgraph induced by `vertices`, relabelled `0..vertices.len()`.
    pub fn induced(&self, vertices: &[usize]) -> HypothesisGraph {
        let mut g = Self::empty(vertices.len());
        for (a, &u) in vertices.iter().enumerate() {
            for (b, &v) in vertices.iter().enumerate().skip(a + 1) {
                if self.has_edge(u, v) {
                    g.adj[a].insert(b);
                    g.adj[b].insert(a);
                }
            }
        }
        g
    }

    /// True when every edge of `self` is an edge of `other`.
    pub fn is_subgraph_of(&self, other: &HypothesisGraph) -> bool {
        self.r == other.r && self.adj.iter().zip(&other.adj).all(|(a, b)| a.is_subset(b))
    }
}

pub fn build_graph(accepted: &HypothesisList, r: usize) -> Result<HypothesisGraph> {
    HypothesisGraph::from_edges(r, &accepted.pairs)
}

pub fn is_quasi_clique(g: &HypothesisGraph, set: &[usize], gamma: f64) -> bool {
    let k = set.len() as f64;
    g.internal_edges(set) as f64 >= gamma * k * (k - 1.0) / 2.0
}

/// All maximal cliques, each sorted, listed in ascending lexicographic order.
pub fn maximal_cliques(g: &HypothesisGraph) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut r = Vec::new();
    bron_kerbosch(g, &mut r, Bits::full(g.r), Bits::new(g.r), &mut out);
    out.iter_mut().for_each(|c| c.sort_unstable());
    out.sort();
    out
}

fn bron_kerbosch(g: &HypothesisGraph, r: &mut Vec<usize>, mut p: Bits, mut x: Bits, out: &mut Vec<Vec<usize>>) {
    if p.is_empty() {
        if x.is_empty() && !r.is_empty() {
            out.push(r.clone());
        }
        return;
    }
    let pivot = p
        .iter()
        .chain(x.iter())
        .max_by_key(|&u| (g.adj[u].intersection_count(&p), std::cmp::Reverse(u)))
        .unwrap();
    let candidates: Vec<usize> = p.difference(&g.adj[pivot]).iter().collect();
    for v in candidates {
        r.push(v);
        bron_kerbosch(g, r, p.intersection(&g.adj[v]), x.intersection(&g.adj[v]), out);
        r.pop();
        p.remove(v);
        x.insert(v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiCliqueParams {
    pub gamma: f64,
    #[serde(default)]
    pub core: Option<Vec<usize>>,
    #[serde(default)]
    pub postprocess: bool,
}

impl Default for QuasiCliqueParams {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            core: None,
            postprocess: false,
        }
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("gamma must lie in [0, 1], got {gamma}")))
    }
}

/// Search statistics of one run of the merging search.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub seeds: usize,
    pub queue_len: usize,
    pub pairs_tried: usize,
    pub unions_checked: usize,
}

/// Largest γ-quasi-clique found by merging maximal cliques.
pub fn largest_quasi_clique(g: &HypothesisGraph, params: &QuasiCliqueParams) -> Result<Vec<usize>> {
    largest_quasi_clique_traced(g, params).map(|(s, _)| s)
}

pub fn largest_quasi_clique_traced(
    g: &HypothesisGraph,
    params: &QuasiCliqueParams,
) -> Result<(Vec<usize>, SearchTrace)> {
    check_gamma(params.gamma)?;
    if g.r == 0 {
        return Ok((Vec::new(), SearchTrace::default()));
    }
    let mut seeds = maximal_cliques(g);
    if let Some(core) = &params.core {
        let mut core = core.clone();
        core.sort_unstable();
        core.dedup();
        if let Some(&v) = core.iter().find(|&&v| v >= g.r) {
            return Err(Error::InvalidParameter(format!("core vertex {v} outside 0..{}", g.r)));
        }
        if !core.is_empty() {
            let sub = g.induced(&core);
            let (local, _) = merge_search(&sub, maximal_cliques(&sub), params.gamma);
            let s_core: Vec<usize> = local.iter().map(|&a| core[a]).collect();
            let mut absorbed: Vec<Vec<usize>> = seeds
                .iter()
                .map(|a| union(a, &s_core))
                .filter(|c| is_quasi_clique(g, c, params.gamma))
                .collect();
            if absorbed.is_empty() {
                absorbed.push(s_core);
            }
            let mut seen = HashSet::new();
            absorbed.retain(|c| seen.insert(c.clone()));
            seeds = absorbed;
        }
    }
    let (mut best, trace) = merge_search(g, seeds, params.gamma);
    if params.postprocess {
        best = postprocess(g, &best, params.gamma);
    }
    Ok((best, trace))
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (_, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        out.push(next);
    }
    out
}

fn better(a: &[usize], b: &[usize]) -> bool {
    a.len() > b.len() || (a.len() == b.len() && a < b)
}

struct Memo<'g> {
    g: &'g HypothesisGraph,
    gamma: f64,
    verdicts: HashMap<Vec<usize>, bool>,
    checked: usize,
}

impl Memo<'_> {
    fn verdict(&mut self, set: Vec<usize>) -> bool {
        if let Some(&v) = self.verdicts.get(&set) {
            return v;
        }
        self.checked += 1;
        let v = is_quasi_clique(self.g, &set, self.gamma);
        self.verdicts.insert(set, v);
        v
    }
}

fn merge_search(g: &HypothesisGraph, seeds: Vec<Vec<usize>>, gamma: f64) -> (Vec<usize>, SearchTrace) {
    let mut trace = SearchTrace {
        seeds: seeds.len(),
        ..Default::default()
    };
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut children: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    for s in seeds {
        if !index.contains_key(&s) {
            index.insert(s.clone(), queue.len());
            children.push(vec![queue.len()]);
            queue.push(s);
        }
    }
    let mut memo = Memo {
        g,
        gamma,
        verdicts: HashMap::new(),
        checked: 0,
    };
    let mut k = 1;
    while k < queue.len() {
        for i in 0..k {
            trace.pairs_tried += 1;
            let c = union(&queue[i], &queue[k]);
            if index.contains_key(&c) {
                continue;
            }
            let promising = children[i].iter().any(|&a| {
                children[k]
                    .iter()
                    .any(|&b| memo.verdict(union(&queue[a], &queue[b])))
            });
            if promising && memo.verdict(c.clone()) {
                index.insert(c.clone(), queue.len());
                children.push(vec![i, k]);
                queue.push(c);
            }
        }
        k += 1;
    }
    trace.queue_len = queue.len();
    trace.unions_checked = memo.checked;
    let best = queue
        .iter()
        .fold(None::<&Vec<usize>>, |best, s| match best {
            Some(b) if !better(s, b) => Some(b),
            _ => Some(s),
        })
        .cloned()
        .unwrap_or_else(|| vec![0]);
    (best, trace)
}

/// Drops members adjacent to fewer than half of the other members, once.
/// Keeps the input when the result would be empty or no longer a γ-quasi-clique.
fn postprocess(g: &HypothesisGraph, set: &[usize], gamma: f64) -> Vec<usize> {
    let mask = Bits::from_members(g.r, set);
    let others = set.len().saturating_sub(1) as f64;
    let kept: Vec<usize> = set
        .iter()
        .copied()
        .filter(|&v| g.adj[v].intersection_count(&mask) as f64 >= others / 2.0)
        .collect();
    if kept.is_empty() || !is_quasi_clique(g, &kept, gamma) {
        set.to_vec()
    } else {
        kept
    }
}

/// `flags[k]` is true when the selection on `graphs[k + 1]` is at least as
/// large as on `graphs[k]`.
pub fn monotonicity_audit<F>(selector: F, graphs: &[HypothesisGraph]) -> Result<Vec<bool>>
where
    F: Fn(&HypothesisGraph) -> Result<Vec<usize>>,
{
    for (k, w) in graphs.windows(2).enumerate() {
        if !w[0].is_subgraph_of(&w[1]) {
            return Err(Error::NotNested(k + 1));
        }
    }
    let sizes = graphs
        .iter()
        .map(|g| selector(g).map(|s| s.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok(sizes.windows(2).map(|w| w[0] <= w[1]).collect())
}
