//! kd-tree for approximate K-nearest-basis search with a comparison budget.
//!
//! The tree stores index permutations over a [`Codebook`]; leaves hold up to
//! `leaf_capacity` bases, internal nodes split the dimension of largest
//! spread at the median. Search is best-bin-first: a priority queue orders
//! pending subtrees by the exact distance from the query to the subtree's
//! bounding box, and leaves are scanned in that order. Because box distances
//! are true lower bounds, an unbudgeted search provably returns the exact
//! K nearest neighbours; the `max_comparisons` budget trades accuracy for
//! time by capping how many full point-distance evaluations the search may
//! spend, which is the knob the runtime/accuracy sweep exercises.
//!
//! Only point-distance evaluations count against the budget; box-distance
//! arithmetic is bookkeeping and stays free.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::NotNan;

use crate::codebook::Codebook;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    /// Permutation of basis indices; leaves own disjoint ranges of it.
    order: Vec<u32>,
    pub leaf_capacity: usize,
}

pub const DEFAULT_LEAF_CAPACITY: usize = 16;

#[derive(Debug, Clone)]
struct Node {
    /// Axis-aligned bounding box of every basis under this node.
    bbox_min: Vec<f32>,
    bbox_max: Vec<f32>,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    // The split plane is redundant with the child bounding boxes during
    // search but kept for structure checks and debugging.
    #[allow(dead_code)]
    Internal { left: usize, right: usize, split_dim: usize, split_val: f32 },
    Leaf { start: usize, len: usize },
}

/// Search statistics: how many budgeted point-distance evaluations ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub distance_evals: usize,
}

/// One neighbour: basis index and Euclidean (not squared) distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

pub fn build_kdtree(cb: &Codebook, leaf_capacity: usize) -> Result<KdTree> {
    if leaf_capacity == 0 {
        return Err(Error::InvalidArgument("leaf_capacity must be positive".into()));
    }
    let m = cb.len();
    let mut order: Vec<u32> = (0..m as u32).collect();
    let mut nodes = Vec::new();
    build_node(cb, &mut order, 0, m, leaf_capacity, &mut nodes);
    Ok(KdTree { nodes, order, leaf_capacity })
}

/// Recursively build the subtree over `order[start..start+len]`; returns the
/// node's index in `nodes`.
fn build_node(
    cb: &Codebook,
    order: &mut [u32],
    start: usize,
    len: usize,
    leaf_capacity: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let dim = cb.dim();
    let mut bbox_min = vec![f32::INFINITY; dim];
    let mut bbox_max = vec![f32::NEG_INFINITY; dim];
    for &i in &order[start..start + len] {
        for (d, &v) in cb.basis(i as usize).iter().enumerate() {
            bbox_min[d] = bbox_min[d].min(v);
            bbox_max[d] = bbox_max[d].max(v);
        }
    }

    // Split the dimension of greatest spread; ties pick the lowest index.
    let mut split_dim = 0;
    let mut best_spread = -1.0f32;
    for d in 0..dim {
        let spread = bbox_max[d] - bbox_min[d];
        if spread > best_spread {
            best_spread = spread;
            split_dim = d;
        }
    }

    if len <= leaf_capacity || best_spread <= 0.0 {
        nodes.push(Node { bbox_min, bbox_max, kind: NodeKind::Leaf { start, len } });
        return nodes.len() - 1;
    }

    // Median split on (coordinate, index); duplicates of the median value are
    // kept together on one side so both halves stay non-empty.
    let coord = |i: u32| cb.basis(i as usize)[split_dim];
    order[start..start + len].sort_unstable_by(|&a, &b| {
        coord(a).partial_cmp(&coord(b)).unwrap().then(a.cmp(&b))
    });
    let slice = &order[start..start + len];
    let mut mid = len / 2;
    let median = coord(slice[mid - 1]);
    let mut j = mid;
    while j < len && coord(slice[j]) == median {
        j += 1;
    }
    if j < len {
        mid = j;
    } else {
        // The median run extends to the end; split in front of it instead.
        let mut k = mid - 1;
        while k > 0 && coord(slice[k - 1]) == median {
            k -= 1;
        }
        mid = k; // k >= 1 because the spread on split_dim is positive
    }
    let split_val = coord(slice[mid - 1]);

    let placeholder = nodes.len();
    nodes.push(Node { bbox_min, bbox_max, kind: NodeKind::Leaf { start: 0, len: 0 } });
    let left = build_node(cb, order, start, mid, leaf_capacity, nodes);
    let right = build_node(cb, order, start + mid, len - mid, leaf_capacity, nodes);
    nodes[placeholder].kind = NodeKind::Internal { left, right, split_dim, split_val };
    placeholder
}

impl KdTree {
    /// Number of indexed bases.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn root(&self) -> usize {
        // The root is pushed first for leaf-only trees and first (as a
        // placeholder) otherwise.
        0
    }
}

/// Squared distance from `q` to the node's bounding box (0 inside).
fn box_dist_sq(node: &Node, q: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (d, &v) in q.iter().enumerate() {
        let lo = node.bbox_min[d];
        let hi = node.bbox_max[d];
        let excess = if v < lo {
            lo as f64 - v as f64
        } else if v > hi {
            v as f64 - hi as f64
        } else {
            continue;
        };
        acc += excess * excess;
    }
    acc
}

/// K nearest bases to `query`, best-bin-first, optionally budgeted.
///
/// Results are sorted by `(distance, index)` ascending; distance ties resolve
/// to the lower basis index. With `max_comparisons = None` the result is
/// exactly the brute-force K nearest. With a budget the search stops once
/// that many point distances have been evaluated and returns the best found
/// so far (which may hold fewer than K entries if the budget is smaller
/// than K).
pub fn knn(cb: &Codebook, tree: &KdTree, query: &[f32], k: usize, max_comparisons: Option<usize>) -> Result<Vec<Neighbor>> {
    knn_with_stats(cb, tree, query, k, max_comparisons).map(|(n, _)| n)
}

pub fn knn_with_stats(
    cb: &Codebook,
    tree: &KdTree,
    query: &[f32],
    k: usize,
    max_comparisons: Option<usize>,
) -> Result<(Vec<Neighbor>, SearchStats)> {
    if k == 0 {
        return Err(Error::InvalidArgument("knn needs k >= 1".into()));
    }
    if k > cb.len() {
        return Err(Error::KExceedsCodebook { k, m: cb.len() });
    }
    if query.len() != cb.dim() {
        return Err(Error::DimensionMismatch { expected: cb.dim(), got: query.len() });
    }
    if tree.len() != cb.len() {
        return Err(Error::Internal(format!(
            "kd-tree indexes {} bases but codebook holds {}",
            tree.len(),
            cb.len()
        )));
    }
    let budget = max_comparisons.unwrap_or(usize::MAX);
    let mut stats = SearchStats::default();

    // Max-heap of current candidates keyed by (distance, index): the peek is
    // the worst kept neighbour under the final ordering.
    let mut best: BinaryHeap<(NotNan<f64>, usize)> = BinaryHeap::with_capacity(k + 1);
    // Min-heap of pending subtrees keyed by bounding-box lower bound; node
    // index breaks ties so traversal order is deterministic.
    let mut pending: BinaryHeap<Reverse<(NotNan<f64>, usize)>> = BinaryHeap::new();

    let root = tree.root();
    let root_bound = NotNan::new(box_dist_sq(&tree.nodes[root], query))
        .map_err(|_| Error::Internal("NaN box distance".into()))?;
    pending.push(Reverse((root_bound, root)));

    'search: while let Some(Reverse((bound, node_idx))) = pending.pop() {
        if best.len() == k {
            let &(worst, _) = best.peek().expect("non-empty");
            // A subtree whose box is strictly farther than the worst kept
            // candidate cannot contribute; box ties can still yield a
            // lower-index equal-distance neighbour, so they are explored.
            if bound.into_inner() > worst.into_inner() {
                break;
            }
        }
        match &tree.nodes[node_idx].kind {
            NodeKind::Internal { left, right, .. } => {
                for child in [*left, *right] {
                    let b = NotNan::new(box_dist_sq(&tree.nodes[child], query))
                        .map_err(|_| Error::Internal("NaN box distance".into()))?;
                    pending.push(Reverse((b, child)));
                }
            }
            NodeKind::Leaf { start, len } => {
                for &basis in &tree.order[*start..*start + *len] {
                    if stats.distance_evals >= budget {
                        break 'search;
                    }
                    stats.distance_evals += 1;
                    let d = NotNan::new(cb.dist_sq(basis as usize, query))
                        .map_err(|_| Error::Internal("NaN point distance".into()))?;
                    let cand = (d, basis as usize);
                    if best.len() < k {
                        best.push(cand);
                    } else if cand < *best.peek().expect("non-empty") {
                        best.pop();
                        best.push(cand);
                    }
                }
            }
        }
    }

    let mut result: Vec<Neighbor> = best
        .into_iter()
        .map(|(d, index)| Neighbor { index, distance: d.into_inner().sqrt() })
        .collect();
    result.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap().then(a.index.cmp(&b.index)));
    Ok((result, stats))
}

// ---------------------------------------------------------------------------
