//! Exact k-nearest-neighbour search over 3D points with a static k-d tree.
//!
//! Neighbours are ordered by `(squared distance, point index)`, so ties are
//! always resolved toward the smaller index and every query is deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

/// Per-point neighbourhoods, self excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub k: usize,
    /// Row-major `n × k`, nearest first.
    pub indices: Vec<usize>,
    /// Distance to the k-th neighbour of each point.
    pub radii: Vec<f64>,
}

impl NeighborTable {
    pub fn n(&self) -> usize {
        self.radii.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    pub fn build(points: &[[f64; 3]]) -> SpatialIndex {
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    pub fn from_cloud(cloud: &crate::pcio::PointCloud) -> SpatialIndex {
        SpatialIndex::build(&cloud.positions())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query`, skipping index `exclude`, nearest
    /// first as `(index, distance)`.
    pub fn nearest(&self, query: &[f64; 3], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect()
    }

    fn search(
        &self,
        node: usize,
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, &self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // equal distance must still be visited: a tie may carry a smaller index
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").d2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// KNN table of every indexed point against the others.
    pub fn knn(&self, k: usize) -> Result<NeighborTable> {
        let n = self.len();
        if k == 0 {
            return Err(Error::Contract("knn requires k >= 1".into()));
        }
        if n <= k {
            return Err(Error::InsufficientPoints { n, k });
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| self.nearest(&self.points[i], k, Some(i)))
            .collect();
        let mut indices = Vec::with_capacity(n * k);
        let mut radii = Vec::with_capacity(n);
        for row in rows {
            radii.push(row.last().map_or(0.0, |&(_, d)| d));
            indices.extend(row.into_iter().map(|(i, _)| i));
        }
        Ok(NeighborTable { k, indices, radii })
    }

    /// For each query, the index of its nearest indexed point.
    pub fn nearest_each(&self, queries: &[[f64; 3]]) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Contract("nearest-point lookup into an empty set".into()));
        }
        Ok(queries
            .par_iter()
            .map(|q| self.nearest(q, 1, None)[0].0)
            .collect())
    }
}

/// O(n²) reference used by tests and small inputs.
pub fn brute_force_knn(points: &[[f64; 3]], k: usize) -> Result<NeighborTable> {
    let n = points.len();
    if n <= k {
        return Err(Error::InsufficientPoints { n, k });
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let mut all: Vec<Candidate> = (0..n)
            .filter(|&j| j != i)
            .map(|j| Candidate {
                d2: dist2(&points[i], &points[j]),
                index: j,
            })
            .collect();
        all.sort();
        all.truncate(k);
        radii.push(all[k - 1].d2.sqrt());
        indices.extend(all.iter().map(|c| c.index));
    }
    Ok(NeighborTable { k, indices, radii })
}
