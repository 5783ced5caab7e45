//! Small-graph demonstrations that rewiring a graph without bookkeeping
//! loses information: distinct inputs can produce the same output.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

/// Undirected simple graph on nodes `0..n`, edges stored as `(min, max)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SmallGraph {
    pub n: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

impl SmallGraph {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        Self {
            n,
            edges: edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect(),
        }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// All pairs `(a, b)`, `a < b`, in lexicographic order.
    pub fn slots(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
    }

    pub fn from_mask(n: usize, mask: u32) -> Self {
        let edges = Self::slots(n)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, e)| e)
            .collect();
        Self { n, edges }
    }

    pub fn mask(&self) -> u32 {
        Self::slots(self.n)
            .iter()
            .enumerate()
            .filter(|(_, e)| self.edges.contains(e))
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    /// Drops every edge touching `node`.
    pub fn prune_incident(&self, node: usize) -> Self {
        Self {
            n: self.n,
            edges: self.edges.iter().copied().filter(|&(a, b)| a != node && b != node).collect(),
        }
    }

    /// Adds an edge between every two nodes that share a neighbour.
    /// Returns the closed graph and the edges that were added.
    pub fn close_triangles(&self) -> (Self, BTreeSet<(usize, usize)>) {
        let mut added = BTreeSet::new();
        for (a, b) in Self::slots(self.n) {
            if !self.has_edge(a, b)
                && (0..self.n).any(|c| c != a && c != b && self.has_edge(a, c) && self.has_edge(b, c))
            {
                added.insert((a, b));
            }
        }
        let mut out = self.clone();
        out.edges.extend(added.iter().copied());
        (out, added)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CollisionDemo {
    pub rule: String,
    pub input_1: SmallGraph,
    pub input_2: SmallGraph,
    pub output_1: SmallGraph,
    pub output_2: SmallGraph,
    /// Outputs equal although inputs differ.
    pub collision: bool,
    /// Whether the outputs differ once modified edges are tagged.
    pub distinguishable_with_tags: bool,
}

/// Nodes a=0, b=1, c=2. Both inputs share `a–b`; one adds `b–c`, the other
/// `a–c`. Removing the edges at `c` maps both to `{a–b}`.
pub fn demo_prune_counterexample() -> CollisionDemo {
    let g1 = SmallGraph::new(3, &[(0, 1), (1, 2)]);
    let g2 = SmallGraph::new(3, &[(0, 1), (0, 2)]);
    let (o1, o2) = (g1.prune_incident(2), g2.prune_incident(2));
    let removed = |g: &SmallGraph, o: &SmallGraph| -> BTreeSet<_> {
        g.edges.difference(&o.edges).copied().collect()
    };
    CollisionDemo {
        rule: "remove edges incident to c".into(),
        collision: g1 != g2 && o1 == o2,
        distinguishable_with_tags: (o1.clone(), removed(&g1, &o1)) != (o2.clone(), removed(&g2, &o2)),
        input_1: g1,
        input_2: g2,
        output_1: o1,
        output_2: o2,
    }
}

/// Nodes a=0, b=1, c=2. The open path `a–b–c` and the triangle both
/// close to the triangle.
pub fn demo_add_counterexample() -> CollisionDemo {
    let g1 = SmallGraph::new(3, &[(0, 1), (1, 2)]);
    let g2 = SmallGraph::new(3, &[(0, 1), (1, 2), (0, 2)]);
    let (o1, a1) = g1.close_triangles();
    let (o2, a2) = g2.close_triangles();
    CollisionDemo {
        rule: "connect nodes with a common neighbour".into(),
        collision: g1 != g2 && o1 == o2,
        distinguishable_with_tags: (o1.clone(), a1) != (o2.clone(), a2),
        input_1: g1,
        input_2: g2,
        output_1: o1,
        output_2: o2,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneEnumeration {
    pub graphs: usize,
    pub maps: usize,
    pub maps_with_collision: usize,
}

/// Enumerates every map on the graphs over `n` labelled nodes that
/// removes at least one edge from each non-empty graph, and counts those
/// sending two distinct graphs to one output.
pub fn enumerate_pruning_maps(n: usize) -> PruneEnumeration {
    let slots = SmallGraph::slots(n).len();
    assert!(slots <= 6, "enumeration is exponential in the edge count");
    let masks: Vec<u32> = (0..1u32 << slots).collect();
    // strict sub-masks per graph; the empty graph can only stay empty
    let choices: Vec<Vec<u32>> = masks
        .iter()
        .map(|&m| {
            if m == 0 {
                vec![0]
            } else {
                (0..m).filter(|s| s & !m == 0).collect()
            }
        })
        .collect();
    let mut idx = vec![0usize; masks.len()];
    let (mut maps, mut colliding) = (0usize, 0usize);
    loop {
        maps += 1;
        let mut seen = BTreeMap::new();
        let collides = masks
            .iter()
            .any(|&m| seen.insert(choices[m as usize][idx[m as usize]], m).is_some());
        colliding += usize::from(collides);
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return PruneEnumeration {
                    graphs: masks.len(),
                    maps,
                    maps_with_collision: colliding,
                };
            }
            idx[pos] += 1;
            if idx[pos] < choices[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}
