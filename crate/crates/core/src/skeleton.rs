//! Joint graphs and the normalized multi-hop adjacency family used by the
//! graph refinement layers.
//!
//! "Hop k" means exact shortest-path distance k, so the supports of the
//! per-hop matrices are pairwise disjoint and each modulation weight acts on
//! one distance band. A within-distance variant is available behind
//! [`HopSupport::Within`].

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("edge ({0}, {1}) references a joint outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop on joint {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("hop count must be at least 1, got {0}")]
    BadHopCount(usize),
    #[error("skeleton graph is disconnected; components: {0}")]
    Disconnected(String),
    #[error("skeleton config I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("skeleton config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("joint name count {names} does not match joint_count {joints}")]
    NameCountMismatch { names: usize, joints: usize },
}

/// Which pairs the k-th adjacency connects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HopSupport {
    /// Exactly distance k (disjoint bands).
    #[default]
    Exact,
    /// Distance in 1..=k.
    Within,
}

/// On-disk skeleton definition: joint names plus undirected edges.
#[derive(Debug, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub joint_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

/// A joint graph with its precomputed normalized hop adjacency matrices.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    hop_matrices: Vec<Tensor>,
}

impl SkeletonGraph {
    /// Build a graph and its hop matrices for distances `1..=hops`.
    pub fn new(
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        hops: usize,
        support: HopSupport,
    ) -> Result<Self, SkeletonError> {
        let n = joint_names.len();
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(SkeletonError::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(SkeletonError::SelfLoop(a));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(SkeletonError::DuplicateEdge(key.0, key.1));
            }
        }
        let mut graph = SkeletonGraph {
            joint_names,
            edges,
            hop_matrices: Vec::new(),
        };
        graph.hop_matrices = build_hop_adjacency(&graph, hops, support)?;
        Ok(graph)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges
            .iter()
            .any(|&(u, v)| (u, v) == (a, b) || (u, v) == (b, a))
    }

    /// Normalized hop matrices, index 0 holding distance-1 connections.
    pub fn hop_matrices(&self) -> &[Tensor] {
        &self.hop_matrices
    }

    pub fn hop_count(&self) -> usize {
        self.hop_matrices.len()
    }

    /// All-pairs shortest-path distances by BFS; `usize::MAX` if unreachable.
    pub fn distances(&self) -> Vec<Vec<usize>> {
        let n = self.joint_count();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut dist = vec![vec![usize::MAX; n]; n];
        for (start, row) in dist.iter_mut().enumerate() {
            row[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if row[v] == usize::MAX {
                        row[v] = row[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
        }
        dist
    }

    /// Load joint names and edges from a JSON config file.
    pub fn from_config_file(
        path: &Path,
        hops: usize,
        support: HopSupport,
    ) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SkeletonConfig = serde_json::from_str(&text)?;
        SkeletonGraph::new(cfg.joint_names, cfg.edges, hops, support)
    }
}

/// Names of the 17 COCO joints in annotation order.
pub const COCO17_JOINT_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// De-facto standard COCO-17 edge list: head chain (nose-eyes-ears plus the
/// ear-shoulder links that keep the graph connected), arms, legs, torso sides
/// and the shoulder-shoulder / hip-hip cross links.
pub const COCO17_EDGES: [(usize, usize); 19] = [
    (0, 1),
    (0, 2),
    (1, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

/// The 17-joint COCO skeleton with hop matrices for `hops` distance bands.
pub fn coco17_skeleton_with(hops: usize, support: HopSupport) -> SkeletonGraph {
    SkeletonGraph::new(
        COCO17_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        COCO17_EDGES.to_vec(),
        hops,
        support,
    )
    .expect("COCO-17 definition is valid")
}

/// COCO-17 with the default 3 hop bands.
pub fn coco17_skeleton() -> SkeletonGraph {
    coco17_skeleton_with(3, HopSupport::Exact)
}

/// Names of the 14 CrowdPose joints in annotation order.
pub const CROWDPOSE14_JOINT_NAMES: [&str; 14] = [
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "head_top",
    "neck",
];

pub const CROWDPOSE14_EDGES: [(usize, usize); 14] = [
    (12, 13),
    (13, 0),
    (13, 1),
    (0, 2),
    (2, 4),
    (1, 3),
    (3, 5),
    (0, 6),
    (1, 7),
    (6, 7),
    (6, 8),
    (8, 10),
    (7, 9),
    (9, 11),
];

/// The 14-joint CrowdPose skeleton, same interface as COCO-17.
pub fn crowdpose14_skeleton_with(hops: usize, support: HopSupport) -> SkeletonGraph {
    SkeletonGraph::new(
        CROWDPOSE14_JOINT_NAMES
            .iter()
            .map(|s| s.to_string())
            .collect(),
        CROWDPOSE14_EDGES.to_vec(),
        hops,
        support,
    )
    .expect("CrowdPose-14 definition is valid")
}

/// Hop adjacency family for an existing graph.
///
/// `A_k[i][j] = 1` iff the shortest-path distance between i and j is exactly k
/// (or `<= k` for [`HopSupport::Within`]); each `A_k` is then symmetrically
/// normalized as `D^{-1/2} A D^{-1/2}` with zero diagonal and zero rows kept
/// all-zero.
pub fn build_hop_adjacency(
    graph: &SkeletonGraph,
    hops: usize,
    support: HopSupport,
) -> Result<Vec<Tensor>, SkeletonError> {
    if hops < 1 {
        return Err(SkeletonError::BadHopCount(hops));
    }
    let n = graph.joint_count();
    let dist = graph.distances();

    // connectivity check with component listing
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        for (j, c) in comp.iter_mut().enumerate() {
            if dist[start][j] != usize::MAX && *c == usize::MAX {
                *c = count;
            }
        }
        count += 1;
    }
    if count > 1 {
        let mut groups = vec![Vec::new(); count];
        for (j, &c) in comp.iter().enumerate() {
            groups[c].push(j.to_string());
        }
        let desc = groups
            .iter()
            .map(|g| format!("[{}]", g.join(", ")))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(SkeletonError::Disconnected(desc));
    }

    let mut result = Vec::with_capacity(hops);
    for k in 1..=hops {
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = dist[i][j];
                let connected = match support {
                    HopSupport::Exact => d == k,
                    HopSupport::Within => d >= 1 && d <= k,
                };
                if connected {
                    a[i * n + j] = 1.0;
                }
            }
        }
        let degree: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        let inv_sqrt: Vec<f64> = degree
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        result.push(Tensor::new(vec![n, n], a).expect("hop matrix shape"));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SkeletonGraph {
        SkeletonGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
            2,
            HopSupport::Exact,
        )
        .unwrap()
    }

    #[test]
    fn coco17_has_17_joints_and_the_standard_arm_edge() {
        let g = coco17_skeleton();
        assert_eq!(g.joint_count(), 17);
        let ls = g.joint_index("left_shoulder").unwrap();
        let le = g.joint_index("left_elbow").unwrap();
        assert!(g.has_edge(ls, le));
    }

    #[test]
    fn wrist_to_wrist_distance_matches_bfs() {
        let g = coco17_skeleton();
        let d = g.distances();
        let lw = g.joint_index("left_wrist").unwrap();
        let rw = g.joint_index("right_wrist").unwrap();
        // wrist-elbow-shoulder-shoulder-elbow-wrist
        assert_eq!(d[lw][rw], 5);
    }

    #[test]
    fn crowdpose_is_connected_with_14_joints() {
        let g = crowdpose14_skeleton_with(3, HopSupport::Exact);
        assert_eq!(g.joint_count(), 14);
        assert_eq!(g.hop_count(), 3);
    }

    #[test]
    fn path_graph_hop1_normalization() {
        let g = path3();
        let a1 = &g.hop_matrices()[0];
        let inv_sqrt2 = 0.7071067811865475244_f64;
        assert!((a1.data()[1] - inv_sqrt2).abs() < 1e-15); // (a,b): 1/sqrt(1*2)
        assert!((a1.data()[3] - inv_sqrt2).abs() < 1e-15);
        assert_eq!(a1.data()[0], 0.0);
        assert_eq!(a1.data()[2], 0.0); // (a,c) is distance 2
    }

    #[test]
    fn path_graph_hop2_is_degree_one_pair() {
        let g = path3();
        let a2 = &g.hop_matrices()[1];
        assert_eq!(a2.data()[2], 1.0); // (a,c): 1/sqrt(1*1)
        assert_eq!(a2.data()[6], 1.0);
        assert_eq!(a2.data()[1], 0.0);
        assert_eq!(a2.data()[4], 0.0); // diagonal stays zero
    }

    #[test]
    fn bad_hop_count_and_disconnection_error() {
        let g = path3();
        assert!(matches!(
            build_hop_adjacency(&g, 0, HopSupport::Exact),
            Err(SkeletonError::BadHopCount(0))
        ));
        let disconnected = SkeletonGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![(0, 1), (2, 3)],
            2,
            HopSupport::Exact,
        );
        let err = disconnected.unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[0, 1]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn duplicate_and_self_loop_edges_are_rejected() {
        let dup = SkeletonGraph::new(
            vec!["a".into(), "b".into()],
            vec![(0, 1), (1, 0)],
            1,
            HopSupport::Exact,
        );
        assert!(matches!(dup, Err(SkeletonError::DuplicateEdge(0, 1))));
        let loopy = SkeletonGraph::new(
            vec!["a".into(), "b".into()],
            vec![(0, 0), (0, 1)],
            1,
            HopSupport::Exact,
        );
        assert!(matches!(loopy, Err(SkeletonError::SelfLoop(0))));
    }

    #[test]
    fn within_support_accumulates_bands() {
        let g = SkeletonGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
            2,
            HopSupport::Within,
        )
        .unwrap();
        let a2 = &g.hop_matrices()[1];
        // within distance 2, all off-diagonal pairs of the path are connected
        assert!(a2.data()[2] > 0.0);
        assert!(a2.data()[1] > 0.0);
    }
}
