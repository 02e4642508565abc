//! SLAM measurement graph, canonical edge ordering and the incidence/Laplacian
//! constructions used by the data matrix.
//!
//! Vertex layout: poses occupy indices `0..n_poses`, landmarks follow at
//! `n_poses..n_poses + n_landmarks`. Landmark edges are directed pose → landmark and
//! pose edges are directed from the measuring pose.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sparse::{CscMatrix, TripletBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoseId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LandmarkId(pub usize);

/// Relative pose measurement from pose `from` to pose `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePoseEdge {
    pub from: PoseId,
    pub to: PoseId,
    /// Rotation of `to` expressed in `from`.
    pub rel_rotation: Matrix3<f64>,
    /// Position of `to` relative to `from`, expressed in `from`.
    pub rel_translation: Vector3<f64>,
    pub w_r: f64,
    pub w_t: f64,
}

/// Landmark position measured in the frame of the observing pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLandmarkEdge {
    pub pose: PoseId,
    pub landmark: LandmarkId,
    pub meas: Vector3<f64>,
    pub w_b: f64,
}

/// Validated landmark-SLAM measurement graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGraph {
    n_poses: usize,
    n_landmarks: usize,
    landmark_edges: Vec<PoseLandmarkEdge>,
    pose_edges: Vec<PosePoseEdge>,
}

/// Reference to an edge in insertion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeRef {
    Landmark(usize),
    Pose(usize),
}

/// Fixed ordering of all edges: landmark edges first, grouped contiguously by
/// landmark index, then pose edges in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeOrdering {
    order: Vec<EdgeRef>,
    /// `landmark_ptr[j]..landmark_ptr[j + 1]` is the range of landmark `j` in `order`.
    landmark_ptr: Vec<usize>,
}

const ROT_TOL: f64 = 1e-9;

impl MeasurementGraph {
    /// Validates and builds a graph. Checks weights, rotation membership, index
    /// ranges, landmark degrees and weak connectivity (breadth-first search).
    pub fn new(
        n_poses: usize,
        n_landmarks: usize,
        landmark_edges: Vec<PoseLandmarkEdge>,
        pose_edges: Vec<PosePoseEdge>,
    ) -> Result<Self> {
        if n_poses == 0 {
            return Err(Error::InvalidGraph("graph needs at least one pose".into()));
        }
        for (n, e) in landmark_edges.iter().enumerate() {
            if e.pose.0 >= n_poses || e.landmark.0 >= n_landmarks {
                return Err(Error::InvalidGraph(format!("landmark edge {n} references a missing vertex")));
            }
            check_weight(&format!("landmark edge {n} (w_b)"), e.w_b)?;
            if !e.meas.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGraph(format!("landmark edge {n} has a non-finite measurement")));
            }
        }
        for (n, e) in pose_edges.iter().enumerate() {
            if e.from.0 >= n_poses || e.to.0 >= n_poses {
                return Err(Error::InvalidGraph(format!("pose edge {n} references a missing pose")));
            }
            if e.from == e.to {
                return Err(Error::InvalidGraph(format!("pose edge {n} is a self loop")));
            }
            check_weight(&format!("pose edge {n} (w_r)"), e.w_r)?;
            check_weight(&format!("pose edge {n} (w_t)"), e.w_t)?;
            let r = &e.rel_rotation;
            if (r.transpose() * r - Matrix3::identity()).amax() > ROT_TOL || r.determinant() <= 0.0 {
                return Err(Error::InvalidGraph(format!("pose edge {n} rotation is not in SO(3)")));
            }
            if !e.rel_translation.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGraph(format!("pose edge {n} has a non-finite translation")));
            }
        }
        let g = Self {
            n_poses,
            n_landmarks,
            landmark_edges,
            pose_edges,
        };
        let degrees = g.landmark_degrees();
        if let Some(j) = degrees.iter().position(|&d| d == 0) {
            return Err(Error::InvalidGraph(format!("landmark {j} has no observations")));
        }
        if !g.is_connected(true, true) {
            return Err(Error::Disconnected("measurement graph is not weakly connected".into()));
        }
        Ok(g)
    }

    pub fn n_poses(&self) -> usize {
        self.n_poses
    }

    pub fn n_landmarks(&self) -> usize {
        self.n_landmarks
    }

    pub fn n_vertices(&self) -> usize {
        self.n_poses + self.n_landmarks
    }

    pub fn n_edges(&self) -> usize {
        self.landmark_edges.len() + self.pose_edges.len()
    }

    pub fn landmark_edges(&self) -> &[PoseLandmarkEdge] {
        &self.landmark_edges
    }

    pub fn pose_edges(&self) -> &[PosePoseEdge] {
        &self.pose_edges
    }

    pub fn landmark_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_landmarks];
        for e in &self.landmark_edges {
            d[e.landmark.0] += 1;
        }
        d
    }

    /// Weak connectivity of the subgraph using the selected edge classes. Landmarks
    /// are part of the vertex set only when landmark edges are included.
    pub fn is_connected(&self, with_landmark_edges: bool, with_pose_edges: bool) -> bool {
        let nv = if with_landmark_edges { self.n_vertices() } else { self.n_poses };
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
        if with_landmark_edges {
            for e in &self.landmark_edges {
                let (a, b) = (e.pose.0, self.n_poses + e.landmark.0);
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        if with_pose_edges {
            for e in &self.pose_edges {
                adj[e.from.0].push(e.to.0);
                adj[e.to.0].push(e.from.0);
            }
        }
        let mut seen = vec![false; nv];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == nv
    }

    /// `(tail, head)` vertex indices of an edge.
    pub fn endpoints(&self, e: EdgeRef) -> (usize, usize) {
        match e {
            EdgeRef::Landmark(k) => {
                let le = &self.landmark_edges[k];
                (le.pose.0, self.n_poses + le.landmark.0)
            }
            EdgeRef::Pose(k) => {
                let pe = &self.pose_edges[k];
                (pe.from.0, pe.to.0)
            }
        }
    }

    /// Translation weight (`w_b` or `w_t`) of an edge.
    pub fn translation_weight(&self, e: EdgeRef) -> f64 {
        match e {
            EdgeRef::Landmark(k) => self.landmark_edges[k].w_b,
            EdgeRef::Pose(k) => self.pose_edges[k].w_t,
        }
    }

    /// Measured vector of an edge (`ỹ` or `t̃`), in the tail pose frame.
    pub fn measurement(&self, e: EdgeRef) -> Vector3<f64> {
        match e {
            EdgeRef::Landmark(k) => self.landmark_edges[k].meas,
            EdgeRef::Pose(k) => self.pose_edges[k].rel_translation,
        }
    }
}

fn check_weight(edge: &str, w: f64) -> Result<()> {
    if w > 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidWeight {
            edge: edge.to_string(),
            value: w,
        })
    }
}

impl EdgeOrdering {
    pub fn edges(&self) -> &[EdgeRef] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn n_landmark_edges(&self) -> usize {
        *self.landmark_ptr.last().unwrap_or(&0)
    }

    /// Positions (in the ordering) of the edges observing landmark `j`.
    pub fn landmark_block(&self, j: usize) -> std::ops::Range<usize> {
        self.landmark_ptr[j]..self.landmark_ptr[j + 1]
    }

    pub fn landmark_ptr(&self) -> &[usize] {
        &self.landmark_ptr
    }
}

/// Landmark edges grouped by landmark (stable within a landmark), then pose edges.
pub fn canonical_ordering(g: &MeasurementGraph) -> EdgeOrdering {
    let mut landmark_ptr = vec![0usize; g.n_landmarks + 1];
    for e in &g.landmark_edges {
        landmark_ptr[e.landmark.0 + 1] += 1;
    }
    for j in 0..g.n_landmarks {
        landmark_ptr[j + 1] += landmark_ptr[j];
    }
    let mut next = landmark_ptr.clone();
    let mut order = vec![EdgeRef::Pose(0); g.n_edges()];
    for (k, e) in g.landmark_edges.iter().enumerate() {
        let slot = &mut next[e.landmark.0];
        order[*slot] = EdgeRef::Landmark(k);
        *slot += 1;
    }
    let nb = g.landmark_edges.len();
    for k in 0..g.pose_edges.len() {
        order[nb + k] = EdgeRef::Pose(k);
    }
    EdgeOrdering { order, landmark_ptr }
}

/// Signed incidence matrix `B_s` (`n_vertices × n_edges`): +1 at the head, −1 at the tail.
pub fn incidence(g: &MeasurementGraph, ord: &EdgeOrdering) -> CscMatrix {
    let mut t = TripletBuilder::with_capacity(g.n_vertices(), ord.len(), 2 * ord.len());
    for (c, &e) in ord.edges().iter().enumerate() {
        let (tail, head) = g.endpoints(e);
        t.push(tail, c, -1.0);
        t.push(head, c, 1.0);
    }
    t.build()
}

/// Restricted incidence `B_s^p` (`n_poses × n_edges`): 1 at the tail pose of every edge.
pub fn restricted_incidence(g: &MeasurementGraph, ord: &EdgeOrdering) -> CscMatrix {
    let mut t = TripletBuilder::with_capacity(g.n_poses(), ord.len(), ord.len());
    for (c, &e) in ord.edges().iter().enumerate() {
        let (tail, _) = g.endpoints(e);
        t.push(tail, c, 1.0);
    }
    t.build()
}

/// Edge weights in ordering position (`w_b` for landmark edges, `w_t` for pose edges).
pub fn edge_weights(g: &MeasurementGraph, ord: &EdgeOrdering) -> Vec<f64> {
    ord.edges().iter().map(|&e| g.translation_weight(e)).collect()
}

/// Weighted incidences `V_s = B_s W^½` and `V_s^p = B_s^p W^½`.
pub fn weighted_incidences(g: &MeasurementGraph, ord: &EdgeOrdering) -> Result<(CscMatrix, CscMatrix)> {
    let w = edge_weights(g, ord);
    let mut sqrt_w = Vec::with_capacity(w.len());
    for (c, &wc) in w.iter().enumerate() {
        check_weight(&format!("edge at position {c}"), wc)?;
        sqrt_w.push(wc.sqrt());
    }
    Ok((
        incidence(g, ord).scale_columns(&sqrt_w),
        restricted_incidence(g, ord).scale_columns(&sqrt_w),
    ))
}

/// Weighted Laplacian `L_s = V_s V_sᵀ`.
pub fn laplacian(v: &CscMatrix) -> CscMatrix {
    v.gram()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(pose: usize, landmark: usize) -> PoseLandmarkEdge {
        PoseLandmarkEdge {
            pose: PoseId(pose),
            landmark: LandmarkId(landmark),
            meas: Vector3::new(1.0, 0.0, 0.0),
            w_b: 1.0,
        }
    }

    fn pp(from: usize, to: usize) -> PosePoseEdge {
        PosePoseEdge {
            from: PoseId(from),
            to: PoseId(to),
            rel_rotation: Matrix3::identity(),
            rel_translation: Vector3::new(1.0, 0.0, 0.0),
            w_r: 1.0,
            w_t: 1.0,
        }
    }

    #[test]
    fn ordering_groups_landmarks_before_pose_edges() {
        // Insertion: p-edge e1, lm(L0) e2, lm(L1) e3, lm(L0) e4 -> [e2, e4, e3, e1].
        let g = MeasurementGraph::new(2, 2, vec![lm(0, 0), lm(1, 1), lm(1, 0)], vec![pp(0, 1)]).unwrap();
        let ord = canonical_ordering(&g);
        assert_eq!(
            ord.edges(),
            &[EdgeRef::Landmark(0), EdgeRef::Landmark(2), EdgeRef::Landmark(1), EdgeRef::Pose(0)]
        );
        assert_eq!(ord.landmark_block(0), 0..2);
        assert_eq!(ord.landmark_block(1), 2..3);
        assert_eq!(canonical_ordering(&g), ord);
    }

    #[test]
    fn ordering_without_landmarks_is_identity() {
        let g = MeasurementGraph::new(3, 0, vec![], vec![pp(0, 1), pp(2, 1), pp(0, 2)]).unwrap();
        let ord = canonical_ordering(&g);
        assert_eq!(ord.edges(), &[EdgeRef::Pose(0), EdgeRef::Pose(1), EdgeRef::Pose(2)]);
    }

    #[test]
    fn single_edge_incidence() {
        let g = MeasurementGraph::new(1, 1, vec![lm(0, 0)], vec![]).unwrap();
        let ord = canonical_ordering(&g);
        let b = incidence(&g, &ord).to_dense();
        assert_eq!(b.as_slice(), &[-1.0, 1.0]);
        let bp = restricted_incidence(&g, &ord).to_dense();
        assert_eq!(bp.as_slice(), &[1.0]);
    }

    #[test]
    fn pose_edge_restricted_column() {
        let g = MeasurementGraph::new(2, 0, vec![], vec![pp(0, 1)]).unwrap();
        let bp = restricted_incidence(&g, &canonical_ordering(&g)).to_dense();
        assert_eq!(bp.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn weighted_column_scaled_by_sqrt() {
        let mut e = lm(0, 0);
        e.w_b = 4.0;
        let g = MeasurementGraph::new(1, 1, vec![e], vec![]).unwrap();
        let (v, vp) = weighted_incidences(&g, &canonical_ordering(&g)).unwrap();
        assert_eq!(v.to_dense().as_slice(), &[-2.0, 2.0]);
        assert_eq!(vp.to_dense().as_slice(), &[2.0]);
    }

    #[test]
    fn two_vertex_laplacian() {
        let g = MeasurementGraph::new(1, 1, vec![lm(0, 0)], vec![]).unwrap();
        let (v, _) = weighted_incidences(&g, &canonical_ordering(&g)).unwrap();
        let l = laplacian(&v).to_dense();
        assert_eq!(l.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn validation_errors() {
        let mut bad = lm(0, 0);
        bad.w_b = 0.0;
        assert!(matches!(
            MeasurementGraph::new(1, 1, vec![bad], vec![]),
            Err(Error::InvalidWeight { .. })
        ));
        assert!(matches!(
            MeasurementGraph::new(2, 1, vec![lm(0, 0)], vec![]),
            Err(Error::Disconnected(_))
        ));
        assert!(matches!(
            MeasurementGraph::new(1, 2, vec![lm(0, 0)], vec![]),
            Err(Error::InvalidGraph(_))
        ));
        let mut rot = pp(0, 1);
        rot.rel_rotation = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(MeasurementGraph::new(2, 0, vec![], vec![rot]).is_err());
        assert!(MeasurementGraph::new(2, 0, vec![], vec![pp(1, 1)]).is_err());
        assert!(MeasurementGraph::new(0, 0, vec![], vec![]).is_err());
    }

    #[test]
    fn duplicate_edges_allowed() {
        let g = MeasurementGraph::new(2, 0, vec![], vec![pp(0, 1), pp(0, 1)]).unwrap();
        assert_eq!(g.n_edges(), 2);
    }
}
