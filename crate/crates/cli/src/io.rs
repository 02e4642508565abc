//! Text formats for problems and solutions.
//!
//! ```text
//! VERTEX_SE3:QUAT id tx ty tz qx qy qz qw
//! VERTEX_XYZ id mx my mz
//! EDGE_SE3:QUAT i k tx ty tz qx qy qz qw w_r w_t
//! EDGE_LM i j yx yy yz w_b
//! ```
//!
//! Quaternions are Hamilton `(qx, qy, qz, qw)`. Pose and landmark ids are remapped
//! separately to contiguous indices in ascending id order. Reals are written with
//! the shortest representation that parses back to the same `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use slamcert::graph::{LandmarkId, MeasurementGraph, PoseId, PoseLandmarkEdge, PosePoseEdge};
use slamcert::so3;
use slamcert::solver::SlamState;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Ids(String),
    #[error(transparent)]
    Graph(#[from] slamcert::Error),
}

pub type IoResult<T> = std::result::Result<T, IoError>;

/// Tolerance on `| ‖q‖ − 1 |` for quaternions read from files.
pub const QUAT_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseVertex {
    pub id: u64,
    pub t: [f64; 3],
    pub q: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkVertex {
    pub id: u64,
    pub m: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdgeRecord {
    pub i: u64,
    pub k: u64,
    pub t: [f64; 3],
    pub q: [f64; 4],
    pub w_r: f64,
    pub w_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkEdgeRecord {
    pub i: u64,
    pub j: u64,
    pub y: [f64; 3],
    pub w_b: f64,
}

/// Records of a problem or solution file, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProblemFile {
    pub poses: Vec<PoseVertex>,
    pub landmarks: Vec<LandmarkVertex>,
    pub pose_edges: Vec<PoseEdgeRecord>,
    pub landmark_edges: Vec<LandmarkEdgeRecord>,
}

/// Original ids of the contiguous pose and landmark indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IdMap {
    pub poses: Vec<u64>,
    pub landmarks: Vec<u64>,
}

impl IdMap {
    /// Ids `0..N_p` for poses and `N_p..N_p+N_m` for landmarks.
    pub fn sequential(n_poses: usize, n_landmarks: usize) -> Self {
        Self {
            poses: (0..n_poses as u64).collect(),
            landmarks: (n_poses as u64..(n_poses + n_landmarks) as u64).collect(),
        }
    }
}

fn fields<const N: usize>(tok: &[&str], line: usize) -> IoResult<[f64; N]> {
    if tok.len() != N {
        return Err(IoError::Parse {
            line,
            msg: format!("expected {N} numbers, found {}", tok.len()),
        });
    }
    let mut out = [0.0; N];
    for (o, t) in out.iter_mut().zip(tok) {
        *o = t.parse::<f64>().map_err(|_| IoError::Parse {
            line,
            msg: format!("invalid number '{t}'"),
        })?;
        if !o.is_finite() {
            return Err(IoError::Parse {
                line,
                msg: format!("non-finite number '{t}'"),
            });
        }
    }
    Ok(out)
}

fn parse_id(t: Option<&&str>, line: usize) -> IoResult<u64> {
    let t = t.ok_or_else(|| IoError::Parse {
        line,
        msg: "missing id".into(),
    })?;
    t.parse::<u64>().map_err(|_| IoError::Parse {
        line,
        msg: format!("invalid id '{t}'"),
    })
}

fn check_quat(q: &[f64; 4], line: usize) -> IoResult<()> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > QUAT_UNIT_TOL {
        return Err(IoError::Parse {
            line,
            msg: format!("quaternion norm {n} is not 1 within {QUAT_UNIT_TOL}"),
        });
    }
    Ok(())
}

impl ProblemFile {
    pub fn parse(text: &str) -> IoResult<Self> {
        let mut f = ProblemFile::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tok: Vec<&str> = content.split_whitespace().collect();
            match tok[0] {
                "VERTEX_SE3:QUAT" => {
                    let id = parse_id(tok.get(1), line)?;
                    let v: [f64; 7] = fields(&tok[2..], line)?;
                    let q = [v[3], v[4], v[5], v[6]];
                    check_quat(&q, line)?;
                    f.poses.push(PoseVertex {
                        id,
                        t: [v[0], v[1], v[2]],
                        q,
                    });
                }
                "VERTEX_XYZ" => {
                    let id = parse_id(tok.get(1), line)?;
                    let m: [f64; 3] = fields(&tok[2..], line)?;
                    f.landmarks.push(LandmarkVertex { id, m });
                }
                "EDGE_SE3:QUAT" => {
                    let i = parse_id(tok.get(1), line)?;
                    let k = parse_id(tok.get(2), line)?;
                    let v: [f64; 9] = fields(tok.get(3..).unwrap_or(&[]), line)?;
                    let q = [v[3], v[4], v[5], v[6]];
                    check_quat(&q, line)?;
                    f.pose_edges.push(PoseEdgeRecord {
                        i,
                        k,
                        t: [v[0], v[1], v[2]],
                        q,
                        w_r: v[7],
                        w_t: v[8],
                    });
                }
                "EDGE_LM" => {
                    let i = parse_id(tok.get(1), line)?;
                    let j = parse_id(tok.get(2), line)?;
                    let v: [f64; 4] = fields(tok.get(3..).unwrap_or(&[]), line)?;
                    f.landmark_edges.push(LandmarkEdgeRecord {
                        i,
                        j,
                        y: [v[0], v[1], v[2]],
                        w_b: v[3],
                    });
                }
                other => {
                    return Err(IoError::Parse {
                        line,
                        msg: format!("unknown record type '{other}'"),
                    })
                }
            }
        }
        Ok(f)
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.poses {
            let _ = writeln!(
                s,
                "VERTEX_SE3:QUAT {} {} {} {} {} {} {} {}",
                v.id, v.t[0], v.t[1], v.t[2], v.q[0], v.q[1], v.q[2], v.q[3]
            );
        }
        for v in &self.landmarks {
            let _ = writeln!(s, "VERTEX_XYZ {} {} {} {}", v.id, v.m[0], v.m[1], v.m[2]);
        }
        for e in &self.pose_edges {
            let _ = writeln!(
                s,
                "EDGE_SE3:QUAT {} {} {} {} {} {} {} {} {} {} {}",
                e.i, e.k, e.t[0], e.t[1], e.t[2], e.q[0], e.q[1], e.q[2], e.q[3], e.w_r, e.w_t
            );
        }
        for e in &self.landmark_edges {
            let _ = writeln!(s, "EDGE_LM {} {} {} {} {} {}", e.i, e.j, e.y[0], e.y[1], e.y[2], e.w_b);
        }
        s
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        std::fs::write(path, self.to_text()).map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })
    }

    /// Pose and landmark id sets. Ids referenced only by edges are included.
    pub fn id_map(&self) -> IoResult<IdMap> {
        let mut poses: BTreeSet<u64> = self.poses.iter().map(|v| v.id).collect();
        let mut landmarks: BTreeSet<u64> = self.landmarks.iter().map(|v| v.id).collect();
        for e in &self.pose_edges {
            poses.insert(e.i);
            poses.insert(e.k);
        }
        for e in &self.landmark_edges {
            poses.insert(e.i);
            landmarks.insert(e.j);
        }
        if let Some(id) = poses.intersection(&landmarks).next() {
            return Err(IoError::Ids(format!("id {id} is used for both a pose and a landmark")));
        }
        for (kind, ids) in [
            ("pose", self.poses.iter().map(|v| v.id).collect::<Vec<_>>()),
            ("landmark", self.landmarks.iter().map(|v| v.id).collect::<Vec<_>>()),
        ] {
            let mut seen = BTreeSet::new();
            for id in ids {
                if !seen.insert(id) {
                    return Err(IoError::Ids(format!("{kind} id {id} is defined twice")));
                }
            }
        }
        Ok(IdMap {
            poses: poses.into_iter().collect(),
            landmarks: landmarks.into_iter().collect(),
        })
    }

    /// Graph, initial state from the vertex lines (identity/zero where absent) and
    /// the id map.
    pub fn to_problem(&self) -> IoResult<(MeasurementGraph, SlamState, IdMap)> {
        let ids = self.id_map()?;
        let pidx: BTreeMap<u64, usize> = ids.poses.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let lidx: BTreeMap<u64, usize> = ids.landmarks.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let pose_edges = self
            .pose_edges
            .iter()
            .map(|e| PosePoseEdge {
                from: PoseId(pidx[&e.i]),
                to: PoseId(pidx[&e.k]),
                rel_rotation: so3::from_quaternion(e.q[0], e.q[1], e.q[2], e.q[3]),
                rel_translation: Vector3::from(e.t),
                w_r: e.w_r,
                w_t: e.w_t,
            })
            .collect();
        let landmark_edges = self
            .landmark_edges
            .iter()
            .map(|e| PoseLandmarkEdge {
                pose: PoseId(pidx[&e.i]),
                landmark: LandmarkId(lidx[&e.j]),
                meas: Vector3::from(e.y),
                w_b: e.w_b,
            })
            .collect();
        let g = MeasurementGraph::new(ids.poses.len(), ids.landmarks.len(), landmark_edges, pose_edges)?;
        let state = self.state_for(&ids)?;
        Ok((g, state, ids))
    }

    /// State from the vertex lines, laid out by `ids`. Vertices absent from the file
    /// get identity rotation and zero position.
    fn state_for(&self, ids: &IdMap) -> IoResult<SlamState> {
        let pidx: BTreeMap<u64, usize> = ids.poses.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let lidx: BTreeMap<u64, usize> = ids.landmarks.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut s = SlamState::identity(ids.poses.len(), ids.landmarks.len());
        for v in &self.poses {
            let i = *pidx
                .get(&v.id)
                .ok_or_else(|| IoError::Ids(format!("pose id {} is not part of the problem", v.id)))?;
            s.rotations[i] = so3::from_quaternion(v.q[0], v.q[1], v.q[2], v.q[3]);
            s.translations[i] = Vector3::from(v.t);
        }
        for v in &self.landmarks {
            let j = *lidx
                .get(&v.id)
                .ok_or_else(|| IoError::Ids(format!("landmark id {} is not part of the problem", v.id)))?;
            s.landmarks[j] = Vector3::from(v.m);
        }
        Ok(s)
    }

    /// Builds a file from a graph and vertex values.
    pub fn from_problem(g: &MeasurementGraph, init: &SlamState, ids: &IdMap) -> Self {
        let mut f = Self::solution(init, ids);
        f.pose_edges = g
            .pose_edges()
            .iter()
            .map(|e| PoseEdgeRecord {
                i: ids.poses[e.from.0],
                k: ids.poses[e.to.0],
                t: e.rel_translation.into(),
                q: so3::to_quaternion(&e.rel_rotation),
                w_r: e.w_r,
                w_t: e.w_t,
            })
            .collect();
        f.landmark_edges = g
            .landmark_edges()
            .iter()
            .map(|e| LandmarkEdgeRecord {
                i: ids.poses[e.pose.0],
                j: ids.landmarks[e.landmark.0],
                y: e.meas.into(),
                w_b: e.w_b,
            })
            .collect();
        f
    }

    /// Vertex lines only.
    pub fn solution(s: &SlamState, ids: &IdMap) -> Self {
        Self {
            poses: s
                .rotations
                .iter()
                .zip(&s.translations)
                .zip(&ids.poses)
                .map(|((r, t), &id)| PoseVertex {
                    id,
                    t: (*t).into(),
                    q: so3::to_quaternion(&so3::project_rotation(r)),
                })
                .collect(),
            landmarks: s
                .landmarks
                .iter()
                .zip(&ids.landmarks)
                .map(|(m, &id)| LandmarkVertex { id, m: (*m).into() })
                .collect(),
            ..Default::default()
        }
    }

    /// Reads a solution against a problem's ids: every problem vertex exactly once,
    /// no extras, no edges.
    pub fn to_solution(&self, ids: &IdMap) -> IoResult<SlamState> {
        if !self.pose_edges.is_empty() || !self.landmark_edges.is_empty() {
            return Err(IoError::Ids("solution files must not contain edges".into()));
        }
        let own = self.id_map()?;
        let mut p_have: Vec<u64> = self.poses.iter().map(|v| v.id).collect();
        let mut l_have: Vec<u64> = self.landmarks.iter().map(|v| v.id).collect();
        p_have.sort_unstable();
        l_have.sort_unstable();
        if p_have != ids.poses || l_have != ids.landmarks || own != *ids {
            return Err(IoError::Ids(format!(
                "solution ids do not match the problem ({} poses/{} landmarks expected, {}/{} given)",
                ids.poses.len(),
                ids.landmarks.len(),
                p_have.len(),
                l_have.len()
            )));
        }
        self.state_for(ids)
    }
}

/// `Matrix3` from a file quaternion (normalized).
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    so3::from_quaternion(q[0], q[1], q[2], q[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_quaternion_parses_to_identity() {
        let f = ProblemFile::parse("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(quat_to_matrix(&f.poses[0].q), Matrix3::identity());
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# header\n\nVERTEX_XYZ 4 1 2 3  # trailing\n";
        let f = ProblemFile::parse(text).unwrap();
        assert_eq!(f.landmarks, vec![LandmarkVertex { id: 4, m: [1.0, 2.0, 3.0] }]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ProblemFile::parse("VERTEX_XYZ 1 0 0 0\nEDGE_FOO 1 2\n").unwrap_err();
        assert_eq!(err.to_string(), "line 2: unknown record type 'EDGE_FOO'");
        let err = ProblemFile::parse("EDGE_LM 0 1 1 2 x 1\n").unwrap_err();
        assert_eq!(err.to_string(), "line 1: invalid number 'x'");
        let err = ProblemFile::parse("EDGE_LM 0 1 1 2\n").unwrap_err();
        assert!(err.to_string().starts_with("line 1: expected 4 numbers"));
        let err = ProblemFile::parse("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 2\n").unwrap_err();
        assert!(err.to_string().contains("quaternion norm"));
    }

    #[test]
    fn id_conflicts_rejected() {
        let f = ProblemFile::parse("VERTEX_SE3:QUAT 3 0 0 0 0 0 0 1\nVERTEX_XYZ 3 0 0 0\n").unwrap();
        assert!(f.id_map().is_err());
        let f = ProblemFile::parse("VERTEX_XYZ 3 0 0 0\nVERTEX_XYZ 3 1 0 0\n").unwrap();
        assert!(f.id_map().is_err());
    }

    #[test]
    fn ids_remapped_and_auto_created() {
        let text = "EDGE_LM 10 7 1 0 0 1\nEDGE_LM 4 7 0 1 0 1\nEDGE_SE3:QUAT 4 10 1 0 0 0 0 0 1 1 1\n";
        let (g, s, ids) = ProblemFile::parse(text).unwrap().to_problem().unwrap();
        assert_eq!(ids.poses, vec![4, 10]);
        assert_eq!(ids.landmarks, vec![7]);
        assert_eq!(g.pose_edges()[0].from.0, 0);
        assert_eq!(g.landmark_edges()[0].pose.0, 1);
        assert_eq!(s.rotations[1], Matrix3::identity());
    }
}
