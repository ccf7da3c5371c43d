//! Reconciliation: propose place/object merge candidates after alignment,
//! register object geometry with ICP, and apply-or-undo merges by the
//! valid/proposed ratio rule.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::graph::{GraphError, Layer, NodeId, SceneGraph};
use crate::se3::{boxminus, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateKind {
    Place,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateStatus {
    Proposed,
    Valid,
    Invalid,
}

/// A proposed identification of two nodes from different robots; the
/// optimizer validates or rejects it.
#[derive(Clone, Debug)]
pub struct MergeCandidate {
    pub a: NodeId,
    pub b: NodeId,
    pub kind: CandidateKind,
    /// Identity for places; the ICP registration for objects (maps b's
    /// vertices onto a's).
    pub relative_transform: Pose,
    pub status: CandidateStatus,
}

#[derive(Clone, Debug)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub max_correspondence_distance: f64,
    /// Vertex sets above this size are reduced by farthest-point sampling.
    pub vertex_cap: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            convergence_tol: 1e-10,
            max_correspondence_distance: 0.25,
            vertex_cap: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconciliationConfig {
    pub place_distance_max: f64,
    pub place_radius_diff_max: f64,
    /// Merges apply only when valid/proposed reaches this (inclusive).
    pub undo_ratio_threshold: f64,
    pub icp: IcpConfig,
}

impl Default for ReconciliationConfig {
    fn default() -> Self {
        ReconciliationConfig {
            place_distance_max: 0.01,
            place_radius_diff_max: 0.01,
            undo_ratio_threshold: 0.5,
            icp: IcpConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IcpError {
    #[error("need at least 3 vertices on each side, got {a} and {b}")]
    TooFewVertices { a: usize, b: usize },
    #[error("no correspondences within {0} m")]
    NoCorrespondences(f64),
}

fn initialized(g: &SceneGraph, id: NodeId) -> bool {
    g.robot(id.robot)
        .map(|info| info.frame.is_initialized())
        .unwrap_or(false)
}

/// Proposes place merges: cross-robot pairs (initialized robots only) whose
/// positions and radii both agree within the configured bounds. A uniform
/// spatial hash keeps the scan near-linear; ordering is deterministic.
pub fn propose_place_merges(g: &SceneGraph, cfg: &ReconciliationConfig) -> Vec<MergeCandidate> {
    let places: Vec<(NodeId, Vector3<f64>, f64)> = g
        .nodes_in_layer(Layer::Place)
        .filter(|(id, _)| initialized(g, **id))
        .map(|(id, p)| {
            let place = p.as_place().unwrap();
            (*id, place.position, place.radius)
        })
        .collect();

    let cell = cfg.place_distance_max;
    let key = |p: &Vector3<f64>| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut grid: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, (_, pos, _)) in places.iter().enumerate() {
        grid.entry(key(pos)).or_default().push(i);
    }

    let mut candidates = Vec::new();
    for (i, (id_a, pos_a, r_a)) in places.iter().enumerate() {
        let (kx, ky, kz) = key(pos_a);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j <= i {
                            continue;
                        }
                        let (id_b, pos_b, r_b) = &places[j];
                        if id_a.robot == id_b.robot {
                            continue;
                        }
                        if (pos_a - pos_b).norm() <= cfg.place_distance_max
                            && (r_a - r_b).abs() <= cfg.place_radius_diff_max
                        {
                            let (a, b) = if id_a < id_b {
                                (*id_a, *id_b)
                            } else {
                                (*id_b, *id_a)
                            };
                            candidates.push(MergeCandidate {
                                a,
                                b,
                                kind: CandidateKind::Place,
                                relative_transform: Pose::identity(),
                                status: CandidateStatus::Proposed,
                            });
                        }
                    }
                }
            }
        }
    }
    candidates.sort_by_key(|c| (c.a, c.b));
    candidates.dedup_by_key(|c| (c.a, c.b));
    candidates
}

/// Brute-force O(n²) reference for the place proposal; kept for oracle
/// comparisons in tests.
pub fn propose_place_merges_bruteforce(
    g: &SceneGraph,
    cfg: &ReconciliationConfig,
) -> Vec<MergeCandidate> {
    let places: Vec<(NodeId, Vector3<f64>, f64)> = g
        .nodes_in_layer(Layer::Place)
        .filter(|(id, _)| initialized(g, **id))
        .map(|(id, p)| {
            let place = p.as_place().unwrap();
            (*id, place.position, place.radius)
        })
        .collect();
    let mut candidates = Vec::new();
    for (i, (id_a, pos_a, r_a)) in places.iter().enumerate() {
        for (id_b, pos_b, r_b) in places.iter().skip(i + 1) {
            if id_a.robot == id_b.robot {
                continue;
            }
            if (pos_a - pos_b).norm() <= cfg.place_distance_max
                && (r_a - r_b).abs() <= cfg.place_radius_diff_max
            {
                let (a, b) = if id_a < id_b { (*id_a, *id_b) } else { (*id_b, *id_a) };
                candidates.push(MergeCandidate {
                    a,
                    b,
                    kind: CandidateKind::Place,
                    relative_transform: Pose::identity(),
                    status: CandidateStatus::Proposed,
                });
            }
        }
    }
    candidates.sort_by_key(|c| (c.a, c.b));
    candidates
}

/// Positions of an object's supporting mesh-control vertices.
fn object_vertices(g: &SceneGraph, id: NodeId) -> Vec<Vector3<f64>> {
    let Some(object) = g.node(id).and_then(|p| p.as_object()) else {
        return Vec::new();
    };
    object
        .vertex_ids
        .iter()
        .filter_map(|vid| g.node(*vid).and_then(|p| p.as_mesh_control()))
        .map(|mc| mc.position)
        .collect()
}

/// Proposes object merges: cross-robot pairs with the same semantic label
/// and intersecting bounding boxes. The relative transform comes from ICP
/// on the supporting vertices; registration failure downgrades the
/// candidate to `Invalid` before optimization.
pub fn propose_object_merges(g: &SceneGraph, cfg: &ReconciliationConfig) -> Vec<MergeCandidate> {
    let objects: Vec<(NodeId, &crate::graph::ObjectNode)> = g
        .nodes_in_layer(Layer::Object)
        .filter(|(id, _)| initialized(g, **id))
        .map(|(id, p)| (*id, p.as_object().unwrap()))
        .collect();

    let mut candidates = Vec::new();
    for (i, (id_a, obj_a)) in objects.iter().enumerate() {
        for (id_b, obj_b) in objects.iter().skip(i + 1) {
            if id_a.robot == id_b.robot
                || obj_a.semantic_label != obj_b.semantic_label
                || !obj_a.bbox.intersects(&obj_b.bbox)
            {
                continue;
            }
            let (a, b) = if id_a < id_b { (*id_a, *id_b) } else { (*id_b, *id_a) };
            let (va, vb) = (object_vertices(g, a), object_vertices(g, b));
            let (transform, status) = match icp_object_transform(&va, &vb, &cfg.icp) {
                Ok(t) => (t, CandidateStatus::Proposed),
                Err(_) => (Pose::identity(), CandidateStatus::Invalid),
            };
            candidates.push(MergeCandidate {
                a,
                b,
                kind: CandidateKind::Object,
                relative_transform: transform,
                status,
            });
        }
    }
    candidates.sort_by_key(|c| (c.a, c.b));
    candidates
}

/// Deterministic farthest-point subsample, seeded at the first vertex.
fn farthest_point_subsample(points: &[Vector3<f64>], cap: usize) -> Vec<Vector3<f64>> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[0]).norm()).collect();
    while chosen.len() < cap {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((points[i] - points[next]).norm());
        }
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| points[i]).collect()
}

/// Closed-form rigid fit (Kabsch) mapping `src` onto `dst` for paired
/// points.
fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let c_src = src.iter().sum::<Vector3<f64>>() / n;
    let c_dst = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        h += (d - c_dst) * (s - c_src).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * v_t;
    }
    let rot = nalgebra::UnitQuaternion::from_matrix(&r);
    let t = c_dst - rot * c_src;
    Pose::new(rot, t)
}

/// Point-to-point ICP initialized at centroid alignment. Correspondences
/// are mutual nearest neighbors within the max distance. Returns the
/// transform mapping `b`'s vertices onto `a`'s.
pub fn icp_object_transform(
    a: &[Vector3<f64>],
    b: &[Vector3<f64>],
    cfg: &IcpConfig,
) -> Result<Pose, IcpError> {
    if a.len() < 3 || b.len() < 3 {
        return Err(IcpError::TooFewVertices {
            a: a.len(),
            b: b.len(),
        });
    }
    let a = farthest_point_subsample(a, cfg.vertex_cap);
    let b = farthest_point_subsample(b, cfg.vertex_cap);

    let centroid = |pts: &[Vector3<f64>]| pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut transform = Pose::from_translation(centroid(&a) - centroid(&b));

    for _ in 0..cfg.max_iterations {
        let moved: Vec<Vector3<f64>> = b.iter().map(|p| transform.transform_point(p)).collect();

        // nearest a-index for each moved b point, and vice versa
        let nearest = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> Vec<usize> {
            from.iter()
                .map(|p| {
                    to.iter()
                        .enumerate()
                        .map(|(j, q)| (j, (p - q).norm()))
                        .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect()
        };
        let b_to_a = nearest(&moved, &a);
        let a_to_b = nearest(&a, &moved);

        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (bi, &ai) in b_to_a.iter().enumerate() {
            if a_to_b[ai] == bi
                && (moved[bi] - a[ai]).norm() <= cfg.max_correspondence_distance
            {
                src.push(b[bi]);
                dst.push(a[ai]);
            }
        }
        if src.len() < 3 {
            return Err(IcpError::NoCorrespondences(cfg.max_correspondence_distance));
        }

        let refined = kabsch(&src, &dst);
        let update = boxminus(&transform, &refined).norm();
        transform = refined;
        if update < cfg.convergence_tol {
            break;
        }
    }
    Ok(transform)
}

/// Outcome counts for one validate-and-apply round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ApplyReport {
    pub proposed: usize,
    pub valid: usize,
    pub applied: usize,
    pub undone: usize,
    pub ratio: f64,
}

/// Marks candidates valid/invalid from the optimizer's inlier mask, applies
/// the valid merges, then undoes them all if the valid/proposed ratio falls
/// below the threshold (inclusive threshold applies).
pub fn validate_and_apply(
    g: &mut SceneGraph,
    candidates: &mut [MergeCandidate],
    inlier_mask: &[bool],
    cfg: &ReconciliationConfig,
) -> Result<ApplyReport, GraphError> {
    assert_eq!(candidates.len(), inlier_mask.len(), "one mask entry per candidate");
    let mut report = ApplyReport {
        proposed: candidates.len(),
        ..ApplyReport::default()
    };
    for (c, inlier) in candidates.iter_mut().zip(inlier_mask.iter()) {
        if c.status == CandidateStatus::Invalid {
            continue;
        }
        c.status = if *inlier {
            CandidateStatus::Valid
        } else {
            CandidateStatus::Invalid
        };
        if *inlier {
            report.valid += 1;
        }
    }
    report.ratio = if report.proposed == 0 {
        1.0
    } else {
        report.valid as f64 / report.proposed as f64
    };

    let mut records = Vec::new();
    for c in candidates.iter() {
        if c.status != CandidateStatus::Valid {
            continue;
        }
        // Earlier merges in this batch may have absorbed one endpoint.
        let keep = g.resolve(c.a);
        let absorb = g.resolve(c.b);
        if keep == absorb {
            continue;
        }
        records.push(g.merge_nodes(keep.min(absorb), keep.max(absorb))?);
        report.applied += 1;
    }

    if report.ratio < cfg.undo_ratio_threshold {
        for record in records.iter().rev() {
            g.undo_merge(record)?;
        }
        report.undone = report.applied;
        report.applied = 0;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        to_canonical_json, FrameStatus, NodePayload, ObjectNode, PlaceNode, RobotCapabilities,
        RobotId,
    };
    use approx::assert_abs_diff_eq;
    use nalgebra::UnitQuaternion;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn initialized_graph(robots: u32) -> SceneGraph {
        let mut g = SceneGraph::new();
        for r in 0..robots {
            g.ensure_robot(RobotId(r), RobotCapabilities::full());
            g.set_frame(RobotId(r), FrameStatus::Initialized(Pose::identity()))
                .unwrap();
        }
        g
    }

    fn add_place(g: &mut SceneGraph, robot: u32, index: u64, pos: [f64; 3], radius: f64) -> NodeId {
        let id = NodeId::new(RobotId(robot), Layer::Place, index);
        g.add_node(
            id,
            NodePayload::Place(PlaceNode {
                position: Vector3::new(pos[0], pos[1], pos[2]),
                radius,
            }),
        )
        .unwrap();
        id
    }

    #[test]
    fn coincident_places_yield_one_candidate() {
        let mut g = initialized_graph(2);
        add_place(&mut g, 0, 0, [1.0, 2.0, 0.0], 0.5);
        add_place(&mut g, 1, 0, [1.0, 2.0, 0.0], 0.5);
        let cands = propose_place_merges(&g, &ReconciliationConfig::default());
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].kind, CandidateKind::Place);
        assert!(boxminus(&cands[0].relative_transform, &Pose::identity()).norm() < 1e-15);
    }

    #[test]
    fn place_thresholds_are_exact() {
        let cfg = ReconciliationConfig::default();
        // 0.02 m apart: no candidate at the 0.01 m bound
        let mut g = initialized_graph(2);
        add_place(&mut g, 0, 0, [0.0, 0.0, 0.0], 0.5);
        add_place(&mut g, 1, 0, [0.02, 0.0, 0.0], 0.5);
        assert!(propose_place_merges(&g, &cfg).is_empty());
        // radius difference 0.02: same story
        let mut g = initialized_graph(2);
        add_place(&mut g, 0, 0, [0.0, 0.0, 0.0], 0.5);
        add_place(&mut g, 1, 0, [0.0, 0.0, 0.0], 0.52);
        assert!(propose_place_merges(&g, &cfg).is_empty());
    }

    #[test]
    fn uninitialized_robot_is_never_proposed() {
        let mut g = initialized_graph(1);
        g.ensure_robot(RobotId(1), RobotCapabilities::full());
        add_place(&mut g, 0, 0, [0.0, 0.0, 0.0], 0.5);
        add_place(&mut g, 1, 0, [0.0, 0.0, 0.0], 0.5);
        assert!(propose_place_merges(&g, &ReconciliationConfig::default()).is_empty());
    }

    #[test]
    fn grid_matches_bruteforce_on_random_places() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut g = initialized_graph(2);
        for r in 0..2 {
            for i in 0..100 {
                // cluster positions so some pairs land within 1 cm
                let base = Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    0.0,
                );
                add_place(&mut g, r, i, [base.x, base.y, base.z], 0.5);
            }
        }
        let cfg = ReconciliationConfig::default();
        let fast = propose_place_merges(&g, &cfg);
        let slow = propose_place_merges_bruteforce(&g, &cfg);
        assert!(!slow.is_empty());
        assert_eq!(
            fast.iter().map(|c| (c.a, c.b)).collect::<Vec<_>>(),
            slow.iter().map(|c| (c.a, c.b)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn proposal_is_deterministic() {
        let mut g = initialized_graph(2);
        for i in 0..20 {
            add_place(&mut g, 0, i, [i as f64 * 0.001, 0.0, 0.0], 0.5);
            add_place(&mut g, 1, i, [i as f64 * 0.001, 0.0, 0.0], 0.5);
        }
        let cfg = ReconciliationConfig::default();
        let one = propose_place_merges(&g, &cfg);
        let two = propose_place_merges(&g, &cfg);
        assert_eq!(
            one.iter().map(|c| (c.a, c.b)).collect::<Vec<_>>(),
            two.iter().map(|c| (c.a, c.b)).collect::<Vec<_>>()
        );
    }

    fn add_object_with_vertices(
        g: &mut SceneGraph,
        robot: u32,
        index: u64,
        label: u32,
        centroid: Vector3<f64>,
        vertices: &[Vector3<f64>],
    ) -> NodeId {
        let mut vertex_ids = Vec::new();
        for v in vertices {
            let vid = g.allocate_id(RobotId(robot), Layer::MeshControl).unwrap();
            g.add_node(
                vid,
                NodePayload::MeshControl(crate::graph::MeshControlNode { position: *v }),
            )
            .unwrap();
            vertex_ids.push(vid);
        }
        let id = NodeId::new(RobotId(robot), Layer::Object, index);
        let bbox = crate::graph::Aabb::hull(vertices.iter()).unwrap();
        g.add_node(
            id,
            NodePayload::Object(ObjectNode {
                centroid,
                bbox,
                semantic_label: label,
                vertex_ids,
            }),
        )
        .unwrap();
        id
    }

    fn box_vertices(center: Vector3<f64>, half: f64) -> Vec<Vector3<f64>> {
        crate::graph::Aabb::new(center - Vector3::repeat(half), center + Vector3::repeat(half))
            .corners()
            .to_vec()
    }

    #[test]
    fn identical_objects_propose_with_identity_transform() {
        let mut g = initialized_graph(2);
        let c = Vector3::new(1.0, 1.0, 0.5);
        add_object_with_vertices(&mut g, 0, 0, 3, c, &box_vertices(c, 0.4));
        add_object_with_vertices(&mut g, 1, 0, 3, c, &box_vertices(c, 0.4));
        let cands = propose_object_merges(&g, &ReconciliationConfig::default());
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].status, CandidateStatus::Proposed);
        assert!(boxminus(&cands[0].relative_transform, &Pose::identity()).norm() < 1e-9);
    }

    #[test]
    fn label_gate_blocks_overlapping_boxes() {
        let mut g = initialized_graph(2);
        let c = Vector3::new(0.0, 0.0, 0.0);
        add_object_with_vertices(&mut g, 0, 0, 3, c, &box_vertices(c, 0.4));
        add_object_with_vertices(&mut g, 1, 0, 4, c, &box_vertices(c, 0.4));
        assert!(propose_object_merges(&g, &ReconciliationConfig::default()).is_empty());
    }

    #[test]
    fn shifted_duplicate_recovers_offset_against_horn_oracle() {
        // 0.1 m shifted duplicate with exact vertex correspondence; compare
        // ICP to an independent Horn quaternion-method fit.
        let mut g = initialized_graph(2);
        let c = Vector3::new(2.0, -1.0, 0.5);
        let verts_a = box_vertices(c, 0.45);
        let shift = Vector3::new(0.1, 0.0, 0.0);
        let verts_b: Vec<Vector3<f64>> = verts_a.iter().map(|v| v + shift).collect();
        add_object_with_vertices(&mut g, 0, 0, 7, c, &verts_a);
        add_object_with_vertices(&mut g, 1, 0, 7, c + shift, &verts_b);
        let cands = propose_object_merges(&g, &ReconciliationConfig::default());
        assert_eq!(cands.len(), 1);

        let horn = horn_quaternion_fit(&verts_b, &verts_a);
        let icp = cands[0].relative_transform;
        assert!(boxminus(&icp, &horn).norm() < 1e-6, "icp {icp:?} horn {horn:?}");
        assert_abs_diff_eq!(
            (icp.translation() - Vector3::new(-0.1, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-6
        );
    }

    /// Horn's closed-form quaternion method; independent of the production
    /// Kabsch/SVD route.
    fn horn_quaternion_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vector3<f64>>() / n;
        let cd = dst.iter().sum::<Vector3<f64>>() / n;
        let mut s = Matrix3::zeros();
        for (a, b) in src.iter().zip(dst.iter()) {
            s += (a - cs) * (b - cd).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let q = nalgebra::Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = q.symmetric_eigen();
        let (mut best, mut best_val) = (0, f64::NEG_INFINITY);
        for i in 0..4 {
            if eig.eigenvalues[i] > best_val {
                best_val = eig.eigenvalues[i];
                best = i;
            }
        }
        let v = eig.eigenvectors.column(best);
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
        let t = cd - rot * cs;
        Pose::new(rot, t)
    }

    #[test]
    fn icp_identity_and_rigid_recovery() {
        let cfg = IcpConfig::default();
        let pts = box_vertices(Vector3::zeros(), 0.5);
        let t = icp_object_transform(&pts, &pts, &cfg).unwrap();
        assert!(boxminus(&t, &Pose::identity()).norm() < 1e-9);

        // b = R a + t with a small known motion; ICP must recover the inverse map
        let motion = Pose::from_axis_angle(
            Vector3::new(0.1, 0.3, 1.0),
            0.05,
            Vector3::new(0.08, -0.03, 0.02),
        );
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| motion.transform_point(p)).collect();
        let t = icp_object_transform(&pts, &moved, &cfg).unwrap();
        assert!(boxminus(&t, &motion.inverse()).norm() < 1e-6, "{t:?}");
    }

    #[test]
    fn icp_noise_monte_carlo() {
        let cfg = IcpConfig::default();
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let mut rng = StdRng::seed_from_u64(seed);
            let pts: Vec<Vector3<f64>> = (0..200)
                .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)))
                .collect();
            let noisy: Vec<Vector3<f64>> = pts
                .iter()
                .map(|p| p + Vector3::from_fn(|_, _| 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal)))
                .collect();
            let t = icp_object_transform(&pts, &noisy, &cfg).unwrap();
            worst = worst.max(t.translation().norm());
        }
        assert!(worst < 0.01, "translation error {worst}");
    }

    #[test]
    fn icp_rejects_degenerate_inputs() {
        let cfg = IcpConfig::default();
        let two = vec![Vector3::zeros(), Vector3::x()];
        let three = box_vertices(Vector3::zeros(), 0.5);
        assert_eq!(
            icp_object_transform(&two, &three, &cfg),
            Err(IcpError::TooFewVertices { a: 2, b: 8 })
        );
    }

    #[test]
    fn ratio_rule_boundaries() {
        let cfg = ReconciliationConfig::default();
        // 10 candidates, 4 valid: nothing applied, serialization unchanged
        let (mut g, mut cands) = graph_with_candidates(10);
        let before = to_canonical_json(&g).unwrap();
        let mask: Vec<bool> = (0..10).map(|i| i < 4).collect();
        let report = validate_and_apply(&mut g, &mut cands, &mask, &cfg).unwrap();
        assert_eq!(report.applied, 0);
        assert_eq!(report.undone, 4);
        assert_abs_diff_eq!(report.ratio, 0.4);
        assert_eq!(to_canonical_json(&g).unwrap(), before);

        // 10 candidates, 5 valid: boundary is inclusive, all 5 applied
        let (mut g, mut cands) = graph_with_candidates(10);
        let mask: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let report = validate_and_apply(&mut g, &mut cands, &mask, &cfg).unwrap();
        assert_eq!(report.applied, 5);
        assert_eq!(report.undone, 0);
        assert_abs_diff_eq!(report.ratio, 0.5);
        assert_eq!(g.merge_journal().len(), 5);

        // all valid
        let (mut g, mut cands) = graph_with_candidates(10);
        let report = validate_and_apply(&mut g, &mut cands, &[true; 10], &cfg).unwrap();
        assert_eq!(report.applied, 10);
        assert_abs_diff_eq!(report.ratio, 1.0);
    }

    fn graph_with_candidates(n: u64) -> (SceneGraph, Vec<MergeCandidate>) {
        let mut g = initialized_graph(2);
        let mut cands = Vec::new();
        for i in 0..n {
            let a = add_place(&mut g, 0, i, [i as f64, 0.0, 0.0], 0.5);
            let b = add_place(&mut g, 1, i, [i as f64, 0.0, 0.0], 0.5);
            cands.push(MergeCandidate {
                a,
                b,
                kind: CandidateKind::Place,
                relative_transform: Pose::identity(),
                status: CandidateStatus::Proposed,
            });
        }
        (g, cands)
    }

    #[test]
    fn relabeled_robots_give_relabeled_candidates() {
        let cfg = ReconciliationConfig::default();
        let build = |swap: bool| {
            let mut g = initialized_graph(2);
            let (ra, rb) = if swap { (1, 0) } else { (0, 1) };
            add_place(&mut g, ra, 0, [0.0, 0.0, 0.0], 0.5);
            add_place(&mut g, rb, 0, [0.005, 0.0, 0.0], 0.5);
            propose_place_merges(&g, &cfg)
        };
        let base = build(false);
        let swapped = build(true);
        assert_eq!(base.len(), 1);
        assert_eq!(swapped.len(), 1);
        // same pair surfaces regardless of which robot carried which node
        assert_eq!(base[0].a.layer, swapped[0].a.layer);
        assert_eq!(
            (base[0].a.index, base[0].b.index),
            (swapped[0].a.index, swapped[0].b.index)
        );
    }
}
