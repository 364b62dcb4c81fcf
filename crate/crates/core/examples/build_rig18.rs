//! Regenerates `assets/rig18.json`, the bundled 18-joint rig.
//!
//! Coordinates: y up, the body faces +z, so its right side is −x. The rest
//! pose is a T-pose with palms facing forward. Bones are open tubes; each
//! hand carries a flat palm plate and each thigh a plate on its back. The
//! plate faces are the contact candidates.
//!
//! ```text
//! cargo run -p anchorfit --example build_rig18 [-- OUTPUT]
//! ```

use std::f64::consts::TAU;
use std::path::PathBuf;

use anchorfit::body_model::{BodyModel, KinematicTree};
use anchorfit::mesh::{subdivided_box, TriMesh};
use nalgebra::Vector3;

const RING_SEGMENTS: usize = 8;
const RING_PARAMS: [f64; 4] = [0.15, 0.38, 0.62, 0.85];
/// Gap between a plate face and the capsule surface of its bone.
const PLATE_GAP: f64 = 0.01;

struct Joint {
    name: &'static str,
    parent: Option<usize>,
    offset: [f64; 3],
    radius: f64,
}

const fn j(name: &'static str, parent: Option<usize>, offset: [f64; 3], radius: f64) -> Joint {
    Joint { name, parent, offset, radius }
}

const JOINTS: [Joint; 18] = [
    j("neck", None, [0.0, 0.0, 0.0], 0.0),
    j("nose", Some(0), [0.0, 0.2, 0.08], 0.05),
    j("r_shoulder", Some(0), [-0.2, 0.0, 0.0], 0.06),
    j("r_elbow", Some(2), [-0.28, 0.0, 0.0], 0.045),
    j("r_wrist", Some(3), [-0.25, 0.0, 0.0], 0.035),
    j("l_shoulder", Some(0), [0.2, 0.0, 0.0], 0.06),
    j("l_elbow", Some(5), [0.28, 0.0, 0.0], 0.045),
    j("l_wrist", Some(6), [0.25, 0.0, 0.0], 0.035),
    j("r_hip", Some(0), [-0.1, -0.5, 0.0], 0.1),
    j("r_knee", Some(8), [0.0, -0.42, 0.0], 0.07),
    j("r_ankle", Some(9), [0.0, -0.4, 0.0], 0.05),
    j("l_hip", Some(0), [0.1, -0.5, 0.0], 0.1),
    j("l_knee", Some(11), [0.0, -0.42, 0.0], 0.07),
    j("l_ankle", Some(12), [0.0, -0.4, 0.0], 0.05),
    j("r_eye", Some(1), [-0.035, 0.04, -0.02], 0.01),
    j("l_eye", Some(1), [0.035, 0.04, -0.02], 0.01),
    j("r_ear", Some(1), [-0.075, 0.0, -0.1], 0.01),
    j("l_ear", Some(1), [0.075, 0.0, -0.1], 0.01),
];

struct Builder {
    mesh: TriMesh,
    weights: Vec<Vec<(usize, f64)>>,
    girth: Vec<Vector3<f64>>,
    candidates: Vec<usize>,
}

impl Builder {
    fn push(&mut self, part: &TriMesh, weight: impl Fn(usize) -> Vec<(usize, f64)>, girth: impl Fn(usize) -> Vector3<f64>) -> usize {
        let base = self.mesh.append(part);
        for v in 0..part.vertices.len() {
            self.weights.push(weight(v));
            self.girth.push(girth(v));
        }
        base
    }

    fn tube(&mut self, a: Vector3<f64>, b: Vector3<f64>, radius: f64, parent: usize, child: usize) {
        let axis = (b - a).normalize();
        let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = axis.cross(&helper).normalize();
        let e2 = axis.cross(&e1);
        let mut vertices = Vec::new();
        let mut radial = Vec::new();
        for t in RING_PARAMS {
            let c = a + (b - a) * t;
            for s in 0..RING_SEGMENTS {
                let phi = TAU * s as f64 / RING_SEGMENTS as f64;
                let dir = e1 * phi.cos() + e2 * phi.sin();
                vertices.push(c + dir * radius);
                radial.push(dir * radius);
            }
        }
        let mut faces = Vec::new();
        for r in 0..RING_PARAMS.len() - 1 {
            for s in 0..RING_SEGMENTS {
                let i0 = r * RING_SEGMENTS + s;
                let i1 = r * RING_SEGMENTS + (s + 1) % RING_SEGMENTS;
                let (j0, j1) = (i0 + RING_SEGMENTS, i1 + RING_SEGMENTS);
                faces.push([i0, i1, j1]);
                faces.push([i0, j1, j0]);
            }
        }
        let part = TriMesh::new(vertices, faces).expect("tube mesh");
        self.push(
            &part,
            |v| {
                if v / RING_SEGMENTS == RING_PARAMS.len() - 1 {
                    vec![(parent, 0.75), (child, 0.25)]
                } else {
                    vec![(parent, 1.0)]
                }
            },
            |v| radial[v] * 0.2,
        );
    }

    /// Box centred at `center`; vertices on the face whose outward normal
    /// is `face_axis·face_sign` become contact candidates.
    fn plate(
        &mut self,
        center: Vector3<f64>,
        half: Vector3<f64>,
        divisions: [usize; 3],
        face_axis: usize,
        face_sign: f64,
        joint: usize,
    ) {
        let part = subdivided_box(half, divisions).map_vertices(|p| p + center);
        let base = self.push(&part, |_| vec![(joint, 1.0)], |_| Vector3::zeros());
        let face = center[face_axis] + face_sign * half[face_axis];
        for (v, p) in part.vertices.iter().enumerate() {
            if (p[face_axis] - face).abs() < 1e-12 {
                self.candidates.push(base + v);
            }
        }
    }
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/rig18.json"));

    let tree = KinematicTree::new(
        JOINTS.iter().map(|j| j.parent).collect(),
        JOINTS.iter().map(|j| Vector3::from(j.offset)).collect(),
        JOINTS.iter().map(|j| j.name.to_string()).collect(),
    )
    .expect("valid tree");
    let rest = tree.rest_positions().to_vec();

    let mut b = Builder {
        mesh: TriMesh::default(),
        weights: Vec::new(),
        girth: Vec::new(),
        candidates: Vec::new(),
    };
    for (parent, child) in tree.bones() {
        b.tube(rest[parent], rest[child], JOINTS[child].radius, parent, child);
    }

    // Palms: beyond the wrist, inner face towards +z at the capsule surface
    // plus a small gap.
    let palm_half = Vector3::new(0.06, 0.04, 0.015);
    let palm_face = JOINTS[4].radius + PLATE_GAP;
    for (wrist, side) in [(4usize, -1.0), (7, 1.0)] {
        let center = rest[wrist] + Vector3::new(side * (0.01 + palm_half.x), 0.0, palm_face - palm_half.z);
        b.plate(center, palm_half, [8, 6, 1], 2, 1.0, wrist);
    }
    // Thigh backs: face towards −z below the thigh capsule.
    let thigh_half = Vector3::new(0.05, 0.13, 0.015);
    let thigh_face = JOINTS[9].radius + PLATE_GAP;
    for hip in [8usize, 11] {
        let center = rest[hip] + Vector3::new(0.0, -0.08 - thigh_half.y, -(thigh_face - thigh_half.z));
        b.plate(center, thigh_half, [6, 8, 1], 2, -1.0, hip);
    }

    // Detector order: nose, neck, then identical to the joint order.
    let mut keypoint_map: Vec<(usize, usize)> = (0..18).map(|k| (k, k)).collect();
    keypoint_map[0] = (0, 1);
    keypoint_map[1] = (1, 0);

    let model = BodyModel::new(
        tree,
        b.mesh,
        b.weights,
        vec![b.girth],
        b.candidates,
        keypoint_map,
        JOINTS.iter().map(|j| j.radius).collect(),
    )
    .expect("valid rig");
    anchorfit::io::save_rig(&out, &model).expect("write rig");
    println!(
        "wrote {} ({} vertices, {} faces, {} contact candidates, height {:.4})",
        out.display(),
        model.vertex_count(),
        model.faces().len(),
        model.contact_candidates().len(),
        model.height()
    );
}
