//! Articulated body: kinematic tree, forward kinematics, linear blend
//! skinning and capsule proxies.
//!
//! Joint `k` carries a local axis-angle rotation applied at its own position.
//! In model space the frame of joint `k` is
//!
//! ```text
//! Q_k = Q_parent · R(θ_k)        p_k = p_parent + Q_parent · offset_k
//! ```
//!
//! with the root at `offset_0`. World coordinates are `s · R(r) · y + t`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::so3;

/// Detectors emit at most this many body keypoints.
pub const MAX_KEYPOINTS: usize = 18;

const WEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    parent: Vec<Option<usize>>,
    rest_offset: Vec<Vector3<f64>>,
    joint_name: Vec<String>,
    rest_position: Vec<Vector3<f64>>,
}

impl KinematicTree {
    pub fn new(
        parent: Vec<Option<usize>>,
        rest_offset: Vec<Vector3<f64>>,
        joint_name: Vec<String>,
    ) -> Result<Self> {
        let n = parent.len();
        if n < 2 {
            return Err(Error::invalid(format!("kinematic tree needs at least 2 joints, got {n}")));
        }
        if rest_offset.len() != n || joint_name.len() != n {
            return Err(Error::invalid("parent, offset and name lists differ in length"));
        }
        if parent[0].is_some() {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (k, p) in parent.iter().enumerate().skip(1) {
            match p {
                None => return Err(Error::invalid(format!("joint {k} is a second root"))),
                Some(p) if *p >= k => {
                    return Err(Error::invalid(format!(
                        "joint {k} has parent {p}; parents must precede children"
                    )))
                }
                _ => {}
            }
        }
        if rest_offset.iter().any(|o| !o.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("non-finite joint offset"));
        }
        let mut rest_position = Vec::with_capacity(n);
        for k in 0..n {
            let base = parent[k].map_or(Vector3::zeros(), |p| rest_position[p]);
            rest_position.push(base + rest_offset[k]);
        }
        Ok(KinematicTree {
            parent,
            rest_offset,
            joint_name,
            rest_position,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn rest_offset(&self, k: usize) -> &Vector3<f64> {
        &self.rest_offset[k]
    }

    pub fn joint_name(&self, k: usize) -> &str {
        &self.joint_name[k]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_name.iter().position(|n| n == name)
    }

    /// Model-space joint positions with every rotation at identity.
    pub fn rest_positions(&self) -> &[Vector3<f64>] {
        &self.rest_position
    }

    /// `(parent, child)` pairs, one per non-root joint, in child order.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (1..self.joint_count())
            .map(|c| (self.parent[c].expect("non-root joint"), c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    tree: KinematicTree,
    template: TriMesh,
    skin_weights: Vec<Vec<(usize, f64)>>,
    shape_dirs: Vec<Vec<Vector3<f64>>>,
    contact_candidates: Vec<usize>,
    keypoint_map: Vec<(usize, usize)>,
    bone_radii: Vec<f64>,
}

impl BodyModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: KinematicTree,
        template: TriMesh,
        skin_weights: Vec<Vec<(usize, f64)>>,
        shape_dirs: Vec<Vec<Vector3<f64>>>,
        contact_candidates: Vec<usize>,
        keypoint_map: Vec<(usize, usize)>,
        bone_radii: Vec<f64>,
    ) -> Result<Self> {
        template.validate()?;
        let nv = template.vertices.len();
        let nj = tree.joint_count();
        if skin_weights.len() != nv {
            return Err(Error::invalid(format!(
                "{} weight rows for {nv} vertices",
                skin_weights.len()
            )));
        }
        for (v, row) in skin_weights.iter().enumerate() {
            check_weight_row(v, row, nj)?;
        }
        for (c, dirs) in shape_dirs.iter().enumerate() {
            if dirs.len() != nv {
                return Err(Error::invalid(format!(
                    "shape direction {c} has {} entries for {nv} vertices",
                    dirs.len()
                )));
            }
        }
        if let Some(&c) = contact_candidates.iter().find(|&&c| c >= nv) {
            return Err(Error::invalid(format!("contact candidate {c} out of range")));
        }
        if keypoint_map.len() > MAX_KEYPOINTS {
            return Err(Error::invalid(format!(
                "keypoint map has {} entries (max {MAX_KEYPOINTS})",
                keypoint_map.len()
            )));
        }
        let mut seen = [false; MAX_KEYPOINTS];
        for &(det, joint) in &keypoint_map {
            if det >= keypoint_map.len() {
                return Err(Error::invalid(format!(
                    "detector index {det} out of range for a {}-entry keypoint map",
                    keypoint_map.len()
                )));
            }
            if seen[det] {
                return Err(Error::invalid(format!("detector index {det} mapped twice")));
            }
            seen[det] = true;
            if joint >= nj {
                return Err(Error::invalid(format!("keypoint maps to missing joint {joint}")));
            }
        }
        if bone_radii.len() != nj || bone_radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("bone_radii must hold one nonnegative radius per joint"));
        }
        Ok(BodyModel {
            tree,
            template,
            skin_weights,
            shape_dirs,
            contact_candidates,
            keypoint_map,
            bone_radii,
        })
    }

    /// The bundled 18-joint rig.
    pub fn rig18() -> BodyModel {
        crate::io::parse_rig(include_str!("../assets/rig18.json"), "rig18.json".as_ref())
            .expect("bundled rig18 asset is valid")
    }

    pub fn tree(&self) -> &KinematicTree {
        &self.tree
    }

    pub fn joint_count(&self) -> usize {
        self.tree.joint_count()
    }

    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn vertex_count(&self) -> usize {
        self.template.vertices.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.template.faces
    }

    pub fn skin_weights(&self) -> &[Vec<(usize, f64)>] {
        &self.skin_weights
    }

    pub fn shape_dirs(&self) -> &[Vec<Vector3<f64>>] {
        &self.shape_dirs
    }

    pub fn shape_len(&self) -> usize {
        self.shape_dirs.len()
    }

    pub fn contact_candidates(&self) -> &[usize] {
        &self.contact_candidates
    }

    pub fn keypoint_map(&self) -> &[(usize, usize)] {
        &self.keypoint_map
    }

    pub fn bone_radii(&self) -> &[f64] {
        &self.bone_radii
    }

    /// Vertical extent of the rest template, model units.
    pub fn height(&self) -> f64 {
        let (lo, hi) = self
            .template
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.y), hi.max(v.y))
            });
        hi - lo
    }

    /// Rest vertex `v` with the shape offsets applied.
    pub fn shaped_vertex(&self, v: usize, shape: &[f64]) -> Vector3<f64> {
        let mut p = self.template.vertices[v];
        for (coeff, dirs) in shape.iter().zip(&self.shape_dirs) {
            if *coeff != 0.0 {
                p += dirs[v] * *coeff;
            }
        }
        p
    }
}

fn check_weight_row(v: usize, row: &[(usize, f64)], joints: usize) -> Result<()> {
    let mut sum = 0.0;
    for &(j, w) in row {
        if j >= joints {
            return Err(Error::invalid(format!("vertex {v} weighted to missing joint {j}")));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::invalid(format!("vertex {v} has negative or non-finite weight")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::contract(format!(
            "skin weights of vertex {v} sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanState {
    pub scale: f64,
    pub root_rotation: Vector3<f64>,
    pub root_translation: Vector3<f64>,
    pub joint_rotations: Vec<Vector3<f64>>,
    pub shape_coeffs: Vec<f64>,
}

impl HumanState {
    /// Zero pose, unit scale, zero shape, placed at the origin.
    pub fn rest(model: &BodyModel) -> Self {
        HumanState {
            scale: 1.0,
            root_rotation: Vector3::zeros(),
            root_translation: Vector3::zeros(),
            joint_rotations: vec![Vector3::zeros(); model.joint_count()],
            shape_coeffs: vec![0.0; model.shape_len()],
        }
    }

    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.joint_rotations.len() != model.joint_count() {
            return Err(Error::contract(format!(
                "state has {} joint rotations, model has {} joints",
                self.joint_rotations.len(),
                model.joint_count()
            )));
        }
        if self.shape_coeffs.len() != model.shape_len() {
            return Err(Error::contract(format!(
                "state has {} shape coefficients, model has {}",
                self.shape_coeffs.len(),
                model.shape_len()
            )));
        }
        let finite = self.scale.is_finite()
            && self.root_rotation.iter().all(|c| c.is_finite())
            && self.root_translation.iter().all(|c| c.is_finite())
            && self.joint_rotations.iter().flatten().all(|c| c.is_finite())
            && self.shape_coeffs.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite human parameter"));
        }
        if self.scale <= 0.0 {
            return Err(Error::invalid(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Folds every axis-angle vector back to norm ≤ π.
    pub fn canonicalize(&mut self) {
        self.root_rotation = so3::canonicalize(&self.root_rotation);
        for r in &mut self.joint_rotations {
            *r = so3::canonicalize(r);
        }
    }
}

/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        SimilarityTransform {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation * other.rotation,
            scale: self.scale * other.scale,
            translation: self.apply(&other.translation),
        }
    }
}

/// Forward kinematics output. Model-space frames are kept for the
/// gradient pass.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub model_rotations: Vec<Matrix3<f64>>,
    pub model_positions: Vec<Vector3<f64>>,
    pub global: SimilarityTransform,
    pub joint_positions: Vec<Vector3<f64>>,
    /// World skinning transforms: rest-pose model point → posed world point.
    pub joint_transforms: Vec<SimilarityTransform>,
}

pub fn forward_kinematics(model: &BodyModel, state: &HumanState) -> Result<Kinematics> {
    state.validate(model)?;
    Ok(forward_kinematics_unchecked(model, state))
}

pub(crate) fn forward_kinematics_unchecked(model: &BodyModel, state: &HumanState) -> Kinematics {
    let tree = model.tree();
    let n = tree.joint_count();
    let mut model_rotations: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    let mut model_positions: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let local = so3::exp(&state.joint_rotations[k]);
        match tree.parent(k) {
            None => {
                model_rotations.push(local);
                model_positions.push(*tree.rest_offset(k));
            }
            Some(p) => {
                let qp = model_rotations[p];
                model_positions.push(model_positions[p] + qp * tree.rest_offset(k));
                model_rotations.push(qp * local);
            }
        }
    }
    let global = SimilarityTransform {
        rotation: so3::exp(&state.root_rotation),
        scale: state.scale,
        translation: state.root_translation,
    };
    let rest = tree.rest_positions();
    let joint_positions = model_positions.iter().map(|p| global.apply(p)).collect();
    let joint_transforms = (0..n)
        .map(|k| {
            let local = SimilarityTransform {
                rotation: model_rotations[k],
                scale: 1.0,
                translation: model_positions[k] - model_rotations[k] * rest[k],
            };
            global.compose(&local)
        })
        .collect();
    Kinematics {
        model_rotations,
        model_positions,
        global,
        joint_positions,
        joint_transforms,
    }
}

/// Posed world position of a single vertex.
pub fn skin_vertex(
    model: &BodyModel,
    joint_transforms: &[SimilarityTransform],
    state: &HumanState,
    v: usize,
) -> Vector3<f64> {
    let rest = model.shaped_vertex(v, &state.shape_coeffs);
    model.skin_weights[v]
        .iter()
        .fold(Vector3::zeros(), |acc, &(k, w)| acc + joint_transforms[k].apply(&rest) * w)
}

pub fn skin_vertices(
    model: &BodyModel,
    joint_transforms: &[SimilarityTransform],
    state: &HumanState,
) -> Result<Vec<Vector3<f64>>> {
    if joint_transforms.len() != model.joint_count() {
        return Err(Error::contract(format!(
            "{} joint transforms for {} joints",
            joint_transforms.len(),
            model.joint_count()
        )));
    }
    if state.shape_coeffs.len() != model.shape_len() {
        return Err(Error::contract("shape coefficient count does not match model"));
    }
    for (v, row) in model.skin_weights.iter().enumerate() {
        check_weight_row(v, row, model.joint_count())?;
    }
    Ok((0..model.vertex_count())
        .map(|v| skin_vertex(model, joint_transforms, state, v))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
    pub parent: usize,
    pub child: usize,
}

impl Capsule {
    /// Parameter in `[0, 1]` of the axis point closest to `p`.
    pub fn closest_param(&self, p: &Vector3<f64>) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        if len2 == 0.0 {
            return 0.0;
        }
        ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
    }

    pub fn axis_distance(&self, p: &Vector3<f64>) -> f64 {
        let t = self.closest_param(p);
        (p - (self.a + (self.b - self.a) * t)).norm()
    }

    /// Negative inside the capsule.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.axis_distance(p) - self.radius
    }
}

/// One capsule per bone, spanning parent and child joint positions.
pub fn capsule_proxies(
    model: &BodyModel,
    joint_positions: &[Vector3<f64>],
    scale: f64,
) -> Result<Vec<Capsule>> {
    if joint_positions.len() != model.joint_count() {
        return Err(Error::contract(format!(
            "{} joint positions for {} joints",
            joint_positions.len(),
            model.joint_count()
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(capsules_unchecked(model, joint_positions, scale))
}

pub(crate) fn capsules_unchecked(
    model: &BodyModel,
    joint_positions: &[Vector3<f64>],
    scale: f64,
) -> Vec<Capsule> {
    model
        .tree()
        .bones()
        .into_iter()
        .map(|(parent, child)| Capsule {
            a: joint_positions[parent],
            b: joint_positions[child],
            radius: model.bone_radii[child] * scale,
            parent,
            child,
        })
        .collect()
}

/// Bone index pairs `(i, j)`, `i < j`, whose bones share no joint.
pub fn non_adjacent_bone_pairs(model: &BodyModel) -> Vec<(usize, usize)> {
    let bones = model.tree().bones();
    let mut pairs = Vec::new();
    for i in 0..bones.len() {
        for j in i + 1..bones.len() {
            let (a0, a1) = bones[i];
            let (b0, b1) = bones[j];
            if a0 != b0 && a0 != b1 && a1 != b0 && a1 != b1 {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

#[cfg(test)]
pub(crate) mod test_rigs {
    use super::*;

    /// Root at the origin with two children offset by +y each.
    pub fn chain3() -> BodyModel {
        let tree = KinematicTree::new(
            vec![None, Some(0), Some(1)],
            vec![Vector3::zeros(), Vector3::y(), Vector3::y()],
            vec!["root".into(), "mid".into(), "tip".into()],
        )
        .unwrap();
        let vertices = vec![
            Vector3::new(0.1, 0.5, 0.0),
            Vector3::new(0.0, 1.5, 0.1),
            Vector3::new(-0.1, 1.0, 0.0),
        ];
        let mesh = TriMesh::new(vertices, vec![[0, 1, 2]]).unwrap();
        BodyModel::new(
            tree,
            mesh,
            vec![vec![(0, 1.0)], vec![(1, 0.7), (2, 0.3)], vec![(0, 0.5), (1, 0.5)]],
            vec![],
            vec![0, 1, 2],
            vec![(0, 0), (1, 1), (2, 2)],
            vec![0.0, 0.1, 0.05],
        )
        .unwrap()
    }
}
