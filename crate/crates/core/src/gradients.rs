//! Packed parameter vectors, analytic gradients of the fitting objectives
//! and a central finite-difference checker.
//!
//! Gradients are accumulated in reverse: every loss term deposits
//! `∂L/∂x` on the world points it reads (joint positions, skinned vertices,
//! object samples), and the kinematic chain then turns those into
//! parameter derivatives. A perturbation `δ` of joint `k`'s axis-angle
//! rotates everything below `k` about `p_k` by `Q_parent · J_l(θ_k) · δ`,
//! so its gradient is `J_lᵀ Q_parentᵀ Σ (a − p_k) × g` over the points `a`
//! that hang off the subtree.

use std::sync::Arc;

use nalgebra::{Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::body_model::{
    capsules_unchecked, forward_kinematics_unchecked, non_adjacent_bone_pairs, skin_vertex, BodyModel,
    Capsule, HumanState, Kinematics,
};
use crate::error::{Error, Result};
use crate::losses::{
    self, combine_frames, frame_terms, motion_vector, segment_closest_params, union_signed_distance,
    FrameTerms, LossBreakdown, LossWeights, MotionScene,
};
use crate::mesh::TriMesh;
use crate::scene_camera::{project_clamped_jacobian, Camera, KeypointFrame, ObjectState};
use crate::so3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    HumanScale,
    HumanShape,
    HumanRootRot,
    HumanRootTrans,
    HumanJointRots,
    ObjectRot,
    ObjectTrans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpan {
    /// `None` for blocks shared by every frame.
    pub frame: Option<usize>,
    pub block: Block,
    pub offset: usize,
    pub len: usize,
}

/// Shared blocks (scale, shape) first, then per frame: root rotation,
/// root translation, joint rotations and, with an object, its rotation
/// and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    frames: usize,
    joints: usize,
    shape_len: usize,
    with_object: bool,
    spans: Vec<BlockSpan>,
}

impl ParamLayout {
    pub fn new(frames: usize, joints: usize, shape_len: usize, with_object: bool) -> Self {
        let mut spans = Vec::new();
        let mut offset = 0;
        let mut push = |frame, block, len| {
            spans.push(BlockSpan { frame, block, offset, len });
            offset += len;
        };
        push(None, Block::HumanScale, 1);
        push(None, Block::HumanShape, shape_len);
        for f in 0..frames {
            push(Some(f), Block::HumanRootRot, 3);
            push(Some(f), Block::HumanRootTrans, 3);
            push(Some(f), Block::HumanJointRots, 3 * joints);
            if with_object {
                push(Some(f), Block::ObjectRot, 3);
                push(Some(f), Block::ObjectTrans, 3);
            }
        }
        ParamLayout {
            frames,
            joints,
            shape_len,
            with_object,
            spans,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn shape_len(&self) -> usize {
        self.shape_len
    }

    pub fn with_object(&self) -> bool {
        self.with_object
    }

    pub fn spans(&self) -> &[BlockSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn shared_len(&self) -> usize {
        1 + self.shape_len
    }

    fn frame_stride(&self) -> usize {
        6 + 3 * self.joints + if self.with_object { 6 } else { 0 }
    }

    /// Offset of the first entry of frame `f`.
    pub fn frame_offset(&self, f: usize) -> usize {
        self.shared_len() + f * self.frame_stride()
    }

    /// The span holding entry `index`.
    pub fn locate(&self, index: usize) -> &BlockSpan {
        let pos = self.spans.partition_point(|s| s.offset + s.len <= index);
        &self.spans[pos]
    }
}

/// Which shared quantities stay fixed during optimization. The root
/// joint's own rotation is always frozen; the root rotation block drives it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeSpec {
    pub scale: bool,
    pub shape: bool,
}

impl FreezeSpec {
    pub const STATIC: FreezeSpec = FreezeSpec { scale: false, shape: true };
    pub const MOTION: FreezeSpec = FreezeSpec { scale: true, shape: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: ParamLayout,
    frozen: Vec<bool>,
}

impl ParamVector {
    pub fn pack(
        humans: &[HumanState],
        objects: Option<&[ObjectState]>,
        freeze: FreezeSpec,
    ) -> Result<Self> {
        let first = humans
            .first()
            .ok_or_else(|| Error::invalid("cannot pack an empty window"))?;
        let joints = first.joint_rotations.len();
        let shape_len = first.shape_coeffs.len();
        for (f, h) in humans.iter().enumerate() {
            if h.joint_rotations.len() != joints || h.shape_coeffs.len() != shape_len {
                return Err(Error::contract(format!("frame {f} does not match the layout of frame 0")));
            }
            if h.scale != first.scale || h.shape_coeffs != first.shape_coeffs {
                return Err(Error::contract(format!(
                    "frame {f} has a different scale or shape; they are shared across frames"
                )));
            }
        }
        if let Some(o) = objects {
            if o.len() != humans.len() {
                return Err(Error::contract("human and object windows differ in length"));
            }
        }
        let layout = ParamLayout::new(humans.len(), joints, shape_len, objects.is_some());
        let mut values = Vec::with_capacity(layout.len());
        values.push(first.scale);
        values.extend_from_slice(&first.shape_coeffs);
        for (f, h) in humans.iter().enumerate() {
            values.extend(motion_vector(h, objects.map(|o| &o[f])));
        }
        debug_assert_eq!(values.len(), layout.len());

        let mut frozen = vec![false; layout.len()];
        frozen[0] = freeze.scale;
        for flag in &mut frozen[1..1 + shape_len] {
            *flag = freeze.shape;
        }
        for f in 0..humans.len() {
            let root_joint = layout.frame_offset(f) + 6;
            for flag in &mut frozen[root_joint..root_joint + 3] {
                *flag = true;
            }
        }
        Ok(ParamVector { values, layout, frozen })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn unfrozen_count(&self) -> usize {
        self.frozen.iter().filter(|f| !**f).count()
    }

    /// Copies `values` into the unfrozen entries only.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for ((dst, src), frozen) in self.values.iter_mut().zip(values).zip(&self.frozen) {
            if !frozen {
                *dst = *src;
            }
        }
        Ok(())
    }

    fn vec3(&self, at: usize) -> Vector3<f64> {
        Vector3::new(self.values[at], self.values[at + 1], self.values[at + 2])
    }

    pub fn human(&self, f: usize) -> HumanState {
        let l = &self.layout;
        let base = l.frame_offset(f);
        HumanState {
            scale: self.values[0],
            shape_coeffs: self.values[1..1 + l.shape_len].to_vec(),
            root_rotation: self.vec3(base),
            root_translation: self.vec3(base + 3),
            joint_rotations: (0..l.joints).map(|k| self.vec3(base + 6 + 3 * k)).collect(),
        }
    }

    pub fn humans(&self) -> Vec<HumanState> {
        (0..self.layout.frames).map(|f| self.human(f)).collect()
    }

    /// Object rotation and translation of frame `f`.
    pub fn object_pose(&self, f: usize) -> Option<(Vector3<f64>, Vector3<f64>)> {
        if !self.layout.with_object {
            return None;
        }
        let at = self.layout.frame_offset(f) + 6 + 3 * self.layout.joints;
        Some((self.vec3(at), self.vec3(at + 3)))
    }

    pub fn object(&self, f: usize, mesh: &Arc<TriMesh>) -> Option<ObjectState> {
        self.object_pose(f).map(|(rotation, translation)| ObjectState {
            rotation,
            translation,
            mesh: mesh.clone(),
        })
    }

    pub fn objects(&self, mesh: &Arc<TriMesh>) -> Option<Vec<ObjectState>> {
        (0..self.layout.frames).map(|f| self.object(f, mesh)).collect()
    }
}

/// A differentiable objective over a packed parameter vector.
pub trait Objective: Sync {
    /// Value path.
    fn evaluate(&self, params: &ParamVector) -> Result<LossBreakdown>;

    /// Exact gradient of `evaluate(..).total`; zero on frozen entries.
    fn gradient(&self, params: &ParamVector) -> Result<Vec<f64>>;

    /// A cheaper value whose partial derivative in `entry` equals that of
    /// the total. Defaults to the total.
    fn local_value(&self, params: &ParamVector, entry: usize) -> Result<f64> {
        let _ = entry;
        Ok(self.evaluate(params)?.total)
    }
}

#[derive(Debug, Clone, Default)]
struct HumanGrad {
    scale: f64,
    shape: Vec<f64>,
    root_rot: Vector3<f64>,
    root_trans: Vector3<f64>,
    joint_rots: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, Default)]
struct ObjectGrad {
    rot: Vector3<f64>,
    trans: Vector3<f64>,
}

/// World-space sensitivities collected from the loss terms of one frame.
struct Sensitivities {
    joints: Vec<Vector3<f64>>,
    vertices: Vec<(usize, Vector3<f64>)>,
    scale: f64,
    joint_rots: Vec<Vector3<f64>>,
    object_force: Vector3<f64>,
    object_torque: Vector3<f64>,
}

impl Sensitivities {
    fn new(joints: usize) -> Self {
        Sensitivities {
            joints: vec![Vector3::zeros(); joints],
            vertices: Vec::new(),
            scale: 0.0,
            joint_rots: vec![Vector3::zeros(); joints],
            object_force: Vector3::zeros(),
            object_torque: Vector3::zeros(),
        }
    }

    fn object_point(&mut self, z: &Vector3<f64>, object_translation: &Vector3<f64>, g: Vector3<f64>) {
        self.object_force += g;
        self.object_torque += (z - object_translation).cross(&g);
    }

    fn finite_or(&self, term: &str) -> Result<()> {
        let ok = self.scale.is_finite()
            && self.joints.iter().chain(self.joint_rots.iter()).flatten().all(|c| c.is_finite())
            && self.vertices.iter().all(|(_, g)| g.iter().all(|c| c.is_finite()))
            && self.object_force.iter().chain(self.object_torque.iter()).all(|c| c.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite { term: term.to_string() })
        }
    }
}

/// `∂ρ/∂r` for `ρ = |r|² / (σ² + |r|²)`.
fn gm_grad(r: &Vector2<f64>, sigma: f64) -> Vector2<f64> {
    let s2 = sigma * sigma;
    let d = s2 + r.norm_squared();
    r * (2.0 * s2 / (d * d))
}

fn reprojection_sensitivity(
    model: &BodyModel,
    kin: &Kinematics,
    camera: &Camera,
    view: &KeypointFrame,
    sigma: f64,
    coef: f64,
    use_confidence: bool,
    sens: &mut Sensitivities,
) {
    for &(det, joint) in model.keypoint_map() {
        let w = view.confidence[det];
        if w == 0.0 {
            continue;
        }
        let (uv, jac): (Vector2<f64>, Matrix2x3<f64>) = project_clamped_jacobian(camera, &kin.joint_positions[joint]);
        let r = uv - view.points[det];
        let weight = if use_confidence { coef * w } else { coef };
        sens.joints[joint] += jac.transpose() * gm_grad(&r, sigma) * weight;
    }
}

/// `∂sd/∂(p, a, b)` for the signed distance of `p` to capsule `cap`.
fn capsule_distance_grad(cap: &Capsule, p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let t = cap.closest_param(p);
    let q = cap.a + (cap.b - cap.a) * t;
    let d = p - q;
    let len = d.norm();
    if len == 0.0 {
        return (Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
    }
    let n = d / len;
    (n, -n * (1.0 - t), -n * t)
}

fn self_penetration_sensitivity(
    model: &BodyModel,
    capsules: &[Capsule],
    pairs: &[(usize, usize)],
    coef: f64,
    sens: &mut Sensitivities,
) {
    let radii = model.bone_radii();
    for &(i, j) in pairs {
        let (a, b) = (&capsules[i], &capsules[j]);
        let (s, t) = segment_closest_params(&a.a, &a.b, &b.a, &b.b);
        let ca = a.a + (a.b - a.a) * s;
        let cb = b.a + (b.b - b.a) * t;
        let dist = (ca - cb).norm();
        let overlap = a.radius + b.radius - dist;
        if overlap <= 0.0 {
            continue;
        }
        let dl = coef * 2.0 * overlap;
        sens.scale += dl * (radii[a.child] + radii[b.child]);
        if dist == 0.0 {
            continue;
        }
        // ∂overlap/∂ca = −n, ∂overlap/∂cb = +n
        let n = (ca - cb) / dist;
        sens.joints[a.parent] -= n * (dl * (1.0 - s));
        sens.joints[a.child] -= n * (dl * s);
        sens.joints[b.parent] += n * (dl * (1.0 - t));
        sens.joints[b.child] += n * (dl * t);
    }
}

fn pose_prior_sensitivity(state: &HumanState, coef: f64, sens: &mut Sensitivities) {
    let movable = state.joint_rotations.len().saturating_sub(1);
    if movable == 0 {
        return;
    }
    let c = coef * 2.0 / movable as f64;
    for k in 1..state.joint_rotations.len() {
        sens.joint_rots[k] += state.joint_rotations[k] * c;
    }
}

/// Pulls world-space sensitivities back through the global similarity,
/// the kinematic chain and skinning.
fn backprop_human(model: &BodyModel, state: &HumanState, kin: &Kinematics, sens: &Sensitivities) -> HumanGrad {
    let n = model.joint_count();
    let s = state.scale;
    let r_root = kin.global.rotation;
    let t = state.root_translation;

    let mut grad = HumanGrad {
        scale: sens.scale,
        shape: vec![0.0; model.shape_len()],
        root_rot: Vector3::zeros(),
        root_trans: Vector3::zeros(),
        joint_rots: sens.joint_rots.clone(),
    };
    let mut torque_root = Vector3::zeros();
    let mut force = vec![Vector3::zeros(); n];
    let mut moment = vec![Vector3::zeros(); n];

    let mut world_point = |x: &Vector3<f64>, g: &Vector3<f64>, grad: &mut HumanGrad| -> Vector3<f64> {
        let rel = x - t;
        grad.root_trans += g;
        torque_root += rel.cross(g);
        grad.scale += rel.dot(g) / s;
        r_root.transpose() * g * s
    };

    for (k, g) in sens.joints.iter().enumerate() {
        if *g == Vector3::zeros() {
            continue;
        }
        let gm = world_point(&kin.joint_positions[k], g, &mut grad);
        if let Some(p) = model.tree().parent(k) {
            force[p] += gm;
            moment[p] += kin.model_positions[k].cross(&gm);
        }
    }

    let rest = model.tree().rest_positions();
    for (v, g) in &sens.vertices {
        let x = skin_vertex(model, &kin.joint_transforms, state, *v);
        let gm = world_point(&x, g, &mut grad);
        let shaped = model.shaped_vertex(*v, &state.shape_coeffs);
        for &(k, w) in &model.skin_weights()[*v] {
            let q = kin.model_rotations[k];
            let a = q * (shaped - rest[k]) + kin.model_positions[k];
            let gw = gm * w;
            force[k] += gw;
            moment[k] += a.cross(&gw);
            for (c, dirs) in model.shape_dirs().iter().enumerate() {
                grad.shape[c] += (q * dirs[*v]).dot(&gw);
            }
        }
    }

    for k in (0..n).rev() {
        let tau = moment[k] - kin.model_positions[k].cross(&force[k]);
        let parent = model.tree().parent(k);
        let axis = match parent {
            Some(p) => kin.model_rotations[p].transpose() * tau,
            None => tau,
        };
        grad.joint_rots[k] += so3::left_jacobian(&state.joint_rotations[k]).transpose() * axis;
        if let Some(p) = parent {
            let (f, m) = (force[k], moment[k]);
            force[p] += f;
            moment[p] += m;
        }
    }
    grad.root_rot = so3::left_jacobian(&state.root_rotation).transpose() * torque_root;
    grad
}

fn write_human(grad: &HumanGrad, layout: &ParamLayout, f: usize, out: &mut [f64]) {
    out[0] += grad.scale;
    for (c, g) in grad.shape.iter().enumerate() {
        out[1 + c] += g;
    }
    let base = layout.frame_offset(f);
    out[base..base + 3].copy_from_slice(grad.root_rot.as_slice());
    out[base + 3..base + 6].copy_from_slice(grad.root_trans.as_slice());
    for (k, g) in grad.joint_rots.iter().enumerate() {
        let at = base + 6 + 3 * k;
        out[at..at + 3].copy_from_slice(g.as_slice());
    }
}

fn write_object(grad: &ObjectGrad, layout: &ParamLayout, f: usize, out: &mut [f64]) {
    let at = layout.frame_offset(f) + 6 + 3 * layout.joints();
    out[at..at + 3].copy_from_slice(grad.rot.as_slice());
    out[at + 3..at + 6].copy_from_slice(grad.trans.as_slice());
}

fn mask(grad: &mut [f64], frozen: &[bool]) {
    for (g, f) in grad.iter_mut().zip(frozen) {
        if *f {
            *g = 0.0;
        }
    }
}

fn check_layout(params: &ParamVector, frames: usize, joints: usize, with_object: bool) -> Result<()> {
    let l = params.layout();
    if l.frames() != frames || l.joints() != joints || l.with_object() != with_object {
        return Err(Error::contract(format!(
            "parameter layout ({} frames, {} joints, object: {}) does not match the scene ({frames}, {joints}, {with_object})",
            l.frames(),
            l.joints(),
            l.with_object()
        )));
    }
    Ok(())
}

/// Multi-view alignment plus pose prior over a single human state.
pub struct StaticObjective<'a> {
    pub model: &'a BodyModel,
    pub cameras: &'a [Camera],
    pub views: &'a [KeypointFrame],
    pub weights: LossWeights,
}

impl Objective for StaticObjective<'_> {
    fn evaluate(&self, params: &ParamVector) -> Result<LossBreakdown> {
        check_layout(params, 1, self.model.joint_count(), false)?;
        losses::static_breakdown(self.model, &params.human(0), self.cameras, self.views, &self.weights)
    }

    fn gradient(&self, params: &ParamVector) -> Result<Vec<f64>> {
        check_layout(params, 1, self.model.joint_count(), false)?;
        let state = params.human(0);
        state.validate(self.model)?;
        let kin = forward_kinematics_unchecked(self.model, &state);
        let w = &self.weights;
        let mut sens = Sensitivities::new(self.model.joint_count());
        for view in self.views {
            let cam = self
                .cameras
                .get(view.view_id)
                .ok_or_else(|| Error::invalid(format!("view {} has no camera", view.view_id)))?;
            reprojection_sensitivity(self.model, &kin, cam, view, w.gm_sigma_align, w.lambda_j, false, &mut sens);
        }
        sens.finite_or("static alignment")?;
        pose_prior_sensitivity(&state, w.lambda_reg * w.pose_prior_weight, &mut sens);
        sens.finite_or("pose prior")?;
        let grad = backprop_human(self.model, &state, &kin, &sens);
        let mut out = vec![0.0; params.len()];
        write_human(&grad, params.layout(), 0, &mut out);
        mask(&mut out, params.frozen());
        finite_vec(&out, "static objective")?;
        Ok(out)
    }
}

fn finite_vec(v: &[f64], term: &str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}

/// The full weighted motion objective over a window of frames.
pub struct MotionObjective<'a> {
    pub scene: MotionScene<'a>,
    pub mesh: Arc<TriMesh>,
    pub weights: LossWeights,
    bone_pairs: Vec<(usize, usize)>,
}

impl<'a> MotionObjective<'a> {
    pub fn new(scene: MotionScene<'a>, mesh: Arc<TriMesh>, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        if let Some(&v) = scene.contacts.sample_vertices.iter().find(|&&v| v >= mesh.vertices.len()) {
            return Err(Error::contract(format!("object sample vertex {v} out of range")));
        }
        Ok(MotionObjective {
            bone_pairs: non_adjacent_bone_pairs(scene.model),
            scene,
            mesh,
            weights,
        })
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        check_layout(params, self.scene.frame_count(), self.scene.model.joint_count(), true)
    }

    fn frame_state(&self, params: &ParamVector, f: usize) -> (HumanState, ObjectState) {
        (params.human(f), params.object(f, &self.mesh).expect("layout has an object"))
    }

    fn weighted_frame(&self, t: &FrameTerms, l: f64) -> f64 {
        let w = &self.weights;
        let reg = w.self_pen_weight * t.self_penetration + w.pose_prior_weight * t.pose_prior;
        (w.lambda_j * t.body + w.lambda_c * t.contact + w.lambda_pen * t.penetration + w.lambda_reg * reg) / l
    }

    fn frame_gradient(&self, params: &ParamVector, f: usize) -> Result<(HumanGrad, ObjectGrad)> {
        let model = self.scene.model;
        let w = &self.weights;
        let l = self.scene.frame_count() as f64;
        let (human, object) = self.frame_state(params, f);
        let kin = forward_kinematics_unchecked(model, &human);
        let mut sens = Sensitivities::new(model.joint_count());

        let views = &self.scene.keypoints[f];
        if !views.is_empty() {
            let coef = w.lambda_j / (l * views.len() as f64 * model.keypoint_map().len() as f64);
            for view in views {
                let cam = &self.scene.cameras[view.view_id];
                reprojection_sensitivity(model, &kin, cam, view, w.gm_sigma_align, coef, true, &mut sens);
            }
        }
        sens.finite_or("body keypoints")?;

        let rot = object.rotation_matrix();
        let contacts = self.scene.contacts;
        let samples: Vec<Vector3<f64>> = contacts
            .sample_vertices
            .iter()
            .map(|&v| rot * self.mesh.vertices[v] + object.translation)
            .collect();

        if !contacts.pairs.is_empty() {
            let coef = w.lambda_c / (l * contacts.pairs.len() as f64);
            for &(i, j) in &contacts.pairs {
                let ph = skin_vertex(model, &kin.joint_transforms, &human, j);
                let g = (ph - samples[i]) * (2.0 * coef);
                sens.vertices.push((j, g));
                sens.object_point(&samples[i], &object.translation, -g);
            }
        }
        sens.finite_or("contact")?;

        let capsules = capsules_unchecked(model, &kin.joint_positions, human.scale);
        if !samples.is_empty() && !capsules.is_empty() {
            let coef = w.lambda_pen / (l * samples.len() as f64);
            for p in &samples {
                let (sd, c) = union_signed_distance(p, &capsules).expect("capsules present");
                if sd >= 0.0 {
                    continue;
                }
                let dl = coef * 2.0 * sd;
                let cap = &capsules[c];
                let (dp, da, db) = capsule_distance_grad(cap, p);
                sens.object_point(p, &object.translation, dp * dl);
                sens.joints[cap.parent] += da * dl;
                sens.joints[cap.child] += db * dl;
                sens.scale -= dl * model.bone_radii()[cap.child];
            }
        }
        sens.finite_or("penetration")?;

        self_penetration_sensitivity(model, &capsules, &self.bone_pairs, w.lambda_reg * w.self_pen_weight / l, &mut sens);
        sens.finite_or("self-penetration")?;
        pose_prior_sensitivity(&human, w.lambda_reg * w.pose_prior_weight / l, &mut sens);
        sens.finite_or("pose prior")?;

        let hg = backprop_human(model, &human, &kin, &sens);
        let og = ObjectGrad {
            rot: so3::left_jacobian(&object.rotation).transpose() * sens.object_torque,
            trans: sens.object_force,
        };
        Ok((hg, og))
    }

    fn smoothness_gradient(&self, params: &ParamVector, out: &mut [f64]) {
        let l = self.scene.frame_count();
        if l < 3 {
            return;
        }
        let w = &self.weights;
        let coef = w.lambda_reg * w.smooth_weight / (l - 2) as f64;
        let layout = params.layout();
        let stride = layout.frame_stride();
        let v = &params.values;
        for f in 1..l - 1 {
            let (a, b, c) = (layout.frame_offset(f - 1), layout.frame_offset(f), layout.frame_offset(f + 1));
            for k in 0..stride {
                let d = v[a + k] - 2.0 * v[b + k] + v[c + k];
                out[a + k] += 2.0 * coef * d;
                out[b + k] -= 4.0 * coef * d;
                out[c + k] += 2.0 * coef * d;
            }
        }
    }

    /// Smoothness summed over the interior frames in `range`, unnormalized.
    fn smoothness_sum(&self, params: &ParamVector, frames: std::ops::Range<usize>) -> f64 {
        let layout = params.layout();
        let stride = layout.frame_stride();
        let v = &params.values;
        let mut sum = 0.0;
        for f in frames {
            let (a, b, c) = (layout.frame_offset(f - 1), layout.frame_offset(f), layout.frame_offset(f + 1));
            sum += (0..stride)
                .map(|k| {
                    let d = v[a + k] - 2.0 * v[b + k] + v[c + k];
                    d * d
                })
                .sum::<f64>();
        }
        sum
    }

    /// Per-frame terms through the value path.
    pub fn frame_terms(&self, params: &ParamVector, f: usize) -> FrameTerms {
        let (h, o) = self.frame_state(params, f);
        frame_terms(&self.scene, f, &h, &o, &self.weights, &self.bone_pairs)
    }

    /// Combines cached per-frame terms with the current smoothness.
    pub fn breakdown_from_terms(&self, params: &ParamVector, terms: &[FrameTerms]) -> LossBreakdown {
        let humans = params.humans();
        let objects = params.objects(&self.mesh).expect("layout has an object");
        combine_frames(terms, losses::temporal_smoothness(&humans, Some(&objects)), &self.weights)
    }
}

impl Objective for MotionObjective<'_> {
    fn evaluate(&self, params: &ParamVector) -> Result<LossBreakdown> {
        self.check(params)?;
        let humans = params.humans();
        let objects = params.objects(&self.mesh).expect("layout has an object");
        losses::total_loss(&self.scene, &humans, &objects, &self.weights)
    }

    fn gradient(&self, params: &ParamVector) -> Result<Vec<f64>> {
        self.check(params)?;
        let l = self.scene.frame_count();
        let per_frame: Vec<Result<(HumanGrad, ObjectGrad)>> =
            (0..l).into_par_iter().map(|f| self.frame_gradient(params, f)).collect();
        let mut out = vec![0.0; params.len()];
        for (f, g) in per_frame.into_iter().enumerate() {
            let (hg, og) = g?;
            write_human(&hg, params.layout(), f, &mut out);
            write_object(&og, params.layout(), f, &mut out);
        }
        self.smoothness_gradient(params, &mut out);
        mask(&mut out, params.frozen());
        finite_vec(&out, "smoothness")?;
        Ok(out)
    }

    fn local_value(&self, params: &ParamVector, entry: usize) -> Result<f64> {
        self.check(params)?;
        let Some(f) = params.layout().locate(entry).frame else {
            return Ok(self.evaluate(params)?.total);
        };
        let l = self.scene.frame_count();
        let mut value = self.weighted_frame(&self.frame_terms(params, f), l as f64);
        if l >= 3 {
            let lo = f.saturating_sub(1).max(1);
            let hi = (f + 1).min(l - 2);
            if lo <= hi {
                let w = &self.weights;
                value += w.lambda_reg * w.smooth_weight * self.smoothness_sum(params, lo..hi + 1) / (l - 2) as f64;
            }
        }
        Ok(value)
    }
}

/// Exact gradient of the objective at `params`.
pub fn grad_total(objective: &dyn Objective, params: &ParamVector) -> Result<Vec<f64>> {
    objective.gradient(params)
}

/// Entries whose numeric derivative is below this are compared absolutely.
pub const FD_SMALL: f64 = 1e-8;

/// A central difference of values of magnitude `|f|` carries roundoff of
/// order `ε|f|/h`. Entries below this multiple of that floor cannot be
/// resolved to a 1e-4 relative error and are compared absolutely as well.
pub const FD_NOISE_FACTOR: f64 = 1e4;

/// Accumulated rounding of a long sum of loss terms, in units of `ε|f|`.
pub const FD_SUM_ULPS: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdEntry {
    pub index: usize,
    pub frame: Option<usize>,
    pub block: Block,
    pub frozen: bool,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    /// `|a − n| / max(|a|, |n|)`; 0 for small entries, which are judged
    /// by `abs_error` instead.
    pub rel_error: f64,
    /// Magnitude below which `numeric` counts as small.
    pub small_below: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    /// Sorted by decreasing relative error, then absolute error.
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    /// Largest absolute error among small entries.
    pub max_small_abs_error: f64,
    pub max_abs_error: f64,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries.first()
    }

    pub fn passes(&self, rel_tol: f64, small_abs_tol: f64) -> bool {
        self.max_rel_error < rel_tol && self.max_small_abs_error < small_abs_tol
    }
}

/// Finite-difference oracle on every unfrozen entry: central differences of
/// steps `h` and `h/2`, Richardson-combined so truncation is O(h⁴). Plain
/// O(h²) truncation is enough to break a 1e-4 relative test on entries
/// where large per-term gradients nearly cancel.
pub fn finite_difference_check(objective: &dyn Objective, params: &ParamVector, h: f64) -> Result<FdReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = objective.gradient(params)?;
    let entries: Vec<Result<FdEntry>> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let span = params.layout().locate(i);
            let frozen = params.frozen()[i];
            let (numeric, small_below) = if frozen {
                (0.0, FD_SMALL)
            } else {
                let mut p = params.clone();
                let mut magnitude = 0.0f64;
                let mut central = |step: f64| -> Result<f64> {
                    p.values[i] = params.values[i] + step;
                    let plus = objective.local_value(&p, i)?;
                    p.values[i] = params.values[i] - step;
                    let minus = objective.local_value(&p, i)?;
                    magnitude = magnitude.max(plus.abs()).max(minus.abs());
                    Ok((plus - minus) / (2.0 * step))
                };
                let coarse = central(h)?;
                let fine = central(0.5 * h)?;
                // The combination amplifies per-value roundoff by about 1.5/h.
                let noise = 1.5 * FD_SUM_ULPS * f64::EPSILON * magnitude / h;
                ((4.0 * fine - coarse) / 3.0, FD_SMALL.max(FD_NOISE_FACTOR * noise))
            };
            let a = analytic[i];
            let abs_error = (a - numeric).abs();
            let rel_error = if numeric.abs() < small_below {
                0.0
            } else {
                abs_error / a.abs().max(numeric.abs())
            };
            Ok(FdEntry {
                index: i,
                frame: span.frame,
                block: span.block,
                frozen,
                analytic: a,
                numeric,
                abs_error,
                rel_error,
                small_below,
            })
        })
        .collect();
    let mut entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let max_abs_error = entries.iter().map(|e| e.abs_error).fold(0.0, f64::max);
    let max_small_abs_error = entries
        .iter()
        .filter(|e| e.numeric.abs() < e.small_below)
        .map(|e| e.abs_error)
        .fold(0.0, f64::max);
    entries.sort_by(|a, b| {
        b.rel_error
            .total_cmp(&a.rel_error)
            .then(b.abs_error.total_cmp(&a.abs_error))
            .then(a.index.cmp(&b.index))
    });
    Ok(FdReport {
        entries,
        max_rel_error,
        max_small_abs_error,
        max_abs_error,
    })
}
