//! Scalar objectives.
//!
//! Every function here is the plain value path; the matching analytic
//! derivatives live in [`crate::gradients`].

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{
    capsules_unchecked, forward_kinematics, forward_kinematics_unchecked, non_adjacent_bone_pairs,
    skin_vertex, BodyModel, Capsule, HumanState,
};
use crate::contact::ContactPairSet;
use crate::error::{Error, Result};
use crate::scene_camera::{project_clamped, Camera, KeypointFrame, ObjectState};

/// Weights and scales of the fitting objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "lambda_J")]
    pub lambda_j: f64,
    #[serde(rename = "lambda_C")]
    pub lambda_c: f64,
    pub lambda_pen: f64,
    pub lambda_reg: f64,
    /// Robust scale for 2D residuals, normalized image units.
    pub gm_sigma_align: f64,
    /// Robust scale for contact proximity, world units. `None` resolves to
    /// 5% of the human bounding-box height.
    pub gm_sigma_dist: Option<f64>,
    pub smooth_weight: f64,
    pub self_pen_weight: f64,
    pub pose_prior_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_j: 1.0,
            lambda_c: 10.0,
            lambda_pen: 5.0,
            lambda_reg: 1.0,
            gm_sigma_align: 0.02,
            gm_sigma_dist: None,
            smooth_weight: 1.0,
            self_pen_weight: 0.1,
            pose_prior_weight: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_J", self.lambda_j),
            ("lambda_C", self.lambda_c),
            ("lambda_pen", self.lambda_pen),
            ("lambda_reg", self.lambda_reg),
            ("smooth_weight", self.smooth_weight),
            ("self_pen_weight", self.self_pen_weight),
            ("pose_prior_weight", self.pose_prior_weight),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if !(self.gm_sigma_align.is_finite() && self.gm_sigma_align > 0.0) {
            return Err(Error::config(format!(
                "gm_sigma_align must be positive, got {}",
                self.gm_sigma_align
            )));
        }
        if let Some(s) = self.gm_sigma_dist {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config(format!("gm_sigma_dist must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma_dist_for_height(&self, human_height: f64) -> f64 {
        self.gm_sigma_dist.unwrap_or(0.05 * human_height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBreakdown {
    pub body: f64,
    pub contact: f64,
    pub penetration: f64,
    pub regularization: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The only constructor: `total` is always the weighted sum.
    pub fn compose(w: &LossWeights, body: f64, contact: f64, penetration: f64, regularization: f64) -> Self {
        LossBreakdown {
            body,
            contact,
            penetration,
            regularization,
            total: w.lambda_j * body
                + w.lambda_c * contact
                + w.lambda_pen * penetration
                + w.lambda_reg * regularization,
        }
    }
}

/// `ρ(e) = e² / (σ² + e²)`.
pub fn geman_mcclure(residual: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("Geman-McClure sigma must be positive, got {sigma}")));
    }
    Ok(gm_sq(residual * residual, sigma))
}

/// ρ from the squared residual.
#[inline]
pub(crate) fn gm_sq(e2: f64, sigma: f64) -> f64 {
    e2 / (sigma * sigma + e2)
}

fn check_views(model: &BodyModel, cameras: &[Camera], views: &[KeypointFrame]) -> Result<()> {
    let n = model.keypoint_map().len();
    for view in views {
        view.validate()?;
        if view.points.len() != n {
            return Err(Error::contract(format!(
                "view {} has {} keypoints, keypoint map has {n}",
                view.view_id,
                view.points.len()
            )));
        }
        if view.view_id >= cameras.len() {
            return Err(Error::invalid(format!("view {} has no camera", view.view_id)));
        }
    }
    Ok(())
}

/// Multi-view robust reprojection error, summed over views and mapped
/// joints; zero-confidence keypoints are skipped.
pub fn static_alignment_loss(
    model: &BodyModel,
    state: &HumanState,
    cameras: &[Camera],
    views: &[KeypointFrame],
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    check_views(model, cameras, views)?;
    if views.iter().all(|v| v.confident_count() == 0) {
        return Err(Error::Underconstrained("no view has a confident keypoint".into()));
    }
    let kin = forward_kinematics(model, state)?;
    let sigma = weights.gm_sigma_align;
    let mut total = 0.0;
    for view in views {
        let cam = &cameras[view.view_id];
        for &(det, joint) in model.keypoint_map() {
            if view.confidence[det] == 0.0 {
                continue;
            }
            let r = project_clamped(cam, &kin.joint_positions[joint]) - view.points[det];
            total += gm_sq(r.norm_squared(), sigma);
        }
    }
    Ok(total)
}

/// Confidence-weighted robust reprojection error of one view, averaged over
/// every mapped keypoint.
pub fn body_keypoint_loss(
    model: &BodyModel,
    human: &HumanState,
    camera: &Camera,
    frame: &KeypointFrame,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    if model.keypoint_map().is_empty() {
        return Err(Error::invalid("keypoint map is empty"));
    }
    frame.validate()?;
    if frame.points.len() != model.keypoint_map().len() {
        return Err(Error::contract(format!(
            "frame has {} keypoints, keypoint map has {}",
            frame.points.len(),
            model.keypoint_map().len()
        )));
    }
    let kin = forward_kinematics(model, human)?;
    Ok(body_term(model, &kin.joint_positions, camera, frame, weights.gm_sigma_align))
}

fn body_term(
    model: &BodyModel,
    joints: &[Vector3<f64>],
    camera: &Camera,
    frame: &KeypointFrame,
    sigma: f64,
) -> f64 {
    let n = model.keypoint_map().len() as f64;
    let mut sum = 0.0;
    for &(det, joint) in model.keypoint_map() {
        let w = frame.confidence[det];
        if w == 0.0 {
            continue;
        }
        let r = project_clamped(camera, &joints[joint]) - frame.points[det];
        sum += w * gm_sq(r.norm_squared(), sigma);
    }
    sum / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactLoss {
    pub value: f64,
    /// Set when the pair set is empty and the loss is vacuously 0.
    pub empty_pairs: bool,
}

/// Mean squared distance between paired human vertices (indexed by mesh
/// vertex id) and object samples (indexed by sample id).
pub fn contact_loss(
    human_vertices: &[Vector3<f64>],
    object_samples: &[Vector3<f64>],
    pairs: &ContactPairSet,
) -> Result<ContactLoss> {
    for &(i, j) in &pairs.pairs {
        if i >= object_samples.len() || j >= human_vertices.len() {
            return Err(Error::contract(format!("contact pair ({i}, {j}) out of range")));
        }
    }
    let value = contact_term(pairs, |j| human_vertices[j], |i| object_samples[i]);
    if pairs.pairs.is_empty() {
        log::warn!("contact pair set is empty; contact loss is 0");
    }
    Ok(ContactLoss {
        value,
        empty_pairs: pairs.pairs.is_empty(),
    })
}

fn contact_term(
    pairs: &ContactPairSet,
    human: impl Fn(usize) -> Vector3<f64>,
    object: impl Fn(usize) -> Vector3<f64>,
) -> f64 {
    if pairs.pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .pairs
        .iter()
        .map(|&(i, j)| (human(j) - object(i)).norm_squared())
        .sum();
    sum / pairs.pairs.len() as f64
}

/// Signed distance to the union of capsules and the index of the closest
/// capsule (first wins on ties).
pub fn union_signed_distance(p: &Vector3<f64>, capsules: &[Capsule]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (c, cap) in capsules.iter().enumerate() {
        let sd = cap.signed_distance(p);
        if best.is_none_or(|(b, _)| sd < b) {
            best = Some((sd, c));
        }
    }
    best
}

/// `(1/N) Σ max(0, −sd)²` over object samples.
pub fn penetration_loss(samples: &[Vector3<f64>], capsules: &[Capsule]) -> f64 {
    if samples.is_empty() || capsules.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|p| {
            let (sd, _) = union_signed_distance(p, capsules).expect("non-empty capsules");
            if sd < 0.0 {
                sd * sd
            } else {
                0.0
            }
        })
        .sum();
    sum / samples.len() as f64
}

/// Closest-point parameters `(s, t)` between segments `p1 + s(q1 − p1)` and
/// `p2 + t(q2 − p2)`.
pub fn segment_closest_params(
    p1: &Vector3<f64>,
    q1: &Vector3<f64>,
    p2: &Vector3<f64>,
    q2: &Vector3<f64>,
) -> (f64, f64) {
    const EPS: f64 = 1e-18;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    if a <= EPS && e <= EPS {
        return (0.0, 0.0);
    }
    if a <= EPS {
        return (0.0, (f / e).clamp(0.0, 1.0));
    }
    let c = d1.dot(&r);
    if e <= EPS {
        return ((-c / a).clamp(0.0, 1.0), 0.0);
    }
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > 0.0 {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    (s, t)
}

pub fn capsule_overlap(a: &Capsule, b: &Capsule) -> f64 {
    let (s, t) = segment_closest_params(&a.a, &a.b, &b.a, &b.b);
    let ca = a.a + (a.b - a.a) * s;
    let cb = b.a + (b.b - b.a) * t;
    a.radius + b.radius - (ca - cb).norm()
}

/// Σ max(0, overlap)² over non-adjacent bone pairs.
pub fn self_penetration(capsules: &[Capsule], pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(i, j)| {
            let o = capsule_overlap(&capsules[i], &capsules[j]);
            if o > 0.0 {
                o * o
            } else {
                0.0
            }
        })
        .sum()
}

/// Mean squared rotation magnitude over non-root joints.
pub fn pose_prior(state: &HumanState) -> f64 {
    let movable = &state.joint_rotations[1..];
    if movable.is_empty() {
        return 0.0;
    }
    movable.iter().map(|r| r.norm_squared()).sum::<f64>() / movable.len() as f64
}

/// Per-frame motion parameters in a fixed order: root rotation, root
/// translation, joint rotations, then object rotation and translation.
pub fn motion_vector(human: &HumanState, object: Option<&ObjectState>) -> Vec<f64> {
    let mut v = Vec::with_capacity(6 + 3 * human.joint_rotations.len() + 6);
    v.extend(human.root_rotation.iter());
    v.extend(human.root_translation.iter());
    for r in &human.joint_rotations {
        v.extend(r.iter());
    }
    if let Some(o) = object {
        v.extend(o.rotation.iter());
        v.extend(o.translation.iter());
    }
    v
}

/// Mean over interior frames of the squared norm of the second difference
/// of the motion vector; 0 for windows shorter than 3.
pub fn temporal_smoothness(humans: &[HumanState], objects: Option<&[ObjectState]>) -> f64 {
    let l = humans.len();
    if l < 3 {
        return 0.0;
    }
    let vecs: Vec<Vec<f64>> = (0..l)
        .map(|f| motion_vector(&humans[f], objects.map(|o| &o[f])))
        .collect();
    let mut sum = 0.0;
    for f in 1..l - 1 {
        sum += (0..vecs[f].len())
            .map(|k| {
                let d = vecs[f - 1][k] - 2.0 * vecs[f][k] + vecs[f + 1][k];
                d * d
            })
            .sum::<f64>();
    }
    sum / (l - 2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegularizationTerms {
    pub smoothness: f64,
    pub self_penetration: f64,
    pub pose_prior: f64,
}

impl RegularizationTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.smooth_weight * self.smoothness
            + w.self_pen_weight * self.self_penetration
            + w.pose_prior_weight * self.pose_prior
    }
}

pub fn regularization_terms(
    model: &BodyModel,
    humans: &[HumanState],
    objects: Option<&[ObjectState]>,
) -> Result<RegularizationTerms> {
    if humans.is_empty() {
        return Err(Error::invalid("regularization window is empty"));
    }
    if let Some(o) = objects {
        if o.len() != humans.len() {
            return Err(Error::contract("human and object windows differ in length"));
        }
    }
    let pairs = non_adjacent_bone_pairs(model);
    let mut self_pen = 0.0;
    let mut prior = 0.0;
    for h in humans {
        let kin = forward_kinematics(model, h)?;
        let caps = capsules_unchecked(model, &kin.joint_positions, h.scale);
        self_pen += self_penetration(&caps, &pairs);
        prior += pose_prior(h);
    }
    let l = humans.len() as f64;
    Ok(RegularizationTerms {
        smoothness: temporal_smoothness(humans, objects),
        self_penetration: self_pen / l,
        pose_prior: prior / l,
    })
}

pub fn regularization_loss(
    model: &BodyModel,
    humans: &[HumanState],
    objects: Option<&[ObjectState]>,
    weights: &LossWeights,
) -> Result<f64> {
    Ok(regularization_terms(model, humans, objects)?.weighted(weights))
}

/// Everything the motion objective needs besides the per-frame states.
#[derive(Debug, Clone, Copy)]
pub struct MotionScene<'a> {
    pub model: &'a BodyModel,
    pub cameras: &'a [Camera],
    /// Per frame, the keypoint views observed in that frame.
    pub keypoints: &'a [Vec<KeypointFrame>],
    pub contacts: &'a ContactPairSet,
}

impl MotionScene<'_> {
    pub fn frame_count(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self, humans: &[HumanState], objects: &[ObjectState]) -> Result<()> {
        let l = self.keypoints.len();
        if l == 0 {
            return Err(Error::invalid("motion window has no frames"));
        }
        if humans.len() != l || objects.len() != l {
            return Err(Error::contract(format!(
                "{l} keypoint frames but {} human and {} object states",
                humans.len(),
                objects.len()
            )));
        }
        if self.model.keypoint_map().is_empty() {
            return Err(Error::invalid("keypoint map is empty"));
        }
        for views in self.keypoints {
            check_views(self.model, self.cameras, views)?;
        }
        for h in humans {
            h.validate(self.model)?;
        }
        let nv = self.model.vertex_count();
        for o in objects {
            o.validate()?;
            let no = o.mesh.vertices.len();
            if let Some(&v) = self.contacts.sample_vertices.iter().find(|&&v| v >= no) {
                return Err(Error::contract(format!("object sample vertex {v} out of range")));
            }
        }
        for &(i, j) in &self.contacts.pairs {
            if i >= self.contacts.sample_vertices.len() || j >= nv {
                return Err(Error::contract(format!("contact pair ({i}, {j}) out of range")));
            }
        }
        Ok(())
    }
}

/// Unweighted per-frame loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameTerms {
    pub body: f64,
    pub contact: f64,
    pub penetration: f64,
    pub self_penetration: f64,
    pub pose_prior: f64,
}

pub(crate) fn frame_terms(
    scene: &MotionScene<'_>,
    frame: usize,
    human: &HumanState,
    object: &ObjectState,
    weights: &LossWeights,
    bone_pairs: &[(usize, usize)],
) -> FrameTerms {
    let model = scene.model;
    let kin = forward_kinematics_unchecked(model, human);
    let views = &scene.keypoints[frame];
    let body = if views.is_empty() {
        0.0
    } else {
        views
            .iter()
            .map(|v| body_term(model, &kin.joint_positions, &scene.cameras[v.view_id], v, weights.gm_sigma_align))
            .sum::<f64>()
            / views.len() as f64
    };

    let rot = object.rotation_matrix();
    let sample = |i: usize| rot * object.mesh.vertices[scene.contacts.sample_vertices[i]] + object.translation;
    let contact = contact_term(
        scene.contacts,
        |j| skin_vertex(model, &kin.joint_transforms, human, j),
        sample,
    );

    let capsules = capsules_unchecked(model, &kin.joint_positions, human.scale);
    let samples: Vec<Vector3<f64>> = (0..scene.contacts.sample_vertices.len()).map(sample).collect();
    FrameTerms {
        body,
        contact,
        penetration: penetration_loss(&samples, &capsules),
        self_penetration: self_penetration(&capsules, bone_pairs),
        pose_prior: pose_prior(human),
    }
}

/// Combines per-frame terms (summed in frame order) with the window
/// smoothness into the weighted breakdown.
pub(crate) fn combine_frames(terms: &[FrameTerms], smoothness: f64, weights: &LossWeights) -> LossBreakdown {
    let l = terms.len() as f64;
    let mut acc = FrameTerms::default();
    for t in terms {
        acc.body += t.body;
        acc.contact += t.contact;
        acc.penetration += t.penetration;
        acc.self_penetration += t.self_penetration;
        acc.pose_prior += t.pose_prior;
    }
    let reg = RegularizationTerms {
        smoothness,
        self_penetration: acc.self_penetration / l,
        pose_prior: acc.pose_prior / l,
    };
    LossBreakdown::compose(
        weights,
        acc.body / l,
        acc.contact / l,
        acc.penetration / l,
        reg.weighted(weights),
    )
}

/// The full weighted motion objective over a window of frames.
pub fn total_loss(
    scene: &MotionScene<'_>,
    humans: &[HumanState],
    objects: &[ObjectState],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    scene.validate(humans, objects)?;
    Ok(total_loss_unchecked(scene, humans, objects, weights))
}

pub(crate) fn total_loss_unchecked(
    scene: &MotionScene<'_>,
    humans: &[HumanState],
    objects: &[ObjectState],
    weights: &LossWeights,
) -> LossBreakdown {
    let pairs = non_adjacent_bone_pairs(scene.model);
    let terms: Vec<FrameTerms> = (0..humans.len())
        .into_par_iter()
        .map(|f| frame_terms(scene, f, &humans[f], &objects[f], weights, &pairs))
        .collect();
    combine_frames(&terms, temporal_smoothness(humans, Some(objects)), weights)
}

/// Static-stage objective: multi-view alignment plus the pose prior.
pub fn static_breakdown(
    model: &BodyModel,
    state: &HumanState,
    cameras: &[Camera],
    views: &[KeypointFrame],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let align = static_alignment_loss(model, state, cameras, views, weights)?;
    Ok(LossBreakdown::compose(
        weights,
        align,
        0.0,
        0.0,
        weights.pose_prior_weight * pose_prior(state),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::test_rigs::chain3;
    use crate::scene_camera::project;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigma_table() -> [(f64, f64); 3] {
        [(0.0, 0.0), (1.0, 0.5), (10.0, 100.0 / 101.0)]
    }

    #[test]
    fn geman_mcclure_table() {
        for sigma in [0.02, 1.0, 3.5] {
            for (mult, expected) in sigma_table() {
                assert_relative_eq!(geman_mcclure(mult * sigma, sigma).unwrap(), expected, epsilon = 1e-15);
            }
        }
        assert!(geman_mcclure(1.0, 0.0).is_err());
        assert!(geman_mcclure(1.0, -1.0).is_err());
    }

    #[test]
    fn geman_mcclure_is_monotone_and_bounded() {
        let mut prev = -1.0;
        for k in 0..1000 {
            let v = geman_mcclure(k as f64 * 0.01, 0.3).unwrap();
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }

    fn rig_and_camera() -> (BodyModel, Camera) {
        let model = chain3();
        let cam = Camera::look_at(Vector3::new(0.0, 1.0, 4.0), Vector3::new(0.0, 1.0, 0.0), Vector3::y(), 800.0, [800, 800])
            .unwrap();
        (model, cam)
    }

    fn synthesize(model: &BodyModel, state: &HumanState, cam: &Camera, view_id: usize) -> KeypointFrame {
        let kin = forward_kinematics(model, state).unwrap();
        let mut points = vec![Vector2::zeros(); model.keypoint_map().len()];
        for &(det, joint) in model.keypoint_map() {
            points[det] = project(cam, &kin.joint_positions[joint]).unwrap();
        }
        KeypointFrame { view_id, confidence: vec![1.0; points.len()], points }
    }

    #[test]
    fn self_projected_keypoints_give_zero_alignment() {
        let (model, cam) = rig_and_camera();
        let mut state = HumanState::rest(&model);
        state.joint_rotations[1] = Vector3::new(0.3, 0.2, -0.1);
        let frame = synthesize(&model, &state, &cam, 0);
        let w = LossWeights::default();
        assert_eq!(static_alignment_loss(&model, &state, std::slice::from_ref(&cam), std::slice::from_ref(&frame), &w).unwrap(), 0.0);
        assert_eq!(body_keypoint_loss(&model, &state, &cam, &frame, &w).unwrap(), 0.0);
    }

    #[test]
    fn one_sigma_offset_gives_half() {
        let (model, cam) = rig_and_camera();
        let state = HumanState::rest(&model);
        let w = LossWeights::default();
        let mut frame = synthesize(&model, &state, &cam, 0);
        frame.confidence = vec![1.0, 0.0, 0.0];
        frame.points[0].x += w.gm_sigma_align;
        assert_relative_eq!(
            static_alignment_loss(&model, &state, &[cam], &[frame], &w).unwrap(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn body_loss_averages_over_all_mapped_keypoints() {
        let (model, cam) = rig_and_camera();
        let state = HumanState::rest(&model);
        let w = LossWeights::default();
        let mut frame = synthesize(&model, &state, &cam, 0);
        frame.confidence = vec![0.0; 3];
        assert_eq!(body_keypoint_loss(&model, &state, &cam, &frame, &w).unwrap(), 0.0);

        // two-keypoint map: one exact, one offset by sigma
        let two = BodyModel::new(
            model.tree().clone(),
            model.template().clone(),
            model.skin_weights().to_vec(),
            vec![],
            vec![],
            vec![(0, 1), (1, 2)],
            model.bone_radii().to_vec(),
        )
        .unwrap();
        let mut frame = synthesize(&two, &state, &cam, 0);
        frame.points[1].y -= w.gm_sigma_align;
        assert_relative_eq!(body_keypoint_loss(&two, &state, &cam, &frame, &w).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn body_loss_matches_naive_loop() {
        let (model, cam) = rig_and_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = LossWeights::default();
        for _ in 0..20 {
            let mut state = HumanState::rest(&model);
            for r in state.joint_rotations.iter_mut() {
                *r = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            }
            let frame = KeypointFrame {
                view_id: 0,
                points: (0..3).map(|_| Vector2::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7))).collect(),
                confidence: (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
            };
            // naive: scalar arithmetic straight from the definition
            let kin = forward_kinematics(&model, &state).unwrap();
            let mut naive = 0.0;
            for m in 0..3 {
                let (det, joint) = model.keypoint_map()[m];
                let uv = project(&cam, &kin.joint_positions[joint]).unwrap();
                let du = uv[0] - frame.points[det][0];
                let dv = uv[1] - frame.points[det][1];
                let e2 = du * du + dv * dv;
                naive += frame.confidence[det] * e2 / (w.gm_sigma_align * w.gm_sigma_align + e2);
            }
            naive /= 3.0;
            let fast = body_keypoint_loss(&model, &state, &cam, &frame, &w).unwrap();
            assert!((fast - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn alignment_without_confident_views_is_underconstrained() {
        let (model, cam) = rig_and_camera();
        let state = HumanState::rest(&model);
        let mut frame = synthesize(&model, &state, &cam, 0);
        frame.confidence = vec![0.0; 3];
        let err = static_alignment_loss(&model, &state, &[cam], &[frame], &LossWeights::default());
        assert!(matches!(err, Err(Error::Underconstrained(_))));
    }

    fn pairs_of(pairs: Vec<(usize, usize)>, samples: usize) -> ContactPairSet {
        ContactPairSet {
            pairs,
            tau_n: 0.3,
            tau_d: 0.25,
            sample_vertices: (0..samples).collect(),
        }
    }

    #[test]
    fn contact_loss_examples() {
        let h = vec![Vector3::new(1.0, 2.0, 3.0)];
        let o = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(1.3, 2.0, 3.0)];
        assert_eq!(contact_loss(&h, &o, &pairs_of(vec![(0, 0)], 2)).unwrap().value, 0.0);
        assert_relative_eq!(contact_loss(&h, &o, &pairs_of(vec![(1, 0)], 2)).unwrap().value, 0.09, epsilon = 1e-12);
        let empty = contact_loss(&h, &o, &pairs_of(vec![], 2)).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.empty_pairs);
        assert!(contact_loss(&h, &o, &pairs_of(vec![(2, 0)], 2)).is_err());
    }

    #[test]
    fn contact_loss_matches_naive_loop_and_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<Vector3<f64>> = (0..80).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let o: Vec<Vector3<f64>> = (0..60).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let pairs: Vec<(usize, usize)> = (0..50).map(|i| (i, rng.random_range(0..80))).collect();
        let set = pairs_of(pairs.clone(), 60);
        let mut naive = 0.0;
        for &(i, j) in &pairs {
            for c in 0..3 {
                naive += (h[j][c] - o[i][c]).powi(2);
            }
        }
        naive /= 50.0;
        let v = contact_loss(&h, &o, &set).unwrap().value;
        assert_relative_eq!(v, naive, epsilon = 1e-14);

        let r = crate::so3::exp(&Vector3::new(0.4, -1.0, 2.0));
        let t = Vector3::new(3.0, -1.0, 0.5);
        let h2: Vec<_> = h.iter().map(|p| r * p + t).collect();
        let o2: Vec<_> = o.iter().map(|p| r * p + t).collect();
        assert!((contact_loss(&h2, &o2, &set).unwrap().value - v).abs() < 1e-9);
    }

    fn capsule(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Capsule {
        Capsule { a, b, radius, parent: 0, child: 1 }
    }

    #[test]
    fn penetration_examples() {
        let caps = vec![capsule(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 0.2)];
        let outside = vec![Vector3::new(0.5, 0.0, 0.5), Vector3::new(0.0, 0.0, 1.5)];
        assert_eq!(penetration_loss(&outside, &caps), 0.0);
        let mut with_axis = outside.clone();
        with_axis.push(Vector3::new(0.0, 0.0, 0.4));
        assert_relative_eq!(penetration_loss(&with_axis, &caps), 0.04 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn penetration_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let caps: Vec<Capsule> = (0..6)
                .map(|_| {
                    capsule(
                        Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                        Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                        rng.random_range(0.05..0.4),
                    )
                })
                .collect();
            let pts: Vec<Vector3<f64>> = (0..200).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2))).collect();
            // oracle: dense sampling of each segment is too coarse; use the
            // projection formula per capsule written out longhand
            let mut sum = 0.0;
            let mut any_inside = false;
            for p in &pts {
                let mut best = f64::INFINITY;
                for c in &caps {
                    let ab = c.b - c.a;
                    let mut t = (p - c.a).dot(&ab) / ab.dot(&ab);
                    t = t.clamp(0.0, 1.0);
                    let q = c.a + ab * t;
                    best = best.min((p - q).norm() - c.radius);
                }
                if best < 0.0 {
                    any_inside = true;
                    sum += best * best;
                }
            }
            let oracle = sum / pts.len() as f64;
            let v = penetration_loss(&pts, &caps);
            assert_relative_eq!(v, oracle, epsilon = 1e-14);
            assert_eq!(v == 0.0, !any_inside);
        }
    }

    #[test]
    fn segment_distance_matches_dense_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let p: Vec<Vector3<f64>> = (0..4).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
            let (s, t) = segment_closest_params(&p[0], &p[1], &p[2], &p[3]);
            let d = ((p[0] + (p[1] - p[0]) * s) - (p[2] + (p[3] - p[2]) * t)).norm();
            let mut best = f64::INFINITY;
            let n = 200;
            for i in 0..=n {
                let a = p[0] + (p[1] - p[0]) * (i as f64 / n as f64);
                // closed form against a point is exact; search only one side
                let ab = p[3] - p[2];
                let tt = ((a - p[2]).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                best = best.min((a - (p[2] + ab * tt)).norm());
            }
            assert!(d <= best + 1e-12);
            assert!(best - d < 1e-3);
        }
    }

    #[test]
    fn smoothness_vanishes_for_linear_motion() {
        let model = chain3();
        let humans: Vec<HumanState> = (0..5)
            .map(|f| {
                let mut h = HumanState::rest(&model);
                h.root_translation = Vector3::new(0.1 * f as f64, 0.0, -0.05 * f as f64);
                h.joint_rotations[1] = Vector3::new(0.02 * f as f64, 0.0, 0.0);
                h
            })
            .collect();
        assert_relative_eq!(temporal_smoothness(&humans, None), 0.0, epsilon = 1e-28);
        assert_eq!(temporal_smoothness(&humans[..2], None), 0.0);
    }

    #[test]
    fn smoothness_matches_naive_second_difference() {
        let model = chain3();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mesh = std::sync::Arc::new(crate::mesh::subdivided_box(Vector3::new(0.1, 0.1, 0.1), [1, 1, 1]));
        let mut humans = Vec::new();
        let mut objects = Vec::new();
        for _ in 0..5 {
            let mut h = HumanState::rest(&model);
            h.root_rotation = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            h.root_translation = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            for r in h.joint_rotations.iter_mut() {
                *r = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            }
            humans.push(h);
            let mut o = ObjectState::new(mesh.clone());
            o.rotation = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            o.translation = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            objects.push(o);
        }
        let mut naive = 0.0;
        for f in 1..4 {
            let sd = |a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>| (a - b * 2.0 + c).norm_squared();
            naive += sd(&humans[f - 1].root_rotation, &humans[f].root_rotation, &humans[f + 1].root_rotation);
            naive += sd(&humans[f - 1].root_translation, &humans[f].root_translation, &humans[f + 1].root_translation);
            for k in 0..3 {
                naive += sd(&humans[f - 1].joint_rotations[k], &humans[f].joint_rotations[k], &humans[f + 1].joint_rotations[k]);
            }
            naive += sd(&objects[f - 1].rotation, &objects[f].rotation, &objects[f + 1].rotation);
            naive += sd(&objects[f - 1].translation, &objects[f].translation, &objects[f + 1].translation);
        }
        naive /= 3.0;
        assert_relative_eq!(temporal_smoothness(&humans, Some(&objects)), naive, max_relative = 1e-13);
    }

    #[test]
    fn constant_rest_window_has_zero_regularization() {
        let model = BodyModel::rig18();
        let humans = vec![HumanState::rest(&model); 4];
        let reg = regularization_loss(&model, &humans, None, &LossWeights::default()).unwrap();
        assert_eq!(reg, 0.0);
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let w = LossWeights {
            lambda_j: 0.3,
            lambda_c: 2.5,
            lambda_pen: 0.7,
            lambda_reg: 1.9,
            ..LossWeights::default()
        };
        let b = LossBreakdown::compose(&w, 0.11, 0.22, 0.33, 0.44);
        assert_eq!(b.total, 0.3 * 0.11 + 2.5 * 0.22 + 0.7 * 0.33 + 1.9 * 0.44);
        let zero = LossWeights { lambda_j: 0.0, lambda_c: 0.0, lambda_pen: 0.0, lambda_reg: 0.0, ..w };
        assert_eq!(LossBreakdown::compose(&zero, 1.0, 2.0, 3.0, 4.0).total, 0.0);
    }

    #[test]
    fn weights_validation_names_field() {
        let w = LossWeights { lambda_j: -1.0, ..LossWeights::default() };
        let msg = w.validate().unwrap_err().to_string();
        assert!(msg.contains("lambda_J"), "{msg}");
        let w = LossWeights { gm_sigma_align: 0.0, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
