//! Procedural ground-truth interaction sequences, detector-like keypoint
//! synthesis and evaluation metrics.
//!
//! Scenario objects are built so that at frame 0 the relevant object faces
//! share vertices with the rig's palm or thigh plates. The gated contact
//! pairs are then exactly coincident, which gives the motion stage a clean
//! oracle.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{
    capsules_unchecked, forward_kinematics, skin_vertex, BodyModel, HumanState, Kinematics,
};
use crate::contact::{farthest_point_sampling, scene_contacts, ContactGates, ContactPairSet, PairDiagnostic};
use crate::error::{Error, Result};
use crate::gradients::{FreezeSpec, MotionObjective, ParamVector};
use crate::io::ContactConfig;
use crate::losses::{motion_vector, union_signed_distance, LossWeights, MotionScene};
use crate::mesh::{subdivided_box, TriMesh};
use crate::scene_camera::{project, project_clamped, Camera, KeypointFrame, ObjectState};
use crate::so3;

/// Frames per gait or sweep cycle.
const CYCLE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Walking while holding a box between both palms.
    CarryBox,
    /// Seated on a stool, swaying slightly.
    SitStill,
    /// Sweeping with a mop gripped in the right hand.
    MopSweep,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::CarryBox, ScenarioKind::SitStill, ScenarioKind::MopSweep];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CarryBox => "carry-box",
            ScenarioKind::SitStill => "sit-still",
            ScenarioKind::MopSweep => "mop-sweep",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Scenario(format!("unknown scenario `{name}` (expected carry-box, sit-still or mop-sweep)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub kind: ScenarioKind,
    pub frames: usize,
    /// Keypoint noise, normalized image units.
    pub noise_sigma: f64,
    /// Probability that a keypoint is dropped.
    pub occlusion_rate: f64,
    pub seed: u64,
    /// View 0 is frontal and is the one the motion stage uses.
    pub views: Vec<Camera>,
    /// Contact gates that isolate the coincident grasp pairs.
    pub contact: ContactConfig,
}

/// Rotation of `angle` about a unit axis.
fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    so3::exp(&(axis * angle))
}

fn aa(r: Matrix3<f64>) -> Vector3<f64> {
    so3::log(&r)
}

fn joint(model: &BodyModel, name: &str) -> Result<usize> {
    model
        .tree()
        .joint_index(name)
        .ok_or_else(|| Error::Scenario(format!("rig has no joint `{name}`")))
}

/// Right-palm inner face grid used by the bundled rig, in right-wrist rest
/// coordinates: x ∈ [−0.13, −0.01] in 8 steps, y ∈ [−0.04, 0.04] in 6
/// steps, at z = 0.045.
const PALM_FACE: f64 = 0.045;

fn carry_box_mesh() -> TriMesh {
    // Spans both palms: its −z face lies on the right palm and its +z face
    // on the left palm once the arms point forward.
    subdivided_box(Vector3::new(0.12, 0.12, 0.155), [16, 18, 12])
        .map_vertices(|p| p + Vector3::new(-0.07, 0.0, PALM_FACE + 0.155))
}

fn mop_mesh() -> TriMesh {
    let mut handle = subdivided_box(Vector3::new(0.015, 0.7, 0.015), [2, 105, 1])
        .map_vertices(|p| p + Vector3::new(-0.07, -0.38, PALM_FACE + 0.015));
    let head = subdivided_box(Vector3::new(0.05, 0.03, 0.15), [4, 2, 10])
        .map_vertices(|p| p + Vector3::new(-0.07, -1.11, PALM_FACE + 0.015));
    handle.append(&head);
    handle
}

fn stool_mesh() -> TriMesh {
    // Top face at the thigh plates of the seated pose; x grid matches the
    // plates' 1/60 spacing and z grid their 0.0325 spacing.
    subdivided_box(Vector3::new(0.2, 0.185, 0.11375), [24, 6, 7])
}

const STOOL_CENTER: [f64; 3] = [0.0, -0.58 - 0.185, 0.1125 + 0.11375];

impl ScenarioKind {
    pub fn ground_truth_human(self, model: &BodyModel, f: usize) -> Result<HumanState> {
        let phase = TAU * f as f64 / CYCLE;
        let (s, c) = phase.sin_cos();
        let mut h = HumanState::rest(model);
        let mut set = |name: &str, r: Matrix3<f64>| -> Result<()> {
            let k = joint(model, name)?;
            h.joint_rotations[k] = aa(r);
            Ok(())
        };
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        match self {
            ScenarioKind::CarryBox => {
                set("r_shoulder", rot(x, 0.3) * rot(y, FRAC_PI_2))?;
                set("l_shoulder", rot(x, 0.3) * rot(y, -FRAC_PI_2))?;
                set("r_hip", rot(x, 0.35 * s))?;
                set("l_hip", rot(x, -0.35 * s))?;
                set("r_knee", rot(x, 0.3 * s.max(0.0)))?;
                set("l_knee", rot(x, 0.3 * (-s).max(0.0)))?;
                set("nose", rot(x, 0.05 * (2.0 * phase).sin()))?;
                h.root_rotation = y * (0.25 * s);
                h.root_translation = Vector3::new(-0.15 + 0.01 * f as f64, 0.0, 0.0);
            }
            ScenarioKind::SitStill => {
                set("r_hip", rot(x, -FRAC_PI_2))?;
                set("l_hip", rot(x, -FRAC_PI_2))?;
                set("r_knee", rot(x, FRAC_PI_2))?;
                set("l_knee", rot(x, FRAC_PI_2))?;
                set("r_shoulder", rot(z, 1.2))?;
                set("l_shoulder", rot(z, -1.2))?;
                set("nose", rot(y, 0.1 * s))?;
                h.root_rotation = y * (0.03 * s) + x * (-0.02 * (1.0 - c));
            }
            ScenarioKind::MopSweep => {
                set("r_shoulder", rot(y, 0.3 * s) * rot(x, 0.5) * rot(y, FRAC_PI_2))?;
                set("r_wrist", rot(z, -0.6))?;
                set("l_shoulder", rot(z, -1.0))?;
                set("r_hip", rot(z, -0.08))?;
                set("l_hip", rot(z, 0.08))?;
                h.root_rotation = y * (0.15 * s);
            }
        }
        Ok(h)
    }

    pub fn object_mesh(self) -> TriMesh {
        match self {
            ScenarioKind::CarryBox => carry_box_mesh(),
            ScenarioKind::SitStill => stool_mesh(),
            ScenarioKind::MopSweep => mop_mesh(),
        }
    }

    /// Object pose at a frame: rigidly attached to the right wrist for the
    /// hand-held objects, static for the stool.
    pub fn object_pose(self, model: &BodyModel, human: &HumanState, kin: &Kinematics) -> Result<(Vector3<f64>, Vector3<f64>)> {
        match self {
            ScenarioKind::SitStill => Ok((Vector3::zeros(), Vector3::from(STOOL_CENTER))),
            _ => {
                let w = joint(model, "r_wrist")?;
                let r = so3::exp(&human.root_rotation);
                let rotation = aa(r * kin.model_rotations[w]);
                let translation = r * kin.model_positions[w] * human.scale + human.root_translation;
                Ok((rotation, translation))
            }
        }
    }
}

impl SyntheticScenario {
    /// A bundled scenario with its default camera ring and gates.
    pub fn bundled(kind: ScenarioKind, model: &BodyModel, frames: usize, noise_sigma: f64, occlusion_rate: f64, seed: u64) -> Result<Self> {
        let human0 = kind.ground_truth_human(model, 0)?;
        let kin = forward_kinematics(model, &human0)?;
        let centroid = kin.joint_positions.iter().sum::<Vector3<f64>>() / kin.joint_positions.len() as f64;
        let scenario = SyntheticScenario {
            kind,
            frames,
            noise_sigma,
            occlusion_rate,
            seed,
            views: camera_ring(centroid, 3.0, 4)?,
            contact: ContactConfig {
                tau_d: 0.01,
                ..ContactConfig::default()
            },
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Scenario("a scenario needs at least one frame".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::Scenario(format!("occlusion_rate must lie in [0, 1), got {}", self.occlusion_rate)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Scenario(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma)));
        }
        if self.views.is_empty() {
            return Err(Error::Scenario("a scenario needs at least one view".into()));
        }
        self.contact.validate()
    }
}

/// `n` cameras on a horizontal circle around `target`, the first on +z.
pub fn camera_ring(target: Vector3<f64>, radius: f64, n: usize) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            let a = TAU * i as f64 / n as f64;
            let eye = target + Vector3::new(a.sin(), 0.0, a.cos()) * radius;
            Camera::look_at(eye, target, Vector3::y(), 600.0, [640, 480])
        })
        .collect()
}

/// Ground truth plus the synthetic observations of a scenario.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub humans: Vec<HumanState>,
    pub objects: Vec<ObjectState>,
    /// Per frame, one keypoint view per scenario camera.
    pub keypoints: Vec<Vec<KeypointFrame>>,
    pub contacts: ContactPairSet,
    pub diagnostics: Vec<PairDiagnostic>,
}

impl SyntheticData {
    /// Keypoints of one view for every frame, as the motion stage sees them.
    pub fn single_view(&self, view: usize) -> Vec<Vec<KeypointFrame>> {
        self.keypoints
            .iter()
            .map(|views| {
                let mut k = views[view].clone();
                k.view_id = 0;
                vec![k]
            })
            .collect()
    }
}

pub fn contact_gates(config: &ContactConfig, weights: &LossWeights, model: &BodyModel, scale: f64) -> ContactGates {
    ContactGates {
        tau_n: config.tau_n,
        tau_d: config.tau_d,
        sigma_dist: weights.sigma_dist_for_height(model.height() * scale),
        convention: config.normal_convention,
    }
}

/// Ground-truth states, noisy keypoints and frame-0 contacts. Random draws
/// happen in a fixed order (frame, view, keypoint), so output depends only
/// on the scenario.
pub fn generate(scenario: &SyntheticScenario, model: &BodyModel, weights: &LossWeights) -> Result<SyntheticData> {
    scenario.validate()?;
    let kind = scenario.kind;
    let mesh = Arc::new(kind.object_mesh());
    let mut humans = Vec::with_capacity(scenario.frames);
    let mut objects = Vec::with_capacity(scenario.frames);
    let mut joints = Vec::with_capacity(scenario.frames);
    for f in 0..scenario.frames {
        let h = kind.ground_truth_human(model, f)?;
        let kin = forward_kinematics(model, &h)?;
        let (rotation, translation) = kind.object_pose(model, &h, &kin)?;
        objects.push(ObjectState {
            rotation,
            translation,
            mesh: mesh.clone(),
        });
        joints.push(kin.joint_positions);
        humans.push(h);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, scenario.noise_sigma).map_err(|e| Error::Scenario(e.to_string()))?;
    let mut keypoints = Vec::with_capacity(scenario.frames);
    for (f, joints) in joints.iter().enumerate() {
        let mut views = Vec::with_capacity(scenario.views.len());
        for (v, cam) in scenario.views.iter().enumerate() {
            let mut points = Vec::with_capacity(model.keypoint_map().len());
            let mut confidence = Vec::with_capacity(model.keypoint_map().len());
            for &(_, j) in model.keypoint_map() {
                let uv = project(cam, &joints[j]).map_err(|e| {
                    Error::Scenario(format!("frame {f}, view {v}: joint {} cannot be projected: {e}", model.tree().joint_name(j)))
                })?;
                let dropped = rng.random::<f64>() < scenario.occlusion_rate;
                let du = noise.sample(&mut rng);
                let dv = noise.sample(&mut rng);
                points.push(uv + Vector2::new(du, dv));
                confidence.push(if dropped { 0.0 } else { 1.0 });
            }
            views.push(KeypointFrame {
                view_id: v,
                points,
                confidence,
            });
        }
        keypoints.push(views);
    }

    let gates = contact_gates(&scenario.contact, weights, model, humans[0].scale);
    let (contacts, diagnostics) = scene_contacts(
        model,
        &humans[0],
        &objects[0],
        scenario.contact.n_samples.min(mesh.vertices.len()),
        scenario.contact.seed_index,
        &gates,
    )?;
    Ok(SyntheticData {
        humans,
        objects,
        keypoints,
        contacts,
        diagnostics,
    })
}

// ------------------------------------------------------------ metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Mean joint position error, world units.
    pub joint_error: f64,
    /// Same after subtracting each skeleton's root joint position.
    pub joint_error_aligned: f64,
    /// Mean distance between projections of recovered and true joints,
    /// normalized image units, averaged over cameras.
    pub reprojection_2d: f64,
    /// Mean distance between paired human vertices and object samples.
    pub contact_distance: f64,
    /// Fraction of object samples inside the capsule union.
    pub penetration_fraction: f64,
    /// Mean depth of the penetrating samples; 0 when none penetrate.
    pub penetration_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub frames: Vec<FrameMetrics>,
    pub mean_joint_error: f64,
    pub mean_joint_error_aligned: f64,
    pub mean_reprojection_2d: f64,
    pub mean_contact_distance: f64,
    pub mean_penetration_fraction: f64,
    pub mean_penetration_depth: f64,
    /// Mean norm of second differences of joint positions.
    pub jitter: f64,
    /// Mean norm of second differences of the per-frame motion parameters.
    pub param_jitter: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Compares recovered states against ground truth. `cameras` are the views
/// used for the 2D error.
pub fn evaluate(
    model: &BodyModel,
    cameras: &[Camera],
    contacts: &ContactPairSet,
    recovered: (&[HumanState], &[ObjectState]),
    truth: (&[HumanState], &[ObjectState]),
) -> Result<Metrics> {
    let (rh, ro) = recovered;
    let (th, to) = truth;
    let l = rh.len();
    if l == 0 || th.len() != l || ro.len() != l || to.len() != l {
        return Err(Error::invalid(format!(
            "frame counts differ: {} recovered humans, {} objects; {} true humans, {} objects",
            rh.len(),
            ro.len(),
            th.len(),
            to.len()
        )));
    }
    let mut frames = Vec::with_capacity(l);
    let mut recovered_joints = Vec::with_capacity(l);
    for f in 0..l {
        let kr = forward_kinematics(model, &rh[f])?;
        let kt = forward_kinematics(model, &th[f])?;
        let jr = &kr.joint_positions;
        let jt = &kt.joint_positions;
        let joint_error = mean(jr.iter().zip(jt).map(|(a, b)| (a - b).norm()));
        let joint_error_aligned = mean(jr.iter().zip(jt).map(|(a, b)| ((a - jr[0]) - (b - jt[0])).norm()));
        let reprojection_2d = mean(cameras.iter().flat_map(|cam| {
            model
                .keypoint_map()
                .iter()
                .map(move |&(_, j)| (project_clamped(cam, &jr[j]) - project_clamped(cam, &jt[j])).norm())
        }));

        let o = &ro[f];
        let rot = o.rotation_matrix();
        let sample = |i: usize| -> Result<Vector3<f64>> {
            let v = contacts.sample_vertices[i];
            let p = o
                .mesh
                .vertices
                .get(v)
                .ok_or_else(|| Error::contract(format!("object sample vertex {v} out of range")))?;
            Ok(rot * p + o.translation)
        };
        let mut dist = Vec::with_capacity(contacts.pairs.len());
        for &(i, j) in &contacts.pairs {
            if j >= model.vertex_count() || i >= contacts.sample_vertices.len() {
                return Err(Error::contract(format!("contact pair ({i}, {j}) out of range")));
            }
            dist.push((skin_vertex(model, &kr.joint_transforms, &rh[f], j) - sample(i)?).norm());
        }
        let capsules = capsules_unchecked(model, jr, rh[f].scale);
        let mut inside = 0usize;
        let mut depth = 0.0;
        for i in 0..contacts.sample_vertices.len() {
            if let Some((sd, _)) = union_signed_distance(&sample(i)?, &capsules) {
                if sd < 0.0 {
                    inside += 1;
                    depth -= sd;
                }
            }
        }
        let n_samples = contacts.sample_vertices.len();
        frames.push(FrameMetrics {
            frame: f,
            joint_error,
            joint_error_aligned,
            reprojection_2d,
            contact_distance: mean(dist.into_iter()),
            penetration_fraction: if n_samples == 0 { 0.0 } else { inside as f64 / n_samples as f64 },
            penetration_depth: if inside == 0 { 0.0 } else { depth / inside as f64 },
        });
        recovered_joints.push(kr.joint_positions);
    }

    let jitter = mean((1..l.saturating_sub(1)).flat_map(|f| {
        let (a, b, c) = (&recovered_joints[f - 1], &recovered_joints[f], &recovered_joints[f + 1]);
        (0..a.len()).map(move |k| (a[k] - b[k] * 2.0 + c[k]).norm())
    }));
    let vectors: Vec<Vec<f64>> = (0..l).map(|f| motion_vector(&rh[f], Some(&ro[f]))).collect();
    let param_jitter = mean((1..l.saturating_sub(1)).map(|f| {
        vectors[f]
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let d = vectors[f - 1][k] - 2.0 * x + vectors[f + 1][k];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }));

    Ok(Metrics {
        mean_joint_error: mean(frames.iter().map(|m| m.joint_error)),
        mean_joint_error_aligned: mean(frames.iter().map(|m| m.joint_error_aligned)),
        mean_reprojection_2d: mean(frames.iter().map(|m| m.reprojection_2d)),
        mean_contact_distance: mean(frames.iter().map(|m| m.contact_distance)),
        mean_penetration_fraction: mean(frames.iter().map(|m| m.penetration_fraction)),
        mean_penetration_depth: mean(frames.iter().map(|m| m.penetration_depth)),
        frames,
        jitter,
        param_jitter,
    })
}

// -------------------------------------------------- gradient test cases

/// A random but fully active motion-objective instance: posed frames with
/// drifting joint angles, noisy partially confident keypoints, an object
/// overlapping the right forearm and random contact pairs.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub model: BodyModel,
    pub cameras: Vec<Camera>,
    pub keypoints: Vec<Vec<KeypointFrame>>,
    pub contacts: ContactPairSet,
    pub humans: Vec<HumanState>,
    pub objects: Vec<ObjectState>,
}

const KINK_MARGIN: f64 = 1e-4;
const KINK_REDRAWS: usize = 200;

/// True when `p` penetrates the capsule union and its two nearest capsules
/// are within `KINK_MARGIN` of each other.
fn near_capsule_switch(p: &Vector3<f64>, capsules: &[crate::body_model::Capsule]) -> bool {
    let mut best = [f64::INFINITY; 2];
    for cap in capsules {
        let sd = cap.signed_distance(p);
        if sd < best[0] {
            best = [sd, best[0]];
        } else if sd < best[1] {
            best[1] = sd;
        }
    }
    best[0] < KINK_MARGIN && best[1] - best[0] < KINK_MARGIN
}

impl GradientCase {
    pub fn random(model: &BodyModel, seed: u64, frames: usize, n_samples: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("a gradient case needs at least one frame"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng, s: f64| Normal::new(0.0, s).expect("valid sigma").sample(rng);
        let gv = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(gauss(rng, s), gauss(rng, s), gauss(rng, s));

        let mut base = HumanState::rest(model);
        base.scale = rng.random_range(0.9..1.1);
        base.shape_coeffs = (0..model.shape_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        base.root_rotation = gv(&mut rng, 0.2);
        base.root_translation = gv(&mut rng, 0.1);
        for r in base.joint_rotations.iter_mut().skip(1) {
            *r = gv(&mut rng, 0.4);
        }
        let velocity: Vec<Vector3<f64>> = (0..model.joint_count() + 2).map(|_| gv(&mut rng, 0.02)).collect();

        let mesh = Arc::new(subdivided_box(Vector3::new(0.1, 0.07, 0.07), [8, 6, 6]));
        let n_samples = n_samples.min(mesh.vertices.len());
        let sample_vertices = farthest_point_sampling(&mesh.vertices, n_samples, 0)?;
        let elbow = joint(model, "r_elbow").unwrap_or(1.min(model.joint_count() - 1));
        let wrist = joint(model, "r_wrist").unwrap_or(model.joint_count() - 1);
        let object_rot = gv(&mut rng, 1.0);
        let object_offset = gv(&mut rng, 0.04);

        let mut humans = Vec::with_capacity(frames);
        let mut objects = Vec::with_capacity(frames);
        for f in 0..frames {
            let t = f as f64;
            let mut h = base.clone();
            h.root_rotation += velocity[0] * t + gv(&mut rng, 0.005);
            h.root_translation += velocity[1] * t + gv(&mut rng, 0.005);
            for k in 1..h.joint_rotations.len() {
                h.joint_rotations[k] += velocity[k + 2] * t + gv(&mut rng, 0.01);
            }
            let kin = forward_kinematics(model, &h)?;
            let mid = (kin.joint_positions[elbow] + kin.joint_positions[wrist]) * 0.5;
            let capsules = capsules_unchecked(model, &kin.joint_positions, h.scale);
            // The union distance is a min over capsules; keep penetrating
            // samples clear of the switching surface so central differences
            // never straddle a kink.
            let mut object = None;
            for _ in 0..KINK_REDRAWS {
                let candidate = ObjectState {
                    rotation: object_rot + gv(&mut rng, 0.02),
                    translation: mid + object_offset + gv(&mut rng, 0.005),
                    mesh: mesh.clone(),
                };
                let rot = candidate.rotation_matrix();
                let clear = sample_vertices
                    .iter()
                    .all(|&v| !near_capsule_switch(&(rot * mesh.vertices[v] + candidate.translation), &capsules));
                if clear {
                    object = Some(candidate);
                    break;
                }
            }
            objects.push(object.ok_or_else(|| {
                Error::Scenario(format!("frame {f}: no kink-free object placement in {KINK_REDRAWS} draws"))
            })?);
            humans.push(h);
        }

        let center = forward_kinematics(model, &humans[0])?.joint_positions[0];
        let cameras = vec![Camera::look_at(
            center + Vector3::new(0.0, 0.0, 3.0),
            center,
            Vector3::y(),
            600.0,
            [640, 480],
        )?];
        let mut keypoints = Vec::with_capacity(frames);
        for h in &humans {
            let kin = forward_kinematics(model, h)?;
            let mut points = Vec::new();
            let mut confidence = Vec::new();
            for &(_, j) in model.keypoint_map() {
                let uv = project_clamped(&cameras[0], &kin.joint_positions[j]);
                points.push(uv + Vector2::new(gauss(&mut rng, 0.03), gauss(&mut rng, 0.03)));
                confidence.push(if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.2..1.0) });
            }
            keypoints.push(vec![KeypointFrame {
                view_id: 0,
                points,
                confidence,
            }]);
        }

        let candidates = model.contact_candidates();
        let pool: Vec<usize> = if candidates.is_empty() {
            (0..model.vertex_count()).collect()
        } else {
            candidates.to_vec()
        };
        let mut pairs: Vec<(usize, usize)> = (0..n_samples.min(40))
            .map(|_| (rng.random_range(0..n_samples), pool[rng.random_range(0..pool.len())]))
            .collect();
        pairs.sort_unstable();
        let contacts = ContactPairSet {
            pairs,
            tau_n: 0.3,
            tau_d: 0.25,
            sample_vertices,
        };
        Ok(GradientCase {
            model: model.clone(),
            cameras,
            keypoints,
            contacts,
            humans,
            objects,
        })
    }

    pub fn scene(&self) -> MotionScene<'_> {
        MotionScene {
            model: &self.model,
            cameras: &self.cameras,
            keypoints: &self.keypoints,
            contacts: &self.contacts,
        }
    }

    pub fn objective(&self, weights: LossWeights) -> Result<MotionObjective<'_>> {
        MotionObjective::new(self.scene(), self.objects[0].mesh.clone(), weights)
    }

    pub fn params(&self) -> Result<ParamVector> {
        ParamVector::pack(&self.humans, Some(self.objects.as_slice()), FreezeSpec::MOTION)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::total_loss;
    use approx::assert_relative_eq;

    fn rig() -> BodyModel {
        BodyModel::rig18()
    }

    fn data(kind: ScenarioKind, frames: usize) -> (BodyModel, SyntheticScenario, SyntheticData) {
        let model = rig();
        let sc = SyntheticScenario::bundled(kind, &model, frames, 0.0, 0.0, 7).unwrap();
        let d = generate(&sc, &model, &LossWeights::default()).unwrap();
        (model, sc, d)
    }

    #[test]
    fn gradient_cases_keep_samples_off_capsule_switches() {
        let model = BodyModel::rig18();
        for seed in [0, 73] {
            let case = GradientCase::random(&model, seed, 30, 256).unwrap();
            for (h, o) in case.humans.iter().zip(&case.objects) {
                let kin = forward_kinematics(&model, h).unwrap();
                let capsules = capsules_unchecked(&model, &kin.joint_positions, h.scale);
                let rot = o.rotation_matrix();
                for &v in &case.contacts.sample_vertices {
                    assert!(!near_capsule_switch(&(rot * o.mesh.vertices[v] + o.translation), &capsules));
                }
            }
        }
    }

    #[test]
    fn noiseless_keypoints_equal_projections() {
        let (model, sc, d) = data(ScenarioKind::CarryBox, 3);
        for (f, views) in d.keypoints.iter().enumerate() {
            let kin = forward_kinematics(&model, &d.humans[f]).unwrap();
            for (v, k) in views.iter().enumerate() {
                for (i, &(_, j)) in model.keypoint_map().iter().enumerate() {
                    assert_eq!(k.points[i], project(&sc.views[v], &kin.joint_positions[j]).unwrap());
                    assert_eq!(k.confidence[i], 1.0);
                }
            }
        }
    }

    #[test]
    fn occlusion_rate_matches_binomial_bounds() {
        let model = rig();
        let eps = 0.05;
        let sc = SyntheticScenario::bundled(ScenarioKind::CarryBox, &model, 20, 0.0, 1.0 - eps, 3).unwrap();
        let d = generate(&sc, &model, &LossWeights::default()).unwrap();
        let draws: Vec<f64> = d.keypoints.iter().flatten().flat_map(|k| k.confidence.iter().copied()).collect();
        let n = draws.len() as f64;
        let dropped = draws.iter().filter(|c| **c == 0.0).count() as f64;
        let p = 1.0 - eps;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((dropped - n * p).abs() <= 3.0 * sd, "dropped {dropped} of {n}");
    }

    #[test]
    fn same_seed_is_deterministic_and_seeds_differ() {
        let model = rig();
        let w = LossWeights::default();
        let a = SyntheticScenario::bundled(ScenarioKind::MopSweep, &model, 4, 0.005, 0.1, 11).unwrap();
        let d1 = generate(&a, &model, &w).unwrap();
        let d2 = generate(&a, &model, &w).unwrap();
        assert_eq!(d1.keypoints, d2.keypoints);
        assert_eq!(d1.contacts, d2.contacts);
        let b = SyntheticScenario { seed: 12, ..a };
        assert_ne!(generate(&b, &model, &w).unwrap().keypoints, d1.keypoints);
    }

    #[test]
    fn bundled_contacts_are_coincident_and_nonempty() {
        for kind in ScenarioKind::ALL {
            let (model, _, d) = data(kind, 1);
            assert!(!d.contacts.pairs.is_empty(), "{}", kind.name());
            let kin = forward_kinematics(&model, &d.humans[0]).unwrap();
            for &(i, j) in &d.contacts.pairs {
                let h = skin_vertex(&model, &kin.joint_transforms, &d.humans[0], j);
                let o = d.objects[0].apply(&d.objects[0].mesh.vertices[d.contacts.sample_vertices[i]]);
                assert!((h - o).norm() < 1e-9, "{}: pair ({i}, {j}) is {} apart", kind.name(), (h - o).norm());
            }
        }
    }

    #[test]
    fn carry_box_uses_both_palms() {
        let (model, _, d) = data(ScenarioKind::CarryBox, 1);
        let r = joint(&model, "r_wrist").unwrap();
        let l = joint(&model, "l_wrist").unwrap();
        let owner = |v: usize| model.skin_weights()[v][0].0;
        assert!(d.contacts.pairs.iter().any(|&(_, j)| owner(j) == r));
        assert!(d.contacts.pairs.iter().any(|&(_, j)| owner(j) == l));
    }

    #[test]
    fn contacts_are_stable_under_rigid_motion() {
        for kind in ScenarioKind::ALL {
            let model = rig();
            let sc = SyntheticScenario::bundled(kind, &model, 1, 0.0, 0.0, 1).unwrap();
            let w = LossWeights::default();
            let d = generate(&sc, &model, &w).unwrap();
            let g = so3::exp(&Vector3::new(0.3, -1.1, 0.4));
            let shift = Vector3::new(0.5, -0.2, 1.5);
            let mut h = d.humans[0].clone();
            h.root_rotation = so3::log(&(g * so3::exp(&h.root_rotation)));
            h.root_translation = g * h.root_translation + shift;
            let mut o = d.objects[0].clone();
            o.rotation = so3::log(&(g * o.rotation_matrix()));
            o.translation = g * o.translation + shift;
            let gates = contact_gates(&sc.contact, &w, &model, 1.0);
            let (moved, _) = scene_contacts(&model, &h, &o, sc.contact.n_samples, 0, &gates).unwrap();
            assert_eq!(moved, d.contacts, "{}", kind.name());
        }
    }

    #[test]
    fn ground_truth_is_penetration_free() {
        for kind in ScenarioKind::ALL {
            let (model, sc, d) = data(kind, 30);
            let m = evaluate(
                &model,
                &sc.views[..1],
                &d.contacts,
                (&d.humans, &d.objects),
                (&d.humans, &d.objects),
            )
            .unwrap();
            assert_eq!(m.mean_penetration_fraction, 0.0, "{}", kind.name());
            let reg = crate::losses::regularization_terms(&model, &d.humans, Some(&d.objects[..])).unwrap();
            assert_eq!(reg.self_penetration, 0.0, "{}", kind.name());
        }
    }

    #[test]
    fn identical_states_give_zero_errors() {
        let (model, sc, d) = data(ScenarioKind::SitStill, 5);
        let m = evaluate(&model, &sc.views, &d.contacts, (&d.humans, &d.objects), (&d.humans, &d.objects)).unwrap();
        assert_eq!(m.mean_joint_error, 0.0);
        assert_eq!(m.mean_joint_error_aligned, 0.0);
        assert_eq!(m.mean_reprojection_2d, 0.0);
        // The stool is static while the body sways, so only frame 0 is in contact.
        assert!(m.frames[0].contact_distance < 1e-9);
    }

    #[test]
    fn shifted_translation_gives_exact_unaligned_error() {
        let (model, sc, d) = data(ScenarioKind::CarryBox, 4);
        let shifted: Vec<HumanState> = d
            .humans
            .iter()
            .map(|h| HumanState {
                root_translation: h.root_translation + Vector3::new(0.1, 0.0, 0.0),
                ..h.clone()
            })
            .collect();
        let m = evaluate(&model, &sc.views, &d.contacts, (&shifted, &d.objects), (&d.humans, &d.objects)).unwrap();
        assert_relative_eq!(m.mean_joint_error, 0.1, epsilon = 1e-12);
        assert!(m.mean_joint_error_aligned < 1e-12);
    }

    #[test]
    fn random_translation_error_is_bounded() {
        let (model, sc, d) = data(ScenarioKind::MopSweep, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for delta in [0.01, 0.2, 1.0] {
            let moved: Vec<HumanState> = d
                .humans
                .iter()
                .map(|h| HumanState {
                    root_translation: h.root_translation
                        + Vector3::from_fn(|_, _| rng.random_range(-delta..=delta)),
                    ..h.clone()
                })
                .collect();
            let m = evaluate(&model, &sc.views, &d.contacts, (&moved, &d.objects), (&d.humans, &d.objects)).unwrap();
            for fm in &m.frames {
                assert!(fm.joint_error >= 0.0 && fm.joint_error <= delta * 3f64.sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let (model, sc, d) = data(ScenarioKind::CarryBox, 3);
        assert!(evaluate(&model, &sc.views, &d.contacts, (&d.humans[..2], &d.objects[..2]), (&d.humans, &d.objects)).is_err());
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let model = rig();
        assert!(SyntheticScenario::bundled(ScenarioKind::CarryBox, &model, 0, 0.0, 0.0, 0).is_err());
        assert!(SyntheticScenario::bundled(ScenarioKind::CarryBox, &model, 3, 0.0, 1.0, 0).is_err());
        assert!(SyntheticScenario::bundled(ScenarioKind::CarryBox, &model, 3, -1.0, 0.0, 0).is_err());
        assert!(ScenarioKind::from_name("juggle").is_err());
    }

    #[test]
    fn joint_behind_camera_names_frame_and_view() {
        let model = rig();
        let mut sc = SyntheticScenario::bundled(ScenarioKind::CarryBox, &model, 2, 0.0, 0.0, 0).unwrap();
        sc.views.push(Camera::look_at(Vector3::new(0.0, 0.0, 0.05), Vector3::new(0.0, 0.0, 1.0), Vector3::y(), 600.0, [640, 480]).unwrap());
        match generate(&sc, &model, &LossWeights::default()) {
            Err(Error::Scenario(msg)) => assert!(msg.contains("frame 0, view 4"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradient_case_activates_every_term() {
        let case = GradientCase::random(&rig(), 3, 5, 256).unwrap();
        let b = total_loss(&case.scene(), &case.humans, &case.objects, &LossWeights::default()).unwrap();
        assert!(b.body > 0.0 && b.contact > 0.0 && b.regularization > 0.0);
        assert_eq!(case.contacts.sample_vertices.len(), 256);
    }
}
