//! File formats. Every document is JSON with a top-level
//! `format_version` and rejects unknown keys. Floats are written in the
//! shortest form that parses back to the same binary64 value.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, HumanState, KinematicTree};
use crate::contact::{ContactPairSet, NormalConvention, PairDiagnostic};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::mesh::TriMesh;
use crate::optimizer::AdamConfig;
use crate::scene_camera::{Camera, KeypointFrame, ObjectState};
use crate::synthetic::{FrameMetrics, Metrics};

pub const FORMAT_VERSION: u32 = 1;

fn schema(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `text`, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize");
    s.push('\n');
    s
}

/// Checks `format_version` before the strict schema so that a newer file
/// reports a version error rather than a confusing field error.
fn parse_versioned<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| schema(path, "$", format!("not valid JSON: {e}")))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| schema(path, "format_version", "missing"))?;
    match version.as_u64() {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: v.min(u32::MAX as u64) as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(schema(path, "format_version", "expected an unsigned integer")),
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        schema(path, field, e.into_inner().to_string())
    })
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn a3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn check_finite(path: &Path, field: impl Fn() -> String, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(schema(path, field(), "non-finite number"))
    }
}

// ---------------------------------------------------------------- rig

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigDoc {
    format_version: u32,
    joints: Vec<JointDoc>,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    weights: Vec<WeightDoc>,
    contact_candidates: Vec<usize>,
    /// `[detector index, joint index]`.
    keypoint_map: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    shape_dirs: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    parent: Option<usize>,
    offset: [f64; 3],
    radius: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightDoc {
    vertex: usize,
    /// `[joint, weight]`.
    influences: Vec<(usize, f64)>,
}

pub fn parse_rig(text: &str, path: &Path) -> Result<BodyModel> {
    let doc: RigDoc = parse_versioned(text, path)?;
    for (k, j) in doc.joints.iter().enumerate() {
        check_finite(path, || format!("joints[{k}]"), &[j.offset[0], j.offset[1], j.offset[2], j.radius])?;
    }
    for (v, p) in doc.vertices.iter().enumerate() {
        check_finite(path, || format!("vertices[{v}]"), p)?;
    }
    let tree = KinematicTree::new(
        doc.joints.iter().map(|j| j.parent).collect(),
        doc.joints.iter().map(|j| v3(&j.offset)).collect(),
        doc.joints.iter().map(|j| j.name.clone()).collect(),
    )
    .map_err(|e| schema(path, "joints", e.to_string()))?;

    let nv = doc.vertices.len();
    let mut rows: Vec<Option<Vec<(usize, f64)>>> = vec![None; nv];
    for (i, w) in doc.weights.iter().enumerate() {
        let slot = rows
            .get_mut(w.vertex)
            .ok_or_else(|| schema(path, format!("weights[{i}].vertex"), format!("vertex {} out of range", w.vertex)))?;
        if slot.is_some() {
            return Err(schema(path, format!("weights[{i}].vertex"), format!("vertex {} listed twice", w.vertex)));
        }
        *slot = Some(w.influences.clone());
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(v, r)| r.ok_or_else(|| schema(path, "weights", format!("vertex {v} has no weights"))))
        .collect::<Result<Vec<_>>>()?;

    let mesh = TriMesh::new(doc.vertices.iter().map(v3).collect(), doc.faces.clone())
        .map_err(|e| schema(path, "faces", e.to_string()))?;
    let shape_dirs = doc
        .shape_dirs
        .iter()
        .map(|d| d.iter().map(v3).collect())
        .collect();
    BodyModel::new(
        tree,
        mesh,
        rows,
        shape_dirs,
        doc.contact_candidates.clone(),
        doc.keypoint_map.iter().map(|m| (m[0], m[1])).collect(),
        doc.joints.iter().map(|j| j.radius).collect(),
    )
    .map_err(|e| schema(path, "$", e.to_string()))
}

pub fn load_rig(path: &Path) -> Result<BodyModel> {
    parse_rig(&read_text(path)?, path)
}

pub fn rig_to_string(model: &BodyModel) -> String {
    let tree = model.tree();
    let doc = RigDoc {
        format_version: FORMAT_VERSION,
        joints: (0..tree.joint_count())
            .map(|k| JointDoc {
                name: tree.joint_name(k).to_string(),
                parent: tree.parent(k),
                offset: a3(tree.rest_offset(k)),
                radius: model.bone_radii()[k],
            })
            .collect(),
        vertices: model.template().vertices.iter().map(a3).collect(),
        faces: model.faces().to_vec(),
        weights: model
            .skin_weights()
            .iter()
            .enumerate()
            .map(|(vertex, row)| WeightDoc {
                vertex,
                influences: row.clone(),
            })
            .collect(),
        contact_candidates: model.contact_candidates().to_vec(),
        keypoint_map: model.keypoint_map().iter().map(|&(d, j)| [d, j]).collect(),
        shape_dirs: model
            .shape_dirs()
            .iter()
            .map(|d| d.iter().map(a3).collect())
            .collect(),
    };
    to_json(&doc)
}

pub fn save_rig(path: &Path, model: &BodyModel) -> Result<()> {
    write_text(path, &rig_to_string(model))
}

// ------------------------------------------------------------ cameras

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasDoc {
    format_version: u32,
    cameras: Vec<CameraDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDoc {
    focal: [f64; 2],
    principal: [f64; 2],
    image_size: [u32; 2],
    /// Row-major 3×4 `[R | t]`, world to camera.
    extrinsic: [f64; 12],
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let doc: CamerasDoc = parse_versioned(text, path)?;
    if doc.cameras.is_empty() {
        return Err(schema(path, "cameras", "at least one camera is required"));
    }
    doc.cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let e = &c.extrinsic;
            check_finite(path, || format!("cameras[{i}].extrinsic"), e)?;
            let rotation = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
            Camera::new(
                Vector2::new(c.focal[0], c.focal[1]),
                Vector2::new(c.principal[0], c.principal[1]),
                c.image_size,
                rotation,
                Vector3::new(e[3], e[7], e[11]),
            )
            .map_err(|err| schema(path, format!("cameras[{i}]"), err.to_string()))
        })
        .collect()
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    parse_cameras(&read_text(path)?, path)
}

pub fn cameras_to_string(cameras: &[Camera]) -> String {
    to_json(&CamerasDoc {
        format_version: FORMAT_VERSION,
        cameras: cameras
            .iter()
            .map(|c| CameraDoc {
                focal: [c.focal.x, c.focal.y],
                principal: [c.principal.x, c.principal.y],
                image_size: c.image_size,
                extrinsic: c.extrinsic_rows(),
            })
            .collect(),
    })
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_text(path, &cameras_to_string(cameras))
}

// ---------------------------------------------------------- keypoints

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointsDoc {
    format_version: u32,
    /// Frames, each an array of views.
    frames: Vec<Vec<ViewDoc>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewDoc {
    view_id: usize,
    points: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

pub fn parse_keypoints(text: &str, path: &Path) -> Result<Vec<Vec<KeypointFrame>>> {
    let doc: KeypointsDoc = parse_versioned(text, path)?;
    let mut frames = Vec::with_capacity(doc.frames.len());
    for (f, views) in doc.frames.iter().enumerate() {
        let mut out = Vec::with_capacity(views.len());
        for (v, view) in views.iter().enumerate() {
            let at = |field: &str| format!("frames[{f}][{v}].{field}");
            if view.points.len() != view.confidence.len() {
                return Err(schema(path, at("confidence"), "length differs from points"));
            }
            for (i, c) in view.confidence.iter().enumerate() {
                if !(0.0..=1.0).contains(c) {
                    return Err(schema(path, format!("{}[{i}]", at("confidence")), format!("{c} is outside [0, 1]")));
                }
            }
            for (i, p) in view.points.iter().enumerate() {
                check_finite(path, || format!("{}[{i}]", at("points")), p)?;
            }
            out.push(KeypointFrame {
                view_id: view.view_id,
                points: view.points.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
                confidence: view.confidence.clone(),
            });
        }
        frames.push(out);
    }
    Ok(frames)
}

pub fn load_keypoints(path: &Path) -> Result<Vec<Vec<KeypointFrame>>> {
    parse_keypoints(&read_text(path)?, path)
}

pub fn keypoints_to_string(frames: &[Vec<KeypointFrame>]) -> String {
    to_json(&KeypointsDoc {
        format_version: FORMAT_VERSION,
        frames: frames
            .iter()
            .map(|views| {
                views
                    .iter()
                    .map(|k| ViewDoc {
                        view_id: k.view_id,
                        points: k.points.iter().map(|p| [p.x, p.y]).collect(),
                        confidence: k.confidence.clone(),
                    })
                    .collect()
            })
            .collect(),
    })
}

pub fn save_keypoints(path: &Path, frames: &[Vec<KeypointFrame>]) -> Result<()> {
    write_text(path, &keypoints_to_string(frames))
}

// --------------------------------------------------------- parameters

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl ObjectPose {
    pub fn of(state: &ObjectState) -> Self {
        ObjectPose {
            rotation: state.rotation,
            translation: state.translation,
        }
    }

    pub fn with_mesh(&self, mesh: &Arc<TriMesh>) -> ObjectState {
        ObjectState {
            rotation: self.rotation,
            translation: self.translation,
            mesh: mesh.clone(),
        }
    }
}

/// Per-frame fitted parameters; the object is present in every frame or
/// in none.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSequence {
    pub humans: Vec<HumanState>,
    pub objects: Option<Vec<ObjectPose>>,
}

impl ParamSequence {
    pub fn new(humans: Vec<HumanState>, objects: Option<&[ObjectState]>) -> Self {
        ParamSequence {
            humans,
            objects: objects.map(|o| o.iter().map(ObjectPose::of).collect()),
        }
    }

    pub fn object_states(&self, mesh: &Arc<TriMesh>) -> Option<Vec<ObjectState>> {
        self.objects
            .as_ref()
            .map(|o| o.iter().map(|p| p.with_mesh(mesh)).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    format_version: u32,
    frames: Vec<FrameDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    human: HumanDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object: Option<ObjectPoseDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HumanDoc {
    scale: f64,
    root_rot: [f64; 3],
    root_trans: [f64; 3],
    joint_rots: Vec<[f64; 3]>,
    #[serde(default)]
    shape: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectPoseDoc {
    rot: [f64; 3],
    trans: [f64; 3],
}

pub fn parse_params(text: &str, path: &Path) -> Result<ParamSequence> {
    let doc: ParamsDoc = parse_versioned(text, path)?;
    if doc.frames.is_empty() {
        return Err(schema(path, "frames", "at least one frame is required"));
    }
    let with_object = doc.frames[0].object.is_some();
    let mut humans = Vec::with_capacity(doc.frames.len());
    let mut objects = Vec::new();
    for (f, frame) in doc.frames.iter().enumerate() {
        let h = &frame.human;
        let at = |field: &str| format!("frames[{f}].human.{field}");
        if !(h.scale.is_finite() && h.scale > 0.0) {
            return Err(schema(path, at("scale"), format!("must be positive, got {}", h.scale)));
        }
        check_finite(path, || at("root_rot"), &h.root_rot)?;
        check_finite(path, || at("root_trans"), &h.root_trans)?;
        check_finite(path, || at("shape"), &h.shape)?;
        for (k, r) in h.joint_rots.iter().enumerate() {
            check_finite(path, || format!("{}[{k}]", at("joint_rots")), r)?;
        }
        humans.push(HumanState {
            scale: h.scale,
            root_rotation: v3(&h.root_rot),
            root_translation: v3(&h.root_trans),
            joint_rotations: h.joint_rots.iter().map(v3).collect(),
            shape_coeffs: h.shape.clone(),
        });
        match (&frame.object, with_object) {
            (Some(o), true) => {
                check_finite(path, || format!("frames[{f}].object"), &[o.rot, o.trans].concat())?;
                objects.push(ObjectPose {
                    rotation: v3(&o.rot),
                    translation: v3(&o.trans),
                });
            }
            (None, false) => {}
            _ => {
                return Err(schema(
                    path,
                    format!("frames[{f}].object"),
                    "object must be present in every frame or in none",
                ))
            }
        }
    }
    Ok(ParamSequence {
        humans,
        objects: with_object.then_some(objects),
    })
}

pub fn load_params(path: &Path) -> Result<ParamSequence> {
    parse_params(&read_text(path)?, path)
}

pub fn params_to_string(seq: &ParamSequence) -> String {
    to_json(&ParamsDoc {
        format_version: FORMAT_VERSION,
        frames: seq
            .humans
            .iter()
            .enumerate()
            .map(|(f, h)| FrameDoc {
                human: HumanDoc {
                    scale: h.scale,
                    root_rot: a3(&h.root_rotation),
                    root_trans: a3(&h.root_translation),
                    joint_rots: h.joint_rotations.iter().map(a3).collect(),
                    shape: h.shape_coeffs.clone(),
                },
                object: seq.objects.as_ref().map(|o| ObjectPoseDoc {
                    rot: a3(&o[f].rotation),
                    trans: a3(&o[f].translation),
                }),
            })
            .collect(),
    })
}

pub fn save_params(path: &Path, seq: &ParamSequence) -> Result<()> {
    write_text(path, &params_to_string(seq))
}

// ----------------------------------------------------------- contacts

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactsDoc {
    format_version: u32,
    tau_n: f64,
    tau_d: f64,
    /// `[object sample, human vertex]`.
    pairs: Vec<[usize; 2]>,
    /// Object mesh vertex behind each sample index.
    sample_vertices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    diagnostics: Vec<PairDiagnostic>,
}

pub fn parse_contacts(text: &str, path: &Path) -> Result<ContactPairSet> {
    let doc: ContactsDoc = parse_versioned(text, path)?;
    for (k, p) in doc.pairs.iter().enumerate() {
        if p[0] >= doc.sample_vertices.len() {
            return Err(schema(path, format!("pairs[{k}]"), format!("sample {} out of range", p[0])));
        }
    }
    check_finite(path, || "tau_n".into(), &[doc.tau_n])?;
    check_finite(path, || "tau_d".into(), &[doc.tau_d])?;
    Ok(ContactPairSet {
        pairs: doc.pairs.iter().map(|p| (p[0], p[1])).collect(),
        tau_n: doc.tau_n,
        tau_d: doc.tau_d,
        sample_vertices: doc.sample_vertices,
    })
}

pub fn load_contacts(path: &Path) -> Result<ContactPairSet> {
    parse_contacts(&read_text(path)?, path)
}

pub fn contacts_to_string(set: &ContactPairSet, diagnostics: &[PairDiagnostic]) -> String {
    to_json(&ContactsDoc {
        format_version: FORMAT_VERSION,
        tau_n: set.tau_n,
        tau_d: set.tau_d,
        pairs: set.pairs.iter().map(|&(i, j)| [i, j]).collect(),
        sample_vertices: set.sample_vertices.clone(),
        diagnostics: diagnostics.to_vec(),
    })
}

pub fn save_contacts(path: &Path, set: &ContactPairSet, diagnostics: &[PairDiagnostic]) -> Result<()> {
    write_text(path, &contacts_to_string(set, diagnostics))
}

// ------------------------------------------------------------- object

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    format_version: u32,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    rotation: [f64; 3],
    translation: [f64; 3],
}

pub fn parse_object(text: &str, path: &Path) -> Result<ObjectState> {
    let doc: ObjectDoc = parse_versioned(text, path)?;
    for (v, p) in doc.vertices.iter().enumerate() {
        check_finite(path, || format!("vertices[{v}]"), p)?;
    }
    check_finite(path, || "rotation".into(), &doc.rotation)?;
    check_finite(path, || "translation".into(), &doc.translation)?;
    let mesh = TriMesh::new(doc.vertices.iter().map(v3).collect(), doc.faces)
        .map_err(|e| schema(path, "faces", e.to_string()))?;
    Ok(ObjectState {
        rotation: v3(&doc.rotation),
        translation: v3(&doc.translation),
        mesh: Arc::new(mesh),
    })
}

pub fn load_object(path: &Path) -> Result<ObjectState> {
    parse_object(&read_text(path)?, path)
}

pub fn object_to_string(object: &ObjectState) -> String {
    to_json(&ObjectDoc {
        format_version: FORMAT_VERSION,
        vertices: object.mesh.vertices.iter().map(a3).collect(),
        faces: object.mesh.faces.clone(),
        rotation: a3(&object.rotation),
        translation: a3(&object.translation),
    })
}

pub fn save_object(path: &Path, object: &ObjectState) -> Result<()> {
    write_text(path, &object_to_string(object))
}

// ------------------------------------------------------------ metrics

pub const METRICS_HEADER: &str = "iteration,body,contact,penetration,regularization,total";

/// One row per iteration, numbered from 1.
pub fn metrics_to_csv(rows: &[LossBreakdown]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            r.body,
            r.contact,
            r.penetration,
            r.regularization,
            r.total
        ));
    }
    s
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(schema(path, "header", format!("expected `{METRICS_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(schema(path, format!("row {}", row + 1), "expected 6 columns"));
            }
            let num = |c: usize| {
                cells[c]
                    .parse::<f64>()
                    .map_err(|e| schema(path, format!("row {} column {c}", row + 1), e.to_string()))
            };
            Ok(LossBreakdown {
                body: num(1)?,
                contact: num(2)?,
                penetration: num(3)?,
                regularization: num(4)?,
                total: num(5)?,
            })
        })
        .collect()
}

pub fn save_metrics_csv(path: &Path, rows: &[LossBreakdown]) -> Result<()> {
    write_text(path, &metrics_to_csv(rows))
}

pub fn load_metrics_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    parse_metrics_csv(&read_text(path)?, path)
}

// ------------------------------------------------------- eval metrics

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalDoc {
    format_version: u32,
    metrics: Metrics,
}

pub fn eval_metrics_to_string(metrics: &Metrics) -> String {
    to_json(&EvalDoc {
        format_version: FORMAT_VERSION,
        metrics: metrics.clone(),
    })
}

pub fn parse_eval_metrics(text: &str, path: &Path) -> Result<Metrics> {
    Ok(parse_versioned::<EvalDoc>(text, path)?.metrics)
}

pub fn save_eval_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    write_text(path, &eval_metrics_to_string(metrics))
}

pub fn load_eval_metrics(path: &Path) -> Result<Metrics> {
    parse_eval_metrics(&read_text(path)?, path)
}

pub const FRAME_METRICS_HEADER: &str =
    "frame,joint_error,joint_error_aligned,reprojection_2d,contact_distance,penetration_fraction,penetration_depth";

pub fn frame_metrics_csv(metrics: &Metrics) -> String {
    let mut s = String::from(FRAME_METRICS_HEADER);
    s.push('\n');
    for m in &metrics.frames {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.frame,
            m.joint_error,
            m.joint_error_aligned,
            m.reprojection_2d,
            m.contact_distance,
            m.penetration_fraction,
            m.penetration_depth
        ));
    }
    s
}

pub fn parse_frame_metrics_csv(text: &str, path: &Path) -> Result<Vec<FrameMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(FRAME_METRICS_HEADER) {
        return Err(schema(path, "header", format!("expected `{FRAME_METRICS_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(schema(path, format!("row {}", row + 1), "expected 7 columns"));
            }
            let num = |c: usize| {
                cells[c]
                    .parse::<f64>()
                    .map_err(|e| schema(path, format!("row {} column {c}", row + 1), e.to_string()))
            };
            Ok(FrameMetrics {
                frame: cells[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| schema(path, format!("row {} column 0", row + 1), e.to_string()))?,
                joint_error: num(1)?,
                joint_error_aligned: num(2)?,
                reprojection_2d: num(3)?,
                contact_distance: num(4)?,
                penetration_fraction: num(5)?,
                penetration_depth: num(6)?,
            })
        })
        .collect()
}

// ------------------------------------------------------------- config

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contacts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    /// Object surface samples `N_o`.
    pub n_samples: usize,
    pub tau_n: f64,
    pub tau_d: f64,
    pub seed_index: usize,
    pub normal_convention: NormalConvention,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig {
            n_samples: 256,
            tau_n: 0.3,
            tau_d: 0.25,
            seed_index: 0,
            normal_convention: NormalConvention::Antiparallel,
        }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("contact.n_samples must be at least 1"));
        }
        if !(0.0..=4.0).contains(&self.tau_n) {
            return Err(Error::config(format!("contact.tau_n must lie in [0, 4], got {}", self.tau_n)));
        }
        if !(self.tau_d > 0.0 && self.tau_d < 1.0) {
            return Err(Error::config(format!("contact.tau_d must lie in (0, 1), got {}", self.tau_d)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Static,
    Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub contact: ContactConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            paths: PathsConfig::default(),
            weights: LossWeights::default(),
            contact: ContactConfig::default(),
            adam: AdamConfig::default(),
            stage: None,
        }
    }
}

impl RunConfig {
    /// Range checks plus existence of every referenced input path.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.contact.validate()?;
        self.adam.validate()?;
        let p = &self.paths;
        for (name, path) in [
            ("rig", &p.rig),
            ("cameras", &p.cameras),
            ("keypoints", &p.keypoints),
            ("contacts", &p.contacts),
            ("object", &p.object),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::config(format!("paths.{name}: {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

impl PathsConfig {
    /// Joins relative paths onto `base`.
    pub fn resolve(&mut self, base: &Path) {
        for path in [
            &mut self.rig,
            &mut self.cameras,
            &mut self.keypoints,
            &mut self.contacts,
            &mut self.object,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

/// Relative paths inside a config are taken relative to the config file.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut config: RunConfig = parse_versioned(text, path)?;
    config.paths.resolve(path.parent().unwrap_or(Path::new("")));
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_text(path)?, path)
}

pub fn config_to_string(config: &RunConfig) -> String {
    to_json(config)
}
