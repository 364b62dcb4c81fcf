//! Contact-anchor extraction: farthest point sampling of the object
//! surface, exact nearest-neighbour pairing against the human contact
//! candidates, and the normal / proximity validity gates.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_kinematics, skin_vertices, BodyModel, HumanState};
use crate::error::{Error, Result};
use crate::losses::gm_sq;
use crate::mesh::TriMesh;
use crate::scene_camera::ObjectState;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub source_vertex: Vec<usize>,
}

/// Validated (object sample, human vertex) pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContactPairSet {
    /// `(object sample index, human mesh vertex index)`, sorted by sample.
    pub pairs: Vec<(usize, usize)>,
    pub tau_n: f64,
    pub tau_d: f64,
    /// Object mesh vertex behind every sample index.
    pub sample_vertices: Vec<usize>,
}

/// Which sign the normal gate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalConvention {
    /// `1 + n_o·n_h`: zero for opposing normals.
    #[default]
    Antiparallel,
    /// `1 − n_o·n_h`: zero for co-oriented normals.
    Printed,
}

impl NormalConvention {
    pub fn gate_value(self, n_o: &Vector3<f64>, n_h: &Vector3<f64>) -> f64 {
        match self {
            NormalConvention::Antiparallel => 1.0 + n_o.dot(n_h),
            NormalConvention::Printed => 1.0 - n_o.dot(n_h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGates {
    pub tau_n: f64,
    pub tau_d: f64,
    pub sigma_dist: f64,
    pub convention: NormalConvention,
}

impl ContactGates {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=4.0).contains(&self.tau_n) {
            return Err(Error::config(format!("tau_n must lie in [0, 4], got {}", self.tau_n)));
        }
        if !(self.tau_d > 0.0 && self.tau_d < 1.0) {
            return Err(Error::config(format!("tau_d must lie in (0, 1), got {}", self.tau_d)));
        }
        if !(self.sigma_dist > 0.0 && self.sigma_dist.is_finite()) {
            return Err(Error::config(format!("gm_sigma_dist must be positive, got {}", self.sigma_dist)));
        }
        Ok(())
    }
}

/// Human contact candidates: mesh vertex ids with posed positions and normals.
#[derive(Debug, Clone, Copy)]
pub struct HumanCandidates<'a> {
    pub vertex_ids: &'a [usize],
    pub positions: &'a [Vector3<f64>],
    pub normals: &'a [Vector3<f64>],
}

/// Per-pair values behind the gate decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostic {
    pub sample: usize,
    pub human_vertex: usize,
    pub distance: f64,
    pub normal_gate: f64,
    pub proximity_gate: f64,
    pub valid: bool,
}

/// Greedy farthest point sampling starting from `seed_index`.
/// Ties resolve to the lowest index.
pub fn farthest_point_sampling(points: &[Vector3<f64>], n: usize, seed_index: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(Error::invalid(format!(
            "cannot select {n} of {} points",
            points.len()
        )));
    }
    if seed_index >= points.len() {
        return Err(Error::invalid(format!("seed index {seed_index} out of range")));
    }
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; points.len()];
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = seed_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == n {
            break;
        }
        let c = points[current];
        let mut best: Option<(f64, usize)> = None;
        for (k, p) in points.iter().enumerate() {
            if taken[k] {
                continue;
            }
            let d2 = (p - c).norm_squared();
            if d2 < min_d2[k] {
                min_d2[k] = d2;
            }
            if best.is_none_or(|(b, _)| min_d2[k] > b) {
                best = Some((min_d2[k], k));
            }
        }
        current = best.expect("unselected points remain").1;
    }
    Ok(selected)
}

/// Angle-weighted vertex normals, independent of how polygons are split
/// into triangles. Vertices whose incident faces have no area (or cancel
/// out) get a zero normal, which the gates reject.
pub fn vertex_normals(mesh: &TriMesh) -> Result<Vec<Vector3<f64>>> {
    mesh.validate()?;
    let mut acc = vec![Vector3::zeros(); mesh.vertices.len()];
    let mut mass = vec![0.0; mesh.vertices.len()];
    for f in &mesh.faces {
        let p = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
        let Some(n) = (p[1] - p[0]).cross(&(p[2] - p[0])).try_normalize(0.0) else {
            continue;
        };
        for k in 0..3 {
            let angle = (p[(k + 1) % 3] - p[k]).angle(&(p[(k + 2) % 3] - p[k]));
            acc[f[k]] += n * angle;
            mass[f[k]] += angle;
        }
    }
    Ok(acc
        .into_iter()
        .zip(mass)
        .map(|(n, m)| {
            let len = n.norm();
            if m > 0.0 && len > 1e-12 * m {
                n / len
            } else {
                Vector3::zeros()
            }
        })
        .collect())
}

/// FPS over mesh vertices, carrying their normals along.
pub fn sample_surface(
    vertices: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    n: usize,
    seed_index: usize,
) -> Result<SurfaceSamples> {
    if vertices.len() != normals.len() {
        return Err(Error::contract("vertex and normal counts differ"));
    }
    let idx = farthest_point_sampling(vertices, n, seed_index)?;
    Ok(SurfaceSamples {
        points: idx.iter().map(|&i| vertices[i]).collect(),
        normals: idx.iter().map(|&i| normals[i]).collect(),
        source_vertex: idx,
    })
}

/// Exact nearest candidate for every object sample; ties to the lowest
/// candidate index. Returns `(sample, candidate)` pairs.
pub fn nearest_pairs(samples: &SurfaceSamples, human_points: &[Vector3<f64>]) -> Result<Vec<(usize, usize)>> {
    if human_points.is_empty() {
        return Err(Error::invalid("no human contact candidates"));
    }
    if samples.points.is_empty() {
        return Err(Error::invalid("no object samples"));
    }
    Ok(samples
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in human_points.iter().enumerate() {
                let d2 = (p - q).norm_squared();
                if d2 < best.0 {
                    best = (d2, j);
                }
            }
            (i, best.1)
        })
        .collect())
}

pub fn extract_contacts(
    samples: &SurfaceSamples,
    human: HumanCandidates<'_>,
    gates: &ContactGates,
) -> Result<ContactPairSet> {
    Ok(extract_contacts_with_diagnostics(samples, human, gates)?.0)
}

pub fn extract_contacts_with_diagnostics(
    samples: &SurfaceSamples,
    human: HumanCandidates<'_>,
    gates: &ContactGates,
) -> Result<(ContactPairSet, Vec<PairDiagnostic>)> {
    gates.validate()?;
    if human.vertex_ids.len() != human.positions.len() || human.positions.len() != human.normals.len() {
        return Err(Error::contract("candidate ids, positions and normals differ in length"));
    }
    if samples.points.len() != samples.normals.len() || samples.points.len() != samples.source_vertex.len() {
        return Err(Error::contract("sample points, normals and sources differ in length"));
    }
    let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
    if !(samples.points.iter().all(finite)
        && samples.normals.iter().all(finite)
        && human.positions.iter().all(finite)
        && human.normals.iter().all(finite))
    {
        return Err(Error::invalid("non-finite contact geometry"));
    }
    let nearest = nearest_pairs(samples, human.positions)?;
    let mut pairs = Vec::new();
    let mut diagnostics = Vec::with_capacity(nearest.len());
    for (i, j) in nearest {
        let n_o = samples.normals[i];
        let n_h = human.normals[j];
        let distance = (samples.points[i] - human.positions[j]).norm();
        let normal_gate = gates.convention.gate_value(&n_o, &n_h);
        let proximity_gate = gm_sq(distance * distance, gates.sigma_dist);
        let flagged = n_o == Vector3::zeros() || n_h == Vector3::zeros();
        let valid = !flagged && normal_gate < gates.tau_n && proximity_gate < gates.tau_d;
        if valid {
            pairs.push((i, human.vertex_ids[j]));
        }
        diagnostics.push(PairDiagnostic {
            sample: i,
            human_vertex: human.vertex_ids[j],
            distance,
            normal_gate,
            proximity_gate,
            valid,
        });
    }
    Ok((
        ContactPairSet {
            pairs,
            tau_n: gates.tau_n,
            tau_d: gates.tau_d,
            sample_vertices: samples.source_vertex.clone(),
        },
        diagnostics,
    ))
}

/// Contacts between a posed human and a posed object. The object is
/// sampled in its own frame, so the samples do not depend on its pose.
pub fn scene_contacts(
    model: &BodyModel,
    human: &HumanState,
    object: &ObjectState,
    n_samples: usize,
    seed_index: usize,
    gates: &ContactGates,
) -> Result<(ContactPairSet, Vec<PairDiagnostic>)> {
    object.validate()?;
    let kin = forward_kinematics(model, human)?;
    let posed = TriMesh {
        vertices: skin_vertices(model, &kin.joint_transforms, human)?,
        faces: model.faces().to_vec(),
    };
    let human_normals = vertex_normals(&posed)?;
    let ids = model.contact_candidates();
    let positions: Vec<Vector3<f64>> = ids.iter().map(|&v| posed.vertices[v]).collect();
    let normals: Vec<Vector3<f64>> = ids.iter().map(|&v| human_normals[v]).collect();

    let local_normals = vertex_normals(&object.mesh)?;
    let picked = farthest_point_sampling(&object.mesh.vertices, n_samples, seed_index)?;
    let rot = object.rotation_matrix();
    let samples = SurfaceSamples {
        points: picked.iter().map(|&v| object.apply(&object.mesh.vertices[v])).collect(),
        normals: picked.iter().map(|&v| rot * local_normals[v]).collect(),
        source_vertex: picked,
    };
    extract_contacts_with_diagnostics(
        &samples,
        HumanCandidates {
            vertex_ids: ids,
            positions: &positions,
            normals: &normals,
        },
        gates,
    )
}
