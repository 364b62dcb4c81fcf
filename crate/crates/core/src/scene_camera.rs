//! Rigid object state, pinhole cameras and normalized-image projection.

use std::sync::Arc;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::contact::vertex_normals;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::so3;

/// Closest admissible camera-frame depth, world units.
pub const Z_MIN: f64 = 1e-4;

/// Sharpness of the softplus depth clamp used during optimization.
const CLAMP_SHARPNESS: f64 = 1.0 / Z_MIN;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub mesh: Arc<TriMesh>,
}

impl ObjectState {
    pub fn new(mesh: Arc<TriMesh>) -> Self {
        ObjectState {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
            mesh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        if !(self.rotation.iter().chain(self.translation.iter()).all(|c| c.is_finite())) {
            return Err(Error::invalid("non-finite object pose"));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        so3::exp(&self.rotation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn canonicalize(&mut self) {
        self.rotation = so3::canonicalize(&self.rotation);
    }
}

/// Posed object vertices with their rotated unit normals (zero where the
/// rest normal is flagged degenerate).
#[derive(Debug, Clone)]
pub struct PosedObject {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

pub fn transform_object(state: &ObjectState) -> Result<PosedObject> {
    state.validate()?;
    let r = state.rotation_matrix();
    let normals = vertex_normals(&state.mesh)?;
    Ok(PosedObject {
        vertices: state
            .mesh
            .vertices
            .iter()
            .map(|v| r * v + state.translation)
            .collect(),
        normals: normals.iter().map(|n| r * n).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: Vector2<f64>,
    pub principal: Vector2<f64>,
    pub image_size: [u32; 2],
    /// World → camera rotation.
    pub rotation: Matrix3<f64>,
    /// World → camera translation.
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        focal: Vector2<f64>,
        principal: Vector2<f64>,
        image_size: [u32; 2],
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            focal,
            principal,
            image_size,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.x > 0.0 && self.focal.y > 0.0) || !self.focal.iter().all(|f| f.is_finite()) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {:?}", self.focal)));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !self.principal.iter().chain(self.translation.iter()).all(|c| c.is_finite()) {
            return Err(Error::invalid("non-finite camera parameter"));
        }
        if !so3::is_rotation(&self.rotation, 1e-9) {
            return Err(Error::invalid("camera extrinsic rotation is not orthonormal"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`. Camera axes follow the image
    /// convention: x right, y down, z forward.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        image_size: [u32; 2],
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera eye coincides with target"))?;
        let down = (-up + forward * up.dot(&forward))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera up vector is parallel to the view direction"))?;
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera::new(
            Vector2::new(focal, focal),
            Vector2::new(image_size[0] as f64 / 2.0, image_size[1] as f64 / 2.0),
            image_size,
            rotation,
            -(rotation * eye),
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    fn size(&self) -> Vector2<f64> {
        Vector2::new(self.image_size[0] as f64, self.image_size[1] as f64)
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn extrinsic_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }
}

/// Exact pinhole projection into normalized image coordinates.
pub fn project(camera: &Camera, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    let pc = camera.to_camera(point);
    if !(pc.z > Z_MIN) {
        return Err(Error::BehindCamera { depth: pc.z, z_min: Z_MIN });
    }
    Ok(normalize(camera, &pc, pc.z))
}

fn normalize(camera: &Camera, pc: &Vector3<f64>, z: f64) -> Vector2<f64> {
    let size = camera.size();
    Vector2::new(
        (camera.focal.x * pc.x / z + camera.principal.x) / size.x,
        (camera.focal.y * pc.y / z + camera.principal.y) / size.y,
    )
}

/// `z_min + softplus(z − z_min)`, exactly `z` once the correction underflows.
fn clamp_depth(z: f64) -> (f64, f64) {
    let x = (z - Z_MIN) * CLAMP_SHARPNESS;
    if x > 40.0 {
        return (z, 1.0);
    }
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    let sigmoid = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (Z_MIN + softplus / CLAMP_SHARPNESS, sigmoid)
}

/// Projection with a smoothly clamped depth; defined for every finite point.
pub fn project_clamped(camera: &Camera, point: &Vector3<f64>) -> Vector2<f64> {
    let pc = camera.to_camera(point);
    normalize(camera, &pc, clamp_depth(pc.z).0)
}

/// [`project_clamped`] with its Jacobian with respect to the world point.
pub fn project_clamped_jacobian(
    camera: &Camera,
    point: &Vector3<f64>,
) -> (Vector2<f64>, Matrix2x3<f64>) {
    let pc = camera.to_camera(point);
    let (z, dz) = clamp_depth(pc.z);
    let size = camera.size();
    let (ax, ay) = (camera.focal.x / size.x, camera.focal.y / size.y);
    let inv_z = 1.0 / z;
    let d_cam = Matrix2x3::new(
        ax * inv_z, 0.0, -ax * pc.x * inv_z * inv_z * dz,
        0.0, ay * inv_z, -ay * pc.y * inv_z * inv_z * dz,
    );
    (normalize(camera, &pc, z), d_cam * camera.rotation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub view_id: usize,
    pub points: Vec<Vector2<f64>>,
    pub confidence: Vec<f64>,
}

impl KeypointFrame {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.confidence.len() {
            return Err(Error::invalid(format!(
                "view {}: {} points but {} confidences",
                self.view_id,
                self.points.len(),
                self.confidence.len()
            )));
        }
        if let Some(c) = self.confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!(
                "view {}: confidence {c} outside [0, 1]",
                self.view_id
            )));
        }
        if self.points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("view {}: non-finite keypoint", self.view_id)));
        }
        Ok(())
    }

    pub fn confident_count(&self) -> usize {
        self.confidence.iter().filter(|&&c| c > 0.0).count()
    }
}
