//! Adam and the two fitting stages: static multi-view alignment and
//! windowed motion fitting with frozen scale/shape.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, HumanState};
use crate::error::{Error, Result};
use crate::gradients::{FreezeSpec, MotionObjective, Objective, ParamVector, StaticObjective};
use crate::losses::{combine_frames, temporal_smoothness, FrameTerms, LossBreakdown, LossWeights, MotionScene};
use crate::mesh::TriMesh;
use crate::scene_camera::{Camera, KeypointFrame, ObjectState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations_static: usize,
    /// Total budget of the motion stage, both phases included.
    pub iterations_motion: usize,
    /// Relative change of the total loss below which an iteration counts
    /// towards convergence.
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations_static: 3000,
            iterations_motion: 1000,
            convergence_tol: 1e-7,
            seed: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("adam.learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("adam.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("adam.eps must be positive, got {}", self.eps)));
        }
        if self.iterations_static == 0 || self.iterations_motion == 0 {
            return Err(Error::config("adam iteration counts must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::config(format!(
                "adam.convergence_tol must be nonnegative, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Iterations of small relative change needed to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 50;
/// Loss growth over the initial value that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update at 1-based `step`; frozen entries are
/// left untouched, moments included.
pub fn adam_update(
    values: &mut [f64],
    frozen: &[bool],
    grad: &[f64],
    moments: &mut AdamMoments,
    config: &AdamConfig,
    step: u64,
) -> Result<()> {
    let n = values.len();
    if frozen.len() != n || grad.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::contract("Adam state and gradient shapes differ"));
    }
    if step == 0 {
        return Err(Error::contract("Adam step index starts at 1"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient at entry {i}")));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..n {
        if frozen[i] {
            continue;
        }
        let g = grad[i];
        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        values[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

pub fn adam_step(
    params: &mut ParamVector,
    grad: &[f64],
    moments: &mut AdamMoments,
    config: &AdamConfig,
    step: u64,
) -> Result<()> {
    let frozen = params.frozen().to_vec();
    adam_update(&mut params.values, &frozen, grad, moments, config, step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    Converged,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    /// Total loss breakdown at the start of every iteration.
    pub losses: Vec<LossBreakdown>,
    pub wall_time: Duration,
    pub termination: Termination,
    /// Trace index of the returned (best) parameters.
    pub best_index: usize,
    pub final_params: Vec<f64>,
}

impl OptimizationTrace {
    pub fn final_loss(&self) -> LossBreakdown {
        self.losses[self.best_index]
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub result: T,
    pub trace: OptimizationTrace,
}

impl<T> FitOutcome<T> {
    /// Turns a diverged run into an error.
    pub fn into_result(self) -> Result<Self> {
        if self.trace.termination == Termination::Diverged {
            let last = self.trace.losses.last().map_or(f64::NAN, |l| l.total);
            return Err(Error::Diverged(format!(
                "total loss reached {last} after {} iterations",
                self.trace.losses.len()
            )));
        }
        Ok(self)
    }
}

/// Bookkeeping shared by both stages: best-so-far snapshot, convergence
/// streak and divergence test against the first recorded loss.
struct Monitor {
    losses: Vec<LossBreakdown>,
    best: Option<(usize, Vec<f64>)>,
    initial: f64,
    streak: usize,
    tol: f64,
}

enum Verdict {
    Continue,
    Converged,
    Diverged,
}

impl Monitor {
    fn new(tol: f64) -> Self {
        Monitor {
            losses: Vec::new(),
            best: None,
            initial: f64::NAN,
            streak: 0,
            tol,
        }
    }

    fn record(&mut self, loss: LossBreakdown, snapshot: &[f64]) -> Verdict {
        let total = loss.total;
        if self.losses.is_empty() {
            self.initial = total;
        }
        let prev = self.losses.last().map(|l| l.total);
        self.losses.push(loss);
        let idx = self.losses.len() - 1;
        if !total.is_finite() || total > DIVERGENCE_FACTOR * self.initial.max(f64::MIN_POSITIVE) {
            return Verdict::Diverged;
        }
        if self.best.as_ref().is_none_or(|(b, _)| total < self.losses[*b].total) {
            self.best = Some((idx, snapshot.to_vec()));
        }
        if let Some(prev) = prev {
            let rel = (total - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            if rel < self.tol || total == prev {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        if self.streak >= CONVERGENCE_WINDOW {
            Verdict::Converged
        } else {
            Verdict::Continue
        }
    }

    fn finish(self, start: Instant, termination: Termination, current: &[f64]) -> OptimizationTrace {
        let (best_index, final_params) = self
            .best
            .unwrap_or_else(|| (self.losses.len().saturating_sub(1), current.to_vec()));
        OptimizationTrace {
            losses: self.losses,
            wall_time: start.elapsed(),
            termination,
            best_index,
            final_params,
        }
    }
}

/// Plain Adam loop: evaluate, record, step.
pub fn minimize(
    objective: &dyn Objective,
    mut params: ParamVector,
    iterations: usize,
    config: &AdamConfig,
) -> Result<(ParamVector, OptimizationTrace)> {
    config.validate()?;
    let start = Instant::now();
    let mut monitor = Monitor::new(config.convergence_tol);
    let mut moments = AdamMoments::new(params.len());
    let mut termination = Termination::MaxIterations;
    for step in 1..=iterations {
        let loss = objective.evaluate(&params)?;
        match monitor.record(loss, &params.values) {
            Verdict::Diverged => {
                termination = Termination::Diverged;
                break;
            }
            Verdict::Converged => {
                termination = Termination::Converged;
                break;
            }
            Verdict::Continue => {}
        }
        let grad = objective.gradient(&params)?;
        adam_step(&mut params, &grad, &mut moments, config, step as u64)?;
    }
    let trace = monitor.finish(start, termination, &params.values);
    params.values.clone_from(&trace.final_params);
    Ok((params, trace))
}

// ------------------------------------------------------------- static

/// Linear least-squares triangulation of one point from normalized image
/// observations.
pub fn triangulate(observations: &[(&Camera, Vector2<f64>)]) -> Option<Vector3<f64>> {
    if observations.len() < 2 {
        return None;
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (cam, uv) in observations {
        let r = &cam.rotation;
        let t = &cam.translation;
        for axis in 0..2 {
            // (u·W − c)·Z − f·X = 0 in camera coordinates.
            let size = cam.image_size[axis] as f64;
            let a = uv[axis] * size - cam.principal[axis];
            let f = cam.focal[axis];
            let row = r.row(2).transpose() * a - r.row(axis).transpose() * f;
            let rhs = -(t.z * a - t[axis] * f);
            ata += row * row.transpose();
            atb += row * rhs;
        }
    }
    let p = ata.try_inverse()? * atb;
    p.iter().all(|c| c.is_finite()).then_some(p)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Yaw about +y that turns the model's +z towards `target` from `from`.
fn facing_yaw(from: &Vector3<f64>, target: &Vector3<f64>) -> Vector3<f64> {
    let d = target - from;
    Vector3::y() * d.x.atan2(d.z)
}

/// Zero pose, unit scale, facing the first camera; placed at the
/// componentwise median of triangulated keypoints, or 3 units along the
/// first camera's ray through the median keypoint with a single view.
pub fn default_static_init(model: &BodyModel, cameras: &[Camera], views: &[KeypointFrame]) -> Result<HumanState> {
    let first = views
        .iter()
        .find(|v| v.confident_count() > 0)
        .ok_or_else(|| Error::Underconstrained("no view has a confident keypoint".into()))?;
    let cam0 = cameras
        .get(first.view_id)
        .ok_or_else(|| Error::invalid(format!("view {} has no camera", first.view_id)))?;
    let mut points = Vec::new();
    for &(det, _) in model.keypoint_map() {
        let obs: Vec<(&Camera, Vector2<f64>)> = views
            .iter()
            .filter(|v| v.confidence.get(det).is_some_and(|c| *c > 0.0))
            .filter_map(|v| cameras.get(v.view_id).map(|c| (c, v.points[det])))
            .collect();
        if let Some(p) = triangulate(&obs) {
            points.push(p);
        }
    }
    let center = if points.len() >= 4 {
        Vector3::new(
            median(points.iter().map(|p| p.x).collect()),
            median(points.iter().map(|p| p.y).collect()),
            median(points.iter().map(|p| p.z).collect()),
        )
    } else {
        let confident: Vec<usize> = (0..first.points.len()).filter(|&i| first.confidence[i] > 0.0).collect();
        let u = median(confident.iter().map(|&i| first.points[i].x).collect());
        let v = median(confident.iter().map(|&i| first.points[i].y).collect());
        let ray_cam = Vector3::new(
            (u * cam0.image_size[0] as f64 - cam0.principal.x) / cam0.focal.x,
            (v * cam0.image_size[1] as f64 - cam0.principal.y) / cam0.focal.y,
            1.0,
        );
        cam0.center() + cam0.rotation.transpose() * ray_cam.normalize() * 3.0
    };
    let mut state = HumanState::rest(model);
    state.root_rotation = facing_yaw(&center, &cam0.center());
    let kin = crate::body_model::forward_kinematics(model, &state)?;
    let mapped: Vec<Vector3<f64>> = model.keypoint_map().iter().map(|&(_, j)| kin.joint_positions[j]).collect();
    let centroid = mapped.iter().sum::<Vector3<f64>>() / mapped.len() as f64;
    state.root_translation = center - centroid;
    Ok(state)
}

/// Multi-view alignment over scale, root pose and joint rotations; shape
/// stays frozen. Returns the best iterate seen.
pub fn fit_static(
    model: &BodyModel,
    cameras: &[Camera],
    views: &[KeypointFrame],
    init: Option<&HumanState>,
    weights: &LossWeights,
    config: &AdamConfig,
) -> Result<FitOutcome<HumanState>> {
    weights.validate()?;
    config.validate()?;
    if !views.iter().any(|v| v.confident_count() >= 4) {
        return Err(Error::Underconstrained(
            "static fitting needs a view with at least 4 confident keypoints".into(),
        ));
    }
    let init = match init {
        Some(s) => s.clone(),
        None => default_static_init(model, cameras, views)?,
    };
    init.validate(model)?;
    let objective = StaticObjective {
        model,
        cameras,
        views,
        weights: *weights,
    };
    let params = ParamVector::pack(std::slice::from_ref(&init), None, FreezeSpec::STATIC)?;
    let (params, trace) = minimize(&objective, params, config.iterations_static, config)?;
    Ok(FitOutcome {
        result: params.human(0),
        trace,
    })
}

// ------------------------------------------------------------- motion

/// Iterations of the sequential warm-start phase for frame `f`.
fn phase_a_share(budget: usize, frames: usize, f: usize) -> usize {
    budget / frames + usize::from(f < budget % frames)
}

fn single_frame_scene<'a>(scene: &MotionScene<'a>, f: usize) -> MotionScene<'a> {
    MotionScene {
        keypoints: &scene.keypoints[f..f + 1],
        ..*scene
    }
}

/// Windowed fit: frame 0 starts from the static result, then each frame is
/// warm-started from its predecessor and fitted alone (60% of the budget,
/// no smoothness), then all frames are refined jointly (40%).
pub fn fit_motion(
    scene: MotionScene<'_>,
    object: &ObjectState,
    init: &HumanState,
    weights: &LossWeights,
    config: &AdamConfig,
) -> Result<FitOutcome<(Vec<HumanState>, Vec<ObjectState>)>> {
    weights.validate()?;
    config.validate()?;
    let l = scene.frame_count();
    let humans = vec![init.clone(); l];
    let objects = vec![object.clone(); l];
    scene.validate(&humans, &objects)?;
    let mesh: Arc<TriMesh> = object.mesh.clone();
    let start = Instant::now();

    let mut window = ParamVector::pack(&humans, Some(&objects), FreezeSpec::MOTION)?;
    let full = MotionObjective::new(scene, mesh.clone(), *weights)?;
    let mut terms: Vec<FrameTerms> = (0..l).map(|f| full.frame_terms(&window, f)).collect();
    let mut monitor = Monitor::new(config.convergence_tol);
    let mut termination = Termination::MaxIterations;

    let budget = config.iterations_motion;
    let budget_a = budget * 3 / 5;
    let budget_b = budget - budget_a;
    let stride = window.layout().frame_offset(1.min(l)) - window.layout().frame_offset(0);

    'phase_a: for f in 0..l {
        if f > 0 {
            let (prev, cur) = (window.layout().frame_offset(f - 1), window.layout().frame_offset(f));
            let copy = window.values[prev..prev + stride].to_vec();
            window.values[cur..cur + stride].copy_from_slice(&copy);
            terms[f] = full.frame_terms(&window, f);
        }
        let local = MotionObjective::new(single_frame_scene(&scene, f), mesh.clone(), *weights)?;
        let mut params = ParamVector::pack(&[window.human(f)], Some(&[window.object(f, &mesh).unwrap()]), FreezeSpec::MOTION)?;
        let mut moments = AdamMoments::new(params.len());
        let mut local_best: Option<(f64, Vec<f64>)> = None;
        let mut streak = 0;
        let mut prev_local = f64::NAN;
        let offset = window.layout().frame_offset(f);
        for step in 1..=phase_a_share(budget_a, l, f) {
            let t = local.frame_terms(&params, 0);
            terms[f] = t;
            window.values[offset..offset + stride].copy_from_slice(&params.values[params.layout().frame_offset(0)..]);
            let loss = window_breakdown(&window, &terms, &mesh, weights);
            if let Verdict::Diverged = monitor.record(loss, &window.values) {
                termination = Termination::Diverged;
                break 'phase_a;
            }
            let local_total = single_frame_total(&t, weights);
            if local_best.as_ref().is_none_or(|(b, _)| local_total < *b) {
                local_best = Some((local_total, params.values.clone()));
            }
            let rel = (local_total - prev_local).abs() / prev_local.abs().max(f64::MIN_POSITIVE);
            streak = if rel < config.convergence_tol || local_total == prev_local { streak + 1 } else { 0 };
            prev_local = local_total;
            if streak >= CONVERGENCE_WINDOW {
                break;
            }
            let grad = local.gradient(&params)?;
            adam_step(&mut params, &grad, &mut moments, config, step as u64)?;
        }
        if let Some((_, best)) = local_best {
            params.values = best;
        }
        window.values[offset..offset + stride].copy_from_slice(&params.values[params.layout().frame_offset(0)..]);
        terms[f] = full.frame_terms(&window, f);
    }

    if termination != Termination::Diverged {
        let mut moments = AdamMoments::new(window.len());
        for step in 1..=budget_b {
            terms = (0..l).map(|f| full.frame_terms(&window, f)).collect();
            let loss = window_breakdown(&window, &terms, &mesh, weights);
            match monitor.record(loss, &window.values) {
                Verdict::Diverged => {
                    termination = Termination::Diverged;
                    break;
                }
                Verdict::Converged => {
                    termination = Termination::Converged;
                    break;
                }
                Verdict::Continue => {}
            }
            let grad = full.gradient(&window)?;
            adam_step(&mut window, &grad, &mut moments, config, step as u64)?;
        }
    }

    let trace = monitor.finish(start, termination, &window.values);
    window.values.clone_from(&trace.final_params);
    let humans = window.humans();
    let objects = window.objects(&mesh).expect("window has an object");
    Ok(FitOutcome {
        result: (humans, objects),
        trace,
    })
}

fn window_breakdown(window: &ParamVector, terms: &[FrameTerms], mesh: &Arc<TriMesh>, weights: &LossWeights) -> LossBreakdown {
    let humans = window.humans();
    let objects = window.objects(mesh).expect("window has an object");
    combine_frames(terms, temporal_smoothness(&humans, Some(&objects)), weights)
}

fn single_frame_total(t: &FrameTerms, weights: &LossWeights) -> f64 {
    combine_frames(std::slice::from_ref(t), 0.0, weights).total
}
