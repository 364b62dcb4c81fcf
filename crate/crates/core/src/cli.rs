//! Command-line surface: `synth`, `fit-static`, `fit-motion`,
//! `extract-contacts`, `eval` and `check-grad`.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a fit
//! diverges or a tolerance check fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::body_model::{forward_kinematics, skin_vertices, BodyModel, HumanState};
use crate::contact::scene_contacts;
use crate::error::{Error, Result};
use crate::gradients::{finite_difference_check, FdReport, MotionObjective, Objective, ParamVector};
use crate::io::{self, ContactConfig, ParamSequence, PathsConfig, RunConfig, Stage, FORMAT_VERSION};
use crate::losses::{LossBreakdown, LossWeights, MotionScene};
use crate::mesh::to_obj;
use crate::optimizer::{fit_motion, fit_static, OptimizationTrace, Termination};
use crate::scene_camera::{transform_object, Camera, KeypointFrame, ObjectState};
use crate::synthetic::{contact_gates, evaluate, generate, GradientCase, ScenarioKind, SyntheticScenario};

/// Environment variable capping worker threads; 0 or unset means one per core.
pub const THREADS_ENV: &str = "ANCHORFIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "anchorfit", version, about = "Fit an articulated body and a rigid object to 2D keypoints and contact anchors")]
pub struct Cli {
    /// Fixed-order reductions. Parallel work is always reduced in frame
    /// order, so results do not depend on this or on the thread count.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set, value_name = "BOOL")]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario with ground truth and a run config.
    Synth(SynthArgs),
    /// Fit one frame to multi-view keypoints.
    FitStatic(FitStaticArgs),
    /// Track a sequence from one view, anchored by contacts.
    FitMotion(FitMotionArgs),
    /// Gate object samples against human contact candidates.
    ExtractContacts(ExtractArgs),
    /// Compare recovered parameters with ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random instances.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// carry-box, sit-still or mop-sweep.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    /// Keypoint noise, normalized image units.
    #[arg(long, default_value_t = 0.005)]
    pub noise: f64,
    /// Probability that a keypoint is dropped.
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rig file; the bundled 18-joint rig by default.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitStaticArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Keypoint frame to fit.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Parameter file whose first human initializes the fit.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Also write posed meshes as OBJ.
    #[arg(long)]
    pub obj: bool,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitMotionArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Static fit result; frame 0 starts from its human and object.
    #[arg(long)]
    pub init: PathBuf,
    /// Camera whose keypoints drive the fit.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long)]
    pub obj: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Parameter file holding the human and object poses.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Contact file to write; `<output_dir>/contacts.json` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub recovered: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Cameras for the 2D error; all cameras by default.
    #[arg(long = "view")]
    pub views: Vec<usize>,
    /// Metrics file; a per-frame CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 100)]
    pub configs: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Maximum absolute error on entries too small for a relative test.
    #[arg(long, default_value_t = 1e-7)]
    pub small_tol: f64,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Worst entries per configuration, as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Scale the analytic gradient by 1.01 to exercise the failure path.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

/// What a finished command reports.
#[derive(Debug)]
enum Outcome {
    Success(String),
    /// Divergence or a failed tolerance; exit code 2.
    Failure(String),
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(Outcome::Success(line)) => {
            println!("{line}");
            0
        }
        Ok(Outcome::Failure(line)) => {
            println!("{line}");
            2
        }
        Err(e @ Error::Diverged(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a nonnegative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    // The global pool can only be set once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Synth(a) => synth(a),
        Command::FitStatic(a) => fit_static_cmd(a),
        Command::FitMotion(a) => fit_motion_cmd(a),
        Command::ExtractContacts(a) => extract_contacts_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::CheckGrad(a) => check_grad_cmd(a),
    }
}

fn load_model(path: Option<&Path>) -> Result<BodyModel> {
    match path {
        Some(p) => io::load_rig(p),
        None => Ok(BodyModel::rig18()),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::config(format!("paths.{name} is required for this command")))
}

fn output_dir(config: &RunConfig, over: Option<PathBuf>) -> PathBuf {
    over.or_else(|| config.paths.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::MaxIterations => "max-iterations",
        Termination::Converged => "converged",
        Termination::Diverged => "diverged",
    }
}

fn fit_summary(stage: &str, trace: &OptimizationTrace) -> Outcome {
    let line = format!(
        "{stage}: final loss {:.6e} ({}, {} iterations, {:.2} s)",
        trace.final_loss().total,
        termination_name(trace.termination),
        trace.losses.len(),
        trace.wall_time.as_secs_f64()
    );
    if trace.termination == Termination::Diverged {
        Outcome::Failure(line)
    } else {
        Outcome::Success(line)
    }
}

fn write_posed_obj(dir: &Path, tag: &str, model: &BodyModel, human: &HumanState, object: Option<&ObjectState>) -> Result<()> {
    let kin = forward_kinematics(model, human)?;
    let vertices = skin_vertices(model, &kin.joint_transforms, human)?;
    io::write_text(&dir.join(format!("human_{tag}.obj")), &to_obj(&vertices, model.faces()))?;
    if let Some(o) = object {
        let posed = transform_object(o)?;
        io::write_text(&dir.join(format!("object_{tag}.obj")), &to_obj(&posed.vertices, &o.mesh.faces))?;
    }
    Ok(())
}

// ------------------------------------------------------------ synth

fn synth(a: SynthArgs) -> Result<Outcome> {
    let kind = ScenarioKind::from_name(&a.scenario)?;
    let model = load_model(a.rig.as_deref())?;
    let scenario = SyntheticScenario::bundled(kind, &model, a.frames, a.noise, a.occlusion, a.seed)?;
    let weights = LossWeights::default();
    let data = generate(&scenario, &model, &weights)?;
    let out = &a.out;
    io::save_rig(&out.join("rig.json"), &model)?;
    io::save_cameras(&out.join("cameras.json"), &scenario.views)?;
    io::save_keypoints(&out.join("keypoints.json"), &data.keypoints)?;
    io::save_params(&out.join("truth.json"), &ParamSequence::new(data.humans.clone(), Some(&data.objects)))?;
    io::save_contacts(&out.join("contacts.json"), &data.contacts, &data.diagnostics)?;
    io::save_object(&out.join("object.json"), &data.objects[0])?;
    let config = RunConfig {
        format_version: FORMAT_VERSION,
        paths: PathsConfig {
            rig: Some("rig.json".into()),
            cameras: Some("cameras.json".into()),
            keypoints: Some("keypoints.json".into()),
            contacts: Some("contacts.json".into()),
            object: Some("object.json".into()),
            output_dir: Some("fit".into()),
        },
        weights,
        contact: scenario.contact,
        adam: Default::default(),
        stage: Some(Stage::Motion),
    };
    io::write_text(&out.join("config.json"), &io::config_to_string(&config))?;
    Ok(Outcome::Success(format!(
        "synth {}: {} frames, {} views, {} contact pairs -> {}",
        kind.name(),
        a.frames,
        scenario.views.len(),
        data.contacts.pairs.len(),
        out.display()
    )))
}

// ------------------------------------------------------- fit-static

fn fit_static_cmd(a: FitStaticArgs) -> Result<Outcome> {
    let config = io::load_config(&a.config)?;
    let model = load_model(config.paths.rig.as_deref())?;
    let cameras = io::load_cameras(required(&config.paths.cameras, "cameras")?)?;
    let keypoints = io::load_keypoints(required(&config.paths.keypoints, "keypoints")?)?;
    let views = keypoints.get(a.frame).ok_or_else(|| {
        Error::invalid(format!("keypoint file has {} frames, frame {} requested", keypoints.len(), a.frame))
    })?;
    let init = match &a.init {
        Some(p) => Some(first_human(p)?),
        None => None,
    };
    let object = match &config.paths.object {
        Some(p) => Some(io::load_object(p)?),
        None => None,
    };
    let outcome = fit_static(&model, &cameras, views, init.as_ref(), &config.weights, &config.adam)?;
    let dir = output_dir(&config, a.out);
    let seq = ParamSequence::new(vec![outcome.result.clone()], object.as_ref().map(std::slice::from_ref));
    io::save_params(&dir.join("static_params.json"), &seq)?;
    io::save_metrics_csv(&dir.join("static_metrics.csv"), &outcome.trace.losses)?;
    if a.obj {
        write_posed_obj(&dir, "static", &model, &outcome.result, object.as_ref())?;
    }
    Ok(fit_summary("fit-static", &outcome.trace))
}

fn first_human(path: &Path) -> Result<HumanState> {
    io::load_params(path)?
        .humans
        .into_iter()
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: parameter file has no frames", path.display())))
}

// ------------------------------------------------------- fit-motion

fn view_keypoints(keypoints: &[Vec<KeypointFrame>], view: usize, cameras: &[Camera]) -> Result<Vec<Vec<KeypointFrame>>> {
    if view >= cameras.len() {
        return Err(Error::invalid(format!("view {view} has no camera ({} cameras)", cameras.len())));
    }
    keypoints
        .iter()
        .enumerate()
        .map(|(f, views)| {
            let picked: Vec<KeypointFrame> = views.iter().filter(|k| k.view_id == view).cloned().collect();
            if picked.is_empty() {
                Err(Error::invalid(format!("frame {f} has no keypoints for view {view}")))
            } else {
                Ok(picked)
            }
        })
        .collect()
}

fn fit_motion_cmd(a: FitMotionArgs) -> Result<Outcome> {
    let config = io::load_config(&a.config)?;
    let model = load_model(config.paths.rig.as_deref())?;
    let cameras = io::load_cameras(required(&config.paths.cameras, "cameras")?)?;
    let all = io::load_keypoints(required(&config.paths.keypoints, "keypoints")?)?;
    let keypoints = view_keypoints(&all, a.view, &cameras)?;
    let contacts = io::load_contacts(required(&config.paths.contacts, "contacts")?)?;
    let mut object = io::load_object(required(&config.paths.object, "object")?)?;
    let init = io::load_params(&a.init)?;
    let human = init
        .humans
        .first()
        .cloned()
        .ok_or_else(|| Error::invalid(format!("{}: parameter file has no frames", a.init.display())))?;
    if let Some(pose) = init.objects.as_ref().and_then(|o| o.first()) {
        object = pose.with_mesh(&object.mesh);
    }
    let scene = MotionScene {
        model: &model,
        cameras: &cameras,
        keypoints: &keypoints,
        contacts: &contacts,
    };
    let outcome = fit_motion(scene, &object, &human, &config.weights, &config.adam)?;
    let dir = output_dir(&config, a.out);
    let (humans, objects) = &outcome.result;
    io::save_params(&dir.join("motion_params.json"), &ParamSequence::new(humans.clone(), Some(objects)))?;
    io::save_metrics_csv(&dir.join("motion_metrics.csv"), &outcome.trace.losses)?;
    if a.obj {
        for (f, (h, o)) in humans.iter().zip(objects).enumerate() {
            write_posed_obj(&dir, &format!("{f:04}"), &model, h, Some(o))?;
        }
    }
    Ok(fit_summary("fit-motion", &outcome.trace))
}

// ------------------------------------------------- extract-contacts

fn extract_contacts_cmd(a: ExtractArgs) -> Result<Outcome> {
    let config = io::load_config(&a.config)?;
    let model = load_model(config.paths.rig.as_deref())?;
    let object_file = io::load_object(required(&config.paths.object, "object")?)?;
    let params = io::load_params(&a.params)?;
    let human = params.humans.get(a.frame).ok_or_else(|| {
        Error::invalid(format!("{} has {} frames, frame {} requested", a.params.display(), params.humans.len(), a.frame))
    })?;
    let object = match params.objects.as_ref().map(|o| o[a.frame]) {
        Some(pose) => pose.with_mesh(&object_file.mesh),
        None => object_file,
    };
    let c: &ContactConfig = &config.contact;
    let gates = contact_gates(c, &config.weights, &model, human.scale);
    let (set, diagnostics) = scene_contacts(&model, human, &object, c.n_samples.min(object.mesh.vertices.len()), c.seed_index, &gates)?;
    let out = a.out.unwrap_or_else(|| output_dir(&config, None).join("contacts.json"));
    io::save_contacts(&out, &set, &diagnostics)?;
    Ok(Outcome::Success(format!(
        "extract-contacts: {} valid pairs from {} samples x {} candidates -> {}",
        set.pairs.len(),
        set.sample_vertices.len(),
        model.contact_candidates().len(),
        out.display()
    )))
}

// -------------------------------------------------------------- eval

fn states(seq: &ParamSequence, mesh: &Arc<crate::mesh::TriMesh>, path: &Path) -> Result<Vec<ObjectState>> {
    seq.object_states(mesh)
        .ok_or_else(|| Error::invalid(format!("{}: parameter file has no object poses", path.display())))
}

fn eval_cmd(a: EvalArgs) -> Result<Outcome> {
    let config = io::load_config(&a.config)?;
    let model = load_model(config.paths.rig.as_deref())?;
    let cameras = io::load_cameras(required(&config.paths.cameras, "cameras")?)?;
    let contacts = io::load_contacts(required(&config.paths.contacts, "contacts")?)?;
    let mesh = io::load_object(required(&config.paths.object, "object")?)?.mesh;
    let recovered = io::load_params(&a.recovered)?;
    let truth = io::load_params(&a.truth)?;
    let used: Vec<Camera> = if a.views.is_empty() {
        cameras.clone()
    } else {
        a.views
            .iter()
            .map(|&v| {
                cameras
                    .get(v)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("view {v} has no camera ({} cameras)", cameras.len())))
            })
            .collect::<Result<_>>()?
    };
    let metrics = evaluate(
        &model,
        &used,
        &contacts,
        (&recovered.humans, &states(&recovered, &mesh, &a.recovered)?),
        (&truth.humans, &states(&truth, &mesh, &a.truth)?),
    )?;
    io::save_eval_metrics(&a.out, &metrics)?;
    io::write_text(&a.out.with_extension("csv"), &io::frame_metrics_csv(&metrics))?;
    Ok(Outcome::Success(format!(
        "eval: joint error {:.4e} (root-aligned {:.4e}), 2D error {:.4e}, contact distance {:.4e}, penetration {:.3}%, jitter {:.4e}",
        metrics.mean_joint_error,
        metrics.mean_joint_error_aligned,
        metrics.mean_reprojection_2d,
        metrics.mean_contact_distance,
        100.0 * metrics.mean_penetration_fraction,
        metrics.jitter
    )))
}

// -------------------------------------------------------- check-grad

/// Wraps an objective and scales its gradient, to prove the checker fails.
struct Corrupted<'a>(&'a dyn Objective);

impl Objective for Corrupted<'_> {
    fn evaluate(&self, params: &ParamVector) -> Result<LossBreakdown> {
        self.0.evaluate(params)
    }

    fn gradient(&self, params: &ParamVector) -> Result<Vec<f64>> {
        Ok(self.0.gradient(params)?.into_iter().map(|g| g * 1.01).collect())
    }

    fn local_value(&self, params: &ParamVector, entry: usize) -> Result<f64> {
        self.0.local_value(params, entry)
    }
}

#[derive(serde::Serialize)]
struct GradReportEntry {
    seed: u64,
    max_rel_error: f64,
    max_small_abs_error: f64,
    worst: Option<crate::gradients::FdEntry>,
}

/// Result of checking one random configuration.
pub fn check_gradient_case(model: &BodyModel, seed: u64, frames: usize, samples: usize, step: f64, corrupt: bool) -> Result<FdReport> {
    let case = GradientCase::random(model, seed, frames, samples)?;
    let objective: MotionObjective<'_> = case.objective(LossWeights::default())?;
    let params = case.params()?;
    if corrupt {
        finite_difference_check(&Corrupted(&objective), &params, step)
    } else {
        finite_difference_check(&objective, &params, step)
    }
}

fn check_grad_cmd(a: CheckGradArgs) -> Result<Outcome> {
    if a.configs == 0 {
        return Err(Error::invalid("--configs must be at least 1"));
    }
    let model = load_model(a.rig.as_deref())?;
    let start = std::time::Instant::now();
    let mut entries = Vec::new();
    for seed in a.first_seed..a.first_seed + a.configs {
        let report = check_gradient_case(&model, seed, a.frames, a.samples, a.step, a.corrupt_gradient)?;
        log::info!("seed {seed}: max relative error {:.3e}", report.max_rel_error);
        entries.push(GradReportEntry {
            seed,
            max_rel_error: report.max_rel_error,
            max_small_abs_error: report.max_small_abs_error,
            worst: report.worst().copied(),
        });
    }
    if let Some(path) = &a.report {
        let mut text = serde_json::to_string_pretty(&entries).expect("report serializes");
        text.push('\n');
        io::write_text(path, &text)?;
    }
    let worst = entries
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
        .expect("at least one configuration");
    let max_small = entries.iter().map(|e| e.max_small_abs_error).fold(0.0, f64::max);
    let pass = entries.iter().all(|e| e.max_rel_error < a.tol && e.max_small_abs_error < a.small_tol);
    let location = worst
        .worst
        .map(|e| format!(" at entry {} ({:?}, frame {:?})", e.index, e.block, e.frame))
        .unwrap_or_default();
    let line = format!(
        "check-grad: {} configurations, max relative error {:.3e} (tolerance {:.1e}) in seed {}{location}, max small-entry error {:.3e}, {:.1} s: {}",
        a.configs,
        worst.max_rel_error,
        a.tol,
        worst.seed,
        max_small,
        start.elapsed().as_secs_f64(),
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Success(line) } else { Outcome::Failure(line) })
}
